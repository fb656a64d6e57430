use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-tensor affine quantization: `real = scale · (code - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub fn dequantize(&self, code: u8) -> f64 {
        self.scale * (f64::from(code) - f64::from(self.zero_point))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub quant: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<u8>, quant: QuantParams) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != codes.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} values but {} codes were given",
                codes.len()
            )));
        }
        Ok(Self { shape, codes, quant })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.quant.dequantize(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, kh, kw, in_channels]`.
    pub weights: QuantizedTensor,
    pub bias: Vec<i32>,
    /// `None` means the layer emits raw int32 accumulators.
    pub output: Option<QuantParams>,
}

impl ConvLayer {
    /// Filter length `kh · kw · cin`.
    pub fn k(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.in_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = (self.kernel[0], self.kernel[1]);
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw || self.stride == 0 {
            return Err(Error::Shape(format!(
                "{}: {kh}x{kw} kernel does not fit a padded {ph}x{pw} input",
                self.name
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`.
    pub weights: QuantizedTensor,
    pub bias: Vec<i32>,
    pub output: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(ConvLayer),
    Dense(DenseLayer),
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    Argmax,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Argmax => "argmax",
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }
}

/// Shape and quantization of the value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    /// Quantized tensor of shape `[h, w, c]` or `[n]`.
    Codes { shape: Vec<usize>, quant: QuantParams },
    /// Raw accumulators.
    Logits { len: usize },
    /// Class index.
    Class,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: String,
    pub input_shape: [usize; 3],
    pub input_quant: QuantParams,
    pub layers: Vec<Layer>,
    pub metadata: serde_json::Value,
    /// Signal entering each layer, filled by [`QuantizedModel::validate`].
    pub signals: Vec<Signal>,
}

impl QuantizedModel {
    pub fn new(
        name: String,
        input_shape: [usize; 3],
        input_quant: QuantParams,
        layers: Vec<Layer>,
        metadata: serde_json::Value,
    ) -> Result<Self> {
        let mut model = Self {
            name,
            input_shape,
            input_quant,
            layers,
            metadata,
            signals: Vec::new(),
        };
        model.signals = model.infer_signals()?;
        Ok(model)
    }

    /// Input signal of every layer plus the final output signal.
    fn infer_signals(&self) -> Result<Vec<Signal>> {
        let mut signals = Vec::with_capacity(self.layers.len() + 1);
        let mut sig = Signal::Codes {
            shape: self.input_shape.to_vec(),
            quant: self.input_quant,
        };
        for layer in &self.layers {
            signals.push(sig.clone());
            sig = next_signal(layer, &sig)?;
        }
        signals.push(sig);
        Ok(signals)
    }

    /// Quantization of the input to layer `i`.
    pub fn input_quant_of(&self, i: usize) -> Option<QuantParams> {
        match self.signals.get(i)? {
            Signal::Codes { quant, .. } => Some(*quant),
            _ => None,
        }
    }

    pub fn output_signal(&self) -> &Signal {
        self.signals.last().expect("signals include the output")
    }

    /// One line per layer: index, kind, name and output shape.
    pub fn manifest_lines(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let out = match &self.signals[i + 1] {
                    Signal::Codes { shape, .. } => format!("{shape:?}"),
                    Signal::Logits { len } => format!("logits[{len}]"),
                    Signal::Class => "class".into(),
                };
                let name = match layer {
                    Layer::Conv2d(c) => c.name.as_str(),
                    Layer::Dense(d) => d.name.as_str(),
                    _ => "",
                };
                format!("{i:2} {:<8} {name:<8} -> {out}", layer.kind_name())
            })
            .collect()
    }
}

fn next_signal(layer: &Layer, sig: &Signal) -> Result<Signal> {
    let codes = |what: &str| -> Result<(Vec<usize>, QuantParams)> {
        match sig {
            Signal::Codes { shape, quant } => Ok((shape.clone(), *quant)),
            _ => Err(Error::Shape(format!("{what} needs a quantized input"))),
        }
    };
    let out = match layer {
        Layer::Conv2d(c) => {
            let (shape, _) = codes("conv2d")?;
            let [h, w, cin] = shape[..] else {
                return Err(Error::Shape(format!("{}: expected an HWC input, got {shape:?}", c.name)));
            };
            if cin != c.in_channels {
                return Err(Error::Shape(format!("{}: {cin} input channels, expected {}", c.name, c.in_channels)));
            }
            check_weights(&c.name, &c.weights, &[c.out_channels, c.kernel[0], c.kernel[1], c.in_channels], &c.bias)?;
            let (oh, ow) = c.output_hw(h, w)?;
            match c.output {
                Some(quant) => Signal::Codes { shape: vec![oh, ow, c.out_channels], quant },
                None => Signal::Logits { len: oh * ow * c.out_channels },
            }
        }
        Layer::Dense(d) => {
            let (shape, _) = codes("dense")?;
            if shape.len() != 1 || shape[0] != d.in_features {
                return Err(Error::Shape(format!("{}: input {shape:?}, expected [{}]", d.name, d.in_features)));
            }
            check_weights(&d.name, &d.weights, &[d.out_features, d.in_features], &d.bias)?;
            match d.output {
                Some(quant) => Signal::Codes { shape: vec![d.out_features], quant },
                None => Signal::Logits { len: d.out_features },
            }
        }
        Layer::Relu => {
            let (shape, quant) = codes("relu")?;
            Signal::Codes { shape, quant }
        }
        Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
            let (shape, quant) = codes(layer.kind_name())?;
            let [h, w, c] = shape[..] else {
                return Err(Error::Shape(format!("pooling needs an HWC input, got {shape:?}")));
            };
            if *size == 0 || *stride == 0 || h < *size || w < *size {
                return Err(Error::Shape(format!("{size}x{size} pooling does not fit {h}x{w}")));
            }
            Signal::Codes { shape: vec![(h - size) / stride + 1, (w - size) / stride + 1, c], quant }
        }
        Layer::Flatten => {
            let (shape, quant) = codes("flatten")?;
            Signal::Codes { shape: vec![shape.iter().product()], quant }
        }
        Layer::Argmax => match sig {
            Signal::Codes { .. } | Signal::Logits { .. } => Signal::Class,
            Signal::Class => return Err(Error::Shape("argmax applied twice".into())),
        },
    };
    Ok(out)
}

fn check_weights(name: &str, weights: &QuantizedTensor, shape: &[usize], bias: &[i32]) -> Result<()> {
    if weights.shape != shape {
        return Err(Error::Shape(format!("{name}: weights {:?}, expected {shape:?}", weights.shape)));
    }
    if bias.len() != shape[0] {
        return Err(Error::Shape(format!("{name}: {} biases for {} filters", bias.len(), shape[0])));
    }
    Ok(())
}
