//! Quantized inference with approximate multipliers.
//!
//! Accumulators follow `B + Σ (W - zw)(A - za)`. Expanded, only `Σ W·A` is a
//! product of codes; it goes through the approximate multiplier and the control
//! variate. The cross terms `za·ΣW`, `zw·ΣA` and `k·za·zw` are computed exactly.

use serde::{Deserialize, Serialize};

use crate::axmult::{AxMultConfig, ProductTable};
use crate::covar::{derive_constants, ConstantPrecision, Filter, FilterConstants};
use crate::error::{Error, Result};
use crate::fixed::div_round_half_even;

use super::format::Dataset;
use super::model::{ConvLayer, DenseLayer, Layer, QuantParams, QuantizedModel, QuantizedTensor, Signal};

/// Where the offset `C0` enters the accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasPolicy {
    /// Added to the bias when constants are derived.
    #[default]
    Folded,
    /// Added to every accumulator at run time.
    Runtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mult: AxMultConfig,
    pub variate: bool,
    #[serde(default)]
    pub precision: ConstantPrecision,
    #[serde(default)]
    pub bias_policy: BiasPolicy,
}

impl InferenceConfig {
    pub fn new(mult: AxMultConfig, variate: bool) -> Self {
        Self {
            mult,
            variate,
            precision: ConstantPrecision::Fixed,
            bias_policy: BiasPolicy::Folded,
        }
    }

    pub fn exact() -> Self {
        Self::new(AxMultConfig::exact(), false)
    }

    fn uses_variate(&self) -> bool {
        self.variate && !self.mult.is_exact()
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    /// Final accumulators, or final codes if the last compute layer requantizes.
    pub logits: Vec<i64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMse {
    pub layer: usize,
    pub name: String,
    /// Mean squared accumulator difference against the exact path.
    pub mse: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_layer_mse: Vec<LayerMse>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Conv {
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Dense,
}

#[derive(Debug, Clone)]
struct PreparedCompute {
    name: String,
    geometry: Geometry,
    k: usize,
    outputs: usize,
    /// `[outputs][k]` weight codes.
    weights: Vec<u8>,
    za: u8,
    zw: i64,
    /// `B - za·ΣW + k·za·zw` per filter.
    base_bias: Vec<i64>,
    /// Bias used by the approximate path, with `C0` when folded.
    approx_bias: Vec<i64>,
    consts: Vec<FilterConstants>,
    requant: Option<Requant>,
}

#[derive(Debug, Clone, Copy)]
struct Requant {
    multiplier: f64,
    zero_point: u8,
}

impl Requant {
    fn new(input: QuantParams, weights: QuantParams, output: QuantParams) -> Self {
        Self {
            multiplier: (input.scale * weights.scale) / output.scale,
            zero_point: output.zero_point,
        }
    }

    fn apply(&self, acc: i64) -> u8 {
        let v = f64::from(self.zero_point) + (acc as f64 * self.multiplier).round_ties_even();
        v.clamp(0.0, 255.0) as u8
    }
}

impl PreparedCompute {
    #[allow(clippy::too_many_arguments)]
    fn build(
        name: &str,
        geometry: Geometry,
        weights: &QuantizedTensor,
        bias: &[i32],
        outputs: usize,
        input: QuantParams,
        output: Option<QuantParams>,
        cfg: &InferenceConfig,
    ) -> Result<Self> {
        let k = weights.len() / outputs;
        let za = input.zero_point;
        let zw = i64::from(weights.quant.zero_point);
        let mut base_bias = Vec::with_capacity(outputs);
        let mut approx_bias = Vec::with_capacity(outputs);
        let mut consts = Vec::with_capacity(outputs);
        for (o, row) in weights.codes.chunks_exact(k).enumerate() {
            let sum_w: i64 = row.iter().map(|&w| i64::from(w)).sum();
            let base = i64::from(bias[o]) - i64::from(za) * sum_w + k as i64 * i64::from(za) * zw;
            let c = if cfg.uses_variate() {
                derive_constants(&cfg.mult, &Filter::new(row.to_vec(), base)?, cfg.precision)?
            } else {
                FilterConstants::zero(cfg.mult, cfg.precision)
            };
            approx_bias.push(match cfg.bias_policy {
                BiasPolicy::Folded => c.fold_bias(base),
                BiasPolicy::Runtime => base,
            });
            base_bias.push(base);
            consts.push(c);
        }
        Ok(Self {
            name: name.to_owned(),
            geometry,
            k,
            outputs,
            weights: weights.codes.clone(),
            za,
            zw,
            base_bias,
            approx_bias,
            consts,
            requant: output.map(|o| Requant::new(input, weights.quant, o)),
        })
    }

    fn conv(layer: &ConvLayer, input: QuantParams, cfg: &InferenceConfig) -> Result<Self> {
        let geometry = Geometry::Conv {
            kh: layer.kernel[0],
            kw: layer.kernel[1],
            stride: layer.stride,
            pad: layer.padding,
        };
        Self::build(
            &layer.name,
            geometry,
            &layer.weights,
            &layer.bias,
            layer.out_channels,
            input,
            layer.output,
            cfg,
        )
    }

    fn dense(layer: &DenseLayer, input: QuantParams, cfg: &InferenceConfig) -> Result<Self> {
        Self::build(
            &layer.name,
            Geometry::Dense,
            &layer.weights,
            &layer.bias,
            layer.out_features,
            input,
            layer.output,
            cfg,
        )
    }

    /// Visit every im2col patch of `input` in output order.
    fn for_each_patch(&self, input: &[u8], shape: &[usize], mut f: impl FnMut(&[u8])) -> Vec<usize> {
        match self.geometry {
            Geometry::Dense => {
                f(input);
                vec![self.outputs]
            }
            Geometry::Conv { kh, kw, stride, pad } => {
                let (h, w, cin) = (shape[0], shape[1], shape[2]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let mut patch = vec![self.za; self.k];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut j = 0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    patch[j..j + cin].fill(self.za);
                                } else {
                                    let at = (iy as usize * w + ix as usize) * cin;
                                    patch[j..j + cin].copy_from_slice(&input[at..at + cin]);
                                }
                                j += cin;
                            }
                        }
                        f(&patch);
                    }
                }
                vec![oh, ow, self.outputs]
            }
        }
    }

    fn exact_accumulators(&self, input: &[u8], shape: &[usize]) -> (Vec<i64>, Vec<usize>) {
        let mut acc = Vec::new();
        let out_shape = self.for_each_patch(input, shape, |patch| {
            let sum_a: i64 = patch.iter().map(|&a| i64::from(a)).sum();
            for (o, row) in self.weights.chunks_exact(self.k).enumerate() {
                let dot: i64 = row
                    .iter()
                    .zip(patch)
                    .map(|(&w, &a)| i64::from(u32::from(w) * u32::from(a)))
                    .sum();
                acc.push(dot - self.zw * sum_a + self.base_bias[o]);
            }
        });
        (acc, out_shape)
    }

    fn approx_accumulators(
        &self,
        table: &ProductTable,
        cfg: &InferenceConfig,
        input: &[u8],
        shape: &[usize],
    ) -> (Vec<i64>, Vec<usize>) {
        let variate = cfg.uses_variate();
        let runtime_c0 = variate && cfg.bias_policy == BiasPolicy::Runtime;
        let mut acc = Vec::new();
        let out_shape = self.for_each_patch(input, shape, |patch| {
            let sum_a: i64 = patch.iter().map(|&a| i64::from(a)).sum();
            let sum_x: u64 = if variate {
                patch.iter().map(|&a| u64::from(table.x(a))).sum()
            } else {
                0
            };
            for (o, row) in self.weights.chunks_exact(self.k).enumerate() {
                let dot: u64 = row
                    .iter()
                    .zip(patch)
                    .map(|(&w, &a)| u64::from(table.row(w)[usize::from(a)]))
                    .sum();
                let mut v = dot as i64 - self.zw * sum_a + self.approx_bias[o];
                if variate {
                    let c = &self.consts[o];
                    v += c.variate(sum_x);
                    if runtime_c0 {
                        v += c.c0;
                    }
                }
                acc.push(v);
            }
        });
        (acc, out_shape)
    }
}

/// Model plus everything derived from one [`InferenceConfig`].
#[derive(Debug)]
pub struct PreparedModel<'m> {
    model: &'m QuantizedModel,
    cfg: InferenceConfig,
    table: ProductTable,
    compute: Vec<Option<PreparedCompute>>,
}

enum Value {
    Codes(Vec<u8>, Vec<usize>),
    Logits(Vec<i64>),
    Class(usize, Vec<i64>),
}

impl<'m> PreparedModel<'m> {
    pub fn new(model: &'m QuantizedModel, cfg: InferenceConfig) -> Result<Self> {
        let mut compute = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let prepared = match layer {
                Layer::Conv2d(c) => Some(PreparedCompute::conv(c, input_quant(model, i)?, &cfg)?),
                Layer::Dense(d) => Some(PreparedCompute::dense(d, input_quant(model, i)?, &cfg)?),
                _ => None,
            };
            compute.push(prepared);
        }
        Ok(Self {
            model,
            cfg,
            table: ProductTable::new(cfg.mult),
            compute,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    pub fn model(&self) -> &QuantizedModel {
        self.model
    }

    /// Constants of every filter of layer `i`, if it is a compute layer.
    pub fn constants(&self, i: usize) -> Option<&[FilterConstants]> {
        self.compute.get(i)?.as_ref().map(|c| c.consts.as_slice())
    }

    fn check_input(&self, image: &[u8]) -> Result<()> {
        let expected: usize = self.model.input_shape.iter().product();
        if image.len() != expected {
            return Err(Error::Shape(format!(
                "input has {} values, model expects {:?}",
                image.len(),
                self.model.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass through the approximate path.
    pub fn infer(&self, image: &[u8]) -> Result<Inference> {
        self.run(image, false, |_, _, _| {})
    }

    /// Forward pass through the exact path.
    pub fn infer_exact(&self, image: &[u8]) -> Result<Inference> {
        self.run(image, true, |_, _, _| {})
    }

    /// Runs the exact path. At each compute layer the approximate accumulators
    /// for the same exact input are handed to `visit` with the exact ones.
    pub fn layer_errors(&self, image: &[u8], mut visit: impl FnMut(usize, &[i64], &[i64])) -> Result<Inference> {
        self.run(image, true, |i, input, shape| {
            let c = self.compute[i].as_ref().expect("compute layer");
            let (exact, _) = c.exact_accumulators(input, shape);
            let (approx, _) = c.approx_accumulators(&self.table, &self.cfg, input, shape);
            visit(i, &exact, &approx);
        })
    }

    fn run(&self, image: &[u8], exact: bool, mut probe: impl FnMut(usize, &[u8], &[usize])) -> Result<Inference> {
        self.check_input(image)?;
        let mut value = Value::Codes(image.to_vec(), self.model.input_shape.to_vec());
        for (i, layer) in self.model.layers.iter().enumerate() {
            value = match (layer, value) {
                (Layer::Conv2d(_) | Layer::Dense(_), Value::Codes(codes, shape)) => {
                    let c = self.compute[i].as_ref().expect("compute layer");
                    probe(i, &codes, &shape);
                    let (acc, out_shape) = if exact {
                        c.exact_accumulators(&codes, &shape)
                    } else {
                        c.approx_accumulators(&self.table, &self.cfg, &codes, &shape)
                    };
                    match c.requant {
                        Some(rq) => Value::Codes(acc.into_iter().map(|a| rq.apply(a)).collect(), out_shape),
                        None => Value::Logits(acc),
                    }
                }
                (Layer::Relu, Value::Codes(mut codes, shape)) => {
                    let zp = signal_zero_point(&self.model.signals[i]);
                    codes.iter_mut().for_each(|c| *c = (*c).max(zp));
                    Value::Codes(codes, shape)
                }
                (Layer::MaxPool { size, stride }, Value::Codes(codes, shape)) => {
                    let (out, s) = pool(&codes, &shape, *size, *stride, |w| i64::from(*w.iter().max().expect("window")));
                    Value::Codes(out, s)
                }
                (Layer::AvgPool { size, stride }, Value::Codes(codes, shape)) => {
                    let (out, s) = pool(&codes, &shape, *size, *stride, |w| {
                        let sum: i128 = w.iter().map(|&v| i128::from(v)).sum();
                        div_round_half_even(sum, w.len() as i128) as i64
                    });
                    Value::Codes(out, s)
                }
                (Layer::Flatten, Value::Codes(codes, _)) => {
                    let n = codes.len();
                    Value::Codes(codes, vec![n])
                }
                (Layer::Argmax, Value::Codes(codes, _)) => {
                    let logits: Vec<i64> = codes.iter().map(|&c| i64::from(c)).collect();
                    Value::Class(argmax(&logits), logits)
                }
                (Layer::Argmax, Value::Logits(logits)) => Value::Class(argmax(&logits), logits),
                (layer, _) => {
                    return Err(Error::Shape(format!("layer {i} ({}) got an incompatible input", layer.kind_name())))
                }
            };
        }
        Ok(match value {
            Value::Class(class, logits) => Inference { logits, class },
            Value::Logits(logits) => Inference { class: argmax(&logits), logits },
            Value::Codes(codes, _) => {
                let logits: Vec<i64> = codes.iter().map(|&c| i64::from(c)).collect();
                Inference { class: argmax(&logits), logits }
            }
        })
    }

    /// Top-1 accuracy on `dataset`. With `layer_mse` the per-layer accumulator
    /// error is also measured, which roughly doubles the cost.
    pub fn evaluate(&self, dataset: &Dataset, layer_mse: bool) -> Result<EvalReport> {
        if dataset.shape != self.model.input_shape {
            return Err(Error::Shape(format!(
                "dataset images are {:?}, model expects {:?}",
                dataset.shape, self.model.input_shape
            )));
        }
        let mut predictions = Vec::with_capacity(dataset.len());
        let mut correct = 0;
        let mut mse = MseAccumulator::new(self);
        for i in 0..dataset.len() {
            let image = dataset.image(i);
            let out = self.infer(image)?;
            if out.class == usize::from(dataset.labels[i]) {
                correct += 1;
            }
            predictions.push(out.class);
            if layer_mse {
                self.layer_errors(image, |l, e, a| mse.push(l, e, a))?;
            }
        }
        let total = dataset.len();
        Ok(EvalReport {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            per_layer_mse: if layer_mse { mse.finish() } else { Vec::new() },
            predictions,
        })
    }

    /// Per-layer accumulator MSE over `images`, each fed through the exact path.
    pub fn layer_mse<'a>(&self, images: impl IntoIterator<Item = &'a [u8]>) -> Result<Vec<LayerMse>> {
        let mut mse = MseAccumulator::new(self);
        for image in images {
            self.layer_errors(image, |l, e, a| mse.push(l, e, a))?;
        }
        Ok(mse.finish())
    }
}

struct MseAccumulator {
    layers: Vec<(usize, String, f64, u64)>,
}

impl MseAccumulator {
    fn new(model: &PreparedModel<'_>) -> Self {
        let layers = model
            .compute
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c.name.clone(), 0.0, 0)))
            .collect();
        Self { layers }
    }

    fn push(&mut self, layer: usize, exact: &[i64], approx: &[i64]) {
        let slot = self.layers.iter_mut().find(|l| l.0 == layer).expect("compute layer");
        for (e, a) in exact.iter().zip(approx) {
            let d = (e - a) as f64;
            slot.2 += d * d;
        }
        slot.3 += exact.len() as u64;
    }

    fn finish(self) -> Vec<LayerMse> {
        self.layers
            .into_iter()
            .map(|(layer, name, sum, count)| LayerMse {
                layer,
                name,
                mse: if count == 0 { 0.0 } else { sum / count as f64 },
                count,
            })
            .collect()
    }
}

fn input_quant(model: &QuantizedModel, i: usize) -> Result<QuantParams> {
    model
        .input_quant_of(i)
        .ok_or_else(|| Error::Shape(format!("layer {i} needs a quantized input")))
}

fn signal_zero_point(sig: &Signal) -> u8 {
    match sig {
        Signal::Codes { quant, .. } => quant.zero_point,
        _ => 0,
    }
}

fn pool(
    codes: &[u8],
    shape: &[usize],
    size: usize,
    stride: usize,
    reduce: impl Fn(&[u8]) -> i64,
) -> (Vec<u8>, Vec<usize>) {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut window = Vec::with_capacity(size * size);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                window.clear();
                for dy in 0..size {
                    for dx in 0..size {
                        window.push(codes[((oy * stride + dy) * w + ox * stride + dx) * c + ch]);
                    }
                }
                out.push(reduce(&window) as u8);
            }
        }
    }
    (out, vec![oh, ow, c])
}

/// Index of the first maximum.
pub fn argmax(values: &[i64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One convolution layer on its own. The layer must requantize its output.
pub fn conv2d_approx(layer: &ConvLayer, input: &QuantizedTensor, cfg: &InferenceConfig) -> Result<QuantizedTensor> {
    let Some(out_quant) = layer.output else {
        return Err(Error::Shape(format!("{} has no output quantization", layer.name)));
    };
    let [h, w, cin] = input.shape[..] else {
        return Err(Error::Shape(format!("expected an HWC input, got {:?}", input.shape)));
    };
    if cin != layer.in_channels {
        return Err(Error::Shape(format!("{cin} input channels, {} expects {}", layer.name, layer.in_channels)));
    }
    layer.output_hw(h, w)?;
    let prepared = PreparedCompute::conv(layer, input.quant, cfg)?;
    let table = ProductTable::new(cfg.mult);
    let (acc, shape) = prepared.approx_accumulators(&table, cfg, &input.codes, &input.shape);
    let rq = prepared.requant.expect("output quantization present");
    QuantizedTensor::new(shape, acc.into_iter().map(|a| rq.apply(a)).collect(), out_quant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axmult::MultKind;
    use crate::nn::reference;
    use crate::stats::seeded_rng;
    use rand::Rng;

    fn q(scale: f64, zp: u8) -> QuantParams {
        QuantParams { scale, zero_point: zp }
    }

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, quant: QuantParams) -> QuantizedTensor {
        let n = shape.iter().product();
        let codes = (0..n).map(|_| rng.random()).collect();
        QuantizedTensor::new(shape, codes, quant).unwrap()
    }

    fn small_model(seed: u64) -> QuantizedModel {
        let mut rng = seeded_rng(seed, 7);
        let conv1 = ConvLayer {
            name: "conv1".into(),
            kernel: [3, 3],
            in_channels: 1,
            out_channels: 4,
            stride: 1,
            padding: 1,
            weights: random_tensor(&mut rng, vec![4, 3, 3, 1], q(0.01, 128)),
            bias: (0..4).map(|_| rng.random_range(-500..500)).collect(),
            output: Some(q(0.05, 3)),
        };
        let conv2 = ConvLayer {
            name: "conv2".into(),
            kernel: [3, 3],
            in_channels: 4,
            out_channels: 6,
            stride: 1,
            padding: 0,
            weights: random_tensor(&mut rng, vec![6, 3, 3, 4], q(0.01, 120)),
            bias: (0..6).map(|_| rng.random_range(-500..500)).collect(),
            output: Some(q(0.1, 0)),
        };
        let dense = DenseLayer {
            name: "fc".into(),
            in_features: 24,
            out_features: 5,
            weights: random_tensor(&mut rng, vec![5, 24], q(0.02, 131)),
            bias: (0..5).map(|_| rng.random_range(-500..500)).collect(),
            output: None,
        };
        QuantizedModel::new(
            "toy".into(),
            [6, 6, 1],
            q(1.0 / 255.0, 0),
            vec![
                Layer::Conv2d(conv1),
                Layer::Relu,
                Layer::Conv2d(conv2),
                Layer::Relu,
                Layer::MaxPool { size: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense(dense),
                Layer::Argmax,
            ],
            serde_json::Value::Null,
        )
        .unwrap()
    }

    fn random_images(seed: u64, n: usize, len: usize) -> Vec<Vec<u8>> {
        let mut rng = seeded_rng(seed, 0);
        (0..n).map(|_| (0..len).map(|_| rng.random()).collect()).collect()
    }

    #[test]
    fn exact_config_matches_reference() {
        let model = small_model(1);
        for cfg in [
            AxMultConfig::exact(),
            AxMultConfig::new(MultKind::Perforated, 0).unwrap(),
            AxMultConfig::new(MultKind::Truncated, 0).unwrap(),
        ] {
            for variate in [false, true] {
                let prepared = PreparedModel::new(&model, InferenceConfig::new(cfg, variate)).unwrap();
                for image in random_images(2, 20, 36) {
                    let want = reference::infer(&model, &image).unwrap();
                    assert_eq!(prepared.infer(&image).unwrap(), want);
                    assert_eq!(prepared.infer_exact(&image).unwrap(), want);
                }
            }
        }
    }

    #[test]
    fn bias_folding_matches_runtime_offset() {
        let model = small_model(3);
        for cfg in crate::stats::reference_grid() {
            let folded = PreparedModel::new(&model, InferenceConfig::new(cfg, true)).unwrap();
            let runtime = PreparedModel::new(
                &model,
                InferenceConfig {
                    bias_policy: BiasPolicy::Runtime,
                    ..InferenceConfig::new(cfg, true)
                },
            )
            .unwrap();
            for image in random_images(4, 5, 36) {
                assert_eq!(folded.infer(&image).unwrap(), runtime.infer(&image).unwrap());
            }
        }
    }

    #[test]
    fn dense_layer_uses_corrected_dot_semantics() {
        let mut rng = seeded_rng(8, 0);
        let weights = random_tensor(&mut rng, vec![3, 40], q(0.5, 0));
        let layer = DenseLayer {
            name: "d".into(),
            in_features: 40,
            out_features: 3,
            weights: weights.clone(),
            bias: vec![100, -7, 0],
            output: None,
        };
        let model = QuantizedModel::new(
            "dense".into(),
            [1, 1, 40],
            q(1.0, 0),
            vec![Layer::Flatten, Layer::Dense(layer)],
            serde_json::Value::Null,
        )
        .unwrap();
        for cfg in crate::stats::reference_grid() {
            let prepared = PreparedModel::new(&model, InferenceConfig::new(cfg, true)).unwrap();
            let image: Vec<u8> = (0..40).map(|_| rng.random()).collect();
            let out = prepared.infer(&image).unwrap();
            for (o, row) in weights.codes.chunks_exact(40).enumerate() {
                let filter = Filter::new(row.to_vec(), [100, -7, 0][o]).unwrap();
                let want = crate::covar::corrected_dot(&cfg, &filter, &image).unwrap();
                assert_eq!(out.logits[o], want, "{cfg} filter {o}");
            }
        }
    }

    #[test]
    fn constant_filter_perforated_is_exact() {
        let mut rng = seeded_rng(9, 0);
        let layer = ConvLayer {
            name: "c".into(),
            kernel: [3, 3],
            in_channels: 2,
            out_channels: 3,
            stride: 1,
            padding: 1,
            weights: QuantizedTensor::new(
                vec![3, 3, 3, 2],
                [17u8, 200, 91].iter().flat_map(|&w| std::iter::repeat_n(w, 18)).collect(),
                q(0.01, 100),
            )
            .unwrap(),
            bias: vec![5, -60, 1000],
            output: Some(q(0.2, 10)),
        };
        let input = random_tensor(&mut rng, vec![5, 5, 2], q(0.03, 7));
        let exact = conv2d_approx(&layer, &input, &InferenceConfig::exact()).unwrap();
        for m in 1..8 {
            let cfg = AxMultConfig::new(MultKind::Perforated, m).unwrap();
            let out = conv2d_approx(&layer, &input, &InferenceConfig::new(cfg, true)).unwrap();
            assert_eq!(out, exact, "m={m}");
        }
    }

    #[test]
    fn conv2d_exact_matches_reference_layer() {
        let model = small_model(10);
        let Layer::Conv2d(conv) = &model.layers[0] else { unreachable!() };
        let mut rng = seeded_rng(11, 0);
        let input = random_tensor(&mut rng, vec![6, 6, 1], model.input_quant);
        let got = conv2d_approx(conv, &input, &InferenceConfig::exact()).unwrap();
        assert_eq!(got, reference::conv2d(conv, &input).unwrap());
    }

    #[test]
    fn variate_lowers_layer_mse_for_perforated() {
        let model = small_model(12);
        let images = random_images(13, 100, 36);
        for m in 1..=3 {
            let cfg = AxMultConfig::new(MultKind::Perforated, m).unwrap();
            let with = PreparedModel::new(&model, InferenceConfig::new(cfg, true)).unwrap();
            let without = PreparedModel::new(&model, InferenceConfig::new(cfg, false)).unwrap();
            let a = with.layer_mse(images.iter().map(Vec::as_slice)).unwrap();
            let b = without.layer_mse(images.iter().map(Vec::as_slice)).unwrap();
            assert_eq!(a.len(), 3);
            for (x, y) in a.iter().zip(&b) {
                assert!(x.mse <= y.mse, "m={m} {}: {} > {}", x.name, x.mse, y.mse);
            }
        }
    }

    #[test]
    fn evaluate_counts_and_is_deterministic() {
        let model = small_model(14);
        let images = random_images(15, 30, 36);
        let dataset = Dataset {
            shape: [6, 6, 1],
            images: images.concat(),
            labels: (0..30).map(|i| (i % 5) as u8).collect(),
        };
        let cfg = InferenceConfig::new(AxMultConfig::new(MultKind::Recursive, 3).unwrap(), true);
        let prepared = PreparedModel::new(&model, cfg).unwrap();
        let a = prepared.evaluate(&dataset, true).unwrap();
        let b = prepared.evaluate(&dataset, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, 30);
        assert_eq!(a.per_layer_mse.len(), 3);
        let expected = a
            .predictions
            .iter()
            .zip(&dataset.labels)
            .filter(|(p, l)| **p == usize::from(**l))
            .count();
        assert_eq!(a.correct, expected);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = small_model(16);
        let prepared = PreparedModel::new(&model, InferenceConfig::exact()).unwrap();
        assert!(matches!(prepared.infer(&[0; 35]), Err(Error::Shape(_))));
        let dataset = Dataset {
            shape: [5, 5, 1],
            images: vec![0; 25],
            labels: vec![0],
        };
        assert!(prepared.evaluate(&dataset, false).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1, 5, 5, 2]), 1);
        assert_eq!(argmax(&[-3]), 0);
    }
}
