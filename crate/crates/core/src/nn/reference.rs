//! Exact quantized inference written as plain nested loops over
//! zero-point-centred codes. Used as the oracle for the engine.

use crate::error::{Error, Result};
use crate::fixed::div_round_half_even;

use super::engine::{argmax, Inference};
use super::model::{ConvLayer, DenseLayer, Layer, QuantParams, QuantizedModel, QuantizedTensor, Signal};

fn requantize(acc: i64, input: QuantParams, weights: QuantParams, output: QuantParams) -> u8 {
    let m = (input.scale * weights.scale) / output.scale;
    (f64::from(output.zero_point) + (acc as f64 * m).round_ties_even()).clamp(0.0, 255.0) as u8
}

fn conv_acc(layer: &ConvLayer, input: &[u8], shape: [usize; 3], za: u8) -> (Vec<i64>, [usize; 3]) {
    let [h, w, cin] = shape;
    let (kh, kw) = (layer.kernel[0], layer.kernel[1]);
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    let oh = (h + 2 * layer.padding - kh) / layer.stride + 1;
    let ow = (w + 2 * layer.padding - kw) / layer.stride + 1;
    let zw = i64::from(layer.weights.quant.zero_point);
    let za = i64::from(za);
    let mut out = vec![0i64; oh * ow * layer.out_channels];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..layer.out_channels {
                let mut acc = i64::from(layer.bias[o]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy as isize * s + ky as isize - p;
                        let ix = ox as isize * s + kx as isize - p;
                        let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize;
                        for c in 0..cin {
                            let a = if inside {
                                i64::from(input[(iy as usize * w + ix as usize) * cin + c])
                            } else {
                                za
                            };
                            let wt = i64::from(layer.weights.codes[((o * kh + ky) * kw + kx) * cin + c]);
                            acc += (wt - zw) * (a - za);
                        }
                    }
                }
                out[(oy * ow + ox) * layer.out_channels + o] = acc;
            }
        }
    }
    (out, [oh, ow, layer.out_channels])
}

fn dense_acc(layer: &DenseLayer, input: &[u8], za: u8) -> Vec<i64> {
    let zw = i64::from(layer.weights.quant.zero_point);
    (0..layer.out_features)
        .map(|o| {
            let row = &layer.weights.codes[o * layer.in_features..(o + 1) * layer.in_features];
            i64::from(layer.bias[o])
                + row
                    .iter()
                    .zip(input)
                    .map(|(&wt, &a)| (i64::from(wt) - zw) * (i64::from(a) - i64::from(za)))
                    .sum::<i64>()
        })
        .collect()
}

/// Exact convolution of one requantizing layer.
pub fn conv2d(layer: &ConvLayer, input: &QuantizedTensor) -> Result<QuantizedTensor> {
    let out_quant = layer
        .output
        .ok_or_else(|| Error::Shape(format!("{} has no output quantization", layer.name)))?;
    let [h, w, c] = input.shape[..] else {
        return Err(Error::Shape(format!("expected an HWC input, got {:?}", input.shape)));
    };
    let (acc, shape) = conv_acc(layer, &input.codes, [h, w, c], input.quant.zero_point);
    let codes = acc
        .into_iter()
        .map(|a| requantize(a, input.quant, layer.weights.quant, out_quant))
        .collect();
    QuantizedTensor::new(shape.to_vec(), codes, out_quant)
}

pub fn infer(model: &QuantizedModel, image: &[u8]) -> Result<Inference> {
    let mut codes = image.to_vec();
    let mut shape = model.input_shape.to_vec();
    let mut logits: Option<Vec<i64>> = None;
    for (i, layer) in model.layers.iter().enumerate() {
        let quant = match &model.signals[i] {
            Signal::Codes { quant, .. } => Some(*quant),
            _ => None,
        };
        match layer {
            Layer::Conv2d(c) => {
                let q = quant.ok_or_else(|| Error::Shape("conv on logits".into()))?;
                let (acc, s) = conv_acc(c, &codes, [shape[0], shape[1], shape[2]], q.zero_point);
                shape = s.to_vec();
                match c.output {
                    Some(out) => codes = acc.iter().map(|&a| requantize(a, q, c.weights.quant, out)).collect(),
                    None => logits = Some(acc),
                }
            }
            Layer::Dense(d) => {
                let q = quant.ok_or_else(|| Error::Shape("dense on logits".into()))?;
                let acc = dense_acc(d, &codes, q.zero_point);
                shape = vec![d.out_features];
                match d.output {
                    Some(out) => codes = acc.iter().map(|&a| requantize(a, q, d.weights.quant, out)).collect(),
                    None => logits = Some(acc),
                }
            }
            Layer::Relu => {
                let zp = quant.map_or(0, |q| q.zero_point);
                for c in &mut codes {
                    if *c < zp {
                        *c = zp;
                    }
                }
            }
            Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                let (h, w, ch) = (shape[0], shape[1], shape[2]);
                let oh = (h - size) / stride + 1;
                let ow = (w - size) / stride + 1;
                let mut out = vec![0u8; oh * ow * ch];
                for y in 0..oh {
                    for x in 0..ow {
                        for c in 0..ch {
                            let vals = (0..size * size)
                                .map(|t| codes[((y * stride + t / size) * w + x * stride + t % size) * ch + c]);
                            out[(y * ow + x) * ch + c] = if matches!(layer, Layer::MaxPool { .. }) {
                                vals.max().unwrap_or(0)
                            } else {
                                let sum: i128 = vals.map(i128::from).sum();
                                div_round_half_even(sum, (size * size) as i128) as u8
                            };
                        }
                    }
                }
                codes = out;
                shape = vec![oh, ow, ch];
            }
            Layer::Flatten => shape = vec![codes.len()],
            Layer::Argmax => {}
        }
    }
    let logits = logits.unwrap_or_else(|| codes.iter().map(|&c| i64::from(c)).collect());
    Ok(Inference {
        class: argmax(&logits),
        logits,
    })
}
