//! Control-variate constants and the corrected dot product `G*`.
//!
//! For a filter with weights `W_j`, activations `A_j` and bias `B` the
//! corrected result is
//!
//! ```text
//! G* = B + C0 + sum_j AM(W_j, A_j) + round(C * sum_j x_j)
//! ```
//!
//! where `x_j` is the per-activation variate input from [`x_value`] and
//! `C`, `C0` depend only on the weights. `C0` is folded into the bias when the
//! constants are derived, so the runtime path only adds `C * sum x`.

use serde::{Deserialize, Serialize};

use crate::axmult::{self, multiply_approx, multiply_exact, x_value, AxMultConfig, MultKind};
use crate::error::{Error, Result};
use crate::fixed::{div_round_half_even, Ratio, C_FRAC_BITS, C_ONE};

/// Largest integer `C` the MAC⁺ multiplier port can take in port-width mode.
pub const PORT_C_MAX: i64 = 255;

/// How the constant `C` is quantized for the datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantPrecision {
    /// Fixed point with [`C_FRAC_BITS`] fractional bits.
    #[default]
    Fixed,
    /// Integer `C`, as fed to an 8-bit MAC⁺ multiplier port.
    PortWidth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    pub weights: Vec<u8>,
    pub bias: i64,
}

impl Filter {
    pub fn new(weights: Vec<u8>, bias: i64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyFilter);
        }
        Ok(Self { weights, bias })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn check_len(&self, activations: &[u8]) -> Result<()> {
        if activations.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                expected: self.weights.len(),
                actual: activations.len(),
            });
        }
        Ok(())
    }
}

/// Per-filter control-variate constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConstants {
    pub cfg: AxMultConfig,
    pub precision: ConstantPrecision,
    /// `C` in units of `2^-C_FRAC_BITS`.
    pub c_fixed: i64,
    /// Rounded bias offset, already folded into the bias by [`Self::fold_bias`].
    pub c0: i64,
    /// Unrounded `C`.
    pub c_exact: Ratio,
    /// Unrounded `C0`.
    pub c0_exact: Ratio,
    /// `2·Ŵ_j` per weight (truncated kind only, empty otherwise).
    pub w_hat_doubled: Vec<u32>,
    /// Set in port-width mode when `round(C)` does not fit the 8-bit port.
    pub width_violation: bool,
}

impl FilterConstants {
    pub fn zero(cfg: AxMultConfig, precision: ConstantPrecision) -> Self {
        Self {
            cfg,
            precision,
            c_fixed: 0,
            c0: 0,
            c_exact: Ratio::ZERO,
            c0_exact: Ratio::ZERO,
            w_hat_doubled: Vec::new(),
            width_violation: false,
        }
    }

    /// `C` as a real number (after quantization).
    pub fn c(&self) -> f64 {
        self.c_fixed as f64 / C_ONE as f64
    }

    /// `round(C · sum_x)` without the offset.
    pub fn variate(&self, sum_x: u64) -> i64 {
        div_round_half_even(i128::from(self.c_fixed) * i128::from(sum_x), C_ONE.into()) as i64
    }

    pub fn fold_bias(&self, bias: i64) -> i64 {
        bias + self.c0
    }
}

/// `Ŵ = ½ Σ_{i<m} (w mod 2^{m-i}) · 2^i`, the mean truncation error of weight
/// `w` over uniformly distributed activations. Only activation bits that exist
/// contribute, so the sum stops at bit 7 when `m > 8`.
pub fn w_hat(w: u8, m: u32) -> Ratio {
    Ratio::new(i64::from(w_hat_doubled(w, m)), 2)
}

pub(crate) fn w_hat_doubled(w: u8, m: u32) -> u32 {
    assert!(m < 2 * axmult::OPERAND_BITS - 1, "m={m} out of range");
    let w = u64::from(w);
    (0..m.min(axmult::OPERAND_BITS))
        .map(|i| (w & ((1u64 << (m - i)) - 1)) << i)
        .sum::<u64>() as u32
}

pub fn derive_constants(
    cfg: &AxMultConfig,
    filter: &Filter,
    precision: ConstantPrecision,
) -> Result<FilterConstants> {
    if filter.weights.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if cfg.is_exact() {
        return Ok(FilterConstants::zero(*cfg, precision));
    }
    let k = filter.k() as i64;
    let m = cfg.m();
    let mask = (1i64 << m) - 1;
    let mut w_hats = Vec::new();
    let (c_exact, c0_exact) = match cfg.kind() {
        MultKind::Perforated => {
            let sum: i64 = filter.weights.iter().map(|&w| i64::from(w)).sum();
            (Ratio::new(sum, k), Ratio::ZERO)
        }
        MultKind::Recursive => {
            let sum: i64 = filter.weights.iter().map(|&w| i64::from(w) & mask).sum();
            (Ratio::new(sum, k), Ratio::ZERO)
        }
        MultKind::Truncated => {
            w_hats = filter.weights.iter().map(|&w| w_hat_doubled(w, m)).collect::<Vec<u32>>();
            let sum: i64 = w_hats.iter().map(|&v| i64::from(v)).sum();
            // P(x = 0) = 2^-min(m, 8)
            let zero_bits = m.min(axmult::OPERAND_BITS);
            (Ratio::new(sum, 2 * k), Ratio::new(sum, 2i64 << zero_bits))
        }
        MultKind::Exact => unreachable!("handled above"),
    };
    let (c_fixed, width_violation) = match precision {
        ConstantPrecision::Fixed => (c_exact.to_fixed(C_FRAC_BITS), false),
        ConstantPrecision::PortWidth => {
            let c = c_exact.round();
            (c * C_ONE, c > PORT_C_MAX)
        }
    };
    Ok(FilterConstants {
        cfg: *cfg,
        precision,
        c_fixed,
        c0: c0_exact.round(),
        c_exact,
        c0_exact,
        w_hat_doubled: w_hats,
        width_violation,
    })
}

/// `V = round(C · sum_x + C0)`.
pub fn control_variate(consts: &FilterConstants, sum_x: u64) -> i64 {
    consts.variate(sum_x) + consts.c0
}

/// `Σ x_value(A_j)`; zero for exact configurations.
pub fn sum_x(cfg: &AxMultConfig, activations: &[u8]) -> u64 {
    if cfg.kind() == MultKind::Exact {
        return 0;
    }
    activations
        .iter()
        .map(|&a| u64::from(x_value(cfg, a).expect("approximate kind")))
        .sum()
}

/// `G = B + Σ W_j·A_j`.
pub fn exact_dot(filter: &Filter, activations: &[u8]) -> Result<i64> {
    filter.check_len(activations)?;
    Ok(filter.bias
        + filter
            .weights
            .iter()
            .zip(activations)
            .map(|(&w, &a)| i64::from(multiply_exact(w, a)))
            .sum::<i64>())
}

/// `B + Σ AM(W_j, A_j)`, the uncorrected approximate result.
pub fn approx_dot(cfg: &AxMultConfig, filter: &Filter, activations: &[u8]) -> Result<i64> {
    filter.check_len(activations)?;
    Ok(filter.bias
        + filter
            .weights
            .iter()
            .zip(activations)
            .map(|(&w, &a)| i64::from(multiply_approx(cfg, w, a).value()))
            .sum::<i64>())
}

/// `G*` using constants derived with [`ConstantPrecision::Fixed`].
pub fn corrected_dot(cfg: &AxMultConfig, filter: &Filter, activations: &[u8]) -> Result<i64> {
    let consts = derive_constants(cfg, filter, ConstantPrecision::Fixed)?;
    corrected_dot_with(&consts, filter, activations)
}

/// `G*` for precomputed constants.
pub fn corrected_dot_with(
    consts: &FilterConstants,
    filter: &Filter,
    activations: &[u8],
) -> Result<i64> {
    let cfg = &consts.cfg;
    let folded = Filter {
        weights: filter.weights.clone(),
        bias: consts.fold_bias(filter.bias),
    };
    let approx = approx_dot(cfg, &folded, activations)?;
    Ok(approx + consts.variate(sum_x(cfg, activations)))
}

/// Corrected-convolution error `G - G*`.
pub fn conv_error(cfg: &AxMultConfig, filter: &Filter, activations: &[u8]) -> Result<i64> {
    Ok(exact_dot(filter, activations)? - corrected_dot(cfg, filter, activations)?)
}

/// No-variate baseline error `ε_G = Σ ε_j`.
pub fn baseline_error(cfg: &AxMultConfig, filter: &Filter, activations: &[u8]) -> Result<i64> {
    filter.check_len(activations)?;
    Ok(filter
        .weights
        .iter()
        .zip(activations)
        .map(|(&w, &a)| i64::from(axmult::mult_error(cfg, w, a)))
        .sum())
}

/// Upper bound on `|E[ε_G*]|` introduced by quantizing `C`, `C0` and `V`,
/// assuming uniformly distributed low activation bits.
pub fn rounding_bound(cfg: &AxMultConfig, k: usize, precision: ConstantPrecision) -> f64 {
    if cfg.is_exact() {
        return 0.0;
    }
    let c_err = match precision {
        ConstantPrecision::Fixed => 0.5 / C_ONE as f64,
        ConstantPrecision::PortWidth => 0.5,
    };
    let c0_err = if cfg.kind() == MultKind::Truncated { 0.5 } else { 0.0 };
    crate::stats::expected_x(cfg) * k as f64 * c_err + 0.5 + c0_err
}
