//! Operand sampling, Monte-Carlo error characterization and the closed-form
//! moments of the corrected convolution error.
//!
//! All sums are accumulated exactly in wide integers; floating point only
//! appears in the final division.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::axmult::{AxMultConfig, MultKind, ProductTable};
use crate::covar::{derive_constants, ConstantPrecision, Filter, FilterConstants};
use crate::error::{Error, Result};
use crate::fixed::lcm;

pub type SimRng = ChaCha8Rng;

/// Name of the generator recorded in every report.
pub const RNG_ALGORITHM: &str = "ChaCha8";

/// Generator for `(seed, stream)`. Distinct streams are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OperandDistribution {
    /// Equiprobable integers in `[lo, hi]`.
    Uniform { lo: u8, hi: u8 },
    /// Gaussian draw rounded half-to-even and clamped to `[0, 255]`.
    Normal { mean: f64, std: f64 },
}

impl OperandDistribution {
    pub const UNIFORM: Self = Self::Uniform { lo: 0, hi: 255 };
    pub const NORMAL: Self = Self::Normal {
        mean: 125.0,
        std: 24.0,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Uniform { lo, hi } if lo > hi => Err(Error::InvalidDistribution(format!(
                "uniform range [{lo}, {hi}] is empty"
            ))),
            Self::Normal { mean, std } if !mean.is_finite() || !std.is_finite() || std < 0.0 => {
                Err(Error::InvalidDistribution(format!(
                    "normal({mean}, {std}) needs finite mean and non-negative std"
                )))
            }
            _ => Ok(()),
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(match *self {
            Self::Uniform { lo: 0, hi: 255 } => Sampler::FullByte,
            Self::Uniform { lo, hi } => Sampler::Range(lo, hi),
            Self::Normal { mean, std } => Sampler::Normal(Normal::new(mean, std).expect("validated")),
        })
    }

    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::Normal { .. } => "normal",
        }
    }
}

impl fmt::Display for OperandDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            Self::Normal { mean, std } => write!(f, "normal({mean},{std})"),
        }
    }
}

impl FromStr for OperandDistribution {
    type Err = String;

    /// Accepts `uniform`, `uniform:LO:HI`, `normal` and `normal:MEAN:STD`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("invalid distribution `{s}`");
        let dist = match parts.as_slice() {
            ["uniform"] => Self::UNIFORM,
            ["normal"] => Self::NORMAL,
            ["uniform", lo, hi] => Self::Uniform {
                lo: lo.parse().map_err(|_| bad())?,
                hi: hi.parse().map_err(|_| bad())?,
            },
            ["normal", mean, std] => Self::Normal {
                mean: mean.parse().map_err(|_| bad())?,
                std: std.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        dist.validate().map_err(|e| e.to_string())?;
        Ok(dist)
    }
}

enum Sampler {
    FullByte,
    Range(u8, u8),
    Normal(Normal<f64>),
}

impl Sampler {
    #[inline]
    fn draw(&self, rng: &mut SimRng) -> u8 {
        match self {
            Sampler::FullByte => rng.next_u32() as u8,
            Sampler::Range(lo, hi) => rng.random_range(*lo..=*hi),
            Sampler::Normal(n) => n.sample(rng).round_ties_even().clamp(0.0, 255.0) as u8,
        }
    }

    fn fill(&self, rng: &mut SimRng, out: &mut [u8]) {
        match self {
            Sampler::FullByte => rng.fill_bytes(out),
            _ => out.iter_mut().for_each(|v| *v = self.draw(rng)),
        }
    }
}

/// One draw from `dist`.
pub fn sample(dist: &OperandDistribution, rng: &mut SimRng) -> Result<u8> {
    Ok(dist.sampler()?.draw(rng))
}

/// Exact running moments of an integer-valued stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Moments {
    pub n: u64,
    pub sum: i128,
    pub sum_sq: i128,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, v: i64) {
        let v = i128::from(v);
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sum as f64 / self.n as f64
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = i128::from(self.n);
        let num = n * self.sum_sq - self.sum * self.sum;
        num as f64 / (n * (n - 1)) as f64
    }
}

/// Mean and standard deviation of an error sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub n_samples: u64,
    pub seed: u64,
}

impl ErrorStats {
    /// Moments of values `v / scale`.
    pub fn from_moments(m: &Moments, scale: f64, seed: u64) -> Self {
        Self {
            mean: m.mean() / scale,
            std: m.variance().max(0.0).sqrt() / scale,
            n_samples: m.n.max(1),
            seed,
        }
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std / (self.n_samples as f64).sqrt()
    }
}

/// Monte-Carlo statistics of `mult_error` over `n` i.i.d. operand pairs.
pub fn mult_error_stats(
    cfg: &AxMultConfig,
    dist_w: &OperandDistribution,
    dist_a: &OperandDistribution,
    n: usize,
    seed: u64,
) -> Result<ErrorStats> {
    if n < 1 {
        return Err(Error::TooFewSamples { min: 1, actual: n });
    }
    let (sw, sa) = (dist_w.sampler()?, dist_a.sampler()?);
    let table = ProductTable::new(*cfg);
    let mut rng_w = seeded_rng(seed, 0);
    let mut rng_a = seeded_rng(seed, 1);
    let mut moments = Moments::default();
    let mut ws = [0u8; 4096];
    let mut acts = [0u8; 4096];
    let mut left = n;
    while left > 0 {
        let chunk = left.min(ws.len());
        sw.fill(&mut rng_w, &mut ws[..chunk]);
        sa.fill(&mut rng_a, &mut acts[..chunk]);
        for (&w, &a) in ws[..chunk].iter().zip(&acts[..chunk]) {
            moments.push(i64::from(table.error(w, a)));
        }
        left -= chunk;
    }
    Ok(ErrorStats::from_moments(&moments, 1.0, seed))
}

/// Which convolution error `conv_error_stats` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variate {
    /// `ε_G`, no control variate.
    Off,
    /// `ε_G*` with exact rational `C`, `C0` and unrounded `V`.
    Unrounded,
    /// `ε_G*` as produced by the integer datapath.
    Quantized(ConstantPrecision),
}

/// Everything measured in one pass over a set of activation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvErrorStudy {
    pub cfg: AxMultConfig,
    pub k: usize,
    pub seed: u64,
    pub baseline: ErrorStats,
    pub corrected: ErrorStats,
    pub quantized: ErrorStats,
    pub precision: ConstantPrecision,
    /// Standard error of the sample variance of the unrounded corrected error.
    pub corrected_var_se: f64,
    /// Closed-form variance of the unrounded corrected error, when one exists.
    pub closed_form_var: Option<f64>,
    pub c: f64,
    pub c0: f64,
    pub sum_x: ErrorStats,
}

struct VectorRun<'a> {
    consts: FilterConstants,
    rows: Vec<&'a [u16]>,
    table: &'a ProductTable,
    weights: &'a [u8],
}

/// Run `n_vectors` random activation vectors through `filter` and collect
/// the baseline, unrounded-corrected and quantized-corrected error moments.
pub fn conv_error_study(
    cfg: &AxMultConfig,
    filter: &Filter,
    dist_a: &OperandDistribution,
    n_vectors: usize,
    seed: u64,
    precision: ConstantPrecision,
) -> Result<ConvErrorStudy> {
    let table = ProductTable::new(*cfg);
    conv_error_study_with_table(&table, filter, dist_a, n_vectors, seed, precision)
}

pub fn conv_error_study_with_table(
    table: &ProductTable,
    filter: &Filter,
    dist_a: &OperandDistribution,
    n_vectors: usize,
    seed: u64,
    precision: ConstantPrecision,
) -> Result<ConvErrorStudy> {
    if n_vectors < 2 {
        return Err(Error::TooFewSamples {
            min: 2,
            actual: n_vectors,
        });
    }
    let cfg = *table.config();
    let sampler = dist_a.sampler()?;
    let consts = derive_constants(&cfg, filter, precision)?;
    let run = VectorRun {
        rows: filter.weights.iter().map(|&w| table.row(w)).collect(),
        consts,
        table,
        weights: &filter.weights,
    };
    let k = filter.k();

    // ε_G* · D is an integer for D = lcm(den C, den C0).
    let d = lcm(run.consts.c_exact.den, run.consts.c0_exact.den);
    let c_num = i128::from(run.consts.c_exact.scaled_to(d));
    let c0_num = i128::from(run.consts.c0_exact.scaled_to(d));
    let d = i128::from(d);

    let mut rng = seeded_rng(seed, 0);
    let mut acts = vec![0u8; k];
    let mut baseline = Moments::default();
    let mut quantized = Moments::default();
    let mut sx_moments = Moments::default();
    let mut corrected = Vec::with_capacity(n_vectors);
    for _ in 0..n_vectors {
        sampler.fill(&mut rng, &mut acts);
        let (approx, exact, sx) = run.dot(&acts);
        let eps = exact - approx;
        baseline.push(eps);
        sx_moments.push(sx as i64);
        quantized.push(eps - run.consts.variate(sx) - run.consts.c0);
        corrected.push(d * i128::from(eps) - c_num * i128::from(sx) - c0_num);
    }

    let scale = d as f64;
    let mut cm = Moments::default();
    for &v in &corrected {
        cm.n += 1;
        cm.sum += v;
        cm.sum_sq += v * v;
    }
    let mean = cm.mean();
    let var = cm.variance();
    let n = n_vectors as f64;
    let m4 = corrected
        .iter()
        .map(|&v| (v as f64 - mean).powi(4))
        .sum::<f64>()
        / n;
    let m2 = var * (n - 1.0) / n;
    let var_se = ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)).max(0.0) / n).sqrt() / (scale * scale);

    let closed_form_var = match cfg.kind() {
        _ if cfg.is_exact() => Some(0.0),
        MultKind::Perforated => Some(closed_form_var_perforated(
            run.weights,
            run.consts.c_exact.to_f64(),
            cfg.m(),
        )),
        MultKind::Recursive => {
            let mask = (1u8 << cfg.m()).wrapping_sub(1);
            let low: Vec<u8> = run.weights.iter().map(|&w| w & mask).collect();
            Some(closed_form_var_perforated(&low, run.consts.c_exact.to_f64(), cfg.m()))
        }
        _ => None,
    };

    Ok(ConvErrorStudy {
        cfg,
        k,
        seed,
        baseline: ErrorStats::from_moments(&baseline, 1.0, seed),
        corrected: ErrorStats::from_moments(&cm, scale, seed),
        quantized: ErrorStats::from_moments(&quantized, 1.0, seed),
        precision,
        corrected_var_se: var_se,
        closed_form_var,
        c: run.consts.c_exact.to_f64(),
        c0: run.consts.c0_exact.to_f64(),
        sum_x: ErrorStats::from_moments(&sx_moments, 1.0, seed),
    })
}

impl VectorRun<'_> {
    /// `(Σ AM, Σ W·A, Σ x)` for one activation vector.
    #[inline]
    fn dot(&self, acts: &[u8]) -> (i64, i64, u64) {
        let mut approx = 0i64;
        let mut exact = 0i64;
        let mut sx = 0u64;
        for ((row, &w), &a) in self.rows.iter().zip(self.weights).zip(acts) {
            approx += i64::from(row[usize::from(a)]);
            exact += i64::from(w) * i64::from(a);
            sx += u64::from(self.table.x(a));
        }
        (approx, exact, sx)
    }
}

/// Statistics of the convolution error over `n_vectors` random activation
/// vectors.
pub fn conv_error_stats(
    cfg: &AxMultConfig,
    filter: &Filter,
    dist_a: &OperandDistribution,
    n_vectors: usize,
    seed: u64,
    variate: Variate,
) -> Result<ErrorStats> {
    let precision = match variate {
        Variate::Quantized(p) => p,
        _ => ConstantPrecision::Fixed,
    };
    let study = conv_error_study(cfg, filter, dist_a, n_vectors, seed, precision)?;
    Ok(match variate {
        Variate::Off => study.baseline,
        Variate::Unrounded => study.corrected,
        Variate::Quantized(_) => study.quantized,
    })
}

/// `Var(x)·Σ(W_j - C)²` with `Var(x) = (2^m-1)(2^m+1)/12` for uniform low bits.
pub fn closed_form_var_perforated(weights: &[u8], c: f64, m: u32) -> f64 {
    let span = f64::from(1u32 << m);
    let var_x = (span - 1.0) * (span + 1.0) / 12.0;
    var_x * weights.iter().map(|&w| (f64::from(w) - c).powi(2)).sum::<f64>()
}

/// `E[x]` under uniformly distributed low activation bits.
pub fn expected_x(cfg: &AxMultConfig) -> f64 {
    if cfg.is_exact() {
        return 0.0;
    }
    let span = f64::from(1u32 << cfg.m().min(31));
    match cfg.kind() {
        MultKind::Perforated | MultKind::Recursive => (span - 1.0) / 2.0,
        MultKind::Truncated => {
            // x = OR of the low min(m, 8) activation bits
            let bits = 1u64 << cfg.m().min(crate::axmult::OPERAND_BITS);
            (bits - 1) as f64 / bits as f64
        }
        MultKind::Exact => 0.0,
    }
}

/// The approximation levels characterized in the published error table.
pub fn reference_grid() -> Vec<AxMultConfig> {
    let mut out = Vec::new();
    for (kind, ms) in [
        (MultKind::Perforated, 1..=3),
        (MultKind::Recursive, 2..=5),
        (MultKind::Truncated, 4..=7),
    ] {
        for m in ms {
            out.push(AxMultConfig::new(kind, m).expect("valid level"));
        }
    }
    out
}
