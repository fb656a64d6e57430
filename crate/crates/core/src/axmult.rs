//! Bit-exact models of the exact 8×8 unsigned multiplier and three approximate
//! families: partial-product perforation, recursive multiplication with the
//! low×low sub-product pruned, and column truncation.
//!
//! The approximate kernels are written in terms of the partial products they
//! keep. The closed-form error functions are written independently so the two
//! can be checked against each other exhaustively.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operand width in bits. Every derived width in the crate is computed from this.
pub const OPERAND_BITS: u32 = 8;

/// Largest operand value, `2^n - 1`.
pub const OPERAND_MAX: u32 = (1 << OPERAND_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultKind {
    Exact,
    Perforated,
    Recursive,
    Truncated,
}

impl MultKind {
    pub const ALL: [MultKind; 4] = [
        MultKind::Exact,
        MultKind::Perforated,
        MultKind::Recursive,
        MultKind::Truncated,
    ];

    /// Exclusive upper bound on `m` for this family.
    pub fn level_limit(self) -> u32 {
        match self {
            MultKind::Exact => 1,
            MultKind::Perforated | MultKind::Recursive => OPERAND_BITS,
            MultKind::Truncated => 2 * OPERAND_BITS - 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MultKind::Exact => "exact",
            MultKind::Perforated => "perforated",
            MultKind::Recursive => "recursive",
            MultKind::Truncated => "truncated",
        }
    }
}

impl fmt::Display for MultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MultKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(MultKind::Exact),
            "perforated" | "perf" | "p" => Ok(MultKind::Perforated),
            "recursive" | "rec" | "r" => Ok(MultKind::Recursive),
            "truncated" | "trunc" | "t" => Ok(MultKind::Truncated),
            other => Err(format!("unknown multiplier kind `{other}`")),
        }
    }
}

/// Multiplier family plus approximation level `m`.
///
/// Perforation always starts at the least significant partial product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct AxMultConfig {
    kind: MultKind,
    m: u32,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    kind: MultKind,
    m: u32,
}

impl TryFrom<RawConfig> for AxMultConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        AxMultConfig::new(raw.kind, raw.m)
    }
}

impl From<AxMultConfig> for RawConfig {
    fn from(cfg: AxMultConfig) -> Self {
        RawConfig {
            kind: cfg.kind,
            m: cfg.m,
        }
    }
}

impl AxMultConfig {
    pub fn new(kind: MultKind, m: u32) -> Result<Self> {
        let limit = kind.level_limit();
        if m >= limit {
            return Err(Error::InvalidLevel { kind, m, limit });
        }
        Ok(Self { kind, m })
    }

    pub const fn exact() -> Self {
        Self {
            kind: MultKind::Exact,
            m: 0,
        }
    }

    pub fn kind(&self) -> MultKind {
        self.kind
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// True when the configuration computes exact products (`kind=Exact` or `m=0`).
    pub fn is_exact(&self) -> bool {
        self.kind == MultKind::Exact || self.m == 0
    }

    /// Number of implicit trailing zero bits in every product.
    pub fn shift(&self) -> u32 {
        if self.kind == MultKind::Exact {
            0
        } else {
            self.m
        }
    }

    fn low_mask(&self) -> u32 {
        (1u32 << self.m) - 1
    }
}

impl fmt::Display for AxMultConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MultKind::Exact => write!(f, "exact"),
            kind => write!(f, "{kind}(m={})", self.m),
        }
    }
}

/// An unsigned product together with the number of trailing bits that the
/// multiplier never generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UProduct {
    value: u32,
    shift: u32,
}

impl UProduct {
    pub fn value(&self) -> u32 {
        self.value
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    /// The product with the implicit zero bits dropped, i.e. what a
    /// `16 - m` bit datapath carries.
    pub fn high(&self) -> u32 {
        debug_assert_eq!(self.value & ((1 << self.shift) - 1), 0);
        self.value >> self.shift
    }
}

#[inline]
fn bit(v: u32, i: u32) -> u32 {
    (v >> i) & 1
}

pub fn multiply_exact(w: u8, a: u8) -> u16 {
    u16::from(w) * u16::from(a)
}

fn perforated(m: u32, w: u32, a: u32) -> u32 {
    (m..OPERAND_BITS).map(|i| w * bit(a, i) << i).sum()
}

fn recursive(m: u32, w: u32, a: u32) -> u32 {
    let (w_hi, w_lo) = (w >> m, w & ((1 << m) - 1));
    let (a_hi, a_lo) = (a >> m, a & ((1 << m) - 1));
    ((w_hi * a_hi << m) + w_hi * a_lo + w_lo * a_hi) << m
}

fn truncated(m: u32, w: u32, a: u32) -> u32 {
    let mut acc = 0;
    for i in 0..OPERAND_BITS {
        for j in m.saturating_sub(i)..OPERAND_BITS {
            acc += bit(w, j) * bit(a, i) << (i + j);
        }
    }
    acc
}

/// Product of the configured multiplier.
pub fn multiply_approx(cfg: &AxMultConfig, w: u8, a: u8) -> UProduct {
    let (w, a, m) = (u32::from(w), u32::from(a), cfg.m);
    let value = match cfg.kind {
        MultKind::Exact => w * a,
        MultKind::Perforated => perforated(m, w, a),
        MultKind::Recursive => recursive(m, w, a),
        MultKind::Truncated => truncated(m, w, a),
    };
    UProduct {
        value,
        shift: cfg.shift(),
    }
}

/// Closed-form error `w·a - multiply_approx(cfg, w, a)`.
pub fn mult_error(cfg: &AxMultConfig, w: u8, a: u8) -> u16 {
    let (w, a, m) = (u32::from(w), u32::from(a), cfg.m);
    let mask = cfg.low_mask();
    let e = match cfg.kind {
        MultKind::Exact => 0,
        MultKind::Perforated => w * (a & mask),
        MultKind::Recursive => (w & mask) * (a & mask),
        MultKind::Truncated => (0..m)
            .map(|i| (w & ((1 << (m - i)) - 1)) * bit(a, i) << i)
            .sum(),
    };
    e as u16
}

/// Per-activation control-variate input `x`.
///
/// Perforated and recursive: the `m` low bits of `a`. Truncated: the OR of
/// those bits.
pub fn x_value(cfg: &AxMultConfig, a: u8) -> Result<u32> {
    let low = u32::from(a) & cfg.low_mask();
    match cfg.kind {
        MultKind::Exact => Err(Error::NoControlVariate(cfg.kind)),
        MultKind::Perforated | MultKind::Recursive => Ok(low),
        MultKind::Truncated => Ok(u32::from(low != 0)),
    }
}

/// Largest value `x_value` can take for this configuration.
pub fn x_max(cfg: &AxMultConfig) -> u32 {
    match cfg.kind {
        MultKind::Exact => 0,
        MultKind::Perforated | MultKind::Recursive => cfg.low_mask(),
        MultKind::Truncated => u32::from(cfg.m > 0),
    }
}

/// Upper bound on `mult_error` over all operand pairs.
pub fn error_bound(cfg: &AxMultConfig) -> u32 {
    let low = cfg.low_mask();
    match cfg.kind {
        MultKind::Exact => 0,
        MultKind::Perforated => OPERAND_MAX * low,
        MultKind::Recursive => low * low,
        MultKind::Truncated => cfg.m * (1 << cfg.m) - low,
    }
}

/// Lookup table of all 65 536 products (and errors) for one configuration.
#[derive(Clone)]
pub struct ProductTable {
    cfg: AxMultConfig,
    products: Box<[u16]>,
    x: [u16; 256],
}

impl ProductTable {
    pub fn new(cfg: AxMultConfig) -> Self {
        let mut products = vec![0u16; 1 << 16].into_boxed_slice();
        for w in 0..=255u8 {
            for a in 0..=255u8 {
                products[usize::from(w) << 8 | usize::from(a)] =
                    multiply_approx(&cfg, w, a).value() as u16;
            }
        }
        let mut x = [0u16; 256];
        if cfg.kind != MultKind::Exact {
            for a in 0..=255u8 {
                x[usize::from(a)] = x_value(&cfg, a).expect("approximate kind") as u16;
            }
        }
        Self { cfg, products, x }
    }

    pub fn config(&self) -> &AxMultConfig {
        &self.cfg
    }

    #[inline]
    pub fn product(&self, w: u8, a: u8) -> u16 {
        self.products[usize::from(w) << 8 | usize::from(a)]
    }

    #[inline]
    pub fn error(&self, w: u8, a: u8) -> u16 {
        multiply_exact(w, a) - self.product(w, a)
    }

    /// Row of products for a fixed weight, indexed by activation.
    #[inline]
    pub fn row(&self, w: u8) -> &[u16] {
        let start = usize::from(w) << 8;
        &self.products[start..start + 256]
    }

    /// `x_value` for every activation; all zeros for the exact kind.
    #[inline]
    pub fn x(&self, a: u8) -> u16 {
        self.x[usize::from(a)]
    }
}

impl fmt::Debug for ProductTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProductTable").field("cfg", &self.cfg).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: MultKind, m: u32) -> AxMultConfig {
        AxMultConfig::new(kind, m).unwrap()
    }

    fn all_configs() -> Vec<AxMultConfig> {
        let mut out = vec![AxMultConfig::exact()];
        for kind in [MultKind::Perforated, MultKind::Recursive, MultKind::Truncated] {
            for m in 0..kind.level_limit() {
                out.push(cfg(kind, m));
            }
        }
        out
    }

    /// Column-wise evaluation: sum of every partial-product bit w_j·a_i whose
    /// column i + j lies in the truncated window.
    fn truncated_error_by_columns(m: u32, w: u32, a: u32) -> u32 {
        let mut e = 0;
        for i in 0..8 {
            for j in 0..8 {
                if i + j < m {
                    e += (((w >> j) & 1) * ((a >> i) & 1)) << (i + j);
                }
            }
        }
        e
    }

    #[test]
    fn exact_examples() {
        assert_eq!(multiply_exact(0, 255), 0);
        assert_eq!(multiply_exact(1, 173), 173);
        assert_eq!(multiply_exact(255, 255), 65025);
    }

    #[test]
    fn approx_examples() {
        assert_eq!(multiply_approx(&cfg(MultKind::Perforated, 2), 5, 7).value(), 20);
        assert_eq!(multiply_approx(&cfg(MultKind::Recursive, 3), 255, 255).value(), 64976);
        assert_eq!(multiply_approx(&cfg(MultKind::Truncated, 4), 255, 0).value(), 0);
        assert_eq!(multiply_approx(&cfg(MultKind::Truncated, 4), 17, 15).value(), 240);
        assert_eq!(truncated_error_by_columns(4, 17, 15), 15);
    }

    #[test]
    fn error_examples() {
        assert_eq!(mult_error(&cfg(MultKind::Perforated, 3), 100, 7), 700);
        assert_eq!(mult_error(&cfg(MultKind::Recursive, 2), 4, 8), 0);
        assert_eq!(mult_error(&cfg(MultKind::Truncated, 4), 17, 15), 15);
    }

    #[test]
    fn x_examples() {
        assert_eq!(x_value(&cfg(MultKind::Perforated, 3), 13).unwrap(), 5);
        assert_eq!(x_value(&cfg(MultKind::Truncated, 5), 32).unwrap(), 0);
        assert_eq!(x_value(&cfg(MultKind::Truncated, 5), 33).unwrap(), 1);
        assert!(matches!(
            x_value(&AxMultConfig::exact(), 3),
            Err(Error::NoControlVariate(MultKind::Exact))
        ));
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(AxMultConfig::new(MultKind::Perforated, 8).is_err());
        assert!(AxMultConfig::new(MultKind::Recursive, 8).is_err());
        assert!(AxMultConfig::new(MultKind::Truncated, 15).is_err());
        assert!(AxMultConfig::new(MultKind::Truncated, 14).is_ok());
        assert!(AxMultConfig::new(MultKind::Exact, 1).is_err());
    }

    #[test]
    fn config_parses_from_json_with_validation() {
        let ok: AxMultConfig = serde_json::from_str(r#"{"kind":"truncated","m":7}"#).unwrap();
        assert_eq!(ok, cfg(MultKind::Truncated, 7));
        assert!(serde_json::from_str::<AxMultConfig>(r#"{"kind":"perforated","m":9}"#).is_err());
    }

    #[test]
    fn exhaustive_invariants() {
        for c in all_configs() {
            let bound = error_bound(&c);
            for w in 0..=255u8 {
                for a in 0..=255u8 {
                    let exact = u32::from(multiply_exact(w, a));
                    let p = multiply_approx(&c, w, a);
                    let e = u32::from(mult_error(&c, w, a));
                    assert!(p.value() <= exact, "{c} {w} {a}");
                    assert_eq!(exact - p.value(), e, "{c} {w} {a}");
                    assert_eq!(p.value() % (1 << c.shift()), 0, "{c} {w} {a}");
                    assert!(e <= bound, "{c} {w} {a}: {e} > {bound}");
                    if c.kind() == MultKind::Truncated {
                        assert_eq!(e, truncated_error_by_columns(c.m(), w.into(), a.into()));
                    }
                    if c.m() == 0 {
                        assert_eq!(p.value(), exact);
                    }
                }
            }
        }
    }

    #[test]
    fn error_bounds_are_attained() {
        for c in all_configs().into_iter().filter(|c| c.m() < 8) {
            let worst = (0..=255u8)
                .flat_map(|w| (0..=255u8).map(move |a| (w, a)))
                .map(|(w, a)| u32::from(mult_error(&c, w, a)))
                .max()
                .unwrap();
            assert_eq!(worst, error_bound(&c), "{c}");
        }
    }

    #[test]
    fn table_matches_kernels() {
        let c = cfg(MultKind::Truncated, 6);
        let t = ProductTable::new(c);
        for (w, a) in [(0u8, 0u8), (255, 255), (17, 15), (128, 63)] {
            assert_eq!(u32::from(t.product(w, a)), multiply_approx(&c, w, a).value());
            assert_eq!(t.error(w, a), mult_error(&c, w, a));
            assert_eq!(u32::from(t.x(a)), x_value(&c, a).unwrap());
        }
    }

    proptest! {
        #[test]
        fn error_monotone_in_m(w: u8, a: u8, kind_ix in 1usize..4) {
            let kind = MultKind::ALL[kind_ix];
            let mut prev = 0;
            for m in 0..kind.level_limit() {
                let e = mult_error(&cfg(kind, m), w, a);
                prop_assert!(e >= prev);
                prev = e;
            }
        }

        #[test]
        fn error_depends_only_on_low_activation_bits(w: u8, a: u8, kind_ix in 1usize..4, m in 0u32..8) {
            let c = cfg(MultKind::ALL[kind_ix], m);
            let low = a & (((1u32 << m) - 1) as u8);
            prop_assert_eq!(mult_error(&c, w, a), mult_error(&c, w, low));
        }
    }
}
