//! Cycle-stepped, width-checked model of a weight-stationary N×N MAC array
//! with the extra MAC⁺ column that finalizes the control variate.
//!
//! Row `r` holds one filter; column `h` holds weight `W_{r,h}`. Activation
//! vector `p` enters column `h` at cycle `p + h` and moves down one row per
//! cycle, while the partial sums `(sum, sumX)` move right one column per
//! cycle. PE `(r, h)` therefore works on vector `p` at cycle `p + r + h`.
//!
//! Every register is checked against its declared width; an overflow is
//! reported as a [`SimFault`], never wrapped.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::axmult::{multiply_approx, x_value, AxMultConfig, MultKind, OPERAND_BITS, OPERAND_MAX};
use crate::covar::{Filter, FilterConstants};
use crate::error::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimFault {
    #[error("{unit} overflow at row {row}, column {col}, cycle {cycle}: value {value} needs more than {width} bits")]
    Overflow {
        unit: &'static str,
        row: usize,
        col: usize,
        cycle: u64,
        value: u64,
        width: u32,
    },
    #[error("column index {h} outside an array of size {n}")]
    ColumnOutOfRange { h: usize, n: usize },
    #[error("tile dimension mismatch: {0}")]
    Dimension(String),
}

/// Number of bits needed to hold every value in `0..=max`.
pub fn bits_for(max: u64) -> u32 {
    u64::BITS - max.leading_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacArrayConfig {
    pub n: usize,
    pub mult: AxMultConfig,
    /// Accumulator width of the exact MAC, `⌈log2(N·(2^16 - 1))⌉`.
    pub width_main_adder: u32,
    /// Main accumulator of MAC*, `m` bits narrower than the exact one.
    pub width_star_adder: u32,
    /// Accumulator of the `sumX` path.
    pub width_sumx_adder: u32,
    /// Operand widths of the MAC⁺ multiplier, `sumX × C`.
    pub width_plus_mult: (u32, u32),
    /// Adder producing `G*` in the MAC⁺ unit.
    pub width_final_adder: u32,
    /// Extra cycles added by the MAC⁺ column (1, or 2 when it is pipelined).
    pub plus_latency: u32,
}

impl MacArrayConfig {
    pub fn new(n: usize, mult: AxMultConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArray("array size must be at least 1".into()));
        }
        let product_max = (1u64 << (2 * OPERAND_BITS)) - 1;
        let width_main_adder = bits_for(n as u64 * product_max);
        let shift = if mult.is_exact() { 0 } else { mult.m() };
        let width_sumx_adder = match mult.kind() {
            _ if mult.is_exact() => 0,
            MultKind::Perforated | MultKind::Recursive => bits_for(n as u64 * ((1 << mult.m()) - 1)),
            MultKind::Truncated => bits_for(n as u64),
            MultKind::Exact => 0,
        };
        Ok(Self {
            n,
            mult,
            width_main_adder,
            width_star_adder: width_main_adder - shift.min(width_main_adder),
            width_sumx_adder,
            width_plus_mult: (width_sumx_adder, OPERAND_BITS),
            width_final_adder: width_main_adder,
            plus_latency: 1,
        })
    }

    pub fn with_plus_latency(mut self, cycles: u32) -> Self {
        self.plus_latency = cycles;
        self
    }

    /// True when the array carries the `sumX` path and the MAC⁺ column.
    pub fn has_plus_column(&self) -> bool {
        !self.mult.is_exact()
    }

    fn shift(&self) -> u32 {
        if self.mult.is_exact() {
            0
        } else {
            self.mult.m()
        }
    }
}

/// Cycles for one pass of `vectors` activation vectors through `rows` rows of
/// an exact `n`-column array.
pub fn exact_array_cycles(rows: usize, n: usize, vectors: usize) -> u64 {
    if rows == 0 || vectors == 0 {
        return 0;
    }
    (vectors + rows + n - 1) as u64
}

/// Partial sums flowing along one row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowState {
    pub sum: u64,
    pub sum_x: u64,
    pub h: usize,
}

/// The bias split used by the array: `high` is added in the output stage,
/// `mid = B[7:m]` seeds the row, `low = B[m-1:0]` is restored by MAC⁺.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasSplit {
    pub high: i64,
    pub mid: u64,
    pub low: u64,
}

pub fn split_bias(bias: i64, shift: u32) -> BiasSplit {
    let byte_mask = i64::from(OPERAND_MAX);
    let byte = (bias & byte_mask) as u64;
    BiasSplit {
        high: bias - (bias & byte_mask),
        mid: byte >> shift,
        low: byte & ((1 << shift) - 1),
    }
}

fn check(unit: &'static str, value: u64, width: u32, row: usize, col: usize, cycle: u64) -> Result<u64, SimFault> {
    if width < u64::BITS && value >> width != 0 {
        return Err(SimFault::Overflow {
            unit,
            row,
            col,
            cycle,
            value,
            width,
        });
    }
    Ok(value)
}

/// One MAC* update: `sum += AM(w, a) >> m`, `sumX += x(a)`.
pub fn mac_star_step(cfg: &MacArrayConfig, w: u8, a: u8, state: RowState) -> Result<RowState, SimFault> {
    mac_star_step_at(cfg, w, a, state, 0, 0, None)
}

fn mac_star_step_at(
    cfg: &MacArrayConfig,
    w: u8,
    a: u8,
    state: RowState,
    row: usize,
    cycle: u64,
    flip: Option<u32>,
) -> Result<RowState, SimFault> {
    let h = state.h;
    if h >= cfg.n {
        return Err(SimFault::ColumnOutOfRange { h, n: cfg.n });
    }
    let mut product = u64::from(multiply_approx(&cfg.mult, w, a).high());
    if let Some(bit) = flip {
        product ^= 1 << bit;
    }
    let sum = check("main adder", state.sum + product, cfg.width_star_adder, row, h, cycle)?;
    let sum_x = if cfg.has_plus_column() {
        let x = u64::from(x_value(&cfg.mult, a).expect("approximate kind"));
        check("sumX adder", state.sum_x + x, cfg.width_sumx_adder, row, h, cycle)?
    } else {
        0
    };
    Ok(RowState { sum, sum_x, h: h + 1 })
}

/// MAC⁺: `V = C·sumX`, `G* = {sum_N, B[m-1:0]} + V`.
pub fn mac_plus(
    cfg: &MacArrayConfig,
    consts: &FilterConstants,
    sum_n: u64,
    sum_x_n: u64,
    bias_low: u64,
) -> Result<i64, SimFault> {
    mac_plus_at(cfg, consts, sum_n, sum_x_n, bias_low, cfg.width_final_adder, 0, 0)
}

#[allow(clippy::too_many_arguments)]
fn mac_plus_at(
    cfg: &MacArrayConfig,
    consts: &FilterConstants,
    sum_n: u64,
    sum_x_n: u64,
    bias_low: u64,
    width: u32,
    row: usize,
    cycle: u64,
) -> Result<i64, SimFault> {
    let shift = cfg.shift();
    let concat = (sum_n << shift) | bias_low;
    let v = consts.variate(sum_x_n);
    let v = u64::try_from(v).expect("C is non-negative");
    let g = check("MAC+ adder", concat + v, width, row, cfg.n, cycle)?;
    Ok(g as i64)
}

/// Flip one bit of the product of one PE; used to check that the equivalence
/// checker notices corrupted datapaths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub row: usize,
    pub col: usize,
    pub bit: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub row: usize,
    pub col: usize,
    pub sum: u64,
    pub sum_x: u64,
}

pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "cycle,row,col,sum,sumX")?;
    for t in trace {
        writeln!(out, "{},{},{},{},{}", t.cycle, t.row, t.col, t.sum, t.sum_x)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileOutput {
    /// `outputs[p][r]` is `G*` of row `r` for activation vector `p`.
    pub outputs: Vec<Vec<i64>>,
    pub cycles: u64,
    pub passes: usize,
    pub trace: Vec<TraceRecord>,
}

/// A simulator instance. Holds mutable register state; not shared.
#[derive(Debug, Clone)]
pub struct SystolicArray {
    cfg: MacArrayConfig,
    fault: Option<FaultInjection>,
    tracing: bool,
}

struct Pass<'a> {
    weights: Vec<&'a [u8]>,
    activations: Vec<&'a [u8]>,
    seeds: Vec<u64>,
    row_offset: usize,
}

impl SystolicArray {
    pub fn new(cfg: MacArrayConfig) -> Self {
        Self {
            cfg,
            fault: None,
            tracing: false,
        }
    }

    pub fn config(&self) -> &MacArrayConfig {
        &self.cfg
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.tracing = on;
        self
    }

    /// Run one tile of at most `N` filters of length at most `N`.
    pub fn run_tile(
        &mut self,
        weights: &[Vec<u8>],
        activations: &[Vec<u8>],
        biases: &[i64],
        consts: &[FilterConstants],
    ) -> Result<TileOutput> {
        let k = weights.first().map_or(0, Vec::len);
        if weights.len() > self.cfg.n || k > self.cfg.n {
            return Err(SimFault::Dimension(format!(
                "tile {}x{k} does not fit a {n}x{n} array",
                weights.len(),
                n = self.cfg.n
            ))
            .into());
        }
        self.run(weights, activations, biases, consts)
    }

    /// Run filters of any count and length, splitting rows into blocks of
    /// `N` and each filter into `⌈k/N⌉` passes whose partial sums are carried
    /// over at full width.
    pub fn run_filters(
        &mut self,
        filters: &[Filter],
        consts: &[FilterConstants],
        activations: &[Vec<u8>],
    ) -> Result<TileOutput> {
        let weights: Vec<Vec<u8>> = filters.iter().map(|f| f.weights.clone()).collect();
        let biases: Vec<i64> = filters.iter().map(|f| f.bias).collect();
        self.run(&weights, activations, &biases, consts)
    }

    fn run(
        &mut self,
        weights: &[Vec<u8>],
        activations: &[Vec<u8>],
        biases: &[i64],
        consts: &[FilterConstants],
    ) -> Result<TileOutput> {
        let rows = weights.len();
        let k = weights.first().map_or(0, Vec::len);
        validate(&self.cfg, weights, activations, biases, consts)?;
        let n = self.cfg.n;
        let shift = self.cfg.shift();
        let vectors = activations.len();
        let splits: Vec<BiasSplit> = biases
            .iter()
            .zip(consts)
            .map(|(&b, c)| split_bias(c.fold_bias(b), shift))
            .collect();

        // carry registers: (sum, sumX) per (vector, row), full width
        let mut carry = vec![vec![(0u64, 0u64); rows]; vectors];
        let mut cycles = 0u64;
        let mut passes = 0usize;
        let mut trace = Vec::new();
        let n_passes = k.div_ceil(n).max(1);
        for block in (0..rows).step_by(n) {
            let block_rows = (rows - block).min(n);
            for pass in 0..n_passes {
                let cols = pass * n..((pass + 1) * n).min(k);
                let pass_data = Pass {
                    weights: (block..block + block_rows).map(|r| &weights[r][cols.clone()]).collect(),
                    activations: activations.iter().map(|a| &a[cols.clone()]).collect(),
                    seeds: (block..block + block_rows)
                        .map(|r| if pass == 0 { splits[r].mid } else { 0 })
                        .collect(),
                    row_offset: block,
                };
                let (partials, pass_cycles) = self.simulate_pass(&pass_data, &mut trace, cycles)?;
                for (p, row_vals) in partials.into_iter().enumerate() {
                    for (r, (s, sx)) in row_vals.into_iter().enumerate() {
                        let c = &mut carry[p][block + r];
                        c.0 += s;
                        c.1 += sx;
                    }
                }
                cycles += pass_cycles;
                passes += 1;
            }
        }

        let final_width = if n_passes == 1 { self.cfg.width_final_adder } else { u64::BITS };
        let mut outputs = vec![vec![0i64; rows]; vectors];
        for (p, out) in outputs.iter_mut().enumerate() {
            for (r, o) in out.iter_mut().enumerate() {
                let (s, sx) = carry[p][r];
                let split = splits[r];
                let g = if self.cfg.has_plus_column() {
                    mac_plus_at(&self.cfg, &consts[r], s, sx, split.low, final_width, r, cycles)?
                } else {
                    s as i64
                };
                *o = g + split.high;
            }
        }
        Ok(TileOutput {
            outputs,
            cycles,
            passes,
            trace,
        })
    }

    /// Steps the register array for one pass. Returns the `(sum_N, sumX_N)`
    /// values reaching the MAC⁺ column and the number of cycles taken.
    fn simulate_pass(
        &self,
        pass: &Pass<'_>,
        trace: &mut Vec<TraceRecord>,
        cycle_base: u64,
    ) -> Result<(Vec<Vec<(u64, u64)>>, u64)> {
        let n = self.cfg.n;
        let rows = pass.weights.len();
        let vectors = pass.activations.len();
        if rows == 0 || vectors == 0 {
            return Ok((vec![vec![]; vectors], 0));
        }
        let mut act_reg = vec![0u8; rows * n];
        let mut state_reg = vec![RowState::default(); rows * n];
        let mut results = vec![vec![(0u64, 0u64); rows]; vectors];
        let exact_cycles = exact_array_cycles(rows, n, vectors);
        for t in 0..exact_cycles as usize {
            for r in (0..rows).rev() {
                if t < r {
                    continue;
                }
                let h_hi = (t - r).min(n - 1);
                let h_lo = (t - r).saturating_sub(vectors - 1);
                for h in (h_lo..=h_hi).rev() {
                    let p = t - r - h;
                    let a = if r == 0 {
                        pass.activations[p].get(h).copied().unwrap_or(0)
                    } else {
                        act_reg[(r - 1) * n + h]
                    };
                    let w = pass.weights[r].get(h).copied().unwrap_or(0);
                    let incoming = if h == 0 {
                        RowState {
                            sum: pass.seeds[r],
                            sum_x: 0,
                            h: 0,
                        }
                    } else {
                        state_reg[r * n + h - 1]
                    };
                    let row = pass.row_offset + r;
                    let flip = self
                        .fault
                        .filter(|f| f.row == row && f.col == h)
                        .map(|f| f.bit);
                    let cycle = cycle_base + t as u64;
                    let next = mac_star_step_at(&self.cfg, w, a, incoming, row, cycle, flip)?;
                    if self.tracing {
                        trace.push(TraceRecord {
                            cycle,
                            row,
                            col: h,
                            sum: next.sum,
                            sum_x: next.sum_x,
                        });
                    }
                    act_reg[r * n + h] = a;
                    state_reg[r * n + h] = next;
                    if h == n - 1 {
                        results[p][r] = (next.sum, next.sum_x);
                    }
                }
            }
        }
        let extra = if self.cfg.has_plus_column() {
            u64::from(self.cfg.plus_latency)
        } else {
            0
        };
        Ok((results, exact_cycles + extra))
    }
}

fn validate(
    cfg: &MacArrayConfig,
    weights: &[Vec<u8>],
    activations: &[Vec<u8>],
    biases: &[i64],
    consts: &[FilterConstants],
) -> Result<()> {
    let k = weights.first().map_or(0, Vec::len);
    let dim = |msg: String| -> Result<()> { Err(SimFault::Dimension(msg).into()) };
    if let Some((r, w)) = weights.iter().enumerate().find(|(_, w)| w.len() != k) {
        return dim(format!("row {r} has {} weights, expected {k}", w.len()));
    }
    if let Some((p, a)) = activations.iter().enumerate().find(|(_, a)| a.len() != k) {
        return dim(format!("activation vector {p} has length {}, expected {k}", a.len()));
    }
    if biases.len() != weights.len() || consts.len() != weights.len() {
        return dim(format!(
            "{} rows but {} biases and {} constant sets",
            weights.len(),
            biases.len(),
            consts.len()
        ));
    }
    if let Some(c) = consts.iter().find(|c| c.cfg != cfg.mult) {
        return dim(format!("constants derived for {} but array uses {}", c.cfg, cfg.mult));
    }
    Ok(())
}

/// Convenience wrapper: a fresh simulator running one tile.
pub fn run_tile(
    cfg: &MacArrayConfig,
    weights: &[Vec<u8>],
    activations: &[Vec<u8>],
    biases: &[i64],
    consts: &[FilterConstants],
) -> Result<TileOutput> {
    SystolicArray::new(*cfg).run_tile(weights, activations, biases, consts)
}
