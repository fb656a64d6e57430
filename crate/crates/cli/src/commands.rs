use rand::Rng;
use serde::Serialize;

use axcv::covar::{derive_constants, exact_dot, Filter, FilterConstants};
use axcv::nn::{format::FORMAT_VERSION, load_model, Dataset, EvalReport, InferenceConfig, PreparedModel};
use axcv::stats::{conv_error_study, mult_error_stats, seeded_rng, ConvErrorStudy, SimRng};
use axcv::systolic::{exact_array_cycles, write_trace_csv, MacArrayConfig, SystolicArray, TileOutput};
use axcv::AxMultConfig;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{emit, header, render_json, render_rows, SCHEMA_VERSION};

#[derive(Serialize)]
struct StatsRow {
    schema_version: u32,
    kind: &'static str,
    m: u32,
    dist: String,
    samples: u64,
    seed: u64,
    mean: f64,
    std: f64,
}

pub fn stats(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut rows = Vec::new();
    for c in &cfg.grid {
        for dist in &cfg.dists {
            let seed = cfg.seed.wrapping_add(rows.len() as u64);
            let s = mult_error_stats(c, dist, dist, cfg.samples, seed)?;
            rows.push(StatsRow {
                schema_version: SCHEMA_VERSION,
                kind: c.kind().name(),
                m: c.m(),
                dist: dist.to_string(),
                samples: s.n_samples,
                seed,
                mean: s.mean,
                std: s.std,
            });
        }
    }
    emit(cfg, &render_rows(cfg, &rows)?)
}

/// Weights of random filter `f` with length `k` and the seed of its
/// activation vectors. Both depend only on `(seed, k, f)`.
fn random_filter(cfg: &ExperimentConfig, k: usize, f: usize) -> CliResult<(Filter, u64)> {
    let tag = ((k as u64) << 20) | f as u64;
    let mut rng = seeded_rng(cfg.seed, 1 + tag);
    let weights = (0..k).map(|_| rng.random()).collect();
    Ok((Filter::new(weights, 0)?, cfg.seed.wrapping_add(tag)))
}

#[derive(Serialize)]
struct ConvRow {
    schema_version: u32,
    kind: &'static str,
    m: u32,
    dist: String,
    k: usize,
    filter: usize,
    vectors: usize,
    activation_seed: u64,
    c: f64,
    c0: f64,
    baseline_mean: f64,
    baseline_var: f64,
    corrected_mean: f64,
    corrected_var: f64,
    corrected_var_se: f64,
    closed_form_var: Option<f64>,
    rounded_mean: f64,
    rounded_var: f64,
    precision: &'static str,
    width_violation: bool,
}

fn precision_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.precision {
        axcv::covar::ConstantPrecision::Fixed => "fixed",
        axcv::covar::ConstantPrecision::PortWidth => "port-width",
    }
}

fn study(cfg: &ExperimentConfig, c: &AxMultConfig, dist_ix: usize, k: usize, f: usize) -> CliResult<(ConvErrorStudy, u64, bool)> {
    let (filter, seed) = random_filter(cfg, k, f)?;
    let s = conv_error_study(c, &filter, &cfg.dists[dist_ix], cfg.samples, seed, cfg.precision)?;
    let violation = derive_constants(c, &filter, cfg.precision)?.width_violation;
    Ok((s, seed, violation))
}

pub fn conv_error(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut rows = Vec::new();
    for c in &cfg.grid {
        for (di, dist) in cfg.dists.iter().enumerate() {
            for &k in &cfg.k {
                for f in 0..cfg.filters {
                    let (s, seed, width_violation) = study(cfg, c, di, k, f)?;
                    rows.push(ConvRow {
                        schema_version: SCHEMA_VERSION,
                        kind: c.kind().name(),
                        m: c.m(),
                        dist: dist.to_string(),
                        k,
                        filter: f,
                        vectors: cfg.samples,
                        activation_seed: seed,
                        c: s.c,
                        c0: s.c0,
                        baseline_mean: s.baseline.mean,
                        baseline_var: s.baseline.variance(),
                        corrected_mean: s.corrected.mean,
                        corrected_var: s.corrected.variance(),
                        corrected_var_se: s.corrected_var_se,
                        closed_form_var: s.closed_form_var,
                        rounded_mean: s.quantized.mean,
                        rounded_var: s.quantized.variance(),
                        precision: precision_name(cfg),
                        width_violation,
                    });
                }
            }
        }
    }
    emit(cfg, &render_rows(cfg, &rows)?)
}

#[derive(Serialize)]
struct SweepRow {
    schema_version: u32,
    kind: &'static str,
    m: u32,
    dist: String,
    k: usize,
    filters: usize,
    vectors: usize,
    baseline_mean: f64,
    baseline_std: f64,
    corrected_mean: f64,
    corrected_std: f64,
    rounded_mean: f64,
    rounded_std: f64,
    /// `1 - Σ Var(ε_G*) / Σ Var(ε_G)` over the filters.
    variance_reduction: f64,
    /// Fraction of filters whose corrected mean lies within 4 standard errors of 0.
    mean_within_4se: f64,
    /// Fraction of filters whose closed-form variance lies within 3 standard errors.
    closed_form_within_3se: Option<f64>,
    precision: &'static str,
    width_violations: usize,
}

pub fn sweep(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut rows = Vec::new();
    for c in &cfg.grid {
        for (di, dist) in cfg.dists.iter().enumerate() {
            for &k in &cfg.k {
                let n = cfg.filters as f64;
                let mut acc = [0.0f64; 6];
                let (mut var_b, mut var_c) = (0.0, 0.0);
                let (mut within, mut cf_hits, mut cf_total, mut violations) = (0usize, 0usize, 0usize, 0usize);
                for f in 0..cfg.filters {
                    let (s, _, v) = study(cfg, c, di, k, f)?;
                    for (slot, val) in acc.iter_mut().zip([
                        s.baseline.mean,
                        s.baseline.std,
                        s.corrected.mean,
                        s.corrected.std,
                        s.quantized.mean,
                        s.quantized.std,
                    ]) {
                        *slot += val / n;
                    }
                    var_b += s.baseline.variance();
                    var_c += s.corrected.variance();
                    if s.corrected.mean.abs() <= 4.0 * s.corrected.std_error() {
                        within += 1;
                    }
                    if let Some(cf) = s.closed_form_var {
                        cf_total += 1;
                        if (cf - s.corrected.variance()).abs() <= 3.0 * s.corrected_var_se {
                            cf_hits += 1;
                        }
                    }
                    violations += usize::from(v);
                }
                rows.push(SweepRow {
                    schema_version: SCHEMA_VERSION,
                    kind: c.kind().name(),
                    m: c.m(),
                    dist: dist.to_string(),
                    k,
                    filters: cfg.filters,
                    vectors: cfg.samples,
                    baseline_mean: acc[0],
                    baseline_std: acc[1],
                    corrected_mean: acc[2],
                    corrected_std: acc[3],
                    rounded_mean: acc[4],
                    rounded_std: acc[5],
                    variance_reduction: if var_b > 0.0 { 1.0 - var_c / var_b } else { 0.0 },
                    mean_within_4se: within as f64 / n,
                    closed_form_within_3se: (cf_total > 0).then(|| cf_hits as f64 / cf_total as f64),
                    precision: precision_name(cfg),
                    width_violations: violations,
                });
            }
        }
    }
    emit(cfg, &render_rows(cfg, &rows)?)
}

#[derive(Serialize)]
struct SystolicRow {
    schema_version: u32,
    kind: &'static str,
    m: u32,
    n: usize,
    tiles: usize,
    seed: u64,
    stream: u64,
    mismatches: u64,
    latency_mismatches: u64,
    faults: u64,
    first_failure: Option<String>,
    status: &'static str,
}

struct Tile {
    filters: Vec<Filter>,
    consts: Vec<FilterConstants>,
    acts: Vec<Vec<u8>>,
}

fn random_tile(rng: &mut SimRng, c: &AxMultConfig, n: usize, cfg: &ExperimentConfig) -> CliResult<Tile> {
    let rows = rng.random_range(1..=n);
    let k = rng.random_range(1..=2 * n);
    let vectors = rng.random_range(1..=3);
    let dist = &cfg.dists[0];
    let draw = |rng: &mut SimRng, len: usize| -> CliResult<Vec<u8>> {
        (0..len).map(|_| axcv::stats::sample(dist, rng).map_err(CliError::from)).collect()
    };
    let mut filters = Vec::with_capacity(rows);
    for _ in 0..rows {
        let weights = draw(rng, k)?;
        filters.push(Filter::new(weights, rng.random_range(-32768..32768))?);
    }
    let acts = (0..vectors).map(|_| draw(rng, k)).collect::<CliResult<Vec<_>>>()?;
    let consts = filters
        .iter()
        .map(|f| derive_constants(c, f, cfg.precision))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tile { filters, consts, acts })
}

/// Cycles for a run split into row blocks and passes of an `n`×`n` array.
fn expected_cycles(array: &MacArrayConfig, rows: usize, k: usize, vectors: usize) -> u64 {
    let n = array.n;
    let passes = k.div_ceil(n) as u64;
    let extra = if array.has_plus_column() { u64::from(array.plus_latency) } else { 0 };
    (0..rows)
        .step_by(n)
        .map(|start| passes * (exact_array_cycles((rows - start).min(n), n, vectors) + extra))
        .sum()
}

fn check_tile(tile: &Tile, out: &TileOutput, array: &MacArrayConfig) -> CliResult<(Option<String>, bool)> {
    let k = tile.filters[0].k();
    let latency_ok = out.cycles == expected_cycles(array, tile.filters.len(), k, tile.acts.len());
    for (p, a) in tile.acts.iter().enumerate() {
        for (r, (f, c)) in tile.filters.iter().zip(&tile.consts).enumerate() {
            let want = axcv::covar::corrected_dot_with(c, f, a)?;
            if out.outputs[p][r] != want {
                let exact = exact_dot(f, a)?;
                let msg = format!("row {r} vector {p}: expected {want} got {} (exact {exact})", out.outputs[p][r]);
                return Ok((Some(msg), latency_ok));
            }
        }
    }
    Ok((None, latency_ok))
}

pub fn systolic_check(cfg: &ExperimentConfig) -> CliResult<()> {
    let mut rows = Vec::new();
    let mut failed = 0;
    let mut traced = cfg.trace.is_none();
    for (ci, c) in cfg.grid.iter().enumerate() {
        for &n in &cfg.array_sizes {
            let array_cfg = MacArrayConfig::new(n, *c)?;
            let stream = ((ci as u64) << 16) | n as u64;
            let mut rng = seeded_rng(cfg.seed, stream);
            let mut row = SystolicRow {
                schema_version: SCHEMA_VERSION,
                kind: c.kind().name(),
                m: c.m(),
                n,
                tiles: cfg.samples,
                seed: cfg.seed,
                stream,
                mismatches: 0,
                latency_mismatches: 0,
                faults: 0,
                first_failure: None,
                status: "PASS",
            };
            for t in 0..cfg.samples {
                let tile = random_tile(&mut rng, c, n, cfg)?;
                let mut array = SystolicArray::new(array_cfg).with_trace(!traced);
                if let Some(fault) = cfg.inject_fault {
                    array = array.with_fault(fault);
                }
                match array.run_filters(&tile.filters, &tile.consts, &tile.acts) {
                    Ok(out) => {
                        if !traced {
                            if let Some(path) = &cfg.trace {
                                let file = std::fs::File::create(path)
                                    .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
                                write_trace_csv(std::io::BufWriter::new(file), &out.trace)?;
                            }
                            traced = true;
                        }
                        let (mismatch, latency_ok) = check_tile(&tile, &out, &array_cfg)?;
                        if let Some(msg) = mismatch {
                            row.mismatches += 1;
                            row.first_failure.get_or_insert(format!("tile {t}: {msg}"));
                        }
                        if !latency_ok {
                            row.latency_mismatches += 1;
                            row.first_failure
                                .get_or_insert(format!("tile {t}: {} cycles", out.cycles));
                        }
                    }
                    Err(e) => {
                        row.faults += 1;
                        row.first_failure.get_or_insert(format!("tile {t}: {e}"));
                    }
                }
            }
            if row.first_failure.is_some() {
                row.status = "FAIL";
                failed += 1;
            }
            rows.push(row);
        }
    }
    emit(cfg, &render_rows(cfg, &rows)?)?;
    if failed > 0 {
        let first = rows.iter().find_map(|r| {
            r.first_failure
                .as_ref()
                .map(|f| format!("{}(m={}) N={} seed={} stream={}: {f}", r.kind, r.m, r.n, r.seed, r.stream))
        });
        return Err(CliError::Check(format!(
            "{failed} of {} configurations failed; first: {}",
            rows.len(),
            first.unwrap_or_default()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct Side {
    accuracy: f64,
    correct: usize,
    accuracy_loss_pp: f64,
    per_layer_mse: Vec<axcv::nn::LayerMse>,
}

#[derive(Serialize)]
struct InferResult {
    kind: &'static str,
    m: u32,
    with_variate: Side,
    without_variate: Side,
    /// Accuracy with the variate minus accuracy without, in percentage points.
    delta_pp: f64,
    width_violations: usize,
}

pub fn infer(cfg: &ExperimentConfig) -> CliResult<()> {
    let model_path = cfg.model.as_ref().expect("validated");
    let data_path = cfg.dataset.as_ref().expect("validated");
    let model = load_model(model_path)?;
    let mut data = Dataset::load(data_path)?;
    if let Some(n) = cfg.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(CliError::Config("the dataset selection is empty".into()));
    }
    let run = |c: AxMultConfig, variate: bool| -> CliResult<(EvalReport, usize)> {
        let ic = InferenceConfig {
            precision: cfg.precision,
            ..InferenceConfig::new(c, variate)
        };
        let prepared = PreparedModel::new(&model, ic)?;
        let violations = (0..model.layers.len())
            .filter_map(|i| prepared.constants(i))
            .flatten()
            .filter(|k| k.width_violation)
            .count();
        Ok((prepared.evaluate(&data, true)?, violations))
    };
    let (exact, _) = run(AxMultConfig::exact(), false)?;
    let side = |r: EvalReport| Side {
        accuracy: r.accuracy,
        correct: r.correct,
        accuracy_loss_pp: 100.0 * (exact.accuracy - r.accuracy),
        per_layer_mse: r.per_layer_mse,
    };
    let mut results = Vec::new();
    for c in &cfg.grid {
        let (with, violations) = run(*c, true)?;
        let (without, _) = run(*c, false)?;
        results.push(InferResult {
            kind: c.kind().name(),
            m: c.m(),
            delta_pp: 100.0 * (with.accuracy - without.accuracy),
            with_variate: side(with),
            without_variate: side(without),
            width_violations: violations,
        });
    }
    let mut report = header(cfg);
    report["model"] = serde_json::json!({
        "path": model_path,
        "name": model.name,
        "format_version": FORMAT_VERSION,
        "layers": model.manifest_lines(),
        "reference_accuracy": model.metadata.get("reference_accuracy"),
    });
    report["dataset"] = serde_json::json!({
        "path": data_path,
        "images": data.len(),
        "format_version": FORMAT_VERSION,
    });
    report["exact"] = serde_json::json!({
        "accuracy": exact.accuracy,
        "correct": exact.correct,
    });
    report["results"] = serde_json::to_value(&results).map_err(|e| CliError::Io(e.to_string()))?;
    emit(cfg, &render_json(&report)?)
}
