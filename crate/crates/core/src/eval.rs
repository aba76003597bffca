//! Predictor evaluation: micro-averaged multi-label F1 and a simplified
//! trace-driven prefetch simulation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::cost::ComplexityReport;
use crate::error::{Error, Result};
use crate::nn::AttentionModel;
use crate::tabularize::TableModel;
use crate::trace::{bit_to_delta, build_dataset, Dataset, DatasetConfig, Sample, TraceRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DEGREE: usize = 2;
/// Capacity of the outstanding-prefetch FIFO.
pub const PREFETCH_QUEUE: usize = 64;

/// Anything that maps a sample to per-bit probabilities.
pub trait Predictor {
    /// `(T, input width, outputs)` expected by the predictor.
    fn shape(&self) -> (usize, usize, usize);
    fn predict(&self, sample: &Sample) -> Result<Vec<f64>>;
}

impl Predictor for AttentionModel {
    fn shape(&self) -> (usize, usize, usize) {
        (self.config.seq_len, self.config.input_dim, self.config.outputs)
    }
    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.forward(&self.sample_input(sample))?.into_data())
    }
}

impl Predictor for TableModel {
    fn shape(&self) -> (usize, usize, usize) {
        (self.config.seq_len, self.config.input_dim, self.config.outputs)
    }
    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.forward(&self.sample_input(sample))?.into_data())
    }
}

/// Returns each sample's own label: the best any predictor can do.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub history: usize,
    pub width: usize,
    pub outputs: usize,
}

impl OraclePredictor {
    pub fn new(cfg: &DatasetConfig) -> Self {
        OraclePredictor {
            history: cfg.history,
            width: cfg.input_width(),
            outputs: cfg.output_size(),
        }
    }
}

impl Predictor for OraclePredictor {
    fn shape(&self) -> (usize, usize, usize) {
        (self.history, self.width, self.outputs)
    }
    fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(sample.label())
    }
}

/// Never predicts anything.
#[derive(Debug, Clone, Copy)]
pub struct SilentPredictor(pub OraclePredictor);

impl Predictor for SilentPredictor {
    fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }
    fn predict(&self, _: &Sample) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0.outputs])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Useful over issued prefetches; 0 when nothing was issued.
    pub prefetch_accuracy: f64,
    /// Covered over total demand accesses.
    pub coverage: f64,
    pub issued: u64,
    pub useful: u64,
    pub demands: u64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Micro-averaged F1 over every (sample, bit) pair; a bit is predicted
/// positive iff its probability is `>= threshold`. Returns `(f1, precision, recall)`.
pub fn f1_score(pred: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> Result<(f64, f64, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
    }
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (p, l) in pred.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(Error::shape(format!(
                "prediction width {} vs label width {}",
                p.len(),
                l.len()
            )));
        }
        for (&pv, &lv) in p.iter().zip(l) {
            match (pv >= threshold, lv >= 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fneg) as f64);
    Ok((ratio(2.0 * precision * recall, precision + recall), precision, recall))
}

fn check_shape(p: &dyn Predictor, history: usize, width: usize, outputs: usize) -> Result<()> {
    if p.shape() != (history, width, outputs) {
        return Err(Error::config(format!(
            "predictor expects (T, S, D_O) = {:?}, data is {:?}",
            p.shape(),
            (history, width, outputs)
        )));
    }
    Ok(())
}

pub fn predict_dataset(p: &dyn Predictor, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_shape(p, data.history, data.width, data.outputs)?;
    data.samples.iter().map(|s| p.predict(s)).collect()
}

/// F1 fields of an [`EvalReport`] for `p` on `data`.
pub fn evaluate_f1(p: &dyn Predictor, data: &Dataset, threshold: f64) -> Result<EvalReport> {
    let preds = predict_dataset(p, data)?;
    let labels: Vec<Vec<f64>> = data.samples.iter().map(Sample::label).collect();
    let (f1, precision, recall) = f1_score(&preds, &labels, threshold)?;
    Ok(EvalReport {
        f1,
        precision,
        recall,
        ..EvalReport::default()
    })
}

/// Simulation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefetchConfig {
    /// Maximum prefetches issued per access.
    pub degree: usize,
    pub threshold: f64,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        PrefetchConfig {
            degree: DEFAULT_DEGREE,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Bits with probability `>= threshold`, by descending probability (lower
/// bit index first on ties), truncated to `degree`.
fn chosen_bits(probs: &[f64], threshold: f64, degree: usize) -> Vec<usize> {
    let mut bits: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= threshold).collect();
    bits.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    bits.truncate(degree);
    bits
}

/// Walks the trace from the first predictable access. At access `t` the
/// demand is checked against outstanding prefetches first (a hit consumes
/// the entry and counts as useful and covered); then, if `t` has a sample,
/// up to `degree` predicted blocks are issued. A block already outstanding
/// is not re-issued. Entries older than `W` accesses expire, and the FIFO
/// drops its oldest entry when full. Demands are the accesses after the
/// first prediction point.
pub fn simulate_prefetch(
    trace: &[TraceRecord],
    p: &dyn Predictor,
    cfg: &DatasetConfig,
    sim: &PrefetchConfig,
) -> Result<EvalReport> {
    let data = build_dataset(trace, cfg)?;
    check_shape(p, data.history, data.width, data.outputs)?;
    let blocks: Vec<u64> = trace.iter().map(TraceRecord::block).collect();
    let first = cfg.history - 1;
    let mut queue: VecDeque<(u64, usize)> = VecDeque::with_capacity(PREFETCH_QUEUE);
    let mut report = EvalReport::default();
    let mut preds = Vec::with_capacity(data.len());
    for t in first..blocks.len() {
        while queue.front().is_some_and(|&(_, at)| at + cfg.lookahead < t) {
            queue.pop_front();
        }
        if t > first {
            report.demands += 1;
            if let Some(pos) = queue.iter().position(|&(b, _)| b == blocks[t]) {
                queue.remove(pos);
                report.useful += 1;
            }
        }
        let Some(sample) = data.samples.get(t - first) else {
            continue;
        };
        let probs = p.predict(sample)?;
        if probs.len() != cfg.output_size() {
            return Err(Error::shape(format!("predictor returned {} outputs", probs.len())));
        }
        for bit in chosen_bits(&probs, sim.threshold, sim.degree) {
            let target = blocks[t].wrapping_add_signed(bit_to_delta(bit, cfg.delta_range));
            if queue.iter().any(|&(b, _)| b == target) {
                continue;
            }
            if queue.len() == PREFETCH_QUEUE {
                queue.pop_front();
            }
            queue.push_back((target, t));
            report.issued += 1;
        }
        preds.push(probs);
    }
    let labels: Vec<Vec<f64>> = data.samples.iter().map(Sample::label).collect();
    let (f1, precision, recall) = f1_score(&preds, &labels, sim.threshold)?;
    report.f1 = f1;
    report.precision = precision;
    report.recall = recall;
    report.prefetch_accuracy = ratio(report.useful as f64, report.issued as f64);
    report.coverage = ratio(report.useful as f64, report.demands as f64);
    Ok(report)
}

/// One named predictor for [`compare_models`].
pub struct Entry<'a> {
    pub name: String,
    pub predictor: &'a dyn Predictor,
    pub complexity: Option<ComplexityReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub report: EvalReport,
    pub complexity: Option<ComplexityReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub const CSV_HEADER: &str =
    "model,f1,precision,recall,accuracy,coverage,issued,useful,demands,latency_cycles,storage_bits,arith_ops";

fn cells(r: &ComparisonRow) -> Vec<String> {
    let e = &r.report;
    let mut v = vec![
        r.name.clone(),
        format!("{:.6}", e.f1),
        format!("{:.6}", e.precision),
        format!("{:.6}", e.recall),
        format!("{:.6}", e.prefetch_accuracy),
        format!("{:.6}", e.coverage),
        e.issued.to_string(),
        e.useful.to_string(),
        e.demands.to_string(),
    ];
    match &r.complexity {
        Some(c) => v.extend([
            c.latency_cycles.to_string(),
            c.storage_bits.to_string(),
            c.arith_ops.to_string(),
        ]),
        None => v.extend(std::iter::repeat_n("-".to_string(), 3)),
    }
    v
}

impl Comparison {
    /// Columns as in [`CSV_HEADER`]; `-` for absent complexity figures.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&cells(r).join(","));
            s.push('\n');
        }
        s
    }

    /// Aligned plain-text table with the same columns as the CSV.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
        let body: Vec<Vec<String>> = self.rows.iter().map(cells).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}

/// Evaluates every entry in order on `data` (F1) and `trace` (prefetch).
/// F1 columns come from `data`; accuracy and coverage from the simulation.
pub fn compare_models(
    entries: &[Entry<'_>],
    data: &Dataset,
    trace: &[TraceRecord],
    cfg: &DatasetConfig,
    sim: &PrefetchConfig,
) -> Result<Comparison> {
    data.check_config(cfg)?;
    for e in entries {
        check_shape(e.predictor, data.history, data.width, data.outputs)
            .map_err(|err| Error::config(format!("{}: {err}", e.name)))?;
    }
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let f = evaluate_f1(e.predictor, data, sim.threshold)?;
        let s = simulate_prefetch(trace, e.predictor, cfg, sim)?;
        rows.push(ComparisonRow {
            name: e.name.clone(),
            report: EvalReport {
                f1: f.f1,
                precision: f.precision,
                recall: f.recall,
                ..s
            },
            complexity: e.complexity.clone(),
        });
    }
    Ok(Comparison { rows })
}
