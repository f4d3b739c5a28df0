//! Posterior predictive estimates, credible intervals and certainty flags.
//!
//! Draw `s` of an evaluation is keyed by `(seed, s, layer)` only, so every
//! example sees the same `N` parameter draws and results do not depend on how
//! examples are batched or scheduled across threads.

use std::io::Write;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::net::Network;
use crate::rng::Purpose;
use crate::tensor::Batch;

pub const DEFAULT_SAMPLES: usize = 200;
const CHUNK: usize = 256;

/// Softmax outputs of `samples` parameter draws: `result[s]` is a
/// `x.rows × classes` batch.
pub fn predictive_samples(
    net: &Network,
    x: &Batch,
    samples: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one predictive sample".into(),
        ));
    }
    let work = net.stabilized_copy(seed);
    let factors = work.factors()?;
    (0..samples)
        .into_par_iter()
        .map(|s| {
            let params = work.sample_params(&factors, seed, Purpose::Predict, s as u64)?;
            let mut out = Batch::zeros(x.rows, net.arch.classes);
            for start in (0..x.rows).step_by(CHUNK) {
                let end = (start + CHUNK).min(x.rows);
                let chunk = Batch::from_vec(
                    end - start,
                    x.cols,
                    x.data[start * x.cols..end * x.cols].to_vec(),
                )?;
                let logits = work.logits(&params, &chunk)?;
                for n in 0..chunk.rows {
                    out.row_mut(start + n)
                        .copy_from_slice(&softmax(logits.row(n)));
                }
            }
            Ok(out)
        })
        .collect()
}

/// Mean of `samples` softmax outputs for one input.
pub fn posterior_predictive(
    net: &Network,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let b = Batch::from_vec(1, x.len(), x.to_vec())?;
    let draws = predictive_samples(net, &b, samples, seed)?;
    Ok(mean_rows(draws.iter().map(|d| d.row(0))))
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Linear interpolation between order statistics (Hyndman–Fan type 7):
/// `h = (N − 1) p`, `q = x_⌊h⌋ + (h − ⌊h⌋)(x_⌊h⌋+1 − x_⌊h⌋)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = (h.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-class `(lo, hi)` at quantiles `(1 − coverage)/2` and `(1 + coverage)/2`
/// of an `N × C` sample matrix. A single sample gives degenerate intervals.
pub fn credible_intervals(samples: &[Vec<f64>], coverage: f64) -> Result<Vec<(f64, f64)>> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage {coverage} not in (0, 1)"
        )));
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let c = first.len();
    if samples.iter().any(|s| s.len() != c) {
        return Err(Error::ShapeMismatch(
            "samples have different class counts".into(),
        ));
    }
    let tail = (1.0 - coverage) / 2.0;
    Ok((0..c)
        .map(|k| {
            let mut col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            col.sort_by(f64::total_cmp);
            (
                quantile_sorted(&col, tail),
                quantile_sorted(&col, 1.0 - tail),
            )
        })
        .collect())
}

/// Certain iff `lo(predicted) > hi(c)` for every other class.
pub fn certainty_classify(intervals: &[(f64, f64)], predicted: usize) -> bool {
    let lo = intervals[predicted].0;
    intervals
        .iter()
        .enumerate()
        .all(|(c, &(_, hi))| c == predicted || lo > hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveReport {
    pub probs: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub predicted: usize,
    pub certain: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CertaintyTable {
    pub correct_certain: usize,
    pub correct_uncertain: usize,
    pub wrong_certain: usize,
    pub wrong_uncertain: usize,
}

impl CertaintyTable {
    pub fn certain_fraction_correct(&self) -> f64 {
        self.correct_certain as f64 / (self.correct_certain + self.correct_uncertain).max(1) as f64
    }

    pub fn certain_fraction_wrong(&self) -> f64 {
        self.wrong_certain as f64 / (self.wrong_certain + self.wrong_uncertain).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub coverage: f64,
    pub samples: usize,
    pub error_rate: f64,
    pub table: CertaintyTable,
    pub labels: Vec<usize>,
    pub reports: Vec<PredictiveReport>,
}

impl Evaluation {
    pub fn certain_set(&self) -> Vec<usize> {
        (0..self.reports.len())
            .filter(|&i| self.reports[i].certain)
            .collect()
    }
}

/// Evaluates the test set at several coverage levels from one set of draws.
pub fn evaluate_levels(
    net: &Network,
    test: &Dataset,
    samples: usize,
    coverages: &[f64],
    seed: u64,
) -> Result<Vec<Evaluation>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let (x, labels) = test.batch(&idx);
    let draws = predictive_samples(net, &x, samples, seed)?;
    coverages
        .iter()
        .map(|&coverage| {
            let reports: Vec<PredictiveReport> = (0..test.len())
                .into_par_iter()
                .map(|n| {
                    let rows: Vec<Vec<f64>> = draws.iter().map(|d| d.row(n).to_vec()).collect();
                    let probs = mean_rows(rows.iter().map(Vec::as_slice));
                    let intervals = credible_intervals(&rows, coverage)?;
                    let predicted = crate::net::train::argmax(&probs);
                    let certain = certainty_classify(&intervals, predicted);
                    Ok(PredictiveReport {
                        probs,
                        intervals,
                        predicted,
                        certain,
                    })
                })
                .collect::<Result<_>>()?;
            let mut table = CertaintyTable::default();
            let mut wrong = 0;
            for (r, &label) in reports.iter().zip(&labels) {
                match (r.predicted == label, r.certain) {
                    (true, true) => table.correct_certain += 1,
                    (true, false) => table.correct_uncertain += 1,
                    (false, true) => table.wrong_certain += 1,
                    (false, false) => table.wrong_uncertain += 1,
                }
                wrong += usize::from(r.predicted != label);
            }
            Ok(Evaluation {
                coverage,
                samples,
                error_rate: wrong as f64 / labels.len() as f64,
                table,
                labels: labels.clone(),
                reports,
            })
        })
        .collect()
}

pub fn evaluate(
    net: &Network,
    test: &Dataset,
    samples: usize,
    coverage: f64,
    seed: u64,
) -> Result<Evaluation> {
    Ok(evaluate_levels(net, test, samples, &[coverage], seed)?.remove(0))
}

/// `index,true_label,predicted_label,mean_0..,lo_0..,hi_0..,certain`.
pub fn write_report_csv<W: Write>(w: &mut W, eval: &Evaluation) -> Result<()> {
    let c = eval.reports.first().map_or(0, |r| r.probs.len());
    let mut header = vec![
        "index".to_string(),
        "true_label".into(),
        "predicted_label".into(),
    ];
    for prefix in ["mean", "lo", "hi"] {
        header.extend((0..c).map(|k| format!("{prefix}_{k}")));
    }
    header.push("certain".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, (r, label)) in eval.reports.iter().zip(&eval.labels).enumerate() {
        let mut f = vec![i.to_string(), label.to_string(), r.predicted.to_string()];
        f.extend(r.probs.iter().map(f64::to_string));
        f.extend(r.intervals.iter().map(|iv| iv.0.to_string()));
        f.extend(r.intervals.iter().map(|iv| iv.1.to_string()));
        f.push(r.certain.to_string());
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}
