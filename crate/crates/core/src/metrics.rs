//! Evaluation metrics: unsigned and signed calibration errors, likelihood
//! scores, posterior-fidelity measures and task accuracy metrics.
//!
//! Sign convention for the signed errors: positive means predominantly
//! underconfident, negative means predominantly overconfident.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config_bail, Error, Result};
use crate::model::{Matrix, PredictionSet, Predictive, Targets, LN_2PI};

/// Floor applied to probabilities and densities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn default_bins() -> usize {
    10
}

fn default_levels() -> Vec<f64> {
    midpoint_levels(10)
}

/// The `m` midpoints `(2k - 1) / 2m`, `k = 1..=m`.
pub fn midpoint_levels(m: usize) -> Vec<f64> {
    (1..=m)
        .map(|k| (2 * k - 1) as f64 / (2 * m) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_bins")]
    pub num_bins: usize,
    #[serde(default = "default_levels")]
    pub confidence_levels: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            num_bins: default_bins(),
            confidence_levels: default_levels(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            config_bail!("num_bins must be at least 2");
        }
        if self.confidence_levels.is_empty() {
            config_bail!("confidence_levels must be nonempty");
        }
        if self
            .confidence_levels
            .iter()
            .any(|&r| !(r > 0.0 && r < 1.0))
        {
            config_bail!("confidence levels must lie strictly inside (0, 1)");
        }
        if self.confidence_levels.windows(2).any(|w| w[0] >= w[1]) {
            config_bail!("confidence levels must be strictly increasing");
        }
        Ok(())
    }
}

/// Equal-width confidence bins over [0, 1]. Bin `m` covers `(m/M, (m+1)/M]`,
/// except that confidence 0 goes to the first bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl CalibrationBins {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Writes the reliability-diagram table as
    /// `bin_lo,bin_hi,count,accuracy,confidence`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count,accuracy,confidence")?;
        for m in 0..self.num_bins() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(self.edges[m]),
                fmt_f64(self.edges[m + 1]),
                self.counts[m],
                fmt_f64(self.accuracy[m]),
                fmt_f64(self.confidence[m])
            )?;
        }
        Ok(())
    }

    /// Pools several bin tables with identical edges, weighting by count.
    pub fn pool(tables: &[CalibrationBins]) -> Option<CalibrationBins> {
        let first = tables.first()?;
        let m = first.num_bins();
        let mut counts = vec![0usize; m];
        let mut acc = vec![0.0; m];
        let mut conf = vec![0.0; m];
        for t in tables {
            if t.edges != first.edges {
                return None;
            }
            for k in 0..m {
                counts[k] += t.counts[k];
                acc[k] += t.accuracy[k] * t.counts[k] as f64;
                conf[k] += t.confidence[k] * t.counts[k] as f64;
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                acc[k] /= counts[k] as f64;
                conf[k] /= counts[k] as f64;
            }
        }
        Some(CalibrationBins {
            edges: first.edges.clone(),
            counts,
            accuracy: acc,
            confidence: conf,
        })
    }
}

/// Formats with 17 significant digits so values round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.16e}")
}

pub fn bin_edges(m: usize) -> Vec<f64> {
    (0..=m).map(|k| k as f64 / m as f64).collect()
}

/// Index of the bin holding `conf`, consistent with explicit comparison
/// against [`bin_edges`].
pub fn bin_index(conf: f64, edges: &[f64]) -> usize {
    let m = edges.len() - 1;
    let mut idx = ((conf * m as f64).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    while idx > 0 && conf <= edges[idx] {
        idx -= 1;
    }
    while idx + 1 < m && conf > edges[idx + 1] {
        idx += 1;
    }
    idx
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn classification_parts(preds: &PredictionSet) -> Result<(&Matrix, &[usize])> {
    match (&preds.predictive, &preds.targets) {
        (Predictive::Classification(p), Targets::Classes(y)) => Ok((p, y)),
        _ => Err(Error::Input(
            "expected a classification prediction set".into(),
        )),
    }
}

fn regression_parts(preds: &PredictionSet) -> Result<(&[f64], &[f64], &[f64])> {
    match (&preds.predictive, &preds.targets) {
        (Predictive::Regression { means, stds }, Targets::Values(y)) => Ok((means, stds, y)),
        _ => Err(Error::Input("expected a regression prediction set".into())),
    }
}

/// Expected calibration error and its signed variant.
pub fn ece_sece(preds: &PredictionSet, cfg: &MetricConfig) -> Result<(f64, f64, CalibrationBins)> {
    let (probs, labels) = classification_parts(preds)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Input("ece needs at least one prediction".into()));
    }
    let m = cfg.num_bins;
    let edges = bin_edges(m);
    let mut counts = vec![0usize; m];
    let mut correct = vec![0.0; m];
    let mut conf_sum = vec![0.0; m];
    for (i, row) in probs.iter_rows().enumerate() {
        let pred = argmax(row);
        let conf = row[pred];
        let b = bin_index(conf, &edges);
        counts[b] += 1;
        if pred == labels[i] {
            correct[b] += 1.0;
        }
        conf_sum[b] += conf;
    }
    let mut ece = 0.0;
    let mut sece = 0.0;
    let mut accuracy = vec![0.0; m];
    let mut confidence = vec![0.0; m];
    for b in 0..m {
        if counts[b] == 0 {
            continue;
        }
        let c = counts[b] as f64;
        accuracy[b] = correct[b] / c;
        confidence[b] = conf_sum[b] / c;
        let gap = accuracy[b] - confidence[b];
        let w = c / n as f64;
        ece += w * gap.abs();
        sece += w * gap;
    }
    Ok((
        ece,
        sece,
        CalibrationBins {
            edges,
            counts,
            accuracy,
            confidence,
        },
    ))
}

/// Observed coverage of one central confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub observed: f64,
}

/// Two-sided standard-normal quantile for a central interval of mass `level`.
pub fn central_z(level: f64) -> f64 {
    let std_normal = Normal::standard();
    std_normal.inverse_cdf(0.5 * (1.0 + level))
}

/// Quantile calibration error over central Gaussian intervals, and its signed variant.
pub fn qce_sqce(preds: &PredictionSet, cfg: &MetricConfig) -> Result<(f64, f64, Vec<CoverageRow>)> {
    let (means, stds, y) = regression_parts(preds)?;
    if let Some(i) = stds.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Input(format!(
            "nonpositive predictive std at row {i}"
        )));
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Input("qce needs at least one prediction".into()));
    }
    let mut table = Vec::with_capacity(cfg.confidence_levels.len());
    let mut qce = 0.0;
    let mut sqce = 0.0;
    for &rho in &cfg.confidence_levels {
        let z = central_z(rho);
        let inside = (0..n)
            .filter(|&i| {
                let lo = means[i] - z * stds[i];
                let hi = means[i] + z * stds[i];
                lo <= y[i] && y[i] <= hi
            })
            .count();
        let observed = inside as f64 / n as f64;
        qce += (observed - rho).abs();
        sqce += observed - rho;
        table.push(CoverageRow {
            level: rho,
            observed,
        });
    }
    let m = cfg.confidence_levels.len() as f64;
    Ok((qce / m, sqce / m, table))
}

/// Log predictive density of each example's target, floored at [`PROB_FLOOR`].
pub fn log_likelihoods(preds: &PredictionSet) -> Result<Vec<f64>> {
    let mut clamped = 0usize;
    let out = match (&preds.predictive, &preds.targets) {
        (Predictive::Classification(p), Targets::Classes(y)) => y
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let v = p.get(i, c);
                if v < PROB_FLOOR {
                    clamped += 1;
                }
                v.max(PROB_FLOOR).ln()
            })
            .collect(),
        (Predictive::Regression { means, stds }, Targets::Values(y)) => y
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let r = (t - means[i]) / stds[i];
                let lp = -0.5 * LN_2PI - stds[i].ln() - 0.5 * r * r;
                if lp < PROB_FLOOR.ln() {
                    clamped += 1;
                    PROB_FLOOR.ln()
                } else {
                    lp
                }
            })
            .collect(),
        _ => {
            return Err(Error::Input(
                "prediction kind does not match targets".into(),
            ))
        }
    };
    if clamped > 0 {
        debug!("{clamped} likelihood values clamped at {PROB_FLOOR:e}");
    }
    Ok(out)
}

/// Mean negative log-likelihood.
pub fn nll(preds: &PredictionSet) -> Result<f64> {
    let ll = log_likelihoods(preds)?;
    if ll.is_empty() {
        return Err(Error::Input("nll needs at least one prediction".into()));
    }
    Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
}

fn log_mean_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let count = xs.clone().count() as f64;
    max + (xs.map(|x| (x - max).exp()).sum::<f64>() / count).ln()
}

/// Log marginal likelihood and per-sample log marginal likelihood from an
/// `n × S` matrix of likelihoods `p(y_i | x_i, θ_s)`. Both are log-means
/// over samples, so `S = 1` reduces to the plain log-likelihood sum.
pub fn lml_pslml(likelihoods: &Matrix) -> Result<(f64, f64)> {
    let (n, s) = (likelihoods.rows(), likelihoods.cols());
    if s == 0 {
        config_bail!("lml needs at least one posterior sample");
    }
    if likelihoods.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Input("likelihoods must be nonnegative".into()));
    }
    let logs: Vec<f64> = likelihoods
        .as_slice()
        .iter()
        .map(|&v| v.max(PROB_FLOOR).ln())
        .collect();
    if likelihoods.as_slice().iter().any(|&v| v < PROB_FLOOR) {
        warn!("likelihood entries below {PROB_FLOOR:e} clamped");
    }
    Ok(lml_pslml_from_logs(&logs, n, s))
}

/// Same as [`lml_pslml`] given log-likelihoods, row-major `n × S`.
pub fn lml_pslml_from_logs(logs: &[f64], n: usize, s: usize) -> (f64, f64) {
    let per_sample = (0..s).map(|k| (0..n).map(|i| logs[i * s + k]).sum::<f64>());
    let lml = log_mean_exp(per_sample.collect::<Vec<_>>().into_iter());
    let pslml = (0..n)
        .map(|i| log_mean_exp(logs[i * s..(i + 1) * s].iter().copied()))
        .sum();
    (lml, pslml)
}

fn check_aligned<'a>(
    a: &'a PredictionSet,
    b: &'a PredictionSet,
) -> Result<(&'a Matrix, &'a Matrix)> {
    let (pa, _) = classification_parts(a)?;
    let (pb, _) = classification_parts(b)?;
    if pa.rows() != pb.rows() || pa.cols() != pb.cols() {
        return Err(Error::Input(format!(
            "prediction sets are not aligned: {}x{} vs {}x{}",
            pa.rows(),
            pa.cols(),
            pb.rows(),
            pb.cols()
        )));
    }
    if a.targets != b.targets {
        return Err(Error::Input(
            "prediction sets carry different labels".into(),
        ));
    }
    Ok((pa, pb))
}

/// Mean pointwise total-variation distance between two predictive sets.
pub fn total_variation(a: &PredictionSet, b: &PredictionSet) -> Result<f64> {
    let (pa, pb) = check_aligned(a, b)?;
    let n = pa.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pa
        .iter_rows()
        .zip(pb.iter_rows())
        .map(|(ra, rb)| 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(sum / n as f64)
}

/// Fraction of examples on which both sets pick the same top class.
pub fn top1_agreement(a: &PredictionSet, b: &PredictionSet) -> Result<f64> {
    let (pa, pb) = check_aligned(a, b)?;
    let n = pa.rows();
    if n == 0 {
        return Ok(1.0);
    }
    let same = pa
        .iter_rows()
        .zip(pb.iter_rows())
        .filter(|(ra, rb)| argmax(ra) == argmax(rb))
        .count();
    Ok(same as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    Accuracy,
    MacroF1,
    Pearson,
    WorstGroup,
    QuantileAccuracy,
}

fn correctness(preds: &PredictionSet) -> Result<Vec<bool>> {
    let (p, y) = classification_parts(preds)?;
    Ok(p.iter_rows().zip(y).map(|(r, &c)| argmax(r) == c).collect())
}

fn group_accuracies(preds: &PredictionSet) -> Result<Vec<f64>> {
    let groups = preds
        .groups
        .as_ref()
        .ok_or_else(|| Error::Input("group tags required for group metrics".into()))?;
    let ok = correctness(preds)?;
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (g, c) in groups.iter().zip(ok) {
        let e = per.entry(*g).or_default();
        e.0 += usize::from(c);
        e.1 += 1;
    }
    Ok(per.values().map(|&(c, t)| c as f64 / t as f64).collect())
}

/// Lower quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.len() == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("one of the series is constant".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

pub fn task_accuracy(
    preds: &PredictionSet,
    kind: TaskMetric,
    quantile_level: Option<f64>,
) -> Result<f64> {
    match kind {
        TaskMetric::Accuracy => {
            let ok = correctness(preds)?;
            Ok(ok.iter().filter(|&&c| c).count() as f64 / ok.len().max(1) as f64)
        }
        TaskMetric::MacroF1 => {
            let (p, y) = classification_parts(preds)?;
            let c = p.cols();
            let mut tp = vec![0usize; c];
            let mut fp = vec![0usize; c];
            let mut fneg = vec![0usize; c];
            for (row, &label) in p.iter_rows().zip(y) {
                let pred = argmax(row);
                if pred == label {
                    tp[label] += 1;
                } else {
                    fp[pred] += 1;
                    fneg[label] += 1;
                }
            }
            let f1: f64 = (0..c)
                .map(|k| {
                    let denom = 2 * tp[k] + fp[k] + fneg[k];
                    if denom == 0 {
                        0.0
                    } else {
                        2.0 * tp[k] as f64 / denom as f64
                    }
                })
                .sum();
            Ok(f1 / c as f64)
        }
        TaskMetric::Pearson => {
            let (means, _, y) = regression_parts(preds)?;
            pearson(means, y)
        }
        TaskMetric::WorstGroup => Ok(group_accuracies(preds)?
            .into_iter()
            .fold(f64::INFINITY, f64::min)),
        TaskMetric::QuantileAccuracy => {
            let q = quantile_level.unwrap_or(0.1);
            Ok(quantile(&group_accuracies(preds)?, q))
        }
    }
}

/// Named scalar metrics for one prediction set plus its reliability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<CalibrationBins>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Vec<CoverageRow>>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Computes every metric that applies to the prediction set's kind.
///
/// `sample_log_liks`, when given, is the row-major `n × S` matrix of
/// per-sample log-likelihoods used for LML/psLML.
pub fn evaluate(
    preds: &PredictionSet,
    cfg: &MetricConfig,
    sample_log_liks: Option<(&[f64], usize)>,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let v = &mut report.values;
    v.insert("nll".into(), nll(preds)?);
    if preds.is_classification() {
        let (ece, sece, bins) = ece_sece(preds, cfg)?;
        v.insert(
            "accuracy".into(),
            task_accuracy(preds, TaskMetric::Accuracy, None)?,
        );
        v.insert(
            "macro_f1".into(),
            task_accuracy(preds, TaskMetric::MacroF1, None)?,
        );
        v.insert("ece".into(), ece);
        v.insert("sece".into(), sece);
        if preds.groups.is_some() {
            v.insert(
                "worst_group_accuracy".into(),
                task_accuracy(preds, TaskMetric::WorstGroup, None)?,
            );
            v.insert(
                "quantile_accuracy".into(),
                task_accuracy(preds, TaskMetric::QuantileAccuracy, Some(0.1))?,
            );
        }
        report.bins = Some(bins);
    } else {
        let (qce, sqce, table) = qce_sqce(preds, cfg)?;
        v.insert("qce".into(), qce);
        v.insert("sqce".into(), sqce);
        if let Ok(r) = task_accuracy(preds, TaskMetric::Pearson, None) {
            v.insert("pearson".into(), r);
        }
        report.coverage = Some(table);
    }
    if let Some((logs, s)) = sample_log_liks {
        let (lml, pslml) = lml_pslml_from_logs(logs, preds.len(), s);
        report.values.insert("lml".into(), lml);
        report.values.insert("pslml".into(), pslml);
    }
    Ok(report)
}
