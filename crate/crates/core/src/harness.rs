//! Experiment grid runner: configuration, per-cell persistence, reference
//! comparison and static reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bench::{corrupt, ShiftSpec, SyntheticTask, TaskSpec};
use crate::error::{config_bail, Error, Result};
use crate::metrics::{
    evaluate, fmt_f64, log_likelihoods, nll, top1_agreement, total_variation, CalibrationBins,
    CoverageRow, MetricConfig, MetricReport,
};
use crate::model::{bma_predict, Dataset, Matrix, MlpSpec, PredictionSet, Predictive, Targets};
use crate::posterior::{fit, save_posterior, AlgorithmSpec, Approximation, TrainConfig};
use crate::rng::derive_seed;

pub const OUTPUT_ENV: &str = "BAYESBENCH_OUT";

fn d_eval() -> usize {
    10
}
fn d_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    /// Directory and report label; defaults to the algorithm's own name.
    #[serde(default)]
    pub name: Option<String>,
    pub algorithm: AlgorithmSpec,
    /// Replaces the experiment-wide training config for this entry.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl AlgorithmEntry {
    pub fn new(algorithm: AlgorithmSpec) -> Self {
        Self {
            name: None,
            algorithm,
            train: None,
        }
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.algorithm.default_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Seed of the generated dataset; the grid seeds vary training only.
    #[serde(default)]
    pub task_seed: u64,
    /// Defaults to the task's own network.
    #[serde(default)]
    pub model: Option<MlpSpec>,
    #[serde(default)]
    pub shift: ShiftSpec,
    pub algorithms: Vec<AlgorithmEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_eval")]
    pub eval_samples: usize,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    /// Label of the algorithm every other one is compared against.
    #[serde(default)]
    pub reference: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            config_bail!("algorithm list is empty");
        }
        if self.seeds.is_empty() {
            config_bail!("seed list is empty");
        }
        if self.eval_samples == 0 {
            config_bail!("eval_samples must be positive");
        }
        self.metrics.validate()?;
        self.model_spec().validate()?;
        let mut labels: Vec<String> = self.algorithms.iter().map(AlgorithmEntry::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            config_bail!("algorithm label {} appears twice", w[0]);
        }
        if let Some(r) = &self.reference {
            if !labels.contains(r) {
                config_bail!("reference {r} is not one of the algorithms");
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            config_bail!("seed list has duplicates");
        }
        Ok(())
    }

    pub fn model_spec(&self) -> MlpSpec {
        self.model
            .clone()
            .unwrap_or_else(|| self.task.default_model())
    }

    /// `BAYESBENCH_OUT` when set, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v: serde_json::Value = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(
        serde_json::to_string(&v)?.as_bytes(),
    )))
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    canonical_hash(cfg)
}

#[derive(Serialize)]
struct CellKey<'a> {
    task: &'a TaskSpec,
    task_seed: u64,
    model: MlpSpec,
    shift: &'a ShiftSpec,
    algorithm: &'a AlgorithmSpec,
    train: &'a TrainConfig,
    seed: u64,
    eval_samples: usize,
    metrics: &'a MetricConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    /// Corruption level, for the test-id split and its corrupted copies.
    pub level: Option<u32>,
    pub predictions: String,
    pub log_likelihoods: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityBlock {
    pub reference: String,
    pub tv: Option<f64>,
    pub agreement: Option<f64>,
    /// Model NLL minus reference NLL.
    pub nll_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub algorithm: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub splits: BTreeMap<String, SplitRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fidelity: BTreeMap<String, FidelityBlock>,
    /// Ensembles only: min over examples of H(mixture) − mean member entropy.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub min_entropy_gap: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for grid cells; `None` uses rayon's default.
    pub jobs: Option<usize>,
    /// Retrain cells even when a matching record exists.
    pub force: bool,
}

pub fn cell_dir(root: &Path, algorithm: &str, seed: u64) -> PathBuf {
    root.join(algorithm).join(format!("seed_{seed}"))
}

fn record_path(dir: &Path) -> PathBuf {
    dir.join("record.json")
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let p = record_path(dir);
    Ok(serde_json::from_str(
        &fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?,
    )?)
}

fn write_record(dir: &Path, rec: &RunRecord) -> Result<()> {
    let p = record_path(dir);
    fs::write(&p, serde_json::to_string_pretty(rec)? + "\n").map_err(|e| Error::io(&p, e))
}

/// The evaluation splits of a task: test-id, each nonzero corruption level
/// and the generator's own OOD splits.
pub fn evaluation_splits(
    task: &SyntheticTask,
    shift: &ShiftSpec,
) -> Result<Vec<(String, Option<u32>, Dataset)>> {
    let mut out = vec![("test-id".to_string(), Some(0), task.test_id.clone())];
    for &level in &shift.corruption_levels {
        if level > 0 {
            out.push((
                format!("level-{level}"),
                Some(level),
                corrupt(task, level, shift)?,
            ));
        }
    }
    for (k, v) in &task.test_ood {
        out.push((format!("ood-{k}"), None, v.clone()));
    }
    Ok(out)
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// min_i [H(mean_s p_s,i) − mean_s H(p_s,i)]; nonnegative by concavity.
pub fn min_mixture_entropy_gap(members: &[PredictionSet]) -> Result<f64> {
    let mix = bma_predict(members)?;
    let p = mix
        .probs()
        .ok_or_else(|| Error::Input("entropy gap needs classification predictions".into()))?;
    let mut worst = f64::INFINITY;
    for i in 0..p.rows() {
        let mean_h = members
            .iter()
            .map(|m| entropy(m.probs().expect("checked by bma").row(i)))
            .sum::<f64>()
            / members.len() as f64;
        worst = worst.min(entropy(p.row(i)) - mean_h);
    }
    Ok(worst)
}

/// Drops non-finite scalars, which JSON cannot hold.
fn finite_only(mut r: MetricReport) -> MetricReport {
    r.values.retain(|k, v| {
        let keep = v.is_finite();
        if !keep {
            log::warn!("dropping non-finite metric {k}");
        }
        keep
    });
    r
}

fn write_log_likelihoods(path: &Path, logs: &[f64], s: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["example_id".to_string()];
    header.extend((0..s).map(|k| format!("s_{k}")));
    w.write_record(&header)?;
    for (i, row) in logs.chunks(s).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row-major n × S per-sample log-likelihoods and S.
pub fn read_log_likelihoods(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut rd = csv::Reader::from_path(path)?;
    let s = rd.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        for k in 1..=s {
            out.push(parse_f64(&rec[k], path)?);
        }
    }
    Ok((out, s))
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| {
        Error::Input(format!(
            "{}: cannot parse {s:?} as a number",
            path.display()
        ))
    })
}

/// `example_id,label[,group],p_0..` or `example_id,target[,group],mean,std`,
/// floats with 17 significant digits.
pub fn write_predictions(path: &Path, preds: &PredictionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["example_id".to_string()];
    header.push(
        if preds.is_classification() {
            "label"
        } else {
            "target"
        }
        .into(),
    );
    if preds.groups.is_some() {
        header.push("group".into());
    }
    match &preds.predictive {
        Predictive::Classification(p) => header.extend((0..p.cols()).map(|c| format!("p_{c}"))),
        Predictive::Regression { .. } => header.extend(["mean".to_string(), "std".to_string()]),
    }
    w.write_record(&header)?;
    for i in 0..preds.len() {
        let mut rec = vec![i.to_string()];
        rec.push(match &preds.targets {
            Targets::Classes(c) => c[i].to_string(),
            Targets::Values(v) => fmt_f64(v[i]),
        });
        if let Some(g) = &preds.groups {
            rec.push(g[i].to_string());
        }
        match &preds.predictive {
            Predictive::Classification(p) => rec.extend(p.row(i).iter().map(|&v| fmt_f64(v))),
            Predictive::Regression { means, stds } => {
                rec.push(fmt_f64(means[i]));
                rec.push(fmt_f64(stds[i]));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Example ids and the prediction set stored in a prediction file.
pub fn read_predictions(path: &Path) -> Result<(Vec<u64>, PredictionSet)> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let cls = header.get(1) == Some("label");
    if !cls && header.get(1) != Some("target") {
        return Err(Error::Input(format!(
            "{}: second column must be label or target",
            path.display()
        )));
    }
    let has_group = header.get(2) == Some("group");
    let first = 2 + usize::from(has_group);
    let width = header.len() - first;
    let bad = |what: &str| Error::Input(format!("{}: bad {what}", path.display()));
    let (mut ids, mut labels, mut values, mut groups, mut cells) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec?;
        ids.push(rec[0].parse().map_err(|_| bad("example_id"))?);
        if cls {
            labels.push(rec[1].parse().map_err(|_| bad("label"))?);
        } else {
            values.push(parse_f64(&rec[1], path)?);
        }
        if has_group {
            groups.push(rec[2].parse().map_err(|_| bad("group"))?);
        }
        for k in first..header.len() {
            cells.push(parse_f64(&rec[k], path)?);
        }
    }
    let n = ids.len();
    let (predictive, targets) = if cls {
        (
            Predictive::Classification(Matrix::from_vec(n, width, cells)?),
            Targets::Classes(labels),
        )
    } else {
        if width != 2 {
            return Err(bad("regression columns"));
        }
        let means = cells.iter().step_by(2).copied().collect();
        let stds = cells.iter().skip(1).step_by(2).copied().collect();
        (
            Predictive::Regression { means, stds },
            Targets::Values(values),
        )
    };
    let preds = PredictionSet {
        predictive,
        targets,
        groups: has_group.then_some(groups),
    };
    preds.validate()?;
    Ok((ids, preds))
}

struct GridContext<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a SyntheticTask,
    splits: &'a [(String, Option<u32>, Dataset)],
    spec: MlpSpec,
    root: &'a Path,
    force: bool,
}

fn cell_hash(
    ctx: &GridContext,
    entry: &AlgorithmEntry,
    train: &TrainConfig,
    seed: u64,
) -> Result<String> {
    canonical_hash(&CellKey {
        task: &ctx.cfg.task,
        task_seed: ctx.cfg.task_seed,
        model: ctx.spec.clone(),
        shift: &ctx.cfg.shift,
        algorithm: &entry.algorithm,
        train,
        seed,
        eval_samples: ctx.cfg.eval_samples,
        metrics: &ctx.cfg.metrics,
    })
}

fn run_cell(ctx: &GridContext, entry: &AlgorithmEntry, seed: u64) -> Result<RunRecord> {
    let label = entry.label();
    let dir = cell_dir(ctx.root, &label, seed);
    let mut train = entry.train.clone().unwrap_or_else(|| ctx.cfg.train.clone());
    train.seed = seed;
    let hash = cell_hash(ctx, entry, &train, seed)?;
    if !ctx.force {
        if let Ok(rec) = read_record(&dir) {
            if rec.is_ok() && rec.config_hash == hash {
                log::info!("{label} seed {seed}: up to date");
                return Ok(rec);
            }
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let start = Instant::now();
    let mut rec = RunRecord {
        config_hash: hash,
        algorithm: label.clone(),
        seed,
        status: CellStatus::Ok,
        error: None,
        wall_clock_seconds: 0.0,
        splits: BTreeMap::new(),
        fidelity: BTreeMap::new(),
        min_entropy_gap: BTreeMap::new(),
    };
    if let Err(e) = train_and_evaluate(ctx, entry, &train, &dir, &mut rec) {
        log::error!("{label} seed {seed} failed: {e}");
        rec.status = CellStatus::Failed;
        rec.error = Some(e.to_string());
        rec.splits.clear();
        rec.min_entropy_gap.clear();
    }
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_record(&dir, &rec)?;
    Ok(rec)
}

fn train_and_evaluate(
    ctx: &GridContext,
    entry: &AlgorithmEntry,
    train: &TrainConfig,
    dir: &Path,
    rec: &mut RunRecord,
) -> Result<()> {
    let post = fit(
        &ctx.spec,
        &ctx.task.train,
        Some(&ctx.task.val),
        train,
        &entry.algorithm,
        None,
    )?;
    save_posterior(
        &post,
        &dir.join("posterior"),
        &serde_json::json!({ "algorithm": rec.algorithm, "seed": rec.seed }),
    )?;
    let eval_seed = derive_seed(train.seed, 0xE7A1);
    let ensemble = matches!(post.approx, Approximation::Ensemble(_));
    for (name, level, data) in ctx.splits {
        let sets = post.sample_predictions(data, ctx.cfg.eval_samples, eval_seed)?;
        let bma = bma_predict(&sets)?;
        let s = sets.len();
        let per: Vec<Vec<f64>> = sets.iter().map(log_likelihoods).collect::<Result<_>>()?;
        let logs: Vec<f64> = (0..bma.len())
            .flat_map(|i| per.iter().map(move |l| l[i]))
            .collect();
        let pred_file = format!("pred_{name}.csv");
        let ll_file = format!("loglik_{name}.csv");
        write_predictions(&dir.join(&pred_file), &bma)?;
        write_log_likelihoods(&dir.join(&ll_file), &logs, s)?;
        let metrics = finite_only(evaluate(&bma, &ctx.cfg.metrics, Some((&logs, s)))?);
        if ensemble && bma.is_classification() {
            rec.min_entropy_gap
                .insert(name.clone(), min_mixture_entropy_gap(&sets)?);
        }
        rec.splits.insert(
            name.clone(),
            SplitRecord {
                level: *level,
                predictions: pred_file,
                log_likelihoods: ll_file,
                metrics,
            },
        );
    }
    Ok(())
}

/// Recomputes a record's metrics from its persisted prediction files.
pub fn recompute_metrics(
    dir: &Path,
    rec: &RunRecord,
    cfg: &MetricConfig,
) -> Result<BTreeMap<String, MetricReport>> {
    rec.splits
        .iter()
        .map(|(name, s)| {
            let (_, preds) = read_predictions(&dir.join(&s.predictions))?;
            let (logs, k) = read_log_likelihoods(&dir.join(&s.log_likelihoods))?;
            Ok((
                name.clone(),
                finite_only(evaluate(&preds, cfg, Some((&logs, k)))?),
            ))
        })
        .collect()
}

/// Trains and evaluates every (algorithm, seed) cell under the output root
/// (`BAYESBENCH_OUT` or `output_dir`).
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunRecord>> {
    run_experiment_in(cfg, &cfg.output_root(), opts)
}

/// Runs the grid under `root`. Cell failures are recorded, not raised.
/// Records come back algorithm-major in config order.
pub fn run_experiment_in(
    cfg: &ExperimentConfig,
    root: &Path,
    opts: &RunOptions,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let task = cfg.task.generate(cfg.task_seed)?;
    let splits = evaluation_splits(&task, &cfg.shift)?;
    let ctx = GridContext {
        cfg,
        task: &task,
        splits: &splits,
        spec: cfg.model_spec(),
        root,
        force: opts.force,
    };
    let cells: Vec<(&AlgorithmEntry, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let run = || -> Result<Vec<RunRecord>> {
        cells
            .par_iter()
            .map(|&(a, s)| run_cell(&ctx, a, s))
            .collect()
    };
    let mut records = match opts.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    if let Some(reference) = &cfg.reference {
        attach_fidelity(root, &mut records, reference)?;
    }
    Ok(records)
}

fn attach_fidelity(root: &Path, records: &mut [RunRecord], reference: &str) -> Result<()> {
    let refs: BTreeMap<u64, RunRecord> = records
        .iter()
        .filter(|r| r.algorithm == reference && r.is_ok())
        .map(|r| (r.seed, r.clone()))
        .collect();
    for rec in records.iter_mut() {
        if rec.algorithm == reference || !rec.is_ok() {
            continue;
        }
        let Some(r) = refs.get(&rec.seed) else {
            continue;
        };
        let dir = cell_dir(root, &rec.algorithm, rec.seed);
        let rdir = cell_dir(root, reference, rec.seed);
        let mut fid = BTreeMap::new();
        for (name, s) in &rec.splits {
            if let Some(rs) = r.splits.get(name) {
                let mut b = compare_prediction_files(
                    &dir.join(&s.predictions),
                    &rdir.join(&rs.predictions),
                )?;
                b.reference = reference.to_string();
                fid.insert(name.clone(), b);
            }
        }
        if fid != rec.fidelity {
            rec.fidelity = fid;
            write_record(&dir, rec)?;
        }
    }
    Ok(())
}

/// First example id at which two aligned prediction files disagree on row
/// identity or label.
fn first_divergence(a: (&[u64], &PredictionSet), b: (&[u64], &PredictionSet)) -> Option<u64> {
    let n = a.0.len().min(b.0.len());
    for i in 0..n {
        let same_target = match (&a.1.targets, &b.1.targets) {
            (Targets::Classes(x), Targets::Classes(y)) => x[i] == y[i],
            (Targets::Values(x), Targets::Values(y)) => x[i] == y[i],
            _ => false,
        };
        if a.0[i] != b.0[i] || !same_target {
            return Some(a.0[i]);
        }
    }
    if a.0.len() != b.0.len() {
        let longer = if a.0.len() > n { a.0 } else { b.0 };
        return Some(longer[n]);
    }
    None
}

/// TV and top-1 agreement (classification) and the NLL difference between
/// two prediction files over the same examples.
pub fn compare_prediction_files(model: &Path, reference: &Path) -> Result<FidelityBlock> {
    let (ia, a) = read_predictions(model)?;
    let (ib, b) = read_predictions(reference)?;
    if a.is_classification() != b.is_classification() {
        return Err(Error::Input(
            "cannot compare classification with regression predictions".into(),
        ));
    }
    if let Some(id) = first_divergence((&ia, &a), (&ib, &b)) {
        return Err(Error::Input(format!(
            "prediction rows diverge at example_id {id}"
        )));
    }
    let (tv, agreement) = if a.is_classification() {
        (
            Some(total_variation(&a, &b)?),
            Some(top1_agreement(&a, &b)?),
        )
    } else {
        (None, None)
    };
    Ok(FidelityBlock {
        reference: reference.display().to_string(),
        tv,
        agreement,
        nll_delta: nll(&a)? - nll(&b)?,
    })
}

/// Compares two prediction files, or two cell directories split by split.
/// For directories the fidelity block is appended to the model's record.
pub fn compare_to_reference(
    model: &Path,
    reference: &Path,
) -> Result<BTreeMap<String, FidelityBlock>> {
    if model.is_file() {
        let name = model.file_stem().map_or_else(
            || "predictions".into(),
            |s| s.to_string_lossy().into_owned(),
        );
        return Ok(BTreeMap::from([(
            name,
            compare_prediction_files(model, reference)?,
        )]));
    }
    let mut rec = read_record(model)?;
    let r = read_record(reference)?;
    let mut out = BTreeMap::new();
    for (name, s) in &rec.splits {
        let rs = r
            .splits
            .get(name)
            .ok_or_else(|| Error::Input(format!("reference lacks split {name}")))?;
        let mut b = compare_prediction_files(
            &model.join(&s.predictions),
            &reference.join(&rs.predictions),
        )?;
        b.reference = r.algorithm.clone();
        out.insert(name.clone(), b);
    }
    rec.fidelity.extend(out.clone());
    write_record(model, &rec)?;
    Ok(out)
}

/// Every record.json under `root/<algorithm>/seed_<s>/`, sorted by
/// (algorithm, seed).
pub fn collect_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for algo in entries {
        let algo = algo.map_err(|e| Error::io(root, e))?.path();
        if !algo.is_dir() {
            continue;
        }
        for cell in fs::read_dir(&algo).map_err(|e| Error::io(&algo, e))? {
            let cell = cell.map_err(|e| Error::io(&algo, e))?.path();
            if record_path(&cell).is_file() {
                out.push(read_record(&cell)?);
            }
        }
    }
    out.sort_by(|a, b| (&a.algorithm, a.seed).cmp(&(&b.algorithm, b.seed)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub split: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub rows: Vec<SummaryRow>,
    /// Figure paths relative to the report directory.
    pub figures: Vec<String>,
}

impl ReportBundle {
    pub fn get(&self, algorithm: &str, split: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.split == split && r.metric == metric)
    }
}

/// Mean and the Student-t 95% interval; the interval needs two values.
pub fn mean_ci(values: &[f64]) -> (f64, Option<(f64, f64)>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    (mean, Some((mean - half, mean + half)))
}

fn summarize(records: &[&RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        for (split, s) in &r.splits {
            for (m, &v) in &s.metrics.values {
                groups
                    .entry((r.algorithm.clone(), split.clone(), m.clone()))
                    .or_default()
                    .push(v);
            }
        }
        for (split, f) in &r.fidelity {
            let mut push = |m: &str, v: f64| {
                groups
                    .entry((r.algorithm.clone(), split.clone(), m.to_string()))
                    .or_default()
                    .push(v);
            };
            if let Some(tv) = f.tv {
                push("tv", tv);
            }
            if let Some(a) = f.agreement {
                push("agreement", a);
            }
            push("nll_delta", f.nll_delta);
        }
    }
    groups
        .into_iter()
        .map(|((algorithm, split, metric), vals)| {
            let (mean, ci) = mean_ci(&vals);
            SummaryRow {
                algorithm,
                split,
                metric,
                n: vals.len(),
                mean,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
            }
        })
        .collect()
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "algorithm",
        "split",
        "metric",
        "n",
        "mean",
        "ci_low",
        "ci_high",
    ])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.algorithm.clone(),
            r.split.clone(),
            r.metric.clone(),
            r.n.to_string(),
            fmt_f64(r.mean),
            opt(r.ci_low),
            opt(r.ci_high),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, `summary.json` and SVG figures under `out_dir`.
/// Failed records are ignored.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<ReportBundle> {
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ok.sort_by(|a, b| (&a.algorithm, a.seed).cmp(&(&b.algorithm, b.seed)));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = summarize(&ok);
    write_summary_csv(&out_dir.join("summary.csv"), &rows)?;
    let fig_dir = out_dir.join("figures");
    fs::create_dir_all(&fig_dir).map_err(|e| Error::io(&fig_dir, e))?;
    let mut figures = Vec::new();
    let mut save = |name: String, svg: String| -> Result<()> {
        let p = fig_dir.join(&name);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        figures.push(format!("figures/{name}"));
        Ok(())
    };

    let splits: Vec<String> = {
        let mut s: Vec<String> = rows.iter().map(|r| r.split.clone()).collect();
        s.dedup();
        s.sort();
        s.dedup();
        s
    };
    for split in &splits {
        let pts = pareto_points(&rows, split);
        if !pts.is_empty() {
            save(format!("pareto_{split}.svg"), pareto_svg(split, &pts))?;
        }
    }

    let mut algos: Vec<&str> = ok.iter().map(|r| r.algorithm.as_str()).collect();
    algos.dedup();
    for algo in &algos {
        let recs: Vec<&&RunRecord> = ok.iter().filter(|r| r.algorithm == *algo).collect();
        let split = "test-id";
        let bins: Vec<CalibrationBins> = recs
            .iter()
            .filter_map(|r| r.splits.get(split)?.metrics.bins.clone())
            .collect();
        if let Some(pooled) = CalibrationBins::pool(&bins) {
            save(
                format!("reliability_{algo}.svg"),
                reliability_svg(algo, &pooled),
            )?;
            continue;
        }
        let cov: Vec<&Vec<CoverageRow>> = recs
            .iter()
            .filter_map(|r| r.splits.get(split)?.metrics.coverage.as_ref())
            .collect();
        if !cov.is_empty() {
            save(format!("reliability_{algo}.svg"), coverage_svg(algo, &cov))?;
        }
    }

    if ok
        .iter()
        .any(|r| r.fidelity.values().any(|f| f.tv.is_some()))
    {
        save("tv_strip.svg".into(), tv_strip_svg(&ok))?;
    }

    let bundle = ReportBundle { rows, figures };
    let p = out_dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&bundle)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(bundle)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, v: f64) -> f64 {
        PAD + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, v: f64) -> f64 {
        H - PAD - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        xml(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        xml(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml(ylabel)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

fn axis_ticks(s: &mut String, f: &Frame) {
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            f.px(xv),
            H - PAD + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            PAD - 4.0,
            f.py(yv) + 4.0
        );
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// (algorithm, mean task metric, mean signed calibration error) per algorithm.
fn pareto_points(rows: &[SummaryRow], split: &str) -> Vec<(String, f64, f64)> {
    let mut algos: Vec<&str> = rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| r.algorithm.as_str())
        .collect();
    algos.dedup();
    algos
        .into_iter()
        .filter_map(|a| {
            let get = |m: &str| {
                rows.iter()
                    .find(|r| r.algorithm == a && r.split == split && r.metric == m)
                    .map(|r| r.mean)
            };
            let x = get("accuracy").or_else(|| get("pearson"))?;
            let y = get("sece").or_else(|| get("sqce"))?;
            Some((a.to_string(), x, y))
        })
        .collect()
}

fn pareto_svg(split: &str, pts: &[(String, f64, f64)]) -> String {
    let f = Frame::new(
        pts.iter().map(|p| p.1),
        pts.iter().map(|p| p.2).chain(std::iter::once(0.0)),
    );
    let mut s = svg_open(
        &format!("Accuracy vs. signed calibration error ({split})"),
        "task metric",
        "signed calibration error",
    );
    axis_ticks(&mut s, &f);
    let _ = writeln!(
        s,
        r##"<line class="zero-line" x1="{PAD}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        W - PAD,
        y = f.py(0.0)
    );
    for (i, (a, x, y)) in pts.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle class="glyph" data-algorithm="{}" cx="{:.2}" cy="{:.2}" r="5" fill="{c}"/>"#,
            xml(a),
            f.px(*x),
            f.py(*y)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            f.px(*x) + 7.0,
            f.py(*y) - 7.0,
            xml(a)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn reliability_svg(algo: &str, bins: &CalibrationBins) -> String {
    let f = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let mut s = svg_open(
        &format!("Reliability diagram: {algo}"),
        "confidence",
        "accuracy",
    );
    axis_ticks(&mut s, &f);
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        f.px(0.0),
        f.py(0.0),
        f.px(1.0),
        f.py(1.0)
    );
    for m in 0..bins.num_bins() {
        if bins.counts[m] == 0 {
            continue;
        }
        let (lo, hi) = (bins.edges[m], bins.edges[m + 1]);
        let acc = bins.accuracy[m];
        let _ = writeln!(
            s,
            r##"<rect class="bin" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" fill-opacity="0.7" stroke="#fff"/>"##,
            f.px(lo),
            f.py(acc),
            f.px(hi) - f.px(lo),
            f.py(0.0) - f.py(acc)
        );
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#d62728"/>"##,
            f.px(bins.confidence[m]),
            f.py(bins.confidence[m])
        );
    }
    s.push_str("</svg>\n");
    s
}

fn coverage_svg(algo: &str, tables: &[&Vec<CoverageRow>]) -> String {
    let f = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let mut s = svg_open(
        &format!("Interval coverage: {algo}"),
        "confidence level",
        "observed coverage",
    );
    axis_ticks(&mut s, &f);
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        f.px(0.0),
        f.py(0.0),
        f.px(1.0),
        f.py(1.0)
    );
    let k = tables[0].len();
    let mut pts = Vec::with_capacity(k);
    for j in 0..k {
        let level = tables[0][j].level;
        let obs = tables.iter().map(|t| t[j].observed).sum::<f64>() / tables.len() as f64;
        pts.push(format!("{:.2},{:.2}", f.px(level), f.py(obs)));
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        pts.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn split_level(split: &str) -> Option<f64> {
    if split == "test-id" {
        return Some(0.0);
    }
    split.strip_prefix("level-")?.parse().ok()
}

fn tv_strip_svg(records: &[&RunRecord]) -> String {
    let pts: Vec<(usize, f64, f64)> = {
        let mut algos: Vec<&str> = records.iter().map(|r| r.algorithm.as_str()).collect();
        algos.dedup();
        records
            .iter()
            .flat_map(|r| {
                let ai = algos.iter().position(|a| *a == r.algorithm).unwrap_or(0);
                r.fidelity
                    .iter()
                    .filter_map(move |(split, f)| Some((ai, split_level(split)?, f.tv?)))
            })
            .collect()
    };
    let f = Frame::new(
        pts.iter().map(|p| p.1),
        pts.iter().map(|p| p.2).chain(std::iter::once(0.0)),
    );
    let mut s = svg_open(
        "Total variation to the reference by corruption level",
        "corruption level",
        "TV",
    );
    axis_ticks(&mut s, &f);
    for &(ai, x, y) in &pts {
        let jitter = (ai as f64 - 3.0) * 3.0;
        let _ = writeln!(
            s,
            r#"<circle class="glyph" cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
            f.px(x) + jitter,
            f.py(y),
            PALETTE[ai % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}
