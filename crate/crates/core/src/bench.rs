//! Synthetic distribution-shift tasks: corrupted two-moons classification,
//! gap-split regression, grouped classification and conjugate linear tasks
//! with analytic posteriors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::metrics::fmt_f64;
use crate::model::{Dataset, Head, Matrix, MlpSpec, Split, Targets};
use crate::reference::ConjugateLinearModel;
use crate::rng::{derive_seed, rng, Rng};

fn d_levels() -> Vec<u32> {
    vec![0, 1, 3, 5]
}
fn d_rotation() -> f64 {
    10.0
}
fn d_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    #[serde(default = "d_levels")]
    pub corruption_levels: Vec<u32>,
    /// Degrees of rotation per corruption level.
    #[serde(default = "d_rotation")]
    pub rotation_per_level: f64,
    #[serde(default = "d_noise")]
    pub noise_std_per_level: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            corruption_levels: d_levels(),
            rotation_per_level: d_rotation(),
            noise_std_per_level: d_noise(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Regression,
}

fn d_label_noise() -> f64 {
    0.0
}
fn d_true() -> bool {
    true
}

/// Generator choice and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    TwoMoons {
        n: usize,
        #[serde(default = "d_label_noise")]
        label_noise: f64,
    },
    GapRegression {
        n: usize,
    },
    GroupedClassification {
        n: usize,
        groups: usize,
        imbalance: f64,
    },
    Conjugate {
        d: usize,
        n: usize,
        noise_std: f64,
        prior_std: f64,
        #[serde(default = "d_true")]
        orthogonal: bool,
    },
    ConjugateClassification {
        d: usize,
        n: usize,
        prior_std: f64,
    },
}

impl TaskSpec {
    pub fn generate(&self, seed: u64) -> Result<SyntheticTask> {
        match *self {
            TaskSpec::TwoMoons { n, label_noise } => make_two_moons(n, label_noise, seed),
            TaskSpec::GapRegression { n } => make_gap_regression(n, seed),
            TaskSpec::GroupedClassification {
                n,
                groups,
                imbalance,
            } => make_grouped_classification(n, groups, imbalance, seed),
            TaskSpec::Conjugate {
                d,
                n,
                noise_std,
                prior_std,
                orthogonal,
            } => make_conjugate_task(d, n, noise_std, prior_std, seed, orthogonal).map(|t| t.0),
            TaskSpec::ConjugateClassification { d, n, prior_std } => {
                make_conjugate_classification(d, n, prior_std, seed)
            }
        }
    }

    /// A reasonable default network for the task.
    pub fn default_model(&self) -> MlpSpec {
        match *self {
            TaskSpec::TwoMoons { .. } => MlpSpec::new(vec![2, 16, 16, 2], Head::Categorical),
            TaskSpec::GapRegression { .. } => {
                let mut s = MlpSpec::new(vec![1, 32, 32, 1], Head::GaussianFixedStd);
                s.fixed_output_std = 0.1;
                s
            }
            TaskSpec::GroupedClassification { .. } => {
                MlpSpec::new(vec![2, 16, 2], Head::Categorical)
            }
            TaskSpec::Conjugate { d, noise_std, .. } => conjugate_spec(d, noise_std),
            TaskSpec::ConjugateClassification { d, .. } => {
                let mut s = MlpSpec::new(vec![d, 2], Head::Categorical);
                s.bias = false;
                s
            }
        }
    }
}

/// A bias-free linear model with a fixed-std Gaussian head: the network
/// whose posterior the conjugate oracle describes exactly.
pub fn conjugate_spec(d: usize, noise_std: f64) -> MlpSpec {
    let mut s = MlpSpec::new(vec![d, 1], Head::GaussianFixedStd);
    s.bias = false;
    s.fixed_output_std = noise_std;
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub name: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub generator: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test_id: Dataset,
    /// Out-of-distribution splits built by the generator (e.g. `gap`).
    pub test_ood: BTreeMap<String, Dataset>,
}

fn split_sizes(n: usize) -> (usize, usize) {
    let train = (n * 7) / 10;
    let val = n / 10;
    (train, val)
}

/// Shuffles examples and cuts them 70/10/20.
fn split_three(
    inputs: Vec<Vec<f64>>,
    targets: Targets,
    groups: Option<Vec<u32>>,
    r: &mut Rng,
) -> Result<(Dataset, Dataset, Dataset)> {
    let n = inputs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let all = Dataset::new(Matrix::from_rows(&inputs)?, targets, groups, Split::Train)?;
    let (nt, nv) = split_sizes(n);
    let mut train = all.subset(&idx[..nt]);
    let mut val = all.subset(&idx[nt..nt + nv]);
    let mut test = all.subset(&idx[nt + nv..]);
    train.split = Split::Train;
    val.split = Split::Val;
    test.split = Split::TestId;
    Ok((train, val, test))
}

/// Two interleaved half circles with 0.1 Gaussian feature jitter.
/// `label_noise` is the probability of flipping each label.
pub fn make_two_moons(n: usize, label_noise: f64, seed: u64) -> Result<SyntheticTask> {
    if n < 40 {
        config_bail!("two-moons needs n >= 40, got {n}");
    }
    if !(0.0..=1.0).contains(&label_noise) {
        config_bail!("label_noise must lie in [0, 1]");
    }
    let mut r = rng(seed);
    let jitter = Normal::new(0.0, 0.1).expect("valid std");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t: f64 = r.random_range(0.0..std::f64::consts::PI);
        let (a, b) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(vec![a + jitter.sample(&mut r), b + jitter.sample(&mut r)]);
        let flip = label_noise > 0.0 && r.random::<f64>() < label_noise;
        y.push(if flip { 1 - class } else { class });
    }
    let (train, val, test_id) = split_three(x, Targets::Classes(y), None, &mut r)?;
    Ok(SyntheticTask {
        name: "two-moons".into(),
        kind: TaskKind::Classification,
        seed,
        generator: TaskSpec::TwoMoons { n, label_noise },
        train,
        val,
        test_id,
        test_ood: BTreeMap::new(),
    })
}

/// The test-id split rotated about the origin by `level · rotation` degrees
/// (first two features) plus Gaussian noise of std `level · noise_std`.
pub fn corrupt(task: &SyntheticTask, level: u32, shift: &ShiftSpec) -> Result<Dataset> {
    if !shift.corruption_levels.contains(&level) {
        config_bail!(
            "corruption level {level} is not in {:?}",
            shift.corruption_levels
        );
    }
    if level == 0 {
        return Ok(task.test_id.clone());
    }
    let src = &task.test_id;
    let mut out = src.clone();
    out.split = Split::TestOod;
    let theta = (level as f64 * shift.rotation_per_level).to_radians();
    let (s, c) = theta.sin_cos();
    let std = level as f64 * shift.noise_std_per_level;
    let mut r = rng(derive_seed(task.seed, 0xC0_0000 + u64::from(level)));
    for i in 0..out.len() {
        let row = out.inputs.row_mut(i);
        if row.len() >= 2 {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
        if std > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += std * z;
            }
        }
    }
    Ok(out)
}

/// y = sin(3x) + N(0, 0.1²). In-distribution x lies in [−2,−0.5]∪[0.5,2];
/// the `gap` split covers (−0.5, 0.5) with n/5 points.
pub fn make_gap_regression(n: usize, seed: u64) -> Result<SyntheticTask> {
    if n < 50 {
        config_bail!("gap regression needs n >= 50, got {n}");
    }
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let mag: f64 = r.random_range(0.5..=2.0);
        let x = if r.random::<bool>() { mag } else { -mag };
        xs.push(vec![x]);
        ys.push((3.0 * x).sin() + noise.sample(&mut r));
    }
    let (train, val, test_id) = split_three(xs, Targets::Values(ys), None, &mut r)?;
    let m = n / 5;
    let mut gx = Vec::with_capacity(m);
    let mut gy = Vec::with_capacity(m);
    for _ in 0..m {
        let mut x: f64 = r.random_range(-0.5..0.5);
        if x == -0.5 {
            x = 0.0;
        }
        gx.push(vec![x]);
        gy.push((3.0 * x).sin() + noise.sample(&mut r));
    }
    let gap = Dataset::new(
        Matrix::from_rows(&gx)?,
        Targets::Values(gy),
        None,
        Split::TestOod,
    )?;
    Ok(SyntheticTask {
        name: "gap-regression".into(),
        kind: TaskKind::Regression,
        seed,
        generator: TaskSpec::GapRegression { n },
        train,
        val,
        test_id,
        test_ood: BTreeMap::from([("gap".to_string(), gap)]),
    })
}

/// Group sizes: the smallest group gets `round(imbalance · n)` examples and
/// the rest share the remainder evenly.
pub fn group_sizes(n: usize, groups: usize, imbalance: f64) -> Result<Vec<usize>> {
    if groups < 2 {
        config_bail!("grouped classification needs at least 2 groups");
    }
    if !(imbalance > 0.0 && imbalance <= 1.0 / groups as f64 + 1e-12) {
        config_bail!("imbalance must lie in (0, 1/groups]");
    }
    let small = ((imbalance * n as f64).round() as usize).max(1);
    let rest = n - small.min(n);
    let each = rest / (groups - 1);
    let mut sizes = vec![small];
    for g in 1..groups {
        sizes.push(each + usize::from(g - 1 < rest % (groups - 1)));
    }
    Ok(sizes)
}

/// Two Gaussian blobs per group; group g shifts both class means by
/// g·(0.8, −0.8). Group 0 is the smallest.
pub fn make_grouped_classification(
    n: usize,
    groups: usize,
    imbalance: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    let sizes = group_sizes(n, groups, imbalance)?;
    let mut r = rng(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for (gi, &size) in sizes.iter().enumerate() {
        let shift = 0.8 * gi as f64;
        for k in 0..size {
            let class = k % 2;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            x.push(vec![sign + shift + 0.7 * a, sign - shift + 0.7 * b]);
            y.push(class);
            g.push(gi as u32);
        }
    }
    let (train, val, test_id) = split_three(x, Targets::Classes(y), Some(g), &mut r)?;
    Ok(SyntheticTask {
        name: "grouped".into(),
        kind: TaskKind::Classification,
        seed,
        generator: TaskSpec::GroupedClassification {
            n,
            groups,
            imbalance,
        },
        train,
        val,
        test_id,
        test_ood: BTreeMap::new(),
    })
}

fn gaussian_rows(rows: usize, d: usize, r: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *r)).collect())
        .collect()
}

/// Bayesian linear regression with weights drawn from N(0, prior_std² I).
/// The training split has `n` rows; with `orthogonal` its columns are
/// orthogonalized and scaled so that XᵀX = n·I. Val and test-id splits use
/// fresh Gaussian inputs.
pub fn make_conjugate_task(
    d: usize,
    n: usize,
    noise_std: f64,
    prior_std: f64,
    seed: u64,
    orthogonal: bool,
) -> Result<(SyntheticTask, ConjugateLinearModel)> {
    if n <= d {
        config_bail!("conjugate task needs n > d");
    }
    if !(noise_std >= 0.0) || !(prior_std > 0.0) {
        config_bail!("noise_std must be nonnegative and prior_std positive");
    }
    let mut r = rng(seed);
    let w: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            prior_std * z
        })
        .collect();
    let mut design = gaussian_rows(n, d, &mut r);
    if orthogonal {
        let x = DMatrix::from_fn(n, d, |i, j| design[i][j]);
        let q = x.qr().q();
        let scale = (n as f64).sqrt();
        design = (0..n)
            .map(|i| (0..d).map(|j| q[(i, j)] * scale).collect())
            .collect();
    }
    let label = |rows: &[Vec<f64>], r: &mut Rng| -> Vec<f64> {
        rows.iter()
            .map(|row| {
                let z: f64 = StandardNormal.sample(r);
                row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise_std * z
            })
            .collect()
    };
    let y = label(&design, &mut r);
    let val_x = gaussian_rows((n / 5).max(2), d, &mut r);
    let val_y = label(&val_x, &mut r);
    let test_x = gaussian_rows((n / 2).max(2), d, &mut r);
    let test_y = label(&test_x, &mut r);
    let train = Dataset::new(
        Matrix::from_rows(&design)?,
        Targets::Values(y.clone()),
        None,
        Split::Train,
    )?;
    let val = Dataset::new(
        Matrix::from_rows(&val_x)?,
        Targets::Values(val_y),
        None,
        Split::Val,
    )?;
    let test_id = Dataset::new(
        Matrix::from_rows(&test_x)?,
        Targets::Values(test_y),
        None,
        Split::TestId,
    )?;
    let model = ConjugateLinearModel {
        design,
        targets: y,
        noise_std,
        prior_std,
    };
    let task = SyntheticTask {
        name: "conjugate".into(),
        kind: TaskKind::Regression,
        seed,
        generator: TaskSpec::Conjugate {
            d,
            n,
            noise_std,
            prior_std,
            orthogonal,
        },
        train,
        val,
        test_id,
        test_ood: BTreeMap::new(),
    };
    Ok((task, model))
}

/// Softmax regression with two classes and weights drawn from the prior;
/// the classification analogue of the conjugate task. Train has `n`
/// examples, val n/5 and test-id 2n.
pub fn make_conjugate_classification(
    d: usize,
    n: usize,
    prior_std: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    if n == 0 || d == 0 {
        config_bail!("conjugate classification needs n, d > 0");
    }
    if !(prior_std > 0.0) {
        config_bail!("prior_std must be positive");
    }
    let mut r = rng(seed);
    let w: Vec<f64> = (0..2 * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            prior_std * z
        })
        .collect();
    let make = |rows: usize, split: Split, r: &mut Rng| -> Result<Dataset> {
        let x = gaussian_rows(rows, d, r);
        let y = x
            .iter()
            .map(|row| {
                let z0: f64 = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum();
                let z1: f64 = row.iter().zip(&w[d..]).map(|(a, b)| a * b).sum();
                let p1 = 1.0 / (1.0 + (z0 - z1).exp());
                usize::from(r.random::<f64>() < p1)
            })
            .collect();
        Dataset::new(Matrix::from_rows(&x)?, Targets::Classes(y), None, split)
    };
    let train = make(n, Split::Train, &mut r)?;
    let val = make((n / 5).max(2), Split::Val, &mut r)?;
    let test_id = make(2 * n, Split::TestId, &mut r)?;
    Ok(SyntheticTask {
        name: "conjugate-classification".into(),
        kind: TaskKind::Classification,
        seed,
        generator: TaskSpec::ConjugateClassification { d, n, prior_std },
        train,
        val,
        test_id,
        test_ood: BTreeMap::new(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSidecar {
    name: String,
    kind: TaskKind,
    seed: u64,
    generator: TaskSpec,
    /// split name → CSV file
    splits: BTreeMap<String, String>,
}

fn write_split(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.inputs.cols()).map(|j| format!("x_{j}")).collect();
    header.push("target".into());
    if data.groups.is_some() {
        header.push("group".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.inputs.row(i).iter().map(|&v| fmt_f64(v)).collect();
        rec.push(match &data.targets {
            Targets::Classes(c) => c[i].to_string(),
            Targets::Values(v) => fmt_f64(v[i]),
        });
        if let Some(g) = &data.groups {
            rec.push(g[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_split(path: &Path, kind: TaskKind, split: Split) -> Result<Dataset> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let has_group = header.iter().any(|h| h == "group");
    let mut x = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut groups = Vec::new();
    let bad = |what: &str| Error::Input(format!("{}: bad {what}", path.display()));
    for rec in rd.records() {
        let rec = rec?;
        let row: Vec<f64> = (0..d)
            .map(|j| rec[j].parse().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        x.push(row);
        match kind {
            TaskKind::Classification => classes.push(rec[d].parse().map_err(|_| bad("label"))?),
            TaskKind::Regression => values.push(rec[d].parse().map_err(|_| bad("target"))?),
        }
        if has_group {
            groups.push(rec[d + 1].parse().map_err(|_| bad("group"))?);
        }
    }
    let inputs = if x.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&x)?
    };
    let targets = match kind {
        TaskKind::Classification => Targets::Classes(classes),
        TaskKind::Regression => Targets::Values(values),
    };
    Dataset::new(inputs, targets, has_group.then_some(groups), split)
}

/// Writes one CSV per split plus `task.json`.
pub fn write_task(task: &SyntheticTask, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    let mut all: Vec<(String, &Dataset)> = vec![
        ("train".into(), &task.train),
        ("val".into(), &task.val),
        ("test-id".into(), &task.test_id),
    ];
    for (k, v) in &task.test_ood {
        all.push((format!("test-ood-{k}"), v));
    }
    for (name, data) in all {
        let file = format!("{name}.csv");
        write_split(&dir.join(&file), data)?;
        splits.insert(name, file);
    }
    let side = TaskSidecar {
        name: task.name.clone(),
        kind: task.kind,
        seed: task.seed,
        generator: task.generator.clone(),
        splits,
    };
    let path = dir.join("task.json");
    fs::write(&path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&path, e))
}

pub fn read_task(dir: &Path) -> Result<SyntheticTask> {
    let path = dir.join("task.json");
    let side: TaskSidecar =
        serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let get = |name: &str, split: Split| -> Result<Dataset> {
        let file = side
            .splits
            .get(name)
            .ok_or_else(|| Error::Input(format!("task.json lacks split {name}")))?;
        read_split(&dir.join(file), side.kind, split)
    };
    let mut test_ood = BTreeMap::new();
    for name in side.splits.keys() {
        if let Some(k) = name.strip_prefix("test-ood-") {
            test_ood.insert(k.to_string(), get(name, Split::TestOod)?);
        }
    }
    Ok(SyntheticTask {
        name: side.name.clone(),
        kind: side.kind,
        seed: side.seed,
        generator: side.generator.clone(),
        train: get("train", Split::Train)?,
        val: get("val", Split::Val)?,
        test_id: get("test-id", Split::TestId)?,
        test_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::analytic_linear_gaussian_posterior;

    #[test]
    fn two_moons_is_deterministic_and_balanced() {
        let a = make_two_moons(201, 0.0, 4).unwrap();
        assert_eq!(a, make_two_moons(201, 0.0, 4).unwrap());
        assert_eq!(a.train.len() + a.val.len() + a.test_id.len(), 201);
        assert_eq!(a.train.len(), 140);
        let mut counts = [0usize; 2];
        for d in [&a.train, &a.val, &a.test_id] {
            let Targets::Classes(c) = &d.targets else {
                panic!()
            };
            for &y in c {
                counts[y] += 1;
            }
        }
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        assert!(make_two_moons(39, 0.0, 0).is_err());
    }

    #[test]
    fn corruption_rules() {
        let t = make_two_moons(100, 0.0, 1).unwrap();
        let shift = ShiftSpec::default();
        assert_eq!(corrupt(&t, 0, &shift).unwrap(), t.test_id);
        assert!(corrupt(&t, 2, &shift).is_err());
        let full = ShiftSpec {
            corruption_levels: vec![0, 4],
            rotation_per_level: 90.0,
            noise_std_per_level: 0.0,
        };
        let c = corrupt(&t, 4, &full).unwrap();
        for (a, b) in c.inputs.as_slice().iter().zip(t.test_id.inputs.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.targets, t.test_id.targets);
    }

    #[test]
    fn gap_regression_construction() {
        let t = make_gap_regression(200, 3).unwrap();
        for d in [&t.train, &t.val, &t.test_id] {
            assert!(d
                .inputs
                .as_slice()
                .iter()
                .all(|x| x.abs() >= 0.5 && x.abs() <= 2.0));
        }
        let gap = &t.test_ood["gap"];
        assert_eq!(gap.len(), 40);
        assert!(gap.inputs.as_slice().iter().all(|x| x.abs() < 0.5));
        assert_eq!((3.0f64 * 0.0).sin(), 0.0);
    }

    #[test]
    fn grouped_sizes_and_tags() {
        assert_eq!(group_sizes(90, 3, 1.0 / 3.0).unwrap(), vec![30, 30, 30]);
        assert_eq!(group_sizes(100, 2, 0.1).unwrap(), vec![10, 90]);
        assert!(group_sizes(100, 1, 0.5).is_err());
        let t = make_grouped_classification(300, 3, 0.1, 2).unwrap();
        let mut seen = [0usize; 3];
        for d in [&t.train, &t.val, &t.test_id] {
            for &g in d.groups.as_ref().unwrap() {
                seen[g as usize] += 1;
            }
        }
        assert_eq!(seen.iter().sum::<usize>(), 300);
        assert_eq!(seen[0], 30);
    }

    #[test]
    fn conjugate_task_oracles() {
        let (t, m) = make_conjugate_task(3, 40, 1e-9, 1.0, 7, false).unwrap();
        let (mean, _) = analytic_linear_gaussian_posterior(&m, 3).unwrap();
        let TaskSpec::Conjugate { .. } = t.generator else {
            panic!()
        };
        // regenerate the weights the way the generator draws them
        let mut r = rng(7);
        let w: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut r)).collect();
        for (a, b) in mean.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }

        let (_, m) = make_conjugate_task(2, 100, 0.5, 1.0, 1, true).unwrap();
        let (_, cov) = analytic_linear_gaussian_posterior(&m, 2).unwrap();
        assert!(cov[0][1].abs() < 1e-12);
        let xtx: f64 = m.design.iter().map(|r| r[0] * r[0]).sum();
        assert!((xtx - 100.0).abs() < 1e-9);

        // predictive variance x' Σ x + σ_n² is at least σ_n²
        for x in &m.design {
            let v: f64 = (0..2)
                .map(|i| (0..2).map(|j| x[i] * cov[i][j] * x[j]).sum::<f64>())
                .sum();
            assert!(v + 0.25 >= 0.25);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for t in [
            make_grouped_classification(60, 2, 0.25, 1).unwrap(),
            make_gap_regression(60, 2).unwrap(),
        ] {
            let sub = dir.path().join(&t.name);
            write_task(&t, &sub).unwrap();
            assert_eq!(read_task(&sub).unwrap(), t);
        }
    }
}
