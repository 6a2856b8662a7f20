//! Tiny differentiable feedforward models.
//!
//! Parameters live in one flat [`ParameterVector`] whose [`Layout`] records
//! where each layer's weight matrix (row-major, `out × in`) and bias vector
//! sit. All inference algorithms and the HMC reference work on that flat view.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::rng::{derive_seed, rng, Rng};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            config_bail!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            );
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                config_bail!("ragged rows: {} vs {}", r.len(), cols);
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Swish,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    #[default]
    Categorical,
    /// Gaussian with mean from the single output unit and a fixed std.
    GaussianFixedStd,
    /// Gaussian with (mean, log-std) from two output units.
    GaussianLearnedStd,
}

impl Head {
    pub fn is_classification(self) -> bool {
        matches!(self, Head::Categorical)
    }
}

fn default_true() -> bool {
    true
}

fn default_fixed_std() -> f64 {
    0.1
}

/// Architecture of a small multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub head: Head,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_fixed_std")]
    pub fixed_output_std: f64,
    /// Whether layers carry bias vectors. Bias-free linear models are the
    /// exact conjugate regression model.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, head: Head) -> Self {
        Self {
            layer_widths,
            activation: Activation::Relu,
            head,
            dropout_rate: 0.0,
            fixed_output_std: default_fixed_std(),
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            config_bail!("layer_widths needs at least 2 entries");
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            config_bail!("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            config_bail!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate);
        }
        let out = self.output_width();
        match self.head {
            Head::Categorical if out < 2 => {
                config_bail!("categorical head needs output width >= 2, got {out}")
            }
            Head::GaussianFixedStd if out != 1 => {
                config_bail!("gaussian-fixed-std head needs output width 1, got {out}")
            }
            Head::GaussianLearnedStd if out != 2 => {
                config_bail!("gaussian-learned-std head needs output width 2, got {out}")
            }
            _ => {}
        }
        if !(self.fixed_output_std > 0.0) {
            config_bail!("fixed_output_std must be positive");
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Layout {
        Layout::for_widths(&self.layer_widths, self.bias)
    }
}

/// Position of one layer's parameters in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

impl LayerSegment {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.rows * self.cols
    }

    pub fn bias_range(&self) -> Option<std::ops::Range<usize>> {
        self.bias_offset.map(|o| o..o + self.rows)
    }

    /// The contiguous range covering weights and bias.
    pub fn full_range(&self) -> std::ops::Range<usize> {
        let end = self.bias_range().map_or(self.weight_range().end, |r| r.end);
        self.weight_offset..end
    }
}

/// Ordered segment table: layer 0 weight, layer 0 bias, layer 1 weight, ...
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerSegment>,
    pub total: usize,
}

impl Layout {
    pub fn for_widths(widths: &[usize], bias: bool) -> Self {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        let mut offset = 0;
        for w in widths.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            let weight_offset = offset;
            offset += rows * cols;
            let bias_offset = if bias {
                let o = offset;
                offset += rows;
                Some(o)
            } else {
                None
            };
            layers.push(LayerSegment {
                rows,
                cols,
                weight_offset,
                bias_offset,
            });
        }
        Self {
            layers,
            total: offset,
        }
    }

    pub fn last_layer(&self) -> &LayerSegment {
        self.layers.last().expect("layout has at least one layer")
    }

    /// Whether flat index `i` belongs to a bias vector.
    pub fn is_bias(&self, i: usize) -> bool {
        self.layers
            .iter()
            .any(|l| l.bias_range().is_some_and(|r| r.contains(&i)))
    }
}

/// Flat parameter vector with its segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total {
            config_bail!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.total
            );
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weight_range()]
    }

    pub fn bias(&self, layer: usize) -> Option<&[f64]> {
        self.layout.layers[layer]
            .bias_range()
            .map(|r| &self.values[r])
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Fan-in scaled Gaussian initialization: weights ~ N(0, 1/fan_in), biases 0.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParameterVector {
    let layout = Arc::new(spec.layout());
    let mut params = ParameterVector::zeros(Arc::clone(&layout));
    let mut r = rng(seed);
    for seg in &layout.layers {
        let scale = fan_in_scale(seg.cols);
        for v in &mut params.values[seg.weight_range()] {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = scale * z;
        }
    }
    params
}

pub fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Target of example `i` as a float (class index for classification).
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Targets::Classes(c) => c[i] as f64,
            Targets::Values(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub groups: Option<Vec<u32>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        targets: Targets,
        groups: Option<Vec<u32>>,
        split: Split,
    ) -> Result<Self> {
        if inputs.rows() != targets.len() {
            config_bail!(
                "dataset has {} input rows but {} targets",
                inputs.rows(),
                targets.len()
            );
        }
        if let Some(g) = &groups {
            if g.len() != inputs.rows() {
                config_bail!(
                    "dataset has {} rows but {} group tags",
                    inputs.rows(),
                    g.len()
                );
            }
        }
        Ok(Self {
            inputs,
            targets,
            groups,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
            split: self.split,
        }
    }

    /// Checks labels against the spec's class count and widths.
    pub fn check_against(&self, spec: &MlpSpec) -> Result<()> {
        if self.inputs.cols() != spec.input_width() {
            config_bail!(
                "dataset width {} does not match input width {}",
                self.inputs.cols(),
                spec.input_width()
            );
        }
        match (&self.targets, spec.head) {
            (Targets::Classes(c), Head::Categorical) => {
                let k = spec.output_width();
                if let Some(&bad) = c.iter().find(|&&y| y >= k) {
                    config_bail!("class label {bad} outside [0, {k})");
                }
            }
            (Targets::Values(_), Head::GaussianFixedStd | Head::GaussianLearnedStd) => {}
            _ => config_bail!("target kind does not match the model head"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    /// n × C row-stochastic matrix.
    Classification(Matrix),
    Regression {
        means: Vec<f64>,
        stds: Vec<f64>,
    },
}

/// Per-example predictive distributions with the labels they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub predictive: Predictive,
    pub targets: Targets,
    pub groups: Option<Vec<u32>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.predictive, Predictive::Classification(_))
    }

    pub fn probs(&self) -> Option<&Matrix> {
        match &self.predictive {
            Predictive::Classification(p) => Some(p),
            Predictive::Regression { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.predictive {
            Predictive::Classification(p) => {
                if p.rows() != self.targets.len() {
                    return Err(Error::Input("probability rows do not match labels".into()));
                }
                for (i, row) in p.iter_rows().enumerate() {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::Input(format!(
                            "row {i} is not a probability vector (sum {s})"
                        )));
                    }
                }
            }
            Predictive::Regression { means, stds } => {
                if means.len() != self.targets.len() || stds.len() != means.len() {
                    return Err(Error::Input(
                        "regression columns have different lengths".into(),
                    ));
                }
                if let Some(i) = stds.iter().position(|&s| !(s > 0.0)) {
                    return Err(Error::Input(format!("std at row {i} is not positive")));
                }
            }
        }
        Ok(())
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct ForwardCache {
    /// Input activation of every layer (after dropout), row-major n × cols.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers of every hidden layer.
    masks: Vec<Option<Vec<f64>>>,
    output: Matrix,
}

fn check_shapes(spec: &MlpSpec, params: &ParameterVector, inputs: &Matrix) -> Result<()> {
    spec.validate()?;
    if **params.layout() != spec.layout() {
        config_bail!("parameter layout does not match the model spec");
    }
    if inputs.cols() != spec.input_width() {
        config_bail!(
            "input width {} does not match layer_widths[0] = {}",
            inputs.cols(),
            spec.input_width()
        );
    }
    Ok(())
}

fn affine(
    seg: &LayerSegment,
    params: &ParameterVector,
    layer: usize,
    a: &[f64],
    n: usize,
) -> Vec<f64> {
    let w = params.weights(layer);
    let b = params.bias(layer);
    let mut z = vec![0.0; n * seg.rows];
    for i in 0..n {
        let x = &a[i * seg.cols..(i + 1) * seg.cols];
        let out = &mut z[i * seg.rows..(i + 1) * seg.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let wr = &w[r * seg.cols..(r + 1) * seg.cols];
            let mut acc = b.map_or(0.0, |b| b[r]);
            for (wv, xv) in wr.iter().zip(x) {
                acc += wv * xv;
            }
            *o = acc;
        }
    }
    z
}

fn forward_cached(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
    dropout_seed: Option<u64>,
) -> ForwardCache {
    let n = inputs.rows();
    let layout = params.layout();
    let last = layout.layers.len() - 1;
    let mut mask_rng: Option<Rng> = dropout_seed.filter(|_| spec.dropout_rate > 0.0).map(rng);
    let keep_scale = 1.0 / (1.0 - spec.dropout_rate);

    let mut cache_inputs = Vec::with_capacity(layout.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut masks = Vec::with_capacity(last);
    let mut a = inputs.as_slice().to_vec();
    for (l, seg) in layout.layers.iter().enumerate() {
        let z = affine(seg, params, l, &a, n);
        cache_inputs.push(a);
        if l == last {
            return ForwardCache {
                inputs: cache_inputs,
                pre,
                masks,
                output: Matrix {
                    rows: n,
                    cols: seg.rows,
                    data: z,
                },
            };
        }
        let mut h: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        let mask = mask_rng.as_mut().map(|r| {
            let m: Vec<f64> = (0..h.len())
                .map(|_| {
                    if r.random::<f64>() >= spec.dropout_rate {
                        keep_scale
                    } else {
                        0.0
                    }
                })
                .collect();
            for (hv, mv) in h.iter_mut().zip(&m) {
                *hv *= mv;
            }
            m
        });
        pre.push(z);
        masks.push(mask);
        a = h;
    }
    unreachable!("layout has at least one layer")
}

/// Raw network outputs: logits for categorical heads, the mean for
/// fixed-std heads, and (mean, log-std) pairs for learned-std heads.
///
/// Dropout is applied only when `dropout_seed` is given; without it the
/// inverted scaling makes this the expectation network.
pub fn forward(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
    dropout_seed: Option<u64>,
) -> Result<Matrix> {
    check_shapes(spec, params, inputs)?;
    Ok(forward_cached(spec, params, inputs, dropout_seed).output)
}

/// Activations entering the final layer (no dropout).
pub fn penultimate_features(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
) -> Result<Matrix> {
    check_shapes(spec, params, inputs)?;
    let cache = forward_cached(spec, params, inputs, None);
    let seg = params.layout().last_layer();
    Ok(Matrix {
        rows: inputs.rows(),
        cols: seg.cols,
        data: cache.inputs.into_iter().last().expect("at least one layer"),
    })
}

/// Converts raw outputs into a predictive distribution per example.
pub fn outputs_to_predictions(
    spec: &MlpSpec,
    outputs: Matrix,
    targets: &Targets,
    groups: Option<&Vec<u32>>,
) -> PredictionSet {
    let predictive = match spec.head {
        Head::Categorical => {
            let mut p = outputs;
            for i in 0..p.rows() {
                softmax_in_place(p.row_mut(i));
            }
            Predictive::Classification(p)
        }
        Head::GaussianFixedStd => Predictive::Regression {
            means: outputs.as_slice().to_vec(),
            stds: vec![spec.fixed_output_std; outputs.rows()],
        },
        Head::GaussianLearnedStd => Predictive::Regression {
            means: outputs.iter_rows().map(|r| r[0]).collect(),
            stds: outputs.iter_rows().map(|r| r[1].exp()).collect(),
        },
    };
    PredictionSet {
        predictive,
        targets: targets.clone(),
        groups: groups.cloned(),
    }
}

pub fn predict(
    spec: &MlpSpec,
    params: &ParameterVector,
    data: &Dataset,
    dropout_seed: Option<u64>,
) -> Result<PredictionSet> {
    let out = forward(spec, params, &data.inputs, dropout_seed)?;
    Ok(outputs_to_predictions(
        spec,
        out,
        &data.targets,
        data.groups.as_ref(),
    ))
}

/// Per-example NLL and its gradient with respect to the raw outputs.
pub(crate) fn head_loss(
    spec: &MlpSpec,
    outputs: &Matrix,
    targets: &Targets,
) -> Result<(Vec<f64>, Matrix)> {
    let n = outputs.rows();
    let mut losses = Vec::with_capacity(n);
    let mut delta = Matrix::zeros(n, outputs.cols());
    match (spec.head, targets) {
        (Head::Categorical, Targets::Classes(y)) => {
            for i in 0..n {
                let row = delta.row_mut(i);
                row.copy_from_slice(outputs.row(i));
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                losses.push(lse - row[y[i]]);
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
                row[y[i]] -= 1.0;
            }
        }
        (Head::GaussianFixedStd, Targets::Values(y)) => {
            let s2 = spec.fixed_output_std * spec.fixed_output_std;
            let norm = 0.5 * (LN_2PI + s2.ln());
            for i in 0..n {
                let r = outputs.get(i, 0) - y[i];
                losses.push(norm + 0.5 * r * r / s2);
                delta.set(i, 0, r / s2);
            }
        }
        (Head::GaussianLearnedStd, Targets::Values(y)) => {
            for i in 0..n {
                let mu = outputs.get(i, 0);
                let log_s = outputs.get(i, 1);
                let inv_var = (-2.0 * log_s).exp();
                let r = mu - y[i];
                losses.push(log_s + 0.5 * LN_2PI + 0.5 * r * r * inv_var);
                delta.set(i, 0, r * inv_var);
                delta.set(i, 1, 1.0 - r * r * inv_var);
            }
        }
        _ => config_bail!("target kind does not match the model head"),
    }
    Ok((losses, delta))
}

fn backward(
    spec: &MlpSpec,
    params: &ParameterVector,
    cache: &ForwardCache,
    mut delta: Vec<f64>,
    n: usize,
) -> ParameterVector {
    let layout = Arc::clone(params.layout());
    let mut grad = ParameterVector::zeros(Arc::clone(&layout));
    for (l, seg) in layout.layers.iter().enumerate().rev() {
        let a = &cache.inputs[l];
        {
            let gw = &mut grad.values[seg.weight_range()];
            for i in 0..n {
                let d = &delta[i * seg.rows..(i + 1) * seg.rows];
                let x = &a[i * seg.cols..(i + 1) * seg.cols];
                for (r, &dr) in d.iter().enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    let g = &mut gw[r * seg.cols..(r + 1) * seg.cols];
                    for (gv, xv) in g.iter_mut().zip(x) {
                        *gv += dr * xv;
                    }
                }
            }
        }
        if let Some(br) = seg.bias_range() {
            let gb = &mut grad.values[br];
            for i in 0..n {
                for (gv, dv) in gb.iter_mut().zip(&delta[i * seg.rows..(i + 1) * seg.rows]) {
                    *gv += dv;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = params.weights(l);
        let mut prev = vec![0.0; n * seg.cols];
        for i in 0..n {
            let d = &delta[i * seg.rows..(i + 1) * seg.rows];
            let p = &mut prev[i * seg.cols..(i + 1) * seg.cols];
            for (r, &dr) in d.iter().enumerate() {
                for (pv, wv) in p.iter_mut().zip(&w[r * seg.cols..(r + 1) * seg.cols]) {
                    *pv += dr * wv;
                }
            }
        }
        if let Some(m) = &cache.masks[l - 1] {
            for (pv, mv) in prev.iter_mut().zip(m) {
                *pv *= mv;
            }
        }
        for (pv, zv) in prev.iter_mut().zip(&cache.pre[l - 1]) {
            *pv *= spec.activation.derivative(*zv);
        }
        delta = prev;
    }
    grad
}

/// Mean negative log-likelihood over the batch and its gradient.
pub fn nll_and_grad(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
    targets: &Targets,
) -> Result<(f64, ParameterVector)> {
    nll_and_grad_with_dropout(spec, params, inputs, targets, None)
}

pub fn nll_and_grad_with_dropout(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
    targets: &Targets,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParameterVector)> {
    check_shapes(spec, params, inputs)?;
    let n = inputs.rows();
    if n == 0 {
        config_bail!("empty batch");
    }
    if targets.len() != n {
        config_bail!("batch has {} inputs but {} targets", n, targets.len());
    }
    let cache = forward_cached(spec, params, inputs, dropout_seed);
    let (losses, mut delta) = head_loss(spec, &cache.output, targets)?;
    let nll = losses.iter().sum::<f64>() / n as f64;
    if !nll.is_finite() {
        return Err(Error::Divergence {
            batch: 0,
            detail: format!("non-finite negative log-likelihood {nll}"),
        });
    }
    let inv_n = 1.0 / n as f64;
    for v in delta.as_mut_slice() {
        *v *= inv_n;
    }
    let grad = backward(spec, params, &cache, delta.data, n);
    Ok((nll, grad))
}

/// log N(params; 0, prior_std² I) and its gradient.
pub fn log_prior_and_grad(
    params: &ParameterVector,
    prior_std: f64,
) -> Result<(f64, ParameterVector)> {
    if !(prior_std > 0.0) {
        config_bail!("prior_std must be positive, got {prior_std}");
    }
    let var = prior_std * prior_std;
    let d = params.len() as f64;
    let lp = -0.5 * d * (LN_2PI + var.ln()) - 0.5 * params.squared_norm() / var;
    let grad = params.with_values(params.values.iter().map(|v| -v / var).collect());
    Ok((lp, grad))
}

/// Bayesian model average of member predictive distributions.
///
/// Classification averages probability rows; regression returns the
/// moment-matched mixture (mean of means, total variance).
pub fn bma_predict(members: &[PredictionSet]) -> Result<PredictionSet> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("bma_predict needs at least one member".into()))?;
    for m in &members[1..] {
        if m.targets != first.targets {
            config_bail!("members disagree on labels");
        }
        match (&m.predictive, &first.predictive) {
            (Predictive::Classification(a), Predictive::Classification(b))
                if a.rows() == b.rows() && a.cols() == b.cols() => {}
            (Predictive::Regression { means: a, .. }, Predictive::Regression { means: b, .. })
                if a.len() == b.len() => {}
            _ => config_bail!("members have mixed kinds or shapes"),
        }
    }
    if members.len() == 1 {
        return Ok(first.clone());
    }
    let s = members.len() as f64;
    let predictive = match &first.predictive {
        Predictive::Classification(p0) => {
            let mut acc = Matrix::zeros(p0.rows(), p0.cols());
            for m in members {
                let p = m.probs().expect("checked kind");
                for (a, v) in acc.data.iter_mut().zip(&p.data) {
                    *a += v;
                }
            }
            for a in &mut acc.data {
                *a /= s;
            }
            Predictive::Classification(acc)
        }
        Predictive::Regression { means: m0, .. } => {
            let n = m0.len();
            let mut mean = vec![0.0; n];
            let mut second = vec![0.0; n];
            for m in members {
                if let Predictive::Regression { means, stds } = &m.predictive {
                    for i in 0..n {
                        mean[i] += means[i];
                        second[i] += stds[i] * stds[i] + means[i] * means[i];
                    }
                }
            }
            let stds = mean
                .iter_mut()
                .zip(&second)
                .map(|(mu, sq)| {
                    *mu /= s;
                    let var = sq / s - *mu * *mu;
                    var.max(f64::MIN_POSITIVE).sqrt()
                })
                .collect();
            Predictive::Regression { means: mean, stds }
        }
    };
    Ok(PredictionSet {
        predictive,
        targets: first.targets.clone(),
        groups: first.groups.clone(),
    })
}

/// Fresh dropout seeds for `count` stochastic passes.
pub fn pass_seeds(seed: u64, count: usize) -> impl Iterator<Item = u64> {
    (0..count as u64).map(move |i| derive_seed(seed, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_spec(widths: Vec<usize>, head: Head) -> MlpSpec {
        MlpSpec::new(widths, head)
    }

    fn fd_check(spec: &MlpSpec, params: &ParameterVector, x: &Matrix, y: &Targets) -> f64 {
        let (_, g) = nll_and_grad(spec, params, x, y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let mut p = params.clone();
            p.values[i] += h;
            let up = nll_and_grad(spec, &p, x, y).unwrap().0;
            p.values[i] -= 2.0 * h;
            let down = nll_and_grad(spec, &p, x, y).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g.values[i]).abs());
        }
        worst
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let spec = tiny_spec(vec![3, 5, 4], Head::Categorical);
        let p = ParameterVector::zeros(Arc::new(spec.layout()));
        let x = random_inputs(6, 3, 1);
        let out = forward(&spec, &p, &x, None).unwrap();
        let preds = outputs_to_predictions(&spec, out, &Targets::Classes(vec![0; 6]), None);
        for row in preds.probs().unwrap().iter_rows() {
            for &v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut spec = tiny_spec(vec![3, 3], Head::Categorical);
        spec.bias = true;
        let mut p = ParameterVector::zeros(Arc::new(spec.layout()));
        for i in 0..3 {
            p.values[i * 3 + i] = 1.0;
        }
        let x = random_inputs(4, 3, 2);
        let out = forward(&spec, &p, &x, None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn hand_evaluated_two_layer_relu() {
        // W1 = [[1, 2], [-3, 4]], b1 = [0.5, 0.5]; W2 = [[1, -1], [2, 0.5]], b2 = [0, 1]
        // x = (1, 0): z1 = (1.5, -2.5) -> h = (1.5, 0) -> z2 = (1.5, 4.0)
        let spec = tiny_spec(vec![2, 2, 2], Head::Categorical);
        let p = ParameterVector::from_values(
            Arc::new(spec.layout()),
            vec![1.0, 2.0, -3.0, 4.0, 0.5, 0.5, 1.0, -1.0, 2.0, 0.5, 0.0, 1.0],
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = forward(&spec, &p, &x, None).unwrap();
        assert_eq!(out.row(0), &[1.5, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let spec = tiny_spec(vec![2, 3, 2], Head::Categorical);
        let p = init_params(&spec, 0);
        let x = random_inputs(2, 3, 0);
        assert!(matches!(
            forward(&spec, &p, &x, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_predictive_nll_is_log_c() {
        let spec = tiny_spec(vec![2, 4], Head::Categorical);
        let p = ParameterVector::zeros(Arc::new(spec.layout()));
        let x = random_inputs(5, 2, 3);
        let (nll, _) = nll_and_grad(&spec, &p, &x, &Targets::Classes(vec![0, 1, 2, 3, 1])).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fixed_nll_at_mean() {
        let spec = tiny_spec(vec![1, 1], Head::GaussianFixedStd);
        let p = ParameterVector::zeros(Arc::new(spec.layout()));
        let x = random_inputs(3, 1, 4);
        let (nll, _) = nll_and_grad(&spec, &p, &x, &Targets::Values(vec![0.0; 3])).unwrap();
        let expect = 0.5 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((nll - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_head() {
        let cases = [
            (vec![2, 4, 3], Head::Categorical, Activation::Relu),
            (vec![2, 4, 3], Head::Categorical, Activation::Swish),
            (vec![2, 4, 1], Head::GaussianFixedStd, Activation::Swish),
            (vec![2, 4, 2], Head::GaussianLearnedStd, Activation::Swish),
        ];
        for (k, (w, head, act)) in cases.into_iter().enumerate() {
            let mut spec = tiny_spec(w, head);
            spec.activation = act;
            spec.fixed_output_std = 0.5;
            let p = init_params(&spec, 10 + k as u64);
            let x = random_inputs(7, 2, 20 + k as u64);
            let y = if head.is_classification() {
                Targets::Classes(vec![0, 1, 2, 1, 0, 2, 1])
            } else {
                Targets::Values(vec![0.3, -1.0, 0.5, 2.0, 0.0, -0.2, 1.1])
            };
            let err = fd_check(&spec, &p, &x, &y);
            assert!(err < 1e-6, "case {k}: max fd error {err}");
        }
    }

    #[test]
    fn log_prior_analytic_values() {
        let layout = Arc::new(Layout::for_widths(&[1, 2], false));
        let p = ParameterVector::zeros(layout);
        let (lp, g) = log_prior_and_grad(&p, 1.0).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!(g.values.iter().all(|&v| v == 0.0));

        let layout = Arc::new(Layout::for_widths(&[1, 1], false));
        let p = ParameterVector::from_values(layout, vec![1.0]).unwrap();
        assert_eq!(log_prior_and_grad(&p, 1.0).unwrap().1.values, vec![-1.0]);
        assert!(log_prior_and_grad(&p, 0.0).is_err());
    }

    #[test]
    fn bma_examples() {
        let t = Targets::Classes(vec![0]);
        let a = PredictionSet {
            predictive: Predictive::Classification(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()),
            targets: t.clone(),
            groups: None,
        };
        let b = PredictionSet {
            predictive: Predictive::Classification(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap()),
            targets: t,
            groups: None,
        };
        assert_eq!(bma_predict(std::slice::from_ref(&a)).unwrap(), a);
        let m = bma_predict(&[a, b]).unwrap();
        assert_eq!(m.probs().unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn bma_regression_mixture_moments() {
        let t = Targets::Values(vec![0.0]);
        let mk = |mu: f64| PredictionSet {
            predictive: Predictive::Regression {
                means: vec![mu],
                stds: vec![1.0],
            },
            targets: t.clone(),
            groups: None,
        };
        let m = bma_predict(&[mk(0.0), mk(2.0)]).unwrap();
        let Predictive::Regression { means, stds } = m.predictive else {
            panic!()
        };
        assert!((means[0] - 1.0).abs() < 1e-15);
        assert!((stds[0] - 2f64.sqrt()).abs() < 1e-15);

        // Monte-Carlo oracle: sample the equal-weight mixture directly.
        let mut r = rng(99);
        let n = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let comp = if r.random::<bool>() { 2.0 } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut r);
            let v = comp + z;
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((mean - means[0]).abs() < 0.01);
        assert!((sd - stds[0]).abs() < 0.01);
    }

    #[test]
    fn bma_rejects_mixed_kinds() {
        let c = PredictionSet {
            predictive: Predictive::Classification(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()),
            targets: Targets::Classes(vec![0]),
            groups: None,
        };
        let r = PredictionSet {
            predictive: Predictive::Regression {
                means: vec![0.0],
                stds: vec![1.0],
            },
            targets: Targets::Classes(vec![0]),
            groups: None,
        };
        assert!(bma_predict(&[c, r]).is_err());
    }

    #[test]
    fn dropout_only_with_seed_and_deterministic() {
        let mut spec = tiny_spec(vec![3, 8, 2], Head::Categorical);
        spec.dropout_rate = 0.5;
        let p = init_params(&spec, 1);
        let x = random_inputs(4, 3, 1);
        let plain = forward(&spec, &p, &x, None).unwrap();
        assert_eq!(plain, forward(&spec, &p, &x, None).unwrap());
        let d1 = forward(&spec, &p, &x, Some(5)).unwrap();
        assert_eq!(d1, forward(&spec, &p, &x, Some(5)).unwrap());
        assert_ne!(d1, plain);
    }

    #[test]
    fn spec_invariants() {
        assert!(MlpSpec::new(vec![3], Head::Categorical).validate().is_err());
        assert!(MlpSpec::new(vec![3, 1], Head::Categorical)
            .validate()
            .is_err());
        let mut s = MlpSpec::new(vec![3, 2], Head::Categorical);
        s.dropout_rate = 1.0;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let spec = tiny_spec(vec![3, 6, 5], Head::Categorical);
            let mut p = init_params(&spec, seed);
            for v in &mut p.values { *v *= scale; }
            let x = random_inputs(5, 3, seed + 1);
            let preds = predict(&spec, &p, &Dataset::new(x, Targets::Classes(vec![0; 5]), None, Split::TestId).unwrap(), None).unwrap();
            for row in preds.probs().unwrap().iter_rows() {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn bma_identical_members_idempotent(seed in 0u64..1000, k in 1usize..6) {
            let spec = tiny_spec(vec![2, 4, 3], Head::Categorical);
            let p = init_params(&spec, seed);
            let x = random_inputs(4, 2, seed);
            let d = Dataset::new(x, Targets::Classes(vec![0, 1, 2, 0]), None, Split::TestId).unwrap();
            let one = predict(&spec, &p, &d, None).unwrap();
            let avg = bma_predict(&vec![one.clone(); k]).unwrap();
            for (a, b) in avg.probs().unwrap().as_slice().iter().zip(one.probs().unwrap().as_slice()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn bma_entropy_at_least_mean_member_entropy(s1 in 0u64..500, s2 in 500u64..1000) {
            let spec = tiny_spec(vec![2, 4, 3], Head::Categorical);
            let x = random_inputs(6, 2, s1 ^ s2);
            let d = Dataset::new(x, Targets::Classes(vec![0; 6]), None, Split::TestId).unwrap();
            let members: Vec<_> = [s1, s2, s1 + s2]
                .iter()
                .map(|&s| predict(&spec, &init_params(&spec, s), &d, None).unwrap())
                .collect();
            let avg = bma_predict(&members).unwrap();
            let ent = |r: &[f64]| -r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            for i in 0..6 {
                let mix = ent(avg.probs().unwrap().row(i));
                let mean: f64 = members.iter().map(|m| ent(m.probs().unwrap().row(i))).sum::<f64>() / 3.0;
                prop_assert!(mix >= mean - 1e-12);
            }
        }
    }
}
