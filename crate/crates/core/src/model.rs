//! Differentiable models over flat parameter vectors, trained with plain SGD.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::{Purpose, SimRng, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Model architecture. Parameters are laid out as weights then biases, layer
/// by layer; weight matrices are `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelFamily {
    /// Binary logistic regression, bias last.
    Logistic { n_features: usize },
    /// Least squares `0.5 (w.x - y)^2` without bias; a minimal regression model.
    Linear { n_features: usize },
    /// Fully connected network with softmax cross-entropy.
    /// `layers` lists widths from input to output.
    Mlp {
        layers: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelFamily {
    pub fn mlp(layers: Vec<usize>) -> Self {
        ModelFamily::Mlp {
            layers,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelFamily::Logistic { n_features } | ModelFamily::Linear { n_features } => {
                if *n_features == 0 {
                    return Err(Error::Parameter("model needs at least one feature".into()));
                }
            }
            ModelFamily::Mlp { layers, .. } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(Error::Parameter(format!("invalid layer sizes {layers:?}")));
                }
                if layers[layers.len() - 1] < 2 {
                    return Err(Error::Parameter("softmax output needs at least 2 units".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelFamily::Logistic { n_features } | ModelFamily::Linear { n_features } => *n_features,
            ModelFamily::Mlp { layers, .. } => layers[0],
        }
    }

    /// Number of label values the loss accepts.
    pub fn n_classes(&self) -> usize {
        match self {
            ModelFamily::Logistic { .. } | ModelFamily::Linear { .. } => 2,
            ModelFamily::Mlp { layers, .. } => layers[layers.len() - 1],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelFamily::Logistic { n_features } => n_features + 1,
            ModelFamily::Linear { n_features } => *n_features,
            ModelFamily::Mlp { layers, .. } => layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }

    /// Index ranges of weights (everything subject to L2, i.e. not biases).
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        match self {
            ModelFamily::Logistic { n_features } | ModelFamily::Linear { n_features } => Vec::from([0..*n_features]),
            ModelFamily::Mlp { layers, .. } => {
                let mut out = Vec::with_capacity(layers.len() - 1);
                let mut offset = 0;
                for w in layers.windows(2) {
                    out.push(offset..offset + w[0] * w[1]);
                    offset += w[0] * w[1] + w[1];
                }
                out
            }
        }
    }
}

/// Parameters plus the architecture and L2 strength they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<f64>,
    pub family: ModelFamily,
    pub l2: f64,
}

impl ModelState {
    /// Zeros for the linear families; `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// weights and zero biases for the MLP.
    pub fn init(family: ModelFamily, l2: f64, seed: u64) -> Result<Self> {
        family.validate()?;
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Parameter(format!("l2 must be nonnegative, got {l2}")));
        }
        let mut params = vec![0.0; family.param_count()];
        if let ModelFamily::Mlp { layers, .. } = &family {
            let mut rng = Streams::new(seed).stream(Purpose::ModelInit, &[]);
            let mut offset = 0;
            for w in layers.windows(2) {
                let bound = 1.0 / (w[0] as f64).sqrt();
                for p in &mut params[offset..offset + w[0] * w[1]] {
                    *p = rng.random_range(-bound..bound);
                }
                offset += w[0] * w[1] + w[1];
            }
        }
        Ok(Self { params, family, l2 })
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.params.len() != self.family.param_count() {
            return Err(Error::Consistency(format!(
                "{} parameters for a family needing {}",
                self.params.len(),
                self.family.param_count()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Mean squared norm of the mini-batch gradients seen during training.
    #[default]
    BatchAverage,
    /// Mean squared norm of per-sample gradients at the trained weights.
    FinalPerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub scoring: ScoringMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 1,
            learning_rate: 0.05,
            prox_mu: 0.0,
            scoring: ScoringMode::BatchAverage,
        }
    }
}

impl TrainingConfig {
    /// A zero learning rate is accepted: it turns training into pure scoring.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Parameter(format!("invalid proximal weight {}", self.prox_mu)));
        }
        Ok(())
    }
}

/// Per-call buffers for the MLP forward and backward passes.
struct Scratch {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Scratch {
    fn new(family: &ModelFamily) -> Self {
        let layers: &[usize] = match family {
            ModelFamily::Mlp { layers, .. } => layers,
            _ => &[],
        };
        Self {
            acts: layers.iter().map(|&n| vec![0.0; n]).collect(),
            pre: layers.iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::new(),
            next: Vec::new(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward pass; leaves softmax probabilities in the last activation and
/// returns the cross-entropy against `y`.
fn mlp_forward(layers: &[usize], act: Activation, params: &[f64], x: &[f64], y: usize, s: &mut Scratch) -> f64 {
    s.acts[0].copy_from_slice(x);
    let last = layers.len() - 1;
    let mut offset = 0;
    for l in 1..=last {
        let (n_in, n_out) = (layers[l - 1], layers[l]);
        let w = &params[offset..offset + n_in * n_out];
        let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let (before, after) = s.acts.split_at_mut(l);
        let input = &before[l - 1];
        let pre = &mut s.pre[l];
        for o in 0..n_out {
            pre[o] = b[o] + dot(&w[o * n_in..(o + 1) * n_in], input);
        }
        let out = &mut after[0];
        if l < last {
            for (a, &z) in out.iter_mut().zip(pre.iter()) {
                *a = act.apply(z);
            }
        }
    }
    let logits = &s.pre[last];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (p, z) in s.acts[last].iter_mut().zip(logits) {
        *p = (z - lse).exp();
    }
    lse - logits[y]
}

fn mlp_backward(layers: &[usize], act: Activation, params: &[f64], y: usize, grad: &mut [f64], s: &mut Scratch) {
    let last = layers.len() - 1;
    s.delta.clear();
    s.delta.extend_from_slice(&s.acts[last]);
    s.delta[y] -= 1.0;
    let mut offsets = Vec::with_capacity(last);
    let mut offset = 0;
    for w in layers.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }
    for l in (1..=last).rev() {
        let (n_in, n_out) = (layers[l - 1], layers[l]);
        let off = offsets[l - 1];
        let input = &s.acts[l - 1];
        for o in 0..n_out {
            let d = s.delta[o];
            if d != 0.0 {
                for (g, &a) in grad[off + o * n_in..off + (o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            grad[off + n_in * n_out + o] += d;
        }
        if l > 1 {
            s.next.clear();
            s.next.resize(n_in, 0.0);
            let w = &params[off..off + n_in * n_out];
            for o in 0..n_out {
                let d = s.delta[o];
                if d != 0.0 {
                    for (n, &wv) in s.next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *n += wv * d;
                    }
                }
            }
            for (n, &z) in s.next.iter_mut().zip(&s.pre[l - 1]) {
                *n *= act.derivative(z);
            }
            std::mem::swap(&mut s.delta, &mut s.next);
        }
    }
}

/// Adds one sample's data-loss gradient into `grad` and returns its loss.
fn sample_loss_grad(model: &ModelState, x: &[f64], y: usize, grad: &mut [f64], s: &mut Scratch) -> f64 {
    let p = &model.params;
    match &model.family {
        ModelFamily::Logistic { n_features } => {
            let d = *n_features;
            let z = p[d] + dot(&p[..d], x);
            let yf = y as f64;
            let g = sigmoid(z) - yf;
            for (gi, &xi) in grad[..d].iter_mut().zip(x) {
                *gi += g * xi;
            }
            grad[d] += g;
            softplus(z) - yf * z
        }
        ModelFamily::Linear { .. } => {
            let r = dot(p, x) - y as f64;
            for (gi, &xi) in grad.iter_mut().zip(x) {
                *gi += r * xi;
            }
            0.5 * r * r
        }
        ModelFamily::Mlp { layers, activation } => {
            let loss = mlp_forward(layers, *activation, p, x, y, s);
            mlp_backward(layers, *activation, p, y, grad, s);
            loss
        }
    }
}

/// Regularization terms (L2 on weights, proximal pull toward `anchor`).
fn add_penalties(model: &ModelState, prox: Option<(&ModelState, f64)>, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    if model.l2 > 0.0 {
        for range in model.family.weight_ranges() {
            for i in range {
                loss += 0.5 * model.l2 * model.params[i] * model.params[i];
                grad[i] += model.l2 * model.params[i];
            }
        }
    }
    if let Some((anchor, mu)) = prox {
        if mu > 0.0 {
            for ((g, &w), &a) in grad.iter_mut().zip(&model.params).zip(&anchor.params) {
                let diff = w - a;
                loss += 0.5 * mu * diff * diff;
                *g += mu * diff;
            }
        }
    }
    loss
}

fn check_label(model: &ModelState, y: usize) -> Result<()> {
    if y >= model.family.n_classes() {
        return Err(Error::Consistency(format!("label {y} out of range for the model")));
    }
    Ok(())
}

fn check_prox(model: &ModelState, prox: Option<(&ModelState, f64)>) -> Result<()> {
    if let Some((anchor, _)) = prox {
        if anchor.family != model.family {
            return Err(Error::Consistency("proximal anchor has a different architecture".into()));
        }
    }
    Ok(())
}

/// Mean loss and gradient over a batch given as rows and labels.
pub fn loss_and_grad(model: &ModelState, rows: &[&[f64]], labels: &[usize], prox: Option<(&ModelState, f64)>) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Parameter("batch must be nonempty with one label per row".into()));
    }
    check_prox(model, prox)?;
    let d = model.family.input_dim();
    let mut scratch = Scratch::new(&model.family);
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        if x.len() != d {
            return Err(Error::Consistency(format!("row has {} features, model expects {d}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value"));
        }
        check_label(model, y)?;
        loss += sample_loss_grad(model, x, y, &mut grad, &mut scratch);
    }
    let inv = 1.0 / rows.len() as f64;
    loss *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);
    loss += add_penalties(model, prox, &mut grad);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite loss or gradient"));
    }
    Ok((loss, grad))
}

fn batch_grad(model: &ModelState, data: &ClientDataset, idx: &[usize], prox: Option<(&ModelState, f64)>, grad: &mut [f64], s: &mut Scratch) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for &i in idx {
        loss += sample_loss_grad(model, data.row(i), data.labels[i], grad, s);
    }
    let inv = 1.0 / idx.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    loss * inv + add_penalties(model, prox, grad)
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Local training on one client. Returns the trained model and its
/// importance score (see [`ScoringMode`]).
pub fn client_update(model: &ModelState, data: &ClientDataset, cfg: &TrainingConfig, anchor: Option<&ModelState>, rng: &mut SimRng) -> Result<(ModelState, f64)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter(format!("client {} has no data", data.id)));
    }
    if data.n_features != model.family.input_dim() {
        return Err(Error::Consistency(format!(
            "client {} has {} features, model expects {}",
            data.id,
            data.n_features,
            model.family.input_dim()
        )));
    }
    if data.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite feature on client {}", data.id)));
    }
    for &y in &data.labels {
        check_label(model, y)?;
    }
    let prox = if cfg.prox_mu > 0.0 {
        let anchor = anchor.ok_or_else(|| Error::Parameter("proximal training needs an anchor model".into()))?;
        Some((anchor, cfg.prox_mu))
    } else {
        None
    };
    check_prox(model, prox)?;

    let mut current = model.clone();
    let mut scratch = Scratch::new(&model.family);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut score_sum = 0.0;
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let loss = batch_grad(&current, data, idx, prox, &mut grad, &mut scratch);
            let norm2 = squared_norm(&grad);
            if !loss.is_finite() || !norm2.is_finite() {
                return Err(Error::numeric(format!("training diverged on client {}", data.id)));
            }
            score_sum += norm2;
            batches += 1;
            for (w, g) in current.params.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    if current.params.iter().any(|w| !w.is_finite()) {
        return Err(Error::numeric(format!("non-finite weights on client {}", data.id)));
    }
    let importance = match cfg.scoring {
        ScoringMode::BatchAverage => score_sum / batches as f64,
        ScoringMode::FinalPerSample => {
            let mut total = 0.0;
            for i in 0..data.len() {
                batch_grad(&current, data, &[i], prox, &mut grad, &mut scratch);
                total += squared_norm(&grad);
            }
            total / data.len() as f64
        }
    };
    if !importance.is_finite() {
        return Err(Error::numeric(format!("non-finite importance on client {}", data.id)));
    }
    Ok((current, importance))
}

fn check_same_family(models: &[ModelState]) -> Result<&ModelState> {
    let first = models.first().ok_or_else(|| Error::Parameter("no models to aggregate".into()))?;
    if models.iter().any(|m| m.family != first.family || m.params.len() != first.params.len()) {
        return Err(Error::Consistency("models have different architectures".into()));
    }
    Ok(first)
}

fn scaled_sum(models: &[ModelState], factors: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0; models[0].params.len()];
    for (m, f) in models.iter().zip(factors) {
        for (o, &p) in out.iter_mut().zip(&m.params) {
            *o += f * p;
        }
    }
    out
}

/// Plain mean of parameters. Takes nothing but the models.
pub fn average_models(models: &[ModelState]) -> Result<ModelState> {
    let first = check_same_family(models)?;
    let f = 1.0 / models.len() as f64;
    Ok(ModelState {
        params: scaled_sum(models, std::iter::repeat(f)),
        family: first.family.clone(),
        l2: first.l2,
    })
}

/// `sum_k (n_k / n) w_k`.
pub fn weighted_average_models(models: &[ModelState], weights: &[f64]) -> Result<ModelState> {
    let first = check_same_family(models)?;
    if weights.len() != models.len() {
        return Err(Error::Parameter("one weight per model is required".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Parameter("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Parameter("weights are all zero".into()));
    }
    Ok(ModelState {
        params: scaled_sum(models, weights.iter().map(|w| w / total)),
        family: first.family.clone(),
        l2: first.l2,
    })
}

/// Class probabilities for one row, written into `out`.
pub fn predict_proba(model: &ModelState, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let p = &model.params;
    match &model.family {
        ModelFamily::Logistic { n_features } => {
            let q = sigmoid(p[*n_features] + dot(&p[..*n_features], x));
            out.extend_from_slice(&[1.0 - q, q]);
        }
        ModelFamily::Linear { .. } => {
            let q = dot(p, x);
            out.extend_from_slice(&[1.0 - q, q]);
        }
        ModelFamily::Mlp { layers, activation } => {
            let mut s = Scratch::new(&model.family);
            mlp_forward(layers, *activation, p, x, 0, &mut s);
            out.extend_from_slice(&s.acts[layers.len() - 1]);
        }
    }
}

/// Highest-probability class (lowest index on ties).
pub fn predict(model: &ModelState, x: &[f64]) -> usize {
    let mut probs = Vec::new();
    predict_proba(model, x, &mut probs);
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    family: ModelFamily,
    l2: f64,
    n_params: usize,
    params_sha256: String,
}

fn sibling(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.json` (architecture) and `<stem>.bin` (little-endian f64 parameters).
pub fn save_checkpoint(model: &ModelState, stem: &Path) -> Result<()> {
    let bytes: Vec<u8> = model.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let meta = CheckpointMeta {
        family: model.family.clone(),
        l2: model.l2,
        n_params: model.params.len(),
        params_sha256: crate::io::sha256_hex(&bytes),
    };
    crate::io::write_atomic(&sibling(stem, "bin"), &bytes)?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    crate::io::write_atomic(&sibling(stem, "json"), &json)
}

pub fn load_checkpoint(stem: &Path) -> Result<ModelState> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sibling(stem, "json"))?)?;
    let bytes = std::fs::read(sibling(stem, "bin"))?;
    if bytes.len() != meta.n_params * 8 || crate::io::sha256_hex(&bytes) != meta.params_sha256 {
        return Err(Error::Consistency(format!("checkpoint {} is corrupt", stem.display())));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let model = ModelState {
        params,
        family: meta.family,
        l2: meta.l2,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn logistic(d: usize) -> ModelState {
        ModelState::init(ModelFamily::Logistic { n_features: d }, 0.0, 0).unwrap()
    }

    /// Central differences of the batch loss.
    fn numeric_grad(model: &ModelState, rows: &[&[f64]], labels: &[usize], prox: Option<(&ModelState, f64)>) -> Vec<f64> {
        let h = 1e-6;
        (0..model.params.len())
            .map(|i| {
                let mut plus = model.clone();
                plus.params[i] += h;
                let mut minus = model.clone();
                minus.params[i] -= h;
                let lp = loss_and_grad(&plus, rows, labels, prox).unwrap().0;
                let lm = loss_and_grad(&minus, rows, labels, prox).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
        diff / scale
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = logistic(4);
        assert_eq!(m.params, vec![0.0; 5]);
        let fam = ModelFamily::mlp(vec![2, 3, 2]);
        assert_eq!(fam.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
        let a = ModelState::init(fam.clone(), 0.0, 7).unwrap();
        assert_eq!(a, ModelState::init(fam.clone(), 0.0, 7).unwrap());
        assert_ne!(a, ModelState::init(fam.clone(), 0.0, 8).unwrap());
        // biases start at zero, weights within the fan-in bound
        assert!(a.params[6..9].iter().all(|&b| b == 0.0));
        assert!(a.params[..6].iter().all(|w| w.abs() <= 1.0 / 2f64.sqrt()));
        assert!(ModelState::init(ModelFamily::mlp(vec![2]), 0.0, 0).is_err());
        assert!(ModelState::init(ModelFamily::mlp(vec![2, 0, 2]), 0.0, 0).is_err());
    }

    #[test]
    fn logistic_hand_gradient() {
        let m = logistic(1);
        let (loss, grad) = loss_and_grad(&m, &[&[1.0]], &[1], None).unwrap();
        assert!((grad[0] + 0.5).abs() < 1e-15);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn plain_cross_entropy_two_samples() {
        let m = ModelState {
            params: vec![0.5, -0.25],
            family: ModelFamily::Logistic { n_features: 1 },
            l2: 0.0,
        };
        // z = 0.5*2 - 0.25 = 0.75 with y=1; z = 0.5*(-1) - 0.25 = -0.75 with y=0
        let expected = 0.5 * (2.0 * (1.0 + (-0.75f64).exp()).ln());
        let (loss, _) = loss_and_grad(&m, &[&[2.0], &[-1.0]], &[1, 0], None).unwrap();
        assert!((loss - expected).abs() < 1e-14);
        let regularized = ModelState { l2: 0.1, ..m.clone() };
        let (loss_l2, _) = loss_and_grad(&regularized, &[&[2.0], &[-1.0]], &[1, 0], None).unwrap();
        assert!((loss_l2 - expected - 0.05 * 0.25).abs() < 1e-14);
    }

    #[test]
    fn prox_term_vanishes_at_anchor() {
        let m = ModelState {
            params: vec![0.3, -0.2, 0.1],
            ..logistic(2)
        };
        let rows: [&[f64]; 2] = [&[1.0, 2.0], &[-0.5, 0.3]];
        let plain = loss_and_grad(&m, &rows, &[1, 0], None).unwrap();
        let anchored = loss_and_grad(&m, &rows, &[1, 0], Some((&m, 0.7))).unwrap();
        assert_eq!(plain, anchored);
        let other = ModelState { params: vec![0.0; 3], ..m.clone() };
        let pulled = loss_and_grad(&m, &rows, &[1, 0], Some((&other, 2.0))).unwrap();
        assert!((pulled.0 - plain.0 - (0.09 + 0.04 + 0.01)).abs() < 1e-14);
        assert!((pulled.1[0] - plain.1[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SimRng::seed_from_u64(5);
        let families = [
            ModelFamily::Logistic { n_features: 3 },
            ModelFamily::Linear { n_features: 3 },
            ModelFamily::mlp(vec![3, 4, 3]),
            ModelFamily::Mlp {
                layers: vec![3, 5, 4, 2],
                activation: Activation::Tanh,
            },
        ];
        for fam in families {
            for trial in 0..10 {
                let mut m = ModelState::init(fam.clone(), 0.01, trial).unwrap();
                m.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
                let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
                let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                let ys: Vec<usize> = (0..4).map(|_| rng.random_range(0..fam.n_classes())).collect();
                let anchor = ModelState {
                    params: m.params.iter().map(|p| p * 0.5).collect(),
                    ..m.clone()
                };
                let prox = Some((&anchor, 0.3));
                let (_, g) = loss_and_grad(&m, &rows, &ys, prox).unwrap();
                let n = numeric_grad(&m, &rows, &ys, prox);
                assert!(rel_error(&g, &n) < 1e-5, "{fam:?}: {}", rel_error(&g, &n));
            }
        }
    }

    fn one_sample_client() -> ClientDataset {
        ClientDataset::new(0, vec![1.0], 1, vec![1], 2).unwrap()
    }

    #[test]
    fn squared_loss_single_step() {
        let m = ModelState::init(ModelFamily::Linear { n_features: 1 }, 0.0, 0).unwrap();
        let cfg = TrainingConfig {
            batch_size: 1,
            epochs: 1,
            learning_rate: 0.5,
            ..Default::default()
        };
        let (trained, importance) = client_update(&m, &one_sample_client(), &cfg, None, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(trained.params, vec![0.5]);
        assert_eq!(importance, 1.0);
    }

    fn small_client() -> ClientDataset {
        let features = vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8, 1.1, -0.7, 0.0, 0.4];
        ClientDataset::new(3, features, 2, vec![1, 0, 1, 1, 0], 2).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_pure_scoring() {
        let data = small_client();
        let m = ModelState {
            params: vec![0.2, -0.1, 0.05],
            ..logistic(2)
        };
        let cfg = TrainingConfig {
            batch_size: 5,
            epochs: 3,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (trained, importance) = client_update(&m, &data, &cfg, None, &mut SimRng::seed_from_u64(2)).unwrap();
        assert_eq!(trained, m);
        let rows: Vec<&[f64]> = (0..5).map(|i| data.row(i)).collect();
        let (_, g) = loss_and_grad(&m, &rows, &data.labels, None).unwrap();
        assert!((importance - squared_norm(&g)).abs() < 1e-14);

        // with B = 1 the score is a mean over samples, independent of order
        let per_sample = TrainingConfig { batch_size: 1, epochs: 1, ..cfg };
        let a = client_update(&m, &data, &per_sample, None, &mut SimRng::seed_from_u64(3)).unwrap().1;
        let b = client_update(&m, &data, &per_sample, None, &mut SimRng::seed_from_u64(4)).unwrap().1;
        assert!((a - b).abs() < 1e-15);
        let final_mode = TrainingConfig {
            scoring: ScoringMode::FinalPerSample,
            ..per_sample
        };
        let c = client_update(&m, &data, &final_mode, None, &mut SimRng::seed_from_u64(5)).unwrap().1;
        assert!((a - c).abs() < 1e-15);
    }

    #[test]
    fn full_batch_epochs_are_gradient_steps() {
        let data = small_client();
        let m = logistic(2);
        let cfg = TrainingConfig {
            batch_size: 5,
            epochs: 2,
            learning_rate: 0.3,
            ..Default::default()
        };
        let (trained, _) = client_update(&m, &data, &cfg, None, &mut SimRng::seed_from_u64(9)).unwrap();
        let rows: Vec<&[f64]> = (0..5).map(|i| data.row(i)).collect();
        let mut manual = m.clone();
        for _ in 0..2 {
            let (_, g) = loss_and_grad(&manual, &rows, &data.labels, None).unwrap();
            for (w, gi) in manual.params.iter_mut().zip(&g) {
                *w -= 0.3 * gi;
            }
        }
        assert!(rel_error(&trained.params, &manual.params) < 1e-14);
    }

    #[test]
    fn sgd_is_deterministic() {
        let data = small_client();
        let m = ModelState::init(ModelFamily::mlp(vec![2, 4, 2]), 0.01, 3).unwrap();
        let cfg = TrainingConfig {
            batch_size: 2,
            epochs: 3,
            learning_rate: 0.1,
            ..Default::default()
        };
        let a = client_update(&m, &data, &cfg, None, &mut SimRng::seed_from_u64(11)).unwrap();
        let b = client_update(&m, &data, &cfg, None, &mut SimRng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prox_requires_anchor_and_divergence_is_reported() {
        let data = small_client();
        let m = logistic(2);
        let cfg = TrainingConfig { prox_mu: 0.1, ..Default::default() };
        assert!(matches!(client_update(&m, &data, &cfg, None, &mut SimRng::seed_from_u64(0)), Err(Error::Parameter(_))));
        let lin = ModelState::init(ModelFamily::Linear { n_features: 2 }, 0.0, 0).unwrap();
        let wild = TrainingConfig {
            batch_size: 1,
            epochs: 2000,
            learning_rate: 50.0,
            ..Default::default()
        };
        let err = client_update(&lin, &data, &wild, None, &mut SimRng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn averaging_fixtures() {
        let fam = ModelFamily::Linear { n_features: 2 };
        let a = ModelState { params: vec![1.0, 3.0], family: fam.clone(), l2: 0.0 };
        let b = ModelState { params: vec![3.0, 5.0], family: fam.clone(), l2: 0.0 };
        assert_eq!(average_models(&[a.clone(), b.clone()]).unwrap().params, vec![2.0, 4.0]);
        assert_eq!(average_models(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(weighted_average_models(&[a.clone(), b.clone()], &[3.0, 1.0]).unwrap().params, vec![1.5, 3.5]);
        assert_eq!(weighted_average_models(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap().params, a.params);
        assert_eq!(
            weighted_average_models(&[a.clone(), b.clone()], &[7.0, 7.0]).unwrap(),
            average_models(&[a.clone(), b.clone()]).unwrap()
        );
        assert!(matches!(weighted_average_models(&[a.clone(), b.clone()], &[0.0, 0.0]), Err(Error::Parameter(_))));
        let other = logistic(1);
        assert!(matches!(average_models(&[a, other]), Err(Error::Consistency(_))));
    }

    #[test]
    fn averaging_commutes_with_permutations() {
        let fam = ModelFamily::Linear { n_features: 3 };
        let models: Vec<ModelState> = [[0.5, 1.25, -2.0], [4.0, -0.75, 1.0], [2.5, 0.0, 3.5], [-1.0, 2.0, 0.25]]
            .iter()
            .map(|p| ModelState { params: p.to_vec(), family: fam.clone(), l2: 0.0 })
            .collect();
        let base = average_models(&models).unwrap();
        let reversed: Vec<_> = models.iter().rev().cloned().collect();
        assert_eq!(average_models(&reversed).unwrap(), base);
        // permuting coordinates of every input permutes the output
        let perm = [2, 0, 1];
        let permuted: Vec<ModelState> = models
            .iter()
            .map(|m| ModelState { params: perm.iter().map(|&i| m.params[i]).collect(), ..m.clone() })
            .collect();
        let avg = average_models(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(avg.params[k], base.params[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelState::init(ModelFamily::mlp(vec![3, 4, 2]), 0.02, 4).unwrap();
        let stem = dir.path().join("best.r3");
        save_checkpoint(&m, &stem).unwrap();
        assert!(dir.path().join("best.r3.bin").exists());
        assert_eq!(load_checkpoint(&stem).unwrap(), m);
        std::fs::write(dir.path().join("best.r3.bin"), [0u8; 8]).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }

    #[test]
    fn mlp_probabilities_sum_to_one() {
        let m = ModelState::init(ModelFamily::mlp(vec![2, 5, 3]), 0.0, 1).unwrap();
        let mut p = Vec::new();
        predict_proba(&m, &[0.3, -1.2], &mut p);
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(predict(&m, &[0.3, -1.2]) < 3);
    }
}
