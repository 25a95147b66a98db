//! Federated training engine.
//!
//! FedAvg and FedProx train the global model on `m` sampled clients and take a
//! size-weighted average. RADFed keeps `m` replicas alive for `S`
//! redistribution steps, handing each replica to a freshly sampled client at
//! every step, and only then averages them with a plain mean. RADFed-IS samples
//! clients in proportion to an exponential moving average of their gradient
//! norms instead of uniformly.
//!
//! Randomness comes from derived streams: client sampling uses
//! `(Sampling, round, step)` and local training `(Training, client, round, step)`.
//! FedAvg uses step 0, so a one-step RADFed round with uniform sampling sees
//! exactly the bits of a mean-aggregated FedAvg round.

use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pool_clients, standardize, ClientDataset, Scope};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metrics::{dc_distance, dc_divergence, dl_divergence, evaluate, Metric};
use crate::model::{average_models, client_update, loss_and_grad, weighted_average_models, Activation, ModelFamily, ModelState, TrainingConfig};
use crate::rng::{Purpose, SimRng, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Radfed,
    RadfedIs,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Radfed => "radfed",
            Algorithm::RadfedIs => "radfed_is",
        }
    }

    pub fn redistributes(self) -> bool {
        matches!(self, Algorithm::Radfed | Algorithm::RadfedIs)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fedavg" => Ok(Algorithm::Fedavg),
            "fedprox" => Ok(Algorithm::Fedprox),
            "radfed" => Ok(Algorithm::Radfed),
            "radfed_is" => Ok(Algorithm::RadfedIs),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How FedAvg and FedProx combine client models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Weighted by client sample counts.
    #[default]
    Weighted,
    Mean,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// Architecture choice; input and output widths come from the data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    #[default]
    Logistic,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn family(&self, n_features: usize, n_classes: usize) -> Result<ModelFamily> {
        let family = match self {
            ModelSpec::Logistic => {
                if n_classes != 2 {
                    return Err(Error::Config(format!("logistic regression needs 2 classes, data has {n_classes}")));
                }
                ModelFamily::Logistic { n_features }
            }
            ModelSpec::Mlp { hidden, activation } => {
                let mut layers = vec![n_features];
                layers.extend_from_slice(hidden);
                layers.push(n_classes);
                ModelFamily::Mlp {
                    layers,
                    activation: *activation,
                }
            }
        };
        family.validate()?;
        Ok(family)
    }
}

fn default_c_frac() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.9
}

/// Every knob of a federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub algorithm: Algorithm,
    /// Participation fraction; `m = max(floor(c_frac * K), 1)`.
    #[serde(default = "default_c_frac")]
    pub c_frac: f64,
    /// Outer rounds.
    pub rounds: usize,
    /// Redistribution steps per round (RADFed family).
    #[serde(default = "default_one")]
    pub redistribution_steps: usize,
    /// EMA weight of new importance scores (RADFed-IS).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Proximal weight (FedProx).
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub standardization: Scope,
    /// Train a centralized twin and record norm divergences each round.
    #[serde(default)]
    pub track_dc: bool,
}

impl FederatedConfig {
    pub fn new(algorithm: Algorithm, rounds: usize) -> Self {
        Self {
            algorithm,
            c_frac: default_c_frac(),
            rounds,
            redistribution_steps: 1,
            alpha: default_alpha(),
            prox_mu: 0.0,
            training: TrainingConfig::default(),
            eval_every: 1,
            seed: 0,
            aggregation: Aggregation::Weighted,
            metric: Metric::Accuracy,
            model: ModelSpec::Logistic,
            l2: 0.0,
            standardization: Scope::Global,
            track_dc: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_frac > 0.0 && self.c_frac <= 1.0) {
            return Err(Error::Config(format!("c_frac must be in (0, 1], got {}", self.c_frac)));
        }
        if self.algorithm.redistributes() && self.redistribution_steps == 0 {
            return Err(Error::Config("redistribution_steps must be at least 1".into()));
        }
        if self.algorithm == Algorithm::RadfedIs && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Config(format!("prox_mu must be nonnegative, got {}", self.prox_mu)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.training.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Clients per step for `k` training clients.
    pub fn participants(&self, k: usize) -> usize {
        ((self.c_frac * k as f64).floor() as usize).max(1)
    }

    /// Local training settings with the proximal term enabled only for FedProx.
    fn local_training(&self) -> TrainingConfig {
        TrainingConfig {
            prox_mu: if self.algorithm == Algorithm::Fedprox { self.prox_mu } else { 0.0 },
            ..self.training
        }
    }
}

/// `m` distinct entries of `ids` in random order.
pub fn sample_uniform(ids: &[usize], m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    if m > ids.len() {
        return Err(Error::Parameter(format!("cannot sample {m} of {} clients", ids.len())));
    }
    let mut pool = ids.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, m);
    Ok(chosen.to_vec())
}

/// Per-client importance scores `p_k`, all starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub scores: Vec<f64>,
}

impl ImportanceState {
    pub fn new(clients: usize) -> Self {
        Self { scores: vec![1.0; clients] }
    }
}

/// `m` distinct client positions, each drawn proportionally to the scores of
/// those not yet drawn. Once no positive score remains, draws are uniform.
pub fn sample_importance(state: &ImportanceState, m: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    let n = state.scores.len();
    if m > n {
        return Err(Error::Parameter(format!("cannot sample {m} of {n} clients")));
    }
    if state.scores.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::numeric("importance scores must be finite and nonnegative"));
    }
    let positive = state.scores.iter().filter(|&&s| s > 0.0).count();
    if positive < m {
        warn!("only {positive} clients have positive importance, filling {} draws uniformly", m - positive);
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().map(|&k| state.scores[k]).sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (pos, &k) in remaining.iter().enumerate() {
                if state.scores[k] > 0.0 {
                    acc += state.scores[k];
                    chosen = Some(pos);
                    if u < acc {
                        break;
                    }
                }
            }
            chosen.expect("positive total implies a positive score")
        } else {
            rng.random_range(0..remaining.len())
        };
        out.push(remaining.remove(pick));
    }
    Ok(out)
}

/// `p_k <- (1 - alpha) p_k + alpha p_new`.
pub fn update_importance(state: &mut ImportanceState, k: usize, p_new: f64, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if !(p_new >= 0.0 && p_new.is_finite()) {
        return Err(Error::numeric(format!("invalid importance {p_new} for client {k}")));
    }
    let p = state
        .scores
        .get_mut(k)
        .ok_or_else(|| Error::Parameter(format!("no client at position {k}")))?;
    *p = (1.0 - alpha) * *p + alpha * p_new;
    Ok(())
}

/// Metrics for one outer round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub algorithm: Algorithm,
    /// Client ids trained at each step.
    pub selected: Vec<Vec<usize>>,
    /// Pairwise cosine divergence of the trained local models at each step.
    pub dl: Vec<Option<f64>>,
    pub validation_loss: Option<f64>,
    pub validation_metric: Option<f64>,
    pub dc: Option<f64>,
    pub dc_distance: Option<f64>,
    pub duration_secs: f64,
}

impl RoundRecord {
    fn new(round: usize, algorithm: Algorithm) -> Self {
        Self {
            round,
            algorithm,
            selected: Vec::new(),
            dl: Vec::new(),
            validation_loss: None,
            validation_metric: None,
            dc: None,
            dc_distance: None,
            duration_secs: 0.0,
        }
    }
}

/// What a round needs besides the model: the training clients and the run
/// configuration, seed space and executor.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a> {
    pub clients: &'a [&'a ClientDataset],
    pub cfg: &'a FederatedConfig,
    pub streams: Streams,
    pub exec: Executor,
}

impl RoundEnv<'_> {
    fn ids(&self) -> Vec<usize> {
        (0..self.clients.len()).collect()
    }

    /// Train `models[i]` on client position `positions[i]`; returns the models and scores in order.
    fn train(&self, models: Vec<ModelState>, positions: &[usize], anchor: Option<&ModelState>, round: usize, step: usize) -> Result<Vec<(ModelState, f64)>> {
        let training = self.cfg.local_training();
        let jobs: Vec<(ModelState, usize)> = models.into_iter().zip(positions.iter().copied()).collect();
        let results = self.exec.map(jobs, |(model, pos)| {
            let client = self.clients[pos];
            let mut rng = self.streams.stream(Purpose::Training, &[client.id as u64, round as u64, step as u64]);
            client_update(&model, client, &training, anchor, &mut rng).map_err(|e| e.in_round(round, step, client.id))
        });
        results.into_iter().collect()
    }

    fn sampling_rng(&self, round: usize, step: usize) -> SimRng {
        self.streams.stream(Purpose::Sampling, &[round as u64, step as u64])
    }
}

fn divergence_of(models: &[ModelState]) -> Option<f64> {
    if models.len() < 2 {
        return None;
    }
    dl_divergence(models).ok()
}

/// One RADFed round: `S` redistribution steps over `m` replicas, then a plain mean.
/// With `importance`, clients are sampled by score and scores are updated.
pub fn run_radfed_round(global: &ModelState, env: &RoundEnv, round: usize, mut importance: Option<&mut ImportanceState>) -> Result<(ModelState, RoundRecord)> {
    let k = env.clients.len();
    let m = env.cfg.participants(k);
    let mut record = RoundRecord::new(round, env.cfg.algorithm);
    let mut replicas = vec![global.clone(); m];
    for step in 0..env.cfg.redistribution_steps {
        let mut rng = env.sampling_rng(round, step);
        let positions = match importance.as_deref() {
            Some(state) => sample_importance(state, m, &mut rng)?,
            None => sample_uniform(&env.ids(), m, &mut rng)?,
        };
        let trained = env.train(replicas, &positions, None, round, step)?;
        if let Some(state) = importance.as_deref_mut() {
            for (&pos, (_, p_new)) in positions.iter().zip(&trained) {
                update_importance(state, pos, *p_new, env.cfg.alpha).map_err(|e| e.in_round(round, step, env.clients[pos].id))?;
            }
        }
        replicas = trained.into_iter().map(|(model, _)| model).collect();
        record.selected.push(positions.iter().map(|&p| env.clients[p].id).collect());
        record.dl.push(divergence_of(&replicas));
    }
    Ok((average_models(&replicas)?, record))
}

/// One FedAvg round (FedProx when the configured algorithm is FedProx).
pub fn run_fedavg_round(global: &ModelState, env: &RoundEnv, round: usize) -> Result<(ModelState, RoundRecord)> {
    let k = env.clients.len();
    let m = env.cfg.participants(k);
    let mut record = RoundRecord::new(round, env.cfg.algorithm);
    let positions = sample_uniform(&env.ids(), m, &mut env.sampling_rng(round, 0))?;
    let anchor = (env.cfg.algorithm == Algorithm::Fedprox).then_some(global);
    let trained: Vec<ModelState> = env
        .train(vec![global.clone(); m], &positions, anchor, round, 0)?
        .into_iter()
        .map(|(model, _)| model)
        .collect();
    record.selected.push(positions.iter().map(|&p| env.clients[p].id).collect());
    record.dl.push(divergence_of(&trained));
    let next = match env.cfg.aggregation {
        Aggregation::Mean => average_models(&trained)?,
        Aggregation::Weighted => {
            let weights: Vec<f64> = positions.iter().map(|&p| env.clients[p].len() as f64).collect();
            weighted_average_models(&trained, &weights)?
        }
    };
    Ok((next, record))
}

/// Mean loss over the pooled samples of `clients` (data term plus L2).
pub fn pooled_loss(model: &ModelState, clients: &[&ClientDataset]) -> Result<f64> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in clients {
        for i in 0..c.len() {
            rows.push(c.row(i));
            labels.push(c.labels[i]);
        }
    }
    Ok(loss_and_grad(model, &rows, &labels, None)?.0)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub final_model: ModelState,
    pub records: Vec<RoundRecord>,
    /// Model with the best validation metric (the final model without validation clients).
    pub best_model: ModelState,
    pub best_round: usize,
    pub best_validation: Option<f64>,
    /// Metric of the best model on the test clients.
    pub test_metric: Option<f64>,
    pub importance: Option<ImportanceState>,
}

/// Runs `cfg.rounds` outer rounds on `train`, selecting on `validation` and
/// reporting on `test`. Data is used as given (standardize beforehand).
pub fn run_experiment(cfg: &FederatedConfig, train: &[&ClientDataset], validation: &[&ClientDataset], test: &[&ClientDataset], exec: Executor) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, train, validation, test, exec, &mut |_, _| Ok(()))
}

/// [`run_experiment`] with a hook that sees every finished round and the new global model.
pub fn run_experiment_with(
    cfg: &FederatedConfig,
    train: &[&ClientDataset],
    validation: &[&ClientDataset],
    test: &[&ClientDataset],
    exec: Executor,
    on_round: &mut dyn FnMut(&RoundRecord, &ModelState) -> Result<()>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::Config("fold has no training clients".into()))?;
    if cfg.participants(train.len()) > train.len() {
        return Err(Error::Config("more participants than training clients".into()));
    }
    let family = cfg.model.family(first.n_features, first.n_classes)?;
    let init = ModelState::init(family, cfg.l2, cfg.seed)?;
    let streams = Streams::new(cfg.seed);
    let env = RoundEnv {
        clients: train,
        cfg,
        streams,
        exec,
    };
    let mut importance = (cfg.algorithm == Algorithm::RadfedIs).then(|| ImportanceState::new(train.len()));
    let mut global = init.clone();
    let mut twin = init.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut best = (init.clone(), 0usize, None::<f64>);

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let (next, mut record) = if cfg.algorithm.redistributes() {
            run_radfed_round(&global, &env, round, importance.as_mut())?
        } else {
            run_fedavg_round(&global, &env, round)?
        };
        global = next;

        if cfg.track_dc {
            let mut ids: Vec<usize> = record.selected.iter().flatten().copied().collect();
            ids.sort_unstable();
            ids.dedup();
            let participants: Vec<&ClientDataset> = ids.iter().filter_map(|id| train.iter().copied().find(|c| c.id == *id)).collect();
            let pooled = pool_clients(&participants)?;
            let one_epoch = TrainingConfig {
                epochs: 1,
                prox_mu: 0.0,
                ..cfg.training
            };
            let mut rng = streams.stream(Purpose::Centralized, &[round as u64]);
            twin = client_update(&twin, &pooled, &one_epoch, None, &mut rng)?.0;
            record.dc = dc_divergence(&global, &twin).ok();
            record.dc_distance = dc_distance(&global, &twin).ok();
        }

        if !validation.is_empty() && (round % cfg.eval_every == 0 || round == cfg.rounds) {
            record.validation_loss = pooled_loss(&global, validation).ok();
            match evaluate(&global, validation, cfg.metric) {
                Ok(score) => {
                    record.validation_metric = Some(score);
                    if best.2.is_none_or(|b| score > b) {
                        best = (global.clone(), round, Some(score));
                    }
                }
                Err(e) => debug!("round {round}: validation metric unavailable: {e}"),
            }
        }
        record.duration_secs = started.elapsed().as_secs_f64();
        on_round(&record, &global)?;
        records.push(record);
    }

    let (best_model, best_round, best_validation) = if validation.is_empty() || best.2.is_none() {
        (global.clone(), cfg.rounds, None)
    } else {
        best
    };
    let test_metric = if test.is_empty() {
        None
    } else {
        match evaluate(&best_model, test, cfg.metric) {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("test metric unavailable: {e}");
                None
            }
        }
    };
    Ok(ExperimentOutcome {
        final_model: global,
        records,
        best_model,
        best_round,
        best_validation,
        test_metric,
        importance,
    })
}

/// A by-client train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test_fold: usize,
    pub validation_fold: Option<usize>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deal shuffled client ids into `n_folds` sets. Each set is the test set
/// once; validation is the next set round-robin, or every other set when
/// `nested`. With two folds there is no validation set.
pub fn make_folds(ids: &[usize], n_folds: usize, nested: bool, rng: &mut SimRng) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {n_folds}")));
    }
    if ids.len() < n_folds {
        return Err(Error::Parameter(format!("{} clients cannot fill {n_folds} folds", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
    for (i, id) in shuffled.into_iter().enumerate() {
        sets[i % n_folds].push(id);
    }
    sets.iter_mut().for_each(|s| s.sort_unstable());
    let gather = |skip: &[usize]| -> Vec<usize> {
        let mut v: Vec<usize> = (0..n_folds).filter(|f| !skip.contains(f)).flat_map(|f| sets[f].clone()).collect();
        v.sort_unstable();
        v
    };
    let mut out = Vec::new();
    for test in 0..n_folds {
        if n_folds == 2 {
            out.push(FoldSplit {
                test_fold: test,
                validation_fold: None,
                train: gather(&[test]),
                validation: Vec::new(),
                test: sets[test].clone(),
            });
            continue;
        }
        let validations: Vec<usize> = if nested {
            (0..n_folds).filter(|&v| v != test).collect()
        } else {
            vec![(test + 1) % n_folds]
        };
        for v in validations {
            out.push(FoldSplit {
                test_fold: test,
                validation_fold: Some(v),
                train: gather(&[test, v]),
                validation: sets[v].clone(),
                test: sets[test].clone(),
            });
        }
    }
    Ok(out)
}

/// Clients of one fold after standardization (global statistics come from
/// the training clients only).
pub struct FoldData {
    pub train: Vec<ClientDataset>,
    pub validation: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

impl FoldData {
    pub fn prepare(clients: &[ClientDataset], split: &FoldSplit, scope: Scope) -> Result<Self> {
        let pick = |ids: &[usize]| -> Result<Vec<ClientDataset>> {
            ids.iter()
                .map(|id| {
                    clients
                        .iter()
                        .find(|c| c.id == *id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("fold references unknown client {id}")))
                })
                .collect()
        };
        let mut all = pick(&split.train)?;
        let n_train = all.len();
        all.extend(pick(&split.validation)?);
        let n_val = split.validation.len();
        all.extend(pick(&split.test)?);
        let train_pos: Vec<usize> = (0..n_train).collect();
        standardize(&mut all, &train_pos, scope);
        let test = all.split_off(n_train + n_val);
        let validation = all.split_off(n_train);
        Ok(Self { train: all, validation, test })
    }

    pub fn refs(v: &[ClientDataset]) -> Vec<&ClientDataset> {
        v.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_mixture;
    use crate::partition::{partition_dataset, DirichletPriors, WalkParams};
    use rand::SeedableRng;

    fn toy_clients(n: usize, seed: u64) -> Vec<ClientDataset> {
        let ds = synth_gaussian_mixture(2, 3, 2.0, 40 * n, seed).unwrap();
        (0..n).map(|k| ClientDataset::from_dataset(k, &ds, (k * 40..(k + 1) * 40).collect())).collect()
    }

    fn config(algorithm: Algorithm) -> FederatedConfig {
        FederatedConfig {
            c_frac: 0.5,
            redistribution_steps: 3,
            training: TrainingConfig {
                batch_size: 8,
                epochs: 1,
                learning_rate: 0.1,
                ..Default::default()
            },
            seed: 4,
            ..FederatedConfig::new(algorithm, 4)
        }
    }

    #[test]
    fn participants_rule() {
        let cfg = FederatedConfig { c_frac: 0.1, ..config(Algorithm::Fedavg) };
        assert_eq!(cfg.participants(60), 6);
        assert_eq!(cfg.participants(5), 1);
        assert_eq!(FederatedConfig { c_frac: 1.0, ..cfg }.participants(7), 7);
    }

    #[test]
    fn config_validation() {
        assert!(FederatedConfig { c_frac: 0.0, ..config(Algorithm::Fedavg) }.validate().is_err());
        assert!(FederatedConfig { redistribution_steps: 0, ..config(Algorithm::Radfed) }.validate().is_err());
        assert!(FederatedConfig { redistribution_steps: 0, ..config(Algorithm::Fedavg) }.validate().is_ok());
        assert!(FederatedConfig { alpha: 1.0, ..config(Algorithm::RadfedIs) }.validate().is_err());
        let json = r#"{"algorithm": "radfed_is", "rounds": 3, "redistribution_steps": 5, "alpha": 0.8}"#;
        let cfg: FederatedConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.c_frac, 0.1);
        assert_eq!("RADFed-IS".parse::<Algorithm>().unwrap(), Algorithm::RadfedIs);
    }

    #[test]
    fn uniform_sampling() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut all = sample_uniform(&[4, 7, 9], 3, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![4, 7, 9]);
        assert!(sample_uniform(&[1, 2], 3, &mut rng).is_err());
        let mut hits = 0;
        for _ in 0..10_000 {
            let s = sample_uniform(&[0, 1], 1, &mut rng).unwrap();
            hits += usize::from(s[0] == 0);
        }
        assert!((4800..=5200).contains(&hits), "{hits}");
        let s = sample_uniform(&(0..20).collect::<Vec<_>>(), 10, &mut rng).unwrap();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 10);
    }

    #[test]
    fn importance_sampling() {
        let mut rng = SimRng::seed_from_u64(2);
        let only_first = ImportanceState { scores: vec![1.0, 0.0, 0.0] };
        for _ in 0..100 {
            assert_eq!(sample_importance(&only_first, 1, &mut rng).unwrap(), vec![0]);
        }
        // falls back to uniform for the draws positive scores cannot cover
        let mut both = sample_importance(&only_first, 3, &mut rng).unwrap();
        assert_eq!(both[0], 0);
        both.sort_unstable();
        assert_eq!(both, vec![0, 1, 2]);
        let skewed = ImportanceState { scores: vec![3.0, 1.0] };
        let hits = (0..10_000).filter(|_| sample_importance(&skewed, 1, &mut rng).unwrap()[0] == 0).count();
        assert!((7300..=7700).contains(&hits), "{hits}");
    }

    #[test]
    fn ema_update() {
        let mut s = ImportanceState::new(3);
        update_importance(&mut s, 1, 2.0, 0.9).unwrap();
        assert!((s.scores[1] - 1.9).abs() < 1e-15);
        assert_eq!(s.scores[0], 1.0);
        update_importance(&mut s, 0, 1.0, 0.3).unwrap();
        assert_eq!(s.scores[0], 1.0);
        assert!(update_importance(&mut s, 0, -1.0, 0.3).is_err());
        assert!(update_importance(&mut s, 0, 1.0, 1.0).is_err());
        let (p0, target, alpha) = (5.0, 2.0, 0.3);
        let mut e = ImportanceState { scores: vec![p0] };
        for n in 1..=100 {
            update_importance(&mut e, 0, target, alpha).unwrap();
            let closed = target + (p0 - target) * (1.0f64 - alpha).powi(n);
            assert!((e.scores[0] - closed).abs() < 1e-12);
        }
    }

    fn env<'a>(clients: &'a [&'a ClientDataset], cfg: &'a FederatedConfig, exec: Executor) -> RoundEnv<'a> {
        RoundEnv {
            clients,
            cfg,
            streams: Streams::new(cfg.seed),
            exec,
        }
    }

    #[test]
    fn radfed_single_step_equals_mean_fedavg() {
        let clients = toy_clients(6, 3);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let radfed = FederatedConfig { redistribution_steps: 1, ..config(Algorithm::Radfed) };
        let fedavg = FederatedConfig { aggregation: Aggregation::Mean, ..config(Algorithm::Fedavg) };
        let init = ModelState::init(ModelFamily::Logistic { n_features: 3 }, 0.0, 0).unwrap();
        let (a, ra) = run_radfed_round(&init, &env(&refs, &radfed, Executor::Sequential), 1, None).unwrap();
        let (b, rb) = run_fedavg_round(&init, &env(&refs, &fedavg, Executor::Sequential), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.selected, rb.selected);
    }

    #[test]
    fn radfed_round_structure() {
        let clients = toy_clients(6, 5);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let cfg = config(Algorithm::RadfedIs);
        let init = ModelState::init(ModelFamily::Logistic { n_features: 3 }, 0.0, 0).unwrap();
        let mut state = ImportanceState::new(6);
        let (_, rec) = run_radfed_round(&init, &env(&refs, &cfg, Executor::Sequential), 1, Some(&mut state)).unwrap();
        assert_eq!(rec.selected.len(), 3);
        assert!(rec.selected.iter().all(|s| s.len() == 3));
        assert_eq!(rec.dl.len(), 3);
        assert!(state.scores.iter().all(|&p| p > 0.0));
        assert!(state.scores.iter().any(|&p| p != 1.0));
    }

    #[test]
    fn single_replica_trains_sequentially() {
        let clients = toy_clients(3, 8);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let cfg = FederatedConfig { c_frac: 0.2, ..config(Algorithm::Radfed) };
        let init = ModelState::init(ModelFamily::Logistic { n_features: 3 }, 0.0, 0).unwrap();
        let e = env(&refs, &cfg, Executor::Sequential);
        let (out, rec) = run_radfed_round(&init, &e, 2, None).unwrap();
        let mut manual = init;
        for (step, ids) in rec.selected.iter().enumerate() {
            let c = &clients[ids[0]];
            let mut rng = e.streams.stream(Purpose::Training, &[c.id as u64, 2, step as u64]);
            manual = client_update(&manual, c, &cfg.training, None, &mut rng).unwrap().0;
        }
        assert_eq!(out, manual);
        assert!(rec.dl.iter().all(Option::is_none));
    }

    #[test]
    fn fedavg_single_client_and_equal_sizes() {
        let clients = toy_clients(4, 9);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let weighted = FederatedConfig { c_frac: 0.5, ..config(Algorithm::Fedavg) };
        let mean = FederatedConfig { aggregation: Aggregation::Mean, ..weighted.clone() };
        let init = ModelState::init(ModelFamily::Logistic { n_features: 3 }, 0.0, 0).unwrap();
        let (a, _) = run_fedavg_round(&init, &env(&refs, &weighted, Executor::Sequential), 1).unwrap();
        let (b, _) = run_fedavg_round(&init, &env(&refs, &mean, Executor::Sequential), 1).unwrap();
        assert_eq!(a, b);

        let one = FederatedConfig { c_frac: 0.25, ..weighted };
        let e = env(&refs, &one, Executor::Sequential);
        let (out, rec) = run_fedavg_round(&init, &e, 1).unwrap();
        let c = &clients[rec.selected[0][0]];
        let mut rng = e.streams.stream(Purpose::Training, &[c.id as u64, 1, 0]);
        assert_eq!(out, client_update(&init, c, &one.training, None, &mut rng).unwrap().0);
    }

    #[test]
    fn fedprox_pulls_toward_global() {
        let clients = toy_clients(2, 10);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let base = FederatedConfig { c_frac: 1.0, ..config(Algorithm::Fedavg) };
        let prox = FederatedConfig { algorithm: Algorithm::Fedprox, prox_mu: 5.0, ..base.clone() };
        let init = ModelState::init(ModelFamily::Logistic { n_features: 3 }, 0.0, 0).unwrap();
        let (a, _) = run_fedavg_round(&init, &env(&refs, &base, Executor::Sequential), 1).unwrap();
        let (b, _) = run_fedavg_round(&init, &env(&refs, &prox, Executor::Sequential), 1).unwrap();
        assert!(b.norm() < a.norm());
    }

    #[test]
    fn experiment_is_deterministic_and_parallel_safe() {
        let clients = toy_clients(8, 11);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let cfg = FederatedConfig { track_dc: true, ..config(Algorithm::RadfedIs) };
        let a = run_experiment(&cfg, &refs[..6], &refs[6..7], &refs[7..], Executor::Sequential).unwrap();
        let b = run_experiment(&cfg, &refs[..6], &refs[6..7], &refs[7..], Executor::with_workers(4)).unwrap();
        assert_eq!(a.final_model, b.final_model);
        let strip = |r: &[RoundRecord]| r.iter().map(|x| RoundRecord { duration_secs: 0.0, ..x.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a.records), strip(&b.records));
        assert_eq!(a.records.len(), 4);
        assert!(a.records.iter().all(|r| r.dc.is_some() && r.validation_metric.is_some()));
        assert!(a.test_metric.is_some());
        assert!(a.best_round >= 1);
    }

    #[test]
    fn zero_rounds_return_initial_model() {
        let clients = toy_clients(3, 12);
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let cfg = FederatedConfig { rounds: 0, ..config(Algorithm::Radfed) };
        let out = run_experiment(&cfg, &refs, &[], &[], Executor::Sequential).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_model.params, vec![0.0; 4]);
        assert!(matches!(run_experiment(&cfg, &[], &[], &[], Executor::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn twin_of_single_full_batch_client_matches() {
        let clients = toy_clients(1, 13);
        let cfg = FederatedConfig {
            c_frac: 1.0,
            training: TrainingConfig {
                batch_size: 40,
                epochs: 1,
                learning_rate: 0.2,
                ..Default::default()
            },
            ..config(Algorithm::Fedavg)
        };
        let trace = crate::metrics::centralized_twin_run(&cfg, &clients, Executor::Sequential).unwrap();
        assert_eq!(trace.dc.len(), 4);
        for dc in &trace.dc {
            assert!(dc.unwrap().abs() < 1e-12, "{dc:?}");
        }
    }

    #[test]
    fn folds() {
        let ids: Vec<usize> = (0..100).collect();
        let splits = make_folds(&ids, 5, false, &mut SimRng::seed_from_u64(3)).unwrap();
        assert_eq!(splits.len(), 5);
        let mut tested = Vec::new();
        for s in &splits {
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 20, 20));
            tested.extend_from_slice(&s.test);
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, ids);
        }
        tested.sort_unstable();
        assert_eq!(tested, ids);
        assert_eq!(splits, make_folds(&ids, 5, false, &mut SimRng::seed_from_u64(3)).unwrap());
        assert_eq!(make_folds(&ids, 5, true, &mut SimRng::seed_from_u64(3)).unwrap().len(), 20);
        assert!(make_folds(&ids[..3], 5, false, &mut SimRng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn fold_standardization_uses_training_clients() {
        let ds = synth_gaussian_mixture(2, 2, 1.0, 400, 1).unwrap();
        let priors = DirichletPriors {
            mu: 5.0,
            lambda: 1.0,
            theta: None,
            clients: 5,
            classes: 2,
            feature_arities: vec![],
        };
        let walk = WalkParams { burn_in: 100, steps: 100, xi: 0.002 };
        let clients = partition_dataset(&ds, &priors, &[], &walk, 2).unwrap().clients;
        let split = &make_folds(&[0, 1, 2, 3, 4], 5, false, &mut SimRng::seed_from_u64(0)).unwrap()[0];
        let fold = FoldData::prepare(&clients, split, Scope::Global).unwrap();
        let n: usize = fold.train.iter().map(ClientDataset::len).sum();
        let mean: f64 = fold.train.iter().flat_map(|c| (0..c.len()).map(move |i| c.row(i)[0])).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-9);
        assert_eq!(fold.validation.len(), 1);
        assert_eq!(fold.test.len(), 1);
    }
}
