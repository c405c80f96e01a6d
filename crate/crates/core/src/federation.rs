//! The round loop for both branches.
//!
//! FD: clients train privately, predict on the public set, the byzantine
//! rows are replaced by the attack, the defence aggregates and a freshly
//! initialized server distills from the aggregate. FedAvg: the server takes
//! the plain mean of all client parameter vectors.
//!
//! Byzantine clients are always the last `alpha * N` ids.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackError, AttackKind, SampleView, SimilarityMatrix, SimilaritySource};
use crate::config::{Branch, ClientDecay, ConfigError, DataSource, ExperimentConfig};
use crate::data::{self, DataError, Dataset, Splits};
use crate::defences::{self, AggregatorState, DefenceError};
use crate::model::{self, Architecture, LrDecay, ModelError, ModelParams, TrainingSet};
use crate::rng::{self, derive_seed};
use crate::simplex::{self, PredictionSet, ProbVector, SimplexError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("round {round}: {source}")]
    Model { round: usize, source: ModelError },
    #[error("before the first round: {0}")]
    Setup(ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defence(#[from] DefenceError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

impl RunError {
    /// Errors caused by the configuration rather than by running it.
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Data(DataError::PlanInfeasible(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Honest,
    Byzantine,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub params: ModelParams,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub validation_accuracy: f64,
    /// ExpGuard weights after this round's update, summing to `N`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub byzantine_share: Option<f64>,
    /// Mean over the public set of `||aggregate - honest mean||`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub honest_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub honest_distance_max: Option<f64>,
    pub labels_checked: usize,
    pub labels_valid: usize,
    pub gm_unconverged: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub byzantine: Vec<usize>,
    pub server: ModelParams,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }
}

/// Test-only switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// In FD, overwrite byzantine parameters with garbage once they have
    /// made their predictions each round.
    pub corrupt_byzantine_params: bool,
}

/// Mean over samples of the distance between aggregate and honest mean.
pub fn honest_label_distance(aggregated: &[ProbVector], honest: &[ProbVector]) -> Result<f64, SimplexError> {
    if aggregated.len() != honest.len() {
        return Err(SimplexError::DimensionMismatch { left: aggregated.len(), right: honest.len() });
    }
    if aggregated.is_empty() {
        return Err(SimplexError::EmptyInput);
    }
    let mut total = 0.0;
    for (a, h) in aggregated.iter().zip(honest) {
        total += simplex::l2_distance(a.as_slice(), h.as_slice())?;
    }
    Ok(total / aggregated.len() as f64)
}

struct Setup {
    arch: Architecture,
    splits: Splits,
    clients: Vec<ClientState>,
    server: ModelParams,
    byzantine: Vec<usize>,
}

fn load_data(config: &ExperimentConfig) -> Result<Dataset, RunError> {
    Ok(match &config.data {
        DataSource::Blobs { classes, dim, per_class, spread } => data::make_blobs(
            *classes,
            *dim,
            *per_class,
            *spread,
            derive_seed(&[rng::domain::DATA, config.seed]),
        )?,
        DataSource::File(path) => Dataset::read(path)?,
    })
}

fn setup(config: &ExperimentConfig) -> Result<Setup, RunError> {
    config.validate()?;
    let ds = load_data(config)?;
    let arch = config.architecture(ds.dim(), ds.classes())?;
    let splits = data::split(&ds, &config.split_plan())?;
    let n = config.clients;
    let b = config.byzantine_count();
    let server = model::init(&arch, derive_seed(&[rng::domain::SERVER_INIT, config.seed, 0]));
    let clients = splits
        .private
        .iter()
        .enumerate()
        .map(|(id, d)| ClientState {
            id,
            role: if id >= n - b { Role::Byzantine } else { Role::Honest },
            params: model::init(&arch, derive_seed(&[rng::domain::MODEL_INIT, config.seed, id as u64])),
            data: d.clone(),
        })
        .collect();
    Ok(Setup { arch, splits, clients, server, byzantine: (n - b..n).collect() })
}

fn client_schedule(config: &ExperimentConfig, round: usize) -> model::TrainSchedule {
    let e = config.client.epochs;
    let decay = match config.client_decay {
        ClientDecay::Global => LrDecay::GlobalBudget { start_epoch: round * e, total_epochs: config.rounds * e },
        ClientDecay::Round => LrDecay::OwnEpochs,
    };
    config.client.schedule(decay)
}

/// Trains the selected clients in parallel, each on its own stream.
fn train_clients(
    config: &ExperimentConfig,
    clients: &mut [ClientState],
    round: usize,
    active: impl Fn(&ClientState) -> bool + Sync,
) -> Result<(), RunError> {
    let schedule = client_schedule(config, round);
    clients
        .par_iter_mut()
        .filter(|c| active(c))
        .try_for_each(|c| {
            let set = c.data.training_set().map_err(|source| RunError::Model { round, source })?;
            let seed = derive_seed(&[rng::domain::CLIENT_TRAIN, config.seed, c.id as u64, round as u64]);
            c.params = model::train(&c.params, &set, &schedule, config.loss, seed)
                .map_err(|source| RunError::Model { round, source })?;
            Ok(())
        })
}

fn evaluate(params: &ModelParams, ds: &Dataset) -> f64 {
    model::accuracy(params, ds.features(), ds.labels().expect("evaluation splits are labeled"))
}

fn similarity(config: &ExperimentConfig, s: &Setup) -> Result<Option<SimilarityMatrix>, RunError> {
    let matrix = match &config.attack.similarity {
        None => return Ok(None),
        Some(SimilaritySource::File(path)) => SimilarityMatrix::read(path)?,
        Some(SimilaritySource::Pretrained) => {
            // a model trained centrally on every private split
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for d in &s.splits.private {
                features.extend_from_slice(d.features());
                labels.extend_from_slice(d.labels().expect("private splits are labeled"));
            }
            let set = TrainingSet::from_labels(features, &labels, s.arch.input_dim, s.arch.classes)
                .map_err(RunError::Setup)?;
            let init = model::init(&s.arch, derive_seed(&[rng::domain::REFERENCE_MODEL, config.seed]));
            let schedule = config.server.schedule(LrDecay::OwnEpochs);
            let seed = derive_seed(&[rng::domain::REFERENCE_MODEL, config.seed, 1]);
            let reference = model::train(&init, &set, &schedule, config.loss, seed).map_err(RunError::Setup)?;
            let preds = model::predict_batch(&reference, s.splits.public.features());
            let rows: Vec<&[f64]> = preds.chunks_exact(s.arch.classes).collect();
            attacks::build_similarity(&rows)?
        }
    };
    if matrix.classes() != s.arch.classes {
        return Err(ConfigError::Invalid(format!(
            "similarity matrix has {} classes, data has {}",
            matrix.classes(),
            s.arch.classes
        ))
        .into());
    }
    Ok(Some(matrix))
}

/// Runs the configured branch.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    run_with(config, RunOptions::default(), |_| {})
}

/// Runs the configured branch, handing each record to `on_round` as soon
/// as its round finishes.
pub fn run_with(
    config: &ExperimentConfig,
    options: RunOptions,
    on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, RunError> {
    match config.branch {
        Branch::Fd => run_fd_with(config, options, on_round),
        Branch::Fedavg => run_fedavg_with(config, on_round),
    }
}

pub fn run_fd(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    run_fd_with(config, RunOptions::default(), |_| {})
}

fn run_fd_with(
    config: &ExperimentConfig,
    options: RunOptions,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, RunError> {
    if config.branch != Branch::Fd {
        return Err(ConfigError::Invalid("run_fd needs branch=fd".into()).into());
    }
    let mut s = setup(config)?;
    let sim = similarity(config, &s)?;
    let attack = config.effective_attack();
    let attacked = attack.kind != AttackKind::None;
    let classes = s.arch.classes;
    let public = s.splits.public.features().to_vec();
    let samples = s.splits.public.len();
    let honest_ids: Vec<usize> = s.clients.iter().filter(|c| c.role == Role::Honest).map(|c| c.id).collect();
    let mut state = AggregatorState::new(config.clients);
    let mut records = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let start = Instant::now();
        if config.broadcast {
            for c in &mut s.clients {
                c.params = s.server.clone();
            }
        }
        // byzantine clients only need a model when they answer honestly
        train_clients(config, &mut s.clients, t, |c| c.role == Role::Honest || !attacked)?;

        let own: Vec<Vec<f64>> = s
            .clients
            .par_iter()
            .map(|c| {
                if c.role == Role::Honest || !attacked {
                    model::predict_batch(&c.params, &public)
                } else {
                    Vec::new()
                }
            })
            .collect();
        if options.corrupt_byzantine_params {
            for id in &s.byzantine {
                s.clients[*id].params.values_mut().iter_mut().for_each(|v| *v = f64::NAN);
            }
        }

        let honest_preds = PredictionSet::new(
            honest_ids.len(),
            samples,
            classes,
            honest_ids.iter().flat_map(|&i| own[i].iter().cloned()).collect(),
        )?;
        let honest_means: Vec<ProbVector> = (0..samples)
            .map(|x| attacks::honest_mean(&honest_preds.column(x)))
            .collect::<Result<_, _>>()?;

        let byzantine_rows: Vec<Option<ProbVector>> = (0..samples)
            .into_par_iter()
            .map(|x| {
                let column = honest_preds.column(x);
                let view = SampleView {
                    honest: &column,
                    sample: x,
                    alpha: config.alpha,
                    round_seed: derive_seed(&[attack.seed, t as u64]),
                    similarity: sim.as_ref(),
                };
                attacks::byzantine_prediction(&attack, &view)
            })
            .collect::<Result<_, _>>()?;

        let mut table = Vec::with_capacity(config.clients * samples * classes);
        for c in &s.clients {
            match (c.role, attacked) {
                (Role::Byzantine, true) => {
                    for row in &byzantine_rows {
                        table.extend_from_slice(row.as_ref().expect("FD attacks answer every sample").as_slice());
                    }
                }
                _ => table.extend_from_slice(&own[c.id]),
            }
        }
        let preds = PredictionSet::new(config.clients, samples, classes, table)?;

        let agg = defences::aggregate(&config.defence, &preds, &mut state)?;
        let labels_valid = agg.labels.iter().filter(|y| simplex::validate(y.as_slice()).is_ok()).count();
        let distances: Vec<f64> = agg
            .labels
            .iter()
            .zip(&honest_means)
            .map(|(a, h)| simplex::l2(a.as_slice(), h.as_slice()))
            .collect();
        let honest_distance = honest_label_distance(&agg.labels, &honest_means)?;

        let targets: Vec<f64> = agg.labels.iter().flat_map(|y| y.as_slice().iter().cloned()).collect();
        let set = TrainingSet::new(public.clone(), targets, s.arch.input_dim, classes)
            .map_err(|source| RunError::Model { round: t, source })?;
        let fresh = model::init(&s.arch, derive_seed(&[rng::domain::SERVER_INIT, config.seed, t as u64 + 1]));
        let seed = derive_seed(&[rng::domain::SERVER_TRAIN, config.seed, t as u64]);
        s.server = model::train(&fresh, &set, &config.server.schedule(LrDecay::OwnEpochs), config.loss, seed)
            .map_err(|source| RunError::Model { round: t, source })?;

        let expguard = config.defence.expguard;
        let record = RoundRecord {
            round: t,
            test_accuracy: evaluate(&s.server, &s.splits.test),
            validation_accuracy: evaluate(&s.server, &s.splits.validation),
            weights: expguard.then(|| state.weights()),
            byzantine_share: expguard.then(|| state.share(&s.byzantine)),
            honest_distance: Some(honest_distance),
            honest_distance_max: Some(distances.iter().cloned().fold(0.0, f64::max)),
            labels_checked: agg.labels.len(),
            labels_valid,
            gm_unconverged: agg.stats.gm_unconverged,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_round(&record);
        records.push(record);
    }
    Ok(RunOutcome { records, byzantine: s.byzantine, server: s.server })
}

pub fn run_fedavg(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    run_fedavg_with(config, |_| {})
}

/// Unweighted mean of parameter vectors, summed in order from zero.
pub fn mean_params(params: &[&ModelParams]) -> ModelParams {
    let mut sum = vec![0.0; params[0].len()];
    for p in params {
        sum.iter_mut().zip(p.values()).for_each(|(s, v)| *s += v);
    }
    let n = params.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    ModelParams::from_values(params[0].arch().clone(), sum).expect("same architecture")
}

fn run_fedavg_with(config: &ExperimentConfig, mut on_round: impl FnMut(&RoundRecord)) -> Result<RunOutcome, RunError> {
    if config.branch != Branch::Fedavg {
        return Err(ConfigError::Invalid("run_fedavg needs branch=fedavg".into()).into());
    }
    let mut s = setup(config)?;
    let attack = config.effective_attack();
    let n = config.clients;
    let mut records = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let start = Instant::now();
        for c in &mut s.clients {
            c.params = s.server.clone();
        }
        let noisy = attack.kind == AttackKind::FedavgGauss;
        train_clients(config, &mut s.clients, t, |c| c.role == Role::Honest || !noisy)?;
        match attack.kind {
            AttackKind::FedavgGauss => {
                let scale = attack.noise_scale.expect("validated");
                for &id in &s.byzantine {
                    let values = attacks::fedavg_gauss(s.server.len(), scale, derive_seed(&[attack.seed, id as u64, t as u64]))?;
                    s.clients[id].params = ModelParams::from_values(s.arch.clone(), values).expect("same length");
                }
            }
            AttackKind::FedavgTakeover => {
                if let Some(&last) = s.byzantine.last() {
                    let target = ModelParams::zeros(s.arch.clone());
                    let others: Vec<&ModelParams> = s.clients.iter().filter(|c| c.id != last).map(|c| &c.params).collect();
                    s.clients[last].params = attacks::fedavg_takeover(&target, &others, n);
                }
            }
            _ => {}
        }
        let all: Vec<&ModelParams> = s.clients.iter().map(|c| &c.params).collect();
        s.server = mean_params(&all);

        let record = RoundRecord {
            round: t,
            test_accuracy: evaluate(&s.server, &s.splits.test),
            validation_accuracy: evaluate(&s.server, &s.splits.validation),
            weights: None,
            byzantine_share: None,
            honest_distance: None,
            honest_distance_max: None,
            labels_checked: 0,
            labels_valid: 0,
            gm_unconverged: 0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_round(&record);
        records.push(record);
    }
    Ok(RunOutcome { records, byzantine: s.byzantine, server: s.server })
}
