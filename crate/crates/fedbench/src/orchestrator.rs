//! In-process federation driver: seeded round loop over partitioned clients.
//!
//! One experiment is: initialize a global model, then per round broadcast it
//! to every client, run each client's local epochs, aggregate the weighted
//! mean, and evaluate on the held-out split at a configurable cadence. Every
//! source of randomness derives from the master seed, so a run is a pure
//! function of `(config, datasets)`. Clients may train on parallel worker
//! threads; results are collected by client id, which keeps the output
//! independent of scheduling.
//!
//! Byte counters mirror what the TCP deployment would transmit: parameters
//! travel as 4-byte floats inside the framed protocol, so each round costs
//! one model broadcast per client downstream and one update frame per client
//! upstream. Setting `quantize_broadcast` additionally applies the same
//! `f64 → f32` precision loss in-process, making a run comparable
//! coordinate-for-coordinate with a networked one.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algo::{
    aggregate_fedavg, local_train, train_one_epoch, update_penalty_state, AlgorithmConfig,
    AlgorithmKind, ClientUpdate, FedCurvPenaltyState, PenaltyView,
};
use crate::data::Dataset;
use crate::model::{
    init_params, top1_accuracy, Batch, FisherDiagonal, ModelParams, ModelSpec, OptimizerKind,
    OptimizerState,
};
use crate::partition::{partition, PartitionPlan, PartitionSpec};
use crate::wire::{model_frame_len, quantize_f64, round_done_frame_len, update_frame_len};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidSpec("learning rate must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn build(&self, dim: usize) -> OptimizerState {
        match self.kind {
            OptimizerKind::Sgd => OptimizerState::sgd(self.lr, dim),
            OptimizerKind::Adam => OptimizerState::adam(self.lr, dim),
        }
    }
}

/// Everything needed to reproduce one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub algo: AlgorithmConfig,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub partition: PartitionSpec,
    pub master_seed: u64,
    /// Evaluate every this-many rounds (the final round always evaluates).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Worker threads for local training inside one round.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Rebuild each client's optimizer at every round instead of letting
    /// moment estimates persist across rounds.
    #[serde(default)]
    pub reset_optimizer_per_round: bool,
    /// Push every broadcast and update through `f64 → f32 → f64`, the exact
    /// precision loss of the wire protocol.
    #[serde(default)]
    pub quantize_broadcast: bool,
}

fn default_eval_every() -> usize {
    1
}

fn default_workers() -> usize {
    1
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::InvalidSpec("num_clients must be >= 1".into()));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidSpec("rounds must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidSpec("eval_every must be >= 1".into()));
        }
        if self.workers < 1 {
            return Err(Error::InvalidSpec("workers must be >= 1".into()));
        }
        self.algo.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.num_clients > 1 {
            self.partition.validate()?;
            if self.partition.num_clients != self.num_clients {
                return Err(Error::InvalidSpec(format!(
                    "partition covers {} clients but the federation has {}",
                    self.partition.num_clients, self.num_clients
                )));
            }
        }
        Ok(())
    }
}

/// Snapshot of the federation after one evaluated round. Byte counters are
/// cumulative over the whole run up to and including this round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_top1: f64,
    pub mean_local_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Measured wall-clock milliseconds since the run started. The only
    /// nondeterministic field; persisted outputs zero it.
    pub wall_ms: u64,
}

/// Per-(client, round) RNG stream: a splitmix64 finalizer over the master
/// seed with the client id and round folded in at fixed offsets. Injective
/// for ids and rounds below 2³², so no two streams collide.
pub fn stream_seed(master_seed: u64, client_id: usize, round: usize) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = master_seed
        .wrapping_add(GOLDEN.wrapping_mul(client_id as u64 + 1))
        .wrapping_add(GOLDEN.wrapping_mul((round as u64 + 1) << 32));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Top-1 accuracy of `params` on a held-out split.
pub fn evaluate_global(spec: &ModelSpec, params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluation split".into()));
    }
    top1_accuracy(spec, params, &test.features, &test.labels)
}

/// Builds the client index lists: the configured partitioner for real
/// federations, or the whole training set for a single client (whose plan,
/// like every plan, lists indices in ascending order).
pub fn derive_plan(cfg: &FederationConfig, train: &Dataset) -> Result<Option<PartitionPlan>> {
    if cfg.num_clients == 1 {
        Ok(None)
    } else {
        Ok(Some(partition(train, &cfg.partition)?))
    }
}

fn gather_shards(
    cfg: &FederationConfig,
    train: &Dataset,
    plan: Option<&PartitionPlan>,
) -> Result<Vec<Batch>> {
    let derived;
    let assignments: &[Vec<usize>] = match plan {
        Some(plan) => {
            if plan.assignments.len() != cfg.num_clients {
                return Err(Error::InvalidSpec(format!(
                    "plan covers {} clients but the federation has {}",
                    plan.assignments.len(),
                    cfg.num_clients
                )));
            }
            &plan.assignments
        }
        None => {
            derived = match derive_plan(cfg, train)? {
                Some(plan) => plan.assignments,
                None => vec![(0..train.len()).collect()],
            };
            &derived
        }
    };
    assignments
        .iter()
        .map(|indices| {
            if indices.iter().any(|&i| i >= train.len()) {
                return Err(Error::InvalidSpec(
                    "plan references rows beyond the training set".into(),
                ));
            }
            Batch::new(
                train.features.gather_rows(indices),
                indices.iter().map(|&i| train.labels[i]).collect(),
            )
        })
        .collect()
}

/// The penalty coefficients client `client_id` trains against. In quantized
/// mode the sums are narrowed to `f32` first — exactly what a model
/// broadcast does on the wire — and the client's own (already quantized)
/// contribution is subtracted afterwards, matching a networked collaborator
/// that receives the full sums and removes its own share locally.
fn penalty_view_for(
    state: &FedCurvPenaltyState,
    client_id: usize,
    quantize: bool,
) -> PenaltyView {
    if !quantize {
        return state.view_excluding(client_id);
    }
    let mut fisher_others = quantize_f64(&state.sum_fisher);
    let mut fisher_params_others = quantize_f64(&state.sum_fisher_params);
    if let Some((fisher, fisher_params)) = state.per_client_contrib.get(&client_id) {
        for (a, f) in fisher_others.iter_mut().zip(fisher) {
            *a -= f;
        }
        for (b, fp) in fisher_params_others.iter_mut().zip(fisher_params) {
            *b -= fp;
        }
    }
    PenaltyView {
        fisher_others,
        fisher_params_others,
    }
}

/// Applies the wire's `f32` narrowing to everything a client sends back.
fn quantize_update(update: &mut ClientUpdate) {
    update.params = quantize_f64(&update.params);
    update.local_loss = update.local_loss as f32 as f64;
    if let Some(fisher) = update.fisher.take() {
        update.fisher = Some(FisherDiagonal {
            values: quantize_f64(&fisher.values),
            sample_count: fisher.sample_count,
        });
    }
    if let Some(product) = update.fisher_times_params.take() {
        update.fisher_times_params = Some(quantize_f64(&product));
    }
}

/// Trains every client for one round, in parallel when `workers > 1`.
/// Output order is by client id regardless of scheduling.
#[allow(clippy::too_many_arguments)]
fn train_round(
    cfg: &FederationConfig,
    broadcast: &ModelParams,
    shards: &[Batch],
    optimizers: &mut [OptimizerState],
    penalty_state: Option<&FedCurvPenaltyState>,
    round: usize,
) -> Result<Vec<ClientUpdate>> {
    let n = cfg.num_clients;
    let views: Vec<Option<PenaltyView>> = (0..n)
        .map(|client| {
            penalty_state
                .filter(|_| cfg.algo.kind == AlgorithmKind::FedCurv)
                .map(|state| penalty_view_for(state, client, cfg.quantize_broadcast))
        })
        .collect();

    let mut results: Vec<Option<Result<ClientUpdate>>> = (0..n).map(|_| None).collect();
    let work: Vec<(usize, &mut OptimizerState, &Batch, Option<PenaltyView>, &mut Option<Result<ClientUpdate>>)> =
        optimizers
            .iter_mut()
            .zip(shards)
            .zip(views)
            .zip(results.iter_mut())
            .enumerate()
            .map(|(client, (((opt, shard), view), slot))| (client, opt, shard, view, slot))
            .collect();

    let run_one = |client: usize,
                   opt: &mut OptimizerState,
                   shard: &Batch,
                   view: Option<PenaltyView>| {
        if cfg.reset_optimizer_per_round {
            *opt = cfg.optimizer.build(broadcast.values.len());
        }
        local_train(
            &cfg.model,
            broadcast,
            shard,
            opt,
            &cfg.algo,
            view.as_ref(),
            client,
            stream_seed(cfg.master_seed, client, round),
        )
    };

    if cfg.workers == 1 {
        for (client, opt, shard, view, slot) in work {
            *slot = Some(run_one(client, opt, shard, view));
        }
    } else {
        // deal clients round-robin onto workers; each worker owns disjoint
        // mutable slots, so no synchronization is needed beyond the join
        let mut buckets: Vec<Vec<_>> = (0..cfg.workers).map(|_| Vec::new()).collect();
        for item in work {
            buckets[item.0 % cfg.workers].push(item);
        }
        std::thread::scope(|scope| {
            for bucket in buckets {
                scope.spawn(|| {
                    for (client, opt, shard, view, slot) in bucket {
                        *slot = Some(run_one(client, opt, shard, view));
                    }
                });
            }
        });
    }

    let mut updates = Vec::with_capacity(n);
    for (client, slot) in results.into_iter().enumerate() {
        let mut update = slot
            .ok_or_else(|| Error::InvalidSpec(format!("client {client} never ran")))??;
        if cfg.quantize_broadcast {
            quantize_update(&mut update);
        }
        updates.push(update);
    }
    Ok(updates)
}

/// What a completed federation hands back: the evaluated rounds plus the
/// final aggregated model.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ModelParams,
}

/// Runs the full federated experiment. Metrics cover every evaluated round:
/// multiples of `eval_every`, plus the final round.
pub fn run_federation(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<FederationRun> {
    run_partitioned(cfg, train, test, None)
}

/// Like [`run_federation`], but can reuse a precomputed partition plan.
/// Sweeps that vary only the algorithm or schedule share one plan per
/// partition setting instead of re-partitioning for every run.
pub fn run_partitioned(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
    plan: Option<&PartitionPlan>,
) -> Result<FederationRun> {
    cfg.validate()?;
    train.validate(true)?;
    test.validate(false)?;
    let started = Instant::now();
    let shards = gather_shards(cfg, train, plan)?;
    let d = cfg.model.param_count();
    let mut optimizers: Vec<OptimizerState> =
        (0..cfg.num_clients).map(|_| cfg.optimizer.build(d)).collect();
    let mut global = init_params(&cfg.model, cfg.master_seed)?;
    let mut penalty_state: Option<FedCurvPenaltyState> = None;
    let mut bytes_up: u64 = 0;
    let mut bytes_down: u64 = 0;
    let mut metrics = Vec::new();

    for round in 1..=cfg.rounds {
        let broadcast = if cfg.quantize_broadcast {
            ModelParams {
                values: quantize_f64(&global.values),
                layout: global.layout.clone(),
            }
        } else {
            global.clone()
        };
        let broadcast_has_penalty =
            cfg.algo.kind == AlgorithmKind::FedCurv && penalty_state.is_some();
        bytes_down += (cfg.num_clients
            * (model_frame_len(d, broadcast_has_penalty) + round_done_frame_len()))
            as u64;

        let updates = train_round(
            cfg,
            &broadcast,
            &shards,
            &mut optimizers,
            penalty_state.as_ref(),
            round,
        )?;
        for update in &updates {
            bytes_up += update_frame_len(d, update.fisher.is_some()) as u64;
        }

        global.values = aggregate_fedavg(&updates)?;
        if cfg.algo.kind == AlgorithmKind::FedCurv {
            penalty_state = Some(update_penalty_state(&updates, round)?);
        }

        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let global_top1 = evaluate_global(&cfg.model, &global, test)?;
            let mean_local_loss =
                updates.iter().map(|u| u.local_loss).sum::<f64>() / updates.len() as f64;
            metrics.push(RoundMetrics {
                round,
                global_top1,
                mean_local_loss,
                bytes_up,
                bytes_down,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(FederationRun {
        metrics,
        final_params: global,
    })
}

/// Trains one model on the pooled training split for `rounds ×
/// epochs_per_round` epochs and returns the test accuracy after every epoch.
/// Randomness is drawn exactly like client 0 of a single-client federation,
/// so with one epoch per round the two accuracy curves coincide.
pub fn run_centralized(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    train.validate(true)?;
    test.validate(false)?;
    let pooled = Batch::new(train.features.clone(), train.labels.clone())?;
    let d = cfg.model.param_count();
    let mut params = init_params(&cfg.model, cfg.master_seed)?;
    let mut opt = cfg.optimizer.build(d);
    let mut accuracies = Vec::with_capacity(cfg.rounds * cfg.algo.epochs_per_round);
    for round in 1..=cfg.rounds {
        if cfg.reset_optimizer_per_round {
            opt = cfg.optimizer.build(d);
        }
        if cfg.quantize_broadcast {
            params.values = quantize_f64(&params.values);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.master_seed, 0, round));
        for epoch in 0..cfg.algo.epochs_per_round {
            train_one_epoch(
                &cfg.model,
                &mut params,
                &pooled,
                &mut opt,
                cfg.algo.batch_size,
                None,
                &mut rng,
            )?;
            let last_of_round = epoch + 1 == cfg.algo.epochs_per_round;
            if cfg.quantize_broadcast && last_of_round {
                params.values = quantize_f64(&params.values);
            }
            accuracies.push(evaluate_global(&cfg.model, &params, test)?);
        }
    }
    Ok(accuracies)
}
