//! Local training and aggregation rules for federated averaging, with an
//! optional curvature penalty.
//!
//! Plain averaging ("fedavg") has clients run local epochs and the server
//! take the sample-count-weighted mean of the returned parameter vectors.
//! The curvature variant ("fedcurv") additionally ships each client's
//! empirical Fisher diagonal `F_i` and the product `F_i ⊙ θ_i`; other
//! clients then add the quadratic penalty
//! `λ · (θᵀ(A₋ᵢ ⊙ θ) − 2 θᵀ b₋ᵢ)` to their local objective, where `A₋ᵢ` and
//! `b₋ᵢ` sum the previous round's contributions of everyone but themselves.
//! The constant term of the underlying squared distance is dropped; gradients
//! are unaffected.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::KahanSum;
use crate::model::{
    fisher_diagonal, forward_loss, gradient, Batch, FisherDiagonal, ModelParams, ModelSpec,
    OptimizerState,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    FedAvg,
    FedCurv,
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedCurv => "fedcurv",
        }
    }
}

/// Mini-batch size for local epochs: a fixed count or the whole shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    pub epochs_per_round: usize,
    pub batch_size: BatchSize,
    /// Penalty weight; only meaningful for [`AlgorithmKind::FedCurv`].
    pub lambda: f64,
}

impl AlgorithmConfig {
    pub fn fedavg(epochs_per_round: usize, batch_size: BatchSize) -> Self {
        AlgorithmConfig {
            kind: AlgorithmKind::FedAvg,
            epochs_per_round,
            batch_size,
            lambda: 0.0,
        }
    }

    pub fn fedcurv(epochs_per_round: usize, batch_size: BatchSize, lambda: f64) -> Self {
        AlgorithmConfig {
            kind: AlgorithmKind::FedCurv,
            epochs_per_round,
            batch_size,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round < 1 {
            return Err(Error::InvalidSpec("epochs_per_round must be >= 1".into()));
        }
        if let BatchSize::Fixed(b) = self.batch_size {
            if b < 1 {
                return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidSpec("lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// What one client sends back after its local epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Vec<f64>,
    pub sample_count: usize,
    pub fisher: Option<FisherDiagonal>,
    pub fisher_times_params: Option<Vec<f64>>,
    pub local_loss: f64,
}

/// Sums of the latest per-client Fisher contributions, kept by the server
/// between rounds so each client can subtract its own share.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FedCurvPenaltyState {
    pub round: usize,
    /// `A = Σ_j F_j`
    pub sum_fisher: Vec<f64>,
    /// `b = Σ_j F_j ⊙ θ_j`
    pub sum_fisher_params: Vec<f64>,
    pub per_client_contrib: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// The penalty coefficients one client trains against: everyone else's
/// Fisher sum and Fisher-times-params sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyView {
    pub fisher_others: Vec<f64>,
    pub fisher_params_others: Vec<f64>,
}

impl FedCurvPenaltyState {
    /// Subtracts `client_id`'s own previous contribution from the sums. A
    /// client that did not contribute (or a fresh state) just sees the full
    /// sums.
    pub fn view_excluding(&self, client_id: usize) -> PenaltyView {
        let mut fisher_others = self.sum_fisher.clone();
        let mut fisher_params_others = self.sum_fisher_params.clone();
        if let Some((fisher, fisher_params)) = self.per_client_contrib.get(&client_id) {
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

    /// Checks the bookkeeping: nonnegative Fisher sums that match the stored
    /// per-client contributions.
    pub fn check_consistency(&self) -> Result<()> {
        let d = self.sum_fisher.len();
        if self.sum_fisher_params.len() != d {
            return Err(Error::DimensionMismatch(
                "penalty state vectors disagree in length".into(),
            ));
        }
        for t in 0..d {
            if self.sum_fisher[t] < -1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "fisher sum has negative entry {} at {t}",
                    self.sum_fisher[t]
                )));
            }
            let mut from_clients = 0.0;
            for (fisher, _) in self.per_client_contrib.values() {
                from_clients += fisher[t];
            }
            if (from_clients - self.sum_fisher[t]).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!(
                    "fisher sum at {t} drifted from per-client contributions"
                )));
            }
        }
        Ok(())
    }
}

impl PenaltyView {
    /// `λ · (θᵀ(A₋ᵢ ⊙ θ) − 2 θᵀ b₋ᵢ)`, the variable part of the penalty.
    pub fn value(&self, params: &[f64], lambda: f64) -> f64 {
        let mut quad = KahanSum::new();
        let mut lin = KahanSum::new();
        for ((&f, &fp), &theta) in self
            .fisher_others
            .iter()
            .zip(&self.fisher_params_others)
            .zip(params)
        {
            quad.add(f * theta * theta);
            lin.add(fp * theta);
        }
        lambda * (quad.value() - 2.0 * lin.value())
    }

    /// Adds `2λ(A₋ᵢ ⊙ θ − b₋ᵢ)` into `grad`.
    pub fn add_gradient(&self, params: &[f64], lambda: f64, grad: &mut [f64]) {
        for t in 0..grad.len() {
            grad[t] += 2.0 * lambda * (self.fisher_others[t] * params[t] - self.fisher_params_others[t]);
        }
    }
}

/// Runs `epochs_per_round` local epochs from `global` on one client's shard
/// and packages the result. Batches are drawn by a seeded shuffle every
/// epoch; a short trailing batch is kept. With the curvature algorithm and a
/// present `penalty`, each step's gradient includes the quadratic penalty
/// term, and the returned update carries the Fisher diagonal evaluated at
/// the final parameters over the full shard.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    global: &ModelParams,
    client_data: &Batch,
    opt_state: &mut OptimizerState,
    algo: &AlgorithmConfig,
    penalty: Option<&PenaltyView>,
    client_id: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    algo.validate()?;
    if client_data.is_empty() {
        return Err(Error::EmptyInput(format!("client {client_id} data")));
    }
    let d = global.values.len();
    // λ = 0 must reproduce plain averaging bit for bit, so the penalty is
    // skipped entirely rather than added as a zero
    let active_penalty = match (algo.kind, penalty) {
        (AlgorithmKind::FedCurv, Some(view)) if algo.lambda > 0.0 => {
            if view.fisher_others.len() != d || view.fisher_params_others.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "penalty vectors have length {}, parameters {}",
                    view.fisher_others.len(),
                    d
                )));
            }
            Some(view)
        }
        _ => None,
    };

    let n = client_data.len();
    let mut params = global.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..algo.epochs_per_round {
        train_one_epoch(
            spec,
            &mut params,
            client_data,
            opt_state,
            algo.batch_size,
            active_penalty.map(|view| (view, algo.lambda)),
            &mut rng,
        )?;
    }

    let (mut local_loss, _) = forward_loss(spec, &params, client_data)?;
    if let Some(view) = active_penalty {
        local_loss += view.value(&params.values, algo.lambda);
    }

    let (fisher, fisher_times_params) = if algo.kind == AlgorithmKind::FedCurv {
        let fisher = fisher_diagonal(spec, &params, client_data)?;
        let product = fisher
            .values
            .iter()
            .zip(&params.values)
            .map(|(f, p)| f * p)
            .collect();
        (Some(fisher), Some(product))
    } else {
        (None, None)
    };

    Ok(ClientUpdate {
        client_id,
        params: params.values,
        sample_count: n,
        fisher,
        fisher_times_params,
        local_loss,
    })
}

/// One pass over the data in seeded-shuffle order, stepping the optimizer
/// once per mini-batch (the trailing short batch included). This is the
/// primitive both [`local_train`] and the centralized baseline are built
/// from, so the two consume randomness identically.
///
/// When the whole epoch is a single batch, sample order only permutes a sum,
/// so the shuffle is skipped: a full-batch epoch is exactly one gradient
/// step over the data as given, and consumes no randomness.
pub fn train_one_epoch(
    spec: &ModelSpec,
    params: &mut ModelParams,
    data: &Batch,
    opt_state: &mut OptimizerState,
    batch_size: BatchSize,
    penalty: Option<(&PenaltyView, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput("training data".into()));
    }
    let batch = match batch_size {
        BatchSize::Full => n,
        BatchSize::Fixed(b) => b.min(n),
    };
    let mut order: Vec<usize> = (0..n).collect();
    if batch < n {
        order.shuffle(rng);
    }
    for chunk in order.chunks(batch) {
        let minibatch = Batch {
            features: data.features.gather_rows(chunk),
            labels: chunk.iter().map(|&i| data.labels[i]).collect(),
        };
        let mut grad = gradient(spec, params, &minibatch)?;
        if let Some((view, lambda)) = penalty {
            view.add_gradient(&params.values, lambda, &mut grad);
        }
        opt_state.step(&mut params.values, &grad)?;
    }
    Ok(())
}

/// Sample-count-weighted mean of the client parameter vectors,
/// `Σ n_i θ_i / Σ n_i`, accumulated with compensated summation so the result
/// is stable to reordering.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("update list".into()))?;
    let d = first.params.len();
    for update in updates {
        if update.params.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "client {} sent {} parameters, expected {}",
                update.client_id,
                update.params.len(),
                d
            )));
        }
        if update.sample_count < 1 {
            return Err(Error::InvalidSpec(format!(
                "client {} reports zero samples",
                update.client_id
            )));
        }
    }
    let mut total = KahanSum::new();
    for update in updates {
        total.add(update.sample_count as f64);
    }
    let total = total.value();
    // normalizing the weights up front keeps a lone client's "average"
    // bit-identical to its own vector
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| u.sample_count as f64 / total)
        .collect();
    let mut out = vec![0.0; d];
    for (t, slot) in out.iter_mut().enumerate() {
        let mut acc = KahanSum::new();
        for (update, &w) in updates.iter().zip(&weights) {
            acc.add(w * update.params[t]);
        }
        *slot = acc.value();
    }
    Ok(out)
}

/// Folds a round's updates into fresh penalty sums: `A = Σ F_i`,
/// `b = Σ F_i ⊙ θ_i`, with each client's contribution kept for later
/// self-exclusion. `round` labels the round these updates came from.
pub fn update_penalty_state(
    updates: &[ClientUpdate],
    round: usize,
) -> Result<FedCurvPenaltyState> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("update list".into()))?;
    let d = first.params.len();
    let mut sum_fisher = vec![0.0; d];
    let mut sum_fisher_params = vec![0.0; d];
    let mut per_client_contrib = BTreeMap::new();
    for update in updates {
        let fisher = update.fisher.as_ref().ok_or_else(|| {
            Error::InvalidSpec(format!(
                "client {} update carries no fisher diagonal",
                update.client_id
            ))
        })?;
        let product = update.fisher_times_params.as_ref().ok_or_else(|| {
            Error::InvalidSpec(format!(
                "client {} update carries no fisher-times-params vector",
                update.client_id
            ))
        })?;
        if fisher.values.len() != d || product.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "client {} fisher vectors disagree with parameter length {}",
                update.client_id, d
            )));
        }
        for t in 0..d {
            sum_fisher[t] += fisher.values[t];
            sum_fisher_params[t] += product[t];
        }
        per_client_contrib.insert(
            update.client_id,
            (fisher.values.clone(), product.clone()),
        );
    }
    Ok(FedCurvPenaltyState {
        round,
        sum_fisher,
        sum_fisher_params,
        per_client_contrib,
    })
}

/// Number of real-valued entries one update contributes to the uplink:
/// `d` for plain averaging, `3d` once the Fisher diagonal and its product
/// with the parameters ride along.
pub fn payload_entries(update: &ClientUpdate) -> usize {
    update.params.len()
        + update.fisher.as_ref().map_or(0, |f| f.values.len())
        + update.fisher_times_params.as_ref().map_or(0, Vec::len)
}
