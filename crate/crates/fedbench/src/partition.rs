//! Deterministic client data partitioning.
//!
//! Six schemes map a dataset plus a seed to an explicit assignment of sample
//! indices to clients: an even shuffle, a power-law quantity skew, a fixed
//! classes-per-client label skew, a Dirichlet label skew, a sort-and-shard
//! label skew, and a first-principal-component feature skew. Every scheme is
//! a pure function of `(dataset, spec)`; whenever fractional proportions
//! become integer counts we use largest-remainder rounding so totals are
//! conserved exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{apply_normalization, fit_normalization, Dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Uniform,
    QuantitySkew,
    LabelsQuantitySkew,
    DirichletLabelsSkew,
    PathologicalLabelsSkew,
    CovariateShift,
}

impl PartitionKind {
    pub const ALL: [PartitionKind; 6] = [
        PartitionKind::Uniform,
        PartitionKind::QuantitySkew,
        PartitionKind::LabelsQuantitySkew,
        PartitionKind::DirichletLabelsSkew,
        PartitionKind::PathologicalLabelsSkew,
        PartitionKind::CovariateShift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PartitionKind::Uniform => "uniform",
            PartitionKind::QuantitySkew => "quantity_skew",
            PartitionKind::LabelsQuantitySkew => "labels_quantity_skew",
            PartitionKind::DirichletLabelsSkew => "dirichlet_labels_skew",
            PartitionKind::PathologicalLabelsSkew => "pathological_labels_skew",
            PartitionKind::CovariateShift => "covariate_shift",
        }
    }
}

/// Full description of a partitioning run. Fields irrelevant to the chosen
/// `kind` keep their defaults and are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    #[serde(default = "default_shards_per_client")]
    pub shards_per_client: usize,
    pub seed: u64,
}

fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    0.5
}
fn default_classes_per_client() -> usize {
    2
}
fn default_shards_per_client() -> usize {
    2
}

impl PartitionSpec {
    pub fn new(kind: PartitionKind, num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            kind,
            num_clients,
            alpha: default_alpha(),
            beta: default_beta(),
            classes_per_client: default_classes_per_client(),
            shards_per_client: default_shards_per_client(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::InvalidSpec("num_clients must be >= 2".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidSpec("alpha must be finite and > 0".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidSpec("beta must be finite and > 0".into()));
        }
        if self.classes_per_client < 1 {
            return Err(Error::InvalidSpec("classes_per_client must be >= 1".into()));
        }
        if self.shards_per_client < 1 {
            return Err(Error::InvalidSpec("shards_per_client must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client provenance carried alongside the raw index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub sample_count: usize,
    pub label_histogram: Vec<usize>,
}

/// The output of a partitioner: one sorted index list per client.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub spec: PartitionSpec,
    pub provenance: Vec<ClientSummary>,
    /// Per-class client proportions, recorded only by the Dirichlet scheme.
    pub dirichlet_draws: Option<Vec<Vec<f64>>>,
}

impl PartitionPlan {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total_assigned(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

/// Rounds fractional quotas `total * w_i / Σw` to integers that sum to
/// `total` exactly: floor everything, then hand the leftover units to the
/// largest fractional parts (ties to the lower index).
pub fn largest_remainder_counts(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("rounding weights".into()));
    }
    let sum: f64 = weights.iter().sum();
    if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Partition(format!(
            "rounding weights must be nonnegative with a positive finite sum, got sum {sum}"
        )));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = total - assigned;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    assert!(
        leftover <= order.len(),
        "largest-remainder leftover {leftover} exceeds {} buckets",
        order.len()
    );
    for &i in order.iter().take(leftover) {
        counts[i] += 1;
    }
    Ok(counts)
}

fn finish_plan(
    mut assignments: Vec<Vec<usize>>,
    spec: PartitionSpec,
    ds: &Dataset,
    dirichlet_draws: Option<Vec<Vec<f64>>>,
) -> Result<PartitionPlan> {
    for (client, list) in assignments.iter_mut().enumerate() {
        if list.is_empty() {
            return Err(Error::Partition(format!("client {client} received no samples")));
        }
        list.sort_unstable();
    }
    let provenance = assignments
        .iter()
        .map(|list| {
            let mut hist = vec![0usize; ds.num_classes];
            for &idx in list {
                hist[ds.labels[idx]] += 1;
            }
            ClientSummary {
                sample_count: list.len(),
                label_histogram: hist,
            }
        })
        .collect();
    Ok(PartitionPlan {
        assignments,
        spec,
        provenance,
        dirichlet_draws,
    })
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at
/// most one, the first `len % parts` chunks taking the extra item.
fn contiguous_split(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut cursor = 0;
    for i in 0..parts {
        let take = base + usize::from(i < extra);
        out.push(items[cursor..cursor + take].to_vec());
        cursor += take;
    }
    out
}

fn check_min_samples(ds: &Dataset, needed: usize, what: &str) -> Result<()> {
    if ds.len() < needed {
        return Err(Error::Partition(format!(
            "{} needs at least {needed} samples, dataset has {}",
            what,
            ds.len()
        )));
    }
    Ok(())
}

/// Even split: a seeded shuffle divided into `num_clients` chunks with sizes
/// differing by at most one.
pub fn partition_uniform(ds: &Dataset, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    let spec = PartitionSpec::new(PartitionKind::Uniform, num_clients, seed);
    partition(ds, &spec)
}

/// Quantity skew: client `i` receives the power-law share
/// `((i+1)^alpha - i^alpha) / N^alpha` of a seeded shuffle. `alpha = 1`
/// reproduces the even split; larger values concentrate data on high-index
/// clients.
pub fn partition_quantity_skew(
    ds: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut spec = PartitionSpec::new(PartitionKind::QuantitySkew, num_clients, seed);
    spec.alpha = alpha;
    partition(ds, &spec)
}

/// Label-quantity skew: each client holds exactly `classes_per_client`
/// distinct labels, classes dealt round-robin over a seeded class order.
pub fn partition_labels_quantity_skew(
    ds: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut spec = PartitionSpec::new(PartitionKind::LabelsQuantitySkew, num_clients, seed);
    spec.classes_per_client = classes_per_client;
    partition(ds, &spec)
}

/// Dirichlet label skew: for each class, client proportions are drawn from a
/// symmetric Dirichlet with concentration `beta`.
pub fn partition_dirichlet(
    ds: &Dataset,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut spec = PartitionSpec::new(PartitionKind::DirichletLabelsSkew, num_clients, seed);
    spec.beta = beta;
    partition(ds, &spec)
}

/// Sort-and-shard label skew: samples sorted by label, cut into
/// `num_clients * shards_per_client` shards, shards dealt at random with
/// exactly `shards_per_client` per client.
pub fn partition_pathological(
    ds: &Dataset,
    num_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut spec = PartitionSpec::new(PartitionKind::PathologicalLabelsSkew, num_clients, seed);
    spec.shards_per_client = shards_per_client;
    partition(ds, &spec)
}

/// Feature skew: samples sorted by their first-principal-component score and
/// split into contiguous blocks, so clients differ in input distribution
/// while labels keep their natural correlation with the features.
pub fn partition_covariate_shift(
    ds: &Dataset,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let spec = PartitionSpec::new(PartitionKind::CovariateShift, num_clients, seed);
    partition(ds, &spec)
}

/// Dispatches to the scheme selected by `spec.kind` and wraps the result in
/// a validated, provenance-carrying plan.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<PartitionPlan> {
    spec.validate()?;
    ds.validate(false)?;
    let n = ds.len();
    let num_clients = spec.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draws = None;
    let assignments = match spec.kind {
        PartitionKind::Uniform => {
            check_min_samples(ds, num_clients, "uniform split")?;
            contiguous_split(&shuffled_indices(n, &mut rng), num_clients)
        }
        PartitionKind::QuantitySkew => {
            let weights: Vec<f64> = (0..num_clients)
                .map(|i| {
                    let hi = ((i + 1) as f64).powf(spec.alpha);
                    let lo = (i as f64).powf(spec.alpha);
                    (hi - lo) / (num_clients as f64).powf(spec.alpha)
                })
                .collect();
            let counts = largest_remainder_counts(&weights, n)?;
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Partition(format!(
                    "quantity skew alpha={} gives client {i} zero samples out of {n}",
                    spec.alpha
                )));
            }
            let indices = shuffled_indices(n, &mut rng);
            let mut out = Vec::with_capacity(num_clients);
            let mut cursor = 0;
            for &count in &counts {
                out.push(indices[cursor..cursor + count].to_vec());
                cursor += count;
            }
            out
        }
        PartitionKind::LabelsQuantitySkew => {
            let k = ds.num_classes;
            let c = spec.classes_per_client;
            if c > k {
                return Err(Error::Partition(format!(
                    "classes_per_client {c} exceeds the {k} classes present"
                )));
            }
            if num_clients * c < k {
                return Err(Error::Partition(format!(
                    "{num_clients} clients with {c} classes each cannot cover {k} classes"
                )));
            }
            let mut class_order: Vec<usize> = (0..k).collect();
            class_order.shuffle(&mut rng);
            // owners[class] = clients holding that class, in ascending order
            // because slots are visited client-major
            let mut owners: Vec<Vec<usize>> = vec![Vec::new(); k];
            for client in 0..num_clients {
                for slot in 0..c {
                    owners[class_order[(client * c + slot) % k]].push(client);
                }
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (idx, &label) in ds.labels.iter().enumerate() {
                by_class[label].push(idx);
            }
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
            for class in 0..k {
                by_class[class].shuffle(&mut rng);
                if owners[class].is_empty() {
                    continue; // unreachable given the coverage precondition
                }
                let even = vec![1.0; owners[class].len()];
                let counts = largest_remainder_counts(&even, by_class[class].len())?;
                let mut cursor = 0;
                for (&client, &count) in owners[class].iter().zip(&counts) {
                    out[client].extend_from_slice(&by_class[class][cursor..cursor + count]);
                    cursor += count;
                }
            }
            out
        }
        PartitionKind::DirichletLabelsSkew => {
            check_min_samples(ds, num_clients, "dirichlet split")?;
            let k = ds.num_classes;
            let gamma = Gamma::new(spec.beta, 1.0)
                .map_err(|e| Error::Partition(format!("dirichlet concentration: {e}")))?;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (idx, &label) in ds.labels.iter().enumerate() {
                by_class[label].push(idx);
            }
            let mut all_draws = Vec::with_capacity(k);
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
            for class in 0..k {
                let mut raw: Vec<f64> =
                    (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = raw.iter().sum();
                if !(sum.is_finite() && sum > 0.0) {
                    raw = vec![1.0; num_clients];
                }
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|g| g / total).collect();
                by_class[class].shuffle(&mut rng);
                let counts = largest_remainder_counts(&p, by_class[class].len())?;
                let mut cursor = 0;
                for (client, &count) in counts.iter().enumerate() {
                    out[client].extend_from_slice(&by_class[class][cursor..cursor + count]);
                    cursor += count;
                }
                all_draws.push(p);
            }
            // repair: a sharply skewed draw can leave a client with nothing;
            // take one sample from whoever currently holds the most
            loop {
                let Some(empty) = out.iter().position(Vec::is_empty) else {
                    break;
                };
                let donor = (0..num_clients)
                    .max_by_key(|&i| (out[i].len(), usize::MAX - i))
                    .unwrap();
                let moved = out[donor].pop().ok_or_else(|| {
                    Error::Partition("dirichlet repair found no donor sample".into())
                })?;
                out[empty].push(moved);
            }
            draws = Some(all_draws);
            out
        }
        PartitionKind::PathologicalLabelsSkew => {
            let spc = spec.shards_per_client;
            let num_shards = num_clients * spc;
            check_min_samples(ds, num_shards, "sort-and-shard split")?;
            let mut sorted: Vec<usize> = (0..n).collect();
            sorted.sort_by_key(|&idx| ds.labels[idx]);
            let shard_size = n / num_shards;
            let mut shards: Vec<&[usize]> = Vec::with_capacity(num_shards);
            for s in 0..num_shards {
                let start = s * shard_size;
                // the last shard absorbs the division remainder
                let end = if s + 1 == num_shards { n } else { start + shard_size };
                shards.push(&sorted[start..end]);
            }
            let mut shard_order: Vec<usize> = (0..num_shards).collect();
            shard_order.shuffle(&mut rng);
            (0..num_clients)
                .map(|client| {
                    shard_order[client * spc..(client + 1) * spc]
                        .iter()
                        .flat_map(|&s| shards[s].iter().copied())
                        .collect()
                })
                .collect()
        }
        PartitionKind::CovariateShift => {
            check_min_samples(ds, num_clients, "covariate split")?;
            let scores = pc1_scores(ds, spec.seed)?.1;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            contiguous_split(&order, num_clients)
        }
    };
    finish_plan(assignments, spec.clone(), ds, draws)
}

/// First principal component of the standardized features, found by power
/// iteration, plus every sample's score along it. The component's sign is
/// fixed by making its largest-magnitude coordinate positive.
fn pc1_scores(ds: &Dataset, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let stats = fit_normalization(ds)?;
    let standardized = apply_normalization(ds, &stats)?;
    let x = &standardized.features;
    let n = x.rows();
    let dim = x.cols();
    let any_varying = (0..dim).any(|j| {
        let first = x.get(0, j);
        (1..n).any(|s| x.get(s, j) != first)
    });
    if !any_varying {
        return Err(Error::Partition(
            "all features are constant; no principal direction exists".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.random_range(-1.0..1.0f64))
        .collect();
    normalize(&mut v);
    let mut xv = vec![0.0; n];
    for _ in 0..100 {
        // w = (XᵀX/n) v without materializing the covariance matrix
        for (s, out) in xv.iter_mut().enumerate() {
            let row = x.row(s);
            *out = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; dim];
        for (s, &xvs) in xv.iter().enumerate() {
            let row = x.row(s);
            for (wj, &xj) in w.iter_mut().zip(row) {
                *wj += xj * xvs;
            }
        }
        for wj in w.iter_mut() {
            *wj /= n as f64;
        }
        normalize(&mut w);
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if delta < 1e-9 {
            break;
        }
    }
    let pivot = (0..dim)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap();
    if v[pivot] < 0.0 {
        for c in v.iter_mut() {
            *c = -*c;
        }
    }
    let scores = (0..n)
        .map(|s| x.row(s).iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    Ok((v, scores))
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in v.iter_mut() {
            *c /= norm;
        }
    }
}

/// Shannon entropy (bits) of a count histogram.
pub fn entropy_bits(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &count in histogram {
        if count > 0 {
            let p = count as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Structural audit of a plan against its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub violations: Vec<String>,
    pub client_counts: Vec<usize>,
    pub label_entropy_bits: Vec<f64>,
    pub min_share: f64,
    pub max_share: f64,
}

impl PlanReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every plan invariant (disjoint, in-range, nonempty, sorted client
/// lists of the declared count) and summarizes the per-client shape.
/// Collects violations instead of failing on the first one.
pub fn validate_plan(plan: &PartitionPlan, ds: &Dataset) -> PlanReport {
    let mut violations = Vec::new();
    if plan.assignments.len() != plan.spec.num_clients {
        violations.push(format!(
            "plan declares {} clients but holds {} index lists",
            plan.spec.num_clients,
            plan.assignments.len()
        ));
    }
    let n = ds.len();
    let mut seen = vec![false; n];
    for (client, list) in plan.assignments.iter().enumerate() {
        if list.is_empty() {
            violations.push(format!("client {client} is empty"));
        }
        if !list.windows(2).all(|w| w[0] < w[1]) {
            violations.push(format!("client {client} indices are not strictly ascending"));
        }
        for &idx in list {
            if idx >= n {
                violations.push(format!(
                    "client {client} references index {idx} outside 0..{n}"
                ));
            } else if seen[idx] {
                violations.push(format!(
                    "index {idx} assigned to more than one client (seen again at client {client})"
                ));
            } else {
                seen[idx] = true;
            }
        }
    }
    let client_counts = plan.client_sizes();
    let label_entropy_bits = plan
        .assignments
        .iter()
        .map(|list| {
            let mut hist = vec![0usize; ds.num_classes];
            for &idx in list {
                if idx < n {
                    hist[ds.labels[idx]] += 1;
                }
            }
            entropy_bits(&hist)
        })
        .collect();
    let total: usize = client_counts.iter().sum();
    let (min_share, max_share) = if total == 0 {
        (0.0, 0.0)
    } else {
        (
            *client_counts.iter().min().unwrap() as f64 / total as f64,
            *client_counts.iter().max().unwrap() as f64 / total as f64,
        )
    };
    PlanReport {
        violations,
        client_counts,
        label_entropy_bits,
        min_share,
        max_share,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::linalg::Matrix;

    fn balanced(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
        synthetic_blobs(num_classes, per_class, dim, 0.8, seed).unwrap()
    }

    #[test]
    fn largest_remainder_conserves_total() {
        let counts = largest_remainder_counts(&[0.5, 0.3, 0.2], 7).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(counts, vec![4, 2, 1]); // fractions .5, .1, .4 → extra to 0
        let counts = largest_remainder_counts(&[1.0, 1.0, 1.0], 10).unwrap();
        assert_eq!(counts, vec![4, 3, 3]);
        assert!(largest_remainder_counts(&[], 5).is_err());
        assert!(largest_remainder_counts(&[0.0, 0.0], 5).is_err());
        assert!(largest_remainder_counts(&[-1.0, 2.0], 5).is_err());
    }

    #[test]
    fn uniform_exact_division() {
        let ds = balanced(10, 100, 4, 1);
        let plan = partition_uniform(&ds, 10, 42).unwrap();
        assert_eq!(plan.client_sizes(), vec![100; 10]);
        assert!(validate_plan(&plan, &ds).is_valid());
    }

    #[test]
    fn uniform_spreads_remainder() {
        let mut ds = balanced(10, 100, 4, 1);
        // extend to 1003 samples
        let mut rows: Vec<Vec<f64>> = (0..ds.len()).map(|s| ds.features.row(s).to_vec()).collect();
        for i in 0..3 {
            rows.push(rows[i].clone());
            ds.labels.push(ds.labels[i]);
        }
        ds.features = Matrix::from_rows(&rows).unwrap();
        let plan = partition_uniform(&ds, 10, 7).unwrap();
        let mut sizes = plan.client_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![100, 100, 100, 100, 100, 100, 100, 101, 101, 101]);
        assert_eq!(plan.total_assigned(), 1003);
    }

    #[test]
    fn uniform_label_histograms_near_global_mix() {
        // 1000 samples per client: per-class counts are hypergeometric with
        // mean 100 and σ ≈ 8.5, so a 4-point tolerance sits near 4.7σ —
        // roomy for these fixed seeds, far below any real skew scheme
        let ds = balanced(10, 500, 3, 5);
        for seed in 0..3u64 {
            let plan = partition_uniform(&ds, 5, seed).unwrap();
            for summary in &plan.provenance {
                for &cell in &summary.label_histogram {
                    let frac = cell as f64 / summary.sample_count as f64;
                    assert!(
                        (frac - 0.1).abs() <= 0.04,
                        "seed {seed}: label share {frac} strays >4pp from 10%"
                    );
                }
            }
        }
    }

    #[test]
    fn quantity_skew_alpha_one_is_even() {
        let ds = balanced(10, 100, 4, 2);
        let plan = partition_quantity_skew(&ds, 10, 1.0, 3).unwrap();
        assert_eq!(plan.client_sizes(), vec![100; 10]);
    }

    #[test]
    fn quantity_skew_alpha_two_matches_odd_number_shares() {
        // shares (2i+1)/100 of n=1000 are exact: 10, 30, ..., 190
        let ds = balanced(10, 100, 4, 2);
        let plan = partition_quantity_skew(&ds, 10, 2.0, 9).unwrap();
        let expected: Vec<usize> = (0..10).map(|i| 10 * (2 * i + 1)).collect();
        assert_eq!(plan.client_sizes(), expected);
        assert!(validate_plan(&plan, &ds).is_valid());
    }

    #[test]
    fn quantity_skew_alpha_three_last_client_share() {
        // client 3 of 4 gets (4³−3³)/4³ = 37/64 of 640 = 370 exactly
        let ds = balanced(10, 64, 4, 2);
        let plan = partition_quantity_skew(&ds, 4, 3.0, 1).unwrap();
        assert_eq!(plan.client_sizes()[3], 370);
        assert_eq!(plan.total_assigned(), 640);
    }

    #[test]
    fn quantity_skew_zero_share_rejected() {
        // alpha=5, N=10: first share is 1e-5, far below one sample of 100
        let ds = balanced(10, 10, 4, 2);
        let err = partition_quantity_skew(&ds, 10, 5.0, 1).unwrap_err();
        assert!(err.to_string().contains("zero samples"), "{err}");
    }

    #[test]
    fn labels_quantity_ten_clients_two_owners_each() {
        let ds = balanced(10, 100, 4, 3);
        let plan = partition_labels_quantity_skew(&ds, 10, 2, 11).unwrap();
        assert!(validate_plan(&plan, &ds).is_valid());
        // 20 slots over 10 classes: every class owned by exactly 2 clients
        for class in 0..10 {
            let owners = plan
                .provenance
                .iter()
                .filter(|s| s.label_histogram[class] > 0)
                .count();
            assert_eq!(owners, 2, "class {class} has {owners} owners");
        }
        for summary in &plan.provenance {
            let nonzero = summary.label_histogram.iter().filter(|&&c| c > 0).count();
            assert_eq!(nonzero, 2);
        }
    }

    #[test]
    fn labels_quantity_five_clients_single_owner_each() {
        let ds = balanced(10, 50, 4, 3);
        let plan = partition_labels_quantity_skew(&ds, 5, 2, 4).unwrap();
        for class in 0..10 {
            let owners = plan
                .provenance
                .iter()
                .filter(|s| s.label_histogram[class] > 0)
                .count();
            assert_eq!(owners, 1, "class {class} has {owners} owners");
        }
    }

    #[test]
    fn labels_quantity_nonzero_cells_for_many_seeds() {
        let ds = balanced(10, 60, 3, 8);
        for seed in 0..8u64 {
            for c in [1usize, 2, 3] {
                let plan = partition_labels_quantity_skew(&ds, 10, c, seed).unwrap();
                for (client, summary) in plan.provenance.iter().enumerate() {
                    let nonzero = summary.label_histogram.iter().filter(|&&x| x > 0).count();
                    assert_eq!(nonzero, c, "seed {seed} client {client}");
                }
            }
        }
    }

    #[test]
    fn labels_quantity_uncoverable_classes_rejected() {
        let ds = balanced(10, 20, 4, 3);
        assert!(partition_labels_quantity_skew(&ds, 4, 2, 0).is_err());
        assert!(partition_labels_quantity_skew(&ds, 10, 11, 0).is_err());
    }

    #[test]
    fn dirichlet_draws_live_on_the_simplex_and_counts_conserve() {
        let ds = balanced(10, 100, 4, 6);
        let plan = partition_dirichlet(&ds, 10, 0.5, 21).unwrap();
        assert!(validate_plan(&plan, &ds).is_valid());
        let draws = plan.dirichlet_draws.as_ref().unwrap();
        assert_eq!(draws.len(), 10);
        for p in draws {
            assert_eq!(p.len(), 10);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
        // per-class conservation
        for class in 0..10 {
            let assigned: usize = plan
                .provenance
                .iter()
                .map(|s| s.label_histogram[class])
                .sum();
            assert_eq!(assigned, 100, "class {class} lost samples");
        }
    }

    #[test]
    fn dirichlet_huge_concentration_approaches_even_shares() {
        let ds = balanced(10, 1000, 3, 6);
        let plan = partition_dirichlet(&ds, 10, 1e6, 5).unwrap();
        for summary in &plan.provenance {
            for &cell in &summary.label_histogram {
                let share = cell as f64 / 1000.0 * 10.0; // relative to 1/N
                assert!(
                    (share - 1.0).abs() <= 0.02,
                    "share {share} strays more than 2% from even"
                );
            }
        }
    }

    #[test]
    fn dirichlet_small_dataset_keeps_every_client_nonempty() {
        // sharp skew on a tiny dataset forces the empty-client repair path
        let ds = balanced(2, 6, 3, 1);
        for seed in 0..20u64 {
            let plan = partition_dirichlet(&ds, 5, 0.05, seed).unwrap();
            assert!(plan.client_sizes().iter().all(|&s| s > 0), "seed {seed}");
            assert_eq!(plan.total_assigned(), 12);
        }
    }

    #[test]
    fn pathological_exact_shards() {
        let ds = balanced(10, 200, 3, 4);
        let plan = partition_pathological(&ds, 10, 2, 13).unwrap();
        assert_eq!(plan.client_sizes(), vec![200; 10]);
        assert!(validate_plan(&plan, &ds).is_valid());
        // shard size 100 divides the 200-sample class blocks, so every shard
        // holds one label and every client at most 2·spc distinct labels
        for summary in &plan.provenance {
            let distinct = summary.label_histogram.iter().filter(|&&c| c > 0).count();
            assert!(distinct <= 4, "client holds {distinct} labels");
        }
    }

    #[test]
    fn pathological_remainder_goes_to_last_shard() {
        let ds = balanced(3, 7, 3, 4); // n=21, 8 shards of 2 with 5 left over
        let plan = partition_pathological(&ds, 4, 2, 0).unwrap();
        assert_eq!(plan.total_assigned(), 21);
        let mut sizes = plan.client_sizes();
        sizes.sort_unstable();
        // seven shards of 2 plus one shard of 7
        assert_eq!(sizes.iter().sum::<usize>(), 21);
        assert!(sizes.iter().all(|&s| s >= 4));
    }

    #[test]
    fn pathological_too_few_samples_rejected() {
        let ds = balanced(2, 2, 3, 4); // n=4 < 10 shards
        assert!(partition_pathological(&ds, 5, 2, 0).is_err());
    }

    #[test]
    fn covariate_one_dimensional_features_split_into_quartiles() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let ds = Dataset {
            features: Matrix::from_rows(&rows).unwrap(),
            labels: (0..100).map(|i| i % 2).collect(),
            num_classes: 2,
            name: "ramp".into(),
        };
        let plan = partition_covariate_shift(&ds, 4, 3).unwrap();
        let expected: Vec<Vec<usize>> = (0..4).map(|q| (q * 25..(q + 1) * 25).collect()).collect();
        assert_eq!(plan.assignments, expected);
    }

    #[test]
    fn covariate_blocks_are_score_contiguous() {
        let ds = balanced(5, 80, 6, 9);
        let plan = partition_covariate_shift(&ds, 8, 17).unwrap();
        assert!(validate_plan(&plan, &ds).is_valid());
        let (_, scores) = pc1_scores(&ds, 17).unwrap();
        for i in 0..7 {
            let hi = plan.assignments[i]
                .iter()
                .map(|&idx| scores[idx])
                .fold(f64::NEG_INFINITY, f64::max);
            let lo = plan.assignments[i + 1]
                .iter()
                .map(|&idx| scores[idx])
                .fold(f64::INFINITY, f64::min);
            assert!(hi <= lo, "client {i} max score {hi} above client {} min {lo}", i + 1);
        }
    }

    /// Classical Jacobi eigensolver for a small symmetric matrix; returns
    /// the eigenvector of the largest eigenvalue. Test-only oracle.
    fn jacobi_top_eigenvector(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..200 {
            let mut p = 0;
            let mut q = 1;
            let mut max = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    if a[i][j].abs() > max {
                        max = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if max < 1e-13 {
                break;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = if theta >= 0.0 {
                1.0 / (theta + (theta * theta + 1.0).sqrt())
            } else {
                -1.0 / (-theta + (theta * theta + 1.0).sqrt())
            };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..n {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..n {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
        let mut best = 0;
        for i in 1..n {
            if a[i][i] > a[best][best] {
                best = i;
            }
        }
        (0..n).map(|k| v[k][best]).collect()
    }

    #[test]
    fn power_iteration_agrees_with_jacobi_eigensolver() {
        let ds = balanced(4, 50, 5, 12);
        let (component, _) = pc1_scores(&ds, 0).unwrap();
        // build the covariance of the standardized features by hand
        let stats = fit_normalization(&ds).unwrap();
        let std_ds = apply_normalization(&ds, &stats).unwrap();
        let n = std_ds.len();
        let mut cov = vec![vec![0.0; 5]; 5];
        for s in 0..n {
            let row = std_ds.features.row(s);
            for i in 0..5 {
                for j in 0..5 {
                    cov[i][j] += row[i] * row[j] / n as f64;
                }
            }
        }
        let oracle = jacobi_top_eigenvector(cov);
        let dot: f64 = component.iter().zip(&oracle).map(|(a, b)| a * b).sum();
        let norm_o: f64 = oracle.iter().map(|c| c * c).sum::<f64>().sqrt();
        let cosine = (dot / norm_o).abs();
        assert!(cosine >= 0.9999, "cosine similarity {cosine}");
    }

    #[test]
    fn covariate_constant_features_rejected() {
        let ds = Dataset {
            features: Matrix::from_rows(&vec![vec![2.0, 5.0]; 10]).unwrap(),
            labels: (0..10).map(|i| i % 2).collect(),
            num_classes: 2,
            name: "flat".into(),
        };
        let err = partition_covariate_shift(&ds, 2, 0).unwrap_err();
        assert!(err.to_string().contains("constant"), "{err}");
    }

    #[test]
    fn all_kinds_produce_valid_full_coverage_plans() {
        let ds = balanced(10, 40, 4, 15);
        for kind in PartitionKind::ALL {
            for seed in 0..10u64 {
                let mut spec = PartitionSpec::new(kind, 8, seed);
                spec.alpha = 2.0;
                let plan = partition(&ds, &spec).unwrap();
                let report = validate_plan(&plan, &ds);
                assert!(
                    report.is_valid(),
                    "{} seed {seed}: {:?}",
                    kind.name(),
                    report.violations
                );
                assert_eq!(plan.total_assigned(), ds.len(), "{} seed {seed}", kind.name());
            }
        }
    }

    #[test]
    fn partitioners_are_deterministic() {
        let ds = balanced(10, 30, 4, 3);
        for kind in PartitionKind::ALL {
            let spec = PartitionSpec::new(kind, 5, 77);
            let a = partition(&ds, &spec).unwrap();
            let b = partition(&ds, &spec).unwrap();
            assert_eq!(a.assignments, b.assignments, "{}", kind.name());
        }
    }

    #[test]
    fn report_flags_broken_plans() {
        let ds = balanced(3, 10, 3, 2);
        let mut plan = partition_uniform(&ds, 3, 1).unwrap();
        assert!(validate_plan(&plan, &ds).is_valid());

        let mut dup = plan.clone();
        let stolen = dup.assignments[0][0];
        dup.assignments[1][0] = stolen;
        dup.assignments[1].sort_unstable();
        let report = validate_plan(&dup, &ds);
        assert!(report.violations.iter().any(|v| v.contains("more than one")));

        let mut empty = plan.clone();
        empty.assignments[2].clear();
        let report = validate_plan(&empty, &ds);
        assert!(report.violations.iter().any(|v| v.contains("empty")));

        let mut out_of_range = plan.clone();
        out_of_range.assignments[0][0] = 999;
        let report = validate_plan(&out_of_range, &ds);
        assert!(report.violations.iter().any(|v| v.contains("outside")));

        plan.assignments[0].reverse();
        let report = validate_plan(&plan, &ds);
        assert!(report.violations.iter().any(|v| v.contains("ascending")));
    }

    #[test]
    fn entropy_reflects_label_mixing() {
        let ds = balanced(10, 100, 4, 19);
        let uniform = partition_uniform(&ds, 10, 2).unwrap();
        let sharded = partition_pathological(&ds, 10, 2, 2).unwrap();
        let mean = |plan: &PartitionPlan| {
            let report = validate_plan(plan, &ds);
            report.label_entropy_bits.iter().sum::<f64>() / report.label_entropy_bits.len() as f64
        };
        let mixed = mean(&uniform);
        let skewed = mean(&sharded);
        assert!(mixed > 3.0, "uniform entropy {mixed} bits");
        assert!(skewed < 2.5, "sharded entropy {skewed} bits");
        assert!(mixed > skewed + 1.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn every_scheme_yields_valid_plans(
                seed in 0u64..10_000,
                clients in 2usize..12,
                kind_idx in 0usize..6,
            ) {
                let ds = synthetic_blobs(10, 50, 4, 0.8, 99).unwrap();
                let mut spec = PartitionSpec::new(PartitionKind::ALL[kind_idx], clients, seed);
                // few clients must each take more classes, or the 10
                // classes cannot all be owned by someone
                spec.classes_per_client = spec.classes_per_client.max(10usize.div_ceil(clients));
                let plan = partition(&ds, &spec).unwrap();
                let report = validate_plan(&plan, &ds);
                prop_assert!(report.is_valid(), "{:?}", report.violations);
                prop_assert_eq!(plan.total_assigned(), ds.len());
            }
        }
    }
}
