//! On-disk partition plans: who holds which sample, with enough provenance
//! to audit the split without re-running the partitioner.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use fedbench::partition::{PartitionPlan, PartitionSpec};

use crate::Failure;

/// The JSON form of a [`PartitionPlan`]. Client indices are ascending, the
/// histogram keys are class ids (classes the client actually holds), and
/// serialization is deterministic, so fixed inputs give a byte-identical
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub spec: PartitionSpec,
    pub seed: u64,
    pub clients: Vec<PlanClient>,
    /// Per-class client proportions, present only for the Dirichlet scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_draws: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanClient {
    pub id: usize,
    pub indices: Vec<usize>,
    pub label_histogram: BTreeMap<usize, usize>,
}

impl PlanFile {
    pub fn from_plan(plan: &PartitionPlan) -> Self {
        let clients = plan
            .assignments
            .iter()
            .zip(&plan.provenance)
            .enumerate()
            .map(|(id, (indices, summary))| PlanClient {
                id,
                indices: indices.clone(),
                label_histogram: summary
                    .label_histogram
                    .iter()
                    .enumerate()
                    .filter(|&(_, &count)| count > 0)
                    .map(|(label, &count)| (label, count))
                    .collect(),
            })
            .collect();
        PlanFile {
            spec: plan.spec.clone(),
            seed: plan.spec.seed,
            clients,
            dirichlet_draws: plan.dirichlet_draws.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serialization cannot fail");
        text.push('\n');
        text
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, Failure> {
        serde_json::from_slice(bytes).map_err(|e| Failure::Config(format!("plan parse: {e}")))
    }
}
