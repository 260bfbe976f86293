use exitflow_core::backbone::{OracleLayeredPolicy, ToyPolicy};
use exitflow_core::numkernel::Parameterized;
use exitflow_core::synthbench::{task_oracle, SyntheticTaskSpec};

use crate::checkpoint::Checkpoint;
use crate::config::{ModelKind, ModelSection};
use crate::error::CliError;

pub enum LoadedPolicy {
    Toy(ToyPolicy),
    Oracle(OracleLayeredPolicy),
}

/// Runs `$body` with `$p` bound to the concrete policy.
macro_rules! with_policy {
    ($policy:expr, $p:ident => $body:expr) => {
        match $policy {
            $crate::policy::LoadedPolicy::Toy($p) => $body,
            $crate::policy::LoadedPolicy::Oracle($p) => $body,
        }
    };
}
pub(crate) use with_policy;

pub fn build_oracle(
    task: &SyntheticTaskSpec,
    model: &ModelSection,
) -> Result<OracleLayeredPolicy, CliError> {
    task_oracle(task, model.oracle.clone(), model.mixture_std).map_err(CliError::config_from)
}

impl LoadedPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CliError> {
        match ck.model.kind {
            ModelKind::Toy => {
                let mut policy = ToyPolicy::new(ck.model.toy.clone(), 0)
                    .map_err(|e| CliError::corrupt("checkpoint", format!("model topology: {e}")))?;
                let blocks = policy.block_lengths();
                if blocks != ck.blocks {
                    return Err(CliError::corrupt(
                        "checkpoint",
                        format!(
                            "dimension manifest has {} blocks / {} parameters, topology needs {} / {}",
                            ck.blocks.len(),
                            ck.params.len(),
                            blocks.len(),
                            policy.param_count()
                        ),
                    ));
                }
                policy
                    .load_flat(&ck.params)
                    .map_err(|e| CliError::corrupt("checkpoint", e.to_string()))?;
                Ok(Self::Toy(policy))
            }
            ModelKind::Oracle => {
                if !ck.params.is_empty() {
                    return Err(CliError::corrupt(
                        "checkpoint",
                        "oracle checkpoints carry no parameters",
                    ));
                }
                Ok(Self::Oracle(build_oracle(&ck.task, &ck.model)?))
            }
        }
    }
}
