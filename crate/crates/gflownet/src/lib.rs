//! GFlowNet samplers over deterministic DAG environments.
//!
//! The crate trains a forward policy so that terminal states are sampled with
//! probability proportional to a reward `R(x)`. Training runs entropy-regularized
//! Q-learning (SoftDQN) whose softmax policy is the forward policy; a
//! maximum-entropy tree search (MENTS) can sharpen both the training targets and
//! inference-time sampling. Small environments come with an exact
//! dynamic-programming flow oracle used for verification and metrics.

pub mod config;
pub mod env;
pub mod ments;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod oracle;
pub mod replay;
pub mod run;
pub mod softdqn;
pub mod subtb;

#[cfg(test)]
pub(crate) mod testutil;
