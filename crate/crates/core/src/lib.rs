//! QoS-aware offloading of DAG services in a simulated fog environment,
//! trained with an asynchronous actor-learner PPO using V-trace correction.
//!
//! Modules follow the data flow: [`workload`] generates services, [`dag`]
//! ranks and orders their tasks, [`env`] simulates placement, [`nn`],
//! [`learner`], [`actor`] and [`train`] implement the agent, [`oracle`]
//! provides reference schedulers and [`harness`] drives experiments.

pub mod actor;
pub mod dag;
pub mod env;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod oracle;
pub mod train;
pub mod workload;

pub use actor::{evaluate, sample_action, EvalMode, EvalStats, PolicySnapshot};
pub use dag::{RankedPlan, ServiceDag};
pub use env::{FogEnv, ScenarioConfig, ServerPool};
pub use learner::{ApoHyper, Learner};
pub use oracle::{exhaustive_best, OracleConfig, OracleResult};
pub use train::{run_training, RunConfig, TrainingInputs, TrainingReport};
pub use workload::{generate_dataset, DatasetSpec};
