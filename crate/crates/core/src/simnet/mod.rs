//! Discrete-event plumbing: scheduler, network model, adversary injection,
//! workload generation, and a stand-alone consensus cluster runner.

pub mod adversary;
pub mod cluster;
pub mod net;
pub mod sched;
pub mod workload;

pub use adversary::{Action, Adversary, AdversaryKeys, AdversarySpec, Behavior, Hook};
pub use cluster::{run_cluster, ClusterConfig, ClusterReport};
pub use net::{NetModel, Partition};
pub use sched::{Scheduler, SimEvent};
pub use workload::{WorkloadGen, WorkloadSpec};
