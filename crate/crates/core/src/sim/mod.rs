//! Retry dynamics: a discrete-event service simulation and the
//! restartable-sequence Monte Carlo.

pub mod retry;
pub mod rseq;

pub use retry::{simulate_retry_storm, Bucket, PolicyKind, RetryPolicy, RetryReport, ServiceModel};
pub use rseq::{simulate_rseq, RseqModel, RseqReport};
