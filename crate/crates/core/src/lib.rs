//! Two-stage overlap-aware speaker diarization.
//!
//! Stage one ([`eend_ola`]) is an end-to-end diarization network whose output
//! is a single power-set class per frame ([`pse`]). Stage two ([`soap`])
//! refines that result from speaker profiles extracted on non-overlapped
//! frames; [`pipeline`] ties both together with training loops, checkpoints
//! and the command-line tool. [`simulator`] produces synthetic conversations
//! and [`metrics`] scores them.

pub mod activity;
pub mod alignment;
pub mod checkpoint;
pub mod eend_ola;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pse;
pub mod simulator;
pub mod soap;

pub use activity::{ActivityMatrix, ActivityVector};
pub use error::{Error, Result};
