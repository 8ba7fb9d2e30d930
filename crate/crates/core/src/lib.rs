//! Core of a self-hosted batch-cluster job monitor.
//!
//! The crate is organised around the path a job request takes:
//!
//! * [`adapter`] renders scheduler command lines and parses scheduler output,
//! * [`connection`] executes those command lines over SSH, locally, or against
//!   the in-process [`sim`] cluster, and owns the encrypted key store,
//! * [`gateway`] throttles, caches and dispatches every request,
//! * [`poller`] keeps the [`store`] archive synchronized with the cluster,
//! * [`analytics`] tags archived jobs and fits resource-usage models.
//!
//! [`stack`] wires all of the above together.

pub mod adapter;
pub mod analytics;
pub mod clock;
pub mod command;
pub mod connection;
pub mod duration;
pub mod gateway;
pub mod poller;
pub mod sim;
pub mod stack;
pub mod store;

pub use adapter::{JobStatus, SchedulerAdapter, SgeAdapter, SubmitSpec};
pub use clock::{Clock, ManualClock, SystemClock};
pub use command::{CommandLine, ExecResult};
