//! Deterministic simulator and protocol library for message-logging local
//! rollback.
//!
//! The crate simulates a set of virtual processes running an iterative HPC
//! kernel over MPI-like point-to-point messaging. Iterations are structured
//! as transactions (abortable until the last communication phase), sent
//! payloads are logged on the sender side with a configurable retention cap,
//! and after a fail-stop failure the world recovers with either local
//! rollback (only failed processes re-execute, survivors feed them logged
//! messages) or global rollback (everyone restarts from the last coordinated
//! checkpoint). A hybrid policy picks between the two based on how far the
//! surviving front line has advanced past the retained payload window.
//!
//! Two kernels exercise the protocol: a distributed conjugate-gradient
//! solver with row reduce-partner exchanges plus a transpose exchange per
//! matrix-vector product, and a 3D diffusion stencil with three face
//! halo-exchange phases per iteration.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod protocol;
pub mod sim;
pub mod trace;
pub mod txn;

pub use config::{FailureSpec, KernelKind, RollbackPolicy, RunConfig};
pub use error::{CheckpointError, ConfigError, ProtocolError, RunError, TxnError};
pub use harness::{run, sweep, verify, RunReport};
pub use metrics::Metrics;
pub use protocol::{FrontLine, PayloadLog, ProtocolState, RollbackMode, SendAction};
pub use sim::{RecvOutcome, SendOutcome, World};
