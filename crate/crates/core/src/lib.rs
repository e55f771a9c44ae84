//! Capsule network acceleration toolkit.
//!
//! Structured pruning, fixed-point routing and a latency model for CapsNet
//! inference on a small PE array:
//!
//! * [`pruning`]: look-ahead kernel pruning (LAKP), the magnitude kernel-pruning
//!   baseline, and propagation of dead kernels into dead channels and capsules.
//! * [`fxp`] and [`capsnet`]: 16-bit fixed-point arithmetic with polynomial
//!   `exp`/`log`/`div`/`softmax` approximations, and the dynamic routing
//!   algorithm in a reference form and a loop-reordered, approximated form.
//! * [`accel`]: an analytic cycle model of a PE-array accelerator that reports
//!   per-step routing latency and frames-per-second estimates.
//! * [`io`]: the weight container, prune-mask file, IDX dataset and run
//!   configuration formats.
//!
//! The `examples/` directory has one runnable program per capability, and the
//! `fastcaps` binary wraps the batch workflows (prune, infer, latency).

pub mod accel;
pub mod capsnet;
pub mod cli;
pub mod error;
pub mod fxp;
pub mod io;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
