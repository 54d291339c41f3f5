//! flushsim: a deterministic microarchitectural simulator of an in-order
//! scalar core extended with a single-instruction multiple-flush
//! (`flushx`) mechanism.
//!
//! The crate is organized around the simulated platform:
//!
//! - [`machine`]: the mini-ISA, assembler, program images, and an untimed
//!   reference interpreter used as a correctness oracle.
//! - [`uarch`]: state models and flush primitives for every on-core
//!   component inside the sphere of flushing (L1 D/I caches, TLB hierarchy,
//!   branch prediction unit).
//! - [`pipeline`]: the timed 5-stage in-order core, the `flushx` schedule
//!   and serialization control, the software-loop flush baseline, and a
//!   quantum-based context scheduler.
//! - [`channel`]: the Prime+Probe experiment and channel-strength metrics.
//! - [`overhead`]: flush-overhead estimation as a function of flush
//!   frequency, parameterized by measured per-flush costs.
//! - [`config`]: the `key = value` configuration format shared by the CLI.

pub mod channel;
pub mod config;
pub mod machine;
pub mod overhead;
pub mod pipeline;
pub mod randprog;
pub mod uarch;
