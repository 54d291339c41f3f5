//! State models and flush primitives for every sphere-of-flushing
//! component: L1 D-cache, L1 I-cache, the TLB hierarchy, and the branch
//! prediction unit. Each operation reports its latency and any write-back
//! traffic.

pub mod bpu;
pub mod cache;
pub mod tlb;

pub use bpu::{BpuConfig, BranchKind, Bpu, Prediction, WEAKLY_NOT_TAKEN};
pub use cache::{
    AccessKind, AccessResult, CacheArray, CacheGeometry, CacheLine, FlushReport, Writeback,
};
pub use tlb::{TlbConfig, TlbEntry, TlbHierarchy, TlbLevel, Translation};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum UarchError {
    #[error("{field} must be a nonzero power of two, got {value}")]
    NotPowerOfTwo { field: &'static str, value: u32 },
    #[error("cache lines must be at least 8 bytes, got {line_bytes}")]
    LineTooSmall { line_bytes: u32 },
    #[error("miss penalty below hit latency")]
    MissBelowHit,
    #[error("invalid branch predictor configuration")]
    BadBpuConfig,
}
