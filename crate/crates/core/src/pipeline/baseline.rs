//! The software-loop flush baseline: a routine that cleanses the same
//! sphere of flushing as `flushx` using the per-component instructions,
//! with explicit barriers, plus the fill-then-flush cost measurement.
//!
//! Routine structure: barrier; set/way loop over the whole D-cache;
//! barrier; BPU, TLB, and I-cache bulk invalidates; barrier. The I-cache
//! invalidate runs last so the routine's own code footprint is cleansed
//! too. Ways are walked in ascending order, which leaves every set's
//! replacement ordering at the boot state.

use crate::machine::asm::assemble;
use crate::machine::interp::RunOutcome;
use crate::machine::program::Program;
use crate::machine::AsmError;
use crate::pipeline::{Core, CoreConfig, CoreError};

/// Registers x5-x7 and x28-x31 are clobbered.
pub fn flush_routine_source(nsets: u32, assoc: u32, label_prefix: &str) -> String {
    format!(
        "\
    fence.flush
    addi x28, x0, {nsets}
    addi x29, x0, {assoc}
    addi x31, x0, 16
    addi x5, x0, 0
{p}_way:
    sll x30, x5, x31
    addi x6, x0, 0
{p}_set:
    or x7, x30, x6
    dcflush.sw x7
    addi x6, x6, 1
    blt x6, x28, {p}_set
    addi x5, x5, 1
    blt x5, x29, {p}_way
    fence.flush
    bpinv.all
    tlbinv.all
    icinv.all
    fence.flush
",
        nsets = nsets,
        assoc = assoc,
        p = label_prefix,
    )
}

/// Static dynamic-instruction count of the routine for a given geometry.
pub fn flush_routine_dynamic_count(nsets: u64, assoc: u64) -> u64 {
    // per set iteration: or, dcflush.sw, addi, blt
    // per way iteration: sll, addi, addi, blt
    // setup: fence, 4x addi; tail: fence, bpinv, tlbinv, icinv, fence
    5 + assoc * (4 + nsets * 4) + 5
}

/// A cache-line-granular fill loop that dirties `lines` consecutive lines
/// starting at `buf`. Clobbers x10-x13.
pub fn fill_loop_source(buf: u32, line_bytes: u32, lines: u32) -> String {
    format!(
        "\
    addi x10, x0, {buf}
    addi x11, x0, {line}
    addi x12, x0, {lines}
    addi x13, x0, 0
fill:
    sw x13, 0(x10)
    add x10, x10, x11
    addi x13, x13, 1
    blt x13, x12, fill
",
        buf = buf,
        line = line_bytes,
        lines = lines,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushPath {
    None,
    Flushx,
    Routine,
}

/// Build the fill-then-flush microbenchmark. The buffer covers the whole
/// data cache; cycle and instruction counters are read around the flush
/// path and the deltas left in x24 (cycles) and x25 (instructions).
pub fn flush_benchmark_program(cfg: &CoreConfig, path: FlushPath) -> Result<Program, AsmError> {
    let g = cfg.dcache;
    let buf = 0x20000u32;
    let buf_bytes = g.total_bytes();
    let pages = buf_bytes.div_ceil(crate::machine::PAGE_BYTES);
    let mut maps = String::new();
    for p in 0..pages {
        let addr = buf + p * crate::machine::PAGE_BYTES;
        maps.push_str(&format!(".map 0x{:x} 0x{:x} rw\n", addr, addr));
    }
    let flush = match path {
        FlushPath::None => String::new(),
        FlushPath::Flushx => "    flushx\n".to_string(),
        FlushPath::Routine => flush_routine_source(g.nsets, g.assoc, "fl"),
    };
    let src = format!(
        "{maps}.text 0x1000\n{fill}    csrr x20, cycle\n    csrr x21, instret\n{flush}    csrr x22, cycle\n    csrr x23, instret\n    sub x24, x22, x20\n    sub x25, x23, x21\n    halt\n",
        maps = maps,
        fill = fill_loop_source(buf, g.line_bytes, g.total_lines()),
        flush = flush,
    );
    assemble(&src)
}

#[derive(Debug, Clone, Copy)]
pub struct FlushRunStats {
    pub total_cycles: u64,
    pub total_retired: u64,
    /// program-observed cycle delta across the flush path (x24)
    pub observed_cycles: u64,
    /// program-observed retired delta across the flush path (x25)
    pub observed_instrs: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("benchmark assembly failed: {0}")]
    Asm(#[from] AsmError),
    #[error("core construction failed: {0}")]
    Core(#[from] CoreError),
    #[error("benchmark did not halt: {0:?}")]
    DidNotHalt(RunOutcome),
}

/// Run one variant of the fill-then-flush benchmark to completion.
pub fn run_flush_benchmark(
    cfg: &CoreConfig,
    path: FlushPath,
) -> Result<FlushRunStats, BaselineError> {
    let program = flush_benchmark_program(cfg, path)?;
    let mut core = Core::new(cfg.clone(), &program)?;
    let out = core.run(50_000_000);
    if out != RunOutcome::Halted {
        return Err(BaselineError::DidNotHalt(out));
    }
    Ok(FlushRunStats {
        total_cycles: core.cycle(),
        total_retired: core.retired_total(),
        observed_cycles: core.arch.regs[24] as u64,
        observed_instrs: core.arch.regs[25] as u64,
    })
}

/// Measured per-flush costs: instruction and cycle deltas of each flush
/// mechanism relative to the empty-path run of the same benchmark.
#[derive(Debug, Clone, Copy)]
pub struct FlushCosts {
    pub c_opt: u64,
    pub c_norm: u64,
    pub cyc_opt: u64,
    pub cyc_norm: u64,
    pub observed_opt: (u64, u64),
    pub observed_norm: (u64, u64),
}

pub fn measure_flush_costs(cfg: &CoreConfig) -> Result<FlushCosts, BaselineError> {
    let base = run_flush_benchmark(cfg, FlushPath::None)?;
    let opt = run_flush_benchmark(cfg, FlushPath::Flushx)?;
    let norm = run_flush_benchmark(cfg, FlushPath::Routine)?;
    Ok(FlushCosts {
        c_opt: opt.total_retired - base.total_retired,
        c_norm: norm.total_retired - base.total_retired,
        cyc_opt: opt.total_cycles - base.total_cycles,
        cyc_norm: norm.total_cycles - base.total_cycles,
        observed_opt: (opt.observed_cycles, opt.observed_instrs),
        observed_norm: (norm.observed_cycles, norm.observed_instrs),
    })
}
