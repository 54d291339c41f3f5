//! Quantum-based round-robin scheduler hosting multiple program contexts
//! on one core. Contexts share all microarchitectural state (that sharing
//! is the timing channel) but have disjoint architectural state.
//!
//! Deployment schemes: `flush_on_switch` flushes once per context switch
//! (moderate); `flush_on_trap` flushes at every user/kernel boundary
//! crossing, i.e. on each ecall and each mret (aggressive).

use crate::machine::interp::{ArchState, ExecError};
use crate::machine::program::Program;
use crate::pipeline::{Core, CoreConfig, CoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxStatus {
    Runnable,
    Halted,
    Faulted,
}

#[derive(Debug)]
pub struct Context {
    pub id: u32,
    /// saved state while descheduled; the running context's live state is
    /// on the core and this slot holds a stale placeholder
    pub arch: ArchState,
    pub status: CtxStatus,
    pub cycles: u64,
    pub flushes: u64,
    pub fault: Option<ExecError>,
}

impl Context {
    pub fn from_program(
        id: u32,
        program: &Program,
        memory_bytes: u32,
    ) -> Result<Context, ExecError> {
        Ok(Context {
            id,
            arch: ArchState::from_program(program, memory_bytes)?,
            status: CtxStatus::Runnable,
            cycles: 0,
            flushes: 0,
            fault: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub quantum_cycles: u64,
    pub flush_on_switch: bool,
    pub flush_on_trap: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { quantum_cycles: 10_000, flush_on_switch: false, flush_on_trap: false }
    }
}

#[derive(Debug, Clone)]
pub struct ContextReport {
    pub context: u32,
    pub cycles: u64,
    pub instructions: u64,
    pub flushes: u64,
    pub status: CtxStatus,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub per_context: Vec<ContextReport>,
    pub total_cycles: u64,
    pub total_flushes: u64,
    pub switches: u64,
    pub flush_cycles: u64,
    pub retired_total: u64,
}

impl RunReport {
    /// CSV rows: `context,cycles,instructions,flushes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("context,cycles,instructions,flushes\n");
        for c in &self.per_context {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.context, c.cycles, c.instructions, c.flushes
            ));
        }
        out
    }

    pub fn context(&self, id: u32) -> &ContextReport {
        &self.per_context[id as usize]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedError {
    #[error("no runnable contexts")]
    NoContexts,
    #[error("context build failed: {0}")]
    Context(#[from] ExecError),
    #[error("core construction failed: {0}")]
    Core(#[from] CoreError),
}

/// Round-robin scheduler driving one core. Quanta are measured in core
/// cycles and checked at retirement boundaries, so a long-running
/// instruction (a flush, a miss) always completes its slice; switches
/// happen on a drained pipe.
pub struct Scheduler {
    pub core: Core,
    pub contexts: Vec<Context>,
    pub cfg: SchedulerConfig,
    current: usize,
    switches: u64,
    flush_cycles: u64,
    total_flushes: u64,
    slice_start: u64,
}

impl Scheduler {
    pub fn new(
        core_cfg: CoreConfig,
        programs: &[Program],
        cfg: SchedulerConfig,
    ) -> Result<Scheduler, SchedError> {
        if programs.is_empty() {
            return Err(SchedError::NoContexts);
        }
        assert!(cfg.quantum_cycles >= 1);
        let contexts = programs
            .iter()
            .enumerate()
            .map(|(i, p)| Context::from_program(i as u32, p, core_cfg.memory_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        let first = contexts[0].arch.clone();
        let core = Core::with_arch(core_cfg, first);
        Ok(Scheduler {
            core,
            contexts,
            cfg,
            current: 0,
            switches: 0,
            flush_cycles: 0,
            total_flushes: 0,
            slice_start: 0,
        })
    }

    fn next_runnable(&self) -> Option<usize> {
        let n = self.contexts.len();
        (1..=n)
            .map(|k| (self.current + k) % n)
            .find(|&i| i != self.current && self.contexts[i].status == CtxStatus::Runnable)
    }

    fn host_flush(&mut self, attribute_to: usize) {
        let before = self.core.cycle();
        self.core.flush_now();
        self.flush_cycles += self.core.cycle() - before;
        self.total_flushes += 1;
        self.contexts[attribute_to].flushes += 1;
    }

    /// One core step with event bookkeeping. Returns false when the current
    /// context stopped (halt or fault).
    fn step_once(&mut self) -> bool {
        let before = self.core.cycle();
        let out = self.core.step();
        self.contexts[self.current].cycles += self.core.cycle() - before;
        if let Some(err) = out.fault {
            self.contexts[self.current].fault = Some(err);
            self.contexts[self.current].status = CtxStatus::Faulted;
            return false;
        }
        if out.halted {
            self.contexts[self.current].status = CtxStatus::Halted;
            return false;
        }
        if out.trap.is_some() && self.cfg.flush_on_trap {
            // traps serialize, so the pipe is empty here
            self.host_flush(self.current);
        }
        true
    }

    /// Park the running context's live state back into its slot, flush if
    /// the scheme says so, and load `next`.
    fn switch_to(&mut self, next: usize) {
        self.core.reset_for_next_context();
        if self.cfg.flush_on_switch {
            self.host_flush(self.current);
        }
        // first swap parks the live state; second loads the next context
        self.core.swap_context(&mut self.contexts[self.current].arch);
        self.core.swap_context(&mut self.contexts[next].arch);
        self.current = next;
        self.switches += 1;
        self.slice_start = self.core.cycle();
    }

    fn drain(&mut self) {
        self.core.set_fetch_hold(true);
        while !self.core.pipe_empty()
            && self.contexts[self.current].status == CtxStatus::Runnable
        {
            if !self.step_once() {
                break;
            }
        }
        self.core.set_fetch_hold(false);
    }

    /// Run until every context halts/faults or `max_cycles` elapse.
    pub fn run(&mut self, max_cycles: u64) -> RunReport {
        self.slice_start = self.core.cycle();
        while self.core.cycle() < max_cycles {
            if self.contexts[self.current].status != CtxStatus::Runnable {
                match self.next_runnable() {
                    Some(next) => self.switch_to(next),
                    None => break,
                }
                continue;
            }
            if !self.step_once() {
                continue;
            }
            if self.core.cycle() - self.slice_start >= self.cfg.quantum_cycles {
                if let Some(next) = self.next_runnable() {
                    self.drain();
                    if self.contexts[self.current].status == CtxStatus::Runnable {
                        self.switch_to(next);
                    }
                } else {
                    self.slice_start = self.core.cycle();
                }
            }
        }

        // park the live state for uniform reporting
        self.core.reset_for_next_context();
        self.core.swap_context(&mut self.contexts[self.current].arch);
        let per_context = self
            .contexts
            .iter()
            .map(|c| ContextReport {
                context: c.id,
                cycles: c.cycles,
                instructions: c.arch.csr_instret,
                flushes: c.flushes,
                status: c.status,
            })
            .collect();
        RunReport {
            per_context,
            total_cycles: self.core.cycle(),
            total_flushes: self.total_flushes,
            switches: self.switches,
            flush_cycles: self.flush_cycles,
            retired_total: self.core.retired_total(),
        }
    }
}

/// Build contexts from programs, run them round-robin, and report.
pub fn run_scheduled(
    core_cfg: CoreConfig,
    programs: &[Program],
    sched: SchedulerConfig,
    max_cycles: u64,
) -> Result<RunReport, SchedError> {
    let mut s = Scheduler::new(core_cfg, programs, sched)?;
    Ok(s.run(max_cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::asm::assemble;

    // Contexts running with flushing disabled get disjoint virtual
    // layouts, the way the shipped attack programs do: the shared TLB and
    // caches have no address-space tags, so overlapping virtual pages with
    // different mappings are only sound when every switch flushes.
    fn counting_program(n: u32, text_va: u32) -> Program {
        assemble(&format!(
            ".text 0x{text_va:x}\n    addi x1, x0, 0\n    addi x2, x0, {n}\nloop:\n    addi x1, x1, 1\n    blt x1, x2, loop\n    halt\n",
        ))
        .unwrap()
    }

    fn toucher_program(page: u32, text_va: u32) -> Program {
        // touches 8 distinct lines in one page, then halts
        assemble(&format!(
            ".map 0x{page:x} 0x{page:x} rw\n.text 0x{text_va:x}\n    addi x1, x0, 0x{page:x}\n    addi x2, x0, 8\nloop:\n    lw x3, 0(x1)\n    addi x1, x1, 64\n    addi x2, x2, -1\n    bne x2, x0, loop\n    halt\n",
        ))
        .unwrap()
    }

    #[test]
    fn round_robin_runs_all_to_completion() {
        let progs = vec![counting_program(500, 0x1000), counting_program(300, 0x8000)];
        let report = run_scheduled(
            CoreConfig::default(),
            &progs,
            SchedulerConfig { quantum_cycles: 100, ..Default::default() },
            1_000_000,
        )
        .unwrap();
        assert!(report.per_context.iter().all(|c| c.status == CtxStatus::Halted));
        // 500 and 300 iterations of a 2-instruction loop plus setup + halt
        assert_eq!(report.per_context[0].instructions, 3 + 2 * 500);
        assert_eq!(report.per_context[1].instructions, 3 + 2 * 300);
        assert!(report.switches >= 2);
    }

    #[test]
    fn uarch_state_carries_across_switches_without_flush() {
        // two contexts touching different physical pages; with flushing
        // disabled the second context's lines survive the first's slices
        let progs = vec![toucher_program(0x40000, 0x1000), toucher_program(0x50000, 0x8000)];
        let mut s = Scheduler::new(
            CoreConfig::default(),
            &progs,
            SchedulerConfig { quantum_cycles: 200, ..Default::default() },
        )
        .unwrap();
        let report = s.run(1_000_000);
        assert!(report.per_context.iter().all(|c| c.status == CtxStatus::Halted));
        assert_eq!(report.total_flushes, 0);
        // both contexts' residual lines are still visible in the shared cache
        let resident_a = (0..8).filter(|i| s.core.dcache.peek(0x40000 + i * 64).is_some()).count();
        let resident_b = (0..8).filter(|i| s.core.dcache.peek(0x50000 + i * 64).is_some()).count();
        assert_eq!(resident_a, 8, "first context's residual state survives");
        assert_eq!(resident_b, 8, "second context's residual state survives");
    }

    #[test]
    fn flush_on_switch_flushes_once_per_switch() {
        let progs = vec![counting_program(2000, 0x1000), counting_program(2000, 0x8000)];
        let report = run_scheduled(
            CoreConfig::default(),
            &progs,
            SchedulerConfig { quantum_cycles: 500, flush_on_switch: true, flush_on_trap: false },
            10_000_000,
        )
        .unwrap();
        assert!(report.switches > 0);
        assert_eq!(report.total_flushes, report.switches);
    }

    #[test]
    fn flush_on_trap_flushes_on_both_boundaries() {
        // k ecalls, each returning via mret: 2k flushes (entry + exit)
        let k = 5;
        let src = format!(
            ".mode user\n.text 0x1000\n    addi x1, x0, 0\n    addi x2, x0, {k}\nloop:\n    ecall\n    addi x1, x1, 1\n    blt x1, x2, loop\n    halt\nhandler:\n    mret\n.trap handler\n",
        );
        let progs = vec![assemble(&src).unwrap()];
        let report = run_scheduled(
            CoreConfig::default(),
            &progs,
            SchedulerConfig { quantum_cycles: 100_000, flush_on_switch: false, flush_on_trap: true },
            10_000_000,
        )
        .unwrap();
        assert_eq!(report.per_context[0].status, CtxStatus::Halted);
        assert_eq!(report.total_flushes, 2 * k);
    }

    #[test]
    fn switch_preserves_architectural_progress() {
        // tiny quantum forces many switches; results must match a solo run
        let progs = vec![counting_program(400, 0x1000), counting_program(400, 0x8000)];
        let solo = run_scheduled(
            CoreConfig::default(),
            &progs[..1],
            SchedulerConfig { quantum_cycles: u64::MAX, ..Default::default() },
            1_000_000,
        )
        .unwrap();
        let interleaved = run_scheduled(
            CoreConfig::default(),
            &progs,
            SchedulerConfig { quantum_cycles: 50, flush_on_switch: true, flush_on_trap: false },
            10_000_000,
        )
        .unwrap();
        assert_eq!(
            solo.per_context[0].instructions,
            interleaved.per_context[0].instructions
        );
        assert_eq!(
            interleaved.per_context[0].instructions,
            interleaved.per_context[1].instructions
        );
    }
}
