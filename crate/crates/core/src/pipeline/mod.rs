//! The timed 5-stage in-order core: fetch/decode/execute/memory/write-back
//! with forwarding, branch prediction, and the single-instruction flush
//! schedule.
//!
//! Timing conventions:
//!
//! - A stage occupies `access latency - hit latency + 1` cycles for a cache
//!   access (so a hit sustains one instruction per cycle and a miss holds
//!   the stage for the extra penalty), plus any TLB extra cycles.
//! - `csrr` samples its counter when it enters the memory stage. With the
//!   2-cycle hit latency this makes the cycle delta measured by a
//!   `csrr; lw; csrr` triplet equal the access latency of the load exactly.
//! - Serializing instructions (`flushx`, the bulk invalidates, barriers,
//!   traps, halt) wait in decode until every older instruction has retired
//!   and suppress younger fetch until the cycle after their own write-back.
//! - A mispredicted branch resolves at execute and squashes the two younger
//!   fetch slots.
//!
//! `flushx` runs the D-cache flush during its memory stage, one cycle per
//! line plus the write-back cost per dirty line, and applies every other
//! flushing operation in its single write-back cycle.

pub mod baseline;
pub mod sched;

#[cfg(test)]
mod tests;

use crate::machine::interp::{
    AccessType, ArchState, ExecError, RefConfig, DEFAULT_MEMORY_BYTES,
};
use crate::machine::isa::{Instruction, Opcode, CSR_CYCLE, CSR_INSTRET, INST_BYTES};
use crate::machine::program::{Mode, Program};
use crate::machine::{unpack_set_way, MachineError};
use crate::uarch::bpu::{BpuConfig, BranchKind, Bpu, Prediction};
use crate::uarch::cache::{AccessKind, CacheArray, CacheGeometry, Writeback};
use crate::uarch::tlb::{TlbConfig, TlbHierarchy};

#[derive(Debug, Clone, PartialEq)]
pub struct CoreConfig {
    pub dcache: CacheGeometry,
    pub icache: CacheGeometry,
    pub tlb: TlbConfig,
    pub bpu: BpuConfig,
    pub memory_bytes: u32,
    pub rf_flush_enabled: bool,
    pub trace_enabled: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            dcache: CacheGeometry::default_l1(),
            icache: CacheGeometry::default_l1(),
            tlb: TlbConfig::default_two_level(),
            bpu: BpuConfig::default_two_level(),
            memory_bytes: DEFAULT_MEMORY_BYTES,
            rf_flush_enabled: false,
            trace_enabled: false,
        }
    }
}

impl CoreConfig {
    pub fn ref_config(&self) -> RefConfig {
        RefConfig {
            rf_flush_enabled: self.rf_flush_enabled,
            nsets: self.dcache.nsets,
            assoc: self.dcache.assoc,
        }
    }
}

/// Per-component flushing operations and their stage assignment. The
/// D-cache flush must complete strictly before any write-back-stage
/// operation begins: the I-cache refill path may hit lines whose newest
/// version sits in the D-cache, and the D-cache flush itself may need the
/// D-TLB. Everything else is scheduled as late as possible, in the single
/// write-back cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushOp {
    L1DCache,
    L1ICache,
    ITlb,
    DTlb,
    L2Tlb,
    Btb,
    Bht,
    Ras,
    RegFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushStage {
    Me,
    Wb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushSchedule {
    assignments: Vec<(FlushOp, FlushStage)>,
}

impl FlushSchedule {
    /// As-late-as-possible schedule honoring the dependency constraints.
    pub fn alap(rf_flush_enabled: bool) -> FlushSchedule {
        let mut assignments = vec![
            (FlushOp::L1DCache, FlushStage::Me),
            (FlushOp::L1ICache, FlushStage::Wb),
            (FlushOp::ITlb, FlushStage::Wb),
            (FlushOp::DTlb, FlushStage::Wb),
            (FlushOp::L2Tlb, FlushStage::Wb),
            (FlushOp::Btb, FlushStage::Wb),
            (FlushOp::Bht, FlushStage::Wb),
            (FlushOp::Ras, FlushStage::Wb),
        ];
        if rf_flush_enabled {
            assignments.push((FlushOp::RegFile, FlushStage::Wb));
        }
        let s = FlushSchedule { assignments };
        s.validate().expect("alap schedule is valid by construction");
        s
    }

    /// The D-cache flush must be assigned a strictly earlier stage than
    /// every other operation.
    pub fn validate(&self) -> Result<(), &'static str> {
        let dc = self
            .assignments
            .iter()
            .find(|(op, _)| *op == FlushOp::L1DCache)
            .ok_or("schedule is missing the D-cache flush")?;
        if dc.1 != FlushStage::Me {
            return Err("D-cache flush must run in the memory stage");
        }
        for (op, stage) in &self.assignments {
            if *op != FlushOp::L1DCache && *stage != FlushStage::Wb {
                return Err("all non-D-cache operations must run at write-back");
            }
        }
        Ok(())
    }

    pub fn stage_of(&self, op: FlushOp) -> Option<FlushStage> {
        self.assignments.iter().find(|(o, _)| *o == op).map(|(_, s)| *s)
    }

    pub fn wb_ops(&self) -> impl Iterator<Item = FlushOp> + '_ {
        self.assignments
            .iter()
            .filter(|(_, s)| *s == FlushStage::Wb)
            .map(|(o, _)| *o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    If,
    Id,
    Ex,
    Me,
    Wb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageEvent {
    pub seq: u64,
    pub pc: u32,
    pub opcode: Opcode,
    pub stage: Stage,
    pub cycle: u64,
}

/// One instruction in flight.
#[derive(Debug, Clone)]
struct Slot {
    seq: u64,
    pc: u32,
    inst: Instruction,
    pred: Prediction,
    /// set once the slot's first memory-stage cycle has happened
    me_entered: bool,
    alu: u32,
    mem_va: u32,
    result: u32,
    next_pc: u32,
    fault: Option<ExecError>,
    is_flushx: bool,
}

impl Slot {
    fn poisoned(seq: u64, pc: u32, fault: ExecError) -> Slot {
        Slot {
            seq,
            pc,
            inst: Instruction::new(Opcode::Halt, 0, 0, 0, 0),
            pred: Prediction::not_taken(pc),
            me_entered: false,
            alu: 0,
            mem_va: 0,
            result: 0,
            next_pc: pc.wrapping_add(INST_BYTES),
            fault: Some(fault),
            is_flushx: false,
        }
    }

    fn serializing(&self) -> bool {
        self.fault.is_none() && self.inst.opcode.serializing()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapKind {
    Ecall,
    Mret,
}

#[derive(Debug, Clone, Copy)]
pub struct RetiredInst {
    pub seq: u64,
    pub pc: u32,
    pub opcode: Opcode,
}

#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub cycle: u64,
    pub retired: Option<RetiredInst>,
    pub trap: Option<TrapKind>,
    pub halted: bool,
    pub fault: Option<ExecError>,
}

/// Why each cycle retired nothing. The buckets partition all non-retiring
/// cycles, so `cycle count == ledger total` holds exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleLedger {
    pub retired: u64,
    pub flush_me: u64,
    pub mem_busy: u64,
    pub load_use: u64,
    pub drain: u64,
    pub fetch_wait: u64,
    pub serialize_block: u64,
    pub squash: u64,
    pub startup: u64,
    pub host_flush: u64,
    pub unknown: u64,
}

impl CycleLedger {
    pub fn total(&self) -> u64 {
        self.retired
            + self.flush_me
            + self.mem_busy
            + self.load_use
            + self.drain
            + self.fetch_wait
            + self.serialize_block
            + self.squash
            + self.startup
            + self.host_flush
            + self.unknown
    }
}

/// Summary of the most recent `flushx` (pipeline-executed or host-driven).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushxSummary {
    pub me_cycles: u64,
    pub wb_cycles: u64,
    pub dirty_lines: u32,
    pub writebacks: u32,
}

/// Flush-schedule progress, exposed for traces and debugging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlushProgress {
    pub active: bool,
    pub lines_remaining: u32,
    pub phase: FlushPhase,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FlushPhase {
    #[default]
    Idle,
    Drain,
    DcacheMe,
    RestWb,
}

struct FetchInFlight {
    remaining: u64,
    slot: Slot,
}

pub struct Core {
    pub cfg: CoreConfig,
    pub arch: ArchState,
    pub dcache: CacheArray,
    pub icache: CacheArray,
    pub tlbs: TlbHierarchy,
    pub bpu: Bpu,
    pub schedule: FlushSchedule,

    fetch_pc: u32,
    next_seq: u64,
    if_busy: Option<FetchInFlight>,
    if_id: Option<Slot>,
    id_ex: Option<Slot>,
    ex_me: Option<Slot>,
    me_cycles_left: u64,
    me_wb: Option<Slot>,
    /// host-side hold on fetch, used to drain the pipe at context switches
    fetch_hold: bool,
    suppress_fetch_cycle: u64,

    pub flush_progress: FlushProgress,
    flush_line_costs: std::collections::VecDeque<u64>,

    cycle: u64,
    retired_total: u64,
    halted: bool,
    fault: Option<ExecError>,
    pub ledger: CycleLedger,
    pub squashed_fetches: u64,
    pub mispredicts: u64,
    pub last_flushx: Option<FlushxSummary>,

    pub stage_events: Vec<StageEvent>,
    pub trace_lines: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("program rejected: {0}")]
    BadProgram(#[from] MachineError),
    #[error("initial state rejected: {0}")]
    BadInit(#[from] ExecError),
}

impl Core {
    pub fn new(cfg: CoreConfig, program: &Program) -> Result<Core, CoreError> {
        program.validate()?;
        let arch = ArchState::from_program(program, cfg.memory_bytes)?;
        Ok(Core::with_arch(cfg, arch))
    }

    pub fn with_arch(cfg: CoreConfig, arch: ArchState) -> Core {
        let schedule = FlushSchedule::alap(cfg.rf_flush_enabled);
        let fetch_pc = arch.pc;
        Core {
            dcache: CacheArray::new(cfg.dcache),
            icache: CacheArray::new(cfg.icache),
            tlbs: TlbHierarchy::new(cfg.tlb),
            bpu: Bpu::new(cfg.bpu),
            schedule,
            arch,
            cfg,
            fetch_pc,
            next_seq: 0,
            if_busy: None,
            if_id: None,
            id_ex: None,
            ex_me: None,
            me_cycles_left: 0,
            me_wb: None,
            fetch_hold: false,
            suppress_fetch_cycle: u64::MAX,
            flush_progress: FlushProgress::default(),
            flush_line_costs: std::collections::VecDeque::new(),
            cycle: 0,
            retired_total: 0,
            halted: false,
            fault: None,
            ledger: CycleLedger::default(),
            squashed_fetches: 0,
            mispredicts: 0,
            last_flushx: None,
            stage_events: Vec::new(),
            trace_lines: Vec::new(),
        }
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn retired_total(&self) -> u64 {
        self.retired_total
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn fault(&self) -> Option<&ExecError> {
        self.fault.as_ref()
    }

    pub fn pipe_empty(&self) -> bool {
        self.if_busy.is_none()
            && self.if_id.is_none()
            && self.id_ex.is_none()
            && self.ex_me.is_none()
            && self.me_wb.is_none()
    }

    /// Hold or release instruction fetch (used by the scheduler to drain
    /// the pipe before a context switch).
    pub fn set_fetch_hold(&mut self, hold: bool) {
        self.fetch_hold = hold;
    }

    /// Swap the active architectural state for another context's. The pipe
    /// must be drained first.
    pub fn swap_context(&mut self, other: &mut ArchState) {
        assert!(self.pipe_empty(), "context switch with instructions in flight");
        std::mem::swap(&mut self.arch, other);
        self.arch.csr_cycle = self.cycle;
        self.fetch_pc = self.arch.pc;
    }

    /// Discard whatever is in flight and clear halt/fault so another
    /// context can be loaded. Counters and microarchitectural state keep
    /// their values.
    pub fn reset_for_next_context(&mut self) {
        self.if_busy = None;
        self.if_id = None;
        self.id_ex = None;
        self.ex_me = None;
        self.me_wb = None;
        self.me_cycles_left = 0;
        self.halted = false;
        self.fault = None;
        self.fetch_hold = false;
        self.suppress_fetch_cycle = u64::MAX;
        self.flush_progress = FlushProgress::default();
        self.flush_line_costs.clear();
    }

    fn serializer_in_flight(&self) -> bool {
        let check = |s: &Option<Slot>| s.as_ref().is_some_and(|x| x.serializing());
        check(&self.if_id) || check(&self.id_ex) || check(&self.ex_me) || check(&self.me_wb)
    }

    fn record_stage(&mut self, slot: &Slot, stage: Stage, cycle: u64) {
        if self.cfg.trace_enabled {
            self.stage_events.push(StageEvent {
                seq: slot.seq,
                pc: slot.pc,
                opcode: slot.inst.opcode,
                stage,
                cycle,
            });
        }
    }

    /// Advance the core by one cycle.
    pub fn step(&mut self) -> CycleOutcome {
        assert!(!self.halted && self.fault.is_none(), "stepping a stopped core");
        let now = self.cycle;
        let fetch_blocked_snapshot = self.serializer_in_flight();
        let startup_empty = self.pipe_empty();

        let mut outcome = CycleOutcome {
            cycle: now,
            retired: None,
            trap: None,
            halted: false,
            fault: None,
        };
        let mut id_stall_cause: Option<&'static str> = None;

        // ---- write-back ----
        if let Some(slot) = self.me_wb.take() {
            self.record_stage(&slot, Stage::Wb, now);
            if let Some(err) = slot.fault.clone() {
                self.fault = Some(err.clone());
                outcome.fault = Some(err);
                self.cycle += 1;
                return outcome;
            }
            self.retire(&slot, &mut outcome);
        }

        // ---- memory ----
        let mut me_extension = false;
        if self.ex_me.is_some() {
            let entered = self.ex_me.as_ref().unwrap().me_entered;
            if !entered {
                // first memory-stage cycle: perform the access
                let mut s = self.ex_me.take().unwrap();
                s.me_entered = true;
                self.record_stage(&s, Stage::Me, now);
                self.me_cycles_left = self.memory_stage_entry(&mut s, now);
                self.ex_me = Some(s);
            } else {
                me_extension = true;
            }
            self.me_cycles_left -= 1;
            if self.flush_progress.active && self.flush_progress.phase == FlushPhase::DcacheMe {
                if let Some(front) = self.flush_line_costs.front_mut() {
                    *front -= 1;
                    if *front == 0 {
                        self.flush_line_costs.pop_front();
                        self.flush_progress.lines_remaining = self.flush_line_costs.len() as u32;
                    }
                }
            }
            if self.me_cycles_left == 0 {
                let slot = self.ex_me.take().unwrap();
                if slot.is_flushx {
                    self.flush_progress.phase = FlushPhase::RestWb;
                }
                debug_assert!(self.me_wb.is_none());
                self.me_wb = Some(slot);
            }
        }

        // ---- execute ----
        if self.ex_me.is_none() {
            if let Some(slot) = self.id_ex.take() {
                let mut s = slot;
                self.record_stage(&s, Stage::Ex, now);
                self.execute_stage(&mut s, now);
                self.ex_me = Some(s);
            }
        }

        // ---- decode ----
        if let Some(slot) = &self.if_id {
            let mut movable = self.id_ex.is_none();
            if movable && slot.serializing() {
                // drain: every older instruction must have retired
                let drained =
                    self.id_ex.is_none() && self.ex_me.is_none() && self.me_wb.is_none();
                if !drained {
                    movable = false;
                    id_stall_cause = Some("drain");
                    if slot.inst.opcode == Opcode::Flushx {
                        self.flush_progress = FlushProgress {
                            active: true,
                            lines_remaining: 0,
                            phase: FlushPhase::Drain,
                        };
                    }
                }
            }
            if movable && self.load_use_hazard(slot) {
                movable = false;
                id_stall_cause = Some("load_use");
            }
            if movable {
                let s = self.if_id.take().unwrap();
                self.record_stage(&s, Stage::Id, now);
                self.id_ex = Some(s);
            }
        }

        // ---- fetch ----
        let mut fetch_state = "idle";
        if self.if_busy.is_some() {
            fetch_state = "wait";
            self.deliver_if_ready();
        } else if self.fetch_hold {
            fetch_state = "hold";
        } else if fetch_blocked_snapshot {
            fetch_state = "blocked";
        } else if self.suppress_fetch_cycle == now {
            fetch_state = "squashed";
        } else if self.if_id.is_none() {
            self.start_fetch(now);
            fetch_state = "start";
        }

        // ---- ledger ----
        if outcome.retired.is_some() {
            self.ledger.retired += 1;
        } else {
            let flushx_in_me = self
                .ex_me
                .as_ref()
                .is_some_and(|s| s.is_flushx && s.me_entered);
            if flushx_in_me {
                self.ledger.flush_me += 1;
            } else if me_extension {
                self.ledger.mem_busy += 1;
            } else if id_stall_cause == Some("load_use") {
                self.ledger.load_use += 1;
            } else if id_stall_cause == Some("drain") {
                self.ledger.drain += 1;
            } else if fetch_state == "wait" {
                self.ledger.fetch_wait += 1;
            } else if fetch_state == "blocked" || fetch_state == "hold" {
                self.ledger.serialize_block += 1;
            } else if fetch_state == "squashed" {
                self.ledger.squash += 1;
            } else if startup_empty || fetch_state == "start" || fetch_state == "idle" {
                self.ledger.startup += 1;
            } else {
                self.ledger.unknown += 1;
            }
        }

        if self.cfg.trace_enabled {
            self.emit_trace_line(now, fetch_state);
        }

        self.cycle += 1;
        self.arch.csr_cycle = self.cycle;
        outcome.halted = self.halted;
        outcome
    }

    /// Run until halt, fault, or the cycle limit.
    pub fn run(&mut self, max_cycles: u64) -> crate::machine::interp::RunOutcome {
        use crate::machine::interp::RunOutcome;
        loop {
            if self.halted {
                return RunOutcome::Halted;
            }
            if let Some(e) = &self.fault {
                return RunOutcome::Fault(e.clone());
            }
            if self.cycle >= max_cycles {
                return RunOutcome::CycleLimit;
            }
            self.step();
        }
    }

    fn retire(&mut self, slot: &Slot, outcome: &mut CycleOutcome) {
        let inst = &slot.inst;
        self.arch.csr_instret += 1;
        self.retired_total += 1;
        if let Some(rd) = inst.writes_reg() {
            self.arch.write_reg(rd, slot.result);
        }
        self.arch.pc = slot.next_pc;
        match inst.opcode {
            Opcode::Flushx => {
                for op in self.schedule.wb_ops().collect::<Vec<_>>() {
                    self.apply_wb_flush_op(op);
                }
                if let Some(sum) = &mut self.last_flushx {
                    sum.wb_cycles = 1;
                }
                self.flush_progress = FlushProgress::default();
                self.fetch_pc = slot.pc.wrapping_add(INST_BYTES);
            }
            Opcode::IcinvAll => {
                self.icache.invalidate_all();
                self.fetch_pc = slot.next_pc;
            }
            Opcode::TlbinvAll => {
                self.tlbs.flush_all();
                self.fetch_pc = slot.next_pc;
            }
            Opcode::BpinvAll => {
                self.bpu.flush();
                self.fetch_pc = slot.next_pc;
            }
            Opcode::FenceFlush => {
                self.fetch_pc = slot.next_pc;
            }
            Opcode::Ecall => {
                // trap vector presence was checked at execute
                self.arch.mepc = slot.pc.wrapping_add(INST_BYTES);
                self.arch.mode = Mode::Machine;
                self.arch.pc = slot.next_pc;
                self.fetch_pc = slot.next_pc;
                outcome.trap = Some(TrapKind::Ecall);
            }
            Opcode::Mret => {
                self.arch.mode = Mode::User;
                self.arch.pc = self.arch.mepc;
                self.fetch_pc = self.arch.mepc;
                outcome.trap = Some(TrapKind::Mret);
            }
            Opcode::Halt => {
                self.halted = true;
            }
            _ => {}
        }
        outcome.retired = Some(RetiredInst { seq: slot.seq, pc: slot.pc, opcode: inst.opcode });
    }

    fn apply_wb_flush_op(&mut self, op: FlushOp) {
        match op {
            FlushOp::L1ICache => {
                self.icache.invalidate_all();
            }
            // one hierarchy reset covers the three TLB entries in the
            // schedule; repeating it is idempotent
            FlushOp::ITlb | FlushOp::DTlb | FlushOp::L2Tlb => self.tlbs.flush_all(),
            FlushOp::Btb | FlushOp::Bht | FlushOp::Ras => self.bpu.flush(),
            FlushOp::RegFile => {
                for r in 1..32 {
                    self.arch.regs[r] = 0;
                }
            }
            FlushOp::L1DCache => unreachable!("validated to run at the memory stage"),
        }
    }

    /// Value of a register as seen by an instruction entering execute or
    /// memory: the write-back latch forwards, otherwise the register file
    /// is current (older retirements were applied earlier this cycle).
    fn reg_value(&self, r: u8) -> u32 {
        if r == 0 {
            return 0;
        }
        if let Some(wb) = &self.me_wb {
            if wb.fault.is_none() && wb.inst.writes_reg() == Some(r) {
                return wb.result;
            }
        }
        self.arch.read_reg(r)
    }

    fn load_use_hazard(&self, consumer: &Slot) -> bool {
        if consumer.fault.is_some() {
            return false;
        }
        let Some(producer) = &self.ex_me else {
            return false;
        };
        if producer.fault.is_some() {
            return false;
        }
        // loads and csrr produce their value in the memory stage
        let produces_at_me =
            producer.inst.opcode.is_load() || producer.inst.opcode == Opcode::Csrr;
        if !produces_at_me {
            return false;
        }
        let Some(rd) = producer.inst.writes_reg() else {
            return false;
        };
        let (a, b) = consumer.inst.uses_at_ex();
        a == Some(rd) || b == Some(rd)
    }

    fn execute_stage(&mut self, slot: &mut Slot, now: u64) {
        if slot.fault.is_some() {
            return;
        }
        let inst = slot.inst;
        let pc = slot.pc;
        slot.next_pc = pc.wrapping_add(INST_BYTES);
        if inst.opcode.privileged() && self.arch.mode == Mode::User {
            slot.fault = Some(ExecError::IllegalInUserMode {
                mnemonic: inst.opcode.mnemonic(),
                pc,
            });
            return;
        }
        let rs1 = self.reg_value(inst.rs1);
        let rs2 = self.reg_value(inst.rs2);
        use Opcode::*;
        match inst.opcode {
            Add => slot.result = rs1.wrapping_add(rs2),
            Sub => slot.result = rs1.wrapping_sub(rs2),
            And => slot.result = rs1 & rs2,
            Or => slot.result = rs1 | rs2,
            Xor => slot.result = rs1 ^ rs2,
            Sll => slot.result = rs1.wrapping_shl(rs2 & 31),
            Srl => slot.result = rs1.wrapping_shr(rs2 & 31),
            Slt => slot.result = ((rs1 as i32) < (rs2 as i32)) as u32,
            Addi => slot.result = rs1.wrapping_add(inst.imm as u32),
            Lui => slot.result = (inst.imm as u32).wrapping_shl(12),
            Lw | Lb | Sw | Sb => {
                let va = rs1.wrapping_add(inst.imm as u32);
                slot.mem_va = va;
                if matches!(inst.opcode, Lw | Sw) && va % 4 != 0 {
                    slot.fault = Some(ExecError::Misaligned {
                        vaddr: va,
                        kind: if inst.opcode.is_load() {
                            crate::machine::interp::AccessTypeTag::Load
                        } else {
                            crate::machine::interp::AccessTypeTag::Store
                        },
                        pc,
                    });
                }
            }
            Beq | Bne | Blt | Bge => {
                let taken = match inst.opcode {
                    Beq => rs1 == rs2,
                    Bne => rs1 != rs2,
                    Blt => (rs1 as i32) < (rs2 as i32),
                    _ => (rs1 as i32) >= (rs2 as i32),
                };
                let target = pc.wrapping_add(inst.imm as u32);
                if taken {
                    slot.next_pc = target;
                }
                self.bpu.update(pc, BranchKind::Conditional, taken, target);
                self.resolve_control(slot, now);
            }
            Jal => {
                slot.result = pc.wrapping_add(INST_BYTES);
                slot.next_pc = pc.wrapping_add(inst.imm as u32);
                let kind = if inst.rd == 1 { BranchKind::Call } else { BranchKind::Jump };
                self.bpu.update(pc, kind, true, slot.next_pc);
                self.resolve_control(slot, now);
            }
            Jalr => {
                slot.result = pc.wrapping_add(INST_BYTES);
                slot.next_pc = rs1.wrapping_add(inst.imm as u32);
                let kind = if inst.rd == 1 {
                    BranchKind::Call
                } else if inst.rd == 0 && inst.rs1 == 1 {
                    BranchKind::Return
                } else {
                    BranchKind::Jump
                };
                self.bpu.update(pc, kind, true, slot.next_pc);
                self.resolve_control(slot, now);
            }
            DcflushSw => {
                let (set, way) = unpack_set_way(rs1);
                if set >= self.cfg.dcache.nsets || way >= self.cfg.dcache.assoc {
                    slot.fault = Some(ExecError::BadFlushSelector { pc, set, way });
                } else {
                    slot.alu = rs1;
                }
            }
            Csrr => {
                if inst.imm != CSR_CYCLE && inst.imm != CSR_INSTRET {
                    slot.fault = Some(ExecError::Undecodable {
                        pc,
                        source: MachineError::BadCsr { selector: inst.imm },
                    });
                }
                // value sampled at the memory stage
            }
            Ecall => {
                if self.arch.trap_vector.is_none() {
                    slot.fault = Some(ExecError::NoTrapVector { pc });
                } else {
                    slot.next_pc = self.arch.trap_vector.unwrap();
                }
                slot.is_flushx = false;
            }
            Mret | Halt | IcinvAll | TlbinvAll | BpinvAll | FenceFlush => {
                // nothing to compute; effects apply at write-back
            }
            Flushx => {
                slot.is_flushx = true;
            }
        }
        // a non-control instruction predicted taken via a stale BTB alias
        // must squash back to the fall-through path
        if slot.pred.taken && !matches!(inst.opcode, Beq | Bne | Blt | Bge | Jal | Jalr) {
            self.bpu.update(pc, BranchKind::Jump, false, slot.next_pc);
            self.resolve_control(slot, now);
        }
    }

    fn resolve_control(&mut self, slot: &Slot, now: u64) {
        let actual_taken = slot.next_pc != slot.pc.wrapping_add(INST_BYTES);
        let mispredicted = slot.pred.taken != actual_taken
            || (actual_taken && slot.pred.target != slot.next_pc);
        if !mispredicted {
            return;
        }
        self.mispredicts += 1;
        // squash the two younger fetch slots and redirect
        if self.if_id.take().is_some() {
            self.squashed_fetches += 1;
        }
        if self.if_busy.take().is_some() {
            self.squashed_fetches += 1;
        }
        // the fetch that would have started this cycle dies with them
        self.squashed_fetches += 1;
        self.suppress_fetch_cycle = now;
        self.fetch_pc = slot.next_pc;
    }

    /// First memory-stage cycle: perform cache/TLB work and return the
    /// total number of cycles the slot occupies the stage.
    fn memory_stage_entry(&mut self, slot: &mut Slot, now: u64) -> u64 {
        if slot.fault.is_some() {
            return 1;
        }
        let inst = slot.inst;
        use Opcode::*;
        match inst.opcode {
            Lw | Lb | Sw | Sb => {
                let kind =
                    if inst.opcode.is_load() { AccessType::Load } else { AccessType::Store };
                let va = slot.mem_va;
                let tr = match self.tlbs.translate(va, kind, &self.arch.page_table, slot.pc) {
                    Ok(t) => t,
                    Err(e) => {
                        slot.fault = Some(e);
                        return 1;
                    }
                };
                let g = self.cfg.dcache;
                let line_base = g.line_base(tr.paddr);
                let fill = match self.arch.memory.read(line_base, g.line_bytes, slot.pc) {
                    Ok(b) => b.to_vec(),
                    Err(e) => {
                        slot.fault = Some(e);
                        return 1;
                    }
                };
                let access_kind =
                    if kind == AccessType::Store { AccessKind::Write } else { AccessKind::Read };
                let res = self.dcache.access(tr.paddr, access_kind, &fill);
                self.apply_writebacks(&res.writebacks);
                match inst.opcode {
                    Lw => {
                        let b = self.dcache.read(tr.paddr, 4);
                        slot.result = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                    }
                    Lb => {
                        let b = self.dcache.read(tr.paddr, 1);
                        slot.result = b[0] as i8 as i32 as u32;
                    }
                    Sw => {
                        let v = self.reg_value(inst.rs2);
                        self.dcache.write(tr.paddr, &v.to_le_bytes());
                    }
                    Sb => {
                        let v = self.reg_value(inst.rs2);
                        self.dcache.write(tr.paddr, &[v as u8]);
                    }
                    _ => unreachable!(),
                }
                tr.extra_cycles + (res.latency_cycles - g.hit_latency_cycles) + 1
            }
            Csrr => {
                slot.result = match inst.imm {
                    CSR_CYCLE => now as u32,
                    _ => self.arch.csr_instret as u32,
                };
                1
            }
            DcflushSw => {
                let (set, way) = unpack_set_way(slot.alu);
                let rep = self.dcache.flush_set_way(set, way);
                self.apply_writebacks(&rep.writebacks);
                rep.cycles
            }
            Flushx => {
                let dirty = self.dcache.dirty_line_count();
                let g = self.cfg.dcache;
                let mut costs = std::collections::VecDeque::new();
                for set in 0..g.nsets {
                    for way in 0..g.assoc {
                        let l = self.dcache.line(set, way);
                        costs.push_back(
                            1 + if l.valid && l.dirty { g.writeback_cycles_per_line } else { 0 },
                        );
                    }
                }
                let rep = self.dcache.flush_all();
                self.apply_writebacks(&rep.writebacks);
                self.last_flushx = Some(FlushxSummary {
                    me_cycles: rep.cycles,
                    wb_cycles: 0,
                    dirty_lines: dirty,
                    writebacks: rep.writebacks.len() as u32,
                });
                self.flush_progress = FlushProgress {
                    active: true,
                    lines_remaining: costs.len() as u32,
                    phase: FlushPhase::DcacheMe,
                };
                self.flush_line_costs = costs;
                rep.cycles
            }
            _ => 1,
        }
    }

    fn apply_writebacks(&mut self, wbs: &[Writeback]) {
        for wb in wbs {
            // lines were filled from within memory bounds, so this write
            // cannot fail in practice
            let _ = self.arch.memory.write(wb.paddr, &wb.data, 0);
        }
    }

    fn start_fetch(&mut self, now: u64) {
        let pc = self.fetch_pc;
        let seq = self.next_seq;
        self.next_seq += 1;

        let fault = 'fault: {
            if pc % INST_BYTES != 0 {
                break 'fault Some(ExecError::Misaligned {
                    vaddr: pc,
                    kind: crate::machine::interp::AccessTypeTag::Fetch,
                    pc,
                });
            }
            None
        };
        if let Some(f) = fault {
            let slot = Slot::poisoned(seq, pc, f);
            self.record_stage(&slot, Stage::If, now);
            self.fetch_pc = pc.wrapping_add(INST_BYTES);
            self.if_busy = Some(FetchInFlight { remaining: 1, slot });
            self.deliver_if_ready();
            return;
        }

        let tr = match self.tlbs.translate(pc, AccessType::Fetch, &self.arch.page_table, pc) {
            Ok(t) => t,
            Err(e) => {
                let slot = Slot::poisoned(seq, pc, e);
                self.record_stage(&slot, Stage::If, now);
                self.fetch_pc = pc.wrapping_add(INST_BYTES);
                self.if_busy = Some(FetchInFlight { remaining: 1, slot });
                self.deliver_if_ready();
                return;
            }
        };
        let g = self.cfg.icache;
        let line_base = g.line_base(tr.paddr);
        let fill = match self.arch.memory.read(line_base, g.line_bytes, pc) {
            Ok(b) => b.to_vec(),
            Err(e) => {
                let slot = Slot::poisoned(seq, pc, e);
                self.record_stage(&slot, Stage::If, now);
                self.fetch_pc = pc.wrapping_add(INST_BYTES);
                self.if_busy = Some(FetchInFlight { remaining: 1, slot });
                self.deliver_if_ready();
                return;
            }
        };
        let res = self.icache.access(tr.paddr, AccessKind::Ifetch, &fill);
        let bytes = self.icache.read(tr.paddr, INST_BYTES);
        let slot = match Instruction::decode(bytes) {
            Ok(inst) => {
                let pred = self.bpu.predict(pc);
                self.fetch_pc =
                    if pred.taken { pred.target } else { pc.wrapping_add(INST_BYTES) };
                Slot {
                    seq,
                    pc,
                    inst,
                    pred,
                    me_entered: false,
                    alu: 0,
                    mem_va: 0,
                    result: 0,
                    next_pc: pc.wrapping_add(INST_BYTES),
                    fault: None,
                    is_flushx: false,
                }
            }
            Err(e) => {
                self.fetch_pc = pc.wrapping_add(INST_BYTES);
                Slot::poisoned(seq, pc, ExecError::Undecodable { pc, source: e })
            }
        };
        self.record_stage(&slot, Stage::If, now);
        let cycles = tr.extra_cycles + (res.latency_cycles - g.hit_latency_cycles) + 1;
        self.if_busy = Some(FetchInFlight { remaining: cycles, slot });
        self.deliver_if_ready();
    }

    fn deliver_if_ready(&mut self) {
        if let Some(f) = &mut self.if_busy {
            f.remaining -= 1;
            if f.remaining == 0 {
                if self.if_id.is_none() {
                    let f = self.if_busy.take().unwrap();
                    self.if_id = Some(f.slot);
                } else {
                    // delivery blocked; retry next cycle
                    f.remaining = 1;
                }
            }
        }
    }

    /// Host-initiated full flush with `flushx` semantics and cost, used by
    /// the scheduler between contexts. The pipe must be empty. Advances the
    /// cycle counter by the memory-stage cycles plus one write-back cycle
    /// and counts one retired instruction.
    pub fn flush_now(&mut self) -> FlushxSummary {
        assert!(self.pipe_empty(), "host flush with instructions in flight");
        let dirty = self.dcache.dirty_line_count();
        let rep = self.dcache.flush_all();
        self.apply_writebacks(&rep.writebacks);
        for op in self.schedule.wb_ops().collect::<Vec<_>>() {
            self.apply_wb_flush_op(op);
        }
        let summary = FlushxSummary {
            me_cycles: rep.cycles,
            wb_cycles: 1,
            dirty_lines: dirty,
            writebacks: rep.writebacks.len() as u32,
        };
        self.cycle += rep.cycles + 1;
        self.ledger.host_flush += rep.cycles + 1;
        self.retired_total += 1;
        self.arch.csr_cycle = self.cycle;
        self.last_flushx = Some(summary);
        summary
    }

    /// The architectural memory image: physical memory overlaid with dirty
    /// cache lines.
    pub fn memory_snapshot(&self) -> Vec<u8> {
        let mut mem = self.arch.memory.as_slice().to_vec();
        let g = self.cfg.dcache;
        for set in 0..g.nsets {
            for way in 0..g.assoc {
                let l = self.dcache.line(set, way);
                if l.valid && l.dirty {
                    let paddr = (l.tag * g.nsets + set) * g.line_bytes;
                    let end = (paddr + g.line_bytes) as usize;
                    if end <= mem.len() {
                        mem[paddr as usize..end].copy_from_slice(&l.data);
                    }
                }
            }
        }
        mem
    }

    /// Debug read of virtual memory through the active page table and the
    /// D-cache (dirty lines take precedence over physical memory).
    pub fn read_virt(&self, va: u32, len: u32) -> Result<Vec<u8>, ExecError> {
        let snap = self.memory_snapshot();
        let mut out = Vec::with_capacity(len as usize);
        for i in 0..len {
            let v = va + i;
            let pa = self.arch.page_table.translate(v, AccessType::Load, 0)?;
            out.push(snap[pa as usize]);
        }
        Ok(out)
    }

    pub fn read_virt_u32(&self, va: u32) -> Result<u32, ExecError> {
        let b = self.read_virt(va, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Full text snapshot of every sphere-of-flushing component: one line
    /// per cache line, TLB entry, and predictor entry.
    pub fn dump_state(&self) -> String {
        let mut out = String::new();
        self.dcache.dump("dcache", &mut out);
        self.icache.dump("icache", &mut out);
        self.tlbs.dump(&mut out);
        self.bpu.dump(&mut out);
        out
    }

    /// True iff every sphere-of-flushing component is in its reset state.
    pub fn sof_reset(&self) -> bool {
        self.dcache.is_reset()
            && self.icache.is_reset()
            && self.tlbs.is_reset()
            && self.bpu.is_reset()
    }

    fn emit_trace_line(&mut self, now: u64, fetch_state: &str) {
        let fmt_slot = |s: &Option<Slot>| match s {
            Some(x) => format!("0x{:x}/{}", x.pc, x.inst.opcode.mnemonic()),
            None => "-".to_string(),
        };
        let line = format!(
            "cyc={} if={} id={} ex={} me={}(left={}) wb={} fetch={} flush={:?}",
            now,
            self.if_busy
                .as_ref()
                .map(|f| format!("0x{:x}(+{})", f.slot.pc, f.remaining))
                .unwrap_or_else(|| "-".into()),
            fmt_slot(&self.if_id),
            fmt_slot(&self.id_ex),
            fmt_slot(&self.ex_me),
            self.me_cycles_left,
            fmt_slot(&self.me_wb),
            fetch_state,
            self.flush_progress.phase,
        );
        self.trace_lines.push(line);
    }

    /// Stage-entry cycles per instruction, from the recorded trace.
    pub fn timelines(&self) -> Vec<InstrTimeline> {
        let mut map: std::collections::BTreeMap<u64, InstrTimeline> =
            std::collections::BTreeMap::new();
        for ev in &self.stage_events {
            let t = map.entry(ev.seq).or_insert(InstrTimeline {
                seq: ev.seq,
                pc: ev.pc,
                opcode: ev.opcode,
                if_cycle: None,
                id_cycle: None,
                ex_cycle: None,
                me_cycle: None,
                wb_cycle: None,
            });
            let slot = match ev.stage {
                Stage::If => &mut t.if_cycle,
                Stage::Id => &mut t.id_cycle,
                Stage::Ex => &mut t.ex_cycle,
                Stage::Me => &mut t.me_cycle,
                Stage::Wb => &mut t.wb_cycle,
            };
            *slot = Some(ev.cycle);
        }
        map.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrTimeline {
    pub seq: u64,
    pub pc: u32,
    pub opcode: Opcode,
    pub if_cycle: Option<u64>,
    pub id_cycle: Option<u64>,
    pub ex_cycle: Option<u64>,
    pub me_cycle: Option<u64>,
    pub wb_cycle: Option<u64>,
}
