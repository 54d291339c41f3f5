//! Architectural state and the untimed reference interpreter.
//!
//! The reference interpreter executes instructions with no timing model and
//! serves as the correctness oracle for the timed pipeline. Its `csr_cycle`
//! idealizes one cycle per instruction (it mirrors `csr_instret`), so
//! programs that read `cycle` are timing-dependent by construction and are
//! excluded from co-simulation corpora.

use std::collections::BTreeMap;

use crate::machine::isa::{
    unpack_set_way, Instruction, Opcode, CSR_CYCLE, CSR_INSTRET, INST_BYTES,
};
use crate::machine::program::{Mode, Perms, Program, PAGE_BYTES, PAGE_SHIFT};
use crate::machine::MachineError;

pub const DEFAULT_MEMORY_BYTES: u32 = 4 << 20;
pub const MAX_MEMORY_BYTES: u32 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessType {
    Fetch,
    Load,
    Store,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq, Clone)]
pub enum ExecError {
    #[error("page fault: {kind:?} of unmapped vaddr 0x{vaddr:08x} at pc 0x{pc:08x}")]
    PageFaultUnmapped { vaddr: u32, kind: AccessTypeTag, pc: u32 },
    #[error("page fault: {kind:?} permission denied for vaddr 0x{vaddr:08x} at pc 0x{pc:08x}")]
    PageFaultPerms { vaddr: u32, kind: AccessTypeTag, pc: u32 },
    #[error("misaligned {kind:?} of vaddr 0x{vaddr:08x} at pc 0x{pc:08x}")]
    Misaligned { vaddr: u32, kind: AccessTypeTag, pc: u32 },
    #[error("illegal instruction `{mnemonic}` in user mode at pc 0x{pc:08x}")]
    IllegalInUserMode { mnemonic: &'static str, pc: u32 },
    #[error("undecodable instruction at pc 0x{pc:08x}: {source}")]
    Undecodable { pc: u32, source: MachineError },
    #[error("dcflush.sw selector out of range at pc 0x{pc:08x}: set {set}, way {way}")]
    BadFlushSelector { pc: u32, set: u32, way: u32 },
    #[error("ecall at pc 0x{pc:08x} but program has no trap vector")]
    NoTrapVector { pc: u32 },
    #[error("physical address 0x{paddr:08x} outside memory at pc 0x{pc:08x}")]
    PhysOutOfBounds { paddr: u32, pc: u32 },
}

/// `AccessType` twin that keeps `ExecError` comparable and compact in
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessTypeTag {
    Fetch,
    Load,
    Store,
}

impl From<AccessType> for AccessTypeTag {
    fn from(a: AccessType) -> Self {
        match a {
            AccessType::Fetch => AccessTypeTag::Fetch,
            AccessType::Load => AccessTypeTag::Load,
            AccessType::Store => AccessTypeTag::Store,
        }
    }
}

/// Flat single-level page table: vpn -> (ppn, perms). 4 KiB pages.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PageTable {
    entries: BTreeMap<u32, (u32, Perms)>,
}

impl PageTable {
    pub fn from_program(p: &Program) -> PageTable {
        let mut entries = BTreeMap::new();
        for m in &p.maps {
            entries.insert(m.vpn, (m.ppn, m.perms));
        }
        PageTable { entries }
    }

    pub fn lookup(&self, vpn: u32) -> Option<(u32, Perms)> {
        self.entries.get(&vpn).copied()
    }

    /// Architectural translation with permission check.
    pub fn translate(&self, vaddr: u32, kind: AccessType, pc: u32) -> Result<u32, ExecError> {
        let vpn = vaddr >> PAGE_SHIFT;
        let (ppn, perms) = self
            .lookup(vpn)
            .ok_or(ExecError::PageFaultUnmapped { vaddr, kind: kind.into(), pc })?;
        let ok = match kind {
            AccessType::Fetch => perms.exec,
            AccessType::Load => perms.read,
            AccessType::Store => perms.write,
        };
        if !ok {
            return Err(ExecError::PageFaultPerms { vaddr, kind: kind.into(), pc });
        }
        Ok((ppn << PAGE_SHIFT) | (vaddr & (PAGE_BYTES - 1)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, Perms)> + '_ {
        self.entries.iter().map(|(&vpn, &(ppn, perms))| (vpn, ppn, perms))
    }
}

/// Byte-addressable little-endian physical memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    bytes: Vec<u8>,
}

impl Memory {
    pub fn new(size: u32) -> Memory {
        assert!(size <= MAX_MEMORY_BYTES, "memory limited to 256 MiB");
        Memory { bytes: vec![0; size as usize] }
    }

    pub fn len(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn read(&self, paddr: u32, len: u32, pc: u32) -> Result<&[u8], ExecError> {
        self.bytes
            .get(paddr as usize..(paddr + len) as usize)
            .ok_or(ExecError::PhysOutOfBounds { paddr, pc })
    }

    pub fn write(&mut self, paddr: u32, data: &[u8], pc: u32) -> Result<(), ExecError> {
        let dst = self
            .bytes
            .get_mut(paddr as usize..paddr as usize + data.len())
            .ok_or(ExecError::PhysOutOfBounds { paddr, pc })?;
        dst.copy_from_slice(data);
        Ok(())
    }

    pub fn read_u32(&self, paddr: u32, pc: u32) -> Result<u32, ExecError> {
        let b = self.read(paddr, 4, pc)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes
    }
}

/// Per-context architectural state: 32 registers, pc, privilege mode, the
/// cycle/instret counters, byte-addressable memory, and the active page
/// table. `ptbase` records where the flat table nominally resides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u32; 32],
    pub pc: u32,
    pub mode: Mode,
    pub csr_cycle: u64,
    pub csr_instret: u64,
    pub memory: Memory,
    pub ptbase: u32,
    pub page_table: PageTable,
    pub mepc: u32,
    pub trap_vector: Option<u32>,
}

impl ArchState {
    pub fn from_program(p: &Program, memory_bytes: u32) -> Result<ArchState, ExecError> {
        let page_table = PageTable::from_program(p);
        let mut memory = Memory::new(memory_bytes);
        // load segments at their physical addresses
        let text = p.text_bytes();
        for (va_base, bytes) in [(p.text_base, &text), (p.data_base, &p.data)] {
            let kind = if va_base == p.text_base { AccessType::Fetch } else { AccessType::Store };
            for (i, &b) in bytes.iter().enumerate() {
                let va = va_base + i as u32;
                let vpn = va >> PAGE_SHIFT;
                let (ppn, _) = page_table
                    .lookup(vpn)
                    .ok_or(ExecError::PageFaultUnmapped { vaddr: va, kind: kind.into(), pc: 0 })?;
                let pa = (ppn << PAGE_SHIFT) | (va & (PAGE_BYTES - 1));
                memory.write(pa, &[b], 0)?;
            }
        }
        Ok(ArchState {
            regs: [0; 32],
            pc: p.entry,
            mode: p.entry_mode,
            csr_cycle: 0,
            csr_instret: 0,
            memory,
            ptbase: 0,
            page_table,
            mepc: 0,
            trap_vector: p.trap_vector,
        })
    }

    pub fn write_reg(&mut self, rd: u8, value: u32) {
        if rd != 0 {
            self.regs[rd as usize] = value;
        }
    }

    pub fn read_reg(&self, r: u8) -> u32 {
        self.regs[r as usize]
    }

    /// Fetch and decode the instruction at `pc`.
    pub fn fetch_at_pc(&self) -> Result<Instruction, ExecError> {
        if self.pc % INST_BYTES != 0 {
            return Err(ExecError::Misaligned {
                vaddr: self.pc,
                kind: AccessTypeTag::Fetch,
                pc: self.pc,
            });
        }
        let pa = self.page_table.translate(self.pc, AccessType::Fetch, self.pc)?;
        let bytes = self.memory.read(pa, INST_BYTES, self.pc)?;
        Instruction::decode(bytes).map_err(|source| ExecError::Undecodable { pc: self.pc, source })
    }
}

/// Architectural outcome of retiring one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retired {
    Normal,
    Halt,
    Ecall,
    Mret,
}

/// Execution options the reference interpreter needs from the platform:
/// whether `flushx` clears the register file and the cache geometry used to
/// bounds-check `dcflush.sw` selectors.
#[derive(Debug, Clone, Copy)]
pub struct RefConfig {
    pub rf_flush_enabled: bool,
    pub nsets: u32,
    pub assoc: u32,
}

impl Default for RefConfig {
    fn default() -> Self {
        RefConfig { rf_flush_enabled: false, nsets: 64, assoc: 8 }
    }
}

/// Architecturally execute one instruction (no timing). `inst` must be the
/// instruction at `state.pc`.
pub fn step_reference(
    state: &mut ArchState,
    inst: &Instruction,
    cfg: &RefConfig,
) -> Result<Retired, ExecError> {
    use Opcode::*;
    let pc = state.pc;
    if inst.opcode.privileged() && state.mode == Mode::User {
        return Err(ExecError::IllegalInUserMode { mnemonic: inst.opcode.mnemonic(), pc });
    }
    let rs1 = state.read_reg(inst.rs1);
    let rs2 = state.read_reg(inst.rs2);
    let mut next_pc = pc.wrapping_add(INST_BYTES);
    let mut outcome = Retired::Normal;

    match inst.opcode {
        Add => state.write_reg(inst.rd, rs1.wrapping_add(rs2)),
        Sub => state.write_reg(inst.rd, rs1.wrapping_sub(rs2)),
        And => state.write_reg(inst.rd, rs1 & rs2),
        Or => state.write_reg(inst.rd, rs1 | rs2),
        Xor => state.write_reg(inst.rd, rs1 ^ rs2),
        Sll => state.write_reg(inst.rd, rs1.wrapping_shl(rs2 & 31)),
        Srl => state.write_reg(inst.rd, rs1.wrapping_shr(rs2 & 31)),
        Slt => state.write_reg(inst.rd, ((rs1 as i32) < (rs2 as i32)) as u32),
        Addi => state.write_reg(inst.rd, rs1.wrapping_add(inst.imm as u32)),
        Lui => state.write_reg(inst.rd, (inst.imm as u32).wrapping_shl(12)),
        Lw => {
            let va = rs1.wrapping_add(inst.imm as u32);
            if va % 4 != 0 {
                return Err(ExecError::Misaligned { vaddr: va, kind: AccessTypeTag::Load, pc });
            }
            let pa = state.page_table.translate(va, AccessType::Load, pc)?;
            let v = state.memory.read_u32(pa, pc)?;
            state.write_reg(inst.rd, v);
        }
        Lb => {
            let va = rs1.wrapping_add(inst.imm as u32);
            let pa = state.page_table.translate(va, AccessType::Load, pc)?;
            let b = state.memory.read(pa, 1, pc)?[0];
            state.write_reg(inst.rd, b as i8 as i32 as u32);
        }
        Sw => {
            let va = rs1.wrapping_add(inst.imm as u32);
            if va % 4 != 0 {
                return Err(ExecError::Misaligned { vaddr: va, kind: AccessTypeTag::Store, pc });
            }
            let pa = state.page_table.translate(va, AccessType::Store, pc)?;
            state.memory.write(pa, &rs2.to_le_bytes(), pc)?;
        }
        Sb => {
            let va = rs1.wrapping_add(inst.imm as u32);
            let pa = state.page_table.translate(va, AccessType::Store, pc)?;
            state.memory.write(pa, &[rs2 as u8], pc)?;
        }
        Beq => {
            if rs1 == rs2 {
                next_pc = pc.wrapping_add(inst.imm as u32);
            }
        }
        Bne => {
            if rs1 != rs2 {
                next_pc = pc.wrapping_add(inst.imm as u32);
            }
        }
        Blt => {
            if (rs1 as i32) < (rs2 as i32) {
                next_pc = pc.wrapping_add(inst.imm as u32);
            }
        }
        Bge => {
            if (rs1 as i32) >= (rs2 as i32) {
                next_pc = pc.wrapping_add(inst.imm as u32);
            }
        }
        Jal => {
            state.write_reg(inst.rd, pc.wrapping_add(INST_BYTES));
            next_pc = pc.wrapping_add(inst.imm as u32);
        }
        Jalr => {
            state.write_reg(inst.rd, pc.wrapping_add(INST_BYTES));
            next_pc = rs1.wrapping_add(inst.imm as u32);
        }
        Csrr => {
            let v = match inst.imm {
                CSR_CYCLE => state.csr_cycle as u32,
                CSR_INSTRET => state.csr_instret as u32,
                _ => {
                    return Err(ExecError::Undecodable {
                        pc,
                        source: MachineError::BadCsr { selector: inst.imm },
                    })
                }
            };
            state.write_reg(inst.rd, v);
        }
        Ecall => {
            let tv = state.trap_vector.ok_or(ExecError::NoTrapVector { pc })?;
            state.mepc = pc.wrapping_add(INST_BYTES);
            state.mode = Mode::Machine;
            next_pc = tv;
            outcome = Retired::Ecall;
        }
        Mret => {
            state.mode = Mode::User;
            next_pc = state.mepc;
            outcome = Retired::Mret;
        }
        Halt => outcome = Retired::Halt,
        Flushx => {
            if cfg.rf_flush_enabled {
                for r in 1..32 {
                    state.regs[r] = 0;
                }
            }
        }
        DcflushSw => {
            let (set, way) = unpack_set_way(rs1);
            if set >= cfg.nsets || way >= cfg.assoc {
                return Err(ExecError::BadFlushSelector { pc, set, way });
            }
        }
        IcinvAll | TlbinvAll | BpinvAll | FenceFlush => {}
    }

    state.pc = next_pc;
    state.csr_instret += 1;
    state.csr_cycle = state.csr_instret;
    debug_assert_eq!(state.regs[0], 0);
    Ok(outcome)
}

/// Outcome of a reference run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Halted,
    Fault(ExecError),
    CycleLimit,
}

/// Run the reference interpreter until halt, fault, or the step limit.
/// Ecall/mret are executed architecturally (they require a trap vector).
pub fn run_reference(
    state: &mut ArchState,
    cfg: &RefConfig,
    max_steps: u64,
) -> RunOutcome {
    for _ in 0..max_steps {
        let inst = match state.fetch_at_pc() {
            Ok(i) => i,
            Err(e) => return RunOutcome::Fault(e),
        };
        match step_reference(state, &inst, cfg) {
            Ok(Retired::Halt) => return RunOutcome::Halted,
            Ok(_) => {}
            Err(e) => return RunOutcome::Fault(e),
        }
    }
    RunOutcome::CycleLimit
}
