//! Two-pass assembler and the matching disassembler.
//!
//! Source format, one item per line, `#` starts a comment:
//!
//! ```text
//! .mode machine            # or user (default machine)
//! .text 0x1000             # text section at base (default 0x1000)
//! loop:
//!     addi x1, x1, 1
//!     blt  x1, x2, loop    # labels or numeric byte offsets
//!     lw   x3, 8(x4)
//!     halt
//! .data 0x10000            # data section at base (default 0x10000)
//! buf:
//!     .byte 0x01 0x02
//!     .word 0xdeadbeef
//!     .zero 64
//! .entry loop              # default: text base
//! .trap  handler           # optional trap vector
//! .map 0x20000 0x20000 rw  # extra page mapping (page-aligned vaddr/paddr)
//! ```
//!
//! Segment pages without an explicit `.map` get identity mappings (text rx,
//! data rw). The disassembler emits complete canonical source, so
//! `assemble(disassemble(p)) == p`.

use std::collections::HashMap;

use crate::machine::isa::{Instruction, Opcode, CSR_CYCLE, CSR_INSTRET, INST_BYTES};
use crate::machine::program::{Mode, PageMapping, Perms, Program, PAGE_BYTES, PAGE_SHIFT};

pub const DEFAULT_TEXT_BASE: u32 = 0x1000;
pub const DEFAULT_DATA_BASE: u32 = 0x10000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic `{word}`")]
    UnknownMnemonic { line: usize, word: String },
    #[error("line {line}: unresolved label `{name}`")]
    UnresolvedLabel { line: usize, name: String },
    #[error("line {line}: immediate out of range: `{text}`")]
    ImmOutOfRange { line: usize, text: String },
    #[error("line {line}: bad operand `{text}`")]
    BadOperand { line: usize, text: String },
    #[error("line {line}: expected {expected} operands, found {found}")]
    OperandCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: bad register `{text}`")]
    BadRegister { line: usize, text: String },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: bad directive `{text}`")]
    BadDirective { line: usize, text: String },
    #[error("line {line}: branch target 0x{target:08x} not 8-byte aligned")]
    MisalignedTarget { line: usize, target: u32 },
    #[error("line {line}: instruction outside .text section")]
    CodeOutsideText { line: usize },
    #[error("line {line}: data directive outside .data section")]
    DataOutsideData { line: usize },
    #[error("program validation failed: {0}")]
    Invalid(#[from] crate::machine::MachineError),
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Text,
    Data,
}

struct PendingInst {
    line: usize,
    pc: u32,
    mnemonic: String,
    operands: Vec<String>,
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut pending: Vec<PendingInst> = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut text_base = DEFAULT_TEXT_BASE;
    let mut data_base = DEFAULT_DATA_BASE;
    let mut entry_spec: Option<(usize, String)> = None;
    let mut trap_spec: Option<(usize, String)> = None;
    let mut mode = Mode::Machine;
    let mut explicit_maps: Vec<PageMapping> = Vec::new();
    let mut section = Section::None;
    let mut text_pc = 0u32; // offset within text, bases may be set lazily
    let mut seen_text_item = false;
    let mut seen_data_item = false;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let mut rest = stripped.trim();
        if rest.is_empty() {
            continue;
        }
        // labels, possibly several on one line
        while let Some(colon) = rest.find(':') {
            let (name, tail) = rest.split_at(colon);
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                break;
            }
            let addr = match section {
                Section::Text => text_base + text_pc,
                Section::Data => data_base + data.len() as u32,
                Section::None => {
                    return Err(AsmError::CodeOutsideText { line });
                }
            };
            if labels.insert(name.to_string(), addr).is_some() {
                return Err(AsmError::DuplicateLabel { line, name: name.to_string() });
            }
            rest = tail[1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        if let Some(directive) = rest.strip_prefix('.') {
            let mut parts = directive.split_whitespace();
            let name = parts.next().unwrap_or("");
            let args: Vec<&str> = parts.collect();
            match name {
                "text" => {
                    if seen_text_item {
                        return Err(AsmError::BadDirective { line, text: rest.to_string() });
                    }
                    if let Some(a) = args.first() {
                        text_base = parse_u32(a)
                            .ok_or_else(|| AsmError::BadOperand { line, text: a.to_string() })?;
                    }
                    section = Section::Text;
                }
                "data" => {
                    if seen_data_item {
                        return Err(AsmError::BadDirective { line, text: rest.to_string() });
                    }
                    if let Some(a) = args.first() {
                        data_base = parse_u32(a)
                            .ok_or_else(|| AsmError::BadOperand { line, text: a.to_string() })?;
                    }
                    section = Section::Data;
                }
                "mode" => {
                    mode = match args.first().copied() {
                        Some("machine") => Mode::Machine,
                        Some("user") => Mode::User,
                        _ => return Err(AsmError::BadDirective { line, text: rest.to_string() }),
                    };
                }
                "entry" => {
                    let a = args
                        .first()
                        .ok_or_else(|| AsmError::BadDirective { line, text: rest.to_string() })?;
                    entry_spec = Some((line, a.to_string()));
                }
                "trap" => {
                    let a = args
                        .first()
                        .ok_or_else(|| AsmError::BadDirective { line, text: rest.to_string() })?;
                    trap_spec = Some((line, a.to_string()));
                }
                "map" => {
                    if args.len() != 3 {
                        return Err(AsmError::BadDirective { line, text: rest.to_string() });
                    }
                    let va = parse_u32(args[0])
                        .ok_or_else(|| AsmError::BadOperand { line, text: args[0].to_string() })?;
                    let pa = parse_u32(args[1])
                        .ok_or_else(|| AsmError::BadOperand { line, text: args[1].to_string() })?;
                    let perms = Perms::parse(args[2])
                        .ok_or_else(|| AsmError::BadOperand { line, text: args[2].to_string() })?;
                    if va % PAGE_BYTES != 0 || pa % PAGE_BYTES != 0 {
                        return Err(AsmError::BadOperand { line, text: args[0].to_string() });
                    }
                    explicit_maps.push(PageMapping {
                        vpn: va >> PAGE_SHIFT,
                        ppn: pa >> PAGE_SHIFT,
                        perms,
                    });
                }
                "byte" => {
                    if section != Section::Data {
                        return Err(AsmError::DataOutsideData { line });
                    }
                    seen_data_item = true;
                    for a in &args {
                        let v = parse_i64(a)
                            .ok_or_else(|| AsmError::BadOperand { line, text: a.to_string() })?;
                        if !(-128..=255).contains(&v) {
                            return Err(AsmError::ImmOutOfRange { line, text: a.to_string() });
                        }
                        data.push(v as u8);
                    }
                }
                "word" => {
                    if section != Section::Data {
                        return Err(AsmError::DataOutsideData { line });
                    }
                    seen_data_item = true;
                    for a in &args {
                        let v = parse_i64(a)
                            .ok_or_else(|| AsmError::BadOperand { line, text: a.to_string() })?;
                        if v < i32::MIN as i64 || v > u32::MAX as i64 {
                            return Err(AsmError::ImmOutOfRange { line, text: a.to_string() });
                        }
                        data.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
                "zero" => {
                    if section != Section::Data {
                        return Err(AsmError::DataOutsideData { line });
                    }
                    seen_data_item = true;
                    let a = args
                        .first()
                        .ok_or_else(|| AsmError::BadDirective { line, text: rest.to_string() })?;
                    let n = parse_u32(a)
                        .ok_or_else(|| AsmError::BadOperand { line, text: a.to_string() })?;
                    data.extend(std::iter::repeat(0u8).take(n as usize));
                }
                _ => return Err(AsmError::BadDirective { line, text: rest.to_string() }),
            }
            continue;
        }
        // instruction
        if section != Section::Text {
            return Err(AsmError::CodeOutsideText { line });
        }
        seen_text_item = true;
        let mut words = rest.splitn(2, char::is_whitespace);
        let mnemonic = words.next().unwrap().to_string();
        let operands: Vec<String> = words
            .next()
            .map(|s| {
                s.split(',')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        pending.push(PendingInst { line, pc: text_base + text_pc, mnemonic, operands });
        text_pc += INST_BYTES;
    }

    // pass 2: resolve
    let mut text = Vec::with_capacity(pending.len());
    for p in &pending {
        text.push(resolve_inst(p, &labels)?);
    }

    let entry = match entry_spec {
        Some((line, spec)) => resolve_addr(&spec, &labels, line)?,
        None => text_base,
    };
    let trap_vector = match trap_spec {
        Some((line, spec)) => Some(resolve_addr(&spec, &labels, line)?),
        None => None,
    };

    let mut program = Program {
        text,
        text_base,
        data,
        data_base,
        entry,
        entry_mode: mode,
        trap_vector,
        maps: explicit_maps,
    };
    add_identity_maps(&mut program);
    program.validate()?;
    Ok(program)
}

/// Identity-map any segment page not covered by an explicit `.map`.
fn add_identity_maps(p: &mut Program) {
    let add = |base: u32, len: u32, perms: Perms, maps: &mut Vec<PageMapping>| {
        if len == 0 {
            return;
        }
        let first = base >> PAGE_SHIFT;
        let last = (base + len - 1) >> PAGE_SHIFT;
        for vpn in first..=last {
            if !maps.iter().any(|m| m.vpn == vpn) {
                maps.push(PageMapping { vpn, ppn: vpn, perms });
            }
        }
    };
    let mut maps = std::mem::take(&mut p.maps);
    add(p.text_base, p.text_len_bytes(), Perms::rx(), &mut maps);
    add(p.data_base, p.data.len() as u32, Perms::rw(), &mut maps);
    maps.sort_by_key(|m| m.vpn);
    p.maps = maps;
}

fn resolve_inst(p: &PendingInst, labels: &HashMap<String, u32>) -> Result<Instruction, AsmError> {
    let line = p.line;
    let ops = &p.operands;
    let expect = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(AsmError::OperandCount { line, expected: n, found: ops.len() })
        }
    };
    let reg = |s: &str| parse_reg(s).ok_or_else(|| AsmError::BadRegister { line, text: s.to_string() });
    let imm_abs = |s: &str| -> Result<i32, AsmError> {
        if let Some(v) = parse_i64(s) {
            if v < i32::MIN as i64 || v > u32::MAX as i64 {
                return Err(AsmError::ImmOutOfRange { line, text: s.to_string() });
            }
            Ok(v as u32 as i32)
        } else if let Some(&addr) = labels.get(s) {
            Ok(addr as i32)
        } else {
            Err(AsmError::UnresolvedLabel { line, name: s.to_string() })
        }
    };
    // Branch/jump target: a number is a relative byte offset, a label is
    // resolved to (label - pc).
    let imm_rel = |s: &str| -> Result<i32, AsmError> {
        let off = if let Some(v) = parse_i64(s) {
            if v < i32::MIN as i64 || v > i32::MAX as i64 {
                return Err(AsmError::ImmOutOfRange { line, text: s.to_string() });
            }
            v as i32
        } else if let Some(&addr) = labels.get(s) {
            (addr as i64 - p.pc as i64) as i32
        } else {
            return Err(AsmError::UnresolvedLabel { line, name: s.to_string() });
        };
        if off % INST_BYTES as i32 != 0 {
            return Err(AsmError::MisalignedTarget {
                line,
                target: p.pc.wrapping_add(off as u32),
            });
        }
        Ok(off)
    };

    use Opcode::*;
    let i = match p.mnemonic.as_str() {
        m @ ("add" | "sub" | "and" | "or" | "xor" | "sll" | "srl" | "slt") => {
            expect(3)?;
            let op = match m {
                "add" => Add,
                "sub" => Sub,
                "and" => And,
                "or" => Or,
                "xor" => Xor,
                "sll" => Sll,
                "srl" => Srl,
                _ => Slt,
            };
            Instruction::new(op, reg(&ops[0])?, reg(&ops[1])?, reg(&ops[2])?, 0)
        }
        "addi" => {
            expect(3)?;
            Instruction::new(Addi, reg(&ops[0])?, reg(&ops[1])?, 0, imm_abs(&ops[2])?)
        }
        "lui" => {
            expect(2)?;
            let v = imm_abs(&ops[1])?;
            if !(0..=0xFFFFF).contains(&v) {
                return Err(AsmError::ImmOutOfRange { line, text: ops[1].clone() });
            }
            Instruction::new(Lui, reg(&ops[0])?, 0, 0, v)
        }
        m @ ("lw" | "lb") => {
            expect(2)?;
            let (imm, base) = parse_mem_operand(&ops[1], line)?;
            Instruction::new(if m == "lw" { Lw } else { Lb }, reg(&ops[0])?, base, 0, imm)
        }
        m @ ("sw" | "sb") => {
            expect(2)?;
            let (imm, base) = parse_mem_operand(&ops[1], line)?;
            Instruction::new(if m == "sw" { Sw } else { Sb }, 0, base, reg(&ops[0])?, imm)
        }
        m @ ("beq" | "bne" | "blt" | "bge") => {
            expect(3)?;
            let op = match m {
                "beq" => Beq,
                "bne" => Bne,
                "blt" => Blt,
                _ => Bge,
            };
            Instruction::new(op, 0, reg(&ops[0])?, reg(&ops[1])?, imm_rel(&ops[2])?)
        }
        "jal" => {
            expect(2)?;
            Instruction::new(Jal, reg(&ops[0])?, 0, 0, imm_rel(&ops[1])?)
        }
        "jalr" => {
            expect(3)?;
            Instruction::new(Jalr, reg(&ops[0])?, reg(&ops[1])?, 0, imm_abs(&ops[2])?)
        }
        "csrr" => {
            expect(2)?;
            let sel = match ops[1].as_str() {
                "cycle" => CSR_CYCLE,
                "instret" => CSR_INSTRET,
                _ => return Err(AsmError::BadOperand { line, text: ops[1].clone() }),
            };
            Instruction::new(Csrr, reg(&ops[0])?, 0, 0, sel)
        }
        "dcflush.sw" => {
            expect(1)?;
            Instruction::new(DcflushSw, 0, reg(&ops[0])?, 0, 0)
        }
        m @ ("ecall" | "mret" | "halt" | "flushx" | "icinv.all" | "tlbinv.all" | "bpinv.all"
        | "fence.flush") => {
            expect(0)?;
            let op = match m {
                "ecall" => Ecall,
                "mret" => Mret,
                "halt" => Halt,
                "flushx" => Flushx,
                "icinv.all" => IcinvAll,
                "tlbinv.all" => TlbinvAll,
                "bpinv.all" => BpinvAll,
                _ => FenceFlush,
            };
            Instruction::new(op, 0, 0, 0, 0)
        }
        other => {
            return Err(AsmError::UnknownMnemonic { line, word: other.to_string() });
        }
    };
    Ok(i)
}

fn resolve_addr(
    spec: &str,
    labels: &HashMap<String, u32>,
    line: usize,
) -> Result<u32, AsmError> {
    if let Some(v) = parse_u32(spec) {
        Ok(v)
    } else if let Some(&addr) = labels.get(spec) {
        Ok(addr)
    } else {
        Err(AsmError::UnresolvedLabel { line, name: spec.to_string() })
    }
}

fn parse_mem_operand(s: &str, line: usize) -> Result<(i32, u8), AsmError> {
    let open = s.find('(').ok_or_else(|| AsmError::BadOperand { line, text: s.to_string() })?;
    if !s.ends_with(')') {
        return Err(AsmError::BadOperand { line, text: s.to_string() });
    }
    let imm_text = s[..open].trim();
    let imm = if imm_text.is_empty() {
        0
    } else {
        let v = parse_i64(imm_text)
            .ok_or_else(|| AsmError::BadOperand { line, text: s.to_string() })?;
        if v < i32::MIN as i64 || v > i32::MAX as i64 {
            return Err(AsmError::ImmOutOfRange { line, text: s.to_string() });
        }
        v as i32
    };
    let reg = parse_reg(s[open + 1..s.len() - 1].trim())
        .ok_or_else(|| AsmError::BadRegister { line, text: s.to_string() })?;
    Ok((imm, reg))
}

fn parse_reg(s: &str) -> Option<u8> {
    let n = s.strip_prefix('x')?.parse::<u8>().ok()?;
    if n < 32 {
        Some(n)
    } else {
        None
    }
}

fn parse_i64(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_u32(s: &str) -> Option<u32> {
    let v = parse_i64(s)?;
    if (0..=u32::MAX as i64).contains(&v) {
        Some(v as u32)
    } else {
        None
    }
}

/// Render a single instruction in canonical form.
pub fn disassemble_inst(i: &Instruction) -> String {
    use Opcode::*;
    let m = i.opcode.mnemonic();
    match i.opcode {
        Add | Sub | And | Or | Xor | Sll | Srl | Slt => {
            format!("{} x{}, x{}, x{}", m, i.rd, i.rs1, i.rs2)
        }
        Addi => format!("{} x{}, x{}, {}", m, i.rd, i.rs1, i.imm),
        Lui => format!("{} x{}, {}", m, i.rd, i.imm),
        Lw | Lb => format!("{} x{}, {}(x{})", m, i.rd, i.imm, i.rs1),
        Sw | Sb => format!("{} x{}, {}(x{})", m, i.rs2, i.imm, i.rs1),
        Beq | Bne | Blt | Bge => format!("{} x{}, x{}, {}", m, i.rs1, i.rs2, i.imm),
        Jal => format!("{} x{}, {}", m, i.rd, i.imm),
        Jalr => format!("{} x{}, x{}, {}", m, i.rd, i.rs1, i.imm),
        Csrr => format!(
            "{} x{}, {}",
            m,
            i.rd,
            if i.imm == CSR_INSTRET { "instret" } else { "cycle" }
        ),
        DcflushSw => format!("{} x{}", m, i.rs1),
        _ => m.to_string(),
    }
}

/// Emit complete canonical source for a program. Re-assembling the output
/// reproduces the program exactly.
pub fn disassemble(p: &Program) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        ".mode {}\n",
        if p.entry_mode == Mode::User { "user" } else { "machine" }
    ));
    for m in &p.maps {
        out.push_str(&format!(
            ".map 0x{:x} 0x{:x} {}\n",
            m.vpn << PAGE_SHIFT,
            m.ppn << PAGE_SHIFT,
            m.perms
        ));
    }
    out.push_str(&format!(".text 0x{:x}\n", p.text_base));
    for i in &p.text {
        out.push_str("    ");
        out.push_str(&disassemble_inst(i));
        out.push('\n');
    }
    out.push_str(&format!(".data 0x{:x}\n", p.data_base));
    for chunk in p.data.chunks(16) {
        out.push_str("    .byte");
        for b in chunk {
            out.push_str(&format!(" 0x{:02x}", b));
        }
        out.push('\n');
    }
    out.push_str(&format!(".entry 0x{:x}\n", p.entry));
    if let Some(tv) = p.trap_vector {
        out.push_str(&format!(".trap 0x{:x}\n", tv));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addi_direct_encoding() {
        let p = assemble(".text\naddi x1, x0, 5\nhalt\n").unwrap();
        assert_eq!(p.text[0], Instruction::new(Opcode::Addi, 1, 0, 0, 5));
    }

    #[test]
    fn backward_branch_label() {
        // beq at pc 0x1008, label 8 bytes back
        let p = assemble(".text\nloop: addi x1, x1, 1\nbeq x1, x2, loop\nhalt\n").unwrap();
        assert_eq!(p.text[1], Instruction::new(Opcode::Beq, 0, 1, 2, -8));
    }

    #[test]
    fn unknown_mnemonic_reports_line() {
        let err = assemble(".text\naddi x1, x0, 1\nfrobnicate x1\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnknownMnemonic { line: 3, word: "frobnicate".into() }
        );
    }

    #[test]
    fn unresolved_label_reports_line() {
        let err = assemble(".text\nbeq x1, x2, nowhere\n").unwrap_err();
        assert_eq!(
            err,
            AsmError::UnresolvedLabel { line: 2, name: "nowhere".into() }
        );
    }

    #[test]
    fn imm_out_of_range() {
        let err = assemble(".text\naddi x1, x0, 0x100000000\n").unwrap_err();
        assert!(matches!(err, AsmError::ImmOutOfRange { line: 2, .. }));
    }

    #[test]
    fn mem_operand_forms() {
        let p = assemble(".text\nlw x1, 8(x2)\nsw x3, -4(x4)\nhalt\n").unwrap();
        assert_eq!(p.text[0], Instruction::new(Opcode::Lw, 1, 2, 0, 8));
        assert_eq!(p.text[1], Instruction::new(Opcode::Sw, 0, 4, 3, -4));
    }

    #[test]
    fn prime_loop_roundtrip() {
        let src = "\
.text 0x1000
start:
    addi x1, x0, 0
loop:
    addi x1, x1, 1
    blt x1, x2, loop
    halt
.data 0x10000
    .word 0x12345678
.entry start
";
        let p = assemble(src).unwrap();
        let round = assemble(&disassemble(&p)).unwrap();
        assert_eq!(p, round);
    }

    #[test]
    fn csrr_selectors() {
        let p = assemble(".text\ncsrr x5, cycle\ncsrr x6, instret\nhalt\n").unwrap();
        assert_eq!(p.text[0].imm, CSR_CYCLE);
        assert_eq!(p.text[1].imm, CSR_INSTRET);
    }

    #[test]
    fn identity_maps_generated() {
        let p = assemble(".text 0x1000\nhalt\n.data 0x3000\n.byte 1\n").unwrap();
        assert_eq!(p.maps.len(), 2);
        assert!(p.maps.iter().any(|m| m.vpn == 1 && m.ppn == 1 && m.perms == Perms::rx()));
        assert!(p.maps.iter().any(|m| m.vpn == 3 && m.ppn == 3 && m.perms == Perms::rw()));
    }

    #[test]
    fn explicit_map_and_trap() {
        let src = ".mode user\n.map 0x20000 0x30000 rw\n.text\nhalt\nh: mret\n.trap h\n";
        let p = assemble(src).unwrap();
        assert_eq!(p.entry_mode, Mode::User);
        assert_eq!(p.trap_vector, Some(0x1008));
        assert!(p.maps.iter().any(|m| m.vpn == 0x20 && m.ppn == 0x30));
    }
}
