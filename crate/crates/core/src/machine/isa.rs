//! Instruction set: opcodes, the flat instruction record, and the fixed
//! 8-byte binary encoding used in program images and simulated memory.

use crate::machine::MachineError;

/// Instruction width in bytes. Every instruction occupies one 8-byte slot:
/// `[opcode, rd, rs1, rs2, imm:i32-le]`.
pub const INST_BYTES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    // ALU
    Add = 1,
    Sub = 2,
    And = 3,
    Or = 4,
    Xor = 5,
    Sll = 6,
    Srl = 7,
    Slt = 8,
    Addi = 9,
    Lui = 10,
    // memory
    Lw = 11,
    Lb = 12,
    Sw = 13,
    Sb = 14,
    // control
    Beq = 15,
    Bne = 16,
    Blt = 17,
    Bge = 18,
    Jal = 19,
    Jalr = 20,
    // system
    Csrr = 21,
    Ecall = 22,
    Mret = 23,
    Halt = 24,
    // flush extension
    Flushx = 25,
    DcflushSw = 26,
    IcinvAll = 27,
    TlbinvAll = 28,
    BpinvAll = 29,
    FenceFlush = 30,
}

/// CSR selectors carried in the `imm` field of `csrr`.
pub const CSR_CYCLE: i32 = 0;
pub const CSR_INSTRET: i32 = 1;

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Opcode> {
        use Opcode::*;
        Some(match v {
            1 => Add,
            2 => Sub,
            3 => And,
            4 => Or,
            5 => Xor,
            6 => Sll,
            7 => Srl,
            8 => Slt,
            9 => Addi,
            10 => Lui,
            11 => Lw,
            12 => Lb,
            13 => Sw,
            14 => Sb,
            15 => Beq,
            16 => Bne,
            17 => Blt,
            18 => Bge,
            19 => Jal,
            20 => Jalr,
            21 => Csrr,
            22 => Ecall,
            23 => Mret,
            24 => Halt,
            25 => Flushx,
            26 => DcflushSw,
            27 => IcinvAll,
            28 => TlbinvAll,
            29 => BpinvAll,
            30 => FenceFlush,
            _ => return None,
        })
    }

    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            Add => "add",
            Sub => "sub",
            And => "and",
            Or => "or",
            Xor => "xor",
            Sll => "sll",
            Srl => "srl",
            Slt => "slt",
            Addi => "addi",
            Lui => "lui",
            Lw => "lw",
            Lb => "lb",
            Sw => "sw",
            Sb => "sb",
            Beq => "beq",
            Bne => "bne",
            Blt => "blt",
            Bge => "bge",
            Jal => "jal",
            Jalr => "jalr",
            Csrr => "csrr",
            Ecall => "ecall",
            Mret => "mret",
            Halt => "halt",
            Flushx => "flushx",
            DcflushSw => "dcflush.sw",
            IcinvAll => "icinv.all",
            TlbinvAll => "tlbinv.all",
            BpinvAll => "bpinv.all",
            FenceFlush => "fence.flush",
        }
    }

    /// Privileged instructions raise illegal-instruction in user mode.
    pub fn privileged(self) -> bool {
        use Opcode::*;
        matches!(
            self,
            Flushx | DcflushSw | IcinvAll | TlbinvAll | BpinvAll | Mret
        )
    }

    pub fn is_load(self) -> bool {
        matches!(self, Opcode::Lw | Opcode::Lb)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Opcode::Sw | Opcode::Sb)
    }

    pub fn is_cond_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge)
    }

    /// Serializing instructions drain older instructions before executing
    /// and suppress younger fetch until they retire.
    pub fn serializing(self) -> bool {
        use Opcode::*;
        matches!(
            self,
            Flushx | IcinvAll | TlbinvAll | BpinvAll | FenceFlush | Ecall | Mret | Halt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: Opcode,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i32,
}

impl Instruction {
    pub fn new(opcode: Opcode, rd: u8, rs1: u8, rs2: u8, imm: i32) -> Instruction {
        debug_assert!(rd < 32 && rs1 < 32 && rs2 < 32);
        Instruction {
            opcode,
            rd,
            rs1,
            rs2,
            imm,
        }
    }

    pub fn encode(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0] = self.opcode as u8;
        b[1] = self.rd;
        b[2] = self.rs1;
        b[3] = self.rs2;
        b[4..8].copy_from_slice(&self.imm.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Instruction, MachineError> {
        let opcode = Opcode::from_u8(bytes[0])
            .ok_or(MachineError::BadEncoding { byte: bytes[0] })?;
        if bytes[1] >= 32 || bytes[2] >= 32 || bytes[3] >= 32 {
            return Err(MachineError::BadEncoding { byte: bytes[1].max(bytes[2]).max(bytes[3]) });
        }
        let imm = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        Ok(Instruction {
            opcode,
            rd: bytes[1],
            rs1: bytes[2],
            rs2: bytes[3],
            imm,
        })
    }

    /// Registers whose values must be available when the instruction enters
    /// the execute stage (address generation, ALU inputs, branch compare).
    /// A store's data register is excluded: it is forwarded at the memory
    /// stage.
    pub fn uses_at_ex(&self) -> (Option<u8>, Option<u8>) {
        use Opcode::*;
        match self.opcode {
            Add | Sub | And | Or | Xor | Sll | Srl | Slt => (Some(self.rs1), Some(self.rs2)),
            Addi => (Some(self.rs1), None),
            Lui => (None, None),
            Lw | Lb => (Some(self.rs1), None),
            Sw | Sb => (Some(self.rs1), None),
            Beq | Bne | Blt | Bge => (Some(self.rs1), Some(self.rs2)),
            Jal => (None, None),
            Jalr => (Some(self.rs1), None),
            DcflushSw => (Some(self.rs1), None),
            _ => (None, None),
        }
    }

    /// Destination register written at write-back, if any.
    pub fn writes_reg(&self) -> Option<u8> {
        use Opcode::*;
        let rd = match self.opcode {
            Add | Sub | And | Or | Xor | Sll | Srl | Slt | Addi | Lui | Lw | Lb | Jal | Jalr
            | Csrr => self.rd,
            _ => return None,
        };
        if rd == 0 {
            None
        } else {
            Some(rd)
        }
    }
}

/// Pack a (set, way) selector for `dcflush.sw`: way in bits [31:16], set in
/// bits [15:0].
pub fn pack_set_way(set: u32, way: u32) -> u32 {
    (way << 16) | (set & 0xFFFF)
}

pub fn unpack_set_way(selector: u32) -> (u32, u32) {
    (selector & 0xFFFF, selector >> 16)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let i = Instruction::new(Opcode::Addi, 1, 0, 0, 5);
        let b = i.encode();
        assert_eq!(Instruction::decode(&b).unwrap(), i);
    }

    #[test]
    fn negative_imm_roundtrip() {
        let i = Instruction::new(Opcode::Beq, 0, 1, 2, -8);
        assert_eq!(Instruction::decode(&i.encode()).unwrap(), i);
    }

    #[test]
    fn bad_opcode_rejected() {
        let b = [0xFFu8, 0, 0, 0, 0, 0, 0, 0];
        assert!(Instruction::decode(&b).is_err());
    }

    #[test]
    fn set_way_packing() {
        let s = pack_set_way(63, 7);
        assert_eq!(unpack_set_way(s), (63, 7));
    }
}
