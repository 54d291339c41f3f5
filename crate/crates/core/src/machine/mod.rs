//! The mini-ISA, assembler, program images, and the untimed architectural
//! reference interpreter.

pub mod asm;
pub mod interp;
pub mod isa;
pub mod program;

pub use asm::{assemble, disassemble, disassemble_inst, AsmError};
pub use interp::{
    run_reference, step_reference, AccessType, ArchState, ExecError, Memory, PageTable,
    RefConfig, Retired, RunOutcome,
};
pub use isa::{pack_set_way, unpack_set_way, Instruction, Opcode, INST_BYTES};
pub use program::{Mode, PageMapping, Perms, Program, PAGE_BYTES, PAGE_SHIFT};

/// Structural errors in encodings, images, and program layout.
#[derive(Debug, thiserror::Error, PartialEq, Eq, Clone)]
pub enum MachineError {
    #[error("invalid instruction encoding byte 0x{byte:02x}")]
    BadEncoding { byte: u8 },
    #[error("invalid csr selector {selector}")]
    BadCsr { selector: i32 },
    #[error("text and data segments overlap in virtual space")]
    OverlappingSegments,
    #[error("segment page vpn 0x{vpn:x} has no page-table mapping")]
    UnmappedSegmentPage { vpn: u32 },
    #[error("duplicate page mapping")]
    DuplicateMapping,
    #[error("image truncated")]
    TruncatedImage,
    #[error("bad image magic")]
    BadImageMagic,
    #[error("unsupported image version {version}")]
    BadImageVersion { version: u32 },
}
