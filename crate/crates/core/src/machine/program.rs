//! Program images: text/data segments, page-table spec, and the flat binary
//! image format.
//!
//! Image layout (little-endian u32 fields):
//!
//! ```text
//! offset  field
//! 0       magic "FSIM"
//! 4       version (1)
//! 8       entry vaddr
//! 12      entry mode (0 = machine, 1 = user)
//! 16      trap vector (0xFFFF_FFFF = none)
//! 20      text base vaddr
//! 24      text length in bytes
//! 28      data base vaddr
//! 32      data length in bytes
//! 36      mapping count N
//! 40      N * (vpn, ppn, perms) triples
//! then    text bytes, then data bytes
//! ```

use crate::machine::isa::{Instruction, INST_BYTES};
use crate::machine::MachineError;

pub const PAGE_BYTES: u32 = 4096;
pub const PAGE_SHIFT: u32 = 12;

const IMAGE_MAGIC: [u8; 4] = *b"FSIM";
const IMAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Machine,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub fn rw() -> Perms {
        Perms { read: true, write: true, exec: false }
    }

    pub fn rx() -> Perms {
        Perms { read: true, write: false, exec: true }
    }

    pub fn rwx() -> Perms {
        Perms { read: true, write: true, exec: true }
    }

    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::default();
        for c in s.chars() {
            match c {
                'r' => p.read = true,
                'w' => p.write = true,
                'x' => p.exec = true,
                '-' => {}
                _ => return None,
            }
        }
        Some(p)
    }

    fn to_bits(self) -> u32 {
        (self.read as u32) | (self.write as u32) << 1 | (self.exec as u32) << 2
    }

    fn from_bits(bits: u32) -> Perms {
        Perms {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
            exec: bits & 4 != 0,
        }
    }
}

impl std::fmt::Display for Perms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}{}",
            if self.read { 'r' } else { '-' },
            if self.write { 'w' } else { '-' },
            if self.exec { 'x' } else { '-' }
        )
    }
}

/// One page-table entry in the program's mapping spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageMapping {
    pub vpn: u32,
    pub ppn: u32,
    pub perms: Perms,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub text: Vec<Instruction>,
    pub text_base: u32,
    pub data: Vec<u8>,
    pub data_base: u32,
    pub entry: u32,
    pub entry_mode: Mode,
    pub trap_vector: Option<u32>,
    pub maps: Vec<PageMapping>,
}

impl Program {
    pub fn text_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.text.len() * INST_BYTES as usize);
        for i in &self.text {
            out.extend_from_slice(&i.encode());
        }
        out
    }

    pub fn text_len_bytes(&self) -> u32 {
        self.text.len() as u32 * INST_BYTES
    }

    /// Segments must not overlap in virtual space and every page touched by
    /// a segment must have a mapping.
    pub fn validate(&self) -> Result<(), MachineError> {
        let t0 = self.text_base;
        let t1 = self.text_base + self.text_len_bytes();
        let d0 = self.data_base;
        let d1 = self.data_base + self.data.len() as u32;
        if t1 > t0 && d1 > d0 && t0 < d1 && d0 < t1 {
            return Err(MachineError::OverlappingSegments);
        }
        for (base, len) in [(t0, t1 - t0), (d0, d1 - d0)] {
            if len == 0 {
                continue;
            }
            let first = base >> PAGE_SHIFT;
            let last = (base + len - 1) >> PAGE_SHIFT;
            for vpn in first..=last {
                if !self.maps.iter().any(|m| m.vpn == vpn) {
                    return Err(MachineError::UnmappedSegmentPage { vpn });
                }
            }
        }
        let mut vpns: Vec<u32> = self.maps.iter().map(|m| m.vpn).collect();
        vpns.sort_unstable();
        vpns.dedup();
        if vpns.len() != self.maps.len() {
            return Err(MachineError::DuplicateMapping);
        }
        Ok(())
    }

    pub fn to_image(&self) -> Vec<u8> {
        let text = self.text_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGE_MAGIC);
        let push = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        push(&mut out, IMAGE_VERSION);
        push(&mut out, self.entry);
        push(&mut out, if self.entry_mode == Mode::User { 1 } else { 0 });
        push(&mut out, self.trap_vector.unwrap_or(u32::MAX));
        push(&mut out, self.text_base);
        push(&mut out, text.len() as u32);
        push(&mut out, self.data_base);
        push(&mut out, self.data.len() as u32);
        push(&mut out, self.maps.len() as u32);
        for m in &self.maps {
            push(&mut out, m.vpn);
            push(&mut out, m.ppn);
            push(&mut out, m.perms.to_bits());
        }
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_image(bytes: &[u8]) -> Result<Program, MachineError> {
        let word = |off: usize| -> Result<u32, MachineError> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or(MachineError::TruncatedImage)
        };
        if bytes.len() < 40 || bytes[0..4] != IMAGE_MAGIC {
            return Err(MachineError::BadImageMagic);
        }
        if word(4)? != IMAGE_VERSION {
            return Err(MachineError::BadImageVersion { version: word(4)? });
        }
        let entry = word(8)?;
        let entry_mode = if word(12)? == 1 { Mode::User } else { Mode::Machine };
        let tv = word(16)?;
        let trap_vector = if tv == u32::MAX { None } else { Some(tv) };
        let text_base = word(20)?;
        let text_len = word(24)? as usize;
        let data_base = word(28)?;
        let data_len = word(32)? as usize;
        let nmaps = word(36)? as usize;
        let mut maps = Vec::with_capacity(nmaps);
        let mut off = 40;
        for _ in 0..nmaps {
            maps.push(PageMapping {
                vpn: word(off)?,
                ppn: word(off + 4)?,
                perms: Perms::from_bits(word(off + 8)?),
            });
            off += 12;
        }
        if text_len % INST_BYTES as usize != 0 {
            return Err(MachineError::TruncatedImage);
        }
        let text_bytes = bytes
            .get(off..off + text_len)
            .ok_or(MachineError::TruncatedImage)?;
        let mut text = Vec::with_capacity(text_len / INST_BYTES as usize);
        for chunk in text_bytes.chunks_exact(INST_BYTES as usize) {
            text.push(Instruction::decode(chunk)?);
        }
        off += text_len;
        let data = bytes
            .get(off..off + data_len)
            .ok_or(MachineError::TruncatedImage)?
            .to_vec();
        let p = Program {
            text,
            text_base,
            data,
            data_base,
            entry,
            entry_mode,
            trap_vector,
            maps,
        };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::isa::Opcode;

    fn tiny() -> Program {
        Program {
            text: vec![
                Instruction::new(Opcode::Addi, 1, 0, 0, 5),
                Instruction::new(Opcode::Halt, 0, 0, 0, 0),
            ],
            text_base: 0x1000,
            data: vec![1, 2, 3],
            data_base: 0x2000,
            entry: 0x1000,
            entry_mode: Mode::Machine,
            trap_vector: None,
            maps: vec![
                PageMapping { vpn: 1, ppn: 1, perms: Perms::rx() },
                PageMapping { vpn: 2, ppn: 2, perms: Perms::rw() },
            ],
        }
    }

    #[test]
    fn image_roundtrip() {
        let p = tiny();
        let img = p.to_image();
        assert_eq!(Program::from_image(&img).unwrap(), p);
    }

    #[test]
    fn overlap_rejected() {
        let mut p = tiny();
        p.data_base = 0x1004;
        p.maps[1].vpn = 1;
        assert!(matches!(p.validate(), Err(MachineError::OverlappingSegments)));
    }

    #[test]
    fn unmapped_page_rejected() {
        let mut p = tiny();
        p.maps.pop();
        assert!(matches!(
            p.validate(),
            Err(MachineError::UnmappedSegmentPage { vpn: 2 })
        ));
    }
}
