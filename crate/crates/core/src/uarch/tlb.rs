//! Two-level TLB hierarchy: fully associative L1 instruction and data TLBs
//! and a unified set-associative L2, with a fixed-latency page-table walk.

use crate::machine::interp::{AccessType, ExecError, PageTable};
use crate::machine::program::{Perms, PAGE_BYTES, PAGE_SHIFT};
use crate::uarch::UarchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbConfig {
    pub itlb_entries: u32,
    pub dtlb_entries: u32,
    pub l2_entries: u32,
    pub l2_assoc: u32,
    pub l2_hit_extra_cycles: u64,
    pub walk_cycles: u64,
}

impl TlbConfig {
    /// 32-entry L1 I/D TLBs, 128-entry 4-way L2, +2-cycle L2 hit,
    /// 100-cycle walk.
    pub fn default_two_level() -> TlbConfig {
        TlbConfig {
            itlb_entries: 32,
            dtlb_entries: 32,
            l2_entries: 128,
            l2_assoc: 4,
            l2_hit_extra_cycles: 2,
            walk_cycles: 100,
        }
    }

    pub fn validate(&self) -> Result<(), UarchError> {
        for (name, v) in [
            ("itlb_entries", self.itlb_entries),
            ("dtlb_entries", self.dtlb_entries),
            ("l2_entries", self.l2_entries),
            ("l2_assoc", self.l2_assoc),
        ] {
            if v == 0 || !v.is_power_of_two() {
                return Err(UarchError::NotPowerOfTwo { field: name, value: v });
            }
        }
        if self.l2_assoc > self.l2_entries {
            return Err(UarchError::NotPowerOfTwo { field: "l2_assoc", value: self.l2_assoc });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub vpn: u32,
    pub ppn: u32,
    pub perms: Perms,
    pub valid: bool,
}

impl TlbEntry {
    fn invalid() -> TlbEntry {
        TlbEntry { vpn: 0, ppn: 0, perms: Perms::default(), valid: false }
    }
}

/// Fully associative array with true-LRU replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FullAssocTlb {
    entries: Vec<TlbEntry>,
    lru: Vec<u32>, // least-recently used first
}

impl FullAssocTlb {
    fn new(n: u32) -> FullAssocTlb {
        FullAssocTlb {
            entries: vec![TlbEntry::invalid(); n as usize],
            lru: (0..n).collect(),
        }
    }

    fn touch(&mut self, slot: u32) {
        let pos = self.lru.iter().position(|&s| s == slot).unwrap();
        self.lru.remove(pos);
        self.lru.push(slot);
    }

    fn lookup(&mut self, vpn: u32) -> Option<TlbEntry> {
        let slot = self
            .entries
            .iter()
            .position(|e| e.valid && e.vpn == vpn)? as u32;
        self.touch(slot);
        Some(self.entries[slot as usize])
    }

    fn fill(&mut self, entry: TlbEntry) {
        let slot = self
            .entries
            .iter()
            .position(|e| !e.valid)
            .unwrap_or(self.lru[0] as usize);
        self.entries[slot] = entry;
        self.touch(slot as u32);
    }

    fn flush(&mut self) {
        for e in &mut self.entries {
            *e = TlbEntry::invalid();
        }
        self.lru = (0..self.entries.len() as u32).collect();
    }

    fn valid_count(&self) -> u32 {
        self.entries.iter().filter(|e| e.valid).count() as u32
    }

    fn is_reset(&self) -> bool {
        self.entries.iter().all(|e| !e.valid)
            && self.lru.iter().copied().eq(0..self.entries.len() as u32)
    }
}

/// Set-associative array (the unified L2).
#[derive(Debug, Clone, PartialEq, Eq)]
struct SetAssocTlb {
    sets: Vec<Vec<TlbEntry>>,
    lru: Vec<Vec<u32>>,
    nsets: u32,
}

impl SetAssocTlb {
    fn new(entries: u32, assoc: u32) -> SetAssocTlb {
        let nsets = entries / assoc;
        SetAssocTlb {
            sets: (0..nsets)
                .map(|_| vec![TlbEntry::invalid(); assoc as usize])
                .collect(),
            lru: (0..nsets).map(|_| (0..assoc).collect()).collect(),
            nsets,
        }
    }

    fn set_of(&self, vpn: u32) -> u32 {
        vpn & (self.nsets - 1)
    }

    fn touch(&mut self, set: u32, way: u32) {
        let order = &mut self.lru[set as usize];
        let pos = order.iter().position(|&w| w == way).unwrap();
        order.remove(pos);
        order.push(way);
    }

    fn lookup(&mut self, vpn: u32) -> Option<TlbEntry> {
        let set = self.set_of(vpn);
        let way = self.sets[set as usize]
            .iter()
            .position(|e| e.valid && e.vpn == vpn)? as u32;
        self.touch(set, way);
        Some(self.sets[set as usize][way as usize])
    }

    fn fill(&mut self, entry: TlbEntry) {
        let set = self.set_of(entry.vpn);
        let way = self.sets[set as usize]
            .iter()
            .position(|e| !e.valid)
            .unwrap_or(self.lru[set as usize][0] as usize);
        self.sets[set as usize][way] = entry;
        self.touch(set, way as u32);
    }

    fn flush(&mut self) {
        for set in &mut self.sets {
            for e in set {
                *e = TlbEntry::invalid();
            }
        }
        for order in &mut self.lru {
            let n = order.len() as u32;
            *order = (0..n).collect();
        }
    }

    fn valid_count(&self) -> u32 {
        self.sets
            .iter()
            .flat_map(|s| s.iter())
            .filter(|e| e.valid)
            .count() as u32
    }

    fn is_reset(&self) -> bool {
        self.sets.iter().all(|s| s.iter().all(|e| !e.valid))
            && self
                .lru
                .iter()
                .all(|o| o.iter().copied().eq(0..o.len() as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbLevel {
    L1,
    L2,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub paddr: u32,
    pub level: TlbLevel,
    pub extra_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlbHierarchy {
    pub config: TlbConfig,
    itlb: FullAssocTlb,
    dtlb: FullAssocTlb,
    l2: SetAssocTlb,
}

impl TlbHierarchy {
    pub fn new(config: TlbConfig) -> TlbHierarchy {
        config.validate().expect("invalid tlb config");
        TlbHierarchy {
            config,
            itlb: FullAssocTlb::new(config.itlb_entries),
            dtlb: FullAssocTlb::new(config.dtlb_entries),
            l2: SetAssocTlb::new(config.l2_entries, config.l2_assoc),
        }
    }

    /// Translate through the hierarchy: L1 hit adds no cycles, an L2 hit
    /// adds `l2_hit_extra_cycles` and refills L1, a full miss walks the page
    /// table (`walk_cycles`) and refills both levels. Permission checks use
    /// the cached entry, which matches the page table as of the last fill.
    pub fn translate(
        &mut self,
        vaddr: u32,
        kind: AccessType,
        page_table: &PageTable,
        pc: u32,
    ) -> Result<Translation, ExecError> {
        let vpn = vaddr >> PAGE_SHIFT;
        let l1 = match kind {
            AccessType::Fetch => &mut self.itlb,
            _ => &mut self.dtlb,
        };
        let (entry, level, extra) = if let Some(e) = l1.lookup(vpn) {
            (e, TlbLevel::L1, 0)
        } else if let Some(e) = self.l2.lookup(vpn) {
            l1.fill(e);
            (e, TlbLevel::L2, self.config.l2_hit_extra_cycles)
        } else {
            let (ppn, perms) = page_table
                .lookup(vpn)
                .ok_or(ExecError::PageFaultUnmapped { vaddr, kind: kind.into(), pc })?;
            let e = TlbEntry { vpn, ppn, perms, valid: true };
            self.l2.fill(e);
            l1.fill(e);
            (e, TlbLevel::Walk, self.config.walk_cycles)
        };
        let ok = match kind {
            AccessType::Fetch => entry.perms.exec,
            AccessType::Load => entry.perms.read,
            AccessType::Store => entry.perms.write,
        };
        if !ok {
            return Err(ExecError::PageFaultPerms { vaddr, kind: kind.into(), pc });
        }
        Ok(Translation {
            paddr: (entry.ppn << PAGE_SHIFT) | (vaddr & (PAGE_BYTES - 1)),
            level,
            extra_cycles: extra,
        })
    }

    /// Clear every valid bit at every level and reset replacement state.
    pub fn flush_all(&mut self) {
        self.itlb.flush();
        self.dtlb.flush();
        self.l2.flush();
    }

    pub fn valid_counts(&self) -> (u32, u32, u32) {
        (self.itlb.valid_count(), self.dtlb.valid_count(), self.l2.valid_count())
    }

    pub fn is_reset(&self) -> bool {
        self.itlb.is_reset() && self.dtlb.is_reset() && self.l2.is_reset()
    }

    pub fn dump(&self, out: &mut String) {
        let dump_full = |name: &str, t: &FullAssocTlb, out: &mut String| {
            for (i, e) in t.entries.iter().enumerate() {
                out.push_str(&format!(
                    "{} slot={:02} valid={} vpn=0x{:05x} ppn=0x{:05x} perms={}\n",
                    name, i, e.valid as u8,
                    if e.valid { e.vpn } else { 0 },
                    if e.valid { e.ppn } else { 0 },
                    if e.valid { e.perms.to_string() } else { "---".to_string() },
                ));
            }
            out.push_str(&format!("{} lru={:?}\n", name, t.lru));
        };
        dump_full("itlb", &self.itlb, out);
        dump_full("dtlb", &self.dtlb, out);
        for (s, set) in self.l2.sets.iter().enumerate() {
            for (w, e) in set.iter().enumerate() {
                out.push_str(&format!(
                    "l2tlb set={:02} way={} valid={} vpn=0x{:05x} ppn=0x{:05x} perms={}\n",
                    s, w, e.valid as u8,
                    if e.valid { e.vpn } else { 0 },
                    if e.valid { e.ppn } else { 0 },
                    if e.valid { e.perms.to_string() } else { "---".to_string() },
                ));
            }
            out.push_str(&format!("l2tlb set={:02} lru={:?}\n", s, self.l2.lru[s]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::program::PageMapping;
    use crate::machine::Program;

    fn table_with_pages(n: u32) -> PageTable {
        let p = Program {
            text: vec![crate::machine::Instruction::new(crate::machine::Opcode::Halt, 0, 0, 0, 0)],
            text_base: 0,
            data: vec![],
            data_base: 0,
            entry: 0,
            entry_mode: crate::machine::Mode::Machine,
            trap_vector: None,
            maps: (0..n)
                .map(|i| PageMapping { vpn: i, ppn: i, perms: Perms::rwx() })
                .collect(),
        };
        PageTable::from_program(&p)
    }

    #[test]
    fn repeat_translation_is_l1() {
        let pt = table_with_pages(4);
        let mut t = TlbHierarchy::new(TlbConfig::default_two_level());
        t.translate(0x1000, AccessType::Load, &pt, 0).unwrap();
        let r = t.translate(0x1004, AccessType::Load, &pt, 0).unwrap();
        assert_eq!(r.level, TlbLevel::L1);
        assert_eq!(r.extra_cycles, 0);
        assert_eq!(r.paddr, 0x1004);
    }

    #[test]
    fn l1_capacity_spill_hits_l2() {
        // touch 33 distinct data pages, then re-touch the first: L1 (32
        // entries) evicted it but L2 (128) still holds it
        let pt = table_with_pages(64);
        let mut t = TlbHierarchy::new(TlbConfig::default_two_level());
        for vpn in 0..33u32 {
            t.translate(vpn << PAGE_SHIFT, AccessType::Load, &pt, 0).unwrap();
        }
        let r = t.translate(0, AccessType::Load, &pt, 0).unwrap();
        assert_eq!(r.level, TlbLevel::L2);
        assert_eq!(r.extra_cycles, 2);
    }

    #[test]
    fn cycling_129_pages_walks() {
        let pt = table_with_pages(256);
        let mut t = TlbHierarchy::new(TlbConfig::default_two_level());
        for vpn in 0..129u32 {
            t.translate(vpn << PAGE_SHIFT, AccessType::Load, &pt, 0).unwrap();
        }
        let mut walks = 0;
        for vpn in 0..129u32 {
            let r = t.translate(vpn << PAGE_SHIFT, AccessType::Load, &pt, 0).unwrap();
            if r.level == TlbLevel::Walk {
                walks += 1;
            }
        }
        assert!(walks >= 1, "cycling 129 pages through a 128-entry L2 must walk");
    }

    #[test]
    fn flush_clears_every_level() {
        let pt = table_with_pages(64);
        let mut t = TlbHierarchy::new(TlbConfig::default_two_level());
        for vpn in 0..40u32 {
            t.translate(vpn << PAGE_SHIFT, AccessType::Load, &pt, 0).unwrap();
            t.translate(vpn << PAGE_SHIFT, AccessType::Fetch, &pt, 0).unwrap();
        }
        t.flush_all();
        assert_eq!(t.valid_counts(), (0, 0, 0));
        assert!(t.is_reset());
        // next touch is a walk again
        let r = t.translate(0, AccessType::Load, &pt, 0).unwrap();
        assert_eq!(r.level, TlbLevel::Walk);
        assert_eq!(r.extra_cycles, 100);
    }

    #[test]
    fn perm_denied_faults() {
        let p = Program {
            text: vec![crate::machine::Instruction::new(crate::machine::Opcode::Halt, 0, 0, 0, 0)],
            text_base: 0,
            data: vec![],
            data_base: 0,
            entry: 0,
            entry_mode: crate::machine::Mode::Machine,
            trap_vector: None,
            maps: vec![PageMapping { vpn: 0, ppn: 0, perms: Perms::rx() }],
        };
        let pt = PageTable::from_program(&p);
        let mut t = TlbHierarchy::new(TlbConfig::default_two_level());
        let err = t.translate(0x10, AccessType::Store, &pt, 0).unwrap_err();
        assert!(matches!(err, ExecError::PageFaultPerms { .. }));
    }
}
