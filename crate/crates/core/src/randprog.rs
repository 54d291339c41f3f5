//! Seeded random program generation for co-simulation and property tests.
//!
//! Generated programs terminate by construction: control flow is forward
//! branches, forward jumps, and single-level calls into a trailing helper
//! block. Memory traffic stays inside a private identity-mapped scratch
//! region. `csrr cycle` is never generated (its value is timing-dependent
//! by construction and cannot co-simulate); `csrr instret` is fair game.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::machine::asm::{assemble, DEFAULT_TEXT_BASE};
use crate::machine::pack_set_way;
use crate::machine::program::Program;

pub const SCRATCH_BASE: u32 = 0x20000;
pub const SCRATCH_PAGES: u32 = 4;

#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    /// number of body instructions to generate
    pub len: usize,
    /// sprinkle privileged flush instructions through the body
    pub flush_ops: bool,
    /// insert 1..=3 flushx instructions at random body positions
    pub flushx: bool,
    /// cache geometry for dcflush.sw selectors
    pub nsets: u32,
    pub assoc: u32,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { len: 120, flush_ops: false, flushx: false, nsets: 64, assoc: 8 }
    }
}

/// Generate a random machine-mode program as assembly source.
pub fn generate_source(seed: u64, opts: &GenOptions) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut lines: Vec<String> = Vec::new();
    // x20 holds the scratch base throughout; re-established after every
    // flushx in case register-file flushing is enabled
    let setup = format!("    addi x20, x0, 0x{:x}", SCRATCH_BASE);
    lines.push(setup.clone());
    for r in 1..8 {
        lines.push(format!("    addi x{}, x0, {}", r, rng.gen_range(-100..100)));
    }

    let mut flushx_slots: Vec<usize> = Vec::new();
    if opts.flushx {
        let n = rng.gen_range(1..=3);
        for _ in 0..n {
            flushx_slots.push(rng.gen_range(0..opts.len));
        }
    }

    let scratch_span = SCRATCH_PAGES * crate::machine::PAGE_BYTES;
    let mut i = 0;
    while i < opts.len {
        if flushx_slots.contains(&i) {
            lines.push("    flushx".to_string());
            lines.push(setup.clone());
        }
        let reg = |rng: &mut StdRng| rng.gen_range(0..16u8);
        let regnz = |rng: &mut StdRng| rng.gen_range(1..16u8);
        let pick = rng.gen_range(0..100);
        let line = match pick {
            0..=44 => {
                let op = ["add", "sub", "and", "or", "xor", "sll", "srl", "slt"]
                    [rng.gen_range(0..8)];
                format!("    {} x{}, x{}, x{}", op, reg(&mut rng), reg(&mut rng), reg(&mut rng))
            }
            45..=54 => format!(
                "    addi x{}, x{}, {}",
                reg(&mut rng),
                reg(&mut rng),
                rng.gen_range(-2048..2048)
            ),
            55..=58 => format!("    lui x{}, {}", reg(&mut rng), rng.gen_range(0..0x1000)),
            59..=68 => {
                let word = rng.gen_bool(0.7);
                let off = if word {
                    rng.gen_range(0..scratch_span / 4) * 4
                } else {
                    rng.gen_range(0..scratch_span)
                };
                format!(
                    "    {} x{}, {}(x20)",
                    if word { "lw" } else { "lb" },
                    regnz(&mut rng),
                    off
                )
            }
            69..=78 => {
                let word = rng.gen_bool(0.7);
                let off = if word {
                    rng.gen_range(0..scratch_span / 4) * 4
                } else {
                    rng.gen_range(0..scratch_span)
                };
                format!(
                    "    {} x{}, {}(x20)",
                    if word { "sw" } else { "sb" },
                    reg(&mut rng),
                    off
                )
            }
            79..=90 => {
                // forward branch skipping 1..=3 instructions
                let op = ["beq", "bne", "blt", "bge"][rng.gen_range(0..4)];
                let skip = rng.gen_range(1..=3u32);
                format!(
                    "    {} x{}, x{}, {}",
                    op,
                    reg(&mut rng),
                    reg(&mut rng),
                    (skip + 1) * 8
                )
            }
            91..=93 => {
                let skip = rng.gen_range(1..=3u32);
                format!("    jal x0, {}", (skip + 1) * 8)
            }
            94..=95 => format!("    csrr x{}, instret", regnz(&mut rng)),
            _ => {
                if opts.flush_ops {
                    match rng.gen_range(0..5) {
                        0 => {
                            let sel = pack_set_way(
                                rng.gen_range(0..opts.nsets),
                                rng.gen_range(0..opts.assoc),
                            );
                            lines.push(format!("    addi x19, x0, {}", sel));
                            "    dcflush.sw x19".to_string()
                        }
                        1 => "    icinv.all".to_string(),
                        2 => "    tlbinv.all".to_string(),
                        3 => "    bpinv.all".to_string(),
                        _ => "    fence.flush".to_string(),
                    }
                } else {
                    format!("    addi x{}, x0, {}", reg(&mut rng), rng.gen_range(-50..50))
                }
            }
        };
        lines.push(line);
        i += 1;
    }
    // pad so forward branches near the end always land on real
    // instructions before the halt
    for _ in 0..4 {
        lines.push("    addi x0, x0, 0".to_string());
    }
    lines.push("    halt".to_string());

    let mut maps = String::new();
    for p in 0..SCRATCH_PAGES {
        let a = SCRATCH_BASE + p * crate::machine::PAGE_BYTES;
        maps.push_str(&format!(".map 0x{:x} 0x{:x} rw\n", a, a));
    }
    format!("{}.text 0x{:x}\n{}\n", maps, DEFAULT_TEXT_BASE, lines.join("\n"))
}

/// Generate and assemble a random program.
pub fn generate(seed: u64, opts: &GenOptions) -> Program {
    let src = generate_source(seed, opts);
    assemble(&src).unwrap_or_else(|e| panic!("generated program must assemble: {e}\n{src}"))
}
