use super::*;
use crate::machine::asm::assemble;
use crate::machine::interp::RunOutcome;

fn core_for(src: &str) -> Core {
    let p = assemble(src).unwrap();
    let cfg = CoreConfig { trace_enabled: true, ..Default::default() };
    Core::new(cfg, &p).unwrap()
}

fn run_to_halt(core: &mut Core) {
    let out = core.run(1_000_000);
    assert_eq!(out, RunOutcome::Halted, "program must halt");
}

fn timeline_of(core: &Core, pc: u32) -> InstrTimeline {
    *core
        .timelines()
        .iter()
        .find(|t| t.pc == pc && t.wb_cycle.is_some())
        .unwrap_or_else(|| panic!("no retired instruction at pc 0x{:x}", pc))
}

#[test]
fn independent_alu_sustains_cpi_1() {
    // 16 addis fill two icache lines; after the cold fetches, retirement
    // is back-to-back
    let body: String = (0..16).map(|i| format!("    addi x{}, x0, {}\n", (i % 8) + 1, i)).collect();
    let mut core = core_for(&format!(".text 0x1000\n{}halt\n", body));
    run_to_halt(&mut core);
    let tl = core.timelines();
    let wbs: Vec<u64> = tl
        .iter()
        .filter(|t| t.opcode == Opcode::Addi)
        .map(|t| t.wb_cycle.unwrap())
        .collect();
    // within each 8-instruction line, consecutive retirements are 1 apart
    for w in wbs.windows(2) {
        let delta = w[1] - w[0];
        assert!(delta == 1 || delta == 49, "CPI 1 between line misses, got {}", delta);
    }
    assert!(wbs.windows(2).filter(|w| w[1] - w[0] == 1).count() >= 12);
}

#[test]
fn load_use_costs_exactly_one_bubble() {
    // lw; dependent add -> exactly 1 bubble between their write-backs
    // beyond the CPI-1 baseline. The hand diagram: lw WB at t, add stalls
    // one cycle in decode, add WB at t+2.
    let src = "\
.text 0x1000
    addi x1, x0, 0x10000
    lw x2, 0(x1)
    add x3, x2, x2
    halt
.data 0x10000
    .word 7
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    let lw = timeline_of(&core, 0x1008);
    let add = timeline_of(&core, 0x1010);
    assert_eq!(add.wb_cycle.unwrap() - lw.wb_cycle.unwrap(), 2);
    assert_eq!(core.arch.regs[3], 14);
    assert_eq!(core.ledger.load_use, 1);
}

#[test]
fn independent_load_pair_no_bubble() {
    let src = "\
.text 0x1000
    addi x1, x0, 0x10000
    lw x2, 0(x1)
    addi x4, x0, 9
    halt
.data 0x10000
    .word 7
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    let lw = timeline_of(&core, 0x1008);
    let addi = timeline_of(&core, 0x1010);
    assert_eq!(addi.wb_cycle.unwrap() - lw.wb_cycle.unwrap(), 1);
    assert_eq!(core.ledger.load_use, 0);
}

#[test]
fn mispredicted_branch_squashes_two_fetches() {
    // a taken branch seen for the first time: predicted not-taken,
    // resolves at execute, squashes the two younger fetch slots
    let src = "\
.text 0x1000
    addi x1, x0, 1
    beq x1, x1, skip
    addi x2, x0, 99
    addi x3, x0, 99
skip:
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    assert_eq!(core.mispredicts, 1);
    assert_eq!(core.squashed_fetches, 2);
    assert_eq!(core.arch.regs[2], 0);
    assert_eq!(core.arch.regs[3], 0);
    // wrong-path instructions never retire
    assert!(core
        .timelines()
        .iter()
        .all(|t| !(t.pc == 0x1010 && t.wb_cycle.is_some())));
}

#[test]
fn trained_branch_predicts_with_no_penalty() {
    // a loop branch trains once the global history saturates: warmup
    // mispredicts are bounded by the history depth, the long steady state
    // is penalty-free
    let src = "\
.text 0x1000
    addi x1, x0, 0
    addi x2, x0, 40
loop:
    addi x1, x1, 1
    blt x1, x2, loop
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    assert_eq!(core.arch.regs[1], 40);
    // 40 iterations: at most ghr-depth + saturation + loop-exit mispredicts
    assert!(core.mispredicts <= 12, "got {} mispredicts", core.mispredicts);
    assert!(core.mispredicts >= 1);
}

#[test]
fn flushx_matches_pipeline_control_table() {
    // [addi; flushx; addi]: the older instruction commits before flushx
    // executes, and the younger fetch waits for the cycle after flushx's
    // write-back
    let src = "\
.text 0x1000
    addi x1, x0, 1
    flushx
    addi x2, x0, 2
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    let i0 = timeline_of(&core, 0x1000);
    let fx = timeline_of(&core, 0x1008);
    let i2 = timeline_of(&core, 0x1010);
    assert!(
        i0.wb_cycle.unwrap() < fx.ex_cycle.unwrap(),
        "older WB {} must precede flushx EX {}",
        i0.wb_cycle.unwrap(),
        fx.ex_cycle.unwrap()
    );
    assert!(fx.wb_cycle.unwrap() < i2.if_cycle.unwrap());
    assert_eq!(
        i2.if_cycle.unwrap(),
        fx.wb_cycle.unwrap() + 1,
        "younger fetch starts the cycle after flushx write-back"
    );
    // clean cache: memory stage occupies exactly nsets*assoc cycles
    assert_eq!(fx.wb_cycle.unwrap() - fx.me_cycle.unwrap(), 512);
    let sum = core.last_flushx.unwrap();
    assert_eq!(sum.me_cycles, 512);
    assert_eq!(sum.wb_cycles, 1);
    assert_eq!(sum.dirty_lines, 0);
    // drain: flushx EX strictly one cycle after the older WB
    assert_eq!(fx.ex_cycle.unwrap(), i0.wb_cycle.unwrap() + 1);
    assert_eq!(core.arch.regs[1], 1);
    assert_eq!(core.arch.regs[2], 2);
}

#[test]
fn flushx_me_cycles_follow_dirty_line_law() {
    // dirty 10 lines then flushx: ME occupancy == 512 + 8*10
    let src = format!(
        "{}\
.text 0x1000
    addi x1, x0, 0x20000
    addi x2, x0, 0
    addi x3, x0, 10
dirty:
    sw x2, 0(x1)
    addi x1, x1, 64
    addi x2, x2, 1
    blt x2, x3, dirty
    flushx
    halt
",
        ".map 0x20000 0x20000 rw\n"
    );
    let mut core = core_for(&src);
    run_to_halt(&mut core);
    let sum = core.last_flushx.unwrap();
    assert_eq!(sum.dirty_lines, 10);
    assert_eq!(sum.me_cycles, 512 + 8 * 10);
    assert_eq!(sum.writebacks, 10);
}

#[test]
fn flushx_retires_as_one_instruction() {
    let src = ".text 0x1000\nflushx\nhalt\n";
    let mut core = core_for(src);
    let mut retired_flushx = 0;
    loop {
        let out = core.step();
        if let Some(r) = &out.retired {
            if r.opcode == Opcode::Flushx {
                retired_flushx += 1;
                // instret counted it exactly once
                assert_eq!(core.arch.csr_instret, 1);
            }
        }
        if out.halted {
            break;
        }
    }
    assert_eq!(retired_flushx, 1);
}

#[test]
fn flushx_leaves_sof_reset_at_retirement() {
    let src = "\
.map 0x20000 0x20000 rw
.text 0x1000
    addi x1, x0, 0x20000
    sw x1, 0(x1)
    lw x2, 64(x1)
    addi x3, x0, 3
loop:
    addi x3, x3, -1
    bne x3, x0, loop
    flushx
    halt
";
    let mut core = core_for(src);
    loop {
        let out = core.step();
        if let Some(r) = &out.retired {
            if r.opcode == Opcode::Flushx {
                break;
            }
        }
        assert!(out.fault.is_none());
    }
    assert!(core.sof_reset(), "every SoF component reset right after flushx retires");
    // and the next fetch misses the I-cache and I-TLB
    run_to_halt(&mut core);
    assert!(core.icache.valid_line_count() > 0);
}

#[test]
fn flushx_illegal_in_user_mode() {
    let src = ".mode user\n.text 0x1000\nflushx\nhalt\n";
    let mut core = core_for(src);
    let out = core.run(10_000);
    match out {
        RunOutcome::Fault(ExecError::IllegalInUserMode { mnemonic: "flushx", .. }) => {}
        other => panic!("expected illegal-instruction fault, got {:?}", other),
    }
    // nothing was flushed or touched beyond the fetch path
    assert_eq!(core.dcache.valid_line_count(), 0);
}

#[test]
fn rf_flush_zeroes_registers() {
    let src = ".text 0x1000\naddi x5, x0, 77\nflushx\nhalt\n";
    let p = assemble(src).unwrap();
    let cfg = CoreConfig { rf_flush_enabled: true, trace_enabled: true, ..Default::default() };
    let mut core = Core::new(cfg, &p).unwrap();
    loop {
        let out = core.step();
        if let Some(r) = &out.retired {
            if r.opcode == Opcode::Flushx {
                break;
            }
        }
    }
    assert!(core.arch.regs[1..].iter().all(|&r| r == 0));
}

#[test]
fn csrr_cycle_delta_equals_access_latency() {
    // csrr t0; lw; csrr t1 measured around a cold and a warm load: the
    // delta equals the model latency (50 cold, 2 warm)
    let src = "\
.map 0x20000 0x20000 rw
.text 0x1000
    addi x1, x0, 0x20000
    lw x9, 512(x1)
    csrr x10, cycle
    lw x5, 0(x1)
    csrr x11, cycle
    csrr x12, cycle
    lw x6, 0(x1)
    csrr x13, cycle
    sub x20, x11, x10
    sub x21, x13, x12
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    assert_eq!(core.arch.regs[20], 50, "cold load measures the miss latency");
    assert_eq!(core.arch.regs[21], 2, "warm load measures the hit latency");
}

#[test]
fn cycle_ledger_partitions_all_cycles() {
    let src = "\
.map 0x20000 0x20000 rw
.text 0x1000
    addi x1, x0, 0x20000
    addi x2, x0, 50
loop:
    sw x2, 0(x1)
    lw x3, 64(x1)
    add x4, x3, x2
    addi x1, x1, 4
    addi x2, x2, -1
    bne x2, x0, loop
    flushx
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    assert_eq!(core.cycle(), core.ledger.total(), "ledger must partition cycles");
    assert_eq!(core.ledger.unknown, 0, "every idle cycle classified");
    assert_eq!(core.ledger.retired, core.retired_total());
}

#[test]
fn ecall_mret_roundtrip_with_serialization() {
    let src = "\
.mode user
.text 0x1000
    addi x1, x0, 5
    ecall
    addi x2, x0, 6
    halt
handler:
    addi x3, x0, 7
    mret
.trap handler
";
    let mut core = core_for(src);
    let mut traps = Vec::new();
    loop {
        let out = core.step();
        if let Some(t) = out.trap {
            traps.push(t);
        }
        if out.halted || out.fault.is_some() {
            break;
        }
    }
    assert_eq!(traps, vec![TrapKind::Ecall, TrapKind::Mret]);
    assert_eq!(core.arch.regs[1], 5);
    assert_eq!(core.arch.regs[2], 6);
    assert_eq!(core.arch.regs[3], 7);
    assert_eq!(core.arch.mode, Mode::User);
}

#[test]
fn ecall_without_trap_vector_faults() {
    let src = ".text 0x1000\necall\nhalt\n";
    let mut core = core_for(src);
    match core.run(10_000) {
        RunOutcome::Fault(ExecError::NoTrapVector { .. }) => {}
        other => panic!("expected trap-vector fault, got {:?}", other),
    }
}

#[test]
fn dcflush_sw_bad_selector_faults() {
    let src = ".text 0x1000\naddi x1, x0, 0x90000\ndcflush.sw x1\nhalt\n";
    let mut core = core_for(src);
    match core.run(10_000) {
        RunOutcome::Fault(ExecError::BadFlushSelector { set: 0, way: 9, .. }) => {}
        other => panic!("expected selector fault, got {:?}", other),
    }
}

#[test]
fn call_return_trains_ras() {
    let src = "\
.text 0x1000
    addi x5, x0, 0
    jal x1, func
    jal x1, func
    jal x1, func
    halt
func:
    addi x5, x5, 1
    jalr x0, x1, 0
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    assert_eq!(core.arch.regs[5], 3);
}

#[test]
fn host_flush_now_matches_flushx_cost_law() {
    let src = "\
.map 0x20000 0x20000 rw
.text 0x1000
    addi x1, x0, 0x20000
    sw x1, 0(x1)
    sw x1, 64(x1)
    sw x1, 128(x1)
    halt
";
    let mut core = core_for(src);
    run_to_halt(&mut core);
    core.reset_for_next_context();
    let before = core.cycle();
    let sum = core.flush_now();
    assert_eq!(sum.dirty_lines, 3);
    assert_eq!(sum.me_cycles, 512 + 24);
    assert_eq!(core.cycle() - before, 512 + 24 + 1);
    assert!(core.sof_reset());
}
