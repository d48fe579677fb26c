use pimsim::compiler::{build_graph, compile, lower_to_commands, plan_instruction, ColOp, CommandKind, InstructionStream, Stage, RowRun, TokenHint, WorkPlan};
use pimsim::config::{lookup_model, GptModelConfig, SystemConfig};
use pimsim::engine::{simulate, BankState, Event, LatencyModel, RowCycle, RunStep, Recorder, Simulator, Stats, TimingChecker, TraceSink};
use pimsim::mapper::build_memory_map;
use pimsim::report::run;

const NS: u64 = 1000;

fn lat() -> LatencyModel {
    LatencyModel::new(&SystemConfig::baseline())
}

fn one_row(cols: u32, op: ColOp) -> RowRun {
    RowRun { first_row: 3, row_stride: 1, rows: 1, cols_first: cols, cols_mid: cols, cols_last: cols, op }
}

#[test]
fn fresh_row_mac_takes_trcd_plus_columns() {
    let l = lat();
    let mut b = BankState::default();
    let (ev, step, _) = b.exec_rows(0, &one_row(64, ColOp::Mac), 0, 0, u64::MAX, &l);
    // ACT at 0, first column at 12 ns, 64 columns one cycle apart.
    assert_eq!(step, RunStep::Done { end: (12 + 64) * NS, closed: None });
    assert_eq!(ev.unwrap().act0, Some(0));
}

#[test]
fn open_row_mac_skips_activation() {
    let l = lat();
    let mut b = BankState::default();
    b.exec_rows(0, &one_row(64, ColOp::Mac), 0, 0, u64::MAX, &l);
    let (ev, step, _) = b.exec_rows(0, &one_row(64, ColOp::Mac), 0, 76 * NS, u64::MAX, &l);
    let ev = ev.unwrap();
    assert_eq!(ev.act0, None);
    assert_eq!(ev.col0, 76 * NS);
    assert_eq!(step, RunStep::Done { end: 140 * NS, closed: None });
}

#[test]
fn single_value_write_pays_act_write_precharge() {
    let l = lat();
    let mut b = BankState::default();
    let (ev, step, _) = b.exec_rows(0, &one_row(1, ColOp::Write), 0, 0, u64::MAX, &l);
    // WR at 12 ns; PRE waits for tRAS (32 ns) which exceeds WR + tWR (24 ns).
    assert_eq!(ev.unwrap().last_pre, Some(32 * NS));
    assert_eq!(step, RunStep::Done { end: 13 * NS, closed: Some(32 * NS) });
    assert_eq!(b.act_ready, 44 * NS);
}

#[test]
fn issue_command_legality() {
    let l = lat();
    let mut b = BankState::default();
    assert_eq!(b.issue_command(0, CommandKind::Act { row: 1 }, 100 * NS, &l), Ok(112 * NS));
    let rd = CommandKind::Col { op: ColOp::Read, row: 1 };
    let e = b.clone().issue_command(0, rd, 111 * NS, &l).unwrap_err();
    assert_eq!(e.constraint, "tRCD");
    let wr = CommandKind::Col { op: ColOp::Write, row: 1 };
    b.issue_command(0, wr, 125 * NS, &l).unwrap();
    assert_eq!(b.clone().issue_command(0, CommandKind::Pre, 136 * NS, &l).unwrap_err().constraint, "tWR");
    assert!(b.clone().issue_command(0, CommandKind::Pre, 137 * NS, &l).is_ok());
    let mut early = b.clone();
    let mut c = BankState::default();
    c.issue_command(0, CommandKind::Act { row: 0 }, 0, &l).unwrap();
    assert_eq!(c.issue_command(0, CommandKind::Pre, 31 * NS, &l).unwrap_err().constraint, "tRAS");
    early.issue_command(0, CommandKind::Pre, 137 * NS, &l).unwrap();
    assert_eq!(early.issue_command(0, CommandKind::Act { row: 2 }, 148 * NS, &l).unwrap_err().constraint, "tRP");
    assert_eq!(early.issue_command(0, CommandKind::Act { row: 2 }, 149 * NS, &l), Ok(161 * NS));
}

#[test]
fn empty_stream_is_empty_trace() {
    let cfg = SystemConfig::baseline();
    let m = lookup_model("gpt2-small").unwrap().config;
    let map = build_memory_map(&m, &cfg.geometry, &cfg.pim, 1).unwrap();
    let stream = InstructionStream { graph: build_graph(&m, 1), instructions: vec![] };
    let t = simulate(&stream, &map, &cfg).unwrap();
    assert_eq!(t.final_time, 0);
    assert!(t.events.is_empty());
}

/// Replays every PIM instruction of a token step both as closed-form row runs and as
/// explicit commands issued at their earliest legal time.
fn dual_route(model: &GptModelConfig, cfg: &SystemConfig, position: u32) {
    let l = LatencyModel::new(cfg);
    let map = build_memory_map(model, &cfg.geometry, &cfg.pim, position + 3).unwrap();
    let stream = compile(&build_graph(model, position), &map, cfg, TokenHint { token: 5 }).unwrap();
    let mut plan = WorkPlan::default();
    let mut checked = 0;
    for ins in &stream.instructions {
        plan_instruction(ins, &map, cfg.pim.mac_width, &mut plan);
        if plan.banks.is_empty() {
            continue;
        }
        let cmds = lower_to_commands(ins, &map, cfg);
        for (gi, runs) in plan.bank_runs() {
            let mut fast = BankState::default();
            let mut fast_end = 0;
            let mut fast_acts = 0;
            for r in runs {
                let (ev, step, _) = fast.exec_rows(gi, r, 0, 0, u64::MAX, &l);
                fast_acts += ev.unwrap().activations();
                match step {
                    RunStep::Done { end, .. } => fast_end = end,
                    RunStep::Paused { .. } => unreachable!(),
                }
            }
            let mut slow = BankState::default();
            let mut slow_end = 0;
            let mut slow_acts = 0;
            for c in cmds.iter().filter(|c| c.bank_index == gi) {
                let t = slow.earliest(c.kind, 0, &l);
                let done = slow.issue_command(gi, c.kind, t, &l).unwrap();
                match c.kind {
                    CommandKind::Col { .. } => slow_end = done,
                    CommandKind::Act { .. } => slow_acts += 1,
                    CommandKind::Pre => {}
                }
            }
            assert_eq!(fast_end, slow_end, "bank {gi} of {:?}", ins.opcode);
            assert_eq!(fast_acts, slow_acts, "bank {gi} of {:?}", ins.opcode);
            assert_eq!(fast, slow, "bank {gi} state after {:?}", ins.opcode);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn closed_form_matches_command_replay() {
    let cfg = SystemConfig::baseline();
    dual_route(&lookup_model("gpt2-small").unwrap().config, &cfg, 200);
    dual_route(&GptModelConfig::new("toy", 2, 64, 4, 96, 16), &cfg, 9);
    let mut small_rows = cfg.clone();
    small_rows.geometry.row_bytes = 128;
    small_rows.geometry.columns = (small_rows.geometry.capacity_per_channel / 8 / 16 / 128) as u32;
    dual_route(&GptModelConfig::new("toy", 2, 96, 4, 96, 64), &small_rows, 40);
    let mut wide = cfg;
    wide.pim.mac_width = 64;
    dual_route(&lookup_model("gpt3-small").unwrap().config, &wide, 77);
}

#[test]
fn checker_flags_injected_violations() {
    let cfg = SystemConfig::baseline();
    let mut c = TimingChecker::new(&cfg);
    let bad = RowCycle {
        bank: 0,
        op: ColOp::Mac,
        first_row: 0,
        row_stride: 1,
        rows: 1,
        cols: [4; 3],
        pre_before: None,
        act0: Some(0),
        col0: 11 * NS,
        act1: 0,
        period: 0,
        rcd: 12 * NS,
        col_step: NS,
        pre_lead: 12 * NS,
        last_pre: None,
    };
    c.event(&Event::Rows(bad));
    assert_eq!(c.violation().unwrap().constraint, "tRCD");
    let mut c = TimingChecker::new(&cfg);
    c.event(&Event::Rows(RowCycle { col0: 12 * NS, ..bad }));
    assert!(c.violation().is_none());
    c.event(&Event::Ref { channel: 0, at: 7_000 * NS });
    assert_eq!(c.violation().unwrap().constraint, "tRP");
    let mut c = TimingChecker::new(&cfg);
    c.finish(6_825 * NS);
    assert_eq!(c.violation().unwrap().constraint, "tREFI");
}

#[test]
fn refresh_count_tracks_elapsed_intervals() {
    let cfg = SystemConfig::baseline();
    let m = lookup_model("gpt2-small").unwrap().config;
    let r = run(&m, 24, &cfg).unwrap();
    assert!(r.timing_violations.is_empty(), "{:?}", r.timing_violations);
    let per_channel = r.refresh_count / cfg.geometry.channels as u64;
    let intervals = (r.total_latency * 1e12).round() as u64 / LatencyModel::new(&cfg).t_refi;
    assert!(per_channel.abs_diff(intervals) <= 1);
}

#[test]
fn deterministic_and_monotone() {
    let cfg = SystemConfig::baseline();
    let m = lookup_model("gpt3-small").unwrap().config;
    let a = run(&m, 12, &cfg).unwrap();
    let b = run(&m, 12, &cfg).unwrap();
    assert_eq!(a, b);
    let longer = run(&m, 24, &cfg).unwrap();
    assert!(longer.total_latency >= a.total_latency);
    let mut quiet = cfg.clone();
    quiet.timing.t_refi = 1e9;
    let q = run(&m, 12, &quiet).unwrap();
    assert_eq!(q.refresh_count, 0);
    // Only bank alignment of the new KV slot can make a later token slightly faster.
    let slack = 24e-9;
    let mut peak: f64 = 0.0;
    for &p in &q.per_token_latency {
        assert!(p + slack >= peak, "{:?}", q.per_token_latency);
        peak = peak.max(p);
    }
    assert!(q.per_token_latency.last() > q.per_token_latency.first());
    let mut more = cfg.clone();
    more.geometry.channels = 16;
    assert!(run(&m, 12, &more).unwrap().total_latency <= a.total_latency);
    let mut wider = cfg;
    wider.pim.mac_width = 32;
    assert!(run(&m, 12, &wider).unwrap().total_latency <= a.total_latency);
}

#[test]
fn mac_work_is_conserved_across_channel_counts() {
    let m = lookup_model("gpt2-medium").unwrap().config;
    let base = SystemConfig::baseline();
    let mut more = base.clone();
    more.geometry.channels = 16;
    let a = run(&m, 3, &base).unwrap();
    let b = run(&m, 3, &more).unwrap();
    assert_eq!(a.stats.operand_elements, b.stats.operand_elements);
    for s in [Stage::Qkv, Stage::Projection, Stage::Ffn1, Stage::Ffn2, Stage::LmHead] {
        assert_eq!(a.stats.stage_counts[&s].mac_columns, b.stats.stage_counts[&s].mac_columns, "{s:?}");
    }
}

#[test]
fn fusion_never_hurts() {
    let cfg = SystemConfig::baseline();
    let m = lookup_model("gpt2-small").unwrap().config;
    let map = build_memory_map(&m, &cfg.geometry, &cfg.pim, 64).unwrap();
    let stream = compile(&build_graph(&m, 64), &map, &cfg, TokenHint::default()).unwrap();
    assert!(stream.instructions.iter().any(|i| i.fused));
    let mut unfused = stream.clone();
    for i in &mut unfused.instructions {
        i.fused = false;
    }
    let t_f = simulate(&stream, &map, &cfg).unwrap().final_time;
    let t_u = simulate(&unfused, &map, &cfg).unwrap().final_time;
    assert!(t_f <= t_u);
    assert!(t_f < t_u);
}

#[test]
fn streamed_stats_match_recorded_trace() {
    let cfg = SystemConfig::baseline();
    let m = GptModelConfig::new("toy", 2, 64, 4, 96, 16);
    let map = build_memory_map(&m, &cfg.geometry, &cfg.pim, 16).unwrap();
    let mut sim = Simulator::new(&cfg, &map, (Stats::new(&cfg), Recorder::default()));
    for p in 1..=16 {
        let stream = compile(&build_graph(&m, p), &map, &cfg, TokenHint::default()).unwrap();
        sim.run_stream(&stream).unwrap();
    }
    let end = sim.finish();
    let (stats, rec) = &sim.sink;
    let mut acts = 0;
    let mut cols = 0;
    let mut last_instr_end = 0;
    for e in &rec.events {
        match e {
            Event::Rows(r) => {
                acts += r.activations();
                cols += r.columns();
            }
            Event::Instr { start, end, split, .. } => {
                assert!(*start >= last_instr_end);
                assert_eq!(split.iter().map(|s| s.1).sum::<u64>(), end - start);
                last_instr_end = *end;
            }
            _ => {}
        }
    }
    assert_eq!(stats.activations, acts);
    assert_eq!(stats.mac_columns + stats.read_columns + stats.write_columns, cols);
    assert_eq!(last_instr_end, end);
}
