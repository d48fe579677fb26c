use pimsim::compiler::{build_graph, compile, InstructionStream, NodeKind, TokenHint, VmmOperand};
use pimsim::config::{lookup_model, GptModelConfig, SystemConfig};
use pimsim::engine::{Category, Simulator, Stats};
use pimsim::mapper::{build_memory_map, MatrixRole};
use pimsim::report::{data_movement_reduction, read_csv, run, sweep, ReportSummary, RunReport, SweepCsvRow, SweepDimension, SweepTable};

fn toy() -> GptModelConfig {
    GptModelConfig::new("toy", 2, 64, 4, 96, 32)
}

#[test]
fn json_and_csv_round_trip() {
    let r = run(&toy(), 9, &SystemConfig::baseline()).unwrap();
    let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let rows: Vec<ReportSummary> = read_csv(&r.to_csv()).unwrap();
    assert_eq!(rows, vec![r.summary()]);
    let per_token: Vec<(usize, f64)> = read_csv(&r.per_token_csv()).unwrap();
    assert_eq!(per_token.len(), 9);
    assert_eq!(per_token[3], (4, r.per_token_latency[3]));
}

#[test]
fn breakdown_sums_to_total() {
    for (m, t) in [(toy(), 20), (lookup_model("gpt2-small").unwrap().config, 3)] {
        let r = run(&m, t, &SystemConfig::baseline()).unwrap();
        let sum: f64 = Category::ALL.iter().map(|&c| r.category_seconds(c)).sum();
        assert!((sum - r.total_latency).abs() <= 1e-3 * r.total_latency);
        let stages: f64 = r.stage_breakdown.values().sum();
        assert!((stages - r.total_latency).abs() <= 1e-3 * r.total_latency);
        assert!((0.0..=1.0).contains(&r.row_hit_rate));
    }
}

#[test]
fn single_token_is_vmm_dominated() {
    let r = run(&lookup_model("gpt2-medium").unwrap().config, 1, &SystemConfig::baseline()).unwrap();
    assert!(r.total_latency > 0.0);
    assert!(Category::ALL.iter().all(|&c| r.category_seconds(Category::Vmm) >= r.category_seconds(c)));
}

#[test]
fn empty_run_has_no_reduction_ratio() {
    let r = run(&toy(), 0, &SystemConfig::baseline()).unwrap();
    assert_eq!(r.total_latency, 0.0);
    assert_eq!(r.data_movement_reduction, None);
    assert_eq!(data_movement_reduction(0, 0), None);
}

#[test]
fn single_vmm_reduction_closed_form() {
    let cfg = SystemConfig::baseline();
    let m = lookup_model("gpt3-small").unwrap().config;
    let map = build_memory_map(&m, &cfg.geometry, &cfg.pim, 1).unwrap();
    let full = compile(&build_graph(&m, 1), &map, &cfg, TokenHint::default()).unwrap();
    for role in [MatrixRole::Proj, MatrixRole::Ffn1] {
        let node = full
            .graph
            .nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Vmm(VmmOperand::Weight(id)) if id.role == role && id.layer == Some(0)))
            .unwrap();
        let (rows, cols) = (node.input_len as f64, node.output_len as f64);
        let one = InstructionStream { graph: full.graph.clone(), instructions: full.instructions.iter().filter(|i| i.node == node.id).cloned().collect() };
        let mut sim = Simulator::new(&cfg, &map, Stats::new(&cfg));
        sim.run_stream(&one).unwrap();
        let s = &sim.sink;
        let moved: u64 = s.transfers.values().map(|t| t.bytes).sum();
        let ratio = data_movement_reduction(s.operand_elements * 2, moved).unwrap();
        let expect = rows * cols / (rows + cols);
        assert!((ratio - expect).abs() <= 1e-9 * expect, "{role:?}: {ratio} vs {expect}");
    }
}

#[test]
fn sweep_normalizes_to_first_value_and_survives_bad_rows() {
    let t = sweep(SweepDimension::AsicFreq, &[1e9, 2.5e8, -1.0, 1e8], &toy(), 6, &SystemConfig::baseline());
    assert_eq!(t.rows.len(), 4);
    assert!(t.rows[2].error.is_some() && t.rows[2].report.is_none());
    assert_eq!(t.rows[0].normalized_latency, Some(1.0));
    let base = t.rows[0].report.as_ref().unwrap().total_latency;
    for r in [&t.rows[1], &t.rows[3]] {
        let rep = r.report.as_ref().unwrap();
        let n = r.normalized_latency.unwrap();
        assert!((n - rep.total_latency / base).abs() <= 1e-9 * n);
        assert!(n >= 1.0);
    }
    let back: SweepTable = serde_json::from_str(&t.to_json()).unwrap();
    assert_eq!(back, t);
    let rows: Vec<SweepCsvRow> = read_csv(&t.to_csv()).unwrap();
    assert_eq!(rows, t.csv_rows());

    let bad = sweep(SweepDimension::Channels, &[0.0, 4.0, 2.5], &toy(), 2, &SystemConfig::baseline());
    assert!(bad.rows[0].error.is_some() && bad.rows[2].error.is_some());
    assert!(bad.rows[1].report.is_some() && bad.rows[1].normalized_latency.is_none());
    assert_eq!("mac-width".parse::<SweepDimension>(), Ok(SweepDimension::MacWidth));
    assert!("clock".parse::<SweepDimension>().is_err());
}

#[test]
fn identical_inputs_give_identical_reports() {
    let a = run(&toy(), 12, &SystemConfig::baseline()).unwrap();
    let b = run(&toy(), 12, &SystemConfig::baseline()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}
