use std::path::PathBuf;
use std::process::{Command, Output};

fn pimsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimsim")).args(args).env_remove("PIMSIM_CONFIG").output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pimsim-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn toy_model() -> PathBuf {
    let p = scratch("toy.toml");
    std::fs::write(
        &p,
        "name = \"toy\"\nnum_layers = 2\nd_model = 64\nnum_heads = 4\nd_head = 16\nd_ffn = 256\nvocab_size = 96\nmax_tokens = 32\n",
    )
    .unwrap();
    p
}

#[test]
fn run_json_and_trace_agree() {
    let model = toy_model();
    let trace = scratch("trace.csv");
    let out = pimsim(&["run", "--model", model.to_str().unwrap(), "--tokens", "5", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["token_count"], 5);
    assert!(report["energy"]["formulas"].as_str().unwrap().is_empty());
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("clock_ps,node,command,duration_ps,bytes,row_hit"));
    let acts = lines.clone().filter(|l| l.split(',').nth(2) == Some("act")).count() as u64;
    let refs = lines.filter(|l| l.split(',').nth(2) == Some("ref")).count() as u64;
    assert_eq!(acts, report["activations"].as_u64().unwrap());
    assert_eq!(refs, report["refresh_count"].as_u64().unwrap());
}

#[test]
fn csv_run_with_energy_detail() {
    let out = pimsim(&["run", "--model", "gpt2-small", "--tokens", "1", "--format", "csv", "--energy-detail"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("model,token_count,"));
    assert!(text.contains("\ncomponent,joules\n"));
    assert!(text.contains("\ndram_refresh,"));
}

#[test]
fn exit_codes() {
    assert_eq!(pimsim(&["run", "--model", "no-such-model", "--tokens", "1"]).status.code(), Some(1));
    assert_eq!(pimsim(&["run", "--model", "gpt2-small", "--tokens", "1", "--mac-width", "0"]).status.code(), Some(1));
    assert_eq!(pimsim(&["run", "--model", "gpt3-xl", "--tokens", "20000"]).status.code(), Some(2));
    let bad = scratch("bad.toml");
    std::fs::write(&bad, "[timing]\ntRCD = \"x\"\n").unwrap();
    let out = pimsim(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = Command::new(env!("CARGO_BIN_EXE_pimsim")).arg("validate").env("PIMSIM_CONFIG", &bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(pimsim(&["validate"]).status.success());
}

#[test]
fn sweep_reports_bad_rows_and_continues() {
    let out_path = scratch("sweep.csv");
    let out = pimsim(&[
        "sweep", "--dimension", "pin_rate", "--values", "16,-1,8", "--model", "gpt2-small", "--tokens", "1", "--format", "csv", "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(out_path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("pin_rate,16.0,1.0,"));
    assert!(rows[2].contains("constraint violated"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pin_rate = -1"));
}

#[test]
fn listing_map_and_numerics() {
    let out = pimsim(&["compile", "--model", "gpt3-small", "--position", "4", "--dump"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.contains("kv_write_key L11 token=3")));
    let out = pimsim(&["map", "dump", "--model", "gpt2-small", "--tokens", "16"]);
    let map: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(map["channels"], 8);
    let out = pimsim(&["numerics", "report", "--cases", "100", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("nr_reciprocal,all normal,65024,1,")));
    assert!(text.lines().any(|l| l.starts_with("fast_inv_sqrt,all positive normal,32512,1,")));
}
