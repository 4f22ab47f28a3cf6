use std::path::Path;
use std::process::Command;

use dirnas::bench::OracleTable;
use dirnas::cli::{cmd_band, cmd_diagnose, cmd_eval, cmd_oracle, cmd_search, RunConfig};
use dirnas::progressive::StageSpec;

const SMALL: &str = r#"
space = "micro"
[dataset]
kind = "blobs"
n = 256
noise = 0.3
[search]
batch_size = 32
channels = 8
schedule = [ { epochs = 2, partial_k = 2, registry_size = 4 }, { epochs = 2, partial_k = 1, registry_size = 2 } ]
[oracle]
r_seeds = 1
[oracle.budget]
steps = 15
channels = 4
[diagnostics]
bound_mc = 50
[diagnostics.instruments]
trace_probes = 4
power_iters = 20
band_samples = 5
batch = 32
"#;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dirnas"))
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn invalid_schedule_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for bad in ["2:0:4", "2:5:4", "2:1:9", "x"] {
        let st = bin()
            .args(["search", "--stage-schedule", bad, "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(st.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&st.stderr));
        assert!(!out.exists(), "{bad} left outputs behind");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "space = \"micro\"\nbogus = 1\n").unwrap();
    let st = bin().arg("--config").arg(&cfg).arg("search").output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = bin().args(["search", "--distance", "cosine"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, SMALL).unwrap();
    let o = dirnas::cli::Overrides { seed: Some(9), lambda: Some(0.5), stage_schedule: Some("1:1:4".into()), ..Default::default() };
    let cfg = RunConfig::resolve(Some(&path), &o).unwrap();
    assert_eq!(cfg.search.seed, 9);
    assert_eq!(cfg.search.lambda, 0.5);
    assert_eq!(StageSpec::format_schedule(&cfg.search.schedule), "1:1:4");
    assert_eq!(cfg.search.batch_size, 32);
}

#[test]
fn search_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.diagnostics.per_epoch = true;
    let s = cmd_search(&cfg).unwrap();
    assert_eq!(s.epochs, 4);
    for f in ["genotype.json", "trajectory.jsonl", "summary.json", "diagnostics.csv", "checkpoints/stage0.json", "checkpoints/stage1.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("genotype.json")).unwrap()).unwrap();
    assert_eq!(g["provenance"]["config"]["search"]["seed"], 0);
    assert_eq!(g["choices"].as_array().unwrap().len(), 3);
    let traj = std::fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
    assert!(first.get("config").is_some());
    assert_eq!(data_lines(&dir.path().join("diagnostics.csv")).len(), 1 + 4);
}

#[test]
fn oracle_band_diagnose_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let table = cmd_oracle(&cfg).unwrap();
    assert_eq!(table.accuracy.len(), 64);
    assert!(table.accuracy.values().all(|a| (0.0..=1.0).contains(a)));
    let oracle = dir.path().join("oracle.json");
    let data = cfg.dataset().unwrap();
    assert_eq!(OracleTable::load(&oracle, &data).unwrap().accuracy, table.accuracy);

    cmd_search(&cfg).unwrap();
    let ckpt = dir.path().join("checkpoints/stage0.json");
    let band = cmd_band(&cfg, &ckpt, Some(&oracle), 100).unwrap();
    assert!(band.min <= band.max);
    let rows = data_lines(&dir.path().join("band.csv"));
    assert_eq!(rows[0], "kind,index,genotype,score");
    assert_eq!(rows.len(), 1 + 100 + 1);
    assert!(rows.last().unwrap().starts_with("mean,"));

    let d = cmd_diagnose(&cfg, &ckpt).unwrap();
    assert_eq!(d.epoch, 2);
    assert!(d.eigenvalue.is_finite() && d.trace.is_finite());
    assert_eq!(data_lines(&dir.path().join("diagnose.csv")).len(), 2);

    let r = cmd_eval(&cfg, &dir.path().join("genotype.json"), Some(&oracle)).unwrap();
    assert_eq!(Some(r.accuracy), r.table_accuracy);
}

#[test]
fn band_without_checkpoint_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let e = cmd_band(&cfg, &dir.path().join("missing.json"), None, 10).unwrap_err();
    assert_eq!(dirnas::cli::exit_code(&e), 1);
}

// Mirrors the trajectory schema table in the README.
fn check_fields(r: &serde_json::Value, fields: &[(&str, &str)]) {
    for (name, ty) in fields {
        let v = r.get(*name).unwrap_or_else(|| panic!("{} record lacks {name}", r["record"]));
        let ok = match *ty {
            "string" => v.is_string(),
            "int" => v.is_u64(),
            "number" => v.is_number(),
            "bool" => v.is_boolean(),
            "object" => v.is_object(),
            "matrix" => v.as_array().is_some_and(|rows| rows.iter().all(|row| row.as_array().is_some_and(|c| c.iter().all(|x| x.is_number())))),
            "array" => v.is_array(),
            _ => unreachable!(),
        };
        assert!(ok, "{}.{name} is not {ty}: {v}", r["record"]);
    }
}

#[test]
fn trajectory_matches_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.diagnostics.per_epoch = true;
    cmd_search(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kinds: Vec<&str> = records.iter().map(|r| r["record"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["header", "epoch", "epoch", "transition", "epoch", "epoch", "final"]);
    for r in &records {
        match r["record"].as_str().unwrap() {
            "header" => check_fields(r, &[("version", "string"), ("config", "object")]),
            "epoch" => {
                check_fields(
                    r,
                    &[
                        ("epoch", "int"),
                        ("stage", "int"),
                        ("stage_epoch", "int"),
                        ("lr", "number"),
                        ("train_loss", "number"),
                        ("val_loss", "number"),
                        ("eta", "matrix"),
                        ("beta", "matrix"),
                        ("eta_norm", "number"),
                        ("penalty", "number"),
                        ("genotype", "string"),
                        ("diagnostics", "object"),
                    ],
                );
                check_fields(&r["diagnostics"], &[("dominant_eigenvalue", "number"), ("eigen_converged", "bool"), ("hessian_trace", "number")]);
                // Band readings need an oracle table.
                assert!(r["diagnostics"].get("band_min").is_none());
            }
            "transition" => check_fields(
                r,
                &[
                    ("stage", "int"),
                    ("k_from", "int"),
                    ("k_to", "int"),
                    ("edge_ops_before", "array"),
                    ("edge_ops_after", "array"),
                    ("params_before", "int"),
                    ("params_after", "int"),
                    ("op_params_before", "int"),
                    ("op_params_after", "int"),
                    ("footprint_before", "int"),
                    ("footprint_after", "int"),
                    ("widened", "array"),
                ],
            ),
            "final" => {
                check_fields(r, &[("genotype", "object"), ("eta_norm", "number")]);
                check_fields(&r["genotype"], &[("space", "string"), ("ops", "array"), ("choices", "array")]);
            }
            other => panic!("undocumented record {other}"),
        }
    }
    let w = &records[3]["widened"][0];
    check_fields(w, &[("tensor", "string"), ("seed", "int"), ("from", "array"), ("to", "array")]);
}
