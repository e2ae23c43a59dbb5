use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use upcycle_core::checkpoint::Checkpoint;
use upcycle_core::config::PipelineConfig;

const SMALL: &str = r#"
seed = 5
[model]
d = 8
h = 12
blocks = 2
n_classes = 3
[data]
n_train = 400
n_eval = 120
n_clusters = 4
[moe]
n_experts = 4
[dense_train]
steps = 60
[moe_train]
steps = 20
[calibration]
n_samples = 240
token_cap = 240
"#;

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("cfg.toml");
        fs::write(&config, merge(SMALL, extra)).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_upcycle"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("UPCYCLE_OUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }
}

/// Appends keys to existing tables of `base`, adding tables it lacks.
fn merge(base: &str, extra: &str) -> String {
    let mut doc: toml::Table = toml::from_str(base).unwrap();
    let add: toml::Table = toml::from_str(extra).unwrap();
    for (k, v) in add {
        match (doc.get_mut(&k), v) {
            (Some(toml::Value::Table(t)), toml::Value::Table(new)) => t.extend(new),
            (_, v) => {
                doc.insert(k, v);
            }
        }
    }
    toml::to_string(&doc).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap_or_else(|e| {
        panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn sparse_upcycle_has_identical_experts() {
    let run = Run::new("");
    run.ok(&["train-dense"]);
    run.ok(&["upcycle", "--method", "sparse"]);
    run.ok(&["analyze", "--model", run.file("moe_sparse.json").to_str().unwrap()]);
    let (header, rows) = read_csv(&run.file("moe_sparse_summary.csv"));
    assert_eq!(rows.len(), 1);
    for name in ["mean_pairwise_similarity", "mean_pairwise_similarity_w1"] {
        let v: f64 = rows[0][column(&header, name)].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{name} = {v}");
    }
    let analysis: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.file("moe_sparse_analysis.json")).unwrap())
            .unwrap();
    assert!(analysis["eval_task_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn full_rank_cluster_experts_reproduce_dense_block() {
    let run = Run::new("[init]\ntau = 1.0\n[moe_train]\nsteps = 0\n");
    run.ok(&["train-dense"]);
    run.ok(&["capture"]);
    run.ok(&["upcycle", "--method", "cluster"]);
    run.ok(&["train-moe"]);

    let (dense, _) = Checkpoint::load(&run.file("dense.json")).unwrap().to_model().unwrap();
    let bank = Checkpoint::load(&run.file("bank.json")).unwrap().to_bank().unwrap();
    let (moe, _) = Checkpoint::load(&run.file("moe_cluster_trained.json"))
        .unwrap()
        .to_model()
        .unwrap();
    let clusters: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.file("clusters_cluster.json")).unwrap())
            .unwrap();
    let sites = clusters.as_array().unwrap();
    assert_eq!(sites.len(), 1);

    let mut worst = 0.0f64;
    for entry in sites {
        let site = entry["site"].as_u64().unwrap() as usize;
        let assignments: Vec<usize> = entry["assignments"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a.as_u64().unwrap() as usize)
            .collect();
        let x = bank.site(site).unwrap();
        assert_eq!(assignments.len(), x.cols());
        let ffn = dense.dense_block(site).unwrap();
        let layer = moe.moe_layer(site).unwrap();
        for (i, expert) in layer.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..x.cols()).filter(|&t| assignments[t] == i).collect();
            if idx.is_empty() {
                continue;
            }
            let xi = x.select_columns(&idx);
            let a = expert.forward(&xi).unwrap();
            let b = ffn.forward(&xi).unwrap();
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");

    // zero steps leave the upcycled parameters untouched
    let upcycled = Checkpoint::load(&run.file("moe_cluster.json")).unwrap();
    let trained = Checkpoint::load(&run.file("moe_cluster_trained.json")).unwrap();
    assert_eq!(upcycled.values, trained.values);
}

#[test]
fn compare_writes_one_row_per_method_and_seed() {
    let run = Run::new("[moe_train]\nsteps = 5\n");
    run.ok(&["compare", "--seeds", "2"]);
    let (header, rows) = read_csv(&run.file("compare.csv"));
    assert_eq!(header.join(","), upcycle_core::pipeline::COMPARE_CSV_HEADER);
    assert_eq!(rows.len(), 8);
    let m = column(&header, "method");
    let s = column(&header, "seed");
    for seed in ["5", "6"] {
        let mut methods: Vec<&str> = rows
            .iter()
            .filter(|r| r[s] == seed)
            .map(|r| r[m].as_str())
            .collect();
        methods.sort_unstable();
        assert_eq!(methods, ["cluster", "drop", "drop-svd", "sparse"]);
    }
    for r in &rows {
        assert_eq!(r.len(), header.len());
        let loss: f64 = r[column(&header, "final_eval_task_loss")].parse().unwrap();
        assert!(loss.is_finite());
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let run = Run::new("");
    run.ok(&["train-dense"]);
    run.ok(&["capture"]);
    run.ok(&["upcycle", "--method", "cluster"]);
    run.ok(&["train-moe", "--eesd"]);
    let names = [
        "dense.json",
        "dense.bin",
        "bank.bin",
        "moe_cluster.bin",
        "init_cluster.json",
        "moe_cluster_trained_eesd.bin",
        "moe_cluster_trained_eesd_log.jsonl",
    ];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(run.file(n)).unwrap()).collect();
    run.ok(&["train-dense"]);
    run.ok(&["capture"]);
    run.ok(&["upcycle", "--method", "cluster"]);
    run.ok(&["train-moe", "--eesd"]);
    for (n, bytes) in names.iter().zip(&first) {
        assert_eq!(&fs::read(run.file(n)).unwrap(), bytes, "{n} changed");
    }

    // load and save round trip
    let ck = Checkpoint::load(&run.file("moe_cluster_trained_eesd.json")).unwrap();
    let copy = run.dir.path().join("copy.json");
    ck.save(&copy).unwrap();
    assert_eq!(
        fs::read(run.dir.path().join("copy.bin")).unwrap(),
        fs::read(run.file("moe_cluster_trained_eesd.bin")).unwrap()
    );
    let (_, teachers) = ck.to_model().unwrap();
    assert_eq!(teachers.unwrap().teachers[0].step_count, 20);
}

#[test]
fn artifacts_embed_the_loaded_config() {
    let run = Run::new("");
    run.ok(&["train-dense"]);
    let cfg = PipelineConfig::from_path(&run.config).unwrap();
    let ck = Checkpoint::load(&run.file("dense.json")).unwrap();
    assert_eq!(ck.manifest.config, cfg.to_json_value());
    assert_eq!(ck.manifest.seeds["seed"], 5);
    let log = fs::read_to_string(run.file("dense_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
}

#[test]
fn missing_input_reports_json_error() {
    let run = Run::new("");
    let out = run.cmd(&["upcycle", "--method", "sparse"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "MissingInput");
    assert!(err["message"].as_str().unwrap().contains("dense.json"));
}

#[test]
fn invalid_config_reports_json_error() {
    let run = Run::new("[moe]\ncapacity_train = -1.0\n");
    let out = run.cmd(&["train-dense"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "InvalidArgument");

    let run = Run::new("[model]\nwidth = 3\n");
    let out = run.cmd(&["train-dense"]);
    assert_eq!(stderr_json(&out)["error"], "InvalidArgument");
    assert!(!run.out().join("dense.json").exists());
}

#[test]
fn non_finite_loss_reports_json_error() {
    let run = Run::new("[dense_train]\nlr = 1e300\n");
    let out = run.cmd(&["train-dense"]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "NonFiniteLoss");
}

#[test]
fn gradcheck_writes_report() {
    let run = Run::new("[gradcheck]\ntokens = 8\n");
    run.ok(&["train-dense"]);
    run.ok(&["upcycle", "--method", "drop-svd"]);
    run.ok(&["gradcheck", "--model", run.file("moe_drop-svd.json").to_str().unwrap()]);
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.file("moe_drop-svd_gradcheck.json")).unwrap())
            .unwrap();
    assert!(rep["max_relative_error"].as_f64().unwrap() < 1e-4);
    assert!(rep["checked"].as_u64().unwrap() > 0);
}
