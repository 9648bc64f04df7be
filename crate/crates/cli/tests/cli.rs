use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use phc_core::config::RunConfig;

fn phc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phc"))
        .args(args)
        .env("PHC_LOG", "off")
        .output()
        .expect("run phc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_single_line_error(o: &Output, code: i32, prefix: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(prefix), "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "seed = 3\n\
         model.n = 2\n\
         model.hidden = 8\n\
         model.layers = 2\n\
         model.downstream = 8\n\
         model.downstream_dropout = 0.1\n\
         train.lr = 0.005\n\
         train.batch_size = 16\n\
         train.epochs = 5\n\
         data.path = data.jsonl\n\
         {extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, kind: &str, size: &str, seed: &str) -> PathBuf {
    let out = dir.join("data.jsonl");
    let o = phc(&["gen", "--kind", kind, "--size", size, "--seed", seed, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

/// Log lines without the wall-clock column.
fn log_trace(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    for (out, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        let o = phc(&["gen", "--kind", "ring-regression", "--size", "30", "--seed", seed, "--out", p(out)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 30);
}

#[test]
fn train_then_eval_reproduces_the_logged_training_mae() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "triangle-count", "60", "1");
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.cfg", "");
    let o = phc(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs = 5"));
    for f in ["config.txt", "log.csv", "last.ckpt", "best.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let last = log.lines().last().unwrap();
    let logged: f64 = last.split(',').nth(2).unwrap().parse().unwrap();

    let o = phc(&["eval", "--config", p(&cfg), "--checkpoint", p(&out.join("last.ckpt")), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mae: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mae = "))
        .expect("mae line")
        .parse()
        .unwrap();
    assert!((mae - logged).abs() < 1e-9, "{mae} vs {logged}");

    // the written config is the effective one and round-trips
    let saved = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(saved.output_dir, out);
    assert_eq!(RunConfig::parse(&saved.serialize()).unwrap(), saved);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "triangle-count", "40", "2");
    let cfg = write_config(dir.path(), "run.cfg", "train.epochs = 2\n");
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = phc(&["train", "--config", p(&cfg), "--seed", seed, "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        log_trace(&out)
    };
    let a = run("7", "a");
    assert_eq!(a, run("7", "b"));
    assert_ne!(a, run("8", "c"));
}

#[test]
fn interrupted_training_resumes_on_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "triangle-count", "400", "3");
    let cfg = write_config(dir.path(), "run.cfg", "train.epochs = 12\nmodel.hidden = 16\n");
    let full = dir.path().join("full");
    let o = phc(&["train", "--config", p(&cfg), "--out", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cut = dir.path().join("cut");
    let mut child = Command::new(env!("CARGO_BIN_EXE_phc"))
        .args(["train", "--config", p(&cfg), "--out", p(&cut)])
        .env("PHC_LOG", "off")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    loop {
        let epochs = fs::read_to_string(cut.join("log.csv")).map_or(0, |s| s.lines().count().saturating_sub(1));
        if epochs >= 3 || start.elapsed() > Duration::from_secs(120) {
            break;
        }
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    let _ = child.wait();
    let o = phc(&["train", "--config", p(&cfg), "--out", p(&cut), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log_trace(&cut), log_trace(&full));
    assert_eq!(log_trace(&full).len(), 13);
}

#[test]
fn resume_needs_a_checkpoint_and_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "triangle-count", "30", "3");
    let cfg = write_config(dir.path(), "run.cfg", "train.epochs = 1\n");
    let out = dir.path().join("run");
    let o = phc(&["train", "--config", p(&cfg), "--out", p(&out), "--resume"]);
    assert_single_line_error(&o, 1, "error: checkpoint:");
    assert!(phc(&["train", "--config", p(&cfg), "--out", p(&out)]).status.success());
    let o = phc(&["train", "--config", p(&cfg), "--out", p(&out), "--resume", "--seed", "99"]);
    assert_single_line_error(&o, 1, "error: config:");
}

#[test]
fn gradcheck_passes_on_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.cfg");
    fs::write(&cfg, "# every key at its default\n").unwrap();
    let o = phc(&["gradcheck", "--config", p(&cfg), "--coords", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("< 1e-4: PASS"), "{}", stdout(&o));
}

#[test]
fn gradcheck_covers_softmax_node_readout_and_penalties() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "g.cfg",
        "model.n = 4\nmodel.aggregator = softmax\nmodel.readout = node\ntrain.lambda2 = 0.1\ntrain.p = 3\n",
    );
    let o = phc(&["gradcheck", "--config", p(&cfg), "--coords", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn inspect_reports_n_nonzeros_for_fresh_shifted_identity_contributions() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "component-parity", "20", "1");
    let cfg = write_config(
        dir.path(),
        "i.cfg",
        "model.n = 16\nmodel.hidden = 32\nmodel.layers = 1\nmodel.downstream = 16\n\
         model.contribution_init = shifted-identity\ntrain.epochs = 0\n\
         data.task = binary\ntrain.metric = accuracy\n",
    );
    let run = dir.path().join("run");
    assert!(phc(&["train", "--config", p(&cfg), "--out", p(&run)]).status.success());
    let out = dir.path().join("inspect");
    let o = phc(&["inspect", "--checkpoint", p(&run.join("last.ckpt")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("contributions.csv")).unwrap();
    let counts: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    // three layers (two message-passing MLP layers and one head layer), 16 matrices each
    assert_eq!(counts.len(), 48);
    assert!(counts.iter().all(|&c| c == "16"), "{counts:?}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("layer,n,k,d,sparsity,contribution_reg\nmp0.phm0,16,32,32,"));
    let c0 = fs::read_to_string(out.join("mp0.phm0.C0.csv")).unwrap();
    assert_eq!(c0.lines().count(), 16);
    assert!(c0.lines().next().unwrap().starts_with("1,0,"), "{c0}");
    let u = fs::read_to_string(out.join("mp0.phm0.U.csv")).unwrap();
    assert_eq!(u.lines().count(), 32);
    assert!(u.lines().all(|l| l.split(',').count() == 32));
}

#[test]
fn errors_are_single_lines_with_nonzero_status() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let cfg = write_config(dir.path(), "run.cfg", "");
    let data = gen(dir.path(), "triangle-count", "10", "1");

    let o = phc(&["eval", "--config", p(&cfg), "--checkpoint", p(&missing), "--data", p(&data)]);
    assert_single_line_error(&o, 1, "error: checkpoint:");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\nmodel.colour = red\n").unwrap();
    let o = phc(&["train", "--config", p(&bad)]);
    assert_single_line_error(&o, 1, "error: config: line 2");

    fs::write(dir.path().join("data.jsonl"), "{\"nodes\": [[0]], \"target\": [1.0]}\n{\"nodes\": [[0],[1],[0]], \"edges\": [[0,5]], \"target\": [0.0]}\n").unwrap();
    let o = phc(&["train", "--config", p(&cfg)]);
    assert_single_line_error(&o, 1, "error: dataset: line 2");

    let o = phc(&["gen", "--kind", "squares", "--size", "3", "--out", p(&dir.path().join("x"))]);
    assert_single_line_error(&o, 1, "error: invalid-argument:");
    let o = phc(&["gen", "--kind", "ring-regression", "--size", "0", "--out", p(&dir.path().join("x"))]);
    assert_single_line_error(&o, 1, "error: invalid-argument:");

    let o = phc(&["train"]);
    assert_single_line_error(&o, 2, "error: usage:");
    let o = phc(&["frobnicate"]);
    assert_single_line_error(&o, 2, "error: usage:");
}

#[test]
fn eval_rejects_data_outside_the_model_schema() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "triangle-count", "20", "1");
    let cfg = write_config(dir.path(), "run.cfg", "train.epochs = 1\n");
    let run = dir.path().join("run");
    assert!(phc(&["train", "--config", p(&cfg), "--out", p(&run)]).status.success());
    let other = dir.path().join("other.jsonl");
    fs::write(&other, "{\"nodes\": [[9],[1]], \"edges\": [[0,1]], \"target\": [0.0]}\n").unwrap();
    let o = phc(&["eval", "--config", p(&cfg), "--checkpoint", p(&run.join("last.ckpt")), "--data", p(&other)]);
    assert_single_line_error(&o, 1, "error: schema: graph 1");

    let changed = write_config(dir.path(), "changed.cfg", "model.hidden = 16\n");
    let data = dir.path().join("data.jsonl");
    let o = phc(&["eval", "--config", p(&changed), "--checkpoint", p(&run.join("last.ckpt")), "--data", p(&data)]);
    assert_single_line_error(&o, 1, "error: config:");
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.jsonl");
    let run = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_phc"))
            .args(["gen", "--kind", "triangle-count", "--size", "2", "--out", p(&out)])
            .env("PHC_LOG", level)
            .output()
            .unwrap()
    };
    assert!(String::from_utf8(run("info").stderr).unwrap().contains("wrote 2 triangle-count graphs"));
    assert!(run("off").stderr.is_empty());
}
