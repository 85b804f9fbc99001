use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lazyattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lazyattn")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lazyattn(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const CONFIG: &str = "\
corpus = \"corpus.txt\"
out_dir = \"run\"
steps = 12
warmup_steps = 2
batch_tokens = 64
eval_every = 5
eval_windows = 2
layers = 1
d_model = 16
heads = 2
n_ctx = 16
";

#[test]
fn train_then_every_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-corpus", "--bytes", "40000", "--seed", "3", "--out", "corpus.txt"]);
    assert!(fs::metadata(d.join("corpus.txt")).unwrap().len() >= 40_000);
    fs::write(d.join("train.toml"), CONFIG).unwrap();
    ok(d, &["train", "--config", "train.toml"]);
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,loss,lr,wallclock");
    assert_eq!(metrics.lines().count(), 13);

    let ck = "run/checkpoint";
    ok(d, &["eval", "--checkpoint", ck, "--text", "corpus.txt", "--lengths", "16,32", "--out", "ppl.csv"]);
    assert_eq!(fs::read_to_string(d.join("ppl.csv")).unwrap().lines().count(), 3);
    ok(d, &["probe-repeat", "--checkpoint", ck, "--n", "8", "--out", "probe.csv", "--weights-out", "w.csv"]);
    ok(d, &["stats-sink", "--checkpoint", ck, "--text", "corpus.txt", "--out", "sink.csv"]);
    ok(d, &["export-bias", "--checkpoint", ck, "--out", "bias.csv"]);
    ok(d, &["export-offsets", "--checkpoint", ck, "--out", "tau.csv"]);
    ok(d, &["measure-density", "--checkpoint", ck, "--text", "corpus.txt", "--windows", "4", "--out", "dens.csv"]);
    ok(d, &["export-weights", "--checkpoint", ck, "--text", "corpus.txt", "--out", "weights.csv"]);
    for f in ["probe.csv", "w.csv", "sink.csv", "bias.csv", "tau.csv", "dens.csv", "weights.csv"] {
        assert!(fs::read_to_string(d.join(f)).unwrap().lines().count() > 1, "{f}");
    }
    assert_eq!(header(&d.join("dens.csv")), "layer,head,density_pct,sink_pct");
    // window clamps to n_ctx = 16, so 1 layer x 2 heads x 17 distances
    assert_eq!(fs::read_to_string(d.join("bias.csv")).unwrap().lines().count(), 1 + 2 * 17);

    // the sequential fallback produces the same bytes
    ok(d, &["--sequential", "export-weights", "--checkpoint", ck, "--text", "corpus.txt", "--out", "weights2.csv"]);
    assert_eq!(fs::read(d.join("weights.csv")).unwrap(), fs::read(d.join("weights2.csv")).unwrap());
}

#[test]
fn contract_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), "tiny").unwrap();
    let missing = lazyattn(d, &["export-bias", "--checkpoint", "nope", "--out", "b.csv"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    fs::write(d.join("bad.toml"), "steps = 5\nbogus = 1\n").unwrap();
    assert!(!lazyattn(d, &["train", "--config", "bad.toml"]).status.success());

    fs::write(d.join("train.toml"), CONFIG.replace("n_ctx = 16", "n_ctx = 16\npositional = \"rope\"")).unwrap();
    fs::write(d.join("corpus.txt"), "x".repeat(5000)).unwrap();
    ok(d, &["train", "--config", "train.toml"]);
    let no_table = lazyattn(d, &["export-bias", "--checkpoint", "run/checkpoint", "--out", "b.csv"]);
    assert!(!no_table.status.success(), "RoPE-only checkpoint has no bias table");
    let short = lazyattn(d, &["probe-repeat", "--checkpoint", "run/checkpoint", "--n", "1", "--out", "p.csv"]);
    assert!(!short.status.success());
}
