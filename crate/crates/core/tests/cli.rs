use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"
[synth]
regions = 12
network_sizes = [4, 4, 4]
signal_blocks = [[0, 1], [2, 2]]
n_subjects = 30

[mae]
embed_dim = 8
decoder_dim = 4
epochs = 4
warmup_epochs = 1
batch_size = 8

[eval]
folds = 5
bootstrap = 100
"#;

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("config.toml");
        fs::write(&config, CONFIG).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn run(&self, out: &str, args: &[&str]) -> i32 {
        let output = Command::new(env!("CARGO_BIN_EXE_fcmae"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.root.join(out))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        output.status.code().unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_string()
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_deterministic_and_refuses_overwrite() {
    let fx = Fixture::new();
    assert_eq!(fx.run("a", &["synth", "--seed", "3"]), 0);
    assert_eq!(fx.run("b", &["synth", "--seed", "3"]), 0);
    assert_eq!(read(&fx.path("a/cohort.csv")), read(&fx.path("b/cohort.csv")));
    let names: Vec<_> = fs::read_dir(fx.path("a/fc")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 30);
    for name in names {
        assert_eq!(fs::read(fx.path("a/fc").join(&name)).unwrap(), fs::read(fx.path("b/fc").join(&name)).unwrap());
    }
    assert_eq!(fx.run("a", &["synth", "--seed", "3"]), 1);
    assert_eq!(fx.run("a", &["synth", "--seed", "3", "--force"]), 0);
    let manifest: toml::Table = read(&fx.path("a/run_manifest.toml")).parse().unwrap();
    assert_eq!(manifest["command"].as_str(), Some("synth"));
    assert_eq!(manifest["seed"].as_integer(), Some(3));
}

#[test]
fn full_pipeline_and_exit_codes() {
    let fx = Fixture::new();
    assert_eq!(fx.run("data", &["synth"]), 0);
    let cohort = fx.arg("data/cohort.csv");
    assert_eq!(fx.run("model", &["pretrain", "--cohort", &cohort]), 0);
    let curve = read(&fx.path("model/loss_curve.csv"));
    assert_eq!(curve.lines().next(), Some("epoch,loss,lr"));
    assert_eq!(curve.lines().count(), 5);

    let ckpt = fx.arg("model/model.ckpt");
    assert_eq!(fx.run("emb", &["embed", "--checkpoint", &ckpt, "--cohort", &cohort]), 0);
    assert_eq!(fx.run("emb2", &["embed", "--checkpoint", &ckpt, "--cohort", &cohort]), 0);
    let emb = read(&fx.path("emb/embeddings.csv"));
    assert_eq!(emb, read(&fx.path("emb2/embeddings.csv")));
    assert_eq!(emb.lines().count(), 31);
    assert!(emb.starts_with("subject_id,e_0,e_1,"));

    let embeddings = fx.arg("emb/embeddings.csv");
    assert_eq!(fx.run("eval", &["eval", "--embeddings", &embeddings, "--cohort", &cohort]), 0);
    let report = read(&fx.path("eval/report.csv"));
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("target,r,ci_low,ci_high,delta,p_paired,p_perm,n,seed"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "score");
    let (r, lo, hi): (f64, f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap());
    assert!(lo <= r && r <= hi);
    assert_eq!(row[7], "30");
    let preds = read(&fx.path("eval/predictions_score.csv"));
    assert_eq!(preds.lines().next(), Some("subject_id,fold,y_true,y_pred"));

    // Paired comparison against itself gives p = 1.
    assert_eq!(
        fx.run("self", &["eval", "--embeddings", &embeddings, "--cohort", &cohort, "--baseline", &embeddings]),
        0
    );
    let row: Vec<String> = read(&fx.path("self/report.csv")).lines().nth(1).unwrap().split(',').map(String::from).collect();
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);

    // Missing input is a data error.
    let missing = fx.arg("nowhere/cohort.csv");
    assert_eq!(fx.run("x", &["pretrain", "--cohort", &missing]), 2);

    // A cohort with a different region count is rejected by embed.
    fs::write(fx.path("other.toml"), CONFIG.replace("regions = 12\nnetwork_sizes = [4, 4, 4]", "regions = 9\nnetwork_sizes = [3, 3, 3]")).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fcmae"))
        .args(["synth", "--config"])
        .arg(fx.path("other.toml"))
        .arg("--out")
        .arg(fx.path("small"))
        .status()
        .unwrap();
    assert!(status.success());
    let small = fx.arg("small/cohort.csv");
    assert_eq!(fx.run("y", &["embed", "--checkpoint", &ckpt, "--cohort", &small]), 2);
}

#[test]
fn config_errors_name_the_field() {
    let fx = Fixture::new();
    fs::write(&fx.config, "[mae]\nepochz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fcmae"))
        .args(["synth", "--config"])
        .arg(&fx.config)
        .arg("--out")
        .arg(fx.path("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    fs::write(&fx.config, "[synth]\nwithin_coupling = 1.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fcmae"))
        .args(["synth", "--config"])
        .arg(&fx.config)
        .arg("--out")
        .arg(fx.path("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.within_coupling"));
}

#[test]
fn resume_continues_the_schedule() {
    let fx = Fixture::new();
    assert_eq!(fx.run("data", &["synth"]), 0);
    let cohort = fx.arg("data/cohort.csv");
    assert_eq!(fx.run("full", &["pretrain", "--cohort", &cohort]), 0);
    assert_eq!(fx.run("half", &["pretrain", "--cohort", &cohort, "--stop-at", "2"]), 0);
    let half = fx.arg("half/model.ckpt");
    assert_eq!(fx.run("rest", &["pretrain", "--cohort", &cohort, "--resume", &half]), 0);
    assert_eq!(fs::read(fx.path("full/model.ckpt")).unwrap(), fs::read(fx.path("rest/model.ckpt")).unwrap());
    let full = read(&fx.path("full/loss_curve.csv"));
    let rest = read(&fx.path("rest/loss_curve.csv"));
    assert_eq!(full.lines().skip(3).collect::<Vec<_>>(), rest.lines().skip(1).collect::<Vec<_>>());

    // Nothing left to train, or a changed schedule, is refused.
    let done = fx.arg("full/model.ckpt");
    assert_eq!(fx.run("again", &["pretrain", "--cohort", &cohort, "--resume", &done]), 1);
    assert_eq!(fx.run("again", &["pretrain", "--cohort", &cohort, "--resume", &half, "--epochs", "9"]), 1);
}
