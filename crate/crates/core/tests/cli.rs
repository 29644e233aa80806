use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pairvdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairvdn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_unison_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("unison.toml");
    fs::write(
        &path,
        format!(
            "env = \"unison\"\nmodel = \"pairvdn\"\nn_agents = 3\nnum_actions = 2\nepochs = 3\n\
             explore_per_epoch = 40\nhidden = [16]\nseed = 4\noutput_dir = \"{}\"\n",
            out.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = pairvdn(&["train", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config not found"), "{}", stderr(&o));
}

#[test]
fn bad_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = pairvdn(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    fs::write(&path, "epochs = 2\n\nbatch_size = 0\n").unwrap();
    let o = pairvdn(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn train_writes_outputs_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_unison_config(dir.path(), &out);
    let o = pairvdn(&["train", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "epoch,mean_reward,std_reward");
    assert_eq!(lines.len(), 4);
    for name in ["manifest", "ckpt_001", "ckpt_002", "ckpt_003", "ckpt_final"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let manifest = fs::read_to_string(out.join("manifest")).unwrap();
    assert!(manifest.contains("config_sha256 = \""));
    assert!(manifest.contains("seed = 4"));
    assert!(manifest.contains("git_describe = \""));

    let ckpt = out.join("ckpt_final");
    let ckpt = ckpt.to_str().unwrap();
    let args = ["eval", "--checkpoint", ckpt, "--env", "unison", "--n-agents", "3", "--episodes", "2"];
    let a = pairvdn(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("pairvdn"));
    assert!(stdout(&a).contains(" ± "));
    assert_eq!(stdout(&a), stdout(&pairvdn(&args)));

    let wrong_n = pairvdn(&["eval", "--checkpoint", ckpt, "--env", "unison", "--n-agents", "4"]);
    assert_ne!(wrong_n.status.code(), Some(0));
    let wrong_env = pairvdn(&["eval", "--checkpoint", ckpt, "--env", "boxjump", "--n-agents", "3"]);
    assert_ne!(wrong_env.status.code(), Some(0));
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("first");
    let config = write_unison_config(dir.path(), &out);
    assert!(pairvdn(&["train", config.to_str().unwrap()]).status.success());

    let manifest: toml::Table = fs::read_to_string(out.join("manifest")).unwrap().parse().unwrap();
    let mut recorded = manifest["config"].as_table().unwrap().clone();
    let again = dir.path().join("second");
    recorded.insert("output_dir".into(), toml::Value::String(again.display().to_string()));
    let replay = dir.path().join("replay.toml");
    fs::write(&replay, toml::to_string(&recorded).unwrap()).unwrap();
    assert!(pairvdn(&["train", replay.to_str().unwrap()]).status.success());

    for name in ["curve.csv", "ckpt_final"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn random_eval_is_deterministic() {
    let args = ["eval", "--random", "--n-agents", "4", "--episodes", "1", "--seed", "3", "--tmax", "100"];
    let a = pairvdn(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).starts_with("random"));
    assert_eq!(stdout(&a), stdout(&pairvdn(&args)));
}

#[test]
fn eval_needs_a_policy() {
    assert_eq!(pairvdn(&["eval"]).status.code(), Some(2));
}

#[test]
fn verify_suites_pass_and_unknown_suite_is_usage() {
    for suite in ["dp", "graph", "grad", "env"] {
        let o = pairvdn(&["verify", "--suite", suite]);
        assert_eq!(o.status.code(), Some(0), "{suite}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("0 failures"), "{}", stdout(&o));
    }
    assert_eq!(pairvdn(&["verify", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn bench_prints_rows() {
    let o = pairvdn(&["bench", "--n", "2,50", "--trials", "2"]);
    assert!(o.status.success());
    let rows: Vec<(usize, f64)> = stdout(&o)
        .lines()
        .map(|l| {
            let (n, t) = l.split_once(',').unwrap();
            (n.parse().unwrap(), t.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, 2);
    assert!(rows.iter().all(|r| r.1 > 0.0));
}

#[test]
fn render_writes_frames_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = pairvdn(&["render", "--random", "--seed", "1", "--tmax", "400", "--n-agents", "6", "--outdir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    let mut frames: Vec<_> = fs::read_dir(a.join("frames")).unwrap().map(|e| e.unwrap().file_name()).collect();
    frames.sort();
    assert!(frames.len() >= 8);
    assert_eq!(frames[0], "frame_00000.ppm");
    for f in &frames {
        let x = fs::read(a.join("frames").join(f)).unwrap();
        assert!(x.starts_with(b"P6\n"));
        assert_eq!(x, fs::read(b.join("frames").join(f)).unwrap());
    }
    let log = fs::read_to_string(a.join("episode.log")).unwrap();
    assert_eq!(log.lines().count(), 400);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert_eq!(first["actions"].as_array().unwrap().len(), 6);
}
