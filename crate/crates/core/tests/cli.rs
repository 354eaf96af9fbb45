use std::path::Path;
use std::process::Command;

use fomo_core::cli::run;
use fomo_core::vocab::Vocab;

fn fomo(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fomo").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = fomo(args);
    assert_eq!(code, 0, "{args:?}\nstdout: {out}\nstderr: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fomo");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    assert_eq!(status(&[]).status.code(), Some(1));
    assert_eq!(status(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(status(&["gen-data", "--bogus"]).status.code(), Some(1));
    let v = status(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    let text = String::from_utf8(v.stdout).unwrap();
    assert!(text.contains("checkpoint format 1") && text.contains("report format 1"), "{text}");
    let missing = status(&["score", "--dataset", "/nonexistent", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp/x.csv"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let (code, out, _) = fomo(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["gen-data", "perturb", "encode", "pretrain-lm", "train-interface", "score", "eval-traj", "eval-instr", "eval-curves", "report"] {
        assert!(out.contains(sub), "missing {sub}");
    }
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(fomo(&["gen-data", "--out", p(&out), "--tasks", "T9"]).0, 1);
    assert_eq!(fomo(&["gen-data", "--out", p(&out), "--grid", "8by8"]).0, 1);
    ok(&["gen-data", "--out", p(&out), "--tasks", "T5", "--episodes-per-task", "2"]);
    assert_eq!(fomo(&["perturb", "--dataset", p(&out.join("train")), "--kind", "PT_Nope", "--out", p(&dir.path().join("q"))]).0, 1);
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", p(&data), "--tasks", "T5,T3", "--episodes-per-task", "6", "--split-fraction", "0.5", "--seed", "4"]);
    let train = data.join("train");
    let eval = data.join("eval");
    assert!(train.join("manifest.json").exists() && eval.join("manifest.json").exists());

    ok(&["perturb", "--dataset", p(&eval), "--kind", "PT_Rev", "--out", p(&d.join("rev")), "--seed", "1"]);
    ok(&["perturb", "--dataset", p(&eval), "--kind", "PI_Comb", "--out", p(&d.join("comb")), "--seed", "1"]);

    std::fs::write(d.join("enc.json"), r#"{"d_v": 8, "hidden": 8, "warmup_steps": 3, "warmup_batch": 2}"#).unwrap();
    ok(&["encode", "--dataset", p(&train), "--encoder-config", p(&d.join("enc.json")), "--encoder-out", p(&d.join("enc.ckpt")), "--out", p(&d.join("train.emb"))]);
    ok(&["encode", "--dataset", p(&eval), "--encoder", p(&d.join("enc.ckpt")), "--out", p(&d.join("eval.emb"))]);

    let v = Vocab::standard().len();
    let lm_cfg = format!(r#"{{"model": {{"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq": 64, "vocab_size": {v}}}, "pretrain": {{"steps": 5, "batch_size": 2}}}}"#);
    std::fs::write(d.join("lm.json"), lm_cfg).unwrap();
    let (code, _, err) = fomo(&["pretrain-lm", "--dataset", p(&train), "--config", p(&d.join("lm.json")), "--out", p(&d.join("lm.ckpt"))]);
    assert_eq!(code, 0, "{err}");

    std::fs::write(d.join("iface.json"), r#"{"d_v": 8, "d_model": 16, "n_heads": 2, "mlp_hidden": 16, "max_traj_len": 8}"#).unwrap();
    let bundle = d.join("bundle.ckpt");
    ok(&[
        "train-interface", "--protocol", "contrastive", "--dataset", p(&train), "--lm", p(&d.join("lm.ckpt")),
        "--encoder", p(&d.join("enc.ckpt")), "--interface-config", p(&d.join("iface.json")), "--max-steps", "3",
        "--out", p(&bundle), "--metrics", p(&d.join("metrics.csv")),
    ]);
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,pos_term,neg_term,aux_term,lr"), "{metrics}");
    assert_eq!(metrics.lines().count(), 4);

    ok(&["score", "--dataset", p(&eval), "--checkpoint", p(&bundle), "--out", p(&d.join("scores.csv"))]);
    let scores = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("task_id,seed,t,value"));

    let reports = d.join("reports");
    ok(&["eval-traj", "--dataset", p(&eval), "--checkpoint", p(&bundle), "--embeddings", p(&d.join("eval.emb")), "--out", p(&reports), "--n-min", "1"]);
    ok(&["eval-instr", "--dataset", p(&eval), "--checkpoint", p(&bundle), "--out", p(&reports), "--n-min", "1"]);
    ok(&["eval-curves", "--dataset", p(&eval), "--checkpoint", p(&bundle), "--out", p(&reports)]);
    let json = std::fs::read_dir(&reports).unwrap().filter_map(|e| e.ok()).map(|e| e.path()).filter(|f| f.extension().is_some_and(|x| x == "json")).collect::<Vec<_>>();
    assert!(json.len() >= 5, "{json:?}");
    let traj = reports.join("traj_sum.json");
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&traj).unwrap()).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 2);
    ok(&["report", "--input", p(&traj), "--out", p(&d.join("re")), "--formats", "csv"]);
    assert!(d.join("re").read_dir().unwrap().count() >= 1);

    // too few items per cell is a runtime error, not a usage error
    assert_eq!(fomo(&["eval-traj", "--dataset", p(&eval), "--checkpoint", p(&bundle), "--out", p(&reports), "--n-min", "1000"]).0, 2);
}
