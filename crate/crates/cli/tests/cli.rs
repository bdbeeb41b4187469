use std::path::Path;
use std::process::{Command, Output};

fn catsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = catsim(args);
    assert!(
        out.status.success(),
        "catsim {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn forge_predict_attack_rollout_render() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let out = ok(&["forge", "--template", "merge", "--seed", "4", "--out", p(&scenes)]);
    let scene = scenes.join("merge_4.json");
    assert_eq!(out.trim(), scene.display().to_string());
    assert!(json(&scene)["tracks"].is_array());

    let cands = dir.path().join("cands.json");
    ok(&["predict", "--scenario", p(&scene), "--m", "8", "--out", p(&cands)]);
    let c = json(&cands);
    let list = c["candidates"].as_array().unwrap();
    assert_eq!(list.len(), 8);
    let total: f64 = list.iter().map(|c| c["probability"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let adv = dir.path().join("adv.json");
    ok(&["attack", "--scenario", p(&scene), "--agent", "replay", "--alpha", "0.99", "--m", "32", "--n", "1", "--out", p(&adv)]);
    let a = json(&adv);
    assert!(a["base"].is_object() && a["adversary_override"].is_array());
    let report = json(&dir.path().join("adv.scores.json"));
    let scores = report["candidates"].as_array().unwrap();
    assert_eq!(scores.len(), 32);
    assert_eq!(report["n_buffer"], 1);
    let best = report["selected"].as_u64().unwrap() as usize;
    let max = scores.iter().map(|s| s["posterior"].as_f64().unwrap()).fold(0.0, f64::max);
    assert_eq!(scores[best]["posterior"].as_f64().unwrap(), max);
    assert!(scores.iter().all(|s| s["earliest_steps"].as_array().unwrap().len() == 1));

    let ep = dir.path().join("ep.json");
    ok(&["rollout", "--scenario", p(&adv), "--agent", "replay", "--record", p(&ep)]);
    let e = json(&ep);
    assert!(e["result"]["route_completion"].is_number());
    assert!(!e["frames"].as_array().unwrap().is_empty());

    let svg = dir.path().join("ep.svg");
    ok(&["render", "--trace", p(&ep), "--out", p(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.contains("<svg") && text.contains("class=\"frame\""));
}

#[test]
fn corpus_train_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["forge", "corpus", "--n", "6", "--split", "0.5", "--seed", "2", "--out", p(&corpus)]);
    let manifest = json(&corpus.join("manifest.json"));
    assert_eq!(manifest["train"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 3);

    let run = dir.path().join("run_0");
    let common = [
        "--pool", p(&corpus), "--seed", "0", "--out", p(&run), "--population", "4", "--scenes-per-generation", "1",
        "--checkpoint-every", "1",
    ];
    let mut args = vec!["train", "--mode", "closed_loop", "--steps", "2"];
    args.extend(common);
    ok(&args);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "generation,mean_return,crash_rate,route_completion,gen_time_ms");
    assert_eq!(lines.len(), 3);
    assert!(run.join("checkpoints/gen_00002.json").exists());
    assert!(run.join("policy.json").exists());

    let ckpt = run.join("checkpoints/gen_00001.json");
    let mut resume = vec!["train", "--mode", "closed_loop", "--steps", "3", "--resume", p(&ckpt)];
    resume.extend(common);
    let out = ok(&resume);
    assert!(out.contains("from generation 1"));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let pattern = format!("{}/run_{{seed}}/policy.json", dir.path().display());
    let report = dir.path().join("policy_report.json");
    ok(&["eval-policy", "--ckpt", &pattern, "--mode", "log_replay", "--scenes", p(&corpus), "--seeds", "0", "--out", p(&report)]);
    let r = json(&report);
    assert_eq!(r["traffic"], "log_replay");
    assert_eq!(r["seeds"][0]["episodes"].as_array().unwrap().len(), 3);

    let attack = dir.path().join("attack_report.json");
    ok(&["eval-attack", "--agent", "replay", "--scenes", p(&corpus), "--n", "1", "--out", p(&attack)]);
    let a = json(&attack);
    assert_eq!(a["scenes"].as_array().unwrap().len(), 3);
    assert!(a["success_rate"].as_f64().unwrap() >= 0.0);

    let out = ok(&["eval", "--agent", "replay", "--scenes", p(&corpus), "--split", "all"]);
    assert!(out.contains("on 6 scenes"), "{out}");
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = catsim(&["rollout", "--scenario", p(&dir.path().join("missing.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    ok(&["forge", "--template", "curve", "--out", p(dir.path())]);
    let scene = dir.path().join("curve_0.json");
    let out = catsim(&["rollout", "--scenario", p(&scene), "--agent", "autopilot"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("autopilot"));

    let out = catsim(&["forge", "--template", "roundabout", "--out", p(dir.path())]);
    assert!(!out.status.success());
}
