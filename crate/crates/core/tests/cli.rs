use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 5

[extractor]
D = 8
W = 4
Q = 4

[cleaner]
D = 8
W = 4
Q = 4
D_b = 8
attn_hidden = 8

[vocoder]
D = 8
Q = 4
cond_channels = 6
filter_channels = 6
filter_kernel = 15
"#;

fn miipher(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miipher"))
        .args(args)
        .env_remove("MIIPHER_CONFIG")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = miipher(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let o = miipher(&["transmogrify"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(miipher(&[]).status.code(), Some(2));
    assert_eq!(
        miipher(&["restore", "--cleaner", "c"]).status.code(),
        Some(2)
    );
    assert_eq!(miipher(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one_and_a_category() {
    let tmp = tempfile::tempdir().unwrap();
    let o = miipher(&[
        "degrade-corpus",
        "--manifest",
        p(&tmp.path().join("missing.jsonl")),
        "--noise",
        p(&tmp.path().join("noise.jsonl")),
        "--out",
        p(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let last = stderr(&o).lines().last().unwrap().to_string();
    assert!(last.starts_with("error[io]: "), "{last}");

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[cleaner]\nnum_blocks = 3\n").unwrap();
    let o = miipher(&[
        "--config",
        p(&cfg),
        "make-fixtures",
        "--out",
        p(&tmp.path().join("f")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let last = stderr(&o).lines().last().unwrap().to_string();
    assert!(
        last.starts_with("error[config]: ") && last.contains("num_blocks"),
        "{last}"
    );
}

#[test]
fn config_comes_from_the_environment_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("miipher.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = tmp.path().join("fixtures");
    let o = Command::new(env!("CARGO_BIN_EXE_miipher"))
        .args(["make-fixtures", "--out", p(&out)])
        .env("MIIPHER_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed: 5"), "{}", stderr(&o));
    let effective = fs::read_to_string(out.join("effective_config.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&effective).unwrap();
    assert_eq!(parsed["seed"].as_integer(), Some(5));
    assert_eq!(parsed["cleaner"]["D_b"].as_integer(), Some(8));

    // A flag overrides the file.
    let out2 = tmp.path().join("fixtures2");
    ok(&[
        "--config",
        p(&cfg),
        "--seed",
        "6",
        "make-fixtures",
        "--out",
        p(&out2),
    ]);
    let parsed: toml::Value =
        toml::from_str(&fs::read_to_string(out2.join("effective_config.toml")).unwrap()).unwrap();
    assert_eq!(parsed["seed"].as_integer(), Some(6));
}

#[test]
fn full_pipeline_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = dir.join("miipher.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = p(&cfg);
    let fixtures = dir.join("fixtures");
    let corpus = dir.join("corpus");
    ok(&["--config", c, "make-fixtures", "--out", p(&fixtures)]);
    ok(&[
        "--config",
        c,
        "--seed",
        "7",
        "degrade-corpus",
        "--manifest",
        p(&fixtures.join("clean.jsonl")),
        "--noise",
        p(&fixtures.join("noise.jsonl")),
        "--pattern",
        "reverb+codec",
        "--out",
        p(&corpus),
    ]);
    let recipes = fs::read_to_string(corpus.join("recipes.jsonl")).unwrap();
    assert_eq!(recipes.lines().count(), 8);
    for line in recipes.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(r["room"].is_object() && r["codec"].is_object(), "{line}");
    }
    assert!(fs::read_to_string(corpus.join("effective_config.toml"))
        .unwrap()
        .contains("reverb+codec"));

    let features = dir.join("features");
    ok(&[
        "--config",
        c,
        "extract-features",
        "--manifest",
        p(&fixtures.join("clean.jsonl")),
        "--out",
        p(&features),
    ]);
    assert!(
        features.join("utt00.speech.tensor").exists()
            && features.join("utt07.speaker.tensor").exists()
    );

    let paired = p(&corpus.join("paired.jsonl")).to_string();
    let cleaner_dir = dir.join("cleaner");
    let vocoder_dir = dir.join("vocoder");
    let finetune_dir = dir.join("finetune");
    ok(&[
        "--config",
        c,
        "train-cleaner",
        "--paired",
        &paired,
        "--out",
        p(&cleaner_dir),
        "--steps",
        "2",
    ]);
    let cleaner = p(&cleaner_dir.join("cleaner.ckpt")).to_string();
    ok(&[
        "--config",
        c,
        "train-vocoder",
        "--paired",
        &paired,
        "--out",
        p(&vocoder_dir),
        "--steps",
        "2",
    ]);
    let o = miipher(&[
        "--config",
        c,
        "train-vocoder",
        "--paired",
        &paired,
        "--out",
        p(&finetune_dir),
        "--stage",
        "finetune_predicted",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[validation]"));
    let o = ok(&[
        "--config",
        c,
        "train-vocoder",
        "--paired",
        &paired,
        "--out",
        p(&finetune_dir),
        "--stage",
        "finetune_predicted",
        "--cleaner",
        &cleaner,
        "--init",
        p(&vocoder_dir.join("vocoder.ckpt")),
        "--steps",
        "2",
    ]);
    assert!(stderr(&o).contains("cleaner_predicted_features"));
    let vocoder = p(&finetune_dir.join("vocoder.ckpt")).to_string();
    assert_eq!(
        fs::read_to_string(cleaner_dir.join("cleaner_loss.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    // Single file.
    let transcript = dir.join("t.txt");
    fs::write(&transcript, "the quick brown fox\n").unwrap();
    let single = dir.join("single").join("restored.wav");
    fs::create_dir_all(single.parent().unwrap()).unwrap();
    ok(&[
        "--config",
        c,
        "restore",
        "--in",
        p(&corpus.join("degraded").join("utt03.wav")),
        "--transcript",
        p(&transcript),
        "--cleaner",
        &cleaner,
        "--vocoder",
        &vocoder,
        "--out",
        p(&single),
    ]);
    let y = miipher::audio::load_wav(&single).unwrap();
    assert_eq!(y.sample_rate, 24_000);
    assert_eq!(y.len() % 960, 0);
    assert!(single
        .parent()
        .unwrap()
        .join("effective_config.toml")
        .exists());

    // Whole manifest, then evaluation with a scripted ASR hook.
    let restored = dir.join("restored");
    ok(&[
        "--config",
        c,
        "restore",
        "--manifest",
        p(&corpus.join("degraded.jsonl")),
        "--cleaner",
        &cleaner,
        "--vocoder",
        &vocoder,
        "--out",
        p(&restored),
    ]);
    let asr = dir.join("asr.sh");
    fs::write(&asr, "#!/bin/sh\necho the\n").unwrap();
    let report_path = dir.join("report.json");
    let o = ok(&[
        "--config",
        c,
        "evaluate",
        "--restored",
        p(&restored.join("restored.jsonl")),
        "--clean",
        p(&fixtures.join("clean.jsonl")),
        "--degraded",
        p(&corpus.join("degraded.jsonl")),
        "--asr-command",
        &format!("sh {}", p(&asr)),
        "--out",
        p(&report_path),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("logmel_l2"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["per_utt"].as_array().unwrap().len(), 16);
    let wer = report["aggregates"]["restored"]["wer"].as_f64().unwrap();
    assert!(wer > 0.5 && wer < 1.0, "{wer}");
}
