use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--quiet",
    "--corpus.clips", "40",
    "--corpus.holdout", "6",
    "--gesture.steps", "20",
    "--speech.train_clips", "10",
    "--backbone.pretrain_steps", "4",
    "--backbone.finetune_steps", "4",
    "--flow.steps", "10",
    "--flow.sampling_steps", "4",
    "--extractor.steps", "10",
    "--eval.clips", "3",
    "--sampling.max_len", "200",
];

fn gelina(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gelina"))
        .args(args)
        .args(TINY)
        .arg("--out_dir")
        .arg(out)
        .env_remove("GELINA_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_upstream_stage_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = gelina(d.path(), &["backbone", "finetune"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("gelina backbone pretrain"));
    let o = gelina(d.path(), &["tokenizer", "train", "gesture"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("gelina corpus gen"));
}

#[test]
fn unknown_key_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let o = gelina(d.path(), &["corpus", "gen", "--corpus.nonsense", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = gelina(d.path(), &["corpus", "gen", "--corpus.clips", "many"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides_resolve_in_order() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("run.cfg");
    std::fs::write(&file, "seed = 5\neval.clips = 9\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gelina"))
        .args(["config", "--config"])
        .arg(&file)
        .args(["--eval.clips", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seed = 5"), "{text}");
    assert!(text.contains("eval.clips = 2"), "{text}");
}

#[test]
fn tiny_pipeline_then_every_generation_mode() {
    let d = tempfile::tempdir().unwrap();
    let o = gelina(d.path(), &["pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(d.path().join("eval/report.json")).unwrap();
    assert!(report.contains("valid_stream_fraction"));
    for f in [
        "corpus/manifest.jsonl",
        "gesture_tokenizer.ckpt",
        "speech_codec.ckpt",
        "text_bpe.txt",
        "backbone_pretrain.ckpt",
        "backbone.ckpt",
        "flow.ckpt",
        "extractor.ckpt",
        "logs/backbone_finetune.log",
    ] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(d.path().join("corpus/manifest.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(manifest.lines().last().unwrap()).unwrap();
    let id = last["id"].as_str().unwrap();

    let o = gelina(d.path(), &["synthesize", "--text", "hello there", "--name", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gelina(d.path(), &["clone", "--prompt", id, "--prompt-words", "1", "--text", "more", "--name", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gelina(d.path(), &["s2g", "--clip", id, "--name", "c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stem in ["a", "b", "c"] {
        for ext in ["tok", "stream", "wav"] {
            assert!(d.path().join(format!("synth/{stem}.{ext}")).exists(), "{stem}.{ext}");
        }
    }
    let o = gelina(d.path(), &["clone", "--prompt", "nope", "--text", "x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
