use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn asrkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asrkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SUBCOMMANDS: [&str; 10] = [
    "synth", "lm-train", "graph", "decode", "cluster", "pretrain", "finetune", "sst", "run", "score",
];

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(code(&asrkit(&["--help"])), 0);
    for sub in SUBCOMMANDS {
        let o = asrkit(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&asrkit(&[])), 1);
    assert_eq!(code(&asrkit(&["no-such-command"])), 1);
    assert_eq!(code(&asrkit(&["synth"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let o = asrkit(&["synth", "--config", p(&bad), "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let missing = dir.path().join("absent.json");
    let o = asrkit(&["synth", "--config", p(&missing), "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1);

    let o = asrkit(&["run", "--plan", p(&missing), "--config", p(&bad)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let o = asrkit(&["score", "--ref", p(&missing), "--hyp", p(&missing)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = asrkit(&["run", "--plan", p(&missing)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.jsonl");
    let h = dir.path().join("hyp.jsonl");
    fs::write(
        &r,
        "{\"id\":\"a\",\"transcript\":[\"x\",\"y\",\"z\"],\"domain\":\"A\"}\n{\"id\":\"b\",\"transcript\":[\"x\"],\"domain\":\"B\"}\n",
    )
    .unwrap();
    fs::write(&h, "{\"id\":\"a\",\"words\":[\"x\",\"z\"]}\n").unwrap();
    let out = dir.path().join("s");
    let o = asrkit(&["score", "--ref", p(&r), "--hyp", p(&h), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = json(out.join("wer.json"));
    assert_eq!(rep["corpus"]["pooled"], 0.5);
    assert_eq!(rep["utterances"][0]["deletions"], 1);
    assert_eq!(rep["utterances"][1]["wer"], 1.0);
    assert!(out.join("config.json").is_file());

    let o = asrkit(&["score", "--ref", p(&r), "--hyp", p(&h)]);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, rep);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("synth.json");
    fs::write(
        &spec,
        r#"{"n_supervised": 40, "n_untranscribed": 20, "n_test": 10, "n_text": 300, "vocab_size": 20}"#,
    )
    .unwrap();
    let corpus = d.join("corpus");
    let o = asrkit(&["synth", "--config", p(&spec), "--seed", "7", "--out", p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = json(corpus.join("config.json"));
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["n_supervised"], 40);
    for f in ["supervised.jsonl", "untranscribed.jsonl", "test_A.jsonl", "test_B.jsonl", "lexicon.tsv", "text.txt"] {
        assert!(corpus.join(f).is_file(), "{f}");
    }
    let lexicon = corpus.join("lexicon.tsv");

    let lm = d.join("lm");
    let o = asrkit(&["lm-train", "--text", p(&corpus.join("text.txt")), "--order", "2", "--out", p(&lm)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(lm.join("lm.arpa").is_file());
    let charlm = d.join("charlm");
    let o = asrkit(&[
        "lm-train", "--text", p(&corpus.join("text.txt")), "--unit", "char", "--lexicon", p(&lexicon), "--out", p(&charlm),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = asrkit(&["lm-train", "--text", p(&corpus.join("text.txt")), "--unit", "char", "--out", p(&charlm)]);
    assert_eq!(code(&o), 1, "char LM without a lexicon");

    let graph = d.join("graph");
    let o = asrkit(&["graph", "--lexicon", p(&lexicon), "--lm", p(&lm.join("lm.arpa")), "--out", p(&graph)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(graph.join("graph.json").is_file());

    let model = d.join("am");
    let o = asrkit(&[
        "finetune", "--manifest", p(&corpus.join("supervised.jsonl")), "--lexicon", p(&lexicon), "--epochs", "4", "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(model.join("config.json"))["train"]["epochs"], 4);
    let wsam = model.join("model.wsam");

    let test = corpus.join("test_A.jsonl");
    let o = asrkit(&[
        "decode", "--model", p(&wsam), "--manifest", p(&test), "--lexicon", p(&lexicon), "--mode", "ctc-wfst", "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--graph"), "{}", stderr(&o));

    let dec = d.join("dec");
    let o = asrkit(&[
        "decode", "--model", p(&wsam), "--manifest", p(&test), "--lexicon", p(&lexicon), "--mode", "ctc-wfst", "--graph",
        p(&graph), "--beam-size", "4", "--out", p(&dec),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hyps = fs::read_to_string(dec.join("hyps.jsonl")).unwrap();
    assert_eq!(hyps.lines().count(), 10);
    let wer = json(dec.join("wer.json"));
    assert_eq!(json(dec.join("config.json"))["decode"]["beam_size"], 4);

    let scored = d.join("scored");
    let o = asrkit(&["score", "--ref", p(&test), "--hyp", p(&dec.join("hyps.jsonl")), "--out", p(&scored)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pooled = |v: &serde_json::Value| v.pointer("/pooled").or(v.pointer("/corpus/pooled")).unwrap().as_f64().unwrap();
    assert_eq!(pooled(&wer), pooled(&json(scored.join("wer.json"))));

    let o = asrkit(&[
        "decode", "--model", p(&wsam), "--manifest", p(&test), "--lexicon", p(&lexicon), "--mode", "fusion", "--char-lm",
        p(&charlm.join("lm.arpa")), "--out", p(&d.join("fusion")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let untranscribed = corpus.join("untranscribed.jsonl");
    let clusters = d.join("clusters");
    let o = asrkit(&["cluster", "--manifest", p(&untranscribed), "--raw-features", "--k", "6", "--out", p(&clusters)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = asrkit(&["cluster", "--manifest", p(&untranscribed), "--out", p(&d.join("y"))]);
    assert_eq!(code(&o), 1, "embedding clustering needs a model");
    let pre = d.join("pre");
    let o = asrkit(&[
        "pretrain", "--targets", p(&clusters.join("targets.jsonl")), "--manifest", p(&untranscribed), "--epochs", "2",
        "--out", p(&pre),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tuned = d.join("tuned");
    let o = asrkit(&[
        "finetune", "--model", p(&pre.join("model.wsam")), "--manifest", p(&corpus.join("supervised.jsonl")), "--lexicon",
        p(&lexicon), "--epochs", "2", "--out", p(&tuned),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let sst = d.join("sst");
    let o = asrkit(&[
        "sst", "--model", p(&wsam), "--supervised", p(&corpus.join("supervised.jsonl")), "--untranscribed", p(&untranscribed),
        "--lexicon", p(&lexicon), "--test", p(&test), "--mode", "ctc-wfst", "--graph", p(&graph), "--iterations", "2", "--out",
        p(&sst),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 1..=2 {
        for f in ["pseudo.jsonl", "model.wsam", "train.json"] {
            assert!(sst.join(format!("iter{i}")).join(f).is_file(), "iter{i}/{f}");
        }
    }
    assert!(sst.join("report.json").is_file());
    let o = asrkit(&[
        "sst", "--model", p(&wsam), "--supervised", p(&corpus.join("supervised.jsonl")), "--untranscribed", p(&test),
        "--lexicon", p(&lexicon), "--test", p(&test), "--mode", "greedy", "--out", p(&d.join("leak")),
    ]);
    assert_eq!(code(&o), 2, "test audio used for self-training");
}
