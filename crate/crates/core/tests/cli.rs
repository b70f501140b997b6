use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lightcap::checkpoint::save_alignment;
use lightcap::concepts::{AlignmentMLP, ConceptVocabulary};
use lightcap::data::{save_predictions, save_references, Prediction, References};
use lightcap::synth::{SynthConfig, SynthCorpus};
use lightcap::tensor::Tensor;
use lightcap::vision::{save_region_file, Region};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lightcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightcap"))
        .args(args)
        .env_remove("LIGHTCAP_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    vocab: PathBuf,
    corpus: SynthCorpus,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = SynthCorpus::generate(&SynthConfig::default()).unwrap();
    let train = corpus.write(&root, "train").unwrap();
    Fixture {
        vocab: root.join("vocab.txt"),
        _dir: dir,
        root,
        train,
        corpus,
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&lightcap(&[])), 2);
    assert_eq!(code(&lightcap(&["frobnicate"])), 2);
    assert_eq!(code(&lightcap(&["finetune", "--steps", "many"])), 2);
    assert_eq!(code(&lightcap(&["--help"])), 0);
    assert_eq!(code(&lightcap(&["distill", "--train", "x.jsonl"])), 2);
    assert_eq!(code(&lightcap(&["finetune", "--threads", "0"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_lightcap"))
        .args(["profile"])
        .env("LIGHTCAP_LOG", "chatty")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let f = fixture();
    let out = f.root.join("m.lcap");
    let o = lightcap(&[
        "finetune",
        "--train",
        "/nonexistent/train.jsonl",
        "--vocab",
        s(&f.vocab),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    let bad = f.root.join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": 0, \"caption\": \"a dog\"}\n").unwrap();
    let o = lightcap(&[
        "finetune",
        "--train",
        s(&bad),
        "--vocab",
        s(&f.vocab),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));
}

#[test]
fn seeded_single_thread_training_is_bitwise_repeatable() {
    let f = fixture();
    let run = |tag: &str, command: &str| {
        let out = f.root.join(format!("{tag}.lcap"));
        let o = lightcap(&[
            command,
            "--train",
            s(&f.train),
            "--vocab",
            s(&f.vocab),
            "--out",
            s(&out),
            "--steps",
            "2",
            "--seed",
            "7",
            "--threads",
            "1",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (stdout(&o), std::fs::read(out).unwrap())
    };
    for command in ["pretrain", "finetune"] {
        let a = run(&format!("{command}a"), command);
        let b = run(&format!("{command}b"), command);
        assert_eq!(a.0, b.0);
        assert_eq!(a.0.lines().count(), 1);
        assert!(a.1 == b.1, "{command} checkpoints differ");
    }
}

#[test]
fn train_then_caption_and_distill() {
    let f = fixture();
    let cfg = f.root.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"steps": 500, "batch_size": 8, "log_every": 100,
            "model": {"vocab_size": 200, "hidden": 32, "layers": 2, "heads": 4, "ffn": 128,
                      "max_positions": 128, "grid_channels": 64, "modulator_hidden": 4, "branches": 3}}"#,
    )
    .unwrap();
    let model = f.root.join("model.lcap");
    let o = lightcap(&[
        "finetune",
        "--config",
        s(&cfg),
        "--train",
        s(&f.train),
        "--vocab",
        s(&f.vocab),
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 5);

    let item = &f.corpus.items[0];
    let feat = f.root.join("features").join("train_00000.lten");
    let concepts = item.concepts.join(",");
    let caption = |extra: &[&str]| {
        let mut args = vec![
            "caption",
            "--features",
            s(&feat),
            "--checkpoint",
            s(&model),
            "--vocab",
            s(&f.vocab),
            "--concepts",
            &concepts,
        ];
        args.extend_from_slice(extra);
        let o = lightcap(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let greedy = caption(&["--greedy"]);
    assert_eq!(greedy.trim(), item.caption);
    assert_eq!(caption(&["--beam", "1"]), greedy);
    assert!(caption(&["--max-len", "1"]).split_whitespace().count() <= 1);
    let verbose = caption(&["--verbose"]);
    assert!(verbose.contains("concepts:") && verbose.contains("timings:"));

    // Whole-dataset captioning feeds the evaluator.
    let preds = f.root.join("preds.jsonl");
    let o = lightcap(&[
        "caption",
        "--dataset",
        s(&f.train),
        "--checkpoint",
        s(&model),
        "--vocab",
        s(&f.vocab),
        "--greedy",
        "--out",
        s(&preds),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let refs = f.root.join("refs.jsonl");
    let records = lightcap::data::load_records(&f.train).unwrap();
    save_references(&refs, &lightcap::data::references_from_records(&records)).unwrap();
    let o = lightcap(&["evaluate", "--pred", s(&preds), "--refs", s(&refs)]);
    assert_eq!(code(&o), 0);
    let scores: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(scores["bleu4"].as_f64().unwrap() > 0.8, "{scores}");

    // The trained model teaches a fresh student for two steps.
    let student = f.root.join("student.lcap");
    let o = lightcap(&[
        "distill",
        "--train",
        s(&f.train),
        "--vocab",
        s(&f.vocab),
        "--teacher",
        s(&model),
        "--out",
        s(&student),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert!(last["kd"]["prediction"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_prints_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs) = (dir.path().join("p.jsonl"), dir.path().join("r.jsonl"));
    let write = |cands: [&str; 2]| {
        let p: Vec<Prediction> = cands
            .iter()
            .enumerate()
            .map(|(i, c)| Prediction {
                id: i.into(),
                caption: c.to_string(),
            })
            .collect();
        save_predictions(&pred, &p).unwrap();
    };
    save_references(
        &refs,
        &[
            References {
                id: 0.into(),
                references: vec!["a man riding a horse".into()],
            },
            References {
                id: 1.into(),
                references: vec!["two dogs play in snow".into()],
            },
        ],
    )
    .unwrap();
    write(["a man riding a horse", "two dogs play in snow"]);
    let o = lightcap(&["evaluate", "--pred", s(&pred), "--refs", s(&refs)]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["bleu4"].as_f64(), Some(1.0));
    assert!((v["cider"].as_f64().unwrap() - 10.0).abs() < 1e-6);

    write(["zzz yyy xxx www", "qqq rrr sss ttt"]);
    let o = lightcap(&["evaluate", "--pred", s(&pred), "--refs", s(&refs)]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["bleu4"].as_f64(), Some(0.0));
    assert_eq!(v["cider"].as_f64(), Some(0.0));
}

#[test]
fn retrieve_concepts_prints_top_k() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let align = f.root.join("align.lcap");
    save_alignment(&AlignmentMLP::new(64, 16, 16, 2).unwrap(), &align).unwrap();
    let names: Vec<String> = (0..30).map(|i| format!("concept{i}")).collect();
    let cv = ConceptVocabulary::from_raw(names, Tensor::randn([30, 16], 1.0, &mut rng)).unwrap();
    let (np, ep) = (f.root.join("names.txt"), f.root.join("emb.lten"));
    cv.save(&np, &ep).unwrap();
    let regions = f.root.join("regions.jsonl");
    let boxes = vec![
        Region::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        Region::new(0.5, 0.5, 1.0, 1.0).unwrap(),
        Region::full(),
    ];
    save_region_file(&regions, &[("img".into(), boxes)]).unwrap();
    let feat = f.root.join("features").join("train_00000.lten");
    let o = lightcap(&[
        "retrieve-concepts",
        "--features",
        s(&feat),
        "--regions",
        s(&regions),
        "--alignment",
        s(&align),
        "--concept-names",
        s(&np),
        "--concept-embeddings",
        s(&ep),
        "--k",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert!(!entries.is_empty() && entries.len() <= 2);
}

#[test]
fn profile_reports_budget_and_latency() {
    let o = lightcap(&["profile", "--full"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("1 multiply-accumulate = 2 FLOPs"));
    assert!(text.contains("modulator"));
    let o = lightcap(&[
        "profile",
        "--json",
        "--latency",
        "--repeats",
        "3",
        "--caption-len",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut lines = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .collect::<Vec<_>>();
    let latency = lines.pop().unwrap();
    let budget = lines.pop().unwrap();
    assert!(budget["total_params"].as_u64().unwrap() > 0);
    let stages = latency["stages"].as_array().unwrap();
    assert_eq!(stages.last().unwrap()["multiplier"].as_u64(), Some(4));
}
