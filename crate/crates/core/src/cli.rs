//! The `lightcap` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_alignment, Checkpoint};
use crate::concepts::{retrieve_concepts, AlignmentMLP, ConceptSet, ConceptVocabulary};
use crate::config::RunConfig;
use crate::data::{self, Prediction};
use crate::decoder::generate;
use crate::distill::Stage;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{CaptionModel, ModelConfig};
use crate::profiler::{pipeline_latency, BudgetReport, Pipeline, Retrieval, SeqAssumption};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::train::{caption_nll, train, Teachers};
use crate::vision::{load_region_file, uniform_proposals, GridFeature, Region};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const LOG_ENV: &str = "LIGHTCAP_LOG";

#[derive(Parser, Debug)]
#[command(name = "lightcap", version, about = "Lightweight image captioning")]
pub struct Cli {
    /// JSON run configuration; the desk-scale defaults apply otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch-parallel work (1 = single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Masked caption + concept pollution pre-training.
    Pretrain(TrainArgs),
    /// Teacher-forced caption fine-tuning.
    Finetune(TrainArgs),
    /// Train a student against one or more teacher checkpoints.
    Distill(DistillArgs),
    /// Caption one feature grid or a whole dataset.
    Caption(CaptionArgs),
    /// BLEU@4 and CIDEr of predictions against references.
    Evaluate(EvalArgs),
    /// Top-K visual concepts for one feature grid.
    RetrieveConcepts(RetrieveArgs),
    /// Parameter / FLOP budget and optional latency breakdown.
    Profile(ProfileArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// JSONL dataset.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation JSONL; its caption loss is reported at the end.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines loss log (standard output otherwise).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Load an initial checkpoint whose config differs from the run's.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DistillArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Teacher checkpoint; repeat for an ensemble.
    #[arg(long)]
    pub teacher: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "finetune")]
    pub stage: StageArg,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConceptArgs {
    /// JSONL region file (`{"id", "regions": [[x1,y1,x2,y2], ..]}`).
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Region record to use (the first otherwise).
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub alignment: Option<PathBuf>,
    #[arg(long)]
    pub concept_names: Option<PathBuf>,
    #[arg(long)]
    pub concept_embeddings: Option<PathBuf>,
    /// Concepts kept per image.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CaptionArgs {
    /// LTEN grid `[H, W, C]`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Caption every record of a JSONL dataset instead.
    #[arg(long, conflicts_with = "features")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Argmax decoding (same as `--beam 1`).
    #[arg(long, conflicts_with = "beam")]
    pub greedy: bool,
    /// Comma-separated concept words, bypassing retrieval.
    #[arg(long, value_delimiter = ',')]
    pub concepts: Option<Vec<String>>,
    #[command(flatten)]
    pub retrieval: ConceptArgs,
    /// Predictions file for `--dataset` (standard output otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print the concepts used and per-stage timings.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// JSONL `{"id", "caption"}`.
    #[arg(long)]
    pub pred: PathBuf,
    /// JSONL `{"id", "references": [..]}`.
    #[arg(long)]
    pub refs: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub retrieval: ConceptArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    /// Profile this checkpoint's model instead of the configured one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Profile the full-size student.
    #[arg(long, conflicts_with = "checkpoint")]
    pub full: bool,
    #[arg(long, default_value_t = 49)]
    pub visual: usize,
    #[arg(long, default_value_t = 20)]
    pub concepts: usize,
    #[arg(long, default_value_t = 20)]
    pub caption: usize,
    #[arg(long, default_value_t = 640)]
    pub detector_size: usize,
    /// Regions passed through the alignment MLP.
    #[arg(long, default_value_t = 10)]
    pub regions: usize,
    /// Also time the inference stages.
    #[arg(long)]
    pub latency: bool,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Decode steps per image in the latency total.
    #[arg(long, default_value_t = 12)]
    pub caption_len: usize,
    /// Entries of the synthetic concept vocabulary used for timing.
    #[arg(long, default_value_t = 1000)]
    pub concept_vocab: usize,
    /// Print JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn init_logging() -> std::result::Result<(), String> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "error".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(format!(
            "{LOG_ENV} must be one of error, info, debug (got {level:?})"
        ));
    }
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Regular output goes to `out`, diagnostics to standard error.
pub fn main_with<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let threads = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        Some(n) => n,
        None if matches!(cli.command, Command::Profile(_)) => 1,
        None => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| run(&cli, out)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Executes a parsed command.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, explicit) = match &cli.config {
        Some(p) => (RunConfig::load(p)?, true),
        None => (RunConfig::default(), false),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Pretrain(a) => cmd_train(cfg, explicit, a, Stage::Pretrain, &[], out),
        Command::Finetune(a) => cmd_train(cfg, explicit, a, Stage::Finetune, &[], out),
        Command::Distill(a) => {
            let teachers = if a.teacher.is_empty() {
                cfg.kd.teachers.clone()
            } else {
                a.teacher.clone()
            };
            if teachers.is_empty() {
                return Err(Error::Usage(
                    "distill needs at least one --teacher checkpoint".into(),
                ));
            }
            cmd_train(cfg, explicit, &a.train, a.stage.into(), &teachers, out)
        }
        Command::Caption(a) => cmd_caption(&cfg, a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::RetrieveConcepts(a) => cmd_retrieve(&cfg, a, out),
        Command::Profile(a) => cmd_profile(&cfg, a, out),
    }
}

fn required(p: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    p.cloned()
        .ok_or_else(|| Error::Usage(format!("missing {flag}")))
}

fn write_line(out: &mut dyn Write, s: &str) -> Result<()> {
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_train(
    mut cfg: RunConfig,
    explicit: bool,
    a: &TrainArgs,
    stage: Stage,
    teacher_paths: &[PathBuf],
    out: &mut dyn Write,
) -> Result<()> {
    let train_path = required(a.train.as_ref().or(cfg.paths.train.as_ref()), "--train")?;
    let vocab_path = required(a.vocab.as_ref().or(cfg.paths.vocab.as_ref()), "--vocab")?;
    let out_path = required(a.out.as_ref().or(cfg.paths.output.as_ref()), "--out")?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let vocab = Vocab::load(&vocab_path)?;
    let sp = vocab.specials();
    let samples = data::load_samples(&train_path, &vocab)?;
    if !explicit {
        cfg.model.vocab_size = vocab.len();
        if let Some(s) = samples.first() {
            cfg.model.grid_channels = s.grid.cols();
        }
    }
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "config vocab_size {} but {} has {} tokens",
            cfg.model.vocab_size,
            vocab_path.display(),
            vocab.len()
        )));
    }
    let (model, start) = match a.init.as_ref().or(cfg.paths.init.as_ref()) {
        Some(p) => {
            let ck = Checkpoint::load(p, Some(&cfg.model), a.allow_config_mismatch)?;
            (ck.model, ck.step)
        }
        None => (CaptionModel::new(cfg.model.clone(), cfg.seed)?, 0),
    };
    let teachers = teacher_paths
        .iter()
        .map(|p| Checkpoint::load(p, None, false).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let plan = if teachers.is_empty() {
        None
    } else {
        Some(Teachers::from_config(&model, &teachers, &cfg, stage)?)
    };
    log::info!(
        "{} on {} items for {} steps",
        serde_json::to_string(&stage)?,
        samples.len(),
        cfg.steps
    );

    let mut log_file = match a.log.as_ref().or(cfg.paths.log.as_ref()) {
        Some(p) => Some((
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
            p.clone(),
        )),
        None => None,
    };
    let result = train(model, &samples, &cfg, stage, sp, plan, |line| {
        let text = line.to_json();
        match log_file.as_mut() {
            Some((f, p)) => writeln!(f, "{text}").map_err(|e| Error::io(p.as_path(), e)),
            None => write_line(out, &text),
        }
    })?;

    let mut ck = Checkpoint::new(result.model, start + cfg.steps as u64);
    ck.metadata = serde_json::json!({
        "stage": stage,
        "distilled": !teachers.is_empty(),
        "seed": cfg.seed,
    });
    ck.save(&out_path)?;
    log::info!("wrote {}", out_path.display());
    if let Some(val) = &a.val.as_ref().or(cfg.paths.val.as_ref()) {
        let v = data::load_samples(val, &vocab)?;
        let nll = caption_nll(&ck.model, &v, sp)?;
        write_line(
            out,
            &serde_json::json!({ "val_caption_nll": nll }).to_string(),
        )?;
    }
    Ok(())
}

struct ConceptTools {
    mlp: AlignmentMLP,
    vocab: ConceptVocabulary,
    k: usize,
}

fn concept_tools(cfg: &RunConfig, a: &ConceptArgs) -> Result<ConceptTools> {
    let mlp = load_alignment(&required(
        a.alignment.as_ref().or(cfg.paths.alignment.as_ref()),
        "--alignment",
    )?)?;
    let names = required(
        a.concept_names
            .as_ref()
            .or(cfg.paths.concept_names.as_ref()),
        "--concept-names",
    )?;
    let embs = required(
        a.concept_embeddings
            .as_ref()
            .or(cfg.paths.concept_embeddings.as_ref()),
        "--concept-embeddings",
    )?;
    Ok(ConceptTools {
        mlp,
        vocab: ConceptVocabulary::load(names, embs)?,
        k: a.k.unwrap_or(cfg.top_k),
    })
}

fn pick_regions(a: &ConceptArgs) -> Result<Vec<Region>> {
    let path = required(a.regions.as_ref(), "--regions")?;
    let records = load_region_file(&path)?;
    let found = match &a.id {
        Some(id) => records.into_iter().find(|(r, _)| r == id),
        None => records.into_iter().next(),
    };
    found
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Usage(format!("no matching region record in {}", path.display())))
}

fn cmd_caption(cfg: &RunConfig, a: &CaptionArgs, out: &mut dyn Write) -> Result<()> {
    let ck_path = required(
        a.checkpoint.as_ref().or(cfg.paths.init.as_ref()),
        "--checkpoint",
    )?;
    let vocab = Vocab::load(required(
        a.vocab.as_ref().or(cfg.paths.vocab.as_ref()),
        "--vocab",
    )?)?;
    let model = Checkpoint::load(&ck_path, None, false)?.model;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(
            "checkpoint and vocabulary sizes differ".into(),
        ));
    }
    let sp = vocab.specials();
    let mut beam = cfg.decode;
    if let Some(b) = a.beam {
        beam.beam_size = b;
    }
    if let Some(l) = a.max_len {
        beam.max_len = l;
    }
    if a.greedy {
        beam.beam_size = 1;
        beam.length_penalty = None;
    }
    if beam.beam_size == 0 {
        return Err(Error::Usage("--beam must be at least 1".into()));
    }
    let wants_retrieval = a.concepts.is_none() && a.retrieval.regions.is_some();
    let tools = if wants_retrieval {
        Some(concept_tools(cfg, &a.retrieval)?)
    } else {
        None
    };

    if let Some(ds) = &a.dataset {
        let records = data::load_records(ds)?;
        let mut preds = Vec::with_capacity(records.len());
        for r in &records {
            let grid = GridFeature::load(&r.feature_file)?;
            let concepts = match (&a.concepts, &r.concepts, &tools) {
                (Some(c), _, _) | (None, Some(c), _) => data::concept_ids(&vocab, c),
                (None, None, Some(t)) => {
                    let set = retrieve_concepts(&grid, &r.regions()?, &t.mlp, &t.vocab, t.k)?;
                    concept_words(&vocab, &set)
                }
                _ => Vec::new(),
            };
            let ids = generate(&model, &grid.flatten(), &concepts, sp, &beam)?;
            preds.push(Prediction {
                id: r.id.clone(),
                caption: vocab.decode(&ids)?,
            });
        }
        match &a.out {
            Some(p) => data::save_predictions(p, &preds)?,
            None => {
                for p in &preds {
                    write_line(out, &serde_json::to_string(p)?)?;
                }
            }
        }
        return Ok(());
    }

    let feat = required(a.features.as_ref(), "--features or --dataset")?;
    let t0 = Instant::now();
    let grid = GridFeature::load(&feat)?;
    let t_load = t0.elapsed();
    let t1 = Instant::now();
    let (concepts, set) = match (&a.concepts, &tools) {
        (Some(c), _) => (data::concept_ids(&vocab, c), None),
        (None, Some(t)) => {
            let set =
                retrieve_concepts(&grid, &pick_regions(&a.retrieval)?, &t.mlp, &t.vocab, t.k)?;
            (concept_words(&vocab, &set), Some(set))
        }
        (None, None) => (Vec::new(), None),
    };
    let t_concepts = t1.elapsed();
    let t2 = Instant::now();
    let ids = generate(&model, &grid.flatten(), &concepts, sp, &beam)?;
    let t_decode = t2.elapsed();
    let text = vocab.decode(&ids)?;
    write_line(out, &text)?;
    if a.verbose {
        if let Some(set) = &set {
            write_line(out, &format!("concepts: {}", serde_json::to_string(set)?))?;
        } else {
            write_line(out, &format!("concepts: {}", vocab.decode(&concepts)?))?;
        }
        write_line(
            out,
            &format!(
                "timings: load {:.3} ms, concepts {:.3} ms, decode {:.3} ms ({} tokens)",
                t_load.as_secs_f64() * 1e3,
                t_concepts.as_secs_f64() * 1e3,
                t_decode.as_secs_f64() * 1e3,
                ids.len()
            ),
        )?;
    }
    Ok(())
}

/// Caption-vocabulary ids of retrieved concept names.
fn concept_words(vocab: &Vocab, set: &ConceptSet) -> Vec<u32> {
    let names: Vec<String> = set.names().into_iter().map(str::to_string).collect();
    data::concept_ids(vocab, &names)
}

fn cmd_evaluate(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let items = data::join_eval(
        &data::load_predictions(&a.pred)?,
        &data::load_references(&a.refs)?,
    )?;
    let scores = metrics::evaluate(&items)?;
    write_line(out, &serde_json::to_string(&scores)?)
}

fn cmd_retrieve(cfg: &RunConfig, a: &RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let tools = concept_tools(cfg, &a.retrieval)?;
    let grid = GridFeature::load(&a.features)?;
    let set = retrieve_concepts(
        &grid,
        &pick_regions(&a.retrieval)?,
        &tools.mlp,
        &tools.vocab,
        tools.k,
    )?;
    write_line(out, &serde_json::to_string(&set)?)
}

fn cmd_profile(cfg: &RunConfig, a: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let model_cfg = if a.full {
        ModelConfig::full_student()
    } else if let Some(p) = &a.checkpoint {
        Checkpoint::load(p, None, false)?.model.config
    } else {
        cfg.model.clone()
    };
    let seq = SeqAssumption {
        visual: a.visual,
        concepts: a.concepts,
        caption: a.caption,
    };
    if seq.visual == 0 {
        return Err(Error::Usage("--visual must be at least 1".into()));
    }
    let report = BudgetReport::pipeline(&model_cfg, &seq, a.detector_size, a.regions);
    if a.json {
        write_line(out, &serde_json::to_string(&report)?)?;
    } else {
        write!(out, "{}", report.table()).map_err(|e| Error::io("<stdout>", e))?;
    }
    if !a.latency {
        return Ok(());
    }
    let model = match &a.checkpoint {
        Some(p) => Checkpoint::load(p, None, false)?.model,
        None => CaptionModel::new(model_cfg.clone(), cfg.seed)?,
    };
    let c = model.config.grid_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = (seq.visual as f64).sqrt() as usize;
    let (h, w) = if side * side == seq.visual {
        (side, side)
    } else {
        (seq.visual, 1)
    };
    let grid = GridFeature::new(Tensor::randn([h, w, c], 1.0, &mut rng))?;
    let vocab_ids = (5..model.config.vocab_size as u32).cycle();
    let concepts: Vec<u32> = vocab_ids.take(seq.concepts).collect();
    let mlp = AlignmentMLP::new(c, c.min(1024), c.min(1024), cfg.seed)?;
    let names: Vec<String> = (0..a.concept_vocab.max(1))
        .map(|i| format!("c{i}"))
        .collect();
    let cv = ConceptVocabulary::from_raw(
        names,
        Tensor::randn([a.concept_vocab.max(1), mlp.out_dim()], 1.0, &mut rng),
    )?;
    let per_axis = (a.regions as f64).sqrt().ceil() as usize;
    let regions: Vec<Region> = uniform_proposals(per_axis)
        .into_iter()
        .take(a.regions)
        .collect();
    let sp = Vocab::with_words::<&str>(&[])?.specials();
    let pipeline = Pipeline {
        model: &model,
        feature_file: None,
        grid: &grid,
        retrieval: (!regions.is_empty()).then_some(Retrieval {
            regions: &regions,
            mlp: &mlp,
            vocab: &cv,
            k: cfg.top_k,
        }),
        concepts: &concepts,
        specials: sp,
        caption_len: a.caption_len,
    };
    let lat = pipeline_latency(&pipeline, a.warmup, a.repeats)?;
    if a.json {
        write_line(out, &serde_json::to_string(&lat)?)
    } else {
        write!(out, "{}", lat.table()).map_err(|e| Error::io("<stdout>", e))
    }
}
