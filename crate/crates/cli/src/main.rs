//! `onestage`: anchors, synthetic data, training, prediction, scoring,
//! proposal hit rates and timing from the command line.
//!
//! File formats:
//!
//! * annotations: one JSON object per line,
//!   `{"id": str, "image_w": int, "image_h": int, "query": str, "box": [x1, y1, x2, y2], "image": str?}`
//!   with the box in original-image pixels and `image` relative to the file;
//! * anchors: one `w h` line per shape, ascending area, network-input pixels;
//! * predictions: `id x1 y1 x2 y2 confidence` per line, original-image pixels;
//! * proposals: `id rank x1 y1 x2 y2 [score]` per line, ranks from 1.
//!
//! Every command prints its resolved configuration and the SHA-256 of that
//! text to stderr before doing any work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use onestage::anchors::{format_anchor_file, CentroidUpdate, KMeansConfig};
use onestage::data::{read_annotations, Vocabulary};
use onestage::error::read_to_string;
use onestage::evaluation::{format_predictions, parse_predictions, score, time_inference, TimingReport};
use onestage::model::GroundingModel;
use onestage::oracle::{hit_rate, model_as_proposer, parse_proposals, HitRateTable};
use onestage::pipeline::{anchors_from_records, train_from_records, write_synthetic, ModelBundle};
use onestage::synthetic::{generate, grammar_tokens, Profile, SyntheticConfig};
use onestage::training::{samples_from_synthetic, TrainConfig};
use onestage::{Error, Result};

#[derive(Parser)]
#[command(name = "onestage", version, about = "One-stage visual grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster anchor shapes from annotation boxes (1 - IoU k-means in the
    /// letterboxed frame) and write `w h` lines sorted by area.
    Anchors(AnchorsArgs),
    /// Generate a synthetic grounding dataset: annotations.jsonl, images/*.png
    /// and, with --features, pyramids/*.g1fb and queries/*.g1fb.
    GenData(GenDataArgs),
    /// Train a model and write a bundle directory: model.g1ck, model.toml,
    /// config.toml, anchors.txt, vocab.txt and losses.txt.
    Train(TrainArgs),
    /// Predict one box per annotation record with a trained bundle.
    Predict(PredictArgs),
    /// Score a prediction file against annotations (correct when IoU >= tau).
    Eval(EvalArgs),
    /// Hit rate of ranked proposals (IoU > tau within the top N).
    Oracle(OracleArgs),
    /// Mean forward-pass latency per image-query pair.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct AnchorsArgs {
    /// Annotation file.
    #[arg(long, visible_alias = "ann")]
    annotations: PathBuf,
    /// Number of shapes; the model expects 9.
    #[arg(long, default_value_t = 9)]
    k: usize,
    /// Network input size the boxes are letterboxed to.
    #[arg(long, default_value_t = 256)]
    input_size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Update::Median)]
    update: Update,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Update {
    Median,
    Mean,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples (image-query pairs).
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file of generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    /// Override any generator key, e.g. `--set max_distractors=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Also write descriptor pyramids and bag-of-words query blobs.
    #[arg(long)]
    features: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Annotation file of the training split.
    #[arg(long, visible_alias = "ann")]
    annotations: PathBuf,
    /// Bundle output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; keys absent from it take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Override any config key, e.g. `--set triplet=true --set d=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Small model for one CPU core (input 64, D 32).
    Desk,
    /// Full-size defaults (input 256, D 512).
    Full,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    /// Bundle directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, visible_alias = "ann")]
    annotations: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pyramid blob directory, replacing the one in the bundle config.
    #[arg(long)]
    pyramid_dir: Option<String>,
    /// Query blob directory, replacing the one in the bundle config.
    #[arg(long)]
    query_dir: Option<String>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Prediction file.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, visible_alias = "annotations")]
    ann: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Table,
    Kv,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[arg(long, visible_alias = "annotations")]
    ann: PathBuf,
    /// Proposal file, as `method=path` or a bare path; repeatable.
    #[arg(long)]
    proposals: Vec<String>,
    /// Also rank anchors of a trained bundle as proposals.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Candidate budgets N.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Column label of the table.
    #[arg(long, default_value = "hit")]
    split: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Bundle directory; when absent an untrained desk model is timed.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Annotations to time on; when absent synthetic samples are generated.
    #[arg(long, visible_alias = "ann")]
    annotations: Option<PathBuf>,
    /// Synthetic sample count when no annotations are given.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    warmup: usize,
    /// Timed repetitions; the spread between them is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

fn sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn log_config(command: &str, toml_text: &str, hash: &str) {
    eprintln!("[{command}] config sha256 {hash}");
    for line in toml_text.lines() {
        eprintln!("[{command}]   {line}");
    }
}

fn log_args<T: Serialize>(command: &str, args: &T) -> String {
    let text = toml::to_string(args).expect("arguments serialize");
    let hash = sha256(&text);
    log_config(command, &text, &hash);
    hash
}

/// Applies `key=value` overrides to a serializable config. Values are read
/// as TOML (`3`, `true`, `[8, 8, 8, 8]`), falling back to a bare string.
fn apply_sets<T: Serialize + DeserializeOwned>(base: &T, sets: &[String]) -> Result<T> {
    let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let table = value.as_table_mut().expect("configs serialize to tables");
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {s}`: expected KEY=VALUE")))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), parsed);
    }
    value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_anchors(a: AnchorsArgs) -> Result<()> {
    log_args("anchors", &a);
    let records = read_annotations(&a.annotations)?;
    let cfg = KMeansConfig {
        k: a.k,
        seed: a.seed,
        update: match a.update {
            Update::Median => CentroidUpdate::Median,
            Update::Mean => CentroidUpdate::Mean,
        },
        ..Default::default()
    };
    let km = anchors_from_records(&records, a.input_size, &cfg)?;
    let per_box = km.objective_history.last().copied().unwrap_or(0.0) / records.len() as f64;
    eprintln!("[anchors] {} boxes, {} iterations, mean 1-IoU {per_box:.4}", records.len(), km.iterations);
    write_output(a.out.as_deref(), &format_anchor_file(&km.anchors))
}

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SyntheticConfig::default(),
    };
    if let Some(p) = a.profile {
        cfg.profile = p;
    }
    let cfg: SyntheticConfig = apply_sets(&cfg, &a.sets)?;
    let text = format!(
        "count = {}\nseed = {}\nfeatures = {}\n{}",
        a.count,
        a.seed,
        a.features,
        toml::to_string(&cfg).expect("config serializes")
    );
    log_config("gen-data", &text, &sha256(&text));
    let ds = generate(a.count, a.seed, &cfg)?;
    let path = write_synthetic(&ds, &a.out, a.features)?;
    fs::write(a.out.join("synthetic.toml"), text)?;
    eprintln!("[gen-data] {} samples over {} scenes -> {}", ds.samples.len(), ds.scenes.len(), path.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let base = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    let mut cfg = match &a.config {
        Some(p) => base
            .overlay_toml(&read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => base,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(l) = a.lr {
        cfg.lr = l;
    }
    let cfg: TrainConfig = apply_sets(&cfg, &a.sets)?;
    cfg.validate()?;
    log_config("train", &cfg.to_toml(), &cfg.hash());

    let records = read_annotations(&a.annotations)?;
    fs::create_dir_all(&a.out)?;
    let (bundle, report) = train_from_records(&records, &a.annotations, &cfg, Some(&a.out))?;
    bundle.save(&a.out)?;
    let mut losses = String::from("step loss reg\n");
    for (i, (l, r)) in report.losses.iter().zip(&report.reg_losses).enumerate() {
        losses.push_str(&format!("{i} {l} {r}\n"));
    }
    fs::write(a.out.join("losses.txt"), losses)?;
    let tail = &report.losses[report.losses.len().saturating_sub(100)..];
    eprintln!(
        "[train] {} steps, final mean loss {:.4}, bundle -> {}",
        report.losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        a.out.display()
    );
    Ok(())
}

fn load_bundle(dir: &Path, pyramid_dir: Option<String>, query_dir: Option<String>) -> Result<ModelBundle> {
    let mut b = ModelBundle::load(dir)?;
    if pyramid_dir.is_some() {
        b.config.pyramid_dir = pyramid_dir;
    }
    if query_dir.is_some() {
        b.config.query_dir = query_dir;
    }
    Ok(b)
}

fn run_predict(a: PredictArgs) -> Result<()> {
    log_args("predict", &a);
    let bundle = load_bundle(&a.model, a.pyramid_dir, a.query_dir)?;
    let records = read_annotations(&a.annotations)?;
    let samples = bundle.samples(&records, &a.annotations)?;
    write_output(a.out.as_deref(), &format_predictions(&bundle.predict(&samples)?))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    log_args("eval", &a);
    let anns = read_annotations(&a.ann)?;
    let preds = parse_predictions(&read_to_string(&a.pred)?, &a.pred.display().to_string())?;
    let report = score(&preds, &anns, a.iou)?;
    print!(
        "{}",
        match a.format {
            Format::Table => report.table(),
            Format::Kv => report.key_values(),
        }
    );
    Ok(())
}

fn run_oracle(a: OracleArgs) -> Result<()> {
    log_args("oracle", &a);
    if a.proposals.is_empty() && a.model.is_none() {
        return Err(Error::Config("oracle needs --proposals or --model".into()));
    }
    let anns = read_annotations(&a.ann)?;
    let mut sets = Vec::new();
    for spec in &a.proposals {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map_or("proposals".into(), |s| s.to_string_lossy().into_owned());
                (stem, p)
            }
        };
        sets.push((name, parse_proposals(&read_to_string(&path)?, &path.display().to_string())?));
    }
    if let Some(dir) = &a.model {
        let bundle = ModelBundle::load(dir)?;
        let samples = bundle.samples(&anns, &a.ann)?;
        let max_n = a.n.iter().copied().max().unwrap_or(1);
        sets.push(("model".into(), model_as_proposer(&bundle.model, &samples, max_n)?));
    }
    let mut table = HitRateTable::default();
    for (name, set) in &sets {
        for &n in &a.n {
            table.set(&format!("{name}@{n}"), &a.split, hit_rate(set, &anns, n, a.iou)?);
        }
    }
    print!(
        "{}",
        match a.format {
            Format::Table => table.table(),
            Format::Kv => table.key_values(),
        }
    );
    Ok(())
}

/// Published GPU latencies of the full-size model with a transformer query
/// embedding and with a Fisher-vector embedding. Context only.
const REFERENCE_MS: [(&str, f64); 2] = [("transformer query", 38.0), ("fisher-vector query", 16.0)];

fn run_bench(a: BenchArgs) -> Result<()> {
    let hash = log_args("bench", &a);
    if a.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let (model, samples) = match (&a.model, &a.annotations) {
        (Some(dir), Some(ann)) => {
            let bundle = ModelBundle::load(dir)?;
            let samples = bundle.samples(&read_annotations(ann)?, ann)?;
            (bundle.model, samples)
        }
        (None, None) => {
            let cfg = TrainConfig::desk();
            let synth = SyntheticConfig {
                input_size: cfg.input_size,
                ..Default::default()
            };
            let ds = generate(a.samples, a.seed, &synth)?;
            let vocab = Vocabulary::from_tokens(grammar_tokens().into_iter().map(String::from));
            let samples = samples_from_synthetic(&ds, cfg.input_size, &vocab)?;
            let shapes = generate(256, a.seed, &synth)?;
            let anchors = anchors_from_records(&shapes.records(None), cfg.input_size, &KMeansConfig::default())?.anchors;
            let model = GroundingModel::new(cfg.model_config(vocab.len(), None)?, &anchors, a.seed)?;
            (model, samples)
        }
        _ => return Err(Error::Config("bench needs both --model and --annotations, or neither".into())),
    };
    let runs: Vec<TimingReport> = (0..a.repeats)
        .map(|_| time_inference(&model, &samples, a.warmup, &hash))
        .collect::<Result<_>>()?;
    let means: Vec<f64> = runs.iter().map(|r| r.mean_ms).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(0.0, f64::max);
    match a.format {
        Format::Table => {
            print!("{}", runs[0].table());
            for (i, m) in means.iter().enumerate() {
                println!("repeat {i}: {m:.4} ms");
            }
            println!("spread max/min {:.3}", hi / lo);
            for (what, ms) in REFERENCE_MS {
                println!("reference ({what}, GPU, 256 input): {ms} ms");
            }
        }
        Format::Kv => {
            print!("{}", runs[0].key_values());
            for (i, m) in means.iter().enumerate() {
                println!("repeat_{i}_ms={m}");
            }
            println!("spread={}", hi / lo);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Anchors(a) => run_anchors(a),
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
