use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use s4mt::attribution::{
    export_heatmap, sharpness, source_attribution, target_attribution, AttributionMode, HeatmapFormat,
    HeatmapMetadata,
};
use s4mt::data::{generate_range, ParallelCorpus, Split, SyntheticTaskSpec, Vocabulary};
use s4mt::eval::{decode, evaluate_buckets, paired_bootstrap, BucketBy, DecodeConfig};
use s4mt::model::{build_model, FrozenModel, Model};
use s4mt::run::{read_json, write_json, RunConfig};
use s4mt::ssm::{duality_residuals, DualityCheck};
use s4mt::train::{average_checkpoint_files, epoch_checkpoints, Checkpoint, Trainer};
use s4mt::Error;

#[derive(Parser)]
#[command(name = "s4mt", version, about = "State-space translation models: data, training, evaluation, analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus.
    GenData(GenData),
    /// Train a model.
    Train(TrainArgs),
    /// Decode a split and report BLEU per length bucket.
    Evaluate(EvalArgs),
    /// Masking-based attribution heatmap for one sentence pair.
    Heatmap(HeatmapArgs),
    /// Compare convolution and recurrent outputs on random HiPPO banks.
    CheckKernel(CheckKernelArgs),
    /// Paired bootstrap test: is system A better than system B?
    Significance(SignificanceArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training pairs.
    #[arg(long)]
    n: usize,
    /// Pairs in each of the valid and test splits (default n/10).
    #[arg(long)]
    eval_n: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Average the last k epoch checkpoints into `averaged.ckpt`.
    #[arg(long)]
    average_last: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Bucket boundaries; each starts a new bucket. Empty or `none` gives one bucket.
    #[arg(long, default_value = "18,30")]
    buckets: String,
    #[arg(long, value_enum, default_value = "reference")]
    bucket_by: BucketArg,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Write decoded sentences here, one per line.
    #[arg(long)]
    hyps_out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BucketArg {
    Reference,
    Source,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Source,
    Target,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Source on the first line, optional target on the second; without a
    /// target the greedy translation is analysed.
    #[arg(long)]
    sentence: PathBuf,
    /// Vocabulary file; without it tokens are numeric ids.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "source")]
    mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_value = "csv")]
    format: Vec<String>,
    /// Output path without extension.
    #[arg(long, default_value = "heatmap")]
    out: PathBuf,
    /// Scale each row to sum to one.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct CheckKernelArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    len: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Multiply every discrete transition matrix by this factor.
    #[arg(long)]
    corrupt: Option<f64>,
}

#[derive(Args)]
struct SignificanceArgs {
    #[arg(long)]
    hyps_a: PathBuf,
    #[arg(long)]
    hyps_b: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const TOLERANCE: f64 = 1e-4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Incompatible { .. } => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric(_) | Error::Singular { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Heatmap(a) => heatmap(a),
        Cmd::CheckKernel(a) => check_kernel(a),
        Cmd::Significance(a) => significance(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json(v: &serde_json::Value) -> s4mt::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn gen_data(a: GenData) -> s4mt::Result<u8> {
    let spec: SyntheticTaskSpec = read_json(&a.spec)?;
    spec.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let vocab = Vocabulary::synthetic(spec.vocab_size);
    let eval_n = a.eval_n.unwrap_or(a.n / 10);
    // disjoint index ranges per split
    for (i, split) in Split::ALL.iter().enumerate() {
        let n = if *split == Split::Train { a.n } else { eval_n };
        let corpus = generate_range(&spec, (i as u64) << 40, n)?;
        corpus.write(&a.out, split.name(), &vocab)?;
        eprintln!("{}: {} pairs", split.name(), corpus.len());
    }
    vocab.write(&a.out.join("vocab.txt"))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    Ok(0)
}

fn load_vocab(data: &Path) -> s4mt::Result<Vocabulary> {
    Vocabulary::read(&data.join("vocab.txt"))
}

fn train(a: TrainArgs) -> s4mt::Result<u8> {
    let mut cfg: RunConfig = read_json(&a.config)?;
    let vocab = load_vocab(&a.data)?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    }
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} but the data vocabulary has {} entries",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    cfg.validate()?;
    if a.average_last == Some(0) {
        return Err(Error::Config("--average-last needs k ≥ 1".into()));
    }
    let corpus = ParallelCorpus::read(&a.data, Split::Train.name(), &vocab)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.header.model != cfg.model {
                return Err(Error::Incompatible { field: "model".into() });
            }
            Trainer::resume(&ckpt, &corpus, cfg.trainer.clone())?
        }
        None => Trainer::new(build_model(&cfg.model, cfg.seed)?, &corpus, cfg.trainer.clone())?,
    };
    eprintln!(
        "{} parameters, {} batches per epoch",
        trainer.model.param_counts().total,
        trainer.batches_per_epoch()
    );
    let summary = trainer.run(&a.out)?;
    let mut averaged = None;
    if let Some(k) = a.average_last {
        let all = epoch_checkpoints(&a.out)?;
        if all.len() < k {
            return Err(Error::Config(format!("{k} checkpoints requested, {} available", all.len())));
        }
        let paths: Vec<&Path> = all[all.len() - k..].iter().map(PathBuf::as_path).collect();
        let path = a.out.join("averaged.ckpt");
        average_checkpoint_files(&paths)?.save(&path)?;
        averaged = Some(path);
    }
    print_json(&json!({
        "steps": summary.steps,
        "last_loss": summary.last_loss,
        "checkpoints": summary.checkpoints,
        "averaged": averaged,
    }))?;
    Ok(0)
}

fn evaluate(a: EvalArgs) -> s4mt::Result<u8> {
    let bounds = match a.buckets.trim() {
        "" | "none" => Vec::new(),
        list => list
            .split(',')
            .map(|b| b.trim().parse::<usize>().map_err(|e| Error::Config(format!("bucket `{b}`: {e}"))))
            .collect::<s4mt::Result<_>>()?,
    };
    let buckets = s4mt::data::LengthBuckets::new(bounds)?;
    let cfg = DecodeConfig {
        beam: a.beam,
        alpha: a.alpha,
    };
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let model = Checkpoint::load(&a.model)?.model()?;
    let vocab = load_vocab(&a.data)?;
    let corpus = ParallelCorpus::read(&a.data, &a.split, &vocab)?;
    let bucket_by = match a.bucket_by {
        BucketArg::Reference => BucketBy::Reference,
        BucketArg::Source => BucketBy::Source,
    };
    let frozen = FrozenModel::new(&model)?;
    let (report, outputs) = evaluate_buckets(&frozen, &corpus, &buckets, bucket_by, &cfg, a.threads)?;
    if let Some(path) = a.hyps_out {
        let mut text = String::new();
        for o in &outputs {
            text.push_str(&vocab.decode(o));
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    print_json(&serde_json::to_value(&report)?)?;
    Ok(0)
}

fn parse_tokens(line: &str, vocab: Option<&Vocabulary>) -> s4mt::Result<Vec<u32>> {
    match vocab {
        Some(v) => Ok(v.encode(line)),
        None => line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|e| Error::Format(format!("token `{t}`: {e}"))))
            .collect(),
    }
}

fn heatmap(a: HeatmapArgs) -> s4mt::Result<u8> {
    let formats: Vec<HeatmapFormat> = a.format.iter().map(|f| f.parse()).collect::<s4mt::Result<_>>()?;
    let model: Model = Checkpoint::load(&a.model)?.model()?;
    let vocab = a.vocab.as_deref().map(Vocabulary::read).transpose()?;
    let text = std::fs::read_to_string(&a.sentence)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let source = parse_tokens(lines.next().unwrap_or(""), vocab.as_ref())?;
    let target = match lines.next() {
        Some(l) => parse_tokens(l, vocab.as_ref())?,
        None => {
            let frozen = FrozenModel::new(&model)?;
            decode(&frozen, &model.prepare_source(&source), &DecodeConfig { beam: 1, alpha: 0.0 })?
        }
    };
    let names = |t: u32| match &vocab {
        Some(v) => v.token(t).to_string(),
        None => t.to_string(),
    };
    let map = match a.mode {
        ModeArg::Source => source_attribution(&model, &source, &target, a.threads, Some(&names))?,
        ModeArg::Target => target_attribution(&model, &source, &target, a.threads, Some(&names))?,
    };
    let map = if a.normalize { map.normalize() } else { map };
    let mut meta = HeatmapMetadata::of(&map);
    meta.extra.insert("checkpoint".into(), json!(a.model));
    meta.extra.insert("sentence".into(), json!(a.sentence));
    let mut written = Vec::new();
    for f in formats {
        let mut path = a.out.clone().into_os_string();
        path.push(".");
        path.push(f.extension());
        let path = PathBuf::from(path);
        export_heatmap(&map, f, &path, &meta)?;
        written.push(path);
    }
    let diag: Option<Vec<usize>> = (map.mode == AttributionMode::Source && map.rows == map.cols)
        .then(|| (0..map.rows).collect());
    let stats = sharpness(&map, diag.as_deref())?;
    print_json(&json!({
        "files": written,
        "target": target.iter().map(|&t| names(t)).collect::<Vec<_>>().join(" "),
        "sharpness": stats,
    }))?;
    Ok(0)
}

fn check_kernel(a: CheckKernelArgs) -> s4mt::Result<u8> {
    let cfg = DualityCheck {
        n: a.n,
        channels: a.channels,
        len: a.len,
        trials: a.trials,
        seed: a.seed,
        delta: a.delta,
        corrupt: a.corrupt,
        ..DualityCheck::default()
    };
    let residuals = duality_residuals(&cfg)?;
    let mut ok = true;
    for (i, r) in residuals.iter().enumerate() {
        let pass = *r < TOLERANCE;
        ok &= pass;
        println!("trial {i}: max residual {r:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { 0 } else { 1 })
}

fn read_lines(path: &Path) -> s4mt::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(str::to_owned).collect())
}

fn significance(a: SignificanceArgs) -> s4mt::Result<u8> {
    let (ha, hb, refs) = (read_lines(&a.hyps_a)?, read_lines(&a.hyps_b)?, read_lines(&a.refs)?);
    let r = paired_bootstrap(&ha, &hb, &refs, a.resamples, a.seed)?;
    print_json(&serde_json::to_value(r)?)?;
    Ok(0)
}
