use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use vprg_core::checkpoint::{file_hash, load_checkpoint};
use vprg_core::data::annotations::{AccessAudit, LoadMode};
use vprg_core::data::config::{load_config, parse_config, render_config};
use vprg_core::data::corpus::{load_corpus, write_corpus, Corpus};
use vprg_core::data::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use vprg_core::eval::{emit_report, evaluate, write_heatmap, Heatmap, MetricsReport, RecallSpec};
use vprg_core::model::Model;
use vprg_core::trainer::train;
use vprg_core::{Error, Result};

// Writes to stdout, ignoring a closed pipe (`vprg eval ... | head`).
macro_rules! out {
    (raw $s:expr) => {{
        use std::io::Write;
        let _ = std::io::stdout().write_all($s.as_bytes());
    }};
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

const ENV_HELP: &str = "Every config key can be overridden from the environment as VPRG_<KEY> \
(upper-cased), e.g. VPRG_BASE_LR=0.001 or VPRG_TIME_LOSS=false. Overrides apply after the config file.";

/// Video paragraph retrieval and weakly supervised grounding.
#[derive(Parser)]
#[command(name = "vprg", version, after_help = ENV_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted sentence spans.
    Generate(GenerateArgs),
    /// Train on a corpus directory; writes a log and checkpoints.
    #[command(after_help = ENV_HELP)]
    Train(TrainArgs),
    /// Retrieve and ground every paragraph of a corpus and report R@K IoU=m.
    Eval(EvalArgs),
    /// Dump score-map heatmaps for one paragraph.
    Inspect(InspectArgs),
    /// Print the effective training configuration.
    #[command(after_help = ENV_HELP)]
    Config(ConfigArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 16)]
    segments: usize,
    #[arg(long, default_value_t = 3)]
    sentences: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    slots: usize,
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    /// Weight of the sentence signature inside its planted span.
    #[arg(long, default_value_t = 1.0)]
    signature_gain: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,100")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    iou: Vec<f64>,
    /// Directory for metrics.json and metrics.md.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Paragraph id to inspect.
    #[arg(long)]
    paragraph: String,
    /// Video to ground in; defaults to the paragraph's own video.
    #[arg(long)]
    video: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn effective_config(path: Option<&Path>) -> Result<vprg_core::trainer::TrainConfig> {
    match path {
        Some(p) => load_config(p),
        None => parse_config("", |k| std::env::var(k).ok()),
    }
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        videos: a.videos,
        segments: a.segments,
        sentences: a.sentences,
        dim: a.dim,
        slots: a.slots,
        snr: a.snr,
        signature_gain: a.signature_gain,
        seed: a.seed,
    };
    let out = generate_synthetic_corpus(&spec)?;
    let gt: Vec<_> = out.intervals.iter().cloned().map(Some).collect();
    write_corpus(&a.out, &out.corpus, &gt)?;
    out!(
        "wrote {} videos, {} paragraphs to {}",
        out.corpus.videos.len(),
        out.corpus.paragraphs.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = effective_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.corpus, LoadMode::Training, &AccessAudit::new())?;
    corpus.validate(Some(cfg.model.k))?;
    let outcome = train(&corpus, &cfg, Some(&a.out))?;
    for s in &outcome.epochs {
        let l = &s.losses;
        out!(
            "epoch {:4} lr {:.3e} total {:.6} cmr {:.6} local {:.6} global {:.6} time {:.6} mse {:.6}",
            s.epoch + 1,
            s.lr,
            s.total,
            l.cmr,
            l.local,
            l.global,
            l.time,
            l.mse
        );
    }
    for c in &outcome.checkpoints {
        out!("checkpoint {}", c.display());
    }
    Ok(())
}

fn load_model(checkpoint: &Path, corpus: &Corpus) -> Result<Model> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.restore_model(corpus.vocab.clone())?;
    corpus.validate(Some(model.k()))?;
    if corpus.feature_width() != model.d_v {
        return Err(Error::InvalidArgument(format!(
            "corpus features are {} wide, checkpoint expects {}",
            corpus.feature_width(),
            model.d_v
        )));
    }
    Ok(model)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let spec = RecallSpec { ks: a.k, ious: a.iou };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let corpus = load_corpus(&a.corpus, LoadMode::Evaluation, &AccessAudit::new())?;
    let model = load_model(&a.checkpoint, &corpus)?;
    let eval = evaluate(&model, &corpus, &spec)?;
    let dataset = a
        .corpus
        .file_name()
        .map_or_else(|| a.corpus.display().to_string(), |n| n.to_string_lossy().into_owned());
    let report = MetricsReport::from_evaluation(&dataset, &file_hash(&a.checkpoint)?, &spec, &eval);
    out!("retrieval rank-1 accuracy {:.4}", eval.retrieval_rank1);
    out!(raw report.to_table());
    if let Some(dir) = a.report {
        for path in emit_report(&report, &dir, &[])? {
            out!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, LoadMode::Training, &AccessAudit::new())?;
    let model = load_model(&a.checkpoint, &corpus)?;
    let para = corpus
        .paragraphs
        .iter()
        .find(|p| p.paragraph_id == a.paragraph)
        .ok_or_else(|| Error::InvalidArgument(format!("no paragraph {}", a.paragraph)))?;
    let video_id = a.video.as_deref().unwrap_or(&para.video_id);
    let vi = corpus
        .video_index(video_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no video {video_id}")))?;
    let video = corpus.videos[vi].prepare()?;
    let maps = model.score_maps(&para.sentences, &video)?;
    let (fwd, rev) = model.sync_maps(&para.sentences, &video)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut heatmaps = Vec::new();
    for (kind, set) in [("score", maps), ("forward", fwd), ("reverse", rev)] {
        for (m, map) in set.into_iter().enumerate() {
            heatmaps.push(Heatmap {
                name: format!("{}_{video_id}_s{m}_{kind}", para.paragraph_id),
                map,
            });
        }
    }
    for h in &heatmaps {
        let path = a.out.join(format!("{}.png", h.name));
        write_heatmap(&path, &h.map)?;
        let best = h.map.argmax();
        out!("{} argmax ({}, {}) {:.4}", path.display(), best.start, best.end, h.map.get(best));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Inspect(a) => run_inspect(a),
        Command::Config(a) => {
            out!(raw render_config(&effective_config(a.config.as_deref())?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
