use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use spiral_encoder::formats::{read_weights, RunConfig};
use spiral_encoder::sim::{
    evaluate_loss, find_dataset_seed, generate, input_digests, load_utterances, read_alignments, read_transcripts,
    simulate, write_dataset, write_report, Emitter, GenerateSpec, RunManifest, SimOptions,
};
use spiral_encoder::verify::{run_suite, Suite};
use spiral_encoder::SpiralError;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "spiral", version, about = "Streaming blockwise encoder with circular layer skipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic features, alignments, transcripts and random weights.
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        utts: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
        /// Encoder depth of the generated weights.
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ff_dim: Option<usize>,
    },
    /// Stream utterances through the encoder and report word emission delays.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// A feature file or a directory of `.spft`/`.csv` files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = Emitter::Model)]
        emitter: Emitter,
        #[arg(long)]
        out: PathBuf,
        /// Token spans for grouping decoded tokens into words (model emitter).
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Seed to record; defaults to the one stored with generated data.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated processing time added to each block's ready time.
        #[arg(long, default_value_t = 0.0)]
        compute_ms: f64,
        /// Measure wall-clock compute and report the real-time factor.
        #[arg(long)]
        measure_rtf: bool,
    },
    /// Run invariant suites against independent references.
    Verify {
        /// Suite to run; all suites when omitted.
        #[arg(long, value_enum)]
        suite: Option<Suite>,
    },
    /// Print the combined CTC loss terms of each utterance.
    Loss {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
}

struct VerificationFailed(usize);

impl std::fmt::Debug for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} checks failed", self.0)
    }
}

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} checks failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFY;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SpiralError>() {
            return match e {
                SpiralError::Config(_) => EXIT_CONFIG,
                SpiralError::Io(_) | SpiralError::Format(_) | SpiralError::Json(_) => EXIT_IO,
                _ => EXIT_OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::read(path).with_context(|| format!("config {}", path.display()))
}

fn cmd_generate(spec: GenerateSpec, out: &Path) -> Result<()> {
    let ds = generate(&spec)?;
    let m = write_dataset(out, &ds).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} utterances x {} frames, {} files, seed {} to {}",
        spec.utts,
        spec.frames,
        m.files.len(),
        spec.seed,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: &Path,
    features: &Path,
    align: &Path,
    weights: &Path,
    transcripts: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    opts: SimOptions,
) -> Result<()> {
    let cfg = load_config(config)?;
    let utts = load_utterances(features).with_context(|| format!("features {}", features.display()))?;
    let alignments = read_alignments(align).with_context(|| format!("alignments {}", align.display()))?;
    let w = read_weights(weights).with_context(|| format!("weights {}", weights.display()))?;
    let trans = transcripts
        .map(|p| read_transcripts(p).with_context(|| format!("transcripts {}", p.display())))
        .transpose()?;
    let mut others = vec![("alignments", align), ("weights", weights)];
    if let Some(p) = transcripts {
        others.push(("transcripts", p));
    }
    let manifest = RunManifest {
        command: "simulate".into(),
        config: cfg,
        emitter: opts.emitter,
        seed: seed.or_else(|| find_dataset_seed(features)),
        compute_ms_per_block: opts.compute_ms_per_block,
        inputs: input_digests(&utts, &others)?,
    };
    let report = simulate(&utts, &alignments, trans.as_deref(), &cfg, &w, &opts, manifest)?;
    let (json, csv) = write_report(out, &report).with_context(|| format!("writing {}", out.display()))?;
    let a = &report.report.aggregate;
    match a.swd {
        Some(swd) => println!(
            "{} utterances ({} excluded), SWD P50 {} ms P90 {} ms, max theoretical {} ms, {} layer evals",
            a.utterances, a.excluded, swd.p50, swd.p90, report.report.max_theoretical_latency_ms, a.evals.layer_evals_total
        ),
        None => println!("no utterance matched its reference ({} excluded)", a.excluded),
    }
    info!("report written to {} and {}", json.display(), csv.display());
    println!("{}", json.display());
    println!("{}", csv.display());
    Ok(())
}

fn cmd_verify(suite: Option<Suite>) -> Result<()> {
    let suites = suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let mut failed = 0;
    for s in suites {
        for c in run_suite(s)? {
            let seed = c.seed.map_or(String::new(), |s| format!(" seed={s}"));
            println!(
                "{} {}/{}{}{}{}",
                if c.passed { "PASS" } else { "FAIL" },
                s.name(),
                c.name,
                seed,
                if c.detail.is_empty() { "" } else { ": " },
                c.detail
            );
            failed += usize::from(!c.passed);
        }
    }
    if failed > 0 {
        return Err(VerificationFailed(failed).into());
    }
    Ok(())
}

fn cmd_loss(config: &Path, features: &Path, transcripts: &Path, weights: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let utts = load_utterances(features).with_context(|| format!("features {}", features.display()))?;
    let trans = read_transcripts(transcripts).with_context(|| format!("transcripts {}", transcripts.display()))?;
    let w = read_weights(weights).with_context(|| format!("weights {}", weights.display()))?;
    for r in evaluate_loss(&utts, &trans, &cfg, &w)? {
        match r.loss {
            Ok(l) => {
                println!("{} term L_H {}", r.utt_id, l.full);
                for (s, v) in l.per_shift.iter().enumerate() {
                    println!("{} term L_H^{s} {v}", r.utt_id);
                }
                println!("{} total {}", r.utt_id, l.total);
            }
            Err(msg) => println!("{} unalignable: {msg}", r.utt_id),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { seed, utts, frames, dim, vocab, out, layers, heads, ff_dim } => {
            let mut spec = GenerateSpec::new(seed, utts, frames, dim, vocab);
            spec.layers = layers;
            if let Some(h) = heads {
                spec.heads = h;
            }
            if let Some(f) = ff_dim {
                spec.ff_dim = f;
            }
            cmd_generate(spec, &out)
        }
        Command::Simulate {
            config,
            features,
            align,
            weights,
            emitter,
            out,
            transcripts,
            seed,
            compute_ms,
            measure_rtf,
        } => cmd_simulate(
            &config,
            &features,
            &align,
            &weights,
            transcripts.as_deref(),
            &out,
            seed,
            SimOptions { emitter, compute_ms_per_block: compute_ms, measure_rtf },
        ),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Loss { config, features, transcripts, weights } => cmd_loss(&config, &features, &transcripts, &weights),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPIRAL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
