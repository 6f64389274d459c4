//! End-to-end pipelines behind the command-line tool: synthetic data
//! generation, streaming latency simulation, and combined-loss evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::BlockPlan;
use crate::ctc::{attach_blocks, combined_loss, greedy_decode, CombinedLoss, Transcript, WordSpan};
use crate::encoder::{ctc_head_forward, EncoderWeights, ModelDims};
use crate::engine::{run_utterance, BlockOutput, StreamingEncoder};
use crate::error::{Result, SpiralError};
use crate::formats::{
    list_feature_files, read_features_any, read_jsonl, sha256_hex, write_features, write_json, write_jsonl,
    write_weights, AlignmentRecord, RunConfig, TranscriptRecord,
};
use crate::metrics::{
    model_emissions, oracle_emissions, validate_alignment, word_delays, AlignedWord, ExcludedUtterance,
    LatencyReport, UtteranceLatency,
};
use crate::tensor::FeatureMatrix;

/// Frames kept free of word endings at the end of every synthetic utterance,
/// so that no word lands in a block with truncated look-ahead.
pub const TRAILING_MARGIN_FRAMES: usize = 48;

const WEIGHT_SEED_OFFSET: u64 = 0x5EED_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub seed: u64,
    pub utts: usize,
    pub frames: usize,
    pub dim: usize,
    pub vocab: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub frame_ms: f64,
}

impl GenerateSpec {
    /// Defaults: 12 layers, feed-forward width `4 * dim`, 4, 2 or 1 heads.
    pub fn new(seed: u64, utts: usize, frames: usize, dim: usize, vocab: usize) -> Self {
        let heads = [4, 2, 1].into_iter().find(|h| dim.is_multiple_of(*h)).unwrap_or(1);
        GenerateSpec {
            seed,
            utts,
            frames,
            dim,
            vocab,
            layers: 12,
            ff_dim: 4 * dim,
            heads,
            frame_ms: 40.0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            dim: self.dim,
            ff_dim: self.ff_dim,
            heads: self.heads,
            vocab: self.vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.utts == 0 || self.dim == 0 || self.vocab == 0 || self.layers == 0 {
            return Err(SpiralError::config("utts, dim, vocab and layers must be positive"));
        }
        if self.frames < TRAILING_MARGIN_FRAMES + 16 {
            return Err(SpiralError::config(format!(
                "frames must be at least {} to leave room for words",
                TRAILING_MARGIN_FRAMES + 16
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(SpiralError::config("dim must be divisible by heads"));
        }
        if self.frame_ms.is_nan() || self.frame_ms <= 0.0 {
            return Err(SpiralError::config("frame_ms must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GenerateSpec,
    pub features: Vec<(String, FeatureMatrix)>,
    pub alignments: Vec<AlignmentRecord>,
    pub transcripts: Vec<TranscriptRecord>,
    pub weights: EncoderWeights,
}

fn word_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| char::from(b'a' + (t % 26) as u8)).collect()
}

fn synth_words(
    frames: usize,
    vocab: usize,
    frame_ms: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<AlignedWord>, Vec<usize>, Vec<WordSpan>) {
    let limit = frames - TRAILING_MARGIN_FRAMES;
    let mut words = Vec::new();
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut start = rng.random_range(0..4usize);
    loop {
        let end = start + rng.random_range(3..=12usize) - 1;
        if end >= limit {
            break;
        }
        let n = rng.random_range(1..=3usize);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let text = word_text(&ids);
        spans.push(WordSpan {
            text: text.clone(),
            token_span: (tokens.len(), tokens.len() + n),
        });
        tokens.extend(ids);
        words.push(AlignedWord {
            text,
            start_ms: start as f64 * frame_ms,
            end_ms: (end + 1) as f64 * frame_ms,
        });
        start = end + 1 + rng.random_range(0..=4usize);
    }
    (words, tokens, spans)
}

/// Seeded unit-variance noise features, word timings on frame boundaries,
/// matching transcripts, and random weights.
pub fn generate(spec: &GenerateSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half_width = 3f32.sqrt();
    let mut features = Vec::with_capacity(spec.utts);
    let mut alignments = Vec::with_capacity(spec.utts);
    let mut transcripts = Vec::with_capacity(spec.utts);
    for u in 0..spec.utts {
        let utt_id = format!("utt{u:04}");
        let data = (0..spec.frames * spec.dim)
            .map(|_| rng.random_range(-half_width..half_width))
            .collect();
        features.push((utt_id.clone(), FeatureMatrix::from_vec(spec.frames, spec.dim, data)?));
        let (words, tokens, spans) = synth_words(spec.frames, spec.vocab, spec.frame_ms, &mut rng);
        alignments.push(AlignmentRecord { utt_id: utt_id.clone(), words });
        transcripts.push(TranscriptRecord { utt_id, tokens, words: spans });
    }
    let weights = EncoderWeights::random(spec.dims(), spec.seed.wrapping_add(WEIGHT_SEED_OFFSET));
    Ok(Dataset {
        spec: spec.clone(),
        features,
        alignments,
        transcripts,
        weights,
    })
}

/// Written next to generated data; records the seed for later runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: GenerateSpec,
    pub features_dir: String,
    pub alignments: String,
    pub transcripts: String,
    pub weights: String,
    pub files: Vec<InputDigest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Layout: `features/<utt>.spft`, `align.jsonl`, `transcripts.jsonl`,
/// `weights.spwt` plus its `.json` manifest, and `dataset.json`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut files = Vec::new();
    let mut digest = |name: String, path: &Path| -> Result<()> {
        files.push(InputDigest {
            name,
            sha256: sha256_hex(&fs::read(path)?),
        });
        Ok(())
    };
    for (utt, m) in &ds.features {
        let p = feat_dir.join(format!("{utt}.spft"));
        write_features(&p, m)?;
        digest(format!("features/{utt}.spft"), &p)?;
    }
    write_jsonl(&dir.join("align.jsonl"), &ds.alignments)?;
    digest("align.jsonl".into(), &dir.join("align.jsonl"))?;
    write_jsonl(&dir.join("transcripts.jsonl"), &ds.transcripts)?;
    digest("transcripts.jsonl".into(), &dir.join("transcripts.jsonl"))?;
    write_weights(&dir.join("weights.spwt"), &ds.weights)?;
    digest("weights.spwt".into(), &dir.join("weights.spwt"))?;
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        features_dir: "features".into(),
        alignments: "align.jsonl".into(),
        transcripts: "transcripts.jsonl".into(),
        weights: "weights.spwt".into(),
        files,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Seed recorded by [`write_dataset`] in or above the features path.
pub fn find_dataset_seed(features: &Path) -> Option<u64> {
    let mut dir = if features.is_dir() {
        Some(features)
    } else {
        features.parent()
    };
    for _ in 0..2 {
        let d = dir?;
        if let Ok(text) = fs::read_to_string(d.join(DATASET_MANIFEST)) {
            if let Ok(m) = serde_json::from_str::<DatasetManifest>(&text) {
                return Some(m.spec.seed);
            }
        }
        dir = d.parent();
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub features: FeatureMatrix,
    pub sha256: String,
}

/// Load a feature file or every `.spft`/`.csv` file in a directory.
pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let files = list_feature_files(path)?;
    if files.is_empty() {
        return Err(SpiralError::EmptyInput(format!("no feature files in {}", path.display())));
    }
    files
        .into_iter()
        .map(|(utt_id, p)| {
            Ok(Utterance {
                sha256: sha256_hex(&fs::read(&p)?),
                features: read_features_any(&p)?,
                utt_id,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Emitter {
    /// Greedy CTC decoding of the encoder output.
    #[default]
    Model,
    /// Reference words emitted at their reference end frames.
    Oracle,
}

/// Everything that determines a simulation's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub emitter: Emitter,
    pub seed: Option<u64>,
    pub compute_ms_per_block: f64,
    pub inputs: Vec<InputDigest>,
}

impl RunManifest {
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    pub emitter: Emitter,
    /// Simulated processing time added to every block's ready time.
    pub compute_ms_per_block: f64,
    /// Time the encoder and fill in the real-time factor.
    pub measure_rtf: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            emitter: Emitter::Model,
            compute_ms_per_block: 0.0,
            measure_rtf: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub manifest_sha256: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub emitter: Emitter,
    /// True when `rtf` holds a wall-clock measurement, which is not reproducible.
    pub rtf_measured: bool,
    #[serde(flatten)]
    pub report: LatencyReport,
}

enum UttResult {
    Matched(UtteranceLatency),
    Excluded(ExcludedUtterance),
}

struct UttRun {
    result: UttResult,
    compute_ms: f64,
}

fn stream_encode(
    features: &FeatureMatrix,
    cfg: &RunConfig,
    weights: &EncoderWeights,
) -> Result<Vec<BlockOutput>> {
    let mut enc = StreamingEncoder::new(cfg.block(), cfg.schedule(), weights)?;
    let mut blocks = Vec::new();
    for row in features.iter_rows() {
        blocks.extend(enc.push(row)?);
    }
    blocks.extend(enc.finish()?);
    Ok(blocks)
}

fn simulate_one(
    utt: &Utterance,
    words: &[AlignedWord],
    transcript: Option<&Transcript>,
    cfg: &RunConfig,
    weights: &EncoderWeights,
    opts: &SimOptions,
) -> Result<UttRun> {
    let clock = Instant::now();
    let blocks = stream_encode(&utt.features, cfg, weights)?;
    let compute_ms = clock.elapsed().as_secs_f64() * 1000.0;
    let plans: Vec<BlockPlan> = blocks.iter().map(|b| b.plan).collect();
    let frame_ms = cfg.frame_ms;
    let emissions = match opts.emitter {
        Emitter::Oracle => oracle_emissions(words, &plans, frame_ms, opts.compute_ms_per_block)?,
        Emitter::Model => {
            let chunks: Vec<FeatureMatrix> = blocks.iter().map(|b| b.chunk.clone()).collect();
            let encoded = FeatureMatrix::concat_rows(&chunks, weights.dims.dim)?;
            let tokens = attach_blocks(&greedy_decode(&ctc_head_forward(weights, &encoded)?), &plans);
            let fallback;
            let transcript = match transcript {
                Some(t) => t,
                None => {
                    fallback = Transcript::new(vec![0; words.len()]);
                    &fallback
                }
            };
            match model_emissions(&tokens, transcript, frame_ms, opts.compute_ms_per_block) {
                Ok(e) => e,
                Err(SpiralError::WordMismatch { emitted, reference }) => {
                    let reason = format!("decoded {emitted} tokens, reference has {reference}");
                    warn!("{}: excluded from delay statistics: {reason}", utt.utt_id);
                    return Ok(UttRun {
                        result: UttResult::Excluded(ExcludedUtterance {
                            utt_id: utt.utt_id.clone(),
                            frames: utt.features.rows(),
                            layer_evals: blocks.iter().map(|b| b.layer_evals).sum(),
                            reason,
                        }),
                        compute_ms,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    };
    let delays = word_delays(&emissions, words)?;
    Ok(UttRun {
        result: UttResult::Matched(UtteranceLatency::new(&utt.utt_id, utt.features.rows(), &blocks, delays)),
        compute_ms,
    })
}

/// Stream every utterance through the encoder and reduce word delays into a report.
///
/// Utterances run in parallel; the reduction is sequential and in input order,
/// so the report is reproducible apart from measured timing.
pub fn simulate(
    utts: &[Utterance],
    alignments: &[AlignmentRecord],
    transcripts: Option<&[TranscriptRecord]>,
    cfg: &RunConfig,
    weights: &EncoderWeights,
    opts: &SimOptions,
    manifest: RunManifest,
) -> Result<RunReport> {
    cfg.validate()?;
    if weights.dims.layers != cfg.total_layers {
        return Err(SpiralError::config(format!(
            "config expects {} layers but the weights have {}",
            cfg.total_layers, weights.dims.layers
        )));
    }
    let align: HashMap<&str, &[AlignedWord]> =
        alignments.iter().map(|a| (a.utt_id.as_str(), a.words.as_slice())).collect();
    let trans: Option<HashMap<&str, Transcript>> =
        transcripts.map(|ts| ts.iter().map(|t| (t.utt_id.as_str(), t.transcript())).collect());
    for u in utts {
        let words = align
            .get(u.utt_id.as_str())
            .ok_or_else(|| SpiralError::config(format!("no alignment for utterance {}", u.utt_id)))?;
        validate_alignment(words)?;
        if let Some(t) = &trans {
            let t = t
                .get(u.utt_id.as_str())
                .ok_or_else(|| SpiralError::config(format!("no transcript for utterance {}", u.utt_id)))?;
            t.validate(weights.dims.vocab)?;
        }
    }
    let runs: Vec<Result<UttRun>> = utts
        .par_iter()
        .map(|u| {
            let transcript = trans.as_ref().and_then(|t| t.get(u.utt_id.as_str()));
            simulate_one(u, align[u.utt_id.as_str()], transcript, cfg, weights, opts)
        })
        .collect();
    let mut matched = Vec::new();
    let mut excluded = Vec::new();
    let mut compute_ms = 0.0;
    for run in runs {
        let run = run?;
        compute_ms += run.compute_ms;
        match run.result {
            UttResult::Matched(m) => matched.push(m),
            UttResult::Excluded(e) => excluded.push(e),
        }
    }
    info!("{} utterances matched, {} excluded", matched.len(), excluded.len());
    let report = LatencyReport::build(
        &cfg.block(),
        matched,
        excluded,
        opts.measure_rtf.then_some(compute_ms),
    )?;
    Ok(RunReport {
        manifest_sha256: manifest.sha256()?,
        seed: manifest.seed,
        config: *cfg,
        emitter: opts.emitter,
        rtf_measured: opts.measure_rtf,
        manifest,
        report,
    })
}

pub const CSV_HEADER: &str = "n_left,n_center,n_right,frame_ms,total_layers,pitch,mode,cache_combination,emitter,\
utterances,excluded,max_theoretical_latency_ms,fwd_p50,fwd_p90,lwd_p50,lwd_p90,swd_p50,swd_p90,iwd_p50,iwd_p90,\
layer_evals_total,evals_per_audio_second,rtf,manifest_sha256,seed";

/// One header line and one row summarising the run.
pub fn report_csv(r: &RunReport) -> String {
    let c = &r.config;
    let a = &r.report.aggregate;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let pair = |p: Option<crate::metrics::Percentiles>| {
        format!("{},{}", opt(p.map(|p| p.p50)), opt(p.map(|p| p.p90)))
    };
    let mode = serde_json::to_value(c.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let emitter = match r.emitter {
        Emitter::Model => "model",
        Emitter::Oracle => "oracle",
    };
    format!(
        "{CSV_HEADER}\n{},{},{},{},{},{},{mode},{},{emitter},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        c.n_left,
        c.n_center,
        c.n_right,
        c.frame_ms,
        c.total_layers,
        c.pitch,
        c.cache_combination,
        a.utterances,
        a.excluded,
        r.report.max_theoretical_latency_ms,
        pair(a.fwd),
        pair(a.lwd),
        pair(a.swd),
        pair(a.iwd),
        a.evals.layer_evals_total,
        a.evals.evals_per_audio_second,
        opt(a.rtf),
        r.manifest_sha256,
        r.seed.map(|s| s.to_string()).unwrap_or_default(),
    )
}

/// Combined loss of one utterance, or why it could not be scored.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceLoss {
    pub utt_id: String,
    pub loss: std::result::Result<CombinedLoss, String>,
}

/// Score every utterance with the sum of the emitted-sequence loss and one loss per exit depth.
pub fn evaluate_loss(
    utts: &[Utterance],
    transcripts: &[TranscriptRecord],
    cfg: &RunConfig,
    weights: &EncoderWeights,
) -> Result<Vec<UtteranceLoss>> {
    cfg.validate()?;
    let trans: HashMap<&str, &TranscriptRecord> = transcripts.iter().map(|t| (t.utt_id.as_str(), t)).collect();
    let mut targets = Vec::with_capacity(utts.len());
    for u in utts {
        let t = trans
            .get(u.utt_id.as_str())
            .ok_or_else(|| SpiralError::config(format!("no transcript for utterance {}", u.utt_id)))?;
        t.transcript().validate(weights.dims.vocab)?;
        targets.push(t.tokens.clone());
    }
    utts.par_iter()
        .zip(targets.par_iter())
        .map(|(u, target)| {
            let out = run_utterance(&u.features, &cfg.block(), &cfg.schedule(), weights, true)?;
            let loss = match combined_loss(&out.per_shift, &out.encoded, target, weights) {
                Ok(l) => Ok(l),
                Err(e @ SpiralError::Unalignable { .. }) => {
                    warn!("{}: {e}", u.utt_id);
                    Err(e.to_string())
                }
                Err(e) => return Err(e),
            };
            Ok(UtteranceLoss {
                utt_id: u.utt_id.clone(),
                loss,
            })
        })
        .collect()
}

pub fn read_alignments(path: &Path) -> Result<Vec<AlignmentRecord>> {
    read_jsonl(path)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>> {
    read_jsonl(path)
}

/// Digests of the files a run reads, in a fixed order.
pub fn input_digests(utts: &[Utterance], others: &[(&str, &Path)]) -> Result<Vec<InputDigest>> {
    let mut out: Vec<InputDigest> = utts
        .iter()
        .map(|u| InputDigest {
            name: format!("features:{}", u.utt_id),
            sha256: u.sha256.clone(),
        })
        .collect();
    for (name, p) in others {
        out.push(InputDigest {
            name: (*name).to_string(),
            sha256: sha256_hex(&fs::read(p)?),
        });
    }
    Ok(out)
}

/// `report.json` and `report.csv` in `dir`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<(PathBuf, PathBuf)> {
    let json = dir.join("report.json");
    let csv = dir.join("report.csv");
    write_json(&json, report)?;
    crate::formats::atomic_write(&csv, report_csv(report).as_bytes())?;
    Ok((json, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{plan_blocks, BlockConfig};
    use crate::schedule::SpiralConfig;

    fn small_spec(seed: u64) -> GenerateSpec {
        let mut s = GenerateSpec::new(seed, 4, 120, 8, 5);
        s.layers = 4;
        s
    }

    fn utts(ds: &Dataset) -> Vec<Utterance> {
        ds.features
            .iter()
            .map(|(id, m)| Utterance {
                utt_id: id.clone(),
                features: m.clone(),
                sha256: String::new(),
            })
            .collect()
    }

    fn manifest(cfg: RunConfig, emitter: Emitter) -> RunManifest {
        RunManifest {
            command: "simulate".into(),
            config: cfg,
            emitter,
            seed: Some(1),
            compute_ms_per_block: 0.0,
            inputs: vec![],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(7)).unwrap();
        let b = generate(&small_spec(7)).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.alignments, b.alignments);
        assert_eq!(a.weights, b.weights);
        assert_ne!(generate(&small_spec(8)).unwrap().features, a.features);
    }

    #[test]
    fn generated_words_stay_clear_of_the_tail() {
        let ds = generate(&small_spec(3)).unwrap();
        for (a, t) in ds.alignments.iter().zip(&ds.transcripts) {
            assert!(!a.words.is_empty());
            validate_alignment(&a.words).unwrap();
            assert_eq!(a.words.len(), t.words.len());
            t.transcript().validate(5).unwrap();
            for w in &a.words {
                let frames = w.end_ms / 40.0;
                assert_eq!(frames.fract(), 0.0);
                assert!(frames as usize <= 120 - TRAILING_MARGIN_FRAMES);
            }
        }
    }

    #[test]
    fn features_have_unit_variance_scale() {
        let mut s = small_spec(1);
        s.frames = 400;
        s.dim = 16;
        let ds = generate(&s).unwrap();
        let v: Vec<f64> = ds.features.iter().flat_map(|(_, m)| m.data().iter().map(|&x| x as f64)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }

    #[test]
    fn rejects_short_utterances() {
        let mut s = small_spec(1);
        s.frames = 20;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn oracle_simulation_respects_bounds() {
        let ds = generate(&small_spec(5)).unwrap();
        let cfg = RunConfig::new(BlockConfig::new(4, 4, 2), SpiralConfig::spiral(4, 2));
        let opts = SimOptions { emitter: Emitter::Oracle, ..Default::default() };
        let r = simulate(&utts(&ds), &ds.alignments, None, &cfg, &ds.weights, &opts, manifest(cfg, Emitter::Oracle))
            .unwrap();
        assert_eq!(r.report.per_utterance.len(), 4);
        for u in &r.report.per_utterance {
            for s in &u.swd_ms {
                assert!((80.0..=240.0).contains(s), "{s}");
            }
            let blocks = plan_blocks(120, &cfg.block()).unwrap().len();
            assert_eq!(u.layer_evals, blocks * 2);
        }
        assert_eq!(r.report.aggregate.rtf, None);
    }

    #[test]
    fn model_simulation_completes_and_logs_mismatches() {
        let ds = generate(&small_spec(6)).unwrap();
        let cfg = RunConfig::new(BlockConfig::new(4, 4, 2), SpiralConfig::spiral(4, 2));
        let opts = SimOptions::default();
        let r = simulate(
            &utts(&ds),
            &ds.alignments,
            Some(&ds.transcripts),
            &cfg,
            &ds.weights,
            &opts,
            manifest(cfg, Emitter::Model),
        )
        .unwrap();
        let a = &r.report.aggregate;
        assert_eq!(a.utterances + a.excluded, 4);
        assert_eq!(r.report.excluded.len(), a.excluded);
        let csv = report_csv(&r);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn rejects_indivisible_pitch() {
        let ds = generate(&small_spec(6)).unwrap();
        let mut cfg = RunConfig::new(BlockConfig::new(4, 4, 2), SpiralConfig::spiral(4, 2));
        cfg.pitch = 3;
        let err = simulate(&utts(&ds), &ds.alignments, None, &cfg, &ds.weights, &SimOptions::default(), manifest(cfg, Emitter::Model))
            .unwrap_err();
        assert!(matches!(err, SpiralError::Config(_)));
    }

    #[test]
    fn loss_has_one_term_per_shift_plus_one() {
        let ds = generate(&small_spec(9)).unwrap();
        let cfg = RunConfig::new(BlockConfig::new(4, 4, 2), SpiralConfig::spiral(4, 4));
        let res = evaluate_loss(&utts(&ds)[..1], &ds.transcripts, &cfg, &ds.weights).unwrap();
        let l = res[0].loss.as_ref().unwrap();
        assert_eq!(l.term_count(), 5);
        assert!((l.total - l.full - l.per_shift.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn pitch_one_loss_doubles() {
        let ds = generate(&small_spec(10)).unwrap();
        let cfg = RunConfig::new(BlockConfig::new(4, 4, 2), SpiralConfig::spiral(4, 1));
        let res = evaluate_loss(&utts(&ds)[..1], &ds.transcripts, &cfg, &ds.weights).unwrap();
        let l = res[0].loss.as_ref().unwrap();
        assert_eq!(l.per_shift.len(), 1);
        assert_eq!(l.total, 2.0 * l.full);
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec(11)).unwrap();
        let m = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(m.files.len(), 4 + 3);
        let loaded = load_utterances(&dir.path().join("features")).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded[2].features, ds.features[2].1);
        assert_eq!(read_alignments(&dir.path().join("align.jsonl")).unwrap(), ds.alignments);
        assert_eq!(find_dataset_seed(&dir.path().join("features")), Some(11));
        assert_eq!(find_dataset_seed(Path::new("/nonexistent")), None);
    }
}
