//! Word emission delays, percentiles, and compute accounting.
//!
//! A word's system delay is the simulated time its last token became
//! available minus the reference end time of the word. The internal delay
//! uses the end of the CTC frame that carried the token instead, so it ignores
//! block scheduling.

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, BlockPlan};
use crate::ctc::{EmissionEvent, Transcript};
use crate::engine::BlockOutput;
use crate::error::{Result, SpiralError};
use crate::schedule::SpiralConfig;

/// Worst-case wait from a frame's arrival to its emission: `(N_c + N_r)` frames.
pub fn max_theoretical_latency(cfg: &BlockConfig) -> f64 {
    (cfg.n_center + cfg.n_right) as f64 * cfg.frame_ms
}

/// Reference timing of one word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub text: String,
    pub start_ms: f64,
    pub end_ms: f64,
}

pub fn validate_alignment(words: &[AlignedWord]) -> Result<()> {
    let mut prev_end = f64::NEG_INFINITY;
    for w in words {
        if !(w.start_ms >= 0.0 && w.start_ms <= w.end_ms && w.end_ms.is_finite()) {
            return Err(SpiralError::config(format!(
                "word {:?} has invalid timing [{}, {}]",
                w.text, w.start_ms, w.end_ms
            )));
        }
        if w.end_ms < prev_end {
            return Err(SpiralError::config(format!("word {:?} is out of order", w.text)));
        }
        prev_end = w.end_ms;
    }
    Ok(())
}

/// Frame whose interval `[f, f + 1) * frame_ms` contains the instant `end_ms`
/// (an end exactly on a boundary belongs to the earlier frame).
pub fn end_frame(end_ms: f64, frame_ms: f64) -> usize {
    let x = (end_ms / frame_ms - 1e-9).ceil();
    if x <= 1.0 {
        0
    } else {
        x as usize - 1
    }
}

/// When one word became available.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    /// Simulated time the block carrying the word's last token produced output.
    pub emit_wallclock_ms: f64,
    /// End of the CTC frame carrying the word's last token.
    pub ctc_frame_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordDelays {
    pub fwd_ms: f64,
    pub lwd_ms: f64,
    pub swd_mean_ms: f64,
    pub iwd_mean_ms: f64,
    pub swd_ms: Vec<f64>,
    pub iwd_ms: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-word delays against reference end times. Negative delays are kept.
pub fn word_delays(emissions: &[EmissionRecord], reference: &[AlignedWord]) -> Result<WordDelays> {
    if emissions.len() != reference.len() {
        return Err(SpiralError::WordMismatch {
            emitted: emissions.len(),
            reference: reference.len(),
        });
    }
    if reference.is_empty() {
        return Err(SpiralError::EmptyInput("utterance has no reference words".into()));
    }
    let swd: Vec<f64> = emissions
        .iter()
        .zip(reference)
        .map(|(e, r)| e.emit_wallclock_ms - r.end_ms)
        .collect();
    let iwd: Vec<f64> = emissions
        .iter()
        .zip(reference)
        .map(|(e, r)| e.ctc_frame_ms - r.end_ms)
        .collect();
    Ok(WordDelays {
        fwd_ms: swd[0],
        lwd_ms: swd[swd.len() - 1],
        swd_mean_ms: mean(&swd),
        iwd_mean_ms: mean(&iwd),
        swd_ms: swd,
        iwd_ms: iwd,
    })
}

fn block_for_frame(plans: &[BlockPlan], frame: usize) -> Result<&BlockPlan> {
    plans
        .iter()
        .find(|p| p.contains_chunk_frame(frame))
        .ok_or_else(|| SpiralError::config(format!("frame {frame} is outside every block")))
}

/// Emit each reference word in the block whose chunk holds its end frame.
pub fn oracle_emissions(
    reference: &[AlignedWord],
    plans: &[BlockPlan],
    frame_ms: f64,
    compute_ms: f64,
) -> Result<Vec<EmissionRecord>> {
    let total = plans.last().map_or(0, |p| p.chunk_end);
    reference
        .iter()
        .map(|w| {
            let f = end_frame(w.end_ms, frame_ms);
            if f >= total {
                return Err(SpiralError::config(format!(
                    "word {:?} ends at {} ms, after the last frame",
                    w.text, w.end_ms
                )));
            }
            let plan = block_for_frame(plans, f)?;
            Ok(EmissionRecord {
                emit_wallclock_ms: plan.ready_time_ms + compute_ms,
                ctc_frame_ms: (f + 1) as f64 * frame_ms,
            })
        })
        .collect()
}

/// Group decoded tokens into words using the transcript's token spans.
///
/// The decoded sequence is accepted only when its length equals the
/// reference token count; otherwise word boundaries are ambiguous and a
/// [`SpiralError::WordMismatch`] is returned. Without word spans each token
/// counts as a word.
pub fn model_emissions(
    tokens: &[EmissionEvent],
    transcript: &Transcript,
    frame_ms: f64,
    compute_ms: f64,
) -> Result<Vec<EmissionRecord>> {
    if tokens.len() != transcript.tokens.len() {
        return Err(SpiralError::WordMismatch {
            emitted: tokens.len(),
            reference: transcript.tokens.len(),
        });
    }
    let record = |e: &EmissionEvent| EmissionRecord {
        emit_wallclock_ms: e.emit_ms + compute_ms,
        ctc_frame_ms: (e.frame_index + 1) as f64 * frame_ms,
    };
    if transcript.words.is_empty() {
        return Ok(tokens.iter().map(record).collect());
    }
    transcript
        .words
        .iter()
        .map(|w| {
            let last = w.token_span.1.checked_sub(1).and_then(|i| tokens.get(i));
            last.map(record)
                .ok_or_else(|| SpiralError::config(format!("word {:?} has an invalid token span", w.text)))
        })
        .collect()
}

/// Nearest-rank percentile: the `ceil(q / 100 * n)`-th smallest value.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SpiralError::EmptyInput("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(SpiralError::config(format!("percentile {q} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(SpiralError::config("percentile input contains NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Percentiles {
            p50: percentile(values, 50.0)?,
            p90: percentile(values, 90.0)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeAccounting {
    pub layer_evals_total: usize,
    pub audio_ms: f64,
    pub evals_per_audio_second: f64,
    /// Measured compute time over audio time; absent unless timing was requested.
    pub rtf: Option<f64>,
}

impl ComputeAccounting {
    pub fn from_counts(layer_evals_total: usize, audio_ms: f64, compute_ms: Option<f64>) -> Result<Self> {
        if audio_ms <= 0.0 {
            return Err(SpiralError::EmptyInput("no audio to account for".into()));
        }
        Ok(ComputeAccounting {
            layer_evals_total,
            audio_ms,
            evals_per_audio_second: layer_evals_total as f64 / (audio_ms / 1000.0),
            rtf: compute_ms.map(|c| c / audio_ms),
        })
    }
}

pub fn compute_accounting(
    blocks: &[BlockOutput],
    audio_ms: f64,
    measured_compute_ms: Option<f64>,
) -> Result<ComputeAccounting> {
    if blocks.is_empty() {
        return Err(SpiralError::EmptyInput("no block outputs".into()));
    }
    let evals = blocks.iter().map(|b| b.layer_evals).sum();
    ComputeAccounting::from_counts(evals, audio_ms, measured_compute_ms)
}

/// Delay statistics for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLatency {
    pub utt_id: String,
    pub frames: usize,
    pub blocks: usize,
    pub layer_evals: usize,
    pub words: usize,
    pub fwd_ms: f64,
    pub lwd_ms: f64,
    pub swd_mean_ms: f64,
    pub iwd_mean_ms: f64,
    pub swd_ms: Vec<f64>,
}

impl UtteranceLatency {
    pub fn new(utt_id: &str, frames: usize, blocks: &[BlockOutput], delays: WordDelays) -> Self {
        UtteranceLatency {
            utt_id: utt_id.to_string(),
            frames,
            blocks: blocks.len(),
            layer_evals: blocks.iter().map(|b| b.layer_evals).sum(),
            words: delays.swd_ms.len(),
            fwd_ms: delays.fwd_ms,
            lwd_ms: delays.lwd_ms,
            swd_mean_ms: delays.swd_mean_ms,
            iwd_mean_ms: delays.iwd_mean_ms,
            swd_ms: delays.swd_ms,
        }
    }
}

/// An utterance left out of the delay statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedUtterance {
    pub utt_id: String,
    pub frames: usize,
    pub layer_evals: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub utterances: usize,
    pub excluded: usize,
    pub fwd: Option<Percentiles>,
    pub lwd: Option<Percentiles>,
    pub swd: Option<Percentiles>,
    pub iwd: Option<Percentiles>,
    pub rtf: Option<f64>,
    pub evals: ComputeAccounting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub max_theoretical_latency_ms: f64,
    pub per_utterance: Vec<UtteranceLatency>,
    pub excluded: Vec<ExcludedUtterance>,
    pub aggregate: Aggregate,
}

impl LatencyReport {
    /// Reduce per-utterance results. Compute counts include excluded utterances.
    pub fn build(
        cfg: &BlockConfig,
        per_utterance: Vec<UtteranceLatency>,
        excluded: Vec<ExcludedUtterance>,
        measured_compute_ms: Option<f64>,
    ) -> Result<Self> {
        let frames: usize = per_utterance.iter().map(|u| u.frames).sum::<usize>()
            + excluded.iter().map(|u| u.frames).sum::<usize>();
        let evals = per_utterance.iter().map(|u| u.layer_evals).sum::<usize>()
            + excluded.iter().map(|u| u.layer_evals).sum::<usize>();
        let accounting = ComputeAccounting::from_counts(evals, frames as f64 * cfg.frame_ms, measured_compute_ms)?;
        let stat = |f: fn(&UtteranceLatency) -> f64| -> Result<Option<Percentiles>> {
            if per_utterance.is_empty() {
                return Ok(None);
            }
            let v: Vec<f64> = per_utterance.iter().map(f).collect();
            Percentiles::of(&v).map(Some)
        };
        let aggregate = Aggregate {
            utterances: per_utterance.len(),
            excluded: excluded.len(),
            fwd: stat(|u| u.fwd_ms)?,
            lwd: stat(|u| u.lwd_ms)?,
            swd: stat(|u| u.swd_mean_ms)?,
            iwd: stat(|u| u.iwd_mean_ms)?,
            rtf: accounting.rtf,
            evals: accounting,
        };
        Ok(LatencyReport {
            max_theoretical_latency_ms: max_theoretical_latency(cfg),
            per_utterance,
            excluded,
            aggregate,
        })
    }
}

/// Encoder depth that the compute fractions of [`table_presets`] refer to.
pub const REFERENCE_DEPTH: usize = 12;

/// Named block/schedule configurations used for latency and compute comparisons.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub block: BlockConfig,
    pub schedule: SpiralConfig,
    /// Expected maximum theoretical latency at 40 ms frames.
    pub latency_ms: f64,
    /// Expected per-block layer evaluations as a percentage of [`REFERENCE_DEPTH`].
    pub computing_percent: usize,
}

impl Preset {
    pub fn computed_percent(&self) -> usize {
        self.schedule.evals_per_block() * 100 / REFERENCE_DEPTH
    }
}

pub fn table_presets() -> Vec<Preset> {
    let p = |name, (l, c, r), schedule, latency_ms, computing_percent| Preset {
        name,
        block: BlockConfig::new(l, c, r),
        schedule,
        latency_ms,
        computing_percent,
    };
    let full = SpiralConfig::baseline(REFERENCE_DEPTH);
    let half = SpiralConfig::baseline(REFERENCE_DEPTH / 2);
    vec![
        p("B1", (16, 16, 8), full, 960.0, 100),
        p("B2", (24, 8, 8), full, 640.0, 100),
        p("B3", (28, 4, 8), full, 480.0, 100),
        p("B4", (30, 2, 8), full, 400.0, 100),
        p("H2", (28, 8, 8), half, 640.0, 50),
        p("H3", (30, 4, 8), half, 480.0, 50),
        p("S1", (30, 2, 8), SpiralConfig::spiral(REFERENCE_DEPTH, 4), 400.0, 25),
        p("S2", (31, 1, 8), SpiralConfig::spiral(REFERENCE_DEPTH, 4), 360.0, 25),
        p("S3", (30, 2, 8), SpiralConfig::spiral(REFERENCE_DEPTH, 2), 400.0, 50),
    ]
}

pub fn preset(name: &str) -> Option<Preset> {
    table_presets().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::plan_blocks;
    use crate::ctc::WordSpan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn word(end_ms: f64) -> AlignedWord {
        AlignedWord { text: "w".into(), start_ms: (end_ms - 40.0).max(0.0), end_ms }
    }

    #[test]
    fn latency_examples() {
        assert_eq!(max_theoretical_latency(&BlockConfig::new(16, 16, 8)), 960.0);
        assert_eq!(max_theoretical_latency(&BlockConfig::new(31, 1, 8)), 360.0);
        assert_eq!(max_theoretical_latency(&BlockConfig::new(30, 2, 8)), 400.0);
        assert_eq!(max_theoretical_latency(&BlockConfig::new(30, 2, 8).with_frame_ms(10.0)), 100.0);
    }

    #[test]
    fn presets_match_their_tabulated_columns() {
        let presets = table_presets();
        assert_eq!(presets.len(), 9);
        for p in &presets {
            assert_eq!(max_theoretical_latency(&p.block), p.latency_ms, "{}", p.name);
            assert_eq!(p.computed_percent(), p.computing_percent, "{}", p.name);
            if !p.name.starts_with('H') {
                assert_eq!(p.block.window_len(), 40, "{}", p.name);
            }
            p.schedule.validate().unwrap();
        }
        assert_eq!(preset("s2").unwrap().block, BlockConfig::new(31, 1, 8));
    }

    #[test]
    fn zero_delay_identity() {
        let refs = vec![word(100.0), word(300.0)];
        let em: Vec<_> = refs
            .iter()
            .map(|w| EmissionRecord { emit_wallclock_ms: w.end_ms, ctc_frame_ms: w.end_ms })
            .collect();
        let d = word_delays(&em, &refs).unwrap();
        assert_eq!((d.fwd_ms, d.lwd_ms, d.swd_mean_ms, d.iwd_mean_ms), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_word_delay() {
        let d = word_delays(
            &[EmissionRecord { emit_wallclock_ms: 500.0, ctc_frame_ms: 120.0 }],
            &[word(100.0)],
        )
        .unwrap();
        assert_eq!((d.fwd_ms, d.lwd_ms, d.swd_mean_ms), (400.0, 400.0, 400.0));
        assert_eq!(d.iwd_mean_ms, 20.0);
    }

    #[test]
    fn first_last_and_mean() {
        let refs = vec![word(100.0), word(200.0), word(300.0)];
        let em: Vec<_> = [110.0, 220.0, 360.0]
            .into_iter()
            .map(|t| EmissionRecord { emit_wallclock_ms: t, ctc_frame_ms: t })
            .collect();
        let d = word_delays(&em, &refs).unwrap();
        assert_eq!((d.fwd_ms, d.lwd_ms, d.swd_mean_ms), (10.0, 60.0, 30.0));
    }

    #[test]
    fn mismatch_is_flagged() {
        let e = word_delays(&[], &[word(100.0)]).unwrap_err();
        assert!(matches!(e, SpiralError::WordMismatch { emitted: 0, reference: 1 }));
    }

    #[test]
    fn end_frame_boundaries() {
        assert_eq!(end_frame(40.0, 40.0), 0);
        assert_eq!(end_frame(41.0, 40.0), 1);
        assert_eq!(end_frame(120.0, 40.0), 2);
        assert_eq!(end_frame(0.0, 40.0), 0);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 90.0).unwrap(), 9.0);
        assert_eq!(percentile(&[7.0], 90.0).unwrap(), 7.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0, f64::NAN], 50.0).is_err());
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let v: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1000.0)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // 90th of 100 values is the 90th smallest
        assert_eq!(percentile(&v, 90.0).unwrap(), sorted[89]);
        assert_eq!(percentile(&v, 50.0).unwrap(), sorted[49]);
        let p = Percentiles::of(&v).unwrap();
        assert!(p.p50 <= p.p90);
    }

    #[test]
    fn oracle_swd_within_look_ahead_bounds() {
        let cfg = BlockConfig::new(30, 2, 8);
        let total = 400;
        let plans = plan_blocks(total, &cfg).unwrap();
        // every end frame that is not in the final block
        let last_steady = plans[plans.len() - 2].chunk_end;
        let refs: Vec<_> = (0..last_steady).map(|f| word((f + 1) as f64 * 40.0)).collect();
        let em = oracle_emissions(&refs, &plans, 40.0, 0.0).unwrap();
        let d = word_delays(&em, &refs).unwrap();
        for (s, i) in d.swd_ms.iter().zip(&d.iwd_ms) {
            assert!((320.0..=400.0).contains(s), "{s}");
            assert!(s >= i);
            assert_eq!(*i, 0.0);
        }
        assert_eq!(d.swd_ms.iter().cloned().fold(f64::INFINITY, f64::min), 320.0);
        assert_eq!(d.swd_ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 360.0);
    }

    #[test]
    fn oracle_rejects_words_past_the_end() {
        let plans = plan_blocks(10, &BlockConfig::new(1, 2, 1)).unwrap();
        assert!(oracle_emissions(&[word(440.0)], &plans, 40.0, 0.0).is_err());
    }

    #[test]
    fn model_emissions_group_by_span() {
        let ev = |token_id, frame_index, emit_ms| EmissionEvent { token_id, frame_index, block_index: 1, emit_ms };
        let tokens = vec![ev(0, 1, 200.0), ev(1, 3, 200.0), ev(2, 6, 280.0)];
        let mut t = Transcript::new(vec![0, 1, 2]);
        t.words = vec![
            WordSpan { text: "ab".into(), token_span: (0, 2) },
            WordSpan { text: "c".into(), token_span: (2, 3) },
        ];
        let em = model_emissions(&tokens, &t, 40.0, 5.0).unwrap();
        assert_eq!(em.len(), 2);
        assert_eq!(em[0], EmissionRecord { emit_wallclock_ms: 205.0, ctc_frame_ms: 160.0 });
        assert_eq!(em[1].ctc_frame_ms, 280.0);
        assert!(matches!(
            model_emissions(&tokens[..2], &t, 40.0, 0.0),
            Err(SpiralError::WordMismatch { emitted: 2, reference: 3 })
        ));
        assert_eq!(model_emissions(&tokens, &Transcript::new(vec![4, 4, 4]), 40.0, 0.0).unwrap().len(), 3);
    }

    #[test]
    fn alignment_validation() {
        assert!(validate_alignment(&[word(80.0), word(120.0)]).is_ok());
        assert!(validate_alignment(&[word(120.0), word(80.0)]).is_err());
        let bad = AlignedWord { text: "x".into(), start_ms: 50.0, end_ms: 10.0 };
        assert!(validate_alignment(&[bad]).is_err());
    }

    #[test]
    fn accounting_rates() {
        let a = ComputeAccounting::from_counts(300, 2000.0, None).unwrap();
        assert_eq!(a.evals_per_audio_second, 150.0);
        assert_eq!(a.rtf, None);
        assert_eq!(ComputeAccounting::from_counts(1, 2000.0, Some(500.0)).unwrap().rtf, Some(0.25));
        assert!(compute_accounting(&[], 10.0, None).is_err());
    }

    #[test]
    fn report_aggregates_matched_only() {
        let cfg = BlockConfig::new(1, 2, 1);
        let u = |id: &str, s: f64| UtteranceLatency {
            utt_id: id.into(),
            frames: 10,
            blocks: 5,
            layer_evals: 20,
            words: 1,
            fwd_ms: s,
            lwd_ms: s,
            swd_mean_ms: s,
            iwd_mean_ms: 0.0,
            swd_ms: vec![s],
        };
        let ex = ExcludedUtterance { utt_id: "x".into(), frames: 10, layer_evals: 20, reason: "m".into() };
        let r = LatencyReport::build(&cfg, vec![u("a", 100.0), u("b", 300.0)], vec![ex], None).unwrap();
        assert_eq!(r.aggregate.swd.unwrap(), Percentiles { p50: 100.0, p90: 300.0 });
        assert_eq!(r.aggregate.evals.layer_evals_total, 60);
        assert_eq!(r.aggregate.excluded, 1);
        assert_eq!(r.max_theoretical_latency_ms, 120.0);
        let empty = LatencyReport::build(&cfg, vec![], vec![], None);
        assert!(empty.is_err());
    }
}
