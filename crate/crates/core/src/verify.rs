//! Invariant suites with independent reference implementations.
//!
//! Each suite returns one [`Check`] per property. The references here avoid
//! the code paths they check: CTC losses are compared against exhaustive path
//! enumeration, encoder outputs against a plain per-window layer stack, and
//! dependency traces against reachability on an explicitly built graph.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::{plan_blocks, slice_window, steady_block, BlockConfig};
use crate::ctc::{ctc_loss, ctc_loss_grad_f64};
use crate::encoder::{layer_forward, EncoderWeights, ModelDims};
use crate::engine::run_utterance;
use crate::error::{Result, SpiralError};
use crate::formats::RunConfig;
use crate::metrics::{max_theoretical_latency, percentile, table_presets, REFERENCE_DEPTH};
use crate::schedule::{computed_layers, exit_layer, EngineMode, SpiralConfig};
use crate::sim::{generate, simulate, Emitter, GenerateSpec, RunManifest, SimOptions, Utterance};
use crate::tensor::{log_softmax_in_place, FeatureMatrix};
use crate::trace::{trace_dependencies, DepCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Coverage,
    Equivalence,
    Ctc,
    Latency,
    Trace,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Coverage, Suite::Equivalence, Suite::Ctc, Suite::Latency, Suite::Trace];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Coverage => "coverage",
            Suite::Equivalence => "equivalence",
            Suite::Ctc => "ctc",
            Suite::Latency => "latency",
            Suite::Trace => "trace",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub seed: Option<u64>,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, seed: Option<u64>, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            seed,
            detail: detail.into(),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Coverage => coverage_suite(),
        Suite::Equivalence => equivalence_suite(20, 100),
        Suite::Ctc => ctc_suite(),
        Suite::Latency => latency_suite(50),
        Suite::Trace => trace_suite(20),
    }
}

// coverage

pub fn coverage_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let expected: [&[usize]; 4] = [&[1, 5, 9], &[2, 6, 10], &[3, 7, 11], &[4, 8, 12]];
    for (s, want) in expected.iter().enumerate() {
        let got = computed_layers(s, 12, 4)?;
        checks.push(Check::new(
            format!("layers I=12 p=4 s={s}"),
            got == *want,
            None,
            format!("{got:?}"),
        ));
    }
    let mut bad = Vec::new();
    let mut pairs = 0;
    for i in 1..=48 {
        for p in (1..=i).filter(|p| i % p == 0) {
            pairs += 1;
            let mut count = vec![0usize; i + 1];
            for s in 0..p {
                let c = computed_layers(s, i, p)?;
                if c.iter().max() != Some(&exit_layer(s, i, p)) {
                    bad.push(format!("exit I={i} p={p} s={s}"));
                }
                for l in c {
                    count[l] += 1;
                }
            }
            if count[0] != 0 || count[1..].iter().any(|&n| n != 1) {
                bad.push(format!("cover I={i} p={p}"));
            }
        }
    }
    checks.push(Check::new(
        "every layer once per cycle, I<=48, p|I",
        bad.is_empty(),
        None,
        if bad.is_empty() { format!("{pairs} (I, p) pairs") } else { bad.join("; ") },
    ));
    for p in [1, 2, 4] {
        let all: BTreeSet<usize> = (0..p).flat_map(|s| computed_layers(s, 12, p).unwrap()).collect();
        checks.push(Check::new(
            format!("union I=12 p={p}"),
            all == (1..=12).collect(),
            None,
            format!("{} layers", all.len()),
        ));
    }
    Ok(checks)
}

// equivalence

/// Per-window stack of all layers, no cache, chunk rows concatenated.
pub fn reference_baseline(features: &FeatureMatrix, bcfg: &BlockConfig, weights: &EncoderWeights) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::zeros(0, weights.dims.dim);
    for plan in plan_blocks(features.rows(), bcfg)? {
        let mut h = slice_window(features, &plan);
        for (r, f) in (plan.left_pad..).zip(plan.window_start..plan.window_end) {
            let pe = weights.positional.encode(f, h.cols());
            h.row_mut(r).iter_mut().zip(pe).for_each(|(v, e)| *v += e);
        }
        for layer in &weights.layers {
            h = layer_forward(layer, &h)?;
        }
        for f in plan.chunk_start..plan.chunk_end {
            out.push_row(h.row(plan.left_pad + f - plan.window_start))?;
        }
    }
    Ok(out)
}

/// Largest elementwise `|a - b| / max(|a|, |b|)`, zero where both vanish.
pub fn max_relative_deviation(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;

pub fn equivalence_suite(utterances: usize, frames: usize) -> Result<Vec<Check>> {
    let dims = ModelDims { layers: 4, dim: 16, ff_dim: 32, heads: 4, vocab: 8 };
    let bcfg = BlockConfig::new(8, 4, 4);
    let degenerate = SpiralConfig::spiral(4, 1).with_cache_combination(false);
    let baseline = SpiralConfig::baseline(4);
    let mut worst_mode = 0.0f64;
    let mut worst_ref = 0.0f64;
    for u in 0..utterances {
        let seed = 1000 + u as u64;
        let weights = EncoderWeights::random(dims, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMatrix::from_vec(
            frames,
            dims.dim,
            (0..frames * dims.dim).map(|_| rng.random_range(-1.7..1.7)).collect(),
        )?;
        let a = run_utterance(&x, &bcfg, &degenerate, &weights, false)?.encoded;
        let b = run_utterance(&x, &bcfg, &baseline, &weights, false)?.encoded;
        let r = reference_baseline(&x, &bcfg, &weights)?;
        worst_mode = worst_mode.max(max_relative_deviation(&a, &b));
        worst_ref = worst_ref.max(max_relative_deviation(&a, &r));
    }
    Ok(vec![
        Check::new(
            "p=1 without cache vs baseline mode",
            worst_mode <= EQUIVALENCE_TOLERANCE,
            Some(1000),
            format!("max relative deviation {worst_mode:e} over {utterances} utterances"),
        ),
        Check::new(
            "p=1 without cache vs per-window layer stack",
            worst_ref <= EQUIVALENCE_TOLERANCE,
            Some(1000),
            format!("max relative deviation {worst_ref:e} over {utterances} utterances"),
        ),
    ])
}

// ctc

/// `-log` of the total probability of all length-T label paths that collapse to `target`.
pub fn enumerate_ctc_nll(logprobs: &FeatureMatrix, target: &[usize]) -> f64 {
    let (frames, classes) = (logprobs.rows(), logprobs.cols());
    let blank = classes - 1;
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    'paths: for code in 0..classes.pow(frames as u32) {
        let mut x = code;
        for slot in path.iter_mut() {
            *slot = x % classes;
            x /= classes;
        }
        let mut pos = 0;
        for t in 0..frames {
            let k = path[t];
            if k == blank || (t > 0 && path[t - 1] == k) {
                continue;
            }
            if pos >= target.len() || target[pos] != k {
                continue 'paths;
            }
            pos += 1;
        }
        if pos == target.len() {
            total += (0..frames).map(|t| logprobs.row(t)[path[t]] as f64).sum::<f64>().exp();
        }
    }
    -total.ln()
}

pub const CTC_ENUMERATION_TOLERANCE: f64 = 1e-9;
pub const CTC_GRADIENT_TOLERANCE: f64 = 1e-4;
/// Below this magnitude, gradient errors are measured against the floor instead.
pub const CTC_GRADIENT_FLOOR: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-3;

pub fn ctc_enumeration_check(seed: u64, targets_per_case: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut scored, mut unalignable) = (0, 0);
    let mut failures = Vec::new();
    for t in 1..=6 {
        for v in 1..=3 {
            for _ in 0..targets_per_case {
                let mut lp = FeatureMatrix::zeros(t, v + 1);
                for r in 0..t {
                    let row = lp.row_mut(r);
                    row.iter_mut().for_each(|x| *x = rng.random_range(-3.0..3.0));
                    log_softmax_in_place(row);
                }
                let len = rng.random_range(0..=t);
                let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
                let want = enumerate_ctc_nll(&lp, &target);
                match ctc_loss(&lp, &target) {
                    Ok(got) => {
                        scored += 1;
                        let err = (got - want).abs() / want.abs().max(1.0);
                        worst = worst.max(err);
                        if err.is_nan() || err > CTC_ENUMERATION_TOLERANCE {
                            failures.push(format!("T={t} V={v} {target:?}: {got} vs {want}"));
                        }
                    }
                    Err(SpiralError::Unalignable { .. }) if want.is_infinite() => unalignable += 1,
                    Err(e) => failures.push(format!("T={t} V={v} {target:?}: {e} (reference {want})")),
                }
            }
        }
    }
    Ok(Check::new(
        "ctc loss vs path enumeration, T<=6, V<=3",
        failures.is_empty(),
        Some(seed),
        if failures.is_empty() {
            format!("{scored} scored, {unalignable} unalignable, max error {worst:e}")
        } else {
            failures.join("; ")
        },
    ))
}

pub fn ctc_gradient_check(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for n in 0..instances {
        let frames = rng.random_range(2..=8usize);
        let classes = rng.random_range(2..=5usize);
        let len = rng.random_range(0..=(frames / 2).min(4));
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes - 1)).collect();
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = ctc_loss_grad_f64(&logits, classes, &target)?;
        for j in 0..logits.len() {
            let mut l = logits.clone();
            l[j] = logits[j] + FD_STEP;
            let up = ctc_loss_grad_f64(&l, classes, &target)?.0;
            l[j] = logits[j] - FD_STEP;
            let down = ctc_loss_grad_f64(&l, classes, &target)?.0;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = (grad[j] - fd).abs() / fd.abs().max(CTC_GRADIENT_FLOOR);
            worst = worst.max(err);
            if err.is_nan() || err > CTC_GRADIENT_TOLERANCE {
                failures.push(format!("instance {n} element {j}: {} vs {fd}", grad[j]));
            }
        }
        for (r, row) in grad.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if s.abs() > 1e-6 {
                failures.push(format!("instance {n} row {r} sums to {s}"));
            }
        }
    }
    Ok(Check::new(
        "ctc gradient vs central differences",
        failures.is_empty(),
        Some(seed),
        if failures.is_empty() {
            format!("{instances} instances, max relative error {worst:e}")
        } else {
            failures.join("; ")
        },
    ))
}

pub fn ctc_suite() -> Result<Vec<Check>> {
    Ok(vec![ctc_enumeration_check(41, 50)?, ctc_gradient_check(42, 24)?])
}

// latency

fn oracle_run(cfg: RunConfig, utts: &[Utterance], ds: &crate::sim::Dataset, weights: &EncoderWeights) -> Result<crate::sim::RunReport> {
    let opts = SimOptions { emitter: Emitter::Oracle, ..Default::default() };
    let manifest = RunManifest {
        command: "verify".into(),
        config: cfg,
        emitter: Emitter::Oracle,
        seed: Some(ds.spec.seed),
        compute_ms_per_block: 0.0,
        inputs: vec![],
    };
    simulate(utts, &ds.alignments, None, &cfg, weights, &opts, manifest)
}

pub fn latency_suite(utterances: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for p in table_presets() {
        let got = max_theoretical_latency(&p.block);
        checks.push(Check::new(
            format!("{} max latency", p.name),
            got == p.latency_ms,
            None,
            format!("{got} ms"),
        ));
        let pct = p.schedule.evals_per_block() * 100;
        checks.push(Check::new(
            format!("{} computing layers", p.name),
            pct == p.computing_percent * REFERENCE_DEPTH,
            None,
            format!("{} of {REFERENCE_DEPTH} layers per block", p.schedule.evals_per_block()),
        ));
    }

    let seed = 2024;
    let mut spec = GenerateSpec::new(seed, utterances, 200, 8, 6);
    spec.layers = REFERENCE_DEPTH;
    let ds = generate(&spec)?;
    let utts: Vec<Utterance> = ds
        .features
        .iter()
        .map(|(id, m)| Utterance { utt_id: id.clone(), features: m.clone(), sha256: String::new() })
        .collect();
    let preset = |n: &str| crate::metrics::preset(n).expect("known preset");
    let run = |n: &str| {
        let p = preset(n);
        oracle_run(RunConfig::new(p.block, p.schedule), &utts, &ds, &ds.weights)
    };
    let b1 = run("B1")?;
    let b4 = run("B4")?;
    let s1 = run("S1")?;
    let s3 = run("S3")?;

    for (name, r) in [("B1", &b1), ("S1", &s1)] {
        let c = r.config.block();
        let (lo, hi) = (c.n_right as f64 * c.frame_ms, (c.n_center + c.n_right) as f64 * c.frame_ms);
        let all: Vec<f64> = r.report.per_utterance.iter().flat_map(|u| u.swd_ms.iter().copied()).collect();
        let out: Vec<&f64> = all.iter().filter(|s| !(lo..=hi).contains(*s)).collect();
        checks.push(Check::new(
            format!("{name} oracle SWD within [{lo}, {hi}] ms"),
            out.is_empty() && r.report.per_utterance.len() == utterances && !all.is_empty(),
            Some(seed),
            format!("{} words, {} outside", all.len(), out.len()),
        ));
    }
    let median = |r: &crate::sim::RunReport| -> Result<f64> {
        let v: Vec<f64> = r.report.per_utterance.iter().flat_map(|u| u.swd_ms.iter().copied()).collect();
        percentile(&v, 50.0)
    };
    let (m1, ms) = (median(&b1)?, median(&s1)?);
    checks.push(Check::new(
        "median SWD {30,2,8} below {16,16,8}",
        ms < m1,
        Some(seed),
        format!("{ms} ms vs {m1} ms"),
    ));
    let evals = |r: &crate::sim::RunReport| r.report.aggregate.evals.layer_evals_total;
    checks.push(Check::new(
        "eval ratio S1:B4 = 0.25",
        evals(&s1) * 4 == evals(&b4),
        Some(seed),
        format!("{} vs {}", evals(&s1), evals(&b4)),
    ));
    checks.push(Check::new(
        "eval ratio S3:S1 = 2",
        evals(&s3) == 2 * evals(&s1),
        Some(seed),
        format!("{} vs {}", evals(&s3), evals(&s1)),
    ));
    Ok(checks)
}

// trace

/// Nodes of the computation for blocks `1..=last`, with the inputs of each node.
pub struct DependencyGraph {
    pub inputs: HashMap<DepCell, Vec<DepCell>>,
}

impl DependencyGraph {
    /// Materialize every computed cell of blocks `1..=last` and its input edges.
    pub fn build(last: usize, bcfg: &BlockConfig, scfg: &SpiralConfig) -> Result<Self> {
        let layers_of = |k: usize| -> Result<Vec<usize>> {
            match scfg.mode {
                EngineMode::Baseline => Ok((1..=scfg.total_layers).collect()),
                EngineMode::Spiral => computed_layers((k - 1) % scfg.pitch, scfg.total_layers, scfg.pitch),
            }
        };
        let mut inputs = HashMap::new();
        for k in 1..=last {
            let plan = steady_block(k, bcfg);
            let own = layers_of(k)?;
            // frames the previous block kept for this one
            let retained: Option<(usize, Vec<usize>)> = (k >= 2).then(|| {
                let prev = steady_block(k - 1, bcfg);
                let start = prev.chunk_end.saturating_sub(bcfg.n_left).max(prev.window_start);
                (start, layers_of(k - 1).unwrap_or_default())
            });
            let retained_end = (k >= 2).then(|| steady_block(k - 1, bcfg).window_end);
            for (idx, &i) in own.iter().enumerate() {
                let mut srcs = Vec::new();
                if idx > 0 {
                    let below = own[idx - 1];
                    srcs.extend((plan.window_start..plan.window_end).map(|f| DepCell { block: k, layer: below, frame: f }));
                }
                let combine = scfg.mode == EngineMode::Spiral && scfg.cache_combination && i >= 2;
                if let (true, Some((start, prev_layers)), Some(end)) = (combine, &retained, retained_end) {
                    if prev_layers.contains(&(i - 1)) {
                        srcs.extend(
                            (*start..end)
                                .filter(|f| (plan.window_start..plan.window_end).contains(f))
                                .map(|f| DepCell { block: k - 1, layer: i - 1, frame: f }),
                        );
                    }
                }
                for f in plan.window_start..plan.window_end {
                    inputs.insert(DepCell { block: k, layer: i, frame: f }, srcs.clone());
                }
            }
        }
        Ok(DependencyGraph { inputs })
    }

    /// Breadth-first closure over input edges.
    pub fn reachable(&self, roots: &[DepCell]) -> BTreeSet<DepCell> {
        let mut seen: BTreeSet<DepCell> = BTreeSet::new();
        let mut queue: VecDeque<DepCell> = roots.iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if !seen.insert(c) {
                continue;
            }
            if let Some(srcs) = self.inputs.get(&c) {
                queue.extend(srcs.iter().filter(|s| !seen.contains(s)));
            }
        }
        seen
    }
}

/// Reference closure for block `b`: exit-layer chunk cells and everything they read.
pub fn reference_trace(b: usize, bcfg: &BlockConfig, scfg: &SpiralConfig) -> Result<BTreeSet<DepCell>> {
    let graph = DependencyGraph::build(b, bcfg, scfg)?;
    let plan = steady_block(b, bcfg);
    let exit = match scfg.mode {
        EngineMode::Baseline => scfg.total_layers,
        EngineMode::Spiral => exit_layer((b - 1) % scfg.pitch, scfg.total_layers, scfg.pitch),
    };
    let roots: Vec<DepCell> = (plan.chunk_start..plan.chunk_end)
        .map(|f| DepCell { block: b, layer: exit, frame: f })
        .collect();
    Ok(graph.reachable(&roots))
}

pub fn trace_suite(random_configs: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let bcfg = BlockConfig::new(3, 1, 2);
    let scfg = SpiralConfig::spiral(12, 4);
    let got = trace_dependencies(9, &bcfg, &scfg)?;
    let want = reference_trace(9, &bcfg, &scfg)?;
    checks.push(Check::new(
        "{3,1,2} I=12 p=4 b=9 equals graph reachability",
        got == want,
        None,
        format!("{} cells vs {}", got.len(), want.len()),
    ));
    let has = |block, layer| got.iter().any(|c| c.block == block && c.layer == layer);
    checks.push(Check::new(
        "b=9 reads layer 5 of block 9 and layer 8 of block 8",
        has(9, 5) && has(8, 8),
        None,
        String::new(),
    ));

    let seed = 77;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for n in 0..random_configs {
        let bcfg = BlockConfig::new(rng.random_range(0..=4), rng.random_range(1..=3), rng.random_range(0..=3));
        let total = [4usize, 6, 8, 12][rng.random_range(0..4)];
        let divisors: Vec<usize> = (1..=total).filter(|p| total.is_multiple_of(*p)).collect();
        let pitch = divisors[rng.random_range(0..divisors.len())];
        let scfg = match rng.random_range(0..4) {
            0 => SpiralConfig::baseline(total),
            1 => SpiralConfig::spiral(total, pitch).with_cache_combination(false),
            _ => SpiralConfig::spiral(total, pitch),
        };
        let b = rng.random_range(1..=12);
        let got = trace_dependencies(b, &bcfg, &scfg)?;
        let want = reference_trace(b, &bcfg, &scfg)?;
        if got != want {
            mismatches.push(format!("case {n}: {bcfg:?} {scfg:?} b={b}"));
        }
    }
    checks.push(Check::new(
        format!("{random_configs} random configurations equal graph reachability"),
        mismatches.is_empty(),
        Some(seed),
        mismatches.join("; "),
    ));
    Ok(checks)
}
