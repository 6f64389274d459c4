//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use spiral_encoder::block::BlockConfig;
use spiral_encoder::ctc::ctc_loss;
use spiral_encoder::formats::{read_features, read_weights, RunConfig, TranscriptRecord};
use spiral_encoder::metrics::max_theoretical_latency;
use spiral_encoder::sim::{generate, GenerateSpec};
use spiral_encoder::verify::{
    ctc_enumeration_check, ctc_gradient_check, equivalence_suite, trace_suite, Check,
};
use spiral_encoder::{computed_layers, ctc_head_forward, exit_layer, run_utterance, SpiralConfig};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn checks_pass(checks: &[Check]) -> Result<String, String> {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    if failed.is_empty() {
        Ok(checks.iter().map(|c| c.detail.clone()).filter(|d| !d.is_empty()).collect::<Vec<_>>().join("; "))
    } else {
        Err(failed.join("; "))
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_spiral")
}

fn spiral(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("spawn failed: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`spiral {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_config(dir: &Path, name: &str, json: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).expect("write config");
    p
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let fig: [&[usize]; 4] = [&[1, 5, 9], &[2, 6, 10], &[3, 7, 11], &[4, 8, 12]];
    for (s, want) in fig.iter().enumerate() {
        let got = computed_layers(s, 12, 4).map_err(|e| e.to_string())?;
        ensure(got == *want, format!("s={s}: {got:?}"))?;
    }
    let mut pairs = 0;
    for i in 1..=48usize {
        for p in (1..=i).filter(|p| i % p == 0) {
            pairs += 1;
            let mut seen = BTreeSet::new();
            let mut total = 0;
            for s in 0..p {
                let c = computed_layers(s, i, p).map_err(|e| e.to_string())?;
                ensure(c.last() == Some(&exit_layer(s, i, p)), format!("exit I={i} p={p} s={s}"))?;
                total += c.len();
                seen.extend(c);
            }
            ensure(total == i && seen == (1..=i).collect(), format!("cover I={i} p={p}"))?;
        }
    }
    within(start.elapsed(), 1)?;
    Ok(format!("{pairs} (I, p) pairs"))
}

fn criterion_2() -> Outcome {
    let rows: [(&str, (usize, usize, usize), f64); 9] = [
        ("B1", (16, 16, 8), 960.0),
        ("B2", (24, 8, 8), 640.0),
        ("B3", (28, 4, 8), 480.0),
        ("B4", (30, 2, 8), 400.0),
        ("H2", (28, 8, 8), 640.0),
        ("H3", (30, 4, 8), 480.0),
        ("S1", (30, 2, 8), 400.0),
        ("S2", (31, 1, 8), 360.0),
        ("S3", (30, 2, 8), 400.0),
    ];
    for (name, (l, c, r), want) in rows {
        let got = max_theoretical_latency(&BlockConfig::new(l, c, r).with_frame_ms(40.0));
        ensure(got == want, format!("{name}: {got} != {want}"))?;
    }
    Ok("9 rows exact".into())
}

fn criterion_3() -> Outcome {
    let mut spec = GenerateSpec::new(3, 1, 160, 8, 4);
    spec.layers = 12;
    let ds = generate(&spec).map_err(|e| e.to_string())?;
    let half = {
        let mut s = spec.clone();
        s.layers = 6;
        generate(&s).map_err(|e| e.to_string())?
    };
    let x = &ds.features[0].1;
    // (name, block, schedule, weights, percent of a 12-layer stack)
    let rows = [
        ("B4", (30, 2, 8), SpiralConfig::baseline(12), &ds.weights, 100),
        ("H3", (30, 4, 8), SpiralConfig::baseline(6), &half.weights, 50),
        ("S1", (30, 2, 8), SpiralConfig::spiral(12, 4), &ds.weights, 25),
        ("S3", (30, 2, 8), SpiralConfig::spiral(12, 2), &ds.weights, 50),
    ];
    let mut totals = Vec::new();
    for (name, (l, c, r), sched, w, pct) in rows {
        let out = run_utterance(x, &BlockConfig::new(l, c, r), &sched, w, false).map_err(|e| e.to_string())?;
        for b in &out.blocks {
            ensure(b.layer_evals * 100 == pct * 12, format!("{name} block {}: {} evals", b.block_index, b.layer_evals))?;
        }
        totals.push(out.layer_evals());
    }
    let ratio = totals[2] as f64 / totals[0] as f64;
    ensure(ratio == 0.25, format!("S1:B4 = {ratio}"))?;
    Ok(format!("S1:B4 = {} / {} = {ratio}", totals[2], totals[0]))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let detail = checks_pass(&equivalence_suite(20, 100).map_err(|e| e.to_string())?)?;
    within(start.elapsed(), 30)?;
    Ok(detail)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let checks = vec![
        ctc_enumeration_check(5, 50).map_err(|e| e.to_string())?,
        ctc_gradient_check(6, 20).map_err(|e| e.to_string())?,
    ];
    let detail = checks_pass(&checks)?;
    within(start.elapsed(), 60)?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    checks_pass(&trace_suite(20).map_err(|e| e.to_string())?)
}

fn words_and_median(report: &serde_json::Value) -> Result<(Vec<f64>, f64), String> {
    let mut all = Vec::new();
    for u in report["per_utterance"].as_array().ok_or("no per_utterance")? {
        for s in u["swd_ms"].as_array().ok_or("no swd_ms")? {
            all.push(s.as_f64().ok_or("non-numeric swd")?);
        }
    }
    let median = report["aggregate"]["swd"]["p50"].as_f64().ok_or("no aggregate swd p50")?;
    Ok((all, median))
}

fn word_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len().div_ceil(2) - 1]
}

fn criterion_7(dir: &Path) -> Outcome {
    let data = dir.join("c7");
    spiral(&["generate", "--seed", "11", "--utts", "50", "--frames", "200", "--dim", "8", "--vocab", "6", "--out", path(&data)])?;
    let mut medians = Vec::new();
    for (name, (l, c, r), extra) in [
        ("s1", (30, 2, 8), r#""total_layers":12,"pitch":4"#),
        ("b1", (16, 16, 8), r#""total_layers":12,"mode":"baseline","cache_combination":false"#),
    ] {
        let cfg = write_config(
            dir,
            &format!("{name}.json"),
            &format!(r#"{{"n_left":{l},"n_center":{c},"n_right":{r},"frame_ms":40,{extra}}}"#),
        );
        let out = dir.join(format!("c7-{name}"));
        spiral(&[
            "simulate", "--config", path(&cfg), "--features", path(&data.join("features")), "--align",
            path(&data.join("align.jsonl")), "--weights", path(&data.join("weights.spwt")), "--emitter", "oracle",
            "--out", path(&out),
        ])?;
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        ensure(report["per_utterance"].as_array().map(Vec::len) == Some(50), format!("{name}: not all 50 utterances matched"))?;
        let (swd, agg_median) = words_and_median(&report)?;
        let (lo, hi) = (r as f64 * 40.0, (c + r) as f64 * 40.0);
        let outside = swd.iter().filter(|s| !(lo..=hi).contains(*s)).count();
        ensure(outside == 0, format!("{name}: {outside} of {} words outside [{lo}, {hi}]", swd.len()))?;
        medians.push((word_median(&swd), agg_median, swd.len()));
    }
    let (s1, b1) = (medians[0], medians[1]);
    ensure(s1.0 < b1.0, format!("word median {} !< {}", s1.0, b1.0))?;
    ensure(s1.1 < b1.1, format!("utterance median {} !< {}", s1.1, b1.1))?;
    Ok(format!(
        "{} words each; median SWD {{30,2,8}} {} ms < {{16,16,8}} {} ms (utterance P50 {} < {})",
        s1.2, s1.0, b1.0, s1.1, b1.1
    ))
}

fn criterion_8(dir: &Path) -> Outcome {
    let data = dir.join("c8");
    spiral(&["generate", "--seed", "12", "--utts", "2", "--frames", "120", "--dim", "8", "--vocab", "5", "--out", path(&data)])?;
    let cfg_text = r#"{"n_left":4,"n_center":2,"n_right":2,"frame_ms":40,"total_layers":12,"pitch":4}"#;
    let cfg_path = write_config(dir, "c8.json", cfg_text);
    let feat = data.join("features/utt0000.spft");
    let stdout = spiral(&[
        "loss", "--config", path(&cfg_path), "--features", path(&feat), "--transcripts",
        path(&data.join("transcripts.jsonl")), "--weights", path(&data.join("weights.spwt")),
    ])?;
    let mut terms = Vec::new();
    let mut total = None;
    for line in stdout.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [_, "term", label, v] => terms.push((label.to_string(), v.parse::<f64>().map_err(|e| e.to_string())?)),
            [_, "total", v] => total = Some(v.parse::<f64>().map_err(|e| e.to_string())?),
            _ => return Err(format!("unexpected output line {line:?}")),
        }
    }
    ensure(terms.len() == 5, format!("{} terms printed", terms.len()))?;
    let total = total.ok_or("no total printed")?;

    // recompute every term from the files
    let cfg = RunConfig::from_json(cfg_text).map_err(|e| e.to_string())?;
    let w = read_weights(&data.join("weights.spwt")).map_err(|e| e.to_string())?;
    let x = read_features(&feat).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(data.join("transcripts.jsonl")).map_err(|e| e.to_string())?;
    let rec: TranscriptRecord = serde_json::from_str(text.lines().next().ok_or("empty transcripts")?).map_err(|e| e.to_string())?;
    let out = run_utterance(&x, &cfg.block(), &cfg.schedule(), &w, true).map_err(|e| e.to_string())?;
    let term = |h| -> Result<f64, String> {
        let lp = ctc_head_forward(&w, h).map_err(|e| e.to_string())?;
        ctc_loss(&lp, &rec.tokens).map_err(|e| e.to_string())
    };
    let mut expected = vec![("L_H".to_string(), term(&out.encoded)?)];
    for (s, h) in out.per_shift.iter().enumerate() {
        expected.push((format!("L_H^{s}"), term(h)?));
    }
    for ((label, got), (want_label, want)) in terms.iter().zip(&expected) {
        ensure(label == want_label, format!("term {label} where {want_label} expected"))?;
        ensure((got - want).abs() <= 1e-9, format!("{label}: {got} vs {want}"))?;
    }
    let sum: f64 = expected.iter().map(|(_, v)| v).sum();
    ensure((total - sum).abs() <= 1e-9, format!("printed total {total} vs recomputed {sum}"))?;
    Ok(format!("5 terms, total {total}, recomputed {sum}"))
}

fn criterion_9(dir: &Path) -> Outcome {
    let data = dir.join("c9");
    spiral(&["generate", "--seed", "13", "--utts", "8", "--frames", "150", "--dim", "8", "--vocab", "5", "--out", path(&data)])?;
    let cfg = write_config(dir, "c9.json", r#"{"n_left":30,"n_center":2,"n_right":8,"total_layers":12,"pitch":4}"#);
    let mut outputs = Vec::new();
    for emitter in ["model", "oracle"] {
        for run in 0..2 {
            let out = dir.join(format!("c9-{emitter}-{run}"));
            spiral(&[
                "simulate", "--config", path(&cfg), "--features", path(&data.join("features")), "--align",
                path(&data.join("align.jsonl")), "--weights", path(&data.join("weights.spwt")), "--transcripts",
                path(&data.join("transcripts.jsonl")), "--emitter", emitter, "--out", path(&out),
            ])?;
            let json = std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?;
            let csv = std::fs::read(out.join("report.csv")).map_err(|e| e.to_string())?;
            outputs.push((emitter, json, csv));
        }
    }
    for pair in outputs.chunks(2) {
        ensure(pair[0].1 == pair[1].1, format!("{} report.json differs between runs", pair[0].0))?;
        ensure(pair[0].2 == pair[1].2, format!("{} report.csv differs between runs", pair[0].0))?;
    }
    let report: serde_json::Value = serde_json::from_slice(&outputs[0].1).map_err(|e| e.to_string())?;
    ensure(report["seed"] == 13, "seed not recorded")?;
    ensure(report["manifest_sha256"].as_str().map(str::len) == Some(64), "manifest hash missing")?;
    Ok(format!("{} bytes of report identical across runs", outputs[0].1.len() + outputs[2].1.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<Criterion<'_>> = vec![
        ("1 layer schedule", Box::new(criterion_1)),
        ("2 maximum latency column", Box::new(criterion_2)),
        ("3 computing-layer ratios", Box::new(criterion_3)),
        ("4 degenerate equivalence", Box::new(criterion_4)),
        ("5 ctc oracles", Box::new(criterion_5)),
        ("6 dependency trace", Box::new(criterion_6)),
        ("7 latency bounds", Box::new(move || criterion_7(dir))),
        ("8 combined loss", Box::new(move || criterion_8(dir))),
        ("9 determinism", Box::new(move || criterion_9(dir))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
