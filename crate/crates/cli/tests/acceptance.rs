//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chorekit::fsq::cur;
use chorekit::fsq::{index_to_levels, levels_to_index, FsqCodebook};
use chorekit::io::{gen_synthetic_motion, SeededRng, SyntheticCorpusSpec};
use chorekit::nn::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TrainOptions};
use chorekit::nn::{op_gradient_suite, tokenizer_gradient_check, StepLr};
use chorekit::retrieval::{
    fid, fid_from_stats, jacobi_eigen, retrieval_report, toy_corpus, train_retrieval, DualEncoder, Features,
    GaussianStats, RetrievalConfig, RetrievalTrainOptions, ToyCorpusSpec, REPORT_KEYS,
};
use chorekit::seqgen::{build_swa_mask, discretize_diag, ssm_scan, HybridConfig, HybridModel, Sampling, SsmParams};
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: chorekit::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn fsq_structure() -> Outcome {
    let cb = lib(FsqCodebook::new(vec![8, 5, 5, 5]))?;
    check(cb.size() == 1000, || format!("codebook size {}", cb.size()))?;
    let mut seen = vec![false; cb.size()];
    for i in 0..cb.size() {
        let levels = lib(index_to_levels(i, &cb))?;
        check(levels.iter().zip([8, 5, 5, 5]).all(|(&l, n)| l < n), || format!("index {i} -> {levels:?}"))?;
        let back = lib(levels_to_index(&levels, &cb))?;
        check(back == i, || format!("index {i} -> {levels:?} -> {back}"))?;
        seen[back] = true;
    }
    check(seen.iter().all(|&s| s), || "level grid does not cover every index".into())?;
    Ok("size 1000, all codes round-trip".into())
}

/// Zero-order-hold recurrence written out directly from the scalar closed form.
fn recurrence(p: &SsmParams<f64>, x: &[f64]) -> Vec<f64> {
    let n = p.a.len();
    let mut h = vec![0.0; n];
    let mut y = Vec::new();
    for (t, &dt) in p.delta.iter().enumerate() {
        for (i, hi) in h.iter_mut().enumerate() {
            let a = p.a[i];
            let u: f64 = (0..p.d_in).map(|j| p.b[(t * n + i) * p.d_in + j] * x[t * p.d_in + j]).sum();
            *hi = (dt * a).exp() * *hi + ((dt * a).exp() - 1.0) / a * u;
        }
        for o in 0..p.d_out {
            y.push((0..n).map(|i| p.c[(t * p.d_out + o) * n + i] * h[i]).sum());
        }
    }
    y
}

fn scan_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = SeededRng::new(1000 + case);
        let steps = 1 + rng.below(128) as usize;
        let n = 1 + rng.below(32) as usize;
        let (d_in, d_out) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        let a = (0..n).map(|_| -rng.uniform(0.01, 3.0)).collect();
        let b = randn(&mut rng, steps * n * d_in);
        let c = randn(&mut rng, steps * d_out * n);
        let delta = (0..steps).map(|_| rng.uniform(1e-3, 0.5)).collect();
        let p = lib(SsmParams::new(a, b, c, delta, d_in, d_out))?;
        let x = randn(&mut rng, steps * d_in);
        let fast = lib(ssm_scan(&p, &x))?;
        let slow = recurrence(&p, &x);
        check(fast.len() == slow.len(), || format!("case {case}: {} outputs, expected {}", fast.len(), slow.len()))?;
        worst = fast.iter().zip(&slow).map(|(u, v)| (u - v).abs()).fold(worst, f64::max);
    }
    check(worst < 1e-5, || format!("max abs diff {worst:e} over 100 cases"))?;

    let (abar, bbar) = lib(discretize_diag(&[-1.0], &[1.0], std::f64::consts::LN_2))?;
    check((abar[0] - 0.5).abs() < 1e-12 && (bbar[0] - 0.5).abs() < 1e-12, || {
        format!("a=-1, delta=ln 2 gives A-bar {} and B-bar {}", abar[0], bbar[0])
    })?;
    let (_, small) = lib(discretize_diag(&[1e-12], &[3.0], 0.1))?;
    check((small[0] - 0.3).abs() < 1e-9, || format!("small-a limit gives B-bar {}", small[0]))?;

    let diag = [-1.0, -0.5, -2.0, -0.1];
    let residual = |dt: f64| -> Result<f64, String> {
        let (abar, _) = lib(discretize_diag(&diag, &[1.0; 4], dt))?;
        Ok(abar.iter().zip(&diag).map(|(x, a)| (x - 1.0 - a * dt).powi(2)).sum::<f64>().sqrt())
    };
    let ratio = residual(1e-2)? / residual(1e-3)?;
    check((80.0..125.0).contains(&ratio), || format!("residual ratio {ratio} is not quadratic"))?;
    Ok(format!("100 cases max abs diff {worst:.1e}, closed forms exact, delta decay ratio {ratio:.1}"))
}

fn swa_mask() -> Outcome {
    let (s, r, len) = (30usize, 15usize, 128usize);
    let mask = lib(build_swa_mask(len, s, r))?;
    // Query t sees keys from the last stride boundary at or before t + 1 - S.
    let first_key = |t: usize| if t < s { 0 } else { (t + 1 - s).div_ceil(r) * r };
    let mut checked = 0;
    for t in 0..len {
        for k in 0..len {
            let expect = k <= t && k >= first_key(t);
            check(mask.allows(t, k) == expect, || format!("({t}, {k}): mask {} rule {expect}", mask.allows(t, k)))?;
            check(!mask.allows(t, k) || k <= t, || format!("query {t} sees future key {k}"))?;
            checked += 1;
        }
        let width = (0..len).filter(|&k| mask.allows(t, k)).count();
        check(width == mask.width(t), || format!("row {t}: width {} but {width} allowed", mask.width(t)))?;
        check(t < s || (width > r && width <= s), || format!("row {t}: width {width} outside ({r}, {s}]"))?;
    }
    Ok(format!("{checked} entries match the rule"))
}

fn gradient_checks() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut min_checked = usize::MAX;
    let suite = lib(op_gradient_suite(0))?;
    for (name, report) in &suite {
        check(report.max_rel_error < 1e-4, || {
            format!("{name}: rel err {:e} at {:?}", report.max_rel_error, report.worst)
        })?;
        check(report.checked >= 64, || format!("{name}: only {} coordinates checked", report.checked))?;
        min_checked = min_checked.min(report.checked);
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, name);
        }
    }
    let tok = lib(tokenizer_gradient_check(0))?;
    check(tok.max_rel_error < 1e-4, || format!("tokenizer loss: rel err {:e} at {:?}", tok.max_rel_error, tok.worst))?;
    check(tok.checked >= 64, || format!("tokenizer loss: only {} coordinates checked", tok.checked))?;
    Ok(format!(
        "{} ops (worst {} {:.1e}, min {} coords), tokenizer loss {:.1e} over {} coords",
        suite.len(),
        worst.1,
        worst.0,
        min_checked,
        tok.max_rel_error,
        tok.checked
    ))
}

fn tokenizer_training() -> Outcome {
    let spec = SyntheticCorpusSpec { n_clips: 32, frames: 360, joint_count: 24, seed: 0, ..Default::default() };
    let clips = lib(gen_synthetic_motion(&spec))?;
    let mut tok = lib(Tokenizer::<f32>::new(TokenizerConfig::toy(), 0))?;
    lib(tok.fit_normalizer(&clips))?;
    let initial = lib(tok.mean_rec(&clips))?;
    let cur_before = cur(&lib(tok.usage(&clips))?, &[1])[0];
    let history = lib(train_tokenizer(&mut tok, &clips, &TrainOptions::default()))?;
    let fin = lib(tok.mean_rec(&clips))?;
    let cur_after = cur(&lib(tok.usage(&clips))?, &[1])[0];
    let detail = format!(
        "L_rec {initial:.4} -> {fin:.4} ({:.1}% drop), CUR@1 {cur_before:.4} -> {cur_after:.4}",
        100.0 * (1.0 - fin / initial)
    );
    check(history.len() == 200, || format!("{} steps recorded", history.len()))?;
    check(fin <= 0.5 * initial, || detail.clone())?;
    check(cur_after > cur_before, || detail.clone())?;
    // Loss smoothed over consecutive 20-step blocks must never rise.
    let blocks: Vec<f64> = history.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let rising = blocks.windows(2).position(|w| w[1] > w[0]);
    check(rising.is_none(), || format!("smoothed loss rises after block {rising:?}: {blocks:?}"))?;
    Ok(format!("{detail}, smoothed loss non-increasing"))
}

/// `2^d` sign vectors have zero mean and covariance `2^d / (2^d - 1) I`.
fn sign_cube(d: usize, scale: f64, shift: f64) -> Features {
    let rows = 1usize << d;
    let unit = ((rows - 1) as f64 / rows as f64).sqrt();
    let data = (0..rows)
        .flat_map(|r| (0..d).map(move |j| if r >> j & 1 == 1 { 1.0 } else { -1.0 }))
        .map(|s| shift + scale * unit * s)
        .collect();
    Features::new(rows, d, data).expect("valid shape")
}

fn fid_correctness() -> Outcome {
    let mut rng = SeededRng::new(6);
    let a = lib(Features::new(128, 16, randn(&mut rng, 128 * 16)))?;
    let same = lib(fid(&a, &a))?;
    check(same < 1e-4, || format!("fid(a, a) = {same:e}"))?;

    // N(0, I) against N(1, 4I) in 4 dims: |dmu|^2 = 4, trace term 4 (1 + 4 - 2*2) = 4.
    let closed = 8.0;
    let eye = |v: f64| (0..16).map(|i| if i % 5 == 0 { v } else { 0.0 }).collect::<Vec<f64>>();
    let from_stats = lib(fid_from_stats(
        &GaussianStats { dim: 4, mean: vec![0.0; 4], cov: eye(1.0) },
        &GaussianStats { dim: 4, mean: vec![1.0; 4], cov: eye(4.0) },
    ))?;
    let from_samples = lib(fid(&sign_cube(4, 1.0, 0.0), &sign_cube(4, 2.0, 1.0)))?;
    for v in [from_stats, from_samples] {
        check((v - closed).abs() <= 0.05, || format!("diagonal fixture gives {v}, closed form {closed}"))?;
    }

    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 2 + case % 31;
        let g = randn(&mut rng, n * n);
        let spd: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum::<f64>() + if i == j { 1e-3 } else { 0.0 }
            })
            .collect();
        let rec = lib(jacobi_eigen(&spd, n))?.reconstruct();
        let num: f64 = rec.iter().zip(&spd).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = spd.iter().map(|y| y * y).sum();
        worst = worst.max((num / den).sqrt());
    }
    check(worst < 1e-6, || format!("eigen reconstruction rel error {worst:e}"))?;
    Ok(format!(
        "fid(a, a) = {same:.1e}, fixture {from_stats:.6} / {from_samples:.6}, eigen rel error {worst:.1e} on 100 SPD"
    ))
}

fn retrieval_toy_run() -> Outcome {
    let (train, val) = lib(toy_corpus(&ToyCorpusSpec::default()))?;
    let opts = RetrievalTrainOptions::default();
    let sched = StepLr::standard(opts.lr);
    check(sched.lr_at(5) == opts.lr * 0.33 && sched.lr_at(4) == opts.lr, || {
        format!("lr at epochs 4/5: {} / {}", sched.lr_at(4), sched.lr_at(5))
    })?;
    let mut enc = lib(DualEncoder::<f32>::new(RetrievalConfig::toy(train.music_dim, train.dance_dim), 0))?;
    let log = lib(train_retrieval(&mut enc, &train, &opts))?;
    check(log.len() > 5 && log[5].lr == log[0].lr * 0.33, || {
        format!("epoch 5 trained at lr {:?}", log.get(5).map(|l| l.lr))
    })?;
    let report = lib(retrieval_report(&enc, &val))?;
    let threshold = 3.0 * report.null_r_at_5;
    check(report.gallery == 256, || format!("gallery of {}", report.gallery))?;
    check(report.r_at_5 > threshold, || format!("R@5 {:.4} <= {threshold:.4}", report.r_at_5))?;
    Ok(format!(
        "R@5 {:.4} > {threshold:.4} (null {:.4}, gallery {}), lr at epoch 5 = 0.33 x {}",
        report.r_at_5, report.null_r_at_5, report.gallery, opts.lr
    ))
}

fn generation() -> Outcome {
    let model = lib(HybridModel::<f32>::new(HybridConfig::small(), 0))?;
    let dim = model.cfg.music_dim;
    let mut rng = SeededRng::new(8);
    let music: Vec<f32> = (0..90 * dim).map(|_| rng.normal() as f32).collect();
    let short = &music[..45 * dim];
    let base = lib(model.generate(short, Some(3), Sampling::Argmax))?;
    let again = lib(model.generate(short, Some(3), Sampling::Argmax))?;
    check(base == again, || "argmax generation differs between runs".into())?;
    check(base.upper.len() == 45, || format!("{} steps generated for 45", base.upper.len()))?;

    let mut probes = Vec::new();
    for _ in 0..5 {
        let t = 1 + rng.below(44) as usize;
        let mut m = short.to_vec();
        for v in &mut m[t * dim..(t + 1) * dim] {
            *v += 3.0 * rng.normal() as f32;
        }
        let out = lib(model.generate(&m, Some(3), Sampling::Argmax))?;
        check(out.upper[..t] == base.upper[..t] && out.lower[..t] == base.lower[..t], || {
            format!("perturbing music at {t} changed earlier tokens")
        })?;
        probes.push(t);
    }

    let long = lib(model.generate(&music, Some(3), Sampling::Argmax))?;
    check(long.upper.len() == 90, || format!("{} steps generated for 90", long.upper.len()))?;
    check(long.upper[..45] == base.upper[..] && long.lower[..45] == base.lower[..], || {
        "T'=90 and T'=45 runs disagree on the first 45 positions".into()
    })?;
    Ok(format!("bit-reproducible, causal at positions {probes:?}, 90-step prefix matches 45-step run"))
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_chorekit"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| format!("spawning chorekit: {e}"))?;
    let status = out.status.code();
    check(status == Some(0), || {
        format!("`chorekit {}` exited {status:?}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim())
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_report(path: &Path) -> Result<serde_json::Map<String, Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        other => Err(format!("{} is not a JSON object: {other:?}", path.display())),
    }
}

fn valid_report(report: &serde_json::Map<String, Value>) -> Result<(), String> {
    for key in REPORT_KEYS {
        let value = report.get(key).ok_or_else(|| format!("report lacks `{key}`"))?;
        check(value.as_f64().is_some_and(f64::is_finite), || format!("`{key}` = {value} is not a finite number"))?;
    }
    let extra: Vec<&String> = report.keys().filter(|k| !REPORT_KEYS.contains(&k.as_str())).collect();
    check(extra.is_empty(), || format!("unknown report keys {extra:?}"))?;
    let median = report["median_rank"].as_f64().unwrap_or(0.0);
    let r5 = report["r_at_5"].as_f64().unwrap_or(-1.0);
    check(median >= 1.0 && (0.0..=1.0).contains(&r5), || format!("median rank {median}, R@5 {r5}"))
}

fn pipeline() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    cli(dir, &["gen-data", "--out", "data", "--clips", "8", "--seed", "0"])?;
    cli(dir, &["tokenize", "--motion", "data/motion.mtdb", "--out", "tokens.mtdb"])?;
    cli(dir, &["reconstruct", "--tokens", "tokens.mtdb", "--motion", "data/motion.mtdb", "--out", "recon.mtdb"])?;
    cli(dir, &["generate", "--music", "data/music.mtdb", "--out", "gen_tokens.mtdb"])?;
    cli(dir, &["reconstruct", "--tokens", "gen_tokens.mtdb", "--out", "gen_motion.mtdb"])?;
    cli(
        dir,
        &[
            "evaluate",
            "--gen",
            "gen_motion.mtdb",
            "--gt",
            "data/motion.mtdb",
            "--music",
            "data/music.mtdb",
            "--out",
            "report.json",
        ],
    )?;
    valid_report(&read_report(&dir.join("report.json"))?)?;

    cli(
        dir,
        &["evaluate", "--gen", "recon.mtdb", "--gt", "recon.mtdb", "--music", "data/music.mtdb", "--out", "self.json"],
    )?;
    let same = read_report(&dir.join("self.json"))?;
    valid_report(&same)?;
    let (fid, m_dist) = (same["fid"].as_f64().unwrap_or(f64::NAN), same["m_dist"].as_f64().unwrap_or(f64::NAN));
    check(fid < 1e-4 && m_dist == 0.0, || format!("gen == gt gives fid {fid:e}, m_dist {m_dist:e}"))?;
    for m in ["data/manifest.json", "tokens.mtdb.manifest.json", "report.json.manifest.json"] {
        check(dir.join(m).is_file(), || format!("missing run manifest {m}"))?;
    }
    Ok(format!("6 commands exit 0, report schema valid, gen == gt gives fid {fid:.1e}, m_dist {m_dist}"))
}

type Criterion = (usize, &'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "FSQ structure", 1, fsq_structure),
        (2, "scan oracle", 10, scan_oracle),
        (3, "SWA mask", 1, swa_mask),
        (4, "gradient checks", 60, gradient_checks),
        (5, "toy tokenizer training", 600, tokenizer_training),
        (6, "FID correctness", 30, fid_correctness),
        (7, "retrieval toy run", 600, retrieval_toy_run),
        (8, "generation determinism and causality", 60, generation),
        (9, "end-to-end pipeline", 120, pipeline),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            check(took <= Duration::from_secs(budget), || {
                format!("{msg}; took {:.1}s over the {budget}s budget", took.as_secs_f64())
            })
            .map(|_| msg)
        });
        match outcome {
            Ok(msg) => println!("PASS criterion {n} ({name}): {msg} [{:.2}s]", took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {msg} [{:.2}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
