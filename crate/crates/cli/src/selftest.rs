//! Invariant suite: each group prints one PASS/FAIL line.

use std::time::Instant;

use chorekit::fsq::{index_to_levels, levels_to_index, FsqCodebook};
use chorekit::io::SeededRng;
use chorekit::nn::{op_gradient_suite, tokenizer_gradient_check};
use chorekit::oracle::naive_ssm_scan;
use chorekit::retrieval::{fid, fid_from_stats, jacobi_eigen, Features, GaussianStats};
use chorekit::seqgen::{build_swa_mask, discretize_diag, ssm_scan, SsmParams};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::manifest::Recorder;
use crate::Run;

/// Exit status when any group fails.
pub const FAILED: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fault {
    /// Flip one entry of the built SWA mask before it is checked.
    Mask,
}

#[derive(Debug, Args, Serialize)]
pub struct SelftestArgs {
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

type Check = Result<String, String>;
type Group = (&'static str, Box<dyn Fn() -> Check>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fsq_group() -> Check {
    let cb = FsqCodebook::new(vec![8, 5, 5, 5]).map_err(|e| e.to_string())?;
    ensure(cb.size() == 1000, || format!("codebook size {}", cb.size()))?;
    for i in 0..cb.size() {
        let levels = index_to_levels(i, &cb).map_err(|e| e.to_string())?;
        let back = levels_to_index(&levels, &cb).map_err(|e| e.to_string())?;
        ensure(back == i, || format!("index {i} -> {levels:?} -> {back}"))?;
    }
    Ok("1000 codes round-trip".into())
}

fn mask_group(fault: Option<Fault>) -> Check {
    let (s, r, len) = (30, 15, 128);
    let mut mask = build_swa_mask(len, s, r).map_err(|e| e.to_string())?;
    if fault == Some(Fault::Mask) {
        let allowed = mask.allows(64, 40);
        mask.set(64, 40, !allowed);
    }
    let start = |t: usize| if t < s { 0 } else { r * (t + 1 - s).div_ceil(r) };
    for t in 0..len {
        for k in 0..len {
            let want = k <= t && k >= start(t);
            ensure(mask.allows(t, k) == want, || {
                format!("entry ({t}, {k}) is {}, rule says {want}", mask.allows(t, k))
            })?;
            ensure(!mask.allows(t, k) || k <= t, || format!("key {k} after query {t}"))?;
        }
        if t >= s {
            let w = mask.width(t);
            ensure(w > r && w <= s, || format!("row {t} width {w} outside ({r}, {s}]"))?;
        }
    }
    Ok(format!("S={s} R={r} T={len} matches the window rule"))
}

fn scan_group() -> Check {
    let (a_bar, _) = discretize_diag(&[-1.0], &[1.0], std::f64::consts::LN_2).map_err(|e| e.to_string())?;
    ensure((a_bar[0] - 0.5).abs() < 1e-12, || format!("A-bar {} for a=-1, delta=ln 2", a_bar[0]))?;
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = SeededRng::new(case);
        let steps = 1 + rng.below(128) as usize;
        let n = 1 + rng.below(32) as usize;
        let randn = |rng: &mut SeededRng, k: usize| (0..k).map(|_| rng.normal()).collect::<Vec<f64>>();
        let a = (0..n).map(|_| -rng.uniform(0.01, 2.0)).collect();
        let b = randn(&mut rng, steps * n * 2);
        let c = randn(&mut rng, steps * 3 * n);
        let delta = (0..steps).map(|_| rng.uniform(0.001, 0.5)).collect();
        let p = SsmParams::new(a, b, c, delta, 2, 3).map_err(|e| e.to_string())?;
        let x = randn(&mut rng, steps * 2);
        let fast = ssm_scan(&p, &x).map_err(|e| e.to_string())?;
        let slow = naive_ssm_scan(&p, &x);
        worst = fast.iter().zip(&slow).map(|(u, v)| (u - v).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-5, || format!("scan differs from the recurrence by {worst:e}"))?;
    Ok(format!("20 cases, max abs diff {worst:.1e}"))
}

fn grad_group() -> Check {
    let mut worst = 0.0f64;
    for (name, report) in op_gradient_suite(0).map_err(|e| e.to_string())? {
        ensure(report.max_rel_error < 1e-4, || format!("op {name}: rel err {:e}", report.max_rel_error))?;
        worst = worst.max(report.max_rel_error);
    }
    let tok = tokenizer_gradient_check(0).map_err(|e| e.to_string())?;
    ensure(tok.max_rel_error < 1e-4 && tok.checked >= 64, || {
        format!("tokenizer loss: rel err {:e} over {} coords", tok.max_rel_error, tok.checked)
    })?;
    Ok(format!("ops max rel err {worst:.1e}, tokenizer {:.1e}", tok.max_rel_error))
}

fn fid_group() -> Check {
    let mut rng = SeededRng::new(0);
    let a = Features::new(64, 8, (0..512).map(|_| rng.normal()).collect()).map_err(|e| e.to_string())?;
    let same = fid(&a, &a).map_err(|e| e.to_string())?;
    ensure(same < 1e-4, || format!("fid(a, a) = {same:e}"))?;
    let diag = |v: f64| (0..16).map(|i| if i % 5 == 0 { v } else { 0.0 }).collect::<Vec<f64>>();
    let sa = GaussianStats { dim: 4, mean: vec![0.0; 4], cov: diag(1.0) };
    let sb = GaussianStats { dim: 4, mean: vec![1.0; 4], cov: diag(4.0) };
    let v = fid_from_stats(&sa, &sb).map_err(|e| e.to_string())?;
    ensure((v - 8.0).abs() < 0.05, || format!("diagonal fixture gives {v}, expected 8"))?;
    for n in [4, 16, 32] {
        let g: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let spd: Vec<f64> =
            (0..n * n).map(|ij| (0..n).map(|k| g[(ij / n) * n + k] * g[(ij % n) * n + k]).sum::<f64>()).collect();
        let rec = jacobi_eigen(&spd, n).map_err(|e| e.to_string())?.reconstruct();
        let err = rec.iter().zip(&spd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            / spd.iter().map(|y| y * y).sum::<f64>().sqrt();
        ensure(err < 1e-6, || format!("eigen reconstruction error {err:e} at n={n}"))?;
    }
    Ok(format!("fid(a, a) = {same:.1e}, diagonal fixture {v:.6}"))
}

pub fn selftest(run: &Run, a: SelftestArgs) -> anyhow::Result<u8> {
    let rec = Recorder::start();
    let groups: [Group; 5] = [
        ("fsq", Box::new(fsq_group)),
        ("masks", Box::new(move || mask_group(a.inject_fault))),
        ("scan", Box::new(scan_group)),
        ("gradients", Box::new(grad_group)),
        ("fid", Box::new(fid_group)),
    ];
    let mut results = Vec::new();
    for (name, f) in &groups {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("PASS {name}: {msg} ({secs:.2}s)"),
            Err(msg) => println!("FAIL {name}: {msg} ({secs:.2}s)"),
        }
        results.push(json!({ "group": name, "pass": outcome.is_ok(), "seconds": secs }));
    }
    let failed = results.iter().filter(|r| r["pass"] == false).count();
    rec.finish(run, &a, None, json!({ "groups": results }))?;
    Ok(if failed == 0 { 0 } else { FAILED })
}
