//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lclab::harness::{by_label, fit_slope, kl_divergence, sweep_csv, SweepRecord};
use lclab::model::{forward, gen_toy_model, ForwardOptions, ModelConfig, TensorRole, TokenSequence};
use lclab::noise::{fit_linear, simulate, Interpretation, NoiseSimConfig, NoiseTarget, VectorDist};
use lclab::prune::{prune_magnitude, prune_random, prune_wanda, Granularity};
use lclab::quant::{
    quantize_group, quantize_mixed, quantize_weights, select_salient_groups, GroupLayout, QuantSpec, SaliencyMetric,
};
use lclab::report::{run_experiment, slope_csv, slope_table, slope_text, sweep_chart, ExperimentConfig, ReportInput};
use lclab::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn criterion_1() -> Outcome {
    let cfg = NoiseSimConfig {
        t_max: 1024,
        sigma: 0.1,
        d_k: 1,
        trials: 10_000,
        interpretation: Interpretation::PerTerm,
        vector_dist: VectorDist::StandardScaled,
        noise_target: NoiseTarget::KeysAndValues,
        eval_points: None,
        seed: 1,
    };
    let start = Instant::now();
    let curve = single_threaded(|| simulate(&cfg)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let fit = fit_linear(&curve).ok_or("no fit")?;
    let rel = (fit.slope - 0.01).abs() / 0.01;
    let detail = format!("slope {:.6} (rel err {:.2}%), r2 {:.5}, {:.1?}", fit.slope, rel * 100.0, fit.r2, elapsed);
    ensure(rel <= 0.05, || format!("slope off: {detail}"))?;
    ensure(fit.r2 >= 0.99, || format!("r2 too low: {detail}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let points = vec![10, 100, 1000];
    let cfg = NoiseSimConfig {
        t_max: 1000,
        sigma: 0.1,
        d_k: 1,
        trials: 10_000,
        interpretation: Interpretation::FullAttention,
        vector_dist: VectorDist::UniformAttention,
        noise_target: NoiseTarget::ValuesOnly,
        eval_points: Some(points.clone()),
        seed: 2,
    };
    let full = simulate(&cfg).map_err(|e| e.to_string())?;
    let per_term = simulate(&NoiseSimConfig {
        interpretation: Interpretation::PerTerm,
        ..cfg
    })
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for i in 0..points.len() {
        let t = points[i] as f64;
        let expect = 0.01 / t;
        let (v, ci) = (full.variance[i], full.ci_halfwidth[i]);
        ensure((v - expect).abs() <= 3.0 * ci, || {
            format!("t={t}: variance {v:.4e} vs sigma^2/t {expect:.4e} (ci {ci:.2e})")
        })?;
        parts.push(format!("t={t}: {v:.3e} vs {expect:.3e} (per_term {:.3e})", per_term.variance[i]));
    }
    ensure(per_term.variance[2] > 100.0 * full.variance[2], || "readings did not diverge".into())?;
    Ok(parts.join("; "))
}

fn random_dist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let p = random_dist(&mut rng, n);
        let q = random_dist(&mut rng, n);
        let mut oracle = 0.0;
        for i in 0..n {
            oracle += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
        let ours = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        worst = worst.max((ours - oracle).abs());
        ensure(kl_divergence(&p, &p).unwrap() == 0.0, || "KL(p,p) != 0".into())?;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let a = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    let b = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    ensure((a - 0.14384).abs() <= 1e-4 && (b - 0.69315).abs() <= 1e-4, || format!("hand values {a} {b}"))?;
    Ok(format!("max |ours - brute force| {worst:.1e}; hand values {a:.5} {b:.5}"))
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, range: f32) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-range..range)).collect()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = Xoshiro256StarStar::seed_from_u64(4);
    for bits in [3u8, 4, 8] {
        let w = random_matrix(&mut rng, 1000, 1000, 2.0);
        let spec = QuantSpec::weight_only(bits);
        let deq = quantize_weights(&w, &spec).map_err(|e| e.to_string())?;
        let layout = GroupLayout::new(&w, spec.group_size).unwrap();
        for g in 0..layout.n_groups() {
            let r = layout.range(g);
            let scale = quantize_group(&w.data()[r.clone()], bits).unwrap().scale;
            let max_abs = w.data()[r.clone()].iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let slack = f64::from(max_abs) * f64::from(f32::EPSILON);
            for i in r {
                let err = (f64::from(w.data()[i]) - f64::from(deq.data()[i])).abs();
                ensure(err <= scale / 2.0 + slack, || format!("{bits}-bit element {i}: err {err} > scale/2 {}", scale / 2.0))?;
            }
        }
        ensure(quantize_weights(&deq, &spec).unwrap().bit_eq(&deq), || format!("{bits}-bit not idempotent"))?;
    }
    let mut groups = 0;
    for _ in 0..100 {
        let w = random_matrix(&mut rng, 16, 256, 1.0);
        let layout = GroupLayout::new(&w, 128).unwrap();
        let deq: Vec<Tensor> = [3u8, 4, 8]
            .iter()
            .map(|&b| quantize_weights(&w, &QuantSpec::weight_only(b)).unwrap())
            .collect();
        for g in 0..layout.n_groups() {
            let r = layout.range(g);
            let e: Vec<f64> = deq
                .iter()
                .map(|d| {
                    r.clone()
                        .map(|i| f64::from(w.data()[i] - d.data()[i]).powi(2))
                        .sum::<f64>()
                })
                .collect();
            ensure(e[2] <= e[1] && e[1] <= e[0], || format!("group {g}: mse 3/4/8-bit {e:?}"))?;
            groups += 1;
        }
    }
    let g = quantize_group(&[0.1, -0.4, 0.35, 0.2], 3).unwrap();
    ensure(g.q == [1, -3, 3, 2], || format!("hand example q = {:?}", g.q))?;
    ensure((g.scale - 0.4 / 3.0).abs() < 1e-7, || format!("hand example scale {}", g.scale))?;
    Ok(format!("3 x 10^6 values within scale/2, idempotent; {groups} groups monotone; hand q = {:?}", g.q))
}

fn zero_mask(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v == 0.0).collect()
}

fn criterion_5() -> Outcome {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    for case in 0..100 {
        let (rows, cols) = (rng.random_range(1..20), rng.random_range(2..80));
        let w = random_matrix(&mut rng, rows, cols, 3.0);
        let ratio = rng.random_range(0.0..0.95);
        let row_k = (ratio * cols as f64 + 1e-9).floor() as usize;
        let all_k = (ratio * (rows * cols) as f64 + 1e-9).floor() as usize;
        let per_row = prune_magnitude(&w, ratio, Granularity::PerRow).unwrap();
        for r in 0..rows {
            let z = per_row.row(r).iter().filter(|&&v| v == 0.0).count();
            ensure(z == row_k, || format!("case {case}: row {r} has {z} zeros, want {row_k}"))?;
        }
        let per_layer = prune_magnitude(&w, ratio, Granularity::PerLayer).unwrap();
        let z = zero_mask(&per_layer).iter().filter(|&&z| z).count();
        ensure(z == all_k, || format!("case {case}: layer has {z} zeros, want {all_k}"))?;
        for c in [0.5f32, 3.0, 1e3] {
            let s = w.scale(c);
            ensure(
                zero_mask(&prune_magnitude(&s, ratio, Granularity::PerRow).unwrap()) == zero_mask(&per_row)
                    && zero_mask(&prune_magnitude(&s, ratio, Granularity::PerLayer).unwrap()) == zero_mask(&per_layer),
                || format!("case {case}: mask changed under scaling by {c}"),
            )?;
        }
        let ones = vec![1.0f32; cols];
        ensure(zero_mask(&prune_wanda(&w, &ones, ratio).unwrap()) == zero_mask(&per_row), || {
            format!("case {case}: wanda with unit norms differs from magnitude per_row")
        })?;
        let seed = rng.random();
        let a = prune_random(&w, ratio, seed).unwrap();
        ensure(a.bit_eq(&prune_random(&w, ratio, seed).unwrap()), || "random prune not deterministic".into())?;
        let z = zero_mask(&a).iter().filter(|&&z| z).count();
        ensure(z == all_k, || format!("case {case}: random prune zeroed {z}, want {all_k}"))?;
    }
    Ok("100 random matrices: exact counts, scale-invariant masks, wanda(unit) == magnitude per_row, seeded random".into())
}

fn criterion_6() -> Outcome {
    let mut rng = Xoshiro256StarStar::seed_from_u64(6);
    for case in 0..50 {
        let heads = rng.random_range(1..4);
        let cfg = ModelConfig {
            n_layers: rng.random_range(1..4),
            d_model: heads * 8,
            n_heads: heads,
            d_head: 8,
            d_ff: rng.random_range(4..40),
            vocab_size: 64,
            rope_theta: 10000.0,
            max_context: 128,
        };
        let ck = gen_toy_model(&cfg, rng.random());
        let len = rng.random_range(2..128);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..64)).collect();
        let full = forward(&ck, &TokenSequence::new(ids.clone(), 64).unwrap(), ForwardOptions::default())
            .map_err(|e| e.to_string())?;
        let cut = rng.random_range(1..=len);
        let part = forward(&ck, &TokenSequence::new(ids[..cut].to_vec(), 64).unwrap(), ForwardOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(part.bit_eq(&full.head_rows(cut).unwrap()), || format!("case {case}: prefix {cut}/{len} differs"))?;
    }

    let mut cfg = ExperimentConfig::load(configs_dir().join("study.json")).map_err(|e| e.to_string())?;
    cfg.model = lclab::report::ModelSource::Generate {
        config: ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_head: 32,
            d_ff: 128,
            vocab_size: 256,
            rope_theta: 10000.0,
            max_context: 512,
        },
        seed: 42,
        options: Default::default(),
    };
    cfg.lengths = vec![32, 64, 128, 256];
    cfg.n_samples = 8;
    cfg.calibration.length = 128;
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).map(|r| sweep_csv(&r)))
            .map_err(|e| e.to_string())
    };
    let (one, eight) = (run(1)?, run(8)?);
    ensure(one == eight, || "sweep CSV differs between 1 and 8 threads".into())?;
    Ok(format!("50 prefix pairs bitwise equal; {}-byte sweep CSV identical at 1 and 8 threads", one.len()))
}

fn criterion_7() -> Outcome {
    let mut rng = Xoshiro256StarStar::seed_from_u64(7);
    for _ in 0..50 {
        let (rows, cols) = (rng.random_range(1..40), rng.random_range(1..600));
        let w = random_matrix(&mut rng, rows, cols, 1.0);
        let n = GroupLayout::new(&w, 128).unwrap().n_groups();
        let sel = select_salient_groups(&w, 128, 0.02, SaliencyMetric::MaxAbs).unwrap();
        let want = (0.02 * n as f64 - 1e-9).ceil() as usize;
        ensure(sel.len() == want, || format!("{n} groups: selected {}, want {want}", sel.len()))?;
    }
    let w = random_matrix(&mut rng, 64, 1000, 1.0);
    let spec = QuantSpec {
        salient_fraction: 0.02,
        ..QuantSpec::weight_only(3)
    };
    let mixed = quantize_mixed(&w, &spec).unwrap();
    let layout = GroupLayout::new(&w, 128).unwrap();
    let sel = select_salient_groups(&w, 128, 0.02, SaliencyMetric::MaxAbs).unwrap();
    let mut covered = BTreeSet::new();
    for g in 0..layout.n_groups() {
        let r = layout.range(g);
        let bits = if sel.contains(&g) { 8 } else { 3 };
        let expect = quantize_group(&w.data()[r.clone()], bits).unwrap().dequantize();
        ensure(mixed.data()[r.clone()] == expect[..], || format!("group {g} not at {bits} bits"))?;
        for i in r {
            ensure(covered.insert(i), || format!("element {i} in two groups"))?;
        }
    }
    ensure(covered.len() == w.numel(), || "groups do not cover the matrix".into())?;

    let uniform = QuantSpec::weight_only(3);
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let base = gen_toy_model(&ModelConfig::default(), seed);
        let (mut se_mixed, mut se_uniform) = (0.0f64, 0.0f64);
        for (name, t) in base.tensors() {
            if base.config().role_of(name) != Some(TensorRole::Projection) {
                continue;
            }
            let sq = |q: &Tensor| -> f64 { t.data().iter().zip(q.data()).map(|(a, b)| f64::from(a - b).powi(2)).sum() };
            se_mixed += sq(&quantize_mixed(t, &spec).unwrap());
            se_uniform += sq(&quantize_weights(t, &uniform).unwrap());
        }
        if se_mixed < se_uniform {
            wins += 1;
        }
        ratios.push(se_mixed / se_uniform);
    }
    ensure(wins >= 19, || format!("mixed beat uniform on only {wins}/20 seeds"))?;
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(format!(
        "ceil counts exact, partition holds; mixed < uniform 3-bit MSE on {wins}/20 seeds (mean ratio {mean_ratio:.3})"
    ))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn find<'a>(groups: &'a [(String, Vec<SweepRecord>)], label: &str) -> Result<&'a [SweepRecord], String> {
    groups
        .iter()
        .find(|(l, _)| l == label)
        .map(|(_, r)| r.as_slice())
        .ok_or_else(|| format!("no records for {label}"))
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::load(configs_dir().join("study.json")).map_err(|e| e.to_string())?;
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-study");
    cfg.output_dir = Some(out.clone());
    let start = Instant::now();
    let records = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let rows = slope_table(&[ReportInput::Sweep(records.clone())]);
    for (name, body) in [
        ("sweep.csv", sweep_csv(&records)),
        ("sweep.svg", sweep_chart(&records)),
        ("slopes.csv", slope_csv(&rows)),
    ] {
        std::fs::write(out.join(name), body).map_err(|e| e.to_string())?;
    }

    let groups = by_label(&records);
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("study took {elapsed:.1?}"))?;
    ensure(groups.len() == 8, || format!("{} methods swept", groups.len()))?;
    let identity = find(&groups, "identity")?;
    ensure(identity.iter().all(|r| r.kl_mean == 0.0), || "identity KL not zero".into())?;
    let (w3, w8) = (find(&groups, "w3")?, find(&groups, "w8")?);
    for (a, b) in w3.iter().zip(w8) {
        ensure(b.kl_mean <= a.kl_mean, || {
            format!("length {}: KL(8-bit) {} > KL(3-bit) {}", a.context_length, b.kl_mean, a.kl_mean)
        })?;
    }
    ensure(rows.len() == 8, || format!("slope table has {} rows", rows.len()))?;

    println!("\n{}", slope_text(&rows));
    let slope = |l: &str| find(&groups, l).ok().and_then(fit_slope).map(|f| f.slope).unwrap_or(f64::NAN);
    let quant = slope("w3").max(slope("w4"));
    let prune = slope("magnitude-50").max(slope("wanda-50"));
    println!("directional findings (recorded, not asserted):");
    println!(
        "  quantization slope > pruning slope: {} (max quant {quant:.3e}, max prune {prune:.3e})",
        quant > prune
    );
    println!(
        "  salient 8-bit groups flatten 3-bit slope: {} (w3 {:.3e}, w3-salient2pct-w8 {:.3e})",
        slope("w3-salient2pct-w8").abs() < slope("w3").abs(),
        slope("w3"),
        slope("w3-salient2pct-w8")
    );
    println!("  random-10 slope positive: {} ({:.3e})", slope("random-10") > 0.0, slope("random-10"));
    println!("  outputs in {}", out.display());
    Ok(format!("{} records in {elapsed:.1?}; identity 0, 8-bit <= 3-bit at every length", records.len()))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("theory linearity", criterion_1),
        ("forced-uniform full-attention control", criterion_2),
        ("KL oracle", criterion_3),
        ("quantizer suite", criterion_4),
        ("pruning suite", criterion_5),
        ("causality and determinism", criterion_6),
        ("salient-group remedy mechanics", criterion_7),
        ("qualitative trend run", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("PASS [{id}] {name} ({:.1?}): {detail}", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name} ({:.1?}): {detail}", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
