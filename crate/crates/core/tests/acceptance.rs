//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dfl::analysis::{
    averaging_mass, dfl_bound, dfl_bound_asymptotic, lr_feasible, monotonicity_report, BoundParams,
};
use dfl::compression::{
    choco_gamma, choco_rate, empirical_contraction, run_cdfl, run_choco_consensus, CdflConfig,
    CompressionOp, Gamma,
};
use dfl::engine::{
    gossip_step, order_equivalence_check, run_csgd, run_dfl, GlobalState, LrLaw, RunConfig,
    Schedule,
};
use dfl::harness::{
    compare, preset, run_experiment, Align, CompareMetric, ExperimentConfig, RunRecord,
};
use dfl::objective::{Batch, QuadraticProblem};
use dfl::topology::MixingMatrix;

type Outcome = Result<String, String>;
type Criterion<'a> = (u32, &'static str, u64, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn c1() -> Outcome {
    let mats = [
        ("ring(4)", MixingMatrix::ring(4)),
        ("ring(6)", MixingMatrix::ring(6)),
        ("ring(10)", MixingMatrix::ring(10)),
        ("quasi_ring(10)", MixingMatrix::quasi_ring(10)),
        ("complete(8)", MixingMatrix::complete(8)),
    ];
    let mut worst = 0.0f64;
    for (name, m) in mats {
        let m = m.map_err(e)?;
        let zeta = m.spectral().map_err(e)?.zeta;
        for j in 0..=10 {
            let gap = (m.power_gap_norm(j) - zeta.powi(j as i32)).abs();
            if gap > 1e-10 {
                return Err(format!("{name} j={j}: gap {gap:e}"));
            }
            worst = worst.max(gap);
        }
    }
    Ok(format!("max deviation {worst:e}"))
}

fn c2() -> Outcome {
    let z = MixingMatrix::ring(10)
        .map_err(e)?
        .spectral()
        .map_err(e)?
        .zeta;
    check(
        (0.872..=0.874).contains(&z),
        format!("zeta = {z:.6}"),
        format!("zeta = {z:.6}"),
    )
}

fn c3() -> Outcome {
    let c = MixingMatrix::ring(5).map_err(e)?;
    let mut state = GlobalState {
        x: DMatrix::identity(5, 5),
        t: 0,
    };
    let variance = |v: DVector<f64>| {
        let m = v.mean();
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let mut prev = variance(state.x.column(2).into_owned());
    for step in 1..=20 {
        gossip_step(&mut state, &c).map_err(e)?;
        let v = variance(state.x.column(2).into_owned());
        if v >= prev || v.is_nan() {
            return Err(format!(
                "variance did not decrease at step {step}: {v:e} >= {prev:e}"
            ));
        }
        prev = v;
    }
    check(
        prev <= 5e-6,
        format!("variance at step 20 = {prev:e}"),
        format!("variance at step 20 = {prev:e} > 5e-6"),
    )
}

fn c4() -> Outcome {
    let c = MixingMatrix::ring(10).map_err(e)?;
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = DMatrix::from_fn(d, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Gradient script indexed by (step, node) only.
    let script: Vec<DVector<f64>> = (0..100 * 10)
        .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let r = order_equivalence_check(&c, &x0, 100, 0.05, |t, i, _| {
        script[(t - 1) * 10 + i].clone()
    })
    .map_err(e)?;
    check(
        r.average <= 1e-12,
        format!("max |u_comm - u_comp| = {:e}", r.average),
        format!("max |u_comm - u_comp| = {:e}", r.average),
    )
}

fn quadratic(seed: u64, noise: f64, heterogeneity: f64) -> QuadraticProblem {
    QuadraticProblem {
        nodes: 10,
        dim: 8,
        samples_per_node: 50,
        cond: 4.0,
        heterogeneity,
        noise,
        reg: 0.0,
        seed,
    }
}

fn c5() -> Outcome {
    let obj = quadratic(3, 1.0, 1.0).build().map_err(e)?;
    let c = MixingMatrix::ring(10).map_err(e)?;
    let mut worst = 0.0f64;
    for tau in [1, 4, 8] {
        let total = 90;
        let run = RunConfig::new(LrLaw::Constant(0.02), Batch::Size(5), 11);
        let a = run_dfl(&obj, &c, &Schedule::new(tau, 1, total).map_err(e)?, &run).map_err(e)?;
        let b = run_csgd(&obj, &c, tau, total, &run).map_err(e)?;
        if a.metrics.rows.len() != b.metrics.rows.len() {
            return Err(format!("tau={tau}: different row counts"));
        }
        for (ra, rb) in a.metrics.rows.iter().zip(&b.metrics.rows) {
            worst = worst.max((ra.loss - rb.loss).abs());
        }
        worst = worst.max((&a.state.x - &b.state.x).amax());
    }
    check(
        worst <= 1e-12,
        format!("max deviation {worst:e}"),
        format!("max deviation {worst:e}"),
    )
}

fn c6() -> Outcome {
    let d = 32;
    let mut ops = Vec::new();
    for k in [1, 8, 32] {
        ops.push(CompressionOp::TopK(k));
        ops.push(CompressionOp::RandK(k));
    }
    ops.extend([CompressionOp::Gossip(0.6), CompressionOp::Gossip(0.8)]);
    ops.extend([
        CompressionOp::Qsgd(1),
        CompressionOp::Qsgd(4),
        CompressionOp::Qsgd(16),
    ]);
    let mut worst_margin = f64::NEG_INFINITY;
    for op in &ops {
        let report = empirical_contraction(op, d, 10_000, 6).map_err(e)?;
        for p in &report.probes {
            let margin = p.mean - (1.0 - report.delta) - 3.0 * p.stderr;
            if margin > 0.0 {
                return Err(format!(
                    "{op} on {}: mean {:e} > 1 - delta + 3se",
                    p.label, p.mean
                ));
            }
            worst_margin = worst_margin.max(margin);
        }
    }
    Ok(format!(
        "{} operators, worst margin {worst_margin:e}",
        ops.len()
    ))
}

fn c7() -> Outcome {
    let c = MixingMatrix::ring(10).map_err(e)?;
    let s = c.spectral().map_err(e)?;
    let op = CompressionOp::RandK(5);
    let delta = op.delta(10);
    let gamma = choco_gamma(s.rho, s.beta, delta).map_err(e)?;
    let p = choco_rate(s.rho, delta);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = DMatrix::from_fn(10, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
    for seed in 0..20 {
        let errs = run_choco_consensus(&c, x0.clone(), gamma, &op, 500, seed).map_err(e)?;
        for (t, w) in errs.windows(2).enumerate() {
            if w[1] > w[0] {
                return Err(format!("seed {seed}: e_t increased at t={}", t + 1));
            }
        }
        for (t, &et) in errs.iter().enumerate() {
            if et > (1.0 - p).powi(t as i32) * errs[0] {
                return Err(format!("seed {seed}: e_{t} = {et:e} above (1-p)^t e_0"));
            }
        }
    }
    Ok(format!(
        "gamma = {gamma:e}, p = {p:e}, 20 seeds x 500 steps"
    ))
}

fn run_preset(name: &str, root: &Path) -> Result<Vec<RunRecord>, String> {
    let mut base = ExperimentConfig::default();
    base.run.output = root.to_path_buf();
    preset(name, &base)
        .map_err(e)?
        .iter()
        .map(|c| run_experiment(c).map_err(e))
        .collect()
}

fn medians(records: &[RunRecord]) -> Vec<(String, f64)> {
    records
        .iter()
        .map(|r| {
            (
                r.label().to_string(),
                r.summary.median_final_loss - r.f_star,
            )
        })
        .collect()
}

fn fmt_pairs(v: &[(String, f64)]) -> String {
    v.iter()
        .map(|(l, x)| format!("{l}: {x:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn c8(root: &Path) -> Outcome {
    let recs = run_preset("fig6_ring", root)?;
    let m: Vec<(String, f64)> = medians(&recs)
        .into_iter()
        .filter(|(l, _)| ["tau2=1", "tau2=4", "tau2=8", "tau2=15"].contains(&l.as_str()))
        .collect();
    let mono = m.windows(2).all(|w| w[1].1 <= w[0].1);
    let margin = m[0].1 - m[3].1;
    check(mono && margin > 0.0, fmt_pairs(&m), fmt_pairs(&m))
}

fn c9(root: &Path) -> Outcome {
    let m = medians(&run_preset("fig7_tau1", root)?);
    let (tau1s, sync) = m.split_at(3);
    let mono = tau1s.windows(2).all(|w| w[1].1 >= w[0].1);
    let best = tau1s.iter().all(|(_, v)| sync[0].1 <= *v);
    check(mono && best, fmt_pairs(&m), fmt_pairs(&m))
}

fn c10(root: &Path) -> Outcome {
    let recs = run_preset("fig8_zeta", root)?;
    let mut m = Vec::new();
    for (r, (label, v)) in recs.iter().zip(medians(&recs)) {
        let spec = r.config.topology_spec().map_err(e)?;
        let z = spec.build().map_err(e)?.spectral().map_err(e)?.zeta;
        m.push((format!("{label} (zeta {z:.3})"), v));
    }
    let mono = m.windows(2).all(|w| w[1].1 >= w[0].1);
    check(mono, fmt_pairs(&m), fmt_pairs(&m))
}

fn c11() -> Outcome {
    let reference = BoundParams {
        eta: 0.01,
        l: 1.0,
        sigma_sq: 1.0,
        n: 10.0,
        tau1: 4.0,
        tau2: 4.0,
        zeta: 0.87,
        f_gap: 1.0,
        t: 1000.0,
        ..BoundParams::default()
    };
    let value = dfl_bound(&reference).total;
    if (value - 0.20199).abs() > 1e-4 {
        return Err(format!("bound {value} differs from 0.20199"));
    }
    let grid = monotonicity_report(
        &BoundParams {
            eta: 1e-4,
            ..reference
        },
        &[1.0, 2.0, 4.0, 8.0, 16.0],
        &[1.0, 2.0, 4.0, 8.0, 15.0],
        &[0.0, 0.5, 0.87, 0.99],
    );
    if grid.violations() != 0 {
        return Err(format!("{} sign violations", grid.violations()));
    }
    let c1 = BoundParams {
        tau1: 1.0,
        tau2: f64::INFINITY,
        ..reference
    };
    let sync = 2.0 * c1.f_gap / (c1.eta * c1.t) + c1.eta * c1.l * c1.sigma_sq / c1.n;
    let d1 = (dfl_bound(&c1).total - sync).abs();
    let d1_asym = (dfl_bound_asymptotic(&c1) - c1.eta * c1.l * c1.sigma_sq / c1.n).abs();
    let c2 = BoundParams {
        zeta: 0.0,
        ..reference
    };
    let el = c2.eta * c2.l;
    let d2 = (dfl_bound(&c2).local_drift - 2.0 * el * el * c2.sigma_sq * (c2.tau1 - 1.0)).abs();
    let worst = d1.max(d1_asym).max(d2);
    check(
        worst <= 1e-12,
        format!("bound {value:.5}, 0 violations, special-case deviation {worst:e}"),
        format!("special-case deviation {worst:e}"),
    )
}

fn c12() -> Outcome {
    let obj = quadratic(5, 0.0, 1.0).build().map_err(e)?;
    let c = MixingMatrix::ring(10).map_err(e)?;
    let s = c.spectral().map_err(e)?;
    let (w_star, f_star) = obj.minimum().map_err(e)?;
    let w0 = DVector::from_element(obj.dim(), 1.0);
    let var = obj
        .variance_estimates(
            &[w_star.clone(), w0.clone(), (&w0 + &w_star) * 0.5],
            Batch::Full,
        )
        .map_err(e)?;
    let (tau1, tau2, steps) = (4usize, 4usize, 400usize);
    let mut p = BoundParams {
        l: obj.smoothness(),
        mu: obj.strong_convexity(),
        sigma_sq: var.sigma_sq_global,
        sigma_bar_sq: var.sigma_bar_sq,
        g_sq: var.g_sq,
        zeta: s.zeta,
        beta: s.beta,
        delta: 1.0,
        eta: 0.0,
        tau1: tau1 as f64,
        tau2: tau2 as f64,
        n: 10.0,
        t: steps as f64,
        f_gap: obj.loss(&w0).map_err(e)? - f_star,
        a: 1.0,
        theta: None,
    };
    // Largest step size on a coarse grid that satisfies the condition.
    let eta = (1..=200)
        .map(|k| k as f64 * 1e-3)
        .filter(|&eta| lr_feasible(&BoundParams { eta, ..p }).unwrap_or(false))
        .fold(0.0, f64::max);
    if eta == 0.0 {
        return Err("no feasible step size on the grid".into());
    }
    p.eta = eta;
    let mut run = RunConfig::new(LrLaw::Constant(eta), Batch::Full, 1);
    run.init = Some(w0);
    let out = run_dfl(
        &obj,
        &c,
        &Schedule::new(tau1, tau2, steps).map_err(e)?,
        &run,
    )
    .map_err(e)?;
    let measured = out.metrics.running_grad_norm_sq();
    let bound = dfl_bound(&p).total;
    check(
        measured <= bound,
        format!("eta {eta}, measured {measured:e} <= bound {bound:e}"),
        format!("eta {eta}, measured {measured:e} > bound {bound:e}"),
    )
}

fn c13() -> Outcome {
    let c = MixingMatrix::ring(10).map_err(e)?;
    let mut errs = Vec::new();
    let mut kappa = 0.0;
    for rounds in [200usize, 400] {
        let mut total = 0.0;
        for seed in 1..=5u64 {
            let obj = quadratic(3, 1.0, 1.0).build().map_err(e)?;
            let (_, f_star) = obj.minimum().map_err(e)?;
            kappa = obj.smoothness() / obj.strong_convexity();
            let cfg = CdflConfig {
                schedule: Schedule::new(2, 2, rounds * 4).map_err(e)?,
                op: CompressionOp::TopK(4),
                gamma: Gamma::Fixed(0.5),
                trace: false,
            };
            let run = RunConfig::new(LrLaw::Prop2 { a: 16.0 * kappa }, Batch::Size(10), seed);
            let out = run_cdfl(&obj, &c, &cfg, &run).map_err(e)?;
            total += obj.loss(&out.w_avg).map_err(e)? - f_star;
        }
        errs.push(total / 5.0);
    }
    let ratio = errs[1] / errs[0];
    let a = 16.0 * kappa;
    let mass_ok = [200usize, 400]
        .iter()
        .all(|&k| averaging_mass(a, k) >= (k as f64).powi(3) / 3.0);
    check(
        ratio <= 0.75 && mass_ok,
        format!(
            "err(200) {:.3e}, err(400) {:.3e}, ratio {ratio:.3}, S_K >= K^3/3",
            errs[0], errs[1]
        ),
        format!("ratio {ratio:.3}, S_K check {mass_ok}"),
    )
}

fn c14(root: &Path) -> Outcome {
    let recs = run_preset("fig9_compression", root)?;
    let pair = [recs[0].clone(), recs[1].clone()];
    let (dfl, cdfl) = (&pair[0], &pair[1]);
    let budget = cdfl
        .metrics()
        .map_err(e)?
        .iter()
        .map(|m| m.total_bytes())
        .min()
        .unwrap_or(0);
    let by_bytes = compare(&pair, CompareMetric::Loss, Align::Bytes(budget)).map_err(e)?;
    let by_steps = compare(
        &pair,
        CompareMetric::Loss,
        Align::Step(dfl.config.algorithm.steps),
    )
    .map_err(e)?;
    let value = |rows: &[dfl::harness::CompareRow], label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .map_or(f64::NAN, |r| r.value)
    };
    let target = value(&by_bytes, cdfl.label());
    let dfl_at_budget = value(&by_bytes, dfl.label());
    let dfl_steps = value(&by_steps, dfl.label());
    let cdfl_steps = value(&by_steps, cdfl.label());
    let msg = format!(
        "budget {budget} B: cdfl {target:.6} vs dfl {dfl_at_budget:.6}; at T: dfl {dfl_steps:.6} vs cdfl {cdfl_steps:.6}"
    );
    check(
        target < dfl_at_budget && dfl_steps <= cdfl_steps,
        msg.clone(),
        msg,
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let r = root.path();
    let criteria: Vec<Criterion> = vec![
        (1, "power gap identity", 1, Box::new(c1)),
        (2, "ring(10) zeta", 1, Box::new(c2)),
        (3, "gossip consensus on ring(5)", 1, Box::new(c3)),
        (4, "order equivalence", 1, Box::new(c4)),
        (5, "DFL(tau,1) equals C-SGD", 5, Box::new(c5)),
        (6, "compression contraction", 30, Box::new(c6)),
        (7, "CHOCO-G linear consensus", 5, Box::new(c7)),
        (8, "tau2 ordering", 120, Box::new(move || c8(&r.join("c8")))),
        (9, "tau1 ordering", 120, Box::new(move || c9(&r.join("c9")))),
        (
            10,
            "zeta ordering",
            120,
            Box::new(move || c10(&r.join("c10"))),
        ),
        (11, "bound value and monotonicity", 1, Box::new(c11)),
        (12, "empirical dominance", 10, Box::new(c12)),
        (13, "C-DFL rate", 60, Box::new(c13)),
        (
            14,
            "byte efficiency",
            120,
            Box::new(move || c14(&r.join("c14"))),
        ),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in &criteria {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > Duration::from_secs(*limit) => Err(format!(
                "{msg}; took {:.2}s, limit {limit}s",
                elapsed.as_secs_f64()
            )),
            other => other,
        };
        match outcome {
            Ok(msg) => println!(
                "PASS criterion {id:>2} ({name}) [{:.2}s]: {msg}",
                elapsed.as_secs_f64()
            ),
            Err(msg) => {
                failed += 1;
                println!(
                    "FAIL criterion {id:>2} ({name}) [{:.2}s]: {msg}",
                    elapsed.as_secs_f64()
                )
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
