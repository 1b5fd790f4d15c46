use anyhow::{ensure, Result};
use rayon::prelude::*;

use kinflow_core::frechet::loglog_slope;
use kinflow_core::quasi_invariance::{
    backward_point, generator_b_check, ibp_check, Density, Ensemble, OrbitControl,
};
use kinflow_core::spectral::{ConstantFn, Domain, SpectralBasis};

use crate::config::{EnsembleBlock, IbpBlock, SpectralBlock};
use crate::report::{fmt_f64, row, Check, Report};

pub struct FlowSetup {
    basis: SpectralBasis,
    c0: Vec<f64>,
    block: SpectralBlock,
}

impl FlowSetup {
    pub fn new(b: &SpectralBlock) -> Result<Self> {
        b.validate()?;
        let basis = SpectralBasis::with_eval_points(b.domain, b.j, b.eval_points)?;
        let mut c = basis.ground_state();
        for (k, a) in b.amplitudes.iter().enumerate() {
            c[k + 1] += a;
        }
        let c0 = basis.normalize(&c)?;
        let min = basis.min_density(&c0);
        ensure!(min >= -1e-9, "initial density is negative somewhere (min {min})");
        Ok(Self {
            basis,
            c0,
            block: b.clone(),
        })
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flow(s: &FlowSetup, report: &mut Report) -> Result<()> {
    let (b, c) = (&s.basis, &s.c0);
    let j = b.len();

    let mut rows = Vec::with_capacity(s.block.n_times + 1);
    for k in 0..=s.block.n_times {
        let t = s.block.t_max * k as f64 / s.block.n_times as f64;
        let ct = b.flow(c, t)?;
        let (z, zp) = b.z_and_zprime(c, t)?;
        let mut line = vec![t];
        line.extend(ct);
        line.extend([z, zp]);
        rows.push(row(&line));
    }
    let mut header = vec!["t".to_string()];
    header.extend((1..=j).map(|i| format!("c_{i}")));
    header.extend(["z".to_string(), "z_prime".to_string()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    report.csv("trajectory.csv", &header, &rows)?;

    let mut semi = 0.0f64;
    for (u, v) in [(0.3, 0.7), (1.0, 0.5), (0.1, 2.0)] {
        semi = semi.max(max_diff(&b.flow(&b.flow(c, u)?, v)?, &b.flow(c, u + v)?));
    }
    report.check(Check::at_most("semigroup", "flow(flow(c, s), t) = flow(c, s + t)", semi, 1e-12));

    let mut back = 0.0f64;
    for t in [0.2, 0.5, 1.0] {
        back = back.max(max_diff(&b.flow(&b.flow(c, t)?, -t)?, c));
    }
    report.check(Check::at_most(
        "backward_inverse",
        "the backward flow inverts the forward flow",
        back,
        1e-12,
    ));

    let g = b.ground_state();
    let mut ground = 0.0f64;
    for t in [-1.0, 0.3, 2.0] {
        ground = ground.max(max_diff(&b.flow(&g, t)?, &g));
    }
    ground = ground.max(b.generator(&g)?.iter().fold(0.0, |m, a| m.max(a.abs())));
    report.check(Check::at_most(
        "ground_state",
        "the normalised ground state is stationary",
        ground,
        1e-15,
    ));

    let a = b.generator(c)?;
    let gen_mass = b.total_mass(&a).abs();
    report.check(Check::at_most(
        "generator_mass",
        "the generator preserves total mass",
        gen_mass,
        1e-13,
    ));

    let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let errs: Vec<f64> = eps
        .iter()
        .map(|&e| Ok(max_diff(&b.flow(c, e)?.iter().zip(c).map(|(f, c)| (f - c) / e).collect::<Vec<_>>(), &a)))
        .collect::<Result<_>>()?;
    let slope = loglog_slope(&eps, &errs);
    report.metric("generator_fd_slope", slope)?;
    report.check(Check::holds(
        "generator_fd",
        "difference quotients of the flow converge to the generator at first order",
        (slope - 1.0).abs() <= 0.1,
        slope,
        1.0,
    ));

    if c[1] == 0.0 {
        report.warn("second mode coefficient is zero; decay rate check skipped");
        return Ok(());
    }
    let ts: Vec<f64> = (0..=40).map(|k| 1.0 + k as f64 * 0.1).collect();
    let ld: Vec<f64> = ts
        .iter()
        .map(|&t| Ok(b.flow(c, t)?[1..].iter().map(|x| x.abs()).sum::<f64>().ln()))
        .collect::<Result<_>>()?;
    let n = ts.len() as f64;
    let mt = ts.iter().sum::<f64>() / n;
    let ml = ld.iter().sum::<f64>() / n;
    let rate = ts.iter().zip(&ld).map(|(t, l)| (t - mt) * (l - ml)).sum::<f64>()
        / ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>();
    let expect = b.modes()[1].lambda - b.modes()[0].lambda;
    report.metric("decay_rate", rate)?;
    report.metric("decay_rate_expected", expect)?;
    report.check(Check::at_most(
        "decay_rate",
        "distance to the ground state decays at the spectral gap rate",
        (rate / expect - 1.0).abs(),
        0.05,
    ));
    Ok(())
}

pub struct EnsembleSetup {
    ens: Ensemble,
    ctl: OrbitControl,
    block: EnsembleBlock,
}

impl EnsembleSetup {
    pub fn new(b: &EnsembleBlock) -> Result<Self> {
        b.validate()?;
        let basis = SpectralBasis::with_eval_points(Domain::default(), b.j, b.eval_points)?;
        let ens = Ensemble::new(basis, b.widths.clone())?;
        let ctl = OrbitControl {
            h_max: b.h_max,
            tol: b.tol,
            ..Default::default()
        };
        Ok(Self {
            ens,
            ctl,
            block: b.clone(),
        })
    }

    fn record(&self, report: &mut Report) -> Result<()> {
        report.metric("widths", self.ens.density().widths())?;
        report.metric("dim", self.ens.dim())?;
        Ok(())
    }
}

pub fn quasi_invariance(s: &EnsembleSetup, seed: u64, report: &mut Report) -> Result<()> {
    let (e, b, ctl) = (&s.ens, &s.block, &s.ctl);
    s.record(report)?;
    let ys = e.sample_scaled(4 * b.points, seed, b.shrink)?;
    let mut picked = Vec::with_capacity(b.points);
    for y in &ys {
        if picked.len() == b.points {
            break;
        }
        let t = b.t_max * (picked.len() as f64 + 0.5) / b.points as f64;
        let x = e.drift().flow(y, t)?;
        if e.density().contains(&x) {
            picked.push((x, t));
        }
    }
    let vals: Vec<(f64, f64)> = picked
        .par_iter()
        .map(|(x, t)| Ok((e.rn_jacobian(x, *t, ctl)?, e.rn_formula(x, *t, ctl)?)))
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    let mut least = f64::INFINITY;
    let mut rows = Vec::with_capacity(vals.len());
    for (id, ((_, t), (a, f))) in picked.iter().zip(&vals).enumerate() {
        let rel = (a - f).abs() / f.abs();
        worst = worst.max(rel);
        least = least.min(a.min(*f));
        rows.push(vec![id.to_string(), fmt_f64(*t), fmt_f64(*a), fmt_f64(*f), fmt_f64(rel)]);
    }
    report.csv("rn.csv", &["x_id", "t", "rn_jacobian", "rn_formula", "rel_err"], &rows)?;
    report.check(Check::at_least(
        "coverage",
        "enough sampled points stay in the support",
        picked.len() as f64,
        b.points as f64,
    ));
    report.check(Check::at_most(
        "rn_agreement",
        "Jacobian and divergence routes to the density ratio agree",
        worst,
        1e-5,
    ));
    report.check(Check::holds(
        "rn_positive",
        "both density ratios are strictly positive",
        least > 0.0,
        least,
        0.0,
    ));

    let (s1, s2) = (0.2 * b.t_max, 0.3 * b.t_max);
    let ys = e.sample_scaled(b.composition_points, seed.wrapping_add(1), 0.5 * b.shrink)?;
    let mut rows = Vec::new();
    let mut comp = 0.0f64;
    for (id, y) in ys.iter().enumerate() {
        let x = e.drift().flow(y, s1 + s2)?;
        if !e.density().contains(&x) {
            continue;
        }
        let whole = e.rn_jacobian(&x, s1 + s2, ctl)?;
        let mid = backward_point(&x, s2, e.drift(), e.density(), ctl)?;
        let parts = e.rn_jacobian(&x, s2, ctl)? * e.rn_jacobian(&mid, s1, ctl)?;
        let res = (whole - parts).abs() / whole;
        comp = comp.max(res);
        rows.push(vec![id.to_string(), fmt_f64(s1), fmt_f64(s2), fmt_f64(whole), fmt_f64(parts), fmt_f64(res)]);
    }
    report.check(Check::at_least(
        "composition_coverage",
        "composition points stay in the support",
        rows.len() as f64,
        1.0,
    ));
    report.csv("composition.csv", &["x_id", "s", "t", "whole", "parts", "residual"], &rows)?;
    report.check(Check::at_most(
        "rn_composition",
        "density ratios compose along the flow",
        comp,
        1e-7,
    ));
    Ok(())
}

pub fn ibp(s: &EnsembleSetup, cfg: &IbpBlock, seed: u64, report: &mut Report) -> Result<()> {
    let e = &s.ens;
    s.record(report)?;
    let samples = e.sample(cfg.samples, seed)?;
    let ground = e.chart().basepoint().to_vec();
    let k = cfg.k_sigma;
    let sigmas = |diff: f64, se: f64| if diff == 0.0 { 0.0 } else { diff / se };

    let one = ConstantFn(1.0);
    let d = ibp_check(&one, &one, e, &samples)?;
    let mut rows = vec![vec!["delta_mean".to_string(), fmt_f64(d.lhs), fmt_f64(d.rhs), fmt_f64(d.stderr)]];
    report.check(Check::at_most(
        "delta_mean",
        "the divergence has zero mean under the reference measure",
        sigmas(d.rhs.abs(), d.stderr),
        k,
    ));
    for (id, (fs, gs)) in cfg.pairs.iter().enumerate() {
        let (f, g) = (fs.build(&ground), gs.build(&ground));
        let r = ibp_check(f.as_ref(), g.as_ref(), e, &samples)?;
        rows.push(vec![(id + 1).to_string(), fmt_f64(r.lhs), fmt_f64(r.rhs), fmt_f64(r.stderr)]);
        report.check(Check::at_most(
            &format!("ibp_pair_{}", id + 1),
            "integration by parts against the reference measure",
            sigmas((r.lhs - r.rhs).abs(), r.stderr),
            k,
        ));
    }
    report.csv("ibp.csv", &["test_id", "lhs", "rhs", "stderr"], &rows)?;

    let f = cfg.generator_fn.build(&ground);
    let gc = generator_b_check(f.as_ref(), e, &samples, &cfg.t_list)?;
    let rows: Vec<Vec<String>> = gc.slopes.iter().map(|&(t, v)| row(&[t, v])).collect();
    report.csv("generator.csv", &["t", "slope"], &rows)?;
    report.metric("generator_check", &gc)?;
    report.check(Check::at_most(
        "generator_derivative",
        "time derivative of the flowed expectation matches minus the divergence pairing",
        (gc.extrapolated - gc.target).abs(),
        k * gc.stderr + gc.bias,
    ));
    Ok(())
}
