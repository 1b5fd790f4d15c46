use std::f64::consts::PI;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kinflow_core::boltzmann::{admissible_lambda, KineticModel, KineticParams, LambdaMode};
use kinflow_core::collision::CollisionKernel;
use kinflow_core::frechet::{fd_validate, flow_derivative, representer};
use kinflow_core::grid::{steps_for, DensityField, DensityPath, PhaseGrid};
use kinflow_core::knudsen::{BoundaryProfile, Knudsen};
use kinflow_core::Error;

use crate::config::{DerivativeBlock, ExperimentConfig, InitialData};
use crate::report::{fmt_f64, row, Check, Report};

pub struct Setup {
    model: KineticModel,
    p0: DensityField,
    params: KineticParams,
    mode: LambdaMode,
    p_min: f64,
    p_max: f64,
    mode_bound: f64,
    a_bound: f64,
}

fn initial_field(grid: &PhaseGrid, init: InitialData, seed: u64) -> Result<DensityField> {
    let f = match init {
        InitialData::Uniform => DensityField::constant(grid, 1.0),
        InitialData::Smooth { amplitude } => {
            let cfg = grid.config();
            let vmax = 1.0 + 0.3 * cfg.v_max;
            DensityField::from_fn(grid, |r, v| {
                1.0 + amplitude * (PI * r[0] / cfg.lx).cos() * (1.0 + 0.3 * v[1].abs()) / vmax
            })
        }
        InitialData::Random { amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = (0..grid.len())
                .map(|_| 1.0 + amplitude * rng.random_range(-1.0..1.0))
                .collect();
            DensityField::from_vec(grid, v)?
        }
    };
    let m = f.mass(grid)?;
    Ok(f.scaled(1.0 / m))
}

fn mode_name(m: LambdaMode) -> &'static str {
    match m {
        LambdaMode::A => "a",
        LambdaMode::B => "b",
        LambdaMode::D => "d",
    }
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, default_mode: LambdaMode) -> Result<Self> {
        let k = &cfg.kinetic;
        k.validate()?;
        let grid = PhaseGrid::new(cfg.grid)?;
        let kernel = CollisionKernel {
            gamma: k.gamma,
            b_scale: k.b_scale,
        };
        let profile = BoundaryProfile::uniform(&grid);
        let model = KineticModel::new(grid, &kernel, &profile, k.dt)?;
        let draft = KineticParams {
            lambda: k.lambda.unwrap_or(0.0),
            horizon: k.horizon,
            dt: k.dt,
            tol: k.tol,
            max_iter: k.max_iter,
        };
        draft.validate()?;
        let p0 = initial_field(model.grid(), k.initial, cfg.seed)?;
        let (p_min, p_max) = model.initial_bounds(&p0, k.horizon)?;
        let (b, h) = model.constants();
        let mode = k.lambda_mode.unwrap_or(default_mode);
        let mode_bound = admissible_lambda(mode, k.horizon, b, h, p_min, p_max)?;
        let a_bound = admissible_lambda(LambdaMode::A, k.horizon, b, h, 0.0, 0.0)?;
        let params = KineticParams {
            lambda: k.lambda.unwrap_or(mode_bound),
            ..draft
        };
        Ok(Self {
            model,
            p0,
            params,
            mode,
            p_min,
            p_max,
            mode_bound,
            a_bound,
        })
    }

    fn regime_violation(&self) -> bool {
        self.params.lambda > self.mode_bound
    }

    fn record_regime(&self, report: &mut Report) -> Result<()> {
        report.metric("lambda", self.params.lambda)?;
        report.metric("lambda_mode", mode_name(self.mode))?;
        report.metric("lambda_mode_bound", self.mode_bound)?;
        report.metric("lambda_mode_a_bound", self.a_bound)?;
        report.metric("p_min", self.p_min)?;
        report.metric("p_max", self.p_max)?;
        report.metric("regime_violation", self.regime_violation())?;
        if self.regime_violation() {
            report.warn(format!(
                "lambda = {} exceeds the admissible value {} of mode {}; contraction and bound certificates do not apply",
                self.params.lambda,
                self.mode_bound,
                mode_name(self.mode)
            ));
        }
        if self.mode != LambdaMode::A && self.params.lambda > self.a_bound {
            report.warn(format!(
                "lambda = {} exceeds the ball-invariance bound {}",
                self.params.lambda, self.a_bound
            ));
        }
        Ok(())
    }
}

fn phase_rows(grid: &PhaseGrid, cols: &[&DensityField]) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, r) in grid.centers().iter().enumerate() {
        for (vel, v) in grid.velocities().iter().enumerate() {
            let n = grid.node(cell, vel);
            let mut line = vec![r[0], r[1], v[0], v[1]];
            line.extend(cols.iter().map(|f| f.values()[n]));
            rows.push(row(&line));
        }
    }
    rows
}

pub fn solve(s: &Setup, report: &mut Report) -> Result<()> {
    let grid = s.model.grid();
    s.record_regime(report)?;
    let m0 = s.p0.mass(grid)?;
    let frozen = DensityPath::constant(s.model.lattice(s.params.horizon)?, &s.p0)?;
    let psi = s.model.psi(&s.p0, &frozen, &s.params)?;
    let mut drift = 0.0f64;
    for f in psi.fields() {
        drift = drift.max((f.mass(grid)? - m0).abs());
    }
    report.check(Check::at_most(
        "mild_form_mass",
        "mass of the mild-form map equals the initial mass at every lattice time",
        drift,
        1e-10,
    ));

    let sol = match s.model.picard(&s.p0, &s.params) {
        Ok(sol) => sol,
        Err(Error::Divergence { iteration, ratio }) => {
            report.warn(format!("Picard iteration diverged at step {iteration}"));
            report.check(Check::at_most(
                "picard_convergence",
                "Picard iterates converge to a fixed point of the mild form",
                ratio,
                1.0,
            ));
            return Ok(());
        }
        Err(Error::NoConvergence { residual, .. }) => {
            report.check(Check::at_most(
                "picard_convergence",
                "Picard iterates converge to a fixed point of the mild form",
                residual,
                s.params.tol,
            ));
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let r = &sol.report;
    report.metric("iterations", r.iterations)?;
    report.metric("max_ratio", r.max_ratio())?;
    report.metric("mass_drift", r.mass_drift)?;
    report.metric("min_value", r.min_value)?;
    report.metric("max_value", r.max_value)?;

    report.check(Check::at_most(
        "fixed_point_residual",
        "the solution is a fixed point of the mild form",
        r.fixed_point_residual,
        s.params.tol,
    ));
    report.check(Check::at_most(
        "mass_conservation",
        "solution mass equals the initial mass at all times",
        r.mass_drift,
        1e-9,
    ));
    if !s.regime_violation() {
        let limit = match s.mode {
            LambdaMode::D => 2.0 / 3.0 + 0.05,
            LambdaMode::A | LambdaMode::B => 1.0,
        };
        report.check(Check::at_most(
            "contraction",
            "successive Picard residuals contract",
            r.max_ratio(),
            limit,
        ));
        if s.mode != LambdaMode::A {
            let lo = 0.5 * s.p_min;
            let hi = s.p_max + 0.5 * s.p_min;
            let ok = r.within_bounds(s.p_min, s.p_max);
            report.metric("bound_lower", lo)?;
            report.metric("bound_upper", hi)?;
            report.check(Check::holds(
                "solution_bounds",
                "solution stays between half the free minimum and the free maximum plus that margin",
                ok,
                r.min_value,
                lo,
            ));
        }
    }

    let rows: Vec<Vec<String>> = r
        .residuals
        .iter()
        .enumerate()
        .map(|(k, &res)| {
            let ratio = if k == 0 { String::new() } else { fmt_f64(r.ratios[k - 1]) };
            vec![(k + 1).to_string(), fmt_f64(res), ratio]
        })
        .collect();
    report.csv("residuals.csv", &["n", "residual", "ratio"], &rows)?;
    let mass_rows: Vec<Vec<String>> = sol
        .path
        .times()
        .iter()
        .zip(sol.path.fields())
        .map(|(&t, f)| Ok(row(&[t, f.mass(grid)?, f.min(), f.max()])))
        .collect::<Result<_>>()?;
    report.csv("mass.csv", &["t", "mass", "min", "max"], &mass_rows)?;
    let last = sol.path.last().expect("lattice is non-empty");
    report.csv("solution.csv", &["x", "y", "vx", "vy", "value"], &phase_rows(grid, &[last]))?;
    Ok(())
}

/// Signed field with unit `L¹` norm.
fn random_direction(grid: &PhaseGrid, rng: &mut ChaCha8Rng) -> Result<DensityField> {
    let f = DensityField::from_vec(grid, (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let n = f.l1_norm(grid)?;
    Ok(f.scaled(1.0 / n))
}

pub fn derivative_check(s: &Setup, d: &DerivativeBlock, seed: u64, report: &mut Report) -> Result<()> {
    let grid = s.model.grid();
    s.record_regime(report)?;
    let base = s.model.picard(&s.p0, &s.params)?.path;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = random_direction(grid, &mut rng)?;

    let (_, neumann) = flow_derivative(&s.model, &base, &h, &s.params, d.tol, d.max_iter)?;
    let rows: Vec<Vec<String>> = neumann
        .increments
        .iter()
        .enumerate()
        .map(|(k, &inc)| {
            let ratio = if k == 0 { String::new() } else { fmt_f64(neumann.ratios[k - 1]) };
            vec![(k + 1).to_string(), fmt_f64(inc), ratio]
        })
        .collect();
    report.csv("neumann.csv", &["n", "increment", "ratio"], &rows)?;
    report.metric("neumann_iterations", neumann.iterations)?;
    if s.params.lambda <= s.a_bound {
        report.check(Check::at_most(
            "neumann_ratio",
            "Neumann increments of the derivative equation decay geometrically",
            neumann.max_ratio(),
            0.55,
        ));
    } else {
        report.warn("lambda above the ball-invariance bound; Neumann decay is not certified");
    }

    let table = fd_validate(&s.model, &s.p0, &h, &d.eps, &s.params, d.solve_tol)?;
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let slope = if k == 0 {
                String::new()
            } else {
                let p = &table.rows[k - 1];
                fmt_f64((r.remainder / p.remainder).ln() / (r.eps / p.eps).ln())
            };
            vec![fmt_f64(r.eps), fmt_f64(r.remainder), slope]
        })
        .collect();
    report.csv("fd.csv", &["eps", "remainder", "slope"], &rows)?;
    report.metric("fd_slope", table.slope)?;
    report.check(Check::holds(
        "fd_slope",
        "finite-difference remainder of the solution map is first order in eps",
        (0.8..=1.2).contains(&table.slope),
        table.slope,
        1.0,
    ));

    let g = random_direction(grid, &mut rng)?.scaled(grid.len() as f64);
    let rep = representer(&s.model, &base, d.t, &g, &s.params)?;
    report.metric("representer", &rep)?;
    report.check(Check::at_most(
        "representer_bound",
        "sup norm of the derivative representer is at most c + C",
        rep.sup_norm,
        rep.c + rep.big_c,
    ));
    let n = steps_for(d.t, s.model.dt())?;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for k in 0..d.directions {
        let hk = if k == 0 { h.clone() } else { random_direction(grid, &mut rng)? };
        let (u, _) = flow_derivative(&s.model, &base, &hk, &s.params, 1e-13, 500)?;
        let lhs = u.slice(n).inner(&g, grid)?;
        let rhs = hk.inner(&rep.total, grid)?;
        let res = (lhs - rhs).abs() / lhs.abs().max(1e-12);
        worst = worst.max(res);
        rows.push(vec![k.to_string(), fmt_f64(lhs), fmt_f64(rhs), fmt_f64(res)]);
    }
    report.csv("duality.csv", &["direction", "lhs", "rhs", "residual"], &rows)?;
    report.check(Check::at_most(
        "representer_duality",
        "the representer reproduces the derivative pairing",
        worst,
        1e-8,
    ));
    report.csv(
        "representer.csv",
        &["x", "y", "vx", "vy", "gamma", "big_gamma", "total"],
        &phase_rows(grid, &[&rep.gamma, &rep.big_gamma, &rep.total]),
    )?;
    Ok(())
}

pub struct StationarySetup {
    grid: PhaseGrid,
    knudsen: Knudsen,
    block: crate::config::KnudsenBlock,
}

impl StationarySetup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.knudsen.validate()?;
        let grid = PhaseGrid::new(cfg.grid)?;
        let profile = BoundaryProfile::uniform(&grid);
        let knudsen = Knudsen::new(&grid, &profile, cfg.knudsen.dt)?;
        knudsen.steps(cfg.knudsen.adjoint_time)?;
        Ok(Self {
            grid,
            knudsen,
            block: cfg.knudsen,
        })
    }
}

pub fn stationary(s: &StationarySetup, seed: u64, report: &mut Report) -> Result<()> {
    let (g, k, b) = (&s.grid, &s.knudsen, &s.block);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step_err = 0.0f64;
    for _ in 0..b.samples {
        let p = DensityField::from_vec(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let m0 = p.mass(g)?;
        step_err = step_err.max((k.step(&p)?.mass(g)? - m0).abs() / m0.max(1.0));
    }
    report.check(Check::at_most(
        "step_mass",
        "one transport step conserves mass",
        step_err,
        1e-12,
    ));

    let mut dual = 0.0f64;
    for _ in 0..b.samples {
        let h = DensityField::from_vec(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let q = DensityField::from_vec(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let lhs = k.apply(&h, b.adjoint_time)?.inner(&q, g)?;
        let rhs = h.inner(&k.adjoint(&q, b.adjoint_time)?, g)?;
        dual = dual.max((lhs - rhs).abs() / lhs.abs().max(1e-3));
    }
    report.check(Check::at_most(
        "adjoint_duality",
        "transport and its adjoint are dual in the weighted pairing",
        dual,
        1e-9,
    ));

    let st = match k.stationary(g, b.tol, b.max_iter) {
        Ok(st) => st,
        Err(Error::NoConvergence { residual, .. }) => {
            report.check(Check::at_most(
                "stationary_convergence",
                "power iteration reaches a stationary density",
                residual,
                b.tol,
            ));
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let residual = k.step(&st.density)?.sub(&st.density).l1_norm(g)?;
    report.metric("iterations", st.iterations)?;
    report.metric("min", st.min)?;
    report.metric("max", st.max)?;
    report.metric("residual", residual)?;
    report.check(Check::holds(
        "stationary_positive",
        "the stationary density is strictly positive",
        st.min > 0.0,
        st.min,
        0.0,
    ));
    report.check(Check::at_most(
        "stationary_residual",
        "the stationary density is invariant under one step",
        residual,
        1e-8,
    ));
    report.csv("stationary.csv", &["x", "y", "vx", "vy", "value"], &phase_rows(g, &[&st.density]))?;
    Ok(())
}
