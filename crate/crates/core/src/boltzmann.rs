//! Mild form of the cutoff Boltzmann equation and its Picard solver.
//!
//! On the lattice `t_n = n dt` the Duhamel integral uses the left endpoint:
//! `Ψ_{n+1} = S(dt)(Ψ_n + λ dt Q(q_n, q_n))`, `Ψ_0 = p0`.

use serde::{Deserialize, Serialize};

use crate::collision::{Collision, CollisionKernel};
use crate::error::{Error, Result};
use crate::grid::{time_lattice, DensityField, DensityPath, PhaseGrid};
use crate::knudsen::{BoundaryProfile, Knudsen};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticParams {
    pub lambda: f64,
    pub horizon: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KineticParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            horizon: 1.0,
            dt: 0.05,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl KineticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda = {} must be >= 0",
                self.lambda
            )));
        }
        if !(self.horizon >= 1.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "horizon T = {} must be >= 1",
                self.horizon
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig(
                "tolerance must be > 0 and max_iter >= 1".into(),
            ));
        }
        let steps = self.horizon / self.dt;
        if !(self.dt > 0.0) || (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} is not a whole number of steps dt = {}",
                self.horizon, self.dt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// Ball-invariance regime for `‖p0‖ ≤ 3/2`.
    A,
    /// Probability data with positive bounds.
    B,
    /// As `B`, with contraction factor 2/3.
    D,
}

/// Largest collision strength certified for the given regime.
pub fn admissible_lambda(
    mode: LambdaMode,
    horizon: f64,
    b_norm: f64,
    h_norm: f64,
    p_min: f64,
    p_max: f64,
) -> Result<f64> {
    if !(horizon > 0.0 && b_norm > 0.0 && h_norm > 0.0) {
        return Err(Error::Precondition(
            "horizon and kernel norms must be positive".into(),
        ));
    }
    let k = horizon * h_norm * b_norm;
    match mode {
        LambdaMode::A => Ok(1.0 / (16.0 * k)),
        LambdaMode::B | LambdaMode::D => {
            if !(p_min > 0.0) || p_max < p_min {
                return Err(Error::Precondition(format!(
                    "need 0 < p_min <= p_max, got p_min = {p_min}, p_max = {p_max}"
                )));
            }
            Ok(0.25 * p_min / (k * (p_max + 0.5 * p_min)))
        }
    }
}

/// Transport, collision and kernel constants for one grid and step.
#[derive(Debug, Clone)]
pub struct KineticModel {
    grid: PhaseGrid,
    knudsen: Knudsen,
    collision: Collision,
}

impl KineticModel {
    pub fn new(
        grid: PhaseGrid,
        kernel: &CollisionKernel,
        profile: &BoundaryProfile,
        dt: f64,
    ) -> Result<Self> {
        let knudsen = Knudsen::new(&grid, profile, dt)?;
        let collision = Collision::new(&grid, kernel);
        Ok(Self {
            grid,
            knudsen,
            collision,
        })
    }

    /// Default kernel and profile.
    pub fn standard(grid: PhaseGrid, dt: f64) -> Result<Self> {
        let profile = BoundaryProfile::uniform(&grid);
        Self::new(grid, &CollisionKernel::default(), &profile, dt)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn knudsen(&self) -> &Knudsen {
        &self.knudsen
    }

    pub fn collision(&self) -> &Collision {
        &self.collision
    }

    pub fn dt(&self) -> f64 {
        self.knudsen.dt()
    }

    /// `(‖B‖, ‖h_γ‖)`.
    pub fn constants(&self) -> (f64, f64) {
        self.collision.constants()
    }

    pub fn lattice(&self, horizon: f64) -> Result<Vec<f64>> {
        time_lattice(horizon, self.dt())
    }

    fn check_params(&self, params: &KineticParams) -> Result<()> {
        params.validate()?;
        if (params.dt - self.dt()).abs() > 1e-15 * self.dt() {
            return Err(Error::LatticeMismatch(format!(
                "params dt = {} but model dt = {}",
                params.dt,
                self.dt()
            )));
        }
        Ok(())
    }

    fn check_lattice(&self, path: &DensityPath, horizon: f64) -> Result<()> {
        let lattice = self.lattice(horizon)?;
        let ok = path.len() == lattice.len()
            && path
                .times()
                .iter()
                .zip(&lattice)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * horizon.max(1.0));
        if !ok {
            return Err(Error::LatticeMismatch(format!(
                "path has {} slices, lattice has {}",
                path.len(),
                lattice.len()
            )));
        }
        for f in path.fields() {
            f.check_shape(&self.grid)?;
        }
        Ok(())
    }

    /// `Y_0 = init`, `Y_{n+1} = S(Y_n + scale·dt·source(n))` over `steps` steps.
    pub(crate) fn duhamel(
        &self,
        init: DensityField,
        steps: usize,
        scale: f64,
        mut source: impl FnMut(usize) -> Result<DensityField>,
    ) -> Result<Vec<DensityField>> {
        let dt = self.dt();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(init);
        for n in 0..steps {
            let mut y = out[n].clone();
            if scale != 0.0 {
                y.axpy(scale * dt, &source(n)?);
            }
            out.push(self.knudsen.step(&y)?);
        }
        Ok(out)
    }

    /// `Ψ(p0, q)` on the lattice of `q`.
    pub fn psi(&self, p0: &DensityField, q: &DensityPath, params: &KineticParams) -> Result<DensityPath> {
        self.check_params(params)?;
        p0.check_shape(&self.grid)?;
        self.check_lattice(q, params.horizon)?;
        let steps = q.len() - 1;
        let fields = self.duhamel(p0.clone(), steps, params.lambda, |n| {
            let qn = q.slice(n);
            self.collision.apply(qn, qn)
        })?;
        DensityPath::new(q.times().to_vec(), fields)
    }

    /// `S(t_n) p0` on the lattice.
    pub fn free_path(&self, p0: &DensityField, horizon: f64) -> Result<DensityPath> {
        p0.check_shape(&self.grid)?;
        let times = self.lattice(horizon)?;
        let fields = self.duhamel(p0.clone(), times.len() - 1, 0.0, |_| unreachable!())?;
        DensityPath::new(times, fields)
    }

    /// Entrywise bounds of `S(t)p0` over the lattice.
    pub fn initial_bounds(&self, p0: &DensityField, horizon: f64) -> Result<(f64, f64)> {
        let free = self.free_path(p0, horizon)?;
        let lo = free.fields().iter().map(|f| f.min()).fold(f64::INFINITY, f64::min);
        let hi = free.fields().iter().map(|f| f.max()).fold(f64::NEG_INFINITY, f64::max);
        Ok((lo, hi))
    }

    /// `‖Ψ(p0,q1) − Ψ(p0,q2)‖ / ‖q1 − q2‖`.
    pub fn contraction_probe(
        &self,
        p0: &DensityField,
        q1: &DensityPath,
        q2: &DensityPath,
        params: &KineticParams,
    ) -> Result<f64> {
        let denom = q1.sub(q2)?.norm(&self.grid)?;
        if denom == 0.0 {
            return Err(Error::Precondition("q1 and q2 coincide".into()));
        }
        let a = self.psi(p0, q1, params)?;
        let b = self.psi(p0, q2, params)?;
        Ok(a.sub(&b)?.norm(&self.grid)? / denom)
    }

    /// Picard iteration `p^(n) = Ψ(p0, p^(n−1))` from `p^(0) ≡ p0`.
    pub fn picard(&self, p0: &DensityField, params: &KineticParams) -> Result<PicardSolution> {
        self.check_params(params)?;
        p0.check_shape(&self.grid)?;
        let times = self.lattice(params.horizon)?;
        let mut current = DensityPath::constant(times, p0)?;
        let scale = 1.0 + p0.l1_norm(&self.grid)?;
        let mut residuals = Vec::new();
        let mut ratios = Vec::new();
        for it in 1..=params.max_iter {
            let next = self.psi(p0, &current, params)?;
            let res = next.sub(&current)?.norm(&self.grid)?;
            if let Some(&prev) = residuals.last() {
                let ratio: f64 = if prev > 0.0 { res / prev } else { 0.0 };
                ratios.push(ratio);
                // ratios at the rounding floor carry no information
                if ratio >= 1.0 && res > 1e-12 * scale {
                    return Err(Error::Divergence {
                        iteration: it,
                        ratio,
                    });
                }
            }
            residuals.push(res);
            current = next;
            if res < params.tol {
                let fixed = self.psi(p0, &current, params)?;
                let fixed_point_residual = fixed.sub(&current)?.norm(&self.grid)?;
                let m0 = p0.mass(&self.grid)?;
                let mut mass_drift = 0.0f64;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for f in current.fields() {
                    mass_drift = mass_drift.max((f.mass(&self.grid)? - m0).abs());
                    lo = lo.min(f.min());
                    hi = hi.max(f.max());
                }
                return Ok(PicardSolution {
                    path: current,
                    report: PicardReport {
                        iterations: it,
                        residuals,
                        ratios,
                        fixed_point_residual,
                        mass_drift,
                        min_value: lo,
                        max_value: hi,
                    },
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: params.max_iter,
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub ratios: Vec<f64>,
    pub fixed_point_residual: f64,
    pub mass_drift: f64,
    pub min_value: f64,
    pub max_value: f64,
}

impl PicardReport {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }

    /// Whether the solution stays in `[p_min/2, p_max + p_min/2]`.
    pub fn within_bounds(&self, p_min: f64, p_max: f64) -> bool {
        self.min_value >= 0.5 * p_min && self.max_value <= p_max + 0.5 * p_min
    }
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub path: DensityPath,
    pub report: PicardReport,
}
