//! Change of measure along the spectral flow, in slice coordinates.
//!
//! Probability coefficients `c` with `Σ c_j e_j = 1` form an affine slice of
//! `ℝ^J`; the chart writes `c = c̄ + D u` with `c̄` the ground state and `D` an
//! orthonormal basis of `e^⊥`. The ensemble `μ` has a smooth bump density `ρ`
//! in `u`. With `B(u) = Dᵀ a(c(u))` the divergence of the generator relative
//! to `μ` is `δ = div B + B·∇ln ρ`, and the density of the law of the flowed
//! ensemble against `μ` is `exp(−∫_0^t δ(φ_{−s}x) ds)`. This is cross-checked
//! against the Liouville formula `ρ(y) / (ρ(x) J_t(y))`, `y = φ_{−t}x`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{Cylinder, SpectralBasis};

/// Affine chart of the probability slice.
#[derive(Debug, Clone)]
pub struct SliceChart {
    base: DVector<f64>,
    /// `J × (J−1)`, orthonormal columns orthogonal to `e`.
    tangent: DMatrix<f64>,
}

impl SliceChart {
    /// Chart centred at the ground state.
    pub fn new(basis: &SpectralBasis) -> Result<Self> {
        let j = basis.len();
        let e = DVector::from_vec(basis.moments());
        let e_norm = e.norm();
        if e_norm == 0.0 {
            return Err(Error::Precondition("all moments vanish".into()));
        }
        let mut frame: Vec<DVector<f64>> = vec![e / e_norm];
        for k in 0..j {
            let mut v = DVector::zeros(j);
            v[k] = 1.0;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for f in &frame {
                    let p = f.dot(&v);
                    v -= f * p;
                }
            }
            let n = v.norm();
            if n > 1e-8 {
                frame.push(v / n);
            }
            if frame.len() == j {
                break;
            }
        }
        let tangent = DMatrix::from_columns(&frame[1..]);
        Ok(Self {
            base: DVector::from_vec(basis.ground_state()),
            tangent,
        })
    }

    pub fn dim(&self) -> usize {
        self.tangent.ncols()
    }

    pub fn basepoint(&self) -> &[f64] {
        self.base.as_slice()
    }

    pub fn tangent(&self) -> &DMatrix<f64> {
        &self.tangent
    }

    pub fn to_coeffs(&self, u: &[f64]) -> Vec<f64> {
        (&self.base + &self.tangent * DVector::from_column_slice(u))
            .as_slice()
            .to_vec()
    }

    pub fn to_chart(&self, c: &[f64]) -> Vec<f64> {
        (self.tangent.transpose() * (DVector::from_column_slice(c) - &self.base))
            .as_slice()
            .to_vec()
    }
}

/// Vector field on chart coordinates with its Jacobian.
pub trait Drift: Sync {
    fn dim(&self) -> usize;
    fn value(&self, u: &[f64]) -> Vec<f64>;
    fn jacobian(&self, u: &[f64]) -> DMatrix<f64>;

    fn divergence(&self, u: &[f64]) -> f64 {
        self.jacobian(u).trace()
    }
}

/// Density on chart coordinates, known through `ln ρ` and its gradient.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    /// Strictly inside the support.
    fn contains(&self, u: &[f64]) -> bool;
    fn ln_density(&self, u: &[f64]) -> f64;
    fn grad_ln_density(&self, u: &[f64]) -> Vec<f64>;
}

/// The generator `A^f` pushed through the chart.
#[derive(Debug, Clone)]
pub struct SpectralDrift {
    basis: SpectralBasis,
    chart: SliceChart,
}

impl SpectralDrift {
    pub fn new(basis: SpectralBasis) -> Result<Self> {
        let chart = SliceChart::new(&basis)?;
        Ok(Self { basis, chart })
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn chart(&self) -> &SliceChart {
        &self.chart
    }

    /// `∂a_i/∂c_k = (λ_i − z′)δ_ik − c_i λ_k e_k`.
    pub fn coefficient_jacobian(&self, c: &[f64]) -> DMatrix<f64> {
        let lam = self.basis.lambdas();
        let e = self.basis.moments();
        let zp: f64 = (0..c.len()).map(|j| lam[j] * c[j] * e[j]).sum();
        DMatrix::from_fn(c.len(), c.len(), |i, k| {
            let diag = if i == k { lam[i] - zp } else { 0.0 };
            diag - c[i] * lam[k] * e[k]
        })
    }

    /// Exact chart flow through the spectral solution.
    pub fn flow(&self, u: &[f64], t: f64) -> Result<Vec<f64>> {
        let c = self.chart.to_coeffs(u);
        Ok(self.chart.to_chart(&self.basis.flow(&c, t)?))
    }
}

impl Drift for SpectralDrift {
    fn dim(&self) -> usize {
        self.chart.dim()
    }

    fn value(&self, u: &[f64]) -> Vec<f64> {
        let c = self.chart.to_coeffs(u);
        let a = self.basis.generator(&c).expect("chart dimension matches basis");
        (self.chart.tangent.transpose() * DVector::from_vec(a))
            .as_slice()
            .to_vec()
    }

    fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let c = self.chart.to_coeffs(u);
        let m = self.coefficient_jacobian(&c);
        self.chart.tangent.transpose() * m * &self.chart.tangent
    }
}

/// Product of bumps `exp(−1/(1−(u_k/w_k)²))` on the box `|u_k| < w_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpDensity {
    widths: Vec<f64>,
}

impl BumpDensity {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "bump widths must be positive, got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// `∫ρ du` by composite Simpson per factor.
    pub fn normalization(&self) -> f64 {
        let n = 4000;
        let h = 2.0 / n as f64;
        let mut s = 0.0;
        for k in 1..n {
            let x: f64 = -1.0 + k as f64 * h;
            let f = (-1.0 / (1.0 - x * x)).exp();
            s += if k % 2 == 1 { 4.0 * f } else { 2.0 * f };
        }
        let unit = s * h / 3.0;
        self.widths.iter().map(|w| w * unit).product()
    }

    /// Upper bound of `ρ`.
    pub fn peak(&self) -> f64 {
        (-(self.widths.len() as f64)).exp()
    }

    pub fn density(&self, u: &[f64]) -> f64 {
        if self.contains(u) {
            self.ln_density(u).exp()
        } else {
            0.0
        }
    }
}

impl Density for BumpDensity {
    fn dim(&self) -> usize {
        self.widths.len()
    }

    fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(&self.widths).all(|(x, w)| x.abs() < *w)
    }

    fn ln_density(&self, u: &[f64]) -> f64 {
        if !self.contains(u) {
            return f64::NEG_INFINITY;
        }
        u.iter()
            .zip(&self.widths)
            .map(|(x, w)| {
                let s = x / w;
                -1.0 / (1.0 - s * s)
            })
            .sum()
    }

    fn grad_ln_density(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.widths)
            .map(|(x, w)| {
                let s = x / w;
                let d = 1.0 - s * s;
                -2.0 * s / (w * d * d)
            })
            .collect()
    }
}

/// `δ(u) = div B(u) + B(u)·∇ln ρ(u)`.
pub fn divergence_delta(u: &[f64], drift: &dyn Drift, density: &dyn Density) -> Result<f64> {
    if !density.contains(u) {
        return Err(Error::OutsideSupport);
    }
    let b = drift.value(u);
    let g = density.grad_ln_density(u);
    Ok(drift.divergence(u) + b.iter().zip(&g).map(|(b, g)| b * g).sum::<f64>())
}

/// Step control for orbit integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitControl {
    /// Largest RK4 step.
    pub h_max: f64,
    /// Change of `ln r` accepted between a step count and its double,
    /// relative to `max(1, |ln r|)`.
    pub tol: f64,
    /// Change of `r` itself accepted instead; zero disables it.
    pub abs_tol: f64,
    pub max_doublings: usize,
}

impl Default for OrbitControl {
    fn default() -> Self {
        Self {
            h_max: 1e-3,
            tol: 1e-11,
            abs_tol: 0.0,
            max_doublings: 8,
        }
    }
}

fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// RK4 step of `u̇ = sign·B(u)`.
fn rk4(drift: &dyn Drift, u: &[f64], h: f64) -> Vec<f64> {
    let k1 = drift.value(u);
    let k2 = drift.value(&axpy(u, 0.5 * h, &k1));
    let k3 = drift.value(&axpy(u, 0.5 * h, &k2));
    let k4 = drift.value(&axpy(u, h, &k3));
    (0..u.len())
        .map(|i| u[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Points `φ_{−kt/n} x`, `k = 0..=n`; fails if one leaves the support.
pub fn backward_orbit(
    x: &[f64],
    t: f64,
    n: usize,
    drift: &dyn Drift,
    density: &dyn Density,
) -> Result<Vec<Vec<f64>>> {
    if !density.contains(x) {
        return Err(Error::OutsideSupport);
    }
    let h = t / n as f64;
    let mut pts = Vec::with_capacity(n + 1);
    pts.push(x.to_vec());
    for k in 0..n {
        let next = rk4(drift, &pts[k], -h);
        if !density.contains(&next) {
            return Err(Error::OutsideSupport);
        }
        pts.push(next);
    }
    Ok(pts)
}

const LN_UNDERFLOW: f64 = -745.2;

fn even_steps(t: f64, h_max: f64) -> usize {
    let n = (t / h_max).ceil().max(2.0) as usize;
    n + n % 2
}

/// Repeats `f(n)` with doubled `n` until two successive log-values agree;
/// returns the exponential of the finer one.
fn doubled(t: f64, ctl: &OrbitControl, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let mut n = even_steps(t, ctl.h_max);
    let mut prev = f(n)?;
    for _ in 0..ctl.max_doublings {
        n *= 2;
        let next = f(n)?;
        if (next - prev).abs() <= ctl.tol * next.abs().max(1.0) {
            return Ok(next.exp());
        }
        if (next.exp() - prev.exp()).abs() < ctl.abs_tol {
            return Ok(next.exp());
        }
        // both below the smallest positive double
        if next < LN_UNDERFLOW && prev < LN_UNDERFLOW {
            return Ok(0.0);
        }
        prev = next;
    }
    Err(Error::NoConvergence {
        iterations: ctl.max_doublings,
        residual: prev,
    })
}

fn rn_jacobian_n(x: &[f64], t: f64, n: usize, drift: &dyn Drift, density: &dyn Density) -> Result<f64> {
    let orbit = backward_orbit(x, t, n, drift, density)?;
    let y = orbit.last().expect("orbit is non-empty").clone();
    // forward RK4 on (u, ln J) from y
    let h = t / n as f64;
    let d = y.len();
    let field = |s: &[f64]| -> Vec<f64> {
        let u = &s[..d];
        let mut out = drift.value(u);
        out.push(drift.divergence(u));
        out
    };
    let mut s = y.clone();
    s.push(0.0);
    for _ in 0..n {
        let k1 = field(&s);
        let k2 = field(&axpy(&s, 0.5 * h, &k1));
        let k3 = field(&axpy(&s, 0.5 * h, &k2));
        let k4 = field(&axpy(&s, h, &k3));
        for i in 0..s.len() {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let ln_j = s[d];
    Ok(density.ln_density(&y) - density.ln_density(x) - ln_j)
}

fn rn_formula_n(x: &[f64], t: f64, n: usize, drift: &dyn Drift, density: &dyn Density) -> Result<f64> {
    let orbit = backward_orbit(x, t, n, drift, density)?;
    let h = t / n as f64;
    let mut s = 0.0;
    for (k, u) in orbit.iter().enumerate() {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * divergence_delta(u, drift, density)?;
    }
    Ok(-s * h / 3.0)
}

/// Density ratio by change of variables: `ρ(y) / (ρ(x) J_t(y))`, `y = φ_{−t}x`.
pub fn rn_jacobian(
    x: &[f64],
    t: f64,
    drift: &dyn Drift,
    density: &dyn Density,
    ctl: &OrbitControl,
) -> Result<f64> {
    if t == 0.0 {
        return if density.contains(x) {
            Ok(1.0)
        } else {
            Err(Error::OutsideSupport)
        };
    }
    doubled(t, ctl, |n| rn_jacobian_n(x, t, n, drift, density))
}

/// `exp(−∫_0^t δ(φ_{−s}x) ds)` with Simpson's rule on the RK4 orbit.
pub fn rn_formula(
    x: &[f64],
    t: f64,
    drift: &dyn Drift,
    density: &dyn Density,
    ctl: &OrbitControl,
) -> Result<f64> {
    if t == 0.0 {
        return if density.contains(x) {
            Ok(1.0)
        } else {
            Err(Error::OutsideSupport)
        };
    }
    doubled(t, ctl, |n| rn_formula_n(x, t, n, drift, density))
}

/// `φ_{−t} x` by RK4 at the finest step used by the controls.
pub fn backward_point(
    x: &[f64],
    t: f64,
    drift: &dyn Drift,
    density: &dyn Density,
    ctl: &OrbitControl,
) -> Result<Vec<f64>> {
    let n = even_steps(t, ctl.h_max) * 4;
    Ok(backward_orbit(x, t, n, drift, density)?
        .pop()
        .expect("orbit is non-empty"))
}

/// `|h_j / h_1|` bound on the domain: the product of the sine indices.
fn mode_ratio_bound(index: (usize, usize)) -> f64 {
    (index.0 * index.1.max(1)) as f64
}

/// The ensemble `μ` over the chart with its drift.
#[derive(Debug, Clone)]
pub struct Ensemble {
    drift: SpectralDrift,
    density: BumpDensity,
}

/// Backward horizon over which charted densities must stay nonnegative.
pub const BACKWARD_HORIZON: f64 = 1.0;

impl Ensemble {
    /// Uses the given widths, or chooses the largest box of a fixed shape on
    /// which the positivity margin holds.
    pub fn new(basis: SpectralBasis, widths: Option<Vec<f64>>) -> Result<Self> {
        let drift = SpectralDrift::new(basis)?;
        let widths = match widths {
            Some(w) => {
                if w.len() != drift.dim() {
                    return Err(Error::ShapeMismatch {
                        expected: drift.dim(),
                        got: w.len(),
                    });
                }
                w
            }
            None => Self::auto_widths(&drift),
        };
        let ens = Self {
            drift,
            density: BumpDensity::new(widths)?,
        };
        ens.verify_support()?;
        Ok(ens)
    }

    /// `½ c_1 − Σ_{j≥2} |h_j/h_1| e^{(λ_1−λ_j)} |c_j|`; nonnegative margin
    /// implies a positive density along the flow over `[−1, ∞)`.
    pub fn positivity_margin(basis: &SpectralBasis, c: &[f64]) -> f64 {
        let m = basis.modes();
        let tail: f64 = (1..m.len())
            .map(|j| {
                mode_ratio_bound(m[j].index)
                    * ((m[0].lambda - m[j].lambda) * BACKWARD_HORIZON).exp()
                    * c[j].abs()
            })
            .sum();
        0.5 * c[0] - tail
    }

    fn corners(widths: &[f64]) -> Vec<Vec<f64>> {
        let d = widths.len();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|k| if mask >> k & 1 == 1 { widths[k] } else { -widths[k] })
                    .collect()
            })
            .collect()
    }

    fn auto_widths(drift: &SpectralDrift) -> Vec<f64> {
        let basis = drift.basis();
        let m = basis.modes();
        let tangent = drift.chart().tangent();
        let shape: Vec<f64> = (0..tangent.ncols())
            .map(|k| {
                let s: f64 = (1..m.len())
                    .map(|j| {
                        mode_ratio_bound(m[j].index)
                            * ((m[0].lambda - m[j].lambda) * BACKWARD_HORIZON).exp()
                            * tangent[(j, k)].abs()
                    })
                    .sum::<f64>()
                    + tangent[(0, k)].abs();
                1.0 / s
            })
            .collect();
        let ok = |s: f64| {
            let w: Vec<f64> = shape.iter().map(|x| x * s).collect();
            Self::corners(&w)
                .iter()
                .all(|u| Self::positivity_margin(basis, &drift.chart().to_coeffs(u)) >= 0.0)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while ok(hi) {
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        shape.iter().map(|x| x * lo).collect()
    }

    /// Corner check of the positivity margin and of the density on the
    /// evaluation grid at backward times in `[−1, 0]`.
    pub fn verify_support(&self) -> Result<()> {
        let basis = self.drift.basis();
        for u in Self::corners(self.density.widths()) {
            let c = self.drift.chart().to_coeffs(&u);
            let margin = Self::positivity_margin(basis, &c);
            if margin < 0.0 {
                return Err(Error::Positivity(format!(
                    "support corner {u:?} has margin {margin:e}"
                )));
            }
            for k in 0..=4 {
                let s = -BACKWARD_HORIZON * k as f64 / 4.0;
                basis.flow(&c, s)?;
            }
        }
        Ok(())
    }

    pub fn drift(&self) -> &SpectralDrift {
        &self.drift
    }

    pub fn density(&self) -> &BumpDensity {
        &self.density
    }

    pub fn basis(&self) -> &SpectralBasis {
        self.drift.basis()
    }

    pub fn chart(&self) -> &SliceChart {
        self.drift.chart()
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn delta(&self, u: &[f64]) -> Result<f64> {
        divergence_delta(u, &self.drift, &self.density)
    }

    pub fn rn_jacobian(&self, x: &[f64], t: f64, ctl: &OrbitControl) -> Result<f64> {
        rn_jacobian(x, t, &self.drift, &self.density, ctl)
    }

    pub fn rn_formula(&self, x: &[f64], t: f64, ctl: &OrbitControl) -> Result<f64> {
        rn_formula(x, t, &self.drift, &self.density, ctl)
    }

    /// Cylinder function value and chart-generator value `∇f·B` at `u`.
    pub fn cylinder(&self, f: &dyn Cylinder, u: &[f64]) -> Result<(f64, f64)> {
        let c = self.chart().to_coeffs(u);
        let af = crate::spectral::cylinder_af(f, &c, self.basis())?;
        Ok((f.value(&c), af))
    }

    /// `n` draws from `μ` by rejection from the box, in fixed chunk order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.sample_scaled(n, seed, 1.0)
    }

    /// As [`Ensemble::sample`], from `ρ` restricted to the box scaled by `shrink`.
    pub fn sample_scaled(&self, n: usize, seed: u64, shrink: f64) -> Result<Vec<Vec<f64>>> {
        let chunks = n.div_ceil(CHUNK);
        let widths: Vec<f64> = self.density.widths().iter().map(|w| w * shrink).collect();
        let peak = self.density.peak();
        let parts: Vec<(Vec<Vec<f64>>, usize)> = (0..chunks)
            .into_par_iter()
            .map(|k| {
                let quota = CHUNK.min(n - k * CHUNK);
                let mut rng = chunk_rng(seed, k as u64);
                let mut out = Vec::with_capacity(quota);
                let mut proposals = 0usize;
                while out.len() < quota && proposals < 200 * quota {
                    proposals += 1;
                    let u: Vec<f64> = widths.iter().map(|w| rng.random_range(-*w..*w)).collect();
                    if rng.random::<f64>() * peak < self.density.density(&u) {
                        out.push(u);
                    }
                }
                (out, proposals)
            })
            .collect();
        let accepted: usize = parts.iter().map(|p| p.0.len()).sum();
        let proposals: usize = parts.iter().map(|p| p.1).sum();
        let rate = accepted as f64 / proposals.max(1) as f64;
        if accepted < n || rate < 0.01 {
            return Err(Error::Rejection { rate });
        }
        Ok(parts.into_iter().flat_map(|p| p.0).collect())
    }
}

const CHUNK: usize = 4096;

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Mean and standard error, summed in order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IbpResult {
    /// `−⟨Af, g⟩ − ⟨Ag, f⟩`.
    pub lhs: f64,
    /// `⟨δ f, g⟩`.
    pub rhs: f64,
    pub stderr_lhs: f64,
    pub stderr_rhs: f64,
    /// Standard error of the paired difference.
    pub stderr: f64,
}

impl IbpResult {
    pub fn passes(&self, k: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k * self.stderr
    }
}

/// Monte Carlo integration-by-parts check over `samples` drawn from `μ`.
pub fn ibp_check(
    f: &dyn Cylinder,
    g: &dyn Cylinder,
    ens: &Ensemble,
    samples: &[Vec<f64>],
) -> Result<IbpResult> {
    if samples.len() < 2 {
        return Err(Error::Precondition("need at least two samples".into()));
    }
    let rows: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|u| {
            let (fv, af) = ens.cylinder(f, u)?;
            let (gv, ag) = ens.cylinder(g, u)?;
            let d = ens.delta(u)?;
            Ok((-af * gv - ag * fv, d * fv * gv))
        })
        .collect::<Result<_>>()?;
    let l: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (lhs, stderr_lhs) = mean_stderr(&l);
    let (rhs, stderr_rhs) = mean_stderr(&r);
    let (_, stderr) = mean_stderr(&diff);
    Ok(IbpResult {
        lhs,
        rhs,
        stderr_lhs,
        stderr_rhs,
        stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorCheck {
    /// `(t, finite-difference slope)` per time.
    pub slopes: Vec<(f64, f64)>,
    /// Richardson extrapolation from the two smallest times.
    pub extrapolated: f64,
    /// `−⟨f δ⟩_μ`.
    pub target: f64,
    pub stderr: f64,
    /// `|extrapolated − slope at the smallest t|`.
    pub bias: f64,
}

impl GeneratorCheck {
    pub fn passes(&self, k: f64) -> bool {
        (self.extrapolated - self.target).abs() <= k * self.stderr + self.bias
    }
}

/// `d/dt ∫ f(ν_t) dμ` at 0 by finite differences of the exact flow, against
/// `−∫ f δ dμ`.
pub fn generator_b_check(
    f: &dyn Cylinder,
    ens: &Ensemble,
    samples: &[Vec<f64>],
    t_list: &[f64],
) -> Result<GeneratorCheck> {
    let mut ts = t_list.to_vec();
    ts.sort_by(f64::total_cmp);
    if ts.len() < 2 || ts[0] <= 0.0 {
        return Err(Error::Precondition("need two or more positive times".into()));
    }
    let basis = ens.basis();
    let chart = ens.chart();
    // per sample: FD slopes at each t and f·δ
    let rows: Vec<(Vec<f64>, f64)> = samples
        .par_iter()
        .map(|u| {
            let c = chart.to_coeffs(u);
            let f0 = f.value(&c);
            let slopes = ts
                .iter()
                .map(|&t| Ok((f.value(&basis.flow(&c, t)?) - f0) / t))
                .collect::<Result<Vec<f64>>>()?;
            Ok((slopes, f0 * ens.delta(u)?))
        })
        .collect::<Result<_>>()?;
    let slopes: Vec<(f64, f64)> = ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let v: Vec<f64> = rows.iter().map(|r| r.0[k]).collect();
            (t, mean_stderr(&v).0)
        })
        .collect();
    // first-order error in t: combine the two smallest times linearly
    let (t1, t2) = (ts[0], ts[1]);
    let w = t2 / (t2 - t1);
    let paired: Vec<f64> = rows
        .iter()
        .map(|r| w * r.0[0] + (1.0 - w) * r.0[1] + r.1)
        .collect();
    let (_, stderr) = mean_stderr(&paired);
    let neg_fd: Vec<f64> = rows.iter().map(|r| -r.1).collect();
    let target = mean_stderr(&neg_fd).0;
    let extrapolated = w * slopes[0].1 + (1.0 - w) * slopes[1].1;
    Ok(GeneratorCheck {
        bias: (extrapolated - slopes[0].1).abs(),
        slopes,
        extrapolated,
        target,
        stderr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportCheck {
    /// `∫ g(φ_t y) 1{φ_t y ∈ supp} μ(dy)`.
    pub pushed: f64,
    /// `∫ g(x) r_t(x) μ(dx)`, with `r_t = 0` when the backward orbit leaves the support.
    pub weighted: f64,
    pub stderr: f64,
}

/// Compares the flowed ensemble with the reweighted one for a test function.
pub fn transport_check(
    g: &dyn Cylinder,
    ens: &Ensemble,
    samples: &[Vec<f64>],
    t: f64,
    ctl: &OrbitControl,
) -> Result<TransportCheck> {
    let rows: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|u| {
            let x = ens.drift().flow(u, t)?;
            let pushed = if ens.density().contains(&x) {
                ens.cylinder(g, &x)?.0
            } else {
                0.0
            };
            let r = match ens.rn_formula(u, t, ctl) {
                Ok(r) => r,
                Err(Error::OutsideSupport) => 0.0,
                Err(e) => return Err(e),
            };
            Ok((pushed, ens.cylinder(g, u)?.0 * r))
        })
        .collect::<Result<_>>()?;
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let sa = mean_stderr(&a);
    let sb = mean_stderr(&b);
    Ok(TransportCheck {
        pushed: sa.0,
        weighted: sb.0,
        stderr: (sa.1 * sa.1 + sb.1 * sb.1).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{Domain, GaussianFn, LinearFn, SineFn};

    fn ensemble() -> Ensemble {
        Ensemble::new(SpectralBasis::new(Domain::default(), 4).unwrap(), None).unwrap()
    }

    struct Linear(DMatrix<f64>);

    impl Drift for Linear {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn value(&self, u: &[f64]) -> Vec<f64> {
            (&self.0 * DVector::from_column_slice(u)).as_slice().to_vec()
        }
        fn jacobian(&self, _: &[f64]) -> DMatrix<f64> {
            self.0.clone()
        }
    }

    struct Gaussian(usize);

    impl Density for Gaussian {
        fn dim(&self) -> usize {
            self.0
        }
        fn contains(&self, _: &[f64]) -> bool {
            true
        }
        fn ln_density(&self, u: &[f64]) -> f64 {
            -0.5 * u.iter().map(|x| x * x).sum::<f64>()
        }
        fn grad_ln_density(&self, u: &[f64]) -> Vec<f64> {
            u.iter().map(|x| -x).collect()
        }
    }

    #[test]
    fn chart_round_trip_and_normalisation() {
        let e = ensemble();
        let basis = e.basis();
        let u = vec![1e-4, -3e-3, 2e-6];
        let c = e.chart().to_coeffs(&u);
        assert!((basis.total_mass(&c) - 1.0).abs() < 1e-13);
        let back = e.chart().to_chart(&c);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-13);
        }
        let t = e.chart().tangent();
        let gram = t.transpose() * t;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn drift_vanishes_at_ground_state_and_trace() {
        let e = ensemble();
        let zero = vec![0.0; 3];
        assert!(e.drift().value(&zero).iter().all(|x| x.abs() < 1e-14));
        let l = e.basis().lambdas();
        let expect: f64 = l[1..].iter().map(|x| x - l[0]).sum();
        assert!((e.drift().divergence(&zero) - expect).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let e = ensemble();
        let w = e.density().widths().to_vec();
        for k in 0..10 {
            let u: Vec<f64> = w.iter().enumerate().map(|(i, w)| w * (0.3 * ((k + i) as f64).sin())).collect();
            let jac = e.drift().jacobian(&u);
            for col in 0..3 {
                let h = 1e-6 * w[col];
                let mut up = u.clone();
                let mut um = u.clone();
                up[col] += h;
                um[col] -= h;
                let bp = e.drift().value(&up);
                let bm = e.drift().value(&um);
                for row in 0..3 {
                    let fd = (bp[row] - bm[row]) / (2.0 * h);
                    let scale = jac.column(col).amax().max(1e-12);
                    assert!((fd - jac[(row, col)]).abs() <= 1e-6 * scale);
                }
            }
        }
    }

    #[test]
    fn delta_for_manufactured_linear_drift() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.2, -2.0]);
        let drift = Linear(m.clone());
        let u = [0.3, -0.7];
        let d = divergence_delta(&u, &drift, &Gaussian(2)).unwrap();
        // tr M − uᵀ M u
        let uv = DVector::from_column_slice(&u);
        let expect = m.trace() - (uv.transpose() * &m * &uv)[(0, 0)];
        assert!((d - expect).abs() < 1e-14);
        let zero = Linear(DMatrix::zeros(2, 2));
        assert_eq!(divergence_delta(&u, &zero, &Gaussian(2)).unwrap(), 0.0);
    }

    #[test]
    fn bump_density_basics() {
        let b = BumpDensity::new(vec![1.0, 2.0]).unwrap();
        assert!(!b.contains(&[1.0, 0.0]));
        assert_eq!(b.density(&[1.5, 0.0]), 0.0);
        assert!((b.density(&[0.0, 0.0]) - b.peak()).abs() < 1e-15);
        // ∫ exp(−1/(1−x²)) over (−1,1) ≈ 0.443993816
        assert!((b.normalization() - 0.443993816168_f64.powi(2) * 2.0).abs() < 1e-8);
        let u = [0.4, -0.9];
        let g = b.grad_ln_density(&u);
        for k in 0..2 {
            let h = 1e-7;
            let mut up = u;
            let mut um = u;
            up[k] += h;
            um[k] -= h;
            let fd = (b.ln_density(&up) - b.ln_density(&um)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0));
        }
        assert!(BumpDensity::new(vec![0.0]).is_err());
    }

    #[test]
    fn support_verified_and_rejected() {
        let e = ensemble();
        assert!(e.verify_support().is_ok());
        let big: Vec<f64> = e.density().widths().iter().map(|w| 3.0 * w).collect();
        assert!(Ensemble::new(SpectralBasis::new(Domain::default(), 4).unwrap(), Some(big)).is_err());
    }

    #[test]
    fn rn_routes_agree() {
        let e = ensemble();
        let ctl = OrbitControl::default();
        let ys = e.sample_scaled(20, 5, 0.8).unwrap();
        let mut checked = 0;
        for (k, y) in ys.iter().enumerate() {
            let t = 0.5 * (k as f64 + 0.5) / ys.len() as f64;
            let x = e.drift().flow(y, t).unwrap();
            if !e.density().contains(&x) {
                continue;
            }
            let a = e.rn_jacobian(&x, t, &ctl).unwrap();
            let b = e.rn_formula(&x, t, &ctl).unwrap();
            assert!(a > 0.0 && b > 0.0);
            assert!((a - b).abs() <= 1e-5 * b, "{a} {b}");
            checked += 1;
        }
        assert!(checked >= 10);
        let x = &ys[0];
        assert_eq!(e.rn_formula(x, 0.0, &ctl).unwrap(), 1.0);
        assert_eq!(e.rn_jacobian(x, 0.0, &ctl).unwrap(), 1.0);
    }

    #[test]
    fn rn_composition_and_tolerance() {
        let e = ensemble();
        let ctl = OrbitControl::default();
        let y = e.sample_scaled(1, 6, 0.5).unwrap().remove(0);
        let (s, t) = (0.1, 0.15);
        let x = e.drift().flow(&y, s + t).unwrap();
        let whole = e.rn_jacobian(&x, s + t, &ctl).unwrap();
        let mid = backward_point(&x, t, &e.drift, &e.density, &ctl).unwrap();
        let parts = e.rn_jacobian(&x, t, &ctl).unwrap() * e.rn_jacobian(&mid, s, &ctl).unwrap();
        assert!((whole - parts).abs() <= 1e-7 * whole);
        let fine = OrbitControl {
            h_max: 5e-4,
            tol: 5e-12,
            ..ctl
        };
        let a = e.rn_jacobian(&x, s + t, &fine).unwrap();
        assert!((a - whole).abs() <= 1e-8 * whole);
    }

    #[test]
    fn sampling_is_deterministic() {
        let e = ensemble();
        let a = e.sample(5000, 9).unwrap();
        let b = e.sample(5000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|u| e.density().contains(u)));
        assert_ne!(a, e.sample(5000, 10).unwrap());
    }

    #[test]
    fn ibp_small_sample() {
        let e = ensemble();
        let s = e.sample(20_000, 11).unwrap();
        let one = crate::spectral::ConstantFn(1.0);
        let r = ibp_check(&one, &one, &e, &s).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.passes(3.0), "{r:?}");
        let f = LinearFn::coordinate(0);
        let g = SineFn {
            indices: vec![1, 2],
            weights: vec![40.0, 30.0],
            phase: 0.3,
        };
        let fg = ibp_check(&f, &g, &e, &s).unwrap();
        let gf = ibp_check(&g, &f, &e, &s).unwrap();
        assert!((fg.lhs - gf.lhs).abs() < 1e-15 && (fg.rhs - gf.rhs).abs() < 1e-15);
        assert!(fg.passes(3.0), "{fg:?}");
    }

    #[test]
    fn generator_and_transport_small_sample() {
        let e = ensemble();
        let s = e.sample(20_000, 12).unwrap();
        let base = e.chart().basepoint().to_vec();
        let f = GaussianFn {
            indices: vec![1, 3],
            center: vec![base[1], base[3]],
            scale: 0.01,
        };
        let r = generator_b_check(&f, &e, &s, &[0.01, 0.02, 0.04]).unwrap();
        assert!(r.passes(3.0), "{r:?}");
        let ctl = OrbitControl {
            abs_tol: 1e-12,
            ..Default::default()
        };
        let tc = transport_check(&f, &e, &s[..4000], 0.05, &ctl).unwrap();
        assert!((tc.pushed - tc.weighted).abs() <= 3.0 * tc.stderr, "{tc:?}");
    }
}
