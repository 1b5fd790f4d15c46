//! Normalised heat flow in a Dirichlet eigenbasis.
//!
//! A measure is carried by its coefficients `c_j = (h_j, ν)`. The forward and
//! backward flow multiply by `e^{λ_j t}` and renormalise by
//! `z(t) = Σ_j e^{λ_j t} c_j e_j`, where `e_j = (h_j, 1)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Domain {
    Interval { length: f64 },
    Rectangle { lx: f64, ly: f64 },
}

impl Default for Domain {
    fn default() -> Self {
        Domain::Interval { length: PI }
    }
}

impl Domain {
    pub fn measure(&self) -> f64 {
        match *self {
            Domain::Interval { length } => length,
            Domain::Rectangle { lx, ly } => lx * ly,
        }
    }
}

/// One-dimensional sine mode on `(0, l)`.
fn sine(n: usize, l: f64, x: f64) -> f64 {
    (2.0 / l).sqrt() * (n as f64 * PI * x / l).sin()
}

fn sine_lambda(n: usize, l: f64) -> f64 {
    let k = n as f64 * PI / l;
    -0.5 * k * k
}

fn sine_moment(n: usize, l: f64) -> f64 {
    if n % 2 == 1 {
        (2.0 / l).sqrt() * 2.0 * l / (n as f64 * PI)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// Sine indices per dimension (second is 0 on an interval).
    pub index: (usize, usize),
    /// `λ` with `Δh = 2λh`.
    pub lambda: f64,
    /// `(h, 1)`.
    pub moment: f64,
}

#[derive(Debug, Clone)]
pub struct SpectralBasis {
    domain: Domain,
    modes: Vec<Mode>,
    eval_points: usize,
}

pub const DEFAULT_EVAL_POINTS: usize = 512;

impl SpectralBasis {
    pub fn new(domain: Domain, j: usize) -> Result<Self> {
        Self::with_eval_points(domain, j, DEFAULT_EVAL_POINTS)
    }

    pub fn with_eval_points(domain: Domain, j: usize, eval_points: usize) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidConfig(format!("J = {j} must be >= 2")));
        }
        if eval_points < 2 {
            return Err(Error::InvalidConfig("need at least 2 evaluation points".into()));
        }
        let modes = match domain {
            Domain::Interval { length } => {
                if !(length > 0.0 && length.is_finite()) {
                    return Err(Error::InvalidConfig(format!("interval length {length} must be > 0")));
                }
                (1..=j)
                    .map(|n| Mode {
                        index: (n, 0),
                        lambda: sine_lambda(n, length),
                        moment: sine_moment(n, length),
                    })
                    .collect()
            }
            Domain::Rectangle { lx, ly } => {
                if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "rectangle sides must be > 0, got {lx} x {ly}"
                    )));
                }
                let mut all = Vec::with_capacity(j * j);
                for n in 1..=j {
                    for m in 1..=j {
                        all.push(Mode {
                            index: (n, m),
                            lambda: sine_lambda(n, lx) + sine_lambda(m, ly),
                            moment: sine_moment(n, lx) * sine_moment(m, ly),
                        });
                    }
                }
                // the first J of the n,m ≤ J block are the J lowest modes overall
                all.sort_by(|a, b| b.lambda.total_cmp(&a.lambda).then(a.index.cmp(&b.index)));
                all.truncate(j);
                all
            }
        };
        Ok(Self {
            domain,
            modes,
            eval_points,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.lambda).collect()
    }

    pub fn moments(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.moment).collect()
    }

    /// `h_j(x)`; `x[1]` is ignored on an interval.
    pub fn eval(&self, j: usize, x: [f64; 2]) -> f64 {
        let (n, m) = self.modes[j].index;
        match self.domain {
            Domain::Interval { length } => sine(n, length, x[0]),
            Domain::Rectangle { lx, ly } => sine(n, lx, x[0]) * sine(m, ly, x[1]),
        }
    }

    /// Midpoint nodes per dimension used for quadrature and positivity checks.
    fn nodes(&self, l: f64) -> Vec<f64> {
        let n = self.eval_points;
        (0..n).map(|k| (k as f64 + 0.5) * l / n as f64).collect()
    }

    /// Tables `table[j][k] = h_j` factors at the nodes, per dimension.
    fn tables(&self) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>, f64) {
        match self.domain {
            Domain::Interval { length } => {
                let xs = self.nodes(length);
                let tx = self
                    .modes
                    .iter()
                    .map(|m| xs.iter().map(|&x| sine(m.index.0, length, x)).collect())
                    .collect();
                (tx, None, length / self.eval_points as f64)
            }
            Domain::Rectangle { lx, ly } => {
                let xs = self.nodes(lx);
                let ys = self.nodes(ly);
                let tx = self
                    .modes
                    .iter()
                    .map(|m| xs.iter().map(|&x| sine(m.index.0, lx, x)).collect())
                    .collect();
                let ty = self
                    .modes
                    .iter()
                    .map(|m| ys.iter().map(|&y| sine(m.index.1, ly, y)).collect())
                    .collect();
                let n = self.eval_points as f64;
                (tx, Some(ty), lx * ly / (n * n))
            }
        }
    }

    /// Density `Σ c_j h_j` at every evaluation node, in row-major order.
    pub fn density_on_grid(&self, c: &[f64]) -> Vec<f64> {
        let (tx, ty, _) = self.tables();
        let n = self.eval_points;
        match ty {
            None => (0..n)
                .map(|k| c.iter().zip(&tx).map(|(cj, t)| cj * t[k]).sum())
                .collect(),
            Some(ty) => {
                let mut out = Vec::with_capacity(n * n);
                for ky in 0..n {
                    for kx in 0..n {
                        let mut s = 0.0;
                        for (j, cj) in c.iter().enumerate() {
                            s += cj * tx[j][kx] * ty[j][ky];
                        }
                        out.push(s);
                    }
                }
                out
            }
        }
    }

    pub fn min_density(&self, c: &[f64]) -> f64 {
        self.density_on_grid(c).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Gram matrix `(h_i, h_j)` by midpoint quadrature.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let (tx, ty, w) = self.tables();
        let j = self.len();
        let mut g = vec![vec![0.0; j]; j];
        for a in 0..j {
            for b in 0..j {
                g[a][b] = match &ty {
                    None => w * tx[a].iter().zip(&tx[b]).map(|(x, y)| x * y).sum::<f64>(),
                    Some(ty) => {
                        let sx: f64 = tx[a].iter().zip(&tx[b]).map(|(x, y)| x * y).sum();
                        let sy: f64 = ty[a].iter().zip(&ty[b]).map(|(x, y)| x * y).sum();
                        w * sx * sy
                    }
                };
            }
        }
        g
    }

    /// `(h_j, 1)` by midpoint quadrature.
    pub fn quadrature_moments(&self) -> Vec<f64> {
        let (tx, ty, w) = self.tables();
        (0..self.len())
            .map(|j| {
                let sx: f64 = tx[j].iter().sum();
                match &ty {
                    None => w * sx,
                    Some(ty) => w * sx * ty[j].iter().sum::<f64>(),
                }
            })
            .collect()
    }

    fn check(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: c.len(),
            });
        }
        Ok(())
    }

    /// `Σ c_j e_j`.
    pub fn total_mass(&self, c: &[f64]) -> f64 {
        c.iter().zip(&self.modes).map(|(c, m)| c * m.moment).sum()
    }

    pub fn normalize(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.check(c)?;
        let z = self.total_mass(c);
        if !(z > 0.0) {
            return Err(Error::Positivity(format!("total mass {z} is not positive")));
        }
        Ok(c.iter().map(|x| x / z).collect())
    }

    /// `c_1 = 1/e_1`, other coefficients zero.
    pub fn ground_state(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.len()];
        c[0] = 1.0 / self.modes[0].moment;
        c
    }

    /// `(z(t), z′(t))` for the unnormalised evolution of `c`.
    pub fn z_and_zprime(&self, c: &[f64], t: f64) -> Result<(f64, f64)> {
        self.check(c)?;
        let mut z = 0.0;
        let mut zp = 0.0;
        for (cj, m) in c.iter().zip(&self.modes) {
            let x = (m.lambda * t).exp() * cj * m.moment;
            z += x;
            zp += m.lambda * x;
        }
        Ok((z, zp))
    }

    /// `c_j(t) = e^{λ_j t} c_j / z(t)`. Backward times require the result to
    /// be a nonnegative density on the evaluation grid.
    pub fn flow(&self, c: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(c)?;
        let (z, _) = self.z_and_zprime(c, t)?;
        if !(z > 0.0) {
            return Err(Error::Positivity(format!("normaliser z = {z} at t = {t}")));
        }
        let out: Vec<f64> = c
            .iter()
            .zip(&self.modes)
            .map(|(cj, m)| (m.lambda * t).exp() * cj / z)
            .collect();
        if t < 0.0 {
            let min = self.min_density(&out);
            if min < -1e-9 {
                return Err(Error::Positivity(format!(
                    "density minimum {min:e} at t = {t}"
                )));
            }
        }
        Ok(out)
    }

    /// Coefficients of `A^f ν`: `a_i = (λ_i − z′) c_i`, `z′ = Σ λ_j c_j e_j`.
    pub fn generator(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.check(c)?;
        let zp: f64 = c
            .iter()
            .zip(&self.modes)
            .map(|(cj, m)| m.lambda * cj * m.moment)
            .sum();
        Ok(c.iter()
            .zip(&self.modes)
            .map(|(cj, m)| (m.lambda - zp) * cj)
            .collect())
    }

    /// `(Σ λ_n² e^{−2tλ_n} c_n²)^{1/2}`.
    pub fn h_norm(&self, c: &[f64], t: f64) -> Result<f64> {
        self.check(c)?;
        Ok(c.iter()
            .zip(&self.modes)
            .map(|(cj, m)| m.lambda * m.lambda * (-2.0 * t * m.lambda).exp() * cj * cj)
            .sum::<f64>()
            .sqrt())
    }
}

/// `f(ν) = φ((h_{i_1},ν), …, (h_{i_r},ν))` with a supplied gradient.
pub trait Cylinder: Send + Sync {
    fn indices(&self) -> &[usize];
    fn phi(&self, x: &[f64]) -> f64;
    fn grad_phi(&self, x: &[f64]) -> Vec<f64>;

    fn value(&self, c: &[f64]) -> f64 {
        let x: Vec<f64> = self.indices().iter().map(|&i| c[i]).collect();
        self.phi(&x)
    }

    /// Gradient with respect to all coefficients.
    fn gradient(&self, c: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = self.indices().iter().map(|&i| c[i]).collect();
        let g = self.grad_phi(&x);
        let mut out = vec![0.0; c.len()];
        for (&i, gi) in self.indices().iter().zip(g) {
            out[i] += gi;
        }
        out
    }
}

/// `A f(ν) = Σ_i ∂φ/∂x_i · (λ_{k_i} − z′) c_{k_i}`.
pub fn cylinder_af(f: &dyn Cylinder, c: &[f64], basis: &SpectralBasis) -> Result<f64> {
    let a = basis.generator(c)?;
    Ok(f.gradient(c).iter().zip(&a).map(|(g, a)| g * a).sum())
}

/// Constant function.
#[derive(Debug, Clone)]
pub struct ConstantFn(pub f64);

impl Cylinder for ConstantFn {
    fn indices(&self) -> &[usize] {
        &[]
    }
    fn phi(&self, _: &[f64]) -> f64 {
        self.0
    }
    fn grad_phi(&self, _: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}

/// `Σ w_i x_i + b`.
#[derive(Debug, Clone)]
pub struct LinearFn {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl LinearFn {
    pub fn coordinate(i: usize) -> Self {
        Self {
            indices: vec![i],
            weights: vec![1.0],
            offset: 0.0,
        }
    }
}

impl Cylinder for LinearFn {
    fn indices(&self) -> &[usize] {
        &self.indices
    }
    fn phi(&self, x: &[f64]) -> f64 {
        self.offset + x.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()
    }
    fn grad_phi(&self, _: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// `sin(Σ w_i x_i + b)`, bounded with bounded derivatives.
#[derive(Debug, Clone)]
pub struct SineFn {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub phase: f64,
}

impl Cylinder for SineFn {
    fn indices(&self) -> &[usize] {
        &self.indices
    }
    fn phi(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
        (s + self.phase).sin()
    }
    fn grad_phi(&self, x: &[f64]) -> Vec<f64> {
        let s: f64 = x.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
        let d = (s + self.phase).cos();
        self.weights.iter().map(|w| w * d).collect()
    }
}

/// `exp(−Σ (x_i − m_i)² / s²)`.
#[derive(Debug, Clone)]
pub struct GaussianFn {
    pub indices: Vec<usize>,
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Cylinder for GaussianFn {
    fn indices(&self) -> &[usize] {
        &self.indices
    }
    fn phi(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(x, m)| (x - m).powi(2)).sum();
        (-r2 / (self.scale * self.scale)).exp()
    }
    fn grad_phi(&self, x: &[f64]) -> Vec<f64> {
        let f = self.phi(x);
        let s2 = self.scale * self.scale;
        x.iter()
            .zip(&self.center)
            .map(|(x, m)| -2.0 * (x - m) / s2 * f)
            .collect()
    }
}

/// `Π x_i` over the index set.
#[derive(Debug, Clone)]
pub struct ProductFn {
    pub indices: Vec<usize>,
}

impl Cylinder for ProductFn {
    fn indices(&self) -> &[usize] {
        &self.indices
    }
    fn phi(&self, x: &[f64]) -> f64 {
        x.iter().product()
    }
    fn grad_phi(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                x.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| v)
                    .product()
            })
            .collect()
    }
}
