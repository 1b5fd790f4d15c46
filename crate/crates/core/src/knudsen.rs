//! Knudsen semigroup: free transport with diffuse re-emission at the wall.
//!
//! One step shifts the cell box of every node along its velocity for `dt` and
//! splits its mass over the cells the shifted box overlaps. The part pushed
//! beyond the wall is handed to the patch it crossed and re-emitted into the
//! incoming velocities with fractions `|v∘n| M(r,v) w_v`, then moved for the
//! mean remaining time of that part. The resulting mass-transfer matrix is nonnegative
//! with unit column sums, so the step is linear, positive and conservative.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{dot, DensityField, PhaseGrid, Vec2};

/// Re-emission profile `M(r,v)` per (patch, incoming velocity node).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProfile {
    n_vel: usize,
    /// `values[patch * n_vel + vel]`, zero for outgoing velocities.
    values: Vec<f64>,
    m_min: f64,
    m_max: f64,
}

impl BoundaryProfile {
    /// Angle-independent profile, constant on each patch.
    pub fn uniform(grid: &PhaseGrid) -> Self {
        Self::from_fn(grid, |_, _| 1.0).expect("constant profile is positive")
    }

    /// Takes an unnormalised positive shape and rescales it per patch so that
    /// `Σ_{v∘n≤0} |v∘n| M w_v = 1`.
    pub fn from_fn(grid: &PhaseGrid, mut shape: impl FnMut(Vec2, Vec2) -> f64) -> Result<Self> {
        let nv = grid.n_vel();
        let vels = grid.velocities();
        let wv = grid.velocity_weights();
        let mut values = vec![0.0; grid.patches().len() * nv];
        let mut m_min = f64::INFINITY;
        let mut m_max = 0.0f64;
        for (pi, patch) in grid.patches().iter().enumerate() {
            let row = &mut values[pi * nv..(pi + 1) * nv];
            let mut norm = 0.0;
            for (k, &v) in vels.iter().enumerate() {
                let vn = dot(v, patch.normal);
                if vn <= 0.0 {
                    let m = shape(patch.midpoint, v);
                    if !(m > 0.0 && m.is_finite()) {
                        return Err(Error::InvalidConfig(format!(
                            "boundary profile must be positive and finite, got {m}"
                        )));
                    }
                    row[k] = m;
                    norm += -vn * m * wv[k];
                }
            }
            for (k, x) in row.iter_mut().enumerate() {
                if dot(vels[k], patch.normal) <= 0.0 {
                    *x /= norm;
                    m_min = m_min.min(*x);
                    m_max = m_max.max(*x);
                }
            }
        }
        Ok(Self {
            n_vel: nv,
            values,
            m_min,
            m_max,
        })
    }

    #[inline]
    pub fn value(&self, patch: usize, vel: usize) -> f64 {
        self.values[patch * self.n_vel + vel]
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.m_min, self.m_max)
    }

    /// `Σ_{v∘n≤0} |v∘n| M(r,v) w_v` for one patch; 1 up to rounding.
    pub fn normalization(&self, patch: usize, grid: &PhaseGrid) -> f64 {
        let n = grid.patches()[patch].normal;
        grid.velocities()
            .iter()
            .zip(grid.velocity_weights())
            .enumerate()
            .filter(|(_, (v, _))| dot(**v, n) <= 0.0)
            .map(|(k, (v, w))| -dot(*v, n) * self.value(patch, k) * w)
            .sum()
    }
}

/// Outgoing flux `J(r)(p) = Σ_{v∘n≥0} v∘n p(r,v) w_v` through one patch,
/// using the values of the wall-adjacent cell.
pub fn boundary_flux(p: &DensityField, patch: usize, grid: &PhaseGrid) -> Result<f64> {
    p.check_shape(grid)?;
    let bp = grid
        .patches()
        .get(patch)
        .ok_or_else(|| Error::Precondition(format!("patch {patch} not in grid")))?;
    let row = &p.values()[grid.node(bp.cell, 0)..grid.node(bp.cell + 1, 0)];
    let mut j = 0.0;
    for ((v, w), x) in grid.velocities().iter().zip(grid.velocity_weights()).zip(row) {
        let vn = dot(*v, bp.normal);
        if vn >= 0.0 {
            j += vn * x * w;
        }
    }
    Ok(j)
}

/// Compressed rows: `row[i]` lists `(column, coefficient)` pairs.
#[derive(Debug, Clone)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    coefs: Vec<f64>,
}

impl Csr {
    /// Triplets `(row, col, value)`; duplicates are summed in sorted order.
    fn from_triplets(n_rows: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; n_rows + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut coefs: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, x) in t {
            if last == Some((r, c)) {
                *coefs.last_mut().unwrap() += x;
            } else {
                cols.push(c);
                coefs.push(x);
                offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n_rows {
            offsets[i + 1] += offsets[i];
        }
        Self {
            offsets,
            cols,
            coefs,
        }
    }

    fn apply(&self, x: &[f64], scale: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for k in self.offsets[i]..self.offsets[i + 1] {
                    s += self.coefs[k] * x[self.cols[k]];
                }
                s * scale(i)
            })
            .collect()
    }
}

/// Discrete Knudsen semigroup at a fixed step `dt`.
#[derive(Debug, Clone)]
pub struct Knudsen {
    dt: f64,
    n: usize,
    weights: Vec<f64>,
    /// `K[d,s]` by destination row.
    by_dest: Csr,
    /// `K[d,s]` by source row, for the adjoint.
    by_source: Csr,
}

/// Cloud-in-cell deposit of unit mass at `x` onto cell centres.
fn cic(grid: &PhaseGrid, x: Vec2, mut out: impl FnMut(usize, f64)) {
    let c = grid.config();
    let (hx, hy) = grid.spacing();
    let split = |pos: f64, h: f64, n: usize| {
        let f = (pos / h - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (f.floor() as usize).min(n - 2);
        (i0, f - i0 as f64)
    };
    let (i0, ax) = split(x[0], hx, c.nx);
    let (j0, ay) = split(x[1], hy, c.ny);
    let parts = [
        (i0, j0, (1.0 - ax) * (1.0 - ay)),
        (i0 + 1, j0, ax * (1.0 - ay)),
        (i0, j0 + 1, (1.0 - ax) * ay),
        (i0 + 1, j0 + 1, ax * ay),
    ];
    for (i, j, w) in parts {
        if w > 0.0 {
            out(grid.cell_index(i, j), w);
        }
    }
}

/// Shift of the cell box `[i, i+1]·h` by `d` with `|d| < h`, along one axis:
/// the cells it overlaps with their fractions, and the fraction beyond the wall.
fn axis_split(i: usize, d: f64, h: f64, n: usize) -> ([(usize, f64); 2], f64) {
    let s = d / h;
    if s >= 0.0 {
        if i + 1 < n {
            ([(i, 1.0 - s), (i + 1, s)], 0.0)
        } else {
            ([(i, 1.0 - s), (i, 0.0)], s)
        }
    } else if i > 0 {
        ([(i, 1.0 + s), (i - 1, -s)], 0.0)
    } else {
        ([(i, 1.0 + s), (i, 0.0)], -s)
    }
}

fn clamp_inside(grid: &PhaseGrid, x: Vec2) -> Vec2 {
    let c = grid.config();
    [x[0].clamp(0.0, c.lx), x[1].clamp(0.0, c.ly)]
}

impl Knudsen {
    pub fn new(grid: &PhaseGrid, profile: &BoundaryProfile, dt: f64) -> Result<Self> {
        let limit = grid.min_cell_size();
        if !(dt > 0.0) || dt * grid.config().v_max >= limit {
            return Err(Error::TimeStep { dt, limit });
        }
        let n = grid.len();
        let vels = grid.velocities();
        let wv = grid.velocity_weights();

        // re-emission fractions per patch, fixed order over incoming velocities
        let emit: Vec<Vec<(usize, f64)>> = grid
            .patches()
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                vels.iter()
                    .enumerate()
                    .filter(|(_, v)| dot(**v, p.normal) <= 0.0)
                    .map(|(k, v)| (k, -dot(*v, p.normal) * profile.value(pi, k) * wv[k]))
                    .collect()
            })
            .collect();

        let c = grid.config();
        let (hx, hy) = grid.spacing();
        let mut triplets = Vec::with_capacity(4 * n);
        for j in 0..c.ny {
            for i in 0..c.nx {
                let cell = grid.cell_index(i, j);
                for (vk, &v) in vels.iter().enumerate() {
                    let src = grid.node(cell, vk);
                    let (xs, x_out) = axis_split(i, dt * v[0], hx, c.nx);
                    let (ys, y_out) = axis_split(j, dt * v[1], hy, c.ny);
                    for &(a, fx) in &xs {
                        for &(b, fy) in &ys {
                            if fx * fy > 0.0 {
                                triplets.push((grid.node(grid.cell_index(a, b), vk), src, fx * fy));
                            }
                        }
                    }
                    // time since crossing, averaged over the part beyond each wall
                    let tx = if x_out > 0.0 { 0.5 * x_out * hx / v[0].abs() } else { 0.0 };
                    let ty = if y_out > 0.0 { 0.5 * y_out * hy / v[1].abs() } else { 0.0 };
                    let x_patch = |row: usize| if v[0] > 0.0 { c.nx + row } else { 2 * c.nx + c.ny + row };
                    let y_patch = |col: usize| if v[1] > 0.0 { c.nx + c.ny + col } else { col };
                    let mut exits: Vec<(usize, f64, f64)> = Vec::new();
                    if x_out > 0.0 {
                        for &(b, fy) in &ys {
                            exits.push((x_patch(b), x_out * fy, tx));
                        }
                    }
                    if y_out > 0.0 {
                        for &(a, fx) in &xs {
                            exits.push((y_patch(a), fx * y_out, ty));
                        }
                    }
                    if x_out > 0.0 && y_out > 0.0 {
                        // corner piece leaves through the wall it crossed first
                        let piece = if tx >= ty { (x_patch(j), tx) } else { (y_patch(i), ty) };
                        exits.push((piece.0, x_out * y_out, piece.1));
                    }
                    for (patch, mass, tau) in exits {
                        if mass <= 0.0 {
                            continue;
                        }
                        let r = grid.patches()[patch].midpoint;
                        for &(k, frac) in &emit[patch] {
                            let u = vels[k];
                            let y = clamp_inside(grid, [r[0] + tau * u[0], r[1] + tau * u[1]]);
                            cic(grid, y, |d, w| triplets.push((grid.node(d, k), src, mass * frac * w)));
                        }
                    }
                }
            }
        }
        let transposed = triplets.iter().map(|&(d, s, w)| (s, d, w)).collect();
        let by_dest = Csr::from_triplets(n, triplets);
        let by_source = Csr::from_triplets(n, transposed);
        let weights = (0..n).map(|i| grid.weight(i)).collect();
        Ok(Self {
            dt,
            n,
            weights,
            by_dest,
            by_source,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn check(&self, p: &DensityField) -> Result<()> {
        if p.len() != self.n {
            return Err(Error::ShapeMismatch {
                expected: self.n,
                got: p.len(),
            });
        }
        Ok(())
    }

    /// `S(dt) p`.
    pub fn step(&self, p: &DensityField) -> Result<DensityField> {
        self.check(p)?;
        let mass: Vec<f64> = p
            .values()
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .collect();
        let w = &self.weights;
        let out = self.by_dest.apply(&mass, |d| 1.0 / w[d]);
        Ok(DensityField::from_raw(out))
    }

    /// Adjoint of one step in the weighted inner product.
    pub fn adjoint_step(&self, g: &DensityField) -> Result<DensityField> {
        self.check(g)?;
        Ok(DensityField::from_raw(self.by_source.apply(g.values(), |_| 1.0)))
    }

    pub fn steps(&self, t: f64) -> Result<usize> {
        crate::grid::steps_for(t, self.dt)
    }

    /// `S(t) p` as `⌈t/dt⌉` steps.
    pub fn apply(&self, p: &DensityField, t: f64) -> Result<DensityField> {
        self.check(p)?;
        let mut out = p.clone();
        for _ in 0..self.steps(t)? {
            out = self.step(&out)?;
        }
        Ok(out)
    }

    /// `g_S(t)`, satisfying `⟨S(t)h, g⟩ = ⟨h, g_S(t)⟩`.
    pub fn adjoint(&self, g: &DensityField, t: f64) -> Result<DensityField> {
        self.check(g)?;
        let mut out = g.clone();
        for _ in 0..self.steps(t)? {
            out = self.adjoint_step(&out)?;
        }
        Ok(out)
    }

    /// Power iteration from the uniform density until `‖S(dt)g − g‖_{L¹} < tol`.
    pub fn stationary(&self, grid: &PhaseGrid, tol: f64, max_iter: usize) -> Result<Stationary> {
        if !(tol > 0.0) {
            return Err(Error::Precondition(format!("tolerance {tol} must be > 0")));
        }
        let mut g = DensityField::uniform_probability(grid);
        let mut residual = f64::INFINITY;
        for it in 1..=max_iter {
            let next = self.step(&g)?;
            residual = next.sub(&g).l1_norm(grid)?;
            g = next;
            if residual < tol {
                let m = g.mass(grid)?;
                let g = g.scaled(1.0 / m);
                let (min, max) = (g.min(), g.max());
                return Ok(Stationary {
                    density: g,
                    iterations: it,
                    residual,
                    min,
                    max,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stationary {
    pub density: DensityField,
    pub iterations: usize,
    pub residual: f64,
    pub min: f64,
    pub max: f64,
}

/// One transport step, building the operator on the fly.
pub fn transport_step(
    p: &DensityField,
    dt: f64,
    profile: &BoundaryProfile,
    grid: &PhaseGrid,
) -> Result<DensityField> {
    p.check_shape(grid)?;
    Knudsen::new(grid, profile, dt)?.step(p)
}

pub fn apply_semigroup(
    p: &DensityField,
    t: f64,
    dt: f64,
    profile: &BoundaryProfile,
    grid: &PhaseGrid,
) -> Result<DensityField> {
    p.check_shape(grid)?;
    Knudsen::new(grid, profile, dt)?.apply(p, t)
}

pub fn adjoint_transport(
    g: &DensityField,
    t: f64,
    dt: f64,
    profile: &BoundaryProfile,
    grid: &PhaseGrid,
) -> Result<DensityField> {
    g.check_shape(grid)?;
    Knudsen::new(grid, profile, dt)?.adjoint(g, t)
}

pub fn stationary_density(
    grid: &PhaseGrid,
    profile: &BoundaryProfile,
    dt: f64,
    tol: f64,
) -> Result<Stationary> {
    Knudsen::new(grid, profile, dt)?.stationary(grid, tol, 200_000)
}
