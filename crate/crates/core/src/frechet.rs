//! Fréchet derivatives of the mild-form map and of the solution map.
//!
//! The derivative `u = ∇p(p0) h` solves the linear fixed point
//! `u = S(·)h + 2λ ∫ S(·−s) Q(u(s), p(s)) ds`, which is the Neumann series
//! summed by iteration. The dual of that fixed point gives the `L^∞`
//! representer of `h ↦ ⟨u(t), g⟩`.

use serde::Serialize;

use crate::boltzmann::{KineticModel, KineticParams};
use crate::error::{Error, Result};
use crate::grid::{steps_for, DensityField, DensityPath};

/// `t ↦ S(t) h` on the lattice.
pub fn d1_psi(model: &KineticModel, h: &DensityField, params: &KineticParams) -> Result<DensityPath> {
    params.validate()?;
    model.free_path(h, params.horizon)
}

/// `2λ ∫_0^t S(t−s) Q(h(s), q(s)) ds` on the lattice.
pub fn d2_psi(
    model: &KineticModel,
    q: &DensityPath,
    h: &DensityPath,
    params: &KineticParams,
) -> Result<DensityPath> {
    params.validate()?;
    if !q.same_lattice(h) {
        return Err(Error::LatticeMismatch("q and h on different lattices".into()));
    }
    let lattice = model.lattice(params.horizon)?;
    if q.len() != lattice.len() {
        return Err(Error::LatticeMismatch(format!(
            "path has {} slices, lattice has {}",
            q.len(),
            lattice.len()
        )));
    }
    let zero = DensityField::zeros(model.grid());
    let fields = model.duhamel(zero, q.len() - 1, 2.0 * params.lambda, |n| {
        model.collision().apply(h.slice(n), q.slice(n))
    })?;
    DensityPath::new(q.times().to_vec(), fields)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub iterations: usize,
    /// `‖u_{k+1} − u_k‖_{1,T}` per iteration.
    pub increments: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl DerivativeReport {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// `∇p(p0) h` given the solution path `p = p(p0)`. Stops once the increment
/// falls below `tol · ‖S(·)h‖_{1,T}`.
pub fn flow_derivative(
    model: &KineticModel,
    solution: &DensityPath,
    h: &DensityField,
    params: &KineticParams,
    tol: f64,
    max_iter: usize,
) -> Result<(DensityPath, DerivativeReport)> {
    flow_derivative_partial(model, solution, h, params, tol, max_iter, None)
}

/// As [`flow_derivative`], stopping after `terms` iterations if given.
pub fn flow_derivative_partial(
    model: &KineticModel,
    solution: &DensityPath,
    h: &DensityField,
    params: &KineticParams,
    tol: f64,
    max_iter: usize,
    terms: Option<usize>,
) -> Result<(DensityPath, DerivativeReport)> {
    let grid = model.grid();
    let base = d1_psi(model, h, params)?;
    let scale = base.norm(grid)?;
    let mut u = base.clone();
    let mut increments = Vec::new();
    let mut ratios = Vec::new();
    if scale == 0.0 {
        return Ok((
            u,
            DerivativeReport {
                iterations: 0,
                increments,
                ratios,
            },
        ));
    }
    let cap = terms.unwrap_or(max_iter);
    for it in 1..=cap {
        let next = base.add(&d2_psi(model, solution, &u, params)?)?;
        let inc = next.sub(&u)?.norm(grid)?;
        if let Some(&prev) = increments.last() {
            let ratio: f64 = if prev > 0.0 { inc / prev } else { 0.0 };
            ratios.push(ratio);
            if ratio >= 1.0 && inc > 1e-13 * scale {
                return Err(Error::Divergence {
                    iteration: it,
                    ratio,
                });
            }
        }
        increments.push(inc);
        u = next;
        if terms.is_none() && inc < tol * scale {
            return Ok((
                u,
                DerivativeReport {
                    iterations: it,
                    increments,
                    ratios,
                },
            ));
        }
    }
    if terms.is_some() {
        return Ok((
            u,
            DerivativeReport {
                iterations: cap,
                increments,
                ratios,
            },
        ));
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: increments.last().copied().unwrap_or(f64::INFINITY) / scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdRow {
    pub eps: f64,
    pub remainder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdTable {
    pub rows: Vec<FdRow>,
    /// Least-squares slope of `ln r` against `ln ε`.
    pub slope: f64,
}

impl FdTable {
    pub fn monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        rows.windows(2).all(|w| w[0].remainder > w[1].remainder)
    }
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Fréchet remainder `‖p(p0+εh) − p(p0) − ε∇p(p0)h‖_{1,T} / (ε‖h‖)` per `ε`,
/// with Picard solves run to `solve_tol`.
pub fn fd_validate(
    model: &KineticModel,
    p0: &DensityField,
    h: &DensityField,
    eps_list: &[f64],
    params: &KineticParams,
    solve_tol: f64,
) -> Result<FdTable> {
    let grid = model.grid();
    let h_norm = h.l1_norm(grid)?;
    if h_norm == 0.0 {
        return Err(Error::Precondition("direction h must be nonzero".into()));
    }
    if eps_list.len() < 2 || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Precondition(
            "need at least two positive step sizes".into(),
        ));
    }
    let tight = KineticParams {
        tol: solve_tol,
        max_iter: params.max_iter.max(500),
        ..*params
    };
    let base = model.picard(p0, &tight)?.path;
    let (u, _) = flow_derivative(model, &base, h, params, 1e-13, 500)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut pe = p0.clone();
        pe.axpy(eps, h);
        let sol = model.picard(&pe, &tight)?.path;
        let rem = sol.sub(&base)?.sub(&u.scaled(eps))?.norm(grid)?;
        rows.push(FdRow {
            eps,
            remainder: rem / (eps * h_norm),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.remainder).collect();
    Ok(FdTable {
        slope: loglog_slope(&xs, &ys),
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Representer {
    /// `γ_t = g_S(t)`.
    #[serde(skip)]
    pub gamma: DensityField,
    /// `Γ_t`, the collision contribution.
    #[serde(skip)]
    pub big_gamma: DensityField,
    #[serde(skip)]
    pub total: DensityField,
    pub sup_norm: f64,
    /// `c = ‖g‖_∞`.
    pub c: f64,
    /// `C = c κ / (1 − κ)`; infinite when `κ ≥ 1`.
    pub big_c: f64,
    pub kappa: f64,
    pub iterations: usize,
}

impl Representer {
    pub fn within_bound(&self) -> bool {
        self.sup_norm <= self.c + self.big_c
    }
}

/// `L^∞` representer of `h ↦ ⟨(∇p(p0)h)(t), g⟩` for the solution path `p`.
pub fn representer(
    model: &KineticModel,
    solution: &DensityPath,
    t: f64,
    g: &DensityField,
    params: &KineticParams,
) -> Result<Representer> {
    params.validate()?;
    let grid = model.grid();
    g.check_shape(grid)?;
    if !(0.0..=params.horizon.min(1.0) + 1e-12).contains(&t) {
        return Err(Error::Precondition(format!("t = {t} must lie in [0, 1]")));
    }
    let n_star = steps_for(t, model.dt())?;
    if n_star >= solution.len() {
        return Err(Error::LatticeMismatch(format!(
            "t = {t} beyond the solution horizon"
        )));
    }
    let k = model.knudsen();
    let q = model.collision();
    let scale = 2.0 * params.lambda * model.dt();

    // w_n for n = 0..=n_star; A_m = S^T(w_{m+1} + A_{m+1}), A_{n_star} = 0
    let backward = |w: &[DensityField]| -> Result<Vec<DensityField>> {
        let mut a = vec![DensityField::zeros(grid); n_star + 1];
        for m in (0..n_star).rev() {
            let s = w[m + 1].add(&a[m + 1]);
            a[m] = k.adjoint_step(&s)?;
        }
        Ok(a)
    };
    let seed = |n: usize| {
        if n == n_star {
            g.clone()
        } else {
            DensityField::zeros(grid)
        }
    };
    let mut w: Vec<DensityField> = (0..=n_star).map(seed).collect();
    let c = g.sup_norm();
    let mut iterations = 0;
    if params.lambda > 0.0 && n_star > 0 {
        loop {
            iterations += 1;
            let a = backward(&w)?;
            let mut next = Vec::with_capacity(n_star + 1);
            for m in 0..=n_star {
                let mut wm = seed(m);
                if m < n_star {
                    wm.axpy(scale, &q.adjoint_partner(solution.slice(m), &a[m])?);
                }
                next.push(wm);
            }
            let inc: f64 = next.iter().zip(&w).map(|(x, y)| x.sub(y).sup_norm()).sum();
            w = next;
            if inc <= 1e-14 * c.max(f64::MIN_POSITIVE) {
                break;
            }
            if iterations >= 500 {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: inc,
                });
            }
        }
    }
    let a = backward(&w)?;
    let total = w[0].add(&a[0]);
    let gamma = k.adjoint(g, n_star as f64 * model.dt())?;
    let big_gamma = total.sub(&gamma);

    let (b, h) = model.constants();
    let mut p_norm = 0.0f64;
    for f in &solution.fields()[..=n_star] {
        p_norm = p_norm.max(f.l1_norm(grid)?);
    }
    let kappa = 4.0 * params.lambda * t * h * b * p_norm;
    let big_c = if kappa < 1.0 {
        c * kappa / (1.0 - kappa)
    } else {
        f64::INFINITY
    };
    Ok(Representer {
        sup_norm: total.sup_norm(),
        gamma,
        big_gamma,
        total,
        c,
        big_c,
        kappa,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boltzmann::{admissible_lambda, LambdaMode};
    use crate::grid::{GridConfig, PhaseGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> KineticModel {
        KineticModel::standard(PhaseGrid::new(GridConfig::default()).unwrap(), 0.05).unwrap()
    }

    fn mode_a(m: &KineticModel) -> KineticParams {
        let (b, h) = m.constants();
        KineticParams {
            lambda: admissible_lambda(LambdaMode::A, 1.0, b, h, 0.0, 0.0).unwrap(),
            ..Default::default()
        }
    }

    fn probability(m: &KineticModel) -> DensityField {
        let g = m.grid();
        let f = DensityField::from_fn(g, |r, v| 1.0 + 0.5 * (r[0] - r[1]) * v[0]);
        let mass = f.mass(g).unwrap();
        f.scaled(1.0 / mass)
    }

    fn random_field(m: &KineticModel, rng: &mut ChaCha8Rng) -> DensityField {
        let g = m.grid();
        let f = DensityField::from_vec(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let n = f.l1_norm(g).unwrap();
        f.scaled(1.0 / n)
    }

    #[test]
    fn d1_basics() {
        let m = model();
        let params = mode_a(&m);
        let zero = d1_psi(&m, &DensityField::zeros(m.grid()), &params).unwrap();
        assert_eq!(zero.norm(m.grid()).unwrap(), 0.0);
        let h = probability(&m);
        let p = d1_psi(&m, &h, &params).unwrap();
        assert_eq!(p.slice(0), &h);
        assert!(p.norm(m.grid()).unwrap() <= h.l1_norm(m.grid()).unwrap() * (1.0 + 1e-14));
    }

    #[test]
    fn d2_operator_norm_at_most_half() {
        let m = model();
        let g = m.grid();
        let params = mode_a(&m);
        let p0 = probability(&m).scaled(1.5);
        let q = m.picard(&p0, &params).unwrap().path;
        assert!(q.norm(g).unwrap() <= 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let times = q.times().to_vec();
            let fields = times.iter().map(|_| random_field(&m, &mut rng)).collect();
            let h = DensityPath::new(times, fields).unwrap();
            let d = d2_psi(&m, &q, &h, &params).unwrap();
            assert!(d.norm(g).unwrap() / h.norm(g).unwrap() <= 0.5);
        }
        let zero = q.zeros_like();
        assert_eq!(d2_psi(&m, &q, &zero, &params).unwrap().norm(g).unwrap(), 0.0);
    }

    #[test]
    fn derivative_linear_and_geometric() {
        let m = model();
        let g = m.grid();
        let params = mode_a(&m);
        let p0 = probability(&m);
        let p = m.picard(&p0, &params).unwrap().path;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = random_field(&m, &mut rng);
        let (u, rep) = flow_derivative(&m, &p, &h, &params, 1e-10, 200).unwrap();
        assert!(rep.max_ratio() <= 0.55, "{:?}", rep.ratios);
        let (u3, _) = flow_derivative(&m, &p, &h.scaled(-3.0), &params, 1e-10, 200).unwrap();
        let diff = u3.sub(&u.scaled(-3.0)).unwrap().norm(g).unwrap();
        assert!(diff <= 1e-12 * u3.norm(g).unwrap(), "{diff}");
        for k in 1..4 {
            let (uk, _) = flow_derivative_partial(&m, &p, &h, &params, 0.0, 200, Some(k)).unwrap();
            let err = uk.sub(&u).unwrap().norm(g).unwrap();
            assert!(err <= 2.0 * 0.5f64.powi(k as i32 + 1) * h.l1_norm(g).unwrap());
        }
    }

    #[test]
    fn fd_remainder_is_first_order() {
        let m = model();
        let params = mode_a(&m);
        let p0 = probability(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = random_field(&m, &mut rng);
        let table = fd_validate(&m, &p0, &h, &[1e-2, 1e-3, 1e-4], &params, 1e-13).unwrap();
        assert!((0.8..=1.2).contains(&table.slope), "{table:?}");
        assert!(table.monotone());
        assert!(fd_validate(&m, &p0, &DensityField::zeros(m.grid()), &[1e-2, 1e-3], &params, 1e-13).is_err());
    }

    #[test]
    fn representer_duality_and_bound() {
        let m = model();
        let grid = m.grid();
        let params = mode_a(&m);
        let nu = probability(&m);
        let p = m.picard(&nu, &params).unwrap().path;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let gfun = random_field(&m, &mut rng).scaled(grid.len() as f64);
        let t = 0.5;
        let rep = representer(&m, &p, t, &gfun, &params).unwrap();
        assert!(rep.within_bound(), "{} > {} + {}", rep.sup_norm, rep.c, rep.big_c);
        let n = steps_for(t, m.dt()).unwrap();
        for _ in 0..3 {
            let h = random_field(&m, &mut rng);
            let (u, _) = flow_derivative(&m, &p, &h, &params, 1e-13, 500).unwrap();
            let lhs = u.slice(n).inner(&gfun, grid).unwrap();
            let rhs = h.inner(&rep.total, grid).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1e-12), "{lhs} {rhs}");
        }
        let free = representer(&m, &p, t, &gfun, &KineticParams { lambda: 0.0, ..params }).unwrap();
        assert_eq!(free.big_gamma.sup_norm(), 0.0);
    }
}
