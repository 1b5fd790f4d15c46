//! Mollified cutoff collision operator.
//!
//! Events `(r, y, v, v1, e)` are processed in exchange form: the loss at
//! `(r,v)` is moved, mass for mass, to the velocity node whose polar cell
//! contains `v*`. Every event therefore conserves mass exactly. The admissibility
//! indicator is evaluated on the exact post-collision pair.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{dot, norm, DensityField, PhaseGrid, Vec2};

/// `v* = v + (e∘(v1−v)) e`, `v1* = v1 + (e∘(v−v1)) e`.
pub fn post_collision(v: Vec2, v1: Vec2, e: Vec2) -> (Vec2, Vec2) {
    let a = dot(e, [v1[0] - v[0], v1[1] - v[1]]);
    (
        [v[0] + a * e[0], v[1] + a * e[1]],
        [v1[0] - a * e[0], v1[1] - a * e[1]],
    )
}

/// `B(v,v1,e) = scale·|e∘(v1−v)|` and the quartic bump `h_γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionKernel {
    pub gamma: f64,
    pub b_scale: f64,
}

impl Default for CollisionKernel {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            b_scale: 1.0,
        }
    }
}

impl CollisionKernel {
    pub fn b(&self, v: Vec2, v1: Vec2, e: Vec2) -> f64 {
        self.b_scale * dot(e, [v1[0] - v[0], v1[1] - v[1]]).abs()
    }

    pub fn h(&self, r: Vec2, y: Vec2) -> f64 {
        let d = norm([r[0] - y[0], r[1] - y[1]]) / self.gamma;
        if d >= 1.0 {
            0.0
        } else {
            (1.0 - d * d).powi(2)
        }
    }
}

/// Sup norms `(‖B‖, ‖h_γ‖)` by sampling: B over the closed annulus with `e`
/// aligned to `v1 − v`, and `h_γ` over distances in `[0, γ]`.
pub fn kernel_constants(kernel: &CollisionKernel, grid: &PhaseGrid) -> (f64, f64) {
    let c = grid.config();
    let n_s = 9;
    let n_a = 64;
    let mut pts = Vec::with_capacity(n_s * n_a);
    for i in 0..n_s {
        let s = c.v_min + (c.v_max - c.v_min) * i as f64 / (n_s - 1) as f64;
        for j in 0..n_a {
            let th = 2.0 * std::f64::consts::PI * j as f64 / n_a as f64;
            pts.push([s * th.cos(), s * th.sin()]);
        }
    }
    pts.extend_from_slice(grid.velocities());
    let mut b_max = 0.0f64;
    for &v in &pts {
        for &v1 in &pts {
            let d = [v1[0] - v[0], v1[1] - v[1]];
            let l = norm(d);
            if l > 0.0 {
                let e = [-d[0] / l, -d[1] / l];
                b_max = b_max.max(kernel.b(v, v1, e));
            }
            for &e in grid.directions() {
                b_max = b_max.max(kernel.b(v, v1, e));
            }
        }
    }
    let mut h_max = 0.0f64;
    for i in 0..=1000 {
        let d = kernel.gamma * i as f64 / 1000.0;
        h_max = h_max.max(kernel.h([0.0, 0.0], [d, 0.0]));
    }
    (b_max, h_max)
}

/// Precomputed event tables for one grid and kernel.
#[derive(Debug, Clone)]
pub struct Collision {
    n_cells: usize,
    n_vel: usize,
    wv: Vec<f64>,
    /// Per cell `r`: `(y, h_γ(r,y)·|cell y|)`.
    neighbors: Vec<Vec<(usize, f64)>>,
    /// Per `v * n_vel + v1`: `(k, w_{v1} Σ_e w_e B χ)` over target nodes `k ≠ v`.
    events: Vec<Vec<(usize, f64)>>,
    b_norm: f64,
    h_norm: f64,
}

impl Collision {
    pub fn new(grid: &PhaseGrid, kernel: &CollisionKernel) -> Self {
        let centers = grid.centers();
        let vols = grid.cell_volumes();
        let neighbors = centers
            .iter()
            .map(|&r| {
                centers
                    .iter()
                    .enumerate()
                    .filter_map(|(y, &cy)| {
                        let h = kernel.h(r, cy);
                        (h > 0.0).then(|| (y, h * vols[y]))
                    })
                    .collect()
            })
            .collect();

        let vels = grid.velocities();
        let wv = grid.velocity_weights();
        let nv = vels.len();
        let mut events = Vec::with_capacity(nv * nv);
        for &v in vels {
            for (j, &v1) in vels.iter().enumerate() {
                let rel = [v1[0] - v[0], v1[1] - v[1]];
                let admissible: Vec<Vec2> = grid
                    .directions()
                    .iter()
                    .copied()
                    .filter(|&e| dot(e, rel) <= 0.0)
                    .collect();
                let mut acc: Vec<(usize, f64)> = Vec::new();
                if norm(rel) > 0.0 && !admissible.is_empty() {
                    let we = 1.0 / admissible.len() as f64;
                    for e in admissible {
                        let (vs, v1s) = post_collision(v, v1, e);
                        if !(grid.in_velocity_space(vs) && grid.in_velocity_space(v1s)) {
                            continue;
                        }
                        let b = kernel.b(v, v1, e);
                        if b == 0.0 {
                            continue;
                        }
                        let k = grid.velocity_node_of(vs).expect("v* inside annulus");
                        match acc.iter_mut().find(|(kk, _)| *kk == k) {
                            Some(entry) => entry.1 += wv[j] * we * b,
                            None => acc.push((k, wv[j] * we * b)),
                        }
                    }
                }
                events.push(acc);
            }
        }
        // the self-target exchange moves no mass
        for (idx, list) in events.iter_mut().enumerate() {
            let v = idx / nv;
            list.retain(|(k, _)| *k != v);
        }

        let (b_norm, h_norm) = kernel_constants(kernel, grid);
        Self {
            n_cells: grid.n_cells(),
            n_vel: nv,
            wv: wv.to_vec(),
            neighbors,
            events,
            b_norm,
            h_norm,
        }
    }

    pub fn constants(&self) -> (f64, f64) {
        (self.b_norm, self.h_norm)
    }

    fn check(&self, f: &DensityField) -> Result<()> {
        let n = self.n_cells * self.n_vel;
        if f.len() != n {
            return Err(crate::Error::ShapeMismatch {
                expected: n,
                got: f.len(),
            });
        }
        Ok(())
    }

    /// `Σ_y h_γ(r,y)|y| f(y,·)` for one cell.
    fn smooth(&self, f: &[f64], r: usize) -> Vec<f64> {
        let nv = self.n_vel;
        let mut out = vec![0.0; nv];
        for &(y, h) in &self.neighbors[r] {
            let row = &f[y * nv..(y + 1) * nv];
            for (o, x) in out.iter_mut().zip(row) {
                *o += h * x;
            }
        }
        out
    }

    /// `Q(p, q)`.
    pub fn apply(&self, p: &DensityField, q: &DensityField) -> Result<DensityField> {
        self.check(p)?;
        self.check(q)?;
        let nv = self.n_vel;
        let (pv, qv) = (p.values(), q.values());
        let rows: Vec<Vec<f64>> = (0..self.n_cells)
            .into_par_iter()
            .map(|r| {
                let ps = self.smooth(pv, r);
                let qs = self.smooth(qv, r);
                let pr = &pv[r * nv..(r + 1) * nv];
                let qr = &qv[r * nv..(r + 1) * nv];
                let mut out = vec![0.0; nv];
                for v in 0..nv {
                    for v1 in 0..nv {
                        let a = pr[v] * qs[v1] + qr[v] * ps[v1];
                        if a == 0.0 {
                            continue;
                        }
                        for &(k, coef) in &self.events[v * nv + v1] {
                            let rate = 0.5 * coef * a;
                            out[v] -= rate;
                            out[k] += rate * self.wv[v] / self.wv[k];
                        }
                    }
                }
                out
            })
            .collect();
        Ok(DensityField::from_raw(rows.concat()))
    }

    /// Adjoint of `h ↦ Q(h, p)` in the weighted inner product, applied to `g`.
    pub fn adjoint_partner(&self, p: &DensityField, g: &DensityField) -> Result<DensityField> {
        self.check(p)?;
        self.check(g)?;
        let nv = self.n_vel;
        let (pv, gv) = (p.values(), g.values());
        // term from h(r,v); E(r,v1) carries the term from the smoothed h(y,v1)
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..self.n_cells)
            .into_par_iter()
            .map(|r| {
                let ps = self.smooth(pv, r);
                let pr = &pv[r * nv..(r + 1) * nv];
                let gr = &gv[r * nv..(r + 1) * nv];
                let mut local = vec![0.0; nv];
                let mut e = vec![0.0; nv];
                for v in 0..nv {
                    for v1 in 0..nv {
                        let mut d = 0.0;
                        for &(k, coef) in &self.events[v * nv + v1] {
                            d += coef * (gr[k] - gr[v]);
                        }
                        d *= 0.5;
                        local[v] += d * ps[v1];
                        e[v1] += d * self.wv[v] * pr[v];
                    }
                }
                (local, e)
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..self.n_cells)
            .into_par_iter()
            .map(|y| {
                let mut out = parts[y].0.clone();
                // neighbours of y carry h_γ(y,r)·|cell r|, the transposed weight
                for &(r, h) in &self.neighbors[y] {
                    let e = &parts[r].1;
                    for v1 in 0..nv {
                        out[v1] += h * e[v1] / self.wv[v1];
                    }
                }
                out
            })
            .collect();
        Ok(DensityField::from_raw(rows.concat()))
    }
}

/// `Q(p, q)` with tables built on the fly.
pub fn collision_q(
    p: &DensityField,
    q: &DensityField,
    kernel: &CollisionKernel,
    grid: &PhaseGrid,
) -> Result<DensityField> {
    p.check_shape(grid)?;
    q.check_shape(grid)?;
    Collision::new(grid, kernel).apply(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PhaseGrid, Collision) {
        let g = PhaseGrid::new(GridConfig::default()).unwrap();
        let c = Collision::new(&g, &CollisionKernel::default());
        (g, c)
    }

    fn random_field(g: &PhaseGrid, rng: &mut ChaCha8Rng) -> DensityField {
        let v = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        DensityField::from_vec(g, v).unwrap()
    }

    fn unit(th: f64) -> Vec2 {
        [th.cos(), th.sin()]
    }

    proptest! {
        #[test]
        fn post_collision_involution_and_invariants(
            a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -2.0..2.0f64,
            th in 0.0..std::f64::consts::TAU,
        ) {
            let (v, v1, e) = ([a, b], [c, d], unit(th));
            let (vs, v1s) = post_collision(v, v1, e);
            let (vv, vv1) = post_collision(vs, v1s, e);
            for i in 0..2 {
                prop_assert!((vv[i] - v[i]).abs() < 1e-14);
                prop_assert!((vv1[i] - v1[i]).abs() < 1e-14);
                prop_assert!((vs[i] + v1s[i] - v[i] - v1[i]).abs() < 1e-14);
            }
            let en0 = dot(v, v) + dot(v1, v1);
            let en1 = dot(vs, vs) + dot(v1s, v1s);
            prop_assert!((en0 - en1).abs() < 1e-13);
            let k = CollisionKernel::default();
            prop_assert!((k.b(v, v1, e) - k.b(v1, v, e)).abs() < 1e-14);
            prop_assert!((k.b(vs, v1s, e) - k.b(v, v1, e)).abs() < 1e-12);
        }
    }

    #[test]
    fn perpendicular_direction_is_identity() {
        let (v, v1) = ([1.0, 0.0], [1.0, 1.5]);
        let (vs, v1s) = post_collision(v, v1, [1.0, 0.0]);
        assert_eq!((vs, v1s), (v, v1));
    }

    #[test]
    fn constants_match_analytic() {
        let g = PhaseGrid::new(GridConfig::default()).unwrap();
        let k = CollisionKernel::default();
        let (b, h) = kernel_constants(&k, &g);
        assert!((b - 4.0).abs() < 1e-12, "{b}");
        assert_eq!(h, 1.0);
        let k2 = CollisionKernel {
            b_scale: 2.0,
            ..k
        };
        assert!((kernel_constants(&k2, &g).0 - 2.0 * b).abs() < 1e-12);
    }

    #[test]
    fn mollifier_support_and_symmetry() {
        let k = CollisionKernel::default();
        assert_eq!(k.h([0.0, 0.0], [0.3, 0.0]), 0.0);
        assert_eq!(k.h([0.1, 0.2], [0.3, 0.1]), k.h([0.3, 0.1], [0.1, 0.2]));
        assert!(k.h([0.0, 0.0], [0.1, 0.0]) > 0.0);
    }

    #[test]
    fn conservation_symmetry_and_bound() {
        let (g, c) = setup();
        let (b, h) = c.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let p = random_field(&g, &mut rng);
            let q = random_field(&g, &mut rng);
            let pq = c.apply(&p, &q).unwrap();
            let qp = c.apply(&q, &p).unwrap();
            assert_eq!(pq, qp);
            assert!(pq.mass(&g).unwrap().abs() < 1e-13);
            let bound = 2.0 * h * b * p.l1_norm(&g).unwrap() * q.l1_norm(&g).unwrap();
            assert!(pq.l1_norm(&g).unwrap() <= bound);
        }
    }

    #[test]
    fn bilinear() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, p2, q) = (
            random_field(&g, &mut rng),
            random_field(&g, &mut rng),
            random_field(&g, &mut rng),
        );
        let mut comb = p.scaled(0.3);
        comb.axpy(-1.7, &p2);
        let lhs = c.apply(&comb, &q).unwrap();
        let mut rhs = c.apply(&p, &q).unwrap().scaled(0.3);
        rhs.axpy(-1.7, &c.apply(&p2, &q).unwrap());
        assert!(lhs.sub(&rhs).sup_norm() < 1e-12 * rhs.sup_norm().max(1.0));
    }

    #[test]
    fn locality() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_field(&g, &mut rng);
        let q = random_field(&g, &mut rng);
        let r = g.cell_index(0, 0);
        let far = g.cell_index(7, 7);
        let mut q2 = q.clone();
        for v in 0..g.n_vel() {
            q2.values_mut()[g.node(far, v)] += 5.0;
        }
        let a = c.apply(&p, &q).unwrap();
        let b = c.apply(&p, &q2).unwrap();
        let nv = g.n_vel();
        assert_eq!(a.values()[r * nv..(r + 1) * nv], b.values()[r * nv..(r + 1) * nv]);
    }

    #[test]
    fn constant_density_defect_is_small() {
        // gain and loss cancel per event only in the continuum; the projection
        // of v* leaves an O(h) residue that must stay well below the loss
        let (g, c) = setup();
        let p = DensityField::constant(&g, 1.0);
        let q = c.apply(&p, &p).unwrap();
        let (b, h) = c.constants();
        let scale = 2.0 * b * h * p.l1_norm(&g).unwrap().powi(2);
        assert!(q.mass(&g).unwrap().abs() < 1e-12);
        assert!(q.l1_norm(&g).unwrap() < 0.25 * scale);
    }

    #[test]
    fn adjoint_partner_duality() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let (p, h, gg) = (
                random_field(&g, &mut rng),
                random_field(&g, &mut rng),
                random_field(&g, &mut rng),
            );
            let lhs = c.apply(&h, &p).unwrap().inner(&gg, &g).unwrap();
            let rhs = h.inner(&c.adjoint_partner(&p, &gg).unwrap(), &g).unwrap();
            assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0), "{lhs} {rhs}");
        }
    }
}
