//! Discrete phase space Ω×V.
//!
//! Ω is the open rectangle (0,lx)×(0,ly) split into `nx*ny` equal cells with
//! nodes at the cell centres. V is the annulus `v_min < |v| < v_max`, laid out
//! in polar coordinates with midpoint nodes in speed and angle; the velocity
//! weight of a node is `|v| Δs Δθ`. A field is stored cell-major: the entry of
//! node `(cell, vel)` lives at `cell * n_vel + vel`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_speed: usize,
    pub n_angle: usize,
    pub n_e: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub lx: f64,
    pub ly: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nx: 8,
            ny: 8,
            n_speed: 4,
            n_angle: 8,
            n_e: 8,
            v_min: 1.0,
            v_max: 2.0,
            lx: 1.0,
            ly: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("nx", self.nx),
            ("ny", self.ny),
            ("n_speed", self.n_speed),
            ("n_angle", self.n_angle),
            ("n_e", self.n_e),
        ];
        for (name, n) in counts {
            if n < 2 {
                return Err(Error::InvalidConfig(format!("{name} = {n} must be >= 2")));
            }
        }
        if !(self.lx > 0.0 && self.ly > 0.0 && self.lx.is_finite() && self.ly.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "domain extents must be positive, got lx = {}, ly = {}",
                self.lx, self.ly
            )));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max && self.v_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < v_min < v_max, got v_min = {}, v_max = {}",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub fn normal(self) -> Vec2 {
        match self {
            Side::Bottom => [0.0, -1.0],
            Side::Right => [1.0, 0.0],
            Side::Top => [0.0, 1.0],
            Side::Left => [-1.0, 0.0],
        }
    }
}

/// One boundary edge of a wall-adjacent cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPatch {
    pub side: Side,
    /// Position along the side, counted from the origin corner.
    pub offset: usize,
    pub midpoint: Vec2,
    pub normal: Vec2,
    pub length: f64,
    /// The interior cell sharing this edge.
    pub cell: usize,
}

#[derive(Debug, Clone)]
pub struct PhaseGrid {
    config: GridConfig,
    hx: f64,
    hy: f64,
    centers: Vec<Vec2>,
    cell_volumes: Vec<f64>,
    velocities: Vec<Vec2>,
    vel_weights: Vec<f64>,
    patches: Vec<BoundaryPatch>,
    directions: Vec<Vec2>,
}

impl PhaseGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let GridConfig {
            nx,
            ny,
            n_speed,
            n_angle,
            n_e,
            v_min,
            v_max,
            lx,
            ly,
        } = config;
        let hx = lx / nx as f64;
        let hy = ly / ny as f64;

        let mut centers = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                centers.push([(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy]);
            }
        }
        let cell_volumes = vec![hx * hy; nx * ny];

        let ds = (v_max - v_min) / n_speed as f64;
        let dtheta = 2.0 * PI / n_angle as f64;
        let mut velocities = Vec::with_capacity(n_speed * n_angle);
        let mut vel_weights = Vec::with_capacity(n_speed * n_angle);
        for a in 0..n_speed {
            let s = v_min + (a as f64 + 0.5) * ds;
            for b in 0..n_angle {
                let th = (b as f64 + 0.5) * dtheta;
                velocities.push([s * th.cos(), s * th.sin()]);
                vel_weights.push(s * ds * dtheta);
            }
        }

        let mut patches = Vec::with_capacity(2 * (nx + ny));
        for i in 0..nx {
            patches.push(BoundaryPatch {
                side: Side::Bottom,
                offset: i,
                midpoint: [(i as f64 + 0.5) * hx, 0.0],
                normal: Side::Bottom.normal(),
                length: hx,
                cell: i,
            });
        }
        for j in 0..ny {
            patches.push(BoundaryPatch {
                side: Side::Right,
                offset: j,
                midpoint: [lx, (j as f64 + 0.5) * hy],
                normal: Side::Right.normal(),
                length: hy,
                cell: j * nx + nx - 1,
            });
        }
        for i in 0..nx {
            patches.push(BoundaryPatch {
                side: Side::Top,
                offset: i,
                midpoint: [(i as f64 + 0.5) * hx, ly],
                normal: Side::Top.normal(),
                length: hx,
                cell: (ny - 1) * nx + i,
            });
        }
        for j in 0..ny {
            patches.push(BoundaryPatch {
                side: Side::Left,
                offset: j,
                midpoint: [0.0, (j as f64 + 0.5) * hy],
                normal: Side::Left.normal(),
                length: hy,
                cell: j * nx,
            });
        }

        let de = 2.0 * PI / n_e as f64;
        let directions = (0..n_e)
            .map(|k| {
                let phi = (k as f64 + 0.5) * de;
                [phi.cos(), phi.sin()]
            })
            .collect();

        Ok(Self {
            config,
            hx,
            hy,
            centers,
            cell_volumes,
            velocities,
            vel_weights,
            patches,
            directions,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.hx, self.hy)
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn n_vel(&self) -> usize {
        self.velocities.len()
    }

    /// Number of phase-space nodes.
    pub fn len(&self) -> usize {
        self.n_cells() * self.n_vel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn node(&self, cell: usize, vel: usize) -> usize {
        cell * self.n_vel() + vel
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.config.nx + i
    }

    pub fn centers(&self) -> &[Vec2] {
        &self.centers
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volumes
    }

    pub fn velocities(&self) -> &[Vec2] {
        &self.velocities
    }

    pub fn velocity_weights(&self) -> &[f64] {
        &self.vel_weights
    }

    pub fn patches(&self) -> &[BoundaryPatch] {
        &self.patches
    }

    /// Scattering-direction nodes on the unit circle.
    pub fn directions(&self) -> &[Vec2] {
        &self.directions
    }

    /// Quadrature weight of a phase-space node.
    #[inline]
    pub fn weight(&self, node: usize) -> f64 {
        let nv = self.n_vel();
        self.cell_volumes[node / nv] * self.vel_weights[node % nv]
    }

    pub fn domain_area(&self) -> f64 {
        self.config.lx * self.config.ly
    }

    pub fn velocity_area(&self) -> f64 {
        PI * (self.config.v_max.powi(2) - self.config.v_min.powi(2))
    }

    pub fn min_cell_size(&self) -> f64 {
        self.hx.min(self.hy)
    }

    /// Whether `v` lies in the open annulus.
    pub fn in_velocity_space(&self, v: Vec2) -> bool {
        let s = norm(v);
        s > self.config.v_min && s < self.config.v_max
    }

    /// Polar node whose (speed, angle) cell contains `v`; `None` outside the annulus.
    pub fn velocity_node_of(&self, v: Vec2) -> Option<usize> {
        if !self.in_velocity_space(v) {
            return None;
        }
        let c = &self.config;
        let ds = (c.v_max - c.v_min) / c.n_speed as f64;
        let a = (((norm(v) - c.v_min) / ds).floor() as usize).min(c.n_speed - 1);
        let mut th = v[1].atan2(v[0]);
        if th < 0.0 {
            th += 2.0 * PI;
        }
        let b = ((th / (2.0 * PI / c.n_angle as f64)).floor() as usize).min(c.n_angle - 1);
        Some(a * c.n_angle + b)
    }
}

/// A real value per phase-space node.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    values: Vec<f64>,
}

impl DensityField {
    pub fn zeros(grid: &PhaseGrid) -> Self {
        Self {
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: &PhaseGrid, value: f64) -> Self {
        Self {
            values: vec![value; grid.len()],
        }
    }

    /// Normalised uniform density `1/(|Ω||V|)` (using the discrete measure).
    pub fn uniform_probability(grid: &PhaseGrid) -> Self {
        let total: f64 = (0..grid.len()).map(|n| grid.weight(n)).sum();
        Self::constant(grid, 1.0 / total)
    }

    pub fn from_fn(grid: &PhaseGrid, mut f: impl FnMut(Vec2, Vec2) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for &r in grid.centers() {
            for &v in grid.velocities() {
                values.push(f(r, v));
            }
        }
        Self { values }
    }

    pub fn from_vec(grid: &PhaseGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn check_shape(&self, grid: &PhaseGrid) -> Result<()> {
        if self.values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DensityField) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> DensityField {
        Self {
            values: self.values.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn sub(&self, other: &DensityField) -> DensityField {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &DensityField) -> DensityField {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn weighted_sum(&self, grid: &PhaseGrid, f: impl Fn(f64) -> f64) -> f64 {
        let nv = grid.n_vel();
        let wv = grid.velocity_weights();
        let mut total = 0.0;
        for (cell, wc) in grid.cell_volumes().iter().enumerate() {
            let row = &self.values[cell * nv..(cell + 1) * nv];
            let mut s = 0.0;
            for (x, w) in row.iter().zip(wv) {
                s += f(*x) * w;
            }
            total += wc * s;
        }
        total
    }

    pub fn mass(&self, grid: &PhaseGrid) -> Result<f64> {
        self.check_shape(grid)?;
        Ok(self.weighted_sum(grid, |x| x))
    }

    pub fn l1_norm(&self, grid: &PhaseGrid) -> Result<f64> {
        self.check_shape(grid)?;
        Ok(self.weighted_sum(grid, f64::abs))
    }

    /// Weighted inner product `Σ w f g`.
    pub fn inner(&self, other: &DensityField, grid: &PhaseGrid) -> Result<f64> {
        self.check_shape(grid)?;
        other.check_shape(grid)?;
        let mut total = 0.0;
        let nv = grid.n_vel();
        let wv = grid.velocity_weights();
        for (cell, wc) in grid.cell_volumes().iter().enumerate() {
            let mut s = 0.0;
            for v in 0..nv {
                let n = cell * nv + v;
                s += self.values[n] * other.values[n] * wv[v];
            }
            total += wc * s;
        }
        Ok(total)
    }
}

/// `∫∫ f dv dr` with the grid quadrature.
pub fn mass(field: &DensityField, grid: &PhaseGrid) -> Result<f64> {
    field.mass(grid)
}

/// Fields on the time lattice `0, dt, ..., T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    times: Vec<f64>,
    fields: Vec<DensityField>,
}

impl DensityPath {
    pub fn new(times: Vec<f64>, fields: Vec<DensityField>) -> Result<Self> {
        if times.len() != fields.len() {
            return Err(Error::LatticeMismatch(format!(
                "{} time stamps for {} fields",
                times.len(),
                fields.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::LatticeMismatch(
                "time stamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, fields })
    }

    /// The path that equals `field` at every lattice time.
    pub fn constant(times: Vec<f64>, field: &DensityField) -> Result<Self> {
        let fields = vec![field.clone(); times.len()];
        Self::new(times, fields)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            times: self.times.clone(),
            fields: self
                .fields
                .iter()
                .map(|f| DensityField {
                    values: vec![0.0; f.len()],
                })
                .collect(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn fields(&self) -> &[DensityField] {
        &self.fields
    }

    pub fn fields_mut(&mut self) -> &mut [DensityField] {
        &mut self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn slice(&self, n: usize) -> &DensityField {
        &self.fields[n]
    }

    pub fn last(&self) -> Option<&DensityField> {
        self.fields.last()
    }

    pub fn same_lattice(&self, other: &DensityPath) -> bool {
        self.times == other.times
    }

    pub fn scaled(&self, alpha: f64) -> DensityPath {
        Self {
            times: self.times.clone(),
            fields: self.fields.iter().map(|f| f.scaled(alpha)).collect(),
        }
    }

    pub fn sub(&self, other: &DensityPath) -> Result<DensityPath> {
        if !self.same_lattice(other) {
            return Err(Error::LatticeMismatch("paths on different lattices".into()));
        }
        Ok(Self {
            times: self.times.clone(),
            fields: self
                .fields
                .iter()
                .zip(&other.fields)
                .map(|(a, b)| a.sub(b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DensityPath) -> Result<DensityPath> {
        if !self.same_lattice(other) {
            return Err(Error::LatticeMismatch("paths on different lattices".into()));
        }
        Ok(Self {
            times: self.times.clone(),
            fields: self
                .fields
                .iter()
                .zip(&other.fields)
                .map(|(a, b)| a.add(b))
                .collect(),
        })
    }

    /// `max_t ‖f(t)‖_{L¹}` over the stored times.
    pub fn norm(&self, grid: &PhaseGrid) -> Result<f64> {
        if self.fields.is_empty() {
            return Err(Error::Precondition("path norm of an empty path".into()));
        }
        let mut m = 0.0f64;
        for f in &self.fields {
            m = m.max(f.l1_norm(grid)?);
        }
        Ok(m)
    }
}

pub fn path_norm(path: &DensityPath, grid: &PhaseGrid) -> Result<f64> {
    path.norm(grid)
}

/// `0, dt, ..., horizon`; the horizon must be a whole number of steps.
pub fn time_lattice(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0 && horizon >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need dt > 0 and horizon >= 0, got dt = {dt}, horizon = {horizon}"
        )));
    }
    let steps = steps_for(horizon, dt)?;
    Ok((0..=steps).map(|n| n as f64 * dt).collect())
}

/// Number of `dt` steps covering `t`, exact when `t` is a multiple of `dt`.
pub fn steps_for(t: f64, dt: f64) -> Result<usize> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Precondition(format!("time {t} must be >= 0")));
    }
    let ratio = t / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        Ok(rounded as usize)
    } else {
        Ok(ratio.ceil() as usize)
    }
}
