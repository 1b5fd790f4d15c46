use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;

use kinflow_core::boltzmann::LambdaMode;
use kinflow_core::grid::GridConfig;
use kinflow_core::spectral::{
    ConstantFn, Cylinder, Domain, GaussianFn, LinearFn, ProductFn, SineFn, DEFAULT_EVAL_POINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    BoltzmannSolve,
    BoltzmannDerivativeCheck,
    KnudsenStationary,
    FvFlow,
    FvQuasiInvariance,
    FvIbp,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::BoltzmannSolve => "boltzmann-solve",
            Experiment::BoltzmannDerivativeCheck => "boltzmann-derivative-check",
            Experiment::KnudsenStationary => "knudsen-stationary",
            Experiment::FvFlow => "fv-flow",
            Experiment::FvQuasiInvariance => "fv-quasi-invariance",
            Experiment::FvIbp => "fv-ibp",
        }
    }
}

/// One experiment run. Blocks not used by the experiment are ignored.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub kinetic: KineticBlock,
    #[serde(default)]
    pub derivative: DerivativeBlock,
    #[serde(default)]
    pub knudsen: KnudsenBlock,
    #[serde(default)]
    pub spectral: SpectralBlock,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub ibp: IbpBlock,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("malformed experiment config")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    Uniform,
    /// `1 + a·cos(πx/lx)·(1 + 0.3|vy|)`, normalised.
    Smooth { amplitude: f64 },
    /// Node-wise `1 + a·U(−1,1)` from the run seed, normalised.
    Random { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticBlock {
    /// Explicit collision strength; derived from `lambda_mode` when absent.
    pub lambda: Option<f64>,
    /// Regime whose admissible strength is used and certified.
    pub lambda_mode: Option<LambdaMode>,
    pub horizon: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub gamma: f64,
    pub b_scale: f64,
    pub initial: InitialData,
}

impl Default for KineticBlock {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_mode: None,
            horizon: 1.0,
            dt: 0.05,
            tol: 1e-8,
            max_iter: 200,
            gamma: 0.3,
            b_scale: 1.0,
            initial: InitialData::Smooth { amplitude: 0.6 },
        }
    }
}

impl KineticBlock {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            ensure!(l >= 0.0 && l.is_finite(), "kinetic.lambda = {l} must be finite and >= 0");
        }
        ensure!(
            self.gamma > 0.0 && self.gamma.is_finite(),
            "kinetic.gamma = {} must be positive",
            self.gamma
        );
        ensure!(
            self.b_scale > 0.0 && self.b_scale.is_finite(),
            "kinetic.b_scale = {} must be positive",
            self.b_scale
        );
        match self.initial {
            InitialData::Uniform => {}
            InitialData::Smooth { amplitude } | InitialData::Random { amplitude } => ensure!(
                (0.0..1.0).contains(&amplitude),
                "kinetic.initial.amplitude = {amplitude} must lie in [0, 1) to keep the data positive"
            ),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerivativeBlock {
    pub eps: Vec<f64>,
    /// Picard tolerance for the perturbed solves.
    pub solve_tol: f64,
    /// Neumann tolerance relative to the free part.
    pub tol: f64,
    pub max_iter: usize,
    /// Observation time of the representer.
    pub t: f64,
    /// Random directions in the duality check.
    pub directions: usize,
}

impl Default for DerivativeBlock {
    fn default() -> Self {
        Self {
            eps: vec![1e-2, 1e-3, 1e-4],
            solve_tol: 1e-13,
            tol: 1e-10,
            max_iter: 200,
            t: 0.5,
            directions: 3,
        }
    }
}

impl DerivativeBlock {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eps.len() >= 2 && self.eps.iter().all(|e| *e > 0.0 && *e < 1.0),
            "derivative.eps needs at least two values in (0, 1)"
        );
        ensure!(self.solve_tol > 0.0 && self.tol > 0.0, "derivative tolerances must be positive");
        ensure!(self.max_iter > 0 && self.directions > 0, "derivative.max_iter and directions must be >= 1");
        ensure!((0.0..=1.0).contains(&self.t), "derivative.t = {} must lie in [0, 1]", self.t);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnudsenBlock {
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
    pub adjoint_time: f64,
}

impl Default for KnudsenBlock {
    fn default() -> Self {
        Self {
            dt: 0.05,
            tol: 1e-10,
            max_iter: 200_000,
            samples: 5,
            adjoint_time: 0.3,
        }
    }
}

impl KnudsenBlock {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tol > 0.0 && self.max_iter > 0, "knudsen.tol and max_iter must be positive");
        ensure!(self.samples > 0, "knudsen.samples must be >= 1");
        ensure!(self.adjoint_time >= 0.0, "knudsen.adjoint_time must be >= 0");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralBlock {
    pub domain: Domain,
    pub j: usize,
    pub eval_points: usize,
    /// Added to the ground-state coefficients of modes 2, 3, ...
    pub amplitudes: Vec<f64>,
    pub t_max: f64,
    pub n_times: usize,
}

impl Default for SpectralBlock {
    fn default() -> Self {
        Self {
            domain: Domain::default(),
            j: 8,
            eval_points: DEFAULT_EVAL_POINTS,
            amplitudes: vec![0.2, 0.02],
            t_max: 5.0,
            n_times: 50,
        }
    }
}

impl SpectralBlock {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.j >= 2, "spectral.j = {} must be >= 2", self.j);
        ensure!(
            self.amplitudes.len() < self.j,
            "spectral.amplitudes has {} entries but only {} modes follow the ground state",
            self.amplitudes.len(),
            self.j - 1
        );
        ensure!(self.t_max > 0.0 && self.n_times > 0, "spectral.t_max and n_times must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleBlock {
    pub j: usize,
    /// Half-widths of the bump; chosen automatically when absent.
    pub widths: Option<Vec<f64>>,
    pub eval_points: usize,
    /// Points in the change-of-measure comparison.
    pub points: usize,
    pub t_max: f64,
    /// Box scaling for drawing comparison points.
    pub shrink: f64,
    pub h_max: f64,
    pub tol: f64,
    pub composition_points: usize,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            j: 4,
            widths: None,
            eval_points: DEFAULT_EVAL_POINTS,
            points: 100,
            t_max: 0.5,
            shrink: 0.8,
            h_max: 1e-3,
            tol: 1e-11,
            composition_points: 5,
        }
    }
}

impl EnsembleBlock {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.j >= 2, "ensemble.j = {} must be >= 2", self.j);
        if let Some(w) = &self.widths {
            ensure!(
                w.len() == self.j - 1,
                "ensemble.widths needs {} entries, got {}",
                self.j - 1,
                w.len()
            );
        }
        ensure!(self.points > 0, "ensemble.points must be >= 1");
        ensure!(self.t_max >= 0.0, "ensemble.t_max must be >= 0");
        ensure!(self.shrink > 0.0 && self.shrink <= 1.0, "ensemble.shrink must lie in (0, 1]");
        ensure!(self.h_max > 0.0 && self.tol > 0.0, "ensemble.h_max and tol must be positive");
        Ok(())
    }
}

/// Cylinder function over spectral coefficients.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CylinderSpec {
    Constant {
        value: f64,
    },
    Linear {
        indices: Vec<usize>,
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    Sine {
        indices: Vec<usize>,
        weights: Vec<f64>,
        #[serde(default)]
        phase: f64,
    },
    /// Centred at the ground state when `center` is absent.
    Gaussian {
        indices: Vec<usize>,
        center: Option<Vec<f64>>,
        scale: f64,
    },
    Product {
        indices: Vec<usize>,
    },
}

impl CylinderSpec {
    pub fn validate(&self, j: usize) -> Result<()> {
        let (indices, n) = match self {
            CylinderSpec::Constant { .. } => return Ok(()),
            CylinderSpec::Linear { indices, weights, .. } | CylinderSpec::Sine { indices, weights, .. } => {
                (indices, Some(weights.len()))
            }
            CylinderSpec::Gaussian { indices, center, scale } => {
                ensure!(*scale > 0.0, "gaussian scale must be positive");
                (indices, center.as_ref().map(Vec::len))
            }
            CylinderSpec::Product { indices } => (indices, None),
        };
        if let Some(n) = n {
            ensure!(n == indices.len(), "cylinder parameters do not match its {} indices", indices.len());
        }
        if let Some(i) = indices.iter().find(|&&i| i >= j) {
            bail!("cylinder index {i} out of range for {j} modes");
        }
        Ok(())
    }

    pub fn build(&self, ground: &[f64]) -> Box<dyn Cylinder> {
        match self.clone() {
            CylinderSpec::Constant { value } => Box::new(ConstantFn(value)),
            CylinderSpec::Linear { indices, weights, offset } => Box::new(LinearFn {
                indices,
                weights,
                offset,
            }),
            CylinderSpec::Sine { indices, weights, phase } => Box::new(SineFn {
                indices,
                weights,
                phase,
            }),
            CylinderSpec::Gaussian { indices, center, scale } => {
                let center = center.unwrap_or_else(|| indices.iter().map(|&i| ground[i]).collect());
                Box::new(GaussianFn {
                    indices,
                    center,
                    scale,
                })
            }
            CylinderSpec::Product { indices } => Box::new(ProductFn { indices }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IbpBlock {
    pub samples: usize,
    pub pairs: Vec<(CylinderSpec, CylinderSpec)>,
    /// Test function of the time-derivative check.
    pub generator_fn: CylinderSpec,
    pub t_list: Vec<f64>,
    /// Multiple of the standard error tolerated.
    pub k_sigma: f64,
}

impl Default for IbpBlock {
    fn default() -> Self {
        let sine = |indices: Vec<usize>, weights: Vec<f64>, phase| CylinderSpec::Sine {
            indices,
            weights,
            phase,
        };
        let linear = |i| CylinderSpec::Linear {
            indices: vec![i],
            weights: vec![1.0],
            offset: 0.0,
        };
        let gaussian = |indices: Vec<usize>, scale| CylinderSpec::Gaussian {
            indices,
            center: None,
            scale,
        };
        Self {
            samples: 100_000,
            pairs: vec![
                (linear(0), sine(vec![1, 2], vec![40.0, 30.0], 0.3)),
                (sine(vec![1], vec![50.0], 0.1), sine(vec![2, 3], vec![30.0, 20.0], -0.4)),
                (gaussian(vec![1, 3], 0.01), linear(1)),
                (CylinderSpec::Product { indices: vec![1, 2] }, linear(3)),
                (gaussian(vec![2], 0.01), sine(vec![0, 1], vec![10.0, 25.0], 0.7)),
            ],
            generator_fn: gaussian(vec![1, 3], 0.01),
            t_list: vec![0.01, 0.02, 0.04],
            k_sigma: 3.0,
        }
    }
}

impl IbpBlock {
    pub fn validate(&self, j: usize) -> Result<()> {
        ensure!(self.samples >= 2, "ibp.samples must be >= 2");
        ensure!(!self.pairs.is_empty(), "ibp.pairs must not be empty");
        for (f, g) in &self.pairs {
            f.validate(j)?;
            g.validate(j)?;
        }
        self.generator_fn.validate(j)?;
        ensure!(
            self.t_list.len() >= 2 && self.t_list.iter().all(|t| *t > 0.0),
            "ibp.t_list needs two or more positive times"
        );
        ensure!(self.k_sigma > 0.0, "ibp.k_sigma must be positive");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"experiment": "fv-flow"}"#).unwrap();
        assert_eq!(c.experiment, Experiment::FvFlow);
        assert_eq!(c.spectral.j, 8);
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!(c.ibp.pairs.len(), 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "fv-flow", "sed": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "fv-flow", "grid": {"nz": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "fv-flows"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "fv-flow", "ibp": {"pairs": [[{"kind": "constant", "value": 1, "x": 2}, {"kind": "constant", "value": 1}]]}}"#).is_err());
    }

    #[test]
    fn partial_blocks_and_tagged_values() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": "boltzmann-solve", "seed": 4, "grid": {"nx": 6},
                "kinetic": {"lambda_mode": "b", "initial": {"kind": "random", "amplitude": 0.2}}}"#,
        )
        .unwrap();
        assert_eq!(c.grid.nx, 6);
        assert_eq!(c.grid.ny, 8);
        assert_eq!(c.kinetic.lambda_mode, Some(LambdaMode::B));
        assert_eq!(c.kinetic.initial, InitialData::Random { amplitude: 0.2 });
        assert!(c.kinetic.validate().is_ok());
        let bad = KineticBlock {
            initial: InitialData::Random { amplitude: 1.5 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cylinder_validation() {
        let g = CylinderSpec::Gaussian {
            indices: vec![1, 5],
            center: None,
            scale: 0.1,
        };
        assert!(g.validate(4).is_err());
        assert!(g.validate(6).is_ok());
        let l = CylinderSpec::Linear {
            indices: vec![0, 1],
            weights: vec![1.0],
            offset: 0.0,
        };
        assert!(l.validate(4).is_err());
        let f = g.build(&[0.0, 0.5, 0.0, 0.0, 0.0, 0.25]);
        assert_eq!(f.value(&[0.0, 0.5, 0.0, 0.0, 0.0, 0.25]), 1.0);
    }
}
