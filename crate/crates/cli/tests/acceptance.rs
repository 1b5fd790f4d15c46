//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kinflow_core::boltzmann::{admissible_lambda, KineticModel, KineticParams, LambdaMode};
use kinflow_core::frechet::{fd_validate, flow_derivative, loglog_slope, representer};
use kinflow_core::grid::{steps_for, DensityField, DensityPath, GridConfig, PhaseGrid};
use kinflow_core::quasi_invariance::{
    backward_point, generator_b_check, ibp_check, mean_stderr, Density, Ensemble, OrbitControl,
};
use kinflow_core::spectral::{ConstantFn, Cylinder, Domain, GaussianFn, LinearFn, ProductFn, SineFn, SpectralBasis};

type Outcome = Result<String, String>;

fn model() -> KineticModel {
    KineticModel::standard(PhaseGrid::new(GridConfig::default()).unwrap(), 0.05).unwrap()
}

fn signed(grid: &PhaseGrid, rng: &mut ChaCha8Rng) -> DensityField {
    DensityField::from_vec(grid, (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn unit(grid: &PhaseGrid, rng: &mut ChaCha8Rng) -> DensityField {
    let f = signed(grid, rng);
    let n = f.l1_norm(grid).unwrap();
    f.scaled(1.0 / n)
}

fn probability(grid: &PhaseGrid, f: impl FnMut([f64; 2], [f64; 2]) -> f64) -> DensityField {
    let f = DensityField::from_fn(grid, f);
    let m = f.mass(grid).unwrap();
    f.scaled(1.0 / m)
}

fn initial_data(grid: &PhaseGrid) -> Vec<DensityField> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let noisy = DensityField::from_vec(
        grid,
        (0..grid.len()).map(|_| 1.0 + 0.5 * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let m = noisy.mass(grid).unwrap();
    vec![
        probability(grid, |r, v| 1.0 + 0.6 * (PI * r[0]).cos() * (1.0 + 0.3 * v[1]).abs()),
        probability(grid, |r, v| 1.0 - 0.4 * (PI * r[1]).sin() * (0.5 + 0.25 * v[0].abs())),
        noisy.scaled(1.0 / m),
    ]
}

fn mode_a(m: &KineticModel) -> KineticParams {
    let (b, h) = m.constants();
    KineticParams {
        lambda: admissible_lambda(LambdaMode::A, 1.0, b, h, 0.0, 0.0).unwrap(),
        ..Default::default()
    }
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn collision_conservation() -> Outcome {
    let m = model();
    let g = m.grid();
    let c = m.collision();
    let (b, h) = c.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_mass, mut worst_bound) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = signed(g, &mut rng);
        let q = signed(g, &mut rng);
        let pq = c.apply(&p, &q).unwrap();
        worst_mass = worst_mass.max(pq.mass(g).unwrap().abs());
        let bound = 2.0 * h * b * p.l1_norm(g).unwrap() * q.l1_norm(g).unwrap();
        worst_bound = worst_bound.max(pq.l1_norm(g).unwrap() / bound);
    }
    ensure(
        worst_mass <= 1e-13 && worst_bound <= 1.0,
        format!("max |mass Q| = {worst_mass:.3e}, max ‖Q‖/bound = {worst_bound:.4}"),
    )
}

fn mild_form_mass() -> Outcome {
    let m = model();
    let g = m.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let params = KineticParams {
        lambda: 0.05,
        ..Default::default()
    };
    let times = m.lattice(1.0).unwrap();
    let mut worst = 0.0f64;
    for p0 in initial_data(g) {
        let m0 = p0.mass(g).unwrap();
        for _ in 0..3 {
            let q = DensityPath::new(times.clone(), times.iter().map(|_| signed(g, &mut rng)).collect()).unwrap();
            for f in m.psi(&p0, &q, &params).unwrap().fields() {
                worst = worst.max((f.mass(g).unwrap() - m0).abs());
            }
        }
    }
    ensure(worst <= 1e-10, format!("max mass drift over lattice = {worst:.3e}"))
}

fn picard_contraction() -> Outcome {
    let m = model();
    let (b, h) = m.constants();
    let mut lines = Vec::new();
    let mut ok = true;
    for (k, p0) in initial_data(m.grid()).iter().enumerate() {
        let (lo, hi) = m.initial_bounds(p0, 1.0).unwrap();
        let lambda = admissible_lambda(LambdaMode::D, 1.0, b, h, lo, hi).unwrap();
        let params = KineticParams {
            lambda,
            ..Default::default()
        };
        let r = match m.picard(p0, &params) {
            Ok(s) => s.report,
            Err(e) => return Err(format!("datum {k}: {e}")),
        };
        ok &= r.max_ratio() <= 2.0 / 3.0 + 0.05
            && r.fixed_point_residual <= 1e-8
            && r.mass_drift <= 1e-9
            && r.within_bounds(lo, hi);
        lines.push(format!(
            "#{k}: ratio {:.3e}, fixed {:.1e}, mass {:.1e}, range [{:.4}, {:.4}] in [{:.4}, {:.4}]",
            r.max_ratio(),
            r.fixed_point_residual,
            r.mass_drift,
            r.min_value,
            r.max_value,
            0.5 * lo,
            hi + 0.5 * lo
        ));
    }
    ensure(ok, lines.join("; "))
}

fn frechet_validation() -> Outcome {
    let m = model();
    let g = m.grid();
    let params = mode_a(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut slopes = Vec::new();
    let mut ratio = 0.0f64;
    for p0 in initial_data(g).iter().take(2) {
        let h = unit(g, &mut rng);
        let t = fd_validate(&m, p0, &h, &[1e-2, 1e-3, 1e-4], &params, 1e-13).map_err(|e| e.to_string())?;
        slopes.push(t.slope);
        let p = m.picard(p0, &params).unwrap().path;
        let (_, rep) = flow_derivative(&m, &p, &h, &params, 1e-10, 200).unwrap();
        ratio = ratio.max(rep.max_ratio());
    }
    let p0 = &initial_data(g)[0];
    let p = m.picard(p0, &params).unwrap().path;
    let gf = signed(g, &mut rng).scaled(g.len() as f64);
    let t = 0.5;
    let rep = representer(&m, &p, t, &gf, &params).unwrap();
    let n = steps_for(t, m.dt()).unwrap();
    let mut dual = 0.0f64;
    for _ in 0..3 {
        let h = unit(g, &mut rng);
        let (u, _) = flow_derivative(&m, &p, &h, &params, 1e-13, 500).unwrap();
        let lhs = u.slice(n).inner(&gf, g).unwrap();
        let rhs = h.inner(&rep.total, g).unwrap();
        dual = dual.max((lhs - rhs).abs() / lhs.abs().max(1e-12));
    }
    ensure(
        slopes.iter().all(|s| (0.8..=1.2).contains(s)) && ratio <= 0.55 && dual < 1e-8 && rep.within_bound(),
        format!(
            "fd slopes {:?}, Neumann ratio {ratio:.3e}, duality {dual:.1e}, sup {:.3} <= c + C = {:.3}",
            slopes.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>(),
            rep.sup_norm,
            rep.c + rep.big_c
        ),
    )
}

fn knudsen() -> Outcome {
    let m = model();
    let (g, k) = (m.grid(), m.knudsen());
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut step = 0.0f64;
    let mut dual = 0.0f64;
    for _ in 0..10 {
        let p = DensityField::from_vec(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let m0 = p.mass(g).unwrap();
        step = step.max((k.step(&p).unwrap().mass(g).unwrap() - m0).abs() / m0);
        let h = signed(g, &mut rng);
        let q = signed(g, &mut rng);
        let lhs = k.apply(&h, 0.3).unwrap().inner(&q, g).unwrap();
        let rhs = h.inner(&k.adjoint(&q, 0.3).unwrap(), g).unwrap();
        dual = dual.max((lhs - rhs).abs() / lhs.abs().max(1e-3));
    }
    let s = k.stationary(g, 1e-10, 200_000).map_err(|e| e.to_string())?;
    let res = k.step(&s.density).unwrap().sub(&s.density).l1_norm(g).unwrap();
    ensure(
        step <= 1e-12 && s.min > 0.0 && res < 1e-8 && dual < 1e-9,
        format!(
            "step mass {step:.1e}, stationary min {:.3e}, residual {res:.1e}, duality {dual:.1e}",
            s.min
        ),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn spectral_flow() -> Outcome {
    let b = SpectralBasis::new(Domain::default(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut semi, mut inv, mut gen_mass) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut c = b.ground_state();
        for x in c.iter_mut().skip(1).take(3) {
            *x += rng.random_range(-0.05..0.05);
        }
        let c = b.normalize(&c).unwrap();
        let (s, t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        semi = semi.max(max_diff(&b.flow(&b.flow(&c, s).unwrap(), t).unwrap(), &b.flow(&c, s + t).unwrap()));
        inv = inv.max(max_diff(&b.flow(&b.flow(&c, t).unwrap(), -t).unwrap(), &c));
        gen_mass = gen_mass.max(b.total_mass(&b.generator(&c).unwrap()).abs());
    }
    let gs = b.ground_state();
    let ground = [-1.0, 0.5, 3.0]
        .iter()
        .map(|&t| max_diff(&b.flow(&gs, t).unwrap(), &gs))
        .fold(0.0, f64::max);

    let mut c = b.ground_state();
    c[1] += 0.2;
    c[2] += 0.02;
    let c = b.normalize(&c).unwrap();
    let ts: Vec<f64> = (0..=40).map(|k| 1.0 + 0.1 * k as f64).collect();
    let ld: Vec<f64> = ts
        .iter()
        .map(|&t| b.flow(&c, t).unwrap()[1..].iter().map(|x| x.abs()).sum::<f64>().ln())
        .collect();
    // least-squares slope of the log distance equals the log-log slope against e^t
    let rate = loglog_slope(&ts.iter().map(|t| t.exp()).collect::<Vec<_>>(), &ld.iter().map(|l| l.exp()).collect::<Vec<_>>());
    let expect = b.modes()[1].lambda - b.modes()[0].lambda;
    let a = b.generator(&c).unwrap();
    let eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let errs: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let f = b.flow(&c, e).unwrap();
            max_diff(&f.iter().zip(&c).map(|(f, c)| (f - c) / e).collect::<Vec<_>>(), &a)
        })
        .collect();
    let slope = loglog_slope(&eps, &errs);
    ensure(
        semi < 1e-12
            && inv < 1e-12
            && ground <= 1e-15
            && (rate / expect - 1.0).abs() <= 0.05
            && (slope - 1.0).abs() <= 0.1
            && gen_mass <= 1e-13,
        format!(
            "semigroup {semi:.1e}, inverse {inv:.1e}, ground {ground:e}, decay {rate:.4} vs {expect:.4}, generator slope {slope:.4}, (Aν,1) {gen_mass:.1e}"
        ),
    )
}

fn ensemble() -> Ensemble {
    Ensemble::new(SpectralBasis::new(Domain::default(), 4).unwrap(), None).unwrap()
}

fn quasi_invariance() -> Outcome {
    let e = ensemble();
    let ctl = OrbitControl::default();
    let ys = e.sample_scaled(400, 707, 0.8).unwrap();
    let mut pts = Vec::new();
    for y in &ys {
        if pts.len() == 100 {
            break;
        }
        let t = 0.5 * (pts.len() as f64 + 0.5) / 100.0;
        let x = e.drift().flow(y, t).unwrap();
        if e.density().contains(&x) {
            pts.push((x, t));
        }
    }
    let (mut worst, mut least) = (0.0f64, f64::INFINITY);
    for (x, t) in &pts {
        let a = e.rn_jacobian(x, *t, &ctl).map_err(|e| e.to_string())?;
        let f = e.rn_formula(x, *t, &ctl).map_err(|e| e.to_string())?;
        worst = worst.max((a - f).abs() / f);
        least = least.min(a.min(f));
    }
    let mut comp = 0.0f64;
    for y in e.sample_scaled(5, 708, 0.4).unwrap() {
        let (s, t) = (0.1, 0.15);
        let x = e.drift().flow(&y, s + t).unwrap();
        if !e.density().contains(&x) {
            continue;
        }
        let whole = e.rn_jacobian(&x, s + t, &ctl).unwrap();
        let mid = backward_point(&x, t, e.drift(), e.density(), &ctl).unwrap();
        let parts = e.rn_jacobian(&x, t, &ctl).unwrap() * e.rn_jacobian(&mid, s, &ctl).unwrap();
        comp = comp.max((whole - parts).abs() / whole);
    }
    ensure(
        pts.len() == 100 && worst <= 1e-5 && least > 0.0 && comp <= 1e-7,
        format!(
            "{} points, max rel err {worst:.2e}, min ratio {least:.4}, composition {comp:.1e}",
            pts.len()
        ),
    )
}

fn integration_by_parts() -> Outcome {
    let e = ensemble();
    let s = e.sample(100_000, 808).unwrap();
    let base = e.chart().basepoint().to_vec();
    let deltas: Vec<f64> = s.iter().map(|u| e.delta(u).unwrap()).collect();
    let (dm, dse) = mean_stderr(&deltas);
    let gauss = |idx: Vec<usize>| GaussianFn {
        center: idx.iter().map(|&i| base[i]).collect(),
        indices: idx,
        scale: 0.01,
    };
    let sine = |indices: Vec<usize>, weights: Vec<f64>, phase| SineFn {
        indices,
        weights,
        phase,
    };
    let pairs: Vec<(Box<dyn Cylinder>, Box<dyn Cylinder>)> = vec![
        (Box::new(LinearFn::coordinate(0)), Box::new(sine(vec![1, 2], vec![40.0, 30.0], 0.3))),
        (Box::new(sine(vec![1], vec![50.0], 0.1)), Box::new(sine(vec![2, 3], vec![30.0, 20.0], -0.4))),
        (Box::new(gauss(vec![1, 3])), Box::new(LinearFn::coordinate(1))),
        (Box::new(ProductFn { indices: vec![1, 2] }), Box::new(LinearFn::coordinate(3))),
        (Box::new(gauss(vec![2])), Box::new(sine(vec![0, 1], vec![10.0, 25.0], 0.7))),
        (Box::new(ConstantFn(2.0)), Box::new(sine(vec![3], vec![60.0], 0.0))),
    ];
    let mut z = Vec::new();
    for (f, g) in &pairs {
        let r = ibp_check(f.as_ref(), g.as_ref(), &e, &s).unwrap();
        z.push((r.lhs - r.rhs).abs() / r.stderr);
    }
    let gc = generator_b_check(&gauss(vec![1, 3]), &e, &s, &[0.01, 0.02, 0.04]).unwrap();
    let gen_ok = gc.passes(3.0);
    ensure(
        z.iter().all(|z| *z <= 3.0) && dm.abs() <= 3.0 * dse && gen_ok,
        format!(
            "pair deviations (stderr units) {:?}, <δ> = {dm:.2e} ± {dse:.2e}, time-derivative {:.4} vs {:.4} (tol {:.4})",
            z.iter().map(|z| format!("{z:.2}")).collect::<Vec<_>>(),
            gc.extrapolated,
            gc.target,
            3.0 * gc.stderr + gc.bias
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut configs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| format!("{}: {e}", root.display()))?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for cfg in &configs {
        let stem = cfg.file_stem().unwrap().to_string_lossy().to_string();
        let mut dirs = Vec::new();
        for threads in [1, 8] {
            let dir = tmp.path().join(format!("{stem}-{threads}"));
            let out = Command::new(env!("CARGO_BIN_EXE_kinflow"))
                .arg("run")
                .arg(cfg)
                .arg("--out")
                .arg(&dir)
                .arg("--threads")
                .arg(threads.to_string())
                .output()
                .unwrap();
            if !out.status.success() {
                return Err(format!("{stem} with {threads} threads exited with {}", out.status));
            }
            dirs.push(dir);
        }
        let (a, b) = (csv_files(&dirs[0]), csv_files(&dirs[1]));
        if a.is_empty() || a.len() != b.len() {
            return Err(format!("{stem}: artifact sets differ"));
        }
        for (x, y) in a.iter().zip(&b) {
            if fs::read(x).unwrap() != fs::read(y).unwrap() {
                return Err(format!("{stem}: {} differs between 1 and 8 threads", x.display()));
            }
            compared += 1;
        }
    }
    ensure(
        configs.len() == 6,
        format!("{} configs, {compared} CSV files bit-identical across 1 and 8 threads", configs.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("collision conservation and bound", collision_conservation),
        ("mild-form mass conservation", mild_form_mass),
        ("Picard contraction, residual, bounds, mass", picard_contraction),
        ("Frechet derivative validation", frechet_validation),
        ("Knudsen transport", knudsen),
        ("spectral flow", spectral_flow),
        ("change-of-measure formula", quasi_invariance),
        ("integration by parts", integration_by_parts),
        ("determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match r {
            Ok(msg) => println!("criterion {} PASS  {name}: {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {msg}", k + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
