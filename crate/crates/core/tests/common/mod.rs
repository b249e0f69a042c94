//! Numeric oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpmrestore::gentle::{EntropicProxProblem, GentleConfig, GentleProblem, GentleState};
use mpmrestore::pmms::RestorationProblem;
use mpmrestore::psf::gaussian_kernel;
use mpmrestore::{Dims, GaussianPsfParams, Grid, Kernel3D, Padding, Volume3D, VoxelSize};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(d: Dims, r: VoxelSize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Volume3D {
    Volume3D::from_fn(d, r, |_, _, _| rng.random_range(lo..hi))
}

pub fn random_kernel(d: Dims, r: VoxelSize, rng: &mut ChaCha8Rng) -> Kernel3D {
    let mut k = Kernel3D::new(random_volume(d, r, rng, 0.05, 1.0));
    k.normalize().unwrap();
    k
}

/// Golden-section search for the minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let m = 0.5 * (a + b);
    // endpoints win when the minimum sits on the boundary
    [a, m, b].into_iter().min_by(|x, y| f(*x).total_cmp(&f(*y))).unwrap()
}

/// Central finite-difference gradient.
pub fn fd_grad(f: &impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let s = h * x[i].abs().max(1.0);
        xp[i] = x[i] + s;
        let fp = f(&xp);
        xp[i] = x[i] - s;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * s);
    }
    g
}

/// BFGS with backtracking (infinite values rejected) and finite-difference gradients.
pub fn bfgs(f: &impl Fn(&[f64]) -> f64, x0: &[f64], max_iters: usize, gtol: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = fd_grad(f, &x, 1e-6);
    let mut hinv = nalgebra::DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iters {
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < gtol {
            break;
        }
        let gv = nalgebra::DVector::from_vec(g.clone());
        let mut p = -(&hinv * &gv);
        if p.dot(&gv) >= 0.0 {
            hinv = nalgebra::DMatrix::identity(n, n);
            p = -gv.clone();
        }
        let mut t = 1.0;
        let slope = p.dot(&gv);
        let mut accepted = None;
        for _ in 0..80 {
            let xn: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            let fxn = f(&xn);
            if fxn.is_finite() && fxn <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else { break };
        let gn = fd_grad(f, &xn, 1e-6);
        let s = nalgebra::DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = nalgebra::DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = nalgebra::DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * yv.transpose();
            let b = &i - rho * &yv * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        if (fx - fxn).abs() <= 1e-16 * fx.abs().max(1.0) && s.norm() < 1e-14 {
            x = xn;
            fx = fxn;
            break;
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
    (x, fx)
}

pub fn sym_from6(p: &[f64]) -> Matrix3<f64> {
    Matrix3::new(p[0], p[3], p[4], p[3], p[1], p[5], p[4], p[5], p[2])
}

pub fn sym_to6(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
}

/// Minimizer of `f(h)` over the 3-simplex by grid search refined down to `step`.
pub fn simplex_grid_min3(f: impl Fn([f64; 3]) -> f64, step: f64) -> [f64; 3] {
    let mut best = [1.0 / 3.0; 3];
    let mut best_v = f(best);
    let mut h: f64 = 0.01;
    let (mut lo0, mut hi0, mut lo1, mut hi1): (f64, f64, f64, f64) = (0.0, 1.0, 0.0, 1.0);
    loop {
        let n0 = ((hi0 - lo0) / h).round() as usize;
        let n1 = ((hi1 - lo1) / h).round() as usize;
        for i in 0..=n0 {
            let a = lo0 + i as f64 * h;
            for j in 0..=n1 {
                let b = lo1 + j as f64 * h;
                let c = 1.0 - a - b;
                if a < 0.0 || b < 0.0 || c < -1e-12 {
                    continue;
                }
                let p = [a, b, c.max(0.0)];
                let v = f(p);
                if v < best_v {
                    best_v = v;
                    best = p;
                }
            }
        }
        if h <= step * 1.0001 {
            return best;
        }
        lo0 = (best[0] - 5.0 * h).max(0.0);
        hi0 = (best[0] + 5.0 * h).min(1.0);
        lo1 = (best[1] - 5.0 * h).max(0.0);
        hi1 = (best[1] + 5.0 * h).min(1.0);
        h /= 10.0;
    }
}

/// `Σ x ln x` with `0 ln 0 = 0`.
pub fn entropy_sum(h: &[f64]) -> f64 {
    h.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum()
}

/// Circular convolution by direct summation, kernel centred at `floor(n/2)`.
pub fn direct_circular(vol: &Volume3D, ker: &[f64]) -> Vec<f64> {
    let d = vol.dims();
    let (ci, cj, ck) = (d.nx / 2, d.ny / 2, d.nz / 2);
    let mut out = vec![0.0; d.len()];
    for k in 0..d.nz {
        for j in 0..d.ny {
            for i in 0..d.nx {
                let mut acc = 0.0;
                for kc in 0..d.nz {
                    for jc in 0..d.ny {
                        for ic in 0..d.nx {
                            let si = (i + d.nx + ci - ic) % d.nx;
                            let sj = (j + d.ny + cj - jc) % d.ny;
                            let sk = (k + d.nz + ck - kc) % d.nz;
                            acc += ker[ic + d.nx * (jc + d.ny * kc)] * vol.get(si, sj, sk);
                        }
                    }
                }
                out[i + d.nx * (j + d.ny * k)] = acc;
            }
        }
    }
    out
}

/// Physical offset of voxel `(i, j, k)` from the grid centre.
pub fn offset(d: Dims, r: VoxelSize, i: usize, j: usize, k: usize) -> [f64; 3] {
    [
        (i as f64 - (d.nx / 2) as f64) * r.0[0],
        (j as f64 - (d.ny / 2) as f64) * r.0[1],
        (k as f64 - (d.nz / 2) as f64) * r.0[2],
    ]
}

// GENTLE fixtures.

pub fn vs() -> VoxelSize {
    VoxelSize::new(0.1, 0.12, 0.2).unwrap()
}

pub fn random_spd(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let e = Matrix3::from_diagonal(&nalgebra::Vector3::from_fn(|_, _| rng.random_range(lo..hi)));
    let m = q * e * q.transpose();
    0.5 * (m + m.transpose())
}

pub struct Instance {
    pub y: Volume3D,
    pub x: Volume3D,
    pub state: GentleState,
    pub cfg: GentleConfig,
}

pub fn random_instance(seed: u64, d: Dims) -> Instance {
    let mut r = rng(seed);
    let x = random_volume(d, vs(), &mut r, 0.0, 1.0);
    let y = random_volume(d, vs(), &mut r, 0.0, 2.0);
    let h = random_kernel(d, vs(), &mut r);
    let cfg = GentleConfig {
        lambda: r.random_range(0.1..5.0),
        eps1: 1e-3,
        eps2: 1e-3,
        gamma_d: r.random_range(0.1..2.0),
        ..Default::default()
    };
    let state = GentleState { alpha: r.random_range(0.0..1.0), beta: r.random_range(0.0..3.0), h, d: random_spd(&mut r, 0.5, 30.0) };
    Instance { y, x, state, cfg }
}

pub fn prox_h_objective(h: &[f64], p: &EntropicProxProblem<'_>) -> f64 {
    let lg = 1.0 / p.rho;
    let reg: f64 = entropy_sum(h) + h.iter().zip(p.c).map(|(&v, &c)| v * (c - p.ln_zeta)).sum::<f64>();
    let quad: f64 = h.iter().zip(p.hprime).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 0.5;
    lg * reg + quad
}

/// `γ_D F(·) + ½‖· − D'‖²` minimized numerically with the full objective as the only model.
pub fn numeric_prox_d<'a>(inst: &'a Instance, dprime: &Matrix3<f64>) -> (Matrix3<f64>, impl Fn(&Matrix3<f64>) -> f64 + 'a) {
    let prob = GentleProblem::new(&inst.y, &inst.x, &inst.cfg).unwrap();
    let base = prob.cost(&GentleState { d: Matrix3::zeros(), ..inst.state.clone() });
    let dp = *dprime;
    let gd = inst.cfg.gamma_d;
    let state = inst.state.clone();
    let obj = move |m: &Matrix3<f64>| {
        let f = prob.cost(&GentleState { d: *m, ..state.clone() });
        gd * (f - base) + 0.5 * (m - dp).norm_squared()
    };
    let f6 = |p: &[f64]| obj(&sym_from6(p));
    let mut r = rng(99);
    let mut starts = vec![sym_to6(&Matrix3::zeros()), sym_to6(&(dprime + Matrix3::identity() * 5.0))];
    for _ in 0..3 {
        starts.push(sym_to6(&random_spd(&mut r, 0.5, 50.0)));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        if !f6(&s).is_finite() {
            continue;
        }
        let (x, fx) = bfgs(&f6, &s, 500, 1e-9);
        if best.as_ref().is_none_or(|b| fx < b.1) {
            best = Some((x, fx));
        }
    }
    let (x, _) = best.unwrap();
    let m = sym_from6(&x);
    (m, obj)
}


// Restoration fixtures.

/// Small weighted problem with a Gaussian blur, random data, weights and bound.
pub fn random_restoration_problem(seed: u64, d: Dims) -> RestorationProblem {
    let mut r = rng(seed);
    let vox = VoxelSize::new(0.05, 0.06, 0.1).unwrap();
    let grid = Grid::new(d, vox);
    let h = gaussian_kernel(&GaussianPsfParams::new(random_spd(&mut r, 100.0, 400.0)).unwrap(), &grid, true).unwrap();
    let y = random_volume(d, vox, &mut r, 0.0, 1.0);
    let w = random_volume(d, vox, &mut r, 0.5, 2.0).into_data();
    let bound = r.random_range(0.5..5.0);
    let alpha = r.random_range(0.0..0.1);
    RestorationProblem::new(y, &h, alpha, w, bound, 0.1, Padding::Zero).unwrap()
}
