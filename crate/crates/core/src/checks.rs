//! Numerical checks of the formal guarantees behind the attacks and the
//! distillation analysis. Each check is deterministic in its seed and yields
//! one [`CheckReport`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks;
use crate::defences::{self, GM_MAX_ITER, GM_TOLERANCE};
use crate::model::{self, Activation, Architecture, JacobianOf, LossKind, ModelError, ModelParams, TrainingSet};
use crate::rng;
use crate::simplex::{self, ProbVector};

pub const NAMES: [&str; 7] = [
    "grad_finite_difference",
    "grad_linearity",
    "bias_bound",
    "gd_stationarity",
    "lma_optimality",
    "hips_optimality",
    "median_counterexample",
];

const LOSSES: [LossKind; 2] = [LossKind::Cel, LossKind::Mse];

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("unknown check `{0}`")]
    Unknown(String),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub instance: String,
}

impl CheckReport {
    fn new(name: &str, passed: bool, measured: f64, bound: f64, instance: String) -> Self {
        // a NaN anywhere is a failure, and reports must stay serializable
        let finite = measured.is_finite() && bound.is_finite();
        Self {
            name: name.into(),
            passed: passed && finite,
            measured: if measured.is_finite() { measured } else { f64::MAX },
            bound: if bound.is_finite() { bound } else { f64::MAX },
            instance,
        }
    }
}

/// Small tanh network used by the gradient checks.
pub fn default_arch() -> Architecture {
    Architecture::new(4, vec![6], 3, Activation::Tanh).expect("valid architecture")
}

/// Runs the named checks (or every check for `all`) in parallel, in the
/// order given.
pub fn run(names: &[&str], seed: u64) -> Result<Vec<CheckReport>, CheckError> {
    let mut list: Vec<&str> = Vec::new();
    for &n in names {
        if n == "all" {
            list.extend(NAMES);
        } else if NAMES.contains(&n) {
            list.push(n);
        } else {
            return Err(CheckError::Unknown(n.into()));
        }
    }
    list.par_iter().map(|n| run_one(n, seed)).collect()
}

fn run_one(name: &str, seed: u64) -> Result<CheckReport, CheckError> {
    let arch = default_arch();
    match name {
        "grad_finite_difference" => Ok(check_grad_finite_difference(&arch, seed, 20)?),
        "grad_linearity" => Ok(check_grad_linearity(&arch, seed, 100)?),
        "bias_bound" => Ok(check_bias_bound(&arch, &[0.0, 0.1, 0.3, 0.45], seed, 100)?),
        "gd_stationarity" => check_gd_stationarity(&arch, 300, 0.45, LossKind::Cel, seed),
        "lma_optimality" => Ok(check_lma_optimality(&[3, 5, 10], &[0.1, 0.3, 0.45], 200, 10_000, seed)),
        "hips_optimality" => Ok(check_hips_optimality(100, 10_000, seed)),
        "median_counterexample" => Ok(check_median_counterexample()),
        other => Err(CheckError::Unknown(other.into())),
    }
}

/// Uniform draw from the simplex (flat Dirichlet).
pub fn random_simplex(rng: &mut ChaCha8Rng, classes: usize) -> ProbVector {
    let e: Vec<f64> = (0..classes).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    ProbVector::new(e.iter().map(|v| v / total).collect()).expect("normalized draw")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Largest singular value of a `rows x cols` matrix given as rows, via the
/// eigenvalues of the small Gram matrix `J J^T`.
pub fn spectral_norm(rows: &[Vec<f64>]) -> f64 {
    let r = rows.len();
    let gram: DMatrix<f64> = DMatrix::from_fn(r, r, |i, j| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum());
    let top = SymmetricEigen::new(gram).eigenvalues.iter().cloned().fold(0.0, f64::max);
    top.max(0.0).sqrt()
}

/// Jacobian whose transpose maps `h - target` to the per-sample gradient.
fn loss_jacobian(params: &ModelParams, x: &[f64], kind: LossKind) -> Result<Vec<Vec<f64>>, ModelError> {
    let of = match kind {
        LossKind::Cel => JacobianOf::Logits,
        LossKind::Mse => JacobianOf::Probabilities,
    };
    model::jacobian(params, x, of)
}

fn single(x: &[f64], y: &[f64]) -> Result<TrainingSet, ModelError> {
    TrainingSet::new(x.to_vec(), y.to_vec(), x.len(), y.len())
}

fn random_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> Result<ModelParams, ModelError> {
    ModelParams::from_values(arch.clone(), gaussian(rng, arch.param_count()))
}

fn kind_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Cel => "CEL",
        LossKind::Mse => "MSE",
    }
}

/// Analytic gradients against central differences of the mean loss.
pub fn check_grad_finite_difference(arch: &Architecture, seed: u64, trials: usize) -> Result<CheckReport, ModelError> {
    const STEP: f64 = 1e-6;
    let mut rng = rng::stream(&[seed, 1]);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut params = random_params(arch, &mut rng)?;
        let x = gaussian(&mut rng, 3 * arch.input_dim);
        let y: Vec<f64> = (0..3).flat_map(|_| random_simplex(&mut rng, arch.classes).into_inner()).collect();
        let set = TrainingSet::new(x, y, arch.input_dim, arch.classes)?;
        for kind in LOSSES {
            let g = model::grad(&params, &set, kind)?;
            let mut fd = vec![0.0; g.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let orig = params.values()[i];
                params.values_mut()[i] = orig + STEP;
                let up = model::mean_loss(&params, &set, kind)?;
                params.values_mut()[i] = orig - STEP;
                let down = model::mean_loss(&params, &set, kind)?;
                params.values_mut()[i] = orig;
                *slot = (up - down) / (2.0 * STEP);
            }
            worst = worst.max(norm(&sub(&g, &fd)) / norm(&g).max(1e-12));
        }
    }
    let bound = 1e-5;
    Ok(CheckReport::new(
        "grad_finite_difference",
        worst <= bound,
        worst,
        bound,
        format!("{trials} trials x {{CEL, MSE}}, {} params, relative l2 error", arch.param_count()),
    ))
}

/// The gradient is affine in the target and Lipschitz with the spectral
/// norm of the relevant Jacobian. `measured` is the worst of the affinity
/// residual over `1e-10` and the Lipschitz ratio over `1 + 1e-8`.
pub fn check_grad_linearity(arch: &Architecture, seed: u64, trials: usize) -> Result<CheckReport, ModelError> {
    let mut rng = rng::stream(&[seed, 2]);
    let mut residual: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for _ in 0..trials {
        let params = random_params(arch, &mut rng)?;
        let x = gaussian(&mut rng, arch.input_dim);
        let y1 = random_simplex(&mut rng, arch.classes).into_inner();
        let y2 = random_simplex(&mut rng, arch.classes).into_inner();
        let mid: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 0.5 * (a + b)).collect();
        for kind in LOSSES {
            let g1 = model::grad(&params, &single(&x, &y1)?, kind)?;
            let g2 = model::grad(&params, &single(&x, &y2)?, kind)?;
            let gm = model::grad(&params, &single(&x, &mid)?, kind)?;
            let r: Vec<f64> = g1.iter().zip(&g2).zip(&gm).map(|((a, b), m)| a + b - 2.0 * m).collect();
            residual = residual.max(norm(&r));
            let lip = spectral_norm(&loss_jacobian(&params, &x, kind)?) * norm(&sub(&y1, &y2));
            let diff = norm(&sub(&g1, &g2));
            if diff > 0.0 {
                ratio = ratio.max(diff / lip);
            }
        }
    }
    let measured = (residual / 1e-10).max(ratio / (1.0 + 1e-8));
    Ok(CheckReport::new(
        "grad_linearity",
        measured <= 1.0,
        measured,
        1.0,
        format!("{trials} trials x {{CEL, MSE}}; max affinity residual {residual:.3e}, max lipschitz ratio {ratio:.6}"),
    ))
}

/// Gradient bias from mixing byzantine targets into the honest mean, against
/// `C * alpha * mean ||Y_H - Y_B||` and the looser `sqrt(2) * C * alpha`.
/// `measured` is the worst ratio to the loose bound.
pub fn check_bias_bound(arch: &Architecture, alphas: &[f64], seed: u64, trials: usize) -> Result<CheckReport, ModelError> {
    const BATCH: usize = 8;
    let mut rng = rng::stream(&[seed, 3]);
    let mut worst: f64 = 0.0;
    let mut tight_ok = true;
    for trial in 0..trials {
        let params = random_params(arch, &mut rng)?;
        let x = gaussian(&mut rng, BATCH * arch.input_dim);
        let honest: Vec<ProbVector> = (0..BATCH).map(|_| random_simplex(&mut rng, arch.classes)).collect();
        // half the trials use the loss-maximizing byzantine label
        let byz: Vec<ProbVector> = honest
            .iter()
            .map(|h| if trial % 2 == 0 { attacks::lma(h, LossKind::Cel) } else { random_simplex(&mut rng, arch.classes) })
            .collect();
        let gap: f64 = honest.iter().zip(&byz).map(|(h, b)| simplex::l2(h.as_slice(), b.as_slice())).sum::<f64>() / BATCH as f64;
        let honest_flat: Vec<f64> = honest.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        let honest_set = TrainingSet::new(x.clone(), honest_flat, arch.input_dim, arch.classes)?;
        for kind in LOSSES {
            let mut c_hat: f64 = 0.0;
            for row in x.chunks_exact(arch.input_dim) {
                c_hat = c_hat.max(spectral_norm(&loss_jacobian(&params, row, kind)?));
            }
            let g_h = model::grad(&params, &honest_set, kind)?;
            for &alpha in alphas {
                let mixed: Vec<f64> = honest
                    .iter()
                    .zip(&byz)
                    .flat_map(|(h, b)| simplex::mix(h, b, alpha).into_inner())
                    .collect();
                let g = model::grad(&params, &TrainingSet::new(x.clone(), mixed, arch.input_dim, arch.classes)?, kind)?;
                let diff = norm(&sub(&g_h, &g));
                let tight = c_hat * alpha * gap;
                let loose = std::f64::consts::SQRT_2 * c_hat * alpha;
                tight_ok &= diff <= tight * (1.0 + 1e-8) + 1e-15;
                if diff > 0.0 {
                    worst = worst.max(diff / loose);
                }
            }
        }
    }
    Ok(CheckReport::new(
        "bias_bound",
        tight_ok && worst < 1.0,
        worst,
        1.0,
        format!("{trials} trials x {{CEL, MSE}} x alpha {alphas:?}, batch {BATCH}; per-sample bound held: {tight_ok}"),
    ))
}

struct Trajectory {
    min_grad_sq: f64,
    observed_l: f64,
    c_hat: f64,
    f0: f64,
}

fn descend(
    start: &ModelParams,
    honest: &TrainingSet,
    mixed: &TrainingSet,
    kind: LossKind,
    step: f64,
    iterations: usize,
) -> Result<Trajectory, CheckError> {
    let mut w = start.clone();
    let f0 = model::mean_loss(&w, honest, kind)?;
    let mut out = Trajectory { min_grad_sq: f64::INFINITY, observed_l: 0.0, c_hat: 0.0, f0 };
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for t in 0..iterations {
        let loss = model::mean_loss(&w, mixed, kind)?;
        if !loss.is_finite() {
            return Err(CheckError::NonFiniteLoss { iteration: t });
        }
        let g_f = model::grad(&w, honest, kind)?;
        out.min_grad_sq = out.min_grad_sq.min(g_f.iter().map(|v| v * v).sum());
        for r in 0..honest.len() {
            out.c_hat = out.c_hat.max(spectral_norm(&loss_jacobian(&w, honest.features(r), kind)?));
        }
        if let Some((pw, pg)) = &prev {
            let dw = norm(&sub(w.values(), pw));
            if dw > 0.0 {
                out.observed_l = out.observed_l.max(norm(&sub(&g_f, pg)) / dw);
            }
        }
        let g = model::grad(&w, mixed, kind)?;
        prev = Some((w.values().to_vec(), g_f));
        w.values_mut().iter_mut().zip(&g).for_each(|(v, d)| *v -= step * d);
    }
    Ok(out)
}

/// Gradient descent on the byzantine-mixed objective, with step `1 / L`,
/// reaches `min_t ||grad F(w_t)||^2 <= 2 L F(w_0) / T + 2 alpha^2 C^2`.
///
/// `L` is not known for an MLP. It is estimated from gradient differences
/// along the run and the run is repeated with a larger estimate until the
/// step size is consistent with what the trajectory shows.
pub fn check_gd_stationarity(
    arch: &Architecture,
    iterations: usize,
    alpha: f64,
    kind: LossKind,
    seed: u64,
) -> Result<CheckReport, CheckError> {
    const ROWS: usize = 32;
    let mut rng = rng::stream(&[seed, 4]);
    let start = model::init(arch, rng.random());
    let x = gaussian(&mut rng, ROWS * arch.input_dim);
    let honest: Vec<ProbVector> = (0..ROWS).map(|_| random_simplex(&mut rng, arch.classes)).collect();
    let mixed: Vec<f64> = honest
        .iter()
        .flat_map(|h| simplex::mix(h, &attacks::lma(h, kind), alpha).into_inner())
        .collect();
    let honest_flat: Vec<f64> = honest.iter().flat_map(|p| p.as_slice().to_vec()).collect();
    let honest_set = TrainingSet::new(x.clone(), honest_flat, arch.input_dim, arch.classes)?;
    let mixed_set = TrainingSet::new(x, mixed, arch.input_dim, arch.classes)?;

    let mut l_hat = 1.0;
    let mut run = descend(&start, &honest_set, &mixed_set, kind, 1.0 / l_hat, iterations)?;
    for _ in 0..8 {
        if run.observed_l <= l_hat {
            break;
        }
        l_hat = 1.5 * run.observed_l;
        run = descend(&start, &honest_set, &mixed_set, kind, 1.0 / l_hat, iterations)?;
    }
    let bound = 2.0 * l_hat * run.f0 / iterations as f64 + 2.0 * alpha * alpha * run.c_hat * run.c_hat;
    Ok(CheckReport::new(
        "gd_stationarity",
        run.min_grad_sq <= bound + 1e-9,
        run.min_grad_sq,
        bound,
        format!(
            "{} alpha={alpha} T={iterations}; empirical L_hat={l_hat:.4} (trajectory max {:.4}), C_hat={:.4}, F(w0)={:.4}",
            kind_name(kind),
            run.observed_l,
            run.c_hat,
            run.f0
        ),
    ))
}

/// Closed-form LMA against every vertex and against uniform samples from
/// the simplex. `measured` is the largest amount by which any competitor
/// beats the closed form.
pub fn check_lma_optimality(classes: &[usize], alphas: &[f64], trials: usize, samples: usize, seed: u64) -> CheckReport {
    let mut rng = rng::stream(&[seed, 5]);
    let mut worst = f64::NEG_INFINITY;
    let mut mismatches = 0usize;
    let mut instances = 0usize;
    for &c in classes {
        for &alpha in alphas {
            for kind in LOSSES {
                for _ in 0..trials {
                    let mean = random_simplex(&mut rng, c);
                    let closed = attacks::lma(&mean, kind);
                    let objective = |p: &[f64]| attacks::lma_objective(mean.as_slice(), p, alpha, kind);
                    let best = objective(closed.as_slice());
                    let vertex_best = (0..c)
                        .map(|k| objective(ProbVector::vertex(c, k).as_slice()))
                        .fold(f64::NEG_INFINITY, f64::max);
                    mismatches += (vertex_best > best + 1e-9) as usize;
                    worst = worst.max(vertex_best - best);
                    for _ in 0..samples {
                        let p = random_simplex(&mut rng, c);
                        worst = worst.max(objective(p.as_slice()) - best);
                    }
                    instances += 1;
                }
            }
        }
    }
    CheckReport::new(
        "lma_optimality",
        mismatches == 0 && worst <= 1e-9,
        worst,
        1e-9,
        format!("{instances} instances (c {classes:?}, alpha {alphas:?}, CEL and MSE), {samples} samples each; {mismatches} vertex mismatches"),
    )
}

/// The best honest vertex under HiPS+LMA against random points of the
/// honest convex hull.
pub fn check_hips_optimality(trials: usize, samples: usize, seed: u64) -> CheckReport {
    const HONEST: usize = 5;
    let mut rng = rng::stream(&[seed, 6]);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..trials {
        let c = [3, 5, 10][trial % 3];
        let alpha = [0.1, 0.3, 0.45][(trial / 3) % 3];
        let kind = LOSSES[trial % 2];
        let points: Vec<ProbVector> = (0..HONEST).map(|_| random_simplex(&mut rng, c)).collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let mean = attacks::honest_mean(&refs).expect("non-empty honest set");
        let objective = |p: &[f64]| attacks::lma_objective(mean.as_slice(), p, alpha, kind);
        let best = objective(attacks::hips_lma(&refs, &mean, alpha, kind).as_slice());
        let mut hull = vec![0.0; c];
        for _ in 0..samples {
            let w = random_simplex(&mut rng, HONEST);
            hull.iter_mut().for_each(|v| *v = 0.0);
            for (p, wi) in refs.iter().zip(w.as_slice()) {
                hull.iter_mut().zip(*p).for_each(|(h, v)| *h += wi * v);
            }
            worst = worst.max(objective(&hull) - best);
        }
    }
    CheckReport::new(
        "hips_optimality",
        worst <= 1e-9,
        worst,
        1e-9,
        format!("{trials} instances of {HONEST} honest points, {samples} hull samples each"),
    )
}

/// The coordinate-wise median of three simplex points leaves the simplex,
/// while their mean and geometric median stay inside.
pub fn check_median_counterexample() -> CheckReport {
    let triple: [&[f64]; 3] = [&[0.7, 0.2, 0.1], &[0.8, 0.1, 0.1], &[0.0, 0.0, 1.0]];
    let median = simplex::coordwise_median(&triple).expect("equal lengths");
    let sum: f64 = median.iter().sum();
    let median_fails = simplex::validate(&median).is_err();
    let mean_ok = defences::mean_agg(&triple, None).is_ok();
    let gm_ok = defences::geometric_median(&triple, GM_TOLERANCE, GM_MAX_ITER).is_ok();
    CheckReport::new(
        "median_counterexample",
        median == [0.7, 0.1, 0.1] && median_fails && mean_ok && gm_ok,
        (sum - 1.0).abs(),
        simplex::SUM_TOLERANCE,
        format!("median {median:?} (sum {sum}); mean in simplex: {mean_ok}; geometric median in simplex: {gm_ok}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_targets_give_zero_residual_and_difference() {
        let arch = default_arch();
        let mut rng = rng::stream(&[9]);
        let params = random_params(&arch, &mut rng).unwrap();
        let x = gaussian(&mut rng, arch.input_dim);
        let y = random_simplex(&mut rng, arch.classes).into_inner();
        for kind in LOSSES {
            let a = model::grad(&params, &single(&x, &y).unwrap(), kind).unwrap();
            let b = model::grad(&params, &single(&x, &y).unwrap(), kind).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn softmax_regression_jacobian_matches_closed_form() {
        // h = softmax(Wx + b); dh_k/dW_ij = h_k (delta_ki - h_i) x_j
        let arch = Architecture::new(3, vec![], 4, Activation::Tanh).unwrap();
        let mut rng = rng::stream(&[10]);
        let params = random_params(&arch, &mut rng).unwrap();
        let x = gaussian(&mut rng, 3);
        let h = model::forward(&params, &x).unwrap().into_inner();
        let jac = model::jacobian(&params, &x, JacobianOf::Probabilities).unwrap();
        for k in 0..4 {
            for i in 0..4 {
                let delta = if k == i { 1.0 } else { 0.0 };
                let di = h[k] * (delta - h[i]);
                for j in 0..3 {
                    assert_abs_diff_eq!(jac[k][i * 3 + j], di * x[j], epsilon = 1e-12);
                }
                assert_abs_diff_eq!(jac[k][12 + i], di, epsilon = 1e-12);
            }
        }
        // one-sample MSE: the Lipschitz bound is attained along the top
        // right singular direction of J^T
        let s = spectral_norm(&jac);
        let gram = DMatrix::from_fn(4, 4, |a, b| jac[a].iter().zip(&jac[b]).map(|(p, q)| p * q).sum::<f64>());
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.imax();
        let u: Vec<f64> = eig.eigenvectors.column(top).iter().cloned().collect();
        let ju: Vec<f64> = (0..params.len()).map(|p| (0..4).map(|k| jac[k][p] * u[k]).sum()).collect();
        assert_abs_diff_eq!(norm(&ju), s * norm(&u), epsilon = 1e-12);
    }

    #[test]
    fn gradient_checks_pass() {
        let arch = default_arch();
        assert!(check_grad_finite_difference(&arch, 1, 5).unwrap().passed);
        let lin = check_grad_linearity(&arch, 1, 30).unwrap();
        assert!(lin.passed, "{lin:?}");
    }

    #[test]
    fn bias_vanishes_without_byzantines() {
        let r = check_bias_bound(&default_arch(), &[0.0], 2, 10).unwrap();
        assert!(r.passed);
        assert_eq!(r.measured, 0.0);
        let r = check_bias_bound(&default_arch(), &[0.45], 2, 20).unwrap();
        assert!(r.passed && r.measured < 1.0, "{r:?}");
    }

    #[test]
    fn stationarity_holds_and_first_term_shrinks_with_t() {
        let arch = default_arch();
        let clean = check_gd_stationarity(&arch, 100, 0.0, LossKind::Cel, 3).unwrap();
        assert!(clean.passed, "{clean:?}");
        let short = check_gd_stationarity(&arch, 100, 0.45, LossKind::Mse, 3).unwrap();
        let long = check_gd_stationarity(&arch, 200, 0.45, LossKind::Mse, 3).unwrap();
        assert!(short.passed && long.passed, "{short:?} {long:?}");
        assert!(long.measured <= short.measured);
    }

    #[test]
    fn lma_vertex_wins_for_skewed_mean() {
        let mean = ProbVector::new(vec![0.77, 0.08, 0.15]).unwrap();
        for kind in LOSSES {
            let closed = attacks::lma(&mean, kind);
            assert_eq!(closed.argmax(), 1);
            let best = attacks::lma_objective(mean.as_slice(), closed.as_slice(), 0.45, kind);
            for k in 0..3 {
                let v = attacks::lma_objective(mean.as_slice(), ProbVector::vertex(3, k).as_slice(), 0.45, kind);
                assert!(v <= best + 1e-12);
            }
        }
    }

    #[test]
    fn uniform_mean_makes_every_vertex_tie() {
        let mean = ProbVector::uniform(4);
        for kind in LOSSES {
            let values: Vec<f64> = (0..4)
                .map(|k| attacks::lma_objective(mean.as_slice(), ProbVector::vertex(4, k).as_slice(), 0.3, kind))
                .collect();
            assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn optimality_checks_pass_small() {
        assert!(check_lma_optimality(&[3, 5], &[0.1, 0.45], 10, 500, 4).passed);
        assert!(check_hips_optimality(12, 500, 4).passed);
    }

    #[test]
    fn median_counterexample_reported_as_pass() {
        let r = check_median_counterexample();
        assert!(r.passed, "{r:?}");
        assert_abs_diff_eq!(r.measured, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn run_rejects_unknown_names() {
        assert!(matches!(run(&["nope"], 1), Err(CheckError::Unknown(_))));
        let r = run(&["median_counterexample"], 1).unwrap();
        assert_eq!(r.len(), 1);
        let json = serde_json::to_string(&r[0]).unwrap();
        assert!(json.contains("\"passed\":true"));
    }
}
