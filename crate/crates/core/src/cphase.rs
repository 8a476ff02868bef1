//! Control phase: per-sample cost expansion, KL-constrained LQR backward
//! pass, dual search on the constraint multiplier, and the global step-size
//! rule.
//!
//! The backward pass optimizes the surrogate cost c/eta - log pbar(u|x), so
//! eta -> 0 recovers plain LQR on the cost and eta -> inf reproduces pbar.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::cluster::{Assignment, ClusterModel};
use crate::env::{cost_eval, EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::lingauss::{
    compute_marginals, expected_quadratic_cost, policy_kl, LinearGaussianDynamics,
    LinearGaussianPolicy, QuadCostTerm,
};
use crate::math::{symmetrize, Gaussian};

/// Output of one per-sample local-policy solve.
#[derive(Debug, Clone)]
pub struct LocalPolicyResult {
    pub policy: LinearGaussianPolicy,
    pub eta: f64,
    pub kl_total: f64,
    /// Predicted cost of the new policy under the fitted dynamics.
    pub expected_cost: f64,
    /// Predicted cost decrease relative to the policy linearization.
    pub expected_improvement: f64,
    /// Whether the KL constraint was binding at the returned eta.
    pub constraint_active: bool,
}

/// KL-budget state threaded across iterations.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    pub epsilon: f64,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl StepState {
    pub fn new(epsilon: f64, eps_min: f64, eps_max: f64) -> Self {
        Self {
            epsilon: epsilon.clamp(eps_min, eps_max),
            eps_min,
            eps_max,
        }
    }
}

/// Second-order cost expansion around every step of a sample trajectory,
/// with cuu eigenvalue-clamped to keep the backward pass solvable.
pub fn quadratize_around_sample(spec: &EnvSpec, tau: &Trajectory) -> Result<Vec<QuadCostTerm>> {
    if tau.horizon() != spec.horizon {
        return Err(Error::DimensionMismatch {
            context: "quadratize_around_sample horizon",
            expected: spec.horizon,
            got: tau.horizon(),
        });
    }
    let mut terms = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let (_, mut term) = cost_eval(spec, &tau.states[t], &tau.actions[t])?;
        if !term.cx.iter().all(|v| v.is_finite()) || !term.cxx.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cost expansion"));
        }
        term.cuu = clamp_spd(&term.cuu);
        terms.push(term);
    }
    Ok(terms)
}

/// Eigenvalue clamp at delta_reg = 1e-6 * (1 + |max eigenvalue|).
fn clamp_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let delta = 1e-6 * (1.0 + max_abs);
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(delta)),
    );
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()))
}

/// Quadratic in (x, u) around the origin: ½ x'Hxx x + ½ u'Huu u + u'Hux x
/// + gx·x + gu·u.
struct OriginQuad {
    hxx: DMatrix<f64>,
    huu: DMatrix<f64>,
    hux: DMatrix<f64>,
    gx: DVector<f64>,
    gu: DVector<f64>,
}

/// Surrogate per-step quadratic c/eta - log pbar(u|x), dropping constants.
fn surrogate_step(
    cost: &QuadCostTerm,
    pbar_gain: &DMatrix<f64>,
    pbar_bias: &DVector<f64>,
    pbar_prec: &DMatrix<f64>,
    eta: f64,
) -> OriginQuad {
    let o = cost.to_origin();
    let inv_eta = 1.0 / eta;
    let pk = pbar_prec * pbar_gain;
    let pb = pbar_prec * pbar_bias;
    OriginQuad {
        hxx: &o.cxx * inv_eta + pbar_gain.transpose() * &pk,
        huu: &o.cuu * inv_eta + pbar_prec,
        hux: &o.cux * inv_eta - &pk,
        gx: &o.cx * inv_eta + pbar_gain.transpose() * &pb,
        gu: &o.cu * inv_eta - &pb,
    }
}

/// One LQR backward pass over the surrogate cost at a fixed eta. Fails if
/// any Q_uu is not positive definite.
pub fn kl_backward_pass(
    dynamics: &LinearGaussianDynamics,
    cost: &[QuadCostTerm],
    pbar: &LinearGaussianPolicy,
    eta: f64,
) -> Result<LinearGaussianPolicy> {
    assert!(eta > 0.0, "eta must be positive");
    let horizon = dynamics.horizon();
    if cost.len() != horizon || pbar.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "kl_backward_pass horizon",
            expected: horizon,
            got: cost.len().min(pbar.horizon()),
        });
    }
    let dx = dynamics.state_dim();
    let du = dynamics.action_dim();

    let precisions: Vec<DMatrix<f64>> = pbar
        .cov
        .iter()
        .map(|c| {
            Cholesky::new(symmetrize(c))
                .map(|ch| ch.inverse())
                .ok_or(Error::SingularCovariance("kl_backward_pass: pbar covariance"))
        })
        .collect::<Result<_>>()?;

    let mut gain = vec![DMatrix::zeros(du, dx); horizon];
    let mut bias = vec![DVector::zeros(du); horizon];
    let mut cov = vec![DMatrix::zeros(du, du); horizon];

    let mut vxx = DMatrix::<f64>::zeros(dx, dx);
    let mut vx = DVector::<f64>::zeros(dx);
    for t in (0..horizon).rev() {
        let q = surrogate_step(&cost[t], &pbar.gain[t], &pbar.bias[t], &precisions[t], eta);
        let fx = &dynamics.fx[t];
        let fu = &dynamics.fu[t];
        let fc = &dynamics.fc[t];

        let vfx = &vxx * fx;
        let vfu = &vxx * fu;
        let qxx = symmetrize(&(&q.hxx + fx.transpose() * &vfx));
        let quu = symmetrize(&(&q.huu + fu.transpose() * &vfu));
        let qux = &q.hux + fu.transpose() * &vfx;
        let carry = &vxx * fc + &vx;
        let qx = &q.gx + fx.transpose() * &carry;
        let qu = &q.gu + fu.transpose() * &carry;

        let chol = Cholesky::new(quu.clone()).ok_or(Error::QuuNotPositiveDefinite { retries: 0 })?;
        let k_t = -chol.solve(&qux);
        let b_t = -chol.solve(&qu);
        let c_t = symmetrize(&chol.inverse());

        vxx = symmetrize(&(&qxx + qux.transpose() * &k_t));
        vx = &qx + qux.transpose() * &b_t;

        gain[t] = k_t;
        bias[t] = b_t;
        cov[t] = c_t;
    }
    Ok(LinearGaussianPolicy { gain, bias, cov })
}

/// Backward pass with the eta-doubling retry contract: on a Q_uu failure,
/// double eta and try again, up to `max_retries` times.
pub fn kl_backward_pass_with_retries(
    dynamics: &LinearGaussianDynamics,
    cost: &[QuadCostTerm],
    pbar: &LinearGaussianPolicy,
    eta: f64,
    max_retries: usize,
) -> Result<(LinearGaussianPolicy, f64)> {
    let mut current = eta;
    for _ in 0..=max_retries {
        match kl_backward_pass(dynamics, cost, pbar, current) {
            Ok(policy) => return Ok((policy, current)),
            Err(Error::QuuNotPositiveDefinite { .. }) => current *= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::QuuNotPositiveDefinite {
        retries: max_retries,
    })
}

/// Maximum surrogate evaluations during the dual search.
const DUAL_EVAL_BUDGET: usize = 50;
/// Smallest eta probed when the constraint looks inactive.
const ETA_FLOOR: f64 = 1e-12;

/// Find eta such that the solved policy's KL to pbar lands in
/// [0.9 eps, eps] when the constraint is active; expand a bracket
/// geometrically on log eta, then bisect.
pub fn solve_local_policy(
    dynamics: &LinearGaussianDynamics,
    cost: &[QuadCostTerm],
    pbar: &LinearGaussianPolicy,
    init: &Gaussian,
    epsilon: f64,
) -> Result<LocalPolicyResult> {
    assert!(epsilon > 0.0, "epsilon must be positive");

    let eval = |eta: f64| -> Result<(LinearGaussianPolicy, f64)> {
        let policy = kl_backward_pass(dynamics, cost, pbar, eta)?;
        let marg = compute_marginals(init, dynamics, &policy)?;
        let (kl, _) = policy_kl(&policy, pbar, &marg)?;
        Ok((policy, kl))
    };

    let mut evals = 0usize;
    let mut best: Option<(LinearGaussianPolicy, f64, f64)> = None; // (policy, eta, kl<=eps)
    let mut seen_infeasible = false; // some eta had KL > eps

    let mut eta = 1.0;
    let mut lo: Option<f64> = None; // KL > eps side
    let mut hi: Option<f64> = None; // KL <= eps side
    let mut last_slack_kl: Option<f64> = None;

    // Expansion: walk eta up while infeasible, down while slack.
    while evals < DUAL_EVAL_BUDGET {
        evals += 1;
        match eval(eta) {
            Ok((policy, kl)) => {
                if kl > epsilon {
                    seen_infeasible = true;
                    lo = Some(eta);
                    if hi.is_some() {
                        break;
                    }
                    eta *= 10.0;
                } else {
                    if best.as_ref().map_or(true, |(_, _, bk)| kl > *bk) {
                        best = Some((policy, eta, kl));
                    }
                    hi = Some(eta);
                    if lo.is_some() || kl >= 0.9 * epsilon {
                        break;
                    }
                    // Descending eta stops paying off once the KL saturates:
                    // gains have converged to the unconstrained optimum and
                    // only the covariance keeps shrinking.
                    let saturated = last_slack_kl.is_some_and(|prev| kl <= prev * 1.01);
                    if saturated || eta <= ETA_FLOOR {
                        break;
                    }
                    last_slack_kl = Some(kl);
                    eta /= 10.0;
                }
            }
            // Q_uu failure reads as "eta too small".
            Err(Error::QuuNotPositiveDefinite { .. }) => {
                eta *= 2.0;
                lo = None; // the failed eta brackets nothing
            }
            Err(e) => return Err(e),
        }
        if eta > 1e18 {
            break;
        }
    }

    let constraint_active = seen_infeasible;

    // Bisection on log eta between the infeasible and feasible ends.
    if let (Some(mut lo_eta), Some(mut hi_eta)) = (lo, hi) {
        while evals < DUAL_EVAL_BUDGET {
            let best_kl = best.as_ref().map(|(_, _, k)| *k).unwrap_or(0.0);
            if best_kl >= 0.9 * epsilon && best_kl <= epsilon {
                break;
            }
            let mid = (0.5 * (lo_eta.ln() + hi_eta.ln())).exp();
            evals += 1;
            match eval(mid) {
                Ok((policy, kl)) => {
                    if kl > epsilon {
                        lo_eta = mid;
                    } else {
                        if best.as_ref().map_or(true, |(_, _, bk)| kl > *bk) {
                            best = Some((policy, mid, kl));
                        }
                        hi_eta = mid;
                    }
                }
                Err(Error::QuuNotPositiveDefinite { .. }) => {
                    lo_eta = mid;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let (policy, eta, kl_total) = best.ok_or(Error::DualBracketNotFound(DUAL_EVAL_BUDGET))?;

    let marg_new = compute_marginals(init, dynamics, &policy)?;
    let expected_cost = expected_quadratic_cost(&marg_new, cost);
    let marg_old = compute_marginals(init, dynamics, pbar)?;
    let expected_improvement = expected_quadratic_cost(&marg_old, cost) - expected_cost;

    Ok(LocalPolicyResult {
        policy,
        eta,
        kl_total,
        expected_cost,
        expected_improvement,
        constraint_active,
    })
}

/// Solve one local policy per sample: the cost expansion comes from the
/// sample's own trajectory, dynamics and the policy linearization from its
/// cluster, and the initial state is pinned to the sample's own start.
pub fn update_all_local_policies(
    trajectories: &[Trajectory],
    assign: &Assignment,
    models: &[ClusterModel],
    spec: &EnvSpec,
    epsilon: f64,
) -> Result<Vec<Option<LocalPolicyResult>>> {
    let solve_one = |(tau, &label): (&Trajectory, &usize)| -> Result<LocalPolicyResult> {
        let cost = quadratize_around_sample(spec, tau)?;
        let model = &models[label];
        let init = Gaussian::point(tau.states[0].clone());
        solve_local_policy(&model.dynamics, &cost, &model.policy_lin, &init, epsilon)
    };

    let results = run_per_sample(trajectories, &assign.labels, solve_one);

    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 2 > results.len() {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_default();
        return Err(Error::TooManyLocalFailures {
            failed,
            total: results.len(),
            first,
        });
    }
    Ok(results.into_iter().map(|r| r.ok()).collect())
}

#[cfg(feature = "parallel")]
fn run_per_sample<F>(
    trajectories: &[Trajectory],
    labels: &[usize],
    solve_one: F,
) -> Vec<Result<LocalPolicyResult>>
where
    F: Fn((&Trajectory, &usize)) -> Result<LocalPolicyResult> + Sync + Send,
{
    use rayon::prelude::*;
    trajectories
        .par_iter()
        .zip(labels.par_iter())
        .map(solve_one)
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_per_sample<F>(
    trajectories: &[Trajectory],
    labels: &[usize],
    solve_one: F,
) -> Vec<Result<LocalPolicyResult>>
where
    F: Fn((&Trajectory, &usize)) -> Result<LocalPolicyResult>,
{
    trajectories.iter().zip(labels.iter()).map(solve_one).collect()
}

/// Sequential reference path used to pin down parity with the parallel one.
#[cfg(test)]
pub(crate) fn update_all_local_policies_serial(
    trajectories: &[Trajectory],
    assign: &Assignment,
    models: &[ClusterModel],
    spec: &EnvSpec,
    epsilon: f64,
) -> Result<Vec<Option<LocalPolicyResult>>> {
    let mut results = Vec::with_capacity(trajectories.len());
    for (tau, &label) in trajectories.iter().zip(&assign.labels) {
        let out = (|| -> Result<LocalPolicyResult> {
            let cost = quadratize_around_sample(spec, tau)?;
            let model = &models[label];
            let init = Gaussian::point(tau.states[0].clone());
            solve_local_policy(&model.dynamics, &cost, &model.policy_lin, &init, epsilon)
        })();
        results.push(out.ok());
    }
    Ok(results)
}

/// eps' = eps * dJ_pred / (2 (dJ_pred - dJ_actual)), clamped to
/// [eps_min, eps_max]; doubling when the step did as well or better than
/// predicted.
pub fn adjust_step_size(step: &StepState, actual_dj: f64, expected_dj: f64) -> StepState {
    let denom = expected_dj - actual_dj;
    let raw = if denom <= 0.0 {
        2.0 * step.epsilon
    } else {
        step.epsilon * expected_dj / (2.0 * denom)
    };
    StepState {
        epsilon: raw.clamp(step.eps_min, step.eps_max),
        eps_min: step.eps_min,
        eps_max: step.eps_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, FnPolicy, TargetMode};
    use crate::math::{min_eigenvalue, std_normal_vec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| crate::math::std_normal(rng));
        symmetrize(&(&a * a.transpose() * scale)) + DMatrix::identity(dim, dim) * 0.1 * scale
    }

    /// Time-varying LQR gains by an independent Riccati recursion for the
    /// cost sum_t x'Qx + u'Ru (no terminal term).
    fn riccati_gains(
        fx: &DMatrix<f64>,
        fu: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        horizon: usize,
    ) -> Vec<DMatrix<f64>> {
        let dx = fx.nrows();
        let mut v = DMatrix::<f64>::zeros(dx, dx);
        let mut gains = vec![DMatrix::zeros(r.nrows(), dx); horizon];
        for t in (0..horizon).rev() {
            let buvb = r + fu.transpose() * &v * fu;
            let buva = fu.transpose() * &v * fx;
            let k = -buvb
                .clone()
                .try_inverse()
                .expect("Riccati inverse")
                * &buva;
            gains[t] = k.clone();
            v = q + fx.transpose() * &v * fx + buva.transpose() * &k;
            v = symmetrize(&v);
        }
        gains
    }

    /// Quadratic cost term x'Qx + u'Ru at the origin.
    fn quadratic_cost(q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Vec<QuadCostTerm> {
        let (dx, du) = (q.nrows(), r.nrows());
        (0..horizon)
            .map(|_| QuadCostTerm {
                cxx: q * 2.0,
                cuu: r * 2.0,
                cux: DMatrix::zeros(du, dx),
                cx: DVector::zeros(dx),
                cu: DVector::zeros(du),
                c0: 0.0,
                x_ref: DVector::zeros(dx),
                u_ref: DVector::zeros(du),
            })
            .collect()
    }

    fn double_integrator_dynamics(horizon: usize) -> LinearGaussianDynamics {
        // dx=2 (pos, vel), du=1, dt = 0.1.
        let dt = 0.1;
        let fx = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let fu = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
        LinearGaussianDynamics {
            fx: vec![fx; horizon],
            fu: vec![fu; horizon],
            fc: vec![DVector::zeros(2); horizon],
            cov: vec![DMatrix::identity(2, 2) * 1e-4; horizon],
        }
    }

    #[test]
    fn quadratize_exact_for_double_integrator() {
        let mut spec = EnvSpec::double_integrator(1, 8, 0.1);
        spec.target_mode = TargetMode::Fixed(DVector::from_vec(vec![0.5]));
        let policy = FnPolicy(|_, _: &DVector<f64>| DVector::from_vec(vec![0.3]));
        let tau = crate::env::rollout(&spec, &policy, 1).unwrap();
        let terms = quadratize_around_sample(&spec, &tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (t, term) in terms.iter().enumerate() {
            let x = std_normal_vec(3, &mut rng);
            let u = std_normal_vec(1, &mut rng);
            let (direct, _) = crate::env::cost_eval(&spec, &x, &u).unwrap();
            assert_relative_eq!(term.value_at(&x, &u), direct, epsilon = 1e-10, max_relative = 1e-10);
            let _ = t;
        }
    }

    #[test]
    fn quadratize_clamps_cuu() {
        let mut spec = EnvSpec::double_integrator(1, 5, 0.1);
        spec.action_cost_weight = 0.0; // cuu would be zero without the clamp
        let policy = FnPolicy(|_, _: &DVector<f64>| DVector::zeros(1));
        let tau = crate::env::rollout(&spec, &policy, 2).unwrap();
        let terms = quadratize_around_sample(&spec, &tau).unwrap();
        // Pre-clamp cuu is the zero matrix here, so delta_reg = 1e-6.
        for term in &terms {
            assert!(min_eigenvalue(&term.cuu) >= 1e-6 * (1.0 - 1e-9));
        }
    }

    #[test]
    fn backward_pass_reproduces_pbar_at_huge_eta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let horizon = 6;
        let dynamics = double_integrator_dynamics(horizon);
        let cost = quadratic_cost(
            &DMatrix::identity(2, 2),
            &(DMatrix::identity(1, 1) * 0.1),
            horizon,
        );
        let pbar = LinearGaussianPolicy {
            gain: (0..horizon)
                .map(|_| DMatrix::from_fn(1, 2, |_, _| crate::math::std_normal(&mut rng)))
                .collect(),
            bias: (0..horizon).map(|_| std_normal_vec(1, &mut rng)).collect(),
            cov: (0..horizon).map(|_| random_spd(1, 0.2, &mut rng)).collect(),
        };
        let solved = kl_backward_pass(&dynamics, &cost, &pbar, 1e12).unwrap();
        for t in 0..horizon {
            assert_relative_eq!(solved.gain[t], pbar.gain[t], max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(solved.bias[t], pbar.bias[t], max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(solved.cov[t], pbar.cov[t], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    /// Riccati oracle: at eta -> 0 the surrogate is dominated by the cost
    /// and the gains must match plain LQR.
    #[test]
    fn backward_pass_matches_riccati_at_tiny_eta() {
        let horizon = 12;
        let dynamics = double_integrator_dynamics(horizon);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.1]);
        let r = DMatrix::identity(1, 1) * 0.05;
        let cost = quadratic_cost(&q, &r, horizon);
        let pbar = LinearGaussianPolicy::zeros(horizon, 2, 1, 0.1);
        let solved = kl_backward_pass(&dynamics, &cost, &pbar, 1e-12).unwrap();
        let oracle = riccati_gains(&dynamics.fx[0], &dynamics.fu[0], &q, &r, horizon);
        for t in 0..horizon {
            assert_relative_eq!(solved.gain[t], oracle[t], epsilon = 1e-8);
        }
    }

    #[test]
    fn backward_pass_output_shapes() {
        let horizon = 7;
        let dynamics = double_integrator_dynamics(horizon);
        let cost = quadratic_cost(&DMatrix::identity(2, 2), &DMatrix::identity(1, 1), horizon);
        let pbar = LinearGaussianPolicy::zeros(horizon, 2, 1, 0.1);
        let solved = kl_backward_pass(&dynamics, &cost, &pbar, 1.0).unwrap();
        assert_eq!(solved.gain.len(), horizon);
        for t in 0..horizon {
            assert_eq!(solved.gain[t].shape(), (1, 2));
            assert_eq!(solved.bias[t].len(), 1);
            assert_eq!(solved.cov[t].shape(), (1, 1));
        }
    }

    /// Scaling the cost by s and eta by s leaves the surrogate unchanged.
    #[test]
    fn backward_pass_scale_consistency() {
        let horizon = 5;
        let dynamics = double_integrator_dynamics(horizon);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 0.3]);
        let r = DMatrix::identity(1, 1) * 0.2;
        let cost = quadratic_cost(&q, &r, horizon);
        let scaled: Vec<QuadCostTerm> = cost
            .iter()
            .map(|c| QuadCostTerm {
                cxx: &c.cxx * 7.0,
                cuu: &c.cuu * 7.0,
                cux: &c.cux * 7.0,
                cx: &c.cx * 7.0,
                cu: &c.cu * 7.0,
                c0: c.c0 * 7.0,
                x_ref: c.x_ref.clone(),
                u_ref: c.u_ref.clone(),
            })
            .collect();
        let pbar = LinearGaussianPolicy::zeros(horizon, 2, 1, 0.1);
        let a = kl_backward_pass(&dynamics, &cost, &pbar, 0.3).unwrap();
        let b = kl_backward_pass(&dynamics, &scaled, &pbar, 0.3 * 7.0).unwrap();
        for t in 0..horizon {
            assert_relative_eq!(a.gain[t], b.gain[t], epsilon = 1e-10);
            assert_relative_eq!(a.bias[t], b.bias[t], epsilon = 1e-10);
        }
    }

    fn test_setup(
        horizon: usize,
        seed: u64,
    ) -> (
        LinearGaussianDynamics,
        Vec<QuadCostTerm>,
        LinearGaussianPolicy,
        Gaussian,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dynamics = double_integrator_dynamics(horizon);
        let q = random_spd(2, 1.0, &mut rng);
        let r = random_spd(1, 0.1, &mut rng);
        let cost = quadratic_cost(&q, &r, horizon);
        let pbar = LinearGaussianPolicy {
            gain: (0..horizon)
                .map(|_| DMatrix::from_fn(1, 2, |_, _| 0.2 * crate::math::std_normal(&mut rng)))
                .collect(),
            bias: (0..horizon).map(|_| std_normal_vec(1, &mut rng) * 0.1).collect(),
            cov: vec![DMatrix::identity(1, 1) * 0.1; horizon],
        };
        let init = Gaussian::new(
            std_normal_vec(2, &mut rng),
            DMatrix::identity(2, 2) * 0.05,
        );
        (dynamics, cost, pbar, init)
    }

    #[test]
    fn solve_stays_near_pbar_with_tiny_budget() {
        let (dynamics, _, pbar, init) = test_setup(6, 3);
        // Cost minimized exactly on pbar's action means.
        let cost: Vec<QuadCostTerm> = (0..6)
            .map(|t| {
                let k = &pbar.gain[t];
                let b = &pbar.bias[t];
                QuadCostTerm {
                    cxx: k.transpose() * k * 2.0,
                    cuu: DMatrix::identity(1, 1) * 2.0,
                    cux: k * -2.0,
                    cx: k.transpose() * b * 2.0,
                    cu: b * -2.0,
                    c0: b.dot(b),
                    x_ref: DVector::zeros(2),
                    u_ref: DVector::zeros(1),
                }
            })
            .collect();
        let result = solve_local_policy(&dynamics, &cost, &pbar, &init, 1e-6).unwrap();
        assert!(result.kl_total <= 1.001e-6, "kl {}", result.kl_total);
        for t in 0..6 {
            assert_relative_eq!(result.policy.gain[t], pbar.gain[t], epsilon = 1e-3);
            assert_relative_eq!(result.policy.bias[t], pbar.bias[t], epsilon = 1e-3);
        }
    }

    /// Dense-grid oracle on a scalar one-step problem: the dual search must
    /// land within the [0.9 eps, eps] band that the grid shows is reachable.
    #[test]
    fn scalar_one_step_hits_the_band() {
        let dynamics = LinearGaussianDynamics {
            fx: vec![DMatrix::identity(1, 1)],
            fu: vec![DMatrix::identity(1, 1) * 0.1],
            fc: vec![DVector::zeros(1)],
            cov: vec![DMatrix::identity(1, 1) * 1e-4],
        };
        let cost = quadratic_cost(
            &(DMatrix::identity(1, 1) * 2.0),
            &(DMatrix::identity(1, 1) * 0.05),
            1,
        );
        let pbar = LinearGaussianPolicy::zeros(1, 1, 1, 0.2);
        let init = Gaussian::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1) * 0.01);

        // Grid oracle: KL(eta) over a dense log grid.
        let eval_kl = |eta: f64| -> f64 {
            let pol = kl_backward_pass(&dynamics, &cost, &pbar, eta).unwrap();
            let marg = compute_marginals(&init, &dynamics, &pol).unwrap();
            policy_kl(&pol, &pbar, &marg).unwrap().0
        };
        let epsilon = 0.5;
        let grid: Vec<f64> = (-60..=60).map(|i| (i as f64 * 0.2).exp()).collect();
        let kls: Vec<f64> = grid.iter().map(|&e| eval_kl(e)).collect();
        assert!(kls.iter().any(|&k| k > epsilon) && kls.iter().any(|&k| k < epsilon));

        let result = solve_local_policy(&dynamics, &cost, &pbar, &init, epsilon).unwrap();
        assert!(result.constraint_active);
        assert!(
            result.kl_total >= 0.9 * epsilon && result.kl_total <= 1.001 * epsilon,
            "achieved {}",
            result.kl_total
        );
    }

    /// Grid evaluation: achieved KL is monotone non-increasing in eta.
    #[test]
    fn kl_is_monotone_in_eta() {
        let (dynamics, cost, pbar, init) = test_setup(6, 5);
        let mut last = f64::INFINITY;
        for i in -8..=8 {
            let eta = (i as f64 * 0.8).exp();
            let pol = kl_backward_pass(&dynamics, &cost, &pbar, eta).unwrap();
            let marg = compute_marginals(&init, &dynamics, &pol).unwrap();
            let (kl, _) = policy_kl(&pol, &pbar, &marg).unwrap();
            assert!(kl <= last + 1e-9, "KL rose from {last} to {kl} at eta={eta}");
            last = kl;
        }
    }

    #[test]
    fn active_constraint_band_on_random_instances() {
        let mut solved_active = 0;
        for seed in 0..25 {
            let (dynamics, cost, pbar, init) = test_setup(8, 100 + seed);
            let epsilon = 1.0;
            let result = solve_local_policy(&dynamics, &cost, &pbar, &init, epsilon).unwrap();
            assert!(result.eta > 0.0);
            assert!(result.kl_total >= 0.0);
            if result.constraint_active {
                solved_active += 1;
                assert!(
                    result.kl_total >= 0.9 * epsilon && result.kl_total <= 1.001 * epsilon,
                    "seed {seed}: kl {} out of band",
                    result.kl_total
                );
            }
        }
        assert!(solved_active > 0);
    }

    /// With an effectively unbounded budget and the true dynamics supplied,
    /// the local policy's predicted cost matches the Riccati-optimal
    /// expected cost.
    #[test]
    fn unconstrained_solution_attains_riccati_cost() {
        let horizon = 10;
        let dynamics = double_integrator_dynamics(horizon);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.2]);
        let r = DMatrix::identity(1, 1) * 0.1;
        let cost = quadratic_cost(&q, &r, horizon);
        let pbar = LinearGaussianPolicy::zeros(horizon, 2, 1, 0.1);
        let init = Gaussian::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::identity(2, 2) * 0.02,
        );
        let result = solve_local_policy(&dynamics, &cost, &pbar, &init, 1e6).unwrap();

        let gains = riccati_gains(&dynamics.fx[0], &dynamics.fu[0], &q, &r, horizon);
        let riccati_policy = LinearGaussianPolicy {
            gain: gains,
            bias: vec![DVector::zeros(1); horizon],
            cov: vec![DMatrix::identity(1, 1) * 1e-18; horizon],
        };
        let marg = compute_marginals(&init, &dynamics, &riccati_policy).unwrap();
        let optimal = expected_quadratic_cost(&marg, &cost);
        assert_relative_eq!(result.expected_cost, optimal, max_relative = 1e-6);
    }

    fn batch_setup() -> (
        Vec<crate::env::Trajectory>,
        Assignment,
        Vec<ClusterModel>,
        EnvSpec,
    ) {
        let mut spec = EnvSpec::double_integrator(1, 6, 0.1);
        spec.target_mode = TargetMode::Fixed(DVector::from_vec(vec![0.5]));
        spec.process_noise_std = 0.01;
        let policy = LinearGaussianPolicy::zeros(spec.horizon, 3, 1, 0.05);
        let trajectories: Vec<crate::env::Trajectory> = (0..4)
            .map(|m| crate::env::rollout(&spec, &policy, 100 + m).unwrap())
            .collect();
        let assign = Assignment {
            labels: vec![0, 0, 0, 0],
            iterations: 1,
            converged: true,
            log_densities: vec![0.0; 4],
        };
        let cfg = crate::dynfit::FitConfig::default();
        let models =
            crate::cluster::m_step(&trajectories, &assign, 1, None, &cfg, false).unwrap();
        (trajectories, assign, models, spec)
    }

    #[test]
    fn update_all_returns_one_result_per_sample() {
        let (trajectories, assign, models, spec) = batch_setup();
        let results =
            update_all_local_policies(&trajectories, &assign, &models, &spec, 1.0).unwrap();
        assert_eq!(results.len(), trajectories.len());
        assert!(results.iter().all(|r| r.is_some()));
    }

    #[test]
    fn identical_trajectories_get_identical_policies() {
        let (mut trajectories, mut assign, models, spec) = batch_setup();
        trajectories[1] = trajectories[0].clone();
        assign.labels = vec![0, 0, 0, 0];
        let results =
            update_all_local_policies(&trajectories, &assign, &models, &spec, 1.0).unwrap();
        let a = results[0].as_ref().unwrap();
        let b = results[1].as_ref().unwrap();
        assert_eq!(a.policy.gain, b.policy.gain);
        assert_eq!(a.policy.bias, b.policy.bias);
        assert_eq!(a.eta, b.eta);
    }

    #[test]
    fn parallel_and_serial_paths_agree_bitwise() {
        let (trajectories, assign, models, spec) = batch_setup();
        let par = update_all_local_policies(&trajectories, &assign, &models, &spec, 1.0).unwrap();
        let ser =
            update_all_local_policies_serial(&trajectories, &assign, &models, &spec, 1.0).unwrap();
        for (a, b) in par.iter().zip(&ser) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.policy.gain, b.policy.gain);
            assert_eq!(a.policy.bias, b.policy.bias);
            assert_eq!(a.policy.cov, b.policy.cov);
            assert!(a.eta == b.eta && a.kl_total == b.kl_total);
            assert!(a.expected_cost == b.expected_cost);
        }
    }

    #[test]
    fn step_rule_fixed_point() {
        let step = StepState::new(0.8, 1e-4, 8.0);
        let next = adjust_step_size(&step, 0.5, 1.0); // dJ = dJ_pred / 2
        assert_eq!(next.epsilon, 0.8);
    }

    #[test]
    fn step_rule_halves_on_no_improvement() {
        let step = StepState::new(0.8, 1e-4, 8.0);
        let next = adjust_step_size(&step, 0.0, 1.0);
        assert_eq!(next.epsilon, 0.4);
    }

    #[test]
    fn step_rule_doubles_when_beating_prediction() {
        let step = StepState::new(0.8, 1e-4, 8.0);
        let next = adjust_step_size(&step, 1.0, 1.0); // singular denominator
        assert_eq!(next.epsilon, 1.6);
        let capped = adjust_step_size(&StepState::new(6.0, 1e-4, 8.0), 2.0, 1.0);
        assert_eq!(capped.epsilon, 8.0);
    }

    #[test]
    fn step_rule_always_clamped() {
        let step = StepState::new(1.0, 1e-4, 10.0);
        for (dj, pred) in [(-5.0, 1.0), (0.99, 1.0), (100.0, 1.0), (0.0, -3.0), (1.0, 0.0)] {
            let next = adjust_step_size(&step, dj, pred);
            assert!(next.epsilon >= step.eps_min && next.epsilon <= step.eps_max);
        }
    }
}
