//! Time-varying linear-Gaussian trajectory mathematics.
//!
//! Everything downstream (clustering, the backward pass, the step rule)
//! leans on four closed-form operations over affine-Gaussian chains:
//! forward marginals, expected quadratic cost, per-step policy KL, and
//! trajectory log-density.

use nalgebra::{DMatrix, DVector};

use crate::cluster::ClusterModel;
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::math::{chol_floored, max_asymmetry, symmetrize, Gaussian};

/// p(x_{t+1} | x_t, u_t) = N(fx[t] x + fu[t] u + fc[t], cov[t]) for t in 0..T.
#[derive(Debug, Clone)]
pub struct LinearGaussianDynamics {
    pub fx: Vec<DMatrix<f64>>,
    pub fu: Vec<DMatrix<f64>>,
    pub fc: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl LinearGaussianDynamics {
    pub fn horizon(&self) -> usize {
        self.fx.len()
    }

    pub fn state_dim(&self) -> usize {
        self.fx[0].nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.fu[0].ncols()
    }

    /// Mean next state.
    pub fn step_mean(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.fx[t] * x + &self.fu[t] * u + &self.fc[t]
    }
}

/// u_t | x_t ~ N(gain[t] x + bias[t], cov[t]). Serves both the local
/// controllers and the regression linearizations of the global policy.
#[derive(Debug, Clone)]
pub struct LinearGaussianPolicy {
    pub gain: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl LinearGaussianPolicy {
    pub fn horizon(&self) -> usize {
        self.gain.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gain[0].ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.gain[0].nrows()
    }

    pub fn mean_action(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gain[t] * x + &self.bias[t]
    }

    /// Zero-gain, zero-bias policy with the given isotropic covariance.
    pub fn zeros(horizon: usize, dx: usize, du: usize, noise_var: f64) -> Self {
        Self {
            gain: vec![DMatrix::zeros(du, dx); horizon],
            bias: vec![DVector::zeros(du); horizon],
            cov: vec![DMatrix::identity(du, du) * noise_var; horizon],
        }
    }
}

/// Per-step joint Gaussians over (x_t, u_t) plus the terminal state marginal.
#[derive(Debug, Clone)]
pub struct GaussianMarginals {
    pub joint: Vec<Gaussian>,
    pub terminal: Gaussian,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GaussianMarginals {
    pub fn horizon(&self) -> usize {
        self.joint.len()
    }

    pub fn state_mean(&self, t: usize) -> DVector<f64> {
        self.joint[t].mean.rows(0, self.state_dim).into_owned()
    }

    pub fn state_cov(&self, t: usize) -> DMatrix<f64> {
        self.joint[t]
            .cov
            .view((0, 0), (self.state_dim, self.state_dim))
            .into_owned()
    }
}

/// Second-order expansion of the cost at (x_ref, u_ref):
/// c ≈ c0 + cx·δx + cu·δu + ½ δx'cxx δx + ½ δu'cuu δu + δu'cux δx.
#[derive(Debug, Clone)]
pub struct QuadCostTerm {
    pub cxx: DMatrix<f64>,
    pub cuu: DMatrix<f64>,
    pub cux: DMatrix<f64>,
    pub cx: DVector<f64>,
    pub cu: DVector<f64>,
    pub c0: f64,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
}

impl QuadCostTerm {
    pub fn state_dim(&self) -> usize {
        self.cxx.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.cuu.nrows()
    }

    /// Evaluate the expansion at an arbitrary point.
    pub fn value_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        self.c0
            + self.cx.dot(&dx)
            + self.cu.dot(&du)
            + 0.5 * dx.dot(&(&self.cxx * &dx))
            + 0.5 * du.dot(&(&self.cuu * &du))
            + du.dot(&(&self.cux * &dx))
    }

    /// Re-express the same quadratic with reference point at the origin.
    /// Hessian blocks are unchanged; gradient and constant shift.
    pub fn to_origin(&self) -> QuadCostTerm {
        let xr = &self.x_ref;
        let ur = &self.u_ref;
        let ax = &self.cx - &self.cxx * xr - self.cux.transpose() * ur;
        let au = &self.cu - &self.cuu * ur - &self.cux * xr;
        let a0 = self.c0 - self.cx.dot(xr) - self.cu.dot(ur)
            + 0.5 * xr.dot(&(&self.cxx * xr))
            + 0.5 * ur.dot(&(&self.cuu * ur))
            + ur.dot(&(&self.cux * xr));
        QuadCostTerm {
            cxx: self.cxx.clone(),
            cuu: self.cuu.clone(),
            cux: self.cux.clone(),
            cx: ax,
            cu: au,
            c0: a0,
            x_ref: DVector::zeros(self.state_dim()),
            u_ref: DVector::zeros(self.action_dim()),
        }
    }

    /// Joint Hessian over z = (x, u).
    pub fn hessian(&self) -> DMatrix<f64> {
        let (dx, du) = (self.state_dim(), self.action_dim());
        let mut h = DMatrix::zeros(dx + du, dx + du);
        h.view_mut((0, 0), (dx, dx)).copy_from(&self.cxx);
        h.view_mut((dx, dx), (du, du)).copy_from(&self.cuu);
        h.view_mut((dx, 0), (du, dx)).copy_from(&self.cux);
        h.view_mut((0, dx), (dx, du))
            .copy_from(&self.cux.transpose());
        h
    }
}

/// Tolerance above which propagated covariances are treated as defective
/// rather than silently symmetrized.
const SYMMETRY_TOL: f64 = 1e-6;

/// Exact forward propagation of means and covariances through
/// p(x1) Π pol(u|x) dyn(x'|x,u).
pub fn compute_marginals(
    init: &Gaussian,
    dynamics: &LinearGaussianDynamics,
    policy: &LinearGaussianPolicy,
) -> Result<GaussianMarginals> {
    let horizon = dynamics.horizon();
    if policy.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "compute_marginals horizon",
            expected: horizon,
            got: policy.horizon(),
        });
    }
    let dx = dynamics.state_dim();
    let du = dynamics.action_dim();
    if init.dim() != dx || policy.state_dim() != dx || policy.action_dim() != du {
        return Err(Error::DimensionMismatch {
            context: "compute_marginals dims",
            expected: dx,
            got: init.dim(),
        });
    }

    let mut mean_x = init.mean.clone();
    let mut cov_x = init.cov.clone();
    let mut joint = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let asym = max_asymmetry(&cov_x);
        let scale = 1.0 + cov_x.amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::AsymmetricCovariance {
                context: "compute_marginals",
                asymmetry: asym,
            });
        }
        cov_x = symmetrize(&cov_x);

        let gain = &policy.gain[t];
        let mean_u = gain * &mean_x + &policy.bias[t];
        let cross = gain * &cov_x; // cov(u, x)
        let cov_u = &cross * gain.transpose() + &policy.cov[t];

        let mut mean_z = DVector::zeros(dx + du);
        mean_z.rows_mut(0, dx).copy_from(&mean_x);
        mean_z.rows_mut(dx, du).copy_from(&mean_u);
        let mut cov_z = DMatrix::zeros(dx + du, dx + du);
        cov_z.view_mut((0, 0), (dx, dx)).copy_from(&cov_x);
        cov_z.view_mut((dx, 0), (du, dx)).copy_from(&cross);
        cov_z
            .view_mut((0, dx), (dx, du))
            .copy_from(&cross.transpose());
        cov_z.view_mut((dx, dx), (du, du)).copy_from(&cov_u);
        let cov_z = symmetrize(&cov_z);

        // x' = [fx fu] z + fc + w
        let mut fz = DMatrix::zeros(dx, dx + du);
        fz.view_mut((0, 0), (dx, dx)).copy_from(&dynamics.fx[t]);
        fz.view_mut((0, dx), (dx, du)).copy_from(&dynamics.fu[t]);
        mean_x = &fz * &mean_z + &dynamics.fc[t];
        cov_x = symmetrize(&(&fz * &cov_z * fz.transpose() + &dynamics.cov[t]));

        joint.push(Gaussian::new(mean_z, cov_z));
    }

    Ok(GaussianMarginals {
        joint,
        terminal: Gaussian::new(mean_x, cov_x),
        state_dim: dx,
        action_dim: du,
    })
}

/// E[c(z)] for one quadratic term under one joint Gaussian:
/// with the term rebased at the origin, E = a0 + g·μ + ½ μ'Hμ + ½ tr(HΣ).
fn expected_term(term: &QuadCostTerm, joint: &Gaussian) -> f64 {
    let o = term.to_origin();
    let h = o.hessian();
    let mut g = DVector::zeros(o.state_dim() + o.action_dim());
    g.rows_mut(0, o.state_dim()).copy_from(&o.cx);
    g.rows_mut(o.state_dim(), o.action_dim()).copy_from(&o.cu);
    let mu = &joint.mean;
    let hmu = &h * mu;
    o.c0 + g.dot(mu) + 0.5 * mu.dot(&hmu) + 0.5 * (&h * &joint.cov).trace()
}

/// Σ_t E[c_t(x_t, u_t)] in closed form under the marginals.
pub fn expected_quadratic_cost(marginals: &GaussianMarginals, cost: &[QuadCostTerm]) -> f64 {
    assert_eq!(marginals.horizon(), cost.len(), "horizon mismatch");
    cost.iter()
        .zip(&marginals.joint)
        .map(|(term, joint)| expected_term(term, joint))
        .sum()
}

/// Per-step E_{x_t}[KL(q(u|x) || pbar(u|x))] under the state marginals,
/// plus the total over the horizon.
pub fn policy_kl(
    q: &LinearGaussianPolicy,
    pbar: &LinearGaussianPolicy,
    marginals: &GaussianMarginals,
) -> Result<(f64, Vec<f64>)> {
    let horizon = q.horizon();
    if pbar.horizon() != horizon || marginals.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "policy_kl horizon",
            expected: horizon,
            got: pbar.horizon().min(marginals.horizon()),
        });
    }
    let du = q.action_dim() as f64;
    let mut per_step = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let chol_bar = nalgebra::Cholesky::new(symmetrize(&pbar.cov[t]))
            .ok_or(Error::SingularCovariance("policy_kl: pbar covariance"))?;
        let chol_q = nalgebra::Cholesky::new(symmetrize(&q.cov[t]))
            .ok_or(Error::SingularCovariance("policy_kl: q covariance"))?;
        let logdet_bar: f64 = chol_bar.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let logdet_q: f64 = chol_q.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();

        let trace_term = chol_bar.solve(&q.cov[t]).trace();

        let dgain = &pbar.gain[t] - &q.gain[t];
        let dbias = &pbar.bias[t] - &q.bias[t];
        let mu_x = marginals.state_mean(t);
        let cov_x = marginals.state_cov(t);
        let dmean = &dgain * &mu_x + &dbias;
        let mean_term = dmean.dot(&chol_bar.solve(&dmean));
        let spread_term = (chol_bar.solve(&(&dgain * &cov_x * dgain.transpose()))).trace();

        let kl = 0.5 * (trace_term + mean_term + spread_term - du + logdet_bar - logdet_q);
        per_step.push(kl.max(0.0));
    }
    Ok((per_step.iter().sum(), per_step))
}

/// log p_k(tau) under a cluster's Gaussian trajectory distribution:
/// log p(x1) + Σ_t [log pol(u_t|x_t) + log dyn(x_{t+1}|x_t,u_t)].
/// Each factor covariance is eigenvalue-floored at `floor` before use.
pub fn traj_log_density(phi: &ClusterModel, tau: &Trajectory, floor: f64) -> Result<f64> {
    let horizon = phi.dynamics.horizon();
    if tau.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "traj_log_density horizon",
            expected: horizon,
            got: tau.horizon(),
        });
    }
    let mut total = phi
        .init_gaussian
        .log_density_floored(&tau.states[0], floor)?;
    for t in 0..horizon {
        let x = &tau.states[t];
        let u = &tau.actions[t];
        let pol_mean = phi.policy_lin.mean_action(t, x);
        total += gaussian_log_density(&pol_mean, &phi.policy_lin.cov[t], u, floor)?;
        let dyn_mean = phi.dynamics.step_mean(t, x, u);
        total += gaussian_log_density(&dyn_mean, &phi.dynamics.cov[t], &tau.states[t + 1], floor)?;
    }
    Ok(total)
}

fn gaussian_log_density(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &DVector<f64>,
    floor: f64,
) -> Result<f64> {
    const LN_2PI: f64 = 1.8378770664093453;
    let chol = chol_floored(cov, floor)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let resid = x - mean;
    let solved = chol.solve(&resid);
    Ok(-0.5 * (mean.len() as f64 * LN_2PI + log_det + resid.dot(&solved)))
}
