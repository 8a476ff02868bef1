//! Fitting time-varying linear-Gaussian models from sample sets.
//!
//! Per-timestep conditioning of a joint Gaussian over (inputs, targets):
//! dynamics tuples are (x_t, u_t, x_{t+1}), policy tuples are (x_t, u_t).
//! A GMM fit to tuples pooled over every timestep can be blended in as a
//! normal-inverse-Wishart-style prior to cut the per-timestep sample
//! requirement.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::lingauss::{LinearGaussianDynamics, LinearGaussianPolicy};
use crate::math::{chol_floored, floor_spd, sample_moments, symmetrize, LAMBDA_FLOOR};

/// Knobs shared by every fit in one run.
#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    /// Additive floor on fitted residual covariances.
    pub lambda_floor: f64,
    /// lambda_ridge = ridge_scale * tr(input cov) / input dim.
    pub ridge_scale: f64,
    /// Pseudo-count strength n0 of the GMM prior blend.
    pub prior_strength: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_floor: LAMBDA_FLOOR,
            ridge_scale: 1e-6,
            prior_strength: 1.0,
        }
    }
}

/// Gaussian mixture over tuple space, with the fit's log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub log_likelihood_trace: Vec<f64>,
}

impl GmmPrior {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Responsibility-weighted mixture moments at a query point. The
    /// covariance includes the between-component spread.
    pub fn moments_at(&self, query: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut log_resp: Vec<f64> = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let chol = chol_floored(&self.covs[k], LAMBDA_FLOOR).expect("floored prior cov");
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let r = query - &self.means[k];
            let quad = r.dot(&chol.solve(&r));
            log_resp.push(self.weights[k].ln() - 0.5 * (log_det + quad));
        }
        let max = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = resp.iter().sum();
        for r in &mut resp {
            *r /= norm;
        }

        let mut mean = DVector::zeros(d);
        for k in 0..self.n_components() {
            mean += &self.means[k] * resp[k];
        }
        let mut cov = DMatrix::zeros(d, d);
        for k in 0..self.n_components() {
            let dm = &self.means[k] - &mean;
            cov += (&self.covs[k] + dm.clone() * dm.transpose()) * resp[k];
        }
        (mean, symmetrize(&cov))
    }
}

/// Trajectories assigned to one cluster/condition plus tuple extraction.
#[derive(Debug, Clone)]
pub struct SampleSet<'a> {
    members: Vec<&'a Trajectory>,
}

impl<'a> SampleSet<'a> {
    pub fn new(members: Vec<&'a Trajectory>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::TooFewTrajectories { need: 1, got: 0 });
        }
        let horizon = members[0].horizon();
        if members.iter().any(|t| t.horizon() != horizon) {
            return Err(Error::DimensionMismatch {
                context: "SampleSet horizon",
                expected: horizon,
                got: 0,
            });
        }
        Ok(Self { members })
    }

    pub fn from_labels(
        trajectories: &'a [Trajectory],
        labels: &[usize],
        cluster: usize,
    ) -> Result<Self> {
        Self::new(
            trajectories
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == cluster)
                .map(|(t, _)| t)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.members[0].horizon()
    }

    pub fn members(&self) -> &[&'a Trajectory] {
        &self.members
    }

    /// Initial states of the member trajectories.
    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.members.iter().map(|t| t.states[0].clone()).collect()
    }

    /// (x_t, u_t) inputs and x_{t+1} targets at one timestep.
    fn dynamics_pairs(&self, t: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut inputs = Vec::with_capacity(self.len());
        let mut targets = Vec::with_capacity(self.len());
        for tau in &self.members {
            inputs.push(stack(&tau.states[t], &tau.actions[t]));
            targets.push(tau.states[t + 1].clone());
        }
        (inputs, targets)
    }

    /// x_t inputs and u_t targets at one timestep.
    fn policy_pairs(&self, t: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut inputs = Vec::with_capacity(self.len());
        let mut targets = Vec::with_capacity(self.len());
        for tau in &self.members {
            inputs.push(tau.states[t].clone());
            targets.push(tau.actions[t].clone());
        }
        (inputs, targets)
    }

    /// All (x_t, u_t, x_{t+1}) tuples pooled over timesteps, for prior fits.
    pub fn dynamics_tuples(&self) -> Vec<DVector<f64>> {
        let mut rows = Vec::new();
        for tau in &self.members {
            for t in 0..tau.horizon() {
                rows.push(stack(&stack(&tau.states[t], &tau.actions[t]), &tau.states[t + 1]));
            }
        }
        rows
    }

    /// All (x_t, u_t) tuples pooled over timesteps.
    pub fn policy_tuples(&self) -> Vec<DVector<f64>> {
        let mut rows = Vec::new();
        for tau in &self.members {
            for t in 0..tau.horizon() {
                rows.push(stack(&tau.states[t], &tau.actions[t]));
            }
        }
        rows
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Per-timestep degeneracy flags raised during a fit.
#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    pub degenerate_timesteps: Vec<usize>,
}

/// Fit a Gaussian mixture to tuple rows with k-means++-style seeding and EM.
/// Stops when the relative log-likelihood gain drops below 1e-6 or after
/// 100 iterations.
pub fn fit_gmm_prior(
    tuples: &[DVector<f64>],
    n_components: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GmmPrior> {
    let n = tuples.len();
    if n < n_components || n_components == 0 {
        return Err(Error::TooFewTrajectories {
            need: n_components.max(1),
            got: n,
        });
    }
    let d = tuples[0].len();
    let (_, data_cov) = sample_moments(tuples);
    let data_cov = floor_spd(&data_cov, LAMBDA_FLOOR);

    // k-means++-style seeding.
    let mut centers: Vec<DVector<f64>> = vec![tuples[rng.gen_range(0..n)].clone()];
    while centers.len() < n_components {
        let d2: Vec<f64> = tuples
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if pick < w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(tuples[idx].clone());
    }

    let k = n_components;
    let mut weights = vec![1.0 / k as f64; k];
    let mut means = centers;
    let mut covs = vec![data_cov.clone(); k];
    let mut trace: Vec<f64> = Vec::new();

    let mut resp = DMatrix::zeros(n, k);
    for _iter in 0..100 {
        // E-step: responsibilities and total log-likelihood.
        let chols: Vec<_> = covs
            .iter()
            .map(|c| chol_floored(c, LAMBDA_FLOOR))
            .collect::<Result<_>>()?;
        let log_dets: Vec<f64> = chols
            .iter()
            .map(|c| c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum())
            .collect();
        const LN_2PI: f64 = 1.8378770664093453;
        let mut loglik = 0.0;
        for (i, x) in tuples.iter().enumerate() {
            let mut lp = vec![0.0; k];
            for j in 0..k {
                let r = x - &means[j];
                let quad = r.dot(&chols[j].solve(&r));
                lp[j] = weights[j].ln() - 0.5 * (d as f64 * LN_2PI + log_dets[j] + quad);
            }
            let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lp.iter().map(|v| (v - max).exp()).sum();
            loglik += max + sum.ln();
            for j in 0..k {
                resp[(i, j)] = (lp[j] - max).exp() / sum;
            }
        }
        let improved = match trace.last() {
            Some(&prev) => loglik - prev >= 1e-6 * prev.abs().max(1.0),
            None => true,
        };
        trace.push(loglik);
        if !improved {
            break;
        }

        // M-step.
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[(i, j)]).sum();
            if nk < (d + 1) as f64 * 1e-3 {
                // Degenerate component: re-seed from a random datum.
                means[j] = tuples[rng.gen_range(0..n)].clone();
                covs[j] = data_cov.clone();
                weights[j] = 1.0 / k as f64;
                continue;
            }
            let mut mean = DVector::zeros(d);
            for i in 0..n {
                mean += tuples[i].clone() * resp[(i, j)];
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..n {
                let c = &tuples[i] - &mean;
                cov.ger(resp[(i, j)] / nk, &c, &c, 1.0);
            }
            weights[j] = nk / n as f64;
            means[j] = mean;
            covs[j] = floor_spd(&cov, LAMBDA_FLOOR);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }
    Ok(GmmPrior {
        weights,
        means,
        covs,
        log_likelihood_trace: trace,
    })
}

/// Condition a joint Gaussian over (input, target) on the input block,
/// optionally blending GMM prior moments with n0 pseudo-counts first.
/// Returns (coef, offset, residual covariance, degenerate?).
fn fit_affine_conditional(
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, bool) {
    let n = inputs.len() as f64;
    let din = inputs[0].len();
    let dout = targets[0].len();
    let joint: Vec<DVector<f64>> = inputs
        .iter()
        .zip(targets)
        .map(|(i, t)| stack(i, t))
        .collect();
    let (emp_mean, emp_cov) = sample_moments(&joint);

    let (mean, cov) = match (prior, cfg.prior_strength) {
        (Some(gmm), n0) if n0 > 0.0 => {
            let (pr_mean, pr_cov) = gmm.moments_at(&emp_mean);
            let mean = (&emp_mean * n + &pr_mean * n0) / (n + n0);
            let dm = &emp_mean - &pr_mean;
            let spread = dm.clone() * dm.transpose() * (n * n0 / (n + n0));
            let cov = (&emp_cov * n + &pr_cov * n0 + spread) / (n + n0);
            (mean, symmetrize(&cov))
        }
        _ => (emp_mean, emp_cov),
    };

    let sxx = cov.view((0, 0), (din, din)).into_owned();
    let sxy = cov.view((0, din), (din, dout)).into_owned();
    let syy = cov.view((din, din), (dout, dout)).into_owned();

    let lambda_ridge = cfg.ridge_scale * sxx.trace() / din as f64;
    let mut sxx_reg = sxx + DMatrix::identity(din, din) * lambda_ridge;

    let mut degenerate = false;
    let chol = loop {
        match nalgebra::Cholesky::new(symmetrize(&sxx_reg)) {
            Some(c) => {
                // Rank deficiency shows up as near-zero pivots even when the
                // factorization succeeds.
                let scale = sxx_reg.trace() / din as f64;
                if c.l().diagonal().iter().any(|&p| p * p < 1e-12 * scale.max(1e-300)) {
                    degenerate = true;
                }
                break c;
            }
            None => {
                degenerate = true;
                sxx_reg += DMatrix::identity(din, din) * cfg.lambda_floor.max(1e-12);
            }
        }
    };

    let coef = chol.solve(&sxy).transpose(); // dout × din
    let offset = mean.rows(din, dout).into_owned() - &coef * mean.rows(0, din).into_owned();
    let resid_cov = symmetrize(&(syy - &coef * sxy))
        + DMatrix::identity(dout, dout) * cfg.lambda_floor;
    (coef, offset, resid_cov, degenerate)
}

/// Per-timestep regression of x_{t+1} on (x_t, u_t) across the set.
pub fn fit_dynamics(
    data: &SampleSet,
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<(LinearGaussianDynamics, FitDiagnostics)> {
    let need = if prior.is_some() { 1 } else { 2 };
    if data.len() < need {
        return Err(Error::TooFewTrajectories {
            need,
            got: data.len(),
        });
    }
    let horizon = data.horizon();
    let dx = data.members()[0].states[0].len();
    let du = data.members()[0].actions[0].len();
    let mut dynamics = LinearGaussianDynamics {
        fx: Vec::with_capacity(horizon),
        fu: Vec::with_capacity(horizon),
        fc: Vec::with_capacity(horizon),
        cov: Vec::with_capacity(horizon),
    };
    let mut diag = FitDiagnostics::default();
    for t in 0..horizon {
        let (inputs, targets) = data.dynamics_pairs(t);
        let (coef, offset, resid, degenerate) = fit_affine_conditional(&inputs, &targets, prior, cfg);
        if degenerate {
            diag.degenerate_timesteps.push(t);
        }
        dynamics.fx.push(coef.view((0, 0), (dx, dx)).into_owned());
        dynamics.fu.push(coef.view((0, dx), (dx, du)).into_owned());
        dynamics.fc.push(offset);
        dynamics.cov.push(resid);
    }
    Ok((dynamics, diag))
}

/// Per-timestep regression of u_t on x_t across the set.
pub fn fit_policy_linearization(
    data: &SampleSet,
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<(LinearGaussianPolicy, FitDiagnostics)> {
    let need = if prior.is_some() { 1 } else { 2 };
    if data.len() < need {
        return Err(Error::TooFewTrajectories {
            need,
            got: data.len(),
        });
    }
    let horizon = data.horizon();
    let mut policy = LinearGaussianPolicy {
        gain: Vec::with_capacity(horizon),
        bias: Vec::with_capacity(horizon),
        cov: Vec::with_capacity(horizon),
    };
    let mut diag = FitDiagnostics::default();
    for t in 0..horizon {
        let (inputs, targets) = data.policy_pairs(t);
        let (coef, offset, resid, degenerate) = fit_affine_conditional(&inputs, &targets, prior, cfg);
        if degenerate {
            diag.degenerate_timesteps.push(t);
        }
        policy.gain.push(coef);
        policy.bias.push(offset);
        policy.cov.push(resid);
    }
    Ok((policy, diag))
}
