//! Hard-EM clustering of rollouts into Gaussian trajectory distributions.
//!
//! Each cluster is an initial-state Gaussian, a dynamics linearization, a
//! policy linearization, and a mixture mass; together they score whole
//! trajectories, and the E-step assigns every rollout to its most likely
//! cluster.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dynfit::{fit_dynamics, fit_policy_linearization, FitConfig, GmmPrior, SampleSet};
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::lingauss::{traj_log_density, LinearGaussianDynamics, LinearGaussianPolicy};
use crate::math::{floor_spd, sample_moments, Gaussian};

/// All parameters of one cluster's Gaussian trajectory distribution.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub init_gaussian: Gaussian,
    pub dynamics: LinearGaussianDynamics,
    pub policy_lin: LinearGaussianPolicy,
    pub mass: f64,
}

/// Cluster index per trajectory plus EM bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Best per-trajectory log P(k) + log p_k(tau) from the last E-step
    /// (empty right after random initialization).
    pub log_densities: Vec<f64>,
}

impl Assignment {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Per-run clustering diagnostics for the training report.
#[derive(Debug, Clone, Default)]
pub struct ClusterDiagnostics {
    pub rounds: usize,
    /// Classification log-likelihood after each full M+E round.
    pub class_loglik: Vec<f64>,
    pub sizes: Vec<usize>,
    pub converged: bool,
}

/// GMM priors for the two regression problems, fit on pooled tuples.
#[derive(Debug, Clone)]
pub struct FitPriors {
    pub dynamics: GmmPrior,
    pub policy: GmmPrior,
}

/// Minimum member count demanded of every cluster at initialization.
fn init_min_occupancy(m: usize, k: usize) -> usize {
    (m / k).min(2.max(m / (2 * k)))
}

/// Minimum member count enforced after each E-step.
fn em_min_occupancy(m: usize, k: usize) -> usize {
    (m / k).min(2)
}

/// Uniform random assignment conditioned on every cluster meeting the
/// occupancy minimum; redraws until satisfied, then repairs
/// deterministically if an unlucky streak persists.
pub fn init_assignments(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Assignment> {
    if k == 0 || m < k {
        return Err(Error::TooManyClusters { k, m });
    }
    let min_occ = init_min_occupancy(m, k);
    let mut labels = vec![0usize; m];
    for _attempt in 0..1000 {
        for l in labels.iter_mut() {
            *l = rng.gen_range(0..k);
        }
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s >= min_occ) {
            return Ok(Assignment {
                labels,
                iterations: 0,
                converged: false,
                log_densities: Vec::new(),
            });
        }
    }
    // Deterministic repair: hand members of the largest clusters to the
    // deficient ones.
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    for cluster in 0..k {
        while sizes[cluster] < min_occ {
            let donor = (0..k).max_by_key(|&c| sizes[c]).unwrap();
            let idx = labels.iter().position(|&l| l == donor).unwrap();
            labels[idx] = cluster;
            sizes[donor] -= 1;
            sizes[cluster] += 1;
        }
    }
    Ok(Assignment {
        labels,
        iterations: 0,
        converged: false,
        log_densities: Vec::new(),
    })
}

/// Refit every cluster from its members: initial-state moments, dynamics,
/// and policy linearization. `uniform_mass` is used for the very first
/// M-step after random initialization, before any E-step has run.
pub fn m_step(
    trajectories: &[Trajectory],
    assign: &Assignment,
    k: usize,
    priors: Option<&FitPriors>,
    cfg: &FitConfig,
    uniform_mass: bool,
) -> Result<Vec<ClusterModel>> {
    let m = trajectories.len();
    let mut models = Vec::with_capacity(k);
    for cluster in 0..k {
        let set = SampleSet::from_labels(trajectories, &assign.labels, cluster)?;
        let true_count = set.len();
        // A single-member cluster fits as a constant predictor: duplicating
        // the member leaves every moment unchanged while satisfying the
        // two-trajectory minimum of the prior-free regression.
        let set = if true_count == 1 && priors.is_none() {
            let only = set.members()[0];
            SampleSet::new(vec![only, only])?
        } else {
            set
        };
        let inits = set.initial_states();
        let (mean, cov) = sample_moments(&inits);
        let init_gaussian = Gaussian::new(mean, floor_spd(&cov, cfg.lambda_floor));
        let (dynamics, _) = fit_dynamics(&set, priors.map(|p| &p.dynamics), cfg)?;
        let (policy_lin, _) = fit_policy_linearization(&set, priors.map(|p| &p.policy), cfg)?;
        let mass = if uniform_mass {
            1.0 / k as f64
        } else {
            true_count as f64 / m as f64
        };
        models.push(ClusterModel {
            init_gaussian,
            dynamics,
            policy_lin,
            mass,
        });
    }
    Ok(models)
}

/// Assign each trajectory to argmax_k [log P(k) + log p_k(tau)], ties to
/// the lowest index.
pub fn e_step(
    trajectories: &[Trajectory],
    models: &[ClusterModel],
    floor: f64,
) -> Result<Assignment> {
    if models.is_empty() {
        return Err(Error::TooManyClusters { k: 0, m: trajectories.len() });
    }
    let mut labels = Vec::with_capacity(trajectories.len());
    let mut log_densities = Vec::with_capacity(trajectories.len());
    for tau in trajectories {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (idx, model) in models.iter().enumerate() {
            let score = model.mass.ln() + traj_log_density(model, tau, floor)?;
            if score > best.1 {
                best = (idx, score);
            }
        }
        labels.push(best.0);
        log_densities.push(best.1);
    }
    Ok(Assignment {
        labels,
        iterations: 0,
        converged: false,
        log_densities,
    })
}

/// Move the worst-fitting trajectories of oversized clusters into deficient
/// ones until every cluster has at least `min_occ` members.
fn repair_occupancy(assign: &mut Assignment, k: usize, min_occ: usize) {
    let mut sizes = vec![0usize; k];
    for &l in &assign.labels {
        sizes[l] += 1;
    }
    for cluster in 0..k {
        while sizes[cluster] < min_occ {
            // Donor: the cluster with the most members; from it, take the
            // member with the lowest assigned log-density (the outlier).
            let donor = (0..k)
                .filter(|&c| sizes[c] > min_occ.max(1))
                .max_by_key(|&c| sizes[c]);
            let Some(donor) = donor else { break };
            let victim = assign
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == donor)
                .min_by(|(i, _), (j, _)| {
                    let a = assign.log_densities.get(*i).copied().unwrap_or(0.0);
                    let b = assign.log_densities.get(*j).copied().unwrap_or(0.0);
                    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i)
                .expect("donor cluster has members");
            assign.labels[victim] = cluster;
            sizes[donor] -= 1;
            sizes[cluster] += 1;
        }
    }
}

/// Classification log-likelihood of an assignment under the given models.
pub fn classification_loglik(
    trajectories: &[Trajectory],
    models: &[ClusterModel],
    assign: &Assignment,
    floor: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (tau, &label) in trajectories.iter().zip(&assign.labels) {
        total += models[label].mass.ln() + traj_log_density(&models[label], tau, floor)?;
    }
    Ok(total)
}

/// Alternate M- and E-steps until assignments stop changing or `max_iters`
/// rounds have run.
pub fn cluster_trajectories(
    trajectories: &[Trajectory],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
    priors: Option<&FitPriors>,
    cfg: &FitConfig,
) -> Result<(Assignment, Vec<ClusterModel>, ClusterDiagnostics)> {
    let m = trajectories.len();
    let mut assign = init_assignments(m, k, rng)?;
    let mut diag = ClusterDiagnostics::default();
    let min_occ = em_min_occupancy(m, k);

    // The recorded sequence is loglik(models_r, labels_r) with labels_r the
    // assignment the round's models were fitted on; under ML refits this is
    // the classically non-decreasing hard-EM objective.
    let mut models = m_step(trajectories, &assign, k, priors, cfg, true)?;
    for round in 1..=max_iters.max(1) {
        diag.rounds = round;
        diag.class_loglik.push(classification_loglik(
            trajectories,
            &models,
            &assign,
            cfg.lambda_floor,
        )?);
        let mut new_assign = e_step(trajectories, &models, cfg.lambda_floor)?;
        repair_occupancy(&mut new_assign, k, min_occ);
        let converged = new_assign.labels == assign.labels;
        new_assign.iterations = round;
        new_assign.converged = converged;
        assign = new_assign;
        if converged {
            break;
        }
        models = m_step(trajectories, &assign, k, priors, cfg, false)?;
    }
    if !assign.converged {
        // max_iters hit after a label change: refit so the returned models
        // match the returned assignment.
        models = m_step(trajectories, &assign, k, priors, cfg, false)?;
    }

    diag.converged = assign.converged;
    diag.sizes = assign.cluster_sizes(k);
    Ok((assign, models, diag))
}

/// The full clustering stage: run `restarts` independent EM passes and keep
/// the one with the highest final classification log-likelihood. Hard EM
/// occasionally collapses most trajectories into one cluster from an
/// unlucky initial partition; collapsed solutions score far below separated
/// ones, so the best-of-restarts rule discards them.
pub fn cluster_trajectories_restarts(
    trajectories: &[Trajectory],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
    priors: Option<&FitPriors>,
    cfg: &FitConfig,
    restarts: usize,
) -> Result<(Assignment, Vec<ClusterModel>, ClusterDiagnostics)> {
    let mut best: Option<(f64, (Assignment, Vec<ClusterModel>, ClusterDiagnostics))> = None;
    for _ in 0..restarts.max(1) {
        let out = cluster_trajectories(trajectories, k, rng, max_iters, priors, cfg)?;
        let score = classification_loglik(trajectories, &out.1, &out.0, cfg.lambda_floor)?;
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, out));
        }
    }
    Ok(best.expect("at least one restart").1)
}
