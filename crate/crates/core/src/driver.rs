//! Training orchestration: the reset-free loop, the classic fixed-reset
//! baseline, policy evaluation, and the run artifacts (report.csv, config
//! echo, checkpoints).

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;

use crate::cluster::{self, FitPriors};
use crate::config::{Algorithm, RunConfig};
use crate::cphase::{self, LocalPolicyResult, StepState};
use crate::dynfit::{self, SampleSet};
use crate::env::{rollout, rollout_from, EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::lingauss::QuadCostTerm;
use crate::math::{floor_spd, sample_moments, Gaussian};
use crate::rng;
use crate::sphase::{self, GlobalPolicy, StochasticPolicy};

/// One row of report.csv.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_final_dist: f64,
    pub success_rate: f64,
    pub epsilon: f64,
    pub n_clusters_nonempty: usize,
    pub em_rounds: usize,
    pub mean_kl: f64,
    pub expected_improvement: f64,
    pub actual_improvement: f64,
    pub sphase_loss: f64,
    pub wall_clock_s: f64,
}

pub const REPORT_HEADER: &str = "iteration,mean_cost,std_cost,mean_final_dist,success_rate,\
epsilon,n_clusters_nonempty,em_rounds,mean_kl,expected_improvement,actual_improvement,\
sphase_loss,wall_clock_s";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_cost,
            self.std_cost,
            self.mean_final_dist,
            self.success_rate,
            self.epsilon,
            self.n_clusters_nonempty,
            self.em_rounds,
            self.mean_kl,
            self.expected_improvement,
            self.actual_improvement,
            self.sphase_loss,
            self.wall_clock_s
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub records: Vec<IterationRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Evaluation summary for a trained policy.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub mean_final_dist: f64,
    pub std_final_dist: f64,
    pub success_rate: f64,
    pub mean_cost: f64,
    pub final_dists: Vec<f64>,
    pub total_costs: Vec<f64>,
}

/// Run the configured algorithm.
pub fn run(cfg: &RunConfig) -> Result<(TrainingReport, GlobalPolicy)> {
    match cfg.run.algorithm {
        Algorithm::ResetFree => run_reset_free(cfg),
        Algorithm::ClassicMdgps => run_classic_mdgps(cfg),
    }
}

/// Shared per-iteration state threaded through both training loops.
struct LoopState {
    policy: GlobalPolicy,
    step: StepState,
    prev_mean_cost: Option<f64>,
    prev_expected_improvement: Option<f64>,
    tuple_buffer: Vec<Trajectory>,
}

fn init_loop_state(cfg: &RunConfig, spec: &EnvSpec) -> LoopState {
    let mut init_rng = rng::stream(cfg.run.seed, "policy_init", 0);
    let layer_sizes = cfg.layer_sizes(spec.state_dim, spec.action_dim);
    let policy = GlobalPolicy::new(&layer_sizes, cfg.sphase.init_output_var, &mut init_rng);
    let step = StepState::new(cfg.cphase.epsilon_init, cfg.cphase.eps_min, cfg.eps_max());
    LoopState {
        policy,
        step,
        prev_mean_cost: None,
        prev_expected_improvement: None,
        tuple_buffer: Vec::new(),
    }
}

fn fit_priors(
    cfg: &RunConfig,
    state: &mut LoopState,
    trajectories: &[Trajectory],
    iteration: usize,
) -> Result<Option<FitPriors>> {
    if !cfg.prior.enabled {
        return Ok(None);
    }
    let pool: Vec<&Trajectory> = if cfg.prior.accumulate_iterations {
        state.tuple_buffer.extend(trajectories.iter().cloned());
        state.tuple_buffer.iter().collect()
    } else {
        trajectories.iter().collect()
    };
    let set = SampleSet::new(pool)?;
    let mut gmm_rng = rng::stream(cfg.run.seed, "gmm", iteration as u64);
    let dynamics = dynfit::fit_gmm_prior(&set.dynamics_tuples(), cfg.prior.n_components, &mut gmm_rng)?;
    let policy = dynfit::fit_gmm_prior(&set.policy_tuples(), cfg.prior.n_components, &mut gmm_rng)?;
    Ok(Some(FitPriors { dynamics, policy }))
}

/// Mean/std of total costs, mean final distance, and success rate of a
/// batch of trajectories.
fn batch_metrics(spec: &EnvSpec, trajectories: &[Trajectory], threshold: f64) -> (f64, f64, f64, f64) {
    let n = trajectories.len() as f64;
    let costs: Vec<f64> = trajectories.iter().map(|t| t.total_cost()).collect();
    let mean_cost = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean_cost).powi(2)).sum::<f64>() / n;
    let dists: Vec<f64> = trajectories
        .iter()
        .map(|t| spec.distance_to_target(t.final_state()))
        .collect();
    let mean_dist = dists.iter().sum::<f64>() / n;
    let success = dists.iter().filter(|&&d| d < threshold).count() as f64 / n;
    (mean_cost, var.sqrt(), mean_dist, success)
}

fn mean_kl_and_improvement(locals: &[Option<LocalPolicyResult>]) -> (f64, f64) {
    let solved: Vec<&LocalPolicyResult> = locals.iter().flatten().collect();
    if solved.is_empty() {
        return (0.0, 0.0);
    }
    let n = solved.len() as f64;
    let kl = solved.iter().map(|l| l.kl_total).sum::<f64>() / n;
    let imp = solved.iter().map(|l| l.expected_improvement).sum::<f64>() / n;
    (kl, imp)
}

/// Apply the step rule using last iteration's prediction and the freshly
/// measured cost change; the first iteration leaves epsilon unchanged.
fn adjust_epsilon(state: &mut LoopState, mean_cost: f64) -> f64 {
    let actual = match (state.prev_mean_cost, state.prev_expected_improvement) {
        (Some(prev_cost), Some(prev_exp)) => {
            let actual_dj = prev_cost - mean_cost;
            state.step = cphase::adjust_step_size(&state.step, actual_dj, prev_exp);
            actual_dj
        }
        _ => 0.0,
    };
    state.prev_mean_cost = Some(mean_cost);
    actual
}

struct OutputPaths {
    report: PathBuf,
    config_echo: PathBuf,
    checkpoints: PathBuf,
    final_policy: PathBuf,
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<Option<OutputPaths>> {
    let Some(dir) = &cfg.run.out_dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    Ok(Some(OutputPaths {
        report: dir.join("report.csv"),
        config_echo: dir.join("config.toml"),
        checkpoints: dir.join("checkpoints"),
        final_policy: dir.join("policy.bin"),
    }))
}

fn echo_config(cfg: &RunConfig, paths: &OutputPaths) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::ConfigParse(e.to_string()))?;
    std::fs::write(&paths.config_echo, text)?;
    Ok(())
}

/// Reset-free training: on-policy sampling from random initial states,
/// trajectory clustering, per-sample local policies, supervised update.
pub fn run_reset_free(cfg: &RunConfig) -> Result<(TrainingReport, GlobalPolicy)> {
    cfg.validate()?;
    if cfg.run.algorithm != Algorithm::ResetFree {
        return Err(Error::InvalidConfig("run.algorithm is not reset_free".into()));
    }
    let spec = cfg.env_spec()?;
    let clustering = cfg.clustering.as_ref().expect("validated");
    let fit_cfg = cfg.fit_config();
    let train_cfg = cfg.train_config();
    let m = cfg.sampling.samples_per_iteration;
    let paths = prepare_out_dir(cfg)?;
    if let Some(p) = &paths {
        echo_config(cfg, p)?;
    }

    let mut state = init_loop_state(cfg, &spec);
    let mut report = TrainingReport::default();

    for iteration in 1..=cfg.run.iterations {
        let started = Instant::now();

        // Line 2: on-policy samples from random initial states.
        let trajectories: Vec<Trajectory> = (0..m)
            .map(|i| {
                let seed = rng::child_seed(cfg.run.seed, "sample", pack(iteration, i));
                rollout(&spec, &StochasticPolicy(&state.policy), seed)
            })
            .collect::<Result<_>>()?;

        let (mean_cost, std_cost, mean_dist, success) =
            batch_metrics(&spec, &trajectories, cfg.eval.success_threshold);

        // Line 10: adjust epsilon from last iteration's prediction.
        let actual_improvement = adjust_epsilon(&mut state, mean_cost);

        // Lines 3-9: trajectory-aware clustering, best restart wins.
        let priors = fit_priors(cfg, &mut state, &trajectories, iteration)?;
        let mut cl_rng = rng::stream(cfg.run.seed, "cluster", iteration as u64);
        let (assign, models, diag) = cluster::cluster_trajectories_restarts(
            &trajectories,
            clustering.k,
            &mut cl_rng,
            clustering.max_em_iters,
            priors.as_ref(),
            &fit_cfg,
            clustering.restarts,
        )?;

        // Lines 11-13: per-sample local policies.
        let locals =
            cphase::update_all_local_policies(&trajectories, &assign, &models, &spec, state.step.epsilon)?;
        let (mean_kl, expected_improvement) = mean_kl_and_improvement(&locals);
        state.prev_expected_improvement = Some(expected_improvement);

        // Line 14: supervised update of the global policy.
        let labels: Vec<usize> = (0..trajectories.len()).collect();
        let supervision = sphase::build_supervision(&trajectories, &locals, &labels);
        let mut sphase_rng = rng::stream(cfg.run.seed, "sphase", iteration as u64);
        state.policy = sphase::train_supervised(&state.policy, &supervision, &train_cfg, &mut sphase_rng)?;
        let all: Vec<usize> = (0..supervision.len()).collect();
        let sphase_loss = sphase::weighted_loss(&state.policy, &supervision, &all);

        let nonempty = assign
            .cluster_sizes(clustering.k)
            .iter()
            .filter(|&&s| s > 0)
            .count();
        record_iteration(
            &mut report,
            &paths,
            &state,
            iteration,
            IterationRecord {
                iteration,
                mean_cost,
                std_cost,
                mean_final_dist: mean_dist,
                success_rate: success,
                epsilon: state.step.epsilon,
                n_clusters_nonempty: nonempty,
                em_rounds: diag.rounds,
                mean_kl,
                expected_improvement,
                actual_improvement,
                sphase_loss,
                wall_clock_s: started.elapsed().as_secs_f64(),
            },
        )?;
    }

    finish_run(cfg, &paths, &report, &state.policy)?;
    Ok((report, state.policy))
}

/// Classic MDGPS baseline: deterministic resets into a fixed list of
/// initial states, one local policy per condition, no clustering.
pub fn run_classic_mdgps(cfg: &RunConfig) -> Result<(TrainingReport, GlobalPolicy)> {
    cfg.validate()?;
    if cfg.run.algorithm != Algorithm::ClassicMdgps {
        return Err(Error::InvalidConfig("run.algorithm is not classic_mdgps".into()));
    }
    let spec = cfg.env_spec()?;
    let fit_cfg = cfg.fit_config();
    let train_cfg = cfg.train_config();
    let conditions: Vec<DVector<f64>> = cfg
        .sampling
        .init_states
        .iter()
        .map(|s| DVector::from_vec(s.clone()))
        .collect();
    let n_per = cfg.sampling.samples_per_condition;
    let paths = prepare_out_dir(cfg)?;
    if let Some(p) = &paths {
        echo_config(cfg, p)?;
    }

    let mut state = init_loop_state(cfg, &spec);
    let mut report = TrainingReport::default();

    for iteration in 1..=cfg.run.iterations {
        let started = Instant::now();

        // N on-policy samples from each fixed initial state.
        let mut trajectories = Vec::with_capacity(conditions.len() * n_per);
        let mut labels = Vec::with_capacity(conditions.len() * n_per);
        for (cond_idx, x1) in conditions.iter().enumerate() {
            for n in 0..n_per {
                let seed = rng::child_seed(
                    cfg.run.seed,
                    "sample",
                    pack(iteration, cond_idx * n_per + n),
                );
                trajectories.push(rollout_from(
                    &spec,
                    &StochasticPolicy(&state.policy),
                    x1.clone(),
                    seed,
                )?);
                labels.push(cond_idx);
            }
        }

        let (mean_cost, std_cost, mean_dist, success) =
            batch_metrics(&spec, &trajectories, cfg.eval.success_threshold);
        let actual_improvement = adjust_epsilon(&mut state, mean_cost);

        let priors = fit_priors(cfg, &mut state, &trajectories, iteration)?;

        // Per-condition fits and local policies, cost expansion averaged
        // over the condition's samples.
        let mut locals: Vec<Option<LocalPolicyResult>> = Vec::with_capacity(conditions.len());
        let mut first_failure = String::new();
        for cond_idx in 0..conditions.len() {
            let set = SampleSet::from_labels(&trajectories, &labels, cond_idx)?;
            // N = 1 fits as a constant predictor, same trick as the M-step.
            let set = if set.len() == 1 && priors.is_none() {
                let only = set.members()[0];
                SampleSet::new(vec![only, only])?
            } else {
                set
            };
            let result = (|| -> Result<LocalPolicyResult> {
                let (dynamics, _) = dynfit::fit_dynamics(&set, priors.as_ref().map(|p| &p.dynamics), &fit_cfg)?;
                let (pbar, _) =
                    dynfit::fit_policy_linearization(&set, priors.as_ref().map(|p| &p.policy), &fit_cfg)?;
                let inits = set.initial_states();
                let (imean, icov) = sample_moments(&inits);
                let init = Gaussian::new(imean, floor_spd(&icov, fit_cfg.lambda_floor));
                let expansions: Vec<Vec<QuadCostTerm>> = set
                    .members()
                    .iter()
                    .map(|tau| cphase::quadratize_around_sample(&spec, tau))
                    .collect::<Result<_>>()?;
                let cost = average_expansions(&expansions);
                cphase::solve_local_policy(&dynamics, &cost, &pbar, &init, state.step.epsilon)
            })();
            if let Err(e) = &result {
                if first_failure.is_empty() {
                    first_failure = e.to_string();
                }
            }
            locals.push(result.ok());
        }
        let failed = locals.iter().filter(|l| l.is_none()).count();
        if failed * 2 > locals.len() {
            return Err(Error::TooManyLocalFailures {
                failed,
                total: locals.len(),
                first: first_failure,
            });
        }

        let (mean_kl, expected_improvement) = mean_kl_and_improvement(&locals);
        state.prev_expected_improvement = Some(expected_improvement);

        let supervision = sphase::build_supervision(&trajectories, &locals, &labels);
        let mut sphase_rng = rng::stream(cfg.run.seed, "sphase", iteration as u64);
        state.policy = sphase::train_supervised(&state.policy, &supervision, &train_cfg, &mut sphase_rng)?;
        let all: Vec<usize> = (0..supervision.len()).collect();
        let sphase_loss = sphase::weighted_loss(&state.policy, &supervision, &all);

        record_iteration(
            &mut report,
            &paths,
            &state,
            iteration,
            IterationRecord {
                iteration,
                mean_cost,
                std_cost,
                mean_final_dist: mean_dist,
                success_rate: success,
                epsilon: state.step.epsilon,
                n_clusters_nonempty: conditions.len(),
                em_rounds: 0,
                mean_kl,
                expected_improvement,
                actual_improvement,
                sphase_loss,
                wall_clock_s: started.elapsed().as_secs_f64(),
            },
        )?;
    }

    finish_run(cfg, &paths, &report, &state.policy)?;
    Ok((report, state.policy))
}

/// Iteration/index pair packed into one stream index.
fn pack(iteration: usize, index: usize) -> u64 {
    ((iteration as u64) << 32) | index as u64
}

/// Average per-sample cost expansions into one quadratic per timestep, in
/// origin form.
fn average_expansions(expansions: &[Vec<QuadCostTerm>]) -> Vec<QuadCostTerm> {
    let horizon = expansions[0].len();
    let n = expansions.len() as f64;
    (0..horizon)
        .map(|t| {
            let mut acc = expansions[0][t].to_origin();
            for exp in &expansions[1..] {
                let o = exp[t].to_origin();
                acc.cxx += o.cxx;
                acc.cuu += o.cuu;
                acc.cux += o.cux;
                acc.cx += o.cx;
                acc.cu += o.cu;
                acc.c0 += o.c0;
            }
            acc.cxx /= n;
            acc.cuu /= n;
            acc.cux /= n;
            acc.cx /= n;
            acc.cu /= n;
            acc.c0 /= n;
            acc
        })
        .collect()
}

fn record_iteration(
    report: &mut TrainingReport,
    paths: &Option<OutputPaths>,
    state: &LoopState,
    iteration: usize,
    record: IterationRecord,
) -> Result<()> {
    report.records.push(record);
    if let Some(p) = paths {
        let path = p.checkpoints.join(format!("iter_{iteration:03}.policy"));
        sphase::save_checkpoint(&state.policy, &path)?;
        report.checkpoint_paths.push(path);
    }
    Ok(())
}

fn finish_run(
    _cfg: &RunConfig,
    paths: &Option<OutputPaths>,
    report: &TrainingReport,
    policy: &GlobalPolicy,
) -> Result<()> {
    if let Some(p) = paths {
        report.write_csv(&p.report)?;
        policy.save(&p.final_policy)?;
    }
    Ok(())
}

/// Deterministic-mean evaluation rollouts with the configured process
/// noise; success is final distance under the threshold.
pub fn evaluate_policy(
    policy: &GlobalPolicy,
    spec: &EnvSpec,
    n_episodes: usize,
    success_threshold: f64,
    seed: u64,
) -> Result<EvalMetrics> {
    assert!(n_episodes >= 1, "need at least one episode");
    let mean_policy = sphase::MeanPolicy(policy);
    let mut final_dists = Vec::with_capacity(n_episodes);
    let mut total_costs = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let ep_seed = rng::child_seed(seed, "eval", ep as u64);
        let tau = rollout(spec, &mean_policy, ep_seed)?;
        final_dists.push(spec.distance_to_target(tau.final_state()));
        total_costs.push(tau.total_cost());
    }
    let n = n_episodes as f64;
    let mean_final_dist = final_dists.iter().sum::<f64>() / n;
    let var = final_dists
        .iter()
        .map(|d| (d - mean_final_dist).powi(2))
        .sum::<f64>()
        / n;
    let success_rate = final_dists
        .iter()
        .filter(|&&d| d < success_threshold)
        .count() as f64
        / n;
    let mean_cost = total_costs.iter().sum::<f64>() / n;
    Ok(EvalMetrics {
        episodes: n_episodes,
        mean_final_dist,
        std_final_dist: var.sqrt(),
        success_rate,
        mean_cost,
        final_dists,
        total_costs,
    })
}
