//! Stochastic toy environments with analytic costs.
//!
//! Both environments are reachers: drive a point (or an end effector) to a
//! target that is appended to the state vector, so controllers and the
//! global policy all observe it. The double integrator is linear in
//! (state, action); the two-link arm is the nonlinear testbed.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lingauss::{LinearGaussianDynamics, QuadCostTerm};
use crate::math::{std_normal, std_normal_vec, Gaussian};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    DoubleIntegratorReacher,
    TwoLinkArmReacher,
}

/// How the per-episode target is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetMode {
    Fixed(DVector<f64>),
    RandomPerEpisode { lo: DVector<f64>, hi: DVector<f64> },
}

/// Initial distribution over the dynamic part of the state (everything
/// except the target dims).
#[derive(Debug, Clone, PartialEq)]
pub enum InitStateDist {
    Gaussian { mean: DVector<f64>, std: DVector<f64> },
    UniformBox { lo: DVector<f64>, hi: DVector<f64> },
}

/// Two-link arm constants. Links are uniform rods; lc = l/2, I = m l^2 / 12.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub damping: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            m1: 1.0,
            m2: 1.0,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub process_noise_std: f64,
    pub init_state: InitStateDist,
    pub target_mode: TargetMode,
    pub action_cost_weight: f64,
    pub action_limit: Option<f64>,
    pub arm: ArmParams,
}

impl EnvSpec {
    /// Planar double-integrator reacher: state (pos, vel, target), each of
    /// dimension `workspace_dim`; action is acceleration.
    pub fn double_integrator(workspace_dim: usize, horizon: usize, dt: f64) -> Self {
        let d = workspace_dim;
        EnvSpec {
            kind: EnvKind::DoubleIntegratorReacher,
            state_dim: 3 * d,
            action_dim: d,
            horizon,
            dt,
            process_noise_std: 0.0,
            init_state: InitStateDist::Gaussian {
                mean: DVector::zeros(2 * d),
                std: DVector::zeros(2 * d),
            },
            target_mode: TargetMode::Fixed(DVector::zeros(d)),
            action_cost_weight: 1e-3,
            action_limit: None,
            arm: ArmParams::default(),
        }
    }

    /// Two-link arm reacher: state (q, qdot, target) with q in R^2.
    pub fn two_link_arm(horizon: usize, dt: f64) -> Self {
        EnvSpec {
            kind: EnvKind::TwoLinkArmReacher,
            state_dim: 6,
            action_dim: 2,
            horizon,
            dt,
            process_noise_std: 0.0,
            init_state: InitStateDist::Gaussian {
                mean: DVector::zeros(4),
                std: DVector::zeros(4),
            },
            target_mode: TargetMode::Fixed(DVector::from_vec(vec![1.0, 1.0])),
            action_cost_weight: 1e-3,
            action_limit: None,
            arm: ArmParams::default(),
        }
    }

    /// Dimension of the target block at the tail of the state vector.
    pub fn target_dim(&self) -> usize {
        match self.kind {
            EnvKind::DoubleIntegratorReacher => self.state_dim / 3,
            EnvKind::TwoLinkArmReacher => 2,
        }
    }

    /// Dimension of the dynamic (noise-carrying) state block.
    pub fn dynamic_dim(&self) -> usize {
        self.state_dim - self.target_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let ok_dims = match self.kind {
            EnvKind::DoubleIntegratorReacher => {
                self.state_dim == 3 * self.action_dim && self.action_dim >= 1
            }
            EnvKind::TwoLinkArmReacher => self.state_dim == 6 && self.action_dim == 2,
        };
        if !ok_dims {
            return Err(Error::InvalidConfig(format!(
                "state_dim {} / action_dim {} inconsistent with {:?}",
                self.state_dim, self.action_dim, self.kind
            )));
        }
        if self.horizon < 1 || self.dt <= 0.0 || self.action_cost_weight < 0.0 {
            return Err(Error::InvalidConfig(
                "need horizon >= 1, dt > 0, action_cost_weight >= 0".into(),
            ));
        }
        if self.process_noise_std < 0.0 {
            return Err(Error::InvalidConfig("process_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// End-effector position.
    pub fn end_effector(&self, state: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            EnvKind::DoubleIntegratorReacher => {
                state.rows(0, self.target_dim()).into_owned()
            }
            EnvKind::TwoLinkArmReacher => {
                let (q1, q2) = (state[0], state[1]);
                let ArmParams { l1, l2, .. } = self.arm;
                DVector::from_vec(vec![
                    l1 * q1.cos() + l2 * (q1 + q2).cos(),
                    l1 * q1.sin() + l2 * (q1 + q2).sin(),
                ])
            }
        }
    }

    pub fn target_of(&self, state: &DVector<f64>) -> DVector<f64> {
        state
            .rows(self.state_dim - self.target_dim(), self.target_dim())
            .into_owned()
    }

    /// Distance from the end effector to the target.
    pub fn distance_to_target(&self, state: &DVector<f64>) -> f64 {
        (self.end_effector(state) - self.target_of(state)).norm()
    }

    fn clamp_action(&self, action: &DVector<f64>) -> DVector<f64> {
        match self.action_limit {
            Some(limit) => action.map(|v| v.clamp(-limit, limit)),
            None => action.clone(),
        }
    }

    /// Noise-free transition (action already clamped by the caller).
    fn deterministic_step(&self, state: &DVector<f64>, action: &DVector<f64>) -> DVector<f64> {
        let dt = self.dt;
        match self.kind {
            EnvKind::DoubleIntegratorReacher => {
                let d = self.target_dim();
                let mut next = state.clone();
                for i in 0..d {
                    next[i] = state[i] + dt * state[d + i] + 0.5 * dt * dt * action[i];
                    next[d + i] = state[d + i] + dt * action[i];
                }
                next
            }
            EnvKind::TwoLinkArmReacher => {
                let ArmParams {
                    l1,
                    l2,
                    m1,
                    m2,
                    damping,
                } = self.arm;
                let (lc1, lc2) = (0.5 * l1, 0.5 * l2);
                let (i1, i2) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0);
                let (q1, q2, qd1, qd2) = (state[0], state[1], state[2], state[3]);

                let alpha = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2);
                let beta = m2 * l1 * lc2;
                let delta = i2 + m2 * lc2 * lc2;
                let c2 = q2.cos();
                let s2 = q2.sin();
                let m11 = alpha + 2.0 * beta * c2;
                let m12 = delta + beta * c2;
                let m22 = delta;

                // Coriolis/centrifugal torques.
                let h1 = -beta * s2 * (2.0 * qd1 * qd2 + qd2 * qd2);
                let h2 = beta * s2 * qd1 * qd1;

                let rhs1 = action[0] - h1 - damping * qd1;
                let rhs2 = action[1] - h2 - damping * qd2;
                let det = m11 * m22 - m12 * m12;
                let qdd1 = (m22 * rhs1 - m12 * rhs2) / det;
                let qdd2 = (m11 * rhs2 - m12 * rhs1) / det;

                // Semi-implicit Euler: velocity first, then position.
                let nqd1 = qd1 + dt * qdd1;
                let nqd2 = qd2 + dt * qdd2;
                let mut next = state.clone();
                next[0] = q1 + dt * nqd1;
                next[1] = q2 + dt * nqd2;
                next[2] = nqd1;
                next[3] = nqd2;
                next
            }
        }
    }

    /// Process-noise covariance over the full state (zero on target dims).
    pub fn process_noise_cov(&self) -> DMatrix<f64> {
        let mut cov = DMatrix::zeros(self.state_dim, self.state_dim);
        let var = self.process_noise_std * self.process_noise_std;
        for i in 0..self.dynamic_dim() {
            cov[(i, i)] = var;
        }
        cov
    }

    /// Exact linear-Gaussian form of the double-integrator transition, for
    /// oracle comparisons against fitted models.
    pub fn true_linear_dynamics(&self) -> Option<LinearGaussianDynamics> {
        if self.kind != EnvKind::DoubleIntegratorReacher {
            return None;
        }
        let (dx, du, d, dt) = (self.state_dim, self.action_dim, self.target_dim(), self.dt);
        let mut fx = DMatrix::identity(dx, dx);
        let mut fu = DMatrix::zeros(dx, du);
        for i in 0..d {
            fx[(i, d + i)] = dt;
            fu[(i, i)] = 0.5 * dt * dt;
            fu[(d + i, i)] = dt;
        }
        Some(LinearGaussianDynamics {
            fx: vec![fx; self.horizon],
            fu: vec![fu; self.horizon],
            fc: vec![DVector::zeros(dx); self.horizon],
            cov: vec![self.process_noise_cov(); self.horizon],
        })
    }

    /// Draw a full initial state: dynamic block from `init_state`, target
    /// block from `target_mode`.
    pub fn sample_initial_state(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let dd = self.dynamic_dim();
        let td = self.target_dim();
        let mut state = DVector::zeros(self.state_dim);
        match &self.init_state {
            InitStateDist::Gaussian { mean, std } => {
                let z = std_normal_vec(dd, rng);
                for i in 0..dd {
                    state[i] = mean[i] + std[i] * z[i];
                }
            }
            InitStateDist::UniformBox { lo, hi } => {
                for i in 0..dd {
                    state[i] = lo[i] + (hi[i] - lo[i]) * rand::Rng::gen::<f64>(rng);
                }
            }
        }
        match &self.target_mode {
            TargetMode::Fixed(target) => {
                state.rows_mut(dd, td).copy_from(target);
            }
            TargetMode::RandomPerEpisode { lo, hi } => {
                for i in 0..td {
                    state[dd + i] = lo[i] + (hi[i] - lo[i]) * rand::Rng::gen::<f64>(rng);
                }
            }
        }
        state
    }
}

/// One rollout: T+1 states, T actions, T per-step costs, and the seed that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has states")
    }
}

/// Anything that can emit actions during a rollout.
pub trait Policy {
    fn act(&self, t: usize, state: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64>;
}

/// Deterministic policy from a plain function of (t, state).
pub struct FnPolicy<F>(pub F);

impl<F: Fn(usize, &DVector<f64>) -> DVector<f64>> Policy for FnPolicy<F> {
    fn act(&self, t: usize, state: &DVector<f64>, _rng: &mut ChaCha8Rng) -> DVector<f64> {
        (self.0)(t, state)
    }
}

impl Policy for crate::lingauss::LinearGaussianPolicy {
    fn act(&self, t: usize, state: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let g = Gaussian::new(self.mean_action(t, state), self.cov[t].clone());
        g.sample(rng)
    }
}

/// One environment transition: clamp the action, integrate, add process
/// noise on the dynamic block.
pub fn step_env(
    spec: &EnvSpec,
    state: &DVector<f64>,
    action: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    if state.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            context: "step_env state",
            expected: spec.state_dim,
            got: state.len(),
        });
    }
    if action.len() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            context: "step_env action",
            expected: spec.action_dim,
            got: action.len(),
        });
    }
    if !state.iter().all(|v| v.is_finite()) || !action.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("step_env inputs"));
    }
    let clamped = spec.clamp_action(action);
    let mut next = spec.deterministic_step(state, &clamped);
    if spec.process_noise_std > 0.0 {
        for i in 0..spec.dynamic_dim() {
            next[i] += spec.process_noise_std * std_normal(rng);
        }
    }
    Ok(next)
}

/// Cost and its exact second-order expansion at (state, action):
/// c = ||ee(x) - target||^2 + w_u ||u||^2.
pub fn cost_eval(
    spec: &EnvSpec,
    state: &DVector<f64>,
    action: &DVector<f64>,
) -> Result<(f64, QuadCostTerm)> {
    if !state.iter().all(|v| v.is_finite()) || !action.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("cost_eval inputs"));
    }
    let (dx, du, td) = (spec.state_dim, spec.action_dim, spec.target_dim());
    let dd = spec.dynamic_dim();
    let w_u = spec.action_cost_weight;

    let resid = spec.end_effector(state) - spec.target_of(state);
    let value = resid.norm_squared() + w_u * action.norm_squared();

    // Action block: exact for both environments.
    let cuu = DMatrix::identity(du, du) * (2.0 * w_u);
    let cu = action * (2.0 * w_u);
    let cux = DMatrix::zeros(du, dx);

    // Jacobian of ee over the full state and curvature of ee over q.
    let (jac_full, mut cxx) = match spec.kind {
        EnvKind::DoubleIntegratorReacher => {
            let mut jac = DMatrix::zeros(td, dx);
            for i in 0..td {
                jac[(i, i)] = 1.0;
            }
            (jac, DMatrix::zeros(dx, dx))
        }
        EnvKind::TwoLinkArmReacher => {
            let ArmParams { l1, l2, .. } = spec.arm;
            let (q1, q2) = (state[0], state[1]);
            let (s1, c1) = q1.sin_cos();
            let (s12, c12) = (q1 + q2).sin_cos();
            let mut jac = DMatrix::zeros(2, dx);
            jac[(0, 0)] = -l1 * s1 - l2 * s12;
            jac[(0, 1)] = -l2 * s12;
            jac[(1, 0)] = l1 * c1 + l2 * c12;
            jac[(1, 1)] = l2 * c12;

            // Curvature term 2 Σ_i resid_i ∇²ee_i, nonzero only on the qq block.
            let hxx = [
                [-l1 * c1 - l2 * c12, -l2 * c12, -l2 * c12],
                [-l1 * s1 - l2 * s12, -l2 * s12, -l2 * s12],
            ];
            let mut cxx = DMatrix::zeros(dx, dx);
            for (i, h) in hxx.iter().enumerate() {
                let r = resid[i];
                cxx[(0, 0)] += 2.0 * r * h[0];
                cxx[(0, 1)] += 2.0 * r * h[1];
                cxx[(1, 0)] += 2.0 * r * h[1];
                cxx[(1, 1)] += 2.0 * r * h[2];
            }
            (jac, cxx)
        }
    };

    // Residual r(x) = ee(x) - target has full-state Jacobian [jac_full | -I].
    let mut jr = jac_full;
    for i in 0..td {
        jr[(i, dd + i)] -= 1.0;
    }
    cxx += 2.0 * jr.transpose() * &jr;
    let cx = jr.transpose() * &resid * 2.0;

    let term = QuadCostTerm {
        cxx,
        cuu,
        cux,
        cx,
        cu,
        c0: value,
        x_ref: state.clone(),
        u_ref: action.clone(),
    };
    Ok((value, term))
}

/// Execute one rollout from a freshly drawn initial state. The seed is
/// fanned out into independent streams for the initial draw, the process
/// noise, and the policy, so forcing the initial state leaves the other
/// draws untouched.
pub fn rollout(spec: &EnvSpec, policy: &dyn Policy, seed: u64) -> Result<Trajectory> {
    let mut init_rng = rng::stream(seed, "rollout_init", 0);
    let x1 = spec.sample_initial_state(&mut init_rng);
    rollout_from(spec, policy, x1, seed)
}

/// Execute one rollout from a forced initial state (a deterministic reset).
pub fn rollout_from(
    spec: &EnvSpec,
    policy: &dyn Policy,
    initial_state: DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let mut path_rng = rng::stream(seed, "rollout_path", 0);
    let mut policy_rng = rng::stream(seed, "rollout_policy", 0);
    let mut states = Vec::with_capacity(spec.horizon + 1);
    let mut actions = Vec::with_capacity(spec.horizon);
    let mut costs = Vec::with_capacity(spec.horizon);
    states.push(initial_state);
    for t in 0..spec.horizon {
        let state = states[t].clone();
        let action = policy.act(t, &state, &mut policy_rng);
        let (cost, _) = cost_eval(spec, &state, &action)?;
        let next = step_env(spec, &state, &action, &mut path_rng)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { step: t });
        }
        states.push(next);
        actions.push(action);
        costs.push(cost);
    }
    Ok(Trajectory {
        states,
        actions,
        costs,
        seed,
    })
}
