//! Supervised phase: the feed-forward Gaussian global policy and its
//! training against local-policy supervision.
//!
//! The mean network is trained on the precision-weighted Euclidean loss;
//! the state-independent diagonal output covariance is refit in closed form
//! afterwards from the mean supervision precision.

use std::io::Read;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::cphase::LocalPolicyResult;
use crate::env::{Policy, Trajectory};
use crate::error::{Error, Result};
use crate::math::{std_normal, std_normal_vec, symmetrize, LAMBDA_FLOOR};

/// Feed-forward network x -> action mean, tanh hidden layers, identity
/// output, plus a diagonal log-variance vector for the output Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPolicy {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub log_diag_cov: DVector<f64>,
}

impl GlobalPolicy {
    /// Random initialization: N(0, 1/fan_in) weights, zero biases, the
    /// final layer scaled 10x smaller so the starting policy is near-zero.
    pub fn new(layer_sizes: &[usize], init_output_var: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let n_layers = layer_sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt() * if l + 1 == n_layers { 0.1 } else { 1.0 };
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                scale * std_normal(rng)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        let du = *layer_sizes.last().unwrap();
        GlobalPolicy {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            log_diag_cov: DVector::from_element(du, init_output_var.max(1e-300).ln()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn action_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Deterministic mean output.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            h = &self.weights[l] * h + &self.biases[l];
            if l + 1 < self.n_layers() {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    /// Forward pass keeping post-activation values per layer for backprop.
    fn forward_cached(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.clone());
        for l in 0..self.n_layers() {
            let mut h = &self.weights[l] * acts.last().unwrap() + &self.biases[l];
            if l + 1 < self.n_layers() {
                h.apply(|v| *v = v.tanh());
            }
            acts.push(h);
        }
        acts
    }

    /// Accumulate parameter gradients for one sample given dLoss/dOutput.
    fn backprop_into(
        &self,
        acts: &[DVector<f64>],
        grad_out: &DVector<f64>,
        grads: &mut Gradients,
    ) {
        let mut delta = grad_out.clone();
        for l in (0..self.n_layers()).rev() {
            grads.weights[l].ger(1.0, &delta, &acts[l], 1.0);
            grads.biases[l] += &delta;
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                // d tanh = 1 - tanh^2, with acts[l] already the tanh output.
                for (b, a) in back.iter_mut().zip(acts[l].iter()) {
                    *b *= 1.0 - a * a;
                }
                delta = back;
            }
        }
    }

    pub fn diag_cov(&self) -> DVector<f64> {
        self.log_diag_cov.map(|v| v.exp())
    }

    /// Serialize to the versioned flat format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for l in 0..self.n_layers() {
            for r in 0..self.weights[l].nrows() {
                for c in 0..self.weights[l].ncols() {
                    out.extend_from_slice(&self.weights[l][(r, c)].to_le_bytes());
                }
            }
            for v in self.biases[l].iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.log_diag_cov.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::PolicyFile("truncated policy file".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 4)? != POLICY_MAGIC {
            return Err(Error::PolicyFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != POLICY_VERSION {
            return Err(Error::PolicyFile(format!("unsupported version {version}")));
        }
        let n_sizes = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut layer_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            layer_sizes.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
        }
        if layer_sizes.len() < 2 {
            return Err(Error::PolicyFile("needs at least two layer sizes".into()));
        }
        let read_f64 = |cursor: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let mut w = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    w[(r, c)] = read_f64(&mut cursor)?;
                }
            }
            let mut b = DVector::zeros(fan_out);
            for r in 0..fan_out {
                b[r] = read_f64(&mut cursor)?;
            }
            weights.push(w);
            biases.push(b);
        }
        let du = *layer_sizes.last().unwrap();
        let mut log_diag_cov = DVector::zeros(du);
        for r in 0..du {
            log_diag_cov[r] = read_f64(&mut cursor)?;
        }
        Ok(GlobalPolicy {
            layer_sizes,
            weights,
            biases,
            log_diag_cov,
        })
    }
}

const POLICY_MAGIC: &[u8; 4] = b"RFGP";
const POLICY_VERSION: u32 = 1;

/// Deterministic mean forward evaluation with input validation.
pub fn policy_forward(policy: &GlobalPolicy, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != policy.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "policy_forward",
            expected: policy.state_dim(),
            got: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite())
        || !policy.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite("policy_forward"));
    }
    Ok(policy.forward(x))
}

/// Rollout adapter sampling u ~ N(mean(x), diag cov).
pub struct StochasticPolicy<'a>(pub &'a GlobalPolicy);

impl Policy for StochasticPolicy<'_> {
    fn act(&self, _t: usize, state: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mean = self.0.forward(state);
        let std = self.0.log_diag_cov.map(|v| (0.5 * v).exp());
        let z = std_normal_vec(mean.len(), rng);
        mean + std.component_mul(&z)
    }
}

/// Rollout adapter executing the mean action only.
pub struct MeanPolicy<'a>(pub &'a GlobalPolicy);

impl Policy for MeanPolicy<'_> {
    fn act(&self, _t: usize, state: &DVector<f64>, _rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.0.forward(state)
    }
}

/// Pooled supervision tuples (state, local mean, local precision).
#[derive(Debug, Clone, Default)]
pub struct SupervisionSet {
    pub states: Vec<DVector<f64>>,
    pub target_means: Vec<DVector<f64>>,
    pub precisions: Vec<DMatrix<f64>>,
}

impl SupervisionSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Collect supervision from every solved local policy at its own sample's
/// visited states; failed samples contribute nothing.
pub fn build_supervision(
    trajectories: &[Trajectory],
    locals: &[Option<LocalPolicyResult>],
    labels: &[usize],
) -> SupervisionSet {
    let mut set = SupervisionSet::default();
    for (tau, &local_idx) in trajectories.iter().zip(labels) {
        let Some(local) = locals.get(local_idx).and_then(|l| l.as_ref()) else {
            continue;
        };
        for t in 0..tau.horizon() {
            let x = &tau.states[t];
            let mean = local.policy.mean_action(t, x);
            let prec = match Cholesky::new(symmetrize(&local.policy.cov[t])) {
                Some(chol) => symmetrize(&chol.inverse()),
                None => continue,
            };
            set.states.push(x.clone());
            set.target_means.push(mean);
            set.precisions.push(prec);
        }
    }
    set
}

/// Training hyperparameters for the S-phase.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-2,
            momentum: 0.9,
        }
    }
}

/// Per-parameter gradient (or momentum) buffers matching a policy's shape.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(policy: &GlobalPolicy) -> Self {
        Self {
            weights: policy
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: policy.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }
}

/// Mean precision-weighted squared error over the given tuple indices:
/// mean_i (mu(x_i) - y_i)' P_i (mu(x_i) - y_i).
pub fn weighted_loss(policy: &GlobalPolicy, sup: &SupervisionSet, indices: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in indices {
        let resid = policy.forward(&sup.states[i]) - &sup.target_means[i];
        total += resid.dot(&(&sup.precisions[i] * &resid));
    }
    total / indices.len() as f64
}

/// Loss and analytic parameter gradients over the given tuple indices.
pub fn loss_and_gradients(
    policy: &GlobalPolicy,
    sup: &SupervisionSet,
    indices: &[usize],
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(policy);
    let mut total = 0.0;
    let inv_n = 1.0 / indices.len() as f64;
    for &i in indices {
        let acts = policy.forward_cached(&sup.states[i]);
        let resid = acts.last().unwrap() - &sup.target_means[i];
        let weighted = &sup.precisions[i] * &resid;
        total += resid.dot(&weighted);
        let grad_out = weighted * (2.0 * inv_n);
        policy.backprop_into(&acts, &grad_out, &mut grads);
    }
    (total * inv_n, grads)
}

/// Minimize the precision-weighted mean loss by minibatch SGD with
/// momentum, keeping the best-loss parameters seen (never returning a
/// policy worse than the input on the full set). The output covariance is
/// refit afterwards as diag((mean precision)^-1).
pub fn train_supervised(
    policy: &GlobalPolicy,
    sup: &SupervisionSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GlobalPolicy> {
    if sup.is_empty() {
        return Err(Error::InvalidConfig("empty supervision set".into()));
    }
    let all: Vec<usize> = (0..sup.len()).collect();
    let mut lr = cfg.learning_rate;

    // Precisions carry an arbitrary global scale (tight local policies can
    // push them to 1e6 and beyond); dividing the gradients by the average
    // precision leaves the minimizer unchanged and keeps step sizes sane.
    let du = policy.action_dim() as f64;
    let precision_scale = (sup
        .precisions
        .iter()
        .map(|p| p.trace())
        .sum::<f64>()
        / (sup.len() as f64 * du))
        .max(1e-12);

    for _restart in 0..3 {
        let mut current = policy.clone();
        let mut velocity = Gradients::zeros_like(&current);
        let mut best = current.clone();
        let mut best_loss = weighted_loss(&current, sup, &all);
        let mut order: Vec<usize> = all.clone();
        let mut diverged = false;

        for _epoch in 0..cfg.epochs {
            shuffle(&mut order, rng);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let (_, mut grads) = loss_and_gradients(&current, sup, batch);
                grads.scale(1.0 / precision_scale);
                velocity.scale(cfg.momentum);
                for l in 0..current.weights.len() {
                    velocity.weights[l] -= &grads.weights[l] * lr;
                    velocity.biases[l] -= &grads.biases[l] * lr;
                    current.weights[l] += &velocity.weights[l];
                    current.biases[l] += &velocity.biases[l];
                }
            }
            let loss = weighted_loss(&current, sup, &all);
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            if loss < best_loss {
                best_loss = loss;
                best = current.clone();
            }
        }

        if !diverged {
            let mut out = best;
            refit_output_covariance(&mut out, sup);
            return Ok(out);
        }
        lr *= 0.5;
    }
    Err(Error::TrainingDiverged(3))
}

/// Closed-form covariance refit: invert the mean supervision precision and
/// keep its diagonal.
fn refit_output_covariance(policy: &mut GlobalPolicy, sup: &SupervisionSet) {
    let du = policy.action_dim();
    let mut mean_prec = DMatrix::zeros(du, du);
    for p in &sup.precisions {
        mean_prec += p;
    }
    mean_prec /= sup.len() as f64;
    if let Some(chol) = Cholesky::new(symmetrize(&mean_prec)) {
        let cov = chol.inverse();
        for i in 0..du {
            policy.log_diag_cov[i] = cov[(i, i)].max(LAMBDA_FLOOR).ln();
        }
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Full per-tuple Gaussian-KL surrogate for reporting:
/// mean_i [ tr(P_i Sigma) - log|Sigma| + (mu(x_i)-y_i)' P_i (mu(x_i)-y_i) ].
pub fn kl_objective(policy: &GlobalPolicy, sup: &SupervisionSet) -> f64 {
    assert!(!sup.is_empty(), "empty supervision set");
    let sigma = policy.diag_cov();
    let log_det: f64 = policy.log_diag_cov.iter().sum();
    let mut total = 0.0;
    for i in 0..sup.len() {
        let resid = policy.forward(&sup.states[i]) - &sup.target_means[i];
        let quad = resid.dot(&(&sup.precisions[i] * &resid));
        let trace: f64 = (0..sigma.len()).map(|j| sup.precisions[i][(j, j)] * sigma[j]).sum();
        total += trace - log_det + quad;
    }
    total / sup.len() as f64
}

/// Write a policy checkpoint, creating parent directories as needed.
pub fn save_checkpoint(policy: &GlobalPolicy, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    policy.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_supervision(
        policy_dims: (usize, usize),
        n: usize,
        seed: u64,
        identity_precisions: bool,
    ) -> SupervisionSet {
        let (dx, du) = policy_dims;
        let mut r = rng(seed);
        let mut set = SupervisionSet::default();
        for _ in 0..n {
            set.states.push(std_normal_vec(dx, &mut r));
            set.target_means.push(std_normal_vec(du, &mut r));
            let prec = if identity_precisions {
                DMatrix::identity(du, du)
            } else {
                let a = DMatrix::from_fn(du, du, |_, _| std_normal(&mut r));
                symmetrize(&(&a * a.transpose())) + DMatrix::identity(du, du) * 0.5
            };
            set.precisions.push(prec);
        }
        set
    }

    #[test]
    fn forward_zero_parameters_gives_zero() {
        let mut policy = GlobalPolicy::new(&[4, 8, 2], 0.1, &mut rng(0));
        for w in &mut policy.weights {
            w.fill(0.0);
        }
        let out = policy_forward(&policy, &std_normal_vec(4, &mut rng(1))).unwrap();
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn single_linear_layer_is_matrix_multiply() {
        let mut policy = GlobalPolicy::new(&[3, 2], 0.1, &mut rng(2));
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        policy.weights[0] = w.clone();
        policy.biases[0].fill(0.0);
        let x = DVector::from_vec(vec![0.4, -1.2, 2.0]);
        assert_relative_eq!(policy.forward(&x), &w * &x, epsilon = 1e-14);
    }

    /// Finite-difference Jacobian bound: small input perturbations move the
    /// output by at most ~||J|| times the perturbation.
    #[test]
    fn forward_is_locally_lipschitz() {
        let policy = GlobalPolicy::new(&[4, 16, 16, 2], 0.1, &mut rng(3));
        let x = std_normal_vec(4, &mut rng(4));
        let base = policy.forward(&x);
        // FD Jacobian.
        let h = 1e-6;
        let mut jac = DMatrix::zeros(2, 4);
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let diff = (policy.forward(&xp) - policy.forward(&xm)) / (2.0 * h);
            jac.set_column(j, &diff);
        }
        let delta = std_normal_vec(4, &mut rng(5)) * 1e-7;
        let moved = policy.forward(&(&x + &delta));
        let predicted = &jac * &delta;
        assert!((moved - &base - predicted).norm() <= 1e-9 * (1.0 + jac.norm()));
    }

    #[test]
    fn supervision_counts_and_targets() {
        use crate::cphase::LocalPolicyResult;
        use crate::lingauss::LinearGaussianPolicy;
        let horizon = 5;
        let (dx, du) = (3, 2);
        let tau = crate::env::Trajectory {
            states: (0..=horizon).map(|i| DVector::from_element(dx, i as f64)).collect(),
            actions: vec![DVector::zeros(du); horizon],
            costs: vec![0.0; horizon],
            seed: 0,
        };
        let mut local_policy = LinearGaussianPolicy::zeros(horizon, dx, du, 1.0);
        for t in 0..horizon {
            local_policy.bias[t] = DVector::from_element(du, t as f64);
            local_policy.cov[t] = DMatrix::identity(du, du) * (0.5 + t as f64);
        }
        let local = LocalPolicyResult {
            policy: local_policy,
            eta: 1.0,
            kl_total: 0.0,
            expected_cost: 0.0,
            expected_improvement: 0.0,
            constraint_active: true,
        };
        let sup = build_supervision(&[tau], &[Some(local)], &[0]);
        assert_eq!(sup.len(), horizon);
        for t in 0..horizon {
            // Zero gains: target mean equals the bias.
            assert_eq!(sup.target_means[t], DVector::from_element(du, t as f64));
            // Precisions are the inverse covariances.
            let expected = DMatrix::identity(du, du) / (0.5 + t as f64);
            assert_relative_eq!(sup.precisions[t], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn failed_samples_are_skipped() {
        let horizon = 3;
        let tau = crate::env::Trajectory {
            states: vec![DVector::zeros(2); horizon + 1],
            actions: vec![DVector::zeros(1); horizon],
            costs: vec![0.0; horizon],
            seed: 0,
        };
        let sup = build_supervision(&[tau], &[None], &[0]);
        assert!(sup.is_empty());
    }

    #[test]
    fn identity_precisions_reduce_to_mse() {
        let sup = random_supervision((3, 2), 40, 6, true);
        let policy = GlobalPolicy::new(&[3, 8, 2], 0.1, &mut rng(7));
        let all: Vec<usize> = (0..sup.len()).collect();
        let weighted = weighted_loss(&policy, &sup, &all);
        let mse: f64 = all
            .iter()
            .map(|&i| (policy.forward(&sup.states[i]) - &sup.target_means[i]).norm_squared())
            .sum::<f64>()
            / sup.len() as f64;
        assert_relative_eq!(weighted, mse, epsilon = 1e-12);
    }

    /// Constructed realizable problem: a single-layer policy can drive the
    /// loss to zero on supervision generated by an exact linear map.
    #[test]
    fn realizable_linear_target_trains_to_zero() {
        let (dx, du) = (3, 2);
        let mut r = rng(8);
        let true_w = DMatrix::from_fn(du, dx, |_, _| std_normal(&mut r));
        let true_b = std_normal_vec(du, &mut r);
        let mut sup = SupervisionSet::default();
        for _ in 0..60 {
            let x = std_normal_vec(dx, &mut r);
            sup.target_means.push(&true_w * &x + &true_b);
            sup.states.push(x);
            sup.precisions.push(DMatrix::identity(du, du));
        }
        let policy = GlobalPolicy::new(&[dx, du], 0.1, &mut rng(9));
        let cfg = TrainConfig {
            epochs: 800,
            batch_size: 60,
            learning_rate: 0.05,
            momentum: 0.9,
        };
        let trained = train_supervised(&policy, &sup, &cfg, &mut rng(10)).unwrap();
        let all: Vec<usize> = (0..sup.len()).collect();
        let final_loss = weighted_loss(&trained, &sup, &all);
        assert!(final_loss < 1e-6, "final loss {final_loss}");
    }

    /// Finite-difference oracle for the analytic gradients.
    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let sup = random_supervision((3, 2), 12, 20 + seed, false);
            let policy = GlobalPolicy::new(&[3, 6, 5, 2], 0.1, &mut rng(30 + seed));
            let indices: Vec<usize> = (0..sup.len()).collect();
            let (_, grads) = loss_and_gradients(&policy, &sup, &indices);

            let h = 1e-5;
            for l in 0..policy.weights.len() {
                for r_i in 0..policy.weights[l].nrows() {
                    for c_i in 0..policy.weights[l].ncols() {
                        let mut plus = policy.clone();
                        let mut minus = policy.clone();
                        plus.weights[l][(r_i, c_i)] += h;
                        minus.weights[l][(r_i, c_i)] -= h;
                        let fd = (weighted_loss(&plus, &sup, &indices)
                            - weighted_loss(&minus, &sup, &indices))
                            / (2.0 * h);
                        let analytic = grads.weights[l][(r_i, c_i)];
                        let tol = 1e-4 * analytic.abs().max(1e-3);
                        assert!(
                            (analytic - fd).abs() <= tol,
                            "layer {l} w[{r_i},{c_i}]: {analytic} vs {fd}"
                        );
                    }
                }
                for b_i in 0..policy.biases[l].len() {
                    let mut plus = policy.clone();
                    let mut minus = policy.clone();
                    plus.biases[l][b_i] += h;
                    minus.biases[l][b_i] -= h;
                    let fd = (weighted_loss(&plus, &sup, &indices)
                        - weighted_loss(&minus, &sup, &indices))
                        / (2.0 * h);
                    let analytic = grads.biases[l][b_i];
                    let tol = 1e-4 * analytic.abs().max(1e-3);
                    assert!((analytic - fd).abs() <= tol, "layer {l} b[{b_i}]");
                }
            }
        }
    }

    #[test]
    fn training_never_returns_a_worse_policy() {
        let sup = random_supervision((4, 2), 50, 40, false);
        let policy = GlobalPolicy::new(&[4, 10, 2], 0.1, &mut rng(41));
        let all: Vec<usize> = (0..sup.len()).collect();
        let before = weighted_loss(&policy, &sup, &all);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
        };
        let trained = train_supervised(&policy, &sup, &cfg, &mut rng(42)).unwrap();
        let after = weighted_loss(&trained, &sup, &all);
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn covariance_refit_uses_mean_precision() {
        let sup = random_supervision((3, 2), 30, 50, false);
        let policy = GlobalPolicy::new(&[3, 2], 0.1, &mut rng(51));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 30,
            learning_rate: 1e-4,
            momentum: 0.0,
        };
        let trained = train_supervised(&policy, &sup, &cfg, &mut rng(52)).unwrap();
        let mut mean_prec = DMatrix::zeros(2, 2);
        for p in &sup.precisions {
            mean_prec += p;
        }
        mean_prec /= sup.len() as f64;
        let expected = mean_prec.try_inverse().unwrap();
        let got = trained.diag_cov();
        for i in 0..2 {
            assert_relative_eq!(got[i], expected[(i, i)], max_relative = 1e-9);
        }
    }

    #[test]
    fn loss_invariant_to_duplicating_every_tuple() {
        let sup = random_supervision((3, 2), 25, 60, false);
        let mut doubled = sup.clone();
        doubled.states.extend(sup.states.clone());
        doubled.target_means.extend(sup.target_means.clone());
        doubled.precisions.extend(sup.precisions.clone());
        let policy = GlobalPolicy::new(&[3, 7, 2], 0.1, &mut rng(61));
        let all: Vec<usize> = (0..sup.len()).collect();
        let all2: Vec<usize> = (0..doubled.len()).collect();
        assert_relative_eq!(
            weighted_loss(&policy, &sup, &all),
            weighted_loss(&policy, &doubled, &all2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_invariant_to_permutation_with_identical_precisions() {
        let sup = random_supervision((3, 2), 20, 70, true);
        let mut permuted = SupervisionSet::default();
        for i in (0..sup.len()).rev() {
            permuted.states.push(sup.states[i].clone());
            permuted.target_means.push(sup.target_means[i].clone());
            permuted.precisions.push(sup.precisions[i].clone());
        }
        let policy = GlobalPolicy::new(&[3, 5, 2], 0.1, &mut rng(71));
        let all: Vec<usize> = (0..sup.len()).collect();
        let a = weighted_loss(&policy, &sup, &all);
        let b = weighted_loss(&policy, &permuted, &all);
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn kl_objective_identities() {
        // mu matches targets and Sigma = C for every tuple: the objective is
        // du - log|C| exactly; two such policies differ by zero.
        let (dx, du) = (2usize, 2usize);
        let c_diag: Vec<f64> = vec![0.3, 1.7];
        let mut sup = SupervisionSet::default();
        let mut policy = GlobalPolicy::new(&[dx, du], 0.1, &mut rng(80));
        policy.weights[0].fill(0.0);
        policy.biases[0].fill(0.0);
        for i in 0..du {
            policy.log_diag_cov[i] = c_diag[i].ln();
        }
        let mut r = rng(81);
        for _ in 0..10 {
            let x = std_normal_vec(dx, &mut r);
            sup.target_means.push(policy.forward(&x));
            sup.states.push(x);
            let mut prec = DMatrix::zeros(du, du);
            for i in 0..du {
                prec[(i, i)] = 1.0 / c_diag[i];
            }
            sup.precisions.push(prec);
        }
        let logdet_c: f64 = c_diag.iter().map(|v| v.ln()).sum();
        let objective = kl_objective(&policy, &sup);
        assert_relative_eq!(objective, du as f64 - logdet_c, epsilon = 1e-12);
    }

    #[test]
    fn kl_objective_quadratic_term_scales_quadratically() {
        let (dx, du) = (3usize, 2usize);
        let mut sup = random_supervision((dx, du), 15, 90, true);
        let policy = GlobalPolicy::new(&[dx, 6, du], 0.1, &mut rng(91));
        let base = kl_objective(&policy, &sup);
        let all: Vec<usize> = (0..sup.len()).collect();
        let quad = weighted_loss(&policy, &sup, &all);
        // Doubling every residual: new_target = 2*target - mu.
        for i in 0..sup.len() {
            let mu = policy.forward(&sup.states[i]);
            let target = sup.target_means[i].clone();
            sup.target_means[i] = &mu + (&target - &mu) * 2.0;
        }
        let doubled = kl_objective(&policy, &sup);
        assert_relative_eq!(doubled - base, 3.0 * quad, max_relative = 1e-9);
    }

    /// Gaussian KL oracle: the objective equals 2 KL plus the per-tuple
    /// constant (du - log|C|).
    #[test]
    fn kl_objective_matches_direct_gaussian_kl() {
        let (dx, du) = (3usize, 2usize);
        let sup = random_supervision((dx, du), 20, 100, false);
        let policy = GlobalPolicy::new(&[dx, 5, du], 0.2, &mut rng(101));
        let sigma = DMatrix::from_diagonal(&policy.diag_cov());
        let mut oracle = 0.0;
        for i in 0..sup.len() {
            let cov = sup.precisions[i].clone().try_inverse().unwrap();
            let mu = policy.forward(&sup.states[i]);
            // KL(N(mu, Sigma) || N(target, C))
            let dm = &sup.target_means[i] - &mu;
            let trace = (&sup.precisions[i] * &sigma).trace();
            let quad = dm.dot(&(&sup.precisions[i] * &dm));
            let logdet_c = cov.determinant().ln();
            let logdet_s: f64 = policy.log_diag_cov.iter().sum();
            let kl = 0.5 * (trace + quad - du as f64 + logdet_c - logdet_s);
            oracle += 2.0 * kl + du as f64 - logdet_c;
        }
        oracle /= sup.len() as f64;
        assert_relative_eq!(kl_objective(&policy, &sup), oracle, epsilon = 1e-8);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("rfgps_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.bin");
        let policy = GlobalPolicy::new(&[5, 42, 42, 3], 0.1, &mut rng(110));
        policy.save(&path).unwrap();
        let loaded = GlobalPolicy::load(&path).unwrap();
        assert_eq!(policy, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = std::env::temp_dir().join(format!("rfgps_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOTAPOLICY").unwrap();
        assert!(GlobalPolicy::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
