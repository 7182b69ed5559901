//! Training: Adam ascent on the reparameterizable parameters, closed-form
//! updates of the inverse-gamma auxiliaries, and unit-norm projection of the
//! matrix-normal covariance factors.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradient::{grad_elbo, ParamSchema, ParamVector};
use crate::model::NetworkSpec;
use crate::rng::{substream, Stream};
use crate::scalar_dist::{InvGammaParams, LogNormalParams, SIGMA_FLOOR};
use crate::variational::{ElboInput, ElboNoise, ElboTerms, Family, LayerPosterior, ParamKey, Posterior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: Family,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mc_samples: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub unit_norm_projection: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: Family::Structured,
            learning_rate: 0.005,
            batch_size: 128,
            iterations: 1000,
            mc_samples: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            unit_norm_projection: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("batch_size and mc_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam decay rates must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One ascent step on `params` along `grad`, skipping coordinates where
    /// `mask` is false (their moments stay untouched).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, mask: Option<&[bool]>) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            // the minimizer sees -grad
            let g = -grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub posterior: Posterior,
    pub adam: Adam,
    pub iteration: usize,
    pub elbo_trace: Vec<f64>,
}

impl TrainState {
    pub fn new(spec: &NetworkSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init);
        let mut posterior = Posterior::init(spec, config.family, &mut rng)?;
        if config.unit_norm_projection {
            project_unit_norm(&mut posterior);
            fixed_point_sweep(&mut posterior, spec);
        }
        let len = ParamSchema::of(&posterior, spec.prior).len();
        Ok(Self {
            posterior,
            adam: Adam::new(len),
            iteration: 0,
            elbo_trace: Vec::new(),
        })
    }
}

/// Optimal inverse-gamma factor for the auxiliary of a half-Cauchy scale
/// with squared-scale posterior `scale2` and prior scale `b`.
pub fn fixed_point_update_aux(scale2: &LogNormalParams, b: f64) -> InvGammaParams {
    InvGammaParams {
        shape: 1.0,
        rate: scale2.mean_inverse() + 1.0 / (b * b),
    }
}

/// Moves every auxiliary to its fixed point given the current scale factors.
pub fn fixed_point_sweep(posterior: &mut Posterior, spec: &NetworkSpec) {
    if !spec.prior.has_scales() {
        return;
    }
    for h in &mut posterior.hidden {
        h.lambda = h
            .tau2_marginals()
            .iter()
            .map(|t| fixed_point_update_aux(t, spec.b0))
            .collect();
        h.vartheta = fixed_point_update_aux(&h.upsilon2.params(), spec.bg);
    }
    let g = &mut posterior.globals;
    g.rho_kappa = fixed_point_update_aux(&g.kappa2.params(), spec.b_kappa);
}

fn normalize_log(v: &mut Array1<f64>, extra: Option<&mut f64>) {
    let mut sq: f64 = v.iter().map(|l| (2.0 * l).exp()).sum();
    if let Some(e) = &extra {
        sq += (2.0 * **e).exp();
    }
    let shift = 0.5 * sq.ln();
    v.mapv_inplace(|l| l - shift);
    if let Some(e) = extra {
        *e -= shift;
    }
}

/// Rescales the `Ψ` diagonal, `V` and `h` of every matrix-normal layer to
/// unit Euclidean norm. For the structured family the `ν` coordinate is part
/// of the vectors.
pub fn project_unit_norm(posterior: &mut Posterior) {
    for h in &mut posterior.hidden {
        match &mut h.weights {
            LayerPosterior::SemiStructured { log_psi, h: hv, log_v, .. } => {
                normalize_log(log_psi, None);
                normalize_log(log_v, None);
                let n = hv.dot(hv).sqrt();
                if n > 0.0 {
                    *hv /= n;
                }
            }
            LayerPosterior::Structured {
                log_psi,
                log_psi_nu,
                h: hv,
                h_nu,
                log_v,
                ..
            } => {
                normalize_log(log_psi, Some(log_psi_nu));
                normalize_log(log_v, None);
                let n = (hv.dot(hv) + *h_nu * *h_nu).sqrt();
                if n > 0.0 {
                    *hv /= n;
                    *h_nu /= n;
                }
            }
            _ => {}
        }
    }
}

/// Lower bound of each unconstrained coordinate: log standard deviations may
/// not drop below `ln 1e-8`, log variances below twice that.
fn floor_for(key: ParamKey) -> Option<f64> {
    let ln_floor = SIGMA_FLOOR.ln();
    match key {
        k if k.is_log_scale() => Some(ln_floor),
        ParamKey::LogPsi(_) | ParamKey::LogPsiNu(_) | ParamKey::LogV(_) => Some(2.0 * ln_floor),
        _ => None,
    }
}

/// Which coordinates an update moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMask {
    All,
    /// Weight means only (fine-tuning).
    MeansOnly,
}

/// Applies one Adam ascent step with the given gradient and clamps the
/// result to the numerical floors.
pub fn apply_gradient(
    state: &mut TrainState,
    spec: &NetworkSpec,
    grad: &ParamVector,
    config: &TrainConfig,
    mask: UpdateMask,
) -> Result<()> {
    let schema = ParamSchema::of(&state.posterior, spec.prior);
    if grad.len() != schema.len() || state.adam.m.len() != schema.len() {
        return Err(Error::shape("gradient, optimizer and posterior disagree on size"));
    }
    let mut params = ParamVector::flatten(&state.posterior, spec.prior);
    let keep = match mask {
        UpdateMask::All => None,
        UpdateMask::MeansOnly => {
            let mut keep = vec![false; schema.len()];
            for b in schema.blocks.iter().filter(|b| b.key.is_weight_mean()) {
                keep[b.offset..b.offset + b.len()].fill(true);
            }
            Some(keep)
        }
    };
    state.adam.ascend(&mut params.values, &grad.values, config, keep.as_deref());
    for b in &schema.blocks {
        if let Some(lo) = floor_for(b.key) {
            for v in &mut params.values[b.offset..b.offset + b.len()] {
                *v = v.max(lo);
            }
        }
    }
    params.unflatten_into(&mut state.posterior, spec.prior)
}

/// One iteration: Adam on the ELBO gradient, then the auxiliary fixed
/// points, then (if enabled) the norm projection.
pub fn train_step(
    state: &mut TrainState,
    spec: &NetworkSpec,
    config: &TrainConfig,
    batch: &Dataset,
    n_total: usize,
    noise: &ElboNoise,
) -> Result<ElboTerms> {
    let g = grad_elbo(&ElboInput {
        spec,
        posterior: &state.posterior,
        batch,
        n_total,
        noise,
    })
    .map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("iteration {}: {msg}", state.iteration)),
        other => other,
    })?;
    apply_gradient(state, spec, &g.grad, config, UpdateMask::All)?;
    fixed_point_sweep(&mut state.posterior, spec);
    if config.unit_norm_projection {
        project_unit_norm(&mut state.posterior);
    }
    state.iteration += 1;
    state.elbo_trace.push(g.terms.total);
    Ok(g.terms)
}

/// Shuffled minibatch indices, reshuffled at the start of every epoch.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch_size: batch_size.min(n.max(1)),
        }
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos.min(self.order.len())]
    }
}

/// Runs `config.iterations` steps from a fresh state.
pub fn train(spec: &NetworkSpec, config: &TrainConfig, data: &Dataset) -> Result<TrainState> {
    let mut state = TrainState::new(spec, config)?;
    continue_training(&mut state, spec, config, data, config.iterations, UpdateMask::All)?;
    Ok(state)
}

/// Runs `iterations` more steps on an existing state. With
/// [`UpdateMask::MeansOnly`] only weight means move and no fixed points or
/// projections are applied.
pub fn continue_training(
    state: &mut TrainState,
    spec: &NetworkSpec,
    config: &TrainConfig,
    data: &Dataset,
    iterations: usize,
    mask: UpdateMask,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.input_dim() != spec.input_dim() || data.y.ncols() != spec.output_dim() {
        return Err(Error::shape("dataset does not match the network's input/output sizes"));
    }
    // offset the stream by the iteration count so a resumed run does not
    // replay the noise of the first one
    let mut rng = substream(config.seed.wrapping_add(state.iteration as u64), Stream::Train);
    let mut batcher = Batcher::new(data.len(), config.batch_size);
    for _ in 0..iterations {
        let idx = batcher.next_batch(&mut rng).to_vec();
        let batch = data.select(&idx);
        let noise = ElboNoise::draw(spec, batch.len(), config.mc_samples, &mut rng);
        match mask {
            UpdateMask::All => {
                train_step(state, spec, config, &batch, data.len(), &noise)?;
            }
            UpdateMask::MeansOnly => {
                let g = grad_elbo(&ElboInput {
                    spec,
                    posterior: &state.posterior,
                    batch: &batch,
                    n_total: data.len(),
                    noise: &noise,
                })?;
                apply_gradient(state, spec, &g.grad, config, mask)?;
                state.iteration += 1;
                state.elbo_trace.push(g.terms.total);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorKind;
    use crate::scalar_dist::cross_term_lognormal_invgamma;
    use crate::scalar_dist::aux_prior_term;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_point_examples() {
        let unit = LogNormalParams { mu: 0.0, sigma: 0.0 };
        assert_eq!(fixed_point_update_aux(&unit, 1.0), InvGammaParams { shape: 1.0, rate: 2.0 });
        let four = LogNormalParams { mu: 4f64.ln(), sigma: 1e-9 };
        let r = fixed_point_update_aux(&four, 1e12).rate;
        assert!((r - 0.25).abs() < 1e-12);
    }

    /// The fixed point maximizes `E[ln p(τ²|λ)] + E[ln p(λ)] + H[q(λ)]`
    /// over a grid of inverse-gamma parameters.
    #[test]
    fn fixed_point_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let t = LogNormalParams {
                mu: rng.random_range(-3.0..3.0),
                sigma: rng.random_range(0.05..1.5),
            };
            let b: f64 = rng.random_range(0.2..3.0);
            let objective = |lam: &InvGammaParams| {
                cross_term_lognormal_invgamma(&t, lam) + aux_prior_term(lam, b) + lam.moments().entropy
            };
            let fp = fixed_point_update_aux(&t, b);
            let best = objective(&fp);
            let step = 1e-3;
            let mut grid_best = f64::NEG_INFINITY;
            let mut arg = (0.0, 0.0);
            // coarse search then a fine 2-D grid around the coarse optimum
            for i in 1..200 {
                for j in 1..200 {
                    let lam = InvGammaParams {
                        shape: 0.05 * i as f64,
                        rate: fp.rate * 0.02 * j as f64,
                    };
                    let v = objective(&lam);
                    if v > grid_best {
                        grid_best = v;
                        arg = (lam.shape, lam.rate);
                    }
                }
            }
            for i in -50..=50 {
                for j in -50..=50 {
                    let lam = InvGammaParams {
                        shape: arg.0 + step * i as f64,
                        rate: arg.1 + step * j as f64 * fp.rate,
                    };
                    if lam.shape <= 0.0 || lam.rate <= 0.0 {
                        continue;
                    }
                    grid_best = grid_best.max(objective(&lam));
                }
            }
            assert!(best >= grid_best - 1e-9, "{best} < {grid_best}");
            assert!((arg.0 - 1.0).abs() <= 0.05 + 1e-9);
        }
    }

    /// Hand-written Adam recurrence on `f(x) = -(x - 3)²`.
    #[test]
    fn adam_matches_reference_recurrence() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(1);
        let mut x = [0.0];
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let grad = -2.0 * (x[0] - 3.0);
            adam.ascend(&mut x, &[grad], &cfg, None);
            let g = 2.0 * (xr - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            xr -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - xr).abs() < 1e-15);
        }
        // the first Adam step moves by exactly the learning rate
        assert!((xr - 0.3).abs() > 0.0);
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::new(vec![1, 4, 1])
    }

    #[test]
    fn zero_gradient_only_moves_auxiliaries() {
        let spec = spec();
        let cfg = TrainConfig {
            unit_norm_projection: false,
            family: Family::Factorized,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&spec, &cfg).unwrap();
        state.posterior.hidden[0].lambda[0] = InvGammaParams { shape: 3.0, rate: 3.0 };
        let before = state.posterior.clone();
        let zero = ParamVector::zeros(state.adam.m.len());
        apply_gradient(&mut state, &spec, &zero, &cfg, UpdateMask::All).unwrap();
        assert_eq!(ParamVector::flatten(&state.posterior, spec.prior), ParamVector::flatten(&before, spec.prior));
        fixed_point_sweep(&mut state.posterior, &spec);
        let want = fixed_point_update_aux(&before.hidden[0].tau2_marginals()[0], spec.b0);
        assert_eq!(state.posterior.hidden[0].lambda[0], want);
    }

    #[test]
    fn projection_gives_unit_norms() {
        let spec = spec();
        let data = Dataset::new(array![[0.1], [0.5], [-0.3]], array![[0.2], [1.0], [-0.5]]).unwrap();
        for family in [Family::SemiStructured, Family::Structured] {
            let cfg = TrainConfig {
                family,
                iterations: 3,
                ..TrainConfig::default()
            };
            let state = train(&spec, &cfg, &data).unwrap();
            let mn = state.posterior.hidden[0].weights.matrix_normal().unwrap();
            let psi = mn.row_cov.psi;
            let h = mn.row_cov.h;
            assert!((psi.dot(&psi).sqrt() - 1.0).abs() < 1e-12);
            assert!((h.dot(&h).sqrt() - 1.0).abs() < 1e-12);
            assert!((mn.col_var.dot(&mn.col_var).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let spec = spec();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let data = Dataset::new(array![[0.0]], array![[0.0]]).unwrap();
        let state = train(&spec, &cfg, &data).unwrap();
        assert_eq!(state, TrainState::new(&spec, &cfg).unwrap());
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = crate::data::toy_sine(50, (-2.0, 2.0), 0.1, &mut rng);
        let cfg = TrainConfig {
            iterations: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert_eq!(train(&spec, &cfg, &data).unwrap(), train(&spec, &cfg, &data).unwrap());
    }

    #[test]
    fn fixed_points_never_lower_their_term() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for family in Family::ALL {
            let mut post = Posterior::init(&spec, family, &mut rng).unwrap();
            for h in &mut post.hidden {
                for lam in &mut h.lambda {
                    *lam = InvGammaParams {
                        shape: rng.random_range(0.2..4.0),
                        rate: rng.random_range(0.2..4.0),
                    };
                }
            }
            let term = |p: &Posterior| -> f64 {
                let h = &p.hidden[0];
                h.tau2_marginals()
                    .iter()
                    .zip(&h.lambda)
                    .map(|(t, l)| cross_term_lognormal_invgamma(t, l) + aux_prior_term(l, spec.b0) + l.moments().entropy)
                    .sum()
            };
            let before = term(&post);
            fixed_point_sweep(&mut post, &spec);
            assert!(term(&post) >= before);
        }
    }

    #[test]
    fn linear_data_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let noise = 0.1;
        let y = x.mapv(|v| 2.0 * v) + Array2::from_shape_fn((n, 1), |_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            noise * z
        });
        let data = Dataset::new(x, y).unwrap();
        let mut spec = NetworkSpec::new(vec![1, 5, 1]);
        spec.prior = PriorKind::RegularizedHorseshoe;
        let cfg = TrainConfig {
            iterations: 2000,
            batch_size: 64,
            family: Family::Structured,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let state = train(&spec, &cfg, &data).unwrap();
        let grid = Array2::from_shape_fn((50, 1), |(i, _)| -1.0 + 2.0 * i as f64 / 49.0);
        let pred = crate::eval::predictive(&spec, &state.posterior, &grid, 50, &mut rng).unwrap();
        let rmse = ((&pred.mean - &grid.mapv(|v| 2.0 * v)).mapv(|d| d * d).mean().unwrap()).sqrt();
        assert!(rmse <= 2.0 * noise, "rmse {rmse}");
    }
}
