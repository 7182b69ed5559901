//! The generative model: hyperparameters, the regularized-horseshoe scale
//! transform, non-centered weight assembly, the forward pass and the joint
//! log-density.
//!
//! Unit `k` of hidden layer `l` owns the column `w_kl` of the layer's
//! `(K_{l-1}+1)×K_l` weight matrix, bias row included, and
//! `w_kl = sqrt(τ̃²_kl υ²_l) β_kl` with `β_kl ~ N(0, I)` a priori.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar_dist::{invgamma_ln_pdf_from_stats, GammaParams, HALF_LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Tanh => x.tanh(),
        }
    }
}

/// Which prior sits on the hidden-layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `w_kl ~ N(0, τ̃²υ² I)` with the slab width `c² ~ InvGamma(c_a, c_b)`.
    RegularizedHorseshoe,
    /// `w_kl ~ N(0, τ²υ² I)`, the `c → ∞` limit.
    Horseshoe,
    /// Every weight, output layer included, `N(0, 1)`. No scales at all.
    StandardNormal,
}

impl PriorKind {
    pub fn has_scales(self) -> bool {
        !matches!(self, PriorKind::StandardNormal)
    }

    pub fn has_slab(self) -> bool {
        matches!(self, PriorKind::RegularizedHorseshoe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Likelihood {
    /// `y ~ N(f(x), 1/γ)` with `γ ~ Gamma(shape, rate)`.
    GaussianGammaPrecision { shape: f64, rate: f64 },
}

impl Default for Likelihood {
    fn default() -> Self {
        Likelihood::GaussianGammaPrecision {
            shape: 6.0,
            rate: 6.0,
        }
    }
}

impl Likelihood {
    pub fn precision_prior(&self) -> GammaParams {
        match *self {
            Likelihood::GaussianGammaPrecision { shape, rate } => GammaParams { shape, rate },
        }
    }
}

/// Architecture and prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[D, K_1, …, K_{L-1}, K_L]`.
    pub layer_widths: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    /// Half-Cauchy scale of the unit scales `τ_kl`.
    pub b0: f64,
    /// Half-Cauchy scale of the layer scales `υ_l`.
    pub bg: f64,
    /// Half-Cauchy scale of the output-weight scale `κ`.
    pub b_kappa: f64,
    pub c_a: f64,
    pub c_b: f64,
    pub prior: PriorKind,
    pub likelihood: Likelihood,
}

impl NetworkSpec {
    /// Defaults follow the published experimental setup.
    pub fn new(layer_widths: Vec<usize>) -> Self {
        Self {
            layer_widths,
            nonlinearity: Nonlinearity::Relu,
            b0: 1.0,
            bg: 1e-5,
            b_kappa: 5.0,
            c_a: 2.0,
            c_b: 6.0,
            prior: PriorKind::RegularizedHorseshoe,
            likelihood: Likelihood::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::invalid("need an input width, at least one hidden layer and an output width"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        for (name, v) in [
            ("b0", self.b0),
            ("bg", self.bg),
            ("b_kappa", self.b_kappa),
            ("c_a", self.c_a),
            ("c_b", self.c_b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let Likelihood::GaussianGammaPrecision { shape, rate } = self.likelihood;
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::invalid("precision prior parameters must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// `(fan_in including bias, width)` of hidden layer `l` (0-based).
    pub fn hidden_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_widths[l] + 1, self.layer_widths[l + 1])
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let n = self.layer_widths.len();
        (self.layer_widths[n - 2] + 1, self.layer_widths[n - 1])
    }
}

/// `τ̃² = c²τ² / (c² + τ²υ²)`.
pub fn regularized_scale(tau2: f64, upsilon2: f64, c2: f64) -> f64 {
    c2 * tau2 / (c2 + tau2 * upsilon2)
}

/// Squared multiplier `τ̃²υ²` of a unit under `prior` (`c2` ignored unless
/// the prior is regularized).
pub fn effective_scale2(prior: PriorKind, tau2: f64, upsilon2: f64, c2: f64) -> f64 {
    match prior {
        PriorKind::RegularizedHorseshoe => regularized_scale(tau2, upsilon2, c2) * upsilon2,
        PriorKind::Horseshoe => tau2 * upsilon2,
        PriorKind::StandardNormal => 1.0,
    }
}

/// Column `k` of the result is `sqrt(τ̃²_k υ²) β[:, k]`.
pub fn assemble_weights(
    beta: ArrayView2<f64>,
    tau2: ArrayView1<f64>,
    upsilon2: f64,
    c2: f64,
    prior: PriorKind,
) -> Result<Array2<f64>> {
    if beta.ncols() != tau2.len() {
        return Err(Error::shape(format!(
            "beta has {} columns but {} unit scales were given",
            beta.ncols(),
            tau2.len()
        )));
    }
    let mult = tau2.mapv(|t| effective_scale2(prior, t, upsilon2, c2).sqrt());
    Ok(&beta * &mult.insert_axis(Axis(0)))
}

/// One joint draw of every latent quantity in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledWeights {
    pub hidden: Vec<HiddenDraw>,
    /// Output weights, bias row last.
    pub output: Array2<f64>,
    pub kappa2: f64,
    pub c2: f64,
    /// Noise precision.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenDraw {
    /// Non-centered weights, `(K_{l-1}+1)×K_l`.
    pub beta: Array2<f64>,
    pub tau2: Array1<f64>,
    pub upsilon2: f64,
}

/// Values of the half-Cauchy auxiliaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxValues {
    pub lambda: Vec<Array1<f64>>,
    pub vartheta: Vec<f64>,
    pub rho_kappa: f64,
}

impl SampledWeights {
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.hidden.len() != spec.num_hidden() {
            return Err(Error::shape("wrong number of hidden layers"));
        }
        for (l, h) in self.hidden.iter().enumerate() {
            if h.beta.dim() != spec.hidden_shape(l) || h.tau2.len() != spec.hidden_shape(l).1 {
                return Err(Error::shape(format!("hidden layer {l} has the wrong shape")));
            }
        }
        if self.output.dim() != spec.output_shape() {
            return Err(Error::shape("output weights have the wrong shape"));
        }
        Ok(())
    }

    /// Effective weight matrices `W_1, …, W_L`.
    pub fn assemble(&self, spec: &NetworkSpec) -> Result<Vec<Array2<f64>>> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        for h in &self.hidden {
            out.push(assemble_weights(
                h.beta.view(),
                h.tau2.view(),
                h.upsilon2,
                self.c2,
                spec.prior,
            )?);
        }
        out.push(self.output.clone());
        Ok(out)
    }
}

/// Network output for one input, given effective weights.
pub fn forward_weights(nonlinearity: Nonlinearity, weights: &[Array2<f64>], x: ArrayView1<f64>) -> Array1<f64> {
    let mut z = x.to_owned();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let mut a = Array1::ones(z.len() + 1);
        a.slice_mut(s![..z.len()]).assign(&z);
        let u = w.t().dot(&a);
        z = if l == last {
            u
        } else {
            u.mapv(|v| nonlinearity.apply(v))
        };
    }
    z
}

/// Row-wise [`forward_weights`] over a design matrix.
pub fn forward_batch(nonlinearity: Nonlinearity, weights: &[Array2<f64>], x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.to_owned();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let (r, c) = z.dim();
        let mut a = Array2::ones((r, c + 1));
        a.slice_mut(s![.., ..c]).assign(&z);
        let u = a.dot(w);
        z = if l == last {
            u
        } else {
            u.mapv(|v| nonlinearity.apply(v))
        };
    }
    z
}

pub fn forward(spec: &NetworkSpec, w: &SampledWeights, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::shape(format!(
            "input has length {}, expected {}",
            x.len(),
            spec.input_dim()
        )));
    }
    Ok(forward_weights(spec.nonlinearity, &w.assemble(spec)?, x))
}

/// `ln InvGamma(a² | 1/2, 1/λ) + ln InvGamma(λ | 1/2, 1/b²)`.
pub fn half_cauchy_pair_ln_density(a2: f64, lambda: f64, b: f64) -> f64 {
    invgamma_ln_pdf_from_stats(0.5, 1.0 / lambda, a2.ln(), 1.0 / a2)
        + invgamma_ln_pdf_from_stats(0.5, 1.0 / (b * b), lambda.ln(), 1.0 / lambda)
}

/// Joint log-density split by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogJointTerms {
    pub slab: f64,
    pub output_scale: f64,
    pub layer_scales: f64,
    pub unit_scales: f64,
    pub beta: f64,
    pub output_weights: f64,
    pub precision: f64,
    pub likelihood: f64,
}

impl LogJointTerms {
    pub fn total(&self) -> f64 {
        self.slab
            + self.output_scale
            + self.layer_scales
            + self.unit_scales
            + self.beta
            + self.output_weights
            + self.precision
            + self.likelihood
    }
}

/// `ln p(D, θ)` with the batch log-likelihood scaled by `n_total / |batch|`.
pub fn log_joint(
    spec: &NetworkSpec,
    w: &SampledWeights,
    aux: &AuxValues,
    batch: &Dataset,
    n_total: usize,
) -> Result<LogJointTerms> {
    w.validate(spec)?;
    let mut t = LogJointTerms::default();
    let scales = spec.prior.has_scales();

    if spec.prior.has_slab() {
        t.slab = invgamma_ln_pdf_from_stats(spec.c_a, spec.c_b, w.c2.ln(), 1.0 / w.c2);
    }
    if scales {
        t.output_scale = half_cauchy_pair_ln_density(w.kappa2, aux.rho_kappa, spec.b_kappa);
        for (l, h) in w.hidden.iter().enumerate() {
            t.layer_scales += half_cauchy_pair_ln_density(h.upsilon2, aux.vartheta[l], spec.bg);
            for (tau2, lambda) in h.tau2.iter().zip(&aux.lambda[l]) {
                t.unit_scales += half_cauchy_pair_ln_density(*tau2, *lambda, spec.b0);
            }
        }
    }
    for h in &w.hidden {
        t.beta += h.beta.iter().map(|b| -HALF_LN_2PI - 0.5 * b * b).sum::<f64>();
    }
    let out_var = if scales { w.kappa2 } else { 1.0 };
    t.output_weights = w
        .output
        .iter()
        .map(|v| -0.5 * (2.0 * PI * out_var).ln() - 0.5 * v * v / out_var)
        .sum();
    t.precision = spec.likelihood.precision_prior().ln_pdf(w.gamma);

    let weights = w.assemble(spec)?;
    let pred = forward_batch(spec.nonlinearity, &weights, batch.x.view());
    let ll: f64 = pred
        .iter()
        .zip(&batch.y)
        .map(|(f, y)| gaussian_ln_pdf(*y, *f, w.gamma))
        .sum();
    t.likelihood = n_total as f64 / batch.len() as f64 * ll;

    if !t.total().is_finite() {
        return Err(Error::Numerical(format!("non-finite log joint: {t:?}")));
    }
    Ok(t)
}

/// `ln N(y | f, 1/precision)`.
pub fn gaussian_ln_pdf(y: f64, f: f64, precision: f64) -> f64 {
    0.5 * precision.ln() - HALF_LN_2PI - 0.5 * precision * (y - f) * (y - f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regularized_scale_examples() {
        assert_eq!(regularized_scale(1.0, 1.0, 1.0), 0.5);
        assert!((regularized_scale(1e-10, 1.0, 1.0) - 1e-10).abs() < 1e-19);
        assert!((regularized_scale(1e10, 1.0, 4.0) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn assemble_examples() {
        let beta = Array2::zeros((3, 2));
        let w = assemble_weights(beta.view(), array![1.0, 2.0].view(), 1.0, 1.0, PriorKind::RegularizedHorseshoe)
            .unwrap();
        assert!(w.iter().all(|v| *v == 0.0));

        let beta = array![[1.0, 2.0], [3.0, 4.0]];
        let w = assemble_weights(beta.view(), array![0.0, 1.0].view(), 1.0, 1.0, PriorKind::RegularizedHorseshoe)
            .unwrap();
        assert_eq!(w.column(0), array![0.0, 0.0]);
        assert!(assemble_weights(beta.view(), array![1.0].view(), 1.0, 1.0, PriorKind::Horseshoe).is_err());
    }

    #[test]
    fn assemble_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = Array2::from_shape_fn((4, 5), |_| rng.random_range(-2.0..2.0));
        let tau2 = Array1::from_shape_fn(5, |_| rng.random_range(0.01..5.0));
        let (u2, c2) = (0.7, 2.5);
        let w = assemble_weights(beta.view(), tau2.view(), u2, c2, PriorKind::RegularizedHorseshoe).unwrap();
        for i in 0..4 {
            for k in 0..5 {
                let tt = c2 * tau2[k] / (c2 + tau2[k] * u2);
                let want = (tt * u2).sqrt() * beta[[i, k]];
                assert!((w[[i, k]] - want).abs() < 1e-14);
            }
        }
    }

    fn single_unit_net(nl: Nonlinearity) -> (NetworkSpec, SampledWeights) {
        let mut spec = NetworkSpec::new(vec![1, 1, 1]);
        spec.nonlinearity = nl;
        spec.prior = PriorKind::Horseshoe;
        let w = SampledWeights {
            hidden: vec![HiddenDraw {
                beta: array![[1.0], [1.0]],
                tau2: array![1.0],
                upsilon2: 1.0,
            }],
            output: array![[2.0], [0.0]],
            kappa2: 1.0,
            c2: 1.0,
            gamma: 1.0,
        };
        (spec, w)
    }

    #[test]
    fn forward_hand_computed() {
        let (spec, w) = single_unit_net(Nonlinearity::Relu);
        for (x, want) in [(-2.0, 0.0), (0.0, 2.0), (1.0, 4.0)] {
            let y = forward(&spec, &w, array![x].view()).unwrap();
            assert_eq!(y[0], want);
        }
        assert!(forward(&spec, &w, array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn forward_zero_weights_gives_output_bias() {
        let (spec, mut w) = single_unit_net(Nonlinearity::Tanh);
        w.hidden[0].beta.fill(0.0);
        w.output = array![[0.0], [0.75]];
        let y = forward(&spec, &w, array![3.0].view()).unwrap();
        assert_eq!(y[0], 0.75);
    }

    #[test]
    fn relu_net_without_bias_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w1 = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let mut w2 = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        w1.row_mut(3).fill(0.0);
        w2.row_mut(5).fill(0.0);
        let ws = vec![w1, w2];
        let x = array![0.3, -1.1, 0.8];
        let base = forward_weights(Nonlinearity::Relu, &ws, x.view());
        for alpha in [0.5, 2.0, 7.0] {
            let scaled = forward_weights(Nonlinearity::Relu, &ws, (&x * alpha).view());
            for (s, b) in scaled.iter().zip(&base) {
                assert!((s - alpha * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_cauchy_pair_at_unit_values() {
        let v = half_cauchy_pair_ln_density(1.0, 1.0, 1.0);
        assert!((v - (-PI.ln() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn likelihood_of_perfect_fit() {
        assert!((gaussian_ln_pdf(0.3, 0.3, 1.0) + HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn batch_only_moves_likelihood() {
        let (spec, w) = single_unit_net(Nonlinearity::Relu);
        let aux = AuxValues {
            lambda: vec![array![1.0]],
            vartheta: vec![1.0],
            rho_kappa: 1.0,
        };
        let a = Dataset::new(array![[0.5], [1.0]], array![[1.0], [2.0]]).unwrap();
        let b = Dataset::new(array![[-0.5], [2.0]], array![[0.0], [-1.0]]).unwrap();
        let ta = log_joint(&spec, &w, &aux, &a, 10).unwrap();
        let tb = log_joint(&spec, &w, &aux, &b, 10).unwrap();
        assert_ne!(ta.likelihood, tb.likelihood);
        let mut tb2 = tb;
        tb2.likelihood = ta.likelihood;
        assert_eq!(ta, tb2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn regularized_scale_monotone_and_bounded(
                t in -20.0f64..20.0, dt in 1e-3f64..5.0,
                u in -10.0f64..10.0, c in -5.0f64..5.0,
            ) {
                let (tau2, u2, c2) = (t.exp(), u.exp(), c.exp());
                let lo = regularized_scale(tau2, u2, c2);
                let hi = regularized_scale((t + dt).exp(), u2, c2);
                prop_assert!(lo < hi || (hi - lo).abs() <= 1e-12 * hi);
                prop_assert!(hi <= c2 / u2 * (1.0 + 1e-12));
                prop_assert!(lo <= tau2 * (1.0 + 1e-12));
            }
        }
    }
}
