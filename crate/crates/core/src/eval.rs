//! Posterior predictive summaries and test metrics.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::scalar_dist::{log_sum_exp, HALF_LN_2PI};
use crate::variational::{sample_outputs, ElboNoise, Posterior};

/// Monte-Carlo predictive distribution at a set of inputs, in the units the
/// network was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    /// Average network output, `rows × outputs`.
    pub mean: Array2<f64>,
    /// `sqrt(Var_s f + E[1/γ])`: spread of the network plus observation noise.
    pub std: Array2<f64>,
    /// One network output per sample.
    pub samples: Vec<Array2<f64>>,
    /// Noise precision drawn alongside each sample.
    pub precisions: Vec<f64>,
}

/// Draws `samples` forward passes (local reparameterization, one fresh
/// weight draw per pass) and a noise precision per pass.
pub fn predictive(
    spec: &NetworkSpec,
    posterior: &Posterior,
    x: &Array2<f64>,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Predictive> {
    if samples == 0 {
        return Err(Error::invalid("need at least one predictive sample"));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns, network expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    let gamma = posterior.globals.gamma.params();
    let mut outs = Vec::with_capacity(samples);
    let mut precisions = Vec::with_capacity(samples);
    for _ in 0..samples {
        let noise = ElboNoise::draw(spec, x.nrows(), 1, rng);
        let mut f = sample_outputs(spec, posterior, x, &noise)?;
        outs.push(f.pop().expect("one sample"));
        let eps: f64 = StandardNormal.sample(rng);
        precisions.push(gamma.sample(eps));
    }
    let s = samples as f64;
    let mut mean = Array2::zeros(outs[0].dim());
    for f in &outs {
        mean += f;
    }
    mean /= s;
    let mut var = Array2::zeros(mean.dim());
    for f in &outs {
        var += &(f - &mean).mapv(|d| d * d);
    }
    var /= s;
    let noise_var = gamma.mean_inverse();
    let std = var.mapv(|v| (v + noise_var).sqrt());
    Ok(Predictive {
        mean,
        std,
        samples: outs,
        precisions,
    })
}

/// Test metrics in the original target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Mean per-point predictive log-likelihood.
    pub log_likelihood: f64,
}

/// RMSE of the predictive mean and the Monte-Carlo predictive
/// log-likelihood `ln (1/S) Σ_s N(y | f_s, 1/γ_s)`, both mapped back through
/// `standardizer` when given. `test` is in standardized units.
pub fn evaluate(
    spec: &NetworkSpec,
    posterior: &Posterior,
    test: &Dataset,
    standardizer: Option<&Standardizer>,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let pred = predictive(spec, posterior, &test.x, samples, rng)?;
    Ok(metrics_from(&pred, &test.y, standardizer))
}

pub fn metrics_from(pred: &Predictive, y: &Array2<f64>, standardizer: Option<&Standardizer>) -> Metrics {
    let (n, k) = y.dim();
    let y_scale: Vec<f64> = (0..k)
        .map(|j| standardizer.map_or(1.0, |s| s.y_std[j]))
        .collect();
    let sq: f64 = (&pred.mean - y)
        .indexed_iter()
        .map(|((_, j), d)| (d * y_scale[j]).powi(2))
        .sum();
    let rmse = (sq / (n * k) as f64).sqrt();

    // a density in standardized units converts by the Jacobian 1/s_y
    let log_jac: f64 = y_scale.iter().map(|s| s.ln()).sum();
    let mut ll = 0.0;
    let mut terms = vec![0.0; pred.samples.len()];
    for i in 0..n {
        for (s, (f, g)) in pred.samples.iter().zip(&pred.precisions).enumerate() {
            terms[s] = (0..k)
                .map(|j| {
                    let r = y[[i, j]] - f[[i, j]];
                    0.5 * g.ln() - HALF_LN_2PI - 0.5 * g * r * r
                })
                .sum();
        }
        ll += log_sum_exp(&terms) - (terms.len() as f64).ln() - log_jac;
    }
    Metrics {
        rmse,
        log_likelihood: ll / n as f64,
    }
}

/// Average predictive standard deviation over all rows and outputs.
pub fn mean_predictive_std(pred: &Predictive) -> f64 {
    pred.std.mean().unwrap_or(0.0)
}

/// Plot-ready rows `x, mean, mean - 2 std, mean + 2 std` for a 1-D input
/// grid and the first output, in the units given by `standardizer`.
pub fn band_table(
    grid: &Array2<f64>,
    pred: &Predictive,
    standardizer: Option<&Standardizer>,
) -> Vec<[f64; 4]> {
    let (mean, std) = match standardizer {
        Some(s) => (s.inverse_y(&pred.mean), s.inverse_y_scale(&pred.std)),
        None => (pred.mean.clone(), pred.std.clone()),
    };
    grid.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let x = match standardizer {
                Some(s) if !s.x_std.is_empty() => row[0] * s.x_std[0] + s.x_mean[0],
                _ => row[0],
            };
            let m = mean[[i, 0]];
            let d = 2.0 * std[[i, 0]];
            [x, m, m - d, m + d]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorKind;
    use crate::variational::{Family, LogNormalFactor};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_mass(spec: &NetworkSpec) -> Posterior {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut post = Posterior::init(spec, Family::Factorized, &mut rng).unwrap();
        for h in &mut post.hidden {
            if let crate::variational::LayerPosterior::Factorized { mean, log_sigma } = &mut h.weights {
                mean.fill(0.0);
                log_sigma.fill(-800.0);
            }
        }
        post.globals.output_mean.fill(0.0);
        post.globals.output_log_sigma.fill(-800.0);
        post.globals.gamma = LogNormalFactor { mu: 0.0, log_sigma: -40.0 };
        post
    }

    #[test]
    fn perfect_fit_log_likelihood() {
        let mut spec = NetworkSpec::new(vec![1, 2, 1]);
        spec.prior = PriorKind::StandardNormal;
        let post = point_mass(&spec);
        let test = Dataset::new(array![[0.3], [-2.0]], array![[0.0], [0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = evaluate(&spec, &post, &test, None, 10, &mut rng).unwrap();
        assert_eq!(m.rmse, 0.0);
        // the log-std floor leaves γ within ~1e-8 of 1
        assert!((m.log_likelihood + HALF_LN_2PI).abs() < 1e-7);
    }

    #[test]
    fn predicting_the_mean_gives_unit_rmse() {
        let mut spec = NetworkSpec::new(vec![1, 2, 1]);
        spec.prior = PriorKind::StandardNormal;
        let post = point_mass(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = crate::data::toy_sine(2000, (-4.0, 4.0), 0.1, &mut rng);
        let st = Standardizer::fit(&raw).unwrap();
        let z = st.transform(&raw);
        let m = evaluate(&spec, &post, &z, None, 2, &mut rng).unwrap();
        assert!((m.rmse - 1.0).abs() < 1e-9);
        // in original units the same error is the target's std
        let m = evaluate(&spec, &post, &z, Some(&st), 2, &mut rng).unwrap();
        assert!((m.rmse - st.y_std[0]).abs() < 1e-9);
    }

    #[test]
    fn log_likelihood_oracle() {
        // scalar loop over samples with an explicit mixture density
        let pred = Predictive {
            mean: array![[0.0]],
            std: array![[1.0]],
            samples: vec![array![[0.5]], array![[-1.0]], array![[2.0]]],
            precisions: vec![1.0, 4.0, 0.25],
        };
        let y = array![[0.7]];
        let dens: f64 = pred
            .samples
            .iter()
            .zip(&pred.precisions)
            .map(|(f, g)| (g / (2.0 * std::f64::consts::PI)).sqrt() * (-0.5 * g * (0.7 - f[[0, 0]]).powi(2)).exp())
            .sum::<f64>()
            / 3.0;
        let m = metrics_from(&pred, &y, None);
        assert!((m.log_likelihood - dens.ln()).abs() < 1e-12);
    }
}
