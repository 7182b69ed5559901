//! Unit pruning: drop unit `k` of layer `l` when the posterior puts more than
//! `p0` of its mass on `τ_k υ_l < δ`.
//!
//! The rule looks at the raw scale `τυ`, not the slab-regularized one: for
//! strongly shrunk units the two coincide, and the raw scale has a closed-form
//! log-normal law.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{effective_scale2, forward_batch, NetworkSpec, PriorKind};
use crate::scalar_dist::{lognormal_product_cdf, LogNormalParams};
use crate::trainer::{continue_training, Adam, TrainConfig, TrainState, UpdateMask};
use crate::gradient::ParamSchema;
use crate::variational::{HiddenPosterior, LayerPosterior, LogNormalFactor, Posterior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub delta: f64,
    pub p0: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { delta: 1e-3, p0: 0.9 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::Config("p0 must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }
}

/// `(P(τυ < δ), keep)` from the log-normal laws of `τ²` and `υ²`.
pub fn prune_decision(tau2: &LogNormalParams, upsilon2: &LogNormalParams, cfg: &PruneConfig) -> (f64, bool) {
    let cdf = lognormal_product_cdf(&tau2.sqrt(), &upsilon2.sqrt(), cfg.delta);
    (cdf, cdf <= cfg.p0)
}

/// `‖E[w_k]‖₂` for every unit of hidden layer `hp`, estimated with
/// `samples` draws of the scales. The weight direction is integrated in
/// closed form given the scales (exactly, since `β` is Gaussian given `ν`),
/// which leaves only the scale coupling through `c` to Monte Carlo.
pub fn expected_weight_norms(
    prior: PriorKind,
    hp: &HiddenPosterior,
    c2: &LogNormalFactor,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mean = hp.weights.mean();
    let (m, n) = mean.dim();
    if !prior.has_scales() {
        return Ok(mean.map_axis(Axis(0), |c| c.dot(&c).sqrt()));
    }
    let tau = hp.tau2_marginals();
    let ups = hp.upsilon2.params();
    let c2p = c2.params();
    // E[w_k] = E[s_k] M_k + E[s_k (ν_k - ν̄_k)] · coef  (structured only)
    let mut e_scale = Array1::<f64>::zeros(n);
    let mut e_scale_dev = Array1::<f64>::zeros(n);
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    for _ in 0..samples {
        let u2 = ups.sample(normal());
        let c2s = c2p.sample(normal());
        for k in 0..n {
            let z = normal();
            let t2 = tau[k].sample(z);
            let s = effective_scale2(prior, t2, u2, c2s).sqrt();
            e_scale[k] += s;
            // ν - ν̄ = 0.5 (ln τ² - E ln τ²) = 0.5 σ z
            e_scale_dev[k] += s * 0.5 * tau[k].sigma * z;
        }
    }
    e_scale /= samples as f64;
    e_scale_dev /= samples as f64;
    let mut w = mean.clone();
    for k in 0..n {
        w.column_mut(k).mapv_inplace(|v| v * e_scale[k]);
    }
    if let LayerPosterior::Structured {
        log_psi_nu, h, h_nu, ..
    } = &hp.weights
    {
        let u_nu = log_psi_nu.exp() + h_nu * h_nu;
        let coef = h * (*h_nu / u_nu);
        for k in 0..n {
            for i in 0..m {
                w[[i, k]] += e_scale_dev[k] * coef[i];
            }
        }
    }
    Ok(w.map_axis(Axis(0), |c| c.dot(&c).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub cdf: f64,
    pub keep: bool,
    pub weight_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneReport {
    pub units: Vec<UnitReport>,
    pub kept: usize,
    pub total: usize,
    pub compression_rate: f64,
    /// Set when every unit fell below the threshold and this one (the
    /// largest-scale unit) was kept anyway.
    pub forced_keep: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PruneConfig,
    pub layers: Vec<LayerPruneReport>,
    pub kept: usize,
    pub total: usize,
    pub compression_rate: f64,
}

impl PruneReport {
    pub fn kept_units(&self, l: usize) -> Vec<usize> {
        self.layers[l]
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.keep)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Applies the rule to every hidden unit and computes shrinkage diagnostics.
pub fn prune_report(
    spec: &NetworkSpec,
    posterior: &Posterior,
    cfg: &PruneConfig,
    norm_samples: usize,
    rng: &mut impl Rng,
) -> Result<PruneReport> {
    cfg.validate()?;
    posterior.validate(spec)?;
    let mut layers = Vec::new();
    for hp in &posterior.hidden {
        let norms = expected_weight_norms(spec.prior, hp, &posterior.globals.c2, norm_samples, rng)?;
        let tau = hp.tau2_marginals();
        let ups = hp.upsilon2.params();
        let mut units: Vec<UnitReport> = (0..hp.width())
            .map(|k| {
                let (cdf, keep) = if spec.prior.has_scales() {
                    prune_decision(&tau[k], &ups, cfg)
                } else {
                    (0.0, true)
                };
                UnitReport {
                    cdf,
                    keep,
                    weight_norm: norms[k],
                }
            })
            .collect();
        let mut forced_keep = None;
        if units.iter().all(|u| !u.keep) {
            let best = (0..units.len())
                .max_by(|&a, &b| tau[a].mu.total_cmp(&tau[b].mu))
                .expect("layer has units");
            units[best].keep = true;
            forced_keep = Some(best);
        }
        let kept = units.iter().filter(|u| u.keep).count();
        let total = units.len();
        layers.push(LayerPruneReport {
            units,
            kept,
            total,
            compression_rate: kept as f64 / total as f64,
            forced_keep,
        });
    }
    let kept = layers.iter().map(|l| l.kept).sum();
    let total = layers.iter().map(|l| l.total).sum::<usize>();
    Ok(PruneReport {
        config: *cfg,
        layers,
        kept,
        total,
        compression_rate: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
    })
}

fn select_cols(a: &Array2<f64>, keep: &[usize]) -> Array2<f64> {
    a.select(Axis(1), keep)
}

/// Input rows to keep: the surviving units plus the trailing bias row.
fn row_index(keep: &[usize], bias: usize) -> Vec<usize> {
    keep.iter().copied().chain(std::iter::once(bias)).collect()
}

fn select_layer_cols(w: &LayerPosterior, keep: &[usize]) -> LayerPosterior {
    match w {
        LayerPosterior::Factorized { mean, log_sigma } => LayerPosterior::Factorized {
            mean: select_cols(mean, keep),
            log_sigma: select_cols(log_sigma, keep),
        },
        LayerPosterior::FactorizedTied { mean } => LayerPosterior::FactorizedTied {
            mean: select_cols(mean, keep),
        },
        LayerPosterior::SemiStructured { mean, log_psi, h, log_v } => LayerPosterior::SemiStructured {
            mean: select_cols(mean, keep),
            log_psi: log_psi.clone(),
            h: h.clone(),
            log_v: log_v.select(Axis(0), keep),
        },
        LayerPosterior::Structured {
            mean,
            nu_mean,
            log_psi,
            log_psi_nu,
            h,
            h_nu,
            log_v,
        } => LayerPosterior::Structured {
            mean: select_cols(mean, keep),
            nu_mean: nu_mean.select(Axis(0), keep),
            log_psi: log_psi.clone(),
            log_psi_nu: *log_psi_nu,
            h: h.clone(),
            h_nu: *h_nu,
            log_v: log_v.select(Axis(0), keep),
        },
    }
}

fn select_layer_rows(w: &LayerPosterior, rows: &[usize]) -> LayerPosterior {
    let r = |a: &Array2<f64>| a.select(Axis(0), rows);
    match w {
        LayerPosterior::Factorized { mean, log_sigma } => LayerPosterior::Factorized {
            mean: r(mean),
            log_sigma: r(log_sigma),
        },
        LayerPosterior::FactorizedTied { mean } => LayerPosterior::FactorizedTied { mean: r(mean) },
        LayerPosterior::SemiStructured { mean, log_psi, h, log_v } => LayerPosterior::SemiStructured {
            mean: r(mean),
            log_psi: log_psi.select(Axis(0), rows),
            h: h.select(Axis(0), rows),
            log_v: log_v.clone(),
        },
        LayerPosterior::Structured {
            mean,
            nu_mean,
            log_psi,
            log_psi_nu,
            h,
            h_nu,
            log_v,
        } => LayerPosterior::Structured {
            mean: r(mean),
            nu_mean: nu_mean.clone(),
            log_psi: log_psi.select(Axis(0), rows),
            log_psi_nu: *log_psi_nu,
            h: h.select(Axis(0), rows),
            h_nu: *h_nu,
            log_v: log_v.clone(),
        },
    }
}

/// A model after [`apply_prune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedModel {
    pub spec: NetworkSpec,
    pub posterior: Posterior,
    /// Largest absolute change of the plug-in prediction over 100 random
    /// standard-normal inputs.
    pub max_prediction_shift: f64,
}

/// Plug-in network: weight means times the median of every scale.
pub fn plugin_weights(spec: &NetworkSpec, posterior: &Posterior) -> Vec<Array2<f64>> {
    let c2 = posterior.globals.c2.mu.exp();
    let mut out: Vec<Array2<f64>> = posterior
        .hidden
        .iter()
        .map(|hp| {
            let tau = hp.tau2_marginals();
            let u2 = hp.upsilon2.mu.exp();
            let mut w = hp.weights.mean().clone();
            if spec.prior.has_scales() {
                for (k, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
                    let s = effective_scale2(spec.prior, tau[k].mu.exp(), u2, c2).sqrt();
                    col.mapv_inplace(|v| v * s);
                }
            }
            w
        })
        .collect();
    out.push(posterior.globals.output_mean.clone());
    out
}

/// Removes the dropped units: their columns in the layer and the matching
/// input rows of the next layer (or of the output weights).
pub fn apply_prune(
    spec: &NetworkSpec,
    posterior: &Posterior,
    report: &PruneReport,
    rng: &mut impl Rng,
) -> Result<PrunedModel> {
    posterior.validate(spec)?;
    if report.layers.len() != posterior.hidden.len()
        || report
            .layers
            .iter()
            .zip(&posterior.hidden)
            .any(|(r, h)| r.total != h.width())
    {
        return Err(Error::shape("prune report was produced from a different model"));
    }
    let mut new = posterior.clone();
    let mut new_spec = spec.clone();
    for l in 0..new.hidden.len() {
        let keep = report.kept_units(l);
        if keep.is_empty() {
            return Err(Error::invalid(format!("report drops every unit of layer {l}")));
        }
        let hp = &mut new.hidden[l];
        hp.weights = select_layer_cols(&hp.weights, &keep);
        if let Some(t) = &mut hp.tau2 {
            t.mu = t.mu.select(Axis(0), &keep);
            t.log_sigma = t.log_sigma.select(Axis(0), &keep);
        }
        hp.lambda = keep.iter().map(|&k| hp.lambda[k]).collect();
        let rows = row_index(&keep, report.layers[l].total);
        if l + 1 < new.hidden.len() {
            let next = &mut new.hidden[l + 1];
            next.weights = select_layer_rows(&next.weights, &rows);
        } else {
            let g = &mut new.globals;
            g.output_mean = g.output_mean.select(Axis(0), &rows);
            g.output_log_sigma = g.output_log_sigma.select(Axis(0), &rows);
        }
        new_spec.layer_widths[l + 1] = keep.len();
    }
    new.validate(&new_spec)?;

    let x = Array2::from_shape_fn((100, spec.input_dim()), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let before = forward_batch(spec.nonlinearity, &plugin_weights(spec, posterior), x.view());
    let after = forward_batch(new_spec.nonlinearity, &plugin_weights(&new_spec, &new), x.view());
    let shift = (&before - &after).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(PrunedModel {
        spec: new_spec,
        posterior: new,
        max_prediction_shift: shift,
    })
}

/// Adam on the weight means only; every variance, scale and auxiliary stays
/// where it is.
pub fn fine_tune(
    spec: &NetworkSpec,
    posterior: &Posterior,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<Posterior> {
    let len = ParamSchema::of(posterior, spec.prior).len();
    let mut state = TrainState {
        posterior: posterior.clone(),
        adam: Adam::new(len),
        iteration: 0,
        elbo_trace: Vec::new(),
    };
    if config.iterations > 0 {
        continue_training(&mut state, spec, config, data, config.iterations, UpdateMask::MeansOnly)?;
    }
    Ok(state.posterior)
}
