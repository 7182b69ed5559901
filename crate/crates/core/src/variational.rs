//! Variational families, pre-activation distributions and the Monte-Carlo
//! evidence lower bound.
//!
//! The ELBO is assembled on a [`Tape`] so that its value and its gradient
//! come from the same code. Only the likelihood is estimated by sampling;
//! every prior cross-term and entropy is closed form.
//!
//! Parameters are stored unconstrained: standard deviations, `Ψ` and `V`
//! live in log space, means and `h` are free.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lowrank::{DiagRankOne, MatrixNormalStructured};
use crate::model::{NetworkSpec, Nonlinearity, PriorKind};
use crate::scalar_dist::{
    aux_prior_term, LogNormalParams, InvGammaParams, HALF_LN_2PI, HALF_LN_2PI_E,
};
use crate::tape::{Tape, Var};

/// The four variational families for the non-centered hidden weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Factorized,
    FactorizedTied,
    SemiStructured,
    Structured,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Factorized,
        Family::FactorizedTied,
        Family::SemiStructured,
        Family::Structured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Factorized => "factorized",
            Family::FactorizedTied => "factorized_tied",
            Family::SemiStructured => "semi_structured",
            Family::Structured => "structured",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variational family {s:?}")))
    }
}

/// Log-normal factor stored as `(mu, ln sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFactor {
    pub mu: f64,
    pub log_sigma: f64,
}

impl LogNormalFactor {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self {
            mu,
            log_sigma: sigma.ln(),
        }
    }

    pub fn params(&self) -> LogNormalParams {
        LogNormalParams::from_log_sigma(self.mu, self.log_sigma)
    }
}

/// Independent log-normal factors, one per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub mu: Array1<f64>,
    pub log_sigma: Array1<f64>,
}

impl ScaleFactors {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn get(&self, k: usize) -> LogNormalParams {
        LogNormalParams::from_log_sigma(self.mu[k], self.log_sigma[k])
    }
}

/// Variational law of one hidden layer's non-centered weights `β_l`
/// (`m×n`, `m = K_{l-1}+1` rows including the bias row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum LayerPosterior {
    Factorized {
        mean: Array2<f64>,
        log_sigma: Array2<f64>,
    },
    /// Unit variances.
    FactorizedTied { mean: Array2<f64> },
    /// `MN(mean, diag(psi) + h hᵀ, diag(v))` over `β_l` alone.
    SemiStructured {
        mean: Array2<f64>,
        log_psi: Array1<f64>,
        h: Array1<f64>,
        log_v: Array1<f64>,
    },
    /// `MN` over `B_l = [β_l; νᵀ]` with `ν_k = ln τ_k`. The row covariance
    /// has `m+1` coordinates; its last one (`psi_nu`, `h_nu`) belongs to `ν`.
    Structured {
        mean: Array2<f64>,
        nu_mean: Array1<f64>,
        log_psi: Array1<f64>,
        log_psi_nu: f64,
        h: Array1<f64>,
        h_nu: f64,
        log_v: Array1<f64>,
    },
}

impl LayerPosterior {
    pub fn family(&self) -> Family {
        match self {
            LayerPosterior::Factorized { .. } => Family::Factorized,
            LayerPosterior::FactorizedTied { .. } => Family::FactorizedTied,
            LayerPosterior::SemiStructured { .. } => Family::SemiStructured,
            LayerPosterior::Structured { .. } => Family::Structured,
        }
    }

    pub fn mean(&self) -> &Array2<f64> {
        match self {
            LayerPosterior::Factorized { mean, .. }
            | LayerPosterior::FactorizedTied { mean }
            | LayerPosterior::SemiStructured { mean, .. }
            | LayerPosterior::Structured { mean, .. } => mean,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean().dim()
    }

    /// The layer's matrix-normal, for the two structured families. For
    /// `Structured` the `ν` row is appended last.
    pub fn matrix_normal(&self) -> Option<MatrixNormalStructured> {
        match self {
            LayerPosterior::SemiStructured {
                mean,
                log_psi,
                h,
                log_v,
            } => Some(MatrixNormalStructured {
                mean: mean.clone(),
                row_cov: DiagRankOne {
                    psi: log_psi.mapv(f64::exp),
                    h: h.clone(),
                },
                col_var: log_v.mapv(f64::exp),
            }),
            LayerPosterior::Structured {
                mean,
                nu_mean,
                log_psi,
                log_psi_nu,
                h,
                h_nu,
                log_v,
            } => {
                let (m, n) = mean.dim();
                let mut full = Array2::zeros((m + 1, n));
                full.slice_mut(s![..m, ..]).assign(mean);
                full.row_mut(m).assign(nu_mean);
                let mut psi = Array1::zeros(m + 1);
                psi.slice_mut(s![..m]).assign(&log_psi.mapv(f64::exp));
                psi[m] = log_psi_nu.exp();
                let mut hh = Array1::zeros(m + 1);
                hh.slice_mut(s![..m]).assign(h);
                hh[m] = *h_nu;
                Some(MatrixNormalStructured {
                    mean: full,
                    row_cov: DiagRankOne { psi, h: hh },
                    col_var: log_v.mapv(f64::exp),
                })
            }
            _ => None,
        }
    }

    /// Marginal variance of each `β` entry.
    pub fn weight_variances(&self) -> Array2<f64> {
        let (m, n) = self.shape();
        match self {
            LayerPosterior::Factorized { log_sigma, .. } => log_sigma.mapv(|l| (2.0 * l).exp()),
            LayerPosterior::FactorizedTied { .. } => Array2::ones((m, n)),
            LayerPosterior::SemiStructured { log_psi, h, log_v, .. }
            | LayerPosterior::Structured { log_psi, h, log_v, .. } => {
                Array2::from_shape_fn((m, n), |(i, j)| {
                    (log_psi[i].exp() + h[i] * h[i]) * log_v[j].exp()
                })
            }
        }
    }
}

/// Everything variational about one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenPosterior {
    pub weights: LayerPosterior,
    /// `q(ln τ²_k)`; absent for `Structured`, which carries `τ` in its joint.
    pub tau2: Option<ScaleFactors>,
    pub upsilon2: LogNormalFactor,
    pub lambda: Vec<InvGammaParams>,
    pub vartheta: InvGammaParams,
}

impl HiddenPosterior {
    pub fn width(&self) -> usize {
        self.weights.shape().1
    }

    /// Log-normal law of `τ²_k` for every unit.
    pub fn tau2_marginals(&self) -> Vec<LogNormalParams> {
        match (&self.weights, &self.tau2) {
            (
                LayerPosterior::Structured {
                    nu_mean,
                    log_psi_nu,
                    h_nu,
                    log_v,
                    ..
                },
                _,
            ) => {
                let u_nu = log_psi_nu.exp() + h_nu * h_nu;
                nu_mean
                    .iter()
                    .zip(log_v)
                    .map(|(m, lv)| LogNormalParams {
                        mu: 2.0 * m,
                        sigma: 2.0 * (lv.exp() * u_nu).sqrt(),
                    })
                    .collect()
            }
            (_, Some(t)) => (0..t.len()).map(|k| t.get(k)).collect(),
            (_, None) => Vec::new(),
        }
    }
}

/// Non-layer factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPosteriors {
    /// Output weights, `(K_{L-1}+1)×K_L`, bias row last.
    pub output_mean: Array2<f64>,
    pub output_log_sigma: Array2<f64>,
    pub kappa2: LogNormalFactor,
    pub c2: LogNormalFactor,
    /// Noise precision.
    pub gamma: LogNormalFactor,
    pub rho_kappa: InvGammaParams,
}

/// The full variational state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub family: Family,
    pub hidden: Vec<HiddenPosterior>,
    pub globals: GlobalPosteriors,
}

fn random_unit(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(len, |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl Posterior {
    /// Initial state. Weight means are drawn with standard deviation
    /// `1/sqrt(fan_in)`; unit and layer scales start at one, the noise
    /// precision at 100; auxiliaries sit at their fixed points.
    pub fn init(spec: &NetworkSpec, family: Family, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if family == Family::Structured && !spec.prior.has_scales() {
            return Err(Error::Config(
                "the structured family couples weights with unit scales; it needs a horseshoe prior".into(),
            ));
        }
        let mut hidden = Vec::with_capacity(spec.num_hidden());
        for l in 0..spec.num_hidden() {
            let (m, n) = spec.hidden_shape(l);
            let std = 1.0 / (m as f64).sqrt();
            let mean = Array2::from_shape_fn((m, n), |_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            });
            let weights = match family {
                Family::Factorized => LayerPosterior::Factorized {
                    mean,
                    log_sigma: Array2::from_elem((m, n), 0.1f64.ln()),
                },
                Family::FactorizedTied => LayerPosterior::FactorizedTied { mean },
                Family::SemiStructured => LayerPosterior::SemiStructured {
                    mean,
                    log_psi: Array1::from_elem(m, -(m as f64).ln()),
                    h: random_unit(m, rng) * 0.01,
                    log_v: Array1::from_elem(n, -(n as f64).ln()),
                },
                Family::Structured => {
                    let h = random_unit(m + 1, rng) * 0.01;
                    LayerPosterior::Structured {
                        mean,
                        nu_mean: Array1::zeros(n),
                        log_psi: Array1::from_elem(m, -((m + 1) as f64).ln()),
                        log_psi_nu: -((m + 1) as f64).ln(),
                        h: h.slice(s![..m]).to_owned(),
                        h_nu: h[m],
                        log_v: Array1::from_elem(n, -(n as f64).ln()),
                    }
                }
            };
            // scales start at one: starting them small lets the shrinkage
            // win before the data has been seen and every unit switches off
            let tau2 = (family != Family::Structured).then(|| ScaleFactors {
                mu: Array1::zeros(n),
                log_sigma: Array1::from_elem(n, 0.1f64.ln()),
            });
            hidden.push(HiddenPosterior {
                weights,
                tau2,
                upsilon2: LogNormalFactor::new(0.0, 0.1),
                lambda: vec![InvGammaParams { shape: 1.0, rate: 1.0 }; n],
                vartheta: InvGammaParams { shape: 1.0, rate: 1.0 },
            });
        }
        let (m, k) = spec.output_shape();
        let std = 1.0 / (m as f64).sqrt();
        let output_mean = Array2::from_shape_fn((m, k), |_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        let c2_mean = if spec.c_a > 1.0 {
            spec.c_b / (spec.c_a - 1.0)
        } else {
            spec.c_b / spec.c_a
        };
        let mut post = Posterior {
            family,
            hidden,
            globals: GlobalPosteriors {
                output_mean,
                output_log_sigma: Array2::from_elem((m, k), (0.1 * std).ln()),
                kappa2: LogNormalFactor::new(0.0, 0.1),
                c2: LogNormalFactor::new(c2_mean.ln(), 0.1),
                // noise starts at a tenth of the (standardized) target scale so
                // the data term is not explained away as noise before the
                // network has had a chance to fit
                gamma: LogNormalFactor::new(100f64.ln(), 0.1),
                rho_kappa: InvGammaParams { shape: 1.0, rate: 1.0 },
            },
        };
        crate::trainer::fixed_point_sweep(&mut post, spec);
        Ok(post)
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.hidden.len() != spec.num_hidden() {
            return Err(Error::shape("posterior and spec disagree on depth"));
        }
        for (l, h) in self.hidden.iter().enumerate() {
            if h.weights.family() != self.family {
                return Err(Error::shape(format!("layer {l} has a mismatched family")));
            }
            let (m, n) = spec.hidden_shape(l);
            if h.weights.shape() != (m, n) || h.lambda.len() != n {
                return Err(Error::shape(format!(
                    "layer {l}: posterior is {:?}, spec wants ({m}, {n})",
                    h.weights.shape()
                )));
            }
        }
        if self.globals.output_mean.dim() != spec.output_shape() {
            return Err(Error::shape("output layer shape mismatch"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter blocks

/// Identifies one trainable parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    WeightMean(usize),
    WeightLogSigma(usize),
    LogPsi(usize),
    LogPsiNu(usize),
    RankOne(usize),
    RankOneNu(usize),
    LogV(usize),
    NuMean(usize),
    TauMu(usize),
    TauLogSigma(usize),
    UpsilonMu(usize),
    UpsilonLogSigma(usize),
    OutputMean,
    OutputLogSigma,
    KappaMu,
    KappaLogSigma,
    SlabMu,
    SlabLogSigma,
    PrecisionMu,
    PrecisionLogSigma,
}

impl ParamKey {
    /// Means of the (non-centered) weights; the only blocks fine-tuning moves.
    pub fn is_weight_mean(self) -> bool {
        matches!(self, ParamKey::WeightMean(_) | ParamKey::OutputMean)
    }

    /// Blocks of the row/column covariance that unit-norm projection acts on.
    pub fn name(self) -> String {
        match self {
            ParamKey::WeightMean(l) => format!("layer{l}.weight_mean"),
            ParamKey::WeightLogSigma(l) => format!("layer{l}.weight_log_sigma"),
            ParamKey::LogPsi(l) => format!("layer{l}.log_psi"),
            ParamKey::LogPsiNu(l) => format!("layer{l}.log_psi_nu"),
            ParamKey::RankOne(l) => format!("layer{l}.h"),
            ParamKey::RankOneNu(l) => format!("layer{l}.h_nu"),
            ParamKey::LogV(l) => format!("layer{l}.log_v"),
            ParamKey::NuMean(l) => format!("layer{l}.nu_mean"),
            ParamKey::TauMu(l) => format!("layer{l}.tau2_mu"),
            ParamKey::TauLogSigma(l) => format!("layer{l}.tau2_log_sigma"),
            ParamKey::UpsilonMu(l) => format!("layer{l}.upsilon2_mu"),
            ParamKey::UpsilonLogSigma(l) => format!("layer{l}.upsilon2_log_sigma"),
            ParamKey::OutputMean => "output.mean".into(),
            ParamKey::OutputLogSigma => "output.log_sigma".into(),
            ParamKey::KappaMu => "kappa2.mu".into(),
            ParamKey::KappaLogSigma => "kappa2.log_sigma".into(),
            ParamKey::SlabMu => "c2.mu".into(),
            ParamKey::SlabLogSigma => "c2.log_sigma".into(),
            ParamKey::PrecisionMu => "gamma.mu".into(),
            ParamKey::PrecisionLogSigma => "gamma.log_sigma".into(),
        }
    }

    /// Whether the block is an unconstrained log-standard-deviation (or log
    /// variance-like) coordinate subject to the numerical floor.
    pub fn is_log_scale(self) -> bool {
        matches!(
            self,
            ParamKey::WeightLogSigma(_)
                | ParamKey::TauLogSigma(_)
                | ParamKey::UpsilonLogSigma(_)
                | ParamKey::OutputLogSigma
                | ParamKey::KappaLogSigma
                | ParamKey::SlabLogSigma
                | ParamKey::PrecisionLogSigma
        )
    }
}

/// A borrowed parameter array with the 2-D shape it takes on the tape.
pub struct BlockMut<'a> {
    pub key: ParamKey,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

fn mat(a: &mut Array2<f64>) -> (usize, usize, &mut [f64]) {
    // column selection can leave an array in column-major order
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
    let (r, c) = a.dim();
    (r, c, a.as_slice_mut().expect("standard layout"))
}

impl Posterior {
    /// Every trainable array active under `prior`, in a fixed order.
    pub fn blocks_mut(&mut self, prior: PriorKind) -> Vec<BlockMut<'_>> {
        let scales = prior.has_scales();
        let mut out = Vec::new();
        let mut push = |key, shape, data| out.push(BlockMut { key, shape, data });
        for (l, h) in self.hidden.iter_mut().enumerate() {
            match &mut h.weights {
                LayerPosterior::Factorized { mean, log_sigma } => {
                    let (r, c, d) = mat(mean);
                    push(ParamKey::WeightMean(l), (r, c), d);
                    let (r, c, d) = mat(log_sigma);
                    push(ParamKey::WeightLogSigma(l), (r, c), d);
                }
                LayerPosterior::FactorizedTied { mean } => {
                    let (r, c, d) = mat(mean);
                    push(ParamKey::WeightMean(l), (r, c), d);
                }
                LayerPosterior::SemiStructured {
                    mean,
                    log_psi,
                    h: hv,
                    log_v,
                } => {
                    let (r, c, d) = mat(mean);
                    push(ParamKey::WeightMean(l), (r, c), d);
                    let m = log_psi.len();
                    push(ParamKey::LogPsi(l), (m, 1), log_psi.as_slice_mut().unwrap());
                    push(ParamKey::RankOne(l), (m, 1), hv.as_slice_mut().unwrap());
                    let n = log_v.len();
                    push(ParamKey::LogV(l), (1, n), log_v.as_slice_mut().unwrap());
                }
                LayerPosterior::Structured {
                    mean,
                    nu_mean,
                    log_psi,
                    log_psi_nu,
                    h: hv,
                    h_nu,
                    log_v,
                } => {
                    let (r, c, d) = mat(mean);
                    push(ParamKey::WeightMean(l), (r, c), d);
                    let n = nu_mean.len();
                    push(ParamKey::NuMean(l), (1, n), nu_mean.as_slice_mut().unwrap());
                    let m = log_psi.len();
                    push(ParamKey::LogPsi(l), (m, 1), log_psi.as_slice_mut().unwrap());
                    push(ParamKey::LogPsiNu(l), (1, 1), std::slice::from_mut(log_psi_nu));
                    push(ParamKey::RankOne(l), (m, 1), hv.as_slice_mut().unwrap());
                    push(ParamKey::RankOneNu(l), (1, 1), std::slice::from_mut(h_nu));
                    push(ParamKey::LogV(l), (1, n), log_v.as_slice_mut().unwrap());
                }
            }
            if scales {
                if let Some(t) = &mut h.tau2 {
                    let n = t.mu.len();
                    push(ParamKey::TauMu(l), (1, n), t.mu.as_slice_mut().unwrap());
                    push(ParamKey::TauLogSigma(l), (1, n), t.log_sigma.as_slice_mut().unwrap());
                }
                push(ParamKey::UpsilonMu(l), (1, 1), std::slice::from_mut(&mut h.upsilon2.mu));
                push(
                    ParamKey::UpsilonLogSigma(l),
                    (1, 1),
                    std::slice::from_mut(&mut h.upsilon2.log_sigma),
                );
            }
        }
        let g = &mut self.globals;
        let (r, c, d) = mat(&mut g.output_mean);
        push(ParamKey::OutputMean, (r, c), d);
        let (r, c, d) = mat(&mut g.output_log_sigma);
        push(ParamKey::OutputLogSigma, (r, c), d);
        if scales {
            push(ParamKey::KappaMu, (1, 1), std::slice::from_mut(&mut g.kappa2.mu));
            push(ParamKey::KappaLogSigma, (1, 1), std::slice::from_mut(&mut g.kappa2.log_sigma));
        }
        if prior.has_slab() {
            push(ParamKey::SlabMu, (1, 1), std::slice::from_mut(&mut g.c2.mu));
            push(ParamKey::SlabLogSigma, (1, 1), std::slice::from_mut(&mut g.c2.log_sigma));
        }
        push(ParamKey::PrecisionMu, (1, 1), std::slice::from_mut(&mut g.gamma.mu));
        push(ParamKey::PrecisionLogSigma, (1, 1), std::slice::from_mut(&mut g.gamma.log_sigma));
        out
    }

    /// Puts every active parameter block on `tape` as a leaf.
    pub fn leaves(&self, prior: PriorKind, tape: &mut Tape) -> Leaves {
        let mut copy = self.clone();
        let map = copy
            .blocks_mut(prior)
            .into_iter()
            .map(|b| {
                let arr = Array2::from_shape_vec(b.shape, b.data.to_vec()).expect("block shape");
                (b.key, tape.leaf(arr))
            })
            .collect();
        Leaves { map }
    }
}

/// Tape handles for every parameter block.
pub struct Leaves {
    pub map: BTreeMap<ParamKey, Var>,
}

impl Leaves {
    pub fn get(&self, key: ParamKey) -> Var {
        *self
            .map
            .get(&key)
            .unwrap_or_else(|| panic!("parameter block {key:?} is not active"))
    }
}

// ---------------------------------------------------------------------------
// Noise

/// Standard-normal draws consumed by one hidden layer in one MC sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNoise {
    /// Unit scales (`ν` for the structured family), length `K_l`.
    pub tau: Array1<f64>,
    pub upsilon: f64,
    /// Pre-activations, `batch × K_l`.
    pub pre: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleNoise {
    pub hidden: Vec<LayerNoise>,
    pub c: f64,
    /// Output pre-activations, `batch × K_L`.
    pub output: Array2<f64>,
}

/// All randomness one ELBO evaluation consumes. Drawn in the same layout for
/// every family, so paired comparisons share random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboNoise {
    pub samples: Vec<SampleNoise>,
}

impl ElboNoise {
    pub fn draw(spec: &NetworkSpec, batch: usize, mc_samples: usize, rng: &mut impl Rng) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let samples = (0..mc_samples)
            .map(|_| {
                let hidden = (0..spec.num_hidden())
                    .map(|l| {
                        let n = spec.hidden_shape(l).1;
                        LayerNoise {
                            tau: Array1::from_shape_fn(n, |_| normal()),
                            upsilon: normal(),
                            pre: Array2::from_shape_fn((batch, n), |_| normal()),
                        }
                    })
                    .collect();
                let c = normal();
                let output = Array2::from_shape_fn((batch, spec.output_dim()), |_| normal());
                SampleNoise { hidden, c, output }
            })
            .collect();
        Self { samples }
    }

    pub fn zeros(spec: &NetworkSpec, batch: usize, mc_samples: usize) -> Self {
        let samples = (0..mc_samples)
            .map(|_| SampleNoise {
                hidden: (0..spec.num_hidden())
                    .map(|l| {
                        let n = spec.hidden_shape(l).1;
                        LayerNoise {
                            tau: Array1::zeros(n),
                            upsilon: 0.0,
                            pre: Array2::zeros((batch, n)),
                        }
                    })
                    .collect(),
                c: 0.0,
                output: Array2::zeros((batch, spec.output_dim())),
            })
            .collect();
        Self { samples }
    }

    pub fn batch_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.output.nrows())
    }
}

// ---------------------------------------------------------------------------
// Pre-activations outside the tape (single input vector)

/// Conditional pre-activation law `b = βᵀa | ν` for the structured family:
/// returns `(mean, variance)` per unit. `a` includes the trailing bias 1.
pub fn preactivation_dist_structured(
    layer: &LayerPosterior,
    nu_sample: ArrayView1<f64>,
    a: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let LayerPosterior::Structured { .. } = layer else {
        return Err(Error::invalid("layer is not structured"));
    };
    let mn = layer.matrix_normal().expect("structured");
    if a.len() != mn.rows() - 1 {
        return Err(Error::shape(format!(
            "input has length {}, layer expects {}",
            a.len(),
            mn.rows() - 1
        )));
    }
    let (mean, cov) = mn.condition_on_last_row(nu_sample)?;
    let mu_b = mean.t().dot(&a);
    let q = cov.quad_form(a)?;
    Ok((mu_b, mn.col_var.mapv(|v| q * v)))
}

/// `(mean, variance)` of `βᵀa` for the families whose `β` is independent of
/// the unit scales.
pub fn preactivation_dist_independent(layer: &LayerPosterior, a: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let (m, _) = layer.shape();
    if a.len() != m {
        return Err(Error::shape(format!("input has length {}, layer expects {m}", a.len())));
    }
    let mu_b = layer.mean().t().dot(&a);
    let var_b = match layer {
        LayerPosterior::Factorized { log_sigma, .. } => {
            let a2 = a.mapv(|v| v * v);
            log_sigma.mapv(|l| (2.0 * l).exp()).t().dot(&a2)
        }
        LayerPosterior::FactorizedTied { mean } => Array1::from_elem(mean.ncols(), a.dot(&a)),
        LayerPosterior::SemiStructured { .. } => {
            let mn = layer.matrix_normal().expect("semi-structured");
            let q = mn.row_cov.quad_form(a)?;
            mn.col_var.mapv(|v| q * v)
        }
        LayerPosterior::Structured { .. } => {
            return Err(Error::invalid("structured layers need a ν sample"));
        }
    };
    Ok((mu_b, var_b))
}

/// Noise for [`preactivation_sample`].
pub struct PreactivationNoise<'a> {
    pub tau: ArrayView1<'a, f64>,
    pub upsilon: f64,
    pub c: f64,
    pub pre: ArrayView1<'a, f64>,
}

/// One draw of the unit pre-activations `u = sqrt(τ̃²υ²) b` for input `a`:
/// scales first, then `b` from its (conditional) Gaussian.
pub fn preactivation_sample(
    spec: &NetworkSpec,
    layer: &HiddenPosterior,
    c2: &LogNormalFactor,
    a: ArrayView1<f64>,
    noise: &PreactivationNoise,
) -> Result<Array1<f64>> {
    let n = layer.width();
    let (mu_b, var_b, ln_tau2) = match &layer.weights {
        w @ LayerPosterior::Structured {
            nu_mean,
            log_psi_nu,
            h_nu,
            log_v,
            ..
        } => {
            let u_nu = log_psi_nu.exp() + h_nu * h_nu;
            let nu = Array1::from_shape_fn(n, |k| {
                nu_mean[k] + (log_v[k].exp() * u_nu).sqrt() * noise.tau[k]
            });
            let (mu, var) = preactivation_dist_structured(w, nu.view(), a)?;
            (mu, var, nu * 2.0)
        }
        w => {
            let (mu, var) = preactivation_dist_independent(w, a)?;
            let ln_tau2 = match &layer.tau2 {
                Some(t) => Array1::from_shape_fn(n, |k| t.mu[k] + t.log_sigma[k].exp() * noise.tau[k]),
                None => Array1::zeros(n),
            };
            (mu, var, ln_tau2)
        }
    };
    let ln_ups2 = layer.upsilon2.mu + layer.upsilon2.log_sigma.exp() * noise.upsilon;
    let ln_c2 = c2.mu + c2.log_sigma.exp() * noise.c;
    Ok(Array1::from_shape_fn(n, |k| {
        let mult2 = crate::model::effective_scale2(spec.prior, ln_tau2[k].exp(), ln_ups2.exp(), ln_c2.exp());
        let mult = mult2.sqrt();
        mult * mu_b[k] + mult * var_b[k].sqrt() * noise.pre[k]
    }))
}

// ---------------------------------------------------------------------------
// The objective on the tape

/// ELBO split by source; each field is a tape node (1×1).
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub total: Var,
    pub likelihood: Var,
    pub beta_prior: Var,
    pub unit_scale_prior: Var,
    pub layer_scale_prior: Var,
    pub output_prior: Var,
    pub slab_prior: Var,
    pub precision_prior: Var,
    pub entropy: Var,
    pub auxiliary: Var,
}

/// Numeric values of [`ElboVars`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub likelihood: f64,
    pub beta_prior: f64,
    pub unit_scale_prior: f64,
    pub layer_scale_prior: f64,
    pub output_prior: f64,
    pub slab_prior: f64,
    pub precision_prior: f64,
    pub entropy: f64,
    pub auxiliary: f64,
}

impl ElboVars {
    pub fn values(&self, t: &Tape) -> ElboTerms {
        ElboTerms {
            total: t.scalar(self.total),
            likelihood: t.scalar(self.likelihood),
            beta_prior: t.scalar(self.beta_prior),
            unit_scale_prior: t.scalar(self.unit_scale_prior),
            layer_scale_prior: t.scalar(self.layer_scale_prior),
            output_prior: t.scalar(self.output_prior),
            slab_prior: t.scalar(self.slab_prior),
            precision_prior: t.scalar(self.precision_prior),
            entropy: t.scalar(self.entropy),
            auxiliary: t.scalar(self.auxiliary),
        }
    }
}

impl ElboTerms {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.likelihood,
            self.beta_prior,
            self.unit_scale_prior,
            self.layer_scale_prior,
            self.output_prior,
            self.slab_prior,
            self.precision_prior,
            self.entropy,
            self.auxiliary,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Inputs to one objective evaluation.
pub struct ElboInput<'a> {
    pub spec: &'a NetworkSpec,
    pub posterior: &'a Posterior,
    pub batch: &'a Dataset,
    /// Size of the full training set (the likelihood is scaled by
    /// `n_total / |batch|`).
    pub n_total: usize,
    pub noise: &'a ElboNoise,
}

/// Stochastic tape nodes for one hidden layer and one MC sample.
struct LayerSample {
    /// Input to the next layer, bias column appended.
    next: Var,
}

/// Builds the full objective on `tape`.
pub fn build_elbo(tape: &mut Tape, leaves: &Leaves, input: &ElboInput) -> Result<ElboVars> {
    let spec = input.spec;
    let post = input.posterior;
    post.validate(spec)?;
    let batch = input.batch;
    if input.noise.samples.is_empty() {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    if !batch.is_empty() && input.noise.batch_len() != batch.len() {
        return Err(Error::shape(format!(
            "noise drawn for batch of {}, got {}",
            input.noise.batch_len(),
            batch.len()
        )));
    }
    let prior = spec.prior;
    let zero = tape.constant(0.0);

    // ---- likelihood: Monte Carlo over the network, closed form over γ
    let likelihood = if batch.is_empty() {
        zero
    } else {
        let x = tape.leaf(batch.x.clone());
        let x1 = tape.append_ones(x);
        let y = tape.leaf(batch.y.clone());
        let g_mu = leaves.get(ParamKey::PrecisionMu);
        let g_ls = leaves.get(ParamKey::PrecisionLogSigma);
        let g_var = {
            let t2 = tape.scale(g_ls, 2.0);
            let e = tape.exp(t2);
            tape.scale(e, 0.5)
        };
        let mean_gamma = {
            let s = tape.add(g_mu, g_var);
            tape.exp(s)
        };
        let mut sq_sums = Vec::with_capacity(input.noise.samples.len());
        for sample in &input.noise.samples {
            let f = network_output(tape, leaves, input, x1, sample)?;
            let r = tape.sub(y, f);
            let r2 = tape.square(r);
            sq_sums.push(tape.sum(r2));
        }
        let total_sq = tape.add_all(&sq_sums);
        let s = input.noise.samples.len() as f64;
        let count = batch.y.len() as f64;
        let scale = input.n_total as f64 / batch.len() as f64;
        // per observation: 0.5 E[ln γ] - 0.5 ln 2π - 0.5 E[γ] r²
        let quad = tape.mul(mean_gamma, total_sq);
        let quad = tape.scale(quad, -0.5 / s);
        let lg = tape.scale(g_mu, 0.5 * count);
        let lg = tape.shift(lg, -HALF_LN_2PI * count);
        let per_batch = tape.add(quad, lg);
        tape.scale(per_batch, scale)
    };

    // ---- priors and entropies
    let mut beta_prior = Vec::new();
    let mut unit_prior = Vec::new();
    let mut layer_prior = Vec::new();
    let mut entropy = Vec::new();
    let mut aux_const = 0.0;

    for (l, hp) in post.hidden.iter().enumerate() {
        let (m, n) = hp.weights.shape();
        let wm = leaves.get(ParamKey::WeightMean(l));
        let wm2 = tape.square(wm);
        let sum_mean2 = tape.sum(wm2);
        let count = (m * n) as f64;
        // E[Σ β²] = Σ mean² + Σ var
        let sum_var = match &hp.weights {
            LayerPosterior::Factorized { .. } => {
                let ls = leaves.get(ParamKey::WeightLogSigma(l));
                let ls2 = tape.scale(ls, 2.0);
                let v = tape.exp(ls2);
                let sv = tape.sum(v);
                let sls = tape.sum(ls);
                let ent = tape.shift(sls, HALF_LN_2PI_E * count);
                entropy.push(ent);
                sv
            }
            LayerPosterior::FactorizedTied { .. } => {
                entropy.push(tape.constant(HALF_LN_2PI_E * count));
                tape.constant(count)
            }
            LayerPosterior::SemiStructured { .. } | LayerPosterior::Structured { .. } => {
                let structured = matches!(hp.weights, LayerPosterior::Structured { .. });
                let lpsi = leaves.get(ParamKey::LogPsi(l));
                let h = leaves.get(ParamKey::RankOne(l));
                let lv = leaves.get(ParamKey::LogV(l));
                let psi = tape.exp(lpsi);
                let h2 = tape.square(h);
                let tr_u = {
                    let a = tape.sum(psi);
                    let b = tape.sum(h2);
                    tape.add(a, b)
                };
                let v = tape.exp(lv);
                let tr_v = tape.sum(v);
                let sum_var = tape.mul(tr_u, tr_v);

                // entropy of the matrix-normal over all rows it covers
                let rows = if structured { m + 1 } else { m } as f64;
                let neg_lpsi = tape.neg(lpsi);
                let inv_psi = tape.exp(neg_lpsi);
                let ratio = tape.mul(h2, inv_psi);
                let mut ratio_sum = tape.sum(ratio);
                let mut sum_lpsi = tape.sum(lpsi);
                if structured {
                    let lpn = leaves.get(ParamKey::LogPsiNu(l));
                    let hn = leaves.get(ParamKey::RankOneNu(l));
                    let hn2 = tape.square(hn);
                    let neg = tape.neg(lpn);
                    let ip = tape.exp(neg);
                    let r = tape.mul(hn2, ip);
                    ratio_sum = tape.add(ratio_sum, r);
                    sum_lpsi = tape.add(sum_lpsi, lpn);
                }
                let ln1p = {
                    let s = tape.shift(ratio_sum, 1.0);
                    tape.ln(s)
                };
                let logdet_u = tape.add(sum_lpsi, ln1p);
                let sum_lv = tape.sum(lv);
                let a = tape.scale(sum_lv, 0.5 * rows);
                let b = tape.scale(logdet_u, 0.5 * n as f64);
                let ab = tape.add(a, b);
                let mut ent = tape.shift(ab, HALF_LN_2PI_E * rows * n as f64);
                if structured {
                    // change of variables ν = ln τ  →  τ²: adds E[ln 2τ²] per unit
                    let nu = leaves.get(ParamKey::NuMean(l));
                    let s = tape.sum(nu);
                    let jac = tape.scale(s, 2.0);
                    let jac = tape.shift(jac, LN_2 * n as f64);
                    ent = tape.add(ent, jac);
                }
                entropy.push(ent);
                sum_var
            }
        };
        let e_sq = tape.add(sum_mean2, sum_var);
        let bp = tape.scale(e_sq, -0.5);
        beta_prior.push(tape.shift(bp, -HALF_LN_2PI * count));

        if prior.has_scales() {
            // unit scales: E[ln InvGamma(τ² | 1/2, 1/λ)] + E[ln InvGamma(λ | 1/2, 1/b0²)]
            let (e_ln_tau2, e_inv_tau2) = tau2_moments(tape, leaves, hp, l);
            let lam_log = Array2::from_shape_fn((1, n), |(_, k)| hp.lambda[k].moments().mean_log);
            let lam_inv = Array2::from_shape_fn((1, n), |(_, k)| hp.lambda[k].moments().mean_inverse);
            let lam_inv = tape.leaf(lam_inv);
            let cross = tape.mul(lam_inv, e_inv_tau2);
            let cross = tape.sum(cross);
            let s_ln = tape.sum(e_ln_tau2);
            let s_ln = tape.scale(s_ln, -1.5);
            let tp = tape.sub(s_ln, cross);
            let constant = -0.5 * lam_log.sum() - 0.5 * PI.ln() * n as f64;
            unit_prior.push(tape.shift(tp, constant));
            for lam in &hp.lambda {
                aux_const += aux_prior_term(lam, spec.b0) + lam.moments().entropy;
            }

            if hp.tau2.is_some() {
                // log-normal entropy of each τ²
                let mu = leaves.get(ParamKey::TauMu(l));
                let ls = leaves.get(ParamKey::TauLogSigma(l));
                let a = tape.add(mu, ls);
                let s = tape.sum(a);
                entropy.push(tape.shift(s, HALF_LN_2PI_E * n as f64));
            }

            let ups = lognormal_scalar(tape, leaves, ParamKey::UpsilonMu(l), ParamKey::UpsilonLogSigma(l));
            layer_prior.push(cross_term_on_tape(tape, &ups, &hp.vartheta));
            entropy.push(ups.entropy(tape));
            aux_const += aux_prior_term(&hp.vartheta, spec.bg) + hp.vartheta.moments().entropy;
        }
    }

    // output weights
    let g = &post.globals;
    let om = leaves.get(ParamKey::OutputMean);
    let ols = leaves.get(ParamKey::OutputLogSigma);
    let out_count = g.output_mean.len() as f64;
    let e_sq = {
        let m2 = tape.square(om);
        let ls2 = tape.scale(ols, 2.0);
        let v = tape.exp(ls2);
        let s = tape.add(m2, v);
        tape.sum(s)
    };
    let out_ent = {
        let s = tape.sum(ols);
        tape.shift(s, HALF_LN_2PI_E * out_count)
    };
    entropy.push(out_ent);
    let output_prior = if prior.has_scales() {
        let kappa = lognormal_scalar(tape, leaves, ParamKey::KappaMu, ParamKey::KappaLogSigma);
        // Σ E[ln N(w | 0, κ²)]
        let q = tape.mul(e_sq, kappa.mean_inv);
        let q = tape.scale(q, -0.5);
        let lk = tape.scale(kappa.mu, -0.5 * out_count);
        let w_term = tape.add(q, lk);
        let w_term = tape.shift(w_term, -HALF_LN_2PI * out_count);
        let r = cross_term_on_tape(tape, &kappa, &g.rho_kappa);
        entropy.push(kappa.entropy(tape));
        aux_const += aux_prior_term(&g.rho_kappa, spec.b_kappa) + g.rho_kappa.moments().entropy;
        tape.add(w_term, r)
    } else {
        let q = tape.scale(e_sq, -0.5);
        tape.shift(q, -HALF_LN_2PI * out_count)
    };

    let slab_prior = if prior.has_slab() {
        let c2 = lognormal_scalar(tape, leaves, ParamKey::SlabMu, ParamKey::SlabLogSigma);
        entropy.push(c2.entropy(tape));
        // E[ln InvGamma(c² | c_a, c_b)]
        let a = tape.scale(c2.mu, -(spec.c_a + 1.0));
        let b = tape.scale(c2.mean_inv, -spec.c_b);
        let ab = tape.add(a, b);
        tape.shift(ab, spec.c_a * spec.c_b.ln() - ln_gamma(spec.c_a))
    } else {
        zero
    };

    let precision_prior = {
        let gam = lognormal_scalar(tape, leaves, ParamKey::PrecisionMu, ParamKey::PrecisionLogSigma);
        entropy.push(gam.entropy(tape));
        let p = spec.likelihood.precision_prior();
        let a = tape.scale(gam.mu, p.shape - 1.0);
        let mean = {
            let s = tape.add(gam.mu, gam.half_var);
            tape.exp(s)
        };
        let b = tape.scale(mean, -p.rate);
        let ab = tape.add(a, b);
        tape.shift(ab, p.shape * p.rate.ln() - ln_gamma(p.shape))
    };

    let sum_or_zero = |tape: &mut Tape, v: &[Var]| if v.is_empty() { zero } else { tape.add_all(v) };
    let beta_prior = sum_or_zero(tape, &beta_prior);
    let unit_scale_prior = sum_or_zero(tape, &unit_prior);
    let layer_scale_prior = sum_or_zero(tape, &layer_prior);
    let entropy = sum_or_zero(tape, &entropy);
    let auxiliary = tape.constant(aux_const);

    let total = tape.add_all(&[
        likelihood,
        beta_prior,
        unit_scale_prior,
        layer_scale_prior,
        output_prior,
        slab_prior,
        precision_prior,
        entropy,
        auxiliary,
    ]);
    Ok(ElboVars {
        total,
        likelihood,
        beta_prior,
        unit_scale_prior,
        layer_scale_prior,
        output_prior,
        slab_prior,
        precision_prior,
        entropy,
        auxiliary,
    })
}

/// Tape nodes describing a scalar log-normal factor.
struct LogNormalVars {
    mu: Var,
    log_sigma: Var,
    /// `σ²/2`
    half_var: Var,
    /// `E[1/X] = exp(-mu + σ²/2)`
    mean_inv: Var,
}

impl LogNormalVars {
    fn entropy(&self, tape: &mut Tape) -> Var {
        let s = tape.add(self.mu, self.log_sigma);
        tape.shift(s, HALF_LN_2PI_E)
    }
}

fn lognormal_scalar(tape: &mut Tape, leaves: &Leaves, mu: ParamKey, log_sigma: ParamKey) -> LogNormalVars {
    let mu = leaves.get(mu);
    let log_sigma = leaves.get(log_sigma);
    let half_var = {
        let t = tape.scale(log_sigma, 2.0);
        let e = tape.exp(t);
        tape.scale(e, 0.5)
    };
    let mean_inv = {
        let s = tape.sub(half_var, mu);
        tape.exp(s)
    };
    LogNormalVars {
        mu,
        log_sigma,
        half_var,
        mean_inv,
    }
}

/// `E[ln InvGamma(X | 1/2, 1/Λ)]` with `X` log-normal on the tape.
fn cross_term_on_tape(tape: &mut Tape, x: &LogNormalVars, lam: &InvGammaParams) -> Var {
    let m = lam.moments();
    let a = tape.scale(x.mu, -1.5);
    let b = tape.scale(x.mean_inv, -m.mean_inverse);
    let ab = tape.add(a, b);
    tape.shift(ab, -0.5 * m.mean_log - 0.5 * PI.ln())
}

/// `(E[ln τ²], E[1/τ²])` per unit as `1×n` nodes.
fn tau2_moments(tape: &mut Tape, leaves: &Leaves, hp: &HiddenPosterior, l: usize) -> (Var, Var) {
    match hp.weights {
        LayerPosterior::Structured { .. } => {
            let nu = leaves.get(ParamKey::NuMean(l));
            let var_nu = structured_nu_variance(tape, leaves, l);
            let e_ln = tape.scale(nu, 2.0);
            // ln τ² ~ N(2ν̄, 4 var_ν): E[1/τ²] = exp(-2ν̄ + 2 var_ν)
            let v2 = tape.scale(var_nu, 2.0);
            let arg = tape.sub(v2, e_ln);
            (e_ln, tape.exp(arg))
        }
        _ => {
            let mu = leaves.get(ParamKey::TauMu(l));
            let ls = leaves.get(ParamKey::TauLogSigma(l));
            let t = tape.scale(ls, 2.0);
            let v = tape.exp(t);
            let hv = tape.scale(v, 0.5);
            let arg = tape.sub(hv, mu);
            (mu, tape.exp(arg))
        }
    }
}

/// `Var[ν_k] = V_k (psi_ν + h_ν²)` as a `1×n` node.
fn structured_nu_variance(tape: &mut Tape, leaves: &Leaves, l: usize) -> Var {
    let lpn = leaves.get(ParamKey::LogPsiNu(l));
    let hn = leaves.get(ParamKey::RankOneNu(l));
    let lv = leaves.get(ParamKey::LogV(l));
    let psi_nu = tape.exp(lpn);
    let hn2 = tape.square(hn);
    let u_nu = tape.add(psi_nu, hn2);
    let v = tape.exp(lv);
    tape.mul(v, u_nu)
}

/// One MC draw of the network output for the whole batch
/// (`x1` already carries the bias column).
fn network_output(tape: &mut Tape, leaves: &Leaves, input: &ElboInput, x1: Var, sample: &SampleNoise) -> Result<Var> {
    let spec = input.spec;
    let post = input.posterior;
    let ln_c2 = if spec.prior.has_slab() {
        let mu = leaves.get(ParamKey::SlabMu);
        let ls = leaves.get(ParamKey::SlabLogSigma);
        let sd = tape.exp(ls);
        let e = tape.constant(sample.c);
        let z = tape.mul(sd, e);
        Some(tape.add(mu, z))
    } else {
        None
    };
    let mut a = x1;
    for (l, hp) in post.hidden.iter().enumerate() {
        let s = hidden_layer(tape, leaves, spec, hp, l, a, &sample.hidden[l], ln_c2);
        a = s.next;
    }
    // output layer: local reparameterization over per-weight Gaussians
    let om = leaves.get(ParamKey::OutputMean);
    let ols = leaves.get(ParamKey::OutputLogSigma);
    let mean = tape.matmul(a, om);
    let a2 = tape.square(a);
    let ls2 = tape.scale(ols, 2.0);
    let var_w = tape.exp(ls2);
    let var = tape.matmul(a2, var_w);
    let sd = tape.sqrt(var);
    let eps = tape.leaf(sample.output.clone());
    let z = tape.mul(sd, eps);
    Ok(tape.add(mean, z))
}

#[allow(clippy::too_many_arguments)]
fn hidden_layer(
    tape: &mut Tape,
    leaves: &Leaves,
    spec: &NetworkSpec,
    hp: &HiddenPosterior,
    l: usize,
    a: Var,
    noise: &LayerNoise,
    ln_c2: Option<Var>,
) -> LayerSample {
    let n = hp.width();
    let eps_tau = tape.leaf(noise.tau.clone().insert_axis(Axis(0)));
    let wm = leaves.get(ParamKey::WeightMean(l));
    let a2 = tape.square(a);
    let mut mu_b = tape.matmul(a, wm);

    let mut ln_tau2 = None;
    let var_b = match &hp.weights {
        LayerPosterior::Factorized { .. } => {
            let ls = leaves.get(ParamKey::WeightLogSigma(l));
            let t = tape.scale(ls, 2.0);
            let v = tape.exp(t);
            tape.matmul(a2, v)
        }
        LayerPosterior::FactorizedTied { .. } => tape.sum_cols(a2),
        LayerPosterior::SemiStructured { .. } => {
            let lpsi = leaves.get(ParamKey::LogPsi(l));
            let h = leaves.get(ParamKey::RankOne(l));
            let lv = leaves.get(ParamKey::LogV(l));
            let psi = tape.exp(lpsi);
            let diag = tape.matmul(a2, psi);
            let ah = tape.matmul(a, h);
            let ah2 = tape.square(ah);
            let q = tape.add(diag, ah2);
            let v = tape.exp(lv);
            tape.mul(q, v)
        }
        LayerPosterior::Structured { .. } => {
            let lpsi = leaves.get(ParamKey::LogPsi(l));
            let h = leaves.get(ParamKey::RankOne(l));
            let lv = leaves.get(ParamKey::LogV(l));
            let lpn = leaves.get(ParamKey::LogPsiNu(l));
            let hn = leaves.get(ParamKey::RankOneNu(l));
            let nu_mean = leaves.get(ParamKey::NuMean(l));

            let psi_nu = tape.exp(lpn);
            let hn2 = tape.square(hn);
            let u_nu = tape.add(psi_nu, hn2);
            let v = tape.exp(lv);
            // ν = ν̄ + sqrt(V U_νν) ε
            let var_nu = tape.mul(v, u_nu);
            let sd_nu = tape.sqrt(var_nu);
            let dev = tape.mul(sd_nu, eps_tau);
            let nu = tape.add(nu_mean, dev);
            ln_tau2 = Some(tape.scale(nu, 2.0));

            // conditional mean: M_β + h_β h_ν (ν - ν̄) / U_νν, projected on a
            let ah = tape.matmul(a, h);
            let coef = tape.div(hn, u_nu);
            let ah_coef = tape.mul(ah, coef);
            let shift = tape.mul(ah_coef, dev);
            mu_b = tape.add(mu_b, shift);

            // conditional row covariance: Ψ_β + (psi_ν / U_νν) h_β h_βᵀ
            let psi = tape.exp(lpsi);
            let diag = tape.matmul(a2, psi);
            let s = tape.div(psi_nu, u_nu);
            let ah2 = tape.square(ah);
            let rank = tape.mul(ah2, s);
            let q = tape.add(diag, rank);
            tape.mul(q, v)
        }
    };

    let log_mult2 = if spec.prior.has_scales() {
        let ln_tau2 = match ln_tau2 {
            Some(v) => v,
            None => {
                let mu = leaves.get(ParamKey::TauMu(l));
                let ls = leaves.get(ParamKey::TauLogSigma(l));
                let sd = tape.exp(ls);
                let z = tape.mul(sd, eps_tau);
                tape.add(mu, z)
            }
        };
        let um = leaves.get(ParamKey::UpsilonMu(l));
        let uls = leaves.get(ParamKey::UpsilonLogSigma(l));
        let usd = tape.exp(uls);
        let ue = tape.constant(noise.upsilon);
        let uz = tape.mul(usd, ue);
        let ln_ups2 = tape.add(um, uz);
        let t = tape.add(ln_tau2, ln_ups2);
        match (spec.prior, ln_c2) {
            // ln(c²τ²υ² / (c² + τ²υ²)) = t - softplus(t - ln c²)
            (PriorKind::RegularizedHorseshoe, Some(lc)) => {
                let d = tape.sub(t, lc);
                let sp = tape.softplus(d);
                Some(tape.sub(t, sp))
            }
            _ => Some(t),
        }
    } else {
        None
    };

    let sd_b = tape.sqrt(var_b);
    let eps = tape.leaf(noise.pre.clone());
    let noise_part = tape.mul(sd_b, eps);
    let b = tape.add(mu_b, noise_part);
    let u = match log_mult2 {
        Some(lm) => {
            let half = tape.scale(lm, 0.5);
            let mult = tape.exp(half);
            tape.mul(b, mult)
        }
        None => b,
    };
    debug_assert_eq!(tape.value(u).ncols(), n);
    let z = match spec.nonlinearity {
        Nonlinearity::Relu => tape.relu(u),
        Nonlinearity::Tanh => tape.tanh(u),
    };
    LayerSample {
        next: tape.append_ones(z),
    }
}

/// Value of the objective with fixed noise.
pub fn elbo_estimate(input: &ElboInput) -> Result<ElboTerms> {
    let mut tape = Tape::new();
    let leaves = input.posterior.leaves(input.spec.prior, &mut tape);
    let vars = build_elbo(&mut tape, &leaves, input)?;
    let terms = vars.values(&tape);
    if !terms.is_finite() {
        return Err(Error::Numerical(format!("non-finite ELBO terms: {terms:?}")));
    }
    Ok(terms)
}

/// Network outputs for every row of `x` under one MC sample per entry of
/// `noise`, in standardized units: `samples × rows × outputs`.
pub fn sample_outputs(
    spec: &NetworkSpec,
    posterior: &Posterior,
    x: &Array2<f64>,
    noise: &ElboNoise,
) -> Result<Vec<Array2<f64>>> {
    let batch = Dataset::new(x.clone(), Array2::zeros((x.nrows(), spec.output_dim())))?;
    let input = ElboInput {
        spec,
        posterior,
        batch: &batch,
        n_total: batch.len(),
        noise,
    };
    let mut tape = Tape::new();
    let leaves = posterior.leaves(spec.prior, &mut tape);
    let xv = tape.leaf(x.clone());
    let x1 = tape.append_ones(xv);
    noise
        .samples
        .iter()
        .map(|s| {
            let f = network_output(&mut tape, &leaves, &input, x1, s)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_dist::{cross_term_lognormal_invgamma, GammaParams};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(prior: PriorKind) -> NetworkSpec {
        let mut s = NetworkSpec::new(vec![2, 3, 1]);
        s.prior = prior;
        s.bg = 1.0;
        s
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("dense".parse::<Family>().is_err());
    }

    #[test]
    fn structured_requires_scales() {
        let spec = small_spec(PriorKind::StandardNormal);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Posterior::init(&spec, Family::Structured, &mut rng).is_err());
    }

    #[test]
    fn decoupled_structured_preactivation() {
        let layer = LayerPosterior::Structured {
            mean: array![[1.0, 2.0], [3.0, 4.0]],
            nu_mean: array![0.5, -0.5],
            log_psi: array![0.3f64.ln(), 0.7f64.ln()],
            log_psi_nu: 0.0,
            h: array![0.0, 0.0],
            h_nu: 0.0,
            log_v: array![2f64.ln(), 5f64.ln()],
        };
        let (mu, var) = preactivation_dist_structured(&layer, array![3.0, 3.0].view(), array![1.0, 0.0].view()).unwrap();
        assert_eq!(mu, array![1.0, 2.0]);
        assert!((var[0] - 0.6).abs() < 1e-12 && (var[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn preactivation_switches_off_with_scale() {
        let spec = small_spec(PriorKind::Horseshoe);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut post = Posterior::init(&spec, Family::Factorized, &mut rng).unwrap();
        post.hidden[0].tau2.as_mut().unwrap().mu.fill(-700.0);
        let (tau, pre) = (array![0.0, 0.0, 0.0], array![1.0, -1.0, 2.0]);
        let noise = PreactivationNoise {
            tau: tau.view(),
            upsilon: 0.0,
            c: 0.0,
            pre: pre.view(),
        };
        let u = preactivation_sample(&spec, &post.hidden[0], &post.globals.c2, array![5.0, -3.0, 1.0].view(), &noise)
            .unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn preactivation_unit_multiplier_returns_mean() {
        let spec = small_spec(PriorKind::StandardNormal);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let post = Posterior::init(&spec, Family::Factorized, &mut rng).unwrap();
        let zeros = Array1::zeros(3);
        let noise = PreactivationNoise {
            tau: zeros.view(),
            upsilon: 0.0,
            c: 0.0,
            pre: zeros.view(),
        };
        let a = array![0.4, -0.2, 1.0];
        let u = preactivation_sample(&spec, &post.hidden[0], &post.globals.c2, a.view(), &noise).unwrap();
        let want = post.hidden[0].weights.mean().t().dot(&a);
        assert_eq!(u, want);
    }

    /// The tape's hidden-layer pre-activations equal the vector-level ones.
    #[test]
    fn tape_path_matches_vector_path() {
        for family in Family::ALL {
            for prior in [PriorKind::RegularizedHorseshoe, PriorKind::Horseshoe] {
                let spec = small_spec(prior);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let mut post = Posterior::init(&spec, family, &mut rng).unwrap();
                perturb(&mut post, prior, &mut rng);
                let x = array![[0.3, -1.2], [1.1, 0.4]];
                let noise = ElboNoise::draw(&spec, 2, 1, &mut rng);
                let mut tape = Tape::new();
                let leaves = post.leaves(prior, &mut tape);
                let xv = tape.leaf(x.clone());
                let x1 = tape.append_ones(xv);
                let s = &noise.samples[0];
                let ln_c2 = {
                    prior.has_slab().then(|| {
                        let mu = leaves.get(ParamKey::SlabMu);
                        let ls = leaves.get(ParamKey::SlabLogSigma);
                        let sd = tape.exp(ls);
                        let e = tape.constant(s.c);
                        let z = tape.mul(sd, e);
                        tape.add(mu, z)
                    })
                };
                let out = hidden_layer(&mut tape, &leaves, &spec, &post.hidden[0], 0, x1, &s.hidden[0], ln_c2);
                let z = tape.value(out.next).clone();
                for r in 0..2 {
                    let a = array![x[[r, 0]], x[[r, 1]], 1.0];
                    let pn = PreactivationNoise {
                        tau: s.hidden[0].tau.view(),
                        upsilon: s.hidden[0].upsilon,
                        c: s.c,
                        pre: s.hidden[0].pre.row(r),
                    };
                    let u = preactivation_sample(&spec, &post.hidden[0], &post.globals.c2, a.view(), &pn).unwrap();
                    for k in 0..3 {
                        let want = u[k].max(0.0);
                        assert!((z[[r, k]] - want).abs() < 1e-12 * (1.0 + want.abs()), "{family:?}");
                    }
                }
            }
        }
    }

    fn perturb(post: &mut Posterior, prior: PriorKind, rng: &mut impl Rng) {
        for b in post.blocks_mut(prior) {
            for v in b.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for h in &mut post.hidden {
            if let Some(t) = &mut h.tau2 {
                t.mu.mapv_inplace(|v| v + 4.0);
            }
            if let LayerPosterior::Structured { nu_mean, .. } = &mut h.weights {
                nu_mean.mapv_inplace(|v| v + 2.0);
            }
            h.upsilon2.mu += 4.0;
        }
    }

    /// Prior and entropy nodes equal the closed forms of the scalar modules.
    #[test]
    fn analytic_terms_match_scalar_modules() {
        for family in Family::ALL {
            let spec = small_spec(PriorKind::RegularizedHorseshoe);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut post = Posterior::init(&spec, family, &mut rng).unwrap();
            perturb(&mut post, spec.prior, &mut rng);
            let empty = Dataset::new(Array2::zeros((0, 2)), Array2::zeros((0, 1))).unwrap();
            let noise = ElboNoise::zeros(&spec, 0, 1);
            let terms = elbo_estimate(&ElboInput {
                spec: &spec,
                posterior: &post,
                batch: &empty,
                n_total: 0,
                noise: &noise,
            })
            .unwrap();
            assert_eq!(terms.likelihood, 0.0);

            let hp = &post.hidden[0];
            let tau = hp.tau2_marginals();
            let unit: f64 = tau
                .iter()
                .zip(&hp.lambda)
                .map(|(t, lam)| cross_term_lognormal_invgamma(t, lam))
                .sum();
            assert!((terms.unit_scale_prior - unit).abs() < 1e-9, "{family:?}");
            let layer = cross_term_lognormal_invgamma(&hp.upsilon2.params(), &hp.vartheta);
            assert!((terms.layer_scale_prior - layer).abs() < 1e-12);

            let slab = InvGammaParams { shape: spec.c_a, rate: spec.c_b }.expected_ln_pdf(&post.globals.c2.params());
            assert!((terms.slab_prior - slab).abs() < 1e-12);
            let prec = GammaParams { shape: 6.0, rate: 6.0 }.expected_ln_pdf(&post.globals.gamma.params());
            assert!((terms.precision_prior - prec).abs() < 1e-12);

            let mut ent = post.globals.kappa2.params().entropy()
                + post.globals.c2.params().entropy()
                + post.globals.gamma.params().entropy()
                + hp.upsilon2.params().entropy()
                + post
                    .globals
                    .output_log_sigma
                    .iter()
                    .map(|l| HALF_LN_2PI_E + l)
                    .sum::<f64>();
            ent += match &hp.weights {
                LayerPosterior::Factorized { log_sigma, .. } => {
                    log_sigma.iter().map(|l| HALF_LN_2PI_E + l).sum::<f64>()
                }
                LayerPosterior::FactorizedTied { mean } => HALF_LN_2PI_E * mean.len() as f64,
                LayerPosterior::SemiStructured { .. } => hp.weights.matrix_normal().unwrap().entropy(),
                LayerPosterior::Structured { nu_mean, .. } => {
                    hp.weights.matrix_normal().unwrap().entropy()
                        + nu_mean.iter().map(|m| LN_2 + 2.0 * m).sum::<f64>()
                }
            };
            if let Some(t) = &hp.tau2 {
                ent += (0..t.len()).map(|k| t.get(k).entropy()).sum::<f64>();
            }
            assert!((terms.entropy - ent).abs() < 1e-9, "{family:?}: {} vs {ent}", terms.entropy);
        }
    }

    #[test]
    fn perfect_fit_likelihood() {
        // deterministic network f = 0 and targets 0, γ pinned at 1
        let spec = small_spec(PriorKind::StandardNormal);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut post = Posterior::init(&spec, Family::Factorized, &mut rng).unwrap();
        post.globals.output_mean.fill(0.0);
        post.globals.output_log_sigma.fill(-800.0);
        post.globals.gamma = LogNormalFactor { mu: 0.0, log_sigma: -40.0 };
        let batch = Dataset::new(array![[0.5, 0.1]], array![[0.0]]).unwrap();
        let noise = ElboNoise::draw(&spec, 1, 1, &mut rng);
        let t = elbo_estimate(&ElboInput {
            spec: &spec,
            posterior: &post,
            batch: &batch,
            n_total: 1,
            noise: &noise,
        })
        .unwrap();
        assert!((t.likelihood + HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn tau2_marginal_of_structured_layer() {
        let layer = HiddenPosterior {
            weights: LayerPosterior::Structured {
                mean: array![[0.0], [0.0]],
                nu_mean: array![0.25],
                log_psi: array![0.0, 0.0],
                log_psi_nu: 0.5f64.ln(),
                h: array![0.3, 0.1],
                h_nu: 0.5,
                log_v: array![4f64.ln()],
            },
            tau2: None,
            upsilon2: LogNormalFactor::new(0.0, 1.0),
            lambda: vec![InvGammaParams { shape: 1.0, rate: 1.0 }],
            vartheta: InvGammaParams { shape: 1.0, rate: 1.0 },
        };
        let m = layer.tau2_marginals()[0];
        assert!((m.mu - 0.5).abs() < 1e-15);
        assert!((m.sigma - 2.0 * (4.0f64 * 0.75).sqrt()).abs() < 1e-14);
    }
}
