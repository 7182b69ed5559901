//! Gradients of the sampled ELBO and the finite-difference check that
//! certifies them.
//!
//! With the noise held fixed the Monte-Carlo ELBO is a deterministic function
//! of the variational parameters; [`grad_elbo`] returns its exact gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PriorKind;
use crate::tape::Tape;
use crate::variational::{build_elbo, elbo_estimate, ElboInput, ElboTerms, ParamKey, Posterior};

/// Location of one parameter block inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub key: ParamKey,
    pub shape: (usize, usize),
    pub offset: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index map of a flattened posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub blocks: Vec<BlockInfo>,
}

impl ParamSchema {
    pub fn of(posterior: &Posterior, prior: PriorKind) -> Self {
        let mut copy = posterior.clone();
        let mut offset = 0;
        let blocks = copy
            .blocks_mut(prior)
            .into_iter()
            .map(|b| {
                let info = BlockInfo {
                    key: b.key,
                    shape: b.shape,
                    offset,
                };
                offset += b.data.len();
                info
            })
            .collect();
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block and in-block coordinate of a flat index.
    pub fn locate(&self, index: usize) -> Option<(&BlockInfo, usize)> {
        self.blocks
            .iter()
            .find(|b| index >= b.offset && index < b.offset + b.len())
            .map(|b| (b, index - b.offset))
    }

    /// Human-readable name of a flat index, e.g. `layer0.log_v[3]`.
    pub fn describe(&self, index: usize) -> String {
        match self.locate(index) {
            Some((b, i)) => format!("{}[{i}]", b.key.name()),
            None => format!("<out of range {index}>"),
        }
    }
}

/// Flat vector of all active variational parameters, in unconstrained form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn flatten(posterior: &Posterior, prior: PriorKind) -> Self {
        let mut copy = posterior.clone();
        let values = copy
            .blocks_mut(prior)
            .into_iter()
            .flat_map(|b| b.data.to_vec())
            .collect();
        Self { values }
    }

    /// Writes the values back into `posterior`, whose layout must match.
    pub fn unflatten_into(&self, posterior: &mut Posterior, prior: PriorKind) -> Result<()> {
        let mut offset = 0;
        for b in posterior.blocks_mut(prior) {
            let end = offset + b.data.len();
            if end > self.values.len() {
                return Err(Error::shape("parameter vector is shorter than the posterior"));
            }
            b.data.copy_from_slice(&self.values[offset..end]);
            offset = end;
        }
        if offset != self.values.len() {
            return Err(Error::shape("parameter vector is longer than the posterior"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// ELBO value and its gradient.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub terms: ElboTerms,
    pub grad: ParamVector,
}

/// Exact gradient of the sampled ELBO with respect to every active parameter.
pub fn grad_elbo(input: &ElboInput) -> Result<ElboGradient> {
    let prior = input.spec.prior;
    let mut tape = Tape::new();
    let leaves = input.posterior.leaves(prior, &mut tape);
    let vars = build_elbo(&mut tape, &leaves, input)?;
    let terms = vars.values(&tape);
    if !terms.is_finite() {
        return Err(Error::Numerical(format!("non-finite ELBO terms: {terms:?}")));
    }
    tape.backward(vars.total);
    let schema = ParamSchema::of(input.posterior, prior);
    let mut values = Vec::with_capacity(schema.len());
    for b in &schema.blocks {
        let g = tape.grad_or_zero(leaves.get(b.key));
        values.extend(g.iter().copied());
    }
    if let Some(i) = values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at parameter {i} ({})",
            schema.describe(i)
        )));
    }
    Ok(ElboGradient {
        terms,
        grad: ParamVector { values },
    })
}

/// Agreement between [`grad_elbo`] and central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub step: f64,
    pub coordinates: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Coordinates outside both tolerances, as `(index, name, analytic, numeric)`.
    pub failures: Vec<FiniteDiffFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffFailure {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Tolerances for [`finite_diff_check`]: a coordinate passes when it is
/// within `rel` relative error or `abs` absolute error, whichever is looser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

/// Compares the analytic gradient with central differences of
/// [`elbo_estimate`] under the same noise, optionally restricted to the
/// coordinates where `select` holds.
pub fn finite_diff_check(
    input: &ElboInput,
    step: f64,
    tol: Tolerances,
    select: impl Fn(ParamKey) -> bool,
) -> Result<FiniteDiffReport> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let prior = input.spec.prior;
    let analytic = grad_elbo(input)?.grad;
    let schema = ParamSchema::of(input.posterior, prior);
    let base = ParamVector::flatten(input.posterior, prior);
    let mut probe = input.posterior.clone();
    let mut eval_at = |values: &ParamVector| -> Result<f64> {
        values.unflatten_into(&mut probe, prior)?;
        let shifted = ElboInput {
            posterior: &probe,
            ..*input
        };
        Ok(elbo_estimate(&shifted)?.total)
    };

    let mut report = FiniteDiffReport {
        step,
        coordinates: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
        failures: Vec::new(),
    };
    let mut rel_sum = 0.0;
    let mut values = base.clone();
    for b in &schema.blocks {
        if !select(b.key) {
            continue;
        }
        for i in b.offset..b.offset + b.len() {
            values.values[i] = base.values[i] + step;
            let up = eval_at(&values)?;
            values.values[i] = base.values[i] - step;
            let down = eval_at(&values)?;
            values.values[i] = base.values[i];
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.values[i];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs_err);
            report.max_rel_error = report.max_rel_error.max(rel_err);
            rel_sum += rel_err;
            if abs_err > tol.abs && rel_err > tol.rel {
                report.failures.push(FiniteDiffFailure {
                    index: i,
                    name: schema.describe(i),
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    if report.coordinates > 0 {
        report.mean_rel_error = rel_sum / report.coordinates as f64;
    }
    Ok(report)
}
