//! Functions drawn from single-hidden-layer networks under the horseshoe and
//! regularized horseshoe priors, with every draw except the slab shared so
//! the two paths differ only by the regularization.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_weights, regularized_scale, Nonlinearity};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSampleConfig {
    pub widths: Vec<usize>,
    pub count: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub b0: f64,
    pub bg: f64,
    pub b_kappa: f64,
    pub c_a: f64,
    pub c_b: f64,
    /// Fixes `c²` instead of drawing it from its inverse-gamma prior.
    pub c2: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for PriorSampleConfig {
    fn default() -> Self {
        Self {
            widths: vec![50, 500, 5000],
            count: 5,
            grid_min: -5.0,
            grid_max: 5.0,
            grid_points: 200,
            b0: 1.0,
            bg: 1.0,
            b_kappa: 1.0,
            c_a: 2.0,
            c_b: 6.0,
            c2: None,
            nonlinearity: Nonlinearity::Tanh,
            seed: 0,
        }
    }
}

/// One matched pair of sample paths on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPath {
    pub width: usize,
    pub index: usize,
    pub horseshoe: Vec<f64>,
    pub regularized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSamples {
    pub grid: Vec<f64>,
    pub paths: Vec<PriorPath>,
}

fn half_cauchy(scale: f64, rng: &mut impl Rng) -> f64 {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    scale * (a / b).abs()
}

/// Draws `count` matched path pairs per width.
pub fn prior_sample_functions(cfg: &PriorSampleConfig) -> Result<PriorSamples> {
    if cfg.grid_points < 2 || !(cfg.grid_max > cfg.grid_min) {
        return Err(Error::Config("grid needs at least two points on a nonempty interval".into()));
    }
    if cfg.widths.contains(&0) {
        return Err(Error::Config("widths must be positive".into()));
    }
    let mut rng = substream(cfg.seed, Stream::Data);
    let step = (cfg.grid_max - cfg.grid_min) / (cfg.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..cfg.grid_points).map(|i| cfg.grid_min + step * i as f64).collect();
    let slab = Gamma::new(cfg.c_a, 1.0 / cfg.c_b).map_err(|e| Error::Config(e.to_string()))?;
    let mut paths = Vec::new();
    for &width in &cfg.widths {
        for index in 0..cfg.count {
            let beta = Array2::from_shape_fn((2, width), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let tau: Array1<f64> = (0..width).map(|_| half_cauchy(cfg.b0, &mut rng)).collect();
            let ups = half_cauchy(cfg.bg, &mut rng);
            let c2 = match cfg.c2 {
                Some(c) => c,
                None => 1.0 / slab.sample(&mut rng),
            };
            let kappa = half_cauchy(cfg.b_kappa, &mut rng);
            let out = Array2::from_shape_fn((width + 1, 1), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                kappa * z
            });
            let layer = |regularize: bool| -> Array2<f64> {
                let mut w = beta.clone();
                for k in 0..width {
                    let t2 = tau[k] * tau[k];
                    let u2 = ups * ups;
                    let s2 = if regularize {
                        regularized_scale(t2, u2, c2) * u2
                    } else {
                        t2 * u2
                    };
                    w.column_mut(k).mapv_inplace(|v| v * s2.sqrt());
                }
                w
            };
            let eval = |w: Array2<f64>| -> Vec<f64> {
                let ws = [w, out.clone()];
                grid.iter()
                    .map(|&x| forward_weights(cfg.nonlinearity, &ws, ndarray::aview1(&[x]))[0])
                    .collect()
            };
            paths.push(PriorPath {
                width,
                index,
                horseshoe: eval(layer(false)),
                regularized: eval(layer(true)),
            });
        }
    }
    Ok(PriorSamples { grid, paths })
}

/// Standard deviation of a path's values over the grid.
pub fn path_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

impl PriorSamples {
    /// Delimiter-separated rows `width, sample, x, horseshoe, regularized`.
    pub fn to_table(&self, delimiter: char) -> String {
        let d = delimiter;
        let mut s = format!("width{d}sample{d}x{d}horseshoe{d}regularized_horseshoe\n");
        for p in &self.paths {
            for (i, x) in self.grid.iter().enumerate() {
                s.push_str(&format!(
                    "{}{d}{}{d}{}{d}{}{d}{}\n",
                    p.width, p.index, x, p.horseshoe[i], p.regularized[i]
                ));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_slab_recovers_horseshoe() {
        let cfg = PriorSampleConfig {
            widths: vec![50],
            c2: Some(1e300),
            grid_points: 20,
            ..PriorSampleConfig::default()
        };
        let s = prior_sample_functions(&cfg).unwrap();
        for p in &s.paths {
            for (a, b) in p.horseshoe.iter().zip(&p.regularized) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let cfg = PriorSampleConfig {
            widths: vec![50],
            ..PriorSampleConfig::default()
        };
        let a = prior_sample_functions(&cfg).unwrap().to_table(',');
        let b = prior_sample_functions(&cfg).unwrap().to_table(',');
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 5 * 200);
    }

    #[test]
    fn regularized_paths_are_no_wilder() {
        let mut wins = 0;
        for seed in 0..20 {
            let cfg = PriorSampleConfig {
                widths: vec![5000],
                count: 1,
                grid_points: 50,
                seed,
                ..PriorSampleConfig::default()
            };
            let p = &prior_sample_functions(&cfg).unwrap().paths[0];
            if path_std(&p.regularized) <= path_std(&p.horseshoe) {
                wins += 1;
            }
        }
        assert!(wins >= 15, "{wins}");
    }
}
