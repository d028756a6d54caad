//! Zero-mean Gaussian-process regression with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{IntervalField, Measurement};
use crate::grid::{Grid, ScalarField};

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("need at least one training point")]
    NoData,
    #[error("inputs have inconsistent dimension (expected {expected}, got {got})")]
    InputDimension { expected: usize, got: usize },
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("non-finite training data")]
    NonFinite,
    #[error("hyperparameters must be positive and finite")]
    BadHyper,
    #[error("kernel matrix is not positive definite after jitter")]
    Singular,
    #[error("GP input refers to axis {axis} but the grid has {ndims} axes")]
    BadInputAxis { axis: usize, ndims: usize },
    #[error("measurement has no state index {0}")]
    MissingStateIndex(usize),
}

/// Kernel and noise hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    fn validate(&self, dim: usize) -> Result<(), GpError> {
        if self.lengthscales.len() != dim {
            return Err(GpError::InputDimension { expected: dim, got: self.lengthscales.len() });
        }
        let ok = self.signal_var.is_finite()
            && self.signal_var > 0.0
            && self.noise_var.is_finite()
            && self.noise_var >= 0.0
            && self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GpError::BadHyper)
        }
    }

    #[inline]
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).zip(&self.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
        self.signal_var * (-0.5 * r2).exp()
    }
}

/// Log-spaced candidate grid searched by marginal likelihood. Lengthscale
/// candidates are multiplied by the per-input `lengthscale_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSearch {
    pub signal_std: Vec<f64>,
    pub lengthscale: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub lengthscale_scale: Option<Vec<f64>>,
}

impl Default for HyperSearch {
    fn default() -> Self {
        Self {
            signal_std: vec![0.1, 0.3, 1.0, 3.0],
            lengthscale: vec![0.1, 0.3, 1.0, 3.0],
            noise_std: vec![0.01, 0.03, 0.1, 0.3],
            lengthscale_scale: None,
        }
    }
}

impl HyperSearch {
    fn candidates(&self, dim: usize) -> Vec<GpHyper> {
        let scale = self.lengthscale_scale.clone().unwrap_or_else(|| vec![1.0; dim]);
        let mut out = Vec::new();
        for &sf in &self.signal_std {
            for &l in &self.lengthscale {
                for &sn in &self.noise_std {
                    out.push(GpHyper {
                        signal_var: sf * sf,
                        lengthscales: scale.iter().map(|s| s * l).collect(),
                        noise_var: sn * sn,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HyperPolicy {
    Fixed(GpHyper),
    Search(HyperSearch),
}

/// Posterior mean and latent variance at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// Where a GP input coordinate comes from when sampling bounds on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GpInput {
    /// Coordinate of the given grid axis.
    Axis { axis: usize },
    /// Not represented on the grid: the bound is the union over `n` samples
    /// spanning `[min, max]`.
    Sweep { min: f64, max: f64, n: usize },
}

#[derive(Clone, Debug)]
pub struct GpModel {
    hyper: GpHyper,
    dim: usize,
    inputs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    log_marginal_likelihood: f64,
}

/// Diagonal jitter relative to the signal variance.
const JITTER: f64 = 1e-8;

impl GpModel {
    /// Prior-only model: mean 0, variance `signal_var` everywhere.
    pub fn prior(hyper: GpHyper, dim: usize) -> Result<Self, GpError> {
        hyper.validate(dim)?;
        Ok(Self {
            hyper,
            dim,
            inputs: Vec::new(),
            alpha: DVector::zeros(0),
            chol: None,
            log_marginal_likelihood: 0.0,
        })
    }

    /// Conditions on data; with more than `max_points` samples a uniform
    /// subsample is used.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], policy: &HyperPolicy, max_points: usize) -> Result<Self, GpError> {
        if inputs.is_empty() {
            return Err(GpError::NoData);
        }
        if inputs.len() != targets.len() {
            return Err(GpError::LengthMismatch { inputs: inputs.len(), targets: targets.len() });
        }
        let dim = inputs[0].len();
        for x in inputs {
            if x.len() != dim {
                return Err(GpError::InputDimension { expected: dim, got: x.len() });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite);
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let (xs, ys) = subsample(inputs, targets, max_points.max(1));
        match policy {
            HyperPolicy::Fixed(h) => {
                h.validate(dim)?;
                condition(h.clone(), xs, &ys)
            }
            HyperPolicy::Search(search) => {
                let candidates = search.candidates(dim);
                for c in &candidates {
                    c.validate(dim)?;
                }
                let fitted: Vec<Option<GpModel>> =
                    candidates.into_par_iter().map(|h| condition(h, xs.clone(), &ys).ok()).collect();
                let mut best: Option<GpModel> = None;
                for m in fitted.into_iter().flatten() {
                    if best.as_ref().is_none_or(|b| m.log_marginal_likelihood > b.log_marginal_likelihood) {
                        best = Some(m);
                    }
                }
                best.ok_or(GpError::Singular)
            }
        }
    }

    /// Fits channel `channel` of `data`, using the state coordinates listed in
    /// `state_indices` as GP inputs.
    pub fn fit_measurements(
        data: &[Measurement],
        state_indices: &[usize],
        channel: usize,
        policy: &HyperPolicy,
        max_points: usize,
    ) -> Result<Self, GpError> {
        let mut xs = Vec::with_capacity(data.len());
        let mut ys = Vec::with_capacity(data.len());
        for m in data {
            let x = state_indices
                .iter()
                .map(|&i| m.x.get(i).copied().ok_or(GpError::MissingStateIndex(i)))
                .collect::<Result<Vec<_>, _>>()?;
            xs.push(x);
            ys.push(*m.d.get(channel).ok_or(GpError::MissingStateIndex(channel))?);
        }
        Self::fit(&xs, &ys, policy, max_points)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn training_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Posterior of the latent function.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let Some(chol) = &self.chol else {
            return Prediction { mean: 0.0, variance: self.hyper.signal_var };
        };
        let k = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| self.hyper.kernel(xi, x)));
        let mean = k.dot(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&k).expect("cholesky factor has a non-zero diagonal");
        let variance = (self.hyper.signal_var - v.norm_squared()).max(0.0);
        Prediction { mean, variance }
    }

    /// Posterior predictive of a new noisy measurement.
    pub fn predict_observation(&self, x: &[f64]) -> Prediction {
        let p = self.predict(x);
        Prediction { mean: p.mean, variance: p.variance + self.hyper.noise_var }
    }

    /// `mean +- k_sigma * std` of the predictive distribution of a measurement.
    pub fn interval(&self, x: &[f64], k_sigma: f64) -> (f64, f64) {
        let p = self.predict_observation(x);
        let half = (k_sigma * k_sigma * p.variance).sqrt();
        (p.mean - half, p.mean + half)
    }

    /// Samples `mean +- k_sigma * std` on every node of `grid` as a
    /// single-channel interval field.
    pub fn bounds_on_grid(&self, grid: &Grid, inputs: &[GpInput], k_sigma: f64) -> Result<IntervalField, GpError> {
        if inputs.len() != self.dim {
            return Err(GpError::InputDimension { expected: self.dim, got: inputs.len() });
        }
        // Every input takes values from a short list; predictions are made on
        // the product of those lists and reduced over sweep inputs.
        let mut lists: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        let mut axis_of: Vec<Option<usize>> = Vec::with_capacity(inputs.len());
        for inp in inputs {
            match *inp {
                GpInput::Axis { axis } => {
                    if axis >= grid.ndims() {
                        return Err(GpError::BadInputAxis { axis, ndims: grid.ndims() });
                    }
                    let a = grid.axis(axis);
                    lists.push((0..a.n).map(|k| a.coord(k)).collect());
                    axis_of.push(Some(axis));
                }
                GpInput::Sweep { min, max, n } => {
                    let n = n.max(1);
                    lists.push(if n == 1 {
                        vec![0.5 * (min + max)]
                    } else {
                        (0..n).map(|k| min + (max - min) * k as f64 / (n - 1) as f64).collect()
                    });
                    axis_of.push(None);
                }
            }
        }
        let kept: Vec<usize> = (0..inputs.len()).filter(|&i| axis_of[i].is_some()).collect();
        let kept_len: usize = kept.iter().map(|&i| lists[i].len()).product();
        let total: usize = lists.iter().map(Vec::len).product();

        let intervals: Vec<(f64, f64)> = (0..total)
            .into_par_iter()
            .map(|mut flat| {
                let mut x = vec![0.0; inputs.len()];
                for i in (0..inputs.len()).rev() {
                    let n = lists[i].len();
                    x[i] = lists[i][flat % n];
                    flat /= n;
                }
                self.interval(&x, k_sigma)
            })
            .collect();

        let mut lo = vec![f64::INFINITY; kept_len];
        let mut hi = vec![f64::NEG_INFINITY; kept_len];
        for (flat, &(l, h)) in intervals.iter().enumerate() {
            let mut rem = flat;
            let mut key = 0;
            let mut mul = 1;
            for i in (0..inputs.len()).rev() {
                let n = lists[i].len();
                let k = rem % n;
                rem /= n;
                if axis_of[i].is_some() {
                    key += k * mul;
                    mul *= n;
                }
            }
            lo[key] = lo[key].min(l);
            hi[key] = hi[key].max(h);
        }

        let mut idx = vec![0; grid.ndims()];
        let mut lo_vals = Vec::with_capacity(grid.len());
        let mut hi_vals = Vec::with_capacity(grid.len());
        loop {
            let mut key = 0;
            let mut mul = 1;
            for &i in kept.iter().rev() {
                let axis = axis_of[i].unwrap();
                key += idx[axis] * mul;
                mul *= lists[i].len();
            }
            lo_vals.push(lo[key]);
            hi_vals.push(hi[key]);
            if !grid.advance(&mut idx) {
                break;
            }
        }
        let lo = ScalarField::from_parts(grid.clone(), lo_vals);
        let hi = ScalarField::from_parts(grid.clone(), hi_vals);
        Ok(IntervalField::new(vec![(lo, hi)]).expect("mean - k std <= mean + k std"))
    }
}

fn subsample(inputs: &[Vec<f64>], targets: &[f64], cap: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = inputs.len();
    if n <= cap {
        return (inputs.to_vec(), targets.to_vec());
    }
    (0..cap).map(|i| i * n / cap).map(|i| (inputs[i].clone(), targets[i])).unzip()
}

fn condition(hyper: GpHyper, inputs: Vec<Vec<f64>>, targets: &[f64]) -> Result<GpModel, GpError> {
    let n = inputs.len();
    let dim = inputs[0].len();
    let diag = hyper.noise_var + JITTER * hyper.signal_var;
    let k = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&inputs[i], &inputs[j]) + if i == j { diag } else { 0.0 });
    let chol = Cholesky::new(k).ok_or(GpError::Singular)?;
    let y = DVector::from_column_slice(targets);
    let alpha = chol.solve(&y);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return Err(GpError::Singular);
    }
    Ok(GpModel { hyper, dim, inputs, alpha, chol: Some(chol), log_marginal_likelihood: lml })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn hyper(sf2: f64, l: f64, sn2: f64) -> GpHyper {
        GpHyper { signal_var: sf2, lengthscales: vec![l], noise_var: sn2 }
    }

    fn bump_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.5..2.5)]).collect();
        let ys = xs.iter().map(|x| 0.5 * (-x[0] * x[0]).exp() + noise.sample(&mut rng)).collect();
        (xs, ys)
    }

    #[test]
    fn interpolates_single_noise_free_point() {
        let m = GpModel::fit(&[vec![0.3]], &[1.0], &HyperPolicy::Fixed(hyper(1.0, 0.5, 0.0)), 500).unwrap();
        let p = m.predict(&[0.3]);
        assert!((p.mean - 1.0).abs() < 1e-6);
        assert!(p.variance < 1e-6);
        let (lo, hi) = m.interval(&[0.3], 3.0);
        assert!((lo - 1.0).abs() < 1e-3 && (hi - 1.0).abs() < 1e-3);
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let m = GpModel::fit(&[vec![0.0]], &[1.0], &HyperPolicy::Fixed(hyper(0.04, 0.2, 0.0)), 500).unwrap();
        let p = m.predict(&[10.0]);
        assert!(p.mean.abs() < 1e-9);
        assert!((p.variance - 0.04).abs() < 1e-9);
    }

    #[test]
    fn prior_bounds_are_three_sigma() {
        let m = GpModel::prior(hyper(0.01, 1.0, 0.0), 1).unwrap();
        let g = Grid::new(vec![Axis::new(0.0, 3.0, 7)]).unwrap();
        let f = m.bounds_on_grid(&g, &[GpInput::Axis { axis: 0 }], 3.0).unwrap();
        assert!(f.lo_field(0).values().iter().all(|&v| v == -0.3));
        assert!(f.hi_field(0).values().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn recovers_smooth_bump() {
        let (xs, ys) = bump_data(200, 1);
        let m = GpModel::fit(&xs, &ys, &HyperPolicy::Search(HyperSearch::default()), 500).unwrap();
        for k in 0..=40 {
            let x = -2.0 + 0.1 * k as f64;
            let truth = 0.5 * (-x * x).exp();
            assert!((m.predict(&[x]).mean - truth).abs() < 0.1, "x = {x}");
        }
        assert!((m.predict(&[0.0]).mean - 0.5).abs() < 0.1);
    }

    #[test]
    fn symmetric_data_gives_even_mean() {
        let xs: Vec<Vec<f64>> = [-1.0, -0.4, 0.4, 1.0].iter().map(|&x| vec![x]).collect();
        let ys = [0.2, 0.7, 0.7, 0.2];
        let m = GpModel::fit(&xs, &ys, &HyperPolicy::Fixed(hyper(1.0, 0.6, 0.01)), 500).unwrap();
        for x in [0.1, 0.55, 1.3] {
            assert!((m.predict(&[x]).mean - m.predict(&[-x]).mean).abs() < 1e-9);
        }
        let p = m.predict(&[0.4]);
        assert!(p.variance <= 0.01 + 1e-9);
    }

    #[test]
    fn posterior_variance_never_exceeds_prior() {
        let (xs, ys) = bump_data(60, 2);
        let m = GpModel::fit(&xs, &ys, &HyperPolicy::Fixed(hyper(0.25, 0.5, 0.0025)), 500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let p = m.predict(&[rng.random_range(-5.0..5.0)]);
            assert!(p.variance <= 0.25 + 1e-12 && p.variance >= 0.0);
        }
    }

    #[test]
    fn extra_datum_shrinks_interval_at_its_location() {
        let h = HyperPolicy::Fixed(hyper(0.25, 0.5, 0.01));
        let (mut xs, mut ys) = bump_data(20, 3);
        let m0 = GpModel::fit(&xs, &ys, &h, 500).unwrap();
        let at = vec![0.77];
        let (l0, h0) = m0.interval(&at, 3.0);
        xs.push(at.clone());
        ys.push(0.1);
        let m1 = GpModel::fit(&xs, &ys, &h, 500).unwrap();
        let (l1, h1) = m1.interval(&at, 3.0);
        assert!(h1 - l1 <= h0 - l0 + 1e-12);
    }

    #[test]
    fn sweep_input_takes_union() {
        // d depends on the second input only; sweeping it covers both branches
        let xs = vec![vec![0.0, -1.0], vec![0.0, 1.0], vec![1.0, -1.0], vec![1.0, 1.0]];
        let ys = [-1.0, 1.0, -1.0, 1.0];
        let m = GpModel::fit(&xs, &ys, &HyperPolicy::Fixed(GpHyper { signal_var: 1.0, lengthscales: vec![5.0, 0.3], noise_var: 0.0 }), 500).unwrap();
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 3)]).unwrap();
        let swept = m.bounds_on_grid(&g, &[GpInput::Axis { axis: 0 }, GpInput::Sweep { min: -1.0, max: 1.0, n: 3 }], 3.0).unwrap();
        for k in [0, 2] {
            assert!(swept.lo_field(0).values()[k] <= -1.0 + 1e-3);
            assert!(swept.hi_field(0).values()[k] >= 1.0 - 1e-3);
        }
        assert!(matches!(
            m.bounds_on_grid(&g, &[GpInput::Axis { axis: 3 }, GpInput::Axis { axis: 0 }], 3.0),
            Err(GpError::BadInputAxis { .. })
        ));
    }

    #[test]
    fn subsampling_caps_training_set() {
        let (xs, ys) = bump_data(1200, 4);
        let m = GpModel::fit(&xs, &ys, &HyperPolicy::Fixed(hyper(0.25, 0.5, 0.0025)), 500).unwrap();
        assert_eq!(m.training_len(), 500);
    }

    #[test]
    fn empty_data_rejected() {
        assert_eq!(GpModel::fit(&[], &[], &HyperPolicy::Search(HyperSearch::default()), 10).unwrap_err(), GpError::NoData);
        assert_eq!(GpModel::prior(hyper(-1.0, 1.0, 0.0), 1).unwrap_err(), GpError::BadHyper);
    }
}
