//! Seeded, state-dependent wind acting as the disturbance input.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindSpec {
    Calm,
    /// Mean and standard deviation fall off linearly with altitude and vanish
    /// above `a0`: `mean = w0 * max(0, 1 - a / a0)`, `std = s0 * max(0, 1 - a / a0)`.
    Altitude { altitude_index: usize, channel: usize, w0: f64, a0: f64, s0: f64, onset: f64 },
    /// Wind inside an axis-aligned box over two state coordinates, blended in
    /// with a smoothstep over `ramp` from the box faces inward.
    Region { axes: [usize; 2], lo: [f64; 2], hi: [f64; 2], ramp: f64, mean: Vec<f64>, std: Vec<f64>, onset: f64 },
}

impl Default for WindSpec {
    fn default() -> Self {
        WindSpec::Calm
    }
}

impl WindSpec {
    pub fn onset(&self) -> Option<f64> {
        match *self {
            WindSpec::Calm => None,
            WindSpec::Altitude { onset, .. } | WindSpec::Region { onset, .. } => Some(onset),
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Gaussian wind acceleration per disturbance channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WindField {
    spec: WindSpec,
    channels: usize,
}

impl WindField {
    pub fn new(spec: WindSpec, channels: usize, state_dim: usize) -> Result<Self, SimError> {
        let bad = |msg: String| Err(SimError::Config(format!("wind: {msg}")));
        match &spec {
            WindSpec::Calm => {}
            WindSpec::Altitude { altitude_index, channel, a0, s0, .. } => {
                if *altitude_index >= state_dim || *channel >= channels {
                    return bad("index out of range".into());
                }
                if !(*a0 > 0.0) || *s0 < 0.0 {
                    return bad(format!("need a0 > 0 and s0 >= 0, got a0 = {a0}, s0 = {s0}"));
                }
            }
            WindSpec::Region { axes, lo, hi, ramp, mean, std, .. } => {
                if axes.iter().any(|&a| a >= state_dim) {
                    return bad("axis out of range".into());
                }
                if mean.len() != channels || std.len() != channels {
                    return bad(format!("mean and std need {channels} entries"));
                }
                if std.iter().any(|s| *s < 0.0) || *ramp < 0.0 || lo.iter().zip(hi).any(|(l, h)| l >= h) {
                    return bad("negative std or ramp, or empty region".into());
                }
            }
        }
        Ok(Self { spec, channels })
    }

    pub fn spec(&self) -> &WindSpec {
        &self.spec
    }

    /// Mean and standard deviation per channel at state `x` and time `t`.
    pub fn moments(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; self.channels];
        let mut std = vec![0.0; self.channels];
        if self.spec.onset().is_none_or(|onset| t < onset) {
            return (mean, std);
        }
        match &self.spec {
            WindSpec::Calm => {}
            WindSpec::Altitude { altitude_index, channel, w0, a0, s0, .. } => {
                let shape = (1.0 - x[*altitude_index] / a0).max(0.0);
                mean[*channel] = w0 * shape;
                std[*channel] = s0 * shape;
            }
            WindSpec::Region { axes, lo, hi, ramp, mean: m, std: s, .. } => {
                let mut w = 1.0;
                for k in 0..2 {
                    let inside = (x[axes[k]] - lo[k]).min(hi[k] - x[axes[k]]);
                    w *= if *ramp > 0.0 { smoothstep(inside / ramp) } else if inside >= 0.0 { 1.0 } else { 0.0 };
                }
                for c in 0..self.channels {
                    mean[c] = w * m[c];
                    std[c] = w * s[c];
                }
            }
        }
        (mean, std)
    }

    /// One draw per channel. Always consumes one normal variate per channel so
    /// the random stream does not depend on where the vehicle is.
    pub fn sample<R: Rng>(&self, x: &[f64], t: f64, rng: &mut R) -> Vec<f64> {
        let (mean, std) = self.moments(x, t);
        mean.iter()
            .zip(&std)
            .map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn altitude() -> WindField {
        let spec = WindSpec::Altitude { altitude_index: 0, channel: 0, w0: 1.5, a0: 1.2, s0: 0.2, onset: 1.0 };
        WindField::new(spec, 1, 2).unwrap()
    }

    #[test]
    fn altitude_profile() {
        let w = altitude();
        assert_eq!(w.moments(&[0.0, 0.0], 0.5), (vec![0.0], vec![0.0]));
        let (m, s) = w.moments(&[0.0, 0.0], 1.0);
        assert_relative_eq!(m[0], 1.5);
        assert_relative_eq!(s[0], 0.2);
        let (m, _) = w.moments(&[0.6, 0.0], 2.0);
        assert_relative_eq!(m[0], 0.75);
        assert_eq!(w.moments(&[2.0, 0.0], 2.0), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn region_ramp() {
        let spec = WindSpec::Region {
            axes: [0, 1],
            lo: [-2.5, -2.5],
            hi: [-1.0, -1.0],
            ramp: 0.25,
            mean: vec![0.7, 0.7, 0.0],
            std: vec![0.1, 0.1, 0.0],
            onset: 0.0,
        };
        let w = WindField::new(spec, 3, 4).unwrap();
        assert_eq!(w.moments(&[-1.75, -1.75, 0.0, 0.0], 1.0).0, vec![0.7, 0.7, 0.0]);
        assert_eq!(w.moments(&[0.0, -1.75, 0.0, 0.0], 1.0).0, vec![0.0, 0.0, 0.0]);
        let half = w.moments(&[-1.125, -1.75, 0.0, 0.0], 1.0).0;
        assert_relative_eq!(half[0], 0.35, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        let w = altitude();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| w.sample(&[0.3, 0.0], 2.0, &mut rng)[0]).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn sample_mean_matches() {
        let w = altitude();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let mean = (0..n).map(|_| w.sample(&[0.3, 0.0], 2.0, &mut rng)[0]).sum::<f64>() / n as f64;
        let (m, s) = w.moments(&[0.3, 0.0], 2.0);
        assert!((mean - m[0]).abs() < 3.0 * s[0] / (n as f64).sqrt());
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = WindSpec::Altitude { altitude_index: 5, channel: 0, w0: 1.0, a0: 1.0, s0: 0.1, onset: 0.0 };
        assert!(WindField::new(spec, 1, 2).is_err());
        let spec = WindSpec::Altitude { altitude_index: 0, channel: 0, w0: 1.0, a0: 0.0, s0: 0.1, onset: 0.0 };
        assert!(WindField::new(spec, 1, 2).is_err());
    }
}
