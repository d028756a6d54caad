use std::sync::Arc;

use super::{AffineView, DynamicsError, DynamicsModel, Interval};

pub const GRAVITY: f64 = 9.8;

/// Vertical quadcopter: altitude and vertical velocity under normalized thrust.
///
/// `x1' = x2`, `x2' = k_t u + g + k_0 + d` with `g = -9.8` and `u in [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quad2DVert {
    pub k_t: f64,
    pub k_0: f64,
    pub gravity: f64,
    bounds: [Interval; 1],
}

fn unit_thrust() -> [Interval; 1] {
    [Interval::new(0.0, 1.0)]
}

impl Quad2DVert {
    pub fn new(k_t: f64, k_0: f64) -> Self {
        Self { k_t, k_0, gravity: -GRAVITY, bounds: unit_thrust() }
    }

    /// Net vertical acceleration range with `d = 0`.
    pub fn accel_range(&self) -> Interval {
        let base = self.gravity + self.k_0;
        Interval::new(base + self.k_t.min(0.0), base + self.k_t.max(0.0))
    }
}

impl Default for Quad2DVert {
    fn default() -> Self {
        Self::new(19.6, 0.0)
    }
}

impl DynamicsModel for Quad2DVert {
    fn name(&self) -> &str {
        "quad2d_vert"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_bounds(&self) -> &[Interval] {
        &self.bounds
    }
    fn disturbance_dim(&self) -> usize {
        1
    }
    fn state_labels(&self) -> Vec<String> {
        vec!["z".into(), "vz".into()]
    }
    #[inline]
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.k_t * u[0] + self.gravity + self.k_0 + d[0];
    }
    #[inline]
    fn affine_terms(&self, x: &[f64], out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        out.set_drift(0, x[1]);
        out.set_drift(1, self.gravity + self.k_0);
        out.set_control_gain(1, 0, self.k_t);
        out.set_disturbance_gain(1, 0, 1.0);
        Ok(())
    }
}

/// One lateral axis of the near-hover quadcopter: position, velocity, tilt
/// angle and tilt rate, driven by a desired-angle command.
///
/// `p' = v`, `v' = g tan(theta) + d`, `theta' = -d1 theta + omega`,
/// `omega' = -d0 theta + n0 s`, `|s| <= max_angle`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarHover {
    pub gravity: f64,
    pub d0: f64,
    pub d1: f64,
    pub n0: f64,
    max_angle: f64,
    bounds: [Interval; 1],
}

impl PlanarHover {
    pub fn new(gravity: f64, d0: f64, d1: f64, n0: f64, max_angle: f64) -> Self {
        Self { gravity, d0, d1, n0, max_angle, bounds: [Interval::symmetric(max_angle)] }
    }

    pub fn max_angle(&self) -> f64 {
        self.max_angle
    }
}

impl Default for PlanarHover {
    fn default() -> Self {
        Self::new(GRAVITY, 10.0, 8.0, 10.0, 14f64.to_radians())
    }
}

impl DynamicsModel for PlanarHover {
    fn name(&self) -> &str {
        "planar_hover"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_bounds(&self) -> &[Interval] {
        &self.bounds
    }
    fn disturbance_dim(&self) -> usize {
        1
    }
    fn state_labels(&self) -> Vec<String> {
        vec!["p".into(), "v".into(), "theta".into(), "omega".into()]
    }
    #[inline]
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.gravity * x[2].tan() + d[0];
        out[2] = -self.d1 * x[2] + x[3];
        out[3] = -self.d0 * x[2] + self.n0 * u[0];
    }
    #[inline]
    fn affine_terms(&self, x: &[f64], out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        out.set_drift(0, x[1]);
        out.set_drift(1, self.gravity * x[2].tan());
        out.set_drift(2, -self.d1 * x[2] + x[3]);
        out.set_drift(3, -self.d0 * x[2]);
        out.set_control_gain(3, 0, self.n0);
        out.set_disturbance_gain(1, 0, 1.0);
        Ok(())
    }
}

/// Vertical axis of the near-hover quadcopter.
///
/// `p' = v`, `v' = thrust_gain * T - g + d` with `T` in `[thrust_min, thrust_max]`.
/// The thrust command is mass-normalized (`thrust_gain = k_T / m = 1`), so the
/// default bounds `[0.6 g, 1.4 g]` give a net acceleration of `+-0.4 g`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalHover {
    pub gravity: f64,
    pub thrust_gain: f64,
    thrust_min: f64,
    thrust_max: f64,
    bounds: [Interval; 1],
}

impl VerticalHover {
    pub fn new(gravity: f64, thrust_gain: f64, thrust_min: f64, thrust_max: f64) -> Self {
        Self { gravity, thrust_gain, thrust_min, thrust_max, bounds: [Interval::new(thrust_min, thrust_max)] }
    }

    pub fn thrust_range(&self) -> Interval {
        self.bounds[0]
    }

    pub fn hover_thrust(&self) -> f64 {
        self.gravity / self.thrust_gain
    }
}

impl Default for VerticalHover {
    fn default() -> Self {
        Self::new(GRAVITY, 1.0, 0.6 * GRAVITY, 1.4 * GRAVITY)
    }
}

impl DynamicsModel for VerticalHover {
    fn name(&self) -> &str {
        "vertical_hover"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_bounds(&self) -> &[Interval] {
        &self.bounds
    }
    fn disturbance_dim(&self) -> usize {
        1
    }
    fn state_labels(&self) -> Vec<String> {
        vec!["pz".into(), "vz".into()]
    }
    #[inline]
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.thrust_gain * u[0] - self.gravity + d[0];
    }
    #[inline]
    fn affine_terms(&self, x: &[f64], out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        out.set_drift(0, x[1]);
        out.set_drift(1, -self.gravity);
        out.set_control_gain(1, 0, self.thrust_gain);
        out.set_disturbance_gain(1, 0, 1.0);
        Ok(())
    }
}

/// `p' = v`, `v' = a + d` with `a in [a_min, a_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleIntegrator {
    a_min: f64,
    a_max: f64,
    bounds: [Interval; 1],
}

impl DoubleIntegrator {
    pub fn new(a_min: f64, a_max: f64) -> Self {
        Self { a_min, a_max, bounds: [Interval::new(a_min, a_max)] }
    }
}

impl DynamicsModel for DoubleIntegrator {
    fn name(&self) -> &str {
        "double_integrator"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_bounds(&self) -> &[Interval] {
        &self.bounds
    }
    fn disturbance_dim(&self) -> usize {
        1
    }
    fn state_labels(&self) -> Vec<String> {
        vec!["p".into(), "v".into()]
    }
    #[inline]
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = u[0] + d[0];
    }
    #[inline]
    fn affine_terms(&self, x: &[f64], out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        out.set_drift(0, x[1]);
        out.set_control_gain(1, 0, 1.0);
        out.set_disturbance_gain(1, 0, 1.0);
        Ok(())
    }
}

/// Decoupled composition: states, controls and disturbances of the parts are
/// concatenated in order, and each part's flow sees only its own block.
#[derive(Clone, Debug)]
pub struct ProductModel {
    name: String,
    parts: Vec<Arc<dyn DynamicsModel>>,
    state_offsets: Vec<usize>,
    control_offsets: Vec<usize>,
    disturbance_offsets: Vec<usize>,
    bounds: Vec<Interval>,
    labels: Vec<String>,
}

impl ProductModel {
    pub fn new(name: impl Into<String>, parts: Vec<Arc<dyn DynamicsModel>>) -> Self {
        let mut state_offsets = vec![0];
        let mut control_offsets = vec![0];
        let mut disturbance_offsets = vec![0];
        let mut bounds = Vec::new();
        let mut labels = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            state_offsets.push(state_offsets[i] + p.state_dim());
            control_offsets.push(control_offsets[i] + p.control_dim());
            disturbance_offsets.push(disturbance_offsets[i] + p.disturbance_dim());
            bounds.extend_from_slice(p.control_bounds());
            labels.extend(p.state_labels().into_iter().map(|l| format!("{l}{i}")));
        }
        Self { name: name.into(), parts, state_offsets, control_offsets, disturbance_offsets, bounds, labels }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        assert_eq!(labels.len(), self.state_dim());
        self.labels = labels;
        self
    }

    pub fn parts(&self) -> &[Arc<dyn DynamicsModel>] {
        &self.parts
    }

    pub fn state_range(&self, part: usize) -> std::ops::Range<usize> {
        self.state_offsets[part]..self.state_offsets[part + 1]
    }

    pub fn control_range(&self, part: usize) -> std::ops::Range<usize> {
        self.control_offsets[part]..self.control_offsets[part + 1]
    }

    pub fn disturbance_range(&self, part: usize) -> std::ops::Range<usize> {
        self.disturbance_offsets[part]..self.disturbance_offsets[part + 1]
    }
}

impl DynamicsModel for ProductModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn state_dim(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }
    fn control_bounds(&self) -> &[Interval] {
        &self.bounds
    }
    fn disturbance_dim(&self) -> usize {
        *self.disturbance_offsets.last().unwrap()
    }
    fn state_labels(&self) -> Vec<String> {
        self.labels.clone()
    }
    fn flow_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        for (i, p) in self.parts.iter().enumerate() {
            let (s, c, w) = (self.state_range(i), self.control_range(i), self.disturbance_range(i));
            p.flow_into(&x[s.clone()], &u[c], &d[w], &mut out[s]);
        }
    }
    fn affine_terms(&self, x: &[f64], out: &mut AffineView<'_>) -> Result<(), DynamicsError> {
        for (i, p) in self.parts.iter().enumerate() {
            let s = self.state_range(i);
            let mut block = out.block(s.start, self.control_offsets[i], self.disturbance_offsets[i]);
            p.affine_terms(&x[s], &mut block)?;
        }
        Ok(())
    }
}

/// Full 10-state near-hover quadcopter ordered
/// `(px, vx, thx, wx, py, vy, thy, wy, pz, vz)` with controls `(Sx, Sy, Tz)`
/// and disturbances `(dx, dy, dz)`.
pub fn near_hover_10d(lateral: PlanarHover, vertical: VerticalHover) -> ProductModel {
    let labels = ["px", "vx", "thx", "wx", "py", "vy", "thy", "wy", "pz", "vz"].map(String::from).to_vec();
    ProductModel::new("near_hover_10d", vec![Arc::new(lateral.clone()), Arc::new(lateral), Arc::new(vertical)])
        .with_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow;

    #[test]
    fn product_flow_is_blockwise() {
        let m = near_hover_10d(PlanarHover::default(), VerticalHover::default());
        assert_eq!(m.state_dim(), 10);
        assert_eq!(m.control_dim(), 3);
        assert_eq!(m.disturbance_dim(), 3);
        let x = [0.1, 0.2, 0.05, 0.0, -0.3, 0.4, -0.02, 0.1, 1.5, -0.5];
        let u = [0.1, -0.05, 9.8];
        let d = [0.2, -0.1, 0.05];
        let f = flow(&m, &x, &u, &d).unwrap();
        let fx = flow(&PlanarHover::default(), &x[0..4], &u[0..1], &d[0..1]).unwrap();
        let fy = flow(&PlanarHover::default(), &x[4..8], &u[1..2], &d[1..2]).unwrap();
        let fz = flow(&VerticalHover::default(), &x[8..10], &u[2..3], &d[2..3]).unwrap();
        assert_eq!(&f[0..4], &fx[..]);
        assert_eq!(&f[4..8], &fy[..]);
        assert_eq!(&f[8..10], &fz[..]);
        assert_eq!(fz[1], 0.05);
    }

    #[test]
    fn vertical_hover_thrust_range() {
        let z = VerticalHover::default();
        assert_eq!(z.hover_thrust(), GRAVITY);
        let lo = flow(&z, &[1.0, 0.0], &[z.thrust_range().lo], &[0.0]).unwrap()[1];
        let hi = flow(&z, &[1.0, 0.0], &[z.thrust_range().hi], &[0.0]).unwrap()[1];
        assert!((lo + 0.4 * GRAVITY).abs() < 1e-12 && (hi - 0.4 * GRAVITY).abs() < 1e-12);
    }

    #[test]
    fn quad_accel_range() {
        assert_eq!(Quad2DVert::default().accel_range(), Interval::new(-9.8, 9.8));
    }
}
