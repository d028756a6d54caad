//! Disturbance bounds `D(x)`: per-node interval fields, measurement logs and
//! the Gaussian-process model that produces the bounds from data.

pub mod gp;

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dynamics::Interval;
use crate::grid::{Grid, GridError, ScalarField};
use crate::hjvf::{self, FormatError};

pub use gp::{GpError, GpHyper, GpInput, GpModel, HyperPolicy, HyperSearch, Prediction};

#[derive(Debug, Error)]
pub enum DisturbanceError {
    #[error("interval field channel {channel} has lo > hi at node {node}")]
    Inverted { channel: usize, node: usize },
    #[error("interval field needs at least one channel")]
    NoChannels,
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("measurement csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("measurement csv: {0}")]
    Schema(String),
}

/// Per-node, per-channel disturbance interval on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalField {
    grid: Grid,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
}

impl IntervalField {
    pub fn new(channels: Vec<(ScalarField, ScalarField)>) -> Result<Self, DisturbanceError> {
        let grid = channels.first().ok_or(DisturbanceError::NoChannels)?.0.grid().clone();
        let mut lo = Vec::with_capacity(channels.len());
        let mut hi = Vec::with_capacity(channels.len());
        for (channel, (l, h)) in channels.into_iter().enumerate() {
            if l.grid() != &grid || h.grid() != &grid {
                return Err(GridError::GridMismatch.into());
            }
            if let Some(node) = l.values().iter().zip(h.values()).position(|(a, b)| a > b) {
                return Err(DisturbanceError::Inverted { channel, node });
            }
            lo.push(l.into_values());
            hi.push(h.into_values());
        }
        Ok(Self { grid, lo, hi })
    }

    /// The same interval at every node.
    pub fn uniform(grid: &Grid, bounds: &[Interval]) -> Self {
        let n = grid.len();
        Self {
            grid: grid.clone(),
            lo: bounds.iter().map(|b| vec![b.lo; n]).collect(),
            hi: bounds.iter().map(|b| vec![b.hi; n]).collect(),
        }
    }

    /// Concatenates single-channel fields that share a grid.
    pub fn stack(parts: Vec<IntervalField>) -> Result<Self, DisturbanceError> {
        let grid = parts.first().ok_or(DisturbanceError::NoChannels)?.grid.clone();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for p in parts {
            if p.grid != grid {
                return Err(GridError::GridMismatch.into());
            }
            lo.extend(p.lo);
            hi.extend(p.hi);
        }
        Ok(Self { grid, lo, hi })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.lo.len()
    }

    #[inline]
    pub fn at_node(&self, flat: usize, out: &mut [Interval]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = Interval::new(self.lo[k][flat], self.hi[k][flat]);
        }
    }

    pub fn lo_field(&self, channel: usize) -> ScalarField {
        ScalarField::from_parts(self.grid.clone(), self.lo[channel].clone())
    }

    pub fn hi_field(&self, channel: usize) -> ScalarField {
        ScalarField::from_parts(self.grid.clone(), self.hi[channel].clone())
    }

    /// Interpolated intervals at `x` and whether `x` was clamped to the grid.
    pub fn at(&self, x: &[f64]) -> Result<(Vec<Interval>, bool), GridError> {
        let mut out = Vec::with_capacity(self.channels());
        let mut clamped = false;
        for k in 0..self.channels() {
            let l = self.lo_field(k).interp(x)?;
            let h = self.hi_field(k).interp(x)?;
            clamped |= l.out_of_domain;
            out.push(Interval::new(l.value, h.value));
        }
        Ok((out, clamped))
    }

    pub fn resample(&self, target: &Grid) -> Result<IntervalField, GridError> {
        let mut lo = Vec::with_capacity(self.channels());
        let mut hi = Vec::with_capacity(self.channels());
        for k in 0..self.channels() {
            lo.push(self.lo_field(k).resample(target)?.into_values());
            hi.push(self.hi_field(k).resample(target)?.into_values());
        }
        Ok(Self { grid: target.clone(), lo, hi })
    }

    /// Every interval of `other` lies inside the corresponding one here.
    pub fn encloses(&self, other: &IntervalField) -> bool {
        self.grid == other.grid
            && self.channels() == other.channels()
            && (0..self.channels()).all(|k| {
                self.lo[k].iter().zip(&other.lo[k]).all(|(a, b)| a <= b)
                    && self.hi[k].iter().zip(&other.hi[k]).all(|(a, b)| a >= b)
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.lo.iter().chain(&self.hi).flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes `<stem>_lo<k>.hjvf` and `<stem>_hi<k>.hjvf` per channel.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<std::path::PathBuf>, DisturbanceError> {
        let mut paths = Vec::new();
        for k in 0..self.channels() {
            let lo = dir.as_ref().join(format!("{stem}_lo{k}.hjvf"));
            let hi = dir.as_ref().join(format!("{stem}_hi{k}.hjvf"));
            hjvf::save(&lo, &self.lo_field(k))?;
            hjvf::save(&hi, &self.hi_field(k))?;
            paths.push(lo);
            paths.push(hi);
        }
        Ok(paths)
    }

    /// Loads `(lo, hi)` HJVF path pairs, one per channel.
    pub fn load(pairs: &[(impl AsRef<Path>, impl AsRef<Path>)]) -> Result<Self, DisturbanceError> {
        let channels = pairs
            .iter()
            .map(|(l, h)| Ok((hjvf::load(l)?, hjvf::load(h)?)))
            .collect::<Result<Vec<_>, FormatError>>()?;
        Self::new(channels)
    }
}

/// Outcome of comparing one measurement against the current bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ViolationCheck {
    pub inside: bool,
    /// Smallest signed distance to an interval edge across channels; negative
    /// when outside.
    pub margin: f64,
    pub per_channel: Vec<f64>,
    pub out_of_domain: bool,
}

pub fn violation_check(field: &IntervalField, x: &[f64], measured: &[f64]) -> Result<ViolationCheck, DisturbanceError> {
    if measured.len() != field.channels() {
        return Err(DisturbanceError::ChannelCount { expected: field.channels(), got: measured.len() });
    }
    let (bounds, out_of_domain) = field.at(x)?;
    let per_channel: Vec<f64> = bounds.iter().zip(measured).map(|(b, &d)| (d - b.lo).min(b.hi - d)).collect();
    let margin = per_channel.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ViolationCheck { inside: margin >= 0.0, margin, per_channel, out_of_domain })
}

/// One disturbance sample: state (or the part of it the disturbance depends
/// on) and the measured disturbance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub x: Vec<f64>,
    pub d: Vec<f64>,
}

/// CSV with header `t,x_0..x_{n-1},d_0..d_{m-1}`.
pub fn write_measurements<W: Write>(w: W, data: &[Measurement]) -> Result<(), DisturbanceError> {
    let mut out = csv::Writer::from_writer(w);
    if let Some(first) = data.first() {
        let mut header = vec!["t".to_string()];
        header.extend((0..first.x.len()).map(|i| format!("x_{i}")));
        header.extend((0..first.d.len()).map(|i| format!("d_{i}")));
        out.write_record(&header)?;
    }
    for m in data {
        let row: Vec<String> = std::iter::once(m.t).chain(m.x.iter().copied()).chain(m.d.iter().copied()).map(|v| v.to_string()).collect();
        out.write_record(&row)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_measurements<R: Read>(r: R) -> Result<Vec<Measurement>, DisturbanceError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let mut xs = Vec::new();
    let mut ds = Vec::new();
    let mut t_col = None;
    for (i, h) in header.iter().enumerate() {
        match h.trim() {
            "t" => t_col = Some(i),
            s if s.starts_with("x_") => xs.push(i),
            s if s.starts_with("d_") => ds.push(i),
            other => return Err(DisturbanceError::Schema(format!("unknown column `{other}`"))),
        }
    }
    let t_col = t_col.ok_or_else(|| DisturbanceError::Schema("missing `t` column".into()))?;
    if xs.is_empty() || ds.is_empty() {
        return Err(DisturbanceError::Schema("need at least one x_ and one d_ column".into()));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, DisturbanceError> {
            let v: f64 = rec[i].trim().parse().map_err(|_| DisturbanceError::Schema(format!("bad number `{}`", &rec[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DisturbanceError::Schema("non-finite value".into()))
            }
        };
        out.push(Measurement {
            t: num(t_col)?,
            x: xs.iter().map(|&i| num(i)).collect::<Result<_, _>>()?,
            d: ds.iter().map(|&i| num(i)).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn line() -> Grid {
        Grid::new(vec![Axis::new(0.0, 1.0, 5)]).unwrap()
    }

    #[test]
    fn violation_examples() {
        let g = line();
        let f = IntervalField::uniform(&g, &[Interval::new(-0.3, 0.3)]);
        let c = violation_check(&f, &[0.5], &[0.0]).unwrap();
        assert!(c.inside);
        assert!((c.margin - 0.3).abs() < 1e-12);
        let c = violation_check(&f, &[0.5], &[0.4]).unwrap();
        assert!(!c.inside);
        assert!((c.margin + 0.1).abs() < 1e-12);
        let c = violation_check(&f, &[0.5], &[0.3]).unwrap();
        assert!(c.inside);
        assert_eq!(c.margin, 0.0);
        assert!(violation_check(&f, &[0.5], &[0.3, 0.1]).is_err());
    }

    #[test]
    fn inverted_interval_rejected() {
        let g = line();
        let lo = ScalarField::constant(g.clone(), 1.0);
        let hi = ScalarField::constant(g, 0.0);
        assert!(matches!(IntervalField::new(vec![(lo, hi)]), Err(DisturbanceError::Inverted { .. })));
    }

    #[test]
    fn enclosure_and_stack() {
        let g = line();
        let wide = IntervalField::uniform(&g, &[Interval::symmetric(1.0)]);
        let narrow = IntervalField::uniform(&g, &[Interval::symmetric(0.5)]);
        assert!(wide.encloses(&narrow));
        assert!(!narrow.encloses(&wide));
        let two = IntervalField::stack(vec![wide, narrow]).unwrap();
        assert_eq!(two.channels(), 2);
        let mut buf = [Interval::new(0.0, 0.0); 2];
        two.at_node(3, &mut buf);
        assert_eq!(buf, [Interval::symmetric(1.0), Interval::symmetric(0.5)]);
    }

    #[test]
    fn measurement_csv_round_trip() {
        let data = vec![
            Measurement { t: 0.0, x: vec![1.0, -0.5], d: vec![0.25] },
            Measurement { t: 0.01, x: vec![1.1, -0.25], d: vec![-0.125] },
        ];
        let mut buf = Vec::new();
        write_measurements(&mut buf, &data).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,x_0,x_1,d_0\n"));
        assert_eq!(read_measurements(&buf[..]).unwrap(), data);
        assert!(read_measurements(&b"t,y_0,d_0\n0,1,2\n"[..]).is_err());
    }

    #[test]
    fn save_and_load_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let g = line();
        let lo = ScalarField::from_fn(g.clone(), |x| -x[0]).unwrap();
        let hi = ScalarField::from_fn(g, |x| x[0] + 0.1).unwrap();
        let f = IntervalField::new(vec![(lo, hi)]).unwrap();
        let paths = f.save(dir.path(), "bounds").unwrap();
        let back = IntervalField::load(&[(&paths[0], &paths[1])]).unwrap();
        assert_eq!(back, f);
    }
}
