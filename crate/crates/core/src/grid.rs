//! Square multi-channel fields with power-of-two side.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RCG1";

/// A `side x side x channels` field of reals, row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    side: usize,
    channels: usize,
    data: Vec<f64>,
}

pub(crate) fn check_side(side: usize) -> Result<()> {
    if side == 0 || !side.is_power_of_two() {
        return Err(Error::Size(format!("side {side} is not a positive power of two")));
    }
    Ok(())
}

impl Grid {
    pub fn zeros(side: usize, channels: usize) -> Result<Self> {
        Self::filled(side, channels, 0.0)
    }

    pub fn filled(side: usize, channels: usize, value: f64) -> Result<Self> {
        check_side(side)?;
        if channels == 0 {
            return Err(Error::Size("a grid needs at least one channel".into()));
        }
        Ok(Self {
            side,
            channels,
            data: vec![value; side * side * channels],
        })
    }

    pub fn from_vec(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        if channels == 0 || data.len() != side * side * channels {
            return Err(Error::Size(format!(
                "{} values do not fill a {side}x{side}x{channels} grid",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("value {} at index {i} is not finite", data[i])));
        }
        Ok(Self { side, channels, data })
    }

    /// Builds a single-channel grid from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(Error::Size("rows do not form a square".into()));
        }
        Self::from_vec(side, 1, rows.concat())
    }

    /// Single-channel grid with `f(y, x)` at each pixel.
    pub fn from_fn(side: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        check_side(side)?;
        let data = (0..side * side).map(|i| f(i / side, i % side)).collect();
        Ok(Self { side, channels: 1, data })
    }

    /// I.i.d. standard-normal field.
    pub fn standard_normal<R: Rng + ?Sized>(side: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let mut g = Self::zeros(side, channels)?;
        for v in &mut g.data {
            *v = rng.sample(StandardNormal);
        }
        Ok(g)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.side + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.side == other.side && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Size(format!(
                "shape {}x{}x{} does not match {}x{}x{}",
                self.side, self.side, self.channels, other.side, other.side, other.channels
            )))
        }
    }

    /// Copies out one channel as a single-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Grid {
            side: self.side,
            channels: 1,
            data,
        }
    }

    /// Interleaves single-channel grids of equal side.
    pub fn from_channels(parts: &[Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("no channels given".into()))?;
        let side = first.side;
        if parts.iter().any(|p| p.side != side || p.channels != 1) {
            return Err(Error::Size("channel grids must be single-channel with equal side".into()));
        }
        let channels = parts.len();
        let mut data = vec![0.0; side * side * channels];
        for (c, p) in parts.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Ok(Grid { side, channels, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            side: self.side,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_shape(other)?;
        Ok(Grid {
            side: self.side,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Grid {
        self.map(|v| k * v)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Grid, b: f64) -> Result<Grid> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Grid) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all entries.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Grid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Writes the `RCG1` binary format: magic, u32 LE side, u32 LE channels, f32 LE values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.side as u32).to_le_bytes());
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Grid> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("file is shorter than the 12-byte header".into()))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("missing RCG1 magic".into()));
        }
        let side = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        check_side(side).map_err(|e| Error::Format(e.to_string()))?;
        if channels == 0 {
            return Err(Error::Format("channel count is zero".into()));
        }
        let n = side * side * channels;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Grid::from_vec(side, channels, data).map_err(|e| Error::Format(e.to_string()))
    }
}
