//! Average-pool / nearest-neighbour pyramid and its band decomposition.
//!
//! `D` averages 2x2 blocks and `U` replicates each pixel into a 2x2 block, so
//! `DU = I` while `UD` is the orthogonal projection onto block-constant fields.
//! Band `m` is `U^m D^m g - U^{m+1} D^{m+1} g`, stored at full resolution.

use crate::chroma::ChromatographyProfile;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// 2x2 average pooling, channel-wise.
pub fn downsample(g: &Grid) -> Result<Grid> {
    let side = g.side();
    if side < 2 {
        return Err(Error::Size("cannot downsample a 1x1 grid".into()));
    }
    let half = side / 2;
    let ch = g.channels();
    let src = g.data();
    let mut out = vec![0.0; half * half * ch];
    for y in 0..half {
        for x in 0..half {
            for c in 0..ch {
                let at = |yy: usize, xx: usize| src[(yy * side + xx) * ch + c];
                let (a, b) = (at(2 * y, 2 * x), at(2 * y, 2 * x + 1));
                let (d, e) = (at(2 * y + 1, 2 * x), at(2 * y + 1, 2 * x + 1));
                out[(y * half + x) * ch + c] = ((a + b) + (d + e)) * 0.25;
            }
        }
    }
    Grid::from_vec(half, ch, out)
}

/// Nearest-neighbour 2x upsampling, channel-wise.
pub fn upsample(g: &Grid) -> Grid {
    upsample_to(g, g.side() * 2)
}

/// Replicates each pixel of `g` into a block so the result has side `side`.
pub(crate) fn upsample_to(g: &Grid, side: usize) -> Grid {
    let s = g.side();
    let ch = g.channels();
    let f = side / s;
    let src = g.data();
    let mut out = vec![0.0; side * side * ch];
    for y in 0..side {
        for x in 0..side {
            let from = ((y / f) * s + x / f) * ch;
            let to = (y * side + x) * ch;
            out[to..to + ch].copy_from_slice(&src[from..from + ch]);
        }
    }
    Grid::from_vec(side, ch, out).expect("upsampling preserves finiteness")
}

/// `D^k g`, stopping at a single pixel.
pub fn downsample_times(g: &Grid, k: usize) -> Grid {
    let mut cur = g.clone();
    for _ in 0..k {
        if cur.side() == 1 {
            break;
        }
        cur = downsample(&cur).expect("side checked above");
    }
    cur
}

/// `U^k g`.
pub fn upsample_times(g: &Grid, k: usize) -> Grid {
    upsample_to(g, g.side() << k)
}

/// The projection `U^k D^k g`. Beyond `log2(side)` it stays the global mean.
pub fn project(g: &Grid, k: usize) -> Grid {
    upsample_to(&downsample_times(g, k), g.side())
}

/// Maximum number of bands for a side: `log2(side) + 1`.
pub fn max_levels(side: usize) -> usize {
    side.trailing_zeros() as usize + 1
}

/// Bands `0..M` at full resolution plus the remainder `U^M D^M g`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    pub bands: Vec<Grid>,
    pub residual_mean: Grid,
}

impl BandStack {
    pub fn reconstruct(&self) -> Grid {
        let mut out = self.residual_mean.clone();
        for b in &self.bands {
            out.axpy(1.0, b).expect("bands share a shape");
        }
        out
    }
}

/// Splits `g` into `levels` bands plus the residual mean.
pub fn band_decompose(g: &Grid, levels: usize) -> Result<BandStack> {
    let max = max_levels(g.side());
    if levels == 0 || levels > max {
        return Err(Error::Size(format!(
            "{levels} levels requested for side {}; allowed 1..={max}",
            g.side()
        )));
    }
    let mut coarse = g.clone();
    let mut prev = g.clone();
    let mut bands = Vec::with_capacity(levels);
    for _ in 0..levels {
        if coarse.side() > 1 {
            coarse = downsample(&coarse)?;
        }
        let next = upsample_to(&coarse, g.side());
        bands.push(prev.sub(&next)?);
        prev = next;
    }
    Ok(BandStack {
        bands,
        residual_mean: prev,
    })
}

/// Squared L2 norm of every band.
pub fn band_energies(b: &BandStack) -> Vec<f64> {
    b.bands.iter().map(Grid::norm_sq).collect()
}

/// Normalized band-energy profile of a sequence of fields.
///
/// The residual mean is left out of the normalization unless
/// `include_residual` is set, in which case it is normalized together with the
/// bands and reported in [`ChromatographyProfile::residual`].
pub fn measured_chromatography(
    fields: &[(f64, Grid)],
    levels: usize,
    include_residual: bool,
) -> Result<ChromatographyProfile> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Argument("no fields given".into()))?;
    for (_, g) in fields {
        first.1.check_shape(g)?;
    }
    let mut times = Vec::with_capacity(fields.len());
    let mut columns = Vec::with_capacity(fields.len());
    for (t, g) in fields {
        let stack = band_decompose(g, levels)?;
        let mut e = band_energies(&stack);
        if include_residual {
            e.push(stack.residual_mean.norm_sq());
        }
        times.push(*t);
        columns.push(e);
    }
    let mut profile = ChromatographyProfile::from_columns(times, columns)?;
    if include_residual {
        profile.residual = profile.values.pop();
    }
    Ok(profile)
}
