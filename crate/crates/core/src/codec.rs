//! Reversible trajectory-to-grid transformation.
//!
//! A trajectory of at most `max_len` points is min-max normalised per feature
//! and written row-major into a `side x side x 4` block, `side = ceil(sqrt(max_len))`.
//! Unused cells are zero and flagged in a validity mask. For the network the
//! block is upsampled by replicating every cell into a 2x2 square; reversion
//! picks the top-left cell of each square and denormalises.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Point, Trajectory};
use crate::error::{Error, Result};

/// Features per cell: latitude, longitude, day, hour.
pub const CHANNELS: usize = 4;

const GRID_MAGIC: [u8; 4] = *b"RTCG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub min: f64,
    pub max: f64,
}

impl FeatureBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        check_bounds(min, max)?;
        Ok(FeatureBounds { min, max })
    }
}

/// Per-feature min/max bounds. Spatial bounds come from a public bounding
/// box; temporal bounds are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub lat: FeatureBounds,
    pub lon: FeatureBounds,
    pub day: FeatureBounds,
    pub hour: FeatureBounds,
}

impl NormalizationSpec {
    pub fn from_bbox(bbox: &BoundingBox) -> Result<Self> {
        bbox.validate()?;
        Ok(NormalizationSpec {
            lat: FeatureBounds::new(bbox.lat_min, bbox.lat_max)?,
            lon: FeatureBounds::new(bbox.lon_min, bbox.lon_max)?,
            day: FeatureBounds { min: 0.0, max: 6.0 },
            hour: FeatureBounds { min: 0.0, max: 23.0 },
        })
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            lat_min: self.lat.min,
            lat_max: self.lat.max,
            lon_min: self.lon.min,
            lon_max: self.lon.max,
        }
    }

    fn channels(&self) -> [FeatureBounds; CHANNELS] {
        [self.lat, self.lon, self.day, self.hour]
    }

    /// Normalised (lat, lon) of a point, without clamping.
    pub fn spatial(&self, p: &Point) -> [f64; 2] {
        [
            (p.lat - self.lat.min) / (self.lat.max - self.lat.min),
            (p.lon - self.lon.min) / (self.lon.max - self.lon.min),
        ]
    }
}

fn check_bounds(min: f64, max: f64) -> Result<()> {
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(Error::arg(format!(
            "normalisation bounds need min < max, got ({min}, {max})"
        )));
    }
    Ok(())
}

/// `(f - min) / (max - min)`, clamped to `[0, 1]`.
pub fn normalize(f: f64, min: f64, max: f64) -> Result<f64> {
    check_bounds(min, max)?;
    Ok(((f - min) / (max - min)).clamp(0.0, 1.0))
}

/// `v * (max - min) + min` for `v` clamped to `[0, 1]`.
pub fn denormalize(v: f64, min: f64, max: f64) -> Result<f64> {
    check_bounds(min, max)?;
    Ok(v.clamp(0.0, 1.0) * (max - min) + min)
}

/// Side length of the square grid holding `max_len` points.
pub fn grid_side(max_len: usize) -> usize {
    let mut side = (max_len as f64).sqrt().ceil() as usize;
    // guard against sqrt rounding for perfect squares
    while side * side < max_len {
        side += 1;
    }
    while side > 0 && (side - 1) * (side - 1) >= max_len {
        side -= 1;
    }
    side
}

/// A `side x side x channels` block stored row-major as (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct GridBlock {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl GridBlock {
    pub fn zeros(side: usize, channels: usize) -> Self {
        GridBlock {
            side,
            channels,
            values: vec![0.0; side * side * channels],
        }
    }

    pub fn from_values(side: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side * channels {
            return Err(Error::Shape {
                op: "grid",
                expected: vec![side, side, channels],
                actual: vec![values.len()],
            });
        }
        Ok(GridBlock { side, channels, values })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.side + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[self.index(row, col, ch)]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = self.index(row, col, 0);
        &self.values[start..start + self.channels]
    }

    /// Serialises as a 16-byte header (magic, side, channels, length as
    /// little-endian u32) followed by little-endian f32 values.
    pub fn write_to(&self, length: usize, mut w: impl Write) -> Result<()> {
        w.write_all(&GRID_MAGIC)?;
        for v in [self.side, self.channels, length] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`GridBlock::write_to`]; returns the block and the stored length.
    pub fn read_from(mut r: impl Read) -> Result<(GridBlock, usize)> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..4] != GRID_MAGIC {
            return Err(Error::arg("not a grid file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (side, channels, length) = (word(4), word(8), word(12));
        let mut raw = vec![0u8; side * side * channels * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((GridBlock::from_values(side, channels, values)?, length))
    }
}

/// Encoded trajectory: normalised grid plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajGrid {
    pub block: GridBlock,
    /// `length` ones followed by zeros, one entry per sequence slot.
    pub mask: Vec<u8>,
    pub length: usize,
}

/// Replicated grid of side `2 * side`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpscaledGrid(pub GridBlock);

/// Encodes `t` row-major into a zero post-padded grid.
pub fn encode(t: &Trajectory, spec: &NormalizationSpec, max_len: usize) -> Result<TrajGrid> {
    if t.len() > max_len {
        return Err(Error::arg(format!(
            "trajectory {} has {} points, more than max_len {max_len}",
            t.id,
            t.len()
        )));
    }
    let side = grid_side(max_len);
    let mut block = GridBlock::zeros(side, CHANNELS);
    let bounds = spec.channels();
    for (j, p) in t.points.iter().enumerate() {
        let base = j * CHANNELS;
        let features = [p.lat, p.lon, p.day as f64, p.hour as f64];
        for (ch, (&f, b)) in features.iter().zip(&bounds).enumerate() {
            block.values[base + ch] = normalize(f, b.min, b.max)?;
        }
    }
    let mut mask = vec![0u8; max_len];
    mask[..t.len()].fill(1);
    Ok(TrajGrid {
        block,
        mask,
        length: t.len(),
    })
}

/// Copies every cell (r, c) into (2r..2r+2, 2c..2c+2).
pub fn upsample(g: &TrajGrid) -> UpscaledGrid {
    upsample_block(&g.block)
}

pub fn upsample_block(src: &GridBlock) -> UpscaledGrid {
    let mut out = GridBlock::zeros(src.side * 2, src.channels);
    for r in 0..src.side {
        for c in 0..src.side {
            let cell = src.cell(r, c);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = out.index(2 * r + dr, 2 * c + dc, 0);
                out.values[i..i + src.channels].copy_from_slice(cell);
            }
        }
    }
    UpscaledGrid(out)
}

/// Nearest-neighbour reduction keeping the top-left cell of each 2x2 square.
pub fn downsample(u: &UpscaledGrid) -> Result<GridBlock> {
    let src = &u.0;
    if !src.side.is_multiple_of(2) {
        return Err(Error::arg(format!("cannot downsample odd side {}", src.side)));
    }
    let side = src.side / 2;
    let mut out = GridBlock::zeros(side, src.channels);
    for r in 0..side {
        for c in 0..side {
            let i = out.index(r, c, 0);
            out.values[i..i + src.channels].copy_from_slice(src.cell(2 * r, 2 * c));
        }
    }
    Ok(out)
}

/// Reads the first `length` cells row-major and denormalises them. Day and
/// hour are rounded half-up and clamped to their bounds.
pub fn decode(values: &GridBlock, spec: &NormalizationSpec, length: usize) -> Result<Trajectory> {
    if values.channels != CHANNELS {
        return Err(Error::Shape {
            op: "decode",
            expected: vec![values.side, values.side, CHANNELS],
            actual: vec![values.side, values.side, values.channels],
        });
    }
    let cells = values.side * values.side;
    if length == 0 || length > cells {
        return Err(Error::arg(format!("decode length {length} outside 1..={cells}")));
    }
    let round = |v: f64, b: FeatureBounds| -> Result<u8> {
        let f = denormalize(v, b.min, b.max)?;
        Ok((f + 0.5).floor().clamp(b.min, b.max) as u8)
    };
    let points = values.values[..length * CHANNELS]
        .chunks_exact(CHANNELS)
        .map(|cell| {
            Ok(Point {
                lat: denormalize(cell[0], spec.lat.min, spec.lat.max)?,
                lon: denormalize(cell[1], spec.lon.min, spec.lon.max)?,
                day: round(cell[2], spec.day)?,
                hour: round(cell[3], spec.hour)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::new("decoded", points))
}

/// Upsamples the per-slot mask to the `2 * side` square (one value per cell).
pub fn upsample_mask(mask: &[u8], side: usize) -> Vec<u8> {
    let up = 2 * side;
    let mut out = vec![0u8; up * up];
    for (j, &m) in mask.iter().enumerate().take(side * side) {
        let (r, c) = (j / side, j % side);
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            out[(2 * r + dr) * up + 2 * c + dc] = m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn nyc() -> NormalizationSpec {
        NormalizationSpec::from_bbox(&BoundingBox::FS_NYC).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(40.6811, 40.6811, 40.8411).unwrap(), 0.0);
        assert_eq!(normalize(40.8411, 40.6811, 40.8411).unwrap(), 1.0);
        assert!((normalize(40.7611, 40.6811, 40.8411).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(normalize(50.0, 40.6811, 40.8411).unwrap(), 1.0);
        assert!(normalize(1.0, 2.0, 2.0).is_err());
        assert!(normalize(1.0, 3.0, 2.0).is_err());
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize(0.0, 0.0, 23.0).unwrap(), 0.0);
        assert_eq!(denormalize(1.0, 0.0, 6.0).unwrap(), 6.0);
        assert!((denormalize(0.5, 40.6811, 40.8411).unwrap() - 40.7611).abs() < 1e-12);
        assert!(denormalize(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn side_for_common_lengths() {
        assert_eq!(grid_side(144), 12);
        assert_eq!(grid_side(145), 13);
        assert_eq!(grid_side(1), 1);
        assert_eq!(grid_side(96), 10);
    }

    #[test]
    fn encode_single_point_at_minima() {
        let spec = nyc();
        let t = Trajectory::new("a", vec![Point::new(40.6811, -74.0785, 0, 0).unwrap()]);
        let g = encode(&t, &spec, 144).unwrap();
        assert_eq!(g.block.side, 12);
        assert_eq!(g.block.cell(0, 0), &[0.0; 4]);
        assert!(g.block.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.length, 1);
        assert_eq!(g.mask[0], 1);
        assert!(g.mask[1..].iter().all(|&m| m == 0));
    }

    #[test]
    fn encode_row_major_thirteen_points() {
        let spec = nyc();
        let pts = (0..13).map(|_| Point::new(40.8411, -73.8585, 6, 23).unwrap()).collect();
        let g = encode(&Trajectory::new("a", pts), &spec, 144).unwrap();
        for c in 0..12 {
            assert_eq!(g.block.cell(0, c), &[1.0; 4]);
        }
        assert_eq!(g.block.cell(1, 0), &[1.0; 4]);
        assert_eq!(g.block.cell(1, 1), &[0.0; 4]);
    }

    #[test]
    fn encode_full_and_too_long() {
        let spec = nyc();
        let p = Point::new(40.75, -74.0, 3, 12).unwrap();
        let g = encode(&Trajectory::new("a", vec![p; 144]), &spec, 144).unwrap();
        assert!(g.mask.iter().all(|&m| m == 1));
        assert!(encode(&Trajectory::new("a", vec![p; 145]), &spec, 144).is_err());
    }

    #[test]
    fn upsample_replicates_single_cell() {
        let mut g = encode(&Trajectory::new("a", vec![]), &nyc(), 144).unwrap();
        let up0 = upsample(&g);
        assert_eq!(up0.0.side, 24);
        assert!(up0.0.values.iter().all(|&v| v == 0.0));
        g.block.values[0] = 0.7;
        let up = upsample(&g);
        for r in 0..24 {
            for c in 0..24 {
                let expect = if r < 2 && c < 2 { 0.7 } else { 0.0 };
                assert_eq!(up.0.get(r, c, 0), expect);
            }
        }
    }

    #[test]
    fn downsample_takes_top_left() {
        let block = GridBlock::from_values(2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = downsample(&UpscaledGrid(block)).unwrap();
        assert_eq!(d.values, vec![1.0]);
        let odd = GridBlock::zeros(3, 1);
        assert!(downsample(&UpscaledGrid(odd)).is_err());
    }

    #[test]
    fn downsample_matches_strided_slice() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let side = 24;
        let values: Vec<f64> = (0..side * side * 4).map(|_| rng.random()).collect();
        let u = UpscaledGrid(GridBlock::from_values(side, 4, values.clone()).unwrap());
        let d = downsample(&u).unwrap();
        // strided view: rows 0,2,4..., cols 0,2,4..., all channels
        let oracle: Vec<f64> = (0..side)
            .step_by(2)
            .flat_map(|r| (0..side).step_by(2).map(move |c| (r, c)))
            .flat_map(|(r, c)| values[(r * side + c) * 4..(r * side + c) * 4 + 4].to_vec())
            .collect();
        assert_eq!(d.values, oracle);
    }

    #[test]
    fn decode_half_rounds_up() {
        let spec = nyc();
        let block = GridBlock::from_values(12, 4, vec![0.5; 12 * 12 * 4]).unwrap();
        let t = decode(&block, &spec, 1).unwrap();
        assert_eq!(t.points[0].hour, 12);
        assert_eq!(t.points[0].day, 3);
        assert_eq!(decode(&block, &spec, 144).unwrap().len(), 144);
        assert!(decode(&block, &spec, 0).is_err());
        assert!(decode(&block, &spec, 145).is_err());
    }

    #[test]
    fn mask_upsampling() {
        let mut mask = vec![0u8; 144];
        mask[0] = 1;
        mask[12] = 1;
        let up = upsample_mask(&mask, 12);
        assert_eq!(up.iter().map(|&m| m as usize).sum::<usize>(), 8);
        assert_eq!(up[0], 1);
        assert_eq!(up[24 + 1], 1);
        assert_eq!(up[2 * 24], 1);
        assert_eq!(up[3 * 24 + 1], 1);
    }

    #[test]
    fn grid_file_layout() {
        let block = GridBlock::from_values(2, 1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        block.write_to(3, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        assert_eq!(&buf[..4], b"RTCG");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 0.25);
        let (back, len) = GridBlock::read_from(&buf[..]).unwrap();
        assert_eq!((back, len), (block, 3));
        assert!(GridBlock::read_from(&b"XXXXaaaabbbbcccc"[..]).is_err());
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        let b = BoundingBox::FS_NYC;
        let point = (b.lat_min..=b.lat_max, b.lon_min..=b.lon_max, 0u8..7, 0u8..24)
            .prop_map(|(lat, lon, d, h)| Point::new(lat, lon, d, h).unwrap());
        prop::collection::vec(point, 1..=144).prop_map(|p| Trajectory::new("p", p))
    }

    proptest! {
        #[test]
        fn round_trip_identity(t in arb_trajectory()) {
            let spec = nyc();
            let g = encode(&t, &spec, 144).unwrap();
            prop_assert!(g.block.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(g.mask.iter().map(|&m| m as usize).sum::<usize>(), t.len());
            prop_assert!(g.block.values[t.len() * 4..].iter().all(|&v| v == 0.0));
            let up = upsample(&g);
            let back = decode(&downsample(&up).unwrap(), &spec, t.len()).unwrap();
            for (a, b) in t.points.iter().zip(&back.points) {
                prop_assert!((a.lat - b.lat).abs() <= 1e-9);
                prop_assert!((a.lon - b.lon).abs() <= 1e-9);
                prop_assert_eq!((a.day, a.hour), (b.day, b.hour));
            }
        }

        #[test]
        fn upsampled_blocks_are_constant(values in prop::collection::vec(0.0..1.0f64, 6 * 6 * 4)) {
            let block = GridBlock::from_values(6, 4, values).unwrap();
            let up = upsample_block(&block);
            for r in (0..12).step_by(2) {
                for c in (0..12).step_by(2) {
                    for ch in 0..4 {
                        let v = up.0.get(r, c, ch);
                        prop_assert_eq!(v, up.0.get(r + 1, c, ch));
                        prop_assert_eq!(v, up.0.get(r, c + 1, ch));
                        prop_assert_eq!(v, up.0.get(r + 1, c + 1, ch));
                    }
                }
            }
            prop_assert_eq!(downsample(&up).unwrap(), block);
        }
    }
}
