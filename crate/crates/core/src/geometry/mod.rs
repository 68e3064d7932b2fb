//! Binary masks, exact Euclidean distance-to-boundary transforms and
//! ordinal bin maps.

mod edt;
pub mod pgm;

pub use edt::edt;

use crate::error::{shape_err, Error, Result};

/// Snap tolerance applied before flooring normalised distances, so values that
/// are integral in exact arithmetic do not drop a bin through rounding.
const QUANT_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return shape_err(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel Euclidean distance to the nearest background pixel; 0 on background.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return shape_err(format!(
                "field {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

/// Ordinal stratum per pixel: `-1` on background, `0..K` on foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinMap {
    height: usize,
    width: usize,
    k: usize,
    bins: Vec<i32>,
}

impl BinMap {
    pub const BACKGROUND: i32 = -1;

    pub fn new(height: usize, width: usize, k: usize, bins: Vec<i32>) -> Result<Self> {
        if bins.len() != height * width {
            return shape_err(format!(
                "bin map {height}x{width} needs {} bins, got {}",
                height * width,
                bins.len()
            ));
        }
        if let Some(b) = bins.iter().find(|&&b| b < -1 || b >= k as i32) {
            return Err(Error::Contract(format!("bin {b} outside -1..{k}")));
        }
        Ok(Self {
            height,
            width,
            k,
            bins,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bins(&self) -> &[i32] {
        &self.bins
    }

    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.bins[y * self.width + x]
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bins.iter().map(|&b| b >= 0).collect(),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.bins.iter().filter(|&&b| b >= 0).count()
    }

    /// 8-bit grey levels for export: background 0, bin `k` -> `round(255·(k+1)/K)`.
    pub fn to_grey(&self) -> Vec<u8> {
        self.bins
            .iter()
            .map(|&b| {
                if b < 0 {
                    0
                } else {
                    (255.0 * (b as f64 + 1.0) / self.k as f64).round() as u8
                }
            })
            .collect()
    }
}

/// Uniform quantisation of a distance field into `k` ordinal bins:
/// `z = min(k−1, floor(EDT / max_Ω EDT · (k−1)))` on the foreground.
pub fn quantise(field: &DistanceField, mask: &BinaryMask, k: usize) -> Result<BinMap> {
    if k < 2 {
        return Err(Error::Contract(format!("bin count must be >= 2, got {k}")));
    }
    if field.height != mask.height || field.width != mask.width {
        return shape_err("quantise: field and mask shapes differ");
    }
    let max = mask
        .bits
        .iter()
        .zip(&field.values)
        .filter(|(&m, _)| m)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyRegion("quantise: empty foreground".into()));
    }
    let top = (k - 1) as f64;
    let bins = mask
        .bits
        .iter()
        .zip(&field.values)
        .map(|(&m, &v)| {
            if !m {
                BinMap::BACKGROUND
            } else if max <= 0.0 {
                (k - 1) as i32
            } else {
                let t = (v / max * top + QUANT_SNAP).floor();
                t.clamp(0.0, top) as i32
            }
        })
        .collect();
    BinMap::new(mask.height, mask.width, k, bins)
}

/// Convenience: `quantise(edt(mask), mask, k)`.
pub fn bin_map(mask: &BinaryMask, k: usize) -> Result<BinMap> {
    quantise(&edt(mask)?, mask, k)
}

/// Normalised frequency of each bin over the foreground.
pub fn bin_histogram(binmap: &BinMap) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; binmap.k];
    let mut total = 0usize;
    for &b in &binmap.bins {
        if b >= 0 {
            counts[b as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyRegion("bin_histogram: empty foreground".into()));
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / total as f64)
        .collect())
}

/// Block-average downsampling to `h×w`; blocks with occupancy ≥ 0.5 become foreground.
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    if h == 0 || w == 0 || h > mask.height || w > mask.width {
        return shape_err(format!(
            "cannot downsample {}x{} to {h}x{w}",
            mask.height, mask.width
        ));
    }
    if !mask.height.is_multiple_of(h) || !mask.width.is_multiple_of(w) {
        return shape_err(format!(
            "non-integral downsampling ratio {}x{} -> {h}x{w}",
            mask.height, mask.width
        ));
    }
    let (fy, fx) = (mask.height / h, mask.width / w);
    let block = fy * fx;
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        let mut n = 0;
        for dy in 0..fy {
            for dx in 0..fx {
                if mask.get(y * fy + dy, x * fx + dx) {
                    n += 1;
                }
            }
        }
        2 * n >= block
    }))
}

/// Bin map at `h×w` computed from the full-resolution EDT.
///
/// Foreground is `downsample_mask(mask, h, w)`; each foreground block takes the
/// mean EDT of its foreground pixels, normalised by the full-resolution maximum.
pub fn pooled_bin_map(mask: &BinaryMask, h: usize, w: usize, k: usize) -> Result<BinMap> {
    if k < 2 {
        return Err(Error::Contract(format!("bin count must be >= 2, got {k}")));
    }
    let small = downsample_mask(mask, h, w)?;
    let field = edt(mask)?;
    let max = field.values.iter().fold(0.0f64, |a, &v| a.max(v));
    if small.count() == 0 || max <= 0.0 {
        return Err(Error::EmptyRegion("pooled_bin_map: empty foreground".into()));
    }
    let (fy, fx) = (mask.height / h, mask.width / w);
    let top = (k - 1) as f64;
    let mut bins = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if !small.get(y, x) {
                bins.push(BinMap::BACKGROUND);
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for dy in 0..fy {
                for dx in 0..fx {
                    let (yy, xx) = (y * fy + dy, x * fx + dx);
                    if mask.get(yy, xx) {
                        sum += field.values[yy * mask.width + xx];
                        n += 1;
                    }
                }
            }
            let t = (sum / n as f64 / max * top + QUANT_SNAP).floor();
            bins.push(t.clamp(0.0, top) as i32);
        }
    }
    BinMap::new(h, w, k, bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn square_fixture() -> BinaryMask {
        BinaryMask::from_fn(9, 9, |y, x| (2..7).contains(&y) && (2..7).contains(&x))
    }

    #[test]
    fn square_rings_quantise_to_three_bins() {
        let mask = square_fixture();
        let field = edt(&mask).unwrap();
        let bins = quantise(&field, &mask, 3).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let expected = if !mask.get(y, x) {
                    -1
                } else {
                    let ring = (y.min(x).min(8 - y).min(8 - x)) as i32 - 2;
                    ring
                };
                assert_eq!(bins.get(y, x), expected, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn equal_distances_go_to_top_bin() {
        let mask = BinaryMask::from_fn(5, 9, |y, x| y == 2 && (1..8).contains(&x));
        let bins = bin_map(&mask, 10).unwrap();
        for (b, m) in bins.bins().iter().zip(mask.bits()) {
            assert_eq!(*b, if *m { 9 } else { -1 });
        }
    }

    #[test]
    fn scaled_field_gives_same_bins() {
        let mask = square_fixture();
        let field = edt(&mask).unwrap();
        assert_eq!(
            quantise(&field, &mask, 3).unwrap(),
            quantise(&field.scaled(10.0), &mask, 3).unwrap()
        );
    }

    #[test]
    fn quantise_rejects_empty_foreground() {
        let mask = BinaryMask::empty(4, 4);
        let field = DistanceField::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(matches!(
            quantise(&field, &mask, 3),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn histogram_of_square_fixture() {
        let bins = bin_map(&square_fixture(), 3).unwrap();
        let h = bin_histogram(&bins).unwrap();
        let expected = [16.0 / 25.0, 8.0 / 25.0, 1.0 / 25.0];
        for (a, b) in h.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn histogram_one_hot_when_single_bin() {
        let mask = BinaryMask::from_fn(3, 3, |y, x| y == 1 && x == 1);
        let h = bin_histogram(&bin_map(&mask, 4).unwrap()).unwrap();
        assert_eq!(h, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn downsample_rules() {
        let m = square_fixture();
        assert_eq!(downsample_mask(&m, 9, 9).unwrap(), m);
        let full = BinaryMask::from_fn(2, 2, |_, _| true);
        assert!(downsample_mask(&full, 1, 1).unwrap().get(0, 0));
        let half = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        assert!(downsample_mask(&half, 1, 1).unwrap().get(0, 0));
        let quarter = BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        assert!(!downsample_mask(&quarter, 1, 1).unwrap().get(0, 0));
        assert!(matches!(
            downsample_mask(&m, 4, 4),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bin_grey_levels() {
        let b = BinMap::new(1, 3, 2, vec![-1, 0, 1]).unwrap();
        assert_eq!(b.to_grey(), vec![0, 128, 255]);
    }

    #[test]
    fn pooled_bins_average_the_block_field() {
        // 4x4 square in 8x8: each 2x2 block holds distances {1,1,1,2}, max 2.
        let m = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let b = pooled_bin_map(&m, 4, 4, 3).unwrap();
        let want: Vec<i32> = (0..16)
            .map(|i| if (1..3).contains(&(i / 4)) && (1..3).contains(&(i % 4)) { 1 } else { -1 })
            .collect();
        assert_eq!(b.bins(), &want[..]);
        assert!(pooled_bin_map(&m, 4, 4, 2).unwrap().bins().iter().all(|&z| z <= 0));
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        assert!(matches!(pooled_bin_map(&empty, 4, 4, 3), Err(Error::EmptyRegion(_))));
        assert!(matches!(pooled_bin_map(&m, 4, 4, 1), Err(Error::Contract(_))));
    }
}
