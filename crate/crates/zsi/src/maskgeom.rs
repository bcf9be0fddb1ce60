//! Binary-mask representation, RLE codec, polygon rasterization, and
//! box/mask IoU.
//!
//! Masks follow the COCO convention throughout: run-length encoding is
//! column-major with a leading zero-run, and the compressed string codec
//! is byte-compatible with the one used in COCO results files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("run-length sum {got} does not match mask size {expected}")]
    RunLengthMismatch { expected: usize, got: usize },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("degenerate polygon: {0} coordinates (need at least 6, even count)")]
    DegeneratePolygon(usize),
    #[error("invalid RLE string byte {byte:#x} at position {pos}")]
    BadRleString { byte: u8, pos: usize },
    #[error("bounding box extents must be positive: w={0}, h={1}")]
    EmptyBox(f64, f64),
}

/// Axis-aligned box in pixel coordinates, `[x, y, w, h]` as in COCO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        if w <= 0.0 || h <= 0.0 {
            return Err(GeomError::EmptyBox(w, h));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clip to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        if x1 > x0 && y1 > y0 {
            Some(Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
        } else {
            None
        }
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Dense binary mask, row-major bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "bit count must equal width*height");
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Intersection-over-union of two same-sized masks; two empty masks give 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeomError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeomError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Run-length encoded mask: column-major runs, alternating 0-runs and
/// 1-runs, starting with a 0-run (possibly of length 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl RleMask {
    /// Pixel count of the encoded mask without decoding: sum of the 1-runs.
    pub fn count_ones(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0u32;
    for x in 0..m.width {
        for y in 0..m.height {
            let bit = m.get(x, y);
            if bit == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = bit;
                len = 1;
            }
        }
    }
    runs.push(len);
    RleMask { width: m.width, height: m.height, runs }
}

pub fn rle_decode(r: &RleMask) -> Result<BinaryMask, GeomError> {
    let total: usize = r.runs.iter().map(|&x| x as usize).sum();
    let size = r.width * r.height;
    if total != size {
        return Err(GeomError::RunLengthMismatch { expected: size, got: total });
    }
    let mut m = BinaryMask::zeros(r.width, r.height);
    let mut idx = 0usize;
    let mut value = false;
    for &run in &r.runs {
        for _ in 0..run {
            if value {
                let x = idx / r.height;
                let y = idx % r.height;
                m.set(x, y, true);
            }
            idx += 1;
        }
        value = !value;
    }
    Ok(m)
}

/// Serialize run lengths into the COCO compressed-RLE byte string.
///
/// Each count is stored base-32, 5 bits per byte, low bits first, offset by
/// 48; bit 0x20 marks continuation. Counts past the second are delta-coded
/// against the count two positions back.
pub fn rle_to_string(r: &RleMask) -> String {
    let mut s = String::with_capacity(r.runs.len() * 2);
    for (i, &cnt) in r.runs.iter().enumerate() {
        let mut x = cnt as i64;
        if i > 2 {
            x -= r.runs[i - 2] as i64;
        }
        loop {
            let c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            let mut byte = c;
            if more {
                byte |= 0x20;
            }
            s.push((byte + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

/// Parse a COCO compressed-RLE byte string back into run lengths.
pub fn rle_from_string(s: &str, width: usize, height: usize) -> Result<RleMask, GeomError> {
    let bytes = s.as_bytes();
    let mut runs: Vec<u32> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            if p >= bytes.len() || bytes[p] < 48 {
                return Err(GeomError::BadRleString {
                    byte: if p < bytes.len() { bytes[p] } else { 0 },
                    pos: p,
                });
            }
            let c = bytes[p] - 48;
            x |= ((c & 0x1f) as i64) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = runs.len();
        if m > 2 {
            x += runs[m - 2] as i64;
        }
        if x < 0 {
            return Err(GeomError::BadRleString { byte: bytes[p - 1], pos: p - 1 });
        }
        runs.push(x as u32);
    }
    let r = RleMask { width, height, runs };
    let total: usize = r.runs.iter().map(|&x| x as usize).sum();
    if total != width * height {
        return Err(GeomError::RunLengthMismatch { expected: width * height, got: total });
    }
    Ok(r)
}

/// Flat polygon `x1,y1,...,xn,yn`, at least three vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<f64>,
}

impl Polygon {
    pub fn new(points: Vec<f64>) -> Result<Self, GeomError> {
        if points.len() < 6 || points.len() % 2 != 0 {
            return Err(GeomError::DegeneratePolygon(points.len()));
        }
        Ok(Self { points })
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        // Even-odd rule via ray casting.
        let n = self.points.len() / 2;
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (self.points[2 * i], self.points[2 * i + 1]);
            let (xj, yj) = (self.points[2 * j], self.points[2 * j + 1]);
            if (yi > py) != (yj > py) {
                let x_cross = xj + (py - yj) / (yi - yj) * (xi - xj);
                if px < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

/// Rasterize a polygon union: a pixel is set iff its center lies inside any
/// polygon under the even-odd rule.
pub fn rasterize(polygons: &[Polygon], width: usize, height: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(width, height);
    for poly in polygons {
        for y in 0..height {
            for x in 0..width {
                if !m.get(x, y) && poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(x, y, true);
                }
            }
        }
    }
    m
}

/// Rasterize a box to a mask of the given grid size (pixel-center rule).
pub fn rasterize_box(b: &BoundingBox, width: usize, height: usize) -> BinaryMask {
    let poly = Polygon {
        points: vec![b.x, b.y, b.x + b.w, b.y, b.x + b.w, b.y + b.h, b.x, b.y + b.h],
    };
    rasterize(std::slice::from_ref(&poly), width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mask_from_rows(width: usize, rows: &[&[u8]]) -> BinaryMask {
        let height = rows.len();
        let mut m = BinaryMask::zeros(width, height);
        for (y, row) in rows.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                m.set(x, y, v != 0);
            }
        }
        m
    }

    #[test]
    fn rle_all_zero() {
        let m = BinaryMask::zeros(2, 2);
        assert_eq!(rle_encode(&m).runs, vec![4]);
    }

    #[test]
    fn rle_all_one() {
        let m = BinaryMask::from_bits(2, 2, vec![true; 4]);
        assert_eq!(rle_encode(&m).runs, vec![0, 4]);
    }

    #[test]
    fn rle_center_pixel() {
        // 3x3 with only the center set: column-major order puts the set
        // pixel at flat index 4.
        let m = mask_from_rows(3, &[&[0, 0, 0], &[0, 1, 0], &[0, 0, 0]]);
        assert_eq!(rle_encode(&m).runs, vec![4, 1, 4]);
    }

    #[test]
    fn rle_decode_rejects_bad_sum() {
        let r = RleMask { width: 2, height: 2, runs: vec![3] };
        assert!(matches!(rle_decode(&r), Err(GeomError::RunLengthMismatch { .. })));
    }

    #[test]
    fn rle_string_tiny() {
        // 1x1 mask with the pixel set: runs [0, 1] -> "01".
        let r = RleMask { width: 1, height: 1, runs: vec![0, 1] };
        assert_eq!(rle_to_string(&r), "01");
        assert_eq!(rle_from_string("01", 1, 1).unwrap().runs, vec![0, 1]);
    }

    #[test]
    fn box_iou_cases() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_abs_diff_eq!(box_iou(&a, &a), 1.0);
        let far = BoundingBox::new(20.0, 20.0, 5.0, 5.0).unwrap();
        assert_abs_diff_eq!(box_iou(&a, &far), 0.0);
        let shifted = BoundingBox::new(5.0, 0.0, 10.0, 10.0).unwrap();
        assert_abs_diff_eq!(box_iou(&a, &shifted), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_iou_cases() {
        let m = mask_from_rows(2, &[&[1, 1], &[1, 1]]);
        assert_abs_diff_eq!(mask_iou(&m, &m).unwrap(), 1.0);
        let comp = mask_from_rows(2, &[&[0, 0], &[0, 0]]);
        assert_abs_diff_eq!(mask_iou(&m, &comp).unwrap(), 0.0);
        let sub = mask_from_rows(2, &[&[1, 1], &[0, 0]]);
        assert_abs_diff_eq!(mask_iou(&m, &sub).unwrap(), 0.5);
        // Two empty masks: defined as 0.
        assert_abs_diff_eq!(mask_iou(&comp, &comp).unwrap(), 0.0);
    }

    #[test]
    fn mask_iou_dimension_mismatch() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(3, 2);
        assert!(mask_iou(&a, &b).is_err());
    }

    #[test]
    fn rasterize_square() {
        let p = Polygon::new(vec![0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0]).unwrap();
        let m = rasterize(&[p], 4, 4);
        assert_eq!(m.count_ones(), 4);
        assert!(m.get(0, 0) && m.get(1, 0) && m.get(0, 1) && m.get(1, 1));
    }

    #[test]
    fn rasterize_outside_grid() {
        let p = Polygon::new(vec![10.0, 10.0, 12.0, 10.0, 12.0, 12.0, 10.0, 12.0]).unwrap();
        let m = rasterize(&[p], 4, 4);
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn rasterize_union_of_disjoint_squares() {
        let a = Polygon::new(vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Polygon::new(vec![3.0, 3.0, 4.0, 3.0, 4.0, 4.0, 3.0, 4.0]).unwrap();
        let both = rasterize(&[a.clone(), b.clone()], 4, 4);
        let ma = rasterize(&[a], 4, 4);
        let mb = rasterize(&[b], 4, 4);
        assert_eq!(both.count_ones(), ma.count_ones() + mb.count_ones());
        assert!(both.get(0, 0) && both.get(3, 3));
    }

    #[test]
    fn degenerate_polygon_rejected() {
        assert!(Polygon::new(vec![0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(Polygon::new(vec![0.0, 0.0, 1.0, 1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(width in 1usize..64, height in 1usize..64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..width * height).map(|_| rng.gen()).collect();
            let m = BinaryMask::from_bits(width, height, bits);
            let rle = rle_encode(&m);
            prop_assert_eq!(rle_decode(&rle).unwrap(), m.clone());
            // String codec round-trips the runs too.
            let s = rle_to_string(&rle);
            prop_assert_eq!(rle_from_string(&s, width, height).unwrap(), rle);
        }

        #[test]
        fn iou_symmetry(ax in 0.0f64..20.0, ay in 0.0f64..20.0, aw in 0.1f64..20.0, ah in 0.1f64..20.0,
                        bx in 0.0f64..20.0, by in 0.0f64..20.0, bw in 0.1f64..20.0, bh in 0.1f64..20.0) {
            let a = BoundingBox::new(ax, ay, aw, ah).unwrap();
            let b = BoundingBox::new(bx, by, bw, bh).unwrap();
            prop_assert_eq!(box_iou(&a, &b).to_bits(), box_iou(&b, &a).to_bits());
        }

        #[test]
        fn box_iou_matches_rasterized_mask_iou(
            ax in 0u8..6, ay in 0u8..6, aw in 1u8..5, ah in 1u8..5,
            bx in 0u8..6, by in 0u8..6, bw in 1u8..5, bh in 1u8..5,
        ) {
            // Integer-coordinate boxes land exactly on pixel boundaries, so
            // the rasterized IoU matches the analytic one up to rounding.
            let scale = 10.0;
            let a = BoundingBox::new(ax as f64 * scale, ay as f64 * scale, aw as f64 * scale, ah as f64 * scale).unwrap();
            let b = BoundingBox::new(bx as f64 * scale, by as f64 * scale, bw as f64 * scale, bh as f64 * scale).unwrap();
            let grid = 110;
            let ma = rasterize_box(&a, grid, grid);
            let mb = rasterize_box(&b, grid, grid);
            let exact = box_iou(&a, &b);
            let raster = mask_iou(&ma, &mb).unwrap();
            prop_assert!((exact - raster).abs() < 0.01, "exact {} raster {}", exact, raster);
        }
    }
}
