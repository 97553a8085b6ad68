//! Box arithmetic on half-open pixel intervals, plus the crop used by the zoom tool.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SpatialError {
    #[error("box has zero area")]
    Degenerate,
    #[error("box lies fully outside the image")]
    FullyOutside,
}

/// `[x1, x2) x [y1, y2)` in pixels. Serialized as the 4-element `bbox_2d` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl From<[i64; 4]> for BBox {
    fn from(a: [i64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    /// Zero for anything not strictly positive in both extents.
    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn is_normalized(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Sorts strictly inverted coordinates. Equal coordinates stay degenerate.
    pub fn normalize(self) -> Result<BBox, SpatialError> {
        let (x1, x2) = (self.x1.min(self.x2), self.x1.max(self.x2));
        let (y1, y2) = (self.y1.min(self.y2), self.y1.max(self.y2));
        let b = BBox { x1, y1, x2, y2 };
        if b.is_normalized() {
            Ok(b)
        } else {
            Err(SpatialError::Degenerate)
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0) * h.max(0)
    }

    pub fn as_array(&self) -> [i64; 4] {
        (*self).into()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, SpatialError> {
    if !a.is_normalized() || !b.is_normalized() {
        return Err(SpatialError::Degenerate);
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

pub fn clamp_to_image(b: &BBox, dims: (usize, usize)) -> Result<BBox, SpatialError> {
    let (w, h) = (dims.0 as i64, dims.1 as i64);
    let c = BBox {
        x1: b.x1.clamp(0, w),
        y1: b.y1.clamp(0, h),
        x2: b.x2.clamp(0, w),
        y2: b.y2.clamp(0, h),
    };
    if c.is_normalized() {
        Ok(c)
    } else {
        Err(SpatialError::FullyOutside)
    }
}

/// Row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl IntensityGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count does not match dims");
        IntensityGrid { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        IntensityGrid::new(width, height, vec![value; width * height])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0, 0, self.width as i64, self.height as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropView {
    pub source_dims: (usize, usize),
    pub region: BBox,
    pub pixels: IntensityGrid,
}

pub fn crop(image: &IntensityGrid, b: &BBox) -> Result<CropView, SpatialError> {
    let region = clamp_to_image(b, image.dims())?;
    let (x1, y1, x2, y2) = (region.x1 as usize, region.y1 as usize, region.x2 as usize, region.y2 as usize);
    let mut pixels = Vec::with_capacity((x2 - x1) * (y2 - y1));
    for y in y1..y2 {
        let row = y * image.width;
        pixels.extend_from_slice(&image.pixels[row + x1..row + x2]);
    }
    Ok(CropView {
        source_dims: image.dims(),
        region,
        pixels: IntensityGrid::new(x2 - x1, y2 - y1, pixels),
    })
}

/// Summed-area table with a zero guard row and column.
#[derive(Debug, Clone)]
pub struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    pub fn new(image: &IntensityGrid) -> Self {
        Self::from_fn(image, |p| p)
    }

    pub fn squares(image: &IntensityGrid) -> Self {
        Self::from_fn(image, |p| p * p)
    }

    fn from_fn(image: &IntensityGrid, f: impl Fn(f64) -> f64) -> Self {
        let w = image.width + 1;
        let mut sums = vec![0.0; w * (image.height + 1)];
        for y in 0..image.height {
            let mut row = 0.0;
            for x in 0..image.width {
                row += f(image.get(x, y));
                sums[(y + 1) * w + x + 1] = sums[y * w + x + 1] + row;
            }
        }
        Integral { width: w, sums }
    }

    /// Sum over a box already clamped to the image.
    pub fn sum(&self, b: &BBox) -> f64 {
        let at = |x: i64, y: i64| self.sums[y as usize * self.width + x as usize];
        at(b.x2, b.y2) - at(b.x1, b.y2) - at(b.x2, b.y1) + at(b.x1, b.y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Counts covered unit cells one by one.
    fn brute_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0, 0);
        for y in -40..40 {
            for x in -40..40 {
                let ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                inter += (ia && ib) as i64;
                union += (ia || ib) as i64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(20, 20, 30, 30)).unwrap(), 0.0);
        let b = BBox::new(5, 5, 15, 15);
        assert!((iou(&a, &b).unwrap() - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b).unwrap(), brute_iou(&a, &b));
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &BBox::new(3, 3, 3, 9)), Err(SpatialError::Degenerate));
    }

    #[test]
    fn normalize_sorts_inverted_only() {
        assert_eq!(BBox::new(10, 12, 2, 4).normalize(), Ok(BBox::new(2, 4, 10, 12)));
        assert_eq!(BBox::new(5, 1, 5, 9).normalize(), Err(SpatialError::Degenerate));
    }

    #[test]
    fn clamp_examples() {
        let d = (100, 100);
        assert_eq!(clamp_to_image(&BBox::new(-5, -5, 10, 10), d), Ok(BBox::new(0, 0, 10, 10)));
        assert_eq!(clamp_to_image(&BBox::new(10, 20, 50, 60), d), Ok(BBox::new(10, 20, 50, 60)));
        assert_eq!(clamp_to_image(&BBox::new(120, 120, 130, 130), d), Err(SpatialError::FullyOutside));
        // touching the border only is an empty intersection
        assert_eq!(clamp_to_image(&BBox::new(100, 0, 110, 10), d), Err(SpatialError::FullyOutside));
    }

    fn ramp(w: usize, h: usize) -> IntensityGrid {
        IntensityGrid::new(w, h, (0..w * h).map(|i| (i % 97) as f64 / 97.0).collect())
    }

    #[test]
    fn crop_examples() {
        let img = ramp(100, 100);
        let c = crop(&img, &BBox::new(10, 20, 50, 60)).unwrap();
        assert_eq!(c.pixels.dims(), (40, 40));
        assert_eq!(c.pixels.get(0, 0), img.get(10, 20));
        assert_eq!(c.pixels.get(39, 39), img.get(49, 59));

        let full = crop(&img, &img.full_box()).unwrap();
        assert_eq!(full.pixels, img);

        let c = crop(&img, &BBox::new(-5, -5, 10, 10)).unwrap();
        assert_eq!(c.region, BBox::new(0, 0, 10, 10));
        assert_eq!(c.pixels.dims(), (10, 10));

        assert_eq!(crop(&img, &BBox::new(120, 120, 130, 130)), Err(SpatialError::FullyOutside));
    }

    #[test]
    fn integral_matches_direct_sum() {
        let img = ramp(13, 9);
        let s = Integral::new(&img);
        let b = BBox::new(2, 3, 11, 8);
        let direct: f64 = crop(&img, &b).unwrap().pixels.pixels.iter().sum();
        assert!((s.sum(&b) - direct).abs() < 1e-9);
    }

    #[test]
    fn bbox_wire_form() {
        let b = BBox::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<BBox>("[1,2,3,4]").unwrap(), b);
    }
}
