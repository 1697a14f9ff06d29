//! Square trigger patches and the poisoning operator that stamps them onto
//! images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Image, Shape};

/// An axis-aligned `size × size` patch covering every channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerRegion {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub channels: usize,
}

impl TriggerRegion {
    pub fn new(row: usize, col: usize, size: usize, channels: usize) -> Self {
        Self {
            row,
            col,
            size,
            channels,
        }
    }

    /// Number of free values: `size² · channels`.
    pub fn dim(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn check_within(&self, shape: Shape) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Trigger("trigger size must be at least 1".into()));
        }
        if self.channels != shape.channels {
            return Err(Error::Trigger(format!(
                "trigger covers {} channels but image has {}",
                self.channels, shape.channels
            )));
        }
        if self.row + self.size > shape.height || self.col + self.size > shape.width {
            return Err(Error::Trigger(format!(
                "{}x{} trigger at ({}, {}) does not fit a {} image",
                self.size, self.size, self.row, self.col, shape
            )));
        }
        Ok(())
    }

    /// Flat image indices covered by the patch, in the patch's own
    /// row-major channel-last order (the order of assignment values).
    pub fn pixel_indices(&self, shape: Shape) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for r in self.row..self.row + self.size {
            for c in self.col..self.col + self.size {
                for ch in 0..self.channels {
                    out.push(shape.index(r, c, ch));
                }
            }
        }
        out
    }
}

/// Patch pixel values in `[0,1]`, ordered row-major channel-last within the
/// patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TriggerAssignment(Vec<f64>);

impl TriggerAssignment {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Trigger(format!("trigger value {v} outside [0,1]")));
        }
        Ok(Self(values))
    }

    /// Clamps into `[0,1]`; used for solver witnesses that may sit a rounding
    /// error outside the box.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|v| (v * 255.0).round() / 255.0).collect())
    }

    /// The values currently stored in `image` under `region`.
    pub fn read_from(image: &Image, region: &TriggerRegion) -> Result<Self> {
        region.check_within(image.shape())?;
        let px = image.pixels();
        Ok(Self(
            region
                .pixel_indices(image.shape())
                .into_iter()
                .map(|i| px[i])
                .collect(),
        ))
    }
}

/// Trigger JSON fragment: `{"row":r,"col":c,"size":s,"values":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub values: Vec<f64>,
}

impl TriggerSpec {
    pub fn new(region: &TriggerRegion, assignment: &TriggerAssignment) -> Self {
        Self {
            row: region.row,
            col: region.col,
            size: region.size,
            values: assignment.values().to_vec(),
        }
    }

    /// Resolves the fragment against an image shape; the channel count is
    /// inferred from it.
    pub fn resolve(&self, shape: Shape) -> Result<(TriggerRegion, TriggerAssignment)> {
        let region = TriggerRegion::new(self.row, self.col, self.size, shape.channels);
        region.check_within(shape)?;
        let assignment = TriggerAssignment::new(self.values.clone())?;
        if assignment.len() != region.dim() {
            return Err(Error::Trigger(format!(
                "{} values given for a trigger with {} slots",
                assignment.len(),
                region.dim()
            )));
        }
        Ok((region, assignment))
    }
}

/// All in-bounds `s × s` positions whose row and column are multiples of
/// `stride`, in row-major order.
pub fn enumerate_regions(shape: Shape, size: usize, stride: usize) -> Result<Vec<TriggerRegion>> {
    if size == 0 || size > shape.height.min(shape.width) {
        return Err(Error::Trigger(format!(
            "trigger size {size} does not fit a {shape} image"
        )));
    }
    if stride == 0 {
        return Err(Error::Trigger("stride must be at least 1".into()));
    }
    let rows = (0..=shape.height - size).step_by(stride);
    Ok(rows
        .flat_map(|r| {
            (0..=shape.width - size)
                .step_by(stride)
                .map(move |c| TriggerRegion::new(r, c, size, shape.channels))
        })
        .collect())
}

/// Returns a copy of `image` with the patch overwritten by `assignment`.
pub fn apply_trigger(
    image: &Image,
    region: &TriggerRegion,
    assignment: &TriggerAssignment,
) -> Result<Image> {
    region.check_within(image.shape())?;
    if assignment.len() != region.dim() {
        return Err(Error::Trigger(format!(
            "{} values given for a trigger with {} slots",
            assignment.len(),
            region.dim()
        )));
    }
    let mut out = image.clone();
    let shape = image.shape();
    let px = out.pixels_mut();
    for (idx, &v) in region.pixel_indices(shape).iter().zip(assignment.values()) {
        px[*idx] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count_positions(h: usize, w: usize, s: usize, stride: usize) -> usize {
        let mut n = 0;
        for r in 0..h {
            for c in 0..w {
                if r % stride == 0 && c % stride == 0 && r + s <= h && c + s <= w {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn region_counts() {
        assert_eq!(count_positions(24, 24, 3, 1), 484);
        assert_eq!(enumerate_regions(Shape::new(24, 24, 1), 3, 1).unwrap().len(), 484);
        let one = enumerate_regions(Shape::new(5, 5, 3), 5, 1).unwrap();
        assert_eq!(one, vec![TriggerRegion::new(0, 0, 5, 3)]);
        assert_eq!(count_positions(5, 5, 1, 2), 9);
        assert_eq!(enumerate_regions(Shape::new(5, 5, 1), 1, 2).unwrap().len(), 9);
    }

    #[test]
    fn oversized_trigger_rejected() {
        assert!(enumerate_regions(Shape::new(4, 6, 1), 5, 1).is_err());
        assert!(enumerate_regions(Shape::new(4, 6, 1), 0, 1).is_err());
    }

    #[test]
    fn regions_are_row_major() {
        let regions = enumerate_regions(Shape::new(3, 4, 1), 2, 1).unwrap();
        let pos: Vec<_> = regions.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(pos, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn single_pixel_on_zero_image() {
        let img = Image::zeros(Shape::new(3, 3, 1));
        let region = TriggerRegion::new(0, 0, 1, 1);
        let out = apply_trigger(&img, &region, &TriggerAssignment::new(vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(out.get(0, 0, 0), 1.0);
        assert_eq!(out.pixels().iter().filter(|&&p| p != 0.0).count(), 1);
        assert!(img.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn rewriting_existing_pixels_is_identity() {
        let img = Image::new(
            Shape::new(2, 3, 2),
            (0..12).map(|i| i as f64 / 11.0).collect(),
        )
        .unwrap();
        let region = TriggerRegion::new(0, 1, 2, 2);
        let same = TriggerAssignment::read_from(&img, &region).unwrap();
        assert_eq!(apply_trigger(&img, &region, &same).unwrap(), img);
    }

    #[test]
    fn length_and_bounds_checked() {
        let img = Image::zeros(Shape::new(3, 3, 1));
        let region = TriggerRegion::new(2, 2, 2, 1);
        let a = TriggerAssignment::new(vec![0.5; 4]).unwrap();
        assert!(apply_trigger(&img, &region, &a).is_err());
        let region = TriggerRegion::new(0, 0, 2, 1);
        let a = TriggerAssignment::new(vec![0.5; 3]).unwrap();
        assert!(apply_trigger(&img, &region, &a).is_err());
        assert!(TriggerAssignment::new(vec![1.2]).is_err());
    }

    #[test]
    fn quantization_snaps_to_byte_grid() {
        let a = TriggerAssignment::new(vec![0.0, 0.5, 0.999, 1.0]).unwrap().quantized();
        for v in a.values() {
            let b = v * 255.0;
            assert!((b - b.round()).abs() < 1e-9);
        }
        assert_eq!(a.values()[0], 0.0);
        assert_eq!(a.values()[3], 1.0);
    }

    #[test]
    fn spec_json_shape() {
        let spec = TriggerSpec {
            row: 1,
            col: 2,
            size: 1,
            values: vec![0.25],
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"row":1,"col":2,"size":1,"values":[0.25]}"#);
        let (region, a) = spec.resolve(Shape::new(4, 4, 1)).unwrap();
        assert_eq!(region, TriggerRegion::new(1, 2, 1, 1));
        assert_eq!(a.values(), &[0.25]);
        assert!(spec.resolve(Shape::new(4, 4, 3)).is_err());
    }

    fn image_strategy(shape: Shape) -> impl Strategy<Value = Image> {
        proptest::collection::vec(0.0f64..=1.0, shape.len())
            .prop_map(move |px| Image::new(shape, px).unwrap())
    }

    proptest! {
        #[test]
        fn enumeration_count_formula(h in 1usize..12, w in 1usize..12, s in 1usize..6, stride in 1usize..4) {
            prop_assume!(s <= h.min(w));
            let n = enumerate_regions(Shape::new(h, w, 1), s, stride).unwrap().len();
            let expect = (h - s + 1).div_ceil(stride) * (w - s + 1).div_ceil(stride);
            prop_assert_eq!(n, expect);
        }

        #[test]
        fn apply_touches_only_the_patch(
            img in image_strategy(Shape::new(5, 4, 2)),
            row in 0usize..3, col in 0usize..2,
            vals in proptest::collection::vec(0.0f64..=1.0, 8),
        ) {
            let region = TriggerRegion::new(row, col, 2, 2);
            let a = TriggerAssignment::new(vals).unwrap();
            let out = apply_trigger(&img, &region, &a).unwrap();
            let inside: std::collections::HashSet<_> =
                region.pixel_indices(img.shape()).into_iter().collect();
            let changed = img.pixels().iter().zip(out.pixels()).enumerate()
                .filter(|(_, (x, y))| x != y).count();
            prop_assert!(changed <= region.dim());
            for (i, (x, y)) in img.pixels().iter().zip(out.pixels()).enumerate() {
                if !inside.contains(&i) { prop_assert_eq!(x, y); }
            }
            prop_assert_eq!(TriggerAssignment::read_from(&out, &region).unwrap(), a.clone());
            prop_assert_eq!(apply_trigger(&out, &region, &a).unwrap(), out);
        }

        #[test]
        fn images_equal_outside_patch_become_equal(
            a in image_strategy(Shape::new(4, 4, 1)),
            vals in proptest::collection::vec(0.0f64..=1.0, 4),
            noise in proptest::collection::vec(0.0f64..=1.0, 4),
        ) {
            let region = TriggerRegion::new(1, 1, 2, 1);
            let mut px = a.pixels().to_vec();
            for (i, n) in region.pixel_indices(a.shape()).into_iter().zip(noise) {
                px[i] = n;
            }
            let b = Image::new(a.shape(), px).unwrap();
            let t = TriggerAssignment::new(vals).unwrap();
            prop_assert_eq!(apply_trigger(&a, &region, &t).unwrap(), apply_trigger(&b, &region, &t).unwrap());
        }
    }
}
