//! Input map stack: RGB, replicated angle embedding, anchor offset maps.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::layers::{self, LayerParams, LayerVars};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_ANCHORS: usize = 7;
pub const EMBED_DIM: usize = 16;
pub const ANCHOR_MAPS: usize = 2 * NUM_ANCHORS;
pub const STACK_CHANNELS: usize = 3 + EMBED_DIM + ANCHOR_MAPS;
/// Correction range the models are trained for, in degrees.
pub const MAX_ANGLE: f32 = 30.0;

/// Seven eye landmarks in crop pixel coordinates: six eyelid-edge points
/// followed by the pupil center.
///
/// Edge order is canonical: left corner, upper-left, upper-right, right
/// corner, lower-right, lower-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSet {
    pub points: [[f32; 2]; NUM_ANCHORS],
}

impl AnchorSet {
    pub const PUPIL: usize = 6;

    pub fn new(points: [[f32; 2]; NUM_ANCHORS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return shape_err("anchor coordinates must be finite");
        }
        Ok(Self { points })
    }

    pub fn pupil(&self) -> [f32; 2] {
        self.points[Self::PUPIL]
    }

    /// Coordinates multiplied by `factor` (0.5 for the half-scale stack).
    pub fn scaled(&self, factor: f32) -> Self {
        let mut points = self.points;
        for p in points.iter_mut() {
            p[0] *= factor;
            p[1] *= factor;
        }
        Self { points }
    }

    /// The two edge points furthest apart horizontally (the eye corners).
    pub fn corners(&self) -> ([f32; 2], [f32; 2]) {
        let edge = &self.points[..Self::PUPIL];
        let left = edge
            .iter()
            .copied()
            .fold([f32::INFINITY, 0.0], |a, p| if p[0] < a[0] { p } else { a });
        let right =
            edge.iter().copied().fold(
                [f32::NEG_INFINITY, 0.0],
                |a, p| if p[0] > a[0] { p } else { a },
            );
        (left, right)
    }

    /// Distance between the eye corners.
    pub fn corner_distance(&self) -> f32 {
        let (l, r) = self.corners();
        ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt()
    }

    /// Angle in degrees between the corner-to-corner segment and the horizontal.
    pub fn tilt_degrees(&self) -> f32 {
        let (l, r) = self.corners();
        (r[1] - l[1]).atan2(r[0] - l[0]).to_degrees()
    }
}

/// Requested redirection (or gaze) in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleSpec {
    #[serde(rename = "v")]
    pub vertical: f32,
    #[serde(rename = "h", default)]
    pub horizontal: f32,
}

impl AngleSpec {
    pub fn vertical(v: f32) -> Self {
        Self {
            vertical: v,
            horizontal: 0.0,
        }
    }

    pub fn within_trained_range(&self) -> bool {
        self.vertical.abs() <= MAX_ANGLE && self.horizontal.abs() <= MAX_ANGLE
    }

    /// The network input: `[v]` for vertical models, `[v, h]` for 2-D ones.
    pub fn components(&self, dims: usize) -> Vec<f32> {
        match dims {
            1 => vec![self.vertical],
            _ => vec![self.vertical, self.horizontal],
        }
    }
}

impl std::ops::Sub for AngleSpec {
    type Output = AngleSpec;

    fn sub(self, rhs: Self) -> Self {
        AngleSpec {
            vertical: self.vertical - rhs.vertical,
            horizontal: self.horizontal - rhs.horizontal,
        }
    }
}

/// Angle batch `[B, dims]` as a tensor, warning about extrapolation.
pub fn angle_tensor<T: Real>(angles: &[AngleSpec], dims: usize) -> Tensor<T> {
    for a in angles.iter().filter(|a| !a.within_trained_range()) {
        log::warn!(
            "angle {a:?} is outside the trained range of +-{MAX_ANGLE} degrees; extrapolating"
        );
    }
    let values = angles
        .iter()
        .flat_map(|a| a.components(dims))
        .map(|v| T::lit(v as f64))
        .collect();
    Tensor::new([angles.len(), dims], values).expect("one row per angle")
}

/// `FC(16) -> ReLU -> FC(16) -> ReLU` on angles rescaled from degrees to `[-1, 1]`.
pub fn embed_angle<T: Real>(
    tape: &mut Tape<T>,
    angles: Var,
    mlp: [(&LayerParams<T>, LayerVars); 2],
) -> Result<Var> {
    let x = tape.scale(angles, T::lit(1.0 / MAX_ANGLE as f64))?;
    let h = layers::fully_connected(tape, x, mlp[0].0, mlp[0].1)?;
    let h = tape.relu(h)?;
    let h = layers::fully_connected(tape, h, mlp[1].0, mlp[1].1)?;
    tape.relu(h)
}

/// Replicates each embedding vector over all `height x width` positions.
pub fn broadcast_embedding<T: Real>(
    tape: &mut Tape<T>,
    embedding: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    tape.broadcast_spatial(embedding, height, width)
}

/// Fourteen maps `x - x_i`, `y - y_i` of signed offsets to each anchor, in
/// anchor order, x before y.
pub fn anchor_maps<T: Real>(anchors: &AnchorSet, height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    let mut out = vec![T::zero(); ANCHOR_MAPS * plane];
    for (i, p) in anchors.points.iter().enumerate() {
        let (ax, ay) = (T::lit(p[0] as f64), T::lit(p[1] as f64));
        for y in 0..height {
            for x in 0..width {
                out[2 * i * plane + y * width + x] = T::lit(x as f64) - ax;
                out[(2 * i + 1) * plane + y * width + x] = T::lit(y as f64) - ay;
            }
        }
    }
    Tensor::new([ANCHOR_MAPS, height, width], out).expect("consistent extents")
}

/// Extents of the half-scale stack: `floor(h / 2) x floor(w / 2)`.
pub fn half_extent(height: usize, width: usize) -> (usize, usize) {
    (height / 2, width / 2)
}

/// 2x2 box downsampling of a `[.., C, H, W]` tensor to floor-halved extents.
pub fn downsample2x<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() < 2 {
        return shape_err("downsample needs spatial axes");
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (oh, ow) = half_extent(h, w);
    let planes = image.numel() / (h * w);
    let src = image.values();
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                out.push(
                    (s[r0 + 2 * x] + s[r0 + 2 * x + 1] + s[r1 + 2 * x] + s[r1 + 2 * x + 1])
                        * quarter,
                );
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let n = new_shape.len();
    new_shape[n - 2] = oh;
    new_shape[n - 1] = ow;
    Tensor::new(new_shape, out)
}

/// The 33-map input stack `[RGB | embedding x16 | anchor offsets x14]` for
/// one image, built directly from tensors.
pub fn build_input_stack<T: Real>(
    image: &Tensor<T>,
    anchors: &AnchorSet,
    embedding: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return shape_err(format!("input image must be 3 x H x W, got {s:?}")),
    };
    if embedding.numel() != EMBED_DIM {
        return shape_err(format!(
            "embedding must have {EMBED_DIM} entries, got {}",
            embedding.numel()
        ));
    }
    let plane = h * w;
    let mut values = Vec::with_capacity(STACK_CHANNELS * plane);
    values.extend_from_slice(image.values());
    for &e in embedding.values() {
        values.extend(std::iter::repeat_n(e, plane));
    }
    values.extend_from_slice(anchor_maps::<T>(anchors, h, w).values());
    Tensor::new([STACK_CHANNELS, h, w], values)
}

/// Records the batched input stack on the tape. `images` is `[B, 3, H, W]`
/// and `embedding` `[B, 16]`; anchor maps enter as constants.
pub fn input_stack_on_tape<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    anchors: &[AnchorSet],
    embedding: Var,
) -> Result<Var> {
    let (b, c, h, w) = tape.value(images).dims4()?;
    if c != 3 || anchors.len() != b {
        return shape_err(format!(
            "stack needs 3-channel images and one anchor set per item ({b} images, {} anchor sets)",
            anchors.len()
        ));
    }
    let maps: Vec<Tensor<T>> = anchors.iter().map(|a| anchor_maps(a, h, w)).collect();
    let maps = tape.leaf(Tensor::stack(&maps)?);
    let emb = broadcast_embedding(tape, embedding, h, w)?;
    tape.concat_channels(&[images, emb, maps])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_anchors() -> AnchorSet {
        AnchorSet::new([
            [3.0, 20.0],
            [14.5, 11.0],
            [34.0, 10.5],
            [47.0, 19.0],
            [35.0, 28.0],
            [15.0, 28.5],
            [25.0, 20.0],
        ])
        .unwrap()
    }

    #[test]
    fn anchor_map_vanishes_at_its_anchor() {
        let a = sample_anchors();
        let maps = anchor_maps::<f64>(&a, 41, 51);
        assert_eq!(maps.shape(), &[14, 41, 51]);
        let plane = 41 * 51;
        let idx = 20 * 51 + 25;
        assert_eq!(maps.values()[12 * plane + idx], 0.0);
        assert_eq!(maps.values()[13 * plane + idx], 0.0);
    }

    #[test]
    fn half_scale_extent_floors() {
        assert_eq!(half_extent(41, 51), (20, 25));
        let img = Tensor::<f32>::full([3, 41, 51], 0.5);
        assert_eq!(downsample2x(&img).unwrap().shape(), &[3, 20, 25]);
    }

    #[test]
    fn stack_has_33_channels_and_keeps_rgb() {
        let img = Tensor::<f64>::from_fn([3, 41, 51], |i| (i % 97) as f64 / 97.0);
        let emb = Tensor::from_fn([16], |i| i as f64);
        let stack = build_input_stack(&img, &sample_anchors(), &emb).unwrap();
        assert_eq!(stack.shape(), &[33, 41, 51]);
        assert_eq!(stack.slice_channels(0, 3).unwrap(), img);
        let e = stack.slice_channels(3, 19).unwrap();
        assert!(e.values()[5 * 41 * 51..6 * 41 * 51]
            .iter()
            .all(|&v| v == 5.0));
    }

    #[test]
    fn half_scale_stack_uses_halved_anchors() {
        let img = Tensor::<f64>::full([3, 41, 51], 0.3);
        let small = downsample2x(&img).unwrap();
        let stack =
            build_input_stack(&small, &sample_anchors().scaled(0.5), &Tensor::zeros([16])).unwrap();
        assert_eq!(stack.shape(), &[33, 20, 25]);
        // pupil at (12.5, 10.0) at half scale: x-offset at column 12 is -0.5
        let plane = 20 * 25;
        assert_eq!(stack.values()[(19 + 12) * plane + 10 * 25 + 12], -0.5);
    }

    #[test]
    fn broadcast_sums_gradient_spatially() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::from_fn([1, 16], |i| i as f64));
        let b = broadcast_embedding(&mut tape, v, 41, 51).unwrap();
        assert_eq!(tape.value(b).shape(), &[1, 16, 41, 51]);
        assert!(tape.value(b).values()[3 * 41 * 51..4 * 41 * 51]
            .iter()
            .all(|&x| x == 3.0));
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == (41 * 51) as f64));
    }

    #[test]
    fn embedding_of_zero_weights_is_relu_of_bias() {
        let l1 = LayerParams::fully_connected(Tensor::<f64>::zeros([1, 16]), Tensor::zeros([16]))
            .unwrap();
        let bias = Tensor::from_fn([16], |i| i as f64 - 8.0);
        let l2 = LayerParams::fully_connected(Tensor::zeros([16, 16]), bias.clone()).unwrap();
        for angle in [-25.0, 0.0, 13.0] {
            let mut tape = Tape::new();
            let a = tape.leaf(angle_tensor::<f64>(&[AngleSpec::vertical(angle)], 1));
            let v1 = l1.register(&mut tape);
            let v2 = l2.register(&mut tape);
            let e = embed_angle(&mut tape, a, [(&l1, v1), (&l2, v2)]).unwrap();
            let expect: Vec<f64> = bias.values().iter().map(|&b| b.max(0.0)).collect();
            assert_eq!(tape.value(e).values(), expect.as_slice());
        }
    }

    #[test]
    fn tilt_and_corner_distance() {
        let a = AnchorSet::new([
            [0.0, 0.0],
            [1.0, -1.0],
            [2.0, -1.0],
            [4.0, 3.0],
            [2.0, 1.0],
            [1.0, 1.0],
            [1.5, 0.0],
        ])
        .unwrap();
        assert_eq!(a.corner_distance(), 5.0);
        assert!((a.tilt_degrees() - 36.869_896).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn anchor_maps_are_unit_slope_affine(
            pts in proptest::array::uniform7((-5.0f32..60.0, -5.0f32..50.0)),
            h in 2usize..12, w in 2usize..12,
        ) {
            let a = AnchorSet::new(pts.map(|(x, y)| [x, y])).unwrap();
            let maps = anchor_maps::<f64>(&a, h, w);
            let plane = h * w;
            for i in 0..NUM_ANCHORS {
                let dx = &maps.values()[2 * i * plane..(2 * i + 1) * plane];
                let dy = &maps.values()[(2 * i + 1) * plane..(2 * i + 2) * plane];
                prop_assert!((dx[0] + a.points[i][0] as f64).abs() < 1e-9);
                prop_assert!((dy[0] + a.points[i][1] as f64).abs() < 1e-9);
                for y in 0..h {
                    for x in 0..w {
                        if x + 1 < w {
                            prop_assert!((dx[y * w + x + 1] - dx[y * w + x] - 1.0).abs() < 1e-9);
                            prop_assert_eq!(dy[y * w + x + 1], dy[y * w + x]);
                        }
                        if y + 1 < h {
                            prop_assert!((dy[(y + 1) * w + x] - dy[y * w + x] - 1.0).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
