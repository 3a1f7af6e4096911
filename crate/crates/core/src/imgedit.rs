//! Parameterized global color edits and the procedural source-image generator.
//!
//! Every edit takes a normalized value in `[-1, 1]` where `0` is the identity,
//! and clamps its output to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Minimum per-channel variance a synthesized image must reach.
pub const MIN_CHANNEL_VARIANCE: f64 = 0.005;

/// A fixed-size 32x32 RGB raster, row-major, interleaved channels, values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}x{})", IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    }
}

impl Image {
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(PIXELS * CHANNELS);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image { data }
    }

    pub fn from_raw(data: Vec<f32>) -> Result<Self> {
        if data.len() != PIXELS * CHANNELS {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                PIXELS * CHANNELS
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values must lie in [0, 1]".into()));
        }
        Ok(Image { data })
    }

    /// Reconstructs an image from 8-bit RGB bytes as `byte / 255`.
    pub fn from_rgb8(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PIXELS * CHANNELS {
            return Err(Error::Shape(format!(
                "rgb8 buffer has {} bytes, expected {}",
                bytes.len(),
                PIXELS * CHANNELS
            )));
        }
        Ok(Image {
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v as f64 * 255.0).round() as u8)
            .collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * IMAGE_SIZE + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Population variance of each channel.
    pub fn channel_variance(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let vals = self.data.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64);
            let mean = vals.clone().sum::<f64>() / PIXELS as f64;
            *slot = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / PIXELS as f64;
        }
        out
    }

    fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(CHANNELS) {
            let out = f([px[0] as f64, px[1] as f64, px[2] as f64]);
            data.extend(out.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        }
        Image { data }
    }
}

/// The closed vocabulary of edit operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Gamma,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Saturation,
        OpKind::Hue,
        OpKind::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::Saturation => "saturation",
            OpKind::Hue => "hue",
            OpKind::Gamma => "gamma",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// One edit with its normalized value in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditOp {
    pub kind: OpKind,
    pub value: f64,
}

impl EditOp {
    pub fn new(kind: OpKind, value: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&value) {
            return Err(Error::InvalidSpec(format!(
                "{} value {value} outside [-1, 1]",
                kind
            )));
        }
        Ok(EditOp { kind, value })
    }

    /// Builds an op from a textual name; unknown names are rejected.
    pub fn named(name: &str, value: f64) -> Result<Self> {
        EditOp::new(name.parse()?, value)
    }
}

/// Ordered list of 1..=3 edits with distinct operation names.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSpec {
    ops: Vec<EditOp>,
}

impl EditSpec {
    pub const MAX_OPS: usize = 3;

    pub fn new(ops: Vec<EditOp>) -> Result<Self> {
        if ops.is_empty() || ops.len() > Self::MAX_OPS {
            return Err(Error::InvalidSpec(format!(
                "spec must hold 1..={} ops, got {}",
                Self::MAX_OPS,
                ops.len()
            )));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].iter().any(|o| o.kind == op.kind) {
                return Err(Error::InvalidSpec(format!("duplicate op {}", op.kind)));
            }
            if !(-1.0..=1.0).contains(&op.value) {
                return Err(Error::InvalidSpec(format!(
                    "{} value {} outside [-1, 1]",
                    op.kind, op.value
                )));
            }
        }
        Ok(EditSpec { ops })
    }

    pub fn ops(&self) -> &[EditOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value_of(&self, kind: OpKind) -> Option<f64> {
        self.ops.iter().find(|o| o.kind == kind).map(|o| o.value)
    }
}

// RGB -> YIQ and back.
const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
];
const YIQ_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.956, 0.621],
    [1.0, -0.272, -0.647],
    [1.0, -1.106, 1.703],
];

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// RGB-space matrix rotating chroma by `theta` radians about the Y axis of YIQ.
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    mat3_mul(&YIQ_TO_RGB, &mat3_mul(&rot, &RGB_TO_YIQ))
}

fn luma(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Applies a single edit, clamping every channel to `[0, 1]`.
pub fn apply_op(img: &Image, op: &EditOp) -> Result<Image> {
    let p = op.value;
    if !(-1.0..=1.0).contains(&p) {
        return Err(Error::InvalidSpec(format!("{} value {p} outside [-1, 1]", op.kind)));
    }
    if p == 0.0 {
        return Ok(img.clone());
    }
    let out = match op.kind {
        OpKind::Brightness => img.map_pixels(|px| px.map(|v| v + 0.5 * p)),
        OpKind::Contrast => img.map_pixels(|px| px.map(|v| (v - 0.5) * (1.0 + p) + 0.5)),
        OpKind::Saturation => img.map_pixels(|px| {
            let l = luma(px);
            px.map(|v| l + (v - l) * (1.0 + p))
        }),
        OpKind::Hue => {
            let m = hue_matrix(p * std::f64::consts::FRAC_PI_2);
            img.map_pixels(|px| {
                let mut out = [0.0; 3];
                for (i, row) in m.iter().enumerate() {
                    out[i] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                }
                out
            })
        }
        OpKind::Gamma => {
            let exponent = 2f64.powf(-p);
            img.map_pixels(|px| px.map(|v| v.powf(exponent)))
        }
    };
    Ok(out)
}

/// Left fold of [`apply_op`] over the spec in list order.
pub fn apply_spec(img: &Image, spec: &EditSpec) -> Result<Image> {
    spec.ops()
        .iter()
        .try_fold(img.clone(), |acc, op| apply_op(&acc, op))
}

/// Deterministic procedural source image: a two-color linear gradient with 1-3
/// filled rectangles or discs on top.
pub fn synth_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let img = draw_scene(&mut rng);
        if img
            .channel_variance()
            .iter()
            .all(|&v| v >= MIN_CHANNEL_VARIANCE)
        {
            return img;
        }
    }
}

enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn draw_scene(rng: &mut ChaCha8Rng) -> Image {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let n_shapes = rng.random_range(1..=3);
    let size = IMAGE_SIZE as f32;
    let shapes: Vec<(Shape, [f32; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let w = rng.random_range(4.0..size * 0.6);
                let h = rng.random_range(4.0..size * 0.6);
                let x0 = rng.random_range(0.0..size - w);
                let y0 = rng.random_range(0.0..size - h);
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            } else {
                Shape::Disc {
                    cx: rng.random_range(0.0..size),
                    cy: rng.random_range(0.0..size),
                    r: rng.random_range(3.0..size * 0.35),
                }
            };
            (shape, random_color(rng))
        })
        .collect();

    Image::from_fn(|x, y| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        if let Some((_, color)) = shapes.iter().rev().find(|(s, _)| s.contains(fx, fy)) {
            return *color;
        }
        // projection onto the gradient direction, normalized to [0, 1]
        let u = ((fx / size - 0.5) * dx + (fy / size - 0.5) * dy) / std::f32::consts::SQRT_2 + 0.5;
        let u = u.clamp(0.0, 1.0);
        [0, 1, 2].map(|c| c0[c] * (1.0 - u) + c1[c] * u)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32) -> Image {
        Image::from_fn(|_, _| [v, v, v])
    }

    fn op(kind: OpKind, value: f64) -> EditOp {
        EditOp::new(kind, value).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        assert_eq!(synth_image(42), synth_image(42));
        assert_ne!(synth_image(1), synth_image(2));
    }

    #[test]
    fn synth_meets_variance_floor() {
        for seed in 0..200 {
            let img = synth_image(seed);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for v in img.channel_variance() {
                assert!(v >= MIN_CHANNEL_VARIANCE, "seed {seed}: variance {v}");
            }
        }
    }

    #[test]
    fn identity_at_zero_for_every_op() {
        let img = synth_image(9);
        for kind in OpKind::ALL {
            assert_eq!(apply_op(&img, &op(kind, 0.0)).unwrap(), img, "{kind}");
        }
    }

    #[test]
    fn hand_evaluated_pixels() {
        let out = apply_op(&flat(0.2), &op(OpKind::Brightness, 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let out = apply_op(&flat(0.8), &op(OpKind::Contrast, -1.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let out = apply_op(&flat(0.25), &op(OpKind::Gamma, 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn saturation_minus_one_is_grayscale() {
        let img = synth_image(3);
        let out = apply_op(&img, &op(OpKind::Saturation, -1.0)).unwrap();
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let [r, g, b] = out.pixel(x, y);
                assert!((r - g).abs() < 1e-5 && (g - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hue_rotation_preserves_gray() {
        let out = apply_op(&flat(0.4), &op(OpKind::Hue, 0.7)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-3));
    }

    #[test]
    fn every_op_changes_a_synth_image() {
        let img = synth_image(11);
        for kind in OpKind::ALL {
            for p in [-0.1, 0.1, -1.0, 1.0] {
                assert_ne!(apply_op(&img, &op(kind, p)).unwrap(), img, "{kind} {p}");
            }
        }
    }

    #[test]
    fn fold_is_order_sensitive() {
        let img = synth_image(5);
        let a = EditSpec::new(vec![op(OpKind::Brightness, 0.4), op(OpKind::Contrast, -0.2)]).unwrap();
        let b = EditSpec::new(vec![op(OpKind::Contrast, -0.2), op(OpKind::Brightness, 0.4)]).unwrap();
        assert_ne!(apply_spec(&img, &a).unwrap(), apply_spec(&img, &b).unwrap());

        let single = EditSpec::new(vec![op(OpKind::Brightness, 0.4)]).unwrap();
        assert_eq!(
            apply_spec(&img, &single).unwrap(),
            apply_op(&img, &op(OpKind::Brightness, 0.4)).unwrap()
        );
    }

    #[test]
    fn spec_validation() {
        assert!(EditSpec::new(vec![]).is_err());
        assert!(EditSpec::new(vec![op(OpKind::Hue, 0.1), op(OpKind::Hue, 0.2)]).is_err());
        let four = OpKind::ALL[..4].iter().map(|&k| op(k, 0.5)).collect();
        assert!(EditSpec::new(four).is_err());
        assert!(matches!(EditOp::named("blur", 0.1), Err(Error::UnknownOp(_))));
        assert!(EditOp::new(OpKind::Gamma, 1.5).is_err());
    }
}
