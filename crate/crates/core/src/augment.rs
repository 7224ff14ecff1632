//! Geometric augmentation of impressions: scaling, translation, rotation,
//! flips, and the scale/translate/rotate pairings. Every op resamples
//! bilinearly around the image centre, fills with zeros, and clamps to
//! `[0, 1]`. There is no randomness; the full op list is fixed.

use crate::error::{Error, Result};
use crate::impressions::{DataImpression, ImpressionKind, TransferSet};
use crate::tensor::Tensor;

pub const SCALE_FACTORS: [f64; 3] = [0.90, 0.75, 0.60];
pub const ROTATION_ANGLES: [i32; 10] = [-90, -70, -50, -30, -10, 10, 30, 50, 70, 90];
/// 20% of 32 pixels, rounded toward zero.
pub const TRANSLATE_PIXELS: usize = 6;
pub const OUTPUTS_PER_IMPRESSION: usize = 102;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

pub const DIRECTIONS: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    LeftRight,
    UpDown,
    Transpose,
}

pub const FLIPS: [Flip; 3] = [Flip::LeftRight, Flip::UpDown, Flip::Transpose];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    Scale(f64),
    Translate(Direction),
    Rotate(i32),
    Flip(Flip),
    ScaleTranslate(f64, Direction),
    TranslateRotate(Direction, i32),
    ScaleRotate(f64, i32),
}

impl AugmentOp {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            AugmentOp::Scale(f) => scale(image, f),
            AugmentOp::Translate(d) => translate(image, d),
            AugmentOp::Rotate(a) => rotate(image, a),
            AugmentOp::Flip(f) => flip(image, f),
            AugmentOp::ScaleTranslate(f, d) => translate(&scale(image, f)?, d),
            AugmentOp::TranslateRotate(d, a) => rotate(&translate(image, d)?, a),
            AugmentOp::ScaleRotate(f, a) => rotate(&scale(image, f)?, a),
        }
    }
}

/// The 102 ops applied to every impression, in output order.
pub fn all_ops() -> Vec<AugmentOp> {
    let mut ops = Vec::with_capacity(OUTPUTS_PER_IMPRESSION);
    ops.extend(SCALE_FACTORS.iter().map(|&f| AugmentOp::Scale(f)));
    ops.extend(DIRECTIONS.iter().map(|&d| AugmentOp::Translate(d)));
    ops.extend(ROTATION_ANGLES.iter().map(|&a| AugmentOp::Rotate(a)));
    ops.extend(FLIPS.iter().map(|&f| AugmentOp::Flip(f)));
    for &f in &SCALE_FACTORS {
        ops.extend(DIRECTIONS.iter().map(|&d| AugmentOp::ScaleTranslate(f, d)));
    }
    for &d in &DIRECTIONS {
        ops.extend(ROTATION_ANGLES.iter().map(|&a| AugmentOp::TranslateRotate(d, a)));
    }
    for &f in &SCALE_FACTORS {
        ops.extend(ROTATION_ANGLES.iter().map(|&a| AugmentOp::ScaleRotate(f, a)));
    }
    ops
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Dimension(format!("augmentation expects [H, W, C], got {s:?}"))),
    }
}

/// Builds an output image by evaluating `source(y, x, ch)` per pixel.
fn remap(image: &Tensor, mut source: impl FnMut(usize, usize, usize) -> f64) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(source(y, x, ch).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Bilinear sample at fractional `(sy, sx)`; neighbours outside the frame
/// count as zero.
fn bilinear(image: &Tensor, sy: f64, sx: f64, ch: usize) -> f64 {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let (y0, x0) = (sy.floor(), sx.floor());
    let (wy, wx) = (sy - y0, sx - x0);
    let at = |y: f64, x: f64| {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            d[(y as usize * w + x as usize) * c + ch]
        }
    };
    (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x0 + 1.0))
        + wy * ((1.0 - wx) * at(y0 + 1.0, x0) + wx * at(y0 + 1.0, x0 + 1.0))
}

fn centre(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}

/// Shrinks the content by `factor` about the centre of a zero canvas.
pub fn scale(image: &Tensor, factor: f64) -> Result<Tensor> {
    if !SCALE_FACTORS.contains(&factor) {
        return Err(Error::Parameter(format!("scale factor {factor} not in {SCALE_FACTORS:?}")));
    }
    let (h, w, _) = dims(image)?;
    let (cy, cx) = (centre(h), centre(w));
    remap(image, |y, x, ch| {
        bilinear(image, cy + (y as f64 - cy) / factor, cx + (x as f64 - cx) / factor, ch)
    })
}

/// Shifts the content [`TRANSLATE_PIXELS`] towards `direction`, zero fill.
pub fn translate(image: &Tensor, direction: Direction) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    let s = TRANSLATE_PIXELS as isize;
    let (dy, dx) = match direction {
        Direction::Left => (0, s),
        Direction::Right => (0, -s),
        Direction::Up => (s, 0),
        Direction::Down => (-s, 0),
    };
    let d = image.data();
    remap(image, |y, x, ch| {
        let (sy, sx) = (y as isize + dy, x as isize + dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            d[(sy as usize * w + sx as usize) * c + ch]
        }
    })
}

fn sin_cos_degrees(angle: i32) -> (f64, f64) {
    match angle.rem_euclid(360) {
        0 => (0.0, 1.0),
        90 => (1.0, 0.0),
        180 => (0.0, -1.0),
        270 => (-1.0, 0.0),
        _ => (angle as f64).to_radians().sin_cos(),
    }
}

/// Rotates counter-clockwise (as displayed) by `angle` degrees about the
/// image centre.
pub fn rotate(image: &Tensor, angle: i32) -> Result<Tensor> {
    if !ROTATION_ANGLES.contains(&angle) {
        return Err(Error::Parameter(format!("rotation {angle} not in {ROTATION_ANGLES:?}")));
    }
    rotate_any(image, angle)
}

fn rotate_any(image: &Tensor, angle: i32) -> Result<Tensor> {
    let (h, w, _) = dims(image)?;
    let (cy, cx) = (centre(h), centre(w));
    let (sin, cos) = sin_cos_degrees(angle);
    remap(image, |y, x, ch| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        bilinear(image, cy + dx * sin + dy * cos, cx + dx * cos - dy * sin, ch)
    })
}

pub fn flip(image: &Tensor, kind: Flip) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    if kind == Flip::Transpose && h != w {
        return Err(Error::Dimension(format!("transpose needs a square image, got {h}x{w}")));
    }
    let d = image.data();
    remap(image, |y, x, ch| {
        let (sy, sx) = match kind {
            Flip::LeftRight => (y, w - 1 - x),
            Flip::UpDown => (h - 1 - y, x),
            Flip::Transpose => (x, y),
        };
        d[(sy * w + sx) * c + ch]
    })
}

/// Applies every op in [`all_ops`] to every impression. Each output keeps
/// its source's target, class, and beta.
pub fn augment_all(set: &TransferSet) -> Result<TransferSet> {
    let ops = all_ops();
    let mut impressions = Vec::with_capacity(set.len() * ops.len());
    for imp in &set.impressions {
        for op in &ops {
            impressions.push(DataImpression {
                image: op.apply(&imp.image)?,
                ..imp.clone()
            });
        }
    }
    let mut provenance = set.provenance.clone();
    provenance.kind = ImpressionKind::Augmented;
    Ok(TransferSet {
        provenance,
        impressions,
    })
}

/// The output of [`augment_all`] computed on demand: item `i` is op
/// `i % 102` applied to impression `i / 102`.
#[derive(Clone, Debug)]
pub struct AugmentedView<'a> {
    base: &'a TransferSet,
    ops: Vec<AugmentOp>,
}

impl<'a> AugmentedView<'a> {
    pub fn new(base: &'a TransferSet) -> Self {
        Self {
            base,
            ops: all_ops(),
        }
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let imp = self.base.impressions.get(i / self.ops.len()).ok_or_else(|| {
            Error::Dimension(format!("augmented index {i} out of range for {}", self.len()))
        })?;
        self.ops[i % self.ops.len()].apply(&imp.image)
    }

    pub fn base(&self) -> &TransferSet {
        self.base
    }
}
