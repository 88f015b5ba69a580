//! Axis-aligned box algebra in continuous pixel coordinates.
//!
//! Valid boxes live in `[0, W] x [0, H]` with strictly positive width and
//! height. Every constructor clamps first and validates second, so slight
//! overshoot from a model reply is repaired while a collapsed box is an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}] after clamping")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("invalid image dimensions {0}x{1}")]
    InvalidDims(u32, u32),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn w(&self) -> f64 {
        f64::from(self.width)
    }

    pub fn h(&self) -> f64 {
        f64::from(self.height)
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A box `[x1, y1, x2, y2]` with `(x1, y1)` the top-left corner.
///
/// Serialized as a bare four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: [f64; 4]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if raw[0] >= raw[2] || raw[1] >= raw[3] {
            return Err(GeometryError::DegenerateBox(raw[0], raw[1], raw[2], raw[3]));
        }
        Ok(Self {
            x1: raw[0],
            y1: raw[1],
            x2: raw[2],
            y2: raw[3],
        })
    }
}

impl BoundingBox {
    /// Builds a box without a bounds check; only the strict ordering is
    /// enforced. Use [`validate_box`] when image bounds apply.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::try_from([x1, y1, x2, y2])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Integer rendering used in prompts.
    pub fn rounded(&self) -> [i64; 4] {
        self.to_array().map(|v| v.round() as i64)
    }

    pub fn fits(&self, dims: ImageDims) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= dims.w() && self.y2 <= dims.h()
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Outcome of a clamp-then-validate pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validated {
    pub bbox: BoundingBox,
    pub clamped: bool,
}

/// Clamps `raw` into the image and checks strict ordering.
pub fn validate_box_noted(raw: [f64; 4], dims: ImageDims) -> Result<Validated> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let clamped = [
        raw[0].clamp(0.0, dims.w()),
        raw[1].clamp(0.0, dims.h()),
        raw[2].clamp(0.0, dims.w()),
        raw[3].clamp(0.0, dims.h()),
    ];
    let bbox = BoundingBox::try_from(clamped)?;
    Ok(Validated {
        bbox,
        clamped: clamped != raw,
    })
}

pub fn validate_box(raw: [f64; 4], dims: ImageDims) -> Result<BoundingBox> {
    validate_box_noted(raw, dims).map(|v| v.bbox)
}

/// Continuous-area intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Geometric edit requested by the refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RefinementOp {
    /// Whole-box shift `(dx, dy)` plus independent per-side offsets.
    Delta {
        dx: f64,
        dy: f64,
        d_l: f64,
        d_r: f64,
        d_t: f64,
        d_b: f64,
    },
    /// Grows every side by `a` pixels; negative `a` shrinks.
    ExpandShrink { a: f64 },
    /// Moves the center to `(cx, cy)` keeping width and height.
    Recenter { cx: f64, cy: f64 },
}

impl RefinementOp {
    pub fn apply(&self, b: &BoundingBox, dims: ImageDims) -> Result<Validated> {
        match *self {
            RefinementOp::Delta {
                dx,
                dy,
                d_l,
                d_r,
                d_t,
                d_b,
            } => apply_delta_noted(b, [dx, dy, d_l, d_r, d_t, d_b], dims),
            RefinementOp::ExpandShrink { a } => apply_expand_shrink_noted(b, a, dims),
            RefinementOp::Recenter { cx, cy } => apply_recenter_noted(b, cx, cy, dims),
        }
    }
}

/// `delta` is `[dx, dy, d_l, d_r, d_t, d_b]`.
fn apply_delta_noted(b: &BoundingBox, delta: [f64; 6], dims: ImageDims) -> Result<Validated> {
    let [dx, dy, d_l, d_r, d_t, d_b] = delta;
    validate_box_noted(
        [
            b.x1 + dx + d_l,
            b.y1 + dy + d_t,
            b.x2 + dx + d_r,
            b.y2 + dy + d_b,
        ],
        dims,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn apply_delta(
    b: &BoundingBox,
    dx: f64,
    dy: f64,
    d_l: f64,
    d_r: f64,
    d_t: f64,
    d_b: f64,
    dims: ImageDims,
) -> Result<BoundingBox> {
    apply_delta_noted(b, [dx, dy, d_l, d_r, d_t, d_b], dims).map(|v| v.bbox)
}

fn apply_expand_shrink_noted(b: &BoundingBox, a: f64, dims: ImageDims) -> Result<Validated> {
    validate_box_noted([b.x1 - a, b.y1 - a, b.x2 + a, b.y2 + a], dims)
}

pub fn apply_expand_shrink(b: &BoundingBox, a: f64, dims: ImageDims) -> Result<BoundingBox> {
    apply_expand_shrink_noted(b, a, dims).map(|v| v.bbox)
}

fn apply_recenter_noted(b: &BoundingBox, cx: f64, cy: f64, dims: ImageDims) -> Result<Validated> {
    if !cx.is_finite() || !cy.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let cx = cx.clamp(0.0, dims.w());
    let cy = cy.clamp(0.0, dims.h());
    if (cx, cy) == b.center() {
        return Ok(Validated {
            bbox: *b,
            clamped: false,
        });
    }
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    validate_box_noted([cx - hw, cy - hh, cx + hw, cy + hh], dims)
}

/// Recentering may shrink the box at image edges; the `clamped` flag of the
/// noted variant reports it.
pub fn apply_recenter(b: &BoundingBox, cx: f64, cy: f64, dims: ImageDims) -> Result<BoundingBox> {
    apply_recenter_noted(b, cx, cy, dims).map(|v| v.bbox)
}
