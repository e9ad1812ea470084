//! Geometric kernel: bounding boxes, road quads, and the plane homography
//! that maps the image-space road region onto a metric rectangle.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual tolerance for corner reproduction, relative to the target
/// quad diagonal.
pub const CORNER_RESIDUAL_TOL: f64 = 1e-6;

const DET_EPSILON: f64 = 1e-12;
const W_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid bounding box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: String,
    },
    #[error("degenerate quad: {0}")]
    DegenerateQuad(String),
    #[error("singular homography (|det| <= {DET_EPSILON})")]
    SingularHomography,
    #[error("point maps to infinity (|w| < {W_EPSILON})")]
    PointAtInfinity,
}

/// A 2-D point in whatever plane the caller is working in (pixels or meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned detector box with continuous corner coordinates.
///
/// Invariant: `x1 < x2`, `y1 < y2`, all coordinates finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let invalid = |reason: &str| GeometryError::InvalidBBox {
            x1,
            y1,
            x2,
            y2,
            reason: reason.to_string(),
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 {
            return Err(invalid("x1 must be < x2"));
        }
        if y1 >= y2 {
            return Err(invalid("y1 must be < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from center position, aspect ratio (w/h) and height, as used by
    /// the tracker's state space.
    pub fn from_cah(cx: f64, cy: f64, aspect: f64, height: f64) -> Result<Self, GeometryError> {
        let w = aspect * height;
        Self::new(
            cx - w / 2.0,
            cy - height / 2.0,
            cx + w / 2.0,
            cy + height / 2.0,
        )
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

    pub fn center(&self) -> Point2 {
        Point2::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Overlap area with another box, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection-over-union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Bottom-center anchor of a box, taken as the road-contact point.
pub fn anchor_of(b: &BBox) -> Point2 {
    Point2::new((b.x1 + b.x2) / 2.0, b.y2)
}

/// Four corners of the surveilled road region, labelled in reading order:
/// `a` top-left, `b` top-right, `c` bottom-right, `d` bottom-left, with
/// a→d running along the direction of travel toward the camera.
///
/// Invariant: corners are in strictly convex position (no three collinear).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadRaw", into = "QuadRaw")]
pub struct Quad {
    a: Point2,
    b: Point2,
    c: Point2,
    d: Point2,
}

#[derive(Serialize, Deserialize)]
struct QuadRaw {
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    d: [f64; 2],
}

impl TryFrom<QuadRaw> for Quad {
    type Error = GeometryError;

    fn try_from(r: QuadRaw) -> Result<Self, Self::Error> {
        Quad::new(r.a.into(), r.b.into(), r.c.into(), r.d.into())
    }
}

impl From<Quad> for QuadRaw {
    fn from(q: Quad) -> Self {
        QuadRaw {
            a: q.a.into(),
            b: q.b.into(),
            c: q.c.into(),
            d: q.d.into(),
        }
    }
}

impl Quad {
    pub fn new(a: Point2, b: Point2, c: Point2, d: Point2) -> Result<Self, GeometryError> {
        let pts = [a, b, c, d];
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::DegenerateQuad("non-finite corner".into()));
        }
        // Convexity: cross products of consecutive edges must share a strict
        // sign; a near-zero cross means three corners are collinear.
        let mut sign = 0.0_f64;
        for i in 0..4 {
            let p0 = pts[i];
            let p1 = pts[(i + 1) % 4];
            let p2 = pts[(i + 2) % 4];
            let e1 = (p1.x - p0.x, p1.y - p0.y);
            let e2 = (p2.x - p1.x, p2.y - p1.y);
            let cross = e1.0 * e2.1 - e1.1 * e2.0;
            let scale = e1.0.hypot(e1.1) * e2.0.hypot(e2.1);
            if cross.abs() <= 1e-12 * scale.max(1.0) {
                return Err(GeometryError::DegenerateQuad(format!(
                    "corners {}, {}, {} are collinear",
                    i,
                    (i + 1) % 4,
                    (i + 2) % 4
                )));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(GeometryError::DegenerateQuad(
                    "corners are not convex".into(),
                ));
            }
        }
        Ok(Self { a, b, c, d })
    }

    /// Axis-aligned rectangle with corners (0,0), (w,0), (w,l), (0,l).
    pub fn rect(width: f64, length: f64) -> Result<Self, GeometryError> {
        Self::new(
            Point2::new(0.0, 0.0),
            Point2::new(width, 0.0),
            Point2::new(width, length),
            Point2::new(0.0, length),
        )
    }

    pub fn corners(&self) -> [Point2; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn a(&self) -> Point2 {
        self.a
    }

    pub fn b(&self) -> Point2 {
        self.b
    }

    pub fn c(&self) -> Point2 {
        self.c
    }

    pub fn d(&self) -> Point2 {
        self.d
    }

    /// Longer diagonal, used to scale residual tolerances.
    pub fn diagonal(&self) -> f64 {
        self.a.distance(&self.c).max(self.b.distance(&self.d))
    }
}

/// Plane projective transform, stored normalized with `h[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Builds from a raw matrix, rescaling so `h[2][2] = 1` and rejecting
    /// singular inputs.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::SingularHomography);
        }
        let scale = m[(2, 2)];
        let norm = m.amax();
        if scale.abs() <= W_EPSILON * norm.max(1.0) {
            return Err(GeometryError::SingularHomography);
        }
        let m = m / scale;
        if m.determinant().abs() <= DET_EPSILON {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(GeometryError::SingularHomography)?;
        Self::from_matrix(inv)
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h.m[(r, c)];
            }
        }
        rows
    }
}

/// Projective application of `h` to `p`.
pub fn transform_point(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let v = h.m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < W_EPSILON {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Hartley similarity: translate the centroid to the origin and scale so the
/// RMS distance from it is sqrt(2). Conditions the DLT system for the long
/// skinny quads typical of road calibrations.
fn normalizing_transform(pts: &[Point2; 4]) -> Result<Matrix3<f64>, GeometryError> {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let rms = (pts
        .iter()
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / 4.0)
        .sqrt();
    if rms <= 1e-12 {
        return Err(GeometryError::DegenerateQuad("coincident corners".into()));
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Estimates the homography mapping each source corner to its paired target
/// corner, via the normalized direct linear transform.
pub fn estimate_homography(source: &Quad, target: &Quad) -> Result<Homography, GeometryError> {
    let src = source.corners();
    let tgt = target.corners();

    let t_src = normalizing_transform(&src)?;
    let t_tgt = normalizing_transform(&tgt)?;

    let apply = |t: &Matrix3<f64>, p: Point2| {
        let v = t * Vector3::new(p.x, p.y, 1.0);
        Point2::new(v.x / v.z, v.y / v.z)
    };

    // Two equations per correspondence; nine unknowns solved as the null
    // vector of the 8x9 design matrix. Padded square so the SVD exposes the
    // full right singular basis.
    let mut a = DMatrix::<f64>::zeros(9, 9);
    for i in 0..4 {
        let p = apply(&t_src, src[i]);
        let q = apply(&t_tgt, tgt[i]);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    let svd = a.svd(true, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::DegenerateQuad("svd failed".into()))?;
    let h_vec = v_t.row(v_t.nrows() - 1);
    let h_norm = Matrix3::from_fn(|r, c| h_vec[3 * r + c]);

    let t_tgt_inv = t_tgt
        .try_inverse()
        .ok_or_else(|| GeometryError::DegenerateQuad("normalization not invertible".into()))?;
    let h = Homography::from_matrix(t_tgt_inv * h_norm * t_src)?;

    // The four-point solve is exact; a residual above tolerance means the
    // correspondence was not actually representable (degenerate pairing).
    let tol = CORNER_RESIDUAL_TOL * target.diagonal();
    for i in 0..4 {
        let mapped = transform_point(&h, src[i])?;
        if mapped.distance(&tgt[i]) > tol {
            return Err(GeometryError::DegenerateQuad(format!(
                "corner {i} residual {} exceeds tolerance",
                mapped.distance(&tgt[i])
            )));
        }
    }
    Ok(h)
}
