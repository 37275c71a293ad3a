//! Online differentiable 3D warping layer.
//!
//! Sparse landmark offsets become a dense per-pixel offset field via
//! barycentric interpolation over a Delaunay triangulation of the anchor
//! landmarks; a spoof trace is then warped onto a target face geometry by
//! bilinear gathering at the offset pixel locations.
//!
//! The warp is a backward gather anchored at the *target* landmarks: the
//! dense field is `Tri(p0, dst, src - dst)`, so each output pixel (in target
//! geometry) reads the source trace at its corresponding source location.
//! Outside the convex hull of the anchors the offset is zero and the warp is
//! the identity. Gradients flow to the trace values only; landmark
//! coordinates come from offline fitting and are treated as fixed inputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Number of face-shape vertices used for warping.
pub const LANDMARK_COUNT: usize = 140;

/// 2-D vertex coordinates `(x, y)` in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All points translated by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    /// Serialize as CSV, one `x,y` row per vertex.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p[0], p[1]);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (x, y) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("landmark line {}: `{line}`", ln + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("landmark line {}: `{line}`", ln + 1)))
            };
            points.push([parse(x)?, parse(y)?]);
        }
        Self::new(points)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Triangles as index triples into a [`LandmarkSet`], counter-clockwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
}

/// Dense `N x N x 2` pixel offset field; exactly zero outside the convex
/// hull of the anchors it was interpolated from.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOffset {
    n: usize,
    field: Vec<f64>,
}

impl DenseOffset {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Offset `(dx, dy)` at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        let i = (y * self.n + x) * 2;
        [self.field[i], self.field[i + 1]]
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed circumcircle test: > 0 when `p` lies strictly inside the
/// circumcircle of CCW triangle `(a, b, c)`.
fn in_circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> f64 {
    let (ax, ay) = (a[0] - p[0], a[1] - p[1]);
    let (bx, by) = (b[0] - p[0], b[1] - p[1]);
    let (cx, cy) = (c[0] - p[0], c[1] - p[1]);
    let a2 = ax * ax + ay * ay;
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx)
}

/// Delaunay triangulation by Bowyer-Watson insertion.
///
/// The returned triangles are CCW-oriented, canonically rotated (smallest
/// vertex first) and sorted, so the mesh is a pure function of the input.
pub fn delaunay(points: &LandmarkSet) -> Result<TriangleMesh> {
    let pts = points.points();
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "triangulation needs >= 3 points, got {}",
            pts.len()
        )));
    }
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            if d2 < 1e-18 {
                return Err(Error::Degenerate("duplicate landmark points".into()));
            }
        }
    }
    let collinear = {
        let (a, b) = (pts[0], pts[1]);
        pts[2..].iter().all(|&p| cross(a, b, p).abs() < 1e-12)
    };
    if collinear {
        return Err(Error::Degenerate("all landmark points collinear".into()));
    }

    // Super-triangle comfortably containing every point.
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1.0);
    let cx = (min_x + max_x) / 2.0;
    let cy = (min_y + max_y) / 2.0;
    let mut all: Vec<[f64; 2]> = pts.to_vec();
    let s0 = all.len();
    all.push([cx - 20.0 * span, cy - 10.0 * span]);
    all.push([cx + 20.0 * span, cy - 10.0 * span]);
    all.push([cx, cy + 20.0 * span]);

    let mut tris: Vec<[usize; 3]> = vec![[s0, s0 + 1, s0 + 2]];
    for (pi, &p) in pts.iter().enumerate() {
        // Triangles whose circumcircle contains p form the cavity.
        let mut bad = Vec::new();
        for (ti, t) in tris.iter().enumerate() {
            if in_circumcircle(all[t[0]], all[t[1]], all[t[2]], p) > 0.0 {
                bad.push(ti);
            }
        }
        // Boundary of the cavity = edges appearing exactly once.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for &ti in &bad {
            let t = tris[ti];
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if let Some(pos) = edges.iter().position(|&(a, b)| (b, a) == e) {
                    edges.swap_remove(pos);
                } else {
                    edges.push(e);
                }
            }
        }
        for &ti in bad.iter().rev() {
            tris.swap_remove(ti);
        }
        for (a, b) in edges {
            tris.push([a, b, pi]);
        }
    }
    tris.retain(|t| t.iter().all(|&i| i < s0));

    let mut triangles = Vec::with_capacity(tris.len());
    for t in tris {
        let area2 = cross(all[t[0]], all[t[1]], all[t[2]]);
        if area2.abs() < 1e-12 {
            continue;
        }
        let t = if area2 > 0.0 { t } else { [t[0], t[2], t[1]] };
        // Canonical rotation: smallest index first, orientation preserved.
        let k = (0..3).min_by_key(|&k| t[k]).unwrap();
        triangles.push([t[k], t[(k + 1) % 3], t[(k + 2) % 3]]);
    }
    if triangles.is_empty() {
        return Err(Error::Degenerate(
            "triangulation produced no triangles".into(),
        ));
    }
    triangles.sort_unstable();
    Ok(TriangleMesh { triangles })
}

/// Barycentric weights of `p` in CCW triangle `(a, b, c)`.
#[inline]
fn barycentric(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> [f64; 3] {
    let area = cross(a, b, c);
    [
        cross(p, b, c) / area,
        cross(p, c, a) / area,
        cross(p, a, b) / area,
    ]
}

/// Interpolate sparse per-anchor offsets to a dense `n x n` field.
///
/// Inside triangle `(a,b,c)` with barycentric weights `(wa,wb,wc)` the field
/// is `wa*off_a + wb*off_b + wc*off_c`; outside the convex hull it is zero.
/// A pixel on a shared edge belongs to the triangle with the lowest index.
pub fn sparse_to_dense(
    anchors: &LandmarkSet,
    offsets: &[[f64; 2]],
    n: usize,
) -> Result<DenseOffset> {
    if anchors.len() != offsets.len() {
        return Err(Error::Dimension(format!(
            "{} anchors vs {} offsets",
            anchors.len(),
            offsets.len()
        )));
    }
    let mesh = delaunay(anchors)?;
    let pts = anchors.points();
    let mut field = vec![0.0; n * n * 2];
    let mut owner: Vec<u32> = vec![u32::MAX; n * n];
    for (ti, t) in mesh.triangles().iter().enumerate() {
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let x_lo = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let x_hi = (a[0].max(b[0]).max(c[0]).ceil() as usize).min(n.saturating_sub(1));
        let y_lo = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let y_hi = (a[1].max(b[1]).max(c[1]).ceil() as usize).min(n.saturating_sub(1));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if owner[y * n + x] != u32::MAX {
                    continue;
                }
                let w = barycentric(a, b, c, [x as f64, y as f64]);
                if w[0] >= 0.0 && w[1] >= 0.0 && w[2] >= 0.0 {
                    owner[y * n + x] = ti as u32;
                    let dx =
                        w[0] * offsets[t[0]][0] + w[1] * offsets[t[1]][0] + w[2] * offsets[t[2]][0];
                    let dy =
                        w[0] * offsets[t[0]][1] + w[1] * offsets[t[1]][1] + w[2] * offsets[t[2]][1];
                    field[(y * n + x) * 2] = dx;
                    field[(y * n + x) * 2 + 1] = dy;
                }
            }
        }
    }
    Ok(DenseOffset { n, field })
}

/// Identity-plus-offset sampling coordinates for [`Graph::bilinear_sample`].
fn offset_coords(offsets: &DenseOffset) -> Tensor {
    let n = offsets.n;
    let mut data = Vec::with_capacity(n * n * 2);
    for y in 0..n {
        for x in 0..n {
            let d = offsets.at(x, y);
            data.push(x as f64 + d[0]);
            data.push(y as f64 + d[1]);
        }
    }
    Tensor::new(&[1, n, n, 2], data).unwrap()
}

/// Warp a trace (graph variable, `[1,N,N,C]`) from `src` landmark geometry
/// onto `dst` geometry. Gradients flow to the trace values.
pub fn warp_trace_var(g: &Graph, trace: Var, src: &LandmarkSet, dst: &LandmarkSet) -> Result<Var> {
    let d = g.with_value(trace, |t| t.dims4())?;
    if d[0] != 1 || d[1] != d[2] {
        return Err(Error::Dimension(format!(
            "warp expects a single [1,N,N,C] trace, got {:?}",
            d
        )));
    }
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!(
            "{} source vs {} target landmarks",
            src.len(),
            dst.len()
        )));
    }
    let n = d[1];
    let offsets: Vec<[f64; 2]> = src
        .points()
        .iter()
        .zip(dst.points())
        .map(|(s, t)| [s[0] - t[0], s[1] - t[1]])
        .collect();
    let dense = sparse_to_dense(dst, &offsets, n)?;
    g.bilinear_sample(trace, &offset_coords(&dense))
}

/// Plain-tensor bilinear lookup (`img [H,W,C]`, `coords [H,W,2]`).
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (img4, coords4) = (rank3_to_4(img)?, rank3_to_4(coords)?);
    let g = Graph::new();
    let v = g.constant(img4);
    let out = g.bilinear_sample(v, &coords4)?;
    rank4_to_3(&g.value(out))
}

/// Plain-tensor warp of `trace [N,N,C]` from `src` to `dst` geometry.
pub fn warp_trace(trace: &Tensor, src: &LandmarkSet, dst: &LandmarkSet) -> Result<Tensor> {
    let g = Graph::new();
    let v = g.constant(rank3_to_4(trace)?);
    let out = warp_trace_var(&g, v, src, dst)?;
    rank4_to_3(&g.value(out))
}

pub(crate) fn rank3_to_4(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        3 => {
            let s = t.shape();
            Tensor::new(&[1, s[0], s[1], s[2]], t.data().to_vec())
        }
        4 => Ok(t.clone()),
        _ => Err(Error::Dimension(format!(
            "expected rank-3 or rank-4 tensor, got {:?}",
            t.shape()
        ))),
    }
}

pub(crate) fn rank4_to_3(t: &Tensor) -> Result<Tensor> {
    let d = t.dims4()?;
    if d[0] != 1 {
        return Err(Error::Dimension(format!("expected batch 1, got {:?}", d)));
    }
    Tensor::new(&[d[1], d[2], d[3]], t.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> LandmarkSet {
        LandmarkSet::new(vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]]).unwrap()
    }

    #[test]
    fn unit_square_splits_into_two_triangles() {
        let lm = square();
        let mesh = delaunay(&lm).unwrap();
        assert_eq!(mesh.triangles().len(), 2);
        let covered: f64 = mesh
            .triangles()
            .iter()
            .map(|t| cross(lm.points()[t[0]], lm.points()[t[1]], lm.points()[t[2]]) / 2.0)
            .sum();
        assert!((covered - 16.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let lm = LandmarkSet::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        assert!(matches!(delaunay(&lm), Err(Error::Degenerate(_))));
    }

    #[test]
    fn empty_circumcircle_property_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<[f64; 2]> = (0..10)
                .map(|_| [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)])
                .collect();
            let lm = LandmarkSet::new(pts.clone()).unwrap();
            let mesh = delaunay(&lm).unwrap();
            for t in mesh.triangles() {
                // Compare against circumcenter distance directly.
                let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
                let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
                let ux = ((a[0] * a[0] + a[1] * a[1]) * (b[1] - c[1])
                    + (b[0] * b[0] + b[1] * b[1]) * (c[1] - a[1])
                    + (c[0] * c[0] + c[1] * c[1]) * (a[1] - b[1]))
                    / d;
                let uy = ((a[0] * a[0] + a[1] * a[1]) * (c[0] - b[0])
                    + (b[0] * b[0] + b[1] * b[1]) * (a[0] - c[0])
                    + (c[0] * c[0] + c[1] * c[1]) * (b[0] - a[0]))
                    / d;
                let r = ((a[0] - ux).powi(2) + (a[1] - uy).powi(2)).sqrt();
                for (pi, &p) in pts.iter().enumerate() {
                    if t.contains(&pi) {
                        continue;
                    }
                    let dist = ((p[0] - ux).powi(2) + (p[1] - uy).powi(2)).sqrt();
                    assert!(
                        dist >= r - 1e-9,
                        "point {pi} inside circumcircle of {t:?}: {dist} < {r}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_offsets_give_zero_field() {
        let lm = square();
        let dense = sparse_to_dense(&lm, &[[0.0, 0.0]; 4], 8).unwrap();
        assert!(dense.field().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offsets_fill_hull_and_leave_outside_zero() {
        let lm = square();
        let dense = sparse_to_dense(&lm, &[[3.0, 5.0]; 4], 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let v = dense.at(x, y);
                if x <= 4 && y <= 4 {
                    assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 5.0).abs() < 1e-12);
                } else {
                    assert_eq!(v, [0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn identity_coords_sample_exactly() {
        let img = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut coords = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                coords.push(x as f64);
                coords.push(y as f64);
            }
        }
        let coords = Tensor::new(&[2, 2, 2], coords).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn center_sample_averages_four_neighbours() {
        let img = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let coords = Tensor::new(&[2, 2, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identical_landmarks_warp_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let trace = Tensor::new(
            &[n, n, 3],
            (0..n * n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let lm = LandmarkSet::new(vec![
            [2.0, 2.0],
            [13.0, 2.0],
            [13.0, 13.0],
            [2.0, 13.0],
            [7.5, 8.0],
        ])
        .unwrap();
        let out = warp_trace(&trace, &lm, &lm).unwrap();
        assert_eq!(out.data(), trace.data());
    }

    #[test]
    fn pure_translation_matches_shift_oracle() {
        let n = 32;
        let mut data = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    data[(y * n + x) * 3 + c] = ((x * 7 + y * 3 + c * 11) % 17) as f64 / 17.0;
                }
            }
        }
        let trace = Tensor::new(&[n, n, 3], data).unwrap();
        let src = LandmarkSet::new(vec![
            [4.0, 4.0],
            [24.0, 5.0],
            [25.0, 25.0],
            [5.0, 24.0],
            [15.0, 14.0],
        ])
        .unwrap();
        let (tx, ty) = (3.0, 2.0);
        let dst = src.translated(tx, ty);
        let out = warp_trace(&trace, &src, &dst).unwrap();
        // Inside the hull of dst, out(p) must equal trace(p - t).
        let offsets: Vec<[f64; 2]> = vec![[-tx, -ty]; 5];
        let dense = sparse_to_dense(&dst, &offsets, n).unwrap();
        for y in 0..n {
            for x in 0..n {
                if dense.at(x, y) == [0.0, 0.0] {
                    continue; // outside hull
                }
                let (sx, sy) = (x as f64 - tx, y as f64 - ty);
                for c in 0..3 {
                    let expect = trace.data()[(sy as usize * n + sx as usize) * 3 + c];
                    let got = out.data()[(y * n + x) * 3 + c];
                    assert!(
                        (expect - got).abs() < 1e-9,
                        "pixel ({x},{y},{c}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn landmark_csv_round_trips() {
        let lm = square();
        let parsed = LandmarkSet::from_csv(&lm.to_csv()).unwrap();
        assert_eq!(parsed, lm);
    }
}
