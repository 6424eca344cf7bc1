//! Feature sampling along Catmull-Rom centerlines.
//!
//! Each text instance is four control points. The curve through them is three
//! chained Catmull-Rom segments with the end points duplicated, so it passes
//! through all four points. Proposals are the top-K per-token predictions;
//! their curves are sampled at `n` points which become decoder queries.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logit, sigmoid, Mlp, Scalar, Tape, Tensor, Var};

pub type Point = [f64; 2];

/// Default tension.
pub const DEFAULT_TENSION: f64 = 0.5;
/// Clamp applied to pixel coordinates before the logit.
pub const COORD_CLAMP: f64 = 1e-6;

/// Four control points along one centerline, in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPointSet(pub [Point; 4]);

impl ControlPointSet {
    pub fn points(&self) -> &[Point; 4] {
        &self.0
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self(self.0.map(f))
    }

    /// The three chained segments, ends duplicated.
    fn segments(&self) -> [[Point; 4]; 3] {
        let [p0, p1, p2, p3] = self.0;
        [[p0, p0, p1, p2], [p0, p1, p2, p3], [p1, p2, p3, p3]]
    }
}

/// Catmull-Rom basis matrix for tension `tau`; rows multiply `[1, u, u², u³]`.
pub fn basis_matrix(tau: f64) -> [[f64; 4]; 4] {
    [
        [0.0, 1.0, 0.0, 0.0],
        [-tau, 0.0, tau, 0.0],
        [2.0 * tau, tau - 3.0, 3.0 - 2.0 * tau, -tau],
        [-tau, 2.0 - tau, tau - 2.0, tau],
    ]
}

/// Weights `U(u)·M(τ)` for the four points of one segment.
pub fn catrom_basis(u: f64, tau: f64) -> [f64; 4] {
    if u == 0.0 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    if u == 1.0 {
        return [0.0, 0.0, 1.0, 0.0];
    }
    let m = basis_matrix(tau);
    let powers = [1.0, u, u * u, u * u * u];
    let mut w = [0.0; 4];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = (0..4).map(|i| powers[i] * m[i][j]).sum();
    }
    w
}

/// `d/du` of [`catrom_basis`].
pub fn catrom_basis_derivative(u: f64, tau: f64) -> [f64; 4] {
    let m = basis_matrix(tau);
    let powers = [0.0, 1.0, 2.0 * u, 3.0 * u * u];
    let mut w = [0.0; 4];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = (0..4).map(|i| powers[i] * m[i][j]).sum();
    }
    w
}

fn combine(w: [f64; 4], pts: &[Point; 4]) -> Point {
    let mut out = [0.0; 2];
    for (wi, p) in w.iter().zip(pts) {
        out[0] += wi * p[0];
        out[1] += wi * p[1];
    }
    out
}

/// Splits a global parameter `t ∈ [0,1]` into (segment, local u).
fn locate(t: f64) -> (usize, f64) {
    let s = 3.0 * t.clamp(0.0, 1.0);
    let seg = (s.floor() as usize).min(2);
    (seg, (s - seg as f64).clamp(0.0, 1.0))
}

/// Point on the chained curve at global parameter `t`.
pub fn curve_point(crp: &ControlPointSet, t: f64, tau: f64) -> Point {
    let (seg, u) = locate(t);
    combine(catrom_basis(u, tau), &crp.segments()[seg])
}

/// One-sided derivative w.r.t. the global parameter. `left` selects the
/// segment ending at a join instead of the one starting there.
pub fn curve_derivative(crp: &ControlPointSet, t: f64, tau: f64, left: bool) -> Point {
    let (mut seg, mut u) = locate(t);
    if left && u == 0.0 && seg > 0 {
        seg -= 1;
        u = 1.0;
    }
    let d = combine(catrom_basis_derivative(u, tau), &crp.segments()[seg]);
    [3.0 * d[0], 3.0 * d[1]]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform in the global curve parameter.
    #[default]
    Parameter,
    /// Uniform in arc length, from a dense polyline approximation.
    ArcLength,
}

const ARC_SUBDIV: usize = 256;

/// `n` samples along the chained curve; the first and last are `crp0`, `crp3`.
pub fn sample_curve(
    crp: &ControlPointSet,
    n: usize,
    tau: f64,
    mode: SamplingMode,
) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "sample_curve needs n >= 2, got {n}"
        )));
    }
    let params: Vec<f64> = match mode {
        SamplingMode::Parameter => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        SamplingMode::ArcLength => arc_length_params(crp, n, tau),
    };
    let mut pts: Vec<Point> = params.iter().map(|&t| curve_point(crp, t, tau)).collect();
    pts[0] = crp.0[0];
    pts[n - 1] = crp.0[3];
    Ok(pts)
}

fn arc_length_params(crp: &ControlPointSet, n: usize, tau: f64) -> Vec<f64> {
    let steps = 3 * ARC_SUBDIV;
    let ts: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let mut cum = vec![0.0];
    let mut prev = curve_point(crp, 0.0, tau);
    for &t in &ts[1..] {
        let p = curve_point(crp, t, tau);
        let last = *cum.last().unwrap();
        cum.push(last + ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt());
        prev = p;
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    }
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let j = cum.partition_point(|&c| c < target).clamp(1, steps);
            let (c0, c1) = (cum[j - 1], cum[j]);
            let frac = if c1 > c0 {
                (target - c0) / (c1 - c0)
            } else {
                0.0
            };
            ts[j - 1] + frac * (ts[j] - ts[j - 1])
        })
        .collect()
}

/// Exact axis-aligned bounds `[x0, y0, x1, y1]` of the whole chained curve.
pub fn curve_bounds(crp: &ControlPointSet, tau: f64) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    let mut include = |p: Point| {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    };
    let m = basis_matrix(tau);
    for seg in crp.segments() {
        include(combine(catrom_basis(0.0, tau), &seg));
        include(combine(catrom_basis(1.0, tau), &seg));
        for axis in 0..2 {
            // Polynomial coefficients c_i = Σ_j M[i][j] P_j; derivative roots.
            let c: Vec<f64> = (0..4)
                .map(|i| (0..4).map(|j| m[i][j] * seg[j][axis]).sum())
                .collect();
            let (qa, qb, qc) = (3.0 * c[3], 2.0 * c[2], c[1]);
            let mut roots = Vec::new();
            if qa.abs() < 1e-15 {
                if qb.abs() > 1e-15 {
                    roots.push(-qc / qb);
                }
            } else {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    roots.push((-qb + s) / (2.0 * qa));
                    roots.push((-qb - s) / (2.0 * qa));
                }
            }
            for u in roots.into_iter().filter(|u| (0.0..=1.0).contains(u)) {
                include(combine(catrom_basis(u, tau), &seg));
            }
        }
    }
    b
}

/// Control points from a pixel coordinate and four logit-space offsets:
/// `crp_j = σ(Δp_j + σ⁻¹(p̂))`, componentwise.
///
/// `p̂` must lie strictly inside the unit square; use
/// [`predict_control_points_clamped`] to clamp boundary coordinates to
/// `[1e-6, 1 − 1e-6]` instead of rejecting them.
pub fn predict_control_points(pixel: Point, offsets: [Point; 4]) -> Result<ControlPointSet> {
    if pixel.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "pixel coordinate {pixel:?} is not strictly inside (0,1)^2; \
             the logit diverges (clamp to [1e-6, 1-1e-6] to accept it)"
        )));
    }
    Ok(control_points_unchecked(pixel, offsets))
}

pub fn predict_control_points_clamped(pixel: Point, offsets: [Point; 4]) -> ControlPointSet {
    let p = pixel.map(|v| v.clamp(COORD_CLAMP, 1.0 - COORD_CLAMP));
    control_points_unchecked(p, offsets)
}

fn control_points_unchecked(pixel: Point, offsets: [Point; 4]) -> ControlPointSet {
    let base = pixel.map(logit::<f64>);
    ControlPointSet(offsets.map(|d| [sigmoid(d[0] + base[0]), sigmoid(d[1] + base[1])]))
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
/// NaN scores rank below every number.
pub fn select_topk<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("select_topk needs k >= 1".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "select_topk: k = {k} exceeds {} candidates",
            scores.len()
        )));
    }
    let key = |i: usize| {
        let v = scores[i].to_f64_lossy();
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let cmp = |a: &usize, b: &usize| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx)
}

/// Sinusoidal encoding of 2-D points into `channels` values per point.
///
/// Each axis gets `channels / 2` values: `channels / 4` frequencies
/// `ω_k = 10000^(−k / (channels/4))`, emitted as interleaved
/// `sin(2π·v·ω_k), cos(2π·v·ω_k)`. x comes first, then y.
pub fn sinusoidal_encoding<T: Scalar>(points: &[Point], channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let quarter = channels / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 10000f64.powf(-(k as f64) / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(points.len() * channels);
    for p in points {
        for &v in p {
            for &w in &freqs {
                let a = std::f64::consts::TAU * v * w;
                data.push(T::from_f64_lossy(a.sin()));
                data.push(T::from_f64_lossy(a.cos()));
            }
        }
    }
    Ok(Tensor::from_vec(&[points.len(), channels], data))
}

/// `P_q = MLP(PE(P_s))` for sampled points `[K][n]`, returned as `[K, n, C]`.
pub fn positional_queries<T: Scalar>(
    tape: &Tape<T>,
    sampled: &[Vec<Point>],
    mlp: &Mlp<T>,
) -> Result<Var> {
    let k = sampled.len();
    let n = sampled.first().map_or(0, |s| s.len());
    if sampled.iter().any(|s| s.len() != n) {
        return Err(Error::Shape(
            "positional_queries: ragged sample lists".into(),
        ));
    }
    let flat: Vec<Point> = sampled.iter().flatten().copied().collect();
    if flat.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "positional_queries: points outside [0,1]^2".into(),
        ));
    }
    let pe_dim = mlp.layers[0].in_dim();
    let pe = tape.constant(sinusoidal_encoding::<T>(&flat, pe_dim)?);
    let q = mlp.try_forward(tape, pe)?;
    let c = mlp.out_dim();
    Ok(tape.reshape(q, &[k, n, c]))
}

/// Bilinear interpolation taps for sampling a `[h, w]` feature map stored
/// row-major starting at token `offset`. Points are normalized image
/// coordinates; pixel centers sit at `(i + 0.5) / extent`.
pub fn bilinear_taps<T: Scalar>(
    points: &[Point],
    h: usize,
    w: usize,
    offset: usize,
) -> Vec<Vec<(usize, T)>> {
    points
        .iter()
        .map(|p| {
            let fx = (p[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (p[1] * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let mut taps = Vec::with_capacity(4);
            for (x, y, wt) in [
                (x0, y0, (1.0 - ax) * (1.0 - ay)),
                (x1, y0, ax * (1.0 - ay)),
                (x0, y1, (1.0 - ax) * ay),
                (x1, y1, ax * ay),
            ] {
                if wt > 0.0 {
                    taps.push((offset + y * w + x, T::from_f64_lossy(wt)));
                }
            }
            taps
        })
        .collect()
}

/// Samples features at `points` from one level of a token sequence.
pub fn sample_features<T: Scalar>(
    tape: &Tape<T>,
    tokens: Var,
    points: &[Point],
    h: usize,
    w: usize,
    offset: usize,
) -> Var {
    tape.mix_rows(tokens, Rc::new(bilinear_taps(points, h, w, offset)))
}

/// Top-K proposals and their sampled curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    /// Token index each proposal came from.
    pub token_indices: Vec<usize>,
    pub control_points: Vec<ControlPointSet>,
    pub sampled_points: Vec<Vec<Point>>,
    /// Descending.
    pub scores: Vec<f64>,
    pub n: usize,
}

impl ProposalSet {
    pub fn k(&self) -> usize {
        self.control_points.len()
    }

    /// Checks dimensional consistency, ordering and point ranges.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.scores.len() != k || self.sampled_points.len() != k || self.token_indices.len() != k
        {
            return Err(Error::Shape("proposal arrays disagree on K".into()));
        }
        if self.sampled_points.iter().any(|s| s.len() != self.n) {
            return Err(Error::Shape("proposal sample count differs from n".into()));
        }
        if self.scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "proposal scores not descending".into(),
            ));
        }
        if self
            .sampled_points
            .iter()
            .flatten()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidArgument(
                "sampled point outside [0,1]^2".into(),
            ));
        }
        Ok(())
    }
}

/// 2-D histogram of control points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DensityGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width`.
    pub counts: Vec<u32>,
}

impl DensityGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.counts.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut counts = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<u32>, _> =
                line.split(',').map(|v| v.trim().parse::<u32>()).collect();
            let row = row.map_err(|e| (i + 1, format!("bad count: {e}")))?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err((i + 1, format!("expected {w} columns, got {}", row.len())))
                }
                _ => {}
            }
            counts.extend(row);
            height += 1;
        }
        let width = width.ok_or((1, "empty density grid".to_string()))?;
        Ok(Self {
            width,
            height,
            counts,
        })
    }

    /// 8-bit binary PGM, linearly scaled so the largest cell is 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let pixels: Vec<u8> = self
            .counts
            .iter()
            .map(|&c| ((c as f64 / max) * 255.0).round() as u8)
            .collect();
        crate::raster::encode_pgm(self.width, self.height, &pixels)
    }
}

/// Histogram of arbitrary points over a `width × height` grid of the unit square.
pub fn density_map(
    points: impl IntoIterator<Item = Point>,
    width: usize,
    height: usize,
) -> Result<DensityGrid> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(
            "density grid extents must be >= 1".into(),
        ));
    }
    let mut counts = vec![0u32; width * height];
    for p in points {
        let cx = ((p[0] * width as f64).floor().max(0.0) as usize).min(width - 1);
        let cy = ((p[1] * height as f64).floor().max(0.0) as usize).min(height - 1);
        counts[cy * width + cx] += 1;
    }
    Ok(DensityGrid {
        width,
        height,
        counts,
    })
}

/// Histogram of all `4K` proposal control points.
pub fn control_point_density_map(
    proposals: &ProposalSet,
    width: usize,
    height: usize,
) -> Result<DensityGrid> {
    density_map(
        proposals.control_points.iter().flat_map(|c| c.0),
        width,
        height,
    )
}
