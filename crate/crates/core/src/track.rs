//! Closed racing tracks: a filleted control polygon resampled at uniform
//! arc-length spacing, with per-sample tangent and curvature, plus a uniform
//! grid for nearest-sample queries.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DS: f64 = 0.5;

/// Longest tangent a corner fillet may consume on either side of a vertex.
pub const MAX_FILLET_TANGENT_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist2(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Unit vector rotated 90° counterclockwise.
    fn left(self) -> Point {
        Point::new(-self.y, self.x)
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// On-disk track description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub name: String,
    pub width_m: f64,
    pub control_points: Vec<[f64; 2]>,
}

impl TrackFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn build(&self, ds: f64) -> Result<TrackSpec> {
        let points: Vec<Point> = self.control_points.iter().map(|p| Point::new(p[0], p[1])).collect();
        TrackSpec::build(&self.name, &points, self.width_m, ds)
    }
}

/// Names of the tracks compiled into the binary.
pub const BUNDLED_TRACKS: [&str; 2] = ["oval", "road_course"];

pub fn bundled_track_file(name: &str) -> Option<TrackFile> {
    let text = match name {
        "oval" => include_str!("../tracks/oval.json"),
        "road_course" => include_str!("../tracks/road_course.json"),
        _ => return None,
    };
    Some(serde_json::from_str(text).expect("bundled track JSON is valid"))
}

pub fn bundled_track(name: &str) -> Option<TrackSpec> {
    bundled_track_file(name).map(|f| f.build(DEFAULT_DS).expect("bundled track builds"))
}

/// Loads a track by bundled name or from a JSON file path.
pub fn load_track(name_or_path: &str, ds: f64) -> Result<TrackSpec> {
    match bundled_track_file(name_or_path) {
        Some(file) => file.build(ds),
        None => TrackFile::load(name_or_path)?.build(ds),
    }
}

#[derive(Debug, Clone)]
pub struct TrackSpec {
    pub name: String,
    pub control_points: Vec<Point>,
    pub width: f64,
    ds: f64,
    centerline: Vec<Point>,
    tangent: Vec<f64>,
    curvature: Vec<f64>,
    index: TrackQueryIndex,
}

impl TrackSpec {
    /// Builds a track from a closed control polygon. The last point connects
    /// back to the first; do not repeat it. The requested `ds` is adjusted so
    /// that an integer number of samples spans the loop exactly.
    pub fn build(name: &str, control_points: &[Point], width: f64, ds: f64) -> Result<Self> {
        let n = control_points.len();
        if n < 4 {
            return Err(Error::TooFewPoints(n));
        }
        if !(ds > 0.0 && ds.is_finite()) {
            return Err(Error::InvalidSpacing(ds));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidWidth(width));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let (p, q) = (control_points[i], control_points[j]);
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::NonFinite("control point"));
            }
            if p.dist2(q) < 1e-18 {
                return Err(Error::DegenerateSegment(i, j));
            }
        }
        check_simple(control_points)?;

        let dense = fillet_polyline(control_points, ds);
        let centerline = resample_closed(&dense, ds);
        let count = centerline.len();
        let total: f64 = perimeter(&dense);
        let ds = total / count as f64;

        let tangent: Vec<f64> = (0..count)
            .map(|i| {
                let d = centerline[(i + 1) % count] - centerline[(i + count - 1) % count];
                d.y.atan2(d.x)
            })
            .collect();
        let curvature: Vec<f64> = (0..count)
            .map(|i| wrap_angle(tangent[(i + 1) % count] - tangent[(i + count - 1) % count]) / (2.0 * ds))
            .collect();

        // Cells at least half a width wide keep `nearest_nearby` exact for every on-track point.
        let index = TrackQueryIndex::new(&centerline, width);
        Ok(Self {
            name: name.to_string(),
            control_points: control_points.to_vec(),
            width,
            ds,
            centerline,
            tangent,
            curvature,
            index,
        })
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn total_length(&self) -> f64 {
        self.ds * self.centerline.len() as f64
    }

    pub fn len(&self) -> usize {
        self.centerline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centerline.is_empty()
    }

    pub fn centerline(&self) -> &[Point] {
        &self.centerline
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    /// Tangent heading (radians, counterclockwise from +x) at sample `i`.
    pub fn tangent(&self, i: usize) -> f64 {
        self.tangent[i % self.tangent.len()]
    }

    pub fn sample(&self, i: usize) -> Point {
        self.centerline[i % self.centerline.len()]
    }

    pub fn index(&self) -> &TrackQueryIndex {
        &self.index
    }

    /// Sample index nearest to arc length `s` (wrapped).
    pub fn sample_index_at(&self, s: f64) -> usize {
        let n = self.centerline.len();
        let k = (s.rem_euclid(self.total_length()) / self.ds).round() as usize;
        k % n
    }

    /// Arc length of the nearest centerline sample and signed perpendicular
    /// offset from it (positive = left of the direction of travel).
    pub fn locate(&self, p: Point) -> Location {
        let k = self.index.nearest(&self.centerline, p);
        Location { s: k as f64 * self.ds, lateral_offset: self.lateral_offset_at(k, p), sample: k }
    }

    pub(crate) fn lateral_offset_at(&self, k: usize, p: Point) -> f64 {
        let (sin, cos) = self.tangent[k].sin_cos();
        let d = p - self.centerline[k];
        -d.x * sin + d.y * cos
    }

    pub fn is_on_track(&self, p: Point) -> bool {
        self.locate(p).lateral_offset.abs() <= self.width / 2.0
    }

    /// Centerline point at arc length `(s + distance) mod total_length`,
    /// linearly interpolated between samples.
    pub fn lookahead_point(&self, s: f64, distance: f64) -> Point {
        let n = self.centerline.len();
        let u = (s + distance).rem_euclid(self.total_length()) / self.ds;
        let i = (u.floor() as usize) % n;
        let frac = u - u.floor();
        let a = self.centerline[i];
        if frac == 0.0 {
            return a;
        }
        let b = self.centerline[(i + 1) % n];
        a + (b - a) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub s: f64,
    pub lateral_offset: f64,
    pub sample: usize,
}

/// Uniform grid over the track's bounding box; each cell lists the centerline
/// samples that fall inside it.
#[derive(Debug, Clone)]
pub struct TrackQueryIndex {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl TrackQueryIndex {
    pub fn new(samples: &[Point], cell: f64) -> Self {
        let (mut lo, mut hi) = (samples[0], samples[0]);
        for p in samples {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let nx = (((hi.x - lo.x) / cell).floor() as usize) + 1;
        let ny = (((hi.y - lo.y) / cell).floor() as usize) + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        let mut index = Self { origin: lo, cell, nx, ny, cells: Vec::new() };
        for (i, p) in samples.iter().enumerate() {
            let (cx, cy) = index.cell_of(*p);
            cells[cy * nx + cx].push(i as u32);
        }
        index.cells = cells;
        index
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let fx = ((p.x - self.origin.x) / self.cell).floor();
        let fy = ((p.y - self.origin.y) / self.cell).floor();
        let cx = fx.clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = fy.clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    fn scan_cell(&self, samples: &[Point], cx: usize, cy: usize, p: Point, best: &mut (usize, f64)) {
        for &i in &self.cells[cy * self.nx + cx] {
            let i = i as usize;
            let d = samples[i].dist2(p);
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        }
    }

    fn scan_ring(&self, samples: &[Point], c: (usize, usize), r: usize, p: Point, best: &mut (usize, f64)) {
        let (cx, cy) = (c.0 as isize, c.1 as isize);
        let r = r as isize;
        for y in (cy - r)..=(cy + r) {
            if y < 0 || y >= self.ny as isize {
                continue;
            }
            let on_edge_row = y == cy - r || y == cy + r;
            let mut x = cx - r;
            while x <= cx + r {
                if x >= 0 && x < self.nx as isize {
                    self.scan_cell(samples, x as usize, y as usize, p, best);
                }
                x += if on_edge_row || r == 0 { 1 } else { 2 * r };
            }
        }
    }

    /// Exact nearest sample (ties go to the lowest index).
    pub fn nearest(&self, samples: &[Point], p: Point) -> usize {
        let c = self.cell_of(p);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = self.nx.max(self.ny);
        for r in 0..=max_ring {
            self.scan_ring(samples, c, r, p, &mut best);
            // Any sample outside rings 0..=r lies at least r cells away.
            let reach = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1 <= reach * reach {
                break;
            }
        }
        best.0
    }

    /// Nearest sample among the 3×3 block of cells around `p`, if any lies
    /// within one cell size. A `None` means every sample is farther than one
    /// cell away, which is enough to call the point off-track.
    pub fn nearest_nearby(&self, samples: &[Point], p: Point) -> Option<usize> {
        let c = self.cell_of(p);
        let mut best = (usize::MAX, f64::INFINITY);
        self.scan_ring(samples, c, 0, p, &mut best);
        self.scan_ring(samples, c, 1, p, &mut best);
        (best.0 != usize::MAX && best.1 <= self.cell * self.cell).then_some(best.0)
    }
}

fn perimeter(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).sum()
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) && d1 != 0.0 && d2 != 0.0
}

fn check_simple(points: &[Point]) -> Result<()> {
    let n = points.len();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (a, b) = (points[i], points[(i + 1) % n]);
            let (c, d) = (points[j], points[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Err(Error::SelfIntersecting(i, j));
            }
        }
    }
    Ok(())
}

/// Replaces each polygon corner with a tangent circular arc and returns a
/// dense closed polyline, starting just past control point 0.
fn fillet_polyline(points: &[Point], ds: f64) -> Vec<Point> {
    let n = points.len();
    let step = (ds / 4.0).max(1e-3);
    // For each vertex: (arc start, interior arc points, arc end).
    let corners: Vec<(Point, Vec<Point>, Point)> = (0..n)
        .map(|i| {
            let prev = points[(i + n - 1) % n];
            let here = points[i];
            let next = points[(i + 1) % n];
            let (vin, vout) = (here - prev, next - here);
            let (len_in, len_out) = (vin.norm(), vout.norm());
            let (din, dout) = (vin * (1.0 / len_in), vout * (1.0 / len_out));
            let turn = din.cross(dout).atan2(din.dot(dout));
            if turn.abs() < 1e-9 {
                return (here, Vec::new(), here);
            }
            let t = MAX_FILLET_TANGENT_M.min(0.5 * len_in).min(0.5 * len_out);
            let radius = t / (turn.abs() / 2.0).tan();
            let start = here - din * t;
            let end = here + dout * t;
            let sign = turn.signum();
            let center = start + din.left() * (radius * sign);
            let a0 = (start - center).y.atan2((start - center).x);
            let m = ((radius * turn.abs()) / step).ceil().max(1.0) as usize;
            let interior = (1..m)
                .map(|k| {
                    let a = a0 + turn * (k as f64 / m as f64);
                    let (sin, cos) = a.sin_cos();
                    center + Point::new(cos, sin) * radius
                })
                .collect();
            (start, interior, end)
        })
        .collect();

    let mut dense = Vec::new();
    for k in 1..=n {
        let i = k % n;
        if k == 1 {
            dense.push(corners[0].2);
        }
        let (start, interior, end) = &corners[i];
        push_distinct(&mut dense, *start);
        for p in interior {
            push_distinct(&mut dense, *p);
        }
        if i != 0 {
            push_distinct(&mut dense, *end);
        }
    }
    if dense.len() > 1 && dense[dense.len() - 1].dist2(dense[0]) < 1e-18 {
        dense.pop();
    }
    dense
}

fn push_distinct(v: &mut Vec<Point>, p: Point) {
    if v.last().map_or(true, |q| q.dist2(p) > 1e-18) {
        v.push(p);
    }
}

/// Uniform arc-length resampling of a closed polyline by linear interpolation.
fn resample_closed(dense: &[Point], ds: f64) -> Vec<Point> {
    let n = dense.len();
    let total = perimeter(dense);
    let count = ((total / ds).round() as usize).max(4);
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    let mut seg_start = 0.0;
    let mut seg_len = (dense[1 % n] - dense[0]).norm();
    for k in 0..count {
        let target = k as f64 * step;
        while seg_start + seg_len < target && seg < n - 1 {
            seg_start += seg_len;
            seg += 1;
            seg_len = (dense[(seg + 1) % n] - dense[seg]).norm();
        }
        let a = dense[seg];
        let b = dense[(seg + 1) % n];
        let f = if seg_len > 0.0 { ((target - seg_start) / seg_len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(if f == 0.0 { a } else { a + (b - a) * f });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(side: f64) -> Vec<Point> {
        vec![Point::new(0.0, 0.0), Point::new(side, 0.0), Point::new(side, side), Point::new(0.0, side)]
    }

    fn circle(n: usize, r: f64) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                Point::new(r * a.cos(), r * a.sin())
            })
            .collect()
    }

    fn exhaustive_nearest(track: &TrackSpec, p: Point) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, q) in track.centerline().iter().enumerate() {
            let d = q.dist2(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    #[test]
    fn square_perimeter() {
        let t = TrackSpec::build("sq", &square(100.0), 10.0, 1.0).unwrap();
        // Fillets of radius 5 shave 4·(2r − πr/2) ≈ 4.3 m off the 400 m polygon.
        assert!((t.total_length() - 400.0).abs() < 400.0 * 0.03, "{}", t.total_length());
        let expected = 400.0 - 4.0 * (10.0 - PI * 5.0 / 2.0);
        assert!((t.total_length() - expected).abs() < 0.05);
        assert!((t.total_length() - t.len() as f64 * t.ds()).abs() <= 1e-6 * t.total_length());
    }

    #[test]
    fn circle_curvature_matches_radius() {
        let t = TrackSpec::build("circle", &circle(64, 50.0), 10.0, 0.5).unwrap();
        for &k in t.curvature() {
            assert!((k - 0.02).abs() < 0.02 * 0.02, "curvature {k}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let three = &square(10.0)[..3];
        assert!(matches!(TrackSpec::build("x", three, 5.0, 1.0), Err(Error::TooFewPoints(3))));
        assert!(matches!(TrackSpec::build("x", &square(10.0), 5.0, 0.0), Err(Error::InvalidSpacing(_))));
        assert!(matches!(TrackSpec::build("x", &square(10.0), 5.0, -1.0), Err(Error::InvalidSpacing(_))));
        let mut dup = square(10.0);
        dup.insert(1, dup[0]);
        assert!(matches!(TrackSpec::build("x", &dup, 5.0, 1.0), Err(Error::DegenerateSegment(0, 1))));
        let bowtie =
            vec![Point::new(0.0, 0.0), Point::new(10.0, 10.0), Point::new(10.0, 0.0), Point::new(0.0, 10.0)];
        assert!(matches!(TrackSpec::build("x", &bowtie, 1.0, 1.0), Err(Error::SelfIntersecting(..))));
    }

    #[test]
    fn curvature_integrates_to_full_turn() {
        for name in BUNDLED_TRACKS {
            let t = bundled_track(name).unwrap();
            let total: f64 = t.curvature().iter().map(|k| k * t.ds()).sum();
            assert!((total - 2.0 * PI).abs() < 0.01 * 2.0 * PI, "{name}: {total}");
        }
        let sq = TrackSpec::build("sq", &square(100.0), 10.0, 0.5).unwrap();
        let total: f64 = sq.curvature().iter().map(|k| k * sq.ds()).sum();
        assert!((total - 2.0 * PI).abs() < 0.01 * 2.0 * PI);
    }

    #[test]
    fn locate_on_samples_and_offsets() {
        let t = bundled_track("oval").unwrap();
        for k in [0usize, 17, 400, t.len() - 1] {
            let loc = t.locate(t.sample(k));
            assert_eq!(loc.sample, k);
            assert!((loc.s - k as f64 * t.ds()).abs() < 1e-9);
            assert!(loc.lateral_offset.abs() < 1e-9);
        }
        // The first straight of the oval runs along +x, so left is +y.
        let k = 200;
        let p = t.sample(k) + Point::new(0.0, 3.0);
        let loc = t.locate(p);
        assert!((loc.lateral_offset - 3.0).abs() <= t.ds() / 2.0, "{loc:?}");
        let far = t.sample(k) + Point::new(0.0, -2.0 * t.width);
        assert!(t.locate(far).lateral_offset.abs() > t.width / 2.0);
        assert!(!t.is_on_track(far));
    }

    #[test]
    fn index_matches_exhaustive_scan() {
        let t = bundled_track("road_course").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let k = rng.gen_range(0..t.len());
            let a: f64 = rng.gen_range(0.0..2.0 * PI);
            let r: f64 = rng.gen_range(0.0..2.0 * t.width);
            let p = t.sample(k) + Point::new(a.cos(), a.sin()) * r;
            let fast = t.index().nearest(t.centerline(), p);
            let slow = exhaustive_nearest(&t, p);
            assert_eq!(t.sample(fast).dist2(p), t.sample(slow).dist2(p));
            match t.index().nearest_nearby(t.centerline(), p) {
                Some(near) => assert_eq!(t.sample(near).dist2(p), t.sample(slow).dist2(p)),
                None => assert!(t.sample(slow).dist2(p) > (t.width / 2.0).powi(2)),
            }
        }
        // Far outside the bounding box the ring search still finds the answer.
        let p = Point::new(-5000.0, 3000.0);
        assert_eq!(t.index().nearest(t.centerline(), p), exhaustive_nearest(&t, p));
    }

    #[test]
    fn lookahead_wraps_and_stays_on_line() {
        let t = bundled_track("oval").unwrap();
        assert_eq!(t.lookahead_point(0.0, 0.0), t.sample(0));
        let p = t.lookahead_point(t.total_length() - t.ds(), 2.0 * t.ds());
        assert!(p.dist2(t.sample(1)).sqrt() < 1e-9, "{p:?} vs {:?}", t.sample(1));
        // Straight section: the interpolated point is collinear with its neighbours.
        let s = 50.3 * t.ds();
        let q = t.lookahead_point(s, 0.0);
        let (a, b) = (t.sample(50), t.sample(51));
        assert!((b - a).cross(q - a).abs() < 1e-9);
        for i in 0..t.len() {
            let s = i as f64 * t.ds();
            let back = t.locate(t.lookahead_point(s, 0.0)).s;
            let diff = (back - s).abs();
            assert!(diff <= t.ds() || (t.total_length() - diff) <= t.ds());
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
