//! Camera-shake trajectories.
//!
//! A trajectory is simulated as an inertial particle in continuous HR-pixel
//! coordinates, rasterized onto a binary HR grid (the diffusion target) and
//! resampled onto a coarser K×K grid to obtain the blur kernel.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y)` in HR pixels; x grows along columns, y along rows.
pub type Point = [f64; 2];

/// Samples deposited per trajectory segment when splatting a PSF.
pub const SAMPLES_PER_SEGMENT: usize = 4;

/// Consecutive traced map pixels farther apart than this are not connected
/// when a map is resampled (gap between fragments).
pub const MAP_MAX_STEP: f64 = 1.5;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Ordered camera positions over the exposure; point `i` sits at time
/// fraction `i / (N - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    points: Vec<Point>,
}

impl ContinuousTrajectory {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Param("trajectory coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Largest distance between any two points.
    pub fn extent(&self) -> f64 {
        max_pairwise_distance(&self.points)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    /// Position at time fraction `tau` in `[0, 1]`, linearly interpolated.
    pub fn at(&self, tau: f64) -> Point {
        interpolate(&self.points, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    pub num_points: usize,
    /// Target max pairwise extent, in HR pixels.
    pub max_extent: f64,
    pub inertia: f64,
    pub impulse_sigma: f64,
    /// Probability per step of an abrupt impulse.
    pub anxiety: f64,
    /// Multiplier applied to the impulse on an abrupt step.
    pub abrupt_factor: f64,
    /// Magnitude of the initial velocity (random direction).
    pub initial_speed: f64,
    pub rng_seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            num_points: 2000,
            max_extent: 48.0,
            inertia: 0.995,
            impulse_sigma: 0.2,
            anxiety: 0.005,
            abrupt_factor: 10.0,
            initial_speed: 0.0,
            rng_seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if self.num_points < 2 {
            return bad("num_points must be at least 2");
        }
        if !(self.max_extent > 0.0 && self.max_extent.is_finite()) {
            return bad("max_extent must be positive");
        }
        if !(0.0..1.0).contains(&self.inertia) {
            return bad("inertia must lie in [0, 1)");
        }
        if !(self.impulse_sigma >= 0.0 && self.impulse_sigma.is_finite()) {
            return bad("impulse_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.anxiety) {
            return bad("anxiety must lie in [0, 1]");
        }
        if !(self.abrupt_factor >= 0.0 && self.abrupt_factor.is_finite()) {
            return bad("abrupt_factor must be non-negative");
        }
        if !(self.initial_speed >= 0.0 && self.initial_speed.is_finite()) {
            return bad("initial_speed must be non-negative");
        }
        Ok(())
    }
}

/// Binary H×W trajectory map (1 = traversed pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HrTrajectoryMap {
    grid: Array2<u8>,
}

impl HrTrajectoryMap {
    /// Fails unless the grid is binary with at least one set pixel.
    pub fn new(grid: Array2<u8>) -> Result<Self> {
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Param("trajectory map must be binary".into()));
        }
        if !grid.iter().any(|&v| v == 1) {
            return Err(Error::Param("trajectory map has no set pixels".into()));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<u8> {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.grid.mapv(f32::from)
    }

    /// Number of 8-connected components of set pixels.
    pub fn components(&self) -> usize {
        count_components(&self.grid)
    }

    pub fn is_connected(&self) -> bool {
        self.components() == 1
    }
}

/// K×K non-negative blur kernel with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    grid: Array2<f64>,
}

impl Psf {
    pub const MASS_TOLERANCE: f64 = 1e-6;

    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if grid.nrows() != grid.ncols() || grid.is_empty() {
            return Err(Error::Shape(format!("PSF must be square, got {:?}", grid.dim())));
        }
        if grid.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Param("PSF entries must be finite and non-negative".into()));
        }
        let sum = grid.sum();
        if (sum - 1.0).abs() > Self::MASS_TOLERANCE {
            return Err(Error::Param(format!("PSF must sum to 1, got {sum}")));
        }
        Ok(Self { grid })
    }

    /// Rescales a non-negative grid to unit mass.
    pub fn normalized(mut grid: Array2<f64>) -> Result<Self> {
        let sum = grid.sum();
        if !(sum > 0.0) {
            return Err(Error::Numeric("PSF has no mass".into()));
        }
        grid.mapv_inplace(|v| v / sum);
        Self::new(grid)
    }

    /// Unit impulse at the kernel center `(K/2, K/2)`.
    pub fn delta(k: usize) -> Self {
        let mut grid = Array2::zeros((k, k));
        grid[[k / 2, k / 2]] = 1.0;
        Self { grid }
    }

    pub fn size(&self) -> usize {
        self.grid.nrows()
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }
}

/// Kernel size and the HR grid size the trajectory coordinates refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsfGeometry {
    pub kernel_size: usize,
    pub hr_size: usize,
}

impl PsfGeometry {
    pub fn new(kernel_size: usize, hr_size: usize) -> Self {
        Self {
            kernel_size,
            hr_size,
        }
    }

    pub fn scale(&self) -> f64 {
        self.kernel_size as f64 / self.hr_size as f64
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Simulates a camera-shake path with an inertial particle.
///
/// Velocity follows `v <- inertia * v + impulse` with Gaussian impulses; with
/// probability `anxiety` an impulse is amplified by `abrupt_factor`. The
/// result is rescaled so its max pairwise extent equals `max_extent`
/// (stationary paths are left as a single repeated position).
pub fn simulate_trajectory(params: &TrajectoryParams) -> Result<ContinuousTrajectory> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let heading: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let mut v = [
        params.initial_speed * heading.cos(),
        params.initial_speed * heading.sin(),
    ];
    let mut p = [0.0f64, 0.0];
    let mut points = Vec::with_capacity(params.num_points);
    points.push(p);
    for _ in 1..params.num_points {
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        let abrupt = rng.gen::<f64>() < params.anxiety;
        let gain = params.impulse_sigma * if abrupt { params.abrupt_factor } else { 1.0 };
        v = [params.inertia * v[0] + gain * nx, params.inertia * v[1] + gain * ny];
        p = [p[0] + v[0], p[1] + v[1]];
        points.push(p);
    }
    let extent = max_pairwise_distance(&points);
    if extent > 0.0 {
        // Keep the rescaled extent at or just below the target.
        let s = params.max_extent / extent * (1.0 - 1e-12);
        let origin = points[0];
        for q in points.iter_mut() {
            *q = [(q[0] - origin[0]) * s, (q[1] - origin[1]) * s];
        }
    }
    ContinuousTrajectory::new(points)
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Sub-points per trajectory segment used by [`rasterize_hr`].
pub const RASTER_SUBSTEPS: usize = 100;

/// Rasterizes a trajectory onto an `h`×`w` binary grid.
///
/// The centroid is moved to the grid center `(w/2, h/2)`. Each segment is
/// supersampled at [`RASTER_SUBSTEPS`] sub-points which are rounded to their
/// nearest pixel, and consecutive pixels are joined by Bresenham segments so
/// the set pixels always form one 8-connected path.
pub fn rasterize_hr(traj: &ContinuousTrajectory, h: usize, w: usize) -> Result<HrTrajectoryMap> {
    if h == 0 || w == 0 {
        return Err(Error::Param("grid must be non-empty".into()));
    }
    let pts = centered_points(traj, h, w)?;
    let round = |p: Point| [p[0].round() as i64, p[1].round() as i64];
    let mut grid = Array2::<u8>::zeros((h, w));
    let mut prev = round(pts[0]);
    grid[[prev[1] as usize, prev[0] as usize]] = 1;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        for s in 1..=RASTER_SUBSTEPS {
            let f = s as f64 / RASTER_SUBSTEPS as f64;
            let q = round([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            if q != prev {
                bresenham(prev, q, |x, y| grid[[y as usize, x as usize]] = 1);
                prev = q;
            }
        }
    }
    HrTrajectoryMap::new(grid)
}

/// Points moved so the centroid sits at `(w/2, h/2)`; fails if any point
/// rounds to a pixel outside the grid.
pub fn centered_points(traj: &ContinuousTrajectory, h: usize, w: usize) -> Result<Vec<Point>> {
    let c = traj.centroid();
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let mut out = Vec::with_capacity(traj.len());
    for p in traj.points() {
        let q = [p[0] - c[0] + cx, p[1] - c[1] + cy];
        let (x, y) = (q[0].round() as i64, q[1].round() as i64);
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Err(Error::Extent(format!(
                "point ({:.2}, {:.2}) maps to pixel ({x}, {y}) outside {h}x{w}",
                p[0], p[1]
            )));
        }
        out.push(q);
    }
    Ok(out)
}

/// Visits every pixel of the 8-connected line from `a` to `b`, endpoints included.
pub fn bresenham(a: [i64; 2], b: [i64; 2], mut visit: impl FnMut(i64, i64)) {
    let (mut x, mut y) = (a[0], a[1]);
    let dx = (b[0] - x).abs();
    let dy = -(b[1] - y).abs();
    let sx = if x < b[0] { 1 } else { -1 };
    let sy = if y < b[1] { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        visit(x, y);
        if x == b[0] && y == b[1] {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

// ---------------------------------------------------------------------------
// PSF resampling
// ---------------------------------------------------------------------------

/// A polyline sampled uniformly in its time parameter, with optional gaps.
#[derive(Debug, Clone)]
pub struct SamplingPath {
    points: Vec<Point>,
    hr_size: Option<usize>,
    /// Segments longer than this are gaps: their samples snap to an endpoint.
    max_step: Option<f64>,
}

impl SamplingPath {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn num_samples(&self) -> usize {
        if self.points.len() == 1 {
            1
        } else {
            SAMPLES_PER_SEGMENT * (self.points.len() - 1)
        }
    }

    /// Sample `j` of `m`: time fraction and position. Inside a gap the
    /// sample snaps to the nearer endpoint, so no mass lands between
    /// fragments but isolated pixels still receive some.
    fn sample(&self, j: usize, m: usize) -> (f64, Point) {
        let tau = (j as f64 + 0.5) / m as f64;
        if self.points.len() == 1 {
            return (tau, self.points[0]);
        }
        let n = self.points.len();
        let s = tau * (n - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let f = s - i as f64;
        if let Some(max) = self.max_step {
            if ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt() > max {
                return (tau, if f < 0.5 { a } else { b });
            }
        }
        (tau, [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])])
    }
}

/// Anything that can be turned into an ordered motion path.
pub trait PathSource {
    fn sampling_path(&self) -> SamplingPath;
}

impl PathSource for ContinuousTrajectory {
    fn sampling_path(&self) -> SamplingPath {
        SamplingPath {
            points: self.points.clone(),
            hr_size: None,
            max_step: None,
        }
    }
}

impl PathSource for HrTrajectoryMap {
    fn sampling_path(&self) -> SamplingPath {
        SamplingPath {
            points: trace_path(self),
            hr_size: Some(self.height()),
            max_step: Some(MAP_MAX_STEP),
        }
    }
}

/// Orders the set pixels of a map into a path `(x, y)`.
///
/// Starts at the set pixel with the fewest set 8-neighbours and repeatedly
/// steps to the nearest unvisited set pixel; ties go to the earlier pixel in
/// row-major order.
pub fn trace_path(map: &HrTrajectoryMap) -> Vec<Point> {
    let grid = map.grid();
    let (h, w) = grid.dim();
    let set: Vec<(usize, usize)> = grid
        .indexed_iter()
        .filter(|(_, &v)| v == 1)
        .map(|(ix, _)| ix)
        .collect();
    let neighbours = |r: usize, c: usize| -> usize {
        let mut n = 0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 && grid[[rr as usize, cc as usize]] == 1 {
                    n += 1;
                }
            }
        }
        n
    };
    let mut start = 0;
    let mut best = usize::MAX;
    for (i, &(r, c)) in set.iter().enumerate() {
        let n = neighbours(r, c);
        if n < best {
            best = n;
            start = i;
        }
    }
    let mut visited = vec![false; set.len()];
    let mut order = Vec::with_capacity(set.len());
    let mut cur = start;
    loop {
        visited[cur] = true;
        let (r, c) = set[cur];
        order.push([c as f64, r as f64]);
        let mut next = None;
        let mut best_d = i64::MAX;
        for (i, &(rr, cc)) in set.iter().enumerate() {
            if visited[i] {
                continue;
            }
            let d = (rr as i64 - r as i64).pow(2) + (cc as i64 - c as i64).pow(2);
            if d < best_d {
                best_d = d;
                next = Some(i);
            }
        }
        match next {
            Some(i) => cur = i,
            None => break,
        }
    }
    order
}

/// Resamples a motion path onto a K×K PSF.
///
/// Coordinates are scaled by `K / H` about the path centroid, which lands on
/// the kernel center `(K/2, K/2)`. Samples uniformly spaced in time each
/// deposit equal mass onto their four nearest cells with bilinear weights;
/// mass falling outside the kernel is discarded before normalization.
pub fn resample_psf(source: &impl PathSource, geom: PsfGeometry) -> Result<Psf> {
    splat_path(&source.sampling_path(), geom, |_| true)
}

/// Shared deposition routine; `open(tau)` gates samples by time fraction.
pub(crate) fn splat_path(path: &SamplingPath, geom: PsfGeometry, open: impl Fn(f64) -> bool) -> Result<Psf> {
    if path.points.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let k = geom.kernel_size;
    if k == 0 {
        return Err(Error::Param("kernel size must be at least 1".into()));
    }
    let hr = path.hr_size.unwrap_or(geom.hr_size);
    if hr == 0 {
        return Err(Error::Param("HR grid size must be at least 1".into()));
    }
    let scale = k as f64 / hr as f64;
    let c = centroid(&path.points);
    let kc = (k / 2) as f64;
    let m = path.num_samples();
    let mut grid = Array2::<f64>::zeros((k, k));
    for j in 0..m {
        let (tau, p) = path.sample(j, m);
        if !open(tau) {
            continue;
        }
        let x = (p[0] - c[0]) * scale + kc;
        let y = (p[1] - c[1]) * scale + kc;
        splat_bilinear(&mut grid, x, y, 1.0);
    }
    Psf::normalized(grid).map_err(|_| Error::Numeric("no path sample deposited mass inside the kernel".into()))
}

/// Adds `mass` at the continuous position `(x, y)` (cell centers at integer
/// coordinates) split bilinearly over the four surrounding cells.
pub fn splat_bilinear(grid: &mut Array2<f64>, x: f64, y: f64, mass: f64) {
    let (h, w) = grid.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (cx, cy, wgt) in taps {
        if wgt == 0.0 || cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        grid[[cy as usize, cx as usize]] += mass * wgt;
    }
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

fn interpolate(points: &[Point], tau: f64) -> Point {
    let n = points.len();
    if n == 1 {
        return points[0];
    }
    let s = tau.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let f = s - i as f64;
    let (a, b) = (points[i], points[i + 1]);
    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull (monotone chain); collinear points dropped.
fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

pub(crate) fn max_pairwise_distance(points: &[Point]) -> f64 {
    let hull = convex_hull(points);
    let mut best = 0.0f64;
    for (i, a) in hull.iter().enumerate() {
        for b in &hull[i + 1..] {
            best = best.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    best
}

fn count_components(grid: &Array2<u8>) -> usize {
    let (h, w) = grid.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut count = 0;
    let mut stack = Vec::new();
    for ((r, c), &v) in grid.indexed_iter() {
        if v != 1 || seen[[r, c]] {
            continue;
        }
        count += 1;
        seen[[r, c]] = true;
        stack.push((r, c));
        while let Some((r, c)) = stack.pop() {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    if grid[[rr, cc]] == 1 && !seen[[rr, cc]] {
                        seen[[rr, cc]] = true;
                        stack.push((rr, cc));
                    }
                }
            }
        }
    }
    count
}
