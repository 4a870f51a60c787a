//! Vehicle mobility: a synthetic Manhattan-grid trace generator and a CSV
//! trace loader, plus time-indexed position lookup with linear
//! interpolation.
//!
//! The generator replaces an external traffic simulator: cars random-walk
//! along grid streets, buses follow fixed rectangular loop routes, RSUs sit
//! at intersections, and buildings fill the block interiors with a street
//! margin.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::obstacle::{Obstacle, Point};
use crate::simcore::substream;

pub const TRACE_HEADER: &str = "time_s,vehicle_id,x_m,y_m,speed_mps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Car,
    Bus,
    Rsu,
}

/// One row of a mobility trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub time: f64,
    pub vehicle_id: String,
    pub pos: Point,
    pub speed: f64,
}

/// Parameters of the synthetic Manhattan-grid scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Total road length budget in meters; the grid side count is derived
    /// from it and the block size.
    #[serde(default = "default_road_length")]
    pub road_length_m: f64,
    #[serde(default = "default_block")]
    pub block_m: f64,
    #[serde(default = "default_lanes")]
    pub lanes: u32,
    /// 30 mph.
    #[serde(default = "default_speed_min")]
    pub speed_min_mps: f64,
    /// 50 mph.
    #[serde(default = "default_speed_max")]
    pub speed_max_mps: f64,
    pub n_vehicles: usize,
    /// Defaults to one bus per 1.4 km of road: the transit fleet runs
    /// fixed routes, so it scales with the road network rather than
    /// with car traffic.
    #[serde(default)]
    pub n_buses: Option<usize>,
    #[serde(default = "default_rsus")]
    pub n_rsus: usize,
    /// Setback of building walls from the street center line.
    #[serde(default = "default_margin")]
    pub street_margin_m: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_s: f64,
}

fn default_road_length() -> f64 {
    10_000.0
}
fn default_block() -> f64 {
    200.0
}
fn default_speed_min() -> f64 {
    13.4
}
fn default_speed_max() -> f64 {
    22.4
}
fn default_lanes() -> u32 {
    3
}
fn default_rsus() -> usize {
    9
}
fn default_margin() -> f64 {
    45.0
}
fn default_sample_interval() -> f64 {
    1.0
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.road_length_m > 0.0) {
            return Err(SimError::Config("road_length_m must be > 0".into()));
        }
        if !(self.block_m > 0.0) {
            return Err(SimError::Config("block_m must be > 0".into()));
        }
        if self.lanes < 1 {
            return Err(SimError::Config("lanes must be >= 1".into()));
        }
        if !(self.speed_min_mps > 0.0 && self.speed_min_mps <= self.speed_max_mps) {
            return Err(SimError::Config(
                "speeds must satisfy 0 < speed_min_mps <= speed_max_mps".into(),
            ));
        }
        if !(self.street_margin_m > 0.0 && self.street_margin_m * 2.0 < self.block_m) {
            return Err(SimError::Config(
                "street_margin_m must be in (0, block_m / 2)".into(),
            ));
        }
        if !(self.sample_interval_s > 0.0) {
            return Err(SimError::Config("sample_interval_s must be > 0".into()));
        }
        Ok(())
    }

    /// Number of blocks per side: the closest k with total street length
    /// 2 k (k+1) block_m to the requested road length budget.
    pub fn blocks_per_side(&self) -> usize {
        let k = (-1.0 + (1.0 + 2.0 * self.road_length_m / self.block_m).sqrt()) / 2.0;
        (k.round() as usize).max(1)
    }

    pub fn side_m(&self) -> f64 {
        self.blocks_per_side() as f64 * self.block_m
    }

    pub fn effective_buses(&self) -> usize {
        match self.n_buses {
            Some(n) => n,
            None if self.n_vehicles == 0 => 0,
            None => ((self.road_length_m / 1400.0).round() as usize).max(1),
        }
    }
}

/// A complete mobility scenario: per-node traces plus the obstacle map.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub trace: Trace,
    pub obstacles: Vec<Obstacle>,
    /// Side length of the generated map, when known (used for target
    /// bookkeeping and output headers).
    pub extent_m: Option<f64>,
}

/// Immutable per-node sample series, sorted by time.
#[derive(Debug, Clone)]
pub struct NodeTrace {
    pub id: String,
    pub role: Role,
    pub times: Vec<f64>,
    pub points: Vec<Point>,
    pub speeds: Vec<f64>,
}

impl NodeTrace {
    pub fn span(&self) -> (f64, f64) {
        (
            *self.times.first().unwrap_or(&0.0),
            *self.times.last().unwrap_or(&0.0),
        )
    }

    /// Linear interpolation between bracketing samples; None outside the
    /// trace span.
    pub fn try_position_at(&self, t: f64) -> Option<Point> {
        let (start, end) = self.span();
        if self.times.is_empty() || t < start || t > end {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == self.times.len() {
            return Some(self.points[i - 1]);
        }
        if i == 0 {
            return Some(self.points[0]);
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (p0, p1) = (self.points[i - 1], self.points[i]);
        let w = (t - t0) / (t1 - t0);
        Some(Point::new(p0.x + w * (p1.x - p0.x), p0.y + w * (p1.y - p0.y)))
    }

    pub fn position_at(&self, t: f64) -> Result<Point> {
        let (start, end) = self.span();
        self.try_position_at(t).ok_or_else(|| SimError::OutOfSpan {
            id: self.id.clone(),
            query: t,
            start,
            end,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub nodes: Vec<NodeTrace>,
}

impl Trace {
    /// Group flat samples into per-node series. Samples must be unique per
    /// (vehicle, time); role is taken from the supplied classifier.
    pub fn from_samples(
        samples: Vec<TraceSample>,
        role_of: impl Fn(&str) -> Role,
    ) -> Result<Trace> {
        let mut by_id: HashMap<String, Vec<TraceSample>> = HashMap::new();
        for s in samples {
            by_id.entry(s.vehicle_id.clone()).or_default().push(s);
        }
        let mut ids: Vec<String> = by_id.keys().cloned().collect();
        ids.sort();
        let mut nodes = Vec::with_capacity(ids.len());
        for id in ids {
            let mut rows = by_id.remove(&id).unwrap();
            rows.sort_by(|a, b| a.time.total_cmp(&b.time));
            for w in rows.windows(2) {
                if w[1].time <= w[0].time {
                    return Err(SimError::Validation(format!(
                        "non-increasing timestamps for vehicle {id} at t={}",
                        w[1].time
                    )));
                }
            }
            nodes.push(NodeTrace {
                role: role_of(&id),
                id,
                times: rows.iter().map(|s| s.time).collect(),
                points: rows.iter().map(|s| s.pos).collect(),
                speeds: rows.iter().map(|s| s.speed).collect(),
            });
        }
        Ok(Trace { nodes })
    }

    /// Flatten back into samples sorted by (vehicle, time).
    pub fn to_samples(&self) -> Vec<TraceSample> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for i in 0..n.times.len() {
                out.push(TraceSample {
                    time: n.times[i],
                    vehicle_id: n.id.clone(),
                    pos: n.points[i],
                    speed: n.speeds[i],
                });
            }
        }
        out
    }
}

pub fn role_of_id(id: &str) -> Role {
    if id.starts_with("bus") {
        Role::Bus
    } else if id.starts_with("rsu") {
        Role::Rsu
    } else {
        Role::Car
    }
}

/// Generate the synthetic Manhattan scenario: car random walks on the
/// street grid, bus loop routes, RSUs at intersections, and block-interior
/// buildings. Deterministic for a fixed (spec, seed).
pub fn generate_grid_scenario(spec: &GridSpec, seed: u64, duration: f64) -> Result<Scenario> {
    spec.validate()?;
    if !(duration > 0.0) {
        return Err(SimError::Config("duration must be > 0".into()));
    }
    let k = spec.blocks_per_side();
    let side = spec.side_m();
    let b = spec.block_m;
    let m = spec.street_margin_m;
    let mut rng = substream(seed, "mobility");

    let mut obstacles = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            obstacles.push(Obstacle::from_bounds(
                i as f64 * b + m,
                j as f64 * b + m,
                (i + 1) as f64 * b - m,
                (j + 1) as f64 * b - m,
            )?);
        }
    }

    let n_steps = (duration / spec.sample_interval_s).ceil() as usize;
    let mut samples = Vec::new();

    // Cars: random walk along streets at a constant per-car speed.
    for v in 0..spec.n_vehicles {
        let id = format!("v{v}");
        let speed = rng.gen_range(spec.speed_min_mps..=spec.speed_max_mps);
        let mut walker = GridWalker::random(&mut rng, k, b);
        for step in 0..=n_steps {
            let t = (step as f64 * spec.sample_interval_s).min(duration);
            samples.push(TraceSample {
                time: t,
                vehicle_id: id.clone(),
                pos: walker.pos(),
                speed,
            });
            if step < n_steps {
                let dt = (duration - t).min(spec.sample_interval_s);
                walker.advance(&mut rng, speed * dt);
            }
        }
    }

    // Buses: constant-speed rectangular loops tiling the grid.
    let loops = bus_loops(k, b);
    let bus_speed = 0.5 * (spec.speed_min_mps + spec.speed_max_mps);
    for bus in 0..spec.effective_buses() {
        let id = format!("bus{bus}");
        let route = &loops[bus % loops.len()];
        let perimeter = route.perimeter();
        let offset = rng.gen_range(0.0..perimeter);
        for step in 0..=n_steps {
            let t = (step as f64 * spec.sample_interval_s).min(duration);
            let along = (offset + bus_speed * t) % perimeter;
            samples.push(TraceSample {
                time: t,
                vehicle_id: id.clone(),
                pos: route.point_at(along),
                speed: bus_speed,
            });
        }
    }

    // RSUs: static, spread evenly over the intersections.
    let intersections: Vec<Point> = (0..=k)
        .flat_map(|i| (0..=k).map(move |j| Point::new(i as f64 * b, j as f64 * b)))
        .collect();
    for r in 0..spec.n_rsus {
        let idx = r * intersections.len() / spec.n_rsus.max(1);
        let pos = intersections[idx.min(intersections.len() - 1)];
        for &t in &[0.0, duration] {
            samples.push(TraceSample {
                time: t,
                vehicle_id: format!("rsu{r}"),
                pos,
                speed: 0.0,
            });
        }
    }

    let trace = Trace::from_samples(samples, role_of_id)?;
    Ok(Scenario {
        trace,
        obstacles,
        extent_m: Some(side),
    })
}

/// A walker constrained to the street grid: always on a line x = i b or
/// y = j b, moving axis-aligned, turning randomly at intersections.
struct GridWalker {
    k: usize,
    b: f64,
    pos: Point,
    dir: (i8, i8),
}

impl GridWalker {
    fn random(rng: &mut impl Rng, k: usize, b: f64) -> Self {
        let side = k as f64 * b;
        let line = rng.gen_range(0..=k) as f64 * b;
        let offset = rng.gen_range(0.0..side);
        let (pos, dir) = if rng.gen_bool(0.5) {
            let d = if rng.gen_bool(0.5) { 1 } else { -1 };
            (Point::new(offset, line), (d, 0))
        } else {
            let d = if rng.gen_bool(0.5) { 1 } else { -1 };
            (Point::new(line, offset), (0, d))
        };
        GridWalker { k, b, pos, dir }
    }

    fn pos(&self) -> Point {
        self.pos
    }

    fn advance(&mut self, rng: &mut impl Rng, mut dist: f64) {
        while dist > 1e-9 {
            let to_next = self.distance_to_next_intersection();
            if dist < to_next {
                self.pos.x += f64::from(self.dir.0) * dist;
                self.pos.y += f64::from(self.dir.1) * dist;
                return;
            }
            self.pos.x += f64::from(self.dir.0) * to_next;
            self.pos.y += f64::from(self.dir.1) * to_next;
            // Snap to the intersection lattice to stop drift accumulating.
            self.pos.x = (self.pos.x / self.b).round() * self.b;
            self.pos.y = (self.pos.y / self.b).round() * self.b;
            dist -= to_next;
            self.turn(rng);
        }
    }

    fn distance_to_next_intersection(&self) -> f64 {
        let along = if self.dir.0 != 0 { self.pos.x } else { self.pos.y };
        let fwd = if self.dir.0 + self.dir.1 > 0 {
            self.b - along.rem_euclid(self.b)
        } else {
            along.rem_euclid(self.b)
        };
        if fwd <= 1e-9 {
            self.b
        } else {
            fwd
        }
    }

    fn turn(&mut self, rng: &mut impl Rng) {
        let side = self.k as f64 * self.b;
        let reverse = (-self.dir.0, -self.dir.1);
        let options: Vec<(i8, i8)> = [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .filter(|&d| d != reverse)
            .filter(|&(dx, dy)| {
                let nx = self.pos.x + f64::from(dx) * self.b;
                let ny = self.pos.y + f64::from(dy) * self.b;
                (-1e-9..=side + 1e-9).contains(&nx) && (-1e-9..=side + 1e-9).contains(&ny)
            })
            .collect();
        self.dir = if options.is_empty() {
            reverse
        } else {
            options[rng.gen_range(0..options.len())]
        };
    }
}

/// Rectangular bus route traversed clockwise from the min corner.
struct BusLoop {
    corners: [Point; 4],
}

impl BusLoop {
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BusLoop {
            corners: [
                Point::new(x0, y0),
                Point::new(x0, y1),
                Point::new(x1, y1),
                Point::new(x1, y0),
            ],
        }
    }

    fn perimeter(&self) -> f64 {
        2.0 * ((self.corners[2].x - self.corners[0].x) + (self.corners[2].y - self.corners[0].y))
    }

    fn point_at(&self, mut along: f64) -> Point {
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let len = a.dist(b);
            if along <= len {
                let w = if len == 0.0 { 0.0 } else { along / len };
                return Point::new(a.x + w * (b.x - a.x), a.y + w * (b.y - a.y));
            }
            along -= len;
        }
        self.corners[0]
    }
}

/// Tile the grid with 2x2-block loops (smaller at the edges) so buses
/// jointly cover the whole map.
fn bus_loops(k: usize, b: f64) -> Vec<BusLoop> {
    let mut loops = Vec::new();
    let step = 2usize;
    let mut i = 0;
    while i < k {
        let mut j = 0;
        let w = step.min(k - i);
        while j < k {
            let h = step.min(k - j);
            loops.push(BusLoop::new(
                i as f64 * b,
                j as f64 * b,
                (i + w) as f64 * b,
                (j + h) as f64 * b,
            ));
            j += step;
        }
        i += step;
    }
    loops
}

/// Parse a trace CSV (`time_s,vehicle_id,x_m,y_m,speed_mps`).
pub fn load_trace(path: &Path) -> Result<Vec<TraceSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SimError::Parse {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        })?;
    {
        let headers = reader.headers().map_err(|e| SimError::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?;
        let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(SimError::Parse {
                path: path.into(),
                line: 1,
                msg: format!("expected header `{TRACE_HEADER}`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let rec = record.map_err(|e| SimError::Parse {
            path: path.into(),
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != 5 {
            return Err(SimError::Parse {
                path: path.into(),
                line,
                msg: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let field = |idx: usize, name: &str| -> Result<f64> {
            rec[idx].trim().parse::<f64>().map_err(|_| SimError::Parse {
                path: path.into(),
                line,
                msg: format!("invalid {name}: `{}`", &rec[idx]),
            })
        };
        let time = field(0, "time_s")?;
        let x = field(2, "x_m")?;
        let y = field(3, "y_m")?;
        let speed = field(4, "speed_mps")?;
        if !(time >= 0.0 && time.is_finite()) {
            return Err(SimError::Parse {
                path: path.into(),
                line,
                msg: format!("time_s must be finite and >= 0, got {time}"),
            });
        }
        if !(speed >= 0.0 && speed.is_finite()) {
            return Err(SimError::Parse {
                path: path.into(),
                line,
                msg: format!("speed_mps must be finite and >= 0, got {speed}"),
            });
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(SimError::Parse {
                path: path.into(),
                line,
                msg: "coordinates must be finite".into(),
            });
        }
        samples.push(TraceSample {
            time,
            vehicle_id: rec[1].trim().to_string(),
            pos: Point::new(x, y),
            speed,
        });
    }
    samples.sort_by(|a, b| {
        a.vehicle_id
            .cmp(&b.vehicle_id)
            .then(a.time.total_cmp(&b.time))
    });
    for w in samples.windows(2) {
        if w[0].vehicle_id == w[1].vehicle_id && w[0].time == w[1].time {
            return Err(SimError::Validation(format!(
                "duplicate sample for vehicle {} at t={}",
                w[0].vehicle_id, w[0].time
            )));
        }
    }
    Ok(samples)
}

/// Serialize samples in the trace CSV schema.
pub fn write_trace_csv(samples: &[TraceSample], w: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{:.3},{},{:.3},{:.3},{:.3}",
            s.time, s.vehicle_id, s.pos.x, s.pos.y, s.speed
        )?;
    }
    Ok(())
}
