//! City-scale geodesy: points, polyline routes, and the bus-stop registry.
//!
//! Distances use the equirectangular approximation. For extents under 50 km
//! its relative error against the great-circle distance stays below 0.1%.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    /// Equirectangular distance in meters.
    pub fn distance_m(&self, other: &GeoPoint) -> f64 {
        let (dx, dy) = self.offset_m(other);
        dx.hypot(dy)
    }

    /// East/north offset in meters from `self` to `other`, scaled at the mean latitude.
    fn offset_m(&self, other: &GeoPoint) -> (f64, f64) {
        let mean_lat = ((self.lat + other.lat) / 2.0).to_radians();
        let dx = (other.lon - self.lon).to_radians() * mean_lat.cos() * EARTH_RADIUS_M;
        let dy = (other.lat - self.lat).to_radians() * EARTH_RADIUS_M;
        (dx, dy)
    }

    fn lerp(&self, other: &GeoPoint, t: f64) -> GeoPoint {
        GeoPoint {
            lat: self.lat + (other.lat - self.lat) * t,
            lon: self.lon + (other.lon - self.lon) * t,
        }
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Distance along the polyline to the foot of the perpendicular.
    pub along_m: f64,
    /// Distance from the point to the polyline.
    pub offset_m: f64,
}

/// A route polyline with precomputed cumulative segment lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<GeoPoint>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline. Returns `None` for fewer than two points.
    pub fn new(points: Vec<GeoPoint>) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for pair in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + pair[0].distance_m(&pair[1]));
        }
        Some(Self { points, cumulative })
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn length_m(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position at `along_m` meters from the start, clamped to the ends.
    pub fn point_at(&self, along_m: f64) -> GeoPoint {
        if along_m <= 0.0 {
            return self.points[0];
        }
        if along_m >= self.length_m() {
            return *self.points.last().unwrap();
        }
        // First vertex strictly beyond along_m.
        let idx = self.cumulative.partition_point(|&c| c <= along_m);
        let start = self.cumulative[idx - 1];
        let seg_len = self.cumulative[idx] - start;
        if seg_len == 0.0 {
            return self.points[idx];
        }
        self.points[idx - 1].lerp(&self.points[idx], (along_m - start) / seg_len)
    }

    /// Nearest point on the polyline. Ties go to the earliest segment.
    pub fn project(&self, p: &GeoPoint) -> Projection {
        let mut best = Projection {
            along_m: 0.0,
            offset_m: f64::INFINITY,
        };
        for (i, pair) in self.points.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let (bx, by) = a.offset_m(&b);
            let (px, py) = a.offset_m(p);
            let len2 = bx * bx + by * by;
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((px * bx + py * by) / len2).clamp(0.0, 1.0)
            };
            let offset = (px - t * bx).hypot(py - t * by);
            if offset < best.offset_m {
                best = Projection {
                    along_m: self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]),
                    offset_m: offset,
                };
            }
        }
        best
    }
}

/// A designated bus stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub id: String,
    pub position: GeoPoint,
    #[serde(default = "default_proximity_radius")]
    pub proximity_radius_m: f64,
}

pub fn default_proximity_radius() -> f64 {
    30.0
}

/// Lookup of stops by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StopRegistry {
    stops: Vec<Stop>,
}

impl StopRegistry {
    pub fn new(stops: Vec<Stop>) -> Self {
        Self { stops }
    }

    pub fn stops(&self) -> &[Stop] {
        &self.stops
    }

    pub fn get(&self, id: &str) -> Option<&Stop> {
        self.stops.iter().find(|s| s.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    /// Nearest stop and its distance. Ties go to the first registered stop.
    pub fn nearest(&self, p: &GeoPoint) -> Option<(&Stop, f64)> {
        self.stops
            .iter()
            .map(|s| (s, s.position.distance_m(p)))
            .fold(None, |best, cand| match best {
                Some((_, d)) if d <= cand.1 => best,
                _ => Some(cand),
            })
    }
}
