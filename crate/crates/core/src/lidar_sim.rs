//! Synthetic scenes of parked cars and a spinning multi-channel LiDAR.
//!
//! Rays leave the sensor origin on a regular (elevation, azimuth) lattice, so
//! the number of returns an object collects falls off roughly with the square
//! of its range. That decay is the property the adaptation experiments rely on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D, LabeledObject};

pub const BOX_REFLECTANCE: f64 = 0.8;
pub const GROUND_REFLECTANCE: f64 = 0.2;

/// Nominal car dimensions (length, width, height), meters.
pub const NOMINAL_CAR_SIZE: [f64; 3] = [4.0, 1.8, 1.6];

/// Mounting height of the sensor above the ground; points and boxes live in the
/// sensor frame, so the ground plane sits at `-SENSOR_HEIGHT`.
pub const SENSOR_HEIGHT: f64 = 1.73;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectance: f64,
}

impl Point {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Missing fields in a config file fall back to the dense 64-channel profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    pub name: String,
    /// Channel elevations in degrees, ascending.
    pub elevations_deg: Vec<f64>,
    pub azimuth_res_deg: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub dropout: f64,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec::dense_64ch()
    }
}

impl LidarSpec {
    /// 64 channels over [-24.8, 2.0] degrees, 0.2 degree azimuth steps.
    pub fn dense_64ch() -> Self {
        LidarSpec {
            name: "dense-64ch".into(),
            elevations_deg: linspace(-24.8, 2.0, 64),
            azimuth_res_deg: 0.2,
            max_range: 120.0,
            range_noise_sigma: 0.02,
            dropout: 0.02,
        }
    }

    /// 32 channels over [-30.67, 10.67] degrees, 0.2 degree azimuth steps, shorter reach.
    pub fn sparse_32ch() -> Self {
        LidarSpec {
            name: "sparse-32ch".into(),
            elevations_deg: linspace(-30.67, 10.67, 32),
            azimuth_res_deg: 0.2,
            max_range: 80.0,
            range_noise_sigma: 0.02,
            dropout: 0.02,
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "dense-64ch" => Some(Self::dense_64ch()),
            "sparse-32ch" => Some(Self::sparse_32ch()),
            _ => None,
        }
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.azimuth_res_deg).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.elevations_deg.is_empty() {
            return Err(Error::Config("lidar needs at least one channel".into()));
        }
        if self.elevations_deg.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("lidar elevations must be sorted ascending".into()));
        }
        if !(self.azimuth_res_deg > 0.0) {
            return Err(Error::Config("azimuth resolution must be positive".into()));
        }
        let steps = 360.0 / self.azimuth_res_deg;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "azimuth resolution {} does not divide 360",
                self.azimuth_res_deg
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max range must be positive".into()));
        }
        if self.range_noise_sigma < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("noise sigma must be >= 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Inclusive bounds on the number of cars per scene.
    pub car_count: [usize; 2],
    /// Car centers are placed uniformly in range over this interval.
    pub range: [f64; 2],
    /// Upper bound on the bearing of a car center, degrees either side of
    /// straight ahead. The extent further narrows the sector at long range.
    pub azimuth_half_deg: f64,
    /// Every car footprint must lie inside this x extent.
    pub x_extent: [f64; 2],
    pub y_extent: [f64; 2],
    /// Relative spread of car dimensions around the nominal size.
    pub size_jitter: f64,
    /// Ground plane height in the sensor frame; `None` removes the ground.
    pub ground_z: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            car_count: [6, 12],
            range: [5.0, 68.0],
            azimuth_half_deg: 90.0,
            x_extent: [0.0, 70.4],
            y_extent: [-39.6, 39.6],
            size_jitter: 0.15,
            ground_z: Some(-SENSOR_HEIGHT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<LabeledObject>,
    pub ground_z: Option<f64>,
}

/// Separating-axis overlap test of two BEV footprints, inflated by `margin`.
fn footprints_overlap(a: &Box3D, b: &Box3D, margin: f64) -> bool {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    for corners in [&ca, &cb] {
        for i in 0..2 {
            let e = [corners[i + 1][0] - corners[i][0], corners[i + 1][1] - corners[i][1]];
            let n = [-e[1], e[0]];
            let norm = n[0].hypot(n[1]);
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = (p[0] * n[0] + p[1] * n[1]) / norm;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 + margin < b0 || b1 + margin < a0 {
                return false;
            }
        }
    }
    true
}

/// Largest bearing at which a car centered at `range` still fits the extent.
fn feasible_bearing(range: f64, cfg: &SceneConfig) -> f64 {
    // Half-diagonal of the largest car the size jitter can produce.
    let margin = 0.5 * (1.0 + cfg.size_jitter) * NOMINAL_CAR_SIZE[0].hypot(NOMINAL_CAR_SIZE[1]);
    let mut bound = PI / 2.0;
    let y_room = cfg.y_extent[1].min(-cfg.y_extent[0]) - margin;
    if y_room < range {
        bound = bound.min((y_room.max(0.0) / range).asin());
    }
    let x_floor = cfg.x_extent[0] + margin;
    if x_floor > 0.0 && x_floor < range {
        bound = bound.min((x_floor / range).acos());
    }
    bound
}

/// Samples a scene of non-overlapping cars, deterministic in `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    if cfg.car_count[0] > cfg.car_count[1] || cfg.range[0] < 0.0 || cfg.range[0] > cfg.range[1] {
        return Err(Error::Config(format!("invalid scene config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.car_count[0]..=cfg.car_count[1]);
    let half = cfg.azimuth_half_deg.to_radians();
    let ground = cfg.ground_z.unwrap_or(-SENSOR_HEIGHT);
    let mut objects: Vec<LabeledObject> = Vec::with_capacity(n);
    for _ in 0..n {
        // Range is drawn once per car so the range marginal stays uniform;
        // only bearing, heading and size are re-drawn on collision.
        let range = if cfg.range[1] > cfg.range[0] {
            rng.gen_range(cfg.range[0]..cfg.range[1])
        } else {
            cfg.range[0]
        };
        let half = half.min(feasible_bearing(range, cfg));
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let az = if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
            let yaw = wrap_angle(rng.gen_range(-PI..PI));
            let j = cfg.size_jitter;
            let size = NOMINAL_CAR_SIZE.map(|s| s * (1.0 + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 }));
            let center = [range * az.cos(), range * az.sin(), ground + size[2] / 2.0];
            let b = Box3D::new(center, size, yaw)?;
            let inside = b.bev_corners().iter().all(|c| {
                c[0] >= cfg.x_extent[0] && c[0] <= cfg.x_extent[1] && c[1] >= cfg.y_extent[0] && c[1] <= cfg.y_extent[1]
            });
            if inside && !objects.iter().any(|o| footprints_overlap(&o.bbox, &b, 0.3)) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or(Error::Placement {
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        objects.push(LabeledObject::car(b));
    }
    Ok(SceneSpec {
        objects,
        ground_z: cfg.ground_z,
    })
}

/// Ray parameter of the entry point into `b`, if the ray from the origin hits it.
fn ray_box_hit(b: &Box3D, dir: [f64; 3]) -> Option<f64> {
    let o = b.to_local([0.0, 0.0, 0.0]);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let half = b.size[axis] / 2.0;
        if d[axis].abs() < 1e-15 {
            if o[axis].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[axis]) / d[axis];
        let t2 = (half - o[axis]) / d[axis];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
        if t_near > t_far {
            return None;
        }
    }
    if t_far <= 0.0 {
        None
    } else if t_near > 0.0 {
        Some(t_near)
    } else {
        Some(t_far)
    }
}

/// Azimuth interval `[lo, hi]` covered by a box, or `None` when it wraps or
/// surrounds the sensor (then the box is tested against every ray).
fn azimuth_interval(b: &Box3D) -> Option<(f64, f64)> {
    if b.footprint_contains(0.0, 0.0) {
        return None;
    }
    let angles = b.bev_corners().map(|c| c[1].atan2(c[0]));
    let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > PI {
        None
    } else {
        Some((lo, hi))
    }
}

/// Casts every ray of `lidar` into `scene`.
pub fn ray_cast(scene: &SceneSpec, lidar: &LidarSpec, seed: u64) -> Result<PointCloud> {
    lidar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if lidar.range_noise_sigma > 0.0 {
        Some(Normal::new(0.0, lidar.range_noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let intervals: Vec<Option<(f64, f64)>> = scene.objects.iter().map(|o| azimuth_interval(&o.bbox)).collect();
    let elevations: Vec<(f64, f64)> = lidar.elevations_deg.iter().map(|e| e.to_radians().sin_cos()).collect();
    let steps = lidar.azimuth_steps();
    let mut points = Vec::new();
    let mut candidates = Vec::with_capacity(scene.objects.len());
    for k in 0..steps {
        let az = wrap_angle((k as f64 * lidar.azimuth_res_deg).to_radians());
        let (sa, ca) = az.sin_cos();
        candidates.clear();
        // Half a step of slack so rays grazing an interval edge are still tested.
        let slack = lidar.azimuth_res_deg.to_radians();
        candidates.extend(scene.objects.iter().zip(&intervals).filter_map(|(o, iv)| match iv {
            None => Some(&o.bbox),
            Some((lo, hi)) => (az >= lo - slack && az <= hi + slack).then_some(&o.bbox),
        }));
        for &(se, ce) in &elevations {
            let dir = [ce * ca, ce * sa, se];
            let mut best: Option<(f64, f64)> = None;
            if let Some(gz) = scene.ground_z {
                if dir[2] < 0.0 {
                    let t = gz / dir[2];
                    if t > 0.0 {
                        best = Some((t, GROUND_REFLECTANCE));
                    }
                }
            }
            for b in &candidates {
                if let Some(t) = ray_box_hit(b, dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, BOX_REFLECTANCE));
                    }
                }
            }
            let Some((t, refl)) = best else { continue };
            if t > lidar.max_range {
                continue;
            }
            if lidar.dropout > 0.0 && rng.gen::<f64>() < lidar.dropout {
                continue;
            }
            // Noise is truncated at 3 sigma so every return stays within that band of its surface.
            let t = match &noise {
                Some(n) => {
                    let cap = 3.0 * lidar.range_noise_sigma;
                    t + n.sample(&mut rng).clamp(-cap, cap)
                }
                None => t,
            };
            if t <= 0.0 || t > lidar.max_range {
                continue;
            }
            points.push(Point {
                x: t * dir[0],
                y: t * dir[1],
                z: t * dir[2],
                reflectance: refl,
            });
        }
    }
    Ok(PointCloud { points })
}

/// Number of points inside the (yaw-rotated, boundary-inclusive) box.
pub fn points_in_box(pc: &PointCloud, b: &Box3D) -> usize {
    pc.points.iter().filter(|p| b.contains(p.xyz())).count()
}
