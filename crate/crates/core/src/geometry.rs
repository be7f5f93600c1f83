//! Oriented boxes in the sensor frame (x forward, y left, z up).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented 3D box. `size` is (length along heading, width, height); `yaw` rotates about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Input(format!("box dimensions must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Input("box pose must be finite".into()));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    /// Horizontal distance of the center from the sensor.
    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Maps a world point into box-local coordinates (unrotated, centered).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= self.size[0] / 2.0 && l[1].abs() <= self.size[1] / 2.0 && l[2].abs() <= self.size[2] / 2.0
    }

    /// Inclusive test against the BEV footprint only.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let l = self.to_local([x, y, self.center[2]]);
        l[0].abs() <= self.size[0] / 2.0 && l[1].abs() <= self.size[1] / 2.0
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    DontCare,
}

impl ObjectClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::DontCare => "DontCare",
        }
    }
}

/// A ground-truth or simulated object. Its range is always derived from the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
}

impl LabeledObject {
    pub fn car(bbox: Box3D) -> Self {
        LabeledObject {
            bbox,
            class: ObjectClass::Car,
        }
    }

    pub fn range(&self) -> f64 {
        self.bbox.range()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-5.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 1.0, 1.0], f64::NAN).is_err());
    }

    #[test]
    fn rotated_containment() {
        let b = Box3D::new([10.0, 0.0, 0.0], [4.0, 2.0, 2.0], PI / 2.0).unwrap();
        assert!(b.contains([10.0, 1.9, 0.0]));
        assert!(!b.contains([11.9, 0.0, 0.0]));
        assert!(b.contains([11.0, 0.0, 1.0]));
    }
}
