use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position in meters plus a unit rotation quaternion `[x, y, z, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
}

impl Pose {
    pub fn new(position: [f64; 3], rotation: [f64; 4]) -> Result<Self> {
        let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 || position.iter().chain(&rotation).any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("pose {position:?} / {rotation:?} is not a finite unit pose")));
        }
        Ok(Self { position, rotation })
    }

    pub fn from_yaw(position: [f64; 3], yaw: f64) -> Self {
        Self {
            position,
            rotation: yaw_quaternion(yaw),
        }
    }

    pub fn from_array(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(Error::Shape(format!("a pose has 7 values, got {}", v.len())));
        }
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    /// `[p_x, p_y, p_z, r_x, r_y, r_z, r_w]`
    pub fn to_array(&self) -> [f64; 7] {
        let [px, py, pz] = self.position;
        let [rx, ry, rz, rw] = self.rotation;
        [px, py, pz, rx, ry, rz, rw]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [x, y, z, w] = self.rotation;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }

    pub fn set_unit_quaternion(&mut self, q: &UnitQuaternion<f64>) {
        let c = q.quaternion().coords;
        // nalgebra stores coords as [i, j, k, w]
        self.rotation = [c[0], c[1], c[2], c[3]];
    }

    /// Heading about +z of the rotated x axis.
    pub fn yaw(&self) -> f64 {
        let [x, y, z, w] = self.rotation;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation() - other.translation()).norm()
    }

    /// Rotation angle between the two orientations, in `[0, pi]`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        quaternion_angle(&self.rotation, &other.rotation)
    }
}

/// Angle of the relative rotation, treating `q` and `-q` as equal.
pub fn quaternion_angle(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    2.0 * dot.abs().min(1.0).acos()
}

/// Yaw-only rotation with a non-negative scalar part.
pub fn yaw_quaternion(yaw: f64) -> [f64; 4] {
    let yaw = wrap_angle(yaw);
    let (s, c) = (yaw / 2.0).sin_cos();
    [0.0, 0.0, s, c]
}

/// Wraps into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Normalizes a quaternion; leaves it untouched when already unit within 1e-12
/// so that replaying recorded orientations is bit-exact.
pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::Numerical(format!("cannot normalize quaternion {q:?}")));
    }
    if (norm - 1.0).abs() <= 1e-12 {
        return Ok(q);
    }
    Ok([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm])
}

/// Spherical interpolation along the shorter arc.
pub fn slerp(a: &[f64; 4], b: &[f64; 4], t: f64) -> [f64; 4] {
    let mut dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let mut b = *b;
    if dot < 0.0 {
        b = [-b[0], -b[1], -b[2], -b[3]];
        dot = -dot;
    }
    let out = if dot > 1.0 - 1e-12 {
        let v = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
            a[3] + t * (b[3] - a[3]),
        ];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [v[0] / n, v[1] / n, v[2] / n, v[3] / n]
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        [
            wa * a[0] + wb * b[0],
            wa * a[1] + wb * b[1],
            wa * a[2] + wb * b[2],
            wa * a[3] + wb * b[3],
        ]
    };
    out
}
