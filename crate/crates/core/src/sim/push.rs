use serde::{Deserialize, Serialize};

use super::pose::Pose;
use super::task::PushGains;
use crate::error::{Error, Result};

const PERIMETER_TOLERANCE: f64 = 1e-6;

/// Planar displacement of a pushed box for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PushDisplacement {
    pub translation: [f64; 2],
    pub yaw: f64,
}

pub(crate) fn to_local(box_pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = box_pose.yaw().sin_cos();
    let dx = p[0] - box_pose.position[0];
    let dy = p[1] - box_pose.position[1];
    [c * dx + s * dy, -s * dx + c * dy]
}

pub(crate) fn rotate(yaw: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Outward unit normal (box frame) of the face containing a local point,
/// chosen by which side is proportionally closest.
pub(crate) fn local_face_normal(local: [f64; 2], half: [f64; 2]) -> [f64; 2] {
    let rx = local[0].abs() / half[0];
    let ry = local[1].abs() / half[1];
    if rx >= ry {
        [local[0].signum(), 0.0]
    } else {
        [0.0, local[1].signum()]
    }
}

/// Quasi-static push response: the box translates by the inward normal
/// component of the push and turns by the moment of the push about its
/// center. `half` holds the footprint half extents.
pub fn push_displacement(
    contact: [f64; 2],
    push: [f64; 2],
    box_pose: &Pose,
    half: [f64; 2],
    gains: &PushGains,
) -> Result<PushDisplacement> {
    let local = to_local(box_pose, contact);
    let on_x = (local[0].abs() - half[0]).abs() <= PERIMETER_TOLERANCE && local[1].abs() <= half[1] + PERIMETER_TOLERANCE;
    let on_y = (local[1].abs() - half[1]).abs() <= PERIMETER_TOLERANCE && local[0].abs() <= half[0] + PERIMETER_TOLERANCE;
    if !(on_x || on_y) {
        return Err(Error::Invalid(format!(
            "contact {contact:?} is not on the box perimeter (local {local:?})"
        )));
    }
    let outward = rotate(box_pose.yaw(), local_face_normal(local, half));
    let normal_component = -(push[0] * outward[0] + push[1] * outward[1]);
    if !(normal_component > 0.0) {
        return Ok(PushDisplacement::default());
    }

    let mut translation = [
        -gains.translation_gain * normal_component * outward[0],
        -gains.translation_gain * normal_component * outward[1],
    ];
    let len = translation[0].hypot(translation[1]);
    if len > gains.max_translation {
        let scale = gains.max_translation / len;
        translation = [translation[0] * scale, translation[1] * scale];
    }

    let lever = [contact[0] - box_pose.position[0], contact[1] - box_pose.position[1]];
    let moment = lever[0] * push[1] - lever[1] * push[0];
    let yaw = (gains.rotation_gain * moment).clamp(-gains.max_yaw, gains.max_yaw);
    Ok(PushDisplacement { translation, yaw })
}
