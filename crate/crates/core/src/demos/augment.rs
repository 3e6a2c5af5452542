use super::{Demonstration, Source};
use crate::error::{Error, Result};
use crate::sim::{TaskKind, TaskSpec};

/// Copies per raw demonstration, original included (3900 / 650).
pub const DEFAULT_SHIFT_COUNT: usize = 6;

const EDGE_MARGIN: f64 = 1e-9;

/// `count` copies of a pick-place recording translated rigidly along the
/// shelf (x) axis. Offsets are evenly spaced over the range that keeps every
/// recorded position inside the workspace; the one closest to zero is
/// replaced by zero so the original is always part of the output.
pub fn shift_augment(demo: &Demonstration, count: usize, task: &TaskSpec) -> Result<Vec<Demonstration>> {
    if demo.task != TaskKind::PickPlace {
        return Err(Error::Invalid(format!(
            "shift augmentation only applies to pick-place, got {}",
            demo.task
        )));
    }
    if count == 0 {
        return Err(Error::Invalid("shift count must be at least 1".into()));
    }
    let xs = demo
        .waypoints
        .iter()
        .flat_map(|w| w.objects.iter().map(|o| o[0]).chain(std::iter::once(w.gripper[0])));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let min_off = task.workspace.min[0] - lo + EDGE_MARGIN;
    let max_off = task.workspace.max[0] - hi - EDGE_MARGIN;
    if !(min_off <= 0.0 && max_off >= 0.0) {
        return Err(Error::Invalid(format!(
            "demonstration {} already leaves the workspace along x",
            demo.raw_id
        )));
    }
    if count > 1 && !(max_off > min_off) {
        return Err(Error::Invalid(format!(
            "demonstration {} spans the whole workspace; no room to shift",
            demo.raw_id
        )));
    }

    let mut offsets: Vec<f64> = if count == 1 {
        vec![0.0]
    } else {
        (0..count)
            .map(|i| min_off + (max_off - min_off) * i as f64 / (count - 1) as f64)
            .collect()
    };
    let nearest = offsets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    offsets[nearest] = 0.0;

    Ok(offsets
        .into_iter()
        .map(|off| {
            let mut copy = demo.clone();
            copy.shift = Some(off);
            if off != 0.0 {
                copy.source = Source::Augmented;
                for w in &mut copy.waypoints {
                    w.gripper[0] += off;
                    for o in &mut w.objects {
                        o[0] += off;
                    }
                }
            }
            copy
        })
        .collect())
}

/// Number of interleaved sub-trajectories: floor(record_hz / train_hz).
pub fn reduction_factor(record_hz: f64, train_hz: f64) -> Result<usize> {
    if !(train_hz > 0.0) || !(record_hz > train_hz) {
        return Err(Error::Invalid(format!(
            "frequency reduction needs record_hz > train_hz > 0, got {record_hz} and {train_hz}"
        )));
    }
    // tolerate ratios like 7.999999 that are meant to be 8
    Ok((record_hz / train_hz + 1e-9).floor() as usize)
}

/// Splits a recording into `k` interleaved lower-rate trajectories: the
/// `j`-th keeps waypoints `j, j + k, j + 2k, ...`.
pub fn frequency_reduce(demo: &Demonstration, train_hz: f64) -> Result<Vec<Demonstration>> {
    let k = reduction_factor(demo.record_hz, train_hz)?;
    if k == 1 {
        return Ok(vec![demo.clone()]);
    }
    let derived = |phase: usize| {
        let mut d = demo.clone();
        d.source = Source::Augmented;
        d.record_hz = demo.record_hz / k as f64;
        d.phase = Some(phase);
        d.waypoints = demo.waypoints.iter().skip(phase).step_by(k).cloned().collect();
        d
    };
    if demo.len() < k {
        let mut d = derived(0);
        d.truncated = true;
        return Ok(vec![d]);
    }
    Ok((0..k).map(derived).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::testutil::synthetic;

    #[test]
    fn twenty_four_waypoints_make_eight_triples() {
        let demo = synthetic(24, 0);
        let subs = frequency_reduce(&demo, 4.0).unwrap();
        assert_eq!(subs.len(), 8);
        let mut seen = Vec::new();
        for (j, s) in subs.iter().enumerate() {
            assert_eq!(s.len(), 3);
            assert_eq!(s.phase, Some(j));
            assert!((s.record_hz - 33.0 / 8.0).abs() < 1e-12);
            for (i, w) in s.waypoints.iter().enumerate() {
                assert_eq!(*w, demo.waypoints[j + 8 * i]);
                seen.push(j + 8 * i);
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn unit_factor_is_identity() {
        let demo = synthetic(10, 0);
        assert_eq!(reduction_factor(4.5, 4.0).unwrap(), 1);
        let mut slow = demo.clone();
        slow.record_hz = 4.5;
        assert_eq!(frequency_reduce(&slow, 4.0).unwrap(), vec![slow]);
        assert!(frequency_reduce(&demo, 40.0).is_err());
    }

    #[test]
    fn short_demo_is_flagged() {
        let subs = frequency_reduce(&synthetic(5, 0), 4.0).unwrap();
        assert_eq!(subs.len(), 1);
        assert!(subs[0].truncated);
    }

    #[test]
    fn shift_keeps_original_and_relative_offsets() {
        let task = TaskSpec::pick_place();
        let demo = synthetic(30, 3);
        let copies = shift_augment(&demo, 6, &task).unwrap();
        assert_eq!(copies.len(), 6);
        let zero: Vec<_> = copies.iter().filter(|c| c.shift == Some(0.0)).collect();
        assert_eq!(zero.len(), 1);
        assert_eq!(zero[0].waypoints, demo.waypoints);
        let mut offs: Vec<f64> = copies.iter().map(|c| c.shift.unwrap()).collect();
        offs.sort_by(f64::total_cmp);
        offs.dedup();
        assert_eq!(offs.len(), 6);
        for c in &copies {
            assert_eq!(c.raw_id, 3);
            for (w, o) in c.waypoints.iter().zip(&demo.waypoints) {
                assert!(task.workspace.min[0] <= w.gripper[0] && w.gripper[0] <= task.workspace.max[0]);
                let rel = w.objects[0][0] - w.gripper[0];
                let rel0 = o.objects[0][0] - o.gripper[0];
                assert!((rel - rel0).abs() < 1e-12);
                assert_eq!(w.objects[0][1..], o.objects[0][1..]);
                assert_eq!(w.gripper[1..], o.gripper[1..]);
            }
        }
    }

    #[test]
    fn shift_rejects_push() {
        let mut demo = synthetic(10, 0);
        demo.task = TaskKind::PushToPose;
        assert!(shift_augment(&demo, 6, &TaskSpec::push_to_pose()).is_err());
    }
}
