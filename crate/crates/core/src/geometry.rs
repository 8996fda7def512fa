//! Local spacetime frames and the 4-component relative pose descriptor.
//!
//! Every feature that enters the model is expressed relative to some element's
//! own pose, never in the global frame. That is what makes map features
//! shareable across agents, frames and views, and what makes the whole
//! encoder invariant to rigid motions of the scene.

use crate::scene::{wrap_angle, Frame, MapPolygon, Pose2, Scene};

/// Position, heading and time of a scene element. Static map elements use
/// `time_index = None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacetimePose {
    pub position: [f64; 2],
    pub heading: f64,
    pub time_index: Option<Frame>,
}

impl SpacetimePose {
    pub fn at(position: [f64; 2], heading: f64, frame: Frame) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            time_index: Some(frame),
        }
    }

    pub fn timeless(position: [f64; 2], heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            time_index: None,
        }
    }

    pub fn of_polygon(p: &MapPolygon) -> Self {
        Self::timeless(p.entry.position, p.entry.heading)
    }
}

pub const REL_FEATURES: usize = 6;

/// Pose of `j` as seen from `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelDescriptor {
    pub distance: f64,
    /// Direction of `j` in `i`'s heading frame.
    pub bearing: f64,
    pub rel_heading: f64,
    /// Signed frame difference `t_j - t_i`; zero when either is static.
    pub dt: i64,
}

impl RelDescriptor {
    /// Feature row fed to relative-position embeddings. Angles enter as
    /// (cos, sin) so the row is continuous across the +-pi seam; `dt` is in
    /// seconds.
    pub fn features(&self) -> [f64; REL_FEATURES] {
        let (bs, bc) = self.bearing.sin_cos();
        let (hs, hc) = self.rel_heading.sin_cos();
        [
            self.distance,
            bc,
            bs,
            hc,
            hs,
            self.dt as f64 * crate::scene::FRAME_DT,
        ]
    }
}

pub fn rel_descriptor(i: &SpacetimePose, j: &SpacetimePose) -> RelDescriptor {
    let dx = j.position[0] - i.position[0];
    let dy = j.position[1] - i.position[1];
    let distance = dx.hypot(dy);
    let bearing = if distance == 0.0 {
        0.0
    } else {
        wrap_angle(dy.atan2(dx) - i.heading)
    };
    let dt = match (i.time_index, j.time_index) {
        (Some(a), Some(b)) => b as i64 - a as i64,
        _ => 0,
    };
    RelDescriptor {
        distance,
        bearing,
        rel_heading: wrap_angle(j.heading - i.heading),
        dt,
    }
}

/// Express a global point in the local frame of `origin`.
pub fn to_local(origin: &Pose2, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = origin.heading.sin_cos();
    let dx = p[0] - origin.position[0];
    let dy = p[1] - origin.position[1];
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Inverse of [`to_local`].
pub fn to_global(origin: &Pose2, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = origin.heading.sin_cos();
    [
        origin.position[0] + c * p[0] - s * p[1],
        origin.position[1] + s * p[0] + c * p[1],
    ]
}

/// Rotate a free vector (velocity, displacement) into a frame with heading `h`.
pub fn rotate_into(h: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = h.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

/// A rigid planar motion: rotate by `rotation` about the origin, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl RigidMotion {
    pub const IDENTITY: RigidMotion = RigidMotion {
        rotation: 0.0,
        translation: [0.0, 0.0],
    };

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }

    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h + self.rotation)
    }

    pub fn apply_pose(&self, p: &SpacetimePose) -> SpacetimePose {
        SpacetimePose {
            position: self.apply_point(p.position),
            heading: self.apply_heading(p.heading),
            time_index: p.time_index,
        }
    }
}

/// Apply a rigid motion to every position, velocity and heading in a scene.
pub fn transform_scene(scene: &Scene, motion: &RigidMotion) -> Scene {
    let mut out = scene.clone();
    for tracks in [&mut out.ego_tracks, &mut out.other_tracks] {
        for track in tracks.values_mut() {
            for s in track.states.values_mut() {
                s.position = motion.apply_point(s.position);
                s.velocity = motion.apply_vector(s.velocity);
                s.yaw = motion.apply_heading(s.yaw);
            }
        }
    }
    for p in &mut out.map {
        for q in &mut p.points {
            *q = motion.apply_point(*q);
        }
        if let Some(outline) = &mut p.outline {
            for q in outline.iter_mut() {
                *q = motion.apply_point(*q);
            }
        }
        p.entry.position = motion.apply_point(p.entry.position);
        p.entry.heading = motion.apply_heading(p.entry.heading);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identical_poses_give_zero_descriptor() {
        let p = SpacetimePose::at([3.0, -2.0], 1.1, 7);
        let d = rel_descriptor(&p, &p);
        assert_eq!(
            d,
            RelDescriptor {
                distance: 0.0,
                bearing: 0.0,
                rel_heading: 0.0,
                dt: 0
            }
        );
    }

    #[test]
    fn unit_offset_along_heading() {
        let i = SpacetimePose::at([0.0, 0.0], 0.0, 4);
        let j = SpacetimePose::at([1.0, 0.0], 0.0, 4);
        let d = rel_descriptor(&i, &j);
        assert_eq!((d.distance, d.bearing, d.rel_heading, d.dt), (1.0, 0.0, 0.0, 0));
    }

    #[test]
    fn rotated_frame_hand_example() {
        let i = SpacetimePose::at([0.0, 0.0], FRAC_PI_2, 0);
        let j = SpacetimePose::at([0.0, 2.0], PI, 3);
        let d = rel_descriptor(&i, &j);
        assert!((d.distance - 2.0).abs() < 1e-15);
        assert!(d.bearing.abs() < 1e-15);
        assert!((d.rel_heading - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(d.dt, 3);
    }

    #[test]
    fn static_elements_have_zero_dt() {
        let i = SpacetimePose::at([0.0, 0.0], 0.0, 12);
        let j = SpacetimePose::timeless([5.0, 5.0], 0.3);
        assert_eq!(rel_descriptor(&i, &j).dt, 0);
    }

    #[test]
    fn local_global_round_trip() {
        let o = Pose2 {
            position: [3.0, 4.0],
            heading: 0.7,
        };
        let g = to_global(&o, to_local(&o, [-2.0, 9.5]));
        assert!((g[0] + 2.0).abs() < 1e-12 && (g[1] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn identity_transform_keeps_scene() {
        let s = crate::scene::tests::two_agent_scene();
        assert_eq!(transform_scene(&s, &RigidMotion::IDENTITY), s);
    }

    #[test]
    fn translation_keeps_headings() {
        let s = crate::scene::tests::two_agent_scene();
        let m = RigidMotion {
            rotation: 0.0,
            translation: [10.0, -3.0],
        };
        let t = transform_scene(&s, &m);
        for (a, b) in s.ego_tracks.values().zip(t.ego_tracks.values()) {
            for (x, y) in a.states.values().zip(b.states.values()) {
                assert_eq!(x.yaw, y.yaw);
            }
        }
    }

    fn pose() -> impl Strategy<Value = SpacetimePose> {
        (-100.0f64..100.0, -100.0f64..100.0, -PI..PI, 0usize..50)
            .prop_map(|(x, y, h, t)| SpacetimePose::at([x, y], h, t))
    }

    proptest! {
        #[test]
        fn descriptor_is_se2_invariant(i in pose(), j in pose(), rot in -PI..PI, tx in -500.0f64..500.0, ty in -500.0f64..500.0) {
            let m = RigidMotion { rotation: rot, translation: [tx, ty] };
            let a = rel_descriptor(&i, &j);
            let b = rel_descriptor(&m.apply_pose(&i), &m.apply_pose(&j));
            prop_assert!((a.distance - b.distance).abs() < 1e-9);
            prop_assert!(wrap_angle(a.bearing - b.bearing).abs() < 1e-9);
            prop_assert!(wrap_angle(a.rel_heading - b.rel_heading).abs() < 1e-9);
            prop_assert_eq!(a.dt, b.dt);
        }

        #[test]
        fn dt_is_antisymmetric(i in pose(), j in pose()) {
            prop_assert_eq!(rel_descriptor(&i, &j).dt, -rel_descriptor(&j, &i).dt);
        }
    }
}
