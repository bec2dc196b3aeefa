//! Raw skeletal motion <-> redundant per-frame features.
//!
//! Per-frame layout, for `J` joints:
//!
//! | block | width | content |
//! |-------|-------|---------|
//! | root angular velocity | 1 | yaw change to the next frame |
//! | root linear velocity | 2 | planar (x, z) displacement in the current facing frame |
//! | root height | 1 | |
//! | joint positions | 3J | root-relative, facing frame |
//! | joint velocities | 3J | global displacement to the next frame, facing frame |
//! | joint rotations | 6J | first two rotation-matrix columns, root space |
//! | foot contacts | 4 | 1 when the foot is static |
//!
//! An `N`-frame motion yields `N - 1` feature frames; velocities at frame `t`
//! use positions `t` and `t + 1`.

use serde::{Deserialize, Serialize};

use super::skeleton::{Skeleton, CONTACT_CHANNELS};
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Motion before featurization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMotion {
    pub fps: f64,
    pub root_position: Vec<Vec3>,
    pub root_yaw: Vec<f64>,
    /// Per frame, per joint, in the root's facing frame relative to the root.
    pub local_joint_positions: Vec<Vec<Vec3>>,
}

/// Root placement used to start trajectory integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RootPose {
    pub position: Vec3,
    pub yaw: f64,
}

impl RawMotion {
    pub fn frames(&self) -> usize {
        self.root_yaw.len()
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let n = self.root_yaw.len();
        if !(self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps {} must be > 0", self.fps)));
        }
        if self.root_position.len() != n || self.local_joint_positions.len() != n {
            return Err(Error::InvalidArgument(format!(
                "motion arrays disagree: {} yaw, {} positions, {} poses",
                n,
                self.root_position.len(),
                self.local_joint_positions.len()
            )));
        }
        for (t, pose) in self.local_joint_positions.iter().enumerate() {
            if pose.len() != joints {
                return Err(Error::InvalidArgument(format!(
                    "frame {t} has {} joints, skeleton has {joints}",
                    pose.len()
                )));
            }
        }
        let finite = self.root_yaw.iter().all(|x| x.is_finite())
            && self.root_position.iter().flatten().all(|x| x.is_finite())
            && self
                .local_joint_positions
                .iter()
                .flatten()
                .flatten()
                .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("raw motion".into()));
        }
        Ok(())
    }

    /// Global position of every joint at frame `t`.
    pub fn global_pose(&self, t: usize) -> Vec<Vec3> {
        let rot = yaw_matrix(self.root_yaw[t]);
        let root = self.root_position[t];
        self.local_joint_positions[t]
            .iter()
            .map(|p| add(root, mat_vec(&rot, *p)))
            .collect()
    }

    pub fn initial_root(&self) -> RootPose {
        RootPose {
            position: self.root_position[0],
            yaw: self.root_yaw[0],
        }
    }

    /// Mean planar root speed in metres per frame.
    pub fn mean_root_speed(&self) -> f64 {
        let n = self.frames();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self
            .root_position
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt())
            .sum();
        total / (n - 1) as f64
    }
}

/// Column offsets of each block for a given joint count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub const ROOT_ANG_VEL: usize = 0;
    pub const ROOT_VEL_X: usize = 1;
    pub const ROOT_VEL_Z: usize = 2;
    pub const ROOT_Y: usize = 3;

    pub fn positions(&self) -> usize {
        4
    }
    pub fn velocities(&self) -> usize {
        4 + 3 * self.joints
    }
    pub fn rotations(&self) -> usize {
        4 + 6 * self.joints
    }
    pub fn contacts(&self) -> usize {
        4 + 12 * self.joints
    }
    pub fn dim(&self) -> usize {
        4 + 12 * self.joints + CONTACT_CHANNELS
    }

    /// Column names for CSV headers.
    pub fn column_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["root_ang_vel", "root_vel_x", "root_vel_z", "root_y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for block in ["pos", "vel"] {
            for j in 0..self.joints {
                for a in ["x", "y", "z"] {
                    out.push(format!("{block}{j}_{a}"));
                }
            }
        }
        for j in 0..self.joints {
            for k in 0..6 {
                out.push(format!("rot{j}_{k}"));
            }
        }
        for c in 0..CONTACT_CHANNELS {
            out.push(format!("contact{c}"));
        }
        out
    }
}

/// `frames x dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeatures {
    pub data: Tensor2,
}

impl MotionFeatures {
    pub fn new(data: Tensor2) -> Self {
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn check_dim(&self, skeleton: &Skeleton) -> Result<()> {
        if self.dim() != skeleton.feature_dim() {
            return Err(Error::Shape {
                op: "motion features",
                detail: format!(
                    "feature dim {} but skeleton with {} joints needs {}",
                    self.dim(),
                    skeleton.joint_count(),
                    skeleton.feature_dim()
                ),
            });
        }
        Ok(())
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        Self::new(self.data.slice_rows(start, len))
    }
}

pub(crate) fn yaw_matrix(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

/// Shortest-arc rotation taking direction `from` onto direction `to`.
pub fn rotation_between(from: Vec3, to: Vec3) -> Mat3 {
    let (nf, nt) = (norm3(from), norm3(to));
    if nf < 1e-12 || nt < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let a = scale3(from, 1.0 / nf);
    let b = scale3(to, 1.0 / nt);
    let c = dot3(a, b);
    if c < -1.0 + 1e-12 {
        // Half turn about any axis orthogonal to `a`.
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let axis = cross(a, helper);
        let axis = scale3(axis, 1.0 / norm3(axis));
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = 2.0 * axis[i] * axis[j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        return m;
    }
    let v = cross(a, b);
    let k = 1.0 / (1.0 + c);
    let vx = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let vx2: f64 = (0..3).map(|l| vx[i][l] * vx[l][j]).sum();
            m[i][j] = if i == j { 1.0 } else { 0.0 } + vx[i][j] + k * vx2;
        }
    }
    m
}

/// First two columns of a rotation matrix.
pub fn to_6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Gram-Schmidt recovery of a rotation matrix from its 6-D encoding.
pub fn from_6d(r: &[f64]) -> Mat3 {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm3(a1).max(1e-12);
    let b1 = scale3(a1, 1.0 / n1);
    let proj = dot3(b1, a2);
    let u2 = sub(a2, scale3(b1, proj));
    let b2 = scale3(u2, 1.0 / norm3(u2).max(1e-12));
    let b3 = cross(b1, b2);
    [
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ]
}

/// Velocity threshold (metres per frame) for foot contact: 0.02 m/frame at 20 fps,
/// scaled inversely with the frame rate so the implied speed stays 0.4 m/s.
pub fn default_contact_threshold(fps: f64) -> f64 {
    0.02 * 20.0 / fps
}

/// `(N - 1) x 4` contact labels: 1 when the foot moves less than `threshold`
/// metres between frames `t` and `t + 1`.
pub fn detect_foot_contacts(
    motion: &RawMotion,
    skeleton: &Skeleton,
    threshold: f64,
) -> Result<Vec<[f64; CONTACT_CHANNELS]>> {
    motion.validate(skeleton.joint_count())?;
    let feet = skeleton.contact_joints();
    let n = motion.frames();
    let poses: Vec<Vec<Vec3>> = (0..n).map(|t| motion.global_pose(t)).collect();
    Ok((0..n.saturating_sub(1))
        .map(|t| {
            let mut c = [0.0; CONTACT_CHANNELS];
            for (ci, &j) in feet.iter().enumerate() {
                let speed = norm3(sub(poses[t + 1][j], poses[t][j]));
                c[ci] = if speed < threshold { 1.0 } else { 0.0 };
            }
            c
        })
        .collect())
}

/// Featurizes a raw motion. See the module docs for the layout.
pub fn encode_features(
    motion: &RawMotion,
    skeleton: &Skeleton,
    contact_threshold: f64,
) -> Result<MotionFeatures> {
    let jn = skeleton.joint_count();
    motion.validate(jn)?;
    let n = motion.frames();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames to featurize, got {n}"
        )));
    }
    let layout = FeatureLayout { joints: jn };
    let contacts = detect_foot_contacts(motion, skeleton, contact_threshold)?;
    let poses: Vec<Vec<Vec3>> = (0..n).map(|t| motion.global_pose(t)).collect();
    let mut out = Tensor2::zeros(n - 1, layout.dim());
    for t in 0..n - 1 {
        let inv = yaw_matrix(-motion.root_yaw[t]);
        let row = out.row_mut(t);
        row[FeatureLayout::ROOT_ANG_VEL] = wrap_angle(motion.root_yaw[t + 1] - motion.root_yaw[t]);
        let d = mat_vec(&inv, sub(motion.root_position[t + 1], motion.root_position[t]));
        row[FeatureLayout::ROOT_VEL_X] = d[0];
        row[FeatureLayout::ROOT_VEL_Z] = d[2];
        row[FeatureLayout::ROOT_Y] = motion.root_position[t][1];
        let local = &motion.local_joint_positions[t];
        for j in 0..jn {
            row[layout.positions() + 3 * j..layout.positions() + 3 * j + 3].copy_from_slice(&local[j]);
            let v = mat_vec(&inv, sub(poses[t + 1][j], poses[t][j]));
            row[layout.velocities() + 3 * j..layout.velocities() + 3 * j + 3].copy_from_slice(&v);
            let p = skeleton.parent(j);
            let rot = if p == j {
                rotation_between([0.0; 3], [0.0; 3])
            } else {
                rotation_between(skeleton.offset(j), sub(local[j], local[p]))
            };
            row[layout.rotations() + 6 * j..layout.rotations() + 6 * j + 6].copy_from_slice(&to_6d(&rot));
        }
        row[layout.contacts()..layout.contacts() + CONTACT_CHANNELS].copy_from_slice(&contacts[t]);
    }
    Ok(MotionFeatures::new(out))
}

/// Integrates root velocities from `initial_root`; joint positions come from the
/// position block. Produces one raw frame per feature frame.
pub fn decode_features(
    features: &MotionFeatures,
    skeleton: &Skeleton,
    initial_root: RootPose,
    fps: f64,
) -> Result<RawMotion> {
    features.check_dim(skeleton)?;
    let jn = skeleton.joint_count();
    let layout = FeatureLayout { joints: jn };
    let k = features.frames();
    let mut root_position = Vec::with_capacity(k);
    let mut root_yaw = Vec::with_capacity(k);
    let mut local = Vec::with_capacity(k);
    let mut yaw = initial_root.yaw;
    let mut pos = initial_root.position;
    for t in 0..k {
        let row = features.data.row(t);
        if t > 0 {
            let prev = features.data.row(t - 1);
            let step = mat_vec(
                &yaw_matrix(yaw),
                [prev[FeatureLayout::ROOT_VEL_X], 0.0, prev[FeatureLayout::ROOT_VEL_Z]],
            );
            pos[0] += step[0];
            pos[2] += step[2];
            yaw += prev[FeatureLayout::ROOT_ANG_VEL];
        }
        pos[1] = row[FeatureLayout::ROOT_Y];
        root_position.push(pos);
        root_yaw.push(yaw);
        local.push(
            (0..jn)
                .map(|j| {
                    let o = layout.positions() + 3 * j;
                    [row[o], row[o + 1], row[o + 2]]
                })
                .collect(),
        );
    }
    Ok(RawMotion {
        fps,
        root_position,
        root_yaw,
        local_joint_positions: local,
    })
}

/// Rotation matrices recovered from the rotation block of frame `t`.
pub fn frame_rotations(features: &MotionFeatures, joints: usize, t: usize) -> Vec<Mat3> {
    let layout = FeatureLayout { joints };
    let row = features.data.row(t);
    (0..joints)
        .map(|j| from_6d(&row[layout.rotations() + 6 * j..layout.rotations() + 6 * j + 6]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_pose(sk: &Skeleton) -> Vec<Vec3> {
        (0..sk.joint_count())
            .map(|j| {
                let p = sk.parent(j);
                if p == j {
                    [0.0; 3]
                } else {
                    let o = sk.offset(j);
                    let po = sk.offset(p);
                    if sk.parent(p) == p {
                        o
                    } else {
                        add(po, o)
                    }
                }
            })
            .collect()
    }

    fn motion_from(
        sk: &Skeleton,
        n: usize,
        pos: impl Fn(usize) -> Vec3,
        yaw: impl Fn(usize) -> f64,
    ) -> RawMotion {
        RawMotion {
            fps: 20.0,
            root_position: (0..n).map(&pos).collect(),
            root_yaw: (0..n).map(&yaw).collect(),
            local_joint_positions: (0..n).map(|_| static_pose(sk)).collect(),
        }
    }

    #[test]
    fn static_pose_has_zero_velocities_and_full_contact() {
        let sk = Skeleton::default_seven();
        let m = motion_from(&sk, 10, |_| [0.3, 0.9, -1.0], |_| 0.4);
        let f = encode_features(&m, &sk, 0.02).unwrap();
        let lay = FeatureLayout { joints: 7 };
        assert_eq!(f.frames(), 9);
        assert_eq!(f.dim(), 92);
        for t in 0..9 {
            let r = f.data.row(t);
            assert_eq!(r[0], 0.0);
            assert_eq!(r[1], 0.0);
            assert_eq!(r[2], 0.0);
            assert!(r[lay.velocities()..lay.rotations()].iter().all(|&v| v == 0.0));
            assert!(r[lay.contacts()..].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn yaw_spin_reports_angular_velocity_only() {
        let sk = Skeleton::default_seven();
        let w = 0.07;
        let m = motion_from(&sk, 12, |_| [1.0, 0.9, 2.0], |t| w * t as f64);
        let f = encode_features(&m, &sk, 0.02).unwrap();
        for t in 0..f.frames() {
            let r = f.data.row(t);
            assert!((r[0] - w).abs() < 1e-12);
            assert!(r[1].abs() < 1e-12 && r[2].abs() < 1e-12);
        }
    }

    #[test]
    fn straight_walk_along_facing_is_forward_velocity() {
        let sk = Skeleton::default_seven();
        let (v, yaw): (f64, f64) = (0.05, 0.8);
        let dir = [yaw.sin(), 0.0, yaw.cos()];
        let m = motion_from(
            &sk,
            30,
            |t| [dir[0] * v * t as f64, 0.9, dir[2] * v * t as f64],
            |_| yaw,
        );
        let f = encode_features(&m, &sk, 0.02).unwrap();
        for t in 0..f.frames() {
            let r = f.data.row(t);
            assert!((r[2] - v).abs() < 1e-12, "vz {}", r[2]);
            assert!(r[1].abs() < 1e-12 && r[0].abs() < 1e-12);
        }
    }

    #[test]
    fn decode_zero_features_is_motionless() {
        let sk = Skeleton::default_seven();
        let f = MotionFeatures::new(Tensor2::zeros(5, sk.feature_dim()));
        let init = RootPose {
            position: [1.0, 0.0, -2.0],
            yaw: 0.3,
        };
        let m = decode_features(&f, &sk, init, 20.0).unwrap();
        for t in 0..5 {
            assert_eq!(m.root_position[t], [1.0, 0.0, -2.0]);
            assert_eq!(m.root_yaw[t], 0.3);
        }
    }

    #[test]
    fn decode_yaw_only_rotates_in_place() {
        let sk = Skeleton::default_seven();
        let mut data = Tensor2::zeros(6, sk.feature_dim());
        for t in 0..6 {
            data.set(t, 0, 0.2);
            data.set(t, 3, 0.9);
        }
        let m = decode_features(&MotionFeatures::new(data), &sk, RootPose::default(), 20.0).unwrap();
        for t in 0..6 {
            assert_eq!(m.root_position[t], [0.0, 0.9, 0.0]);
            assert!((m.root_yaw[t] - 0.2 * t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_recovers_curved_root_path() {
        let sk = Skeleton::default_seven();
        let m = motion_from(
            &sk,
            50,
            |t| {
                let s = t as f64 * 0.1;
                [s.sin() * 2.0, 0.9 + 0.05 * (3.0 * s).sin(), s * 0.7 - s * s * 0.02]
            },
            |t| 0.3 + 0.05 * t as f64 - 0.001 * (t * t) as f64,
        );
        let f = encode_features(&m, &sk, 0.02).unwrap();
        let d = decode_features(&f, &sk, m.initial_root(), 20.0).unwrap();
        assert_eq!(d.frames(), 49);
        let mut worst: f64 = 0.0;
        for t in 0..49 {
            for a in 0..3 {
                worst = worst.max((d.root_position[t][a] - m.root_position[t][a]).abs());
            }
        }
        assert!(worst < 1e-6, "max error {worst}");
    }

    #[test]
    fn recovered_rotations_are_orthonormal() {
        let m = rotation_between([0.1, -0.3, 0.2], [-0.4, 0.1, 0.9]);
        let r = from_6d(&to_6d(&m));
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
        let opp = rotation_between([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]);
        let v = mat_vec(&opp, [0.0, 1.0, 0.0]);
        assert!((v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_maps_rest_direction_onto_bone() {
        let from = [0.0, -0.85, 0.0];
        let to = [0.2, -0.8, 0.1];
        let m = rotation_between(from, to);
        let v = mat_vec(&m, scale3(from, 1.0 / norm3(from)));
        let t = scale3(to, 1.0 / norm3(to));
        for a in 0..3 {
            assert!((v[a] - t[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_fast_translation_breaks_all_contacts() {
        let sk = Skeleton::default_seven();
        let m = motion_from(&sk, 10, |t| [0.1 * t as f64, 0.9, 0.0], |_| 0.0);
        let c = detect_foot_contacts(&m, &sk, 0.02).unwrap();
        assert!(c.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn too_short_motion_is_rejected() {
        let sk = Skeleton::default_seven();
        let m = motion_from(&sk, 1, |_| [0.0; 3], |_| 0.0);
        assert!(encode_features(&m, &sk, 0.02).is_err());
    }

    #[test]
    fn wrong_dim_is_rejected_on_decode() {
        let sk = Skeleton::default_seven();
        let f = MotionFeatures::new(Tensor2::zeros(3, 10));
        assert!(decode_features(&f, &sk, RootPose::default(), 20.0).is_err());
    }
}
