//! Parametric kinematics for the default seven-joint skeleton.
//!
//! Joint order is fixed: root, left hip, right hip, left foot, right foot,
//! left hand, right hand. Local frames face +z with +x to the character's left.

use std::f64::consts::PI;

use super::spec::{Action, ActionSpec, SpeedLevel, Style};
use crate::motion::{mat_vec, yaw_matrix, RawMotion, Vec3};

const STAND_HEIGHT: f64 = 0.9;
const HIP_X: f64 = 0.1;
const HIP_Y: f64 = -0.05;
const HAND_X: f64 = 0.22;
const HAND_Y: f64 = 0.35;

/// Per-item variation of limb amplitudes and gait phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Multiplier on limb amplitudes.
    pub amplitude: f64,
    /// Gait phase offset in cycles.
    pub phase: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        amplitude: 1.0,
        phase: 0.0,
    };
}

/// Generated motion plus the generator's own stance labels.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub motion: RawMotion,
    /// For stepping actions: per transition `t -> t + 1`, whether each foot
    /// (left, right) is planted for the whole interval.
    pub stance: Option<Vec<[bool; 2]>>,
}

/// Ground speed in m/s for stepping actions.
pub fn stepping_speed(action: Action, speed: SpeedLevel) -> f64 {
    let i = speed.index();
    match action {
        Action::Run => [2.4, 3.0, 3.6][i],
        Action::Walk | Action::TurnLeft | Action::TurnRight => [0.8, 1.2, 1.6][i],
        _ => 0.0,
    }
}

struct Gait {
    speed: f64,
    turn_rate: f64,
    cycle: f64,
    stance: f64,
    lift: f64,
    foot_width: f64,
    bob: f64,
    height: f64,
    arm_swing: f64,
    hand_lift: f64,
    hand_forward: f64,
    hand_bob: f64,
}

fn gait(spec: &ActionSpec, jitter: Jitter) -> Gait {
    let i = spec.speed.index();
    let a = jitter.amplitude;
    let mut g = match spec.action {
        Action::Run => Gait {
            speed: stepping_speed(spec.action, spec.speed),
            turn_rate: 0.0,
            cycle: [0.7, 0.6, 0.5][i],
            stance: 0.35,
            lift: 0.15 * a,
            foot_width: HIP_X,
            bob: 0.04 * a,
            height: STAND_HEIGHT - 0.04,
            arm_swing: 0.25 * a,
            hand_lift: 0.1,
            hand_forward: 0.1,
            hand_bob: 0.0,
        },
        _ => Gait {
            speed: stepping_speed(spec.action, spec.speed),
            turn_rate: match spec.action {
                Action::TurnLeft => 0.8,
                Action::TurnRight => -0.8,
                _ => 0.0,
            },
            cycle: [1.2, 1.0, 0.8][i],
            stance: 0.6,
            lift: 0.08 * a,
            foot_width: HIP_X,
            bob: 0.02 * a,
            height: STAND_HEIGHT,
            arm_swing: 0.15 * a,
            hand_lift: 0.0,
            hand_forward: 0.0,
            hand_bob: 0.0,
        },
    };
    match spec.style {
        None => {}
        Some(Style::Bouncy) => {
            g.bob = 0.1 * a;
            g.lift *= 3.0;
            g.hand_bob = 0.2 * a;
        }
        Some(Style::Stiff) => {
            g.arm_swing = 0.01 * a;
            g.lift *= 0.3;
            g.bob = 0.0;
            g.foot_width = 0.04;
            g.hand_lift = -0.1;
        }
        Some(Style::Leaning) => {
            g.height -= 0.12;
            g.hand_forward = 0.3;
            g.hand_lift = -0.12;
        }
        Some(Style::GiantStride) => {
            g.cycle *= 1.7;
            g.lift *= 1.6;
            g.bob *= 2.5;
            g.height -= 0.06;
            g.foot_width = 0.16;
        }
    }
    g
}

/// Root path: heading `theta0 + kappa * s` at arc length `s`.
struct Path {
    theta0: f64,
    kappa: f64,
}

impl Path {
    fn heading(&self, s: f64) -> f64 {
        self.theta0 + self.kappa * s
    }

    fn point(&self, s: f64) -> [f64; 2] {
        if self.kappa.abs() < 1e-12 {
            [s * self.theta0.sin(), s * self.theta0.cos()]
        } else {
            let th = self.heading(s);
            [
                (self.theta0.cos() - th.cos()) / self.kappa,
                (th.sin() - self.theta0.sin()) / self.kappa,
            ]
        }
    }
}

fn to_local(global: Vec3, root: Vec3, yaw: f64) -> Vec3 {
    mat_vec(
        &yaw_matrix(-yaw),
        [global[0] - root[0], global[1] - root[1], global[2] - root[2]],
    )
}

fn hips() -> [Vec3; 2] {
    [[HIP_X, HIP_Y, 0.0], [-HIP_X, HIP_Y, 0.0]]
}

fn stepping(spec: &ActionSpec, jitter: Jitter, fps: f64, theta0: f64) -> Synthesized {
    let g = gait(spec, jitter);
    let n = spec.duration_frames;
    let path = Path {
        theta0,
        kappa: if g.speed > 0.0 { g.turn_rate / g.speed } else { 0.0 },
    };
    let foot_phase = [0.0, 0.5];
    let sides = [1.0, -1.0];
    // Cycle coordinate of foot `f` at time `tau` seconds.
    let cycle_coord = |f: usize, tau: f64| tau / g.cycle + foot_phase[f] + jitter.phase;
    let mut root_position = Vec::with_capacity(n);
    let mut root_yaw = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    let mut in_stance = Vec::with_capacity(n);
    for t in 0..n {
        let tau = t as f64 / fps;
        let s = g.speed * tau;
        let yaw = path.heading(s);
        let c0 = cycle_coord(0, tau);
        let h = g.height + g.bob * (4.0 * PI * c0).cos();
        let p = path.point(s);
        let root = [p[0], h, p[1]];
        let mut pose = vec![[0.0; 3]; 7];
        pose[1] = hips()[0];
        pose[2] = hips()[1];
        let mut stance_now = [(0i64, false); 2];
        for f in 0..2 {
            let c = cycle_coord(f, tau);
            let k = c.floor();
            let u = c - k;
            let start = (k - foot_phase[f] - jitter.phase) * g.cycle;
            let plant = g.speed * (start + g.stance * g.cycle / 2.0);
            let (sigma, y) = if u < g.stance {
                (plant, 0.0)
            } else {
                let w = (u - g.stance) / (1.0 - g.stance);
                (plant + w * g.speed * g.cycle, g.lift * (PI * w).sin())
            };
            stance_now[f] = (k as i64, u < g.stance);
            let fp = path.point(sigma);
            let th = path.heading(sigma);
            let lateral = [th.cos(), -th.sin()];
            let foot = [
                fp[0] + sides[f] * g.foot_width * lateral[0],
                y,
                fp[1] + sides[f] * g.foot_width * lateral[1],
            ];
            pose[3 + f] = to_local(foot, root, yaw);
        }
        let swing = (2.0 * PI * c0).sin();
        let hand_bob = g.hand_bob * (4.0 * PI * c0).cos();
        pose[5] = [
            HAND_X,
            HAND_Y + g.hand_lift + hand_bob,
            g.hand_forward - g.arm_swing * swing,
        ];
        pose[6] = [
            -HAND_X,
            HAND_Y + g.hand_lift + hand_bob,
            g.hand_forward + g.arm_swing * swing,
        ];
        root_position.push(root);
        root_yaw.push(yaw);
        local.push(pose);
        in_stance.push(stance_now);
    }
    let stance = (0..n.saturating_sub(1))
        .map(|t| {
            let mut out = [false; 2];
            for (f, o) in out.iter_mut().enumerate() {
                let (ka, sa) = in_stance[t][f];
                let (kb, sb) = in_stance[t + 1][f];
                *o = sa && sb && ka == kb;
            }
            out
        })
        .collect();
    Synthesized {
        motion: RawMotion {
            fps,
            root_position,
            root_yaw,
            local_joint_positions: local,
        },
        stance: Some(stance),
    }
}

fn in_place(spec: &ActionSpec, jitter: Jitter, fps: f64, theta0: f64) -> Synthesized {
    let n = spec.duration_frames;
    let i = spec.speed.index();
    let a = jitter.amplitude;
    let mut root_position = Vec::with_capacity(n);
    let mut root_yaw = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    for t in 0..n {
        let tau = t as f64 / fps;
        let mut yaw = theta0;
        let mut h = STAND_HEIGHT;
        let mut foot_y = 0.0;
        let mut hands = [[HAND_X, HAND_Y, 0.0], [-HAND_X, HAND_Y, 0.0]];
        match spec.action {
            Action::Jump => {
                let period = [1.5, 1.2, 0.9][i];
                let u = (tau / period + jitter.phase).rem_euclid(1.0);
                if u < 0.3 {
                    h -= 0.1 * a * (PI * u / 0.3).sin();
                } else if u < 0.7 {
                    let air = 0.25 * a * (PI * (u - 0.3) / 0.4).sin();
                    h += air;
                    foot_y = air;
                    for hand in hands.iter_mut() {
                        hand[1] += 0.3 * a * (PI * (u - 0.3) / 0.4).sin();
                    }
                } else {
                    h -= 0.08 * a * (PI * (u - 0.7) / 0.3).sin();
                }
            }
            Action::Crouch => {
                let period = [3.0, 2.0, 1.4][i];
                let u = tau / period + jitter.phase;
                let depth = 0.35 * a * (0.5 - 0.5 * (2.0 * PI * u).cos());
                h -= depth;
                for hand in hands.iter_mut() {
                    hand[2] += depth * 0.8;
                }
            }
            Action::WaveLeft | Action::WaveRight => {
                let period = [1.2, 0.8, 0.5][i];
                let u = tau / period + jitter.phase;
                let (idx, side) = if spec.action == Action::WaveLeft {
                    (0, 1.0)
                } else {
                    (1, -1.0)
                };
                hands[idx] = [
                    side * (0.3 + 0.15 * a * (2.0 * PI * u).sin()),
                    0.8 + 0.05 * a * (4.0 * PI * u).cos(),
                    0.1,
                ];
            }
            Action::Spin => {
                let rate = [1.6, 2.4, 3.6][i];
                yaw += rate * tau;
                hands = [[0.5 * a, 0.45, 0.0], [-0.5 * a, 0.45, 0.0]];
            }
            Action::Idle => {
                let period = [3.0, 2.0, 1.0][i];
                let amp = [0.01, 0.015, 0.03][i] * a;
                let u = tau / period + jitter.phase;
                for (k, hand) in hands.iter_mut().enumerate() {
                    hand[1] += amp * (2.0 * PI * u + k as f64 * PI).sin();
                    hand[2] += amp * (2.0 * PI * u).cos();
                }
            }
            _ => unreachable!("stepping actions use the gait model"),
        }
        let root = [0.0, h, 0.0];
        let feet = [
            [HIP_X, foot_y - h, 0.0],
            [-HIP_X, foot_y - h, 0.0],
        ];
        root_position.push(root);
        root_yaw.push(yaw);
        local.push(vec![
            [0.0; 3],
            hips()[0],
            hips()[1],
            feet[0],
            feet[1],
            hands[0],
            hands[1],
        ]);
    }
    Synthesized {
        motion: RawMotion {
            fps,
            root_position,
            root_yaw,
            local_joint_positions: local,
        },
        stance: None,
    }
}

/// Builds the motion for `spec`, starting at the origin facing `theta0`.
pub fn synthesize(spec: &ActionSpec, jitter: Jitter, fps: f64, theta0: f64) -> Synthesized {
    if spec.action.is_stepping() {
        stepping(spec, jitter, fps, theta0)
    } else {
        in_place(spec, jitter, fps, theta0)
    }
}

/// Mean distance between corresponding joints, measured relative to the
/// ground point under the root, over the common frame range.
pub fn pose_deviation(a: &RawMotion, b: &RawMotion) -> f64 {
    let n = a.frames().min(b.frames());
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..n {
        for (pa, pb) in a.local_joint_positions[t].iter().zip(&b.local_joint_positions[t]) {
            let ya = pa[1] + a.root_position[t][1];
            let yb = pb[1] + b.root_position[t][1];
            total += ((pa[0] - pb[0]).powi(2) + (ya - yb).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
