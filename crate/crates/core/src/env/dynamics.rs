//! Per-task initial-state distributions and transition functions.
//!
//! * `point_reach`: the agent is a point moved by `agent_speed · action`.
//! * `planar_push`: sticky contact. While the agent is within `contact_radius`
//!   of the box, both translate together at `PUSH_SPEED_FACTOR` of the free speed.
//! * `planar_slide`: the agent is confined to `y ≤ STRIKE_ZONE_TOP`. Moving into
//!   the puck sets its velocity to `STRIKE_GAIN ×` the agent displacement; the
//!   puck then decelerates at a constant rate `PUCK_FRICTION` (Coulomb friction,
//!   integrated exactly within each unit time step) and stops at the walls.

use rand::Rng;

use super::{distance, Dynamics, GoalEnvSpec};

pub const PUSH_SPEED_FACTOR: f64 = 0.6;
pub const STRIKE_ZONE_TOP: f64 = 0.4;
pub const STRIKE_GAIN: f64 = 3.0;
/// Speed lost per unit time by a sliding puck.
pub const PUCK_FRICTION: f64 = 0.01;

fn uniform2<R: Rng + ?Sized>(rng: &mut R, x: (f64, f64), y: (f64, f64)) -> [f64; 2] {
    [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)]
}

pub(super) fn initial_state<R: Rng + ?Sized>(spec: &GoalEnvSpec, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    match spec.dynamics {
        Dynamics::PointReach => {
            let p = uniform2(rng, (0.1, 0.9), (0.1, 0.9));
            let g = loop {
                let g = uniform2(rng, (0.1, 0.9), (0.1, 0.9));
                if distance(&p, &g) > 2.0 * spec.goal_tolerance {
                    break g;
                }
            };
            (p.to_vec(), g.to_vec())
        }
        Dynamics::PlanarPush => {
            let b = uniform2(rng, (0.25, 0.75), (0.25, 0.75));
            let p = loop {
                let p = uniform2(rng, (0.05, 0.95), (0.05, 0.95));
                if distance(&p, &b) > 2.0 * spec.contact_radius {
                    break p;
                }
            };
            let g = loop {
                let g = uniform2(rng, (0.15, 0.85), (0.15, 0.85));
                if distance(&g, &b) > 2.0 * spec.goal_tolerance {
                    break g;
                }
            };
            (push_state(p, b), g.to_vec())
        }
        Dynamics::PlanarSlide => {
            let k = uniform2(rng, (0.25, 0.75), (0.2, 0.3));
            let p = loop {
                let p = uniform2(rng, (0.1, 0.9), (0.02, 0.12));
                if distance(&p, &k) > 2.0 * spec.contact_radius {
                    break p;
                }
            };
            let g = uniform2(rng, (0.2, 0.8), (0.6, 0.85));
            (slide_state(p, k, [0.0, 0.0]), g.to_vec())
        }
    }
}

fn push_state(p: [f64; 2], b: [f64; 2]) -> Vec<f64> {
    vec![p[0], p[1], b[0], b[1], b[0] - p[0], b[1] - p[1]]
}

fn slide_state(p: [f64; 2], k: [f64; 2], v: [f64; 2]) -> Vec<f64> {
    vec![p[0], p[1], k[0], k[1], v[0], v[1], k[0] - p[0], k[1] - p[1]]
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Exact distance covered in one unit time step by a puck sliding at
/// `speed` under constant deceleration `friction`, and its speed afterwards.
pub fn slide_step_travel(speed: f64, friction: f64) -> (f64, f64) {
    if speed <= friction {
        (speed * speed / (2.0 * friction), 0.0)
    } else {
        (speed - 0.5 * friction, speed - friction)
    }
}

pub(super) fn advance(spec: &GoalEnvSpec, state: &mut Vec<f64>, action: &[f64]) {
    let step = spec.agent_speed;
    match spec.dynamics {
        Dynamics::PointReach => {
            state[0] = clamp01(state[0] + step * action[0]);
            state[1] = clamp01(state[1] + step * action[1]);
        }
        Dynamics::PlanarPush => {
            let p = [state[0], state[1]];
            let b = [state[2], state[3]];
            let contact = distance(&p, &b) <= spec.contact_radius;
            let scale = if contact { step * PUSH_SPEED_FACTOR } else { step };
            let d = [scale * action[0], scale * action[1]];
            let p2 = [clamp01(p[0] + d[0]), clamp01(p[1] + d[1])];
            let b2 = if contact {
                [clamp01(b[0] + d[0]), clamp01(b[1] + d[1])]
            } else {
                b
            };
            *state = push_state(p2, b2);
        }
        Dynamics::PlanarSlide => {
            let p = [state[0], state[1]];
            let mut k = [state[2], state[3]];
            let mut v = [state[4], state[5]];
            let p2 = [
                clamp01(p[0] + step * action[0]),
                (p[1] + step * action[1]).clamp(0.0, STRIKE_ZONE_TOP),
            ];
            let disp = [p2[0] - p[0], p2[1] - p[1]];
            let towards = disp[0] * (k[0] - p[0]) + disp[1] * (k[1] - p[1]) > 0.0;
            if towards && distance(&p2, &k) <= spec.contact_radius {
                v = [STRIKE_GAIN * disp[0], STRIKE_GAIN * disp[1]];
            }
            let speed = v[0].hypot(v[1]);
            if speed > 0.0 {
                let (travel, after) = slide_step_travel(speed, PUCK_FRICTION);
                let dir = [v[0] / speed, v[1] / speed];
                k = [k[0] + dir[0] * travel, k[1] + dir[1] * travel];
                v = [dir[0] * after, dir[1] * after];
                if !(0.0..=1.0).contains(&k[0]) || !(0.0..=1.0).contains(&k[1]) {
                    k = [clamp01(k[0]), clamp01(k[1])];
                    v = [0.0, 0.0];
                }
            }
            *state = slide_state(p2, k, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Env;

    #[test]
    fn puck_stopping_distance_matches_closed_form() {
        for &v0 in &[0.0, 0.004, 0.01, 0.037, 0.1, 0.123456, 0.15] {
            let mut speed = v0;
            let mut total = 0.0;
            let mut guard = 0;
            while speed > 0.0 {
                let (d, s) = slide_step_travel(speed, PUCK_FRICTION);
                total += d;
                speed = s;
                guard += 1;
                assert!(guard < 1000);
            }
            let closed = v0 * v0 / (2.0 * PUCK_FRICTION);
            assert!((total - closed).abs() < 1e-6, "v0 {v0}: {total} vs {closed}");
        }
    }

    #[test]
    fn struck_puck_travel_in_env() {
        let spec = GoalEnvSpec::new(Dynamics::PlanarSlide);
        // agent just below the puck, moving straight up into it
        let state = slide_state([0.5, 0.2], [0.5, 0.26], [0.0, 0.0]);
        let mut env = Env::from_state(&spec, state, vec![0.5, 0.95]).unwrap();
        env.step(&[0.0, 0.4]).unwrap();
        let v0 = env.state()[5] + PUCK_FRICTION;
        assert!((v0 - STRIKE_GAIN * 0.4 * spec.agent_speed).abs() < 1e-12);
        let start_after_strike = 0.26;
        for _ in 0..40 {
            env.step(&[0.0, 0.0]).unwrap();
        }
        assert_eq!(env.state()[5], 0.0);
        let travelled = env.state()[3] - start_after_strike;
        let closed = v0 * v0 / (2.0 * PUCK_FRICTION);
        assert!((travelled - closed).abs() < 1e-6, "{travelled} vs {closed}");
    }

    #[test]
    fn slide_agent_stays_in_zone() {
        let spec = GoalEnvSpec::new(Dynamics::PlanarSlide);
        let mut env = Env::reset(&spec, 3);
        for _ in 0..30 {
            env.step(&[0.3, 1.0]).unwrap();
            assert!(env.state()[1] <= STRIKE_ZONE_TOP);
        }
    }

    #[test]
    fn push_box_follows_agent_in_contact() {
        let spec = GoalEnvSpec::new(Dynamics::PlanarPush);
        let mut env =
            Env::from_state(&spec, push_state([0.45, 0.5], [0.5, 0.5]), vec![0.8, 0.5]).unwrap();
        env.step(&[1.0, 0.0]).unwrap();
        let d = spec.agent_speed * PUSH_SPEED_FACTOR;
        assert!((env.state()[0] - (0.45 + d)).abs() < 1e-12);
        assert!((env.state()[2] - (0.5 + d)).abs() < 1e-12);
        // far away: box stays
        let mut env =
            Env::from_state(&spec, push_state([0.1, 0.1], [0.5, 0.5]), vec![0.8, 0.5]).unwrap();
        env.step(&[1.0, 1.0]).unwrap();
        assert_eq!(&env.state()[2..4], &[0.5, 0.5]);
    }
}
