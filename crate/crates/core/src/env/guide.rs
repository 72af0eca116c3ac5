//! Handcrafted proportional guiding controllers.
//!
//! Each controller is a pure function of the observation: the current phase is
//! recomputed from geometry on every call, so the controller can be queried
//! for any (state, goal) pair, including hindsight-relabelled goals.

use super::dynamics::{PUCK_FRICTION, STRIKE_GAIN};
use super::{distance, Dynamics, GoalEnvSpec, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Move to the stand-off point behind the object.
    Approach,
    /// Lined up behind the object, closing in (slide: the strike itself).
    Engage,
    /// Carry the object to the goal (slide: hold still while the puck runs).
    Deliver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideController {
    pub dynamics: Dynamics,
    pub gain: f64,
    pub action_bound: f64,
    pub agent_speed: f64,
    pub contact_radius: f64,
    /// Distance behind the object the approach phase aims for.
    pub standoff: f64,
    /// Distance at which the slide controller's linear strike model is exact.
    /// Its strike speed grows linearly with distance while the true stopping
    /// distance grows with speed squared, so nearer goals are undershot and
    /// only goals around or beyond this distance are reached.
    pub strike_calibration: f64,
}

impl GuideController {
    pub fn for_spec(spec: &GoalEnvSpec) -> Self {
        Self {
            dynamics: spec.dynamics,
            gain: 2.0,
            action_bound: spec.action_bound,
            agent_speed: spec.agent_speed,
            contact_radius: spec.contact_radius,
            standoff: match spec.dynamics {
                Dynamics::PointReach => 0.0,
                Dynamics::PlanarPush => 0.1,
                Dynamics::PlanarSlide => 0.08,
            },
            strike_calibration: 0.64,
        }
    }

    fn clip(&self, v: [f64; 2]) -> Vec<f64> {
        v.iter()
            .map(|x| x.clamp(-self.action_bound, self.action_bound))
            .collect()
    }

    fn p_law(&self, from: [f64; 2], to: [f64; 2]) -> Vec<f64> {
        self.clip([self.gain * (to[0] - from[0]), self.gain * (to[1] - from[1])])
    }

    pub fn phase(&self, obs: &Observation) -> Phase {
        let s = &obs.state;
        match self.dynamics {
            Dynamics::PointReach => Phase::Deliver,
            Dynamics::PlanarPush => {
                let p = [s[0], s[1]];
                let b = [s[2], s[3]];
                if distance(&p, &b) <= self.contact_radius {
                    return Phase::Deliver;
                }
                let (along, perp) = line_coords(p, b, goal2(obs));
                if along < 0.0 && perp < 0.02 && -along <= self.standoff + 0.02 {
                    Phase::Engage
                } else {
                    Phase::Approach
                }
            }
            Dynamics::PlanarSlide => {
                if s[4] != 0.0 || s[5] != 0.0 {
                    return Phase::Deliver;
                }
                let (along, perp) = line_coords([s[0], s[1]], [s[2], s[3]], goal2(obs));
                if along < 0.0 && perp < 0.01 && -along <= self.standoff + 0.01 {
                    Phase::Engage
                } else {
                    Phase::Approach
                }
            }
        }
    }

    /// Deterministic action for `obs`, always within the action bound.
    pub fn action(&self, obs: &Observation) -> Vec<f64> {
        let s = &obs.state;
        let g = goal2(obs);
        match self.dynamics {
            Dynamics::PointReach => self.p_law([s[0], s[1]], g),
            Dynamics::PlanarPush => {
                let p = [s[0], s[1]];
                let b = [s[2], s[3]];
                match self.phase(obs) {
                    Phase::Deliver => self.p_law(b, g),
                    Phase::Engage => self.p_law(p, b),
                    Phase::Approach => self.p_law(p, behind(b, g, self.standoff)),
                }
            }
            Dynamics::PlanarSlide => {
                let p = [s[0], s[1]];
                let k = [s[2], s[3]];
                match self.phase(obs) {
                    Phase::Deliver => vec![0.0, 0.0],
                    Phase::Engage => {
                        let dist = distance(&k, &g);
                        let calibrated = (2.0 * PUCK_FRICTION * self.strike_calibration).sqrt();
                        let puck_speed = calibrated * dist / self.strike_calibration;
                        let magnitude = puck_speed / (STRIKE_GAIN * self.agent_speed);
                        let u = unit(k, g);
                        let mut a = [u[0] * magnitude, u[1] * magnitude];
                        let peak = a[0].abs().max(a[1].abs());
                        if peak > self.action_bound {
                            a = [a[0] * self.action_bound / peak, a[1] * self.action_bound / peak];
                        }
                        a.to_vec()
                    }
                    Phase::Approach => self.p_law(p, self.slide_approach_target(p, k, g)),
                }
            }
        }
    }

    /// Stand-off point behind the puck, detouring sideways when the puck is
    /// between the agent and that point.
    fn slide_approach_target(&self, p: [f64; 2], k: [f64; 2], g: [f64; 2]) -> [f64; 2] {
        let (along, perp) = line_coords(p, k, g);
        let clearance = self.contact_radius + 0.03;
        if along > -self.contact_radius && perp < clearance {
            let u = unit(k, g);
            let side = if (p[0] - k[0]) * -u[1] + (p[1] - k[1]) * u[0] >= 0.0 {
                1.0
            } else {
                -1.0
            };
            let n = [-u[1] * side, u[0] * side];
            [k[0] + n[0] * (clearance + 0.02), k[1] + n[1] * (clearance + 0.02)]
        } else {
            behind(k, g, self.standoff)
        }
    }
}

/// Anything that maps an observation to an action can act as a guide.
pub trait Guide {
    fn guide_action(&self, obs: &Observation) -> Vec<f64>;
}

impl Guide for GuideController {
    fn guide_action(&self, obs: &Observation) -> Vec<f64> {
        self.action(obs)
    }
}

impl<F: Fn(&Observation) -> Vec<f64>> Guide for F {
    fn guide_action(&self, obs: &Observation) -> Vec<f64> {
        self(obs)
    }
}

/// Free-function form of [`GuideController::action`].
pub fn guide_action(controller: &GuideController, obs: &Observation) -> Vec<f64> {
    controller.action(obs)
}

fn goal2(obs: &Observation) -> [f64; 2] {
    [obs.desired_goal[0], obs.desired_goal[1]]
}

fn unit(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = d[0].hypot(d[1]);
    if n < 1e-12 {
        [1.0, 0.0]
    } else {
        [d[0] / n, d[1] / n]
    }
}

fn behind(object: [f64; 2], goal: [f64; 2], standoff: f64) -> [f64; 2] {
    let u = unit(object, goal);
    [object[0] - u[0] * standoff, object[1] - u[1] * standoff]
}

/// Agent position relative to the object along the object→goal line:
/// signed distance along it (negative = behind) and perpendicular distance.
fn line_coords(p: [f64; 2], object: [f64; 2], goal: [f64; 2]) -> (f64, f64) {
    let u = unit(object, goal);
    let r = [p[0] - object[0], p[1] - object[1]];
    let along = r[0] * u[0] + r[1] * u[1];
    let perp = (r[0] * -u[1] + r[1] * u[0]).abs();
    (along, perp)
}
