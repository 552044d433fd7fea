//! Synthetic block-contextual task family: compositional (skill, object)
//! tasks over a 2-D arena with a one-degree-of-freedom object joint.
//!
//! Every task observes the same 8 dimensions but their meaning is
//! task-dependent; object joint dynamics depend only on the object, so they
//! are identical across every task featuring that object. Each task carries
//! a short natural-language description ("open the drawer") used as its
//! metadata.

use crate::error::{CoreError, Result};
use crate::rng::{fnv1a64, mix64, SeededPrng};

pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 3;

/// Physical parameters of a manipulable object. A function of the object
/// kind only, never of the task.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectKind {
    pub name: String,
    /// Per-step pull of the joint toward its rest position, in [0,1).
    pub stiffness: f64,
    /// Joint rest position in [0,1].
    pub rest: f64,
    /// Joint units moved per unit of manipulation action at proximity 1.
    pub gain: f64,
    /// Arena x-coordinate of the object (y is 0 for every object).
    pub anchor_x: f64,
}

impl ObjectKind {
    pub fn anchor(&self) -> [f64; 2] {
        [self.anchor_x, 0.0]
    }

    /// The built-in object catalogue.
    pub fn preset(name: &str) -> Result<ObjectKind> {
        let (stiffness, rest, gain, anchor_x) = match name {
            "drawer" => (0.05, 0.5, 0.12, -0.5),
            "window" => (0.08, 0.5, 0.10, 0.5),
            "door" => (0.04, 0.5, 0.14, -0.8),
            "button" => (0.10, 0.5, 0.16, 0.8),
            "puck" => (0.06, 0.5, 0.10, 0.0),
            _ => {
                return Err(CoreError::Env(format!(
                    "unknown object {name:?}; known: drawer, window, door, button, puck"
                )))
            }
        };
        Ok(ObjectKind {
            name: name.to_string(),
            stiffness,
            rest,
            gain,
            anchor_x,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skill {
    Open,
    Close,
    Reach,
    Push,
}

impl Skill {
    pub fn parse(name: &str) -> Result<Skill> {
        Ok(match name {
            "open" => Skill::Open,
            "close" => Skill::Close,
            "reach" => Skill::Reach,
            "push" => Skill::Push,
            _ => {
                return Err(CoreError::Env(format!(
                    "unknown skill {name:?}; known: open, close, reach, push"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Skill::Open => "open",
            Skill::Close => "close",
            Skill::Reach => "reach",
            Skill::Push => "push",
        }
    }

    /// Target joint value for joint-shaping skills; None for position skills.
    pub fn joint_target(&self) -> Option<f64> {
        match self {
            Skill::Open => Some(1.0),
            Skill::Close => Some(0.0),
            Skill::Reach | Skill::Push => None,
        }
    }

    /// Deterministic, pure success predicate.
    pub fn success(&self, agent: [f64; 2], joint: f64, goal: [f64; 2]) -> bool {
        match self {
            Skill::Open => joint >= 0.9,
            Skill::Close => joint <= 0.1,
            Skill::Reach => dist(agent, goal) <= 0.15,
            Skill::Push => dist(agent, goal) <= 0.10,
        }
    }

    /// Radius of the goal-sampling disc around the object anchor.
    fn goal_radius(&self) -> f64 {
        match self {
            Skill::Open | Skill::Close => 0.20,
            Skill::Reach => 0.35,
            Skill::Push => 0.25,
        }
    }
}

/// Weight of the joint-shaping reward term.
pub const W_SKILL: f64 = 1.0;

/// One member of the task family.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub index: usize,
    pub skill: Skill,
    pub object: ObjectKind,
    /// Seed of the per-task goal distribution.
    pub goal_seed: u64,
    pub metadata: String,
    pub horizon: usize,
}

impl TaskSpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.skill.name(), self.object.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub joint: f64,
    pub goal: [f64; 2],
    pub step: usize,
    pub done: bool,
}

impl EnvState {
    pub fn observation(&self, task: &TaskSpec) -> [f64; OBS_DIM] {
        [
            self.agent_pos[0],
            self.agent_pos[1],
            self.agent_vel[0],
            self.agent_vel[1],
            self.joint,
            self.goal[0],
            self.goal[1],
            task.object.anchor_x,
        ]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_arena(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// A (train, held-out) family of tasks built from (skill, object) pairs.
#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub train: Vec<TaskSpec>,
    pub held_out: Vec<TaskSpec>,
}

/// Configuration for [`make_family`].
#[derive(Clone, Debug)]
pub struct FamilyConfig {
    pub train_pairs: Vec<(String, String)>,
    pub held_out_pairs: Vec<(String, String)>,
    pub seed: u64,
    pub horizon: usize,
}

impl FamilyConfig {
    /// The five-task preset with one held-out composition:
    /// train {reach-puck, push-puck, open-drawer, close-drawer, open-window},
    /// held out {close-window}.
    pub fn mt5(seed: u64, horizon: usize) -> Self {
        let p = |s: &str, o: &str| (s.to_string(), o.to_string());
        FamilyConfig {
            train_pairs: vec![
                p("reach", "puck"),
                p("push", "puck"),
                p("open", "drawer"),
                p("close", "drawer"),
                p("open", "window"),
            ],
            held_out_pairs: vec![p("close", "window")],
            seed,
            horizon,
        }
    }
}

/// Build a deterministic task family. Held-out pairs must recombine a skill
/// and an object that each appear somewhere in training.
pub fn make_family(config: &FamilyConfig) -> Result<TaskFamily> {
    if config.horizon == 0 {
        return Err(CoreError::Env("horizon must be positive".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for (s, o) in config.train_pairs.iter().chain(&config.held_out_pairs) {
        if !seen.insert((s.clone(), o.clone())) {
            return Err(CoreError::Env(format!("duplicate task pair ({s}, {o})")));
        }
    }
    let train_skills: Vec<&str> = config.train_pairs.iter().map(|(s, _)| s.as_str()).collect();
    let train_objects: Vec<&str> = config.train_pairs.iter().map(|(_, o)| o.as_str()).collect();
    for (s, o) in &config.held_out_pairs {
        if !train_skills.contains(&s.as_str()) {
            return Err(CoreError::Env(format!(
                "held-out skill {s:?} never appears in training"
            )));
        }
        if !train_objects.contains(&o.as_str()) {
            return Err(CoreError::Env(format!(
                "held-out object {o:?} never appears in training"
            )));
        }
    }

    let build = |pairs: &[(String, String)], base_index: usize| -> Result<Vec<TaskSpec>> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (s, o))| {
                let skill = Skill::parse(s)?;
                let object = ObjectKind::preset(o)?;
                let metadata = format!("{} the {}", skill.name(), object.name);
                Ok(TaskSpec {
                    index: base_index + i,
                    skill,
                    object,
                    goal_seed: mix64(config.seed ^ fnv1a64(metadata.as_bytes())),
                    metadata,
                    horizon: config.horizon,
                })
            })
            .collect()
    };
    let train = build(&config.train_pairs, 0)?;
    let held_out = build(&config.held_out_pairs, train.len())?;
    Ok(TaskFamily { train, held_out })
}

/// Reset a task to a fresh episode. Deterministic per (task, episode_seed).
pub fn reset(task: &TaskSpec, episode_seed: u64) -> (EnvState, [f64; OBS_DIM]) {
    let mut rng = SeededPrng::new(mix64(task.goal_seed ^ mix64(episode_seed)));
    let agent_pos = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
    // Goal from the task's distribution: uniform in a disc around the anchor,
    // clamped to the arena.
    let radius = task.skill.goal_radius();
    let anchor = task.object.anchor();
    let angle = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let r = radius * rng.uniform().sqrt();
    let goal = [
        clamp_arena(anchor[0] + r * angle.cos()),
        clamp_arena(anchor[1] + r * angle.sin()),
    ];
    let state = EnvState {
        agent_pos,
        agent_vel: [0.0, 0.0],
        joint: task.object.rest,
        goal,
        step: 0,
        done: false,
    };
    let obs = state.observation(task);
    (state, obs)
}

pub struct StepResult {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Advance one step. Errors if the episode already finished.
pub fn step(task: &TaskSpec, state: &mut EnvState, action: [f64; ACTION_DIM]) -> Result<StepResult> {
    if state.done {
        return Err(CoreError::Env("step on a finished episode".into()));
    }
    let a = [
        action[0].clamp(-1.0, 1.0),
        action[1].clamp(-1.0, 1.0),
        action[2].clamp(-1.0, 1.0),
    ];
    for i in 0..2 {
        state.agent_vel[i] = 0.8 * state.agent_vel[i] + 0.1 * a[i];
        state.agent_pos[i] = clamp_arena(state.agent_pos[i] + state.agent_vel[i]);
    }
    let anchor = task.object.anchor();
    let proximity = (1.0 - 2.0 * dist(state.agent_pos, anchor)).max(0.0);
    let o = &task.object;
    state.joint = (state.joint + o.gain * a[2] * proximity - o.stiffness * (state.joint - o.rest))
        .clamp(0.0, 1.0);
    state.step += 1;

    let success = task.skill.success(state.agent_pos, state.joint, state.goal);
    let mut reward = -dist(state.agent_pos, anchor);
    if let Some(target) = task.skill.joint_target() {
        reward -= W_SKILL * (state.joint - target).abs();
    }
    if success {
        reward += 1.0;
    }
    debug_assert!(reward >= -(2.0 * 2.0_f64.sqrt() + W_SKILL) && reward <= 1.0);

    let done = success || state.step >= task.horizon;
    state.done = done;
    Ok(StepResult {
        obs: state.observation(task),
        reward,
        done,
        success,
    })
}

/// Hand-coded per-skill controller. Certifies that every task in the family
/// is solvable within its horizon and provides the success-rate ceiling for
/// calibrating learned agents.
pub fn scripted_policy(task: &TaskSpec, state: &EnvState) -> [f64; ACTION_DIM] {
    let target = match task.skill {
        Skill::Open | Skill::Close => task.object.anchor(),
        Skill::Reach | Skill::Push => state.goal,
    };
    let ax = 3.5 * (target[0] - state.agent_pos[0]) - 2.0 * state.agent_vel[0];
    let ay = 3.5 * (target[1] - state.agent_pos[1]) - 2.0 * state.agent_vel[1];
    let am = match task.skill {
        Skill::Open => 1.0,
        Skill::Close => -1.0,
        Skill::Reach | Skill::Push => 0.0,
    };
    [ax.clamp(-1.0, 1.0), ay.clamp(-1.0, 1.0), am]
}

/// Roll one episode with the scripted controller; true if success occurred
/// at any step.
pub fn scripted_episode(task: &TaskSpec, episode_seed: u64) -> bool {
    let (mut state, _) = reset(task, episode_seed);
    for _ in 0..task.horizon {
        let action = scripted_policy(task, &state);
        let r = step(task, &mut state, action).expect("episode not done");
        if r.success {
            return true;
        }
        if r.done {
            break;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mt5() -> TaskFamily {
        make_family(&FamilyConfig::mt5(7, 60)).unwrap()
    }

    #[test]
    fn mt5_preset_layout() {
        let fam = mt5();
        assert_eq!(fam.train.len(), 5);
        assert_eq!(fam.held_out.len(), 1);
        let names: Vec<String> = fam.train.iter().map(|t| t.name()).collect();
        assert_eq!(
            names,
            ["reach-puck", "push-puck", "open-drawer", "close-drawer", "open-window"]
        );
        assert_eq!(fam.held_out[0].name(), "close-window");
        for (i, t) in fam.train.iter().enumerate() {
            assert_eq!(t.index, i);
            assert!(t.metadata.contains(t.skill.name()));
            assert!(t.metadata.contains(&t.object.name));
        }
        assert_eq!(fam.held_out[0].index, 5);
    }

    #[test]
    fn duplicate_pair_rejected() {
        let mut cfg = FamilyConfig::mt5(7, 60);
        cfg.train_pairs.push(("open".into(), "drawer".into()));
        assert!(make_family(&cfg).is_err());
    }

    #[test]
    fn vacuous_held_out_rejected() {
        let mut cfg = FamilyConfig::mt5(7, 60);
        cfg.held_out_pairs = vec![("open".into(), "button".into())];
        assert!(make_family(&cfg).is_err(), "object never trained on");
        cfg.held_out_pairs = vec![("close".into(), "puck".into())];
        assert!(make_family(&cfg).is_ok(), "close and puck both appear in training");
    }

    #[test]
    fn reset_is_deterministic() {
        let fam = mt5();
        let (s1, o1) = reset(&fam.train[2], 99);
        let (s2, o2) = reset(&fam.train[2], 99);
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        assert_eq!(o1.len(), OBS_DIM);
        assert_eq!(s1.joint, fam.train[2].object.rest);
        let (s3, _) = reset(&fam.train[2], 100);
        assert_ne!(s1.agent_pos, s3.agent_pos);
    }

    #[test]
    fn equilibrium_at_rest_with_zero_action() {
        let fam = mt5();
        let task = &fam.train[2];
        let (mut state, _) = reset(task, 5);
        let joint0 = state.joint;
        step(task, &mut state, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(state.joint, joint0, "joint at rest stays at rest");
    }

    #[test]
    fn proximity_gates_manipulation() {
        let fam = mt5();
        let task = &fam.train[2]; // open-drawer, anchor (-0.5, 0)
        let (mut state, _) = reset(task, 5);
        state.agent_pos = [0.9, 0.9]; // far away: proximity 0
        state.agent_vel = [0.0, 0.0];
        state.joint = 0.7;
        let o = &task.object;
        let expected = 0.7 - o.stiffness * (0.7 - o.rest);
        step(task, &mut state, [0.0, 0.0, 1.0]).unwrap();
        assert!((state.joint - expected).abs() < 1e-15);
    }

    #[test]
    fn shared_object_dynamics_exact() {
        // open-drawer and close-drawer share the drawer: identical joint-level
        // inputs produce identical next joint values, exactly.
        let fam = mt5();
        let (open_drawer, close_drawer) = (&fam.train[2], &fam.train[3]);
        assert_eq!(open_drawer.object, close_drawer.object);
        for seed in 0..20u64 {
            let mut rng = SeededPrng::new(seed);
            let (mut s1, _) = reset(open_drawer, seed);
            let (mut s2, _) = reset(close_drawer, seed + 1000);
            // align the joint-level inputs
            s2.agent_pos = s1.agent_pos;
            s2.agent_vel = s1.agent_vel;
            s2.joint = s1.joint;
            let a = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
            step(open_drawer, &mut s1, a).unwrap();
            step(close_drawer, &mut s2, a).unwrap();
            assert_eq!(s1.joint, s2.joint);
        }
    }

    #[test]
    fn scripted_oracle_solves_every_task() {
        let fam = mt5();
        for task in fam.train.iter().chain(&fam.held_out) {
            for ep in 0..5 {
                assert!(
                    scripted_episode(task, 1000 + ep),
                    "oracle failed on {} episode {ep}",
                    task.name()
                );
            }
        }
    }

    #[test]
    fn reward_bounded_and_episode_terminates() {
        let fam = mt5();
        let task = &fam.train[4];
        let lo = -(2.0 * 2.0_f64.sqrt() + W_SKILL);
        let mut rng = SeededPrng::new(123);
        let (mut state, _) = reset(task, 77);
        let mut steps = 0;
        loop {
            let a = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
            let r = step(task, &mut state, a).unwrap();
            assert!(r.reward >= lo && r.reward <= 1.0);
            steps += 1;
            if r.done {
                break;
            }
        }
        assert!(steps <= task.horizon);
        assert!(step(task, &mut state, [0.0; 3]).is_err(), "stepping done episode");
    }

    #[test]
    fn observation_dim_constant_across_family() {
        let fam = mt5();
        for task in fam.train.iter().chain(&fam.held_out) {
            let (_, obs) = reset(task, 3);
            assert_eq!(obs.len(), OBS_DIM);
        }
    }
}
