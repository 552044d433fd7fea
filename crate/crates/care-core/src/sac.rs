//! Soft actor-critic over the learned state encoding: value and twin-Q
//! networks, tanh-Gaussian policy, per-task learned temperatures, target
//! value EMA, and the task-tagged replay buffer.
//!
//! One update builds a single graph evaluating
//!
//!   J_V  = E[ 1/2 (V(z_s) - stopgrad(min Q(z_s, a~) - alpha_i log pi(a~|z_s)))^2 ]
//!   J_Q  = sum_i E[ 1/2 (Q_i(z_s, a) - (r + gamma (1-d) Vbar(z_s')))^2 ]
//!   J_pi = E[ alpha_i log pi(a~|z_s) - min Qfrozen(z_s, a~) ]
//!   J_a  = sum_tasks -alpha_i (E_task[log pi] + target_entropy)
//!
//! with a~ freshly sampled from the current policy. Gradient routing: the
//! value target and Q target are constants; the policy loss evaluates the Q
//! networks with frozen weights (live inputs); temperatures are constants
//! everywhere except their own loss. A single backward pass therefore gives
//! every parameter set, including the representation (context and encoders,
//! which sum contributions from J_V, J_Q, and J_pi), exactly the gradient of
//! the losses it should see.

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{CoreError, Result};
use crate::nets::{Mlp, MlpSpec, PolicyHead};
use crate::params::{Leased, ParamSet, PVec};
use crate::repr::{LeasedRepr, ReprModel};
use crate::rng::SeededPrng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    pub next_state: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
    pub task: usize,
}

/// Ring buffer with FIFO eviction and seeded uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    rng: SeededPrng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
            rng: SeededPrng::new(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Transitions oldest first.
    pub fn iter_in_order(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.items.len() < n {
            return Err(CoreError::InsufficientBuffer {
                have: self.items.len(),
                need: n,
            });
        }
        let len = self.items.len() as u64;
        Ok((0..n).map(|_| (self.rng.next_u64() % len) as usize).collect())
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    pub fn set_rng_state(&mut self, s: u64) {
        self.rng.set_state(s);
    }
}

/// Trunk + per-head linear output; the critics and the value function.
/// `n_heads > 1` routes each batch row to its task's head.
#[derive(Clone, Debug)]
pub struct ValueNet {
    pub trunk: Mlp,
    pub heads: ParamSet,
    pub n_heads: usize,
}

impl ValueNet {
    pub fn init(
        name: &str,
        input: usize,
        hidden: &[usize],
        n_heads: usize,
        seed: u64,
        lr: f64,
    ) -> Self {
        assert!(!hidden.is_empty());
        let trunk_spec = MlpSpec::new(
            input,
            hidden[..hidden.len() - 1].to_vec(),
            hidden[hidden.len() - 1],
            seed,
        );
        let trunk = Mlp::init(&format!("{name}.trunk"), &trunk_spec, lr);
        let hdim = trunk_spec.output;
        let mut heads = ParamSet::default();
        for h in 0..n_heads {
            heads.push(PVec::uniform_fan_in(
                format!("{name}.head{h}.w"),
                vec![hdim, 1],
                hdim,
                seed,
                lr,
            ));
            heads.push(PVec::zeros(format!("{name}.head{h}.b"), vec![1], lr));
        }
        ValueNet {
            trunk,
            heads,
            n_heads,
        }
    }

    pub fn lease(&self, g: &mut Graph, trainable: bool) -> (Leased, Leased) {
        (self.trunk.lease(g, trainable), self.heads.lease(g, trainable))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        leased: &(Leased, Leased),
        x: Var,
        tasks: &[usize],
    ) -> Result<Var> {
        let h = self.trunk.forward_relu_out(g, &leased.0, x)?;
        if self.n_heads == 1 {
            g.linear(h, leased.1.vars[0], leased.1.vars[1])
        } else {
            let outs: Vec<Var> = (0..self.n_heads)
                .map(|i| g.linear(h, leased.1.vars[2 * i], leased.1.vars[2 * i + 1]))
                .collect::<Result<_>>()?;
            g.row_select(&outs, tasks)
        }
    }

    /// EMA toward `src`: self = tau * src + (1 - tau) * self.
    pub fn ema_from(&mut self, src: &ValueNet, tau: f64) -> Result<()> {
        let dst_sets = [&mut self.trunk.set, &mut self.heads];
        let src_sets = [&src.trunk.set, &src.heads];
        for (d, s) in dst_sets.into_iter().zip(src_sets) {
            for (dp, sp) in d.items.iter_mut().zip(&s.items) {
                if dp.shape != sp.shape {
                    return Err(CoreError::ShapeMismatch {
                        op: "target_update",
                        lhs: dp.shape.clone(),
                        rhs: sp.shape.clone(),
                    });
                }
                target_update(&mut dp.data, &sp.data, tau)?;
            }
        }
        Ok(())
    }
}

/// Elementwise EMA on raw slices: psi_bar <- tau * psi + (1 - tau) * psi_bar.
pub fn target_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(CoreError::ShapeMismatch {
            op: "target_update",
            lhs: vec![target.len()],
            rhs: vec![online.len()],
        });
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub reward_scale: f64,
    pub target_entropy: f64,
    pub init_temperature: f64,
    pub head_hidden: Vec<usize>,
    pub multi_head: bool,
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CoreError::Config(format!(
                "gamma must be in [0,1), got {}",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(CoreError::Config(format!(
                "tau must be in (0,1], got {}",
                self.tau
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if self.init_temperature <= 0.0 {
            return Err(CoreError::Config("init_temperature must be positive".into()));
        }
        if self.head_hidden.is_empty() {
            return Err(CoreError::Config("head_hidden must not be empty".into()));
        }
        Ok(())
    }
}

/// The full agent: representation plus SAC components.
pub struct Agent {
    pub repr: ReprModel,
    pub policy: PolicyHead,
    pub value: ValueNet,
    pub target_value: ValueNet,
    pub q1: ValueNet,
    pub q2: ValueNet,
    /// Per-task log temperature, each with its own optimizer state.
    pub temperatures: Vec<PVec>,
    pub cfg: SacConfig,
}

impl Agent {
    pub fn new(repr: ReprModel, cfg: SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let zs = repr.zs_dim();
        let n_tasks = repr.n_train;
        let n_heads = if cfg.multi_head { n_tasks } else { 1 };
        let policy = PolicyHead::init(
            "policy",
            &MlpSpec::new(
                zs,
                cfg.head_hidden[..cfg.head_hidden.len() - 1].to_vec(),
                cfg.head_hidden[cfg.head_hidden.len() - 1],
                seed,
            ),
            ACTION_DIM,
            n_heads,
            cfg.lr,
        );
        let value = ValueNet::init("value", zs, &cfg.head_hidden, n_heads, seed, cfg.lr);
        let mut target_value = value.clone();
        for p in target_value
            .trunk
            .set
            .items
            .iter_mut()
            .chain(target_value.heads.items.iter_mut())
        {
            p.name = p.name.replace("value.", "target_value.");
        }
        let q1 = ValueNet::init("q1", zs + ACTION_DIM, &cfg.head_hidden, n_heads, seed, cfg.lr);
        let q2 = ValueNet::init("q2", zs + ACTION_DIM, &cfg.head_hidden, n_heads, seed, cfg.lr);
        let temperatures = (0..n_tasks)
            .map(|i| {
                let mut p = PVec::zeros(format!("log_alpha{i}"), vec![1], cfg.lr);
                p.data[0] = cfg.init_temperature.ln();
                p
            })
            .collect();
        Ok(Agent {
            repr,
            policy,
            value,
            target_value,
            q1,
            q2,
            temperatures,
            cfg,
        })
    }

    pub fn temperature(&self, task: usize) -> f64 {
        self.temperatures[task].data[0].exp()
    }

    /// Sampled action for one observation (training mode).
    pub fn act_sampled(
        &self,
        obs: &[f64; OBS_DIM],
        task: usize,
        noise: [f64; ACTION_DIM],
    ) -> Result<[f64; ACTION_DIM]> {
        let mut g = Graph::new();
        let rl = self.repr.lease(&mut g, false);
        let pl = self.policy.lease(&mut g, false);
        let s = g.constant(Tensor::matrix(1, OBS_DIM, obs.to_vec())?);
        let f = self.repr.forward(&mut g, &rl, s, &[task])?;
        let n = Tensor::matrix(1, ACTION_DIM, noise.to_vec())?;
        let (a, _) = self.policy.sample(&mut g, &pl, f.z_s, &[0], &n)?;
        let d = g.value(a).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Deterministic action (tanh of the policy mean), for evaluation.
    pub fn act_mean(&self, obs: &[f64; OBS_DIM], task: usize) -> Result<[f64; ACTION_DIM]> {
        let mut g = Graph::new();
        let rl = self.repr.lease(&mut g, false);
        let pl = self.policy.lease(&mut g, false);
        let s = g.constant(Tensor::matrix(1, OBS_DIM, obs.to_vec())?);
        let f = self.repr.forward(&mut g, &rl, s, &[task])?;
        let a = self.policy.mean_action(&mut g, &pl, f.z_s, &[0])?;
        let d = g.value(a).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Parameter sets in checkpoint order (representation first).
    pub fn param_sets(&self) -> Vec<&ParamSet> {
        let mut out = self.repr.param_sets();
        out.push(&self.policy.trunk.set);
        out.push(&self.policy.heads);
        out.push(&self.value.trunk.set);
        out.push(&self.value.heads);
        out.push(&self.target_value.trunk.set);
        out.push(&self.target_value.heads);
        out.push(&self.q1.trunk.set);
        out.push(&self.q1.heads);
        out.push(&self.q2.trunk.set);
        out.push(&self.q2.heads);
        out
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut out = self.repr.param_sets_mut();
        out.push(&mut self.policy.trunk.set);
        out.push(&mut self.policy.heads);
        out.push(&mut self.value.trunk.set);
        out.push(&mut self.value.heads);
        out.push(&mut self.target_value.trunk.set);
        out.push(&mut self.target_value.heads);
        out.push(&mut self.q1.trunk.set);
        out.push(&mut self.q1.heads);
        out.push(&mut self.q2.trunk.set);
        out.push(&mut self.q2.heads);
        out
    }
}

/// A sampled batch in matrix form.
pub struct Batch {
    pub states: Tensor,      // (B, OBS_DIM)
    pub actions: Tensor,     // (B, ACTION_DIM)
    pub rewards: Vec<f64>,   // B
    pub next_states: Tensor, // (B, OBS_DIM)
    pub dones: Vec<f64>,     // B, 0 or 1
    pub tasks: Vec<usize>,   // B
    pub noise: Tensor,       // (B, ACTION_DIM)
}

impl Batch {
    pub fn from_buffer(
        buffer: &mut ReplayBuffer,
        batch_size: usize,
        noise_rng: &mut SeededPrng,
    ) -> Result<Batch> {
        let idx = buffer.sample_indices(batch_size)?;
        Batch::from_indices(buffer, &idx, noise_rng)
    }

    pub fn from_indices(
        buffer: &ReplayBuffer,
        idx: &[usize],
        noise_rng: &mut SeededPrng,
    ) -> Result<Batch> {
        if idx.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let b = idx.len();
        let mut states = Vec::with_capacity(b * OBS_DIM);
        let mut actions = Vec::with_capacity(b * ACTION_DIM);
        let mut rewards = Vec::with_capacity(b);
        let mut next_states = Vec::with_capacity(b * OBS_DIM);
        let mut dones = Vec::with_capacity(b);
        let mut tasks = Vec::with_capacity(b);
        for &i in idx {
            let t = buffer.get(i);
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            rewards.push(t.reward);
            next_states.extend_from_slice(&t.next_state);
            dones.push(if t.done { 1.0 } else { 0.0 });
            tasks.push(t.task);
        }
        let noise: Vec<f64> = (0..b * ACTION_DIM).map(|_| noise_rng.normal()).collect();
        Ok(Batch {
            states: Tensor::matrix(b, OBS_DIM, states)?,
            actions: Tensor::matrix(b, ACTION_DIM, actions)?,
            rewards,
            next_states: Tensor::matrix(b, OBS_DIM, next_states)?,
            dones,
            tasks,
            noise: Tensor::matrix(b, ACTION_DIM, noise)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Leases for everything an update touches.
pub struct AgentLeases {
    pub repr: LeasedRepr,
    pub policy: crate::nets::LeasedPolicy,
    pub value: (Leased, Leased),
    pub target_value: (Leased, Leased),
    pub q1: (Leased, Leased),
    pub q2: (Leased, Leased),
    /// Frozen copies of the Q weights for the policy objective.
    pub q1_frozen: (Leased, Leased),
    pub q2_frozen: (Leased, Leased),
    pub temps: Vec<Leased>,
}

/// All loss nodes plus the intermediates tests need.
pub struct LossBundle {
    pub j_v: Var,
    pub j_q: Var,
    pub j_pi: Var,
    pub j_temp: Option<Var>,
    pub total: Var,
    pub z_s: Var,
    pub log_prob: Var,
    pub min_q_new: Var,
    pub v_live: Var,
    pub q1_live: Var,
    pub q2_live: Var,
    pub q_target: Var,
    /// Tasks with no transitions in the batch (temperature update skipped).
    pub skipped_temp_tasks: Vec<usize>,
}

pub fn lease_all(agent: &Agent, g: &mut Graph) -> AgentLeases {
    AgentLeases {
        repr: agent.repr.lease(g, true),
        policy: agent.policy.lease(g, true),
        value: agent.value.lease(g, true),
        target_value: agent.target_value.lease(g, false),
        q1: agent.q1.lease(g, true),
        q2: agent.q2.lease(g, true),
        q1_frozen: agent.q1.lease(g, false),
        q2_frozen: agent.q2.lease(g, false),
        temps: agent
            .temperatures
            .iter()
            .map(|t| {
                let mut set = ParamSet::default();
                set.items.push(t.clone());
                set.lease(g, true)
            })
            .collect(),
    }
}

/// Build every SAC loss on one graph. See the module docs for the gradient
/// routing rules each term obeys.
pub fn build_losses(
    agent: &Agent,
    g: &mut Graph,
    leases: &AgentLeases,
    batch: &Batch,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let b = batch.len();
    let tasks = &batch.tasks;

    // Live representation of s.
    let s = g.constant(batch.states.clone());
    let fwd = agent.repr.forward(g, &leases.repr, s, tasks)?;
    let z_s = fwd.z_s;

    // Representation of s' is fully detached: frozen lease, then the target
    // value network (also frozen).
    let s2 = g.constant(batch.next_states.clone());
    let repr_frozen = agent.repr.lease(g, false);
    let fwd2 = agent.repr.forward(g, &repr_frozen, s2, tasks)?;
    let v2 = agent
        .target_value
        .forward(g, &leases.target_value, fwd2.z_s, tasks)?;

    // Fresh actions from the current policy.
    let (action_new, log_prob) = agent
        .policy
        .sample(g, &leases.policy, z_s, tasks, &batch.noise)?;

    // Per-row temperatures as constants.
    let alpha_rows: Vec<f64> = tasks.iter().map(|&i| agent.temperature(i)).collect();
    let alpha_rows = g.constant(Tensor::matrix(b, 1, alpha_rows)?);

    // min over the twin Qs at (z_s, a~), evaluated with frozen weights so
    // gradients reach only the inputs (policy and representation).
    let q_in_new = g.concat(z_s, action_new)?;
    let q1_new = agent.q1.forward(g, &leases.q1_frozen, q_in_new, tasks)?;
    let q2_new = agent.q2.forward(g, &leases.q2_frozen, q_in_new, tasks)?;
    let min_q_new = g.min(q1_new, q2_new)?;

    // J_V: value toward stopgrad(min Q - alpha log pi).
    let ent = g.mul(alpha_rows, log_prob)?;
    let v_target_live = g.sub(min_q_new, ent)?;
    let v_target = g.stop_gradient(v_target_live);
    let v_live = agent.value.forward(g, &leases.value, z_s, tasks)?;
    let j_v = {
        let e = g.sub(v_live, v_target)?;
        let sq = g.square(e);
        let m = g.mean(sq);
        g.scale(m, 0.5)
    };

    // J_Q: both critics toward r + gamma (1 - d) Vbar(z_s'), a constant.
    let v2_vals = g.value(v2).data().to_vec();
    let q_target_vals: Vec<f64> = (0..b)
        .map(|r| {
            agent.cfg.reward_scale * batch.rewards[r]
                + agent.cfg.gamma * (1.0 - batch.dones[r]) * v2_vals[r]
        })
        .collect();
    let q_target = g.constant(Tensor::matrix(b, 1, q_target_vals)?);
    let a_const = g.constant(batch.actions.clone());
    let q_in = g.concat(z_s, a_const)?;
    let q1_live = agent.q1.forward(g, &leases.q1, q_in, tasks)?;
    let q2_live = agent.q2.forward(g, &leases.q2, q_in, tasks)?;
    let mut j_q = {
        let e = g.sub(q1_live, q_target)?;
        let sq = g.square(e);
        let m = g.mean(sq);
        g.scale(m, 0.5)
    };
    {
        let e = g.sub(q2_live, q_target)?;
        let sq = g.square(e);
        let m = g.mean(sq);
        let half = g.scale(m, 0.5);
        j_q = g.add(j_q, half)?;
    }

    // J_pi: alpha log pi - min Q, reparameterized.
    let j_pi = {
        let ent = g.mul(alpha_rows, log_prob)?;
        let diff = g.sub(ent, min_q_new)?;
        g.mean(diff)
    };

    // Temperature loss per task present in the batch; log pi enters as a
    // plain number (detached).
    let logp_vals = g.value(log_prob).data().to_vec();
    let mut j_temp: Option<Var> = None;
    let mut skipped = Vec::new();
    for i in 0..agent.temperatures.len() {
        let rows: Vec<usize> = (0..b).filter(|&r| tasks[r] == i).collect();
        if rows.is_empty() {
            skipped.push(i);
            continue;
        }
        let m = rows.iter().map(|&r| logp_vals[r]).sum::<f64>() / rows.len() as f64
            + agent.cfg.target_entropy;
        let log_alpha = leases.temps[i].vars[0];
        let alpha = g.exp(log_alpha)?;
        let scaled = g.scale(alpha, -m);
        let term = g.sum(scaled);
        j_temp = Some(match j_temp {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }

    let mut total = g.add(j_v, j_q)?;
    total = g.add(total, j_pi)?;
    if let Some(jt) = j_temp {
        total = g.add(total, jt)?;
    }

    Ok(LossBundle {
        j_v,
        j_q,
        j_pi,
        j_temp,
        total,
        z_s,
        log_prob,
        min_q_new,
        v_live,
        q1_live,
        q2_live,
        q_target,
        skipped_temp_tasks: skipped,
    })
}

/// Scalar losses reported by one update.
#[derive(Clone, Debug, serde::Serialize)]
pub struct UpdateMetrics {
    pub j_v: f64,
    pub j_q: f64,
    pub j_pi: f64,
    pub j_temp: f64,
    pub mean_temperature: f64,
    pub skipped_temp_tasks: usize,
}

/// One full SAC update: losses, one backward pass, then optimizer steps in
/// algorithm order (value, target EMA, critics, policy, temperatures,
/// representation).
pub fn update_sac(
    agent: &mut Agent,
    buffer: &mut ReplayBuffer,
    noise_rng: &mut SeededPrng,
) -> Result<UpdateMetrics> {
    let batch = Batch::from_buffer(buffer, agent.cfg.batch_size, noise_rng)?;
    update_sac_on_batch(agent, &batch)
}

pub fn update_sac_on_batch(agent: &mut Agent, batch: &Batch) -> Result<UpdateMetrics> {
    let mut g = Graph::new();
    let leases = lease_all(agent, &mut g);
    let bundle = build_losses(agent, &mut g, &leases, batch)?;
    g.backward(bundle.total)?;

    let metrics = UpdateMetrics {
        j_v: g.value(bundle.j_v).item(),
        j_q: g.value(bundle.j_q).item(),
        j_pi: g.value(bundle.j_pi).item(),
        j_temp: bundle.j_temp.map_or(0.0, |v| g.value(v).item()),
        mean_temperature: (0..agent.temperatures.len())
            .map(|i| agent.temperature(i))
            .sum::<f64>()
            / agent.temperatures.len().max(1) as f64,
        skipped_temp_tasks: bundle.skipped_temp_tasks.len(),
    };

    // Value step, then the target EMA tracks the fresh value parameters.
    agent.value.trunk.set.apply_grads(&g, &leases.value.0)?;
    agent.value.heads.apply_grads(&g, &leases.value.1)?;
    let tau = agent.cfg.tau;
    let value_snapshot = agent.value.clone();
    agent.target_value.ema_from(&value_snapshot, tau)?;

    agent.q1.trunk.set.apply_grads(&g, &leases.q1.0)?;
    agent.q1.heads.apply_grads(&g, &leases.q1.1)?;
    agent.q2.trunk.set.apply_grads(&g, &leases.q2.0)?;
    agent.q2.heads.apply_grads(&g, &leases.q2.1)?;

    agent.policy.trunk.set.apply_grads(&g, &leases.policy.trunk)?;
    agent.policy.heads.apply_grads(&g, &leases.policy.heads)?;

    for (i, temp) in agent.temperatures.iter_mut().enumerate() {
        if bundle.skipped_temp_tasks.contains(&i) {
            continue;
        }
        if let Some(grad) = g.grad(leases.temps[i].vars[0]) {
            crate::tensor::adam::adam_step(&mut temp.data, grad, &mut temp.adam)?;
        }
    }

    agent.repr.apply_grads(&g, &leases.repr)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::EmbeddingProvider;
    use crate::repr::{ReprDims, RepresentationVariant, TaskMeta};

    fn tiny_repr(variant: RepresentationVariant) -> ReprModel {
        let provider = EmbeddingProvider::hashed(16, 42);
        let tasks: Vec<TaskMeta> = ["open the drawer", "close the drawer", "push the puck"]
            .iter()
            .map(|m| TaskMeta {
                name: m.replace(" the ", "-"),
                metadata: m.to_string(),
            })
            .collect();
        ReprModel::init(
            variant,
            ReprDims {
                obs_dim: OBS_DIM,
                z_enc: 6,
                z_context: 6,
                enc_hidden: vec![8],
                context_hidden: 8,
            },
            &tasks,
            3,
            Some(&provider),
            5,
            1e-3,
            false,
        )
        .unwrap()
    }

    fn tiny_cfg() -> SacConfig {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-3,
            batch_size: 8,
            reward_scale: 1.0,
            target_entropy: -(ACTION_DIM as f64),
            init_temperature: 0.1,
            head_hidden: vec![8, 8],
            multi_head: false,
        }
    }

    fn tiny_agent() -> Agent {
        Agent::new(
            tiny_repr(RepresentationVariant::CareSoft { k: 2 }),
            tiny_cfg(),
            11,
        )
        .unwrap()
    }

    fn filled_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(256, seed);
        let mut rng = SeededPrng::new(seed ^ 0xabc);
        for i in 0..n {
            let mut state = [0.0; OBS_DIM];
            let mut next_state = [0.0; OBS_DIM];
            for j in 0..OBS_DIM {
                state[j] = rng.uniform_in(-1.0, 1.0);
                next_state[j] = rng.uniform_in(-1.0, 1.0);
            }
            buf.push(Transition {
                state,
                action: [
                    rng.uniform_in(-1.0, 1.0),
                    rng.uniform_in(-1.0, 1.0),
                    rng.uniform_in(-1.0, 1.0),
                ],
                next_state,
                reward: rng.uniform_in(-1.0, 1.0),
                done: i % 7 == 0,
                task: i % 3,
            });
        }
        buf
    }

    #[test]
    fn buffer_fifo_and_bit_exact_roundtrip() {
        let mut buf = ReplayBuffer::new(10, 1);
        let make = |i: usize| Transition {
            state: [i as f64; OBS_DIM],
            action: [i as f64; ACTION_DIM],
            next_state: [i as f64 + 0.5; OBS_DIM],
            reward: 0.1 * i as f64,
            done: false,
            task: i % 2,
        };
        for i in 0..15 {
            buf.push(make(i));
        }
        assert_eq!(buf.len(), 10);
        let got: Vec<f64> = buf.iter_in_order().map(|t| t.state[0]).collect();
        let want: Vec<f64> = (5..15).map(|i| i as f64).collect();
        assert_eq!(got, want, "first 5 evicted, order preserved");
        for (t, i) in buf.iter_in_order().zip(5..15) {
            assert_eq!(t, &make(i), "stored transitions round-trip bit-exact");
        }
    }

    #[test]
    fn buffer_sampling_is_seeded() {
        let mut a = filled_buffer(50, 3);
        let mut b = filled_buffer(50, 3);
        assert_eq!(a.sample_indices(16).unwrap(), b.sample_indices(16).unwrap());
        assert!(a.sample_indices(100).is_err());
    }

    #[test]
    fn target_update_cases() {
        let mut t = vec![0.0, 1.0];
        target_update(&mut t, &[1.0, 3.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, 3.0], "tau = 1 copies");
        let mut t = vec![0.5, 0.25];
        target_update(&mut t, &[9.0, 9.0], 0.0).unwrap();
        assert_eq!(t, vec![0.5, 0.25], "tau = 0 freezes");
        let mut t = vec![0.0];
        target_update(&mut t, &[1.0], 0.005).unwrap();
        assert!((t[0] - 0.005).abs() < 1e-15);
        assert!(target_update(&mut t, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn q_target_terminal_and_gamma_zero() {
        let mut agent = tiny_agent();
        let buf = filled_buffer(32, 7);
        let idx: Vec<usize> = (0..8).collect();
        let mut rng = SeededPrng::new(1);
        // terminal with r = 0 -> target exactly 0
        {
            let mut zeroed = ReplayBuffer::new(64, 9);
            for i in 0..32 {
                let mut t = buf.get(i).clone();
                t.reward = 0.0;
                t.done = true;
                zeroed.push(t);
            }
            let batch = Batch::from_indices(&zeroed, &idx, &mut rng).unwrap();
            let mut g = Graph::new();
            let leases = lease_all(&agent, &mut g);
            let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
            assert!(g.value(bundle.q_target).data().iter().all(|&x| x == 0.0));
        }
        // gamma = 0 -> target = r exactly
        agent.cfg.gamma = 0.0;
        let batch = Batch::from_indices(&buf, &idx, &mut rng).unwrap();
        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
        for (t, r) in g.value(bundle.q_target).data().iter().zip(&batch.rewards) {
            assert_eq!(t, r);
        }
    }

    #[test]
    fn value_loss_with_zero_q_and_zero_temperature() {
        // min Q == 0 and alpha ~ 0 make the value target 0, so
        // J_V = mean 1/2 V^2.
        let mut agent = tiny_agent();
        for net in [&mut agent.q1, &mut agent.q2] {
            for p in net
                .trunk
                .set
                .items
                .iter_mut()
                .chain(net.heads.items.iter_mut())
            {
                p.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for t in &mut agent.temperatures {
            t.data[0] = -700.0; // exp underflows to exactly 0
        }
        let mut buf = filled_buffer(32, 5);
        let mut rng = SeededPrng::new(2);
        let batch = Batch::from_buffer(&mut buf, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
        let v = g.value(bundle.v_live).data();
        let want: f64 = v.iter().map(|x| 0.5 * x * x).sum::<f64>() / v.len() as f64;
        assert!((g.value(bundle.j_v).item() - want).abs() < 1e-12);
        // and with alpha = 0 and Q = 0 the policy loss is exactly 0
        assert_eq!(g.value(bundle.j_pi).item(), 0.0);
        g.backward(bundle.j_pi).unwrap();
        for v in leases
            .policy
            .trunk
            .vars
            .iter()
            .chain(leases.policy.heads.vars.iter())
        {
            assert!(
                g.grad(*v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)),
                "degenerate objective has zero policy gradient"
            );
        }
    }

    #[test]
    fn losses_match_plain_loop_oracle() {
        // Re-evaluate every loss from the recorded intermediates with plain
        // loops; the graph scalars must match to 1e-12.
        let agent = tiny_agent();
        let mut buf = filled_buffer(48, 13);
        let mut rng = SeededPrng::new(3);
        let batch = Batch::from_buffer(&mut buf, 12, &mut rng).unwrap();
        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();

        let b = batch.len();
        let v = g.value(bundle.v_live).data();
        let minq = g.value(bundle.min_q_new).data();
        let logp = g.value(bundle.log_prob).data();
        let q1 = g.value(bundle.q1_live).data();
        let q2 = g.value(bundle.q2_live).data();
        let qt = g.value(bundle.q_target).data();

        let mut jv = 0.0;
        let mut jq = 0.0;
        let mut jpi = 0.0;
        for r in 0..b {
            let alpha = agent.temperature(batch.tasks[r]);
            let vt = minq[r] - alpha * logp[r];
            jv += 0.5 * (v[r] - vt).powi(2);
            jq += 0.5 * (q1[r] - qt[r]).powi(2) + 0.5 * (q2[r] - qt[r]).powi(2);
            jpi += alpha * logp[r] - minq[r];
        }
        jv /= b as f64;
        jq /= b as f64;
        jpi /= b as f64;
        assert!((g.value(bundle.j_v).item() - jv).abs() < 1e-12);
        assert!((g.value(bundle.j_q).item() - jq).abs() < 1e-12);
        assert!((g.value(bundle.j_pi).item() - jpi).abs() < 1e-12);
    }

    #[test]
    fn gradient_routing_between_losses() {
        // J_Q must not touch the policy; J_pi must not touch the critics;
        // the target value network is never a gradient leaf.
        let agent = tiny_agent();
        let mut buf = filled_buffer(32, 17);
        let mut rng = SeededPrng::new(4);
        let batch = Batch::from_buffer(&mut buf, 8, &mut rng).unwrap();

        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
        g.backward(bundle.j_q).unwrap();
        for v in leases
            .policy
            .trunk
            .vars
            .iter()
            .chain(leases.policy.heads.vars.iter())
        {
            assert!(
                g.grad(*v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)),
                "Q loss must leave the policy untouched"
            );
        }
        for v in leases
            .target_value
            .0
            .vars
            .iter()
            .chain(leases.target_value.1.vars.iter())
        {
            assert!(!g.requires_grad(*v));
            assert!(g.grad(*v).is_none(), "target network is never a leaf");
        }

        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
        g.backward(bundle.j_pi).unwrap();
        for (l0, l1) in [&leases.q1, &leases.q2] {
            for v in l0.vars.iter().chain(l1.vars.iter()) {
                assert!(
                    g.grad(*v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)),
                    "policy loss must leave the critics untouched"
                );
            }
        }
        let any = leases
            .policy
            .trunk
            .vars
            .iter()
            .chain(leases.policy.heads.vars.iter())
            .any(|&v| g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0)));
        assert!(any, "the policy itself does receive gradient from its loss");
    }

    #[test]
    fn doubling_temperature_adds_mean_logp_times_alpha() {
        let mut agent = tiny_agent();
        let mut buf = filled_buffer(32, 19);
        let mut rng = SeededPrng::new(5);
        let batch = Batch::from_buffer(&mut buf, 8, &mut rng).unwrap();

        let eval = |agent: &Agent| {
            let mut g = Graph::new();
            let leases = lease_all(agent, &mut g);
            let bundle = build_losses(agent, &mut g, &leases, &batch).unwrap();
            (
                g.value(bundle.j_pi).item(),
                g.value(bundle.log_prob).data().to_vec(),
            )
        };
        let (j1, logp) = eval(&agent);
        let alpha0 = agent.temperature(0);
        for t in &mut agent.temperatures {
            t.data[0] += 2.0_f64.ln();
        }
        let (j2, logp2) = eval(&agent);
        assert_eq!(logp, logp2, "same batch and noise give the same samples");
        let mean_logp = logp.iter().sum::<f64>() / logp.len() as f64;
        assert!((j2 - j1 - alpha0 * mean_logp).abs() < 1e-9);
    }

    #[test]
    fn temperature_gradient_sign_and_skip() {
        let agent = tiny_agent();
        let buf = filled_buffer(32, 23);
        let mut rng = SeededPrng::new(6);
        // restrict the batch to task 0 only
        let idx: Vec<usize> = (0..32).filter(|i| buf.get(*i).task == 0).take(8).collect();
        let batch = Batch::from_indices(&buf, &idx, &mut rng).unwrap();
        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let bundle = build_losses(&agent, &mut g, &leases, &batch).unwrap();
        assert_eq!(bundle.skipped_temp_tasks, vec![1, 2], "absent tasks skipped");
        g.backward(bundle.total).unwrap();
        let logp = g.value(bundle.log_prob).data();
        let m = logp.iter().sum::<f64>() / logp.len() as f64 + agent.cfg.target_entropy;
        let grad = g.grad(leases.temps[0].vars[0]).unwrap()[0];
        let want = -agent.temperature(0) * m;
        assert!((grad - want).abs() < 1e-10, "{grad} vs {want}");
        if m < 0.0 {
            assert!(grad > 0.0, "entropy above target pushes temperature down");
        } else {
            assert!(grad <= 0.0);
        }
        assert!(g.grad(leases.temps[1].vars[0]).is_none());
    }

    #[test]
    fn zero_lr_update_reports_losses_but_freezes_params() {
        let mut agent = tiny_agent();
        for set in agent.param_sets_mut() {
            for p in &mut set.items {
                p.adam.lr = 0.0;
            }
        }
        for t in &mut agent.temperatures {
            t.adam.lr = 0.0;
        }
        agent.cfg.tau = 0.005; // EMA still runs but value params are frozen
        let before: Vec<Vec<f64>> = agent
            .param_sets()
            .iter()
            .flat_map(|s| s.items.iter().map(|p| p.data.clone()))
            .collect();
        let mut buf = filled_buffer(64, 29);
        let mut rng = SeededPrng::new(7);
        let m = update_sac(&mut agent, &mut buf, &mut rng).unwrap();
        assert!(m.j_v.is_finite() && m.j_q.is_finite() && m.j_pi.is_finite());
        let after: Vec<Vec<f64>> = agent
            .param_sets()
            .iter()
            .flat_map(|s| s.items.iter().map(|p| p.data.clone()))
            .collect();
        // with frozen value params the EMA moves the target toward identical
        // values, so everything stays put
        assert_eq!(before, after);
    }

    #[test]
    fn tau_one_copies_target_after_one_update() {
        let mut agent = tiny_agent();
        agent.cfg.tau = 1.0;
        let mut buf = filled_buffer(64, 31);
        let mut rng = SeededPrng::new(8);
        update_sac(&mut agent, &mut buf, &mut rng).unwrap();
        for (t, v) in agent
            .target_value
            .trunk
            .set
            .items
            .iter()
            .chain(agent.target_value.heads.items.iter())
            .zip(
                agent
                    .value
                    .trunk
                    .set
                    .items
                    .iter()
                    .chain(agent.value.heads.items.iter()),
            )
        {
            assert_eq!(t.data, v.data);
        }
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let run = || {
            let mut agent = tiny_agent();
            let mut buf = filled_buffer(64, 37);
            let mut rng = SeededPrng::new(9);
            for _ in 0..20 {
                update_sac(&mut agent, &mut buf, &mut rng).unwrap();
            }
            agent
                .param_sets()
                .iter()
                .flat_map(|s| s.items.iter().flat_map(|p| p.data.clone()))
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn insufficient_buffer_is_an_error() {
        let mut agent = tiny_agent();
        let mut buf = filled_buffer(4, 41);
        let mut rng = SeededPrng::new(10);
        assert!(matches!(
            update_sac(&mut agent, &mut buf, &mut rng),
            Err(CoreError::InsufficientBuffer { .. })
        ));
    }

    #[test]
    fn multi_head_routes_rows_per_task() {
        let repr = tiny_repr(RepresentationVariant::CareSoft { k: 2 });
        let mut cfg = tiny_cfg();
        cfg.multi_head = true;
        let agent = Agent::new(repr, cfg, 13).unwrap();
        assert_eq!(agent.policy.n_heads, 3);
        let mut g = Graph::new();
        let leases = lease_all(&agent, &mut g);
        let zs_dim = agent.repr.zs_dim();
        let zs = g.constant(Tensor::matrix(2, zs_dim, vec![0.3; 2 * zs_dim]).unwrap());
        let v = agent
            .value
            .forward(&mut g, &leases.value, zs, &[0, 1])
            .unwrap();
        let d = g.value(v).data();
        assert_ne!(d[0], d[1], "different task heads score the same input differently");
    }
}
