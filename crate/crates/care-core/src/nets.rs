//! Feedforward networks and the tanh-squashed Gaussian policy head.
//!
//! Shapes follow the shipped defaults: three 400-unit hidden layers for
//! actor/critic trunks and encoders, ReLU nonlinearity, weights uniform in
//! [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero. Everything is
//! deterministic given the seed.

use crate::error::{CoreError, Result};
use crate::params::{Leased, ParamSet, PVec};
use crate::tensor::{Graph, Tensor, Var};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Epsilon inside the tanh change-of-variables log term.
pub const SQUASH_EPS: f64 = 1e-6;

/// Layer-dimension description of an MLP: input, hidden widths, output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, seed: u64) -> Self {
        MlpSpec {
            input,
            hidden,
            output,
            seed,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input];
        d.extend_from_slice(&self.hidden);
        d.push(self.output);
        d
    }
}

/// An MLP's parameters: alternating weight/bias arrays in one [`ParamSet`].
/// ReLU on hidden layers, linear output (ReLU on output is the caller's
/// choice via [`Mlp::forward_relu_out`]).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub set: ParamSet,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn init(name: &str, spec: &MlpSpec, lr: f64) -> Self {
        let dims = spec.dims();
        let mut set = ParamSet::default();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            set.push(PVec::uniform_fan_in(
                format!("{name}.w{l}"),
                vec![fan_in, fan_out],
                fan_in,
                spec.seed,
                lr,
            ));
            set.push(PVec::zeros(format!("{name}.b{l}"), vec![fan_out], lr));
        }
        Mlp { set, dims }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn lease(&self, g: &mut Graph, trainable: bool) -> Leased {
        self.set.lease(g, trainable)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let got = *g.value(x).shape().last().unwrap();
        if got != self.dims[0] {
            return Err(CoreError::ShapeMismatch {
                op: "mlp_forward",
                lhs: vec![got],
                rhs: vec![self.dims[0]],
            });
        }
        Ok(())
    }

    /// Forward pass: ReLU on hidden layers, linear final layer.
    pub fn forward(&self, g: &mut Graph, leased: &Leased, x: Var) -> Result<Var> {
        self.forward_inner(g, leased, x, false, None)
    }

    /// Forward pass with ReLU applied to the output layer as well.
    pub fn forward_relu_out(&self, g: &mut Graph, leased: &Leased, x: Var) -> Result<Var> {
        self.forward_inner(g, leased, x, true, None)
    }

    /// Forward pass with per-hidden-layer feature modulation: after each
    /// hidden activation h, compute gamma_l * h + beta_l (row-broadcast).
    pub fn forward_modulated(
        &self,
        g: &mut Graph,
        leased: &Leased,
        x: Var,
        modulation: &[(Var, Var)],
    ) -> Result<Var> {
        self.forward_inner(g, leased, x, false, Some(modulation))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        leased: &Leased,
        x: Var,
        relu_out: bool,
        modulation: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        let n = self.n_layers();
        if let Some(m) = modulation {
            assert_eq!(m.len(), n - 1, "one (gamma, beta) pair per hidden layer");
        }
        let mut h = x;
        for l in 0..n {
            let w = leased.vars[2 * l];
            let b = leased.vars[2 * l + 1];
            h = g.linear(h, w, b)?;
            let is_hidden = l + 1 < n;
            if is_hidden || relu_out {
                h = g.relu(h);
            }
            if is_hidden {
                if let Some(m) = modulation {
                    let (gamma, beta) = m[l];
                    h = g.mul(gamma, h)?;
                    h = g.add(h, beta)?;
                }
            }
        }
        Ok(h)
    }
}

/// Tanh-squashed diagonal Gaussian policy: shared trunk, separate linear
/// mean and log-std heads. With `n_heads > 1`, one (mean, log-std) pair per
/// task over the shared trunk.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub trunk: Mlp,
    pub heads: ParamSet, // [mean_w, mean_b, std_w, std_b] per head
    pub action_dim: usize,
    pub n_heads: usize,
}

pub struct LeasedPolicy {
    pub trunk: Leased,
    pub heads: Leased,
}

impl PolicyHead {
    pub fn init(name: &str, trunk_spec: &MlpSpec, action_dim: usize, n_heads: usize, lr: f64) -> Self {
        let trunk = Mlp::init(&format!("{name}.trunk"), trunk_spec, lr);
        let hdim = trunk_spec.output;
        let mut heads = ParamSet::default();
        for h in 0..n_heads {
            heads.push(PVec::uniform_fan_in(
                format!("{name}.mean{h}.w"),
                vec![hdim, action_dim],
                hdim,
                trunk_spec.seed,
                lr,
            ));
            heads.push(PVec::zeros(format!("{name}.mean{h}.b"), vec![action_dim], lr));
            heads.push(PVec::uniform_fan_in(
                format!("{name}.logstd{h}.w"),
                vec![hdim, action_dim],
                hdim,
                trunk_spec.seed,
                lr,
            ));
            heads.push(PVec::zeros(format!("{name}.logstd{h}.b"), vec![action_dim], lr));
        }
        PolicyHead {
            trunk,
            heads,
            action_dim,
            n_heads,
        }
    }

    pub fn lease(&self, g: &mut Graph, trainable: bool) -> LeasedPolicy {
        LeasedPolicy {
            trunk: self.trunk.lease(g, trainable),
            heads: self.heads.lease(g, trainable),
        }
    }

    /// (mean, clamped log-std) for a batch of states, routing rows to their
    /// task's head when multi-headed.
    pub fn mean_log_std(
        &self,
        g: &mut Graph,
        leased: &LeasedPolicy,
        z_s: Var,
        tasks: &[usize],
    ) -> Result<(Var, Var)> {
        let h = self.trunk.forward_relu_out(g, &leased.trunk, z_s)?;
        let per_head = |g: &mut Graph, which: usize| -> Result<(Var, Var)> {
            let base = 4 * which;
            let mean = g.linear(h, leased.heads.vars[base], leased.heads.vars[base + 1])?;
            let raw = g.linear(h, leased.heads.vars[base + 2], leased.heads.vars[base + 3])?;
            Ok((mean, g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)))
        };
        if self.n_heads == 1 {
            per_head(g, 0)
        } else {
            let mut means = Vec::with_capacity(self.n_heads);
            let mut stds = Vec::with_capacity(self.n_heads);
            for hidx in 0..self.n_heads {
                let (m, s) = per_head(g, hidx)?;
                means.push(m);
                stds.push(s);
            }
            Ok((g.row_select(&means, tasks)?, g.row_select(&stds, tasks)?))
        }
    }

    /// Reparameterized sample with tanh squashing and its log-probability.
    ///
    /// Returns (action in (-1,1)^A of shape (B,A), log_prob of shape (B,1)).
    /// log pi(a|s) = log N(u; mu, sigma) - sum_j log(1 - tanh(u_j)^2 + eps)
    /// with u = mu + sigma * noise.
    pub fn sample(
        &self,
        g: &mut Graph,
        leased: &LeasedPolicy,
        z_s: Var,
        tasks: &[usize],
        noise: &Tensor,
    ) -> Result<(Var, Var)> {
        let (mean, log_std) = self.mean_log_std(g, leased, z_s, tasks)?;
        self.sample_from(g, mean, log_std, noise)
    }

    /// Squash and score given already-computed distribution parameters.
    pub fn sample_from(
        &self,
        g: &mut Graph,
        mean: Var,
        log_std: Var,
        noise: &Tensor,
    ) -> Result<(Var, Var)> {
        let u = g.gaussian_sample(mean, log_std, noise)?;
        let action = g.tanh(u);

        // Gaussian term with u = mu + sigma*eps: sum_j [-0.5 ln(2pi) - logstd_j - 0.5 eps_j^2]
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let (rows, cols) = g.value(mean).rows_cols();
        let mut const_term = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                let e = noise.data()[r * cols + c];
                s += -half_ln_2pi - 0.5 * e * e;
            }
            const_term[r] = s;
        }
        let const_term = g.constant(Tensor::new(vec![rows, 1], const_term).unwrap());
        let neg_log_std = g.scale(log_std, -1.0);
        let sum_neg_log_std = g.sum_rows(neg_log_std);
        let gauss = g.add(const_term, sum_neg_log_std)?;

        // Squash correction: -sum_j log(1 - a_j^2 + eps)
        let a_sq = g.square(action);
        let neg_a_sq = g.scale(a_sq, -1.0);
        let inner = g.add_scalar(neg_a_sq, 1.0 + SQUASH_EPS);
        let log_inner = g.log(inner)?;
        let corr = g.sum_rows(log_inner);
        let neg_corr = g.scale(corr, -1.0);

        let log_prob = g.add(gauss, neg_corr)?;
        Ok((action, log_prob))
    }

    /// Deterministic action (tanh of the mean), used for evaluation.
    pub fn mean_action(
        &self,
        g: &mut Graph,
        leased: &LeasedPolicy,
        z_s: Var,
        tasks: &[usize],
    ) -> Result<Var> {
        let (mean, _) = self.mean_log_std(g, leased, z_s, tasks)?;
        Ok(g.tanh(mean))
    }
}
