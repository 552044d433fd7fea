//! State representation layer: a mixture of k independent encoders fused by
//! context-conditioned soft attention, plus every ablation variant.
//!
//! The full pipeline, per batch of states s with task indices i:
//!
//! 1. z_context_i = C(embed(metadata_i))         (trainable projection)
//! 2. z_enc^j     = E_j(s)                        for j = 1..k
//! 3. logits_j    = z_enc^j . stopgrad(z_context) (context detached here only)
//! 4. alpha       = softmax(logits)
//! 5. z_enc       = postMLP(sum_j alpha_j z_enc^j)
//! 6. z_s         = z_context :: z_enc            (context NOT detached)
//!
//! Gradients therefore reach the context parameters through the concatenated
//! state encoding but never through the attention weights.

use std::collections::BTreeMap;

use crate::context::{ContextEncoder, EmbeddingProvider};
use crate::error::{CoreError, Result};
use crate::nets::{Mlp, MlpSpec};
use crate::params::{Leased, ParamSet, PVec};
use crate::tensor::{Graph, Tensor, Var};

/// Which representation an experiment trains.
#[derive(Clone, Debug, PartialEq)]
pub enum RepresentationVariant {
    /// Full pipeline: k encoders, soft attention over all of them.
    CareSoft { k: usize },
    /// Soft attention truncated to the k_active highest weights, renormalized.
    CareTopK { k: usize, k_active: usize },
    /// Fixed task-to-encoder assignment; uniform weights over a task's row.
    ManualMap { mask: BTreeMap<String, Vec<usize>>, k: usize },
    /// One encoder with metadata context (the k = 1 pipeline).
    SingleEncoder,
    /// Mixture with the context replaced by a trainable per-task embedding.
    MixtureNoMetadata { k: usize },
    /// One encoder concatenated with a task-id encoding; no attention.
    TaskIdEncoder,
    /// One encoder whose hidden layers are feature-modulated by the context.
    Film,
}

impl RepresentationVariant {
    pub fn n_encoders(&self) -> usize {
        match self {
            RepresentationVariant::CareSoft { k } => *k,
            RepresentationVariant::CareTopK { k, .. } => *k,
            RepresentationVariant::ManualMap { k, .. } => *k,
            RepresentationVariant::MixtureNoMetadata { k } => *k,
            RepresentationVariant::SingleEncoder
            | RepresentationVariant::TaskIdEncoder
            | RepresentationVariant::Film => 1,
        }
    }

    pub fn uses_metadata(&self) -> bool {
        !matches!(
            self,
            RepresentationVariant::MixtureNoMetadata { .. } | RepresentationVariant::TaskIdEncoder
        )
    }
}

/// Name and metadata of one task, in family index order (train tasks first).
#[derive(Clone, Debug)]
pub struct TaskMeta {
    pub name: String,
    pub metadata: String,
}

/// Dimensions of the representation stack.
#[derive(Clone, Debug)]
pub struct ReprDims {
    pub obs_dim: usize,
    pub z_enc: usize,
    pub z_context: usize,
    pub enc_hidden: Vec<usize>,
    pub context_hidden: usize,
}

#[derive(Debug)]
enum ContextSource {
    /// Frozen provider embeddings (all tasks) + trainable projection.
    Text {
        embeddings: Tensor, // (n_tasks, D), constant
        encoder: ContextEncoder,
    },
    /// Trainable per-task embedding table, used directly as the context.
    TaskEmbed { table: ParamSet },
    /// Trainable embedding table followed by a two-layer network.
    TaskIdEnc { table: ParamSet, net: Mlp },
}

#[derive(Debug)]
pub struct ReprModel {
    pub variant: RepresentationVariant,
    pub dims: ReprDims,
    pub encoders: Vec<Mlp>,
    pub post: Option<Mlp>,
    context: ContextSource,
    /// Per hidden layer: [gamma_w, gamma_b, beta_w, beta_b].
    film: Option<ParamSet>,
    /// Precomputed uniform attention rows for ManualMap, indexed by task.
    manual_alpha: Option<Vec<Vec<f64>>>,
    pub task_names: Vec<String>,
    pub n_train: usize,
    /// Map out-of-table task indices to the last trained index instead of
    /// erroring (only meaningful for the task-embedding variants).
    pub fallback_nearest: bool,
}

/// Everything a forward pass produces besides the state encoding itself.
pub struct ReprForward {
    pub z_s: Var,
    pub alpha: Option<Var>,
    pub z_encs: Vec<Var>,
    pub z_context: Option<Var>,
}

pub struct LeasedRepr {
    encoders: Vec<Leased>,
    post: Option<Leased>,
    context: Option<Leased>,
    pub context_net: Option<Leased>,
    film: Option<Leased>,
}

impl ReprModel {
    /// Build the representation for a task list. `provider` is required for
    /// metadata-using variants; embeddings for every task (train and held
    /// out) are computed once here and frozen.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        variant: RepresentationVariant,
        dims: ReprDims,
        tasks: &[TaskMeta],
        n_train: usize,
        provider: Option<&EmbeddingProvider>,
        seed: u64,
        lr: f64,
        fallback_nearest: bool,
    ) -> Result<Self> {
        let k = variant.n_encoders();
        if k == 0 {
            return Err(CoreError::Config("need at least one encoder".into()));
        }
        if let RepresentationVariant::CareTopK { k, k_active } = &variant {
            if *k_active == 0 || k_active > k {
                return Err(CoreError::Config(format!(
                    "k_active must be in 1..={k}, got {k_active}"
                )));
            }
        }

        let encoders: Vec<Mlp> = (0..k)
            .map(|j| {
                Mlp::init(
                    &format!("encoder{j}"),
                    &MlpSpec::new(dims.obs_dim, dims.enc_hidden.clone(), dims.z_enc, seed),
                    lr,
                )
            })
            .collect();

        let needs_post = !matches!(
            variant,
            RepresentationVariant::TaskIdEncoder | RepresentationVariant::Film
        );
        let post = needs_post.then(|| {
            Mlp::init(
                "post",
                &MlpSpec::new(dims.z_enc, vec![], dims.z_enc, seed),
                lr,
            )
        });

        let context = match &variant {
            RepresentationVariant::MixtureNoMetadata { .. } => {
                let mut table = ParamSet::default();
                table.push(PVec::uniform_fan_in(
                    "task_embed",
                    vec![n_train, dims.z_context],
                    dims.z_context,
                    seed,
                    lr,
                ));
                ContextSource::TaskEmbed { table }
            }
            RepresentationVariant::TaskIdEncoder => {
                let mut table = ParamSet::default();
                table.push(PVec::uniform_fan_in(
                    "task_embed",
                    vec![n_train, dims.z_context],
                    dims.z_context,
                    seed,
                    lr,
                ));
                let net = Mlp::init(
                    "task_encoder",
                    &MlpSpec::new(
                        dims.z_context,
                        vec![dims.context_hidden],
                        dims.z_context,
                        seed,
                    ),
                    lr,
                );
                ContextSource::TaskIdEnc { table, net }
            }
            _ => {
                let provider = provider.ok_or_else(|| {
                    CoreError::Config("metadata variant needs an embedding provider".into())
                })?;
                let mut rows = Vec::with_capacity(tasks.len() * provider.dim());
                for t in tasks {
                    rows.extend_from_slice(provider.embed(&t.metadata)?.data());
                }
                let embeddings = Tensor::matrix(tasks.len(), provider.dim(), rows)?;
                let encoder = ContextEncoder::init(
                    provider.dim(),
                    dims.context_hidden,
                    dims.z_context,
                    seed,
                    lr,
                );
                ContextSource::Text {
                    embeddings,
                    encoder,
                }
            }
        };

        // Attention takes dot products of encoder outputs with the context.
        let attends = matches!(
            variant,
            RepresentationVariant::CareSoft { .. }
                | RepresentationVariant::CareTopK { .. }
                | RepresentationVariant::SingleEncoder
                | RepresentationVariant::MixtureNoMetadata { .. }
        );
        if attends && dims.z_enc != dims.z_context {
            return Err(CoreError::Config(format!(
                "attention requires z_enc == z_context, got {} and {}",
                dims.z_enc, dims.z_context
            )));
        }

        let film = matches!(variant, RepresentationVariant::Film).then(|| {
            let mut set = ParamSet::default();
            for (l, &h) in dims.enc_hidden.iter().enumerate() {
                // gamma starts at exactly 1 (zero weights, unit bias) and
                // beta at 0, so an untrained film encoder is the plain one.
                set.push(PVec::zeros(format!("film.g{l}.w"), vec![dims.z_context, h], lr));
                let mut gb = PVec::zeros(format!("film.g{l}.b"), vec![h], lr);
                gb.data.iter_mut().for_each(|x| *x = 1.0);
                set.push(gb);
                set.push(PVec::zeros(format!("film.b{l}.w"), vec![dims.z_context, h], lr));
                set.push(PVec::zeros(format!("film.b{l}.b"), vec![h], lr));
            }
            set
        });

        let manual_alpha = match &variant {
            RepresentationVariant::ManualMap { mask, k } => {
                let mut mapped = Vec::with_capacity(tasks.len());
                for t in tasks {
                    let active = mask.get(&t.name).ok_or_else(|| {
                        CoreError::Config(format!(
                            "manual mapping has no row for task {:?}; rows: {:?}",
                            t.name,
                            mask.keys().collect::<Vec<_>>()
                        ))
                    })?;
                    if active.is_empty() {
                        return Err(CoreError::Config(format!(
                            "manual mapping row for {:?} activates no encoder",
                            t.name
                        )));
                    }
                    if let Some(&bad) = active.iter().find(|&&e| e >= *k) {
                        return Err(CoreError::Config(format!(
                            "manual mapping row for {:?} names encoder {bad} but k = {k}",
                            t.name
                        )));
                    }
                    let mut row = vec![0.0; *k];
                    let w = 1.0 / active.len() as f64;
                    for &e in active {
                        row[e] = w;
                    }
                    mapped.push(row);
                }
                Some(mapped)
            }
            _ => None,
        };

        Ok(ReprModel {
            variant,
            dims,
            encoders,
            post,
            context,
            film,
            manual_alpha,
            task_names: tasks.iter().map(|t| t.name.clone()).collect(),
            n_train,
            fallback_nearest,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    /// Dimension of the state encoding fed to the SAC heads.
    pub fn zs_dim(&self) -> usize {
        match self.variant {
            RepresentationVariant::Film => self.dims.z_enc,
            _ => self.dims.z_context + self.dims.z_enc,
        }
    }

    pub fn lease(&self, g: &mut Graph, trainable: bool) -> LeasedRepr {
        LeasedRepr {
            encoders: self.encoders.iter().map(|e| e.lease(g, trainable)).collect(),
            post: self.post.as_ref().map(|p| p.lease(g, trainable)),
            context: match &self.context {
                ContextSource::Text { .. } => None,
                ContextSource::TaskEmbed { table } | ContextSource::TaskIdEnc { table, .. } => {
                    Some(table.lease(g, trainable))
                }
            },
            context_net: match &self.context {
                ContextSource::Text { encoder, .. } => Some(encoder.lease(g, trainable)),
                ContextSource::TaskIdEnc { net, .. } => Some(net.lease(g, trainable)),
                ContextSource::TaskEmbed { .. } => None,
            },
            film: self.film.as_ref().map(|f| f.lease(g, trainable)),
        }
    }

    /// Per-row context vectors (B, C) for a batch of task indices.
    fn context_rows(&self, g: &mut Graph, leased: &LeasedRepr, tasks: &[usize]) -> Result<Var> {
        match &self.context {
            ContextSource::Text { embeddings, encoder } => {
                let emb = g.constant(embeddings.clone());
                let all = encoder.encode(g, leased.context_net.as_ref().unwrap(), emb)?;
                g.index_rows(all, tasks)
            }
            ContextSource::TaskEmbed { .. } => {
                let table = leased.context.as_ref().unwrap().vars[0];
                let idx = self.table_indices(tasks)?;
                g.index_rows(table, &idx)
            }
            ContextSource::TaskIdEnc { net, .. } => {
                let table = leased.context.as_ref().unwrap().vars[0];
                let all = net.forward(g, leased.context_net.as_ref().unwrap(), table)?;
                let idx = self.table_indices(tasks)?;
                g.index_rows(all, &idx)
            }
        }
    }

    fn table_indices(&self, tasks: &[usize]) -> Result<Vec<usize>> {
        tasks
            .iter()
            .map(|&i| {
                if i < self.n_train {
                    Ok(i)
                } else if self.fallback_nearest {
                    Ok(self.n_train - 1)
                } else {
                    Err(CoreError::Eval(format!(
                        "no task embedding exists for unseen task index {i} (trained on {}); \
                         enable the nearest-index fallback to override",
                        self.n_train
                    )))
                }
            })
            .collect()
    }

    /// Full forward pass for a batch of observations.
    pub fn forward(
        &self,
        g: &mut Graph,
        leased: &LeasedRepr,
        states: Var,
        tasks: &[usize],
    ) -> Result<ReprForward> {
        if let RepresentationVariant::Film = self.variant {
            let zc = self.context_rows(g, leased, tasks)?;
            let film_lease = leased.film.as_ref().unwrap();
            let mut mods = Vec::new();
            for l in 0..self.dims.enc_hidden.len() {
                let base = 4 * l;
                let gamma = g.linear(zc, film_lease.vars[base], film_lease.vars[base + 1])?;
                let beta = g.linear(zc, film_lease.vars[base + 2], film_lease.vars[base + 3])?;
                mods.push((gamma, beta));
            }
            let out = self.encoders[0].forward_modulated(g, &leased.encoders[0], states, &mods)?;
            return Ok(ReprForward {
                z_s: out,
                alpha: None,
                z_encs: vec![out],
                z_context: Some(zc),
            });
        }

        let z_encs: Vec<Var> = self
            .encoders
            .iter()
            .zip(&leased.encoders)
            .map(|(e, l)| e.forward(g, l, states))
            .collect::<Result<_>>()?;

        match &self.variant {
            RepresentationVariant::TaskIdEncoder => {
                let zc = self.context_rows(g, leased, tasks)?;
                let z_s = compose_state(g, zc, z_encs[0])?;
                Ok(ReprForward {
                    z_s,
                    alpha: None,
                    z_encs,
                    z_context: Some(zc),
                })
            }
            RepresentationVariant::ManualMap { .. } => {
                let zc = self.context_rows(g, leased, tasks)?;
                let alpha = self.manual_alpha_rows(g, tasks);
                let fused = fuse(
                    g,
                    &z_encs,
                    alpha,
                    self.post.as_ref().unwrap(),
                    leased.post.as_ref().unwrap(),
                )?;
                let z_s = compose_state(g, zc, fused)?;
                Ok(ReprForward {
                    z_s,
                    alpha: Some(alpha),
                    z_encs,
                    z_context: Some(zc),
                })
            }
            RepresentationVariant::CareSoft { .. }
            | RepresentationVariant::SingleEncoder
            | RepresentationVariant::MixtureNoMetadata { .. }
            | RepresentationVariant::CareTopK { .. } => {
                let zc = self.context_rows(g, leased, tasks)?;
                let alpha = match &self.variant {
                    RepresentationVariant::CareTopK { k_active, .. } => {
                        attend_topk(g, &z_encs, zc, *k_active)?
                    }
                    _ => attend(g, &z_encs, zc)?,
                };
                let fused = fuse(
                    g,
                    &z_encs,
                    alpha,
                    self.post.as_ref().unwrap(),
                    leased.post.as_ref().unwrap(),
                )?;
                let z_s = compose_state(g, zc, fused)?;
                Ok(ReprForward {
                    z_s,
                    alpha: Some(alpha),
                    z_encs,
                    z_context: Some(zc),
                })
            }
            RepresentationVariant::Film => unreachable!("handled above"),
        }
    }

    fn manual_alpha_rows(&self, g: &mut Graph, tasks: &[usize]) -> Var {
        let rows = self.manual_alpha.as_ref().unwrap();
        let k = self.encoders.len();
        let mut data = Vec::with_capacity(tasks.len() * k);
        for &t in tasks {
            data.extend_from_slice(&rows[t]);
        }
        g.constant(Tensor::new(vec![tasks.len(), k], data).unwrap())
    }

    /// Numeric per-task context vectors (trained state, no gradients), for
    /// similarity analysis. Task-embedding variants report their table rows.
    pub fn context_vectors(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let leased = self.lease(&mut g, false);
        let n = match &self.context {
            ContextSource::Text { .. } => self.n_tasks(),
            _ => self.n_train,
        };
        let idx: Vec<usize> = (0..n).collect();
        let rows = self.context_rows(&mut g, &leased, &idx)?;
        let t = g.value(rows);
        let c = t.rows_cols().1;
        Ok(idx
            .iter()
            .map(|&i| t.data()[i * c..(i + 1) * c].to_vec())
            .collect())
    }

    /// All parameter sets in checkpoint order.
    pub fn param_sets(&self) -> Vec<&ParamSet> {
        let mut out: Vec<&ParamSet> = self.encoders.iter().map(|e| &e.set).collect();
        if let Some(p) = &self.post {
            out.push(&p.set);
        }
        match &self.context {
            ContextSource::Text { encoder, .. } => out.push(&encoder.net.set),
            ContextSource::TaskEmbed { table } => out.push(table),
            ContextSource::TaskIdEnc { table, net } => {
                out.push(table);
                out.push(&net.set);
            }
        }
        if let Some(f) = &self.film {
            out.push(f);
        }
        out
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut out: Vec<&mut ParamSet> =
            self.encoders.iter_mut().map(|e| &mut e.set).collect();
        if let Some(p) = &mut self.post {
            out.push(&mut p.set);
        }
        match &mut self.context {
            ContextSource::Text { encoder, .. } => out.push(&mut encoder.net.set),
            ContextSource::TaskEmbed { table } => out.push(table),
            ContextSource::TaskIdEnc { table, net } => {
                out.push(table);
                out.push(&mut net.set);
            }
        }
        if let Some(f) = &mut self.film {
            out.push(f);
        }
        out
    }

    /// Apply accumulated gradients to every representation parameter.
    pub fn apply_grads(&mut self, g: &Graph, leased: &LeasedRepr) -> Result<()> {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.set.apply_grads(g, &leased.encoders[i])?;
        }
        if let (Some(p), Some(l)) = (&mut self.post, &leased.post) {
            p.set.apply_grads(g, l)?;
        }
        match &mut self.context {
            ContextSource::Text { encoder, .. } => {
                encoder
                    .net
                    .set
                    .apply_grads(g, leased.context_net.as_ref().unwrap())?;
            }
            ContextSource::TaskEmbed { table } => {
                table.apply_grads(g, leased.context.as_ref().unwrap())?;
            }
            ContextSource::TaskIdEnc { table, net } => {
                table.apply_grads(g, leased.context.as_ref().unwrap())?;
                net.set
                    .apply_grads(g, leased.context_net.as_ref().unwrap())?;
            }
        }
        if let (Some(f), Some(l)) = (&mut self.film, &leased.film) {
            f.apply_grads(g, l)?;
        }
        Ok(())
    }
}

/// Soft attention over encoder outputs: logits are plain dot products with
/// the detached context, normalized by softmax. Gradients reach the encoders
/// through the logits but never the context parameters.
pub fn attend(g: &mut Graph, z_encs: &[Var], z_context: Var) -> Result<Var> {
    let zc_frozen = g.stop_gradient(z_context);
    let mut logits = g.row_dot(z_encs[0], zc_frozen)?;
    for &z in &z_encs[1..] {
        let col = g.row_dot(z, zc_frozen)?;
        logits = g.concat(logits, col)?;
    }
    Ok(g.softmax(logits))
}

/// Hard top-k attention: keep the `k_active` largest soft weights per row
/// (ties to the lower encoder index), zero the rest, renormalize to sum 1.
pub fn attend_topk(g: &mut Graph, z_encs: &[Var], z_context: Var, k_active: usize) -> Result<Var> {
    let m = z_encs.len();
    assert!(k_active >= 1 && k_active <= m);
    let alpha = attend(g, z_encs, z_context)?;
    if k_active == m {
        return Ok(alpha);
    }
    let t = g.value(alpha);
    let (rows, cols) = t.rows_cols();
    let mut mask = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        for &i in top_k_indices(row, k_active).iter() {
            mask[r * cols + i] = 1.0;
        }
    }
    let mask = g.constant(Tensor::new(vec![rows, cols], mask).unwrap());
    let kept = g.mul(alpha, mask)?;
    let denom = g.sum_rows(kept);
    g.div_rows(kept, denom)
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pure renormalization step of top-k attention, checkable against the hand
/// formula: alpha_i * 1_topk(i) / sum_j alpha_j * 1_topk(j).
pub fn renormalize_topk(alpha: &[f64], k_active: usize) -> Vec<f64> {
    let keep = top_k_indices(alpha, k_active);
    let total: f64 = keep.iter().map(|&i| alpha[i]).sum();
    let mut out = vec![0.0; alpha.len()];
    for &i in &keep {
        out[i] = alpha[i] / total;
    }
    out
}

/// Weighted sum of encoder outputs followed by the post-fusion layer.
pub fn fuse(
    g: &mut Graph,
    z_encs: &[Var],
    alpha: Var,
    post: &Mlp,
    post_leased: &Leased,
) -> Result<Var> {
    let mut acc = {
        let a0 = g.slice_col(alpha, 0)?;
        g.scale_rows(a0, z_encs[0])?
    };
    for (j, &z) in z_encs.iter().enumerate().skip(1) {
        let aj = g.slice_col(alpha, j)?;
        let term = g.scale_rows(aj, z)?;
        acc = g.add(acc, term)?;
    }
    post.forward_relu_out(g, post_leased, acc)
}

/// z_s = z_context :: z_enc. The context is live here; only the attention
/// path sees it detached.
pub fn compose_state(g: &mut Graph, z_context: Var, z_enc: Var) -> Result<Var> {
    g.concat(z_context, z_enc)
}
