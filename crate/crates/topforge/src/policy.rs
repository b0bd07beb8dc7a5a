//! The centralized multi-agent attention policy.
//!
//! The encoder embeds start depot, regions, and end depot into one token
//! each ((n+2) × λ), then applies N blocks of multi-head self-attention and
//! a linear feed-forward, both with residual connections and normalization.
//! The decoder builds one query row per agent from the mean node embedding
//! plus an embedding of the agent's remaining time and last position, runs
//! masked multi-head attention over the node tokens, and produces per-agent
//! next-node distributions through clipped single-head logits.
//!
//! Token layout everywhere: row 0 is the start depot (never a legal
//! action), rows 1..=n are regions, row n+1 is the end depot.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{
    load_archive, save_archive, ArchiveError, BnStats, Graph, Tensor, TensorError, TensorId,
    MASK_VALUE,
};
use crate::top::Instance;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

/// Which normalization the encoder blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

/// Whether batch normalization uses batch statistics (and reports them for
/// running-average updates) or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Hidden dimension λ.
    pub hidden_dim: usize,
    /// Encoder blocks N.
    pub num_blocks: usize,
    /// Attention heads M.
    pub num_heads: usize,
    /// Logit clip C: pre-softmax action scores lie in [−C, C].
    pub logit_clip: f64,
    pub encoder_norm: NormKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_dim: 128,
            num_blocks: 3,
            num_heads: 8,
            logit_clip: 10.0,
            encoder_norm: NormKind::Batch,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(PolicyError::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(PolicyError::Config("num_blocks must be >= 1".into()));
        }
        if !(self.logit_clip > 0.0) {
            return Err(PolicyError::Config("logit_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// One agent's slice of fleet state as the decoder sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentContext {
    pub t_left: f64,
    pub x_prev: f64,
    pub y_prev: f64,
}

/// Batch statistics observed at one normalization site during a
/// [`RunMode::Train`] encoder pass.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub site: usize,
    pub stats: BnStats,
}

// Attention projections carry no biases: a key bias shifts every logit in
// a softmax row by the same amount and cancels, so it could never train.
fn mha_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.wq"),
        format!("{prefix}.wk"),
        format!("{prefix}.wv"),
        format!("{prefix}.wo"),
    ]
}

/// The trainable tensors for a config, in canonical order: name and shape.
pub fn parameter_specs(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let l = config.hidden_dim;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let lin = |name: &str, d_in: usize, d_out: usize, specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push((format!("{name}.w"), vec![d_in, d_out]));
        specs.push((format!("{name}.b"), vec![1, d_out]));
    };
    lin("input.depot_start", 2, l, &mut specs);
    lin("input.depot_end", 2, l, &mut specs);
    lin("input.region", 3, l, &mut specs);
    lin("input.proj", 3 * l, l, &mut specs);
    for u in 0..config.num_blocks {
        for name in mha_names(&format!("enc.block{u}.mha")) {
            specs.push((name, vec![l, l]));
        }
        for norm in ["norm1", "norm2"] {
            specs.push((format!("enc.block{u}.{norm}.gamma"), vec![1, l]));
            specs.push((format!("enc.block{u}.{norm}.beta"), vec![1, l]));
        }
        lin(&format!("enc.block{u}.ff"), l, l, &mut specs);
    }
    lin("dec.ctx.mean", l, l, &mut specs);
    lin("dec.ctx.agent", 3, l, &mut specs);
    for name in mha_names("dec.mha") {
        specs.push((name, vec![l, l]));
    }
    specs.push(("dec.logit.q.w".into(), vec![l, l]));
    specs.push(("dec.logit.k.w".into(), vec![l, l]));
    specs
}

/// Running-statistic buffer names for a batch-norm config (empty for layer
/// norm), in canonical order.
pub fn buffer_specs(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    if config.encoder_norm == NormKind::Batch {
        for u in 0..config.num_blocks {
            for norm in ["norm1", "norm2"] {
                specs.push((format!("enc.block{u}.{norm}.running_mean"), vec![1, config.hidden_dim]));
                specs.push((format!("enc.block{u}.{norm}.running_var"), vec![1, config.hidden_dim]));
            }
        }
    }
    specs
}

const META_CONFIG: &str = "meta.config";
const BN_MOMENTUM: f64 = 0.9;

/// Graph handles for one bound parameter set. Produced by [`Policy::bind`];
/// individual entries can be overridden (gradient-check plumbing).
pub struct BoundParams {
    ids: IndexMap<String, TensorId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<TensorId, PolicyError> {
        self.ids.get(name).copied().ok_or_else(|| PolicyError::MissingParam(name.to_string()))
    }

    /// Replaces the handle for `name` with a caller-supplied graph node.
    pub fn set(&mut self, name: &str, id: TensorId) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }
}

/// Policy parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Policy {
    config: NetConfig,
    params: IndexMap<String, Tensor>,
    bn_stats: Vec<BnStats>,
}

impl Policy {
    /// Fresh policy with uniform(−1/√d_in, 1/√d_in) weights, unit γ, zero β.
    pub fn init(config: NetConfig, seed: u64) -> Result<Policy, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: IndexMap<String, Tensor> = IndexMap::new();
        for (name, shape) in parameter_specs(&config) {
            let count: usize = shape.iter().product();
            let tensor = if name.ends_with(".gamma") {
                Tensor::from_shape(shape, vec![1.0; count])?
            } else if name.ends_with(".beta") {
                Tensor::from_shape(shape, vec![0.0; count])?
            } else {
                // biases share the fan-in bound of their weight matrix
                let fan_in = if name.ends_with(".b") {
                    params[&format!("{}.w", &name[..name.len() - 2])].shape()[0]
                } else {
                    shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> =
                    (0..count).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
                Tensor::from_shape(shape, data)?
            };
            params.insert(name, tensor);
        }
        let bn_sites = if config.encoder_norm == NormKind::Batch { 2 * config.num_blocks } else { 0 };
        let bn_stats = (0..bn_sites)
            .map(|_| BnStats { mean: vec![0.0; config.hidden_dim], var: vec![1.0; config.hidden_dim] })
            .collect();
        Ok(Policy { config, params, bn_stats })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter(&self, name: &str) -> Result<&Tensor, PolicyError> {
        self.params.get(name).ok_or_else(|| PolicyError::MissingParam(name.to_string()))
    }

    /// Overwrites one parameter's values (shape must match).
    pub fn set_parameter(&mut self, name: &str, tensor: Tensor) -> Result<(), PolicyError> {
        let current = self.params.get_mut(name).ok_or_else(|| PolicyError::MissingParam(name.to_string()))?;
        if current.shape() != tensor.shape() {
            return Err(PolicyError::ParamShape {
                name: name.to_string(),
                expected: current.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *current = tensor;
        Ok(())
    }

    /// Applies `delta` entries (as produced by an optimizer) in place.
    pub fn apply_updates(&mut self, f: impl Fn(&str, &mut Tensor)) {
        for (name, tensor) in self.params.iter_mut() {
            f(name, tensor);
        }
    }

    /// Inserts every parameter into the graph. With `trainable`, leaves
    /// accumulate gradients on backward.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams, PolicyError> {
        let mut ids = IndexMap::new();
        for (name, tensor) in &self.params {
            let id = if trainable {
                g.parameter(tensor.clone())?
            } else {
                g.constant(tensor.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }

    /// Folds observed batch statistics into the running buffers with
    /// momentum 0.9.
    pub fn absorb_bn_obs(&mut self, observations: &[BnObservation]) {
        for obs in observations {
            let running = &mut self.bn_stats[obs.site];
            for (r, &b) in running.mean.iter_mut().zip(&obs.stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, &b) in running.var.iter_mut().zip(&obs.stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    fn multi_head_attention(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        prefix: &str,
        q_input: TensorId,
        kv_input: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, PolicyError> {
        let [wq, wk, wv, wo] = mha_names(prefix);
        let q = g.matmul(q_input, bound.get(&wq)?)?;
        let k = g.matmul(kv_input, bound.get(&wk)?)?;
        let v = g.matmul(kv_input, bound.get(&wv)?)?;
        let head_dim = self.config.hidden_dim / self.config.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = match mask {
                Some(m) => g.masked_fill(scores, m, MASK_VALUE)?,
                None => scores,
            };
            let att = g.softmax(scores)?;
            heads.push(g.matmul(att, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        Ok(g.matmul(cat, bound.get(&wo)?)?)
    }

    /// Pre-encoder token matrix h^input, shape (n+2) × λ.
    pub fn input_embedding(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        instance: &Instance,
    ) -> Result<TensorId, PolicyError> {
        let n = instance.n();
        let s = instance.depot_start();
        let e = instance.depot_end();
        let s_in = g.constant(Tensor::row(vec![s.x, s.y]))?;
        let e_in = g.constant(Tensor::row(vec![e.x, e.y]))?;
        let region_feats: Vec<f64> = instance
            .coords()
            .iter()
            .zip(instance.prizes())
            .flat_map(|(p, &prize)| [p.x, p.y, prize])
            .collect();
        let r_in = g.constant(Tensor::matrix(n, 3, region_feats)?)?;

        let h_s = g.linear(s_in, bound.get("input.depot_start.w")?, bound.get("input.depot_start.b")?)?;
        let h_e = g.linear(e_in, bound.get("input.depot_end.w")?, bound.get("input.depot_end.b")?)?;
        let h_p = g.linear(r_in, bound.get("input.region.w")?, bound.get("input.region.b")?)?;

        let s_rep = g.repeat_rows(h_s, n)?;
        let e_rep = g.repeat_rows(h_e, n)?;
        let cat = g.concat_cols(&[s_rep, h_p, e_rep])?;
        let regions = g.linear(cat, bound.get("input.proj.w")?, bound.get("input.proj.b")?)?;
        Ok(g.concat_rows(&[h_s, regions, h_e])?)
    }

    fn norm(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: TensorId,
        block: usize,
        which: usize,
        mode: RunMode,
        observations: &mut Vec<BnObservation>,
    ) -> Result<TensorId, PolicyError> {
        let gamma = bound.get(&format!("enc.block{block}.norm{}.gamma", which + 1))?;
        let beta = bound.get(&format!("enc.block{block}.norm{}.beta", which + 1))?;
        match self.config.encoder_norm {
            NormKind::Layer => Ok(g.layer_norm(x, gamma, beta)?),
            NormKind::Batch => {
                let site = 2 * block + which;
                match mode {
                    RunMode::Train => {
                        let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
                        observations.push(BnObservation { site, stats });
                        Ok(y)
                    }
                    RunMode::Infer => {
                        Ok(g.batch_norm_infer(x, gamma, beta, &self.bn_stats[site])?)
                    }
                }
            }
        }
    }

    /// Runs input embedding and the N encoding blocks, returning h^node and
    /// whatever batch statistics were observed (empty outside train mode).
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        instance: &Instance,
        mode: RunMode,
    ) -> Result<(TensorId, Vec<BnObservation>), PolicyError> {
        let mut h = self.input_embedding(g, bound, instance)?;
        let mut observations = Vec::new();
        for u in 0..self.config.num_blocks {
            let mha = self.multi_head_attention(g, bound, &format!("enc.block{u}.mha"), h, h, None)?;
            let sum = g.add(h, mha)?;
            h = self.norm(g, bound, sum, u, 0, mode, &mut observations)?;
            let ff = g.linear(h, bound.get(&format!("enc.block{u}.ff.w"))?, bound.get(&format!("enc.block{u}.ff.b"))?)?;
            let sum = g.add(h, ff)?;
            h = self.norm(g, bound, sum, u, 1, mode, &mut observations)?;
        }
        Ok((h, observations))
    }

    /// One query row per agent: projected mean node embedding plus the
    /// agent-state embedding (shared projection weights across agents).
    pub fn context_embedding(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h_node: TensorId,
        agents: &[AgentContext],
    ) -> Result<TensorId, PolicyError> {
        if agents.is_empty() {
            return Err(PolicyError::Config("need at least one agent".into()));
        }
        let n_plus_2 = g.value(h_node).shape()[0];
        let regions = g.slice_rows(h_node, 1, n_plus_2 - 2)?;
        let mean = g.mean_rows(regions)?;
        let ctx = g.linear(mean, bound.get("dec.ctx.mean.w")?, bound.get("dec.ctx.mean.b")?)?;

        let feats: Vec<f64> =
            agents.iter().flat_map(|a| [a.t_left, a.x_prev, a.y_prev]).collect();
        let a_in = g.constant(Tensor::matrix(agents.len(), 3, feats)?)?;
        let a_emb = g.linear(a_in, bound.get("dec.ctx.agent.w")?, bound.get("dec.ctx.agent.b")?)?;

        let ctx_rep = g.repeat_rows(ctx, agents.len())?;
        Ok(g.add(ctx_rep, a_emb)?)
    }

    /// Per-agent action distributions, shape m × (n+2). `mask` is row-major
    /// m × (n+2); true marks a forbidden action. Masked entries come out
    /// exactly 0.0; a fully masked row is an error.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h_node: TensorId,
        query: TensorId,
        mask: &[bool],
    ) -> Result<TensorId, PolicyError> {
        let glimpse = self.multi_head_attention(g, bound, "dec.mha", query, h_node, Some(mask))?;
        let q = g.matmul(glimpse, bound.get("dec.logit.q.w")?)?;
        let k = g.matmul(h_node, bound.get("dec.logit.k.w")?)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.config.hidden_dim as f64).sqrt())?;
        let bounded = g.tanh(scores)?;
        let clipped = g.scale(bounded, self.config.logit_clip)?;
        let masked = g.masked_fill(clipped, mask, MASK_VALUE)?;
        Ok(g.softmax(masked)?)
    }

    /// Parameters, running statistics, and config as checkpoint archive
    /// entries. Callers may add their own entries (optimizer state) before
    /// writing; `load` ignores anything it does not recognize.
    pub fn archive_entries(&self) -> IndexMap<String, Tensor> {
        let mut entries = self.params.clone();
        for (site, stats) in self.bn_stats.iter().enumerate() {
            let (block, which) = (site / 2, site % 2 + 1);
            entries.insert(
                format!("enc.block{block}.norm{which}.running_mean"),
                Tensor::row(stats.mean.clone()),
            );
            entries.insert(
                format!("enc.block{block}.norm{which}.running_var"),
                Tensor::row(stats.var.clone()),
            );
        }
        entries.insert(META_CONFIG.to_string(), self.config_tensor());
        entries
    }

    /// Serializes parameters, running statistics, and config to a
    /// checkpoint archive.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        save_archive(path, &self.archive_entries())?;
        Ok(())
    }

    fn config_tensor(&self) -> Tensor {
        Tensor::row(vec![
            self.config.hidden_dim as f64,
            self.config.num_blocks as f64,
            self.config.num_heads as f64,
            self.config.logit_clip,
            match self.config.encoder_norm {
                NormKind::Batch => 0.0,
                NormKind::Layer => 1.0,
            },
        ])
    }

    fn config_from_tensor(tensor: &Tensor) -> Result<NetConfig, PolicyError> {
        let d = tensor.data();
        if d.len() != 5 {
            return Err(PolicyError::Config(format!(
                "{META_CONFIG} holds {} values, expected 5",
                d.len()
            )));
        }
        let config = NetConfig {
            hidden_dim: d[0] as usize,
            num_blocks: d[1] as usize,
            num_heads: d[2] as usize,
            logit_clip: d[3],
            encoder_norm: if d[4] == 0.0 { NormKind::Batch } else { NormKind::Layer },
        };
        config.validate()?;
        Ok(config)
    }

    /// Loads a checkpoint archive. Every expected parameter and buffer must
    /// be present with the right shape; unrelated entries (optimizer state)
    /// are ignored.
    pub fn load(path: &Path) -> Result<Policy, PolicyError> {
        let entries = load_archive(path)?;
        let meta = entries
            .get(META_CONFIG)
            .ok_or_else(|| PolicyError::MissingParam(META_CONFIG.to_string()))?;
        let config = Self::config_from_tensor(meta)?;

        let mut params = IndexMap::new();
        for (name, shape) in parameter_specs(&config) {
            let tensor = entries
                .get(&name)
                .ok_or_else(|| PolicyError::MissingParam(name.clone()))?;
            if tensor.shape() != shape.as_slice() {
                return Err(PolicyError::ParamShape {
                    name,
                    expected: shape,
                    got: tensor.shape().to_vec(),
                });
            }
            params.insert(name, tensor.clone());
        }
        let mut bn_stats = Vec::new();
        if config.encoder_norm == NormKind::Batch {
            for site in 0..2 * config.num_blocks {
                let (block, which) = (site / 2, site % 2 + 1);
                let mut halves = Vec::with_capacity(2);
                for part in ["running_mean", "running_var"] {
                    let name = format!("enc.block{block}.norm{which}.{part}");
                    let tensor = entries
                        .get(&name)
                        .ok_or_else(|| PolicyError::MissingParam(name.clone()))?;
                    if tensor.data().len() != config.hidden_dim {
                        return Err(PolicyError::ParamShape {
                            name,
                            expected: vec![1, config.hidden_dim],
                            got: tensor.shape().to_vec(),
                        });
                    }
                    halves.push(tensor.data().to_vec());
                }
                let var = halves.pop().expect("two halves");
                let mean = halves.pop().expect("two halves");
                bn_stats.push(BnStats { mean, var });
            }
        }
        Ok(Policy { config, params, bn_stats })
    }
}
