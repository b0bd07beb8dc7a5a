//! Reinforce training with a greedy-rollout baseline: per batch, sample
//! episodes with recording, score the same instances with the current
//! policy decoded greedily, and descend on mean((L - b) * log_prob) where
//! L is the negated reward. Adam with global gradient-norm clipping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gen::{generate_item, DatasetItem, GenConfig};
use crate::policy::{NetConfig, Policy, PolicyError};
use crate::sim::{
    rollout, rollout_recorded, RecordedRollout, SelectMode, SimError,
};
use crate::tensor::{load_archive, save_archive, ArchiveError, Graph, Tensor, TensorError, TensorId};

/// Decorrelates episode sampling from instance generation, which shares
/// the same base seed.
const SAMPLE_SALT: u64 = 0x53414d_504c4552;
/// Keeps the validation set disjoint from training streams.
const VALIDATION_SALT: u64 = 0x56414c_49444154;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(
        "non-finite loss ({value}) in epoch {epoch}, batch starting at instance {batch_start}; \
         regenerate with gen seed {seed}, streams {batch_start}..{batch_end}"
    )]
    NonFinite { value: f64, epoch: usize, batch_start: u64, batch_end: u64, seed: u64 },
    #[error("checkpoint sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub net: NetConfig,
    pub gen: GenConfig,
    pub checkpoint_every: usize,
    pub validation_size: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 256,
            instances_per_epoch: 10_000,
            epochs: 100,
            learning_rate: 1e-4,
            net: NetConfig::default(),
            gen: GenConfig::default(),
            checkpoint_every: 10,
            validation_size: 1_000,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0
            || self.instances_per_epoch == 0
            || self.epochs == 0
            || self.checkpoint_every == 0
            || self.validation_size == 0
        {
            return Err(TrainError::Config("counts must be >= 1".into()));
        }
        // zero is allowed so a no-op optimizer stays expressible
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config(format!(
                "gradient clip {} must be > 0",
                self.grad_clip
            )));
        }
        self.net.validate()?;
        self.gen.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Adam with bias correction; state is keyed by parameter name so it can
/// ride along in checkpoint archives.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, policy: &mut Policy, grads: &IndexMap<String, Vec<f64>>) {
        self.t += 1;
        let mut deltas: IndexMap<String, Vec<f64>> = IndexMap::new();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut delta = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                delta[i] = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            deltas.insert(name.clone(), delta);
        }
        policy.apply_updates(|name, tensor| {
            if let Some(delta) = deltas.get(name) {
                for (p, d) in tensor.data_mut().iter_mut().zip(delta) {
                    *p -= d;
                }
            }
        });
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Builds mean((L_sampled - b) * log_prob) over the batch, with
/// L = -reward and b = -baseline_reward. Baselines enter as plain
/// numbers, so no gradient flows through them.
pub fn reinforce_loss(
    g: &mut Graph,
    sampled: &[RecordedRollout],
    baseline_rewards: &[f64],
) -> Result<TensorId, TrainError> {
    if sampled.is_empty() || sampled.len() != baseline_rewards.len() {
        return Err(TrainError::Config(format!(
            "{} sampled rollouts against {} baseline rewards",
            sampled.len(),
            baseline_rewards.len()
        )));
    }
    let inv = 1.0 / sampled.len() as f64;
    let mut acc: Option<TensorId> = None;
    for (rec, &baseline) in sampled.iter().zip(baseline_rewards) {
        let advantage_cost = baseline - rec.rollout.reward;
        let term = g.scale(rec.log_prob, advantage_cost)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(g.scale(acc.expect("non-empty batch"), inv)?)
}

/// Greedy-decoded rewards for a batch with the current parameters, no
/// gradient recording.
pub fn greedy_baseline(policy: &Policy, items: &[DatasetItem]) -> Result<Vec<f64>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    items
        .iter()
        .map(|item| {
            Ok(rollout(policy, &item.instance, item.m, SelectMode::Greedy, &mut rng)?.reward)
        })
        .collect()
}

/// Mean greedy-rollout reward over a fixed dataset.
pub fn validate(policy: &Policy, items: &[DatasetItem]) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Config("validation dataset is empty".into()));
    }
    let rewards = greedy_baseline(policy, items)?;
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_sampled: f64,
    pub mean_greedy: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_SALT);
    rng.set_stream(stream);
    rng
}

/// One pass over `instances_per_epoch` freshly generated instances.
/// Instance streams are derived from the epoch index, so a resumed run
/// sees exactly the data the uninterrupted run would have.
pub fn train_epoch(
    policy: &mut Policy,
    adam: &mut Adam,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let total = config.instances_per_epoch;
    let mut sum_sampled = 0.0;
    let mut sum_greedy = 0.0;
    let mut sum_loss = 0.0;
    let mut sum_norm = 0.0;
    let mut batches = 0usize;

    let mut start = 0usize;
    while start < total {
        let bs = config.batch_size.min(total - start);
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true)?;

        let mut items = Vec::with_capacity(bs);
        let mut recorded = Vec::with_capacity(bs);
        for i in 0..bs {
            let stream = (epoch * total + start + i) as u64;
            let item = generate_item(&config.gen, stream);
            let mut rng = sample_rng(config.gen.seed, stream);
            recorded.push(rollout_recorded(policy, &mut g, &bound, &item.instance, item.m, &mut rng)?);
            items.push(item);
        }
        let baselines = greedy_baseline(policy, &items)?;

        let loss = reinforce_loss(&mut g, &recorded, &baselines)?;
        let loss_value = g.value(loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                value: loss_value,
                epoch,
                batch_start: (epoch * total + start) as u64,
                batch_end: (epoch * total + start + bs) as u64,
                seed: config.gen.seed,
            });
        }
        g.backward(loss)?;

        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        for name in bound.names() {
            let id = bound.get(name)?;
            let grad = g
                .grad(id)
                .map(|d| d.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).data().len()]);
            grads.insert(name.to_string(), grad);
        }
        let norm = clip_gradients(&mut grads, config.grad_clip);
        adam.step(policy, &grads);

        sum_sampled += recorded.iter().map(|r| r.rollout.reward).sum::<f64>();
        sum_greedy += baselines.iter().sum::<f64>();
        sum_loss += loss_value;
        sum_norm += norm;
        batches += 1;
        start += bs;
    }

    Ok(EpochStats {
        epoch,
        mean_sampled: sum_sampled / total as f64,
        mean_greedy: sum_greedy / total as f64,
        loss: sum_loss / batches as f64,
        grad_norm: sum_norm / batches as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epoch: usize,
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the policy, optimizer state, and a JSON sidecar holding the
/// train config and the number of completed epochs.
pub fn save_checkpoint(
    path: &Path,
    policy: &Policy,
    adam: &Adam,
    config: &TrainConfig,
    epochs_done: usize,
) -> Result<(), TrainError> {
    let mut entries = policy.archive_entries();
    for (name, values) in &adam.m {
        let shape = policy.parameter(name)?.shape().to_vec();
        entries.insert(format!("adam.m.{name}"), Tensor::from_shape(shape, values.clone())?);
    }
    for (name, values) in &adam.v {
        let shape = policy.parameter(name)?.shape().to_vec();
        entries.insert(format!("adam.v.{name}"), Tensor::from_shape(shape, values.clone())?);
    }
    entries.insert("adam.t".to_string(), Tensor::row(vec![adam.t as f64]));
    save_archive(path, &entries)?;

    let meta = CheckpointMeta { config: config.clone(), epoch: epochs_done };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| TrainError::Sidecar(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Restores a checkpoint written by `save_checkpoint`: the policy, the
/// optimizer state, the train config, and the completed-epoch count.
pub fn load_checkpoint(path: &Path) -> Result<(Policy, Adam, TrainConfig, usize), TrainError> {
    let policy = Policy::load(path)?;
    let json = fs::read_to_string(sidecar_path(path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| TrainError::Sidecar(e.to_string()))?;
    if meta.config.net != *policy.config() {
        return Err(TrainError::Sidecar(
            "sidecar net config disagrees with the archive".into(),
        ));
    }

    let entries = load_archive(path)?;
    let mut adam = Adam::new(meta.config.learning_rate);
    adam.t = entries
        .get("adam.t")
        .map(|t| t.data()[0] as u64)
        .unwrap_or(0);
    for (name, tensor) in &entries {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let expected = policy.parameter(param)?.shape();
            if tensor.shape() != expected {
                return Err(TrainError::Sidecar(format!("{name} has the wrong shape")));
            }
            adam.m.insert(param.to_string(), tensor.data().to_vec());
        } else if let Some(param) = name.strip_prefix("adam.v.") {
            let expected = policy.parameter(param)?.shape();
            if tensor.shape() != expected {
                return Err(TrainError::Sidecar(format!("{name} has the wrong shape")));
            }
            adam.v.insert(param.to_string(), tensor.data().to_vec());
        }
    }
    Ok((policy, adam, meta.config.clone(), meta.epoch))
}

/// The validation instances for a config: same distribution as training,
/// disjoint seed space.
pub fn validation_items(config: &TrainConfig) -> Vec<DatasetItem> {
    let gen = GenConfig { seed: config.gen.seed ^ VALIDATION_SALT, ..config.gen.clone() };
    (0..config.validation_size).map(|i| generate_item(&gen, i as u64)).collect()
}

/// Appends one stats row, writing the header first on a fresh file.
pub fn append_stats(path: &Path, stats: &EpochStats) -> Result<(), TrainError> {
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "epoch,mean_sampled,mean_greedy,loss,grad_norm,seconds")?;
    }
    writeln!(
        file,
        "{},{},{},{},{},{}",
        stats.epoch, stats.mean_sampled, stats.mean_greedy, stats.loss, stats.grad_norm, stats.seconds
    )?;
    Ok(())
}

/// Runs epochs `start_epoch..config.epochs`, appending stats rows and
/// checkpointing every `checkpoint_every` epochs and at the end. The
/// callback sees each epoch's stats plus the validation mean whenever a
/// checkpoint was written.
pub fn run(
    policy: &mut Policy,
    adam: &mut Adam,
    config: &TrainConfig,
    start_epoch: usize,
    checkpoint: &Path,
    stats_csv: &Path,
    mut progress: impl FnMut(&EpochStats, Option<f64>),
) -> Result<(), TrainError> {
    config.validate()?;
    if start_epoch >= config.epochs {
        return Err(TrainError::Config(format!(
            "start epoch {start_epoch} is past the configured {} epochs",
            config.epochs
        )));
    }
    let validation = validation_items(config);
    for epoch in start_epoch..config.epochs {
        let stats = train_epoch(policy, adam, config, epoch)?;
        append_stats(stats_csv, &stats)?;
        let checkpoint_now =
            (epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs;
        let val = if checkpoint_now {
            let v = validate(policy, &validation)?;
            save_checkpoint(checkpoint, policy, adam, config, epoch + 1)?;
            Some(v)
        } else {
            None
        };
        progress(&stats, val);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::exhaustive_optimal;
    use crate::gen::PrizeScheme;
    use crate::policy::NormKind;
    use crate::sim::replay_log_prob;
    use crate::policy::RunMode;
    use crate::tensor::finite_diff_check;
    use crate::top::total_reward;

    fn tiny_net() -> NetConfig {
        NetConfig {
            hidden_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            logit_clip: 10.0,
            encoder_norm: NormKind::Batch,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            instances_per_epoch: 16,
            epochs: 2,
            learning_rate: 1e-3,
            net: tiny_net(),
            gen: GenConfig {
                n: 4,
                m: 2,
                t_max: 2.0,
                prize_scheme: PrizeScheme::Uniform,
                single_depot: true,
                seed: 11,
            },
            checkpoint_every: 1,
            validation_size: 4,
            grad_clip: 1.0,
        }
    }

    fn param_bits(policy: &Policy) -> Vec<u64> {
        policy
            .parameters()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = tiny_config();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.grad_clip = 0.0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn zero_advantage_batch_leaves_parameters_untouched() {
        let mut policy = Policy::init(tiny_net(), 3).unwrap();
        let config = tiny_config();
        let item = generate_item(&config.gen, 0);
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true).unwrap();
        let mut rng = sample_rng(config.gen.seed, 0);
        let rec =
            rollout_recorded(&mut policy, &mut g, &bound, &item.instance, item.m, &mut rng).unwrap();
        let sampled_reward = rec.rollout.reward;

        let before = param_bits(&policy);
        let loss = reinforce_loss(&mut g, &[rec], &[sampled_reward]).unwrap();
        assert_eq!(g.value(loss).scalar_value(), 0.0);
        g.backward(loss).unwrap();
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        for name in bound.names() {
            let id = bound.get(name).unwrap();
            let grad = g.grad(id).map(|d| d.to_vec()).unwrap_or_default();
            assert!(grad.iter().all(|&v| v == 0.0), "{name} picked up gradient");
            if !grad.is_empty() {
                grads.insert(name.to_string(), grad);
            }
        }
        let mut adam = Adam::new(1e-3);
        adam.step(&mut policy, &grads);
        assert_eq!(param_bits(&policy), before);
    }

    #[test]
    fn zero_learning_rate_epoch_is_a_no_op_on_parameters() {
        let mut config = tiny_config();
        config.learning_rate = 0.0;
        let mut policy = Policy::init(config.net.clone(), 5).unwrap();
        let before = param_bits(&policy);
        let mut adam = Adam::new(config.learning_rate);
        let stats = train_epoch(&mut policy, &mut adam, &config, 0).unwrap();
        assert_eq!(param_bits(&policy), before);
        assert!(stats.grad_norm > 0.0, "gradients still flow, they just do not apply");
    }

    #[test]
    fn reinforce_loss_rejects_misaligned_batches() {
        let mut g = Graph::new();
        assert!(matches!(reinforce_loss(&mut g, &[], &[]), Err(TrainError::Config(_))));
    }

    #[test]
    fn positive_advantage_step_raises_the_episode_log_prob() {
        let config = tiny_config();
        let item = generate_item(&config.gen, 2);
        let mut policy = Policy::init(config.net.clone(), 7).unwrap();

        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true).unwrap();
        let mut rng = sample_rng(config.gen.seed, 2);
        let rec =
            rollout_recorded(&mut policy, &mut g, &bound, &item.instance, item.m, &mut rng).unwrap();
        let actions = rec.actions.clone();
        let before = rec.rollout.log_prob;

        // pretend the sample beat the baseline by 0.5 reward
        let baseline = rec.rollout.reward - 0.5;
        let loss = reinforce_loss(&mut g, &[rec], &[baseline]).unwrap();
        g.backward(loss).unwrap();
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        for name in bound.names() {
            let id = bound.get(name).unwrap();
            if let Some(grad) = g.grad(id) {
                grads.insert(name.to_string(), grad.to_vec());
            }
        }
        clip_gradients(&mut grads, 1.0);
        let mut adam = Adam::new(1e-4);
        adam.step(&mut policy, &grads);

        let mut g2 = Graph::new();
        let bound2 = policy.bind(&mut g2, false).unwrap();
        let after = replay_log_prob(&policy, &mut g2, &bound2, &item.instance, item.m, &actions, RunMode::Train)
            .unwrap()
            .rollout
            .log_prob;
        assert!(
            after > before,
            "log_prob should rise after rewarding these actions: {before} -> {after}"
        );
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        let config = tiny_config();
        let item = generate_item(&config.gen, 4);
        let mut policy = Policy::init(config.net.clone(), 9).unwrap();

        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false).unwrap();
        let mut rng = sample_rng(config.gen.seed, 4);
        let rec =
            rollout_recorded(&mut policy, &mut g, &bound, &item.instance, item.m, &mut rng).unwrap();
        let actions = rec.actions.clone();
        let baseline = rec.rollout.reward + 0.37;

        for name in ["dec.logit.q.w", "enc.block0.mha.wv"] {
            let start = policy.parameter(name).unwrap().clone();
            let check = |step: f64| {
                finite_diff_check(
                    |g, x| {
                        let mut b = policy.bind(g, false).map_err(|_| {
                            TensorError::InvalidArgument { op: "bind", msg: "bind failed".into() }
                        })?;
                        b.set(name, x);
                        let replayed = replay_log_prob(
                            &policy, g, &b, &item.instance, item.m, &actions, RunMode::Train,
                        )
                        .map_err(|e| TensorError::InvalidArgument {
                            op: "replay",
                            msg: e.to_string(),
                        })?;
                        reinforce_loss(g, &[replayed], &[baseline]).map_err(|e| {
                            TensorError::InvalidArgument { op: "loss", msg: e.to_string() }
                        })
                    },
                    &start,
                    step,
                )
                .unwrap()
            };
            // best of two steps: truncation error at one end, rounding at the other
            let err = check(3e-4).min(check(3e-5));
            assert!(err <= 1e-6, "{name}: err = {err}");
        }
    }

    #[test]
    fn greedy_baseline_is_deterministic_and_bounded() {
        let config = tiny_config();
        let policy = Policy::init(config.net.clone(), 13).unwrap();
        let items: Vec<DatasetItem> = (0..6).map(|i| generate_item(&config.gen, i)).collect();
        let a = greedy_baseline(&policy, &items).unwrap();
        let b = greedy_baseline(&policy, &items).unwrap();
        assert_eq!(a, b);
        for (item, &reward) in items.iter().zip(&a) {
            let prize_sum: f64 =
                (1..=item.instance.n()).map(|i| item.instance.node_prize(i)).sum();
            assert!(reward <= prize_sum + 1e-12);
            let optimal = exhaustive_optimal(&item.instance, item.m).unwrap();
            let opt_reward = total_reward(&optimal, &item.instance).unwrap();
            assert!(reward <= opt_reward + 1e-12, "baseline beat the oracle");
        }
    }

    #[test]
    fn validate_rejects_empty_datasets() {
        let policy = Policy::init(tiny_net(), 1).unwrap();
        assert!(matches!(validate(&policy, &[]), Err(TrainError::Config(_))));
    }

    #[test]
    fn checkpoint_resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.topf");
        let config = tiny_config();

        let mut straight = Policy::init(config.net.clone(), 17).unwrap();
        let mut adam_a = Adam::new(config.learning_rate);
        train_epoch(&mut straight, &mut adam_a, &config, 0).unwrap();
        let mid = param_bits(&straight);
        save_checkpoint(&path, &straight, &adam_a, &config, 1).unwrap();
        let second = train_epoch(&mut straight, &mut adam_a, &config, 1).unwrap();

        let (mut resumed, mut adam_b, loaded_config, epoch) = load_checkpoint(&path).unwrap();
        assert_eq!(epoch, 1);
        assert_eq!(loaded_config, config);
        assert_eq!(param_bits(&resumed), mid, "checkpoint must capture parameters exactly");
        let replayed = train_epoch(&mut resumed, &mut adam_b, &loaded_config, epoch).unwrap();

        assert_eq!(replayed.mean_sampled.to_bits(), second.mean_sampled.to_bits());
        assert_eq!(replayed.mean_greedy.to_bits(), second.mean_greedy.to_bits());
        assert_eq!(replayed.loss.to_bits(), second.loss.to_bits());
        assert_eq!(replayed.grad_norm.to_bits(), second.grad_norm.to_bits());
        assert_eq!(param_bits(&resumed), param_bits(&straight));
    }

    #[test]
    fn run_writes_stats_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.topf");
        let csv = dir.path().join("stats.csv");
        let config = tiny_config();
        let mut policy = Policy::init(config.net.clone(), 19).unwrap();
        let mut adam = Adam::new(config.learning_rate);
        let mut seen = Vec::new();
        run(&mut policy, &mut adam, &config, 0, &ckpt, &csv, |stats, val| {
            seen.push((stats.epoch, val.is_some()));
        })
        .unwrap();
        assert_eq!(seen, vec![(0, true), (1, true)]);
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mean_sampled,mean_greedy,loss,grad_norm,seconds"
        );
        assert_eq!(lines.count(), 2);
        assert!(ckpt.exists());
        assert!(sidecar_path(&ckpt).exists());
        let (_, _, _, epoch) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(epoch, 2);
    }

    #[test]
    fn short_training_improves_mean_sampled_reward() {
        let mut config = tiny_config();
        config.instances_per_epoch = 160;
        config.batch_size = 32;
        config.epochs = 6;
        config.learning_rate = 3e-3;
        config.gen.seed = 23;
        let mut policy = Policy::init(config.net.clone(), 21).unwrap();
        let mut adam = Adam::new(config.learning_rate);
        let mut means = Vec::new();
        for epoch in 0..config.epochs {
            means.push(train_epoch(&mut policy, &mut adam, &config, epoch).unwrap().mean_sampled);
        }
        let head = (means[0] + means[1]) / 2.0;
        let tail = (means[config.epochs - 2] + means[config.epochs - 1]) / 2.0;
        assert!(
            tail > head,
            "mean sampled reward should trend up: head {head}, tail {tail}, all {means:?}"
        );
    }
}
