//! Joint training of all classifiers with SGD plus classical momentum, and a
//! self-describing binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::builder::NetworkGraph;
use crate::config::RANetConfig;
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::scheduler::{collect_traces, stack_batch, Execution};
use crate::tensor::{BnMode, ParamRole, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f32,
    /// Per-classifier loss weights; empty means equal weights of 1.
    pub loss_weights: Vec<f32>,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![15, 23],
            lr_factor: 0.1,
            loss_weights: Vec::new(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for train-mode batch statistics".into(),
            ));
        }
        for w in &self.lr_milestones {
            if *w >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {} is not before the last epoch {}",
                    w,
                    self.epochs - 1
                )));
            }
        }
        if self.lr_milestones.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("decay factor must lie in (0, 1)".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.loss_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter scalar.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn for_store(store: &ParamStore) -> Self {
        Self { velocity: store.iter().map(|p| vec![0.0; p.value.numel()]).collect() }
    }
}

/// Learning rate at `epoch` (0-based): decayed once per passed milestone.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f32 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.learning_rate * cfg.lr_factor.powi(passed as i32)
}

/// One SGD step with classical momentum and decoupled-from-nothing weight
/// decay folded into the gradient: v <- m*v + (g + wd*p); p <- p - lr*v.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for (i, p) in store.iter_mut().enumerate() {
        let v = &mut state.velocity[i];
        let data = p.value.data_mut();
        for j in 0..data.len() {
            let g = p.grad[j] + weight_decay * data[j];
            v[j] = momentum * v[j] + g;
            data[j] -= lr * v[j];
        }
    }
}

/// Sum of weighted per-classifier cross-entropies on an execution's tape.
pub fn cumulative_loss(
    exec: &mut Execution,
    store: &mut ParamStore,
    labels: &[usize],
    weights: &[f32],
    num_classifiers: usize,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for k in 1..=num_classifiers {
        let logits = exec.logits(store, k)?;
        let (ce, _) = exec.tape.softmax_cross_entropy(logits, labels)?;
        let w = weights.get(k - 1).copied().unwrap_or(1.0);
        let term = if (w - 1.0).abs() < f32::EPSILON { ce } else { exec.tape.scale(ce, w) };
        total = Some(match total {
            None => term,
            Some(t) => exec.tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one classifier"))
}

/// One epoch's summary line.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    /// Validation accuracy of each classifier under full forward passes.
    pub val_accuracy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> Vec<f64> {
        self.epochs.last().map(|e| e.val_accuracy.clone()).unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let k = self.epochs.first().map(|e| e.val_accuracy.len()).unwrap_or(0);
        let mut out = String::from("epoch,lr,train_loss");
        for i in 1..=k {
            out.push_str(&format!(",val_acc_{}", i));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}", e.epoch, e.lr, e.train_loss));
            for a in &e.val_accuracy {
                out.push_str(&format!(",{}", a));
            }
            out.push('\n');
        }
        out
    }
}

/// Train all classifiers jointly. Deterministic in the train config seed:
/// shuffling, augmentation, and initialization (done by the caller via
/// `build_graph`) all derive from explicit seeds.
pub fn train(
    graph: &NetworkGraph,
    store: &mut ParamStore,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let k = graph.num_classifiers();
    let mut state = OptimizerState::for_store(store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { epochs: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train_set.samples[i];
                let img = if cfg.augment {
                    let mut arng = ChaCha20Rng::seed_from_u64(rng.gen());
                    augment(&s.image, &mut arng)
                } else {
                    s.image.clone()
                };
                images.push(img);
                labels.push(s.label);
            }
            let batch = stack_batch(&images)?;
            store.zero_grads();
            let mut exec = Execution::new(graph, batch, BnMode::Train)?;
            let loss = cumulative_loss(&mut exec, store, &labels, &cfg.loss_weights, k)?;
            let loss_val = exec.tape.value(loss).scalar_value() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            exec.tape.backward(loss)?;
            exec.tape.accumulate_param_grads(store);
            sgd_momentum_step(store, &mut state, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += loss_val;
            batches += 1;
        }
        let val_accuracy = if val_set.is_empty() {
            vec![0.0; k]
        } else {
            let trace = collect_traces(
                graph,
                store,
                &val_set.images(),
                &val_set.labels(),
                cfg.batch_size,
            )?;
            (1..=k).map(|c| trace.accuracy_at(c)).collect()
        };
        report.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });
    }
    Ok(report)
}

const CKPT_MAGIC: &[u8; 8] = b"RANETCK1";

/// Serialize parameters, batch-norm statistics, and the architecture they
/// belong to. The config travels with the weights so a checkpoint is
/// self-describing; loading checks shape and role agreement.
pub fn save_checkpoint(
    path: &Path,
    config: &RANetConfig,
    store: &ParamStore,
    final_val_accuracy: &[f64],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let cfg_toml = config.to_toml();
    buf.extend_from_slice(&(cfg_toml.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg_toml.as_bytes());

    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for p in store.iter() {
        buf.push(p.role.as_u8());
        for d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(store.num_stats() as u64).to_le_bytes());
    for i in 0..store.num_stats() {
        let s = store.stats(i);
        buf.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
        for &v in s.mean.iter().chain(s.var.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(final_val_accuracy.len() as u64).to_le_bytes());
    for &a in final_val_accuracy {
        buf.extend_from_slice(&a.to_le_bytes());
    }

    // Write atomically: a failed run must not leave a partial checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: RANetConfig,
    pub store: ParamStore,
    pub final_val_accuracy: Vec<f64>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { data: &bytes, pos: 0, path: path.display().to_string() };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let cfg_len = cur.u64()? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len)?)
        .map_err(|_| Error::Format(format!("{}: config block is not UTF-8", path.display())))?;
    let config = RANetConfig::from_toml(cfg_text)?;

    let mut store = ParamStore::new();
    let n_params = cur.u64()? as usize;
    for i in 0..n_params {
        let role = ParamRole::from_u8(cur.take(1)?[0]).ok_or_else(|| {
            Error::Format(format!("{}: parameter {} has unknown role tag", path.display(), i))
        })?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = cur.u64()? as usize;
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f32()?);
        }
        store.add(Tensor::new(shape, data)?, role);
    }
    let n_stats = cur.u64()? as usize;
    for _ in 0..n_stats {
        let c = cur.u64()? as usize;
        let sid = store.add_bn_stats(c);
        let s = store.stats_mut(sid);
        for i in 0..c {
            s.mean[i] = cur.f32()?;
        }
        for i in 0..c {
            s.var[i] = cur.f32()?;
        }
    }
    let n_acc = cur.u64()? as usize;
    let mut final_val_accuracy = Vec::with_capacity(n_acc);
    for _ in 0..n_acc {
        final_val_accuracy.push(cur.f64()?);
    }
    Ok(Checkpoint { config, store, final_val_accuracy })
}

/// Check that loaded parameters structurally match a freshly built graph.
pub fn verify_checkpoint_matches(graph: &NetworkGraph, store: &ParamStore) -> Result<()> {
    if store.len() != graph.params.len() || store.num_stats() != graph.params.num_stats() {
        return Err(Error::Format(format!(
            "checkpoint has {} params / {} stat blocks, graph expects {} / {}",
            store.len(),
            store.num_stats(),
            graph.params.len(),
            graph.params.num_stats()
        )));
    }
    for i in 0..store.len() {
        let (a, b) = (store.get(i), graph.params.get(i));
        if a.role != b.role || a.value.shape() != b.value.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter {} mismatch: {:?} {:?} vs {:?} {:?}",
                i,
                a.role,
                a.value.shape(),
                b.role,
                b.value.shape()
            )));
        }
    }
    Ok(())
}
