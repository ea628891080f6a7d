//! Supervised pairs, the training loop, LR range test, pretraining and
//! finetuning, and model checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use naer_tensor::nn::{class_weights, should_stop, weighted_cross_entropy, Adam, Goal, ModelSpec, Network, WeightMode};
use naer_tensor::{no_grad, Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::error::{invalid, CoreError, Result};
use crate::gridio::{write_gsk1, Gsk1, GridStack};
use crate::labeler::RegimeSeries;
use crate::metrics::argmax;
use crate::seeds;
use crate::splitter::{Partition, SplitPlan};

pub const MAX_LEAD: i64 = 15;

/// Input/target pairs: the field on `init[i]` (row `input[i]` of the stack)
/// and the regime on `init[i] + lead`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervised {
    pub lead: i64,
    pub input: Vec<usize>,
    pub init: Vec<i64>,
    pub target: Vec<usize>,
    pub dropped: usize,
}

impl Supervised {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Pair indices falling in train, validation and test. A pair whose
    /// initial and valid dates lie in different partitions is left out.
    pub fn partition(&self, plan: &SplitPlan) -> [Vec<usize>; 3] {
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (i, &d) in self.init.iter().enumerate() {
            let p = plan.partition_of(d);
            if p.is_none() || p != plan.partition_of(d + self.lead) {
                continue;
            }
            let slot = match p {
                Some(Partition::Train) => 0,
                Some(Partition::Validation) => 1,
                _ => 2,
            };
            out[slot].push(i);
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Supervised {
        Supervised {
            lead: self.lead,
            input: idx.iter().map(|&i| self.input[i]).collect(),
            init: idx.iter().map(|&i| self.init[i]).collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            dropped: 0,
        }
    }
}

/// Pairs every winter day of `anoms` with the label `lead` days later.
/// Pairs leaving the winter window or the labeled record, or straddling
/// `test_range`, are dropped and counted.
pub fn make_supervised(anoms: &GridStack, labels: &RegimeSeries, lead: i64, test_range: Option<(i64, i64)>) -> Result<Supervised> {
    if !(0..=MAX_LEAD).contains(&lead) {
        return invalid(format!("lead {lead} outside 0..={MAX_LEAD}"));
    }
    let mut out = Supervised {
        lead,
        ..Default::default()
    };
    let in_test = |d: i64| test_range.is_some_and(|(a, b)| (a..=b).contains(&d));
    for (t, &d) in anoms.dates.iter().enumerate() {
        if !calendar::is_winter(d) {
            continue;
        }
        let v = d + lead;
        match labels.label_on(v) {
            Some(y) if calendar::is_winter(v) && in_test(d) == in_test(v) => {
                out.input.push(t);
                out.init.push(d);
                out.target.push(y);
            }
            _ => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::info!("lead {lead}: {} pairs, {} dropped", out.len(), out.dropped);
    }
    Ok(out)
}

/// Per-channel standardization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits on the stack rows `rows`.
    pub fn fit(stack: &GridStack, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return invalid("cannot fit normalization on zero samples");
        }
        let c = stack.variables.len();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for &t in rows {
            for (v, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &x in stack.field(t, v) {
                    *s += x as f64;
                    *q += x as f64 * x as f64;
                }
            }
        }
        let n = (rows.len() * stack.grid.points()) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply_into<T: Element>(&self, day: &[f32], out: &mut Vec<T>) {
        let p = day.len() / self.mean.len();
        for (v, field) in day.chunks(p).enumerate() {
            let (m, s) = (self.mean[v], self.std[v]);
            out.extend(field.iter().map(|&x| T::cast((x as f64 - m) / s)));
        }
    }
}

/// Normalized batch `[rows.len(), C, H, W]`.
pub fn batch_tensor<T: Element>(stack: &GridStack, rows: &[usize], norm: &Normalization) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * stack.day_size());
    for &t in rows {
        norm.apply_into(stack.day(t), &mut data);
    }
    let shape = [rows.len(), stack.variables.len(), stack.grid.ny(), stack.grid.nx()];
    Ok(Tensor::from_vec(data, &shape)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValAccuracy,
    ValLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrRangeConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
}

impl Default for LrRangeConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-5,
            lr_max: 1.0,
            steps: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lead: i64,
    pub batch_size: usize,
    /// `None` runs the LR range test first.
    pub lr: Option<f64>,
    pub lr_range: LrRangeConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub model: ModelSpec,
    /// Where to write the network state if the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lead: 5,
            batch_size: 32,
            lr: Some(1e-3),
            lr_range: LrRangeConfig::default(),
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-4,
            monitor: Monitor::ValAccuracy,
            weight_mode: WeightMode::Inverse,
            seed: 0,
            model: ModelSpec::default(),
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LEAD).contains(&self.lead) {
            return invalid(format!("lead_time must be in 1..={MAX_LEAD}, got {}", self.lead));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("lr must be positive, got {lr}"));
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Scratch,
    Pretrained,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub lead: i64,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub lr: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    /// Provenance of the checkpoint this one was finetuned from.
    pub parent: Option<Box<Provenance>>,
}

/// A trained network with everything needed to apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub variables: Vec<String>,
    pub norm: Normalization,
    pub arrays: Vec<naer_tensor::nn::NamedArray>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    spec: ModelSpec,
    variables: Vec<String>,
    norm: Normalization,
    provenance: Provenance,
}

const CHECKPOINT_KIND: &str = "model_checkpoint";

impl ModelCheckpoint {
    pub fn network<T: Element>(&self) -> Result<Network<T>> {
        Ok(Network::from_arrays(self.spec.clone(), &self.arrays)?)
    }

    pub fn to_gsk1(&self) -> Result<Gsk1> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            spec: self.spec.clone(),
            variables: self.variables.clone(),
            norm: self.norm.clone(),
            provenance: self.provenance.clone(),
        };
        Ok(Gsk1::arrays_only(serde_json::to_value(meta)?, self.arrays.clone()))
    }

    pub fn from_gsk1(file: &Gsk1) -> Result<Self> {
        let meta = file
            .meta
            .clone()
            .ok_or_else(|| CoreError::Format("checkpoint has no metadata block".into()))?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(CoreError::Format(format!("expected a model checkpoint, found {:?}", meta.kind)));
        }
        let ckpt = Self {
            spec: meta.spec,
            variables: meta.variables,
            norm: meta.norm,
            arrays: file.arrays.clone(),
            provenance: meta.provenance,
        };
        ckpt.network::<f32>()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_gsk1(path, &self.to_gsk1()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_gsk1(&crate::gridio::read_gsk1(path)?)
    }

    fn check_stack(&self, stack: &GridStack) -> Result<()> {
        if stack.variables != self.variables || stack.grid.ny() != self.spec.height || stack.grid.nx() != self.spec.width {
            return Err(CoreError::DimensionMismatch(format!(
                "checkpoint expects {:?} on {}x{}, data has {:?} on {}x{}",
                self.variables,
                self.spec.height,
                self.spec.width,
                stack.variables,
                stack.grid.ny(),
                stack.grid.nx()
            )));
        }
        Ok(())
    }

    /// Eval-mode class probabilities for stack rows `rows`.
    pub fn predict_proba(&self, stack: &GridStack, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_stack(stack)?;
        predict_rows(&self.network::<f32>()?, stack, rows, &self.norm, 64)
    }

    /// Eval-mode probabilities for raw (unnormalized) inputs laid out
    /// `[N, C, H, W]`.
    pub fn predict_raw(&self, inputs: &[f32]) -> Result<Vec<Vec<f64>>> {
        let s = &self.spec;
        let size = s.in_channels * s.height * s.width;
        if !inputs.len().is_multiple_of(size) {
            return Err(CoreError::DimensionMismatch(format!("{} values is not a multiple of {size}", inputs.len())));
        }
        let mut data = Vec::with_capacity(inputs.len());
        for day in inputs.chunks(size) {
            self.norm.apply_into::<f32>(day, &mut data);
        }
        let x = Tensor::from_vec(data, &[inputs.len() / size, s.in_channels, s.height, s.width])?;
        Ok(self.network::<f32>()?.predict_proba(&x)?)
    }
}

fn predict_rows<T: Element>(net: &Network<T>, stack: &GridStack, rows: &[usize], norm: &Normalization, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for part in rows.chunks(chunk.max(1)) {
        out.extend(net.predict_proba(&batch_tensor::<T>(stack, part, norm)?)?);
    }
    Ok(out)
}

/// One step of an LR range test: train once at `lr` and report the loss.
pub trait LrProbe {
    fn step(&mut self, lr: f64) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrRangeResult {
    pub suggested: f64,
    pub diverged_at: Option<f64>,
    pub lrs: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Raises the learning rate exponentially from `lr_min` to `lr_max` and
/// suggests one decade below the rate where the smoothed loss first exceeds
/// four times its running minimum.
pub fn lr_range_test(probe: &mut dyn LrProbe, cfg: &LrRangeConfig) -> Result<LrRangeResult> {
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if !(lo > 0.0 && hi.is_finite()) || lo > hi {
        return invalid(format!("need 0 < lr_min <= lr_max, got {lo} and {hi}"));
    }
    let mut res = LrRangeResult {
        suggested: hi,
        diverged_at: None,
        lrs: Vec::new(),
        smoothed: Vec::new(),
    };
    if lo == hi {
        res.suggested = lo;
        return Ok(res);
    }
    let steps = cfg.steps.max(2);
    const BETA: f64 = 0.9;
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..steps {
        let lr = lo * (hi / lo).powf(i as f64 / (steps - 1) as f64);
        let loss = probe.step(lr)?;
        avg = BETA * avg + (1.0 - BETA) * loss;
        let smooth = avg / (1.0 - BETA.powi(i as i32 + 1));
        res.lrs.push(lr);
        res.smoothed.push(smooth);
        if !smooth.is_finite() || smooth > 4.0 * best {
            res.diverged_at = Some(lr);
            res.suggested = (lr / 10.0).max(lo);
            if i == 0 {
                log::warn!("loss diverged at the first step; using lr_min {lo}");
            }
            return Ok(res);
        }
        best = best.min(smooth);
    }
    log::warn!("no divergence up to lr_max {hi}; using it");
    Ok(res)
}

/// Training data drawn from a stack: pair indices into `sup` for each split.
pub struct TrainData<'a> {
    pub stack: &'a GridStack,
    pub sup: &'a Supervised,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<'a> TrainData<'a> {
    pub fn from_plan(stack: &'a GridStack, sup: &'a Supervised, plan: &SplitPlan) -> Self {
        let [train, val, _] = sup.partition(plan);
        Self { stack, sup, train, val }
    }

    fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; naer_tensor::nn::NUM_CLASSES];
        for &i in &self.train {
            c[self.sup.target[i]] += 1;
        }
        c
    }

    fn batch(&self, pairs: &[usize], norm: &Normalization) -> Result<(Tensor<f32>, Vec<usize>)> {
        let rows: Vec<usize> = pairs.iter().map(|&i| self.sup.input[i]).collect();
        let y = pairs.iter().map(|&i| self.sup.target[i]).collect();
        Ok((batch_tensor(self.stack, &rows, norm)?, y))
    }
}

struct NetProbe<'a, 'b> {
    net: Network<f32>,
    opt: Adam<f32>,
    data: &'b TrainData<'a>,
    norm: &'b Normalization,
    weights: Vec<f64>,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl LrProbe for NetProbe<'_, '_> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let (x, y) = self.data.batch(&self.order[self.pos..end], self.norm)?;
        self.pos = end;
        self.opt.lr = lr;
        self.opt.zero_grad();
        let loss = weighted_cross_entropy(&self.net.forward_train(&x, &mut self.rng)?, &y, &self.weights)?;
        let value = loss.item() as f64;
        if value.is_finite() {
            loss.backward()?;
            self.opt.step()?;
        }
        Ok(value)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

fn loss_weights(data: &TrainData<'_>, mode: WeightMode) -> Result<Vec<f64>> {
    let counts: Vec<usize> = data.counts().into_iter().map(|c| c.max(1)).collect();
    Ok(class_weights(&counts, mode)?)
}

/// Validation loss (class-weighted cross-entropy) and accuracy.
fn evaluate(net: &Network<f32>, data: &TrainData<'_>, norm: &Normalization, weights: &[f64]) -> Result<(f64, f64)> {
    if data.val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut wsum = 0.0;
    let mut hits = 0usize;
    for part in data.val.chunks(64) {
        let (x, y) = data.batch(part, norm)?;
        let logits = no_grad(|| net.forward_eval(&x))?;
        let l = weighted_cross_entropy(&logits, &y, weights)?.item() as f64;
        let w: f64 = y.iter().map(|&c| weights[c]).sum();
        loss += l * w;
        wsum += w;
        let z: Vec<f64> = logits.to_vec().iter().map(|&v| v as f64).collect();
        hits += z.chunks(weights.len()).zip(&y).filter(|(r, &t)| argmax(r) == t).count();
    }
    Ok((loss / wsum, hits as f64 / data.val.len() as f64))
}

fn dump_state(net: &Network<f32>, dir: Option<&Path>, epoch: usize) -> Option<PathBuf> {
    let dir = dir?;
    let path = dir.join(format!("diverged_epoch{epoch}.gsk"));
    let meta = serde_json::json!({ "kind": "diverged_state", "epoch": epoch, "spec": net.spec() });
    match std::fs::create_dir_all(dir).map_err(CoreError::from).and_then(|_| write_gsk1(&path, &Gsk1::arrays_only(meta, net.to_arrays()))) {
        Ok(()) => Some(path),
        Err(e) => {
            log::error!("could not dump diverged state: {e}");
            None
        }
    }
}

fn improved(value: f64, best: f64, min_delta: f64, goal: Goal) -> bool {
    if !value.is_finite() {
        return false;
    }
    if !best.is_finite() {
        return true;
    }
    match goal {
        Goal::Maximize => value - best > min_delta,
        Goal::Minimize => best - value > min_delta,
    }
}

/// Trains `net` in place and returns the checkpoint of the best validation
/// epoch. With no validation data the last epoch is kept.
#[allow(clippy::too_many_arguments)]
fn fit(
    mut net: Network<f32>,
    norm: Normalization,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    parent: Option<Provenance>,
    log_path: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    if data.train.is_empty() && cfg.max_epochs > 0 {
        return invalid("no training pairs");
    }
    let weights = loss_weights(data, cfg.weight_mode)?;
    let goal = match cfg.monitor {
        Monitor::ValAccuracy => Goal::Maximize,
        Monitor::ValLoss => Goal::Minimize,
    };
    let lr = match cfg.lr {
        Some(lr) => lr,
        None if cfg.max_epochs == 0 => cfg.lr_range.lr_min,
        None => {
            let mut probe = NetProbe {
                net: Network::from_arrays(net.spec().clone(), &net.to_arrays())?,
                opt: Adam::new(Vec::new(), 0.0),
                data,
                norm: &norm,
                weights: weights.clone(),
                order: data.train.clone(),
                pos: usize::MAX / 2,
                batch: cfg.batch_size,
                rng: ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "lr_range")),
            };
            probe.opt = Adam::new(probe.net.parameters(), 0.0);
            let r = lr_range_test(&mut probe, &cfg.lr_range)?;
            log::info!("LR range test suggests {:.3e}", r.suggested);
            r.suggested
        }
    };
    let mut opt = Adam::new(net.parameters(), lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "dropout"));
    let mut order = data.train.clone();
    let mut history = Vec::new();
    let mut monitored = Vec::new();
    let mut best = (f64::NAN, 0usize, net.to_arrays(), None, None);
    // Finetuning: the starting weights compete as epoch 0.
    if parent.is_some() && !data.val.is_empty() {
        let (val_loss, val_acc) = evaluate(&net, data, &norm, &weights)?;
        let m = match cfg.monitor {
            Monitor::ValAccuracy => val_acc,
            Monitor::ValLoss => val_loss,
        };
        best = (m, 0, net.to_arrays(), Some(val_acc), Some(val_loss));
        monitored.push(m);
    }
    let mut writer = match log_path {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "epoch,train_loss,val_loss,val_acc")?;
            Some(f)
        }
        None => None,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for part in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(part, &norm)?;
            opt.zero_grad();
            let loss = weighted_cross_entropy(&net.forward_train(&x, &mut dropout_rng)?, &y, &weights)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                let dump = dump_state(&net, cfg.dump_dir.as_deref(), epoch);
                return Err(CoreError::Diverged { epoch, dump });
            }
            loss.backward()?;
            opt.step()?;
            total += value * part.len() as f64;
            seen += part.len();
        }
        let (val_loss, val_acc) = evaluate(&net, data, &norm, &weights)?;
        let row = EpochLog {
            epoch,
            train_loss: total / seen as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            row.train_loss,
            row.val_loss,
            row.val_acc
        );
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{},{},{},{}", row.epoch, row.train_loss, row.val_loss, row.val_acc)?;
            w.flush()?;
        }
        history.push(row);
        let m = match cfg.monitor {
            Monitor::ValAccuracy => val_acc,
            Monitor::ValLoss => val_loss,
        };
        if data.val.is_empty() || improved(m, best.0, cfg.min_delta, goal) {
            best = (m, epoch, net.to_arrays(), Some(val_acc), Some(val_loss));
        }
        monitored.push(m);
        if !data.val.is_empty() && should_stop(&monitored, cfg.patience, cfg.min_delta, goal) {
            log::info!("early stopping after epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }
    let (_, best_epoch, arrays, val_acc, val_loss) = best;
    let checkpoint = ModelCheckpoint {
        spec: net.spec().clone(),
        variables: data.stack.variables.clone(),
        norm,
        arrays,
        provenance: Provenance {
            stage,
            lead: cfg.lead,
            seed: cfg.seed,
            best_epoch,
            epochs_run: history.len(),
            lr,
            val_acc: val_acc.filter(|v: &f64| v.is_finite()),
            val_loss: val_loss.filter(|v: &f64| v.is_finite()),
            parent: parent.map(Box::new),
        },
    };
    Ok(Trained { checkpoint, log: history })
}

fn check_data(data: &TrainData<'_>, spec: &ModelSpec) -> Result<()> {
    let s = data.stack;
    if s.variables.len() != spec.in_channels || s.grid.ny() != spec.height || s.grid.nx() != spec.width {
        return Err(CoreError::DimensionMismatch(format!(
            "model expects {}x{}x{}, data is {}x{}x{}",
            spec.in_channels,
            spec.height,
            spec.width,
            s.variables.len(),
            s.grid.ny(),
            s.grid.nx()
        )));
    }
    Ok(())
}

/// Trains a fresh network; normalization is fitted on the training pairs.
pub fn train_new(data: &TrainData<'_>, cfg: &TrainConfig, stage: Stage, log_path: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    check_data(data, &cfg.model)?;
    let rows: Vec<usize> = data.train.iter().map(|&i| data.sup.input[i]).collect();
    let norm = Normalization::fit(data.stack, &rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "init"));
    let net = Network::new(cfg.model.clone(), &mut rng)?;
    fit(net, norm, data, cfg, stage, None, log_path)
}

/// Trains on the large corpus; the checkpoint is tagged `pretrained`.
pub fn pretrain(data: &TrainData<'_>, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<Trained> {
    train_new(data, cfg, Stage::Pretrained, log_path)
}

/// Continues training every parameter of `ckpt` on new data, keeping its
/// normalization constants.
pub fn finetune(ckpt: &ModelCheckpoint, data: &TrainData<'_>, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<Trained> {
    if ckpt.spec != cfg.model {
        return invalid("checkpoint model spec differs from the training config");
    }
    if ckpt.variables != data.stack.variables {
        return Err(CoreError::DimensionMismatch(format!(
            "checkpoint variables {:?}, data variables {:?}",
            ckpt.variables, data.stack.variables
        )));
    }
    check_data(data, &cfg.model)?;
    let net = ckpt.network::<f32>()?;
    fit(net, ckpt.norm.clone(), data, cfg, Stage::Finetuned, Some(ckpt.provenance.clone()), log_path)
}

/// Validation accuracy of a checkpoint on `data.val`.
pub fn validation_accuracy(ckpt: &ModelCheckpoint, data: &TrainData<'_>) -> Result<f64> {
    let rows: Vec<usize> = data.val.iter().map(|&i| data.sup.input[i]).collect();
    let probs = ckpt.predict_proba(data.stack, &rows)?;
    let hits = probs
        .iter()
        .zip(&data.val)
        .filter(|(p, &i)| argmax(p) == data.sup.target[i])
        .count();
    Ok(hits as f64 / data.val.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gradient descent on `L/2 (x - c)²` with the target `c` alternating
    /// in sign, so the loss never settles at exactly zero.
    struct Quadratic {
        x: f64,
        curvature: f64,
        step: usize,
    }

    impl Quadratic {
        fn new(x: f64, curvature: f64) -> Self {
            Self { x, curvature, step: 0 }
        }
    }

    impl LrProbe for Quadratic {
        fn step(&mut self, lr: f64) -> Result<f64> {
            let c = if self.step.is_multiple_of(2) { 0.1 } else { -0.1 };
            self.step += 1;
            let loss = 0.5 * self.curvature * (self.x - c) * (self.x - c);
            self.x -= lr * self.curvature * (self.x - c);
            Ok(loss)
        }
    }

    #[test]
    fn quadratic_suggestion_is_stable() {
        for curvature in [0.5, 4.0, 50.0] {
            let mut q = Quadratic::new(1.0, curvature);
            let r = lr_range_test(&mut q, &LrRangeConfig { lr_min: 1e-6, lr_max: 100.0, steps: 200 }).unwrap();
            assert!(r.diverged_at.is_some());
            assert!(r.suggested < 2.0 / curvature, "L={curvature}: {}", r.suggested);
        }
    }

    #[test]
    fn degenerate_ranges() {
        let mut q = Quadratic::new(1.0, 1.0);
        let same = LrRangeConfig { lr_min: 0.01, lr_max: 0.01, steps: 10 };
        assert_eq!(lr_range_test(&mut q, &same).unwrap().suggested, 0.01);
        struct Boom;
        impl LrProbe for Boom {
            fn step(&mut self, _: f64) -> Result<f64> {
                Ok(f64::INFINITY)
            }
        }
        let r = lr_range_test(&mut Boom, &LrRangeConfig::default()).unwrap();
        assert_eq!(r.suggested, LrRangeConfig::default().lr_min);
        struct Flat;
        impl LrProbe for Flat {
            fn step(&mut self, _: f64) -> Result<f64> {
                Ok(1.0)
            }
        }
        assert_eq!(lr_range_test(&mut Flat, &LrRangeConfig::default()).unwrap().suggested, 1.0);
        assert!(lr_range_test(&mut q, &LrRangeConfig { lr_min: 1.0, lr_max: 0.1, steps: 5 }).is_err());
    }

    #[test]
    fn lead_outside_range_is_rejected() {
        let cfg = TrainConfig {
            lead: 16,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lead: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
