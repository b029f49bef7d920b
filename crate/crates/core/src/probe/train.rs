use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{ProbeDataset, Targets};
use super::eval::task_metric;
use super::ProbeTask;
use crate::autograd::{Tape, Var};
use crate::checkpoint::TensorArchive;
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerKind};
use crate::tensor::Tensor;

/// One affine map `input_width → output_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProbeHead {
    pub fn zeros(input: usize, output: usize) -> Self {
        ProbeHead {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Gaussian weights with standard deviation 0.02 and zero bias.
    pub fn random(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..input * output).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
        ProbeHead {
            weight: Tensor::new(vec![input, output], data).expect("sized"),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push_tensor("weight", &self.weight).expect("unique");
        a.push_tensor("bias", &self.bias).expect("unique");
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let weight = a.tensor("weight")?.clone();
        let bias = a.tensor("bias")?.clone();
        let (_, out) = weight.matrix_dims()?;
        if bias.dims() != [out] {
            return Err(Error::Shape {
                op: "probe head",
                lhs: weight.dims().to_vec(),
                rhs: bias.dims().to_vec(),
            });
        }
        let head = ProbeHead { weight, bias };
        if !head.is_finite() {
            return Err(Error::Parse("probe head has non-finite parameters".into()));
        }
        Ok(head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: ProbeTask,
    /// Falls back to the task's usual optimizer when absent.
    pub optimizer: Option<OptimizerConfig>,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// trains for `max_epochs`.
    pub patience: Option<usize>,
    pub cosine_schedule: bool,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_task(ProbeTask::Position)
    }
}

impl TrainConfig {
    pub fn for_task(task: ProbeTask) -> Self {
        TrainConfig {
            task,
            optimizer: None,
            max_epochs: 30,
            patience: Some(3),
            cosine_schedule: true,
            batch_size: 256,
            val_fraction: 0.1,
            seed: 42,
        }
    }

    /// Linear classifier on image representations: 20 epochs of SGD with
    /// a cosine schedule and no early stopping.
    pub fn representation() -> Self {
        TrainConfig {
            optimizer: Some(OptimizerConfig::default_for(OptimizerKind::Sgd)),
            max_epochs: 20,
            patience: None,
            ..TrainConfig::for_task(ProbeTask::Classification)
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| {
            OptimizerConfig::default_for(match self.task {
                ProbeTask::Reconstruction => OptimizerKind::AdamW,
                ProbeTask::Position | ProbeTask::Classification => OptimizerKind::Adam,
            })
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer().lr;
        if self.cosine_schedule {
            cosine_lr(base, epoch, self.max_epochs)
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("probe max_epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("probe patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} must lie in [0, 1)", self.val_fraction)));
        }
        let opt = self.optimizer();
        if !(opt.lr > 0.0 && opt.lr.is_finite()) {
            return Err(Error::Config(format!("probe lr {} must be positive", opt.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn row_coords(grid: usize) -> Tensor {
    let data = (0..grid * grid).flat_map(|k| [(k / grid) as f64, (k % grid) as f64]).collect();
    Tensor::new(vec![grid * grid, 2], data).expect("sized")
}

/// Task loss on a batch. Position adds half the squared error between the
/// softmax-expected cell coordinate and the true one.
fn batch_loss(tape: &mut Tape, w: Var, b: Var, data: &ProbeDataset, rows: &[usize]) -> Result<Var> {
    let batch = data.subset(rows);
    let x = tape.constant(batch.features.clone());
    let xw = tape.matmul(x, w)?;
    let out = tape.add_bias(xw, b)?;
    match &batch.targets {
        Targets::Class(y) => tape.cross_entropy(out, y),
        Targets::Position(y) => {
            let ce = tape.cross_entropy(out, y)?;
            let coords = row_coords(data.grid);
            let truth: Vec<f64> = y.iter().flat_map(|&k| coords.row(k).to_vec()).collect();
            let probs = tape.softmax(out, 1)?;
            let c = tape.constant(coords);
            let expected = tape.matmul(probs, c)?;
            let t = tape.constant(Tensor::new(vec![y.len(), 2], truth)?);
            let diff = tape.sub(expected, t)?;
            let sq = tape.mul(diff, diff)?;
            let mse = tape.mean_all(sq);
            let half = tape.scale(mse, 0.5);
            tape.add(ce, half)
        }
        Targets::Pixels(t) => {
            let t = tape.constant(t.clone());
            let diff = tape.sub(out, t)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean_all(sq))
        }
    }
}

fn full_loss(head: &ProbeHead, data: &ProbeDataset) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(head.weight.clone());
    let b = tape.constant(head.bias.clone());
    let rows: Vec<usize> = (0..data.len()).collect();
    let loss = batch_loss(&mut tape, w, b, data, &rows)?;
    Ok(tape.value(loss).data()[0])
}

/// Splits off a seeded `val_fraction` of the rows, then trains.
pub fn train_linear_probe(data: &ProbeDataset, cfg: &TrainConfig) -> Result<(ProbeHead, ProbeHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("probe training on an empty dataset"));
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let n_val = (data.len() as f64 * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (val_rows, train_rows) = rows.split_at(n_val);
    let train = data.subset(train_rows);
    let val = (n_val > 0).then(|| data.subset(val_rows));
    train_probe_with_validation(&train, val.as_ref(), cfg, |_, _| {})
}

/// Mini-batch training with an explicit validation set. `observe` sees each
/// epoch's record and the head as it stands after that epoch.
pub fn train_probe_with_validation(
    train: &ProbeDataset,
    val: Option<&ProbeDataset>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord, &ProbeHead),
) -> Result<(ProbeHead, ProbeHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("probe training on an empty dataset"));
    }
    if train.task != cfg.task {
        return Err(Error::contract(format!("{} data given to a {} probe", train.task, cfg.task)));
    }
    if let Some(v) = val {
        if v.width() != train.width() || v.output_width() != train.output_width() {
            return Err(Error::contract("validation rows do not match the training rows"));
        }
    }
    let opt_cfg = cfg.optimizer();
    let mut opt = opt_cfg.build();
    let mut head = ProbeHead::random(train.width(), train.output_width(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let higher = cfg.task.higher_is_better();

    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ProbeHead)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let w = tape.leaf(&head.weight.clone().with_grad());
            let b = tape.leaf(&head.bias.clone().with_grad());
            let loss = batch_loss(&mut tape, w, b, train, chunk)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: value });
            }
            total += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            head.weight.grad = Some(grads.take_or_zeros(w, head.weight.numel()));
            head.bias.grad = Some(grads.take_or_zeros(b, head.bias.numel()));
            opt.step(&mut [&mut head.weight, &mut head.bias], lr);
        }
        head.weight.zero_grad();
        head.bias.zero_grad();
        if !head.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, loss: f64::NAN });
        }

        let train_metric = task_metric(&head, train)?;
        let (val_loss, val_metric) = match val {
            Some(v) => (Some(full_loss(&head, v)?), Some(task_metric(&head, v)?)),
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            train_metric,
            val_loss,
            val_metric,
        };
        observe(&record, &head);
        epochs.push(record);

        let Some(m) = val_metric else { continue };
        let improved = match &best {
            None => true,
            Some((b, _, _)) => {
                if higher {
                    m > *b
                } else {
                    m < *b
                }
            }
        };
        if improved {
            best = Some((m, epoch, head.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                stopped_early = true;
                break;
            }
        }
    }

    let last = epochs.len() - 1;
    let (head, best_epoch) = match best {
        Some((_, e, h)) if cfg.patience.is_some() => (h, e),
        _ => (head, last),
    };
    Ok((head, ProbeHistory { epochs, best_epoch, stopped_early }))
}

/// `epoch,split,loss,metric`, one train and (when present) one val row per
/// epoch.
pub fn write_metrics_csv<W: Write>(mut w: W, history: &ProbeHistory) -> io::Result<()> {
    writeln!(w, "epoch,split,loss,metric")?;
    for e in &history.epochs {
        writeln!(w, "{},train,{},{}", e.epoch, e.train_loss, e.train_metric)?;
        if let (Some(l), Some(m)) = (e.val_loss, e.val_metric) {
            writeln!(w, "{},val,{l},{m}", e.epoch)?;
        }
    }
    Ok(())
}
