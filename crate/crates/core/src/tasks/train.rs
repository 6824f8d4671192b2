//! Mini-batch training and held-out evaluation.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::encoder::{EncoderConfig, Head, Input, Model};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::data::{Dataset, Sample};
use super::loss::{abs_rel, epe, epe_loss_var, rmse, silog_loss_var, SILOG_LAMBDA};
use super::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps; the untrained training
    /// loss for epoch 0.
    pub loss: f64,
    /// Held-out metric at the end of the epoch.
    pub metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// EPE for flow, Abs Rel for depth.
    pub primary: f64,
    /// RMSE for depth.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub task: &'static str,
    pub metric_name: &'static str,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_samples: usize,
    pub held_out_samples: usize,
    pub param_count: usize,
    pub epochs: Vec<EpochRow>,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub final_rmse: Option<f64>,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// `final / initial` held-out metric.
    pub fn metric_ratio(&self) -> f64 {
        self.final_metric / self.initial_metric
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,loss,metric")?;
        for r in &self.epochs {
            writeln!(out, "{},{},{}", r.epoch, r.loss, r.metric)?;
        }
        Ok(())
    }

    /// One-line JSON summary without the per-epoch trace.
    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("epochs");
        }
        v.to_string()
    }
}

fn input(sample: &Sample) -> Input<'_> {
    match sample {
        Sample::Flow(s) => Input::Flow {
            frame1: &s.frame1,
            frame2: &s.frame2,
        },
        Sample::Depth(s) => Input::Depth { image: &s.image },
    }
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradient(model: &Model, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let b = model.store().bind(&tape);
    let pred = model.forward_on(&b, &tape, input(sample), None)?;
    let loss = match sample {
        Sample::Flow(s) => epe_loss_var(pred, &s.flow)?,
        Sample::Depth(s) => silog_loss_var(pred, &s.depth, SILOG_LAMBDA)?,
    };
    let value = loss.value().item();
    let grads = loss.backward()?;
    Ok((value, b.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mean loss and gradient over `batch`, reduced in batch order.
pub fn batch_gradient(model: &Model, batch: &[&Sample], exec: Execution) -> Result<(f64, Vec<Tensor>)> {
    let per_sample = par::map(exec, batch, |s| sample_gradient(model, s));
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g.into_iter().map(Tensor::into_data).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let shapes: Vec<Vec<usize>> = model.store().values().iter().map(|t| t.shape().to_vec()).collect();
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .zip(shapes)
        .map(|(g, shape)| Tensor::new(&shape, g.into_iter().map(|v| v / n).collect()))
        .collect::<Result<_>>()?;
    Ok((loss / n, grads))
}

/// Held-out metrics, averaged over samples in order.
pub fn evaluate(model: &Model, samples: &[Sample], exec: Execution) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let per_sample = par::map(exec, samples, |s| -> Result<(f64, Option<f64>)> {
        let pred = model.forward(input(s))?.field;
        match s {
            Sample::Flow(f) => Ok((epe(&pred, &f.flow)?, None)),
            Sample::Depth(d) => Ok((abs_rel(&pred, &d.depth)?, Some(rmse(&pred, &d.depth)?))),
        }
    });
    let (mut primary, mut sq) = (0.0, None::<f64>);
    for r in per_sample {
        let (p, e) = r?;
        primary += p;
        if let Some(e) = e {
            *sq.get_or_insert(0.0) += e;
        }
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        primary: primary / n,
        rmse: sq.map(|s| s / n),
    })
}

fn mean_loss(model: &Model, samples: &[Sample], exec: Execution) -> Result<f64> {
    let losses = par::map(exec, samples, |s| sample_gradient_value(model, s));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

fn sample_gradient_value(model: &Model, sample: &Sample) -> Result<f64> {
    let tape = Tape::new();
    let b = model.store().bind(&tape);
    let pred = model.forward_on(&b, &tape, input(sample), None)?;
    let loss = match sample {
        Sample::Flow(s) => epe_loss_var(pred, &s.flow)?,
        Sample::Depth(s) => silog_loss_var(pred, &s.depth, SILOG_LAMBDA)?,
    };
    let v = loss.value().item();
    Ok(v)
}

/// Trains a fresh model seeded by `train.seed` on the first 80% of
/// `dataset` and evaluates on the rest after every epoch (one pass over the
/// training split, the last one possibly partial). Batches cycle through
/// the training samples in order. The returned model has its parameters
/// rounded to `f32`, exactly as a checkpoint stores them, and the final
/// metric is measured on that model.
pub fn train(config: &EncoderConfig, dataset: &Dataset, train: &TrainConfig, exec: Execution) -> Result<(Model, TrainReport)> {
    let task = dataset.task().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    if task != config.head {
        return Err(Error::Config(format!(
            "a {} head cannot train on {} data",
            config.head.name(),
            task.name()
        )));
    }
    let (train_set, held_out) = dataset.split();
    if train_set.is_empty() || held_out.is_empty() {
        return Err(Error::Data(format!(
            "{} samples are too few for an 80/20 split",
            dataset.len()
        )));
    }
    if train.batch == 0 {
        return Err(Error::Param("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut model = Model::new(config.clone(), train.seed)?;
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let diverged = |epoch, step| move |_: Error| Error::TrainDiverged { epoch, step };

    let initial = evaluate(&model, held_out, exec).map_err(diverged(0, 0))?;
    let mut epochs = vec![EpochRow {
        epoch: 0,
        loss: mean_loss(&model, train_set, exec).map_err(diverged(0, 0))?,
        metric: initial.primary,
    }];
    let steps_per_epoch = train_set.len().div_ceil(train.batch);
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0;
    for step in 0..train.steps {
        let epoch = step / steps_per_epoch + 1;
        let batch: Vec<&Sample> = (0..train.batch)
            .map(|j| &train_set[(step * train.batch + j) % train_set.len()])
            .collect();
        let (loss, grads) = batch_gradient(&model, &batch, exec).map_err(diverged(epoch, step))?;
        if !loss.is_finite() {
            return Err(Error::TrainDiverged { epoch, step });
        }
        opt.step(model.store_mut(), &grads).map_err(diverged(epoch, step))?;
        epoch_loss += loss;
        epoch_steps += 1;
        if (step + 1) % steps_per_epoch == 0 || step + 1 == train.steps {
            let metric = evaluate(&model, held_out, exec).map_err(diverged(epoch, step))?;
            epochs.push(EpochRow {
                epoch,
                loss: epoch_loss / epoch_steps as f64,
                metric: metric.primary,
            });
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }
    model.store_mut().map_values(Tensor::round_to_f32);
    let last = evaluate(&model, held_out, exec)?;
    let report = TrainReport {
        task: task.name(),
        metric_name: match task {
            Head::Flow => "epe",
            Head::Depth => "abs_rel",
        },
        seed: train.seed,
        steps: train.steps,
        batch: train.batch,
        lr: train.lr,
        train_samples: train_set.len(),
        held_out_samples: held_out.len(),
        param_count: model.param_count(),
        epochs,
        initial_metric: initial.primary,
        final_metric: last.primary,
        final_rmse: last.rmse,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
