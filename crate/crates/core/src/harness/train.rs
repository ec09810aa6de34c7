use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{backward, forward_with, EncoderStack, ForwardOptions, Gradients, PipelineConfig};
use crate::error::{invalid, Error, Result};
use crate::par;

use super::Example;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum with coefficient `beta`.
    Momentum(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Rescale each batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Momentum(0.9),
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if let Optimizer::Momentum(b) = self.optimizer {
            if !(0.0..1.0).contains(&b) {
                return invalid(format!("momentum {b} outside [0, 1)"));
            }
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return invalid("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: EncoderStack,
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch training with the pipeline's token selection active in every
/// forward pass. Per-example gradients inside a batch are computed in
/// parallel and summed in example order, so results do not depend on the
/// thread count.
pub fn finetune(stack: &EncoderStack, data: &[Example], pipeline: &PipelineConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    train.validate()?;
    let mut stack = stack.clone();
    let mut losses = Vec::with_capacity(train.epochs);
    if train.epochs == 0 {
        return Ok(TrainOutcome { stack, losses });
    }
    if data.is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut velocity: Vec<_> = stack.tensors().iter().map(|t| crate::Matrix::zeros(t.rows(), t.cols())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let results = par::map_slice(batch, |&i| -> Result<(f64, Gradients)> {
                let cfg = pipeline.for_example((epoch * data.len() + i) as u64);
                let opts = ForwardOptions { capture: true, ..Default::default() };
                let trace = forward_with(&stack, &data[i].tokens, &cfg, opts)?;
                let g = backward(&stack, &trace, data[i].target())?;
                Ok((trace.loss(data[i].target())?, g))
            });
            let mut sum: Option<Gradients> = None;
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::TrainingFailure { epoch });
                }
                total += loss;
                match sum.as_mut() {
                    Some(s) => s.add_params(&g),
                    None => sum = Some(g),
                }
            }
            let mut g = sum.expect("non-empty batch");
            g.scale(1.0 / batch.len() as f64);
            if let Some(c) = train.clip_norm {
                let norm = g.norm();
                if !norm.is_finite() {
                    return Err(Error::TrainingFailure { epoch });
                }
                if norm > c {
                    g.scale(c / norm);
                }
            }
            apply_update(&mut stack, &mut velocity, &g, train);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !stack.all_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        losses.push(mean);
    }
    Ok(TrainOutcome { stack, losses })
}

fn apply_update(stack: &mut EncoderStack, velocity: &mut [crate::Matrix], g: &Gradients, train: &TrainConfig) {
    for ((w, v), g) in stack.tensors_mut().into_iter().zip(velocity.iter_mut()).zip(&g.tensors) {
        match train.optimizer {
            Optimizer::Sgd => {
                for (w, g) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *w -= train.learning_rate * g;
                }
            }
            Optimizer::Momentum(beta) => {
                for ((w, v), g) in w.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                    *v = beta * *v + g;
                    *w -= train.learning_rate * *v;
                }
            }
        }
    }
}
