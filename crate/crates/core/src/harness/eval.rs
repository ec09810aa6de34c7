use std::time::Instant;

use crate::analysis::{space_reduction, RunRecord};
use crate::encoder::{count_flops, forward, EncoderStack, PipelineConfig};
use crate::error::{invalid, Result};
use crate::par;

use super::Example;

/// Wall-clock measurement settings. Timed passes run sequentially on the
/// calling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { warmup: 1, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub record: RunRecord,
}

pub fn predict(stack: &EncoderStack, data: &[Example], pipeline: &PipelineConfig) -> Result<Vec<usize>> {
    let preds = par::map_range(data.len(), |i| {
        forward(stack, &data[i].tokens, &pipeline.for_example(i as u64)).map(|t| t.predicted_class())
    });
    preds.into_iter().collect()
}

pub fn accuracy(predictions: &[usize], data: &[Example]) -> f64 {
    let hits = predictions.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    hits as f64 / data.len().max(1) as f64
}

/// Inference-only evaluation. With `timing`, also measures the pipeline
/// against a full-retention pass over the same data.
pub fn evaluate(
    stack: &EncoderStack,
    data: &[Example],
    pipeline: &PipelineConfig,
    schedule_id: &str,
    seed: u64,
    timing: Option<Timing>,
) -> Result<Evaluation> {
    if data.is_empty() {
        return invalid("cannot evaluate an empty dataset");
    }
    let predictions = predict(stack, data, pipeline)?;
    let accuracy = accuracy(&predictions, data);
    let schedule = &pipeline.schedule;
    let full = PipelineConfig::full(schedule.input_len(), schedule.layers());
    let mut record = RunRecord {
        schedule_id: schedule_id.to_string(),
        selector: pipeline.selector.label(),
        seed,
        accuracy,
        space_reduction: space_reduction(schedule, stack.dims.dim),
        flops_base: count_flops(&full.schedule, &stack.dims),
        flops_pruned: count_flops(schedule, &stack.dims),
        wall_clock_base: None,
        wall_clock_pruned: None,
        speedup: None,
    };
    if let Some(t) = timing {
        let base = time_pass(stack, data, &full, t)?;
        let pruned = time_pass(stack, data, pipeline, t)?;
        record = record.with_timing(base, pruned)?;
    }
    Ok(Evaluation { accuracy, predictions, record })
}

/// Median seconds of one sequential pass over `data`.
pub fn time_pass(stack: &EncoderStack, data: &[Example], pipeline: &PipelineConfig, timing: Timing) -> Result<f64> {
    let run = || -> Result<()> {
        for (i, e) in data.iter().enumerate() {
            std::hint::black_box(forward(stack, &e.tokens, &pipeline.for_example(i as u64))?);
        }
        Ok(())
    };
    for _ in 0..timing.warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(timing.repeats.max(1));
    for _ in 0..timing.repeats.max(1) {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2].max(f64::MIN_POSITIVE))
}
