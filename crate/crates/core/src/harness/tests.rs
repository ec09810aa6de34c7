use super::*;
use crate::analysis::space_reduction;
use crate::encoder::{EncoderStack, PipelineConfig, Placement};
use crate::error::Error;
use crate::schedule::{LengthSchedule, Rounding};
use crate::selectors::SelectorKind;

fn quick() -> SweepConfig {
    let mut c = SweepConfig { train_size: 24, test_size: 24, ..SweepConfig::default() };
    c.train.epochs = 1;
    c
}

#[test]
fn full_retention_training_fits_the_task() {
    let c = SweepConfig::default();
    let trial = Trial::new(&c, 3).unwrap();
    let full = PipelineConfig::full(c.task.seq_len, c.layers);
    let out = finetune(&trial.init, &trial.train, &full, &trial.train_config(&c)).unwrap();
    assert_eq!(out.losses.len(), c.train.epochs);
    assert!(out.losses.last() < out.losses.first());
    let ev = evaluate(&out.stack, &trial.train, &full, "full", 3, None).unwrap();
    assert!(ev.accuracy > 0.95, "train accuracy {}", ev.accuracy);
}

#[test]
fn zero_epochs_leave_the_stack_alone() {
    let c = quick();
    let trial = Trial::new(&c, 1).unwrap();
    let cfg = PipelineConfig::full(c.task.seq_len, c.layers);
    let train = TrainConfig { epochs: 0, ..c.train };
    let out = finetune(&trial.init, &trial.train, &cfg, &train).unwrap();
    assert_eq!(out.stack, trial.init);
    assert!(out.losses.is_empty());
}

#[test]
fn training_is_deterministic() {
    let c = quick();
    let trial = Trial::new(&c, 2).unwrap();
    let s = LengthSchedule::generate(c.task.seq_len, c.layers, 0.25, 2, Rounding::Floor).unwrap();
    let cfg = PipelineConfig::new(s, SelectorKind::Random(5));
    let a = finetune(&trial.init, &trial.train, &cfg, &trial.train_config(&c)).unwrap();
    let b = finetune(&trial.init, &trial.train, &cfg, &trial.train_config(&c)).unwrap();
    assert_eq!(a.stack, b.stack);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let c = quick();
    let trial = Trial::new(&c, 4).unwrap();
    let cfg = PipelineConfig::full(c.task.seq_len, c.layers);
    let train = TrainConfig { learning_rate: 1e300, clip_norm: None, epochs: 3, ..c.train };
    assert!(matches!(finetune(&trial.init, &trial.train, &cfg, &train), Err(Error::TrainingFailure { .. })));
}

#[test]
fn rejects_bad_training_settings() {
    let c = quick();
    let trial = Trial::new(&c, 4).unwrap();
    let cfg = PipelineConfig::full(c.task.seq_len, c.layers);
    for bad in [
        TrainConfig { learning_rate: 0.0, ..c.train },
        TrainConfig { batch_size: 0, ..c.train },
        TrainConfig { optimizer: Optimizer::Momentum(1.0), ..c.train },
    ] {
        assert!(finetune(&trial.init, &trial.train, &cfg, &bad).is_err());
    }
}

#[test]
fn untrained_stack_is_near_chance() {
    let c = SweepConfig::default();
    let task = SyntheticTask { seed: 11, ..c.task };
    let data = make_dataset(&task, 500, 0).unwrap();
    let stack = EncoderStack::random(c.dims(), 12).unwrap();
    let ev = evaluate(&stack, &data, &PipelineConfig::full(c.task.seq_len, c.layers), "full", 0, None).unwrap();
    assert!((0.35..=0.65).contains(&ev.accuracy), "accuracy {}", ev.accuracy);
}

#[test]
fn run_record_uses_the_analytic_formulas() {
    let c = quick();
    let trial = Trial::new(&c, 5).unwrap();
    let s = LengthSchedule::generate(c.task.seq_len, c.layers, 0.5, 1, Rounding::Floor).unwrap();
    let cfg = PipelineConfig::new(s.clone(), SelectorKind::coreset(1));
    let ev = evaluate(&trial.init, &trial.test, &cfg, "1:0.5", 5, Some(Timing { warmup: 0, repeats: 1 })).unwrap();
    assert_eq!(ev.record.space_reduction, space_reduction(&s, c.task.dim));
    assert_eq!(ev.record.flops_pruned, crate::encoder::count_flops(&s, &c.dims()));
    let speed = ev.record.speedup.unwrap();
    assert_eq!(speed, ev.record.wall_clock_base.unwrap() / ev.record.wall_clock_pruned.unwrap());
    assert_eq!(ev.predictions.len(), trial.test.len());
}

#[test]
fn sweep_cardinality() {
    let c = SweepConfig {
        seeds: vec![1, 2],
        selectors: vec![SelectorKind::coreset(1), SelectorKind::FirstK],
        schedules: ["full", "1:0.5", "2:0.25"].iter().map(|s| ScheduleSpec::parse(s).unwrap()).collect(),
        ..quick()
    };
    let rows = sweep(&c).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.status == "ok" && r.accuracy.is_some()));
    let text = write_sweep_csv(&rows);
    assert_eq!(read_sweep_csv(&text).unwrap(), rows);
    assert_eq!(deterministic_part(&write_sweep_csv(&sweep(&c).unwrap())), deterministic_part(&text));
}

#[test]
fn sweep_records_failing_cells() {
    let c = SweepConfig {
        selectors: vec![SelectorKind::AveragePool(3), SelectorKind::FirstK],
        schedules: vec![ScheduleSpec::parse("1:0.5").unwrap()],
        ..quick()
    };
    let rows = sweep(&c).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].status.starts_with("error") && rows[0].accuracy.is_none());
    assert_eq!(rows[1].status, "ok");
}

#[test]
fn m_sweep_reports_the_best_batch_size() {
    let c = SweepConfig { m_sweep: true, modes: vec![TrainMode::InferenceOnly], ..quick() };
    let rows = sweep(&c).unwrap();
    assert_eq!(rows.len(), 7);
    let best = rows[..6].iter().filter_map(|r| r.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(rows[6].selector, "coreset-opt");
    assert_eq!(rows[6].accuracy, Some(best));
    let labels: Vec<&str> = rows[..6].iter().map(|r| r.selector.as_str()).collect();
    assert_eq!(labels, ["coreset:1", "coreset:0.1k", "coreset:0.2k", "coreset:0.3k", "coreset:0.4k", "coreset:k-1"]);
}

#[test]
fn config_grammar() {
    let text = "\
# comment line
seeds = 1..3
selectors = coreset:2, random:4, first-k   # trailing comment
schedules = 1:0.5, full, random:3, lengths:8/4
placements = after_attention, end_of_encoder
modes = inference_only
momentum = 0
clip_norm = none
m_sweep = true
redundancy = 0.5
";
    let c = SweepConfig::parse(text).unwrap();
    assert_eq!(c.seeds, vec![1, 2, 3]);
    assert_eq!(c.selectors, vec![SelectorKind::coreset(2), SelectorKind::Random(4), SelectorKind::FirstK]);
    assert_eq!(c.schedules.len(), 4);
    assert_eq!(c.schedules[3].id(), "lengths:8/4");
    assert_eq!(c.placements, vec![Placement::AfterAttention, Placement::EndOfEncoder]);
    assert_eq!(c.modes, vec![TrainMode::InferenceOnly]);
    assert_eq!(c.train.optimizer, Optimizer::Sgd);
    assert_eq!(c.train.clip_norm, None);
    assert!(c.m_sweep);
    assert_eq!(c.task.redundancy, 0.5);
}

#[test]
fn config_errors_carry_line_numbers() {
    let line = |text: &str| match SweepConfig::parse(text) {
        Err(Error::Config { line, .. }) => line,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert_eq!(line("seeds = 1\n\nbogus = 3\n"), 3);
    assert_eq!(line("# x\nepochs three\n"), 2);
    assert_eq!(line("epochs = three\n"), 1);
    assert_eq!(line("seeds = 1\nseeds = 2\n"), 2);
    assert_eq!(line("selectors = coreset, sideways\n"), 1);
}

#[test]
fn schedule_specs() {
    assert_eq!(ScheduleSpec::parse("3:0.15").unwrap(), ScheduleSpec::Decay { prune_upto: 3, p: 0.15 });
    let s = ScheduleSpec::parse("3:0.15").unwrap().build(128, 12, Rounding::Floor).unwrap();
    assert_eq!(&s.lengths()[1..4], &[68, 36, 19]);
    assert!(ScheduleSpec::parse("lengths:4/2").unwrap().build(8, 3, Rounding::Floor).is_err());
    assert!(ScheduleSpec::parse("nonsense").is_err());
}
