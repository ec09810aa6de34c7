//! Sequence-length schedules ℓ_0..ℓ_L.
//!
//! The decaying schedule keeps `N · p^(min(j, u)/u)` tokens after encoder
//! `j`, where `u` is the last layer that prunes. Lengths are rounded with
//! [`Rounding::Floor`] by default, which reproduces the reference
//! configuration grid; [`Rounding::Ceil`] is kept for the ceiling form.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Slack applied before rounding so that exact integers like `128 * 0.25`
/// survive `powf` noise.
const ROUND_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Floor,
    Ceil,
}

impl Rounding {
    pub fn apply(self, x: f64) -> usize {
        match self {
            Rounding::Floor => (x + ROUND_EPS).floor() as usize,
            Rounding::Ceil => (x - ROUND_EPS).ceil() as usize,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(Rounding::Floor),
            "ceil" => Ok(Rounding::Ceil),
            other => invalid(format!("unknown rounding '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleOrigin {
    Decay { prune_upto: usize, ratio: f64, rounding: Rounding },
    Random { seed: u64 },
    /// Single truncation of the input to `k` tokens, constant afterwards.
    InputOnly { k: usize },
    /// One pooling step of the given window at encoder `at_layer`.
    Pooled { window: usize, at_layer: usize },
    Custom,
}

/// Retained token counts: `lengths[0]` for the input, `lengths[j]` after
/// encoder `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthSchedule {
    input_len: usize,
    lengths: Vec<usize>,
    origin: ScheduleOrigin,
}

/// `(prune_upto, p)` pairs of the standard 30-row grid for N = 128, L = 12.
pub const DEFAULT_GRID: [(usize, f64); 30] = [
    (2, 0.15),
    (3, 0.15),
    (4, 0.15),
    (3, 0.10),
    (4, 0.10),
    (3, 0.20),
    (4, 0.20),
    (3, 0.17),
    (3, 0.18),
    (3, 0.19),
    (3, 0.22),
    (3, 0.25),
    (1, 0.25),
    (2, 0.25),
    (3, 0.25),
    (5, 0.25),
    (9, 0.25),
    (11, 0.25),
    (1, 0.50),
    (2, 0.50),
    (3, 0.50),
    (5, 0.50),
    (9, 0.50),
    (11, 0.50),
    (1, 0.75),
    (2, 0.75),
    (3, 0.75),
    (7, 0.75),
    (9, 0.75),
    (11, 0.75),
];

impl LengthSchedule {
    /// Exponentially decaying schedule.
    pub fn generate(n: usize, layers: usize, p: f64, prune_upto: usize, rounding: Rounding) -> Result<Self> {
        if n == 0 {
            return invalid("input length must be at least 1");
        }
        if layers == 0 {
            return invalid("a schedule needs at least one layer");
        }
        if !(p > 0.0 && p <= 1.0) {
            return invalid(format!("retention ratio {p} outside (0, 1]"));
        }
        if prune_upto == 0 || prune_upto > layers {
            return invalid(format!("prune_upto {prune_upto} outside 1..={layers}"));
        }
        let lengths = (0..=layers)
            .map(|j| {
                let e = j.min(prune_upto) as f64 / prune_upto as f64;
                rounding.apply(n as f64 * p.powf(e)).clamp(1, n)
            })
            .collect();
        let s = LengthSchedule { input_len: n, lengths, origin: ScheduleOrigin::Decay { prune_upto, ratio: p, rounding } };
        s.validate()?;
        Ok(s)
    }

    /// No reduction anywhere.
    pub fn full(n: usize, layers: usize) -> Self {
        LengthSchedule {
            input_len: n,
            lengths: vec![n; layers + 1],
            origin: ScheduleOrigin::Decay { prune_upto: layers.max(1), ratio: 1.0, rounding: Rounding::Floor },
        }
    }

    /// Input truncated to `k` tokens once, then left alone.
    pub fn input_only(n: usize, layers: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return invalid(format!("input retention {k} outside 1..={n}"));
        }
        Ok(LengthSchedule { input_len: n, lengths: vec![k; layers + 1], origin: ScheduleOrigin::InputOnly { k } })
    }

    /// Lengths produced by one strided pooling of `window` at encoder `at_layer`.
    pub fn pooled(n: usize, layers: usize, window: usize, at_layer: usize) -> Result<Self> {
        crate::selectors::check_window(window)?;
        if at_layer == 0 || at_layer > layers {
            return invalid(format!("pooling layer {at_layer} outside 1..={layers}"));
        }
        let pooled = crate::selectors::pooled_len(n, window);
        let lengths = (0..=layers).map(|j| if j < at_layer { n } else { pooled }).collect();
        Ok(LengthSchedule { input_len: n, lengths, origin: ScheduleOrigin::Pooled { window, at_layer } })
    }

    /// Seeded random monotone schedule: `layers` uniform draws from
    /// `1..=n`, sorted in decreasing order.
    pub fn random(n: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=n.max(1))).collect();
        draws.sort_unstable_by(|a, b| b.cmp(a));
        let mut lengths = Vec::with_capacity(layers + 1);
        lengths.push(n);
        lengths.extend(draws);
        LengthSchedule { input_len: n, lengths, origin: ScheduleOrigin::Random { seed } }
    }

    /// Explicit lengths `ℓ_0..ℓ_L`, validated.
    pub fn from_lengths(input_len: usize, lengths: Vec<usize>) -> Result<Self> {
        let s = LengthSchedule { input_len, lengths, origin: ScheduleOrigin::Custom };
        s.validate()?;
        Ok(s)
    }

    /// The 30 standard configurations for `n` input tokens and `layers`
    /// encoders, in grid order.
    pub fn default_suite(n: usize, layers: usize, rounding: Rounding) -> Result<Vec<Self>> {
        DEFAULT_GRID
            .iter()
            .map(|&(u, p)| LengthSchedule::generate(n, layers, p, u.min(layers), rounding))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.lengths;
        if l.len() < 2 {
            return invalid("a schedule needs at least one layer");
        }
        if l[0] > self.input_len {
            return invalid(format!("input retention {} exceeds input length {}", l[0], self.input_len));
        }
        if let Some(j) = (1..l.len()).find(|&j| l[j] > l[j - 1]) {
            return invalid(format!("schedule grows at layer {j}: {} > {}", l[j], l[j - 1]));
        }
        if *l.last().unwrap() == 0 {
            return invalid("the last layer must keep at least the CLS token");
        }
        if let ScheduleOrigin::Decay { prune_upto, .. } = self.origin {
            if l[prune_upto..].iter().any(|&x| x != l[prune_upto]) {
                return invalid("decaying schedule changes after prune_upto");
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn layers(&self) -> usize {
        self.lengths.len() - 1
    }

    /// `ℓ_0..ℓ_L`
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// `ℓ_j` for `j` in `0..=L`.
    pub fn len_at(&self, j: usize) -> usize {
        self.lengths[j]
    }

    pub fn origin(&self) -> ScheduleOrigin {
        self.origin
    }

    pub fn is_full(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.input_len)
    }

    /// Fraction of input tokens surviving the last layer.
    pub fn final_retention(&self) -> f64 {
        *self.lengths.last().unwrap() as f64 / self.input_len as f64
    }

    /// `prune_upto` for decaying schedules; otherwise the last layer that
    /// shrinks the sequence (at least 1).
    pub fn prune_upto(&self) -> usize {
        match self.origin {
            ScheduleOrigin::Decay { prune_upto, .. } => prune_upto,
            _ => (1..self.lengths.len()).filter(|&j| self.lengths[j] < self.lengths[j - 1]).max().unwrap_or(1),
        }
    }

    /// `p` for decaying schedules; otherwise `ℓ_L / N`.
    pub fn ratio(&self) -> f64 {
        match self.origin {
            ScheduleOrigin::Decay { ratio, .. } => ratio,
            _ => self.final_retention(),
        }
    }

    /// `prune_upto,p,l1,...,lL`
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("prune_upto,p");
        for j in 1..=layers {
            h.push_str(&format!(",l{j}"));
        }
        h
    }

    pub fn to_csv_row(&self) -> String {
        let mut row = format!("{},{}", self.prune_upto(), self.ratio());
        for l in &self.lengths[1..] {
            row.push_str(&format!(",{l}"));
        }
        row
    }

    /// Parses one data row of the CSV layout; `ℓ_0` is taken as `n`.
    pub fn from_csv_row(row: &str, n: usize) -> Result<Self> {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Format(format!("schedule row '{row}': {what}"));
        if fields.len() < 3 {
            return Err(bad("too few columns"));
        }
        let prune_upto: usize = fields[0].parse().map_err(|_| bad("prune_upto"))?;
        let ratio: f64 = fields[1].parse().map_err(|_| bad("p"))?;
        let mut lengths = vec![n];
        for f in &fields[2..] {
            lengths.push(f.parse().map_err(|_| bad("length"))?);
        }
        let origin = if prune_upto >= 1 && prune_upto < lengths.len() && ratio > 0.0 && ratio <= 1.0 {
            ScheduleOrigin::Decay { prune_upto, ratio, rounding: Rounding::Floor }
        } else {
            ScheduleOrigin::Custom
        };
        let s = LengthSchedule { input_len: n, lengths, origin };
        s.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(s)
    }

    pub fn write_csv(schedules: &[LengthSchedule], mut out: impl Write) -> Result<()> {
        let layers = schedules.first().map_or(0, |s| s.layers());
        writeln!(out, "{}", Self::csv_header(layers))?;
        for s in schedules {
            writeln!(out, "{}", s.to_csv_row())?;
        }
        Ok(())
    }

    /// Reads a CSV produced by [`LengthSchedule::write_csv`].
    pub fn read_csv(text: &str, n: usize) -> Result<Vec<Self>> {
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| LengthSchedule::from_csv_row(l, n))
            .collect()
    }
}

impl fmt::Display for LengthSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}-p{}", self.prune_upto(), self.ratio())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_rows() {
        let s = LengthSchedule::generate(128, 12, 0.15, 3, Rounding::Floor).unwrap();
        assert_eq!(&s.lengths()[..5], &[128, 68, 36, 19, 19]);
        assert!(s.lengths()[3..].iter().all(|&l| l == 19));
        let s = LengthSchedule::generate(128, 12, 0.25, 9, Rounding::Floor).unwrap();
        assert_eq!(&s.lengths()[1..], &[109, 94, 80, 69, 59, 50, 43, 37, 32, 32, 32, 32]);
    }

    #[test]
    fn ceiling_mode() {
        let s = LengthSchedule::generate(128, 12, 0.15, 3, Rounding::Ceil).unwrap();
        assert_eq!(&s.lengths()[1..4], &[69, 37, 20]);
        let s = LengthSchedule::generate(128, 12, 0.25, 1, Rounding::Ceil).unwrap();
        assert_eq!(s.len_at(1), 32);
    }

    #[test]
    fn unit_ratio_is_full() {
        for n in [1, 7, 128] {
            let s = LengthSchedule::generate(n, 6, 1.0, 2, Rounding::Floor).unwrap();
            assert!(s.is_full());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LengthSchedule::generate(128, 12, 0.0, 3, Rounding::Floor).is_err());
        assert!(LengthSchedule::generate(128, 12, 1.5, 3, Rounding::Floor).is_err());
        assert!(LengthSchedule::generate(128, 12, 0.5, 0, Rounding::Floor).is_err());
        assert!(LengthSchedule::generate(128, 12, 0.5, 13, Rounding::Floor).is_err());
        assert!(LengthSchedule::generate(0, 12, 0.5, 3, Rounding::Floor).is_err());
        assert!(LengthSchedule::from_lengths(10, vec![10, 5, 6]).is_err());
        assert!(LengthSchedule::from_lengths(10, vec![10, 5, 0]).is_err());
    }

    #[test]
    fn suite_shape() {
        let suite = LengthSchedule::default_suite(128, 12, Rounding::Floor).unwrap();
        assert_eq!(suite.len(), 30);
        assert_eq!((suite[0].prune_upto(), suite[0].ratio()), (2, 0.15));
    }

    #[test]
    fn random_schedules() {
        let a = LengthSchedule::random(128, 12, 7);
        assert_eq!(a, LengthSchedule::random(128, 12, 7));
        a.validate().unwrap();
        let distinct: std::collections::HashSet<Vec<usize>> =
            (0..10).map(|s| LengthSchedule::random(128, 12, s).lengths().to_vec()).collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn special_constructors() {
        let s = LengthSchedule::input_only(32, 4, 8).unwrap();
        assert_eq!(s.lengths(), &[8, 8, 8, 8, 8]);
        assert_eq!(s.input_len(), 32);
        let p = LengthSchedule::pooled(33, 4, 2, 3).unwrap();
        assert_eq!(p.lengths(), &[33, 33, 33, 17, 17]);
        assert!(LengthSchedule::pooled(33, 4, 1, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let suite = LengthSchedule::default_suite(128, 12, Rounding::Floor).unwrap();
        let mut buf = Vec::new();
        LengthSchedule::write_csv(&suite, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("prune_upto,p,l1,l2,"));
        assert!(text.lines().nth(2).unwrap().starts_with("3,0.15,68,36,19,19"));
        let back = LengthSchedule::read_csv(&text, 128).unwrap();
        assert_eq!(back, suite);
    }

    proptest! {
        #[test]
        fn invariants_hold(n in 1usize..600, layers in 1usize..16, p in 0.001f64..=1.0, u in 1usize..16, ceil in any::<bool>()) {
            let u = u.min(layers);
            let rounding = if ceil { Rounding::Ceil } else { Rounding::Floor };
            let s = LengthSchedule::generate(n, layers, p, u, rounding).unwrap();
            prop_assert_eq!(s.len_at(0), n);
            prop_assert!(s.lengths().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(s.lengths()[u..].iter().all(|&l| l == s.len_at(u)));
            prop_assert!(s.len_at(layers) >= 1);
        }

        #[test]
        fn monotone_in_ratio(n in 1usize..600, u in 1usize..12, p in 0.01f64..0.99, dp in 0.0f64..0.5) {
            let q = (p + dp).min(1.0);
            let a = LengthSchedule::generate(n, 12, p, u, Rounding::Floor).unwrap();
            let b = LengthSchedule::generate(n, 12, q, u, Rounding::Floor).unwrap();
            prop_assert!(a.lengths().iter().zip(b.lengths()).all(|(x, y)| x <= y));
        }

        #[test]
        fn random_is_monotone(n in 1usize..300, layers in 1usize..16, seed in any::<u64>()) {
            let s = LengthSchedule::random(n, layers, seed);
            prop_assert!(s.validate().is_ok());
        }
    }
}
