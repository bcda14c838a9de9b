//! Ranking, Pareto analysis and compression rates over compression trials.
//!
//! A trial's rank is `acc + mem`, where `acc` is its accuracy relative to the
//! best accuracy in the set and `mem` is the mean over RAM, ROM and FLOPs of
//! `1 - value / max value`.

use std::cmp::Ordering;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("trial set is empty")]
    Empty,
    #[error("degenerate trial set: {0}")]
    Degenerate(String),
    #[error("no trial with id {0}")]
    UnknownId(u32),
    #[error("division by zero: {0}")]
    Division(String),
    #[error("invalid trial: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrialError>;

/// One compression trial. CSV header: `id,acc,ram,rom,flops` with an
/// optional `classes` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: u32,
    pub acc: f64,
    pub ram: u64,
    pub rom: u64,
    pub flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<u32>,
}

impl TrialRecord {
    pub fn new(id: u32, acc: f64, ram: u64, rom: u64, flops: u64) -> Self {
        Self {
            id,
            acc,
            ram,
            rom,
            flops,
            classes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.acc) {
            return Err(TrialError::Invalid(format!(
                "trial {}: accuracy {} outside [0, 1]",
                self.id, self.acc
            )));
        }
        if self.ram == 0 || self.rom == 0 || self.flops == 0 {
            return Err(TrialError::Invalid(format!(
                "trial {}: resource metrics must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// The uncompressed reference model. CSV header: `acc,ram,rom,flops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub acc: f64,
    pub ram: u64,
    pub rom: u64,
    pub flops: u64,
}

/// A non-empty set of trials with unique ids.
#[derive(Debug, Clone)]
pub struct TrialSet {
    trials: Vec<TrialRecord>,
    max_acc: f64,
    max_ram: u64,
    max_rom: u64,
    max_flops: u64,
}

impl TrialSet {
    pub fn new(trials: Vec<TrialRecord>) -> Result<Self> {
        if trials.is_empty() {
            return Err(TrialError::Empty);
        }
        let mut ids: Vec<u32> = trials.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(TrialError::Invalid(format!("duplicate trial id {}", w[0])));
        }
        for t in &trials {
            t.validate()?;
        }
        Ok(Self {
            max_acc: trials.iter().map(|t| t.acc).fold(0.0, f64::max),
            max_ram: trials.iter().map(|t| t.ram).max().unwrap_or(0),
            max_rom: trials.iter().map(|t| t.rom).max().unwrap_or(0),
            max_flops: trials.iter().map(|t| t.flops).max().unwrap_or(0),
            trials,
        })
    }

    pub fn trials(&self) -> &[TrialRecord] {
        &self.trials
    }

    pub fn get(&self, id: u32) -> Result<&TrialRecord> {
        self.trials
            .iter()
            .find(|t| t.id == id)
            .ok_or(TrialError::UnknownId(id))
    }

    fn acc_of(&self, t: &TrialRecord) -> Result<f64> {
        if self.max_acc <= 0.0 {
            return Err(TrialError::Degenerate("every accuracy is zero".into()));
        }
        Ok(t.acc / self.max_acc)
    }

    fn mem_of(&self, t: &TrialRecord) -> f64 {
        let term = |v: u64, max: u64| 1.0 - v as f64 / max as f64;
        (term(t.ram, self.max_ram) + term(t.rom, self.max_rom) + term(t.flops, self.max_flops))
            / 3.0
    }

    /// Accuracy relative to the most accurate trial.
    pub fn acc_score(&self, id: u32) -> Result<f64> {
        self.acc_of(self.get(id)?)
    }

    /// Mean relative saving in RAM, ROM and FLOPs against the largest trial.
    pub fn mem_score(&self, id: u32) -> Result<f64> {
        Ok(self.mem_of(self.get(id)?))
    }

    pub fn rank(&self, id: u32) -> Result<f64> {
        let t = self.get(id)?;
        Ok(self.mem_of(t) + self.acc_of(t)?)
    }

    /// Scores for every trial, in input order.
    pub fn scores(&self) -> Result<Vec<TrialScore>> {
        self.trials
            .iter()
            .map(|t| {
                let acc = self.acc_of(t)?;
                let mem = self.mem_of(t);
                Ok(TrialScore {
                    id: t.id,
                    acc,
                    mem,
                    rank: mem + acc,
                })
            })
            .collect()
    }

    /// Highest rank; ties go to fewer FLOPs, then the lower id.
    pub fn select_best(&self) -> Result<u32> {
        let scores = self.scores()?;
        let best = self
            .trials
            .iter()
            .zip(&scores)
            .max_by(|(ta, sa), (tb, sb)| {
                sa.rank
                    .total_cmp(&sb.rank)
                    .then_with(|| tb.flops.cmp(&ta.flops))
                    .then_with(|| tb.id.cmp(&ta.id))
            })
            .expect("set is non-empty");
        Ok(best.0.id)
    }

    /// Ids of non-dominated trials, in input order.
    pub fn pareto_front(&self, objectives: Objectives) -> Vec<u32> {
        let mut order: Vec<usize> = (0..self.trials.len()).collect();
        // any dominator of a trial sorts before it
        order.sort_by(|&a, &b| lexicographic(&self.trials[a], &self.trials[b], objectives));
        let mut front: Vec<usize> = Vec::new();
        for &i in &order {
            let t = &self.trials[i];
            if !front
                .iter()
                .any(|&f| dominates(&self.trials[f], t, objectives))
            {
                front.push(i);
            }
        }
        front.sort_unstable();
        front.into_iter().map(|i| self.trials[i].id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub id: u32,
    pub acc: f64,
    pub mem: f64,
    pub rank: f64,
}

/// Which objectives enter the dominance test. Resource metrics always do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub accuracy: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self { accuracy: true }
    }
}

fn lexicographic(a: &TrialRecord, b: &TrialRecord, obj: Objectives) -> Ordering {
    let acc = if obj.accuracy {
        b.acc.total_cmp(&a.acc)
    } else {
        Ordering::Equal
    };
    acc.then(a.ram.cmp(&b.ram))
        .then(a.rom.cmp(&b.rom))
        .then(a.flops.cmp(&b.flops))
}

/// `a` is at least as good as `b` everywhere and strictly better somewhere.
pub fn dominates(a: &TrialRecord, b: &TrialRecord, obj: Objectives) -> bool {
    let acc_ok = !obj.accuracy || a.acc >= b.acc;
    let acc_better = obj.accuracy && a.acc > b.acc;
    acc_ok
        && a.ram <= b.ram
        && a.rom <= b.rom
        && a.flops <= b.flops
        && (acc_better || a.ram < b.ram || a.rom < b.rom || a.flops < b.flops)
}

/// `1 - edge / baseline`; negative when the edge model is larger.
pub fn compression_rate(baseline: f64, edge: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(TrialError::Division("baseline value is zero".into()));
    }
    Ok(1.0 - edge / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionRates {
    pub ram: f64,
    pub rom: f64,
    pub flops: f64,
    pub overall: f64,
}

pub fn overall_compression(
    baseline: &BaselineRecord,
    edge: &TrialRecord,
) -> Result<CompressionRates> {
    let ram = compression_rate(baseline.ram as f64, edge.ram as f64)?;
    let rom = compression_rate(baseline.rom as f64, edge.rom as f64)?;
    let flops = compression_rate(baseline.flops as f64, edge.flops as f64)?;
    Ok(CompressionRates {
        ram,
        rom,
        flops,
        overall: (flops + rom + ram) / 3.0,
    })
}

/// Mean overall compression over the Pareto front.
pub fn avg_overall_compression(
    baseline: &BaselineRecord,
    trials: &TrialSet,
    objectives: Objectives,
) -> Result<f64> {
    let front = trials.pareto_front(objectives);
    if front.is_empty() {
        return Err(TrialError::Empty);
    }
    let mut total = 0.0;
    for id in &front {
        total += overall_compression(baseline, trials.get(*id)?)?.overall;
    }
    Ok(total / front.len() as f64)
}

pub fn read_trials<R: Read>(source: R) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    reader
        .deserialize()
        .map(|r| r.map_err(TrialError::from))
        .collect()
}

/// Reads the first data row of a baseline CSV.
pub fn read_baseline<R: Read>(source: R) -> Result<BaselineRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let record = reader.deserialize().next().ok_or(TrialError::Empty)??;
    let b: BaselineRecord = record;
    if b.ram == 0 || b.rom == 0 || b.flops == 0 {
        return Err(TrialError::Division(
            "baseline metrics must be positive".into(),
        ));
    }
    Ok(b)
}
