//! Class-incremental accuracy bookkeeping: the per-task accuracy matrix,
//! pooled accuracy over observed classes, Average Accuracy and Average
//! Forgetting.
//!
//! Accuracies are kept as exact fractions (hit counts over test sizes, or
//! parsed decimal strings) so that metrics recomputed from persisted logs
//! match the originals bit for bit.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataset::{Dataset, TaskSchedule};
use crate::error::{Error, Result};

/// An accuracy as an exact non-negative fraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numer: u64,
    pub denom: u64,
}

impl Fraction {
    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 || numer > denom {
            return Err(Error::InvalidArgument(format!("accuracy {numer}/{denom} outside [0, 1]")));
        }
        Ok(Fraction { numer, denom })
    }

    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }

    fn ratio(&self) -> BigRational {
        BigRational::new(BigInt::from(self.numer), BigInt::from(self.denom))
    }

    /// Parse `a/b` or a plain decimal such as `0.9` exactly.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let bad = || Error::Format(format!("cannot read accuracy {t:?}"));
        if let Some((a, b)) = t.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Fraction::new(a, b);
        }
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        let digits = |s: &str| s.is_empty() || s.bytes().all(|b| b.is_ascii_digit());
        if !digits(int) || !digits(frac) {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Fraction::new(numer, denom)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

/// Accuracies measured after one training step (task boundary).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    /// `Acc^t_l` for tasks `t = 1..=l`.
    pub per_task: Vec<Fraction>,
    /// Pooled accuracy over all observed classes.
    pub observed: Fraction,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub steps: Vec<StepAccuracy>,
}

impl AccuracyRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Append the row for the next step, which must cover one more task.
    pub fn push(&mut self, step: StepAccuracy) -> Result<()> {
        if step.per_task.len() != self.steps.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "step {} must report {} task accuracies, got {}",
                self.steps.len() + 1,
                self.steps.len() + 1,
                step.per_task.len()
            )));
        }
        self.steps.push(step);
        Ok(())
    }

    /// `Acc^t_l` with 1-based `t ≤ l`.
    pub fn task_accuracy(&self, task: usize, step: usize) -> Option<&Fraction> {
        self.steps.get(step.checked_sub(1)?)?.per_task.get(task.checked_sub(1)?)
    }

    /// `F^t = max_l Acc^t_l − Acc^t_T` for each `t < T`.
    pub fn task_forgetting(&self) -> Vec<f64> {
        self.forgetting_ratios().iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect()
    }

    fn forgetting_ratios(&self) -> Vec<BigRational> {
        let t_final = self.steps.len();
        if t_final < 2 {
            return Vec::new();
        }
        (0..t_final - 1)
            .map(|t| {
                let series: Vec<BigRational> = self.steps[t..].iter().map(|s| s.per_task[t].ratio()).collect();
                let best = series.iter().max().expect("non-empty").clone();
                best - series.last().expect("non-empty")
            })
            .collect()
    }
}

/// `(1/T) Σ_t Acc^t` over pooled observed-class accuracies.
pub fn average_accuracy(record: &AccuracyRecord) -> Result<f64> {
    if record.steps.is_empty() {
        return Err(Error::InvalidArgument("accuracy record is empty".into()));
    }
    let sum = record
        .steps
        .iter()
        .fold(BigRational::zero(), |acc, s| acc + s.observed.ratio());
    let mean = sum / BigInt::from(record.steps.len());
    Ok(mean.to_f64().expect("finite"))
}

/// `(1/(T−1)) Σ_{t<T} F^t`; undefined for a single task.
pub fn average_forgetting(record: &AccuracyRecord) -> Result<f64> {
    if record.steps.len() < 2 {
        return Err(Error::InvalidArgument(
            "average forgetting needs at least two tasks".into(),
        ));
    }
    let f = record.forgetting_ratios();
    let n = f.len();
    let sum = f.into_iter().fold(BigRational::zero(), |a, b| a + b);
    Ok((sum / BigInt::from(n)).to_f64().expect("finite"))
}

fn count_hits(model: &Classifier, dataset: &Dataset, indices: &[usize], head: &[Option<usize>]) -> Result<(u64, u64)> {
    const CHUNK: usize = 256;
    let mut hits = 0u64;
    for chunk in indices.chunks(CHUNK) {
        let rows = dataset.image_rows(chunk)?;
        let preds = model.predict(&rows)?;
        for (&i, p) in chunk.iter().zip(preds) {
            let label = dataset.examples()[i].label;
            if head.get(label).copied().flatten() == Some(p) {
                hits += 1;
            }
        }
    }
    Ok((hits, indices.len() as u64))
}

/// Accuracy on each observed task's test split after `step` tasks, plus the
/// pooled accuracy over their union. Predictions are argmax over the head.
pub fn evaluate_step(model: &Classifier, dataset: &Dataset, schedule: &TaskSchedule, step: usize) -> Result<StepAccuracy> {
    if step == 0 || step > schedule.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 1..={}",
            schedule.num_tasks()
        )));
    }
    let needed: usize = schedule.class_groups()[..step].iter().map(Vec::len).sum();
    if model.current_classes() < needed {
        return Err(Error::Shape(format!(
            "head has {} classes, step {step} needs {needed}",
            model.current_classes()
        )));
    }
    let head = schedule.head_index(dataset.num_classes());
    let mut per_task = Vec::with_capacity(step);
    let (mut all_hits, mut all_total) = (0, 0);
    for t in 0..step {
        let (hits, total) = count_hits(model, dataset, schedule.test_indices(t), &head)?;
        per_task.push(Fraction::new(hits, total)?);
        all_hits += hits;
        all_total += total;
    }
    Ok(StepAccuracy {
        per_task,
        observed: Fraction::new(all_hits, all_total)?,
    })
}

/// Metrics CSV: one row per step with float and exact columns.
pub fn write_metrics_csv(record: &AccuracyRecord, num_tasks: usize, mut w: impl Write) -> Result<()> {
    let mut header = vec!["step".to_string(), "observed_acc".into(), "observed_exact".into()];
    for t in 1..=num_tasks {
        header.push(format!("task_{t}_acc"));
        header.push(format!("task_{t}_exact"));
    }
    writeln!(w, "{}", header.join(","))?;
    for (l, s) in record.steps.iter().enumerate() {
        let mut row = vec![(l + 1).to_string(), format!("{:.6}", s.observed.value()), s.observed.to_string()];
        for t in 0..num_tasks {
            match s.per_task.get(t) {
                Some(f) => {
                    row.push(format!("{:.6}", f.value()));
                    row.push(f.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a metrics CSV. Exact columns win; otherwise the decimal accuracy
/// columns are parsed as exact decimals.
pub fn read_metrics_csv(r: impl BufRead) -> Result<AccuracyRecord> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("metrics CSV is empty".into()))??;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let find = |name: &str| cols.iter().position(|c| c == name);
    let obs = (find("observed_exact"), find("observed_acc"));
    if obs.0.is_none() && obs.1.is_none() {
        return Err(Error::Format("metrics CSV lacks observed accuracy".into()));
    }
    let mut task_cols = Vec::new();
    for t in 1.. {
        let c = (find(&format!("task_{t}_exact")), find(&format!("task_{t}_acc")));
        if c.0.is_none() && c.1.is_none() {
            break;
        }
        task_cols.push(c);
    }
    let pick = |fields: &[&str], (exact, dec): (Option<usize>, Option<usize>)| -> Result<Option<Fraction>> {
        for i in [exact, dec].into_iter().flatten() {
            if let Some(v) = fields.get(i).map(|s| s.trim()).filter(|s| !s.is_empty()) {
                return Fraction::parse(v).map(Some);
            }
        }
        Ok(None)
    };
    let mut record = AccuracyRecord::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let observed = pick(&fields, obs)?.ok_or_else(|| Error::Format(format!("row {} lacks observed accuracy", n + 1)))?;
        let mut per_task = Vec::new();
        for c in &task_cols {
            match pick(&fields, *c)? {
                Some(f) => per_task.push(f),
                None => break,
            }
        }
        record
            .push(StepAccuracy { per_task, observed })
            .map_err(|e| e.context(format!("metrics CSV row {}", n + 1)))?;
    }
    if record.steps.is_empty() {
        return Err(Error::Format("metrics CSV has no rows".into()));
    }
    Ok(record)
}

/// Headline numbers persisted per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "Acc")]
    pub acc: f64,
    /// `None` for single-task runs.
    #[serde(rename = "F")]
    pub f: Option<f64>,
    pub observed_acc: Vec<f64>,
    pub task_forgetting: Vec<f64>,
}

impl Summary {
    pub fn from_record(record: &AccuracyRecord) -> Result<Self> {
        Ok(Summary {
            acc: average_accuracy(record)?,
            f: if record.num_steps() >= 2 {
                Some(average_forgetting(record)?)
            } else {
                None
            },
            observed_acc: record.steps.iter().map(|s| s.observed.value()).collect(),
            task_forgetting: record.task_forgetting(),
        })
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fraction::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fr(s: &str) -> Fraction {
        s.parse().unwrap()
    }

    fn record(rows: &[(&[&str], &str)]) -> AccuracyRecord {
        let mut r = AccuracyRecord::new();
        for (tasks, obs) in rows {
            r.push(StepAccuracy {
                per_task: tasks.iter().map(|s| fr(s)).collect(),
                observed: fr(obs),
            })
            .unwrap();
        }
        r
    }

    #[test]
    fn parses_exact_decimals_and_fractions() {
        assert_eq!(fr("0.9"), Fraction { numer: 9, denom: 10 });
        assert_eq!(fr("1"), Fraction { numer: 1, denom: 1 });
        assert_eq!(fr("3/8"), Fraction { numer: 3, denom: 8 });
        assert_eq!(fr(".25"), Fraction { numer: 25, denom: 100 });
        for bad in ["", ".", "1.5", "-0.1", "a", "1/0", "0.1.2"] {
            assert!(Fraction::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hand_computed_examples() {
        let r = record(&[(&["0.9"], "0.9"), (&["0.6", "0.8"], "0.7")]);
        assert_eq!(average_accuracy(&r).unwrap(), 0.8);
        assert_eq!(average_forgetting(&r).unwrap(), 0.3);
        let single = record(&[(&["0.75"], "0.75")]);
        assert_eq!(average_accuracy(&single).unwrap(), 0.75);
        assert!(average_forgetting(&single).is_err());
        assert!(average_accuracy(&AccuracyRecord::new()).is_err());
    }

    #[test]
    fn push_rejects_misshapen_rows() {
        let mut r = AccuracyRecord::new();
        assert!(r
            .push(StepAccuracy {
                per_task: vec![fr("1"), fr("1")],
                observed: fr("1")
            })
            .is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = record(&[(&["1/3"], "1/3"), (&["2/7", "5/9"], "7/16"), (&["0/7", "5/9", "1"], "0.5")]);
        let mut buf = Vec::new();
        write_metrics_csv(&r, 3, &mut buf).unwrap();
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r);
        assert_eq!(average_forgetting(&back).unwrap(), average_forgetting(&r).unwrap());
    }

    #[test]
    fn reads_hand_written_decimal_csv() {
        let csv = "step,observed_acc,task_1_acc,task_2_acc\n1,0.9,0.9,\n2,0.7,0.6,0.8\n";
        let r = read_metrics_csv(csv.as_bytes()).unwrap();
        assert_eq!(average_forgetting(&r).unwrap(), 0.3);
        assert_eq!(average_accuracy(&r).unwrap(), 0.8);
        assert!(read_metrics_csv("".as_bytes()).is_err());
        assert!(read_metrics_csv("step,observed_acc\n".as_bytes()).is_err());
    }
}
