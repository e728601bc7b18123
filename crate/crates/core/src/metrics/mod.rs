//! Displacement metrics, best-of-N selection, latency timing and report
//! aggregation. All distances are in the units of the trajectories passed
//! in, kilometers for denormalized predictions.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};

/// Minimum number of timed runs accepted by [`measure_generation_time`].
pub const MIN_TIMED_RUNS: usize = 10;

const TIME_TOLERANCE: f64 = 1e-9;

/// Per-step Euclidean distances between aligned trajectories.
pub fn displacements(pred: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "displacement",
            format!("prediction has {} points, truth has {}", pred.len(), truth.len()),
        ));
    }
    pred.points()
        .iter()
        .zip(truth.points())
        .map(|(p, t)| {
            if (p.t - t.t).abs() > TIME_TOLERANCE * t.t.abs().max(1.0) {
                return Err(Error::shape(
                    "displacement",
                    format!("timestamps differ: {} vs {}", p.t, t.t),
                ));
            }
            Ok(p.distance(t))
        })
        .collect()
}

pub fn ade(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    let d = displacements(pred, truth)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub fn fde(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    let d = displacements(pred, truth)?;
    Ok(*d.last().expect("trajectories are nonempty"))
}

/// How best-of-N picks among candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Minimum ADE and minimum FDE, possibly from different candidates.
    #[default]
    Independent,
    /// Both metrics from the single candidate with the lowest ADE.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub ade: f64,
    pub fde: f64,
    /// Per-step displacements of the lowest-ADE candidate, so `ade` is
    /// their mean. Under [`Selection::Joint`] `fde` is their last entry;
    /// under independent selection `fde` can be smaller.
    pub per_step_ade: Vec<f64>,
    /// Seconds per predicted step; zero until a caller times the prediction.
    pub gen_time_per_step: f64,
}

pub fn best_of_n(candidates: &[Trajectory], truth: &Trajectory) -> Result<EvalRecord> {
    best_of_n_with(candidates, truth, Selection::Independent)
}

pub fn best_of_n_with(candidates: &[Trajectory], truth: &Trajectory, selection: Selection) -> Result<EvalRecord> {
    if candidates.is_empty() {
        return Err(Error::Empty("best-of-n candidates".into()));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut min_fde = f64::INFINITY;
    for c in candidates {
        let d = displacements(c, truth)?;
        let a = d.iter().sum::<f64>() / d.len() as f64;
        min_fde = min_fde.min(d[d.len() - 1]);
        if best.as_ref().is_none_or(|(b, _)| a < *b) {
            best = Some((a, d));
        }
    }
    let (ade, per_step_ade) = best.expect("at least one candidate");
    let fde = match selection {
        Selection::Independent => min_fde,
        Selection::Joint => per_step_ade[per_step_ade.len() - 1],
    };
    Ok(EvalRecord {
        ade,
        fde,
        per_step_ade,
        gen_time_per_step: 0.0,
    })
}

/// Seconds per predicted step over the timed runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

/// Time `runs` calls of `predict`, cycling through `inputs`, after one
/// untimed warm-up call. Each wall-clock duration is divided by `steps`.
pub fn measure_generation_time<I, T>(
    mut predict: impl FnMut(&I) -> Result<T>,
    inputs: &[I],
    steps: usize,
    runs: usize,
) -> Result<Timing> {
    if inputs.is_empty() {
        return Err(Error::Empty("timing inputs".into()));
    }
    if steps == 0 {
        return Err(Error::Config("cannot time a prediction of zero steps".into()));
    }
    if runs < MIN_TIMED_RUNS {
        return Err(Error::Config(format!(
            "timing needs at least {} runs, got {}",
            MIN_TIMED_RUNS, runs
        )));
    }
    std::hint::black_box(predict(&inputs[0])?);
    let mut per_step = Vec::with_capacity(runs);
    for i in 0..runs {
        let input = &inputs[i % inputs.len()];
        let start = Instant::now();
        std::hint::black_box(predict(input)?);
        per_step.push(start.elapsed().as_secs_f64() / steps as f64);
    }
    Ok(Timing {
        mean: per_step.iter().sum::<f64>() / runs as f64,
        min: per_step.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_step.iter().copied().fold(0.0, f64::max),
        runs,
    })
}

/// Mean and sample standard deviation (`n - 1` denominator, zero for a
/// single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("values to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(MeanStd { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub ade: MeanStd,
    pub fde: MeanStd,
    pub gen_time_per_step: MeanStd,
    /// Mean over cases of each step's displacement.
    pub per_step_ade: Vec<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("evaluation records".into()))?;
    let steps = first.per_step_ade.len();
    if let Some(r) = records.iter().find(|r| r.per_step_ade.len() != steps) {
        return Err(Error::shape(
            "summarize",
            format!("per-step curves of {} and {} entries", steps, r.per_step_ade.len()),
        ));
    }
    let column = |f: fn(&EvalRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let mut per_step_ade = vec![0.0; steps];
    for r in records {
        for (acc, v) in per_step_ade.iter_mut().zip(&r.per_step_ade) {
            *acc += v;
        }
    }
    for v in &mut per_step_ade {
        *v /= records.len() as f64;
    }
    Ok(Summary {
        count: records.len(),
        ade: MeanStd::of(&column(|r| r.ade))?,
        fde: MeanStd::of(&column(|r| r.fde))?,
        gen_time_per_step: MeanStd::of(&column(|r| r.gen_time_per_step))?,
        per_step_ade,
    })
}

/// One row of a report table: a method evaluated on a dataset.
#[derive(Clone, Debug)]
pub struct ReportRow<'a> {
    pub method: &'a str,
    pub dataset: &'a str,
    pub summary: &'a Summary,
}

/// Method-by-dataset tables of ADE and FDE (`mean ± std`, km) and the mean
/// generation time per step.
pub fn format_summary_table(rows: &[ReportRow<'_>]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let lookup = |m: &str, d: &str| rows.iter().find(|r| r.method == m && r.dataset == d).map(|r| r.summary);
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let tables: [(&str, fn(&Summary) -> String); 3] = [
        ("ADE (km, mean ± sample std)", |s| {
            format!("{:.3} ± {:.3}", s.ade.mean, s.ade.std)
        }),
        ("FDE (km, mean ± sample std)", |s| {
            format!("{:.3} ± {:.3}", s.fde.mean, s.fde.std)
        }),
        ("generation time per step (s)", |s| {
            format!("{:.4}", s.gen_time_per_step.mean)
        }),
    ];
    for (i, (title, cell)) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{}", title);
        let _ = write!(out, "{:<width$}", "method");
        for d in &datasets {
            let _ = write!(out, " | {:>15}", d);
        }
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "{:<width$}", m);
            for d in &datasets {
                let text = lookup(m, d).map(cell).unwrap_or_else(|| "-".into());
                let _ = write!(out, " | {:>15}", text);
            }
            out.push('\n');
        }
    }
    out
}

/// Per-step ADE curves as CSV: a `step` column then one column per label.
pub fn per_step_csv(curves: &[(&str, &[f64])]) -> Result<String> {
    let steps = curves.first().map_or(0, |c| c.1.len());
    if curves.iter().any(|c| c.1.len() != steps) {
        return Err(Error::shape("per_step_csv", "curves differ in length"));
    }
    let mut out = String::from("step");
    for (label, _) in curves {
        if label.contains([',', '"', '\n']) {
            return Err(Error::Config(format!("curve label {:?} cannot be a CSV header", label)));
        }
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for s in 0..steps {
        let _ = write!(out, "{}", s + 1);
        for (_, c) in curves {
            let _ = write!(out, ",{}", c[s]);
        }
        out.push('\n');
    }
    Ok(out)
}
