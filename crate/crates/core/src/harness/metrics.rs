//! Scores, robust aggregates and the evaluation log.

use std::fmt::Write as _;
use std::io::Write;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(score − random) / (expert − random)`.
pub fn normalized_score(score: f64, expert: f64, random: f64) -> Result<f64> {
    if expert == random {
        return Err(Error::invalid(format!(
            "expert and random reference scores coincide ({expert})"
        )));
    }
    Ok((score - random) / (expert - random))
}

/// Mean of the middle half: `⌊n/4⌋` samples are trimmed from each end.
pub fn iqm(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("IQM of an empty sample"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(trimmed_mean(&s))
}

fn trimmed_mean(sorted: &[f64]) -> f64 {
    let cut = sorted.len() / 4;
    let mid = &sorted[cut..sorted.len() - cut];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// IQM with a percentile-bootstrap interval at `level` (e.g. 0.95).
pub fn iqm_ci(samples: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64, f64)> {
    let point = iqm(samples)?;
    if n_boot == 0 || !(0.0..1.0).contains(&level) {
        return Err(Error::invalid(format!(
            "bootstrap needs n_boot > 0 and level in [0, 1), got {n_boot}, {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut draw = vec![0.0; n];
    let mut stats: Vec<f64> = (0..n_boot)
        .map(|_| {
            draw.iter_mut().for_each(|x| *x = samples[rng.gen_range(0..n)]);
            draw.sort_by(f64::total_cmp);
            trimmed_mean(&draw)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let pick = |q: f64| stats[((q * (n_boot - 1) as f64).round() as usize).min(n_boot - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok((point, pick(tail), pick(1.0 - tail)))
}

/// One evaluation of one task at one point of training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub phase: String,
    pub task_id: String,
    pub success_rate: f64,
    pub mean_return: f64,
    pub normalized_score: f64,
}

/// Append-only evaluation history plus the step at which each training block ended.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EvalRecord>,
    pub block_ends: IndexMap<String, u64>,
}

pub const CSV_HEADER: &str = "step,phase,task_id,success_rate,mean_return,normalized_score";

impl MetricsLog {
    pub fn push(&mut self, r: EvalRecord) {
        self.records.push(r);
    }

    pub fn mark_block_end(&mut self, task_id: &str, step: u64) {
        self.block_ends.insert(task_id.to_string(), step);
    }

    pub fn final_step(&self) -> Option<u64> {
        self.records.iter().map(|r| r.step).max()
    }

    pub fn at(&self, step: u64, task_id: &str) -> Option<&EvalRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.step == step && r.task_id == task_id)
    }

    /// Records of the final evaluation point.
    pub fn last_point(&self) -> Vec<&EvalRecord> {
        match self.final_step() {
            Some(s) => self.records.iter().filter(|r| r.step == s).collect(),
            None => Vec::new(),
        }
    }

    /// Mean success over `tasks` at `step`; errors if any is missing.
    pub fn mean_success(&self, step: u64, tasks: &[String]) -> Result<f64> {
        if tasks.is_empty() {
            return Err(Error::invalid("mean over no tasks"));
        }
        let mut total = 0.0;
        for t in tasks {
            total += self
                .at(step, t)
                .ok_or_else(|| Error::invalid(format!("no evaluation of `{t}` at step {step}")))?
                .success_rate;
        }
        Ok(total / tasks.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.step, r.phase, r.task_id, r.success_rate, r.mean_return, r.normalized_score
            )?;
        }
        Ok(())
    }

    /// Fixed-width table of the last evaluation point, plus forgetting where defined.
    pub fn summary(&self) -> String {
        let forget = forgetting(self).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>10} {:>10}",
            "task", "success", "return", "norm", "forget"
        );
        let mut succ = Vec::new();
        for r in self.last_point() {
            let f = forget.get(&r.task_id).map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{:<16} {:>8.3} {:>10.3} {:>10.3} {:>10}",
                r.task_id, r.success_rate, r.mean_return, r.normalized_score, f
            );
            succ.push(r.success_rate);
        }
        if !succ.is_empty() {
            let mean = succ.iter().sum::<f64>() / succ.len() as f64;
            let _ = writeln!(s, "{:<16} {:>8.3}", "mean", mean);
        }
        s
    }
}

/// Success right after each task's block minus success at the end of the log.
pub fn forgetting(log: &MetricsLog) -> Result<IndexMap<String, f64>> {
    let end = log
        .final_step()
        .ok_or_else(|| Error::invalid("forgetting of an empty log"))?;
    let mut out = IndexMap::new();
    for (task, &step) in &log.block_ends {
        let missing = |s: u64| Error::invalid(format!("no evaluation of `{task}` at step {s}"));
        let after = log.at(step, task).ok_or_else(|| missing(step))?.success_rate;
        let last = log.at(end, task).ok_or_else(|| missing(end))?.success_rate;
        out.insert(task.clone(), after - last);
    }
    Ok(out)
}
