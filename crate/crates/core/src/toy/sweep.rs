//! Grid sweep over model width, feature dimension and causality, scoring
//! each point by its best run over learning rates and seeds.

use std::io::{Read, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::model::ToyConfig;
use super::train::{eval_sliced, train, AdamW, TrainRun};
use crate::error::ToyError;
use crate::set_disjointness::{gen_mixture, Profile, SdInstance, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub dims: Vec<usize>,
    pub features: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_scale: f64,
    pub eval_scale: f64,
    pub data_seed: u64,
    pub vocab: usize,
    pub profile: Profile,
}

impl SweepSpec {
    /// Single-core budget of about an hour for both causality modes.
    pub fn desk() -> Self {
        Self {
            dims: vec![16, 24, 32],
            features: vec![4, 8],
            lrs: vec![1e-4, 5e-4, 8e-4],
            seeds: vec![0, 1],
            epochs: 9,
            batch_size: 8,
            train_scale: 0.01,
            eval_scale: 0.05,
            data_seed: 0,
            vocab: Profile::Desk.vocab(),
            profile: Profile::Desk,
        }
    }

    /// Full grid, data and epoch count; far beyond a single core.
    pub fn paper() -> Self {
        Self {
            dims: vec![36, 48, 64, 96, 128],
            features: vec![4, 8, 16, 24],
            epochs: 48,
            batch_size: 64,
            train_scale: 1.0,
            eval_scale: 1.0,
            vocab: Profile::Paper.vocab(),
            profile: Profile::Paper,
            ..Self::desk()
        }
    }

    pub fn points(&self, modes: &[bool]) -> Vec<ToyConfig> {
        let mut out = Vec::new();
        for &causal in modes {
            for &d in &self.dims {
                for &f in &self.features {
                    out.push(ToyConfig::new(d, f, causal, self.vocab));
                }
            }
        }
        out
    }

    pub fn runs(&self, modes: &[bool]) -> Vec<TrainRun> {
        let mut out = Vec::new();
        for config in self.points(modes) {
            for &lr in &self.lrs {
                for &seed in &self.seeds {
                    out.push(TrainRun {
                        config: config.clone(),
                        optimizer: AdamW::new(lr),
                        seed,
                        epochs: self.epochs,
                        batch_size: self.batch_size,
                    });
                }
            }
        }
        out
    }

    pub fn data(&self) -> Result<(Vec<SdInstance>, Vec<SdInstance>), ToyError> {
        let gen = |split, scale, seed| {
            gen_mixture(self.profile, split, scale, Some(self.vocab), seed).map_err(|e| ToyError::Config(e.to_string()))
        };
        Ok((gen(Split::Train, self.train_scale, self.data_seed)?, gen(Split::Eval, self.eval_scale, self.data_seed + 1)?))
    }
}

/// One CSV row: a single run, or the best run of a grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub state_bytes: usize,
    pub causal: bool,
    pub d_model: usize,
    pub feature_dim: usize,
    pub lr: f64,
    pub seed: u64,
    pub acc_overall: f64,
    /// Accuracy where `|A| < |B|`.
    pub acc_a_smaller: f64,
    /// Accuracy where `|B| < |A|`.
    pub acc_b_smaller: f64,
    pub failed: bool,
}

impl SweepRow {
    pub fn order_gap(&self) -> f64 {
        self.acc_a_smaller - self.acc_b_smaller
    }

    fn key(&self) -> (usize, usize, usize, bool) {
        (self.state_bytes, self.d_model, self.feature_dim, self.causal)
    }
}

pub fn run_one(run: &TrainRun, train_data: &[SdInstance], eval_data: &[SdInstance]) -> Result<SweepRow, ToyError> {
    let out = train::<f32>(run, train_data)?;
    let mut row = SweepRow {
        state_bytes: run.config.state_size_bytes(4),
        causal: run.config.causal,
        d_model: run.config.d_model,
        feature_dim: run.config.feature_dim,
        lr: run.optimizer.lr,
        seed: run.seed,
        acc_overall: 0.0,
        acc_a_smaller: 0.0,
        acc_b_smaller: 0.0,
        failed: out.diverged,
    };
    if !out.diverged {
        let acc = eval_sliced(&out.model, eval_data)?;
        row.acc_overall = acc.overall;
        row.acc_a_smaller = acc.a_smaller;
        row.acc_b_smaller = acc.b_smaller;
    }
    Ok(row)
}

/// Trains every run on `threads` workers; rows come back in run order.
pub fn run_all(
    runs: &[TrainRun],
    train_data: &[SdInstance],
    eval_data: &[SdInstance],
    threads: usize,
    progress: &(dyn Fn(&SweepRow) + Sync),
) -> Result<Vec<SweepRow>, ToyError> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<SweepRow, ToyError>>>> = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(run) = runs.get(i) else { break };
                let r = run_one(run, train_data, eval_data);
                if let Ok(row) = &r {
                    progress(row);
                }
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("result lock").into_iter().map(|r| r.expect("every run finished")).collect()
}

/// Best non-failed row per grid point by overall accuracy; a point whose runs
/// all failed keeps one failed row. Points are kept in first-seen order.
pub fn best_per_point(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut out: Vec<SweepRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|p| p.key() == r.key()) {
            None => out.push(r.clone()),
            Some(p) => {
                if (p.failed && !r.failed) || (!r.failed && r.acc_overall > p.acc_overall) {
                    *p = r.clone();
                }
            }
        }
    }
    out
}

/// Both modes of the sweep: per-run rows and per-point best rows.
pub fn fig2_sweep(
    spec: &SweepSpec,
    modes: &[bool],
    threads: usize,
    progress: &(dyn Fn(&SweepRow) + Sync),
) -> Result<(Vec<SweepRow>, Vec<SweepRow>), ToyError> {
    let (train_data, eval_data) = spec.data()?;
    let runs = run_all(&spec.runs(modes), &train_data, &eval_data, threads, progress)?;
    let points = best_per_point(&runs);
    Ok((runs, points))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderGaps {
    pub causal_mean_gap: f64,
    pub noncausal_mean_gap: f64,
    /// Accuracy on the `|B| < |A|` slice at the smallest state size of each mode.
    pub causal_b_smaller_at_min: f64,
    pub noncausal_b_smaller_at_min: f64,
}

pub fn order_gaps(points: &[SweepRow]) -> Result<OrderGaps, ToyError> {
    let summarize = |causal: bool| -> Result<(f64, f64), ToyError> {
        let rows: Vec<&SweepRow> = points.iter().filter(|r| r.causal == causal && !r.failed).collect();
        let min = rows.iter().min_by_key(|r| r.state_bytes).ok_or(ToyError::EmptySlice(if causal {
            "causal"
        } else {
            "non-causal"
        }))?;
        let gap = rows.iter().map(|r| r.order_gap()).sum::<f64>() / rows.len() as f64;
        Ok((gap, min.acc_b_smaller))
    };
    let (cg, cm) = summarize(true)?;
    let (ng, nm) = summarize(false)?;
    Ok(OrderGaps { causal_mean_gap: cg, noncausal_mean_gap: ng, causal_b_smaller_at_min: cm, noncausal_b_smaller_at_min: nm })
}

pub fn write_rows<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), ToyError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| ToyError::Checkpoint(e.to_string()))?;
    }
    out.flush().map_err(|e| ToyError::Checkpoint(e.to_string()))
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<SweepRow>, ToyError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .map_err(|e| ToyError::Config(format!("malformed sweep CSV: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(state_bytes: usize, causal: bool, lr: f64, acc: f64, failed: bool) -> SweepRow {
        SweepRow {
            state_bytes,
            causal,
            d_model: state_bytes,
            feature_dim: 4,
            lr,
            seed: 0,
            acc_overall: acc,
            acc_a_smaller: acc + 0.1,
            acc_b_smaller: acc - 0.1,
            failed,
        }
    }

    #[test]
    fn desk_grid_shape() {
        let s = SweepSpec::desk();
        assert_eq!(s.points(&[true, false]).len(), 12);
        assert_eq!(s.runs(&[true, false]).len(), 72);
        assert_eq!(s.lrs.len() * s.seeds.len(), 6);
        assert!(s.points(&[true]).iter().all(|c| c.causal && c.vocab == 256));
    }

    #[test]
    fn best_run_excludes_failures() {
        let rows = vec![
            row(10, true, 1e-4, 0.3, false),
            row(10, true, 5e-4, 0.9, true),
            row(10, true, 8e-4, 0.5, false),
            row(10, false, 1e-4, 0.2, true),
            row(20, true, 1e-4, 0.7, false),
        ];
        let best = best_per_point(&rows);
        assert_eq!(best.len(), 3);
        assert_eq!(best[0].lr, 8e-4);
        assert!(best[1].failed);
        assert_eq!(best[2].acc_overall, 0.7);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(3280, true, 1e-4, 0.25, false), row(10768, false, 8e-4, 1.0 / 3.0, true)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
        assert!(read_rows("state_bytes,causal\nx,true\n".as_bytes()).is_err());
    }

    #[test]
    fn gap_summary() {
        let mut c = row(10, true, 1e-4, 0.5, false);
        c.acc_a_smaller = 0.9;
        c.acc_b_smaller = 0.3;
        let mut n = row(10, false, 1e-4, 0.5, false);
        n.acc_a_smaller = 0.6;
        n.acc_b_smaller = 0.5;
        let mut c2 = row(20, true, 1e-4, 0.5, false);
        c2.acc_a_smaller = 0.5;
        c2.acc_b_smaller = 0.5;
        let g = order_gaps(&[c, n, c2]).unwrap();
        assert!((g.causal_mean_gap - 0.3).abs() < 1e-12);
        assert!((g.noncausal_mean_gap - 0.1).abs() < 1e-12);
        assert_eq!((g.causal_b_smaller_at_min, g.noncausal_b_smaller_at_min), (0.3, 0.5));
        assert!(order_gaps(&[row(1, true, 1e-4, 0.1, false)]).is_err());
    }

    #[test]
    fn tiny_sweep_runs_end_to_end() {
        let spec = SweepSpec {
            dims: vec![8],
            features: vec![2],
            lrs: vec![1e-3],
            seeds: vec![0],
            epochs: 1,
            batch_size: 8,
            train_scale: 0.0005,
            eval_scale: 0.005,
            vocab: 40,
            profile: Profile::Desk,
            data_seed: 3,
        };
        // Desk tuples need halves of at least 64 elements.
        assert!(spec.data().is_err());
        let spec = SweepSpec { vocab: 132, ..spec };
        let (runs, points) = fig2_sweep(&spec, &[true, false], 2, &|_| {}).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| (0.0..=1.0).contains(&p.acc_overall)));
    }
}
