//! Prefill latency harness and plot-data export for the data-order sweep.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::AttentionError;
use crate::feature_map::VectorMap;
use crate::linear_attention::{attend_featurized, scan_featurized, LaState};
use crate::prefix_attention::{two_pass_prefill, PlaInputs};
use crate::tensor::Tensor;
use crate::toy::{best_per_point, SweepRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impl {
    LaParallel,
    LaRecurrent,
    PlaTwoPass,
    NaiveSoftmaxOracle,
}

impl Impl {
    pub const ALL: [Impl; 4] = [Impl::LaParallel, Impl::LaRecurrent, Impl::PlaTwoPass, Impl::NaiveSoftmaxOracle];

    pub fn name(self) -> &'static str {
        match self {
            Impl::LaParallel => "la_parallel",
            Impl::LaRecurrent => "la_recurrent",
            Impl::PlaTwoPass => "pla_two_pass",
            Impl::NaiveSoftmaxOracle => "naive_softmax_oracle",
        }
    }
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Impl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Impl::ALL.into_iter().find(|i| i.name() == s).ok_or_else(|| format!("unknown implementation {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "impl")]
    pub imp: Impl,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub d: usize,
    #[serde(rename = "D")]
    pub big_d: usize,
    pub latency_ms: f64,
    pub trials: usize,
}

pub const MIN_TRIALS: usize = 5;

/// Featurized inputs for one batch element. Timing starts after this exists.
struct Workload {
    phi_q: Tensor<f64>,
    phi_k: Tensor<f64>,
    v: Tensor<f64>,
    raw: PlaInputs<f64>,
    phi_k_enc: Tensor<f64>,
}

fn workload(n: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Workload {
    let mut rand =
        |rows: usize| Tensor::new(&[rows, d], (0..rows * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).expect("shape");
    let (q, k, v, k_enc, v_enc) = (rand(n), rand(n), rand(n), rand(m), rand(m));
    let map = VectorMap::Taylor2;
    Workload {
        phi_q: map.apply_rows(&q),
        phi_k: map.apply_rows(&k),
        phi_k_enc: map.apply_rows(&k_enc),
        v: v.clone(),
        raw: PlaInputs { q_dec: q, k_dec: k, v_dec: v, k_enc, v_enc, pad_mask: vec![true; m] },
    }
}

fn eps() -> f64 {
    VectorMap::Taylor2.default_denom_eps()
}

/// Quadratic reference with the exact second-order Taylor weights
/// `1 + qᵀk + (qᵀk)²/2`, computed pairwise without any feature map.
pub fn naive_softmax_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, denom_eps: f64) -> Tensor<f64> {
    let (n, dv) = (q.rows(), v.cols());
    let mut y = Tensor::zeros(&[n, dv]);
    let mut acc = vec![0.0; dv];
    for i in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut den = 0.0;
        let qi = q.row(i);
        for j in 0..=i {
            let s: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            let w = 1.0 + s + 0.5 * s * s;
            den += w;
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * x;
            }
        }
        for (o, &a) in y.row_mut(i).iter_mut().zip(&acc) {
            *o = a / (den + denom_eps);
        }
    }
    y
}

fn run(imp: Impl, w: &Workload) -> Result<Tensor<f64>, AttentionError> {
    match imp {
        Impl::LaParallel => attend_featurized(&w.phi_q, &w.phi_k, &w.v, true, eps(), None),
        Impl::LaRecurrent => {
            let mut st = LaState::new(w.phi_k.cols(), w.v.cols());
            scan_featurized(&w.phi_q, &w.phi_k, &w.v, eps(), &mut st)
        }
        Impl::PlaTwoPass => {
            let mut st = LaState::new(w.phi_k.cols(), w.v.cols());
            for j in 0..w.phi_k_enc.rows() {
                st.absorb(w.phi_k_enc.row(j), w.raw.v_enc.row(j));
            }
            st.position = 0;
            scan_featurized(&w.phi_q, &w.phi_k, &w.v, eps(), &mut st)
        }
        Impl::NaiveSoftmaxOracle => Ok(naive_softmax_oracle(&w.raw.q_dec, &w.raw.k_dec, &w.v, eps())),
    }
}

fn encoder_len(imp: Impl, n: usize) -> usize {
    if imp == Impl::PlaTwoPass {
        n / 2
    } else {
        0
    }
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
}

/// Checks every implementation against its reference on a fresh workload:
/// the LA views and the quadratic oracle against each other, the two-pass
/// prefill against the library path. Returns the largest relative error.
pub fn cross_check(n: usize, d: usize, seed: u64) -> Result<f64, AttentionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = workload(n, 0, d, &mut rng);
    let base = run(Impl::LaParallel, &w)?;
    let mut worst = 0.0f64;
    for imp in [Impl::LaRecurrent, Impl::NaiveSoftmaxOracle] {
        worst = worst.max(max_rel(&run(imp, &w)?, &base));
    }
    let w = workload(n, n / 2, d, &mut rng);
    let (want, _) = two_pass_prefill(&w.raw, VectorMap::Taylor2)?;
    worst = worst.max(max_rel(&run(Impl::PlaTwoPass, &w)?, &want));
    Ok(worst)
}

/// Median wall-clock latency of `imp` per `N`, one record each. The batch is
/// processed element by element, single-threaded; one untimed warm-up
/// precedes the trials.
pub fn bench_prefill(
    imp: Impl,
    ns: &[usize],
    b: usize,
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>, AttentionError> {
    if trials < MIN_TRIALS {
        return Err(AttentionError::Invalid(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if d == 0 {
        return Err(AttentionError::Invalid("head dimension must be positive".into()));
    }
    let mut out = Vec::new();
    if b == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &n in ns {
        let m = encoder_len(imp, n);
        let batch: Vec<Workload> = (0..b).map(|_| workload(n, m, d, &mut rng)).collect();
        for w in &batch {
            run(imp, w)?;
        }
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            for w in &batch {
                std::hint::black_box(run(imp, w)?);
            }
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        out.push(BenchRecord {
            imp,
            n,
            m,
            b,
            d,
            big_d: VectorMap::Taylor2.output_dim(d),
            latency_ms: times[times.len() / 2],
            trials,
        });
    }
    Ok(out)
}

/// Least-squares slope of `log latency` against `log N`.
pub fn scaling_exponent(records: &[BenchRecord]) -> Option<f64> {
    if records.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = records.iter().map(|r| ((r.n as f64).ln(), r.latency_ms.ln())).collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn write_bench_csv<W: Write>(w: W, records: &[BenchRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_bench_csv<R: Read>(r: R) -> csv::Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelPoint {
    pub state_bytes: usize,
    pub causal: bool,
    pub d_model: usize,
    pub feature_dim: usize,
    pub value: f64,
}

/// The three panels: accuracy where `|A|` is longer, accuracy where `|B|` is
/// longer, and their difference (left minus middle).
#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Report {
    pub a_longer: Vec<PanelPoint>,
    pub b_longer: Vec<PanelPoint>,
    pub gap: Vec<PanelPoint>,
}

pub fn report_fig2(rows: &[SweepRow]) -> Fig2Report {
    let mut points = best_per_point(rows);
    points.sort_by_key(|p| (p.causal, p.state_bytes));
    let panel = |f: &dyn Fn(&SweepRow) -> f64| {
        points
            .iter()
            .map(|p| PanelPoint {
                state_bytes: p.state_bytes,
                causal: p.causal,
                d_model: p.d_model,
                feature_dim: p.feature_dim,
                value: f(p),
            })
            .collect()
    };
    Fig2Report {
        a_longer: panel(&|p| p.acc_b_smaller),
        b_longer: panel(&|p| p.acc_a_smaller),
        gap: panel(&|p| p.acc_b_smaller - p.acc_a_smaller),
    }
}

pub const PANEL_FILES: [&str; 3] = ["fig2_a_longer.csv", "fig2_b_longer.csv", "fig2_gap.csv"];

/// Writes the three panels into `dir` and returns their paths.
pub fn write_report(report: &Fig2Report, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, panel) in PANEL_FILES.iter().zip([&report.a_longer, &report.b_longer, &report.gap]) {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for p in panel {
            w.serialize(p)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
