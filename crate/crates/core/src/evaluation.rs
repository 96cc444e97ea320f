//! Correlation and error metrics between predicted and ground-truth MOS.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::MosScaler;

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min {
        return Err(Error::EmptyPairs);
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `b1 * (0.5 - 1 / (1 + exp(b2 * (x - b3)))) + b4`.
pub fn logistic(b: &[f64; 4], x: f64) -> f64 {
    b[0] * (0.5 - 1.0 / (1.0 + (b[1] * (x - b[2])).exp())) + b[3]
}

fn sse(b: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (yi - logistic(b, xi)).powi(2)).sum()
}

/// Solves a 4x4 system by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut r: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        r.swap(c, p);
        for i in c + 1..4 {
            let f = a[i][c] / a[c][c];
            for j in c..4 {
                a[i][j] -= f * a[c][j];
            }
            r[i] -= f * r[c];
        }
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let s: f64 = (i + 1..4).map(|j| a[i][j] * x[j]).sum();
        x[i] = (r[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least-squares fit of [`logistic`] by Gauss-Newton with step halving.
pub fn fit_logistic(pred: &[f64], truth: &[f64]) -> Result<[f64; 4]> {
    check_lengths(pred, truth, 2)?;
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mp = mean(pred);
    let sd = (pred.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / pred.len() as f64).sqrt();
    if sd == 0.0 || hi == lo {
        return Err(Error::ConstantInput);
    }
    let mut b = [hi - lo, 1.0 / sd, mp, mean(truth)];
    let mut cost = sse(&b, pred, truth);
    for _ in 0..200 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&x, &y) in pred.iter().zip(truth) {
            let s = 1.0 / (1.0 + (b[1] * (x - b[2])).exp());
            let ds = s * (1.0 - s);
            let j = [0.5 - s, b[0] * ds * (x - b[2]), -b[0] * ds * b[1], 1.0];
            let r = y - logistic(&b, x);
            for u in 0..4 {
                jtr[u] += j[u] * r;
                for v in 0..4 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let Some(step) = solve4(jtj, jtr) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let cand: [f64; 4] = std::array::from_fn(|i| b[i] + t * step[i]);
            let c = sse(&cand, pred, truth);
            if c.is_finite() && c <= cost {
                b = cand;
                cost = c;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let norm = step.iter().map(|v| (t * v).powi(2)).sum::<f64>().sqrt();
        if !accepted || norm < 1e-10 {
            break;
        }
    }
    Ok(b)
}

/// Pearson correlation, optionally after a fitted logistic mapping of `pred`.
pub fn plcc(pred: &[f64], truth: &[f64], logistic_map: bool) -> Result<(f64, Option<[f64; 4]>)> {
    check_lengths(pred, truth, 2)?;
    if !logistic_map {
        return Ok((pearson(pred, truth)?, None));
    }
    let b = fit_logistic(pred, truth)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| logistic(&b, x)).collect();
    Ok((pearson(&mapped, truth)?, Some(b)))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// Kendall tau-b.
pub fn krcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let (mut c, mut d, mut tp, mut tt) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let a = pred[i].total_cmp(&pred[j]);
            let b = truth[i].total_cmp(&truth[j]);
            match (a, b) {
                (Ordering::Equal, Ordering::Equal) => {}
                (Ordering::Equal, _) => tp += 1,
                (_, Ordering::Equal) => tt += 1,
                _ if a == b => c += 1,
                _ => d += 1,
            }
        }
    }
    let den = (((c + d + tp) as f64) * ((c + d + tt) as f64)).sqrt();
    if den == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok(((c as f64 - d as f64) / den).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Logistic-mapped PLCC.
    pub plcc: f64,
    pub plcc_raw: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
    pub logistic_params: Option<[f64; 4]>,
    /// `(predicted, ground truth)` in raw MOS units.
    pub pairs: Vec<(f64, f64)>,
    /// Fold scaling used to normalize the scatter output.
    pub scaler: Option<MosScaler>,
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Result<Self> {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        check_lengths(&pred, &truth, 2)?;
        let (plcc_raw, _) = plcc(&pred, &truth, false)?;
        let (plcc_log, params) = match plcc(&pred, &truth, true) {
            Ok(v) => v,
            Err(Error::ConstantInput) => (plcc_raw, None),
            Err(e) => return Err(e),
        };
        Ok(Self {
            plcc: plcc_log,
            plcc_raw,
            srcc: srcc(&pred, &truth)?,
            krcc: krcc(&pred, &truth)?,
            rmse: rmse(&pred, &truth)?,
            n: pairs.len(),
            logistic_params: params,
            pairs,
            scaler: None,
        })
    }

    pub fn with_scaler(mut self, scaler: MosScaler) -> Self {
        self.scaler = Some(scaler);
        self
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s, "");
        s
    }

    fn write_kv(&self, s: &mut String, prefix: &str) {
        let _ = writeln!(s, "{prefix}n={}", self.n);
        let _ = writeln!(s, "{prefix}plcc={:.10}", self.plcc);
        let _ = writeln!(s, "{prefix}plcc_raw={:.10}", self.plcc_raw);
        let _ = writeln!(s, "{prefix}srcc={:.10}", self.srcc);
        let _ = writeln!(s, "{prefix}krcc={:.10}", self.krcc);
        let _ = writeln!(s, "{prefix}rmse={:.10}", self.rmse);
        if let Some(b) = self.logistic_params {
            let _ = writeln!(s, "{prefix}logistic={:.10e},{:.10e},{:.10e},{:.10e}", b[0], b[1], b[2], b[3]);
        }
    }

    pub fn save_kv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }
}

/// Writes `predicted,ground_truth` rows normalized by the report's scaling.
pub fn scatter_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    if report.pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let norm = |v: f64| report.scaler.map_or(v, |s| s.scale(v));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["predicted", "ground_truth"]).map_err(csv_err)?;
    for &(p, t) in &report.pairs {
        w.write_record([format!("{:.17e}", norm(p)), format!("{:.17e}", norm(t))])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `predicted,ground_truth` CSV.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        predicted: f64,
        ground_truth: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok((row.predicted, row.ground_truth))
        })
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{other:?}")),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Cross-validation summary: metrics over all test pairs pooled, plus one
/// entry per fold.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub pooled: EvalReport,
    pub folds: Vec<(usize, std::result::Result<EvalReport, String>)>,
}

impl CvReport {
    pub fn new(folds: &[(usize, Vec<(f64, f64)>)]) -> Result<Self> {
        let all: Vec<(f64, f64)> = folds.iter().flat_map(|f| f.1.iter().copied()).collect();
        let pooled = EvalReport::from_pairs(all)?;
        let folds = folds
            .iter()
            .map(|(i, pairs)| (*i, EvalReport::from_pairs(pairs.clone()).map_err(|e| e.to_string())))
            .collect();
        Ok(Self { pooled, folds })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.pooled.write_kv(&mut s, "pooled.");
        for (i, r) in &self.folds {
            match r {
                Ok(r) => r.write_kv(&mut s, &format!("fold{i}.")),
                Err(e) => {
                    let _ = writeln!(s, "fold{i}.error={e}");
                }
            }
        }
        s
    }
}
