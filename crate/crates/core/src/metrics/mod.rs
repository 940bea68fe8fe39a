//! Trial scoring metrics: EER, minimum detection cost, and DET curves.
//!
//! All three ride on one threshold sweep over the distinct scores (midpoints
//! plus infinite endpoints), with the accept rule `score >= threshold`. They
//! are rank statistics: any strictly increasing transform of the scores
//! leaves them unchanged.

use std::path::Path;

use crate::error::{Error, Result};

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enroll: String,
    pub test: String,
    pub target: bool,
    pub score: f64,
}

/// Detection cost parameters. The usual operating points are
/// `p_target` 0.01 and 0.001 with unit costs.
#[derive(Debug, Clone, Copy)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_false_alarm: f64,
    /// Divide by min(c_miss * p_target, c_fa * (1 - p_target)).
    pub normalize: bool,
}

impl DcfParams {
    pub fn at(p_target: f64) -> Self {
        DcfParams {
            p_target,
            c_miss: 1.0,
            c_false_alarm: 1.0,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "p_target {} outside (0, 1)",
                self.p_target
            )));
        }
        if self.c_miss <= 0.0 || self.c_false_alarm <= 0.0 {
            return Err(Error::Config("DCF costs must be positive".into()));
        }
        Ok(())
    }
}

/// One DET operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub fa: f64,
    pub miss: f64,
}

/// Operating points ordered by increasing threshold: false-alarm rate
/// non-increasing, miss rate non-decreasing.
#[derive(Debug, Clone)]
pub struct DetCurve {
    points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn points(&self) -> &[DetPoint] {
        &self.points
    }

    /// Text form: `fa miss fa_probit miss_probit` per line (probit-warped
    /// coordinates for the conventional DET axes, rates clamped away from
    /// 0 and 1 before warping).
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!(
                "{:.10} {:.10} {:.10} {:.10}\n",
                p.fa,
                p.miss,
                probit(p.fa.clamp(1e-12, 1.0 - 1e-12)),
                probit(p.miss.clamp(1e-12, 1.0 - 1e-12))
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Candidate thresholds: -inf, midpoints between adjacent distinct scores,
/// +inf. Exposed so independent sweeps enumerate the identical set.
pub fn candidate_thresholds(scores: &[ScoreRecord]) -> Vec<f64> {
    let mut all: Vec<f64> = scores.iter().map(|s| s.score).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut ths = Vec::with_capacity(all.len() + 1);
    ths.push(f64::NEG_INFINITY);
    for w in all.windows(2) {
        ths.push((w[0] + w[1]) / 2.0);
    }
    ths.push(f64::INFINITY);
    ths
}

fn split_scores(scores: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::NonFinite("trial score"));
        }
        if s.target {
            targets.push(s.score);
        } else {
            nontargets.push(s.score);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Metric(
            "need at least one target and one nontarget trial".into(),
        ));
    }
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nontargets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((targets, nontargets))
}

fn count_below(sorted: &[f64], threshold: f64) -> usize {
    // Number of scores strictly below the threshold.
    sorted.partition_point(|&v| v < threshold)
}

/// Shared sweep producing one operating point per candidate threshold.
fn operating_points(scores: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let (targets, nontargets) = split_scores(scores)?;
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    Ok(candidate_thresholds(scores)
        .into_iter()
        .map(|th| {
            let miss = count_below(&targets, th) as f64 / nt;
            let fa = (nontargets.len() - count_below(&nontargets, th)) as f64 / nn;
            DetPoint {
                threshold: th,
                fa,
                miss,
            }
        })
        .collect())
}

/// Equal error rate: the crossing of the false-alarm and miss curves over
/// the threshold sweep, linearly interpolated between adjacent operating
/// points when they do not meet exactly.
pub fn compute_eer(scores: &[ScoreRecord]) -> Result<f64> {
    let pts = operating_points(scores)?;
    eer_from_points(&pts)
}

pub(crate) fn eer_from_points(pts: &[DetPoint]) -> Result<f64> {
    // fa starts at 1 (accept everything) and falls; miss starts at 0 and
    // rises; the sign of (fa - miss) flips exactly once.
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.fa - a.miss;
        let db = b.fa - b.miss;
        if da == 0.0 {
            return Ok(a.fa);
        }
        if db == 0.0 {
            return Ok(b.fa);
        }
        if da > 0.0 && db < 0.0 {
            let t = da / (da - db);
            return Ok(a.fa + t * (b.fa - a.fa));
        }
    }
    Err(Error::Metric("no EER crossing found".into()))
}

/// Minimum detection cost over the threshold sweep.
pub fn compute_min_dcf(scores: &[ScoreRecord], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let pts = operating_points(scores)?;
    let mut best = f64::INFINITY;
    for p in &pts {
        let cost = params.c_miss * p.miss * params.p_target
            + params.c_false_alarm * p.fa * (1.0 - params.p_target);
        if cost < best {
            best = cost;
        }
    }
    if params.normalize {
        let floor =
            (params.c_miss * params.p_target).min(params.c_false_alarm * (1.0 - params.p_target));
        best /= floor;
    }
    Ok(best)
}

/// DET curve: one operating point per candidate threshold.
pub fn det_points(scores: &[ScoreRecord]) -> Result<DetCurve> {
    Ok(DetCurve {
        points: operating_points(scores)?,
    })
}

/// Inverse standard-normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9; plenty for DET plotting).
pub fn probit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Write one `enroll test score label` line per trial.
pub fn write_scores(scores: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&format!(
            "{} {} {:.12e} {}\n",
            s.enroll,
            s.test,
            s.score,
            if s.target { "target" } else { "nontarget" }
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::format(
                &p,
                format!("line {}: expected `enroll test score label`", lineno + 1),
            ));
        }
        let score: f64 = parts[2]
            .parse()
            .map_err(|_| Error::format(&p, format!("line {}: bad score", lineno + 1)))?;
        let target = match parts[3] {
            "target" => true,
            "nontarget" => false,
            other => {
                return Err(Error::format(
                    &p,
                    format!("line {}: bad label {other:?}", lineno + 1),
                ))
            }
        };
        out.push(ScoreRecord {
            enroll: parts[0].to_string(),
            test: parts[1].to_string(),
            target,
            score,
        });
    }
    Ok(out)
}
