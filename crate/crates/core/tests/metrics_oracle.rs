//! Exhaustive threshold-sweep oracle for the trial metrics. The oracle
//! enumerates every candidate threshold itself and counts errors by full
//! scans, so it shares no code with the sorted sweep it checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svkit_core::metrics::{compute_eer, compute_min_dcf, det_points, DcfParams, ScoreRecord};

fn oracle_thresholds(scores: &[ScoreRecord]) -> Vec<f64> {
    let mut vals: Vec<f64> = scores.iter().map(|s| s.score).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    for i in 1..vals.len() {
        out.push((vals[i - 1] + vals[i]) / 2.0);
    }
    out.push(f64::INFINITY);
    out
}

fn oracle_rates(scores: &[ScoreRecord], th: f64) -> (f64, f64) {
    let mut fa_count = 0usize;
    let mut miss_count = 0usize;
    let mut n_target = 0usize;
    let mut n_nontarget = 0usize;
    for s in scores {
        if s.target {
            n_target += 1;
            if s.score < th {
                miss_count += 1;
            }
        } else {
            n_nontarget += 1;
            if s.score >= th {
                fa_count += 1;
            }
        }
    }
    (
        fa_count as f64 / n_nontarget as f64,
        miss_count as f64 / n_target as f64,
    )
}

fn oracle_eer(scores: &[ScoreRecord]) -> f64 {
    let ths = oracle_thresholds(scores);
    let pts: Vec<(f64, f64)> = ths.iter().map(|&t| oracle_rates(scores, t)).collect();
    for i in 1..pts.len() {
        let (fa1, m1) = pts[i - 1];
        let (fa2, m2) = pts[i];
        let d1 = fa1 - m1;
        let d2 = fa2 - m2;
        if d1 == 0.0 {
            return fa1;
        }
        if d2 == 0.0 {
            return fa2;
        }
        if d1 > 0.0 && d2 < 0.0 {
            let t = d1 / (d1 - d2);
            return fa1 + t * (fa2 - fa1);
        }
    }
    panic!("oracle found no crossing");
}

fn oracle_min_dcf(scores: &[ScoreRecord], p: &DcfParams) -> f64 {
    let mut best = f64::INFINITY;
    for th in oracle_thresholds(scores) {
        let (fa, miss) = oracle_rates(scores, th);
        let cost = p.c_miss * miss * p.p_target + p.c_false_alarm * fa * (1.0 - p.p_target);
        best = best.min(cost);
    }
    if p.normalize {
        best /= (p.c_miss * p.p_target).min(p.c_false_alarm * (1.0 - p.p_target));
    }
    best
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let nt = rng.random_range(1..30);
    let nn = rng.random_range(1..30);
    let mut out = Vec::new();
    for i in 0..nt {
        // A coarse grid provokes ties between and within classes.
        let score = (rng.random_range(-10..=10) as f64) / 4.0 + rng.random_range(0..2) as f64;
        out.push(ScoreRecord {
            enroll: format!("e{i}"),
            test: format!("t{i}"),
            target: true,
            score,
        });
    }
    for i in 0..nn {
        let score = (rng.random_range(-10..=10) as f64) / 4.0;
        out.push(ScoreRecord {
            enroll: format!("e{i}"),
            test: format!("n{i}"),
            target: false,
            score,
        });
    }
    out
}

#[test]
fn sweep_agrees_with_oracle_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let dcf01 = DcfParams::at(0.01);
    let dcf001 = DcfParams::at(0.001);
    for _ in 0..1000 {
        let scores = random_scores(&mut rng);
        assert_eq!(compute_eer(&scores).unwrap(), oracle_eer(&scores));
        assert_eq!(
            compute_min_dcf(&scores, &dcf01).unwrap(),
            oracle_min_dcf(&scores, &dcf01)
        );
        assert_eq!(
            compute_min_dcf(&scores, &dcf001).unwrap(),
            oracle_min_dcf(&scores, &dcf001)
        );

        let det = det_points(&scores).unwrap();
        let ths = oracle_thresholds(&scores);
        assert_eq!(det.points().len(), ths.len());
        for (p, th) in det.points().iter().zip(&ths) {
            let (fa, miss) = oracle_rates(&scores, *th);
            assert_eq!(p.fa, fa);
            assert_eq!(p.miss, miss);
        }
    }
}

#[test]
fn hand_sweep_case() {
    let scores: Vec<ScoreRecord> = [
        (0.8, true),
        (0.6, true),
        (0.4, true),
        (0.7, false),
        (0.5, false),
        (0.3, false),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(score, target))| ScoreRecord {
        enroll: format!("e{i}"),
        test: format!("x{i}"),
        target,
        score,
    })
    .collect();
    let eer = compute_eer(&scores).unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(eer, oracle_eer(&scores));
    let d = compute_min_dcf(&scores, &DcfParams::at(0.01)).unwrap();
    assert!((d - oracle_min_dcf(&scores, &DcfParams::at(0.01))).abs() < 1e-15);
}
