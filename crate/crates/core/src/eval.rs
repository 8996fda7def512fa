//! Displacement metrics, density buckets, efficiency accounting and the
//! prediction file format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::TargetPrediction;
use crate::scene::{Scene, TrackId};

/// Final-step error above which a prediction counts as a miss, meters.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Agent-count bucket edges; the last bucket is open-ended.
pub const DENSITY_BUCKETS: [usize; 6] = [0, 190, 290, 390, 490, 590];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth has no valid future step")]
    EmptyTruth,
    #[error("no hypotheses")]
    NoHypotheses,
    #[error("empty batch")]
    EmptyBatch,
    #[error("hypothesis has {got} steps, truth has {want}")]
    Length { got: usize, want: usize },
    #[error("prediction file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Trajectory = Vec<[f64; 2]>;
pub type Truth = Vec<Option<[f64; 2]>>;

fn check(hyps: &[Trajectory], truth: &[Option<[f64; 2]>]) -> Result<(), EvalError> {
    if hyps.is_empty() {
        return Err(EvalError::NoHypotheses);
    }
    if truth.iter().all(Option::is_none) {
        return Err(EvalError::EmptyTruth);
    }
    for h in hyps {
        if h.len() < truth.len() {
            return Err(EvalError::Length {
                got: h.len(),
                want: truth.len(),
            });
        }
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Best-of-K mean displacement over valid frames.
pub fn min_ade(hyps: &[Trajectory], truth: &[Option<[f64; 2]>]) -> Result<f64, EvalError> {
    check(hyps, truth)?;
    Ok(hyps
        .iter()
        .map(|h| {
            let (s, n) = truth
                .iter()
                .zip(h)
                .filter_map(|(g, p)| g.map(|g| dist(*p, g)))
                .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
            s / n as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Error of every hypothesis at the last valid frame.
pub fn final_errors(hyps: &[Trajectory], truth: &[Option<[f64; 2]>]) -> Result<Vec<f64>, EvalError> {
    check(hyps, truth)?;
    let (t, g) = truth
        .iter()
        .enumerate()
        .rev()
        .find_map(|(t, g)| g.map(|g| (t, g)))
        .ok_or(EvalError::EmptyTruth)?;
    Ok(hyps.iter().map(|h| dist(h[t], g)).collect())
}

pub fn min_fde(hyps: &[Trajectory], truth: &[Option<[f64; 2]>]) -> Result<f64, EvalError> {
    Ok(final_errors(hyps, truth)?.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissRateMode {
    /// Fraction of cases whose best final error exceeds the threshold.
    #[default]
    BestOfK,
    /// Per case, the number of modes whose squared final error exceeds the
    /// threshold divided by K, averaged over cases.
    PerModeOverK,
}

pub fn miss_rate(batch: &[(&[Trajectory], &[Option<[f64; 2]>])], mode: MissRateMode) -> Result<f64, EvalError> {
    if batch.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let mut total = 0.0;
    for (hyps, truth) in batch {
        let errs = final_errors(hyps, truth)?;
        total += match mode {
            MissRateMode::BestOfK => {
                let best = errs.iter().cloned().fold(f64::INFINITY, f64::min);
                if best > MISS_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            }
            MissRateMode::PerModeOverK => {
                errs.iter().filter(|e| *e * *e > MISS_THRESHOLD).count() as f64 / errs.len() as f64
            }
        };
    }
    Ok(total / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Reports

/// One predicted target with its ground truth, both global.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub scenario_id: String,
    pub agent_count: usize,
    pub target: TrackId,
    pub hypotheses: Vec<Trajectory>,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub agents_from: usize,
    /// Exclusive upper edge; `None` for the open last bucket.
    pub agents_to: Option<usize>,
    pub n_scenarios: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub mr_mode: MissRateMode,
    pub n_scenarios: usize,
    pub n_cases: usize,
    /// Cases without any valid future frame.
    pub skipped: usize,
    pub buckets: Vec<BucketReport>,
    /// Variance of per-bucket minADE over non-empty buckets.
    pub bucket_ade_variance: f64,
}

fn metrics_of(cases: &[&EvalCase], mode: MissRateMode) -> Result<Option<Metrics>, EvalError> {
    if cases.is_empty() {
        return Ok(None);
    }
    let n = cases.len() as f64;
    let mut ade = 0.0;
    let mut fde = 0.0;
    for c in cases {
        ade += min_ade(&c.hypotheses, &c.truth)?;
        fde += min_fde(&c.hypotheses, &c.truth)?;
    }
    let batch: Vec<(&[Trajectory], &[Option<[f64; 2]>])> =
        cases.iter().map(|c| (c.hypotheses.as_slice(), c.truth.as_slice())).collect();
    Ok(Some(Metrics {
        min_ade: ade / n,
        min_fde: fde / n,
        mr: miss_rate(&batch, mode)?,
        n_cases: cases.len(),
    }))
}

pub fn bucket_of(agents: usize) -> usize {
    DENSITY_BUCKETS.iter().rposition(|&lo| agents >= lo).unwrap_or(0)
}

/// Overall and per-density-bucket metrics.
pub fn evaluate(cases: &[EvalCase], mode: MissRateMode) -> Result<MetricReport, EvalError> {
    let valid: Vec<&EvalCase> = cases.iter().filter(|c| c.truth.iter().any(Option::is_some)).collect();
    let skipped = cases.len() - valid.len();
    let overall = metrics_of(&valid, mode)?.ok_or(EvalError::EmptyBatch)?;
    let mut buckets = Vec::new();
    for (b, &lo) in DENSITY_BUCKETS.iter().enumerate() {
        let in_bucket: Vec<&EvalCase> = valid.iter().copied().filter(|c| bucket_of(c.agent_count) == b).collect();
        let mut ids: Vec<&str> = in_bucket.iter().map(|c| c.scenario_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        buckets.push(BucketReport {
            agents_from: lo,
            agents_to: DENSITY_BUCKETS.get(b + 1).copied(),
            n_scenarios: ids.len(),
            metrics: metrics_of(&in_bucket, mode)?,
        });
    }
    let ades: Vec<f64> = buckets.iter().filter_map(|b| b.metrics.as_ref().map(|m| m.min_ade)).collect();
    let mean = ades.iter().sum::<f64>() / ades.len().max(1) as f64;
    let var = ades.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ades.len().max(1) as f64;
    let mut ids: Vec<&str> = valid.iter().map(|c| c.scenario_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(MetricReport {
        min_ade: overall.min_ade,
        min_fde: overall.min_fde,
        mr: overall.mr,
        mr_mode: mode,
        n_scenarios: ids.len(),
        n_cases: overall.n_cases,
        skipped,
        buckets,
        bucket_ade_variance: var,
    })
}

/// Global ground-truth future of an ego track over `horizon` frames.
pub fn truth_of(scene: &Scene, target: &TrackId, horizon: usize) -> Truth {
    let now = scene.current_frame();
    let track = scene.ego_tracks.get(target);
    (1..=horizon)
        .map(|k| track.and_then(|t| t.at(now + k)).map(|s| s.position))
        .collect()
}

/// Pair predictions with the ground truth stored in `scene`.
pub fn cases_for(scene: &Scene, preds: &[TargetPrediction]) -> Vec<EvalCase> {
    preds
        .iter()
        .map(|p| {
            let horizon = p.modes.first().map_or(0, Vec::len);
            EvalCase {
                scenario_id: scene.scenario_id.clone(),
                agent_count: scene.agent_count(),
                target: p.target.clone(),
                hypotheses: p.modes.clone(),
                truth: truth_of(scene, &p.target, horizon),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub map_recomputes: usize,
    pub cache_hits: usize,
    pub edges_with_gating: usize,
    pub edges_full: usize,
    pub mean_inference_ms: f64,
}

// ---------------------------------------------------------------------------
// Prediction file: one JSON object per line.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub scenario_id: String,
    #[serde(flatten)]
    pub prediction: TargetPrediction,
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<(), EvalError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| EvalError::Format {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(p: [f64; 2], n: usize) -> Trajectory {
        vec![p; n]
    }

    #[test]
    fn exact_hypothesis_scores_zero() {
        let truth: Truth = (0..5).map(|i| Some([i as f64, 1.0])).collect();
        let exact: Trajectory = truth.iter().map(|g| g.unwrap()).collect();
        let hyps = vec![constant([9.0, 9.0], 5), exact];
        assert_eq!(min_ade(&hyps, &truth).unwrap(), 0.0);
        assert_eq!(min_fde(&hyps, &truth).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_five() {
        let truth: Truth = vec![Some([0.0, 0.0]); 4];
        assert_eq!(min_ade(&[constant([3.0, 4.0], 4)], &truth).unwrap(), 5.0);
    }

    #[test]
    fn min_fde_picks_smallest_final_offset() {
        let truth: Truth = vec![Some([0.0, 0.0]); 3];
        let hyps: Vec<Trajectory> = [2.5, 1.0, 7.0, 3.0, 4.0, 9.0].iter().map(|&d| constant([d, 0.0], 3)).collect();
        assert_eq!(min_fde(&hyps, &truth).unwrap(), 1.0);
    }

    #[test]
    fn missing_frames_are_skipped() {
        let truth: Truth = vec![Some([0.0, 0.0]), None, Some([0.0, 0.0]), None];
        let h = vec![vec![[1.0, 0.0], [100.0, 0.0], [3.0, 0.0], [100.0, 0.0]]];
        assert_eq!(min_ade(&h, &truth).unwrap(), 2.0);
        assert_eq!(min_fde(&h, &truth).unwrap(), 3.0);
    }

    #[test]
    fn empty_truth_is_an_error() {
        assert!(matches!(min_ade(&[constant([0.0, 0.0], 2)], &[None, None]), Err(EvalError::EmptyTruth)));
    }

    #[test]
    fn miss_rate_counts_scenarios() {
        let truth: Truth = vec![Some([0.0, 0.0]); 2];
        let good = vec![constant([0.5, 0.0], 2)];
        let bad = vec![constant([3.0, 0.0], 2)];
        let batch: Vec<(&[Trajectory], &[Option<[f64; 2]>])> =
            vec![(&good, &truth), (&good, &truth), (&bad, &truth), (&good, &truth)];
        assert_eq!(miss_rate(&batch, MissRateMode::BestOfK).unwrap(), 0.25);
        let exact: Vec<(&[Trajectory], &[Option<[f64; 2]>])> = vec![(&good, &truth)];
        assert_eq!(miss_rate(&exact, MissRateMode::BestOfK).unwrap(), 0.0);
    }

    #[test]
    fn hand_tallied_batch_of_ten() {
        // Best final errors 0.5, 2.5, 1.9, 2.1, 0.0, 4.0, 2.0, 3.0, 1.0, 6.0:
        // strictly above 2 m are 2.5, 2.1, 4.0, 3.0, 6.0 -> 5 of 10.
        let truth: Truth = vec![Some([0.0, 0.0])];
        let errs = [0.5, 2.5, 1.9, 2.1, 0.0, 4.0, 2.0, 3.0, 1.0, 6.0];
        let hyps: Vec<Vec<Trajectory>> = errs.iter().map(|&e| vec![vec![[0.0, e]], vec![[0.0, e + 1.0]]]).collect();
        let batch: Vec<(&[Trajectory], &[Option<[f64; 2]>])> = hyps.iter().map(|h| (h.as_slice(), truth.as_slice())).collect();
        assert_eq!(miss_rate(&batch, MissRateMode::BestOfK).unwrap(), 0.5);
    }

    #[test]
    fn per_mode_variant_divides_by_k() {
        let truth: Truth = vec![Some([0.0, 0.0])];
        // Squared errors 1, 4, 9 against threshold 2: two of three exceed.
        let hyps = vec![vec![[1.0, 0.0]], vec![[2.0, 0.0]], vec![[3.0, 0.0]]];
        let batch: Vec<(&[Trajectory], &[Option<[f64; 2]>])> = vec![(&hyps, &truth)];
        assert!((miss_rate(&batch, MissRateMode::PerModeOverK).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    fn case(id: &str, agents: usize) -> EvalCase {
        EvalCase {
            scenario_id: id.into(),
            agent_count: agents,
            target: "t".into(),
            hypotheses: vec![constant([1.0, 0.0], 2)],
            truth: vec![Some([0.0, 0.0]); 2],
        }
    }

    #[test]
    fn buckets_partition_the_suite() {
        let cases = vec![case("a", 10), case("b", 200), case("c", 250), case("d", 700)];
        let r = evaluate(&cases, MissRateMode::BestOfK).unwrap();
        assert_eq!(r.buckets.len(), 6);
        assert_eq!(r.buckets.iter().map(|b| b.n_scenarios).sum::<usize>(), 4);
        assert_eq!(r.buckets[1].n_scenarios, 2);
        assert!(r.buckets[2].metrics.is_none());
        assert_eq!(r.buckets[5].agents_to, None);
    }

    #[test]
    fn single_bucket_leaves_others_empty() {
        let r = evaluate(&[case("a", 3), case("b", 5)], MissRateMode::BestOfK).unwrap();
        assert_eq!(r.buckets[0].n_scenarios, 2);
        assert!(r.buckets[1..].iter().all(|b| b.n_scenarios == 0));
        assert_eq!(r.bucket_ade_variance, 0.0);
    }

    #[test]
    fn prediction_file_round_trips() {
        let rec = PredictionRecord {
            scenario_id: "s".into(),
            prediction: TargetPrediction {
                target: "e0".into(),
                modes: vec![vec![[1.0, 2.0], [3.0, 4.5]]],
                probabilities: vec![1.0],
            },
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec]);
    }

    proptest! {
        #[test]
        fn adding_a_hypothesis_never_hurts(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..8),
            extra in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 8),
        ) {
            let n = pts.len();
            let truth: Truth = pts.iter().map(|&(x, y)| Some([x, y])).collect();
            let h1: Trajectory = pts.iter().map(|&(x, y)| [x + 1.0, y - 2.0]).collect();
            let h2: Trajectory = extra[..n].iter().map(|&(x, y)| [x, y]).collect();
            let one = vec![h1.clone()];
            let two = vec![h1, h2];
            prop_assert!(min_ade(&two, &truth).unwrap() <= min_ade(&one, &truth).unwrap());
            prop_assert!(min_fde(&two, &truth).unwrap() <= min_fde(&one, &truth).unwrap());
            prop_assert!(min_ade(&one, &truth).unwrap() >= 0.0);
        }
    }
}
