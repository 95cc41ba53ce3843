//! Detection scoring: mean absolute spoof-cue-map energy, Youden-index
//! threshold calibration, and binary classification.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::SpoofCueMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Argument(format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scored sample in the interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub score: f64,
    pub label: Option<Label>,
    pub attack_type: Option<String>,
    pub dataset: Option<String>,
}

/// Calibrated decision threshold with its Youden index on the calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub youden_j: f64,
}

/// Mean absolute value of the map entries.
pub fn detection_score(map: &SpoofCueMap) -> Result<f64> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spoof cue map holds non-finite entries".into()));
    }
    Ok(map.data.iter().map(|v| v.abs()).sum::<f64>() / map.len() as f64)
}

/// Spoof iff `score >= threshold`.
pub fn classify(score: f64, t: &Threshold) -> Label {
    if score >= t.value {
        Label::Spoof
    } else {
        Label::Live
    }
}

fn split_labeled(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for s in samples {
        match s.label {
            Some(Label::Live) => live.push(s.score),
            Some(Label::Spoof) => spoof.push(s.score),
            None => {
                return Err(Error::Argument(format!(
                    "sample {} has no label",
                    s.sample_id
                )))
            }
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::Argument(format!(
            "calibration needs both classes, got {} live / {} spoof",
            live.len(),
            spoof.len()
        )));
    }
    Ok((live, spoof))
}

fn youden_j_at(live: &[f64], spoof: &[f64], t: f64) -> f64 {
    let tpr = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
    let fpr = live.iter().filter(|&&s| s >= t).count() as f64 / live.len() as f64;
    tpr - fpr
}

/// Maximizes `J = TPR - FPR` over candidate thresholds: midpoints between
/// consecutive distinct sorted scores plus the two infinite sentinels. Ties
/// break toward the smallest threshold.
pub fn youden_threshold(samples: &[ScoredSample]) -> Result<Threshold> {
    let (live, spoof) = split_labeled(samples)?;
    let mut scores: Vec<f64> = live.iter().chain(spoof.iter()).copied().collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("scores must be finite".into()));
    }
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in scores.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);
    let mut best = Threshold { value: candidates[0], youden_j: youden_j_at(&live, &spoof, candidates[0]) };
    for &t in &candidates[1..] {
        let j = youden_j_at(&live, &spoof, t);
        if j > best.youden_j {
            best = Threshold { value: t, youden_j: j };
        }
    }
    Ok(best)
}

const SCORE_CSV_HEADER: &str = "sample_id,score,label,attack_type,dataset";

/// Writes the score interchange CSV.
pub fn write_score_csv(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SCORE_CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.sample_id,
            s.score,
            s.label.map(|l| l.as_str()).unwrap_or(""),
            s.attack_type.as_deref().unwrap_or(""),
            s.dataset.as_deref().unwrap_or("")
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads the score interchange CSV.
pub fn read_score_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != SCORE_CSV_HEADER {
                return Err(Error::Config(format!(
                    "{}: unexpected score CSV header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "{}: line {} has {} fields, expected 5",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad score {:?}", path.display(), fields[1])))?;
        samples.push(ScoredSample {
            sample_id: fields[0].to_string(),
            score,
            label: if fields[2].is_empty() { None } else { Some(Label::parse(fields[2])?) },
            attack_type: if fields[3].is_empty() { None } else { Some(fields[3].to_string()) },
            dataset: if fields[4].is_empty() { None } else { Some(fields[4].to_string()) },
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{zero_scm, SpoofCueMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, score: f64, label: Label) -> ScoredSample {
        ScoredSample {
            sample_id: id.to_string(),
            score,
            label: Some(label),
            attack_type: None,
            dataset: None,
        }
    }

    #[test]
    fn zero_map_scores_zero() {
        let m = zero_scm((1, 4, 4)).unwrap();
        assert_eq!(detection_score(&m).unwrap(), 0.0);
    }

    #[test]
    fn detection_score_arithmetic() {
        let m = SpoofCueMap::new((1, 2, 2), vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        assert_eq!(detection_score(&m).unwrap(), 0.5);
    }

    #[test]
    fn detection_score_matches_mean_abs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let data: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = SpoofCueMap::new((2, 3, 4), data.clone()).unwrap();
            let want = data.iter().map(|v| v.abs()).sum::<f64>() / 24.0;
            assert!((detection_score(&m).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_score_invariant_under_permutation_and_sign() {
        let data = vec![0.3, -0.7, 1.2, 0.0];
        let m = SpoofCueMap::new((1, 2, 2), data.clone()).unwrap();
        let base = detection_score(&m).unwrap();
        let mut flipped = data.clone();
        flipped.iter_mut().for_each(|v| *v = -*v);
        flipped.reverse();
        let m2 = SpoofCueMap::new((1, 2, 2), flipped).unwrap();
        // Summation order changes, so allow one ulp of slack.
        assert!((base - detection_score(&m2).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn perfectly_separated_youden() {
        let samples = vec![
            sample("a", 0.1, Label::Live),
            sample("b", 0.2, Label::Live),
            sample("c", 0.7, Label::Spoof),
            sample("d", 0.9, Label::Spoof),
        ];
        let t = youden_threshold(&samples).unwrap();
        assert!((t.youden_j - 1.0).abs() < 1e-12);
        assert!((t.value - 0.45).abs() < 1e-12);
    }

    #[test]
    fn identical_scores_yield_zero_j_sentinel() {
        let samples = vec![sample("a", 0.5, Label::Live), sample("b", 0.5, Label::Spoof)];
        let t = youden_threshold(&samples).unwrap();
        assert_eq!(t.youden_j, 0.0);
        assert!(t.value.is_infinite());
        assert!(t.value < 0.0, "ties break toward the smallest threshold");
    }

    #[test]
    fn single_class_is_argument_error() {
        let samples = vec![sample("a", 0.5, Label::Live)];
        assert!(matches!(youden_threshold(&samples), Err(Error::Argument(_))));
    }

    fn exhaustive_best_j(samples: &[ScoredSample]) -> f64 {
        // O(n^2) sweep over every sample score and the sentinels.
        let (live, spoof) = split_labeled(samples).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut candidates: Vec<f64> = live.iter().chain(spoof.iter()).copied().collect();
        candidates.push(f64::NEG_INFINITY);
        candidates.push(f64::INFINITY);
        for &t in &candidates {
            best = best.max(youden_j_at(&live, &spoof, t));
        }
        best
    }

    #[test]
    fn youden_matches_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n_live = rng.random_range(1..20);
            let n_spoof = rng.random_range(1..20);
            let mut samples = Vec::new();
            for i in 0..n_live {
                samples.push(sample(&format!("l{i}"), rng.random_range(0.0..1.0), Label::Live));
            }
            for i in 0..n_spoof {
                samples.push(sample(&format!("s{i}"), rng.random_range(0.0..1.0), Label::Spoof));
            }
            let t = youden_threshold(&samples).unwrap();
            let best = exhaustive_best_j(&samples);
            assert!(
                (t.youden_j - best).abs() < 1e-12,
                "midpoint J {} vs sweep J {}",
                t.youden_j,
                best
            );
        }
    }

    #[test]
    fn adding_high_spoof_never_decreases_max_j() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut samples = vec![
                sample("l0", rng.random_range(0.0..1.0), Label::Live),
                sample("s0", rng.random_range(0.0..1.0), Label::Spoof),
                sample("l1", rng.random_range(0.0..1.0), Label::Live),
                sample("s1", rng.random_range(0.0..1.0), Label::Spoof),
            ];
            let t = youden_threshold(&samples).unwrap();
            samples.push(sample("s_new", t.value.max(0.0) + 1.0, Label::Spoof));
            let t2 = youden_threshold(&samples).unwrap();
            assert!(t2.youden_j >= t.youden_j - 1e-12);
        }
    }

    #[test]
    fn classify_boundary_is_spoof() {
        let t = Threshold { value: 0.5, youden_j: 1.0 };
        assert_eq!(classify(0.0, &t), Label::Live);
        assert_eq!(classify(0.5, &t), Label::Spoof);
        assert_eq!(classify(0.9, &t), Label::Spoof);
    }

    #[test]
    fn score_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let samples = vec![
            ScoredSample {
                sample_id: "test/live/a.png".into(),
                score: 0.125,
                label: Some(Label::Live),
                attack_type: None,
                dataset: Some("O".into()),
            },
            ScoredSample {
                sample_id: "test/spoof/print/b.png".into(),
                score: 0.75,
                label: Some(Label::Spoof),
                attack_type: Some("print".into()),
                dataset: Some("O".into()),
            },
        ];
        write_score_csv(&path, &samples).unwrap();
        assert_eq!(read_score_csv(&path).unwrap(), samples);
    }
}
