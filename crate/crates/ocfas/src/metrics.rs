//! Error-rate metrics (APCER, BPCER, ACER, HTER, AUC) and protocol
//! orchestration: intra-domain, leave-one-dataset-out, leave-one-attack-out,
//! and unseen-attack runs with optional repetition spreads.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{classify, youden_threshold, Label, ScoredSample, Threshold};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub auc: f64,
    pub threshold: Threshold,
    pub n_live: usize,
    pub n_spoof: usize,
}

pub const METRIC_CSV_HEADER: &str =
    "protocol,repetition,apcer,bpcer,acer,hter,auc,threshold,n_live,n_spoof";

impl MetricBundle {
    pub fn csv_row(&self, protocol: &str, repetition: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            protocol,
            repetition,
            self.apcer,
            self.bpcer,
            self.acer,
            self.hter,
            self.auc,
            self.threshold.value,
            self.n_live,
            self.n_spoof
        )
    }
}

/// AUC via the rank statistic, ties counted one half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for s in samples {
        match s.label {
            Some(Label::Live) => live.push(s.score),
            Some(Label::Spoof) => spoof.push(s.score),
            None => return Err(Error::Argument(format!("sample {} has no label", s.sample_id))),
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::Argument("AUC needs both classes".into()));
    }
    // Average ranks over the pooled sorted scores, ties sharing their mean rank.
    let mut pooled: Vec<(f64, bool)> = live
        .iter()
        .map(|&s| (s, false))
        .chain(spoof.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = pooled.len();
    let mut rank_sum_spoof = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0; // ranks are 1-based
        for item in &pooled[i..j] {
            if item.1 {
                rank_sum_spoof += mean_rank;
            }
        }
        i = j;
    }
    let n_s = spoof.len() as f64;
    let n_l = live.len() as f64;
    Ok((rank_sum_spoof - n_s * (n_s + 1.0) / 2.0) / (n_s * n_l))
}

/// Applies a fixed threshold and reports the full error-rate bundle.
pub fn compute_metrics(samples: &[ScoredSample], t: &Threshold) -> Result<MetricBundle> {
    let mut n_live = 0usize;
    let mut n_spoof = 0usize;
    let mut spoof_as_live = 0usize;
    let mut live_as_spoof = 0usize;
    for s in samples {
        match s.label {
            Some(Label::Live) => {
                n_live += 1;
                if classify(s.score, t) == Label::Spoof {
                    live_as_spoof += 1;
                }
            }
            Some(Label::Spoof) => {
                n_spoof += 1;
                if classify(s.score, t) == Label::Live {
                    spoof_as_live += 1;
                }
            }
            None => return Err(Error::Argument(format!("sample {} has no label", s.sample_id))),
        }
    }
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::Argument(format!(
            "metrics need both classes, got {n_live} live / {n_spoof} spoof"
        )));
    }
    let apcer = spoof_as_live as f64 / n_spoof as f64;
    let bpcer = live_as_spoof as f64 / n_live as f64;
    // FAR/FRR coincide with APCER/BPCER at a shared threshold, so HTER = ACER.
    Ok(MetricBundle {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: (apcer + bpcer) / 2.0,
        auc: auc(samples)?,
        threshold: *t,
        n_live,
        n_spoof,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
    #[serde(default)]
    pub unseen_attack: Option<String>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_repetitions() -> usize {
    1
}

/// One repetition's worth of scored data, produced by whoever ran the model.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    /// Sample ids the scorer was trained on, for the leakage check.
    pub train_ids: Vec<String>,
    /// Labeled scores used to calibrate the threshold. Empty means calibrate
    /// on the test scores themselves.
    pub calibration: Vec<ScoredSample>,
    pub test: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean_apcer: f64,
    pub mean_bpcer: f64,
    pub mean_acer: f64,
    pub mean_hter: f64,
    pub mean_auc: f64,
    pub std_acer: f64,
    pub std_hter: f64,
    pub std_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub spec: ProtocolSpec,
    pub bundles: Vec<MetricBundle>,
    pub aggregate: MetricAggregate,
    /// True when any repetition had no calibration split and fell back to
    /// calibrating on its own test scores.
    pub calibrated_on_test: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// Population standard deviation; repetition lists are the whole population of
// reported folds, and a single repetition then has spread zero.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Evaluates every repetition of a protocol and aggregates the bundles.
pub fn run_protocol(spec: &ProtocolSpec, runs: &[ProtocolRun]) -> Result<ProtocolResult> {
    if spec.repetitions == 0 {
        return Err(Error::Config(format!("protocol {}: repetitions must be positive", spec.name)));
    }
    if runs.len() != spec.repetitions {
        return Err(Error::Config(format!(
            "protocol {}: expected {} repetitions, got {}",
            spec.name,
            spec.repetitions,
            runs.len()
        )));
    }
    let mut bundles = Vec::with_capacity(runs.len());
    let mut calibrated_on_test = false;
    for (rep, run) in runs.iter().enumerate() {
        let train_ids: BTreeSet<&str> = run.train_ids.iter().map(String::as_str).collect();
        for s in &run.test {
            if train_ids.contains(s.sample_id.as_str()) {
                return Err(Error::Protocol(format!(
                    "protocol {} repetition {rep}: test sample {} appears in the training manifest",
                    spec.name, s.sample_id
                )));
            }
        }
        let mut calibration: Vec<ScoredSample>;
        if run.calibration.is_empty() {
            calibrated_on_test = true;
            calibration = run.test.clone();
        } else {
            calibration = run.calibration.clone();
        }
        if let Some(attack) = &spec.unseen_attack {
            // The held-out attack must not influence the operating point.
            calibration.retain(|s| s.attack_type.as_deref() != Some(attack.as_str()));
        }
        let t = youden_threshold(&calibration)?;
        bundles.push(compute_metrics(&run.test, &t)?);
    }
    let acers: Vec<f64> = bundles.iter().map(|b| b.acer).collect();
    let hters: Vec<f64> = bundles.iter().map(|b| b.hter).collect();
    let aucs: Vec<f64> = bundles.iter().map(|b| b.auc).collect();
    let aggregate = MetricAggregate {
        mean_apcer: mean(&bundles.iter().map(|b| b.apcer).collect::<Vec<_>>()),
        mean_bpcer: mean(&bundles.iter().map(|b| b.bpcer).collect::<Vec<_>>()),
        mean_acer: mean(&acers),
        mean_hter: mean(&hters),
        mean_auc: mean(&aucs),
        std_acer: std_dev(&acers),
        std_hter: std_dev(&hters),
        std_auc: std_dev(&aucs),
    };
    Ok(ProtocolResult { spec: spec.clone(), bundles, aggregate, calibrated_on_test })
}
