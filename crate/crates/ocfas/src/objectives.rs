//! The loss terms: image/text liveness, spoof regression, feature
//! disentanglement, feature alignment, fusion reconstruction, augmented
//! spoof, and their weighted total.

use crate::error::{Error, Result};
use crate::model::{self, Embedding, ModelState};
use crate::scm::SpoofCueMap;

/// Named scalar values for every loss term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_i: f64,
    pub l_t: f64,
    pub l_l: f64,
    pub l_s: f64,
    pub l_fd: f64,
    pub l_fa: f64,
    pub l_r: f64,
    pub l_a: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,stage,L_I,L_T,L_S,L_FD,L_FA,L_R,L_A,total";

    pub fn csv_row(&self, step: usize, stage: u8) -> String {
        format!(
            "{step},{stage},{},{},{},{},{},{},{},{}",
            self.l_i, self.l_t, self.l_s, self.l_fd, self.l_fa, self.l_r, self.l_a, self.total
        )
    }
}

/// Cosine similarity; a zero vector on either side is defined as 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector, defining cos = 0");
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Max-stabilized log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_norm_diff(a: &SpoofCueMap, b: &SpoofCueMap) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn check_shapes(maps: &[SpoofCueMap], what: &str) -> Result<(usize, usize, usize)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument(format!("{what}: empty map list")))?;
    for m in maps {
        if m.shape != first.shape {
            return Err(Error::Argument(format!(
                "{what}: mixed map shapes {:?} and {:?}",
                first.shape, m.shape
            )));
        }
    }
    Ok(first.shape)
}

fn check_dims(lists: &[(&str, &[Embedding])]) -> Result<usize> {
    let mut dim = None;
    for (what, embs) in lists {
        for e in *embs {
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    return Err(Error::Argument(format!(
                        "{what}: embedding dimension {} does not match {d}",
                        e.dim()
                    )))
                }
                _ => {}
            }
        }
    }
    dim.ok_or_else(|| Error::Argument("no embeddings given".into()))
}

/// Image and text liveness losses: sums of squared entries of the predicted
/// maps (squared distance to the zero map), and their sum.
pub fn liveness_loss(
    maps_from_images: &[SpoofCueMap],
    maps_from_live_prompts: &[SpoofCueMap],
) -> Result<(f64, f64, f64)> {
    let si = check_shapes(maps_from_images, "image maps")?;
    let st = check_shapes(maps_from_live_prompts, "live prompt maps")?;
    if si != st {
        return Err(Error::Argument(format!(
            "image map shape {si:?} does not match prompt map shape {st:?}"
        )));
    }
    let sq = |maps: &[SpoofCueMap]| -> f64 {
        maps.iter()
            .map(|m| m.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    };
    let l_i = sq(maps_from_images);
    let l_t = sq(maps_from_live_prompts);
    Ok((l_i, l_t, l_i + l_t))
}

/// Spoof loss: summed squared distance between predicted maps and their
/// binary pseudo targets.
pub fn spoof_loss(predicted: &[SpoofCueMap], targets: &[SpoofCueMap]) -> Result<f64> {
    if predicted.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} predicted maps vs {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let sp = check_shapes(predicted, "predicted maps")?;
    let st = check_shapes(targets, "target maps")?;
    if sp != st {
        return Err(Error::Argument(format!(
            "predicted shape {sp:?} does not match target shape {st:?}"
        )));
    }
    for t in targets {
        if !t.is_binary() {
            return Err(Error::Argument("pseudo targets must be binary".into()));
        }
    }
    Ok(predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| sq_norm_diff(p, t))
        .sum())
}

/// Feature disentanglement loss. Both double sums run over ordered pairs of
/// distinct indices; denominators hold only the negatives, so the value can
/// be negative.
pub fn disentanglement_loss(
    content: &[Embedding],
    live: &[Embedding],
    spoof: &[Embedding],
) -> Result<f64> {
    if content.len() < 2 || live.is_empty() || spoof.is_empty() {
        return Err(Error::Argument(format!(
            "disentanglement needs >= 2 content, >= 1 live, >= 1 spoof embeddings, got {}/{}/{}",
            content.len(),
            live.len(),
            spoof.len()
        )));
    }
    check_dims(&[("content", content), ("live", live), ("spoof", spoof)])?;
    let mut total = 0.0;
    // Term 1: pull content embeddings together, push them from live/spoof.
    for (i, ci) in content.iter().enumerate() {
        let negs: Vec<f64> = live
            .iter()
            .chain(spoof.iter())
            .map(|n| cosine(&ci.values, &n.values))
            .collect();
        let lse = log_sum_exp(&negs);
        for (j, cj) in content.iter().enumerate() {
            if i == j {
                continue;
            }
            total += lse - cosine(&ci.values, &cj.values);
        }
    }
    // Term 2: pull live embeddings together, push them from spoof.
    for (i, li) in live.iter().enumerate() {
        let negs: Vec<f64> = spoof
            .iter()
            .map(|s| cosine(&li.values, &s.values))
            .collect();
        let lse = log_sum_exp(&negs);
        for (j, lj) in live.iter().enumerate() {
            if i == j {
                continue;
            }
            total += lse - cosine(&li.values, &lj.values);
        }
    }
    Ok(total)
}

/// Feature alignment loss: pulls live image features toward live prompt
/// features, away from spoof prompt features. The spoof denominator depends
/// only on the live index.
pub fn alignment_loss(
    live: &[Embedding],
    images: &[Embedding],
    spoof: &[Embedding],
) -> Result<f64> {
    if live.is_empty() || images.is_empty() || spoof.is_empty() {
        return Err(Error::Argument(
            "alignment loss requires nonempty live, image, and spoof lists".into(),
        ));
    }
    check_dims(&[("live", live), ("images", images), ("spoof", spoof)])?;
    let mut total = 0.0;
    for li in live {
        let negs: Vec<f64> = spoof
            .iter()
            .map(|s| cosine(&li.values, &s.values))
            .collect();
        let lse = log_sum_exp(&negs);
        for zj in images {
            total += lse - cosine(&li.values, &zj.values);
        }
    }
    Ok(total)
}

/// Reconstruction loss: summed squared distance between the fused live/spoof
/// prompt features and the paired hybrid prompt features.
pub fn reconstruction_loss(
    live: &[Embedding],
    spoof: &[Embedding],
    hybrid: &[Embedding],
    state: &ModelState,
) -> Result<f64> {
    if live.len() != spoof.len() || live.len() != hybrid.len() {
        return Err(Error::Argument(format!(
            "misaligned triples: {} live, {} spoof, {} hybrid",
            live.len(),
            spoof.len(),
            hybrid.len()
        )));
    }
    if live.is_empty() {
        return Err(Error::Argument("reconstruction loss of empty lists".into()));
    }
    let mut total = 0.0;
    for ((l, s), h) in live.iter().zip(spoof).zip(hybrid) {
        let fused = model::fuse(state, l, s)?;
        total += fused
            .values
            .iter()
            .zip(&h.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Augmented spoof loss: for every (image, spoof prompt) pair, decode the
/// fused spoof-like feature and regress it onto the prompt's pseudo map.
/// The fusion module acts as a frozen feature generator here.
pub fn augmented_spoof_loss(
    images: &[Embedding],
    spoof: &[Embedding],
    targets: &[SpoofCueMap],
    state: &ModelState,
) -> Result<f64> {
    if spoof.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} spoof embeddings vs {} pseudo maps",
            spoof.len(),
            targets.len()
        )));
    }
    if images.is_empty() || spoof.is_empty() {
        return Err(Error::Argument(
            "augmented spoof loss requires images and spoof prompts".into(),
        ));
    }
    let mut total = 0.0;
    for z in images {
        for (s, target) in spoof.iter().zip(targets) {
            let fused = model::fuse(state, z, s)?;
            let map = model::decode_scm(state, &fused)?;
            if map.shape != target.shape {
                return Err(Error::Argument(format!(
                    "decoded shape {:?} does not match target {:?}",
                    map.shape, target.shape
                )));
            }
            total += sq_norm_diff(&map, target);
        }
    }
    Ok(total)
}

/// Weighted total: `L_L + L_S + lambda (L_FD + L_FA) + L_A`.
pub fn total_objective(
    l_l: f64,
    l_s: f64,
    l_fd: f64,
    l_fa: f64,
    l_a: f64,
    lambda: f64,
) -> Result<f64> {
    for (name, v) in [
        ("L_L", l_l),
        ("L_S", l_s),
        ("L_FD", l_fd),
        ("L_FA", l_fa),
        ("L_A", l_a),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite: {v}")));
        }
    }
    if lambda < 0.0 {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(l_l + l_s + lambda * (l_fd + l_fa) + l_a)
}
