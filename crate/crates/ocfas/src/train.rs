//! Warm-up initialization and the two-stage alternating trainer: stage 1
//! updates the text encoder, image encoder, and fusion module from the
//! contrastive/reconstruction terms; stage 2 fixes the fusion module and
//! updates the encoders and decoder from the map-regression terms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{self, quantize_f32, Forward, Image, ModelState, ParamGroup, Tensor};
use crate::objectives::{self, LossReport};
use crate::prompt::{sample_batch, Position, PromptBatch, VocabConfig};
use crate::scm::{pseudo_scm, scm_for_prompt, MaskSpec, SizeFractionBounds, SpoofCueMap};
use crate::scoring::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

/// Which objective the trainer optimizes. The reduced variants exist for
/// ablation runs: liveness+spoof regression only, or additionally replacing
/// spoof prompt features with Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    LivenessSpoof,
    NoiseSpoof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub lambda: f64,
    pub batch_images: usize,
    /// (N_l, N_s, N_c) prompts sampled per step.
    pub prompt_counts: (usize, usize, usize),
    pub warmup_steps: usize,
    pub seed: u64,
    /// Max-norm gradient clipping per parameter group; off by default.
    pub grad_clip: Option<f64>,
    /// Alternate the two stages per epoch instead of per step.
    pub alternate_per_epoch: bool,
    pub ablation: Ablation,
    pub mask_bounds: SizeFractionBounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 50,
            optimizer: Optimizer::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            lambda: 0.8,
            batch_images: 16,
            prompt_counts: (8, 16, 8),
            warmup_steps: 200,
            seed: 0,
            grad_clip: None,
            alternate_per_epoch: false,
            ablation: Ablation::Full,
            mask_bounds: SizeFractionBounds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got {:?}", self.adam_betas)));
        }
        if self.batch_images == 0 {
            return Err(Error::Config("batch_images must be positive".into()));
        }
        let (n_l, n_s, n_c) = self.prompt_counts;
        if n_c < 2 || n_l < 1 || n_s < 1 {
            return Err(Error::Config(format!(
                "prompt_counts must satisfy N_c >= 2, N_l >= 1, N_s >= 1, got {:?}",
                self.prompt_counts
            )));
        }
        Ok(())
    }
}

/// Optimizer tensors, keyed `adam.m.<param>` / `adam.v.<param>` /
/// `adam.t.<group>`, stored alongside the model in checkpoints.
pub type OptState = BTreeMap<String, Tensor>;

/// One labeled training sample.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub image: Image,
    pub label: Label,
}

/// Everything one optimization step consumes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Image>,
    pub prompts: PromptBatch,
    /// Binary pseudo map per spoof prompt.
    pub spoof_targets: Vec<SpoofCueMap>,
    /// Gaussian surrogate spoof features and their pseudo maps, present only
    /// for the noise ablation.
    pub noise: Option<(Vec<Vec<f64>>, Vec<SpoofCueMap>)>,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_PROMPTS: u64 = 2;
const STREAM_MASKS: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_WARMUP_IMAGES: u64 = 5;
const WARMUP_EPOCH_TAG: u64 = u64::MAX;

/// Splitmix64-style mixing so every (epoch, step, purpose) gets an
/// independent, replayable generator stream.
fn stream_seed(seed: u64, epoch: u64, step: u64, purpose: u64) -> u64 {
    let mut x = seed
        ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ purpose.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Samples prompts, pseudo maps, and (for the noise ablation) surrogate
/// features for one step.
pub fn build_batch(
    cfg: &TrainConfig,
    vocab: &VocabConfig,
    scm_shape: (usize, usize, usize),
    d_emb: usize,
    images: Vec<Image>,
    epoch: u64,
    step: u64,
) -> Result<Batch> {
    if images.is_empty() {
        return Err(Error::Argument("batch without images".into()));
    }
    let prompts = sample_batch(
        stream_seed(cfg.seed, epoch, step, STREAM_PROMPTS),
        cfg.prompt_counts,
        vocab,
    )?;
    let mut mask_rng =
        ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, step, STREAM_MASKS));
    let spoof_targets = prompts
        .spoof
        .iter()
        .map(|p| scm_for_prompt(p, scm_shape, cfg.mask_bounds, &mut mask_rng))
        .collect::<Result<Vec<_>>>()?;
    let noise = if cfg.ablation == Ablation::NoiseSpoof {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, step, STREAM_NOISE));
        let (_, n_s, _) = cfg.prompt_counts;
        let feats: Vec<Vec<f64>> = (0..n_s)
            .map(|_| {
                (0..d_emb)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v
                    })
                    .collect()
            })
            .collect();
        let targets = (0..n_s)
            .map(|_| {
                let position = Position::ALL[rng.random_range(0..Position::ALL.len())];
                let size_fraction = if cfg.mask_bounds.min_frac == cfg.mask_bounds.max_frac {
                    cfg.mask_bounds.min_frac
                } else {
                    rng.random_range(cfg.mask_bounds.min_frac..cfg.mask_bounds.max_frac)
                };
                pseudo_scm(&MaskSpec { position, size_fraction }, scm_shape, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Some((feats, targets))
    } else {
        None
    };
    Ok(Batch { images, prompts, spoof_targets, noise })
}

/// Evaluates every loss term on a batch without touching parameters.
pub fn evaluate_batch(state: &ModelState, batch: &Batch, lambda: f64) -> Result<LossReport> {
    let z: Vec<_> = batch
        .images
        .iter()
        .map(|img| model::encode_image(state, img))
        .collect::<Result<_>>()?;
    let live: Vec<_> = batch
        .prompts
        .live
        .iter()
        .map(|p| model::encode_text(state, &p.text))
        .collect::<Result<_>>()?;
    let spoof: Vec<_> = batch
        .prompts
        .spoof
        .iter()
        .map(|p| model::encode_text(state, &p.text))
        .collect::<Result<_>>()?;
    let content: Vec<_> = batch
        .prompts
        .content
        .iter()
        .map(|p| model::encode_text(state, &p.text))
        .collect::<Result<_>>()?;
    let hybrid: Vec<_> = batch
        .prompts
        .hybrid
        .iter()
        .map(|p| model::encode_text(state, &p.text))
        .collect::<Result<_>>()?;

    let image_maps: Vec<_> = z.iter().map(|e| model::decode_scm(state, e)).collect::<Result<_>>()?;
    let live_maps: Vec<_> =
        live.iter().map(|e| model::decode_scm(state, e)).collect::<Result<_>>()?;
    let spoof_maps: Vec<_> =
        spoof.iter().map(|e| model::decode_scm(state, e)).collect::<Result<_>>()?;

    let (l_i, l_t, l_l) = objectives::liveness_loss(&image_maps, &live_maps)?;
    let l_s = objectives::spoof_loss(&spoof_maps, &batch.spoof_targets)?;
    let l_fd = objectives::disentanglement_loss(&content, &live, &spoof)?;
    let l_fa = objectives::alignment_loss(&live, &z, &spoof)?;
    let (pair_live, pair_spoof): (Vec<_>, Vec<_>) = batch
        .prompts
        .pairing
        .iter()
        .map(|&(li, si)| (live[li].clone(), spoof[si].clone()))
        .unzip();
    let l_r = objectives::reconstruction_loss(&pair_live, &pair_spoof, &hybrid, state)?;
    let l_a = objectives::augmented_spoof_loss(&z, &spoof, &batch.spoof_targets, state)?;
    let total = objectives::total_objective(l_l, l_s, l_fd, l_fa, l_a, lambda)?;
    Ok(LossReport { l_i, l_t, l_l, l_s, l_fd, l_fa, l_r, l_a, lambda, total })
}

// --- tape-built loss terms ---------------------------------------------------

fn tape_sq_to_zero(fwd: &mut Forward, maps: &[NodeId]) -> NodeId {
    let terms: Vec<(f64, NodeId)> = maps
        .iter()
        .map(|&m| {
            let zero = fwd.tape.constant(vec![0.0; fwd.tape.value(m).len()]);
            (1.0, fwd.tape.sq_diff(m, zero))
        })
        .collect();
    fwd.tape.lin_comb(terms)
}

fn tape_sq_to_targets(fwd: &mut Forward, preds: &[NodeId], targets: &[SpoofCueMap]) -> NodeId {
    let terms: Vec<(f64, NodeId)> = preds
        .iter()
        .zip(targets)
        .map(|(&p, t)| {
            let tn = fwd.tape.constant(t.data.clone());
            (1.0, fwd.tape.sq_diff(p, tn))
        })
        .collect();
    fwd.tape.lin_comb(terms)
}

fn tape_disentanglement(
    fwd: &mut Forward,
    content: &[NodeId],
    live: &[NodeId],
    spoof: &[NodeId],
) -> NodeId {
    let mut terms = Vec::new();
    for (i, &ci) in content.iter().enumerate() {
        let negs: Vec<NodeId> = live
            .iter()
            .chain(spoof.iter())
            .map(|&n| fwd.tape.cos(ci, n))
            .collect();
        let lse = fwd.tape.log_sum_exp(negs);
        for (j, &cj) in content.iter().enumerate() {
            if i == j {
                continue;
            }
            let pos = fwd.tape.cos(ci, cj);
            terms.push((1.0, lse));
            terms.push((-1.0, pos));
        }
    }
    for (i, &li) in live.iter().enumerate() {
        let negs: Vec<NodeId> = spoof.iter().map(|&s| fwd.tape.cos(li, s)).collect();
        let lse = fwd.tape.log_sum_exp(negs);
        for (j, &lj) in live.iter().enumerate() {
            if i == j {
                continue;
            }
            let pos = fwd.tape.cos(li, lj);
            terms.push((1.0, lse));
            terms.push((-1.0, pos));
        }
    }
    fwd.tape.lin_comb(terms)
}

fn tape_alignment(fwd: &mut Forward, live: &[NodeId], images: &[NodeId], spoof: &[NodeId]) -> NodeId {
    let mut terms = Vec::new();
    for &li in live {
        let negs: Vec<NodeId> = spoof.iter().map(|&s| fwd.tape.cos(li, s)).collect();
        let lse = fwd.tape.log_sum_exp(negs);
        for &zj in images {
            let pos = fwd.tape.cos(li, zj);
            terms.push((1.0, lse));
            terms.push((-1.0, pos));
        }
    }
    fwd.tape.lin_comb(terms)
}

// --- optimizer ---------------------------------------------------------------

/// One Adam step for one parameter group. Moments live in `opt` and the step
/// count is tracked per group, so frozen groups keep frozen optimizer state.
/// Parameters and moments are rounded to f32 after the update so checkpoints
/// round-trip losslessly.
fn adam_update(
    cfg: &TrainConfig,
    state: &mut ModelState,
    opt: &mut OptState,
    group: ParamGroup,
    grads: &[(String, Vec<f64>)],
) -> Result<()> {
    let (b1, b2) = cfg.adam_betas;
    let mut scale = 1.0;
    if let Some(max_norm) = cfg.grad_clip {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            scale = max_norm / norm;
        }
    }
    let t_key = format!("adam.t.{}", group.prefix().trim_end_matches('.'));
    let t = {
        let entry = opt
            .entry(t_key)
            .or_insert_with(|| Tensor { shape: vec![1], data: vec![0.0] });
        entry.data[0] += 1.0;
        quantize_f32(&mut entry.data);
        entry.data[0]
    };
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        let shape = state.param(name).shape.clone();
        let n = g.len();
        let m_key = format!("adam.m.{name}");
        let v_key = format!("adam.v.{name}");
        {
            let m = opt
                .entry(m_key.clone())
                .or_insert_with(|| Tensor { shape: shape.clone(), data: vec![0.0; n] });
            for (mk, &gk) in m.data.iter_mut().zip(g) {
                *mk = b1 * *mk + (1.0 - b1) * (scale * gk);
            }
            quantize_f32(&mut m.data);
        }
        {
            let v = opt
                .entry(v_key.clone())
                .or_insert_with(|| Tensor { shape, data: vec![0.0; n] });
            for (vk, &gk) in v.data.iter_mut().zip(g) {
                let gs = scale * gk;
                *vk = b2 * *vk + (1.0 - b2) * gs * gs;
            }
            quantize_f32(&mut v.data);
        }
        let m = opt[&m_key].data.clone();
        let v = opt[&v_key].data.clone();
        let p = state.param_mut(name);
        for k in 0..n {
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p.data[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        quantize_f32(&mut p.data);
    }
    Ok(())
}

fn group_grads(
    state: &ModelState,
    fwd: &Forward,
    grads: &crate::graph::Gradients,
    group: ParamGroup,
) -> Vec<(String, Vec<f64>)> {
    state
        .group_param_names(group)
        .into_iter()
        .map(|name| {
            let g = fwd.grad_of(grads, &name);
            (name, g)
        })
        .collect()
}

// --- stage steps -------------------------------------------------------------

fn check_finite(report: &LossReport) -> Result<()> {
    if !report.total.is_finite() || !report.l_r.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {report:?}")));
    }
    Ok(())
}

/// Stage 1: one optimizer step on the text encoder (from the disentanglement
/// loss), the image encoder (from the alignment loss), and the fusion module
/// (from the reconstruction loss). The decoder is untouched.
pub fn stage1_step(
    state: &mut ModelState,
    opt: &mut OptState,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<LossReport> {
    let report = evaluate_batch(state, batch, cfg.lambda)?;
    check_finite(&report)?;
    let (g_et, g_ei, g_r) = {
        let mut fwd = Forward::new(
            state,
            &[ParamGroup::TextEncoder, ParamGroup::ImageEncoder, ParamGroup::Fusion],
        );
        let live: Vec<NodeId> = batch
            .prompts
            .live
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let spoof: Vec<NodeId> = batch
            .prompts
            .spoof
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let content: Vec<NodeId> = batch
            .prompts
            .content
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let hybrid: Vec<NodeId> = batch
            .prompts
            .hybrid
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let z: Vec<NodeId> = batch
            .images
            .iter()
            .map(|img| fwd.encode_image(img))
            .collect::<Result<_>>()?;
        let l_fd = tape_disentanglement(&mut fwd, &content, &live, &spoof);
        let l_fa = tape_alignment(&mut fwd, &live, &z, &spoof);
        let mut rec_terms = Vec::new();
        for (j, &(li, si)) in batch.prompts.pairing.iter().enumerate() {
            let fused = fwd.fuse(live[li], spoof[si])?;
            rec_terms.push((1.0, fwd.tape.sq_diff(fused, hybrid[j])));
        }
        let l_r = fwd.tape.lin_comb(rec_terms);
        let grads_fd = fwd.tape.backward(l_fd);
        let grads_fa = fwd.tape.backward(l_fa);
        let grads_r = fwd.tape.backward(l_r);
        (
            group_grads(state, &fwd, &grads_fd, ParamGroup::TextEncoder),
            group_grads(state, &fwd, &grads_fa, ParamGroup::ImageEncoder),
            group_grads(state, &fwd, &grads_r, ParamGroup::Fusion),
        )
    };
    adam_update(cfg, state, opt, ParamGroup::TextEncoder, &g_et)?;
    adam_update(cfg, state, opt, ParamGroup::ImageEncoder, &g_ei)?;
    adam_update(cfg, state, opt, ParamGroup::Fusion, &g_r)?;
    Ok(report)
}

/// Stage 2: one optimizer step on the text encoder, image encoder, and
/// decoder from the liveness + spoof + augmented-spoof objective. The fusion
/// module stays bit-identical: its parameters enter the tape as constants.
pub fn stage2_step(
    state: &mut ModelState,
    opt: &mut OptState,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<LossReport> {
    let report = evaluate_batch(state, batch, cfg.lambda)?;
    check_finite(&report)?;
    let (g_et, g_ei, g_d) = {
        let mut fwd = Forward::new(
            state,
            &[ParamGroup::TextEncoder, ParamGroup::ImageEncoder, ParamGroup::Decoder],
        );
        let z: Vec<NodeId> = batch
            .images
            .iter()
            .map(|img| fwd.encode_image(img))
            .collect::<Result<_>>()?;
        let live: Vec<NodeId> = batch
            .prompts
            .live
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let spoof: Vec<NodeId> = batch
            .prompts
            .spoof
            .iter()
            .map(|p| fwd.encode_text(&p.text))
            .collect::<Result<_>>()?;
        let image_maps: Vec<NodeId> =
            z.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
        let live_maps: Vec<NodeId> =
            live.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
        let spoof_maps: Vec<NodeId> =
            spoof.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
        let l_i = tape_sq_to_zero(&mut fwd, &image_maps);
        let l_t = tape_sq_to_zero(&mut fwd, &live_maps);
        let l_s = tape_sq_to_targets(&mut fwd, &spoof_maps, &batch.spoof_targets);
        let mut aug_terms = Vec::new();
        for &zi in &z {
            for (&sk, target) in spoof.iter().zip(&batch.spoof_targets) {
                let fused = fwd.fuse(zi, sk)?;
                let map = fwd.decode_scm(fused)?;
                let tn = fwd.tape.constant(target.data.clone());
                aug_terms.push((1.0, fwd.tape.sq_diff(map, tn)));
            }
        }
        let l_a = fwd.tape.lin_comb(aug_terms);
        let loss = fwd.tape.lin_comb(vec![(1.0, l_i), (1.0, l_t), (1.0, l_s), (1.0, l_a)]);
        let grads = fwd.tape.backward(loss);
        (
            group_grads(state, &fwd, &grads, ParamGroup::TextEncoder),
            group_grads(state, &fwd, &grads, ParamGroup::ImageEncoder),
            group_grads(state, &fwd, &grads, ParamGroup::Decoder),
        )
    };
    adam_update(cfg, state, opt, ParamGroup::TextEncoder, &g_et)?;
    adam_update(cfg, state, opt, ParamGroup::ImageEncoder, &g_ei)?;
    adam_update(cfg, state, opt, ParamGroup::Decoder, &g_d)?;
    Ok(report)
}

/// Single-stage step for the reduced objectives.
fn ablation_step(
    state: &mut ModelState,
    opt: &mut OptState,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<LossReport> {
    let report = evaluate_batch(state, batch, cfg.lambda)?;
    check_finite(&report)?;
    match cfg.ablation {
        Ablation::Full => unreachable!("ablation_step called with the full objective"),
        Ablation::LivenessSpoof => {
            let (g_et, g_ei, g_d) = {
                let mut fwd = Forward::new(
                    state,
                    &[ParamGroup::TextEncoder, ParamGroup::ImageEncoder, ParamGroup::Decoder],
                );
                let z: Vec<NodeId> = batch
                    .images
                    .iter()
                    .map(|img| fwd.encode_image(img))
                    .collect::<Result<_>>()?;
                let live: Vec<NodeId> = batch
                    .prompts
                    .live
                    .iter()
                    .map(|p| fwd.encode_text(&p.text))
                    .collect::<Result<_>>()?;
                let spoof: Vec<NodeId> = batch
                    .prompts
                    .spoof
                    .iter()
                    .map(|p| fwd.encode_text(&p.text))
                    .collect::<Result<_>>()?;
                let image_maps: Vec<NodeId> =
                    z.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
                let live_maps: Vec<NodeId> =
                    live.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
                let spoof_maps: Vec<NodeId> =
                    spoof.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
                let l_i = tape_sq_to_zero(&mut fwd, &image_maps);
                let l_t = tape_sq_to_zero(&mut fwd, &live_maps);
                let l_s = tape_sq_to_targets(&mut fwd, &spoof_maps, &batch.spoof_targets);
                let loss = fwd.tape.lin_comb(vec![(1.0, l_i), (1.0, l_t), (1.0, l_s)]);
                let grads = fwd.tape.backward(loss);
                (
                    group_grads(state, &fwd, &grads, ParamGroup::TextEncoder),
                    group_grads(state, &fwd, &grads, ParamGroup::ImageEncoder),
                    group_grads(state, &fwd, &grads, ParamGroup::Decoder),
                )
            };
            adam_update(cfg, state, opt, ParamGroup::TextEncoder, &g_et)?;
            adam_update(cfg, state, opt, ParamGroup::ImageEncoder, &g_ei)?;
            adam_update(cfg, state, opt, ParamGroup::Decoder, &g_d)?;
        }
        Ablation::NoiseSpoof => {
            let (feats, targets) = batch
                .noise
                .as_ref()
                .ok_or_else(|| Error::Argument("noise ablation batch without noise features".into()))?;
            let (g_ei, g_r, g_d) = {
                let mut fwd = Forward::new(
                    state,
                    &[ParamGroup::ImageEncoder, ParamGroup::Fusion, ParamGroup::Decoder],
                );
                let z: Vec<NodeId> = batch
                    .images
                    .iter()
                    .map(|img| fwd.encode_image(img))
                    .collect::<Result<_>>()?;
                let image_maps: Vec<NodeId> =
                    z.iter().map(|&e| fwd.decode_scm(e)).collect::<Result<_>>()?;
                let l_i = tape_sq_to_zero(&mut fwd, &image_maps);
                let noise_nodes: Vec<NodeId> =
                    feats.iter().map(|f| fwd.tape.constant(f.clone())).collect();
                let mut s_terms = Vec::new();
                for &zi in &z {
                    for (&nk, target) in noise_nodes.iter().zip(targets) {
                        let fused = fwd.fuse(zi, nk)?;
                        let map = fwd.decode_scm(fused)?;
                        let tn = fwd.tape.constant(target.data.clone());
                        s_terms.push((1.0, fwd.tape.sq_diff(map, tn)));
                    }
                }
                let l_s = fwd.tape.lin_comb(s_terms);
                let loss = fwd.tape.lin_comb(vec![(1.0, l_i), (1.0, l_s)]);
                let grads = fwd.tape.backward(loss);
                (
                    group_grads(state, &fwd, &grads, ParamGroup::ImageEncoder),
                    group_grads(state, &fwd, &grads, ParamGroup::Fusion),
                    group_grads(state, &fwd, &grads, ParamGroup::Decoder),
                )
            };
            adam_update(cfg, state, opt, ParamGroup::ImageEncoder, &g_ei)?;
            adam_update(cfg, state, opt, ParamGroup::Fusion, &g_r)?;
            adam_update(cfg, state, opt, ParamGroup::Decoder, &g_d)?;
        }
    }
    Ok(report)
}

// --- warmup ------------------------------------------------------------------

fn warmup_batch(
    cfg: &TrainConfig,
    vocab: &VocabConfig,
    state: &ModelState,
    live_images: &[Image],
    step: u64,
) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
        cfg.seed,
        WARMUP_EPOCH_TAG,
        step,
        STREAM_WARMUP_IMAGES,
    ));
    let images: Vec<Image> = (0..cfg.batch_images)
        .map(|_| live_images[rng.random_range(0..live_images.len())].clone())
        .collect();
    build_batch(
        cfg,
        vocab,
        state.config.scm_shape,
        state.config.d_emb,
        images,
        WARMUP_EPOCH_TAG,
        step,
    )
}

/// Warm-up: first `warmup_steps` steps training the text encoder on the
/// disentanglement loss and the image encoder on the alignment loss, then
/// `warmup_steps` steps training the fusion module on the reconstruction loss
/// with the text encoder frozen.
pub fn warmup(
    state: &mut ModelState,
    opt: &mut OptState,
    cfg: &TrainConfig,
    vocab: &VocabConfig,
    live_images: &[Image],
) -> Result<()> {
    if cfg.warmup_steps == 0 {
        return Ok(());
    }
    if live_images.is_empty() {
        return Err(Error::Argument("warmup requires live images".into()));
    }
    for step in 0..cfg.warmup_steps {
        let batch = warmup_batch(cfg, vocab, state, live_images, step as u64)?;
        let (g_et, g_ei) = {
            let mut fwd =
                Forward::new(state, &[ParamGroup::TextEncoder, ParamGroup::ImageEncoder]);
            let live: Vec<NodeId> = batch
                .prompts
                .live
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let spoof: Vec<NodeId> = batch
                .prompts
                .spoof
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let content: Vec<NodeId> = batch
                .prompts
                .content
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let z: Vec<NodeId> = batch
                .images
                .iter()
                .map(|img| fwd.encode_image(img))
                .collect::<Result<_>>()?;
            let l_fd = tape_disentanglement(&mut fwd, &content, &live, &spoof);
            let l_fa = tape_alignment(&mut fwd, &live, &z, &spoof);
            if !fwd.tape.scalar(l_fd).is_finite() || !fwd.tape.scalar(l_fa).is_finite() {
                return Err(Error::Numeric("non-finite warmup loss".into()));
            }
            let grads_fd = fwd.tape.backward(l_fd);
            let grads_fa = fwd.tape.backward(l_fa);
            (
                group_grads(state, &fwd, &grads_fd, ParamGroup::TextEncoder),
                group_grads(state, &fwd, &grads_fa, ParamGroup::ImageEncoder),
            )
        };
        adam_update(cfg, state, opt, ParamGroup::TextEncoder, &g_et)?;
        adam_update(cfg, state, opt, ParamGroup::ImageEncoder, &g_ei)?;
    }
    for step in 0..cfg.warmup_steps {
        let batch = warmup_batch(cfg, vocab, state, live_images, (cfg.warmup_steps + step) as u64)?;
        let g_r = {
            let mut fwd = Forward::new(state, &[ParamGroup::Fusion]);
            let live: Vec<NodeId> = batch
                .prompts
                .live
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let spoof: Vec<NodeId> = batch
                .prompts
                .spoof
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let hybrid: Vec<NodeId> = batch
                .prompts
                .hybrid
                .iter()
                .map(|p| fwd.encode_text(&p.text))
                .collect::<Result<_>>()?;
            let mut terms = Vec::new();
            for (j, &(li, si)) in batch.prompts.pairing.iter().enumerate() {
                let fused = fwd.fuse(live[li], spoof[si])?;
                terms.push((1.0, fwd.tape.sq_diff(fused, hybrid[j])));
            }
            let l_r = fwd.tape.lin_comb(terms);
            if !fwd.tape.scalar(l_r).is_finite() {
                return Err(Error::Numeric("non-finite warmup reconstruction loss".into()));
            }
            let grads = fwd.tape.backward(l_r);
            group_grads(state, &fwd, &grads, ParamGroup::Fusion)
        };
        adam_update(cfg, state, opt, ParamGroup::Fusion, &g_r)?;
    }
    Ok(())
}

// --- train loop --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub stage: u8,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub seed: u64,
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.report.csv_row(row.step, row.stage));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    seed: u64,
    started_unix: u64,
    finished_unix: u64,
    checkpoints: Vec<String>,
}

const EPOCH_EXTRA: &str = "train.epoch";

/// Number of completed epochs recorded in checkpoint extras, for resuming.
pub fn completed_epochs(extras: &BTreeMap<String, Tensor>) -> usize {
    extras
        .get(EPOCH_EXTRA)
        .map(|t| t.data[0] as usize)
        .unwrap_or(0)
}

/// Splits loaded checkpoint extras into optimizer state, dropping bookkeeping.
pub fn optimizer_state(extras: &BTreeMap<String, Tensor>) -> OptState {
    extras
        .iter()
        .filter(|(k, _)| k.starts_with("adam."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Full training: warmup, then alternating stage-1/stage-2 steps over epochs,
/// with one checkpoint and log flush per epoch.
pub fn train(
    state: &mut ModelState,
    cfg: &TrainConfig,
    vocab: &VocabConfig,
    data: &[TrainItem],
    out_dir: &Path,
) -> Result<TrainLog> {
    let mut opt = OptState::new();
    train_from(state, &mut opt, 0, cfg, vocab, data, out_dir)
}

/// Training continued from `start_epoch` with existing optimizer state; the
/// per-epoch generator streams depend only on (seed, epoch, step), so a
/// resumed run replays the original step for step.
pub fn train_from(
    state: &mut ModelState,
    opt: &mut OptState,
    start_epoch: usize,
    cfg: &TrainConfig,
    vocab: &VocabConfig,
    data: &[TrainItem],
    out_dir: &Path,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if let Some(item) = data.iter().find(|item| item.label != Label::Live) {
        return Err(Error::Protocol(format!(
            "training sample {} is labeled spoof; one-class training uses live data only",
            item.id
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = unix_now();
    let images: Vec<&Image> = data.iter().map(|item| &item.image).collect();

    let snapshot_on_error = |state: &ModelState, opt: &OptState, err: Error| -> Error {
        let path = out_dir.join("diagnostic.ckpt");
        if state.save_checkpoint(&path, opt).is_ok() {
            log::error!("training aborted, diagnostic snapshot at {}", path.display());
        }
        err
    };

    if start_epoch == 0 && cfg.ablation == Ablation::Full {
        let owned: Vec<Image> = images.iter().map(|&img| img.clone()).collect();
        if let Err(e) = warmup(state, opt, cfg, vocab, &owned) {
            return Err(snapshot_on_error(state, opt, e));
        }
    }

    let steps_per_epoch = data.len().div_ceil(cfg.batch_images);
    let mut log = TrainLog { seed: cfg.seed, rows: Vec::new(), checkpoints: Vec::new() };
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            epoch as u64,
            0,
            STREAM_SHUFFLE,
        ));
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(cfg.batch_images).enumerate() {
            let step = epoch * steps_per_epoch + bi;
            let batch_images: Vec<Image> =
                chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = build_batch(
                cfg,
                vocab,
                state.config.scm_shape,
                state.config.d_emb,
                batch_images,
                epoch as u64,
                bi as u64,
            )?;
            let result = (|| -> Result<()> {
                match cfg.ablation {
                    Ablation::Full => {
                        if cfg.alternate_per_epoch {
                            if epoch % 2 == 0 {
                                let r = stage1_step(state, opt, cfg, &batch)?;
                                log.rows.push(LogRow { epoch, step, stage: 1, report: r });
                            } else {
                                let r = stage2_step(state, opt, cfg, &batch)?;
                                log.rows.push(LogRow { epoch, step, stage: 2, report: r });
                            }
                        } else {
                            let r1 = stage1_step(state, opt, cfg, &batch)?;
                            log.rows.push(LogRow { epoch, step, stage: 1, report: r1 });
                            let r2 = stage2_step(state, opt, cfg, &batch)?;
                            log.rows.push(LogRow { epoch, step, stage: 2, report: r2 });
                        }
                    }
                    Ablation::LivenessSpoof | Ablation::NoiseSpoof => {
                        let r = ablation_step(state, opt, cfg, &batch)?;
                        log.rows.push(LogRow { epoch, step, stage: 1, report: r });
                    }
                }
                Ok(())
            })();
            if let Err(e) = result {
                return Err(snapshot_on_error(state, opt, e));
            }
        }
        let ckpt = out_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
        let mut extras = opt.clone();
        extras.insert(
            EPOCH_EXTRA.to_string(),
            Tensor { shape: vec![1], data: vec![(epoch + 1) as f64] },
        );
        state.save_checkpoint(&ckpt, &extras)?;
        log.checkpoints.push(ckpt);
    }

    write_loss_csv(&out_dir.join("loss.csv"), &log.rows)?;
    let manifest = RunManifest {
        config: cfg,
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        checkpoints: log
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let manifest_path = out_dir.join("run.json");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_images: 2,
            prompt_counts: (2, 3, 2),
            warmup_steps: 0,
            seed: 0,
            ..TrainConfig::default()
        }
    }

    fn toy_model() -> ModelState {
        let config = ModelConfig {
            d_emb: 8,
            scm_shape: (1, 4, 4),
            image_size: 8,
            patch_size: 4,
            max_tokens: 32,
        };
        ModelState::init(config, &VocabConfig::default(), 0).unwrap()
    }

    fn toy_images(n: usize) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| {
                let data = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                Image::new(8, 8, data).unwrap()
            })
            .collect()
    }

    fn toy_batch(cfg: &TrainConfig, state: &ModelState, step: u64) -> Batch {
        build_batch(
            cfg,
            &VocabConfig::default(),
            state.config.scm_shape,
            state.config.d_emb,
            toy_images(cfg.batch_images),
            0,
            step,
        )
        .unwrap()
    }

    fn group_tensors(state: &ModelState, group: ParamGroup) -> Vec<Tensor> {
        state
            .group_param_names(group)
            .iter()
            .map(|n| state.param(n).clone())
            .collect()
    }

    #[test]
    fn tape_losses_agree_with_value_route() {
        // The gradients come from tape-built losses while the logged report
        // comes from the forward-only objective functions; both routes must
        // produce the same numbers.
        let state = toy_model();
        let cfg = toy_cfg();
        let batch = toy_batch(&cfg, &state, 0);
        let report = evaluate_batch(&state, &batch, cfg.lambda).unwrap();

        let mut fwd = Forward::new(&state, &[]);
        let live: Vec<NodeId> = batch
            .prompts
            .live
            .iter()
            .map(|p| fwd.encode_text(&p.text).unwrap())
            .collect();
        let spoof: Vec<NodeId> = batch
            .prompts
            .spoof
            .iter()
            .map(|p| fwd.encode_text(&p.text).unwrap())
            .collect();
        let content: Vec<NodeId> = batch
            .prompts
            .content
            .iter()
            .map(|p| fwd.encode_text(&p.text).unwrap())
            .collect();
        let hybrid: Vec<NodeId> = batch
            .prompts
            .hybrid
            .iter()
            .map(|p| fwd.encode_text(&p.text).unwrap())
            .collect();
        let z: Vec<NodeId> = batch
            .images
            .iter()
            .map(|img| fwd.encode_image(img).unwrap())
            .collect();
        let image_maps: Vec<NodeId> = z.iter().map(|&e| fwd.decode_scm(e).unwrap()).collect();
        let live_maps: Vec<NodeId> =
            live.iter().map(|&e| fwd.decode_scm(e).unwrap()).collect();
        let spoof_maps: Vec<NodeId> =
            spoof.iter().map(|&e| fwd.decode_scm(e).unwrap()).collect();
        let l_i = tape_sq_to_zero(&mut fwd, &image_maps);
        let l_t = tape_sq_to_zero(&mut fwd, &live_maps);
        let l_s = tape_sq_to_targets(&mut fwd, &spoof_maps, &batch.spoof_targets);
        let l_fd = tape_disentanglement(&mut fwd, &content, &live, &spoof);
        let l_fa = tape_alignment(&mut fwd, &live, &z, &spoof);
        let mut rec_terms = Vec::new();
        let mut aug_terms = Vec::new();
        for (j, &(li, si)) in batch.prompts.pairing.iter().enumerate() {
            let fused = fwd.fuse(live[li], spoof[si]).unwrap();
            rec_terms.push((1.0, fwd.tape.sq_diff(fused, hybrid[j])));
        }
        let l_r = fwd.tape.lin_comb(rec_terms);
        for &zi in &z {
            for (&sk, target) in spoof.iter().zip(&batch.spoof_targets) {
                let fused = fwd.fuse(zi, sk).unwrap();
                let map = fwd.decode_scm(fused).unwrap();
                let tn = fwd.tape.constant(target.data.clone());
                aug_terms.push((1.0, fwd.tape.sq_diff(map, tn)));
            }
        }
        let l_a = fwd.tape.lin_comb(aug_terms);

        for (name, node, want) in [
            ("L_I", l_i, report.l_i),
            ("L_T", l_t, report.l_t),
            ("L_S", l_s, report.l_s),
            ("L_FD", l_fd, report.l_fd),
            ("L_FA", l_fa, report.l_fa),
            ("L_R", l_r, report.l_r),
            ("L_A", l_a, report.l_a),
        ] {
            let got = fwd.tape.scalar(node);
            assert!(
                (got - want).abs() < 1e-12 * (1.0 + want.abs()),
                "{name}: tape {got} vs value {want}"
            );
        }
    }

    #[test]
    fn stage1_leaves_decoder_bitwise_identical() {
        let mut state = toy_model();
        let cfg = toy_cfg();
        let mut opt = OptState::new();
        for step in 0..5 {
            let batch = toy_batch(&cfg, &state, step);
            let before = group_tensors(&state, ParamGroup::Decoder);
            stage1_step(&mut state, &mut opt, &cfg, &batch).unwrap();
            assert_eq!(before, group_tensors(&state, ParamGroup::Decoder));
        }
        assert!(!opt.contains_key("adam.t.d"));
    }

    #[test]
    fn stage2_leaves_fusion_bitwise_identical() {
        let mut state = toy_model();
        let cfg = toy_cfg();
        let mut opt = OptState::new();
        for step in 0..5 {
            let batch = toy_batch(&cfg, &state, step);
            let before = group_tensors(&state, ParamGroup::Fusion);
            stage2_step(&mut state, &mut opt, &cfg, &batch).unwrap();
            assert_eq!(before, group_tensors(&state, ParamGroup::Fusion));
        }
        assert!(!opt.contains_key("adam.t.r"));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut state = toy_model();
        let mut cfg = toy_cfg();
        cfg.learning_rate = 0.0;
        let mut opt = OptState::new();
        let batch = toy_batch(&cfg, &state, 0);
        let before = state.clone();
        stage1_step(&mut state, &mut opt, &cfg, &batch).unwrap();
        stage2_step(&mut state, &mut opt, &cfg, &batch).unwrap();
        assert_eq!(before.params, state.params);
    }

    #[test]
    fn stage1_decreases_each_of_its_losses() {
        let mut state = toy_model();
        let cfg = toy_cfg();
        let mut opt = OptState::new();
        let batch = toy_batch(&cfg, &state, 0);
        let before = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        stage1_step(&mut state, &mut opt, &cfg, &batch).unwrap();
        let after = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        assert!(after.l_fd < before.l_fd, "L_FD {} -> {}", before.l_fd, after.l_fd);
        assert!(after.l_fa < before.l_fa, "L_FA {} -> {}", before.l_fa, after.l_fa);
        assert!(after.l_r < before.l_r, "L_R {} -> {}", before.l_r, after.l_r);
    }

    #[test]
    fn stage2_objective_decreases_over_fifty_steps() {
        let mut state = toy_model();
        let cfg = toy_cfg();
        let mut opt = OptState::new();
        let batch = toy_batch(&cfg, &state, 0);
        let before = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        for _ in 0..50 {
            stage2_step(&mut state, &mut opt, &cfg, &batch).unwrap();
        }
        let after = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        let sum = |r: &LossReport| r.l_l + r.l_s + r.l_a;
        assert!(sum(&after) < sum(&before), "{} -> {}", sum(&before), sum(&after));
    }

    #[test]
    fn warmup_zero_steps_is_identity() {
        let mut state = toy_model();
        let before = state.clone();
        let mut cfg = toy_cfg();
        cfg.warmup_steps = 0;
        let mut opt = OptState::new();
        warmup(&mut state, &mut opt, &cfg, &VocabConfig::default(), &toy_images(3)).unwrap();
        assert_eq!(before, state);
        assert!(opt.is_empty());
    }

    #[test]
    fn warmup_reduces_contrastive_losses_and_is_deterministic() {
        let mut cfg = toy_cfg();
        cfg.warmup_steps = 30;
        let vocab = VocabConfig::default();
        let images = toy_images(4);
        let mut state = toy_model();
        let batch = toy_batch(&cfg, &state, 7);
        let before = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        let mut opt = OptState::new();
        warmup(&mut state, &mut opt, &cfg, &vocab, &images).unwrap();
        let after = evaluate_batch(&state, &batch, cfg.lambda).unwrap();
        assert!(after.l_fd <= before.l_fd);
        assert!(after.l_fa <= before.l_fa);

        let mut state2 = toy_model();
        let mut opt2 = OptState::new();
        warmup(&mut state2, &mut opt2, &cfg, &vocab, &images).unwrap();
        assert_eq!(state.params, state2.params);
    }

    fn toy_data(n: usize) -> Vec<TrainItem> {
        toy_images(n)
            .into_iter()
            .enumerate()
            .map(|(i, image)| TrainItem { id: format!("live/{i}.png"), image, label: Label::Live })
            .collect()
    }

    #[test]
    fn one_epoch_two_batches_logs_two_steps_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = toy_model();
        let cfg = toy_cfg(); // batch_images 2
        let log = train(&mut state, &cfg, &VocabConfig::default(), &toy_data(4), dir.path()).unwrap();
        let stage1 = log.rows.iter().filter(|r| r.stage == 1).count();
        let stage2 = log.rows.iter().filter(|r| r.stage == 2).count();
        assert_eq!((stage1, stage2), (2, 2));
        assert_eq!(log.checkpoints.len(), 1);
        assert!(dir.path().join("loss.csv").exists());
        assert!(dir.path().join("run.json").exists());
    }

    #[test]
    fn spoof_labeled_training_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = toy_model();
        let mut data = toy_data(3);
        data[1].label = Label::Spoof;
        let err = train(&mut state, &toy_cfg(), &VocabConfig::default(), &data, dir.path());
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let data = toy_data(4);
        let cfg = TrainConfig { warmup_steps: 3, epochs: 2, ..toy_cfg() };
        let vocab = VocabConfig::default();
        let run = |dir: &Path| {
            let mut state = toy_model();
            let log = train(&mut state, &cfg, &vocab, &data, dir).unwrap();
            (state, log.rows)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (s1, r1) = run(d1.path());
        let (s2, r2) = run(d2.path());
        assert_eq!(s1.params, s2.params);
        assert_eq!(r1, r2);
    }

    #[test]
    fn resume_replays_the_next_epoch_exactly() {
        let data = toy_data(4);
        let cfg = TrainConfig { warmup_steps: 2, epochs: 2, ..toy_cfg() };
        let vocab = VocabConfig::default();

        let full_dir = tempfile::tempdir().unwrap();
        let mut full_state = toy_model();
        let full_log = train(&mut full_state, &cfg, &vocab, &data, full_dir.path()).unwrap();

        // Stop after epoch 1, reload its checkpoint, and continue.
        let part_dir = tempfile::tempdir().unwrap();
        let mut part_state = toy_model();
        let one_epoch = TrainConfig { epochs: 1, ..cfg.clone() };
        let part_log = train(&mut part_state, &one_epoch, &vocab, &data, part_dir.path()).unwrap();
        let (mut resumed, extras) =
            ModelState::load_checkpoint(&part_log.checkpoints[0]).unwrap();
        assert_eq!(completed_epochs(&extras), 1);
        let mut opt = optimizer_state(&extras);
        let resume_dir = tempfile::tempdir().unwrap();
        let resume_log =
            train_from(&mut resumed, &mut opt, 1, &cfg, &vocab, &data, resume_dir.path()).unwrap();

        let full_epoch2: Vec<&LogRow> =
            full_log.rows.iter().filter(|r| r.epoch == 1).collect();
        let resumed_epoch2: Vec<&LogRow> = resume_log.rows.iter().collect();
        assert_eq!(full_epoch2.len(), resumed_epoch2.len());
        for (a, b) in full_epoch2.iter().zip(&resumed_epoch2) {
            assert_eq!(a.report, b.report, "step {} stage {}", a.step, a.stage);
        }
        assert_eq!(full_state.params, resumed.params);
    }

    #[test]
    fn per_epoch_alternation_runs_one_stage_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = toy_model();
        let cfg = TrainConfig { epochs: 2, alternate_per_epoch: true, ..toy_cfg() };
        let log = train(&mut state, &cfg, &VocabConfig::default(), &toy_data(2), dir.path()).unwrap();
        assert!(log.rows.iter().filter(|r| r.epoch == 0).all(|r| r.stage == 1));
        assert!(log.rows.iter().filter(|r| r.epoch == 1).all(|r| r.stage == 2));
    }

    #[test]
    fn ablation_steps_run_and_log_single_stage() {
        for ablation in [Ablation::LivenessSpoof, Ablation::NoiseSpoof] {
            let dir = tempfile::tempdir().unwrap();
            let mut state = toy_model();
            let cfg = TrainConfig { ablation, ..toy_cfg() };
            let log =
                train(&mut state, &cfg, &VocabConfig::default(), &toy_data(2), dir.path()).unwrap();
            assert!(!log.rows.is_empty());
            assert!(log.rows.iter().all(|r| r.stage == 1));
        }
    }

    #[test]
    fn grad_clip_bounds_the_update() {
        let cfg_base = toy_cfg();
        let batch = toy_batch(&cfg_base, &toy_model(), 0);
        let run = |clip: Option<f64>| {
            let mut state = toy_model();
            let mut opt = OptState::new();
            let cfg = TrainConfig { grad_clip: clip, ..toy_cfg() };
            stage2_step(&mut state, &mut opt, &cfg, &batch).unwrap();
            state
        };
        let unclipped = run(None);
        let clipped = run(Some(1e-6));
        // A tiny max-norm must shrink the step; states must differ.
        assert_ne!(unclipped.params, clipped.params);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = toy_cfg();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.prompt_counts = (1, 1, 1);
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
    }
}
