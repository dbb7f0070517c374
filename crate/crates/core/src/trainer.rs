//! Two-stage training: batch assembly, the warmup (alignment-only) and
//! main (alignment + masked-prediction) loops, AdamW with decoupled weight
//! decay, the warmup+cosine learning-rate schedule, EMA target updates,
//! finite-difference gradient verification, checkpoints and reports.
//!
//! Runs are deterministic in (config.seed, dataset): batching, masking and
//! parameter updates all draw from seeded sub-streams.

use crate::dataset::{ReferenceEncoder, SceneRecord};
use crate::encoder::{
    self, bind_model, effective_weights, ema_update, patchify, BindMode, Checkpoint,
    EncoderConfig, ModelWeights, TokenSequence,
};
use crate::geometry::normalize_views;
use crate::graph::{ChamferReduction, Graph, NodeId};
use crate::losses::{
    info_nce_node, pooled_scene_node, ChamferScope, JepaMode, LossParts, NceReduction, Stage,
};
use crate::masking::{build_partition, sample_block_mask, PatchKey};
use crate::mat::Mat;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Every tunable of the pipeline, bound from `key=value` config lines.
/// Defaults are the desk-scale values documented in the README.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // architecture
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub predictor_blocks: usize,
    pub model_seed: u64,
    pub image_encoder_seed: u64,
    pub text_seed: u64,
    // training
    pub stage: Stage,
    pub steps: usize,
    pub batch_views: usize,
    pub batch_scenes: usize,
    pub lr_peak: f64,
    pub lr_warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub seed: u64,
    pub jepa_mode: JepaMode,
    pub chamfer_scope: ChamferScope,
    pub chamfer_reduction: ChamferReduction,
    pub nce_reduction: NceReduction,
    pub mask_scale_min: f64,
    pub mask_scale_max: f64,
    pub mask_aspect_min: f64,
    pub mask_aspect_max: f64,
    // data generation
    pub scenes: usize,
    pub views_per_scene: usize,
    pub candidate_cameras: usize,
    pub render_h: usize,
    pub render_w: usize,
    pub voxel_cell: f64,
    pub caption_candidates: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub room_xy_min: f64,
    pub room_xy_max: f64,
    pub room_z_min: f64,
    pub room_z_max: f64,
    pub walls: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dim: 64,
            blocks: 2,
            heads: 4,
            patch: 16,
            lora_rank: 32,
            lora_alpha: 64.0,
            predictor_blocks: 2,
            model_seed: 0x6d6f_6465,
            image_encoder_seed: crate::dataset::DEFAULT_IMAGE_ENCODER_SEED,
            text_seed: crate::dataset::DEFAULT_TEXT_SEED,
            stage: Stage::Warmup,
            steps: 500,
            batch_views: 32,
            batch_scenes: 4,
            lr_peak: 1e-4,
            lr_warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            ema_momentum: 0.996,
            seed: 7,
            jepa_mode: JepaMode::Chamfer,
            chamfer_scope: ChamferScope::Pooled,
            chamfer_reduction: ChamferReduction::Sum,
            nce_reduction: NceReduction::Mean,
            mask_scale_min: 0.15,
            mask_scale_max: 0.2,
            mask_aspect_min: 0.75,
            mask_aspect_max: 1.5,
            scenes: 16,
            views_per_scene: 8,
            candidate_cameras: 32,
            render_h: 64,
            render_w: 64,
            voxel_cell: 0.25,
            caption_candidates: 15,
            objects_min: 5,
            objects_max: 7,
            room_xy_min: 4.5,
            room_xy_max: 7.5,
            room_z_min: 2.6,
            room_z_max: 3.2,
            walls: true,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value}")))
}

impl PipelineConfig {
    /// Apply one `key=value` override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dim" => self.dim = parse_as(key, value)?,
            "blocks" => self.blocks = parse_as(key, value)?,
            "heads" => self.heads = parse_as(key, value)?,
            "patch" => self.patch = parse_as(key, value)?,
            "lora_rank" => self.lora_rank = parse_as(key, value)?,
            "lora_alpha" => self.lora_alpha = parse_as(key, value)?,
            "predictor_blocks" => self.predictor_blocks = parse_as(key, value)?,
            "model_seed" => self.model_seed = parse_as(key, value)?,
            "image_encoder_seed" => self.image_encoder_seed = parse_as(key, value)?,
            "text_seed" => self.text_seed = parse_as(key, value)?,
            "stage" => {
                self.stage = match value {
                    "warmup" => Stage::Warmup,
                    "main" => Stage::Main,
                    other => {
                        return Err(Error::Config(format!("unknown stage '{other}'")))
                    }
                }
            }
            "steps" => self.steps = parse_as(key, value)?,
            "batch_views" => self.batch_views = parse_as(key, value)?,
            "batch_scenes" => self.batch_scenes = parse_as(key, value)?,
            "lr_peak" => self.lr_peak = parse_as(key, value)?,
            "lr_warmup_steps" => self.lr_warmup_steps = parse_as(key, value)?,
            "beta1" => self.beta1 = parse_as(key, value)?,
            "beta2" => self.beta2 = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "ema_momentum" => self.ema_momentum = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "jepa_mode" => {
                self.jepa_mode = match value {
                    "chamfer" => JepaMode::Chamfer,
                    "mse" => JepaMode::Mse,
                    other => {
                        return Err(Error::Config(format!("unknown jepa_mode '{other}'")))
                    }
                }
            }
            "chamfer_scope" => {
                self.chamfer_scope = match value {
                    "pooled" => ChamferScope::Pooled,
                    "per_view" => ChamferScope::PerView,
                    other => {
                        return Err(Error::Config(format!("unknown chamfer_scope '{other}'")))
                    }
                }
            }
            "chamfer_reduction" => {
                self.chamfer_reduction = match value {
                    "sum" => ChamferReduction::Sum,
                    "mean" => ChamferReduction::Mean,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown chamfer_reduction '{other}'"
                        )))
                    }
                }
            }
            "nce_reduction" => {
                self.nce_reduction = match value {
                    "mean" => NceReduction::Mean,
                    "sum" => NceReduction::Sum,
                    other => {
                        return Err(Error::Config(format!("unknown nce_reduction '{other}'")))
                    }
                }
            }
            "mask_scale_min" => self.mask_scale_min = parse_as(key, value)?,
            "mask_scale_max" => self.mask_scale_max = parse_as(key, value)?,
            "mask_aspect_min" => self.mask_aspect_min = parse_as(key, value)?,
            "mask_aspect_max" => self.mask_aspect_max = parse_as(key, value)?,
            "scenes" => self.scenes = parse_as(key, value)?,
            "views_per_scene" => self.views_per_scene = parse_as(key, value)?,
            "candidate_cameras" => self.candidate_cameras = parse_as(key, value)?,
            "render_h" => self.render_h = parse_as(key, value)?,
            "render_w" => self.render_w = parse_as(key, value)?,
            "voxel_cell" => self.voxel_cell = parse_as(key, value)?,
            "caption_candidates" => self.caption_candidates = parse_as(key, value)?,
            "objects_min" => self.objects_min = parse_as(key, value)?,
            "objects_max" => self.objects_max = parse_as(key, value)?,
            "room_xy_min" => self.room_xy_min = parse_as(key, value)?,
            "room_xy_max" => self.room_xy_max = parse_as(key, value)?,
            "room_z_min" => self.room_z_min = parse_as(key, value)?,
            "room_z_max" => self.room_z_max = parse_as(key, value)?,
            "walls" => self.walls = parse_as(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse flat `key=value` lines; '#' starts a comment, blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        if self.patch == 0 || self.render_h % self.patch != 0 || self.render_w % self.patch != 0
        {
            return Err(Error::Config(format!(
                "render {}x{} not divisible by patch {}",
                self.render_h, self.render_w, self.patch
            )));
        }
        let cfg = EncoderConfig {
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            patch: self.patch,
            view_max: self.views_per_scene,
            grid_h: self.render_h / self.patch,
            grid_w: self.render_w / self.patch,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            predictor_blocks: self.predictor_blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator_config(&self) -> crate::dataset::GeneratorConfig {
        crate::dataset::GeneratorConfig {
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            room_xy_min: self.room_xy_min,
            room_xy_max: self.room_xy_max,
            room_z_min: self.room_z_min,
            room_z_max: self.room_z_max,
            candidate_cameras: self.candidate_cameras,
            render_h: self.render_h,
            render_w: self.render_w,
            selected_views: self.views_per_scene,
            voxel_cell: self.voxel_cell,
            caption_candidates: self.caption_candidates,
            walls: self.walls,
        }
    }

    pub fn text_encoder(&self) -> Result<ReferenceEncoder> {
        ReferenceEncoder::new(self.dim, self.text_seed)
    }
}

/// Learning rate at `step`: linear ramp to the peak over the warmup
/// window, then half-cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(Error::Config(format!(
            "total steps {total_steps} must exceed lr warmup {warmup_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return Ok(peak);
        }
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: usize,
    pub moments: BTreeMap<String, (Mat<T>, Mat<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn convert<U: Scalar>(&self) -> OptimizerState<U> {
        OptimizerState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), (m.convert(), v.convert())))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One decoupled-weight-decay Adam step for a single parameter, using the
/// already-incremented `state.step` for bias correction.
pub fn adamw_update<T: Scalar>(
    name: &str,
    param: &mut Mat<T>,
    grad: &Mat<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} != parameter shape {:?} for {name}",
            grad.shape(),
            param.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            context: format!("gradient of {name}"),
            step: state.step,
        });
    }
    let (m, v) = state
        .moments
        .entry(name.to_string())
        .or_insert_with(|| (Mat::zeros(param.rows(), param.cols()), Mat::zeros(param.rows(), param.cols())));
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(cfg.weight_decay);
    let bc1 = T::one() - T::from_f64(cfg.beta1.powi(state.step as i32));
    let bc2 = T::one() - T::from_f64(cfg.beta2.powi(state.step as i32));
    for i in 0..param.len() {
        let g = grad.as_slice()[i];
        let mi = b1 * m.as_slice()[i] + (T::one() - b1) * g;
        let vi = b2 * v.as_slice()[i] + (T::one() - b2) * g * g;
        m.as_mut_slice()[i] = mi;
        v.as_mut_slice()[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = param.as_slice()[i];
        param.as_mut_slice()[i] = p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p);
    }
    Ok(())
}

/// One prepared training item: tokenized views with their frozen-side
/// embeddings. For the warmup stage each item is a single view; for the
/// main stage an item is a whole scene.
#[derive(Debug, Clone)]
pub struct PreparedScene<T> {
    pub tokens: Vec<TokenSequence<T>>,
    /// Frozen image-encoder embeddings, one row per view.
    pub z_image: Mat<T>,
    /// View-caption embeddings, one row per view.
    pub z_text: Mat<T>,
    /// Pooled (mean then re-normalized) image embedding.
    pub z_image_pooled: Mat<T>,
    pub z_scene_text: Option<Mat<T>>,
    pub grids: Vec<(usize, usize)>,
}

/// Normalize, tokenize and embed records for a stage. Warmup flattens each
/// view into its own single-view item normalized on its own extent; main
/// keeps scenes whole, normalized per scene.
pub fn prepare_items<T: Scalar>(
    stage: Stage,
    records: &[SceneRecord],
    enc_cfg: &EncoderConfig,
    image_encoder: &ModelWeights<T>,
    text: &ReferenceEncoder,
) -> Result<Vec<PreparedScene<T>>> {
    let mut items = Vec::new();
    for record in records {
        match stage {
            Stage::Warmup => {
                for view in &record.views {
                    let (normed, _) = normalize_views(std::slice::from_ref(&view.pointmap))?;
                    let tokens = vec![patchify::<T>(&normed[0], enc_cfg.patch)?.with_view(0)];
                    items.push(prepare_one(
                        tokens,
                        &[view.caption.clone()],
                        None,
                        enc_cfg,
                        image_encoder,
                        text,
                    )?);
                }
            }
            Stage::Main => {
                if record.views.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "scene {} has no views",
                        record.id
                    )));
                }
                if record.views.len() > enc_cfg.view_max {
                    return Err(Error::InvalidArgument(format!(
                        "scene {} has {} views, positional table holds {}",
                        record.id,
                        record.views.len(),
                        enc_cfg.view_max
                    )));
                }
                let maps: Vec<_> = record.views.iter().map(|v| v.pointmap.clone()).collect();
                let (normed, _) = normalize_views(&maps)?;
                let tokens: Vec<TokenSequence<T>> = normed
                    .iter()
                    .enumerate()
                    .map(|(slot, pm)| Ok(patchify::<T>(pm, enc_cfg.patch)?.with_view(slot)))
                    .collect::<Result<Vec<_>>>()?;
                let captions: Vec<String> =
                    record.views.iter().map(|v| v.caption.clone()).collect();
                let scene_caption = record.scene_caption.as_deref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "scene {} lacks a scene caption required by the main stage",
                        record.id
                    ))
                })?;
                items.push(prepare_one(
                    tokens,
                    &captions,
                    Some(scene_caption),
                    enc_cfg,
                    image_encoder,
                    text,
                )?);
            }
        }
    }
    Ok(items)
}

fn prepare_one<T: Scalar>(
    tokens: Vec<TokenSequence<T>>,
    captions: &[String],
    scene_caption: Option<&str>,
    enc_cfg: &EncoderConfig,
    image_encoder: &ModelWeights<T>,
    text: &ReferenceEncoder,
) -> Result<PreparedScene<T>> {
    let mut g: Graph<T> = Graph::new();
    let bound = bind_model(&mut g, image_encoder, BindMode::Frozen)?;
    let encodings = encoder::encode_views(&mut g, &bound, &tokens, None)?;
    let image_rows: Vec<Mat<T>> = encodings
        .iter()
        .map(|e| g.value(e.summary).clone())
        .collect();
    let image_refs: Vec<&Mat<T>> = image_rows.iter().collect();
    let z_image = Mat::concat_rows(&image_refs);
    let pooled_node = {
        let views = g.constant(z_image.clone());
        pooled_scene_node(&mut g, views)
    };
    let z_image_pooled = g.value(pooled_node).clone();
    let text_rows: Vec<Mat<T>> = captions
        .iter()
        .map(|c| text.embed::<T>(c))
        .collect::<Result<Vec<_>>>()?;
    let text_refs: Vec<&Mat<T>> = text_rows.iter().collect();
    let z_text = Mat::concat_rows(&text_refs);
    let z_scene_text = match scene_caption {
        Some(c) => Some(text.embed::<T>(c)?),
        None => None,
    };
    let grids = tokens
        .iter()
        .map(|_| (enc_cfg.grid_h, enc_cfg.grid_w))
        .collect();
    Ok(PreparedScene {
        tokens,
        z_image,
        z_text,
        z_image_pooled,
        z_scene_text,
        grids,
    })
}

/// Masking and target data for one scene in one step.
#[derive(Debug, Clone)]
pub struct SceneMasking<T> {
    pub visible: BTreeSet<PatchKey>,
    pub masked: Vec<PatchKey>,
    /// Target-encoder embeddings of the masked patches, in `masked` order.
    pub target: Mat<T>,
    /// Row ranges of `masked` belonging to each view, for per-view Chamfer.
    pub view_ranges: Vec<(usize, usize)>,
}

/// Sample one block mask per view and evaluate the frozen target encoder on
/// the full views to extract masked-patch targets.
pub fn build_scene_masking<T: Scalar>(
    item: &PreparedScene<T>,
    target_weights: &ModelWeights<T>,
    cfg: &PipelineConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SceneMasking<T>> {
    let mut masks = Vec::with_capacity(item.tokens.len());
    for (view, &(gh, gw)) in item.grids.iter().enumerate() {
        let mut m = sample_block_mask(
            gh,
            gw,
            rng,
            (cfg.mask_scale_min, cfg.mask_scale_max),
            (cfg.mask_aspect_min, cfg.mask_aspect_max),
        )?;
        m.view = view;
        masks.push(m);
    }
    let partition = build_partition(&item.grids, &masks)?;
    let visible: BTreeSet<PatchKey> = partition.visible.iter().copied().collect();

    let mut g: Graph<T> = Graph::new();
    let bound = bind_model(&mut g, target_weights, BindMode::Frozen)?;
    let encodings = encoder::encode_views(&mut g, &bound, &item.tokens, None)?;
    let mut rows: Vec<Mat<T>> = Vec::with_capacity(partition.masked.len());
    let mut view_ranges = Vec::with_capacity(item.tokens.len());
    let mut at = 0usize;
    for (view, enc) in encodings.iter().enumerate() {
        let patches = g
            .value(enc.patches.ok_or_else(|| {
                Error::InvalidArgument("target encoder produced no patches".into())
            })?)
            .clone();
        let start = at;
        for key in partition.masked.iter().filter(|k| k.view == view) {
            let row = enc
                .keys
                .iter()
                .position(|k| k == key)
                .ok_or_else(|| Error::InvalidArgument(format!("missing target key {key:?}")))?;
            rows.push(patches.slice_rows(row, row + 1));
            at += 1;
        }
        view_ranges.push((start, at));
    }
    let refs: Vec<&Mat<T>> = rows.iter().collect();
    let target = if refs.is_empty() {
        Mat::zeros(0, cfg.dim)
    } else {
        Mat::concat_rows(&refs)
    };
    Ok(SceneMasking {
        visible,
        masked: partition.masked,
        target,
        view_ranges,
    })
}

/// Which loss to evaluate from a built batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    View,
    Scene,
    Jepa(JepaMode),
    /// Stage total: warmup = view; main = view + scene + jepa(cfg mode).
    Total,
}

/// Value, per-component values, and (optionally) gradients of a batch loss.
pub struct BatchEval<T> {
    pub value: T,
    pub parts: LossParts<f64>,
    pub grads: Option<BTreeMap<String, Mat<T>>>,
}

/// Build the full loss graph for a batch of prepared items and evaluate it.
/// `maskings` must align with `batch` for the main stage (one per scene).
pub fn eval_batch<T: Scalar>(
    weights: &ModelWeights<T>,
    stage: Stage,
    batch: &[&PreparedScene<T>],
    maskings: Option<&[SceneMasking<T>]>,
    cfg: &PipelineConfig,
    select: LossSelect,
    want_grads: bool,
) -> Result<BatchEval<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut g: Graph<T> = Graph::new();
    let mode = if want_grads {
        BindMode::Trainable
    } else {
        BindMode::Frozen
    };
    let bound = bind_model(&mut g, weights, mode)?;

    // Full-view encodes for alignment summaries.
    let mut all_summaries: Vec<NodeId> = Vec::new();
    let mut per_scene_summaries: Vec<Vec<NodeId>> = Vec::new();
    let mut full_encodings: Vec<Vec<encoder::ViewEncoding>> = Vec::new();
    for item in batch {
        let encs = encoder::encode_views(&mut g, &bound, &item.tokens, None)?;
        let ids: Vec<NodeId> = encs.iter().map(|e| e.summary).collect();
        all_summaries.extend(ids.iter().copied());
        per_scene_summaries.push(ids);
        full_encodings.push(encs);
    }

    let need_view = matches!(select, LossSelect::View | LossSelect::Total);
    let need_scene =
        stage == Stage::Main && matches!(select, LossSelect::Scene | LossSelect::Total);
    let need_jepa =
        stage == Stage::Main && matches!(select, LossSelect::Jepa(_) | LossSelect::Total);

    let mut parts = LossParts::<f64>::default();
    let mut selected: Vec<NodeId> = Vec::new();

    if need_view {
        let zp = g.concat_rows(&all_summaries);
        let zi_rows: Vec<&Mat<T>> = batch.iter().map(|item| &item.z_image).collect();
        let zi = g.constant(Mat::concat_rows(&zi_rows));
        let zv_rows: Vec<&Mat<T>> = batch.iter().map(|item| &item.z_text).collect();
        let zv = g.constant(Mat::concat_rows(&zv_rows));
        let pi = info_nce_node(&mut g, zp, zi, bound.log_tau, cfg.nce_reduction);
        let pv = info_nce_node(&mut g, zp, zv, bound.log_tau, cfg.nce_reduction);
        let l_view = g.add(pi, pv);
        parts.view = Some(g.value(l_view).item().as_f64());
        selected.push(l_view);
    }

    if need_scene {
        let mut pooled_p = Vec::with_capacity(batch.len());
        for ids in &per_scene_summaries {
            let stacked = g.concat_rows(ids);
            pooled_p.push(pooled_scene_node(&mut g, stacked));
        }
        let zp = g.concat_rows(&pooled_p);
        let zi_rows: Vec<&Mat<T>> = batch.iter().map(|item| &item.z_image_pooled).collect();
        let zi = g.constant(Mat::concat_rows(&zi_rows));
        let zs_rows: Vec<Mat<T>> = batch
            .iter()
            .map(|item| {
                item.z_scene_text
                    .clone()
                    .ok_or(Error::MissingLossPart("scene caption embedding"))
            })
            .collect::<Result<Vec<_>>>()?;
        let zs_refs: Vec<&Mat<T>> = zs_rows.iter().collect();
        let zs = g.constant(Mat::concat_rows(&zs_refs));
        let pi = info_nce_node(&mut g, zp, zi, bound.log_tau, cfg.nce_reduction);
        let ps = info_nce_node(&mut g, zp, zs, bound.log_tau, cfg.nce_reduction);
        let l_scene = g.add(pi, ps);
        parts.scene = Some(g.value(l_scene).item().as_f64());
        selected.push(l_scene);
    }

    if need_jepa {
        let maskings = maskings.ok_or(Error::MissingLossPart("scene maskings"))?;
        if maskings.len() != batch.len() {
            return Err(Error::ShapeMismatch(
                "one masking per scene required".into(),
            ));
        }
        let jepa_mode = match select {
            LossSelect::Jepa(m) => m,
            _ => cfg.jepa_mode,
        };
        let mut scene_losses = Vec::with_capacity(batch.len());
        for (item, masking) in batch.iter().zip(maskings) {
            let encs =
                encoder::encode_views(&mut g, &bound, &item.tokens, Some(&masking.visible))?;
            let context: Vec<(NodeId, Vec<PatchKey>)> = encs
                .iter()
                .filter_map(|e| e.patches.map(|p| (p, e.keys.clone())))
                .collect();
            let pred = encoder::predict_masked(&mut g, &bound, &context, &masking.masked)?;
            let loss = match jepa_mode {
                JepaMode::Mse => g.mse_to_const(pred, masking.target.clone()),
                JepaMode::Chamfer => match cfg.chamfer_scope {
                    ChamferScope::Pooled => {
                        g.chamfer_to_const(pred, masking.target.clone(), cfg.chamfer_reduction)
                    }
                    ChamferScope::PerView => {
                        let mut per_view = Vec::new();
                        for &(start, end) in &masking.view_ranges {
                            if start == end {
                                continue;
                            }
                            let p = g.slice_rows(pred, start, end);
                            let t = masking.target.slice_rows(start, end);
                            per_view.push(g.chamfer_to_const(p, t, cfg.chamfer_reduction));
                        }
                        sum_nodes(&mut g, &per_view)
                    }
                },
            };
            scene_losses.push(loss);
        }
        let total = sum_nodes(&mut g, &scene_losses);
        let l_jepa = g.scale_const(total, T::one() / T::from_usize(batch.len()));
        parts.pjepa = Some(g.value(l_jepa).item().as_f64());
        selected.push(l_jepa);
    }

    if selected.is_empty() {
        return Err(Error::MissingLossPart("no loss selected for stage"));
    }
    let loss = sum_nodes(&mut g, &selected);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
            step: 0,
        });
    }

    let grads = if want_grads {
        let back = g.backward(loss);
        let mut map = BTreeMap::new();
        for (name, id) in &bound.leaves {
            map.insert(name.clone(), back.get_or_zeros(*id, g.value(*id)));
        }
        Some(map)
    } else {
        None
    };
    Ok(BatchEval {
        value,
        parts,
        grads,
    })
}

fn sum_nodes<T: Scalar>(g: &mut Graph<T>, nodes: &[NodeId]) -> NodeId {
    assert!(!nodes.is_empty());
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

const LOG_TAU_MIN: f64 = -6.907755278982137; // ln(1e-3)
const LOG_TAU_MAX: f64 = 2.302585092994046; // ln(10)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_view: f64,
    pub l_scene: f64,
    pub l_pjepa: f64,
    pub total: f64,
}

/// Per-step traces plus the digest of the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub final_digest: String,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for s in &self.steps {
            let line =
                serde_json::to_string(s).map_err(|e| Error::Manifest(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        let summary = serde_json::json!({
            "final_digest": self.final_digest,
            "wall_time_s": self.wall_time_s,
        });
        writeln!(w, "{summary}")?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        let mut final_digest = String::new();
        let mut wall_time_s = 0.0;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if line.contains("final_digest") {
                let v: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| Error::Manifest(e.to_string()))?;
                final_digest = v["final_digest"].as_str().unwrap_or_default().to_string();
                wall_time_s = v["wall_time_s"].as_f64().unwrap_or_default();
            } else {
                steps.push(
                    serde_json::from_str(&line).map_err(|e| Error::Manifest(e.to_string()))?,
                );
            }
        }
        Ok(TrainReport {
            steps,
            final_digest,
            wall_time_s,
        })
    }
}

/// SHA-256 over every parameter (f32 little-endian, fixed name order) of
/// the context and, when present, target weights.
pub fn weights_digest<T: Scalar>(
    context: &ModelWeights<T>,
    target: Option<&ModelWeights<T>>,
) -> String {
    let mut hasher = Sha256::new();
    let mut absorb = |w: &ModelWeights<T>| {
        for (name, mat) in w.named_params() {
            hasher.update(name.as_bytes());
            for x in mat.as_slice() {
                hasher.update(x.as_f32().to_le_bytes());
            }
        }
    };
    absorb(context);
    if let Some(t) = target {
        absorb(t);
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weights plus optimizer state after a stage.
pub struct StageResult<T> {
    pub weights: ModelWeights<T>,
    pub target: Option<ModelWeights<T>>,
    pub opt: OptimizerState<T>,
    pub report: TrainReport,
}

/// Run one training stage over the prepared dataset.
///
/// Warmup: single-view items, alignment loss only, no target encoder.
/// Main: whole scenes; the target encoder starts from the effective context
/// weights (unless provided) and tracks them by EMA after each step.
pub fn run_stage<T: Scalar>(
    stage: Stage,
    records: &[SceneRecord],
    cfg: &PipelineConfig,
    weights: ModelWeights<T>,
    target: Option<ModelWeights<T>>,
) -> Result<StageResult<T>> {
    let start = std::time::Instant::now();
    let enc_cfg = weights.config;
    let image_encoder = ModelWeights::<T>::init(enc_cfg, cfg.image_encoder_seed)?;
    let text = cfg.text_encoder()?;
    let items = prepare_items(stage, records, &enc_cfg, &image_encoder, &text)?;

    let mut weights = weights;
    let mut target = match (stage, target) {
        (Stage::Main, Some(t)) => Some(t),
        (Stage::Main, None) => {
            let adapters = weights
                .adapters
                .clone()
                .ok_or_else(|| Error::Adapter("context encoder has no adapters".into()))?;
            Some(effective_weights(&weights, &adapters)?)
        }
        (Stage::Warmup, t) => t,
    };

    let batch_size = match stage {
        Stage::Warmup => cfg.batch_views,
        Stage::Main => cfg.batch_scenes,
    };
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let adam = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: 1e-8,
    };
    let mut opt = OptimizerState::<T>::new();
    let mut report_steps = Vec::with_capacity(cfg.steps);
    let mut mask_rng = rng_for(cfg.seed, 0x6d61_736b);

    if cfg.steps > 0 {
        // Validate the schedule up front rather than mid-run.
        lr_at(0, cfg.steps, cfg.lr_warmup_steps, cfg.lr_peak)?;
    }

    let mut step = 0usize;
    let mut epoch = 0u64;
    'training: while step < cfg.steps {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = rng_for(cfg.seed, 0x7368_7566 ^ epoch);
        order.shuffle(&mut shuffle_rng);
        if order.len() < batch_size {
            break 'training; // dataset cannot fill a single batch
        }
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size {
                break; // drop-last
            }
            if step >= cfg.steps {
                break 'training;
            }
            step += 1;
            let batch: Vec<&PreparedScene<T>> = chunk.iter().map(|&i| &items[i]).collect();
            let maskings = if stage == Stage::Main {
                let tw = target.as_ref().expect("main stage has a target encoder");
                let mut ms = Vec::with_capacity(batch.len());
                for item in &batch {
                    ms.push(build_scene_masking(item, tw, cfg, &mut mask_rng)?);
                }
                Some(ms)
            } else {
                None
            };
            let eval = eval_batch(
                &weights,
                stage,
                &batch,
                maskings.as_deref(),
                cfg,
                LossSelect::Total,
                true,
            )
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite { context, step },
                other => other,
            })?;
            let lr = lr_at(step, cfg.steps, cfg.lr_warmup_steps, cfg.lr_peak)?;
            let grads = eval.grads.expect("gradients requested");
            opt.step += 1;
            for (name, param) in weights.named_params_mut() {
                if let Some(grad) = grads.get(&name) {
                    adamw_update(&name, param, grad, &mut opt, lr, &adam).map_err(|e| {
                        match e {
                            Error::NonFinite { context, .. } => {
                                Error::NonFinite { context, step }
                            }
                            other => other,
                        }
                    })?;
                }
            }
            let lt = weights.log_tau.item().as_f64().clamp(LOG_TAU_MIN, LOG_TAU_MAX);
            weights.log_tau = Mat::scalar(T::from_f64(lt));

            if stage == Stage::Main {
                let adapters = weights
                    .adapters
                    .clone()
                    .ok_or_else(|| Error::Adapter("context encoder lost adapters".into()))?;
                let effective = effective_weights(&weights, &adapters)?;
                let t = target.as_mut().expect("main stage has a target encoder");
                ema_update(t, &effective, T::from_f64(cfg.ema_momentum))?;
            }

            report_steps.push(StepRecord {
                step,
                lr,
                l_view: eval.parts.view.unwrap_or(0.0),
                l_scene: eval.parts.scene.unwrap_or(0.0),
                l_pjepa: eval.parts.pjepa.unwrap_or(0.0),
                total: eval.value.as_f64(),
            });
        }
        epoch += 1;
    }

    let final_digest = weights_digest(&weights, target.as_ref());
    Ok(StageResult {
        weights,
        target,
        opt,
        report: TrainReport {
            steps: report_steps,
            final_digest,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Central-difference gradient verification: for sampled coordinates of
/// every trainable parameter, compare (f(θ+ε) - f(θ-ε)) / 2ε against the
/// analytic gradient. Returns the maximum relative error
/// |a - n| / max(1e-8, |a| + |n|).
pub fn grad_check(
    eval: &mut dyn FnMut(&ModelWeights<f64>) -> Result<f64>,
    weights: &ModelWeights<f64>,
    analytic: &BTreeMap<String, Mat<f64>>,
    eps: f64,
    max_coords_per_group: usize,
) -> Result<f64> {
    let mut max_err = 0.0f64;
    let names: Vec<String> = weights
        .named_params()
        .iter()
        .filter(|(n, _)| encoder::is_trainable(n))
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic grad for {name}")))?;
        let len = grad.len();
        let samples = max_coords_per_group.min(len).max(1);
        let stride = (len / samples).max(1);
        for s in 0..samples {
            let i = (s * stride).min(len - 1);
            let mut perturb = |delta: f64| -> Result<f64> {
                let mut w = weights.clone();
                for (n, mat) in w.named_params_mut() {
                    if n == name {
                        let v = mat.as_slice()[i];
                        mat.as_mut_slice()[i] = v + delta;
                        break;
                    }
                }
                eval(&w)
            };
            let plus = perturb(eps)?;
            let minus = perturb(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Full-pipeline gradient verification on a small f64 instance: builds a
/// fixed two-scene batch, then checks each loss (view, scene, Chamfer and
/// MSE masked-prediction, stage total) for every trainable group.
pub fn gradcheck_suite(cfg: &PipelineConfig) -> Result<Vec<(String, f64)>> {
    let enc_cfg = cfg.encoder_config()?;
    let weights = {
        // Randomize adapter B too: at its zero init the adapter-A gradient
        // vanishes identically and the check would be vacuous there.
        let mut w = ModelWeights::<f64>::init(enc_cfg, cfg.model_seed)?;
        let mut rng = rng_for(cfg.model_seed, 0x6263_6b67);
        if let Some(ad) = &mut w.adapters {
            for ba in &mut ad.blocks {
                for pair in [&mut ba.q, &mut ba.v] {
                    pair.b = Mat::from_fn(pair.b.rows(), pair.b.cols(), |_, _| {
                        crate::rng::next_gaussian(&mut rng) * 0.02
                    });
                }
            }
        }
        w
    };

    let gen_cfg = cfg.generator_config();
    let text = cfg.text_encoder()?;
    let image_encoder = ModelWeights::<f64>::init(enc_cfg, cfg.image_encoder_seed)?;
    let (records, _) = crate::dataset::build_corpus(
        cfg.seed,
        2,
        &gen_cfg,
        &enc_cfg,
        cfg.image_encoder_seed,
        &text,
    )?;
    let items = prepare_items(Stage::Main, &records, &enc_cfg, &image_encoder, &text)?;
    let batch: Vec<&PreparedScene<f64>> = items.iter().collect();

    let adapters = weights
        .adapters
        .clone()
        .ok_or_else(|| Error::Adapter("gradcheck model lacks adapters".into()))?;
    let target_weights = effective_weights(&weights, &adapters)?;
    let mut rng = rng_for(cfg.seed, 0x6d61_736b);
    let mut maskings = Vec::with_capacity(batch.len());
    for item in &batch {
        maskings.push(build_scene_masking(item, &target_weights, cfg, &mut rng)?);
    }

    let selects = [
        ("view".to_string(), LossSelect::View),
        ("scene".to_string(), LossSelect::Scene),
        ("pjepa_chamfer".to_string(), LossSelect::Jepa(JepaMode::Chamfer)),
        ("pjepa_mse".to_string(), LossSelect::Jepa(JepaMode::Mse)),
        ("total".to_string(), LossSelect::Total),
    ];
    let mut out = Vec::with_capacity(selects.len());
    for (name, select) in selects {
        let eval = eval_batch(
            &weights,
            Stage::Main,
            &batch,
            Some(&maskings),
            cfg,
            select,
            true,
        )?;
        let analytic = eval.grads.expect("gradients requested");
        let mut value_of = |w: &ModelWeights<f64>| -> Result<f64> {
            Ok(eval_batch(w, Stage::Main, &batch, Some(&maskings), cfg, select, false)?
                .value)
        };
        let err = grad_check(&mut value_of, &weights, &analytic, 1e-4, 6)?;
        out.push((name, err));
    }
    Ok(out)
}

/// Serialize training state into the binary checkpoint format.
pub fn save_checkpoint(
    path: &Path,
    weights: &ModelWeights<f32>,
    target: Option<&ModelWeights<f32>>,
    opt: &OptimizerState<f32>,
) -> Result<()> {
    let mut tensors: Vec<(String, Mat<f32>)> =
        vec![("step".into(), Mat::scalar(opt.step as f32))];
    for (name, (m, v)) in &opt.moments {
        tensors.push((format!("m.{name}"), m.clone()));
        tensors.push((format!("v.{name}"), v.clone()));
    }
    let ckpt = Checkpoint {
        context: weights.clone(),
        target: target.cloned(),
        opt: tensors,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    encoder::write_checkpoint(&mut f, &ckpt)
}

pub struct LoadedCheckpoint {
    pub weights: ModelWeights<f32>,
    pub target: Option<ModelWeights<f32>>,
    pub opt: OptimizerState<f32>,
}

impl LoadedCheckpoint {
    /// The encoder downstream tasks should embed with: the EMA target when
    /// the checkpoint has one (post main stage), otherwise the effective
    /// (adapter-merged) context encoder.
    pub fn embedding_weights(&self) -> Result<ModelWeights<f32>> {
        if let Some(t) = &self.target {
            return Ok(t.clone());
        }
        match &self.weights.adapters {
            Some(ad) => effective_weights(&self.weights, ad),
            None => Ok(self.weights.clone()),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt = encoder::read_checkpoint(&mut f)?;
    let mut opt = OptimizerState::new();
    let mut m_parts: BTreeMap<String, Mat<f32>> = BTreeMap::new();
    let mut v_parts: BTreeMap<String, Mat<f32>> = BTreeMap::new();
    for (name, mat) in ckpt.opt {
        if name == "step" {
            opt.step = mat.item() as usize;
        } else if let Some(p) = name.strip_prefix("m.") {
            m_parts.insert(p.to_string(), mat);
        } else if let Some(p) = name.strip_prefix("v.") {
            v_parts.insert(p.to_string(), mat);
        }
    }
    for (name, m) in m_parts {
        if let Some(v) = v_parts.remove(&name) {
            opt.moments.insert(name, (m, v));
        }
    }
    Ok(LoadedCheckpoint {
        weights: ckpt.context,
        target: ckpt.target,
        opt,
    })
}
