//! Procedural synthetic room scenes: box furniture layouts, ray-traced
//! depth rendering, maximum-coverage view selection, template captions with
//! paraphrase candidates, a deterministic hashing text embedder, and the
//! scene manifest / query file formats.
//!
//! Everything here is a pure function of (seed, config): the same inputs
//! produce byte-identical corpora on any platform.

use crate::encoder::{self, BindMode, EncoderConfig, ModelWeights};
use crate::geometry::{
    self, unproject, CameraModel, DepthMap, PointMap, Vec3,
};
use crate::graph::Graph;
use crate::mat::Mat;
use crate::rng::{derive_seed, fnv1a64, rng_for, splitmix64};
use crate::scalar::Scalar;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Fixed seed of the frozen reference image encoder (never trained).
pub const DEFAULT_IMAGE_ENCODER_SEED: u64 = 0x696d_6167;
/// Fixed seed of the hashing text embedder.
pub const DEFAULT_TEXT_SEED: u64 = 0x7465_7874;

/// Furniture vocabulary; every object renders as an axis-aligned box, the
/// tag picks the caption word and a characteristic size range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShapeTag {
    Box,
    Crate,
    Table,
    Cabinet,
    Shelf,
    Bench,
}

impl ShapeTag {
    pub const ALL: [ShapeTag; 6] = [
        ShapeTag::Box,
        ShapeTag::Crate,
        ShapeTag::Table,
        ShapeTag::Cabinet,
        ShapeTag::Shelf,
        ShapeTag::Bench,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeTag::Box => "box",
            ShapeTag::Crate => "crate",
            ShapeTag::Table => "table",
            ShapeTag::Cabinet => "cabinet",
            ShapeTag::Shelf => "shelf",
            ShapeTag::Bench => "bench",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeTag::Box => "boxes",
            ShapeTag::Crate => "crates",
            ShapeTag::Table => "tables",
            ShapeTag::Cabinet => "cabinets",
            ShapeTag::Shelf => "shelves",
            ShapeTag::Bench => "benches",
        }
    }

    /// (x, y, z) size ranges in meters.
    fn size_ranges(self) -> [(f64, f64); 3] {
        match self {
            ShapeTag::Box => [(0.4, 0.8), (0.4, 0.8), (0.4, 0.8)],
            ShapeTag::Crate => [(0.5, 1.0), (0.5, 1.0), (0.5, 1.0)],
            ShapeTag::Table => [(1.0, 1.6), (0.7, 1.1), (0.7, 0.8)],
            ShapeTag::Cabinet => [(0.5, 1.0), (0.4, 0.6), (1.5, 2.0)],
            ShapeTag::Shelf => [(0.9, 1.6), (0.25, 0.4), (1.6, 2.1)],
            ShapeTag::Bench => [(1.2, 1.8), (0.35, 0.5), (0.4, 0.55)],
        }
    }
}

/// One axis-aligned furniture box resting on the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxObject {
    pub center: Vec3,
    pub size: Vec3,
    pub shape: ShapeTag,
}

impl BoxObject {
    pub fn lo(&self) -> Vec3 {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn hi(&self) -> Vec3 {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }
}

/// A generated room: extents, furniture, and candidate cameras. The room
/// spans x in [-room.x/2, room.x/2], y likewise, z in [0, room.z] (z up).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub room: Vec3,
    pub objects: Vec<BoxObject>,
    pub cameras: Vec<CameraModel>,
    /// Whether the room shell (walls/floor/ceiling) counts as geometry.
    pub walls: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub room_xy_min: f64,
    pub room_xy_max: f64,
    pub room_z_min: f64,
    pub room_z_max: f64,
    pub candidate_cameras: usize,
    pub render_h: usize,
    pub render_w: usize,
    pub selected_views: usize,
    pub voxel_cell: f64,
    pub caption_candidates: usize,
    pub walls: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            objects_min: 5,
            objects_max: 7,
            room_xy_min: 4.5,
            room_xy_max: 7.5,
            room_z_min: 2.6,
            room_z_max: 3.2,
            candidate_cameras: 32,
            render_h: 64,
            render_w: 64,
            selected_views: 8,
            voxel_cell: 0.25,
            caption_candidates: 15,
            walls: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "objects_min {} > objects_max {}",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.room_xy_min > 0.0 && self.room_xy_min <= self.room_xy_max)
            || !(self.room_z_min > 0.0 && self.room_z_min <= self.room_z_max)
        {
            return Err(Error::Config("room extent ranges invalid".into()));
        }
        if self.candidate_cameras == 0 || self.selected_views == 0 {
            return Err(Error::Config("need at least one camera and view".into()));
        }
        if self.render_h == 0 || self.render_w == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        if !(self.voxel_cell > 0.0) {
            return Err(Error::Config("voxel cell must be positive".into()));
        }
        if self.caption_candidates == 0 || self.caption_candidates > SCENE_TEMPLATES.len() {
            return Err(Error::Config(format!(
                "caption_candidates must be in 1..={}",
                SCENE_TEMPLATES.len()
            )));
        }
        Ok(())
    }
}

const OBJECT_MARGIN: f64 = 0.1;
const PLACEMENT_RETRIES: usize = 100;

/// Deterministically generate a scene from (seed, config).
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0x7363_656e);
    let room = [
        rng.gen_range(cfg.room_xy_min..=cfg.room_xy_max),
        rng.gen_range(cfg.room_xy_min..=cfg.room_xy_max),
        rng.gen_range(cfg.room_z_min..=cfg.room_z_max),
    ];
    let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let shape = ShapeTag::ALL[rng.gen_range(0..ShapeTag::ALL.len())];
            let ranges = shape.size_ranges();
            let size = [
                rng.gen_range(ranges[0].0..=ranges[0].1),
                rng.gen_range(ranges[1].0..=ranges[1].1),
                rng.gen_range(ranges[2].0..=ranges[2].1),
            ];
            let half = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
            let max_x = room[0] / 2.0 - half[0] - OBJECT_MARGIN;
            let max_y = room[1] / 2.0 - half[1] - OBJECT_MARGIN;
            if max_x <= 0.0 || max_y <= 0.0 || size[2] + OBJECT_MARGIN > room[2] {
                continue;
            }
            let center = [
                rng.gen_range(-max_x..=max_x),
                rng.gen_range(-max_y..=max_y),
                half[2],
            ];
            objects.push(BoxObject { center, size, shape });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "no object placement found after {PLACEMENT_RETRIES} tries in {room:?}"
            )));
        }
    }

    let mut cameras = Vec::with_capacity(cfg.candidate_cameras);
    let (w, h) = (cfg.render_w as f64, cfg.render_h as f64);
    for k in 0..cfg.candidate_cameras {
        let angle = std::f64::consts::TAU * k as f64 / cfg.candidate_cameras as f64
            + rng.gen_range(-0.2..=0.2);
        let radius = rng.gen_range(0.32..=0.47) * room[0].min(room[1]);
        let pos = [
            radius * angle.cos(),
            radius * angle.sin(),
            rng.gen_range(0.45..=0.80) * room[2],
        ];
        // Spread look targets across the room so different candidates see
        // clearly different object subsets.
        let target = [
            rng.gen_range(-0.30..=0.30) * room[0],
            rng.gen_range(-0.30..=0.30) * room[1],
            rng.gen_range(0.10..=0.45) * room[2],
        ];
        let fx = rng.gen_range(0.85..=1.15) * w;
        let rotation = look_at_rotation(pos, target);
        cameras.push(
            CameraModel::new(fx, fx, (w - 1.0) / 2.0, (h - 1.0) / 2.0, rotation, pos)
                .map_err(|e| Error::Generation(e.to_string()))?,
        );
    }

    Ok(SyntheticScene {
        seed,
        room,
        objects,
        cameras,
        walls: cfg.walls,
    })
}

/// Camera-to-world rotation looking from `pos` towards `target`, world z
/// up, camera x right / y down / z forward.
fn look_at_rotation(pos: Vec3, target: Vec3) -> [f64; 9] {
    let mut f = [
        target[0] - pos[0],
        target[1] - pos[1],
        target[2] - pos[2],
    ];
    let norm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt().max(1e-12);
    for c in &mut f {
        *c /= norm;
    }
    // Nudge away from the degenerate straight-down/up case.
    if f[0].abs() < 1e-6 && f[1].abs() < 1e-6 {
        f = [1e-3, 0.0, f[2].signum()];
        let n = (f[0] * f[0] + f[2] * f[2]).sqrt();
        f = [f[0] / n, 0.0, f[2] / n];
    }
    let up = [0.0, 0.0, 1.0];
    let mut x = cross(f, up);
    let xn = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    for c in &mut x {
        *c /= xn;
    }
    let y = cross(f, x);
    // Columns are the camera axes expressed in world coordinates.
    [
        x[0], y[0], f[0],
        x[1], y[1], f[1],
        x[2], y[2], f[2],
    ]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Minimum camera-frame depth considered a hit.
pub const NEAR_EPS: f64 = 1e-4;

/// Slab intersection of a ray with an axis-aligned box; returns the
/// (enter, exit) parameters when the ray meets the box.
fn ray_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[a];
            let mut ta = (lo[a] - origin[a]) * inv;
            let mut tb = (hi[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

fn room_bounds(scene: &SyntheticScene) -> (Vec3, Vec3) {
    (
        [-scene.room[0] / 2.0, -scene.room[1] / 2.0, 0.0],
        [scene.room[0] / 2.0, scene.room[1] / 2.0, scene.room[2]],
    )
}

/// Ray-trace the nearest surface along each pixel ray. Depth is the
/// camera-frame z of the hit (the ray parameter for a z=1 ray), matching
/// the unprojection convention; pixels with no hit get 0 (invalid).
pub fn render_depth(
    scene: &SyntheticScene,
    cam: &CameraModel,
    h: usize,
    w: usize,
) -> Result<DepthMap> {
    cam.validate()?;
    let mut depth = DepthMap::new(h, w, vec![0.0; h * w])?;
    let (room_lo, room_hi) = room_bounds(scene);
    for v in 0..h {
        for u in 0..w {
            let ray_cam = cam.pixel_ray(u as f64, v as f64);
            let dir = cam.rotate(ray_cam);
            let origin = cam.translation;
            let mut best = f64::INFINITY;
            if scene.walls {
                if let Some((t_enter, t_exit)) = ray_box(origin, dir, room_lo, room_hi) {
                    // From inside the shell the exit face is the visible wall.
                    let t = if t_enter > NEAR_EPS { t_enter } else { t_exit };
                    if t > NEAR_EPS {
                        best = best.min(t);
                    }
                }
            }
            for obj in &scene.objects {
                if let Some((t_enter, t_exit)) = ray_box(origin, dir, obj.lo(), obj.hi()) {
                    let t = if t_enter > NEAR_EPS { t_enter } else { t_exit };
                    if t > NEAR_EPS {
                        best = best.min(t);
                    }
                }
            }
            if best.is_finite() {
                depth.set(v, u, best);
            }
        }
    }
    Ok(depth)
}

/// Greedy maximum-coverage selection: repeatedly take the view whose voxel
/// set adds the most unseen voxels (ties to the smallest index) until
/// min(n, #views) views are chosen.
pub fn select_max_coverage(views: &[PointMap], n: usize, cell: f64) -> Result<Vec<usize>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to select from".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("must select at least one view".into()));
    }
    let sets: Vec<_> = views
        .iter()
        .map(|v| {
            let pts: Vec<Vec3> = v.valid_points().collect();
            geometry::voxel_coverage(&pts, cell)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = Vec::new();
    let mut union = std::collections::BTreeSet::new();
    let mut remaining: Vec<usize> = (0..views.len()).collect();
    while chosen.len() < n.min(views.len()) {
        let mut best_idx = 0;
        let mut best_gain = usize::MAX;
        for (slot, &i) in remaining.iter().enumerate() {
            let gain = sets[i].difference(&union).count();
            if best_gain == usize::MAX || gain > best_gain {
                best_gain = gain;
                best_idx = slot;
            }
        }
        let i = remaining.remove(best_idx);
        union.extend(sets[i].iter().copied());
        chosen.push(i);
    }
    Ok(chosen)
}

const COUNT_WORDS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve",
];

fn count_word(n: usize) -> String {
    if n >= 1 && n <= COUNT_WORDS.len() {
        COUNT_WORDS[n - 1].to_string()
    } else {
        n.to_string()
    }
}

fn size_word(room: Vec3) -> &'static str {
    let area = room[0] * room[1];
    if area < 28.0 {
        "small"
    } else if area < 42.0 {
        "medium"
    } else {
        "large"
    }
}

/// Coarse world-frame location word for an object center: center, one of
/// four walls, or one of four corners.
fn position_phrase(center: Vec3, room: Vec3) -> &'static str {
    let rx = center[0] / (room[0] / 2.0);
    let ry = center[1] / (room[1] / 2.0);
    let x_side = rx.abs() >= 0.4;
    let y_side = ry.abs() >= 0.4;
    match (x_side, y_side) {
        (false, false) => "in the center of the room",
        (true, false) => {
            if rx > 0.0 {
                "near the east wall"
            } else {
                "near the west wall"
            }
        }
        (false, true) => {
            if ry > 0.0 {
                "near the north wall"
            } else {
                "near the south wall"
            }
        }
        (true, true) => match (rx > 0.0, ry > 0.0) {
            (true, true) => "in the northeast corner",
            (true, false) => "in the southeast corner",
            (false, true) => "in the northwest corner",
            (false, false) => "in the southwest corner",
        },
    }
}

/// Group objects by (shape, location) and render "two crates near the east
/// wall" style phrases in deterministic order.
fn object_phrases(objects: &[&BoxObject], room: Vec3) -> Vec<String> {
    let mut groups: std::collections::BTreeMap<(ShapeTag, &'static str), usize> =
        std::collections::BTreeMap::new();
    for obj in objects {
        *groups
            .entry((obj.shape, position_phrase(obj.center, room)))
            .or_insert(0) += 1;
    }
    groups
        .into_iter()
        .map(|((shape, place), count)| {
            let noun = if count == 1 { shape.word() } else { shape.plural() };
            format!("{} {} {}", count_word(count), noun, place)
        })
        .collect()
}

fn join_phrases(phrases: &[String]) -> String {
    match phrases.len() {
        0 => String::new(),
        1 => phrases[0].clone(),
        2 => format!("{} and {}", phrases[0], phrases[1]),
        _ => {
            let head = phrases[..phrases.len() - 1].join(", ");
            format!("{} and {}", head, phrases[phrases.len() - 1])
        }
    }
}

/// Scene caption frames; {size} and {objects} are substituted. Frozen: the
/// corpus and its regression tests depend on the exact strings.
const SCENE_TEMPLATES: [&str; 15] = [
    "a {size} room containing {objects}",
    "a scan of a {size} room with {objects}",
    "this {size} room contains {objects}",
    "an indoor scene of a {size} room with {objects}",
    "the {size} room has {objects}",
    "inside this {size} room you can find {objects}",
    "a {size} room that holds {objects}",
    "a view into a {size} room containing {objects}",
    "one {size} room featuring {objects}",
    "a {size} indoor room with {objects}",
    "the scan shows a {size} room containing {objects}",
    "a {size} room, which holds {objects}",
    "a simple {size} room including {objects}",
    "a {size} room where you see {objects}",
    "a tidy {size} room offering {objects}",
];

const EMPTY_SCENE_TEMPLATES: [&str; 15] = [
    "an empty room",
    "a scan of an empty room",
    "this room is empty",
    "an indoor scene of an empty room",
    "the room has no furniture",
    "inside this room there is nothing",
    "a room that holds nothing",
    "a view into an empty room",
    "one empty room",
    "an empty indoor room",
    "the scan shows an empty room",
    "a room, which holds nothing",
    "a simple empty room",
    "a room where you see nothing",
    "a bare empty room",
];

/// View caption frames; {objects} is the visible-object phrase ("bare
/// walls" when nothing is visible).
const VIEW_TEMPLATES: [&str; 15] = [
    "a view showing {objects}",
    "a picture of {objects}",
    "this view shows {objects}",
    "you can see {objects}",
    "a camera view containing {objects}",
    "a viewpoint revealing {objects}",
    "looking at {objects}",
    "a frame capturing {objects}",
    "an angle showing {objects}",
    "a shot of {objects}",
    "a view of {objects}",
    "a perspective with {objects}",
    "a snapshot showing {objects}",
    "the camera sees {objects}",
    "a view presenting {objects}",
];

/// Frustum visibility: the object's center projects in front of the camera
/// and inside the image cone. Occlusion is ignored.
fn visible_from(obj: &BoxObject, cam: &CameraModel) -> bool {
    let p = cam.world_to_cam(obj.center);
    if p[2] < 0.2 {
        return false;
    }
    let half_u = (cam.cx + 0.5) / cam.fx;
    let half_v = (cam.cy + 0.5) / cam.fy;
    (p[0] / p[2]).abs() <= half_u && (p[1] / p[2]).abs() <= half_v
}

/// Canonical caption (paraphrase variant 0): the scene caption names every
/// object group plus the room size word; a view caption names the object
/// groups visible from that camera.
pub fn caption(scene: &SyntheticScene, view: Option<usize>) -> Result<String> {
    Ok(caption_variants(scene, view, 1)?.remove(0))
}

/// The first `count` paraphrase variants of a caption; variant 0 is the
/// canonical text used for training, the rest are hold-out paraphrases.
pub fn caption_variants(
    scene: &SyntheticScene,
    view: Option<usize>,
    count: usize,
) -> Result<Vec<String>> {
    if count == 0 || count > SCENE_TEMPLATES.len() {
        return Err(Error::InvalidArgument(format!(
            "caption variant count must be in 1..={}",
            SCENE_TEMPLATES.len()
        )));
    }
    match view {
        None => {
            if scene.objects.is_empty() {
                return Ok(EMPTY_SCENE_TEMPLATES[..count]
                    .iter()
                    .map(|t| t.to_string())
                    .collect());
            }
            let refs: Vec<&BoxObject> = scene.objects.iter().collect();
            let objects = join_phrases(&object_phrases(&refs, scene.room));
            let size = size_word(scene.room);
            Ok(SCENE_TEMPLATES[..count]
                .iter()
                .map(|t| t.replace("{size}", size).replace("{objects}", &objects))
                .collect())
        }
        Some(idx) => {
            let cam = scene.cameras.get(idx).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "view index {idx} out of range ({} cameras)",
                    scene.cameras.len()
                ))
            })?;
            let visible: Vec<&BoxObject> = scene
                .objects
                .iter()
                .filter(|o| visible_from(o, cam))
                .collect();
            let objects = if visible.is_empty() {
                "bare walls".to_string()
            } else {
                join_phrases(&object_phrases(&visible, scene.room))
            };
            Ok(VIEW_TEMPLATES[..count]
                .iter()
                .map(|t| t.replace("{objects}", &objects))
                .collect())
        }
    }
}

/// Deterministic hashing text embedder standing in for a frozen language
/// encoder: same text, same unit vector, on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl ReferenceEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim must be >= 8, got {dim}"
            )));
        }
        Ok(ReferenceEncoder { dim, seed })
    }

    /// Lowercase, split on non-alphanumeric runs.
    fn tokens(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect()
    }

    /// Sum of per-token signed patterns, L2-normalized. Token patterns come
    /// from a splitmix64 stream keyed by the FNV hash of the token and the
    /// encoder seed.
    pub fn embed<T: Scalar>(&self, text: &str) -> Result<Mat<T>> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(Error::ZeroTokens);
        }
        let mut acc = vec![0.0f64; self.dim];
        for tok in &tokens {
            let mut state = fnv1a64(tok.as_bytes()) ^ splitmix64(self.seed);
            let mut j = 0;
            while j < self.dim {
                state = splitmix64(state);
                let mut word = state;
                for _ in 0..64 {
                    if j >= self.dim {
                        break;
                    }
                    acc[j] += if word & 1 == 1 { 1.0 } else { -1.0 };
                    word >>= 1;
                    j += 1;
                }
            }
        }
        let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Exact cancellation across tokens; astronomically unlikely but
            // keep the unit-norm contract.
            acc[0] = 1.0;
            norm = 1.0;
        }
        Ok(Mat::from_vec(
            1,
            self.dim,
            acc.into_iter().map(|x| T::from_f64(x / norm)).collect(),
        ))
    }
}

/// Indices of the k best candidates by cosine similarity to the reference,
/// descending, ties to the smaller index.
pub fn rank_captions<T: Scalar>(
    candidates: &[Mat<T>],
    reference: &Mat<T>,
    k: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to rank".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut sims: Vec<(usize, T)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut dot = T::zero();
            for (a, b) in c.as_slice().iter().zip(reference.as_slice()) {
                dot = dot + *a * *b;
            }
            (i, dot)
        })
        .collect();
    sims.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    Ok(sims.into_iter().take(k).map(|(i, _)| i).collect())
}

/// One curated view: rendered depth, its camera, the lifted point map, and
/// the selected caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub depth: DepthMap,
    pub camera: CameraModel,
    pub pointmap: PointMap,
    pub caption: String,
}

/// A curated scene ready for training or embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub views: Vec<SceneView>,
    pub scene_caption: Option<String>,
}

impl SceneRecord {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Check that every point map reproduces unprojection of its depth and
    /// camera within `tol`.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        for (i, view) in self.views.iter().enumerate() {
            let expect = unproject(&view.depth, &view.camera)?;
            for (a, b) in expect.points().iter().zip(view.pointmap.points()) {
                let a_valid = PointMap::is_valid(*a);
                let b_valid = PointMap::is_valid(*b);
                if a_valid != b_valid {
                    return Err(Error::ShapeMismatch(format!(
                        "view {i}: validity mask mismatch"
                    )));
                }
                if a_valid {
                    for c in 0..3 {
                        if (a[c] - b[c]).abs() > tol {
                            return Err(Error::ShapeMismatch(format!(
                                "view {i}: point map deviates from unprojection by {}",
                                (a[c] - b[c]).abs()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Held-out paraphrases for retrieval evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub scene_id: String,
    pub texts: Vec<String>,
}

/// Number of held-out scene-caption paraphrases per scene in generated
/// corpora (variants 1..=HELD_OUT_VARIANTS; variant 0 trains).
pub const HELD_OUT_VARIANTS: usize = 5;

/// Build a full corpus: for each scene, render candidate views, select the
/// maximum-coverage subset, rank view-caption candidates against the frozen
/// reference image encoder, and collect held-out scene paraphrases.
pub fn build_corpus(
    seed: u64,
    n_scenes: usize,
    gen_cfg: &GeneratorConfig,
    enc_cfg: &EncoderConfig,
    image_encoder_seed: u64,
    text: &ReferenceEncoder,
) -> Result<(Vec<SceneRecord>, Vec<QueryRecord>)> {
    gen_cfg.validate()?;
    let image_encoder = ModelWeights::<f32>::init(*enc_cfg, image_encoder_seed)?;
    let mut records = Vec::with_capacity(n_scenes);
    let mut queries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene = generate_scene(derive_seed(seed, i as u64), gen_cfg)?;
        let record = curate_scene(
            &scene,
            format!("scene_{i:04}"),
            gen_cfg,
            &image_encoder,
            text,
        )?;
        let variants = caption_variants(&scene, None, 1 + HELD_OUT_VARIANTS)?;
        queries.push(QueryRecord {
            scene_id: record.id.clone(),
            texts: variants[1..].to_vec(),
        });
        records.push(record);
    }
    Ok((records, queries))
}

/// Curate one scene into a record: render, lift, select views, and pick
/// per-view captions by similarity ranking against the image encoder.
pub fn curate_scene(
    scene: &SyntheticScene,
    id: String,
    gen_cfg: &GeneratorConfig,
    image_encoder: &ModelWeights<f32>,
    text: &ReferenceEncoder,
) -> Result<SceneRecord> {
    let mut depths = Vec::with_capacity(scene.cameras.len());
    let mut maps = Vec::with_capacity(scene.cameras.len());
    for cam in &scene.cameras {
        let depth = render_depth(scene, cam, gen_cfg.render_h, gen_cfg.render_w)?;
        let pm = unproject(&depth, cam)?;
        depths.push(depth);
        maps.push(pm);
    }
    let selected = select_max_coverage(&maps, gen_cfg.selected_views, gen_cfg.voxel_cell)?;

    // Image-side embeddings on the per-scene normalized maps, one view slot
    // per selected position, mirroring how training presents the scene.
    let selected_maps: Vec<PointMap> = selected.iter().map(|&c| maps[c].clone()).collect();
    let (normalized, _) = geometry::normalize_views(&selected_maps)?;
    let mut g: Graph<f32> = Graph::new();
    let bound = encoder::bind_model(&mut g, image_encoder, BindMode::Frozen)?;
    let tokens: Vec<encoder::TokenSequence<f32>> = normalized
        .iter()
        .enumerate()
        .map(|(slot, pm)| Ok(encoder::patchify::<f32>(pm, image_encoder.config.patch)?.with_view(slot)))
        .collect::<Result<Vec<_>>>()?;
    let encodings = encoder::encode_views(&mut g, &bound, &tokens, None)?;

    let mut views = Vec::with_capacity(selected.len());
    for (slot, &cam_idx) in selected.iter().enumerate() {
        let candidates = caption_variants(scene, Some(cam_idx), gen_cfg.caption_candidates)?;
        let embeddings: Vec<Mat<f32>> = candidates
            .iter()
            .map(|c| text.embed::<f32>(c))
            .collect::<Result<Vec<_>>>()?;
        let z_i = g.value(encodings[slot].summary).clone();
        let ranked = rank_captions(&embeddings, &z_i, 1)?;
        views.push(SceneView {
            depth: depths[cam_idx].clone(),
            camera: scene.cameras[cam_idx].clone(),
            pointmap: maps[cam_idx].clone(),
            caption: candidates[ranked[0]].clone(),
        });
    }
    Ok(SceneRecord {
        id,
        views,
        scene_caption: Some(caption(scene, None)?),
    })
}

/// One manifest line. Field order is frozen: scene id, room extents, views
/// (depth path, point-map path, fx, fy, cx, cy, row-major rotation,
/// translation, caption), scene caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub scene_id: String,
    pub room_extents: [f64; 3],
    pub views: Vec<ManifestView>,
    pub scene_caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub depth_path: String,
    pub pointmap_path: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub caption: String,
}

pub fn write_manifest<W: Write>(w: &mut W, scenes: &[ManifestScene]) -> Result<()> {
    for scene in scenes {
        let line = serde_json::to_string(scene).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestScene>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: ManifestScene = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        out.push(scene);
    }
    Ok(out)
}

pub fn write_queries<W: Write>(w: &mut W, queries: &[QueryRecord]) -> Result<()> {
    for q in queries {
        let line = serde_json::to_string(q).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(r: R) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        out.push(q);
    }
    Ok(out)
}

/// Write a corpus under `dir`: manifest.jsonl, queries.jsonl, depth/ and
/// maps/ binaries. Output is byte-deterministic in the inputs.
pub fn write_corpus(
    dir: &Path,
    room_extents: &[Vec3],
    records: &[SceneRecord],
    queries: &[QueryRecord],
) -> Result<()> {
    if room_extents.len() != records.len() {
        return Err(Error::InvalidArgument(
            "room extents and records must align".into(),
        ));
    }
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("maps"))?;
    let mut manifest = Vec::with_capacity(records.len());
    for (record, extents) in records.iter().zip(room_extents) {
        let mut views = Vec::with_capacity(record.views.len());
        for (j, view) in record.views.iter().enumerate() {
            let depth_path = format!("depth/{}_view_{j:02}.pmd", record.id);
            let pointmap_path = format!("maps/{}_view_{j:02}.pma", record.id);
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&depth_path))?);
            geometry::write_depthmap(&mut f, &view.depth)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&pointmap_path))?);
            geometry::write_pointmap(&mut f, &view.pointmap)?;
            views.push(ManifestView {
                depth_path,
                pointmap_path,
                fx: view.camera.fx,
                fy: view.camera.fy,
                cx: view.camera.cx,
                cy: view.camera.cy,
                rotation: view.camera.rotation,
                translation: view.camera.translation,
                caption: view.caption.clone(),
            });
        }
        manifest.push(ManifestScene {
            scene_id: record.id.clone(),
            room_extents: *extents,
            views,
            scene_caption: record.scene_caption.clone().unwrap_or_default(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    write_manifest(&mut f, &manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("queries.jsonl"))?);
    write_queries(&mut f, queries)?;
    Ok(())
}

/// Load scene records back from a manifest, resolving paths relative to the
/// manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<SceneRecord>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(manifest_path)?;
    let manifest = read_manifest(std::io::BufReader::new(file))?;
    let mut out = Vec::with_capacity(manifest.len());
    for scene in manifest {
        let mut views = Vec::with_capacity(scene.views.len());
        for view in &scene.views {
            let mut f = std::io::BufReader::new(std::fs::File::open(base.join(&view.depth_path))?);
            let depth = geometry::read_depthmap(&mut f)?;
            let mut f =
                std::io::BufReader::new(std::fs::File::open(base.join(&view.pointmap_path))?);
            let pointmap = geometry::read_pointmap(&mut f)?;
            let camera = CameraModel::new(
                view.fx,
                view.fy,
                view.cx,
                view.cy,
                view.rotation,
                view.translation,
            )
            .map_err(|e| Error::Manifest(e.to_string()))?;
            views.push(SceneView {
                depth,
                camera,
                pointmap,
                caption: view.caption.clone(),
            });
        }
        out.push(SceneRecord {
            id: scene.scene_id,
            views,
            scene_caption: if scene.scene_caption.is_empty() {
                None
            } else {
                Some(scene.scene_caption)
            },
        });
    }
    Ok(out)
}
