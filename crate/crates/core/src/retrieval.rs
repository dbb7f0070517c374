//! Zero-shot scene retrieval and embodied localization over frozen
//! embeddings: per-scene view embeddings, mean-pooled scene embeddings,
//! exhaustive cosine ranking, recall@N, and the `POMI` index format.

use crate::dataset::{QueryRecord, SceneRecord};
use crate::encoder::{self, BindMode, ModelWeights};
use crate::geometry::normalize_views;
use crate::graph::Graph;
use crate::mat::Mat;
use crate::{codec, Error, Result};
use std::io::{Read, Write};

/// Embeddings of one scene: per-view unit vectors plus the pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub id: String,
    /// One row per view, unit norm.
    pub views: Mat<f32>,
    /// L2-normalized mean of the view rows; all-zero when the views cancel.
    pub pooled: Mat<f32>,
}

impl SceneEntry {
    pub fn degenerate(&self) -> bool {
        self.pooled.as_slice().iter().all(|&x| x == 0.0)
    }
}

/// Immutable retrieval index over scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneIndex {
    pub dim: usize,
    pub scenes: Vec<SceneEntry>,
}

const POOL_EPS: f32 = 1e-9;

/// Mean of unit view embeddings, re-normalized; a (near-)cancelling mean
/// yields the zero vector, which scores 0 against every query.
pub fn scene_embedding(views: &Mat<f32>) -> Result<Mat<f32>> {
    if views.rows() == 0 {
        return Err(Error::InvalidArgument("scene has no view embeddings".into()));
    }
    let n = views.rows() as f32;
    let mut mean = vec![0.0f32; views.cols()];
    for r in 0..views.rows() {
        for (acc, &x) in mean.iter_mut().zip(views.row(r)) {
            *acc += x / n;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm < POOL_EPS {
        return Ok(Mat::zeros(1, views.cols()));
    }
    Ok(Mat::from_vec(
        1,
        views.cols(),
        mean.into_iter().map(|x| x / norm).collect(),
    ))
}

impl SceneIndex {
    pub fn new(dim: usize) -> Self {
        SceneIndex {
            dim,
            scenes: Vec::new(),
        }
    }

    pub fn push_scene(&mut self, id: String, views: Mat<f32>) -> Result<()> {
        if views.cols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "view embedding dim {} != index dim {}",
                views.cols(),
                self.dim
            )));
        }
        let pooled = scene_embedding(&views)?;
        self.scenes.push(SceneEntry { id, views, pooled });
        Ok(())
    }

    pub fn scene(&self, id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank scenes by cosine similarity of their pooled embeddings to the
/// query, descending; ties break lexicographically by scene id. Returns the
/// top N (id, score) pairs.
pub fn retrieve(query: &Mat<f32>, index: &SceneIndex, n: usize) -> Result<Vec<(String, f32)>> {
    if index.scenes.is_empty() {
        return Err(Error::InvalidArgument("empty scene index".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("top-N must be >= 1".into()));
    }
    if query.cols() != index.dim {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} != index dim {}",
            query.cols(),
            index.dim
        )));
    }
    let mut ranked: Vec<(String, f32)> = index
        .scenes
        .iter()
        .map(|s| (s.id.clone(), dot(query.row(0), s.pooled.row(0))))
        .collect();
    ranked.sort_by(|(ida, sa), (idb, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ida.cmp(idb))
    });
    ranked.truncate(n);
    Ok(ranked)
}

/// Embed every scene with a dense encoder (typically the trained target
/// encoder): views are normalized per scene, encoded in their view slots,
/// and the per-view summary embeddings indexed alongside the pooled scene
/// embedding.
pub fn build_scene_index(
    records: &[SceneRecord],
    weights: &ModelWeights<f32>,
) -> Result<SceneIndex> {
    let cfg = weights.config;
    let mut index = SceneIndex::new(cfg.dim);
    for record in records {
        let maps: Vec<_> = record.views.iter().map(|v| v.pointmap.clone()).collect();
        let (normed, _) = normalize_views(&maps)?;
        let tokens: Vec<encoder::TokenSequence<f32>> = normed
            .iter()
            .enumerate()
            .map(|(slot, pm)| Ok(encoder::patchify::<f32>(pm, cfg.patch)?.with_view(slot)))
            .collect::<Result<Vec<_>>>()?;
        let mut g: Graph<f32> = Graph::new();
        let bound = encoder::bind_model(&mut g, weights, BindMode::Frozen)?;
        let encodings = encoder::encode_views(&mut g, &bound, &tokens, None)?;
        let rows: Vec<Mat<f32>> = encodings
            .iter()
            .map(|e| g.value(e.summary).clone())
            .collect();
        let refs: Vec<&Mat<f32>> = rows.iter().collect();
        index.push_scene(record.id.clone(), Mat::concat_rows(&refs))?;
    }
    Ok(index)
}

/// How a multi-text query is turned into one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryComposition {
    /// Embed the texts joined into a single string (default).
    Concat,
    /// Mean of the per-text embeddings, re-normalized.
    MeanEmbed,
}

/// Embed the first `m` referring texts of a query.
pub fn compose_query(
    texts: &[String],
    m: usize,
    text: &crate::dataset::ReferenceEncoder,
    composition: QueryComposition,
) -> Result<Mat<f32>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    if texts.len() < m {
        return Err(Error::InvalidArgument(format!(
            "query has {} texts, needs {m}",
            texts.len()
        )));
    }
    match composition {
        QueryComposition::Concat => text.embed::<f32>(&texts[..m].join(" ")),
        QueryComposition::MeanEmbed => {
            let embs: Vec<Mat<f32>> = texts[..m]
                .iter()
                .map(|t| text.embed::<f32>(t))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Mat<f32>> = embs.iter().collect();
            scene_embedding(&Mat::concat_rows(&refs))
        }
    }
}

/// Fraction of queries whose ground-truth scene appears in the top N.
pub fn recall_at(
    queries: &[QueryRecord],
    index: &SceneIndex,
    m: usize,
    n: usize,
    text: &crate::dataset::ReferenceEncoder,
    composition: QueryComposition,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for q in queries {
        let emb = compose_query(&q.texts, m, text, composition)?;
        let ranked = retrieve(&emb, index, n)?;
        if ranked.iter().any(|(id, _)| id == &q.scene_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Rank a scene's views by cosine similarity to the situation embedding;
/// ties break to the smaller view index. Returns up to K (view, score).
pub fn localize(
    views: &Mat<f32>,
    situation: &Mat<f32>,
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    if views.rows() == 0 {
        return Err(Error::InvalidArgument("scene has no views".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if situation.cols() != views.cols() {
        return Err(Error::ShapeMismatch(format!(
            "situation dim {} != view dim {}",
            situation.cols(),
            views.cols()
        )));
    }
    let mut ranked: Vec<(usize, f32)> = (0..views.rows())
        .map(|i| (i, dot(situation.row(0), views.row(i))))
        .collect();
    ranked.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ia.cmp(ib))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Default number of views retrieved for embodied localization.
pub const DEFAULT_LOCALIZE_K: usize = 3;

pub const INDEX_MAGIC: [u8; 4] = *b"POMI";
pub const INDEX_VERSION: u32 = 1;

/// Write the `POMI` format: magic, u32 version, u32 dim, u32 scene count,
/// then per scene: id (u32 length + bytes), u32 view count, view vectors,
/// pooled vector, all little-endian f32.
pub fn write_index<W: Write>(w: &mut W, index: &SceneIndex) -> Result<()> {
    codec::write_magic(w, &INDEX_MAGIC)?;
    codec::write_u32(w, INDEX_VERSION)?;
    codec::write_u32(w, index.dim as u32)?;
    codec::write_u32(w, index.scenes.len() as u32)?;
    for scene in &index.scenes {
        codec::write_str(w, &scene.id)?;
        codec::write_u32(w, scene.views.rows() as u32)?;
        codec::write_f32s(w, scene.views.as_slice().iter().copied())?;
        codec::write_f32s(w, scene.pooled.as_slice().iter().copied())?;
    }
    Ok(())
}

pub fn read_index<R: Read>(r: &mut R) -> Result<SceneIndex> {
    codec::expect_magic(r, &INDEX_MAGIC)?;
    codec::expect_version(r, INDEX_VERSION)?;
    let dim = codec::read_u32(r)? as usize;
    let count = codec::read_u32(r)? as usize;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let id = codec::read_str(r)?;
        let n_views = codec::read_u32(r)? as usize;
        let views = codec::read_f32s(r, n_views * dim, "view embeddings")?;
        let pooled = codec::read_f32s(r, dim, "pooled embedding")?;
        scenes.push(SceneEntry {
            id,
            views: Mat::from_vec(n_views, dim, views),
            pooled: Mat::from_vec(1, dim, pooled),
        });
    }
    codec::expect_eof(r)?;
    Ok(SceneIndex { dim, scenes })
}
