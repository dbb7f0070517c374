//! Training objectives: symmetric InfoNCE at view and scene level, the
//! Chamfer masked-embedding loss with its MSE ablation, and the per-stage
//! totals.
//!
//! Every loss exists in two forms sharing one implementation: a graph
//! builder (`*_node`) used by the trainer for backprop, and a plain
//! function that runs the same builder on constants and returns the value.

use crate::graph::{ChamferReduction, Graph, NodeId};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// How InfoNCE is reduced over positive pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NceReduction {
    /// Mean over positive pairs; loss magnitude is batch-size invariant.
    Mean,
    /// Plain sum over positive pairs.
    Sum,
}

/// Which masked-embedding objective the main stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JepaMode {
    Chamfer,
    Mse,
}

/// Whether masked patches are pooled across views into one Chamfer set per
/// scene, or matched per view with the per-view values summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferScope {
    Pooled,
    PerView,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig<T> {
    pub tau: T,
    pub reduction: NceReduction,
    pub jepa_mode: JepaMode,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            tau: T::from_f64(0.07),
            reduction: NceReduction::Mean,
            jepa_mode: JepaMode::Chamfer,
        }
    }
}

/// Per-view embeddings of one batch; row i of each modality is the positive
/// partner of row i in the others.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<T> {
    /// Point-map summary embeddings z_P (n×d, unit rows).
    pub point: Mat<T>,
    /// Image-side embeddings z_I.
    pub image: Option<Mat<T>>,
    /// View-caption embeddings z_V.
    pub view_text: Option<Mat<T>>,
}

/// Per-scene view embeddings for scene-level alignment; scene i across
/// fields is a positive pair.
#[derive(Debug, Clone)]
pub struct SceneBatch<T> {
    /// Per-scene per-view point-map embeddings.
    pub point_views: Vec<Mat<T>>,
    /// Per-scene per-view image-side embeddings.
    pub image_views: Vec<Mat<T>>,
    /// Scene-caption embeddings, one row per scene.
    pub scene_text: Mat<T>,
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Graph form of symmetric InfoNCE between paired batches `a` and `b`
/// (n×d each): logits are dot products scaled by 1/τ with τ = exp(log_tau),
/// and each positive pair contributes -½(log softmax over its row + log
/// softmax over its column).
pub fn info_nce_node<T: Scalar>(
    g: &mut Graph<T>,
    a: NodeId,
    b: NodeId,
    log_tau: NodeId,
    reduction: NceReduction,
) -> NodeId {
    let bt = g.transpose(b);
    let sim = g.matmul(a, bt);
    let neg_log_tau = g.neg(log_tau);
    let inv_tau = g.exp(neg_log_tau);
    let logits = g.scale_node(sim, inv_tau);
    let row_ls = g.log_softmax_rows(logits);
    let row_diag = g.diag(row_ls);
    let logits_t = g.transpose(logits);
    let col_ls = g.log_softmax_rows(logits_t);
    let col_diag = g.diag(col_ls);
    let (r, c) = match reduction {
        NceReduction::Mean => (g.mean_all(row_diag), g.mean_all(col_diag)),
        NceReduction::Sum => (g.sum_all(row_diag), g.sum_all(col_diag)),
    };
    let sum = g.add(r, c);
    g.scale_const(sum, T::from_f64(-0.5))
}

/// Symmetric InfoNCE with mean reduction over positive pairs.
pub fn info_nce<T: Scalar>(z_a: &Mat<T>, z_b: &Mat<T>, tau: T) -> Result<T> {
    info_nce_with(z_a, z_b, tau, NceReduction::Mean)
}

pub fn info_nce_with<T: Scalar>(
    z_a: &Mat<T>,
    z_b: &Mat<T>,
    tau: T,
    reduction: NceReduction,
) -> Result<T> {
    check_tau(tau)?;
    if z_a.rows() == 0 || z_a.shape() != z_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "paired batches must be non-empty and equal-shaped: {:?} vs {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(z_a.clone());
    let b = g.constant(z_b.clone());
    let log_tau = g.scalar_const(tau.ln());
    let loss = info_nce_node(&mut g, a, b, log_tau, reduction);
    Ok(g.value(loss).item())
}

/// View-level alignment: InfoNCE(point, image) + InfoNCE(point, view text).
pub fn view_alignment_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<T> {
    let image = batch
        .image
        .as_ref()
        .ok_or(Error::MissingLossPart("image embeddings"))?;
    let text = batch
        .view_text
        .as_ref()
        .ok_or(Error::MissingLossPart("view text embeddings"))?;
    let pi = info_nce_with(&batch.point, image, cfg.tau, cfg.reduction)?;
    let pv = info_nce_with(&batch.point, text, cfg.tau, cfg.reduction)?;
    Ok(pi + pv)
}

/// Mean-pool unit view embeddings into one scene row and re-normalize.
pub fn pooled_scene_node<T: Scalar>(g: &mut Graph<T>, views: NodeId) -> NodeId {
    let mean = g.mean_rows(views);
    g.l2_normalize_rows(mean)
}

/// Scene-level alignment: per-scene view embeddings are mean-pooled and
/// re-normalized, then contrasted against the other scenes in the batch.
pub fn scene_alignment_loss<T: Scalar>(
    batch: &SceneBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<T> {
    check_tau(cfg.tau)?;
    if batch.point_views.is_empty() {
        return Err(Error::InvalidArgument("scene batch is empty".into()));
    }
    if batch.point_views.len() != batch.image_views.len()
        || batch.point_views.len() != batch.scene_text.rows()
    {
        return Err(Error::ShapeMismatch(
            "scene batch modality lengths differ".into(),
        ));
    }
    for views in batch.point_views.iter().chain(batch.image_views.iter()) {
        if views.rows() == 0 {
            return Err(Error::InvalidArgument("scene with zero views".into()));
        }
    }
    let mut g = Graph::new();
    let pooled_p: Vec<NodeId> = batch
        .point_views
        .iter()
        .map(|v| {
            let node = g.constant(v.clone());
            pooled_scene_node(&mut g, node)
        })
        .collect();
    let pooled_i: Vec<NodeId> = batch
        .image_views
        .iter()
        .map(|v| {
            let node = g.constant(v.clone());
            pooled_scene_node(&mut g, node)
        })
        .collect();
    let zp = g.concat_rows(&pooled_p);
    let zi = g.concat_rows(&pooled_i);
    let zs = g.constant(batch.scene_text.clone());
    let log_tau = g.scalar_const(cfg.tau.ln());
    let a = info_nce_node(&mut g, zp, zi, log_tau, cfg.reduction);
    let b = info_nce_node(&mut g, zp, zs, log_tau, cfg.reduction);
    let total = g.add(a, b);
    Ok(g.value(total).item())
}

/// Chamfer value plus the degenerate-input flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferValue<T> {
    pub value: T,
    /// Both sides were empty; the value 0 is a convention, not a match.
    pub both_empty: bool,
}

/// Symmetric sum of nearest-neighbor squared distances between the
/// predicted and target embedding sets (rows). Sums, not means; see
/// [`chamfer_jepa_with`] for the averaged variant.
pub fn chamfer_jepa<T: Scalar>(pred: &Mat<T>, target: &Mat<T>) -> Result<ChamferValue<T>> {
    chamfer_jepa_with(pred, target, ChamferReduction::Sum)
}

pub fn chamfer_jepa_with<T: Scalar>(
    pred: &Mat<T>,
    target: &Mat<T>,
    reduction: ChamferReduction,
) -> Result<ChamferValue<T>> {
    match (pred.rows() == 0, target.rows() == 0) {
        (true, true) => {
            return Ok(ChamferValue {
                value: T::zero(),
                both_empty: true,
            })
        }
        (true, false) | (false, true) => {
            return Err(Error::InvalidArgument(
                "chamfer with exactly one empty side".into(),
            ))
        }
        (false, false) => {}
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let loss = g.chamfer_to_const(p, target.clone(), reduction);
    Ok(ChamferValue {
        value: g.value(loss).item(),
        both_empty: false,
    })
}

/// Order-sensitive ablation: mean over all elements of squared differences
/// under the fixed masked-patch ordering.
pub fn mse_jepa<T: Scalar>(pred: &Mat<T>, target: &Mat<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.rows() == 0 {
        return Ok(T::zero());
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let loss = g.mse_to_const(p, target.clone());
    Ok(g.value(loss).item())
}

/// Training stage selector for the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Main,
}

/// Component losses feeding the stage total.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts<T> {
    pub view: Option<T>,
    pub scene: Option<T>,
    pub pjepa: Option<T>,
}

/// Warmup total is the view loss alone; main total is the unweighted sum of
/// view, scene and masked-prediction losses.
pub fn total_loss<T: Scalar>(stage: Stage, parts: &LossParts<T>) -> Result<T> {
    let view = parts.view.ok_or(Error::MissingLossPart("view"))?;
    match stage {
        Stage::Warmup => Ok(view),
        Stage::Main => {
            let scene = parts.scene.ok_or(Error::MissingLossPart("scene"))?;
            let pjepa = parts.pjepa.ok_or(Error::MissingLossPart("pjepa"))?;
            Ok(view + scene + pjepa)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_gaussian, rng_for};

    /// Brute-force softmax oracle for symmetric InfoNCE, mean reduction.
    fn info_nce_oracle(za: &Mat<f64>, zb: &Mat<f64>, tau: f64) -> f64 {
        let n = za.rows();
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x * y).sum()
        };
        let mut total = 0.0;
        for i in 0..n {
            let pos = (dot(za.row(i), zb.row(i)) / tau).exp();
            let row_den: f64 = (0..n)
                .map(|k| (dot(za.row(i), zb.row(k)) / tau).exp())
                .sum();
            let col_den: f64 = (0..n)
                .map(|k| (dot(za.row(k), zb.row(i)) / tau).exp())
                .sum();
            total += -0.5 * ((pos / row_den).ln() + (pos / col_den).ln());
        }
        total / n as f64
    }

    /// All-pairs enumeration oracle for the Chamfer sum.
    fn chamfer_oracle(pred: &Mat<f64>, target: &Mat<f64>) -> f64 {
        let sq = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let fwd: f64 = (0..pred.rows())
            .map(|i| {
                (0..target.rows())
                    .map(|j| sq(pred.row(i), target.row(j)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let bwd: f64 = (0..target.rows())
            .map(|j| {
                (0..pred.rows())
                    .map(|i| sq(target.row(j), pred.row(i)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        fwd + bwd
    }

    fn random_unit_rows(n: usize, d: usize, salt: u64) -> Mat<f64> {
        let mut rng = rng_for(0x6c6f_7373, salt);
        let mut m = Mat::from_fn(n, d, |_, _| next_gaussian(&mut rng));
        for r in 0..n {
            let norm = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            for v in m.row_mut(r) {
                *v /= norm;
            }
        }
        m
    }

    fn orthonormal_pair() -> Mat<f64> {
        Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    #[test]
    fn batch_of_one_is_zero() {
        let z = Mat::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(info_nce(&z, &z, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_batch_two_matches_closed_form() {
        let z = orthonormal_pair();
        let got = info_nce(&z, &z, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln(); // log(1 + e^-1)
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn larger_tau_softens_separated_positives() {
        // With positives at dot 1 and negatives at 0, sharpening (smaller
        // tau) lowers the loss; doubling tau raises it. Both values are
        // checked against the brute-force oracle rather than asserted from
        // intuition.
        let z = orthonormal_pair();
        let at_one = info_nce(&z, &z, 1.0).unwrap();
        let at_two = info_nce(&z, &z, 2.0).unwrap();
        assert!((at_one - info_nce_oracle(&z, &z, 1.0)).abs() < 1e-12);
        assert!((at_two - info_nce_oracle(&z, &z, 2.0)).abs() < 1e-12);
        assert!(at_two > at_one);
        let at_tenth = info_nce(&z, &z, 0.1).unwrap();
        assert!(at_tenth < at_one);
    }

    #[test]
    fn matches_brute_force_oracle_on_small_batches() {
        for n in 1..=8usize {
            let za = random_unit_rows(n, 6, n as u64);
            let zb = random_unit_rows(n, 6, 100 + n as u64);
            for tau in [0.07, 0.5, 1.0, 3.0] {
                let got = info_nce(&za, &zb, tau).unwrap();
                let want = info_nce_oracle(&za, &zb, tau);
                assert!(
                    (got - want).abs() < 1e-10,
                    "n={n} tau={tau}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn symmetric_in_arguments_exactly() {
        let za = random_unit_rows(5, 8, 1);
        let zb = random_unit_rows(5, 8, 2);
        let ab = info_nce(&za, &zb, 0.3).unwrap();
        let ba = info_nce(&zb, &za, 0.3).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn random_embeddings_approach_log_batch() {
        let n = 64;
        let za = random_unit_rows(n, 64, 3);
        let zb = random_unit_rows(n, 64, 4);
        let got = info_nce(&za, &zb, 1.0).unwrap();
        let log_n = (n as f64).ln();
        assert!(
            (got - log_n).abs() / log_n < 0.2,
            "loss {got} vs log(batch) {log_n}"
        );
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let z = orthonormal_pair();
        assert!(info_nce(&z, &z, 0.0).is_err());
        assert!(info_nce(&z, &z, -1.0).is_err());
    }

    #[test]
    fn view_alignment_composes_two_terms() {
        let cfg = LossConfig::default();
        let z = orthonormal_pair();
        let batch = EmbeddingBatch {
            point: z.clone(),
            image: Some(z.clone()),
            view_text: Some(z.clone()),
        };
        let got = view_alignment_loss(&batch, &LossConfig { tau: 1.0, ..cfg }).unwrap();
        let single = info_nce(&z, &z, 1.0).unwrap();
        assert!((got - 2.0 * single).abs() < 1e-12);
        assert!((got - 0.626524).abs() < 1e-6);

        let single_item = EmbeddingBatch {
            point: z.slice_rows(0, 1),
            image: Some(z.slice_rows(0, 1)),
            view_text: Some(z.slice_rows(0, 1)),
        };
        assert_eq!(
            view_alignment_loss(&single_item, &LossConfig { tau: 1.0, ..cfg }).unwrap(),
            0.0
        );
    }

    #[test]
    fn view_alignment_requires_all_modalities() {
        let z = orthonormal_pair();
        let batch = EmbeddingBatch {
            point: z,
            image: None,
            view_text: None,
        };
        assert!(matches!(
            view_alignment_loss(&batch, &LossConfig::default()),
            Err(Error::MissingLossPart(_))
        ));
    }

    #[test]
    fn scene_alignment_single_scene_is_zero() {
        let views = random_unit_rows(3, 4, 9);
        let batch = SceneBatch {
            point_views: vec![views.clone()],
            image_views: vec![views],
            scene_text: random_unit_rows(1, 4, 10),
        };
        assert_eq!(
            scene_alignment_loss(&batch, &LossConfig { tau: 1.0, ..Default::default() })
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn pooling_identical_views_is_identity() {
        let one = random_unit_rows(1, 4, 11);
        let stacked = Mat::concat_rows(&[&one, &one, &one]);
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(stacked);
        let pooled = pooled_scene_node(&mut g, v);
        for c in 0..4 {
            assert!((g.value(pooled).get(0, c) - one.get(0, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_alignment_two_orthonormal_scenes_matches_fixture() {
        // Each scene's single view equals its pooled embedding; with the
        // point/image/text embeddings all equal to {e1, e2} the loss reduces
        // to the batch-2 InfoNCE fixture, twice.
        let z = orthonormal_pair();
        let batch = SceneBatch {
            point_views: vec![z.slice_rows(0, 1), z.slice_rows(1, 2)],
            image_views: vec![z.slice_rows(0, 1), z.slice_rows(1, 2)],
            scene_text: z.clone(),
        };
        let got = scene_alignment_loss(
            &batch,
            &LossConfig { tau: 1.0, ..Default::default() },
        )
        .unwrap();
        assert!((got - 0.626524).abs() < 1e-6);
    }

    #[test]
    fn scene_with_zero_views_rejected() {
        let batch = SceneBatch {
            point_views: vec![Mat::zeros(0, 4), random_unit_rows(2, 4, 12)],
            image_views: vec![Mat::zeros(0, 4), random_unit_rows(2, 4, 13)],
            scene_text: random_unit_rows(2, 4, 14),
        };
        assert!(scene_alignment_loss(&batch, &LossConfig::default()).is_err());
    }

    #[test]
    fn chamfer_identity_and_permutation_are_zero() {
        let z = random_unit_rows(6, 5, 20);
        assert_eq!(chamfer_jepa(&z, &z).unwrap().value, 0.0);
        let perm = z.gather_rows(&[3, 0, 5, 1, 4, 2]);
        assert_eq!(chamfer_jepa(&perm, &z).unwrap().value, 0.0);
    }

    #[test]
    fn chamfer_fixture_value_is_six() {
        let pred = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let target = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        let got = chamfer_jepa(&pred, &target).unwrap().value;
        assert_eq!(got, 6.0);
        assert_eq!(got, chamfer_oracle(&pred, &target));
    }

    #[test]
    fn chamfer_matches_enumeration_oracle() {
        for salt in 0..6u64 {
            let pred = random_unit_rows(3 + salt as usize * 2, 4, 30 + salt);
            let target = random_unit_rows(16 - salt as usize, 4, 40 + salt);
            let got = chamfer_jepa(&pred, &target).unwrap().value;
            let want = chamfer_oracle(&pred, &target);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn chamfer_empty_handling() {
        let empty: Mat<f64> = Mat::zeros(0, 4);
        let full = random_unit_rows(2, 4, 50);
        let both = chamfer_jepa(&empty, &empty).unwrap();
        assert!(both.both_empty);
        assert_eq!(both.value, 0.0);
        assert!(chamfer_jepa(&empty, &full).is_err());
        assert!(chamfer_jepa(&full, &empty).is_err());
    }

    #[test]
    fn chamfer_invariant_under_shared_rotation() {
        // Rotate both sets by the same orthogonal map (Givens rotation in
        // coordinates 0 and 2).
        let pred = random_unit_rows(5, 4, 60);
        let target = random_unit_rows(7, 4, 61);
        let theta: f64 = 0.83;
        let rotate = |m: &Mat<f64>| -> Mat<f64> {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let x = m.get(r, 0);
                let z = m.get(r, 2);
                out.set(r, 0, theta.cos() * x - theta.sin() * z);
                out.set(r, 2, theta.sin() * x + theta.cos() * z);
            }
            out
        };
        let base = chamfer_jepa(&pred, &target).unwrap().value;
        let rotated = chamfer_jepa(&rotate(&pred), &rotate(&target)).unwrap().value;
        assert!((base - rotated).abs() < 1e-6);
    }

    #[test]
    fn mse_fixture_and_order_sensitivity() {
        let identical = random_unit_rows(4, 3, 70);
        assert_eq!(mse_jepa(&identical, &identical).unwrap(), 0.0);

        let pred = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let target = Mat::from_vec(1, 2, vec![3.0, 4.0]);
        assert_eq!(mse_jepa(&pred, &target).unwrap(), 12.5);

        // A swapped pair of distinct vectors: Chamfer sees a perfect match,
        // MSE does not.
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let swapped = a.gather_rows(&[1, 0]);
        assert_eq!(chamfer_jepa(&swapped, &a).unwrap().value, 0.0);
        assert!(mse_jepa(&swapped, &a).unwrap() > 0.0);
    }

    #[test]
    fn mse_rejects_length_mismatch() {
        let a = random_unit_rows(2, 3, 80);
        let b = random_unit_rows(3, 3, 81);
        assert!(matches!(mse_jepa(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn totals_per_stage() {
        let parts = LossParts {
            view: Some(1.0),
            scene: Some(2.0),
            pjepa: Some(3.0),
        };
        assert_eq!(total_loss(Stage::Main, &parts).unwrap(), 6.0);
        assert_eq!(
            total_loss(Stage::Warmup, &LossParts { view: Some(0.5), ..Default::default() })
                .unwrap(),
            0.5
        );
        assert!(matches!(
            total_loss(Stage::Main, &LossParts { view: Some(1.0), ..Default::default() }),
            Err(Error::MissingLossPart(_))
        ));

        let mut rng = rng_for(90, 0);
        for _ in 0..20 {
            let parts = LossParts {
                view: Some(next_gaussian(&mut rng)),
                scene: Some(next_gaussian(&mut rng)),
                pjepa: Some(next_gaussian(&mut rng)),
            };
            let total = total_loss(Stage::Main, &parts).unwrap();
            let sum = parts.view.unwrap() + parts.scene.unwrap() + parts.pjepa.unwrap();
            assert!((total - sum).abs() < 1e-12);
        }
    }
}
