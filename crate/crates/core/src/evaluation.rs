//! Reconstruction error after alignment and cropping, verification and
//! identification metrics, score fusion and disentangling diagnostics.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{
    apply_transform, compose_from_components, crop_indices, mean_vertex_distance, procrustes_align, rmse, select_landmarks, CoeffPair,
    MorphableModel, Shape,
};
use crate::network::{decoder_forward, encoder_forward, EncoderNet, FaceNet, LatentCode, TARGET_SIGMA_SCALE};
use crate::synthetic::{rasterize_depth, sample_gaussian, RenderedSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub is_genuine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tar: f64,
    pub far: f64,
}

/// Operating points ordered by increasing threshold. A pair is accepted when
/// its score is at least the threshold. The first point uses a threshold of
/// negative infinity and the last one positive infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldAccuracy {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    pub accuracy: FoldAccuracy,
    pub eer: f64,
    pub auc: f64,
    pub tar_at_far_10pct: f64,
    pub tar_at_far_1pct: f64,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    /// Per-pair stacked norm over the cropped vertices divided by their count,
    /// averaged over pairs.
    pub rmse: f64,
    pub mean_vertex_distance: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisentanglingReport {
    pub intra_subject_distance: f64,
    pub inter_subject_distance: f64,
    /// Mean of `|dc_res| / (|dc_res| + |dc_id|)` over expression-only changes.
    pub displacement_ratio: Option<f64>,
    /// Between-subject share of the identity-code variance.
    pub id_variance_explained: Option<f64>,
    /// Set when the codes do not vary at all, so the ratios are undefined.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("vectors have lengths {} and {}", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(invalid!("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn class_counts(pairs: &[ScoredPair]) -> (usize, usize) {
    let genuine = pairs.iter().filter(|p| p.is_genuine).count();
    (genuine, pairs.len() - genuine)
}

pub fn roc_curve(pairs: &[ScoredPair]) -> Result<RocCurve> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(invalid!("non-finite score {}", p.score));
    }
    let (n_gen, n_imp) = class_counts(pairs);
    if n_gen == 0 || n_imp == 0 {
        return Err(invalid!("roc needs genuine and impostor pairs ({n_gen} genuine, {n_imp} impostor)"));
    }
    let mut sorted: Vec<ScoredPair> = pairs.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        tar: 1.0,
        far: 1.0,
    }];
    // Walk thresholds upward; everything at index >= i is accepted.
    let (mut gen_below, mut imp_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        points.push(RocPoint {
            threshold: t,
            tar: (n_gen - gen_below) as f64 / n_gen as f64,
            far: (n_imp - imp_below) as f64 / n_imp as f64,
        });
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].is_genuine {
                gen_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        tar: 0.0,
        far: 0.0,
    });
    Ok(RocCurve { points })
}

/// Points ordered by increasing FAR, then increasing TAR.
fn by_far(curve: &RocCurve) -> Vec<RocPoint> {
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.far.total_cmp(&b.far).then(a.tar.total_cmp(&b.tar)));
    pts
}

/// Trapezoidal area under TAR as a function of FAR.
pub fn auc(curve: &RocCurve) -> f64 {
    by_far(curve)
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[0].tar + w[1].tar) / 2.0)
        .sum()
}

/// Error rate where FAR equals 1 - TAR, interpolated between the bracketing
/// operating points.
pub fn eer(curve: &RocCurve) -> f64 {
    let gap = |p: &RocPoint| p.far + p.tar - 1.0;
    for w in curve.points.windows(2) {
        let (d0, d1) = (gap(&w[0]), gap(&w[1]));
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 == d1 {
                return w[0].far;
            }
            let t = d0 / (d0 - d1);
            return w[0].far + t * (w[1].far - w[0].far);
        }
    }
    // The curve always runs from (1, 1) to (0, 0), so a crossing exists.
    unreachable!("roc curve does not cross the equal-error line")
}

/// TAR at the requested FAR, linearly interpolated.
pub fn tar_at_far(curve: &RocCurve, far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(invalid!("far target must lie in (0, 1], got {far_target}"));
    }
    let pts = by_far(curve);
    let i = pts
        .iter()
        .rposition(|p| p.far <= far_target)
        .expect("curve contains FAR 0");
    if pts[i].far == far_target || i + 1 == pts.len() {
        return Ok(pts[i].tar);
    }
    let (a, b) = (pts[i], pts[i + 1]);
    let t = (far_target - a.far) / (b.far - a.far);
    Ok(a.tar + t * (b.tar - a.tar))
}

fn accuracy_at(pairs: &[ScoredPair], threshold: f64) -> f64 {
    let correct = pairs.iter().filter(|p| (p.score >= threshold) == p.is_genuine).count();
    correct as f64 / pairs.len() as f64
}

/// Threshold maximizing accuracy over `pairs`, smallest on ties. Candidates
/// are every score plus positive infinity (reject everything).
fn best_threshold(pairs: &[ScoredPair]) -> f64 {
    let mut candidates: Vec<f64> = pairs.iter().map(|p| p.score).chain([f64::INFINITY]).collect();
    candidates.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for t in candidates {
        let acc = accuracy_at(pairs, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

/// Cross-validated accuracy over contiguous folds: each fold is scored with
/// the threshold that maximizes accuracy on the remaining folds.
pub fn verification_accuracy_folds(pairs: &[ScoredPair], n_folds: usize) -> Result<FoldAccuracy> {
    if n_folds < 2 || !pairs.len().is_multiple_of(n_folds) {
        return Err(invalid!("{} pairs cannot be split into {n_folds} equal folds", pairs.len()));
    }
    let size = pairs.len() / n_folds;
    let folds: Vec<&[ScoredPair]> = pairs.chunks(size).collect();
    for (f, fold) in folds.iter().enumerate() {
        let (g, i) = class_counts(fold);
        if g == 0 || i == 0 {
            return Err(invalid!("fold {f} contains a single class"));
        }
    }
    let accs: Vec<f64> = (0..n_folds)
        .map(|f| {
            let rest: Vec<ScoredPair> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            accuracy_at(folds[f], best_threshold(&rest))
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / n_folds as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n_folds as f64;
    Ok(FoldAccuracy { mean, std: var.sqrt() })
}

/// Min-max normalizes each list to `[0, 1]` and sums elementwise. A constant
/// list normalizes to zeros.
pub fn fuse_scores(score_lists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = score_lists.first().map_or(0, Vec::len);
    if score_lists.iter().any(|l| l.len() != len) {
        return Err(invalid!("score lists have different lengths"));
    }
    let mut fused = vec![0.0; len];
    for list in score_lists {
        let lo = list.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (f, s) in fused.iter_mut().zip(list) {
            if span > 0.0 {
                *f += (s - lo) / span;
            }
        }
    }
    Ok(fused)
}

/// Fraction of probes whose subject is among the `n` most similar gallery
/// entries (cosine similarity, ties kept in gallery order).
pub fn rank_n_identification(gallery: &[(DVector<f64>, usize)], probes: &[(DVector<f64>, usize)], n: usize) -> Result<f64> {
    if gallery.is_empty() {
        return Err(invalid!("empty gallery"));
    }
    if probes.is_empty() || n == 0 {
        return Err(invalid!("rank-n identification needs probes and n >= 1"));
    }
    let mut hits = 0usize;
    for (code, label) in probes {
        if !gallery.iter().any(|(_, l)| l == label) {
            return Err(invalid!("probe subject {label} has no gallery entry"));
        }
        let mut scored = gallery
            .iter()
            .map(|(g, l)| Ok((cosine_similarity(code.as_slice(), g.as_slice())?, *l)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        if scored.iter().take(n).any(|(_, l)| l == label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Aligns each prediction to its ground truth on the landmarks, crops both
/// around the ground-truth nose tip and accumulates the errors.
pub fn evaluate_reconstruction(
    predicted: &[Shape],
    truth: &[Shape],
    landmark_indices: &[usize],
    nose_tip: usize,
    crop_radius: f64,
) -> Result<ReconstructionReport> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(invalid!("{} predictions for {} ground-truth shapes", predicted.len(), truth.len()));
    }
    let (mut sum_rmse, mut sum_dist) = (0.0, 0.0);
    for (pred, gt) in predicted.iter().zip(truth) {
        if pred.n_vertices() != gt.n_vertices() {
            return Err(invalid!("shapes have {} and {} vertices", pred.n_vertices(), gt.n_vertices()));
        }
        let xf = procrustes_align(
            &select_landmarks(pred, landmark_indices)?,
            &select_landmarks(gt, landmark_indices)?,
        )?;
        let aligned = apply_transform(pred, &xf);
        let crop = crop_indices(gt, nose_tip, crop_radius)?;
        sum_rmse += rmse(&[(gt, &aligned)], &crop)?;
        sum_dist += mean_vertex_distance(&[(gt, &aligned)], &crop)?;
    }
    let n = predicted.len() as f64;
    Ok(ReconstructionReport {
        rmse: sum_rmse / n,
        mean_vertex_distance: sum_dist / n,
        n_pairs: predicted.len(),
    })
}

/// Anything that maps a rendered sample to a latent code.
pub trait Encoder {
    fn encode(&self, sample: &RenderedSample) -> Result<LatentCode>;
}

impl Encoder for EncoderNet {
    fn encode(&self, sample: &RenderedSample) -> Result<LatentCode> {
        encoder_forward(self, &sample.depth.pixels)
    }
}

/// Emits the rescaled ground-truth coefficients.
#[derive(Debug, Clone)]
pub struct OracleEncoder {
    pub sigma_id: Vec<f64>,
    pub sigma_exp: Vec<f64>,
}

impl OracleEncoder {
    pub fn new(model: &MorphableModel) -> Self {
        Self {
            sigma_id: model.sigma_id.clone(),
            sigma_exp: model.sigma_exp.clone(),
        }
    }
}

impl Encoder for OracleEncoder {
    fn encode(&self, sample: &RenderedSample) -> Result<LatentCode> {
        let scale = |a: &DVector<f64>, s: &[f64]| {
            DVector::from_iterator(a.len(), a.iter().zip(s).map(|(v, s)| v / (TARGET_SIGMA_SCALE * s)))
        };
        Ok(LatentCode {
            c_id: scale(&sample.coeffs.alpha_id, &self.sigma_id),
            c_res: scale(&sample.coeffs.alpha_exp, &self.sigma_exp),
        })
    }
}

/// Copy of `sample` with fresh expression coefficients, same subject and pose.
fn with_new_expression(model: &MorphableModel, sample: &RenderedSample, rng: &mut ChaCha8Rng) -> Result<RenderedSample> {
    let coeffs = CoeffPair::new(sample.coeffs.alpha_id.clone(), sample_gaussian(&model.sigma_exp, rng))?;
    let depth = rasterize_depth(model, &coeffs, &sample.pose, sample.depth.resolution)?;
    let shape = crate::geometry::compose_shape(model, &coeffs)?;
    Ok(RenderedSample {
        coeffs,
        depth,
        shape,
        ..sample.clone()
    })
}

/// Identity-code clustering and expression sensitivity of an encoder.
pub fn disentangling_report(
    encoder: &dyn Encoder,
    model: &MorphableModel,
    samples: &[&RenderedSample],
    seed: u64,
) -> Result<DisentanglingReport> {
    let mut subjects: Vec<usize> = samples.iter().map(|s| s.subject_label).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 || samples.len() < 3 {
        return Err(invalid!("disentangling report needs at least two subjects"));
    }
    let codes = samples.iter().map(|s| encoder.encode(s)).collect::<Result<Vec<_>>>()?;

    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    let zero_norm = codes.iter().any(|c| c.c_id.norm() == 0.0);
    if !zero_norm {
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let d = 1.0 - cosine_similarity(codes[i].c_id.as_slice(), codes[j].c_id.as_slice())?;
                if samples[i].subject_label == samples[j].subject_label {
                    intra += d;
                    n_intra += 1;
                } else {
                    inter += d;
                    n_inter += 1;
                }
            }
        }
    }
    if n_intra == 0 && !zero_norm {
        return Err(invalid!("disentangling report needs two samples of one subject"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::new();
    for (s, code) in samples.iter().zip(&codes) {
        let other = encoder.encode(&with_new_expression(model, s, &mut rng)?)?;
        let d_res = (&other.c_res - &code.c_res).norm();
        let d_id = (&other.c_id - &code.c_id).norm();
        if d_res + d_id > 0.0 {
            ratios.push(d_res / (d_res + d_id));
        }
    }
    let displacement_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);

    let dim = codes[0].c_id.len();
    let grand = codes.iter().fold(DVector::zeros(dim), |acc, c| acc + &c.c_id) / codes.len() as f64;
    let total: f64 = codes.iter().map(|c| (&c.c_id - &grand).norm_squared()).sum();
    let between: f64 = subjects
        .iter()
        .map(|&subj| {
            let members: Vec<&LatentCode> = codes
                .iter()
                .zip(samples)
                .filter(|(_, s)| s.subject_label == subj)
                .map(|(c, _)| c)
                .collect();
            let mean = members.iter().fold(DVector::zeros(dim), |acc, c| acc + &c.c_id) / members.len() as f64;
            members.len() as f64 * (mean - &grand).norm_squared()
        })
        .sum();
    let id_variance_explained = (total > 0.0).then(|| between / total);

    let mean_of = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(DisentanglingReport {
        intra_subject_distance: mean_of(intra, n_intra),
        inter_subject_distance: mean_of(inter, n_inter),
        displacement_ratio,
        id_variance_explained,
        degenerate: displacement_ratio.is_none() || id_variance_explained.is_none(),
    })
}

/// Indices `(i, j, genuine)` of all same-subject pairs followed by all
/// different-subject pairs, `i < j`.
pub fn all_pairs(labels: &[usize]) -> Vec<(usize, usize, bool)> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                genuine.push((i, j, true));
            } else {
                impostor.push((i, j, false));
            }
        }
    }
    genuine.extend(impostor);
    genuine
}

/// Balanced folds: fold `f` holds genuine pairs `f, f + n_folds, ...` followed
/// by the same number of impostor pairs taken the same way. Surplus pairs of
/// the larger class are dropped.
pub fn balanced_folds(pairs: &[ScoredPair], n_folds: usize) -> Result<Vec<ScoredPair>> {
    let gen: Vec<ScoredPair> = pairs.iter().copied().filter(|p| p.is_genuine).collect();
    let imp: Vec<ScoredPair> = pairs.iter().copied().filter(|p| !p.is_genuine).collect();
    let per_fold = gen.len().min(imp.len()) / n_folds.max(1);
    if n_folds < 2 || per_fold == 0 {
        return Err(invalid!("not enough pairs for {n_folds} balanced folds"));
    }
    let mut out = Vec::with_capacity(2 * per_fold * n_folds);
    for f in 0..n_folds {
        for k in 0..per_fold {
            out.push(gen[f + k * n_folds]);
        }
        for k in 0..per_fold {
            out.push(imp[f + k * n_folds]);
        }
    }
    Ok(out)
}

/// Full verification report for identity codes of labelled samples. The
/// gallery for rank-N is the first code of each subject; the rest are probes.
pub fn verification_report(codes: &[DVector<f64>], labels: &[usize], n_folds: usize) -> Result<VerificationReport> {
    if codes.len() != labels.len() {
        return Err(invalid!("{} codes for {} labels", codes.len(), labels.len()));
    }
    let pairs = all_pairs(labels)
        .into_iter()
        .map(|(i, j, g)| {
            Ok(ScoredPair {
                score: cosine_similarity(codes[i].as_slice(), codes[j].as_slice())?,
                is_genuine: g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = roc_curve(&pairs)?;
    let accuracy = verification_accuracy_folds(&balanced_folds(&pairs, n_folds)?, n_folds)?;

    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for (c, &l) in codes.iter().zip(labels) {
        if gallery.iter().any(|(_, g)| *g == l) {
            probes.push((c.clone(), l));
        } else {
            gallery.push((c.clone(), l));
        }
    }
    let (rank1, rank5) = if probes.is_empty() {
        (None, None)
    } else {
        (
            Some(rank_n_identification(&gallery, &probes, 1)?),
            Some(rank_n_identification(&gallery, &probes, 5)?),
        )
    };
    Ok(VerificationReport {
        accuracy,
        eer: eer(&curve),
        auc: auc(&curve),
        tar_at_far_10pct: tar_at_far(&curve, 0.1)?,
        tar_at_far_1pct: tar_at_far(&curve, 0.01)?,
        rank1,
        rank5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_euler_zyx, SimilarityTransform};
    use crate::synthetic::{build_dataset, generate_model, DatasetSpec, SyntheticModelSpec};
    use nalgebra::Vector3;
    use rand::Rng;

    fn pairs_from(scores: &[f64], genuine: &[bool]) -> Vec<ScoredPair> {
        scores
            .iter()
            .zip(genuine)
            .map(|(&score, &is_genuine)| ScoredPair { score, is_genuine })
            .collect()
    }

    fn random_pairs(n: usize, seed: u64, quantize: bool) -> Vec<ScoredPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let is_genuine = i % 3 != 0;
                let mut score: f64 = rng.random::<f64>() + if is_genuine { 0.3 } else { 0.0 };
                if quantize {
                    score = (score * 8.0).round() / 8.0;
                }
                ScoredPair { score, is_genuine }
            })
            .collect()
    }

    fn mann_whitney(pairs: &[ScoredPair]) -> f64 {
        let (mut sum, mut count) = (0.0, 0.0);
        for g in pairs.iter().filter(|p| p.is_genuine) {
            for i in pairs.iter().filter(|p| !p.is_genuine) {
                sum += if g.score > i.score {
                    1.0
                } else if g.score == i.score {
                    0.5
                } else {
                    0.0
                };
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn separated_scores_give_perfect_metrics() {
        let pairs = pairs_from(&[0.9, 0.8, 0.7, 0.2, 0.1], &[true, true, true, false, false]);
        let curve = roc_curve(&pairs).unwrap();
        assert!(curve.points.iter().any(|p| p.far == 0.0 && p.tar == 1.0));
        assert_eq!(auc(&curve), 1.0);
        assert_eq!(eer(&curve), 0.0);
        assert_eq!(tar_at_far(&curve, 0.01).unwrap(), 1.0);
        let flipped = pairs_from(&[0.1, 0.2, 0.3, 0.8, 0.9], &[true, true, true, false, false]);
        assert_eq!(auc(&roc_curve(&flipped).unwrap()), 0.0);
    }

    #[test]
    fn equal_scores_give_two_operating_points() {
        let pairs = pairs_from(&[0.5; 4], &[true, false, true, false]);
        let curve = roc_curve(&pairs).unwrap();
        for p in &curve.points {
            assert!((p.tar, p.far) == (0.0, 0.0) || (p.tar, p.far) == (1.0, 1.0));
        }
        assert_eq!(auc(&curve), 0.5);
        assert!(roc_curve(&pairs_from(&[0.1, 0.2], &[true, true])).is_err());
        assert!(tar_at_far(&curve, 0.0).is_err());
        assert!(tar_at_far(&curve, 1.5).is_err());
    }

    #[test]
    fn roc_matches_pair_counting_and_auc_matches_u_statistic() {
        for quantize in [false, true] {
            let pairs = random_pairs(100, 4, quantize);
            let curve = roc_curve(&pairs).unwrap();
            let (n_gen, n_imp) = class_counts(&pairs);
            for p in &curve.points {
                let tar = pairs.iter().filter(|q| q.is_genuine && q.score >= p.threshold).count() as f64 / n_gen as f64;
                let far = pairs.iter().filter(|q| !q.is_genuine && q.score >= p.threshold).count() as f64 / n_imp as f64;
                assert_eq!((p.tar, p.far), (tar, far));
            }
            for w in curve.points.windows(2) {
                assert!(w[1].tar <= w[0].tar && w[1].far <= w[0].far);
            }
            assert!((auc(&curve) - mann_whitney(&pairs)).abs() < 1e-10);
            let e = eer(&curve);
            assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn metrics_are_rank_invariant() {
        let pairs = random_pairs(80, 5, true);
        let warped: Vec<ScoredPair> = pairs
            .iter()
            .map(|p| ScoredPair {
                score: (3.0 * p.score).exp() - 7.0,
                ..*p
            })
            .collect();
        let (a, b) = (roc_curve(&pairs).unwrap(), roc_curve(&warped).unwrap());
        assert!((auc(&a) - auc(&b)).abs() < 1e-12);
        assert!((eer(&a) - eer(&b)).abs() < 1e-12);
    }

    #[test]
    fn fold_accuracy_examples() {
        let mut pairs = Vec::new();
        for _ in 0..4 {
            pairs.extend(pairs_from(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]));
        }
        let acc = verification_accuracy_folds(&pairs, 4).unwrap();
        assert_eq!((acc.mean, acc.std), (1.0, 0.0));
        assert!(verification_accuracy_folds(&pairs, 3).is_err());
        let single = pairs_from(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]);
        assert!(verification_accuracy_folds(&single, 2).is_err());
    }

    #[test]
    fn fusion_examples() {
        let a = vec![1.0, 3.0, 2.0, 5.0];
        let doubled = fuse_scores(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(doubled, vec![0.0, 1.0, 0.5, 2.0]);
        let with_const = fuse_scores(&[a.clone(), vec![4.0; 4]]).unwrap();
        assert_eq!(with_const, vec![0.0, 0.5, 0.25, 1.0]);
        assert!(fuse_scores(&[a, vec![1.0]]).is_err());
    }

    #[test]
    fn rank_n_examples() {
        let gallery: Vec<(DVector<f64>, usize)> = (0..4)
            .map(|k| (DVector::from_fn(3, |i, _| if i == k % 3 { 1.0 } else { 0.1 * k as f64 }), k))
            .collect();
        assert_eq!(rank_n_identification(&gallery, &gallery, 1).unwrap(), 1.0);
        let probes = vec![(DVector::from_vec(vec![0.2, -1.0, 0.5]), 2)];
        assert_eq!(rank_n_identification(&gallery, &probes, 4).unwrap(), 1.0);
        assert!(rank_n_identification(&[], &probes, 1).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let model = generate_model(&SyntheticModelSpec {
            n_vertices: 200,
            k_id: 4,
            k_exp: 2,
            ..Default::default()
        })
        .unwrap();
        let gt = model.mean.clone();
        let lm = &model.landmark_indices;
        let r = evaluate_reconstruction(std::slice::from_ref(&gt), std::slice::from_ref(&gt), lm, model.nose_tip_index, 10.0).unwrap();
        assert!(r.rmse < 1e-12);

        let xf = SimilarityTransform::new(1.7, rotation_from_euler_zyx(0.4, -0.2, 0.9), Vector3::new(1.0, -2.0, 0.5)).unwrap();
        let moved = apply_transform(&gt, &xf);
        let r = evaluate_reconstruction(&[moved], std::slice::from_ref(&gt), lm, model.nose_tip_index, 10.0).unwrap();
        assert!(r.rmse < 1e-9 && r.mean_vertex_distance < 1e-9);

        let bad = evaluate_reconstruction(std::slice::from_ref(&gt), &[], lm, model.nose_tip_index, 1.0);
        assert!(bad.is_err());
    }

    #[test]
    fn oracle_encoder_disentangles_perfectly() {
        let model = generate_model(&SyntheticModelSpec {
            n_vertices: 200,
            k_id: 4,
            k_exp: 2,
            ..Default::default()
        })
        .unwrap();
        let data = build_dataset(
            &model,
            &DatasetSpec {
                n_subjects: 4,
                images_per_subject: 3,
                image_resolution: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let samples: Vec<&RenderedSample> = data.samples.iter().collect();
        let r = disentangling_report(&OracleEncoder::new(&model), &model, &samples, 0).unwrap();
        assert_eq!(r.displacement_ratio, Some(1.0));
        assert!(r.intra_subject_distance.abs() < 1e-12);
        assert!(r.inter_subject_distance > r.intra_subject_distance);
        assert!((r.id_variance_explained.unwrap() - 1.0).abs() < 1e-12);
        assert!(!r.degenerate);

        struct Constant;
        impl Encoder for Constant {
            fn encode(&self, _: &RenderedSample) -> Result<LatentCode> {
                Ok(LatentCode {
                    c_id: DVector::from_element(4, 0.5),
                    c_res: DVector::from_element(2, 0.5),
                })
            }
        }
        let r = disentangling_report(&Constant, &model, &samples, 0).unwrap();
        assert_eq!((r.intra_subject_distance, r.inter_subject_distance), (0.0, 0.0));
        assert!(r.degenerate && r.displacement_ratio.is_none());
    }

    #[test]
    fn verification_report_on_separable_codes() {
        let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let codes: Vec<DVector<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| DVector::from_fn(4, |k, _| if k == l { 1.0 + i as f64 } else { 0.0 }))
            .collect();
        let r = verification_report(&codes, &labels, 2).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.rank1, Some(1.0));
        assert_eq!(r.accuracy.mean, 1.0);
    }
}

/// All held-out metrics of a trained network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkEvaluation {
    pub verification: VerificationReport,
    pub reconstruction: ReconstructionReport,
    pub disentangling: DisentanglingReport,
}

/// Verification on identity codes, reconstruction through the decoder and
/// disentangling diagnostics over `samples`.
pub fn evaluate_network(
    net: &FaceNet,
    model: &MorphableModel,
    samples: &[&RenderedSample],
    crop_radius: f64,
    n_folds: usize,
    seed: u64,
) -> Result<NetworkEvaluation> {
    let codes = samples
        .iter()
        .map(|s| net.encoder.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.subject_label).collect();
    let id_codes: Vec<DVector<f64>> = codes.iter().map(|c| c.c_id.clone()).collect();
    let verification = verification_report(&id_codes, &labels, n_folds)?;
    let predicted = codes
        .iter()
        .map(|c| {
            let (d_id, d_res) = decoder_forward(&net.decoder, c)?;
            compose_from_components(&model.mean, d_id.as_slice(), d_res.as_slice())
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Shape> = samples.iter().map(|s| s.shape.clone()).collect();
    let reconstruction =
        evaluate_reconstruction(&predicted, &truth, &model.landmark_indices, model.nose_tip_index, crop_radius)?;
    let disentangling = disentangling_report(&net.encoder, model, samples, seed)?;
    Ok(NetworkEvaluation {
        verification,
        reconstruction,
        disentangling,
    })
}
