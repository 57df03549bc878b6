//! Multi-image landmark fitting of a morphable model.
//!
//! All images of one subject share a single identity coefficient vector;
//! each image has its own expression coefficients and weak-perspective pose.
//! The objective `sum_j ||u_j - f_j P R_j (S_U(alpha_id, alpha_exp_j) + t_j)||^2`
//! is minimized block by block: poses, then expressions, then identity.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, RowVector3, Vector2, Vector3};

use crate::error::{invalid, Error, Result};
use crate::geometry::{LandmarkSet2D, MorphableModel, Point3, PoseParams};
use crate::linalg::tikhonov_lstsq;

/// Allowed objective increase between passes before the fit is aborted.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Stop once a pass lowers the objective by less than this fraction.
    pub rel_tol: f64,
    pub reg_id: f64,
    pub reg_exp: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::exact()
    }
}

impl FitConfig {
    /// Unregularized fitting for noiseless landmarks.
    pub fn exact() -> Self {
        Self {
            max_iterations: 20,
            rel_tol: 1e-6,
            reg_id: 0.0,
            reg_exp: 0.0,
        }
    }

    /// Mild Tikhonov regularization for noisy landmarks.
    pub fn noisy() -> Self {
        Self {
            reg_id: 1e-3,
            reg_exp: 1e-3,
            ..Self::exact()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(invalid!("max_iterations must be >= 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid!("rel_tol must be > 0, got {}", self.rel_tol));
        }
        if !(self.reg_id >= 0.0 && self.reg_exp >= 0.0) {
            return Err(invalid!("regularization weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageState {
    pub alpha_exp: DVector<f64>,
    pub pose: PoseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub alpha_id: DVector<f64>,
    pub per_image: Vec<ImageState>,
    /// Regularized objective after every full pass (equals the data term when
    /// both regularization weights are zero).
    pub objective_trace: Vec<f64>,
    /// Landmark data term after every full pass.
    pub data_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Landmark-restricted view of a model: mean landmark positions and the
/// landmark rows of both bases.
struct LandmarkModel {
    mean: DVector<f64>,
    id_rows: DMatrix<f64>,
    exp_rows: DMatrix<f64>,
    inv_var_id: Vec<f64>,
    inv_var_exp: Vec<f64>,
}

impl LandmarkModel {
    fn new(model: &MorphableModel) -> Self {
        let mut mean = DVector::zeros(3 * model.n_landmarks());
        for (row, &v) in model.landmark_indices.iter().enumerate() {
            for c in 0..3 {
                mean[3 * row + c] = model.mean.coords()[3 * v + c];
            }
        }
        let inv_var = |s: &[f64]| s.iter().map(|x| 1.0 / (x * x)).collect::<Vec<_>>();
        Self {
            mean,
            id_rows: model.landmark_rows(&model.basis_id),
            exp_rows: model.landmark_rows(&model.basis_exp),
            inv_var_id: inv_var(&model.sigma_id),
            inv_var_exp: inv_var(&model.sigma_exp),
        }
    }

    fn n_landmarks(&self) -> usize {
        self.mean.len() / 3
    }

    fn check(&self, alpha_id: &DVector<f64>, alpha_exp: &DVector<f64>) -> Result<()> {
        if alpha_id.len() != self.id_rows.ncols() || alpha_exp.len() != self.exp_rows.ncols() {
            return Err(invalid!(
                "coefficient lengths ({}, {}) do not match basis widths ({}, {})",
                alpha_id.len(),
                alpha_exp.len(),
                self.id_rows.ncols(),
                self.exp_rows.ncols()
            ));
        }
        Ok(())
    }

    fn landmark_coords(&self, alpha_id: &DVector<f64>, alpha_exp: &DVector<f64>) -> DVector<f64> {
        let mut s = self.mean.clone();
        s.gemv(1.0, &self.id_rows, alpha_id, 1.0);
        s.gemv(1.0, &self.exp_rows, alpha_exp, 1.0);
        s
    }

    fn landmark_points(&self, alpha_id: &DVector<f64>, alpha_exp: &DVector<f64>) -> Vec<Point3> {
        to_points(&self.landmark_coords(alpha_id, alpha_exp))
    }
}

fn to_points(coords: &DVector<f64>) -> Vec<Point3> {
    coords
        .as_slice()
        .chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect()
}

fn check_landmarks(lm: &LandmarkSet2D, expected: usize) -> Result<()> {
    if lm.len() != expected {
        return Err(invalid!(
            "landmark set has {} points, model has {expected}",
            lm.len()
        ));
    }
    Ok(())
}

/// Scaled-orthographic projection rows `f * P * R`.
fn camera_rows(pose: &PoseParams) -> Matrix2x3<f64> {
    pose.scale * pose.rotation.fixed_rows::<2>(0).into_owned()
}

/// `f P R B_i` stacked over landmarks: a `2L x K` design matrix.
fn projected_basis(rows: &DMatrix<f64>, pose: &PoseParams) -> DMatrix<f64> {
    let cam = camera_rows(pose);
    let l = rows.nrows() / 3;
    let mut out = DMatrix::zeros(2 * l, rows.ncols());
    for i in 0..l {
        let block = rows.rows(3 * i, 3);
        out.rows_mut(2 * i, 2).copy_from(&(cam * block));
    }
    out
}

/// `u - f P R (s + t)` for landmark coordinates `s`.
fn residual(coords: &DVector<f64>, pose: &PoseParams, lm: &LandmarkSet2D) -> DVector<f64> {
    let cam = camera_rows(pose);
    let mut out = DVector::zeros(lm.coords().len());
    for (i, c) in coords.as_slice().chunks_exact(3).enumerate() {
        let q = cam * (Vector3::new(c[0], c[1], c[2]) + pose.translation);
        let (u, v) = lm.point(i);
        out[2 * i] = u - q.x;
        out[2 * i + 1] = v - q.y;
    }
    out
}

/// Closed-form scaled-orthographic pose from 3D-2D correspondences.
///
/// An affine `2 x 4` camera is fitted by least squares, its linear part is
/// projected onto the nearest scaled pair of orthonormal rows, and the third
/// rotation row is their cross product. Scale and image offset are then
/// re-fitted by least squares for that rotation; the 3D translation is the
/// minimum-norm `t` (no component along the viewing axis) reproducing the offset.
pub fn estimate_pose(points3d: &[Point3], landmarks: &LandmarkSet2D) -> Result<PoseParams> {
    let l = points3d.len();
    if l < 4 {
        return Err(invalid!("pose estimation needs at least 4 points, got {l}"));
    }
    check_landmarks(landmarks, l)?;

    let mean = points3d.iter().fold(Point3::zeros(), |a, p| a + p) / l as f64;
    let centered = DMatrix::from_fn(l, 3, |i, j| points3d[i][j] - mean[j]);
    let sv = centered.singular_values();
    let (smax, smid) = (sv.max(), {
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s[1]
    });
    if !(smax > 0.0) || smid <= 1e-10 * smax {
        return Err(Error::DegenerateGeometry(
            "3D points are collinear or coincident".into(),
        ));
    }

    // Affine fit on centered points for conditioning.
    let design = DMatrix::from_fn(l, 4, |i, j| if j < 3 { centered[(i, j)] } else { 1.0 });
    let pinv = design
        .pseudo_inverse(1e-12 * smax)
        .map_err(|e| Error::NumericalFailure(e.to_string()))?;
    let u = DVector::from_iterator(l, (0..l).map(|i| landmarks.point(i).0));
    let v = DVector::from_iterator(l, (0..l).map(|i| landmarks.point(i).1));
    let m1 = &pinv * &u;
    let m2 = &pinv * &v;
    let linear = Matrix2x3::new(m1[0], m1[1], m1[2], m2[0], m2[1], m2[2]);

    let svd = linear.svd(true, true);
    let (uu, v_t) = match (svd.u, svd.v_t) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::NumericalFailure("svd of affine camera failed".into())),
    };
    let s = svd.singular_values;
    if !(s.max() > 0.0) || s.min() <= 1e-12 * s.max() {
        return Err(Error::DegenerateGeometry(
            "affine camera is rank deficient".into(),
        ));
    }
    let q = uu * v_t;
    let r1 = RowVector3::new(q[(0, 0)], q[(0, 1)], q[(0, 2)]);
    let r2 = RowVector3::new(q[(1, 0)], q[(1, 1)], q[(1, 2)]);
    let r3 = r1.cross(&r2);
    let rotation = Matrix3::from_rows(&[r1, r2, r3]);

    // Re-fit scale and 2D offset for the fixed rotation.
    let projected: Vec<Vector2<f64>> = points3d
        .iter()
        .map(|p| (rotation * p).xy())
        .collect();
    let q_bar = projected.iter().fold(Vector2::zeros(), |a, p| a + p) / l as f64;
    let u_bar = Vector2::new(u.mean(), v.mean());
    let (mut num, mut den) = (0.0, 0.0);
    for (i, p) in projected.iter().enumerate() {
        let dq = p - q_bar;
        let du = Vector2::new(u[i], v[i]) - u_bar;
        num += du.dot(&dq);
        den += dq.norm_squared();
    }
    let scale = num / den;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "estimated scale {scale} is not positive"
        )));
    }
    let offset = u_bar - scale * q_bar;
    let translation = rotation.transpose() * Vector3::new(offset.x / scale, offset.y / scale, 0.0);
    PoseParams::new(scale, rotation, translation)
}

fn solve_expression_lm(
    lmm: &LandmarkModel,
    alpha_id: &DVector<f64>,
    pose: &PoseParams,
    landmarks: &LandmarkSet2D,
    reg_exp: f64,
) -> Result<DVector<f64>> {
    let k = lmm.exp_rows.ncols();
    if reg_exp == 0.0 && k > 2 * lmm.n_landmarks() {
        return Err(Error::Underdetermined(format!(
            "{k} expression coefficients from {} landmark coordinates",
            2 * lmm.n_landmarks()
        )));
    }
    let zero_exp = DVector::zeros(k);
    let fixed = lmm.landmark_coords(alpha_id, &zero_exp);
    let b = residual(&fixed, pose, landmarks);
    let a = projected_basis(&lmm.exp_rows, pose);
    let penalty: Vec<f64> = lmm.inv_var_exp.iter().map(|w| reg_exp * w).collect();
    tikhonov_lstsq(&a, &b, &penalty)
}

/// Expression coefficients minimizing
/// `||u - f P R (S_U(alpha_id, alpha_exp) + t)||^2 + reg_exp * ||alpha_exp / sigma_exp||^2`
/// for a fixed identity and pose.
pub fn solve_expression(
    model: &MorphableModel,
    alpha_id: &DVector<f64>,
    pose: &PoseParams,
    landmarks: &LandmarkSet2D,
    reg_exp: f64,
) -> Result<DVector<f64>> {
    let lmm = LandmarkModel::new(model);
    lmm.check(alpha_id, &DVector::zeros(model.k_exp()))?;
    check_landmarks(landmarks, model.n_landmarks())?;
    solve_expression_lm(&lmm, alpha_id, pose, landmarks, reg_exp)
}

fn solve_identity_lm(
    lmm: &LandmarkModel,
    per_image: &[(&DVector<f64>, &PoseParams, &LandmarkSet2D)],
    reg_id: f64,
) -> Result<DVector<f64>> {
    let k = lmm.id_rows.ncols();
    let rows_per = 2 * lmm.n_landmarks();
    let total = rows_per * per_image.len();
    if reg_id == 0.0 && total < k {
        return Err(Error::Underdetermined(format!(
            "{k} identity coefficients from {total} landmark coordinates"
        )));
    }
    let zero_id = DVector::zeros(k);
    let mut a = DMatrix::zeros(total, k);
    let mut b = DVector::zeros(total);
    for (j, (alpha_exp, pose, lm)) in per_image.iter().enumerate() {
        let fixed = lmm.landmark_coords(&zero_id, alpha_exp);
        b.rows_mut(j * rows_per, rows_per)
            .copy_from(&residual(&fixed, pose, lm));
        a.rows_mut(j * rows_per, rows_per)
            .copy_from(&projected_basis(&lmm.id_rows, pose));
    }
    let penalty: Vec<f64> = lmm.inv_var_id.iter().map(|w| reg_id * w).collect();
    tikhonov_lstsq(&a, &b, &penalty)
}

/// Shared identity coefficients over all images of a subject, each image
/// contributing its own expression, pose and landmarks to one stacked system.
pub fn solve_identity_shared(
    model: &MorphableModel,
    per_image: &[(DVector<f64>, PoseParams, LandmarkSet2D)],
    reg_id: f64,
) -> Result<DVector<f64>> {
    if per_image.is_empty() {
        return Err(invalid!("identity solve needs at least one image"));
    }
    let lmm = LandmarkModel::new(model);
    for (alpha_exp, _, lm) in per_image {
        lmm.check(&DVector::zeros(model.k_id()), alpha_exp)?;
        check_landmarks(lm, model.n_landmarks())?;
    }
    let refs: Vec<_> = per_image.iter().map(|(a, p, l)| (a, p, l)).collect();
    solve_identity_lm(&lmm, &refs, reg_id)
}

fn data_term(lmm: &LandmarkModel, alpha_id: &DVector<f64>, state: &ImageState, lm: &LandmarkSet2D) -> f64 {
    residual(&lmm.landmark_coords(alpha_id, &state.alpha_exp), &state.pose, lm).norm_squared()
}

/// Landmark data term `sum_j ||u_j - u_hat_j||^2` (no regularizers).
pub fn objective(
    model: &MorphableModel,
    alpha_id: &DVector<f64>,
    states: &[ImageState],
    landmarks: &[LandmarkSet2D],
) -> Result<f64> {
    if states.len() != landmarks.len() {
        return Err(invalid!(
            "{} image states but {} landmark sets",
            states.len(),
            landmarks.len()
        ));
    }
    let lmm = LandmarkModel::new(model);
    let mut total = 0.0;
    for (state, lm) in states.iter().zip(landmarks) {
        lmm.check(alpha_id, &state.alpha_exp)?;
        check_landmarks(lm, model.n_landmarks())?;
        total += data_term(&lmm, alpha_id, state, lm);
    }
    Ok(total)
}

fn penalty(alpha: &DVector<f64>, inv_var: &[f64], weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    weight
        * alpha
            .iter()
            .zip(inv_var)
            .map(|(a, w)| a * a * w)
            .sum::<f64>()
}

/// Alternating minimization over poses, expressions and the shared identity.
///
/// Starts from zero identity and expression coefficients. A pass re-estimates
/// each pose from the current landmark shape (keeping the previous pose when
/// the closed form would raise that image's residual), then solves every
/// expression, then the shared identity. The fit stops when a pass lowers the
/// objective by less than `rel_tol` of its previous value, or when the
/// objective has fallen below `rel_tol^2` of the mean-shape objective.
pub fn multi_image_fit(
    model: &MorphableModel,
    landmarks: &[LandmarkSet2D],
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    if landmarks.is_empty() {
        return Err(invalid!("fitting needs at least one landmark set"));
    }
    for lm in landmarks {
        check_landmarks(lm, model.n_landmarks())?;
    }
    let lmm = LandmarkModel::new(model);
    let mut alpha_id = DVector::zeros(model.k_id());
    let mut states: Vec<Option<ImageState>> = vec![None; landmarks.len()];
    let mut objective_trace = Vec::new();
    let mut data_trace = Vec::new();
    let mut reference = None;
    let mut converged = false;

    for _pass in 0..config.max_iterations {
        for (state, lm) in states.iter_mut().zip(landmarks) {
            let alpha_exp = state
                .as_ref()
                .map(|s| s.alpha_exp.clone())
                .unwrap_or_else(|| DVector::zeros(model.k_exp()));
            let points = lmm.landmark_points(&alpha_id, &alpha_exp);
            let candidate = ImageState {
                alpha_exp,
                pose: estimate_pose(&points, lm)?,
            };
            let accept = match state {
                None => true,
                Some(old) => {
                    data_term(&lmm, &alpha_id, &candidate, lm) <= data_term(&lmm, &alpha_id, old, lm)
                }
            };
            if accept {
                *state = Some(candidate);
            }
        }
        let mut current: Vec<ImageState> = states.iter().map(|s| s.clone().expect("pose set")).collect();

        if reference.is_none() {
            let r: f64 = current
                .iter()
                .zip(landmarks)
                .map(|(s, lm)| data_term(&lmm, &alpha_id, s, lm))
                .sum();
            reference = Some(r);
        }

        for (state, lm) in current.iter_mut().zip(landmarks) {
            state.alpha_exp = solve_expression_lm(&lmm, &alpha_id, &state.pose, lm, config.reg_exp)?;
        }
        let refs: Vec<_> = current
            .iter()
            .zip(landmarks)
            .map(|(s, lm)| (&s.alpha_exp, &s.pose, lm))
            .collect();
        alpha_id = solve_identity_lm(&lmm, &refs, config.reg_id)?;

        let data: f64 = current
            .iter()
            .zip(landmarks)
            .map(|(s, lm)| data_term(&lmm, &alpha_id, s, lm))
            .sum();
        let total = data
            + penalty(&alpha_id, &lmm.inv_var_id, config.reg_id)
            + current
                .iter()
                .map(|s| penalty(&s.alpha_exp, &lmm.inv_var_exp, config.reg_exp))
                .sum::<f64>();
        if !total.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "objective became {total} after pass {}",
                objective_trace.len() + 1
            )));
        }
        if let Some(&prev) = objective_trace.last() {
            if total > prev + MONOTONE_SLACK {
                return Err(Error::NumericalFailure(format!(
                    "objective increased from {prev:e} to {total:e} in pass {}",
                    objective_trace.len() + 1
                )));
            }
        }
        let prev = objective_trace.last().copied();
        objective_trace.push(total);
        data_trace.push(data);
        for (slot, s) in states.iter_mut().zip(current) {
            *slot = Some(s);
        }

        let floor = reference.unwrap_or(0.0) * config.rel_tol * config.rel_tol;
        let stalled = prev.is_some_and(|p| p - total <= config.rel_tol * p);
        if total <= floor || stalled {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        alpha_id,
        per_image: states.into_iter().map(|s| s.expect("pose set")).collect(),
        iterations_used: objective_trace.len(),
        objective_trace,
        data_trace,
        converged,
    })
}
