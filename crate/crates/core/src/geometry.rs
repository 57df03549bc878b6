//! Shape representation and the geometric primitives shared by fitting,
//! training and evaluation.
//!
//! A [`Shape`] is a dense point cloud stored as one flat coordinate vector
//! `(x1, y1, z1, ..., xn, yn, zn)`. Everything here is a pure function over
//! immutable values.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{invalid, Error, Result};

pub type Point3 = Vector3<f64>;

/// Orthogonality / determinant tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-10;

/// Smallest vertex count accepted by [`Shape::new`].
pub const MIN_VERTICES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    coords: Vec<f64>,
}

impl Shape {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(3) {
            return Err(invalid!(
                "shape coordinate count {} is not a multiple of 3",
                coords.len()
            ));
        }
        let n = coords.len() / 3;
        if n < MIN_VERTICES {
            return Err(invalid!(
                "shape has {n} vertices, at least {MIN_VERTICES} required"
            ));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(invalid!("shape coordinate {i} is not finite"));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[Point3]) -> Result<Self> {
        Self::new(points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn vertex(&self, i: usize) -> Point3 {
        Point3::new(
            self.coords[3 * i],
            self.coords[3 * i + 1],
            self.coords[3 * i + 2],
        )
    }

    pub fn points(&self) -> Vec<Point3> {
        self.coords
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect()
    }
}

/// Linear shape model: `mean + basis_id * alpha_id + basis_exp * alpha_exp`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean: Shape,
    pub basis_id: DMatrix<f64>,
    pub basis_exp: DMatrix<f64>,
    pub sigma_id: Vec<f64>,
    pub sigma_exp: Vec<f64>,
    pub landmark_indices: Vec<usize>,
    pub nose_tip_index: usize,
}

impl MorphableModel {
    pub fn new(
        mean: Shape,
        basis_id: DMatrix<f64>,
        basis_exp: DMatrix<f64>,
        sigma_id: Vec<f64>,
        sigma_exp: Vec<f64>,
        landmark_indices: Vec<usize>,
        nose_tip_index: usize,
    ) -> Result<Self> {
        let model = Self {
            mean,
            basis_id,
            basis_exp,
            sigma_id,
            sigma_exp,
            landmark_indices,
            nose_tip_index,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks every structural invariant except basis orthonormality, which
    /// is quadratic in the basis width; see [`Self::orthonormality_error`].
    pub fn validate(&self) -> Result<()> {
        let rows = self.mean.coords().len();
        let n = self.n_vertices();
        let violation = |field: &str, msg: String| Error::InvariantViolation {
            field: field.to_string(),
            msg,
        };
        if self.basis_id.nrows() != rows {
            return Err(violation(
                "basis_id",
                format!("{} rows, mean has {rows}", self.basis_id.nrows()),
            ));
        }
        if self.basis_exp.nrows() != rows {
            return Err(violation(
                "basis_exp",
                format!("{} rows, mean has {rows}", self.basis_exp.nrows()),
            ));
        }
        if self.sigma_id.len() != self.basis_id.ncols() {
            return Err(violation(
                "sigma_id",
                format!(
                    "length {} but basis_id has {} columns",
                    self.sigma_id.len(),
                    self.basis_id.ncols()
                ),
            ));
        }
        if self.sigma_exp.len() != self.basis_exp.ncols() {
            return Err(violation(
                "sigma_exp",
                format!(
                    "length {} but basis_exp has {} columns",
                    self.sigma_exp.len(),
                    self.basis_exp.ncols()
                ),
            ));
        }
        for (name, sig) in [("sigma_id", &self.sigma_id), ("sigma_exp", &self.sigma_exp)] {
            if sig.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(violation(name, "all entries must be finite and > 0".into()));
            }
        }
        if self.landmark_indices.len() < 4 {
            return Err(violation(
                "landmark_indices",
                format!("{} landmarks, at least 4 required", self.landmark_indices.len()),
            ));
        }
        let mut seen = vec![false; n];
        for &i in &self.landmark_indices {
            if i >= n {
                return Err(violation(
                    "landmark_indices",
                    format!("index {i} out of range for {n} vertices"),
                ));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(violation("landmark_indices", format!("duplicate index {i}")));
            }
        }
        if self.nose_tip_index >= n {
            return Err(violation(
                "nose_tip_index",
                format!("index {} out of range for {n} vertices", self.nose_tip_index),
            ));
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.mean.n_vertices()
    }

    pub fn k_id(&self) -> usize {
        self.basis_id.ncols()
    }

    pub fn k_exp(&self) -> usize {
        self.basis_exp.ncols()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    /// Largest absolute deviation of `[A_id A_exp]^T [A_id A_exp]` from the
    /// identity matrix.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.k_id() + self.k_exp();
        let mut joint = DMatrix::zeros(self.basis_id.nrows(), k);
        joint.columns_mut(0, self.k_id()).copy_from(&self.basis_id);
        joint
            .columns_mut(self.k_id(), self.k_exp())
            .copy_from(&self.basis_exp);
        let gram = joint.tr_mul(&joint);
        (gram - DMatrix::identity(k, k)).amax()
    }

    /// Rows of a basis matrix restricted to the landmark vertices, `3L x K`.
    pub fn landmark_rows(&self, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.n_landmarks();
        let mut out = DMatrix::zeros(3 * l, basis.ncols());
        for (row, &v) in self.landmark_indices.iter().enumerate() {
            for c in 0..3 {
                out.row_mut(3 * row + c).copy_from(&basis.row(3 * v + c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeffPair {
    pub alpha_id: DVector<f64>,
    pub alpha_exp: DVector<f64>,
}

impl CoeffPair {
    pub fn new(alpha_id: DVector<f64>, alpha_exp: DVector<f64>) -> Result<Self> {
        if alpha_id.iter().chain(alpha_exp.iter()).any(|v| !v.is_finite()) {
            return Err(invalid!("coefficients must be finite"));
        }
        Ok(Self {
            alpha_id,
            alpha_exp,
        })
    }

    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            alpha_id: DVector::zeros(model.k_id()),
            alpha_exp: DVector::zeros(model.k_exp()),
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("rotation has non-finite entries"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    if ortho > ROTATION_TOL {
        return Err(invalid!("rotation is not orthonormal (max |R^T R - I| = {ortho:e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(invalid!("rotation determinant is {det}, expected +1"));
    }
    Ok(())
}

/// Weak-perspective camera: `u = scale * P * rotation * (p + translation)`,
/// where `P` keeps the first two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseParams {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(invalid!("pose scale must be finite and positive, got {scale}"));
        }
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("pose translation must be finite"));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet2D {
    points: Vec<f64>,
}

impl LandmarkSet2D {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if !points.len().is_multiple_of(2) {
            return Err(invalid!(
                "landmark coordinate count {} is not even",
                points.len()
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.points[2 * i], self.points[2 * i + 1])
    }

    /// Side of the axis-aligned bounding box (the larger of width/height).
    pub fn extent(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in self.points.chunks_exact(2) {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        (hi[0] - lo[0]).max(hi[1] - lo[1])
    }
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = PoseParams::new(scale, rotation, translation)?;
        Ok(Self {
            scale: pose.scale,
            rotation: pose.rotation,
            translation: pose.translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// `mean + A_id * alpha_id + A_exp * alpha_exp`.
pub fn compose_shape(model: &MorphableModel, coeffs: &CoeffPair) -> Result<Shape> {
    if coeffs.alpha_id.len() != model.k_id() || coeffs.alpha_exp.len() != model.k_exp() {
        return Err(invalid!(
            "coefficient lengths ({}, {}) do not match basis widths ({}, {})",
            coeffs.alpha_id.len(),
            coeffs.alpha_exp.len(),
            model.k_id(),
            model.k_exp()
        ));
    }
    let mut s = DVector::from_column_slice(model.mean.coords());
    s.gemv(1.0, &model.basis_id, &coeffs.alpha_id, 1.0);
    s.gemv(1.0, &model.basis_exp, &coeffs.alpha_exp, 1.0);
    Shape::new(s.as_slice().to_vec())
}

/// Composite shape `mean + delta_id + delta_res`.
pub fn compose_from_components(mean: &Shape, delta_id: &[f64], delta_res: &[f64]) -> Result<Shape> {
    let len = mean.coords().len();
    if delta_id.len() != len || delta_res.len() != len {
        return Err(invalid!(
            "component lengths ({}, {}) do not match mean length {len}",
            delta_id.len(),
            delta_res.len()
        ));
    }
    Shape::new(
        mean.coords()
            .iter()
            .zip(delta_id)
            .zip(delta_res)
            .map(|((m, a), b)| m + a + b)
            .collect(),
    )
}

pub fn select_landmarks(shape: &Shape, indices: &[usize]) -> Result<Vec<Point3>> {
    let n = shape.n_vertices();
    indices
        .iter()
        .map(|&i| {
            if i < n {
                Ok(shape.vertex(i))
            } else {
                Err(invalid!("landmark index {i} out of range for {n} vertices"))
            }
        })
        .collect()
}

/// `f * P * R * (p + t)` for every point.
pub fn project_landmarks(points: &[Point3], pose: &PoseParams) -> LandmarkSet2D {
    let mut out = Vec::with_capacity(2 * points.len());
    for p in points {
        let q = pose.rotation * (p + pose.translation);
        out.push(pose.scale * q.x);
        out.push(pose.scale * q.y);
    }
    LandmarkSet2D { points: out }
}

fn centroid(points: &[Point3]) -> Point3 {
    points.iter().fold(Point3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Closed-form least-squares similarity transform mapping `source` onto
/// `target` (centroids + SVD of the cross-covariance, reflection-corrected).
pub fn procrustes_align(source: &[Point3], target: &[Point3]) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(invalid!(
            "point counts differ: {} vs {}",
            source.len(),
            target.len()
        ));
    }
    if source.len() < 4 {
        return Err(invalid!("procrustes needs at least 4 points, got {}", source.len()));
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (p, q) in source.iter().zip(target) {
        let ps = p - mu_s;
        cov += (q - mu_t) * ps.transpose();
        var_s += ps.norm_squared();
    }
    let n = source.len() as f64;
    cov /= n;
    var_s /= n;
    let spread = source.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
    if var_s <= (1e-12 * spread).powi(2) {
        return Err(Error::DegenerateGeometry("source points are coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NumericalFailure("svd of cross-covariance failed".into())),
    };
    let mut sv: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    if sv[1].0 <= 1e-12 * sv[0].0 || sv[0].0 == 0.0 {
        return Err(Error::DegenerateGeometry(
            "cross-covariance has rank < 2".into(),
        ));
    }
    // Flip the axis of the smallest singular value when U V^T is a reflection.
    let mut signs = Vector3::from_element(1.0);
    if (u * v_t).determinant() < 0.0 {
        signs[sv[2].1] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let trace: f64 = svd
        .singular_values
        .iter()
        .zip(signs.iter())
        .map(|(s, d)| s * d)
        .sum();
    let scale = trace / var_s;
    if !(scale > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "non-positive similarity scale {scale}"
        )));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

pub fn apply_transform(shape: &Shape, xf: &SimilarityTransform) -> Shape {
    let coords = shape
        .coords()
        .chunks_exact(3)
        .flat_map(|c| {
            let q = xf.apply(&Point3::new(c[0], c[1], c[2]));
            [q.x, q.y, q.z]
        })
        .collect();
    Shape { coords }
}

/// Sorted indices of vertices within `radius` (inclusive) of `center_index`.
pub fn crop_indices(shape: &Shape, center_index: usize, radius: f64) -> Result<Vec<usize>> {
    let n = shape.n_vertices();
    if center_index >= n {
        return Err(invalid!("crop center {center_index} out of range for {n} vertices"));
    }
    if radius.is_nan() || radius < 0.0 {
        return Err(invalid!("crop radius must be non-negative, got {radius}"));
    }
    let c = shape.vertex(center_index);
    Ok((0..n)
        .filter(|&i| i == center_index || (shape.vertex(i) - c).norm() <= radius)
        .collect())
}

fn check_pairs(pairs: &[(&Shape, &Shape)], indices: &[usize]) -> Result<()> {
    if pairs.is_empty() {
        return Err(invalid!("rmse needs at least one shape pair"));
    }
    if indices.is_empty() {
        return Err(invalid!("rmse needs a non-empty index list"));
    }
    for (k, (a, b)) in pairs.iter().enumerate() {
        if a.coords().len() != b.coords().len() {
            return Err(invalid!(
                "pair {k}: shapes have {} and {} vertices",
                a.n_vertices(),
                b.n_vertices()
            ));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= a.n_vertices()) {
            return Err(invalid!("pair {k}: index {i} out of range"));
        }
    }
    Ok(())
}

/// Reconstruction error as `(1/N) * sum_i ||s*_i - s_i|| / n_c`, the norm taken
/// over the full stacked `3 n_c` difference vector of the cropped vertices.
pub fn rmse(pairs: &[(&Shape, &Shape)], indices: &[usize]) -> Result<f64> {
    check_pairs(pairs, indices)?;
    let nc = indices.len() as f64;
    let total: f64 = pairs
        .iter()
        .map(|(gt, pred)| {
            indices
                .iter()
                .map(|&i| (gt.vertex(i) - pred.vertex(i)).norm_squared())
                .sum::<f64>()
                .sqrt()
                / nc
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean Euclidean per-vertex distance, averaged over pairs.
pub fn mean_vertex_distance(pairs: &[(&Shape, &Shape)], indices: &[usize]) -> Result<f64> {
    check_pairs(pairs, indices)?;
    let nc = indices.len() as f64;
    let total: f64 = pairs
        .iter()
        .map(|(gt, pred)| {
            indices
                .iter()
                .map(|&i| (gt.vertex(i) - pred.vertex(i)).norm())
                .sum::<f64>()
                / nc
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Rotation from intrinsic Z-Y-X Euler angles: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sz, cz) = yaw.sin_cos();
    let (sy, cy) = pitch.sin_cos();
    let (sx, cx) = roll.sin_cos();
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    rz * ry * rx
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}
