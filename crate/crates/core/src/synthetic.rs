//! Procedural morphable models and labelled multi-image datasets with known
//! ground truth.
//!
//! Every generator is a pure function of its inputs and an explicit seed or
//! RNG value. Random streams use ChaCha8 so results are identical across
//! platforms.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    compose_shape, project_landmarks, rotation_from_euler_zyx, select_landmarks, CoeffPair,
    LandmarkSet2D, MorphableModel, Point3, PoseParams, Shape,
};

/// Number of landmarks placed on every synthetic model.
pub const N_LANDMARKS: usize = 68;

/// Ratio of consecutive basis standard deviations.
pub const SIGMA_DECAY: f64 = 0.9;

const FOURIER_FEATURES: usize = 12;

/// Scalar fields drawn per basis column.
const FIELDS_PER_COLUMN: usize = 2;

/// The mean surface is built on a unit face (half-height 1) and stored in
/// millimetres, giving a face 200 mm tall.
pub const MM_PER_UNIT: f64 = 100.0;

/// Widths of the mouth and eye windows of the expression fields.
const EXP_WINDOW_MOUTH: f64 = 0.3;
const EXP_WINDOW_EYE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModelSpec {
    pub n_vertices: usize,
    pub k_id: usize,
    pub k_exp: usize,
    /// Length scale of the random fields the bases are drawn from.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            n_vertices: 600,
            k_id: 20,
            k_exp: 8,
            smoothness: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_id < 1 || self.k_exp < 1 {
            return Err(invalid!(
                "k_id and k_exp must be >= 1 (got {}, {})",
                self.k_id,
                self.k_exp
            ));
        }
        let min_n = (self.k_id + self.k_exp + 1).max(N_LANDMARKS);
        if self.n_vertices < min_n {
            return Err(invalid!(
                "n_vertices = {} but at least {min_n} are required",
                self.n_vertices
            ));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(invalid!("smoothness must be positive, got {}", self.smoothness));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        self.min + u * (self.max - self.min)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(invalid!("{name} range [{}, {}] is invalid", self.min, self.max));
        }
        Ok(())
    }
}

/// Uniform pose ranges. Angles are in radians, translations in millimetres
/// and scales in image units per millimetre.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRanges {
    pub yaw: Range,
    pub pitch: Range,
    pub roll: Range,
    pub scale: Range,
    pub tx: Range,
    pub ty: Range,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            yaw: Range::new(-0.15, 0.15),
            pitch: Range::new(-0.09, 0.09),
            roll: Range::new(-0.045, 0.045),
            scale: Range::new(0.8, 1.2),
            tx: Range::new(-10.0, 10.0),
            ty: Range::new(-10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub landmark_noise_sigma: f64,
    pub pose_ranges: PoseRanges,
    pub image_resolution: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            images_per_subject: 10,
            landmark_noise_sigma: 0.0,
            pose_ranges: PoseRanges::default(),
            image_resolution: 32,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(invalid!("n_subjects must be >= 2, got {}", self.n_subjects));
        }
        if self.images_per_subject < 1 {
            return Err(invalid!("images_per_subject must be >= 1"));
        }
        if !(self.landmark_noise_sigma >= 0.0 && self.landmark_noise_sigma.is_finite()) {
            return Err(invalid!(
                "landmark_noise_sigma must be >= 0, got {}",
                self.landmark_noise_sigma
            ));
        }
        if self.image_resolution < 8 {
            return Err(invalid!(
                "image_resolution must be >= 8, got {}",
                self.image_resolution
            ));
        }
        let r = &self.pose_ranges;
        for (name, range) in [
            ("yaw", r.yaw),
            ("pitch", r.pitch),
            ("roll", r.roll),
            ("scale", r.scale),
            ("tx", r.tx),
            ("ty", r.ty),
        ] {
            range.validate(name)?;
        }
        if r.scale.min <= 0.0 {
            return Err(invalid!("scale range must be positive"));
        }
        Ok(())
    }

    /// Subjects withheld from training, used for verification and
    /// reconstruction tests: a quarter of all subjects, at least one.
    pub fn n_test_subjects(&self) -> usize {
        ((self.n_subjects as f64 / 4.0).round() as usize).clamp(1, self.n_subjects - 1)
    }

    pub fn n_train_subjects(&self) -> usize {
        self.n_subjects - self.n_test_subjects()
    }

    /// Images per training subject reserved for validation.
    pub fn n_validation_images(&self) -> usize {
        self.images_per_subject / 5
    }
}

/// Square depth raster, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub resolution: usize,
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub subject_label: usize,
    pub coeffs: CoeffPair,
    pub pose: PoseParams,
    pub landmarks: LandmarkSet2D,
    pub depth: DepthImage,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<RenderedSample>,
    pub splits: Vec<Split>,
    pub n_subjects: usize,
    pub n_train_subjects: usize,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&RenderedSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn subject_samples(&self, subject: usize) -> Vec<&RenderedSample> {
        self.samples
            .iter()
            .filter(|s| s.subject_label == subject)
            .collect()
    }
}

/// Footprint radius of a rasterized point relative to the mean point spacing.
const SPLAT_GAIN: f64 = 1.5;

/// Face-like mean surface on a sunflower-sampled ellipse: an ellipsoidal cap
/// with a nose ridge, eye sockets and a brow.
fn mean_surface(n: usize) -> Vec<Point3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = ((i as f64 + 0.5) / n as f64).sqrt();
            let theta = i as f64 * golden;
            let x = 0.8 * r * theta.cos();
            let y = 1.0 * r * theta.sin();
            let base = 0.6 * (1.0 - 0.85 * r * r).sqrt();
            let gauss = |cx: f64, cy: f64, sx: f64, sy: f64| {
                (-((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy))).exp()
            };
            let nose = 0.22 * gauss(0.0, -0.05, 0.09, 0.22);
            let eyes = -0.07 * (gauss(-0.3, 0.25, 0.12, 0.08) + gauss(0.3, 0.25, 0.12, 0.08));
            let brow = 0.04 * gauss(0.0, 0.42, 0.45, 0.06);
            let chin = 0.03 * (2.5 * y).cos() * (1.0 - r * r);
            Point3::new(x, y, base + nose + eyes + brow + chin)
        })
        .collect()
}

/// Evenly strided landmark subset; sunflower ordering makes the stride spread
/// uniformly over the surface.
fn landmark_layout(n: usize) -> Vec<usize> {
    (0..N_LANDMARKS)
        .map(|j| ((j as f64 + 0.5) * n as f64 / N_LANDMARKS as f64) as usize)
        .collect()
}

/// Random Fourier-feature scalar field over the vertex positions.
fn smooth_scalar_field(points: &[Point3], smoothness: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut field = DVector::zeros(points.len());
    let amp_scale = 1.0 / (FOURIER_FEATURES as f64).sqrt();
    for _ in 0..FOURIER_FEATURES {
        let k = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) / smoothness;
        let phase = rng.random::<f64>() * TAU;
        let amp = rng.sample::<f64, _>(StandardNormal) * amp_scale;
        for (i, p) in points.iter().enumerate() {
            field[i] += amp * (k.dot(p) + phase).cos();
        }
    }
    field
}

/// Smooth weight concentrating expression deformations around the mouth and
/// the eyes of the mean surface.
fn expression_window(p: &Point3) -> f64 {
    let bump = |cx: f64, cy: f64, s: f64| (-((p.x - cx).powi(2) + (p.y - cy).powi(2)) / (2.0 * s * s)).exp();
    bump(0.0, -0.5, EXP_WINDOW_MOUTH) + bump(-0.3, 0.25, EXP_WINDOW_EYE) + bump(0.3, 0.25, EXP_WINDOW_EYE)
}

/// `[1, x, y, z]` evaluated at `points`, each row scaled by `weight`.
fn affine_functions(points: &[Point3], weight: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 4, |i, j| weight[i] * if j == 0 { 1.0 } else { points[i][j - 1] })
}

/// `count` random fields times `weight`, each corrected by a combination of
/// the weighted affine functions so its landmark values are orthogonal to
/// `[1, x, y, z]` of the landmarks.
fn landmark_affine_free_fields(
    points: &[Point3],
    landmarks: &[usize],
    weight: &[f64],
    count: usize,
    smoothness: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let ones = vec![1.0; landmarks.len()];
    let lm_points: Vec<Point3> = landmarks.iter().map(|&i| points[i]).collect();
    let lm_affine = affine_functions(&lm_points, &ones);
    let correction = affine_functions(points, weight);
    let gram = lm_affine.tr_mul(&correction.select_rows(landmarks)).lu();
    let mut fields = DMatrix::zeros(points.len(), count);
    for c in 0..count {
        let mut f = smooth_scalar_field(points, smoothness, rng).component_mul(&DVector::from_column_slice(weight));
        let f_lm = DVector::from_iterator(landmarks.len(), landmarks.iter().map(|&i| f[i]));
        let coeffs = gram
            .solve(&lm_affine.tr_mul(&f_lm))
            .ok_or_else(|| Error::NumericalFailure("landmark affine system is singular".into()))?;
        f.gemv(-1.0, &correction, &coeffs, 1.0);
        fields.set_column(c, &f);
    }
    Ok(fields)
}

/// Orthonormal basis of the `count` leading left singular directions.
fn leading_span(fields: DMatrix<f64>, count: usize) -> Result<DMatrix<f64>> {
    let svd = fields.svd(true, false);
    let u = svd.u.expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep: Vec<usize> = order.into_iter().take(count).collect();
    let smin = svd.singular_values[*keep.last().expect("count > 0")];
    if !(smin > 1e-8 * svd.singular_values.max()) {
        return Err(Error::NumericalFailure(format!(
            "smooth fields are numerically dependent; raise n_vertices or lower smoothness ({smin:e})"
        )));
    }
    Ok(u.select_columns(&keep))
}

/// Scalar fields for the identity and expression bases. Expression fields are
/// windowed around the mouth and eyes. Identity fields are global and are
/// orthogonal to every expression field both over all vertices and over the
/// landmark vertices. When the landmarks cannot support the second
/// condition, only the first is enforced.
fn identity_and_expression_fields(
    points: &[Point3],
    landmarks: &[usize],
    d_id: usize,
    d_exp: usize,
    smoothness: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let window: Vec<f64> = points.iter().map(expression_window).collect();
    let ones = vec![1.0; points.len()];
    let exp = leading_span(
        landmark_affine_free_fields(points, landmarks, &window, d_exp + 4, smoothness, rng)?,
        d_exp,
    )?;
    let extra = landmark_affine_free_fields(points, landmarks, &window, d_exp, smoothness, rng)?;
    let mut id = landmark_affine_free_fields(points, landmarks, &ones, d_id + 8, smoothness, rng)?;

    // Correction directions [exp, extra] must cancel both Gram blocks.
    let exp_lm = exp.select_rows(landmarks);
    let dirs = DMatrix::from_fn(points.len(), 2 * d_exp, |i, j| {
        if j < d_exp {
            exp[(i, j)]
        } else {
            extra[(i, j - d_exp)]
        }
    });
    let mut system = DMatrix::zeros(2 * d_exp, 2 * d_exp);
    system.rows_mut(0, d_exp).copy_from(&exp.tr_mul(&dirs));
    system.rows_mut(d_exp, d_exp).copy_from(&exp_lm.tr_mul(&dirs.select_rows(landmarks)));
    let sv = system.clone().singular_values();
    if sv.min() > 1e-9 * sv.max() {
        let lu = system.lu();
        for mut h in id.column_iter_mut() {
            let h_lm = DVector::from_iterator(landmarks.len(), landmarks.iter().map(|&i| h[i]));
            let mut rhs = DVector::zeros(2 * d_exp);
            rhs.rows_mut(0, d_exp).copy_from(&exp.tr_mul(&h));
            rhs.rows_mut(d_exp, d_exp).copy_from(&exp_lm.tr_mul(&h_lm));
            let coeffs = lu.solve(&rhs).expect("non-singular by the check above");
            h.gemv(-1.0, &dirs, &coeffs, 1.0);
        }
    } else {
        for mut h in id.column_iter_mut() {
            let coeffs = exp.tr_mul(&h);
            h.gemv(-1.0, &exp, &coeffs, 1.0);
        }
    }
    Ok((leading_span(id, d_id)?, exp))
}

/// Random basis columns whose three coordinate channels are combinations of
/// the given scalar fields.
fn columns_from_fields(fields: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = fields.nrows();
    let mut out = DMatrix::zeros(3 * n, k);
    for c in 0..k {
        for ch in 0..3 {
            let w = DVector::from_iterator(
                fields.ncols(),
                (0..fields.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let channel = fields * w;
            for i in 0..n {
                out[(3 * i + ch, c)] = channel[i];
            }
        }
    }
    out
}

/// Two passes of modified Gram-Schmidt over the columns, in order.
fn orthonormalize(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).clone_owned();
                m.column_mut(j).axpy(-proj, &ci, 1.0);
            }
            let norm = m.column(j).norm();
            m.column_mut(j).unscale_mut(norm);
        }
    }
}

/// Builds a deterministic synthetic morphable model.
///
/// Each coordinate channel of a basis column is a random combination of
/// smooth scalar fields. Expression fields are concentrated around the mouth
/// and eyes. Identity and expression columns draw from sets of fields that
/// are orthogonal both over all vertices and over the landmark vertices, so
/// the two bases stay orthogonal after any weak-perspective projection of
/// the landmarks. All fields are free of
/// affine components on the landmarks, so no basis deformation can be
/// absorbed by an affine camera.
pub fn generate_model(spec: &SyntheticModelSpec) -> Result<MorphableModel> {
    spec.validate()?;
    let n = spec.n_vertices;
    let points = mean_surface(n);
    let landmarks = landmark_layout(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (d_id, d_exp) = (FIELDS_PER_COLUMN * spec.k_id, FIELDS_PER_COLUMN * spec.k_exp);
    let (id_fields, exp_fields) =
        identity_and_expression_fields(&points, &landmarks, d_id, d_exp, spec.smoothness, &mut rng)?;
    let mut basis_id = columns_from_fields(&id_fields, spec.k_id, &mut rng);
    let mut basis_exp = columns_from_fields(&exp_fields, spec.k_exp, &mut rng);
    orthonormalize(&mut basis_id);
    orthonormalize(&mut basis_exp);

    let sigmas = |k: usize| (0..k).map(|i| MM_PER_UNIT * SIGMA_DECAY.powi(i as i32)).collect::<Vec<_>>();
    let points: Vec<Point3> = points.iter().map(|p| p * MM_PER_UNIT).collect();
    let nose_tip_index = (0..n)
        .max_by(|&a, &b| points[a].z.total_cmp(&points[b].z))
        .expect("n > 0");

    MorphableModel::new(
        Shape::from_points(&points)?,
        basis_id,
        basis_exp,
        sigmas(spec.k_id),
        sigmas(spec.k_exp),
        landmarks,
        nose_tip_index,
    )
}

/// Independent zero-mean Gaussian entries with the given standard deviations.
pub fn sample_gaussian(sigmas: &[f64], rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        sigmas.len(),
        sigmas.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)),
    )
}

pub fn sample_subject(model: &MorphableModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    sample_gaussian(&model.sigma_id, rng)
}

/// Draws expression coefficients and a pose. Rotation uses intrinsic Z-Y-X
/// Euler angles (yaw about z, pitch about y, roll about x).
pub fn sample_instance(
    model: &MorphableModel,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, PoseParams) {
    let alpha_exp = sample_gaussian(&model.sigma_exp, rng);
    let r = &spec.pose_ranges;
    let yaw = r.yaw.sample(rng);
    let pitch = r.pitch.sample(rng);
    let roll = r.roll.sample(rng);
    let scale = r.scale.sample(rng);
    let tx = r.tx.sample(rng);
    let ty = r.ty.sample(rng);
    let pose = PoseParams {
        scale,
        rotation: rotation_from_euler_zyx(yaw, pitch, roll),
        translation: Vector3::new(tx, ty, 0.0),
    };
    (alpha_exp, pose)
}

pub fn render_landmarks(
    model: &MorphableModel,
    coeffs: &CoeffPair,
    pose: &PoseParams,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LandmarkSet2D> {
    let shape = compose_shape(model, coeffs)?;
    let points = select_landmarks(&shape, &model.landmark_indices)?;
    let clean = project_landmarks(&points, pose);
    if noise_sigma == 0.0 {
        return Ok(clean);
    }
    LandmarkSet2D::new(
        clean
            .coords()
            .iter()
            .map(|v| v + noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Max-z splat of rotated points into a square raster. The bounding square of
/// the projected points maps onto the image; depth is normalized to
/// `[-1, 1]` over all points and empty pixels are `-1`.
pub fn rasterize_points(points: &[Point3], rotation: &Matrix3<f64>, translation: &Vector3<f64>, resolution: usize) -> DepthImage {
    let mut pixels = vec![-1.0; resolution * resolution];
    if points.is_empty() {
        return DepthImage { resolution, pixels };
    }
    let rotated: Vec<Point3> = points.iter().map(|p| rotation * (p + translation)).collect();
    let (mut lo, mut hi) = (Point3::from_element(f64::INFINITY), Point3::from_element(f64::NEG_INFINITY));
    for q in &rotated {
        lo = lo.inf(q);
        hi = hi.sup(q);
    }
    let side = (hi.x - lo.x).max(hi.y - lo.y);
    let cx = 0.5 * (lo.x + hi.x);
    let cy = 0.5 * (lo.y + hi.y);
    let depth_span = hi.z - lo.z;
    let res = resolution as f64;
    // Footprint radius in pixels: the mean spacing of points spread over an
    // ellipse inscribed in the bounding square.
    let radius = res * (PI / (4.0 * points.len() as f64)).sqrt() * SPLAT_GAIN;
    for q in &rotated {
        let value = if depth_span > 0.0 {
            2.0 * (q.z - lo.z) / depth_span - 1.0
        } else {
            1.0
        };
        if !(side > 0.0) {
            let px = &mut pixels[(resolution / 2) * resolution + resolution / 2];
            *px = px.max(value);
            continue;
        }
        // Continuous pixel coordinates; pixel (c, r) has its centre at (c + 0.5, r + 0.5).
        let u = ((q.x - cx) / side + 0.5) * res;
        let v = ((cy - q.y) / side + 0.5) * res;
        let clamp = |t: f64| (t.max(0.0) as usize).min(resolution - 1);
        let (c0, c1) = (clamp((u - radius - 0.5).ceil()), clamp((u + radius - 0.5).floor()));
        let (r0, r1) = (clamp((v - radius - 0.5).ceil()), clamp((v + radius - 0.5).floor()));
        let home = (clamp(u.floor()), clamp(v.floor()));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (du, dv) = (col as f64 + 0.5 - u, row as f64 + 0.5 - v);
                if du * du + dv * dv <= radius * radius || (col, row) == home {
                    let px = &mut pixels[row * resolution + col];
                    *px = px.max(value);
                }
            }
        }
    }
    DepthImage { resolution, pixels }
}

pub fn rasterize_depth(
    model: &MorphableModel,
    coeffs: &CoeffPair,
    pose: &PoseParams,
    resolution: usize,
) -> Result<DepthImage> {
    if resolution < 8 {
        return Err(invalid!("resolution must be >= 8, got {resolution}"));
    }
    let shape = compose_shape(model, coeffs)?;
    Ok(rasterize_points(
        &shape.points(),
        &pose.rotation,
        &pose.translation,
        resolution,
    ))
}

/// Renders `K x M` samples. Subject `k` draws from its own ChaCha stream, so
/// samples of one subject do not depend on how many other subjects exist.
/// The last [`DatasetSpec::n_test_subjects`] subjects form the test split;
/// the last [`DatasetSpec::n_validation_images`] images of each training
/// subject form the validation split.
pub fn build_dataset(model: &MorphableModel, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_train_subjects = spec.n_train_subjects();
    let n_val = spec.n_validation_images();
    let mut samples = Vec::with_capacity(spec.n_subjects * spec.images_per_subject);
    let mut splits = Vec::with_capacity(samples.capacity());
    for subject in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(subject as u64);
        let alpha_id = sample_subject(model, &mut rng);
        for image in 0..spec.images_per_subject {
            let (alpha_exp, pose) = sample_instance(model, spec, &mut rng);
            let coeffs = CoeffPair::new(alpha_id.clone(), alpha_exp)?;
            let landmarks =
                render_landmarks(model, &coeffs, &pose, spec.landmark_noise_sigma, &mut rng)?;
            let shape = compose_shape(model, &coeffs)?;
            let depth = rasterize_points(
                &shape.points(),
                &pose.rotation,
                &pose.translation,
                spec.image_resolution,
            );
            let split = if subject >= n_train_subjects {
                Split::Test
            } else if image >= spec.images_per_subject - n_val {
                Split::Validation
            } else {
                Split::Train
            };
            samples.push(RenderedSample {
                subject_label: subject,
                coeffs,
                pose,
                landmarks,
                depth,
                shape,
            });
            splits.push(split);
        }
    }
    Ok(Dataset {
        samples,
        splits,
        n_subjects: spec.n_subjects,
        n_train_subjects,
    })
}
