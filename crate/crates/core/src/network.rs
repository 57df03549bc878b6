//! Feedforward encoder with two bounded latent heads, linear shape decoders,
//! a softmax identity classifier, the joint loss, hand-written reverse-mode
//! gradients, an adaptive-moment optimizer and the three training phases.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{MorphableModel, Shape};
use crate::linalg::lstsq_multi;
use crate::synthetic::{sample_gaussian, Dataset, RenderedSample, Split};

/// Phase I targets are `alpha / (TARGET_SIGMA_SCALE * sigma)`.
pub const TARGET_SIGMA_SCALE: f64 = 3.0;
/// Phase I targets are clipped to `[-TARGET_CLIP, TARGET_CLIP]`.
pub const TARGET_CLIP: f64 = 0.99;
/// Gradients smaller than this multiple of `max(1, |loss|)` are compared in
/// absolute rather than relative terms by [`finite_diff_check`]. Central
/// differences carry a rounding error proportional to the loss, so the floor
/// scales with it.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn code(self) -> u64 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(invalid!(
                "layer bias has {} entries for {} outputs",
                bias.len(),
                weight.nrows()
            ));
        }
        Ok(Self { weight, bias, activation })
    }

    /// Glorot-uniform weights and zero bias.
    pub fn random(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-a..a));
        Self {
            weight,
            bias: DVector::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.outputs(), self.inputs()),
            bias: DVector::zeros(self.outputs()),
            activation: self.activation,
        }
    }

    /// Forward pass over a batch stored column-wise.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z.apply(|v| *v = self.activation.apply(*v));
        z
    }

    /// Given the layer input, its output and the loss gradient at the output,
    /// returns the parameter gradients and the gradient at the input.
    fn backward(&self, input: &DMatrix<f64>, output: &DMatrix<f64>, d_out: &DMatrix<f64>) -> (Layer, DMatrix<f64>) {
        let dz = d_out.zip_map(output, |g, y| g * self.activation.slope_at_output(y));
        let grad = Layer {
            weight: &dz * input.transpose(),
            bias: row_sums(&dz),
            activation: self.activation,
        };
        (grad, self.weight.tr_mul(&dz))
    }
}

/// Sums each row over the batch columns in column order.
fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

/// Latent code produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub c_id: DVector<f64>,
    pub c_res: DVector<f64>,
}

/// Sizes of a default network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub q_id: usize,
    pub q_res: usize,
    /// Number of shape coordinates (3 per vertex).
    pub output_dim: usize,
    pub n_classes: usize,
}

impl NetworkShape {
    pub fn desk(input_dim: usize, q_id: usize, q_res: usize, output_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![256, 256],
            q_id,
            q_res,
            output_dim,
            n_classes,
        }
    }
}

/// Multilayer encoder with a shared trunk and two parallel output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub hidden: Vec<Layer>,
    pub head_id: Layer,
    pub head_res: Layer,
}

struct EncoderCache {
    /// `acts[0]` is the input batch, `acts[i + 1]` the output of hidden layer `i`.
    acts: Vec<DMatrix<f64>>,
    c_id: DMatrix<f64>,
    c_res: DMatrix<f64>,
}

impl EncoderNet {
    /// Checks that layer widths chain. Heads with [`Activation::Tanh`] keep
    /// every code strictly inside (-1, 1).
    pub fn new(hidden: Vec<Layer>, head_id: Layer, head_res: Layer) -> Result<Self> {
        for (i, pair) in hidden.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::InvariantViolation {
                    field: format!("encoder.hidden{}", i + 1),
                    msg: format!("expects {} inputs, previous layer emits {}", pair[1].inputs(), pair[0].outputs()),
                });
            }
        }
        let trunk_out = hidden.last().map_or(head_id.inputs(), Layer::outputs);
        for (name, head) in [("encoder.head_id", &head_id), ("encoder.head_res", &head_res)] {
            if head.inputs() != trunk_out {
                return Err(Error::InvariantViolation {
                    field: name.into(),
                    msg: format!("expects {} inputs, trunk emits {trunk_out}", head.inputs()),
                });
            }
        }
        Ok(Self { hidden, head_id, head_res })
    }

    /// Tanh trunk and tanh heads with Glorot-uniform weights.
    pub fn random(shape: &NetworkShape, rng: &mut ChaCha8Rng) -> Self {
        let mut hidden = Vec::new();
        let mut width = shape.input_dim;
        for &h in &shape.hidden {
            hidden.push(Layer::random(width, h, Activation::Tanh, rng));
            width = h;
        }
        let head_id = Layer::random(width, shape.q_id, Activation::Tanh, rng);
        let head_res = Layer::random(width, shape.q_res, Activation::Tanh, rng);
        Self { hidden, head_id, head_res }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.head_id).inputs()
    }

    pub fn q_id(&self) -> usize {
        self.head_id.outputs()
    }

    pub fn q_res(&self) -> usize {
        self.head_res.outputs()
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(Layer::zeros_like).collect(),
            head_id: self.head_id.zeros_like(),
            head_res: self.head_res.zeros_like(),
        }
    }

    fn forward_batch(&self, x: DMatrix<f64>) -> Result<EncoderCache> {
        if x.nrows() != self.input_dim() {
            return Err(invalid!("image has {} pixels, encoder expects {}", x.nrows(), self.input_dim()));
        }
        let mut acts = vec![x];
        for layer in &self.hidden {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        let top = acts.last().expect("non-empty");
        let c_id = self.head_id.forward(top);
        let c_res = self.head_res.forward(top);
        if !(c_id.iter().chain(c_res.iter()).all(|v| v.is_finite())) {
            return Err(Error::NumericalFailure("non-finite encoder activation".into()));
        }
        Ok(EncoderCache { acts, c_id, c_res })
    }

    fn backward_batch(&self, cache: &EncoderCache, d_id: &DMatrix<f64>, d_res: &DMatrix<f64>) -> EncoderNet {
        let top = cache.acts.last().expect("non-empty");
        let (g_id, d_top_id) = self.head_id.backward(top, &cache.c_id, d_id);
        let (g_res, d_top_res) = self.head_res.backward(top, &cache.c_res, d_res);
        let mut d = d_top_id + d_top_res;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (i, layer) in self.hidden.iter().enumerate().rev() {
            let (g, d_in) = layer.backward(&cache.acts[i], &cache.acts[i + 1], &d);
            hidden.push(g);
            d = d_in;
        }
        hidden.reverse();
        EncoderNet {
            hidden,
            head_id: g_id,
            head_res: g_res,
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.hidden.iter().chain([&self.head_id, &self.head_res]) {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.hidden.iter_mut().chain([&mut self.head_id, &mut self.head_res]) {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let names = (0..self.hidden.len())
            .map(|i| format!("encoder.hidden{i}"))
            .chain(["encoder.head_id".to_string(), "encoder.head_res".to_string()]);
        for n in names {
            out.push(format!("{n}.weight"));
            out.push(format!("{n}.bias"));
        }
        out
    }
}

/// Stacks images as batch columns.
fn image_matrix(images: &[&[f64]]) -> DMatrix<f64> {
    let rows = images.first().map_or(0, |i| i.len());
    let mut m = DMatrix::zeros(rows, images.len());
    for (j, img) in images.iter().enumerate() {
        m.column_mut(j).copy_from_slice(img);
    }
    m
}

/// Encodes one depth image.
pub fn encoder_forward(net: &EncoderNet, image: &[f64]) -> Result<LatentCode> {
    if image.len() != net.input_dim() {
        return Err(invalid!("image has {} pixels, encoder expects {}", image.len(), net.input_dim()));
    }
    let cache = net.forward_batch(DMatrix::from_column_slice(image.len(), 1, image))?;
    Ok(LatentCode {
        c_id: cache.c_id.column(0).into_owned(),
        c_res: cache.c_res.column(0).into_owned(),
    })
}

/// Linear decoders mapping each latent code to a shape component.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub weight_id: DMatrix<f64>,
    pub bias_id: DVector<f64>,
    pub weight_res: DMatrix<f64>,
    pub bias_res: DVector<f64>,
}

impl DecoderNet {
    pub fn new(
        weight_id: DMatrix<f64>,
        bias_id: DVector<f64>,
        weight_res: DMatrix<f64>,
        bias_res: DVector<f64>,
    ) -> Result<Self> {
        let rows = weight_id.nrows();
        let checks = [
            ("decoder.bias_id", bias_id.len()),
            ("decoder.weight_res", weight_res.nrows()),
            ("decoder.bias_res", bias_res.len()),
        ];
        for (field, len) in checks {
            if len != rows {
                return Err(Error::InvariantViolation {
                    field: field.into(),
                    msg: format!("has {len} rows, decoder output is {rows}"),
                });
            }
        }
        if !rows.is_multiple_of(3) {
            return Err(Error::InvariantViolation {
                field: "decoder.weight_id".into(),
                msg: format!("output size {rows} is not a multiple of 3"),
            });
        }
        Ok(Self {
            weight_id,
            bias_id,
            weight_res,
            bias_res,
        })
    }

    pub fn zeros(output_dim: usize, q_id: usize, q_res: usize) -> Self {
        Self {
            weight_id: DMatrix::zeros(output_dim, q_id),
            bias_id: DVector::zeros(output_dim),
            weight_res: DMatrix::zeros(output_dim, q_res),
            bias_res: DVector::zeros(output_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight_id.nrows()
    }

    pub fn q_id(&self) -> usize {
        self.weight_id.ncols()
    }

    pub fn q_res(&self) -> usize {
        self.weight_res.ncols()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.output_dim(), self.q_id(), self.q_res())
    }
}

/// Returns `(delta_id, delta_res)` for one latent code.
pub fn decoder_forward(dec: &DecoderNet, code: &LatentCode) -> Result<(DVector<f64>, DVector<f64>)> {
    if code.c_id.len() != dec.q_id() || code.c_res.len() != dec.q_res() {
        return Err(invalid!(
            "code widths ({}, {}) do not match decoder ({}, {})",
            code.c_id.len(),
            code.c_res.len(),
            dec.q_id(),
            dec.q_res()
        ));
    }
    Ok((
        &dec.weight_id * &code.c_id + &dec.bias_id,
        &dec.weight_res * &code.c_res + &dec.bias_res,
    ))
}

/// Linear softmax classifier over the identity code.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl ClassifierHead {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weight.nrows() || weight.nrows() == 0 {
            return Err(Error::InvariantViolation {
                field: "head.bias".into(),
                msg: format!("{} entries for {} classes", bias.len(), weight.nrows()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn random(q_id: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let l = Layer::random(q_id, n_classes, Activation::Identity, rng);
        Self {
            weight: l.weight,
            bias: l.bias,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, c_id: &DVector<f64>) -> DVector<f64> {
        &self.weight * c_id + &self.bias
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

/// Softmax probabilities and the cross-entropy at `label`.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    (probs, sum.ln() - (logits[label] - max))
}

/// Mean squared error over all coordinates.
pub fn reconstruction_loss(predicted: &Shape, target: &Shape) -> Result<f64> {
    let (p, t) = (predicted.coords(), target.coords());
    if p.len() != t.len() {
        return Err(invalid!("shapes have {} and {} coordinates", p.len(), t.len()));
    }
    Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Softmax cross-entropy of the head's logits at the true label.
pub fn identification_loss(head: &ClassifierHead, c_id: &DVector<f64>, label: usize) -> Result<f64> {
    if label >= head.n_classes() {
        return Err(invalid!("label {label} outside 0..{}", head.n_classes()));
    }
    if c_id.len() != head.weight.ncols() {
        return Err(invalid!("identity code has {} entries, head expects {}", c_id.len(), head.weight.ncols()));
    }
    Ok(softmax_cross_entropy(head.logits(c_id).as_slice(), label).1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub ident: f64,
    pub accuracy: f64,
}

/// Combines the two loss terms; `accuracy` is left at zero.
pub fn joint_loss(recon: f64, ident: f64, lambda_r: f64) -> LossReport {
    LossReport {
        total: lambda_r * recon + ident,
        recon,
        ident,
        accuracy: 0.0,
    }
}

/// Encoder, decoders and classifier trained together. The same type holds
/// gradients, with every tensor in the matching position.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceNet {
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub head: ClassifierHead,
}

impl FaceNet {
    pub fn new(encoder: EncoderNet, decoder: DecoderNet, head: ClassifierHead) -> Result<Self> {
        if decoder.q_id() != encoder.q_id() || decoder.q_res() != encoder.q_res() {
            return Err(Error::InvariantViolation {
                field: "decoder".into(),
                msg: format!(
                    "widths ({}, {}) differ from encoder heads ({}, {})",
                    decoder.q_id(),
                    decoder.q_res(),
                    encoder.q_id(),
                    encoder.q_res()
                ),
            });
        }
        if head.weight.ncols() != encoder.q_id() {
            return Err(Error::InvariantViolation {
                field: "head.weight".into(),
                msg: format!("expects {} inputs, identity code has {}", head.weight.ncols(), encoder.q_id()),
            });
        }
        Ok(Self { encoder, decoder, head })
    }

    /// Random encoder and head, zero decoder.
    pub fn random(shape: &NetworkShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderNet::random(shape, &mut rng);
        let head = ClassifierHead::random(shape.q_id, shape.n_classes, &mut rng);
        Self {
            encoder,
            decoder: DecoderNet::zeros(shape.output_dim, shape.q_id, shape.q_res),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        let d = &self.decoder;
        out.extend([
            d.weight_id.as_slice(),
            d.bias_id.as_slice(),
            d.weight_res.as_slice(),
            d.bias_res.as_slice(),
            self.head.weight.as_slice(),
            self.head.bias.as_slice(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        let d = &mut self.decoder;
        out.extend([
            d.weight_id.as_mut_slice(),
            d.bias_id.as_mut_slice(),
            d.weight_res.as_mut_slice(),
            d.bias_res.as_mut_slice(),
            self.head.weight.as_mut_slice(),
            self.head.bias.as_mut_slice(),
        ]);
        out
    }

    /// Names matching [`FaceNet::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = self.encoder.tensor_names();
        for n in [
            "decoder.weight_id",
            "decoder.bias_id",
            "decoder.weight_res",
            "decoder.bias_res",
            "head.weight",
            "head.bias",
        ] {
            out.push(n.to_string());
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// A training batch: images, shape offsets from the mean, and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: DMatrix<f64>,
    /// Target shape minus the model mean, one column per sample.
    pub targets: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: DMatrix<f64>, targets: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.ncols() == 0 {
            return Err(invalid!("empty batch"));
        }
        if targets.ncols() != images.ncols() || labels.len() != images.ncols() {
            return Err(invalid!(
                "batch has {} images, {} targets, {} labels",
                images.ncols(),
                targets.ncols(),
                labels.len()
            ));
        }
        Ok(Self { images, targets, labels })
    }

    pub fn from_samples(samples: &[&RenderedSample], mean: &Shape) -> Result<Self> {
        let images: Vec<&[f64]> = samples.iter().map(|s| s.depth.pixels.as_slice()).collect();
        let m = mean.coords();
        let mut targets = DMatrix::zeros(m.len(), samples.len());
        for (j, s) in samples.iter().enumerate() {
            let c = s.shape.coords();
            if c.len() != m.len() {
                return Err(invalid!("sample shape has {} coordinates, mean has {}", c.len(), m.len()));
            }
            for (i, (a, b)) in c.iter().zip(m).enumerate() {
                targets[(i, j)] = a - b;
            }
        }
        let labels = samples.iter().map(|s| s.subject_label).collect();
        Self::new(image_matrix(&images), targets, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            images: self.images.select_columns(idx),
            targets: self.targets.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

struct JointForward {
    enc: EncoderCache,
    residual: DMatrix<f64>,
    probs: Vec<Vec<f64>>,
    report: LossReport,
}

fn joint_forward(net: &FaceNet, batch: &Batch, lambda_r: f64) -> Result<JointForward> {
    if batch.targets.nrows() != net.decoder.output_dim() {
        return Err(invalid!(
            "targets have {} coordinates, decoder emits {}",
            batch.targets.nrows(),
            net.decoder.output_dim()
        ));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= net.head.n_classes()) {
        return Err(invalid!("label {bad} outside 0..{}", net.head.n_classes()));
    }
    let enc = net.encoder.forward_batch(batch.images.clone())?;
    let d = &net.decoder;
    let mut residual = &d.weight_id * &enc.c_id + &d.weight_res * &enc.c_res - &batch.targets;
    for mut col in residual.column_iter_mut() {
        col += &d.bias_id;
        col += &d.bias_res;
    }
    let b = batch.len() as f64;
    let coords = residual.nrows() as f64;
    let recon = residual.iter().map(|r| r * r).sum::<f64>() / (coords * b);

    let logits = &net.head.weight * &enc.c_id;
    let mut ident = 0.0;
    let mut correct = 0usize;
    let mut probs = Vec::with_capacity(batch.len());
    for (j, &label) in batch.labels.iter().enumerate() {
        let l: Vec<f64> = logits.column(j).iter().zip(net.head.bias.iter()).map(|(a, b)| a + b).collect();
        let (p, loss) = softmax_cross_entropy(&l, label);
        let top = (0..l.len()).max_by(|&a, &c| l[a].total_cmp(&l[c])).expect("classes > 0");
        correct += usize::from(top == label);
        ident += loss;
        probs.push(p);
    }
    ident /= b;
    if !(recon.is_finite() && ident.is_finite()) {
        return Err(Error::NumericalFailure("non-finite loss".into()));
    }
    let mut report = joint_loss(recon, ident, lambda_r);
    report.accuracy = correct as f64 / b;
    Ok(JointForward {
        enc,
        residual,
        probs,
        report,
    })
}

/// Batch-mean joint loss without gradients.
pub fn batch_loss(net: &FaceNet, batch: &Batch, lambda_r: f64) -> Result<LossReport> {
    Ok(joint_forward(net, batch, lambda_r)?.report)
}

/// Exact gradients of the batch-mean joint loss with respect to every
/// parameter, together with the loss itself.
pub fn backward(net: &FaceNet, batch: &Batch, lambda_r: f64) -> Result<(FaceNet, LossReport)> {
    let fwd = joint_forward(net, batch, lambda_r)?;
    let b = batch.len() as f64;
    let coords = fwd.residual.nrows() as f64;
    let d_pred = &fwd.residual * (2.0 * lambda_r / (coords * b));

    let mut d_logits = DMatrix::zeros(net.head.n_classes(), batch.len());
    for (j, (p, &label)) in fwd.probs.iter().zip(&batch.labels).enumerate() {
        for (k, pk) in p.iter().enumerate() {
            d_logits[(k, j)] = (pk - f64::from(u8::from(k == label))) / b;
        }
    }

    let decoder = DecoderNet {
        weight_id: &d_pred * fwd.enc.c_id.transpose(),
        bias_id: row_sums(&d_pred),
        weight_res: &d_pred * fwd.enc.c_res.transpose(),
        bias_res: row_sums(&d_pred),
    };
    let head = ClassifierHead {
        weight: &d_logits * fwd.enc.c_id.transpose(),
        bias: row_sums(&d_logits),
    };
    let d_id = net.decoder.weight_id.tr_mul(&d_pred) + net.head.weight.tr_mul(&d_logits);
    let d_res = net.decoder.weight_res.tr_mul(&d_pred);
    let encoder = net.encoder.backward_batch(&fwd.enc, &d_id, &d_res);
    Ok((FaceNet { encoder, decoder, head }, fwd.report))
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected adaptive-moment update; `step` counts from 1.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, config: &TrainConfig, step: u64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert!(step >= 1, "optimizer steps count from 1");
    let c1 = 1.0 - config.beta1.powf(step as f64);
    let c2 = 1.0 - config.beta2.powf(step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        *p -= config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
    }
}

/// Adam state for a list of tensors.
struct Optimizer {
    moments: Vec<AdamMoments>,
    step: u64,
}

impl Optimizer {
    fn new(tensors: &[&[f64]]) -> Self {
        Self {
            moments: tensors.iter().map(|t| AdamMoments::zeros(t.len())).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, config: &TrainConfig) {
        self.step += 1;
        for ((p, g), m) in params.into_iter().zip(grads).zip(&mut self.moments) {
            optimizer_step(p, g, m, config, self.step);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    I,
    II,
    III,
}

/// Default Phase III learning rate.
pub const PHASE3_LEARNING_RATE: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Phase III stages as `(lambda_r, epochs)`.
    pub schedule: Vec<(f64, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 200,
            seed: 7,
            phase: Phase::I,
            schedule: vec![(0.5, 10), (1.0, 20)],
        }
    }
}

impl TrainConfig {
    /// Encoder pre-training settings.
    pub fn phase1() -> Self {
        Self::default()
    }

    /// Joint fine-tuning settings, with a smaller step than pre-training.
    pub fn phase3() -> Self {
        Self {
            learning_rate: PHASE3_LEARNING_RATE,
            phase: Phase::III,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0) || self.schedule.iter().any(|(l, _)| !(*l >= 0.0)) {
            return Err(Error::Config("lambda_r must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("beta1, beta2 must lie in [0, 1) and epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Lambda for every Phase III epoch.
    pub fn lambda_per_epoch(&self) -> Vec<f64> {
        self.schedule
            .iter()
            .flat_map(|&(l, e)| std::iter::repeat_n(l, e))
            .collect()
    }
}

/// Shuffled mini-batch index lists for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Phase I regression targets for a list of samples, one column each.
pub fn phase1_targets(model: &MorphableModel, samples: &[&RenderedSample]) -> (DMatrix<f64>, DMatrix<f64>) {
    let scaled = |a: &DVector<f64>, sigma: &[f64]| {
        DVector::from_iterator(
            a.len(),
            a.iter()
                .zip(sigma)
                .map(|(v, s)| (v / (TARGET_SIGMA_SCALE * s)).clamp(-TARGET_CLIP, TARGET_CLIP)),
        )
    };
    let mut t_id = DMatrix::zeros(model.k_id(), samples.len());
    let mut t_res = DMatrix::zeros(model.k_exp(), samples.len());
    for (j, s) in samples.iter().enumerate() {
        t_id.set_column(j, &scaled(&s.coeffs.alpha_id, &model.sigma_id));
        t_res.set_column(j, &scaled(&s.coeffs.alpha_exp, &model.sigma_exp));
    }
    (t_id, t_res)
}

/// Mean squared error of both heads against their targets, averaged over
/// every code coordinate in the batch.
fn phase1_loss(enc: &EncoderCache, t_id: &DMatrix<f64>, t_res: &DMatrix<f64>) -> f64 {
    let count = (t_id.len() + t_res.len()) as f64;
    ((&enc.c_id - t_id).norm_squared() + (&enc.c_res - t_res).norm_squared()) / count
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseOneEpoch {
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Regresses the encoder heads onto rescaled ground-truth coefficients.
pub fn train_phase1(
    encoder: &EncoderNet,
    model: &MorphableModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(EncoderNet, Vec<PhaseOneEpoch>)> {
    config.validate()?;
    if encoder.q_id() != model.k_id() || encoder.q_res() != model.k_exp() {
        return Err(invalid!(
            "latent widths ({}, {}) must equal basis widths ({}, {})",
            encoder.q_id(),
            encoder.q_res(),
            model.k_id(),
            model.k_exp()
        ));
    }
    let train = dataset.subset(Split::Train);
    let val = dataset.subset(Split::Validation);
    let images = |s: &[&RenderedSample]| image_matrix(&s.iter().map(|x| x.depth.pixels.as_slice()).collect::<Vec<_>>());
    let (x_train, (t_id, t_res)) = (images(&train), phase1_targets(model, &train));
    let (x_val, (v_id, v_res)) = (images(&val), phase1_targets(model, &val));
    let eval = |enc: &EncoderNet, x: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>| -> Result<f64> {
        if x.ncols() == 0 {
            return Ok(0.0);
        }
        Ok(phase1_loss(&enc.forward_batch(x.clone())?, a, b))
    };

    let mut enc = encoder.clone();
    let mut opt = Optimizer::new(&enc.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            let (x, a, b) = (x_train.select_columns(&idx), t_id.select_columns(&idx), t_res.select_columns(&idx));
            let cache = enc.forward_batch(x)?;
            let scale = 2.0 / (a.len() + b.len()) as f64;
            let d_id = (&cache.c_id - &a) * scale;
            let d_res = (&cache.c_res - &b) * scale;
            let grads = enc.backward_batch(&cache, &d_id, &d_res);
            opt.apply(enc.tensors_mut(), grads.tensors(), config);
        }
        trace.push(PhaseOneEpoch {
            train_loss: eval(&enc, &x_train, &t_id, &t_res)?,
            validation_loss: eval(&enc, &x_val, &v_id, &v_res)?,
        });
    }
    Ok((enc, trace))
}

/// Code/component pairs for fitting the decoders, one column per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderPairs {
    pub codes_id: DMatrix<f64>,
    pub components_id: DMatrix<f64>,
    pub codes_res: DMatrix<f64>,
    pub components_res: DMatrix<f64>,
}

/// Unclipped rescaled code and shape component for coefficients `alpha`.
fn code_and_component(basis: &DMatrix<f64>, sigma: &[f64], alpha: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let code = DVector::from_iterator(
        alpha.len(),
        alpha.iter().zip(sigma).map(|(a, s)| a / (TARGET_SIGMA_SCALE * s)),
    );
    (code, basis * alpha)
}

/// Pairs from the training split plus `extra` coefficient draws from the
/// model priors, so the identity decoder is determined even when the
/// training split has fewer subjects than identity dimensions.
pub fn decoder_pairs(model: &MorphableModel, dataset: &Dataset, extra: usize, seed: u64) -> DecoderPairs {
    let mut id = Vec::new();
    let mut res = Vec::new();
    let mut seen_subjects = Vec::new();
    for s in dataset.subset(Split::Train) {
        if !seen_subjects.contains(&s.subject_label) {
            seen_subjects.push(s.subject_label);
            id.push(s.coeffs.alpha_id.clone());
        }
        res.push(s.coeffs.alpha_exp.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra {
        id.push(sample_gaussian(&model.sigma_id, &mut rng));
        res.push(sample_gaussian(&model.sigma_exp, &mut rng));
    }
    let stack = |alphas: &[DVector<f64>], basis: &DMatrix<f64>, sigma: &[f64]| {
        let mut codes = DMatrix::zeros(basis.ncols(), alphas.len());
        let mut comps = DMatrix::zeros(basis.nrows(), alphas.len());
        for (j, a) in alphas.iter().enumerate() {
            let (c, s) = code_and_component(basis, sigma, a);
            codes.set_column(j, &c);
            comps.set_column(j, &s);
        }
        (codes, comps)
    };
    let (codes_id, components_id) = stack(&id, &model.basis_id, &model.sigma_id);
    let (codes_res, components_res) = stack(&res, &model.basis_exp, &model.sigma_exp);
    DecoderPairs {
        codes_id,
        components_id,
        codes_res,
        components_res,
    }
}

/// Affine least squares `component ~ W code + b`.
fn fit_affine(codes: &DMatrix<f64>, comps: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (q, n) = codes.shape();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j < q { codes[(j, i)] } else { 1.0 });
    let w = lstsq_multi(&design, &comps.transpose())?;
    let weight = w.rows(0, q).transpose();
    let bias = w.row(q).transpose();
    Ok((weight, bias))
}

/// Fits both linear decoders in closed form.
pub fn train_phase2(decoder: &DecoderNet, pairs: &DecoderPairs) -> Result<DecoderNet> {
    let dims = [
        (pairs.codes_id.nrows(), decoder.q_id()),
        (pairs.codes_res.nrows(), decoder.q_res()),
        (pairs.components_id.nrows(), decoder.output_dim()),
        (pairs.components_res.nrows(), decoder.output_dim()),
    ];
    if dims.iter().any(|(a, b)| a != b) {
        return Err(invalid!("decoder pairs do not match decoder dimensions"));
    }
    let (weight_id, bias_id) = fit_affine(&pairs.codes_id, &pairs.components_id)?;
    let (weight_res, bias_res) = fit_affine(&pairs.codes_res, &pairs.components_res)?;
    DecoderNet::new(weight_id, bias_id, weight_res, bias_res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lambda_r: f64,
    pub train: LossReport,
    pub validation: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseThreeOutcome {
    /// The final network, or the last finite one if training aborted.
    pub net: FaceNet,
    pub trace: Vec<EpochReport>,
    pub aborted: Option<String>,
}

/// End-to-end training with the staged reconstruction weight.
pub fn train_phase3(net: &FaceNet, dataset: &Dataset, mean: &Shape, config: &TrainConfig) -> Result<PhaseThreeOutcome> {
    config.validate()?;
    let train = Batch::from_samples(&dataset.subset(Split::Train), mean)?;
    let val_samples = dataset.subset(Split::Validation);
    let val = if val_samples.is_empty() {
        None
    } else {
        Some(Batch::from_samples(&val_samples, mean)?)
    };

    let mut current = net.clone();
    let mut opt = Optimizer::new(&current.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    for (epoch, lambda_r) in config.lambda_per_epoch().into_iter().enumerate() {
        let last_good = current.clone();
        let step = (|| -> Result<EpochReport> {
            for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
                let (grads, _) = backward(&current, &train.select(&idx), lambda_r)?;
                opt.apply(current.tensors_mut(), grads.tensors(), config);
            }
            let train_report = batch_loss(&current, &train, lambda_r)?;
            let validation = match &val {
                Some(v) => batch_loss(&current, v, lambda_r)?,
                None => joint_loss(0.0, 0.0, lambda_r),
            };
            Ok(EpochReport {
                epoch,
                lambda_r,
                train: train_report,
                validation,
            })
        })();
        match step {
            Ok(report) => trace.push(report),
            Err(Error::NumericalFailure(msg)) => {
                return Ok(PhaseThreeOutcome {
                    net: last_good,
                    trace,
                    aborted: Some(format!("epoch {epoch}: {msg}")),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PhaseThreeOutcome {
        net: current,
        trace,
        aborted: None,
    })
}

/// Result of running the three training phases in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub phase1_trace: Vec<PhaseOneEpoch>,
    /// Pre-trained encoder with the closed-form decoder.
    pub phase2: FaceNet,
    pub phase3: PhaseThreeOutcome,
}

/// Phase I encoder regression, Phase II closed-form decoder with
/// `decoder_extra_draws` prior samples, then Phase III joint training, all
/// starting from a random network drawn from `seed`.
pub fn train_all_phases(
    model: &MorphableModel,
    dataset: &Dataset,
    shape: &NetworkShape,
    phase1: &TrainConfig,
    decoder_extra_draws: usize,
    phase3: &TrainConfig,
    seed: u64,
) -> Result<TrainingRun> {
    let mut net = FaceNet::random(shape, seed);
    let (encoder, phase1_trace) = train_phase1(&net.encoder, model, dataset, phase1)?;
    net.encoder = encoder;
    net.decoder = train_phase2(&net.decoder, &decoder_pairs(model, dataset, decoder_extra_draws, seed))?;
    let outcome = train_phase3(&net, dataset, &model.mean, phase3)?;
    Ok(TrainingRun {
        phase1_trace,
        phase2: net,
        phase3: outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
}

/// Compares [`backward`] against central differences on `n_params`
/// coordinates drawn round-robin across tensors. The relative error of each
/// coordinate is `|g - fd| / max(|g|, |fd|, GRAD_CHECK_FLOOR * max(1, |L|))`
/// where `L` is the batch loss.
pub fn finite_diff_check(
    net: &FaceNet,
    batch: &Batch,
    lambda_r: f64,
    step: f64,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let (grads, loss) = backward(net, batch, lambda_r)?;
    let floor = GRAD_CHECK_FLOOR * loss.total.abs().max(1.0);
    let grad_tensors = grads.tensors();
    let sizes: Vec<usize> = grad_tensors.iter().map(|t| t.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = (0..n_params)
        .map(|i| {
            let t = i % sizes.len();
            (t, rng.random_range(0..sizes[t]))
        })
        .collect();

    let mut probe = net.clone();
    let mut max_rel: f64 = 0.0;
    for &(t, i) in &coords {
        let original = probe.tensors()[t][i];
        probe.tensors_mut()[t][i] = original + step;
        let plus = batch_loss(&probe, batch, lambda_r)?.total;
        probe.tensors_mut()[t][i] = original - step;
        let minus = batch_loss(&probe, batch, lambda_r)?.total;
        probe.tensors_mut()[t][i] = original;
        let fd = (plus - minus) / (2.0 * step);
        let g = grad_tensors[t][i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        n_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> NetworkShape {
        NetworkShape {
            input_dim: 6,
            hidden: vec![5, 4],
            q_id: 3,
            q_res: 2,
            output_dim: 12,
            n_classes: 4,
        }
    }

    fn tiny_batch(shape: &NetworkShape, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = DMatrix::from_fn(shape.input_dim, n, |_, _| rng.random_range(-1.0..1.0));
        let targets = DMatrix::from_fn(shape.output_dim, n, |_, _| rng.random_range(-0.5..0.5));
        let labels = (0..n).map(|j| j % shape.n_classes).collect();
        Batch::new(images, targets, labels).unwrap()
    }

    fn tiny_net(seed: u64) -> FaceNet {
        let shape = tiny_shape();
        let mut net = FaceNet::random(&shape, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        net
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let mut enc = EncoderNet::random(&tiny_shape(), &mut ChaCha8Rng::seed_from_u64(0));
        for t in enc.tensors_mut() {
            t.fill(0.0);
        }
        let code = encoder_forward(&enc, &[0.3; 6]).unwrap();
        assert!(code.c_id.iter().chain(code.c_res.iter()).all(|&v| v == 0.0));
        assert!(matches!(encoder_forward(&enc, &[0.0; 5]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encoder_matches_naive_loop() {
        let net = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = encoder_forward(&net.encoder, &image).unwrap();

        let dense = |l: &Layer, x: &[f64]| -> Vec<f64> {
            (0..l.outputs())
                .map(|r| {
                    let mut s = l.bias[r];
                    for (c, xv) in x.iter().enumerate() {
                        s += l.weight[(r, c)] * xv;
                    }
                    s.tanh()
                })
                .collect()
        };
        let mut h = image.clone();
        for l in &net.encoder.hidden {
            h = dense(l, &h);
        }
        let want_id = dense(&net.encoder.head_id, &h);
        let want_res = dense(&net.encoder.head_res, &h);
        for (a, b) in got.c_id.iter().zip(&want_id).chain(got.c_res.iter().zip(&want_res)) {
            assert!((a - b).abs() < 1e-12);
            assert!(a.abs() < 1.0);
        }
    }

    #[test]
    fn saturated_outputs_stay_inside_bounds() {
        let mut enc = EncoderNet::random(&tiny_shape(), &mut ChaCha8Rng::seed_from_u64(1));
        enc.head_id.bias.fill(5.0);
        enc.head_res.bias.fill(-5.0);
        let code = encoder_forward(&enc, &[1.0; 6]).unwrap();
        assert!(code.c_id.iter().chain(code.c_res.iter()).all(|v| v.abs() < 1.0));
    }

    #[test]
    fn decoder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = DecoderNet::new(
            DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0)),
            DVector::zeros(6),
        )
        .unwrap();
        let unit = LatentCode {
            c_id: DVector::from_vec(vec![0.0, 1.0, 0.0]),
            c_res: DVector::zeros(2),
        };
        let (d_id, d_res) = decoder_forward(&dec, &unit).unwrap();
        assert_eq!(d_id, dec.weight_id.column(1) + &dec.bias_id);
        assert_eq!(d_res, DVector::zeros(6));

        let code = LatentCode {
            c_id: DVector::from_vec(vec![0.2, -0.4, 0.9]),
            c_res: DVector::from_vec(vec![0.5, -0.1]),
        };
        let (d_id, d_res) = decoder_forward(&dec, &code).unwrap();
        for r in 0..6 {
            let want_id: f64 = dec.bias_id[r] + (0..3).map(|c| dec.weight_id[(r, c)] * code.c_id[c]).sum::<f64>();
            let want_res: f64 = (0..2).map(|c| dec.weight_res[(r, c)] * code.c_res[c]).sum();
            assert!((d_id[r] - want_id).abs() < 1e-12);
            assert!((d_res[r] - want_res).abs() < 1e-12);
        }

        let zero = DecoderNet::zeros(6, 3, 2);
        let (a, b) = decoder_forward(&zero, &code).unwrap();
        assert_eq!(a.amax() + b.amax(), 0.0);
        assert!(DecoderNet::new(DMatrix::zeros(6, 3), DVector::zeros(5), DMatrix::zeros(6, 2), DVector::zeros(6)).is_err());
    }

    #[test]
    fn decoder_is_affine_in_the_code() {
        let net = tiny_net(5);
        let dec = &net.decoder;
        let mut dec = dec.clone();
        dec.weight_id.fill(0.3);
        dec.bias_id.fill(-0.2);
        let c1 = LatentCode {
            c_id: DVector::from_vec(vec![0.1, 0.2, 0.3]),
            c_res: DVector::from_vec(vec![0.4, 0.5]),
        };
        let c2 = LatentCode {
            c_id: DVector::from_vec(vec![-0.7, 0.0, 0.6]),
            c_res: DVector::from_vec(vec![0.1, -0.9]),
        };
        let (a, b) = (0.3, -1.4);
        let mix = LatentCode {
            c_id: &c1.c_id * a + &c2.c_id * b,
            c_res: &c1.c_res * a + &c2.c_res * b,
        };
        let (m_id, _) = decoder_forward(&dec, &mix).unwrap();
        let (y1, _) = decoder_forward(&dec, &c1).unwrap();
        let (y2, _) = decoder_forward(&dec, &c2).unwrap();
        let want = y1 * a + y2 * b + &dec.bias_id * (1.0 - a - b);
        assert!((m_id - want).amax() < 1e-10);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let a = Shape::new((0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let b = Shape::new(a.coords().iter().map(|v| v + 1.0).collect()).unwrap();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert!((reconstruction_loss(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = Shape::new((0..12).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        let mut sum = 0.0;
        for i in 0..12 {
            sum += (a.coords()[i] - c.coords()[i]).powi(2);
        }
        assert!((reconstruction_loss(&a, &c).unwrap() - sum / 12.0).abs() < 1e-12);
        let short = Shape::new(vec![0.0; 15]).unwrap();
        assert!(reconstruction_loss(&a, &short).is_err());
    }

    #[test]
    fn identification_loss_examples() {
        let k = 5;
        let head = ClassifierHead::new(DMatrix::zeros(k, 2), DVector::zeros(k)).unwrap();
        let c = DVector::from_vec(vec![0.3, -0.2]);
        assert!((identification_loss(&head, &c, 2).unwrap() - (k as f64).ln()).abs() < 1e-12);
        assert!(identification_loss(&head, &c, k).is_err());

        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let mut bias = DVector::zeros(k);
            bias[1] = step as f64;
            let h = ClassifierHead::new(DMatrix::zeros(k, 2), bias).unwrap();
            let loss = identification_loss(&h, &c, 1).unwrap();
            assert!(loss < prev);
            prev = loss;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = ClassifierHead::random(2, k, &mut rng);
        let logits = h.logits(&c);
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        let want = -(logits[3].exp() / denom).ln();
        assert!((identification_loss(&h, &c, 3).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(3.0, 1.5, 0.0).total, 1.5);
        assert_eq!(joint_loss(2.0, 1.0, 0.5).total, 2.0);
        assert_eq!(joint_loss(2.0, 1.0, 1.0).total, 3.0);
    }

    #[test]
    fn batch_loss_matches_per_sample_losses() {
        let net = tiny_net(7);
        let batch = tiny_batch(&tiny_shape(), 5, 1);
        let report = batch_loss(&net, &batch, 0.7).unwrap();
        let mut recon = 0.0;
        let mut ident = 0.0;
        for j in 0..5 {
            let code = encoder_forward(&net.encoder, batch.images.column(j).as_slice()).unwrap();
            let (a, b) = decoder_forward(&net.decoder, &code).unwrap();
            let pred = Shape::new((a + b).iter().copied().collect()).unwrap();
            let target = Shape::new(batch.targets.column(j).iter().copied().collect()).unwrap();
            recon += reconstruction_loss(&pred, &target).unwrap();
            ident += identification_loss(&net.head, &code.c_id, batch.labels[j]).unwrap();
        }
        assert!((report.recon - recon / 5.0).abs() < 1e-12);
        assert!((report.ident - ident / 5.0).abs() < 1e-12);
        assert!((report.total - (0.7 * report.recon + report.ident)).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = tiny_shape();
        let net = tiny_net(11);
        let batch = tiny_batch(&shape, 6, 2);
        let report = finite_diff_check(&net, &batch, 0.8, 1e-6, 300, 0).unwrap();
        assert_eq!(report.n_checked, 300);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        assert_eq!(report, finite_diff_check(&net, &batch, 0.8, 1e-6, 300, 0).unwrap());
    }

    #[test]
    fn linear_network_gradients_are_exact() {
        let shape = NetworkShape { n_classes: 1, ..tiny_shape() };
        let mut net = FaceNet::random(&shape, 1);
        for l in net.encoder.hidden.iter_mut() {
            l.activation = Activation::Identity;
        }
        net.encoder.head_id.activation = Activation::Identity;
        net.encoder.head_res.activation = Activation::Identity;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in net.decoder.weight_id.iter_mut().chain(net.decoder.weight_res.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let batch = tiny_batch(&shape, 4, 3);
        let labels = vec![0; 4];
        let batch = Batch::new(batch.images, batch.targets, labels).unwrap();
        let report = finite_diff_check(&net, &batch, 1.0, 1e-3, 300, 1).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn zero_lambda_gives_zero_decoder_gradient() {
        let net = tiny_net(12);
        let batch = tiny_batch(&tiny_shape(), 5, 4);
        let (g, _) = backward(&net, &batch, 0.0).unwrap();
        assert_eq!(g.decoder, net.decoder.zeros_like());

        let config = TrainConfig::default();
        let mut trained = net.clone();
        let mut opt = Optimizer::new(&trained.tensors());
        for _ in 0..5 {
            let (g, _) = backward(&trained, &batch, 0.0).unwrap();
            opt.apply(trained.tensors_mut(), g.tensors(), &config);
        }
        assert_eq!(trained.decoder, net.decoder);
        assert_ne!(trained.encoder, net.encoder);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let net = tiny_net(13);
        let batch = tiny_batch(&tiny_shape(), 3, 5);
        let idx = [0, 1, 2, 0, 1, 2];
        let doubled = batch.select(&idx);
        let (g1, _) = backward(&net, &batch, 0.6).unwrap();
        let (g2, _) = backward(&net, &doubled, 0.6).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimizer_examples() {
        let config = TrainConfig::default();
        let mut p = vec![0.5, -0.25];
        let mut m = AdamMoments::zeros(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut m, &config, 1);
        assert_eq!(p, vec![0.5, -0.25]);

        let mut x = vec![1.0];
        let mut m = AdamMoments::zeros(1);
        for t in 1..=100 {
            optimizer_step(&mut x, &[0.3], &mut m, &config, t);
        }
        assert!(x[0] < 1.0);

        // One step from zero moments: m = (1-b1) g, v = (1-b2) g^2, both
        // corrected back to g and g^2, so the move is lr * g / (|g| + eps).
        let g = -2.0;
        let mut y = vec![0.0];
        let mut m = AdamMoments::zeros(1);
        optimizer_step(&mut y, &[g], &mut m, &config, 1);
        let want = -config.learning_rate * g / (g.abs() + config.epsilon);
        assert!((y[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_expands_per_epoch() {
        let lambdas = TrainConfig::default().lambda_per_epoch();
        assert_eq!(lambdas.len(), 30);
        assert!(lambdas[..10].iter().all(|&l| l == 0.5));
        assert!(lambdas[10..].iter().all(|&l| l == 1.0));
    }

    #[test]
    fn phase2_with_zero_targets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = DecoderPairs {
            codes_id: DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0)),
            components_id: DMatrix::zeros(6, 10),
            codes_res: DMatrix::from_fn(2, 10, |_, _| rng.random_range(-1.0..1.0)),
            components_res: DMatrix::zeros(6, 10),
        };
        let dec = train_phase2(&DecoderNet::zeros(6, 3, 2), &pairs).unwrap();
        assert!(dec.weight_id.amax() < 1e-15 && dec.bias_id.amax() < 1e-15);
        assert!(dec.weight_res.amax() < 1e-15 && dec.bias_res.amax() < 1e-15);

        let few = DecoderPairs {
            codes_id: pairs.codes_id.columns(0, 3).into_owned(),
            components_id: pairs.components_id.columns(0, 3).into_owned(),
            ..pairs
        };
        assert!(matches!(
            train_phase2(&DecoderNet::zeros(6, 3, 2), &few),
            Err(Error::Underdetermined(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lambda_r: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
