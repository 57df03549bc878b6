//! Conversions between domain types and [`Container`]s. Loading rebuilds
//! every value through its validating constructor.

use nalgebra::{DVector, Matrix3, Vector3};

use super::container::Container;
use crate::error::{Error, Result};
use crate::fitting::{FitResult, ImageState};
use crate::geometry::{CoeffPair, LandmarkSet2D, MorphableModel, PoseParams, Shape};
use crate::network::{Activation, ClassifierHead, DecoderNet, EncoderNet, FaceNet, Layer};
use crate::synthetic::{Dataset, DepthImage, RenderedSample, Split};

fn violation(field: &str, msg: impl Into<String>) -> Error {
    Error::InvariantViolation {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Re-labels a constructor error with the entry that caused it.
fn naming(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::InvariantViolation { .. } => e,
        e => violation(field, e.to_string()),
    }
}

fn finite(c: &Container, name: &str) -> Result<()> {
    let ok = match c.get(name).map(|t| &t.data) {
        Some(super::Data::F64(v)) => v.iter().all(|x| x.is_finite()),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(violation(name, "contains non-finite values"))
    }
}

fn usizes(c: &Container, name: &str) -> Result<Vec<usize>> {
    c.u64s(name)?
        .into_iter()
        .map(|v| usize::try_from(v).map_err(|_| violation(name, "value exceeds usize")))
        .collect()
}

pub fn model_to_container(model: &MorphableModel, config: &str) -> Container {
    let mut c = Container::new("model", config);
    c.push_f64s("mean", model.mean.coords());
    c.push_matrix("basis_id", &model.basis_id);
    c.push_matrix("basis_exp", &model.basis_exp);
    c.push_f64s("sigma_id", &model.sigma_id);
    c.push_f64s("sigma_exp", &model.sigma_exp);
    c.push_u64s("landmark_indices", &model.landmark_indices.iter().map(|&i| i as u64).collect::<Vec<_>>());
    c.push_u64s("nose_tip_index", &[model.nose_tip_index as u64]);
    c
}

pub fn model_from_container(c: &Container) -> Result<MorphableModel> {
    c.expect_kind("model")?;
    for name in ["mean", "basis_id", "basis_exp", "sigma_id", "sigma_exp"] {
        finite(c, name)?;
    }
    MorphableModel::new(
        Shape::new(c.f64s("mean")?).map_err(naming("mean"))?,
        c.matrix("basis_id")?,
        c.matrix("basis_exp")?,
        c.f64s("sigma_id")?,
        c.f64s("sigma_exp")?,
        usizes(c, "landmark_indices")?,
        c.scalar_usize("nose_tip_index")?,
    )
    .map_err(naming("model"))
}

fn push_layer(c: &mut Container, name: &str, layer: &Layer) {
    c.push_matrix(&format!("{name}.weight"), &layer.weight);
    c.push_f64s(&format!("{name}.bias"), layer.bias.as_slice());
    c.push_u64s(&format!("{name}.activation"), &[layer.activation.code()]);
}

fn read_layer(c: &Container, name: &str) -> Result<Layer> {
    let (w, b, a) = (format!("{name}.weight"), format!("{name}.bias"), format!("{name}.activation"));
    finite(c, &w)?;
    finite(c, &b)?;
    let activation =
        Activation::from_code(c.scalar_u64(&a)?).ok_or_else(|| violation(&a, "unknown activation code"))?;
    Layer::new(c.matrix(&w)?, c.vector(&b)?, activation).map_err(naming(&b))
}

pub fn network_to_container(net: &FaceNet, config: &str) -> Container {
    let mut c = Container::new("network", config);
    c.push_u64s("encoder.n_hidden", &[net.encoder.hidden.len() as u64]);
    for (i, layer) in net.encoder.hidden.iter().enumerate() {
        push_layer(&mut c, &format!("encoder.hidden{i}"), layer);
    }
    push_layer(&mut c, "encoder.head_id", &net.encoder.head_id);
    push_layer(&mut c, "encoder.head_res", &net.encoder.head_res);
    let d = &net.decoder;
    c.push_matrix("decoder.weight_id", &d.weight_id);
    c.push_f64s("decoder.bias_id", d.bias_id.as_slice());
    c.push_matrix("decoder.weight_res", &d.weight_res);
    c.push_f64s("decoder.bias_res", d.bias_res.as_slice());
    c.push_matrix("head.weight", &net.head.weight);
    c.push_f64s("head.bias", net.head.bias.as_slice());
    c
}

pub fn network_from_container(c: &Container) -> Result<FaceNet> {
    c.expect_kind("network")?;
    let n_hidden = c.scalar_usize("encoder.n_hidden")?;
    let hidden = (0..n_hidden)
        .map(|i| read_layer(c, &format!("encoder.hidden{i}")))
        .collect::<Result<Vec<_>>>()?;
    let encoder = EncoderNet::new(hidden, read_layer(c, "encoder.head_id")?, read_layer(c, "encoder.head_res")?)?;
    for name in ["decoder.weight_id", "decoder.bias_id", "decoder.weight_res", "decoder.bias_res", "head.weight", "head.bias"] {
        finite(c, name)?;
    }
    let decoder = DecoderNet::new(
        c.matrix("decoder.weight_id")?,
        c.vector("decoder.bias_id")?,
        c.matrix("decoder.weight_res")?,
        c.vector("decoder.bias_res")?,
    )?;
    let head = ClassifierHead::new(c.matrix("head.weight")?, c.vector("head.bias")?).map_err(naming("head.bias"))?;
    FaceNet::new(encoder, decoder, head)
}

/// Checks that a network fits a model and an image size, naming the first
/// mismatching field.
pub fn check_network_dims(net: &FaceNet, model: &MorphableModel, input_dim: usize) -> Result<()> {
    let checks = [
        ("encoder.hidden0.weight", net.encoder.input_dim(), input_dim, "input width"),
        ("encoder.head_id.weight", net.encoder.q_id(), model.k_id(), "identity latent width"),
        ("encoder.head_res.weight", net.encoder.q_res(), model.k_exp(), "residual latent width"),
        ("decoder.weight_id", net.decoder.output_dim(), 3 * model.n_vertices(), "decoder output size"),
    ];
    for (field, found, expected, what) in checks {
        if found != expected {
            return Err(violation(field, format!("{what} is {found}, expected {expected}")));
        }
    }
    Ok(())
}

pub fn dataset_to_container(data: &Dataset, config: &str) -> Container {
    let mut c = Container::new("dataset", config);
    let n = data.samples.len();
    let rows = |f: &dyn Fn(&RenderedSample) -> Vec<f64>| {
        let cols: Vec<Vec<f64>> = data.samples.iter().map(f).collect();
        let width = cols.first().map_or(0, Vec::len);
        nalgebra::DMatrix::from_fn(width, n, |i, j| cols[j][i])
    };
    c.push_u64s("n_subjects", &[data.n_subjects as u64]);
    c.push_u64s("n_train_subjects", &[data.n_train_subjects as u64]);
    c.push_u64s("resolution", &[data.samples.first().map_or(0, |s| s.depth.resolution as u64)]);
    c.push_u64s("subject_label", &data.samples.iter().map(|s| s.subject_label as u64).collect::<Vec<_>>());
    c.push_u64s("split", &data.splits.iter().map(|s| s.code()).collect::<Vec<_>>());
    c.push_matrix("alpha_id", &rows(&|s| s.coeffs.alpha_id.as_slice().to_vec()));
    c.push_matrix("alpha_exp", &rows(&|s| s.coeffs.alpha_exp.as_slice().to_vec()));
    c.push_matrix("pose.scale", &rows(&|s| vec![s.pose.scale]));
    c.push_matrix("pose.rotation", &rows(&|s| s.pose.rotation.as_slice().to_vec()));
    c.push_matrix("pose.translation", &rows(&|s| s.pose.translation.as_slice().to_vec()));
    c.push_matrix("landmarks", &rows(&|s| s.landmarks.coords().to_vec()));
    c.push_matrix("depth", &rows(&|s| s.depth.pixels.clone()));
    c.push_matrix("shape", &rows(&|s| s.shape.coords().to_vec()));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    c.expect_kind("dataset")?;
    let n_subjects = c.scalar_usize("n_subjects")?;
    let n_train_subjects = c.scalar_usize("n_train_subjects")?;
    let resolution = c.scalar_usize("resolution")?;
    let labels = usizes(c, "subject_label")?;
    let n = labels.len();
    let splits = c
        .u64s("split")?
        .into_iter()
        .map(|code| Split::from_code(code).ok_or_else(|| violation("split", format!("unknown split code {code}"))))
        .collect::<Result<Vec<_>>>()?;
    if splits.len() != n {
        return Err(violation("split", format!("{} entries for {n} samples", splits.len())));
    }
    if n_train_subjects > n_subjects {
        return Err(violation("n_train_subjects", "exceeds n_subjects"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_subjects) {
        return Err(violation("subject_label", format!("label {bad} >= n_subjects {n_subjects}")));
    }
    let mut mats = std::collections::BTreeMap::new();
    let fixed_rows = [("pose.scale", 1), ("pose.rotation", 9), ("pose.translation", 3), ("depth", resolution * resolution)];
    for name in ["alpha_id", "alpha_exp", "pose.scale", "pose.rotation", "pose.translation", "landmarks", "depth", "shape"] {
        finite(c, name)?;
        let m = c.matrix(name)?;
        if m.ncols() != n {
            return Err(violation(name, format!("{} columns for {n} samples", m.ncols())));
        }
        if let Some(&(_, rows)) = fixed_rows.iter().find(|(f, _)| *f == name) {
            if m.nrows() != rows {
                return Err(violation(name, format!("{} rows, expected {rows}", m.nrows())));
            }
        }
        mats.insert(name, m);
    }
    let mut samples = Vec::with_capacity(n);
    for (j, &subject_label) in labels.iter().enumerate() {
        let col = |name: &str| mats[name].column(j).iter().copied().collect::<Vec<f64>>();
        let tr = col("pose.translation");
        samples.push(RenderedSample {
            subject_label,
            coeffs: CoeffPair::new(DVector::from_vec(col("alpha_id")), DVector::from_vec(col("alpha_exp")))
                .map_err(naming("alpha_id"))?,
            pose: PoseParams::new(
                mats["pose.scale"][(0, j)],
                Matrix3::from_column_slice(&col("pose.rotation")),
                Vector3::new(tr[0], tr[1], tr[2]),
            )
            .map_err(naming("pose.rotation"))?,
            landmarks: LandmarkSet2D::new(col("landmarks")).map_err(naming("landmarks"))?,
            depth: DepthImage {
                resolution,
                pixels: col("depth"),
            },
            shape: Shape::new(col("shape")).map_err(naming("shape"))?,
        });
    }
    Ok(Dataset {
        samples,
        splits,
        n_subjects,
        n_train_subjects,
    })
}

pub fn fit_to_container(fit: &FitResult, config: &str) -> Container {
    let mut c = Container::new("fit", config);
    c.push_f64s("alpha_id", fit.alpha_id.as_slice());
    c.push_u64s("n_images", &[fit.per_image.len() as u64]);
    for (i, s) in fit.per_image.iter().enumerate() {
        c.push_f64s(&format!("image{i}.alpha_exp"), s.alpha_exp.as_slice());
        c.push_f64s(&format!("image{i}.pose.scale"), &[s.pose.scale]);
        c.push_f64s(&format!("image{i}.pose.rotation"), s.pose.rotation.as_slice());
        c.push_f64s(&format!("image{i}.pose.translation"), s.pose.translation.as_slice());
    }
    c.push_f64s("objective_trace", &fit.objective_trace);
    c.push_f64s("data_trace", &fit.data_trace);
    c.push_u64s("iterations_used", &[fit.iterations_used as u64]);
    c.push_u64s("converged", &[fit.converged as u64]);
    c
}

pub fn fit_from_container(c: &Container) -> Result<FitResult> {
    c.expect_kind("fit")?;
    let per_image = (0..c.scalar_usize("n_images")?)
        .map(|i| {
            let name = |s: &str| format!("image{i}.{s}");
            let t = c.f64s(&name("pose.translation"))?;
            let scale = c.f64s(&name("pose.scale"))?;
            let rot = c.f64s(&name("pose.rotation"))?;
            if t.len() != 3 || scale.len() != 1 || rot.len() != 9 {
                return Err(violation(&name("pose"), "pose entries have the wrong length"));
            }
            Ok(ImageState {
                alpha_exp: c.vector(&name("alpha_exp"))?,
                pose: PoseParams::new(scale[0], Matrix3::from_column_slice(&rot), Vector3::new(t[0], t[1], t[2]))
                    .map_err(naming(&name("pose.rotation")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let converged = match c.scalar_u64("converged")? {
        0 => false,
        1 => true,
        v => return Err(violation("converged", format!("expected 0 or 1, found {v}"))),
    };
    let objective_trace = c.f64s("objective_trace")?;
    let data_trace = c.f64s("data_trace")?;
    if data_trace.len() != objective_trace.len() {
        return Err(violation("data_trace", "length differs from objective_trace"));
    }
    Ok(FitResult {
        alpha_id: c.vector("alpha_id")?,
        per_image,
        objective_trace,
        data_trace,
        iterations_used: c.scalar_usize("iterations_used")?,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::{multi_image_fit, FitConfig};
    use crate::network::NetworkShape;
    use crate::synthetic::{build_dataset, generate_model, DatasetSpec, SyntheticModelSpec};

    fn small() -> (MorphableModel, Dataset) {
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
                images_per_subject: 5,
                image_resolution: 8,
                ..Default::default()
            },
        )
        .unwrap();
        (model, data)
    }

    fn via_bytes(c: &Container) -> Container {
        Container::from_bytes(&c.to_bytes()).unwrap()
    }

    #[test]
    fn model_and_dataset_roundtrip_exactly() {
        let (model, data) = small();
        let c = via_bytes(&model_to_container(&model, "seed = 7\n"));
        assert_eq!(c.config, "seed = 7\n");
        assert_eq!(model_from_container(&c).unwrap(), model);
        assert_eq!(dataset_from_container(&via_bytes(&dataset_to_container(&data, ""))).unwrap(), data);
    }

    #[test]
    fn network_roundtrip_is_bitwise() {
        let (model, _) = small();
        let shape = NetworkShape {
            input_dim: 64,
            hidden: vec![7, 5],
            q_id: 4,
            q_res: 2,
            output_dim: 3 * model.n_vertices(),
            n_classes: 3,
        };
        let net = FaceNet::random(&shape, 3);
        let back = network_from_container(&via_bytes(&network_to_container(&net, ""))).unwrap();
        for (a, b) in net.tensors().iter().zip(back.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, net);
        check_network_dims(&back, &model, 64).unwrap();
    }

    #[test]
    fn mismatched_latent_width_names_the_field() {
        let (model, _) = small();
        let shape = NetworkShape {
            input_dim: 64,
            hidden: vec![6],
            q_id: 3,
            q_res: 2,
            output_dim: 3 * model.n_vertices(),
            n_classes: 3,
        };
        let net = network_from_container(&network_to_container(&FaceNet::random(&shape, 1), "")).unwrap();
        match check_network_dims(&net, &model, 64).unwrap_err() {
            Error::InvariantViolation { field, .. } => assert_eq!(field, "encoder.head_id.weight"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn inconsistent_entries_are_invariant_violations() {
        let (model, _) = small();
        let shape = NetworkShape {
            input_dim: 64,
            hidden: vec![6],
            q_id: 4,
            q_res: 2,
            output_dim: 3 * model.n_vertices(),
            n_classes: 3,
        };
        let mut c = network_to_container(&FaceNet::random(&shape, 1), "");
        let pos = c.entries.iter().position(|(n, _)| n == "decoder.bias_res").unwrap();
        c.entries[pos].1 = crate::io::Tensor {
            rows: 5,
            cols: 1,
            data: crate::io::Data::F64(vec![0.0; 5]),
        };
        match network_from_container(&c).unwrap_err() {
            Error::InvariantViolation { field, .. } => assert_eq!(field, "decoder.bias_res"),
            e => panic!("unexpected {e:?}"),
        }
        let mut m = model_to_container(&model, "");
        m.entries[0].1.data = crate::io::Data::F64(vec![f64::NAN; 600]);
        assert!(matches!(model_from_container(&m), Err(Error::InvariantViolation { field, .. }) if field == "mean"));
        assert!(dataset_from_container(&m).is_err());
    }

    #[test]
    fn fit_roundtrip() {
        let (model, data) = small();
        let lms: Vec<_> = data.samples[..3].iter().map(|s| s.landmarks.clone()).collect();
        let fit = multi_image_fit(&model, &lms, &FitConfig::exact()).unwrap();
        assert_eq!(fit_from_container(&via_bytes(&fit_to_container(&fit, ""))).unwrap(), fit);
    }
}
