//! Flat `key = value` run configuration.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::network::{NetworkShape, TrainConfig};
use crate::synthetic::{DatasetSpec, Range, SyntheticModelSpec};

/// Every tunable of a run. `seed` drives all random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: SyntheticModelSpec,
    pub data: DatasetSpec,
    pub fit: FitConfig,
    /// Subject whose first `fit_images` images the `fit` command uses.
    pub fit_subject: usize,
    pub fit_images: usize,
    pub hidden: Vec<usize>,
    pub phase1: TrainConfig,
    /// Prior coefficient draws added to the Phase II least-squares pairs.
    pub decoder_extra_draws: usize,
    pub phase3: TrainConfig,
    pub grad_check_params: usize,
    pub grad_check_step: f64,
    pub eval_crop_radius: f64,
    pub eval_folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 7,
            output_dir: PathBuf::from("run"),
            model: SyntheticModelSpec::default(),
            data: DatasetSpec::default(),
            fit: FitConfig::exact(),
            fit_subject: 0,
            fit_images: 5,
            hidden: vec![256, 256],
            phase1: TrainConfig::phase1(),
            decoder_extra_draws: 40,
            phase3: TrainConfig::phase3(),
            grad_check_params: 256,
            grad_check_step: 1e-6,
            eval_crop_radius: 95.0,
            eval_folds: 10,
        };
        c.set_seed(7);
        c
    }
}

/// All keys in the order they are written.
pub const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "model.n_vertices",
    "model.k_id",
    "model.k_exp",
    "model.smoothness",
    "data.n_subjects",
    "data.images_per_subject",
    "data.landmark_noise_sigma",
    "data.image_resolution",
    "data.yaw",
    "data.pitch",
    "data.roll",
    "data.scale",
    "data.tx",
    "data.ty",
    "fit.subject",
    "fit.images",
    "fit.max_iterations",
    "fit.rel_tol",
    "fit.reg_id",
    "fit.reg_exp",
    "net.hidden",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "phase1.learning_rate",
    "phase1.epochs",
    "phase1.batch_size",
    "phase2.extra_draws",
    "phase3.learning_rate",
    "phase3.batch_size",
    "phase3.schedule",
    "check.params",
    "check.step",
    "eval.crop_radius",
    "eval.folds",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<Range> {
    match parse_list::<f64>(key, value)?.as_slice() {
        &[min, max] => Ok(Range::new(min, max)),
        _ => Err(Error::Config(format!("`{key}`: expected `min,max`, got `{value}`"))),
    }
}

/// `lambda_r x epochs` stages separated by commas, e.g. `0.5x10,1x20`.
fn parse_schedule(key: &str, value: &str) -> Result<Vec<(f64, usize)>> {
    value
        .split(',')
        .map(|stage| match stage.trim().split_once('x') {
            Some((l, e)) => Ok((parse_num(key, l.trim())?, parse_num(key, e.trim())?)),
            None => Err(Error::Config(format!("`{key}`: stage `{stage}` is not `lambda x epochs`"))),
        })
        .collect()
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.data.seed = seed;
        self.phase1.seed = seed;
        self.phase3.seed = seed;
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let range = |r: &Range| format!("{},{}", r.min, r.max);
        let p = &self.data.pose_ranges;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "model.n_vertices" => self.model.n_vertices.to_string(),
            "model.k_id" => self.model.k_id.to_string(),
            "model.k_exp" => self.model.k_exp.to_string(),
            "model.smoothness" => self.model.smoothness.to_string(),
            "data.n_subjects" => self.data.n_subjects.to_string(),
            "data.images_per_subject" => self.data.images_per_subject.to_string(),
            "data.landmark_noise_sigma" => self.data.landmark_noise_sigma.to_string(),
            "data.image_resolution" => self.data.image_resolution.to_string(),
            "data.yaw" => range(&p.yaw),
            "data.pitch" => range(&p.pitch),
            "data.roll" => range(&p.roll),
            "data.scale" => range(&p.scale),
            "data.tx" => range(&p.tx),
            "data.ty" => range(&p.ty),
            "fit.subject" => self.fit_subject.to_string(),
            "fit.images" => self.fit_images.to_string(),
            "fit.max_iterations" => self.fit.max_iterations.to_string(),
            "fit.rel_tol" => self.fit.rel_tol.to_string(),
            "fit.reg_id" => self.fit.reg_id.to_string(),
            "fit.reg_exp" => self.fit.reg_exp.to_string(),
            "net.hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "train.beta1" => self.phase1.beta1.to_string(),
            "train.beta2" => self.phase1.beta2.to_string(),
            "train.epsilon" => self.phase1.epsilon.to_string(),
            "phase1.learning_rate" => self.phase1.learning_rate.to_string(),
            "phase1.epochs" => self.phase1.epochs.to_string(),
            "phase1.batch_size" => self.phase1.batch_size.to_string(),
            "phase2.extra_draws" => self.decoder_extra_draws.to_string(),
            "phase3.learning_rate" => self.phase3.learning_rate.to_string(),
            "phase3.batch_size" => self.phase3.batch_size.to_string(),
            "phase3.schedule" => self
                .phase3
                .schedule
                .iter()
                .map(|(l, e)| format!("{l}x{e}"))
                .collect::<Vec<_>>()
                .join(","),
            "check.params" => self.grad_check_params.to_string(),
            "check.step" => self.grad_check_step.to_string(),
            "eval.crop_radius" => self.eval_crop_radius.to_string(),
            "eval.folds" => self.eval_folds.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Sets one key from text. Cross-field checks happen in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.data.pose_ranges;
        match key {
            "seed" => self.set_seed(parse_num(key, v)?),
            "output_dir" => {
                if v.is_empty() {
                    return Err(Error::Config("`output_dir` must not be empty".into()));
                }
                self.output_dir = PathBuf::from(v)
            }
            "model.n_vertices" => self.model.n_vertices = parse_num(key, v)?,
            "model.k_id" => self.model.k_id = parse_num(key, v)?,
            "model.k_exp" => self.model.k_exp = parse_num(key, v)?,
            "model.smoothness" => self.model.smoothness = parse_num(key, v)?,
            "data.n_subjects" => self.data.n_subjects = parse_num(key, v)?,
            "data.images_per_subject" => self.data.images_per_subject = parse_num(key, v)?,
            "data.landmark_noise_sigma" => self.data.landmark_noise_sigma = parse_num(key, v)?,
            "data.image_resolution" => self.data.image_resolution = parse_num(key, v)?,
            "data.yaw" => p.yaw = parse_range(key, v)?,
            "data.pitch" => p.pitch = parse_range(key, v)?,
            "data.roll" => p.roll = parse_range(key, v)?,
            "data.scale" => p.scale = parse_range(key, v)?,
            "data.tx" => p.tx = parse_range(key, v)?,
            "data.ty" => p.ty = parse_range(key, v)?,
            "fit.subject" => self.fit_subject = parse_num(key, v)?,
            "fit.images" => self.fit_images = parse_num(key, v)?,
            "fit.max_iterations" => self.fit.max_iterations = parse_num(key, v)?,
            "fit.rel_tol" => self.fit.rel_tol = parse_num(key, v)?,
            "fit.reg_id" => self.fit.reg_id = parse_num(key, v)?,
            "fit.reg_exp" => self.fit.reg_exp = parse_num(key, v)?,
            "net.hidden" => self.hidden = parse_list(key, v)?,
            "train.beta1" => {
                self.phase1.beta1 = parse_num(key, v)?;
                self.phase3.beta1 = self.phase1.beta1;
            }
            "train.beta2" => {
                self.phase1.beta2 = parse_num(key, v)?;
                self.phase3.beta2 = self.phase1.beta2;
            }
            "train.epsilon" => {
                self.phase1.epsilon = parse_num(key, v)?;
                self.phase3.epsilon = self.phase1.epsilon;
            }
            "phase1.learning_rate" => self.phase1.learning_rate = parse_num(key, v)?,
            "phase1.epochs" => self.phase1.epochs = parse_num(key, v)?,
            "phase1.batch_size" => self.phase1.batch_size = parse_num(key, v)?,
            "phase2.extra_draws" => self.decoder_extra_draws = parse_num(key, v)?,
            "phase3.learning_rate" => self.phase3.learning_rate = parse_num(key, v)?,
            "phase3.batch_size" => self.phase3.batch_size = parse_num(key, v)?,
            "phase3.schedule" => self.phase3.schedule = parse_schedule(key, v)?,
            "check.params" => self.grad_check_params = parse_num(key, v)?,
            "check.step" => self.grad_check_step = parse_num(key, v)?,
            "eval.crop_radius" => self.eval_crop_radius = parse_num(key, v)?,
            "eval.folds" => self.eval_folds = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in [`KEYS`] order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("KEYS are all known")))
            .collect()
    }

    pub fn network_shape(&self, n_classes: usize) -> NetworkShape {
        NetworkShape {
            input_dim: self.data.image_resolution * self.data.image_resolution,
            hidden: self.hidden.clone(),
            q_id: self.model.k_id,
            q_res: self.model.k_exp,
            output_dim: 3 * self.model.n_vertices,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            e @ Error::Config(_) => e,
            e => Error::Config(e.to_string()),
        };
        self.model.validate().map_err(cfg)?;
        self.data.validate().map_err(cfg)?;
        self.fit.validate().map_err(cfg)?;
        self.phase1.validate()?;
        self.phase3.validate()?;
        let checks = [
            (self.fit_subject < self.data.n_subjects, "fit.subject must be below data.n_subjects"),
            (
                (1..=self.data.images_per_subject).contains(&self.fit_images),
                "fit.images must lie in 1..=data.images_per_subject",
            ),
            (!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), "net.hidden needs positive widths"),
            (self.phase1.epochs > 0, "phase1.epochs must be at least 1"),
            (self.grad_check_params > 0, "check.params must be at least 1"),
            (self.grad_check_step > 0.0, "check.step must be positive"),
            (self.eval_crop_radius > 0.0, "eval.crop_radius must be positive"),
            (self.eval_folds >= 2, "eval.folds must be at least 2"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_text_roundtrips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_roundtrips_a_changed_value() {
        let mut c = RunConfig::default();
        c.apply_text(
            "seed = 11\n# comment\n\nmodel.smoothness = 0.45\ndata.yaw = -0.1,0.2\nphase3.schedule = 0.25x3, 1x4\n\
             net.hidden = 64\nfit.rel_tol = 1e-9\noutput_dir = out/x\ntrain.beta1 = 0.8\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!((c.model.seed, c.data.seed, c.phase1.seed, c.phase3.seed), (11, 11, 11, 11));
        assert_eq!(c.phase3.schedule, vec![(0.25, 3), (1.0, 4)]);
        assert_eq!(c.phase3.beta1, 0.8);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "nope = 1",
            "seed = x",
            "data.yaw = 1",
            "phase3.schedule = 0.5",
            "no equals sign",
            "eval.folds = 1",
            "model.k_id = 0",
            "fit.images = 11",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}: {err}");
        }
        assert!(RunConfig::parse("x = 1\n").unwrap_err().to_string().contains("line 1"));
    }
}
