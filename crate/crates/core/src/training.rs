//! Joint adversarial training of encoder, decoder, transformer and
//! discriminator.
//!
//! Every step either updates the discriminator alone or the encoder, decoder
//! and transformer together. The branch is chosen by an exponential moving
//! average of the discriminator's accuracy: below `acc_gate` the
//! discriminator trains, otherwise the stylizer does. The EMA is updated on
//! every step from the current batch, after the branch was chosen.
//!
//! The training batch of step `k` is a pure function of `(seed, k)`, so a run
//! resumed from a checkpoint replays exactly the same sequence.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::kernels;
use crate::losses::{self, GeneratorLoss, ImageLoss, LossReport};
use crate::model::{DiscriminatorOutput, ImageBatch, NetworkSpec, Networks, ENCODER_FACTOR};
use crate::ops;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "train-state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub total_iters: u64,
    pub lr_drop_iter: u64,
    pub lr_drop_factor: f64,
    pub lambda: f64,
    pub acc_gate: f64,
    pub ema_coeff: f64,
    pub ema_init: f64,
    pub seed: u64,
    pub width_scale: f64,
    pub n_residual_blocks: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub generator_loss: GeneratorLoss,
    pub image_loss: ImageLoss,
    pub use_content_loss: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Full-resolution settings: 768px patches, batch 1, Adam at 2e-4 for
    /// 300k iterations with a 10x drop at 200k, lambda 0.001, gate 0.8.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 768,
            batch_size: 1,
            lr: 2e-4,
            total_iters: 300_000,
            lr_drop_iter: 200_000,
            lr_drop_factor: 10.0,
            lambda: losses::DEFAULT_LAMBDA,
            acc_gate: 0.8,
            ema_coeff: 0.05,
            ema_init: 0.5,
            seed: 0,
            width_scale: 1.0,
            n_residual_blocks: 9,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            generator_loss: GeneratorLoss::NonSaturating,
            image_loss: ImageLoss::Transformed,
            use_content_loss: true,
            checkpoint_every: 1000,
        }
    }

    /// CPU-sized run: width 0.125, 64px patches, 200 iterations. The learning
    /// rate is raised to 5e-4 so the discriminator reaches the accuracy gate
    /// early enough for the encoder-decoder to train within the short run.
    pub fn desk() -> Self {
        Self {
            patch_size: 64,
            lr: 5e-4,
            total_iters: 200,
            lr_drop_iter: 150,
            width_scale: 0.125,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.acc_gate > 0.0 && self.acc_gate < 1.0) {
            return err(format!("acc_gate must be in (0, 1), got {}", self.acc_gate));
        }
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_drop_iter >= self.total_iters {
            return err(format!(
                "lr_drop_iter ({}) must be below total_iters ({})",
                self.lr_drop_iter, self.total_iters
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(ENCODER_FACTOR) {
            return err(format!(
                "patch_size must be a positive multiple of {}, got {}",
                ENCODER_FACTOR, self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.lr_drop_factor > 0.0) {
            return err("lr_drop_factor must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return err("lambda must be >= 0".into());
        }
        if !(self.ema_coeff > 0.0 && self.ema_coeff < 1.0) {
            return err(format!("ema_coeff must be in (0, 1), got {}", self.ema_coeff));
        }
        if !(0.0..=1.0).contains(&self.ema_init) {
            return err("ema_init must be in [0, 1]".into());
        }
        if self.checkpoint_every == 0 {
            return err("checkpoint_every must be >= 1".into());
        }
        self.network_spec().validate()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            width_scale: self.width_scale,
            n_residual_blocks: self.n_residual_blocks,
            ..NetworkSpec::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies the keys present in a TOML document on top of `self`; keys
    /// the document does not mention keep their current values.
    pub fn overlay_toml_str(&self, text: &str) -> Result<Self> {
        let mut merged: toml::Table = toml::from_str(&self.to_toml_string()).expect("own output parses");
        let top: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        merged.extend(top);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    /// Hash of every setting that influences the optimisation trajectory.
    /// `total_iters` and `checkpoint_every` are excluded so a run can be
    /// extended from its last checkpoint.
    pub fn trajectory_hash(&self) -> String {
        let canonical = Self {
            total_iters: 0,
            checkpoint_every: 0,
            ..self.clone()
        };
        Sha256::digest(canonical.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Learning rate at a 0-based iteration: `lr` before `lr_drop_iter`,
/// `lr / lr_drop_factor` from then on.
pub fn lr_at(iter: u64, config: &TrainConfig) -> Result<f64> {
    if iter >= config.total_iters {
        return Err(Error::OutOfRange(format!(
            "iteration {} outside schedule of {} iterations",
            iter, config.total_iters
        )));
    }
    Ok(if iter < config.lr_drop_iter {
        config.lr
    } else {
        config.lr / config.lr_drop_factor
    })
}

pub fn update_ema(ema: f64, batch_acc: f64, coeff: f64) -> f64 {
    ((1.0 - coeff) * ema + coeff * batch_acc).clamp(0.0, 1.0)
}

/// Fraction of correctly classified logit cells at the 0.5 probability
/// threshold, pooled over all scales; real and fake halves weigh equally.
pub fn discriminator_batch_accuracy(d_real: &DiscriminatorOutput, d_fake: &DiscriminatorOutput) -> f64 {
    let frac = |out: &DiscriminatorOutput, correct: fn(f64) -> bool| {
        let (hit, total) = out.maps().fold((0usize, 0usize), |(h, t), m| {
            (h + m.data().iter().filter(|&&v| correct(v)).count(), t + m.numel())
        });
        hit as f64 / total.max(1) as f64
    };
    0.5 * frac(d_real, |v| v > 0.0) + 0.5 * frac(d_fake, |v| v < 0.0)
}

/// Uniformly random `size x size` crop. Images with a side shorter than
/// `size` are first bilinearly upscaled so the short side equals `size`.
pub fn sample_patch(image: &ImageBatch, size: usize, rng: &mut impl Rng) -> Result<ImageBatch> {
    let img = image.sample(0)?;
    let (h, w) = (img.height(), img.width());
    let img = if h < size || w < size {
        let short = h.min(w) as f64;
        let nh = ((h as f64 * size as f64 / short).ceil() as usize).max(size);
        let nw = ((w as f64 * size as f64 / short).ceil() as usize).max(size);
        ImageBatch::new(kernels::resize_bilinear(img.tensor(), nh, nw)?)?
    } else {
        img
    };
    let (h, w) = (img.height(), img.width());
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in top..top + size {
            let row = c * h * w + y * w + left;
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    ImageBatch::new(Tensor::new(&[1, 3, size, size], out)?)
}

fn step_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

/// Content and style batches for a 0-based iteration.
pub fn batch_for_step(
    config: &TrainConfig,
    iter: u64,
    content: &[ImageBatch],
    styles: &[ImageBatch],
) -> Result<(ImageBatch, ImageBatch)> {
    let mut rng = step_rng(config.seed, iter);
    let mut xs = Vec::with_capacity(config.batch_size);
    let mut ys = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let c = &content[rng.random_range(0..content.len())];
        xs.push(sample_patch(c, config.patch_size, &mut rng)?);
        let s = &styles[rng.random_range(0..styles.len())];
        ys.push(sample_patch(s, config.patch_size, &mut rng)?);
    }
    Ok((ImageBatch::cat(&xs)?, ImageBatch::cat(&ys)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Discriminator,
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub iter: u64,
    pub nets: Networks,
    pub adam_encoder: Adam,
    pub adam_decoder: Adam,
    pub adam_transformer: Adam,
    pub adam_discriminator: Adam,
    pub ema_accuracy: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(config.network_spec(), config.seed)?;
        let adam = config.adam();
        Ok(Self {
            iter: 0,
            adam_encoder: Adam::new(adam, &nets.encoder.params),
            adam_decoder: Adam::new(adam, &nets.decoder.params),
            adam_transformer: Adam::new(adam, &nets.transformer.params),
            adam_discriminator: Adam::new(adam, &nets.discriminator.params),
            nets,
            ema_accuracy: config.ema_init,
            seed: config.seed,
        })
    }

    pub fn to_container(&self, config: &TrainConfig) -> Container {
        let meta = serde_json::json!({
            "iter": self.iter,
            "seed": self.seed,
            "config_hash": config.trajectory_hash(),
            "config": config.to_toml_string(),
            "adam_steps": [
                self.adam_encoder.step,
                self.adam_decoder.step,
                self.adam_transformer.step,
                self.adam_discriminator.step,
            ],
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.tensors.push(("state/ema_accuracy".into(), Tensor::scalar(self.ema_accuracy)));
        for (name, params, adam) in self.groups() {
            c.push_params(&format!("params/{name}"), params);
            c.push_tensors(&format!("adam/{name}/m"), &adam.m);
            c.push_tensors(&format!("adam/{name}/v"), &adam.v);
        }
        c
    }

    fn groups(&self) -> [(&'static str, &ParamSet, &Adam); 4] {
        [
            ("encoder", &self.nets.encoder.params, &self.adam_encoder),
            ("decoder", &self.nets.decoder.params, &self.adam_decoder),
            ("transformer", &self.nets.transformer.params, &self.adam_transformer),
            ("discriminator", &self.nets.discriminator.params, &self.adam_discriminator),
        ]
    }

    pub fn from_container(c: &Container, config: &TrainConfig) -> Result<Self> {
        let bad = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let hash = c.metadata["config_hash"].as_str().ok_or_else(|| bad("missing config hash"))?;
        if hash != config.trajectory_hash() {
            return Err(Error::Config(
                "checkpoint was produced with a different training configuration".into(),
            ));
        }
        let mut state = Self::new(config)?;
        state.iter = c.metadata["iter"].as_u64().ok_or_else(|| bad("missing iter"))?;
        state.seed = c.metadata["seed"].as_u64().ok_or_else(|| bad("missing seed"))?;
        let steps: Vec<u64> = serde_json::from_value(c.metadata["adam_steps"].clone())
            .map_err(|_| bad("missing optimizer step counts"))?;
        if steps.len() != 4 {
            return Err(bad("expected four optimizer step counts"));
        }
        state.ema_accuracy = c
            .get("state/ema_accuracy")
            .ok_or_else(|| bad("missing ema accuracy"))?
            .item();
        if !(0.0..=1.0).contains(&state.ema_accuracy) {
            return Err(bad("ema accuracy outside [0, 1]"));
        }
        let nets = &mut state.nets;
        let slots: [(&str, &mut ParamSet, &mut Adam); 4] = [
            ("encoder", &mut nets.encoder.params, &mut state.adam_encoder),
            ("decoder", &mut nets.decoder.params, &mut state.adam_decoder),
            ("transformer", &mut nets.transformer.params, &mut state.adam_transformer),
            ("discriminator", &mut nets.discriminator.params, &mut state.adam_discriminator),
        ];
        for ((name, params, adam), step) in slots.into_iter().zip(steps) {
            c.fill_params(&format!("params/{name}"), params)?;
            adam.m = c.read_tensors(&format!("adam/{name}/m"), &adam.m)?;
            adam.v = c.read_tensors(&format!("adam/{name}/v"), &adam.v)?;
            adam.step = step;
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        self.to_container(config).save(path)
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_KIND)?, config)
    }

    /// Networks stored in a checkpoint, using the configuration embedded in
    /// the file itself.
    pub fn load_networks(path: &Path) -> Result<Networks> {
        let c = Container::load(path, CHECKPOINT_KIND)?;
        let text = c.metadata["config"]
            .as_str()
            .ok_or_else(|| Error::CorruptCheckpoint("missing embedded config".into()))?;
        let config = TrainConfig::from_toml_str(text)?;
        Ok(Self::from_container(&c, &config)?.nets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Completed steps after this one (1-based iteration number).
    pub iter: u64,
    pub branch: Branch,
    pub lr: f64,
    pub ema_accuracy: f64,
    pub report: LossReport,
}

fn bce_inputs(out: &DiscriminatorOutput) -> DiscriminatorOutput<Var> {
    DiscriminatorOutput {
        main: Var::constant(out.main.clone()),
        aux: out.aux.clone().map(Var::constant),
    }
}

/// One gated update. `state` is only modified when every loss is finite.
pub fn training_step(
    state: &mut TrainState,
    content: &ImageBatch,
    style: &ImageBatch,
    config: &TrainConfig,
) -> Result<StepRecord> {
    let lr = lr_at(state.iter, config)?;
    let branch = if state.ema_accuracy < config.acc_gate {
        Branch::Discriminator
    } else {
        Branch::EncoderDecoder
    };
    let nets = &state.nets;
    let train_eg = branch == Branch::EncoderDecoder;
    let pe = nets.encoder.params.bind(train_eg);
    let pg = nets.decoder.params.bind(train_eg);
    let pt = nets.transformer.params.bind(train_eg);
    let pd = nets.discriminator.params.bind(!train_eg);

    let x = Var::constant(content.tensor().clone());
    let enc_x = nets.encoder.forward(&pe, &x)?;
    let y = nets.decoder.forward(&pg, &enc_x.z)?;
    let enc_y = nets.encoder.forward(&pe, &y)?;
    let l_content = if config.use_content_loss {
        losses::content_loss_var(&enc_x.z, &enc_y.z)?
    } else {
        Var::constant(Tensor::scalar(0.0))
    };
    let l_image = match config.image_loss {
        ImageLoss::Transformed => {
            let tx = nets.transformer.forward(&pt, &x)?;
            let ty = nets.transformer.forward(&pt, &y)?;
            ops::normalized_sq_dist(&tx, &ty)?
        }
        ImageLoss::Conv1 => ops::normalized_sq_dist(&enc_x.conv1, &enc_y.conv1)?,
        ImageLoss::None => Var::constant(Tensor::scalar(0.0)),
    };

    let fake_input = if train_eg { y.clone() } else { y.detach() };
    let d_fake = nets.discriminator.forward(&pd, &fake_input)?;
    let d_real = nets
        .discriminator
        .forward(&pd, &Var::constant(style.tensor().clone()))?;
    let l_adv_d = losses::adversarial_d_var(&d_real, &d_fake);
    let l_adv_g = if train_eg {
        losses::adversarial_g_var(&d_fake, config.generator_loss)
    } else {
        losses::adversarial_g_var(&bce_inputs(&d_fake.values()), config.generator_loss)
    };
    let total = losses::total_loss_var(&l_content, &l_image, &l_adv_g, config.lambda);

    let real_v = d_real.values();
    let fake_v = d_fake.values();
    let report = LossReport {
        l_content: l_content.value().item(),
        l_transformed: l_image.value().item(),
        l_adv_d: l_adv_d.value().item(),
        l_adv_g: l_adv_g.value().item(),
        total_eg: total.value().item(),
        lambda: config.lambda,
        d_accuracy_batch: discriminator_batch_accuracy(&real_v, &fake_v),
    };
    if !report.all_finite() {
        return Err(Error::NonFiniteLoss {
            iter: state.iter,
            report: report.to_string(),
        });
    }

    match branch {
        Branch::Discriminator => {
            // The discriminator maximises its objective.
            let grads = ops::scale(&l_adv_d, -1.0).backward();
            let gd = pd.grads(&grads);
            drop(grads);
            state
                .adam_discriminator
                .update(&mut state.nets.discriminator.params, &gd, lr);
        }
        Branch::EncoderDecoder => {
            let grads = total.backward();
            let (ge, gg, gt) = (pe.grads(&grads), pg.grads(&grads), pt.grads(&grads));
            drop(grads);
            state.adam_encoder.update(&mut state.nets.encoder.params, &ge, lr);
            state.adam_decoder.update(&mut state.nets.decoder.params, &gg, lr);
            state
                .adam_transformer
                .update(&mut state.nets.transformer.params, &gt, lr);
        }
    }
    state.ema_accuracy = update_ema(state.ema_accuracy, report.d_accuracy_batch, config.ema_coeff);
    state.iter += 1;
    Ok(StepRecord {
        iter: state.iter,
        branch,
        lr,
        ema_accuracy: state.ema_accuracy,
        report,
    })
}

pub fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt_{iter:08}.skc"))
}

/// Drives [`training_step`] over a content corpus and a style set.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    content: &'a [ImageBatch],
    styles: &'a [ImageBatch],
    pub state: TrainState,
    pub warnings: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, content: &'a [ImageBatch], styles: &'a [ImageBatch]) -> Result<Self> {
        let state = TrainState::new(&config)?;
        Self::resume(config, content, styles, state)
    }

    pub fn resume(
        config: TrainConfig,
        content: &'a [ImageBatch],
        styles: &'a [ImageBatch],
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if content.is_empty() {
            return Err(Error::EmptyCorpus("no content images".into()));
        }
        if styles.is_empty() {
            return Err(Error::EmptyCorpus("style set is empty".into()));
        }
        let mut warnings = Vec::new();
        if styles.len() == 1 {
            let msg = "style set has a single image; training on one style example is prone to mode collapse".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(Self {
            config,
            content,
            styles,
            state,
            warnings,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let (x, y) = batch_for_step(&self.config, self.state.iter, self.content, self.styles)?;
        training_step(&mut self.state, &x, &y, &self.config)
    }

    /// Runs until `total_iters`, saving a checkpoint every `checkpoint_every`
    /// completed steps and at the end when `checkpoint_dir` is set. Returns
    /// the path of the last checkpoint written.
    pub fn run(
        &mut self,
        checkpoint_dir: Option<&Path>,
        mut observer: impl FnMut(&StepRecord),
    ) -> Result<Option<PathBuf>> {
        let mut last = None;
        while self.state.iter < self.config.total_iters {
            let rec = self.step()?;
            observer(&rec);
            let done = self.state.iter == self.config.total_iters;
            if let Some(dir) = checkpoint_dir {
                if self.state.iter.is_multiple_of(self.config.checkpoint_every) || done {
                    let path = checkpoint_path(dir, self.state.iter);
                    self.state.save(&path, &self.config)?;
                    last = Some(path);
                }
            }
        }
        Ok(last)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub warnings: Vec<String>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn train(
    config: &TrainConfig,
    content: &[ImageBatch],
    styles: &[ImageBatch],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), content, styles)?;
    let mut history = Vec::new();
    let final_checkpoint = trainer.run(checkpoint_dir, |r| history.push(*r))?;
    Ok(TrainOutcome {
        state: trainer.state,
        history,
        warnings: trainer.warnings,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::uniform_output;
    use crate::synthetic;

    #[test]
    fn overlay_keeps_unmentioned_keys() {
        let base = TrainConfig { seed: 9, ..TrainConfig::desk() };
        let cfg = base.overlay_toml_str("lr = 0.001\ntotal_iters = 50\nlr_drop_iter = 40\n").unwrap();
        assert_eq!((cfg.lr, cfg.total_iters, cfg.seed), (0.001, 50, 9));
        assert_eq!(cfg.patch_size, base.patch_size);
        assert!(matches!(base.overlay_toml_str("no_such_key = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0002);
        assert_eq!(lr_at(199_999, &cfg).unwrap(), 0.0002);
        assert!((lr_at(200_000, &cfg).unwrap() - 0.00002).abs() < 1e-18);
        assert!(lr_at(300_000, &cfg).is_err());
        let flat = TrainConfig {
            lr_drop_factor: 1.0,
            ..cfg
        };
        assert_eq!(lr_at(250_000, &flat).unwrap(), flat.lr);
    }

    #[test]
    fn ema_arithmetic() {
        assert!((update_ema(0.5, 1.0, 0.05) - 0.525).abs() < 1e-15);
        assert_eq!(update_ema(0.3, 0.3, 0.05), 0.3);
        let mut e = 0.0;
        for _ in 0..200 {
            let next = update_ema(e, 1.0, 0.05);
            assert!(next > e && next <= 1.0);
            e = next;
        }
    }

    #[test]
    fn accuracy_extremes() {
        let sizes = [[2, 2], [4, 4], [3, 3], [1, 1], [1, 1]];
        let real = uniform_output(3.0, sizes[0], [sizes[1], sizes[2], sizes[3], sizes[4]]);
        let fake = uniform_output(-3.0, sizes[0], [sizes[1], sizes[2], sizes[3], sizes[4]]);
        assert_eq!(discriminator_batch_accuracy(&real, &fake), 1.0);
        assert_eq!(discriminator_batch_accuracy(&fake, &real), 0.0);
    }

    #[test]
    fn config_validation() {
        let good = TrainConfig::desk();
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { acc_gate: 1.0, ..good.clone() },
            TrainConfig { lr: 0.0, ..good.clone() },
            TrainConfig { lr_drop_iter: 200, ..good.clone() },
            TrainConfig { patch_size: 60, ..good.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig::desk();
        let text = cfg.to_toml_string();
        assert!(text.contains("patch_size = 64"));
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("patch_size = 32\ntotal_iters = 10\nlr_drop_iter = 5\n").unwrap();
        assert_eq!(partial.patch_size, 32);
        assert_eq!(partial.lr, 2e-4);
        assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn patch_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = synthetic::content_image(80, 96, 1);
        let p = sample_patch(&big, 64, &mut rng).unwrap();
        assert_eq!((p.height(), p.width()), (64, 64));
        let exact = synthetic::content_image(64, 64, 2);
        assert_eq!(sample_patch(&exact, 64, &mut rng).unwrap(), exact);
        let small = synthetic::content_image(32, 48, 3);
        let p = sample_patch(&small, 64, &mut rng).unwrap();
        assert_eq!((p.height(), p.width()), (64, 64));
    }

    #[test]
    fn patch_origin_covers_full_range() {
        // 20x20 image with a unique value per pixel; 16px crops have 5x5 origins.
        let img = ImageBatch::new(Tensor::from_fn(&[1, 3, 20, 20], |i| (i % 400) as f64 / 400.0)).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = sample_patch(&img, 16, &mut rng).unwrap();
            let v = (p.tensor().data()[0] * 400.0).round() as usize;
            seen.insert((v / 20, v % 20));
        }
        assert_eq!(seen.len(), 25);
        assert!(seen.iter().all(|&(y, x)| y <= 4 && x <= 4));
    }

    #[test]
    fn empty_corpora_are_rejected() {
        let img = vec![synthetic::content_image(64, 64, 0)];
        assert!(matches!(
            Trainer::new(TrainConfig::desk(), &[], &img),
            Err(Error::EmptyCorpus(_))
        ));
        assert!(matches!(
            Trainer::new(TrainConfig::desk(), &img, &[]),
            Err(Error::EmptyCorpus(_))
        ));
        let t = Trainer::new(TrainConfig::desk(), &img, &img).unwrap();
        assert_eq!(t.warnings.len(), 1);
    }
}
