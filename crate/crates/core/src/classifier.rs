//! VGG-style artist classifier.
//!
//! Trained from scratch to predict the artist of an artwork. The pre-activation
//! output of its first fully connected layer (`fc6`) is the embedding used to
//! group related style images; its predictions drive the deception rate.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::grouping::Embedder;
use crate::kernels;
use crate::model::{scaled_width, ImageBatch};
use crate::ops;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, InitScheme, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "artist-classifier";
const BLOCK_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const FC_WIDTH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub width_scale: f64,
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    pub convs_per_block: [usize; 5],
    pub init_scheme: InitScheme,
}

impl ClassifierSpec {
    /// VGG16 at 224x224.
    pub fn vgg16() -> Self {
        Self {
            width_scale: 1.0,
            input_size: 224,
            convs_per_block: [2, 2, 3, 3, 3],
            init_scheme: InitScheme::HeNormal,
        }
    }

    /// One convolution per block at reduced width and resolution.
    pub fn desk(width_scale: f64, input_size: usize) -> Self {
        Self {
            width_scale,
            input_size,
            convs_per_block: [1; 5],
            init_scheme: InitScheme::HeNormal,
        }
    }

    pub fn feature_dim(&self) -> usize {
        scaled_width(FC_WIDTH, self.width_scale)
    }

    fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config("classifier width_scale must be positive".into()));
        }
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "classifier input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.convs_per_block.contains(&0) {
            return Err(Error::Config("every block needs at least one convolution".into()));
        }
        Ok(())
    }
}

/// Images grouped by artist.
#[derive(Debug, Clone, Default)]
pub struct LabeledCorpus {
    pub classes: Vec<String>,
    pub images: Vec<(usize, ImageBatch)>,
}

impl LabeledCorpus {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for (l, _) in &self.images {
            counts[*l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtistClassifier {
    pub spec: ClassifierSpec,
    pub classes: Vec<String>,
    blocks: Vec<Vec<Layer>>,
    fc: [Layer; 3],
    pub params: ParamSet,
    trained: bool,
    /// Accuracy figures from training, when the classifier was trained here.
    pub summary: Option<TrainSummary>,
}

impl ArtistClassifier {
    pub fn new(spec: ClassifierSpec, classes: Vec<String>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if classes.len() < 2 {
            return Err(Error::InsufficientClasses(classes.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for (b, (&base, &n)) in BLOCK_WIDTHS.iter().zip(&spec.convs_per_block).enumerate() {
            let c_out = scaled_width(base, spec.width_scale);
            let layers = (0..n)
                .map(|i| {
                    let name = format!("block{b}.conv{i}");
                    let weight = params.push(
                        format!("{name}.weight"),
                        spec.init_scheme.sample(&[c_out, c_in, 3, 3], &mut rng),
                    );
                    let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
                    c_in = c_out;
                    Layer { weight, bias }
                })
                .collect();
            blocks.push(layers);
        }
        let side = spec.input_size / 32;
        let flat = c_in * side * side;
        let fcw = spec.feature_dim();
        let dims = [(flat, fcw), (fcw, fcw), (fcw, classes.len())];
        let fc = std::array::from_fn(|i| {
            let (fi, fo) = dims[i];
            let weight = params.push(
                format!("fc{}.weight", i + 6),
                spec.init_scheme.sample(&[fo, fi], &mut rng),
            );
            let bias = params.push(format!("fc{}.bias", i + 6), Tensor::zeros(&[fo]));
            Layer { weight, bias }
        });
        Ok(Self {
            spec,
            classes,
            blocks,
            fc,
            params,
            trained: false,
            summary: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Resizes images to the classifier resolution when needed.
    pub fn prepare(&self, img: &ImageBatch) -> Result<Tensor> {
        let s = self.spec.input_size;
        if img.height() == s && img.width() == s {
            Ok(img.tensor().clone())
        } else {
            kernels::resize_bilinear(img.tensor(), s, s)
        }
    }

    /// Returns `(fc6 pre-activation, logits)`.
    fn forward(&self, p: &Bound, x: &Var) -> Result<(Var, Var)> {
        let mut h = x.clone();
        for block in &self.blocks {
            for l in block {
                h = ops::relu(&ops::conv2d(&h, p.var(l.weight), Some(p.var(l.bias)), 1)?);
            }
            h = ops::max_pool2(&h)?;
        }
        let h = ops::flatten(&h)?;
        let fc6 = ops::linear(&h, p.var(self.fc[0].weight), p.var(self.fc[0].bias))?;
        let h = ops::relu(&fc6);
        let h = ops::relu(&ops::linear(&h, p.var(self.fc[1].weight), p.var(self.fc[1].bias))?);
        let logits = ops::linear(&h, p.var(self.fc[2].weight), p.var(self.fc[2].bias))?;
        Ok((fc6, logits))
    }

    fn infer(&self, img: &ImageBatch) -> Result<(Tensor, Tensor)> {
        if !self.trained {
            return Err(Error::UntrainedClassifier);
        }
        let p = self.params.bind(false);
        let (f, l) = self.forward(&p, &Var::constant(self.prepare(img)?))?;
        Ok((f.value().clone(), l.value().clone()))
    }

    /// Class logits `[N, K]`.
    pub fn logits(&self, img: &ImageBatch) -> Result<Tensor> {
        Ok(self.infer(img)?.1)
    }

    /// Argmax class for every image of the batch.
    pub fn predict(&self, img: &ImageBatch) -> Result<Vec<usize>> {
        let logits = self.logits(img)?;
        let k = self.classes.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, items: &[(usize, ImageBatch)]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::EmptyInput("no images to score".into()));
        }
        let mut correct = 0;
        for (label, img) in items {
            correct += self.predict(img)?.iter().filter(|&&p| p == *label).count();
        }
        let total: usize = items.iter().map(|(_, i)| i.len()).sum();
        Ok(correct as f64 / total as f64)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "spec": self.spec,
            "classes": self.classes,
            "trained": self.trained,
            // A missing holdout (NaN) is stored as null.
            "summary": self.summary.map(|s| serde_json::json!({
                "train_accuracy": s.train_accuracy,
                "holdout_accuracy": s.holdout_accuracy.is_finite().then_some(s.holdout_accuracy),
                "holdout_size": s.holdout_size,
            })),
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.push_params("classifier", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |what: &str| Error::CorruptCheckpoint(format!("classifier metadata: {what}"));
        let spec: ClassifierSpec =
            serde_json::from_value(c.metadata["spec"].clone()).map_err(|_| bad("spec"))?;
        let classes: Vec<String> =
            serde_json::from_value(c.metadata["classes"].clone()).map_err(|_| bad("classes"))?;
        let trained = c.metadata["trained"].as_bool().ok_or_else(|| bad("trained"))?;
        let mut clf = Self::new(spec, classes, 0)?;
        c.fill_params("classifier", &mut clf.params)?;
        clf.trained = trained;
        let summary = &c.metadata["summary"];
        if !summary.is_null() {
            clf.summary = Some(TrainSummary {
                train_accuracy: summary["train_accuracy"].as_f64().ok_or_else(|| bad("summary"))?,
                holdout_accuracy: summary["holdout_accuracy"].as_f64().unwrap_or(f64::NAN),
                holdout_size: summary["holdout_size"].as_u64().ok_or_else(|| bad("summary"))? as usize,
            });
        }
        Ok(clf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_KIND)?)
    }
}

impl Embedder for ArtistClassifier {
    fn dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn embed(&self, img: &ImageBatch) -> Result<Vec<f64>> {
        let (f, _) = self.infer(&img.sample(0)?)?;
        Ok(f.into_data())
    }
}

/// Stratified split: each class keeps at least one training image.
fn split(corpus: &LabeledCorpus, frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for class in 0..corpus.classes.len() {
        let mut idx: Vec<usize> = (0..corpus.images.len())
            .filter(|&i| corpus.images[i].0 == class)
            .collect();
        idx.shuffle(rng);
        let n_hold = ((idx.len() as f64 * frac).round() as usize).min(idx.len().saturating_sub(1));
        hold.extend_from_slice(&idx[..n_hold]);
        train.extend_from_slice(&idx[n_hold..]);
    }
    (train, hold)
}

pub fn train_artist_classifier(
    corpus: &LabeledCorpus,
    spec: ClassifierSpec,
    cfg: &ClassifierTrainConfig,
) -> Result<(ArtistClassifier, TrainSummary)> {
    if corpus.classes.len() < 2 {
        return Err(Error::InsufficientClasses(corpus.classes.len()));
    }
    for (name, n) in corpus.classes.iter().zip(corpus.class_counts()) {
        if n == 0 {
            return Err(Error::EmptyClass(name.clone()));
        }
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid classifier training config {:?}", cfg)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = ArtistClassifier::new(spec, corpus.classes.clone(), cfg.seed)?;
    let prepared: Vec<Tensor> = corpus
        .images
        .iter()
        .map(|(_, img)| clf.prepare(&img.sample(0)?))
        .collect::<Result<_>>()?;
    let (mut train, hold) = split(corpus, cfg.holdout_fraction, &mut rng);
    let mut adam = Adam::new(AdamConfig { beta1: 0.9, ..AdamConfig::default() }, &clf.params);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size) {
            let x = Tensor::cat_batch(&batch.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>())?;
            let labels: Vec<usize> = batch.iter().map(|&i| corpus.images[i].0).collect();
            let p = clf.params.bind(true);
            let (_, logits) = clf.forward(&p, &Var::constant(x))?;
            let loss = ops::softmax_cross_entropy(&logits, &labels)?;
            if !loss.value().item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    iter: epoch as u64,
                    report: "classifier cross-entropy".into(),
                });
            }
            let grads = p.grads(&loss.backward());
            adam.update(&mut clf.params, &grads, cfg.lr);
        }
        log::debug!("classifier epoch {} done", epoch + 1);
    }
    clf.trained = true;
    let pick = |ids: &[usize]| -> Vec<(usize, ImageBatch)> {
        ids.iter().map(|&i| corpus.images[i].clone()).collect()
    };
    let train_accuracy = clf.accuracy(&pick(&train))?;
    let holdout_accuracy = if hold.is_empty() {
        f64::NAN
    } else {
        clf.accuracy(&pick(&hold))?
    };
    let summary = TrainSummary {
        train_accuracy,
        holdout_accuracy,
        holdout_size: hold.len(),
    };
    clf.summary = Some(summary);
    Ok((clf, summary))
}
