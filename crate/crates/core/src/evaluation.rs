//! Deception rate: the fraction of stylized images that an artist classifier
//! attributes to the target artist.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ArtistClassifier;
use crate::error::{Error, Result};
use crate::io::stylize_any_size;
use crate::model::{ImageBatch, Networks};
use crate::synthetic;

/// Anything that assigns an artist to each image of a batch.
pub trait ArtistPredictor {
    fn classes(&self) -> &[String];
    fn predict(&self, img: &ImageBatch) -> Result<Vec<usize>>;
}

impl ArtistPredictor for ArtistClassifier {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Images are bilinearly resized to the classifier resolution first.
    fn predict(&self, img: &ImageBatch) -> Result<Vec<usize>> {
        ArtistClassifier::predict(self, img)
    }
}

pub trait Stylizer {
    fn stylize(&self, img: &ImageBatch) -> Result<ImageBatch>;
}

impl Stylizer for Networks {
    fn stylize(&self, img: &ImageBatch) -> Result<ImageBatch> {
        stylize_any_size(self, img)
    }
}

/// Returns its input unchanged; scores the raw-content baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn stylize(&self, img: &ImageBatch) -> Result<ImageBatch> {
        Ok(img.clone())
    }
}

/// Applies the exact synthetic artist transform: an upper bound on what any
/// learned stylizer can achieve on a synthetic corpus.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticOracleStylizer {
    pub artist: usize,
    pub n_artists: usize,
}

impl Stylizer for SyntheticOracleStylizer {
    fn stylize(&self, img: &ImageBatch) -> Result<ImageBatch> {
        synthetic::apply_style(img, self.artist, self.n_artists)
    }
}

fn target_index(classifier: &dyn ArtistPredictor, target: &str) -> Result<usize> {
    classifier
        .classes()
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| Error::UnknownArtist(target.to_string()))
}

/// Fraction of images (over every sample of every batch) whose predicted
/// artist is `target_artist`.
pub fn deception_rate(stylized: &[ImageBatch], target_artist: &str, classifier: &dyn ArtistPredictor) -> Result<f64> {
    let target = target_index(classifier, target_artist)?;
    if stylized.is_empty() {
        return Err(Error::EmptyInput("no stylized images".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for img in stylized {
        let pred = classifier.predict(img)?;
        hits += pred.iter().filter(|&&p| p == target).count();
        total += pred.len();
    }
    Ok(hits as f64 / total as f64)
}

/// One style under evaluation: its identifier, the artist it imitates and
/// the stylizer producing it.
pub struct EvalStyle<'a> {
    pub style_id: String,
    pub target_artist: String,
    pub stylizer: &'a dyn Stylizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub style: String,
    pub image: String,
    pub target: String,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeceptionReport {
    pub per_style: BTreeMap<String, f64>,
    pub mean_rate: f64,
    pub n_images_per_style: usize,
    pub classifier_holdout_accuracy: f64,
    pub seed: u64,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Prediction(&'a PredictionRecord),
    Summary {
        per_style: &'a BTreeMap<String, f64>,
        mean_rate: f64,
        n_images_per_style: usize,
        classifier_holdout_accuracy: f64,
        seed: u64,
    },
}

impl DeceptionReport {
    /// Line-delimited JSON: one `prediction` record per scored image followed
    /// by a single `summary` record.
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, &ReportLine::Prediction(r))?;
            w.write_all(b"\n")?;
        }
        let summary = ReportLine::Summary {
            per_style: &self.per_style,
            mean_rate: self.mean_rate,
            n_images_per_style: self.n_images_per_style,
            classifier_holdout_accuracy: self.classifier_holdout_accuracy,
            seed: self.seed,
        };
        serde_json::to_writer(&mut *w, &summary)?;
        w.write_all(b"\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// The content images used for evaluation: a seeded permutation of the
/// corpus, cycled when `n` exceeds its size.
pub fn select_content(content_len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..content_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.iter().copied().cycle().take(n).collect()
}

/// Stylizes `n_per_style` content images with every style and scores them.
pub fn evaluate_suite(
    styles: &[EvalStyle<'_>],
    content: &[(String, ImageBatch)],
    classifier: &dyn ArtistPredictor,
    classifier_holdout_accuracy: f64,
    n_per_style: usize,
    seed: u64,
) -> Result<DeceptionReport> {
    if n_per_style == 0 {
        return Err(Error::EmptyInput("n_per_style is 0".into()));
    }
    if content.is_empty() {
        return Err(Error::EmptyInput("content corpus is empty".into()));
    }
    if styles.is_empty() {
        return Err(Error::EmptyInput("no styles to evaluate".into()));
    }
    let picks = select_content(content.len(), n_per_style, seed);
    let mut per_style = BTreeMap::new();
    let mut records = Vec::new();
    for style in styles {
        let target = target_index(classifier, &style.target_artist)?;
        let (mut hits, mut total) = (0usize, 0usize);
        for &i in &picks {
            let (id, img) = &content[i];
            let context = |e: Error| Error::Evaluation {
                style: style.style_id.clone(),
                image: id.clone(),
                source: Box::new(e),
            };
            let out = style.stylizer.stylize(img).map_err(context)?;
            for p in classifier.predict(&out).map_err(context)? {
                hits += usize::from(p == target);
                total += 1;
                records.push(PredictionRecord {
                    style: style.style_id.clone(),
                    image: id.clone(),
                    target: style.target_artist.clone(),
                    predicted: classifier.classes()[p].clone(),
                });
            }
        }
        per_style.insert(style.style_id.clone(), hits as f64 / total as f64);
    }
    let mean_rate = per_style.values().sum::<f64>() / per_style.len() as f64;
    Ok(DeceptionReport {
        per_style,
        mean_rate,
        n_images_per_style: n_per_style,
        classifier_holdout_accuracy,
        seed,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Predicts class 0 when the red channel mean exceeds `cut`, else 1.
    struct RedCut {
        classes: Vec<String>,
        cut: f64,
    }

    impl ArtistPredictor for RedCut {
        fn classes(&self) -> &[String] {
            &self.classes
        }
        fn predict(&self, img: &ImageBatch) -> Result<Vec<usize>> {
            let plane = img.height() * img.width();
            Ok((0..img.len())
                .map(|s| {
                    let d = &img.tensor().data()[s * 3 * plane..s * 3 * plane + plane];
                    usize::from(d.iter().sum::<f64>() / plane as f64 <= self.cut)
                })
                .collect())
        }
    }

    fn grey(v: f64) -> ImageBatch {
        ImageBatch::new(Tensor::full(&[1, 3, 16, 16], v)).unwrap()
    }

    fn clf() -> RedCut {
        RedCut {
            classes: vec!["a".into(), "b".into()],
            cut: 0.5,
        }
    }

    #[test]
    fn rate_counts_target_predictions() {
        let imgs: Vec<_> = [0.9, 0.8, 0.7, 0.1, 0.2].into_iter().map(grey).collect();
        assert_eq!(deception_rate(&imgs, "a", &clf()).unwrap(), 0.6);
        assert_eq!(deception_rate(&imgs[..3], "a", &clf()).unwrap(), 1.0);
        assert!(matches!(deception_rate(&imgs, "zz", &clf()), Err(Error::UnknownArtist(_))));
        assert!(matches!(deception_rate(&[], "a", &clf()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn suite_rejects_zero_images() {
        let content = vec![("x".to_string(), grey(0.3))];
        let styles = [EvalStyle {
            style_id: "s".into(),
            target_artist: "a".into(),
            stylizer: &IdentityStylizer,
        }];
        let r = evaluate_suite(&styles, &content, &clf(), 1.0, 0, 0);
        assert!(matches!(r, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn report_lines_are_parseable() {
        let content = vec![("x".to_string(), grey(0.9)), ("y".to_string(), grey(0.1))];
        let styles = [EvalStyle {
            style_id: "s".into(),
            target_artist: "a".into(),
            stylizer: &IdentityStylizer,
        }];
        let rep = evaluate_suite(&styles, &content, &clf(), 0.75, 4, 3).unwrap();
        assert_eq!(rep.per_style["s"], 0.5);
        let mut buf = Vec::new();
        rep.write_jsonl(&mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0]["record"], "prediction");
        assert_eq!(lines[4]["record"], "summary");
        assert_eq!(lines[4]["mean_rate"], 0.5);
    }

    #[test]
    fn content_selection_cycles_a_permutation() {
        let s = select_content(3, 7, 9);
        assert_eq!(s.len(), 7);
        let mut first: Vec<_> = s[..3].to_vec();
        first.sort();
        assert_eq!(first, [0, 1, 2]);
        assert_eq!(s[3..6], s[..3]);
        assert_eq!(s, select_content(3, 7, 9));
    }
}
