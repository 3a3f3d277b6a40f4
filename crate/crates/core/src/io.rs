//! Image files, corpora, padding and frame-sequence stylization.

use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::LabeledCorpus;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{ImageBatch, Networks, ENCODER_FACTOR};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes a PNG or JPEG into a single-image batch, mapping 8-bit values
/// `v` to `v / 255`. Grayscale and alpha inputs are converted to RGB.
pub fn load_image(path: &Path) -> Result<ImageBatch> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    from_rgb8(&rgb).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn from_rgb8(rgb: &RgbImage) -> Result<ImageBatch> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    ImageBatch::new(Tensor::new(&[1, 3, h, w], data)?)
}

/// Quantises sample `index` of a batch as `round(v * 255)` clamped to `[0, 255]`.
pub fn to_rgb8(img: &ImageBatch, index: usize) -> Result<RgbImage> {
    let t = img.sample(index)?.into_tensor();
    let [_, _, h, w] = t.dims4()?;
    let d = t.data();
    let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

/// Writes the first image of the batch; the format follows the extension.
pub fn save_image(img: &ImageBatch, path: &Path) -> Result<()> {
    if !is_image_path(path) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img, 0)?.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Original spatial size of an image that was padded for the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    /// Cuts the top-left `height x width` region back out.
    pub fn apply(&self, img: &ImageBatch) -> Result<ImageBatch> {
        let [n, c, h, w] = img.tensor().dims4()?;
        if h == self.height && w == self.width {
            return Ok(img.clone());
        }
        if h < self.height || w < self.width {
            return Err(Error::Dimension(format!(
                "cannot crop {}x{} to {}x{}",
                h, w, self.height, self.width
            )));
        }
        let src = img.tensor().data();
        let mut out = Vec::with_capacity(n * c * self.height * self.width);
        for p in 0..n * c {
            for y in 0..self.height {
                let row = p * h * w + y * w;
                out.extend_from_slice(&src[row..row + self.width]);
            }
        }
        ImageBatch::new(Tensor::new(&[n, c, self.height, self.width], out)?)
    }
}

/// Mirror-pads right and bottom up to the next multiple of `factor`.
pub fn pad_for_model(x: &ImageBatch, factor: usize) -> Result<(ImageBatch, CropRecord)> {
    let factor = factor.max(1);
    let (h, w) = (x.height(), x.width());
    let record = CropRecord { height: h, width: w };
    let (hp, wp) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    if (hp, wp) == (h, w) {
        return Ok((x.clone(), record));
    }
    let padded = kernels::reflect_pad(x.tensor(), 0, 0, hp, wp)?;
    Ok((ImageBatch::new(padded)?, record))
}

/// Stylizes an image of any size `>= 16` by padding, running the network and
/// cropping back.
pub fn stylize_any_size(nets: &Networks, x: &ImageBatch) -> Result<ImageBatch> {
    let (padded, crop) = pad_for_model(x, ENCODER_FACTOR)?;
    crop.apply(&nets.stylize(&padded)?)
}

fn numeric_key(p: &Path) -> (u64, String) {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let digits: String = name
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    (digits.parse().unwrap_or(u64::MAX), name)
}

/// Image files directly under `dir`, ordered by the first number in the file
/// name, then by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            files.push(p);
        }
    }
    files.sort_by_key(|p| numeric_key(p));
    Ok(files)
}

/// Image files under `dir` at any depth, sorted by path.
pub fn list_images_recursive(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                pending.push(p);
            } else if is_image_path(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Stylizes each frame on its own; nothing is carried between frames.
/// Returns the number of frames processed.
pub fn stylize_frames<I, S>(nets: &Networks, frames: I, mut sink: S) -> Result<usize>
where
    I: IntoIterator<Item = Result<ImageBatch>>,
    S: FnMut(usize, ImageBatch) -> Result<()>,
{
    let mut count = 0;
    for (index, frame) in frames.into_iter().enumerate() {
        let wrap = |e: Error| Error::Frame {
            index,
            source: Box::new(e),
        };
        let frame = frame.map_err(wrap)?;
        let out = stylize_any_size(nets, &frame).map_err(wrap)?;
        sink(index, out).map_err(wrap)?;
        count += 1;
    }
    Ok(count)
}

/// Directory-to-directory variant: every image in `input` (numbered frames)
/// is written to `output` under the same stem as a PNG.
pub fn stylize_video(nets: &Networks, input: &Path, output: &Path) -> Result<usize> {
    let files = list_images(input)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let names: Vec<PathBuf> = files
        .iter()
        .map(|f| output.join(Path::new(f.file_stem().unwrap_or_default()).with_extension("png")))
        .collect();
    stylize_frames(nets, files.iter().map(|f| load_image(f)), |i, img| {
        save_image(&img, &names[i])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusLayout {
    Flat,
    PerArtistSubdir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    pub root: PathBuf,
    pub layout: CorpusLayout,
    pub holdout_fraction: f64,
    pub seed: u64,
}

/// Loads every image directly under `dir`, keyed by path.
pub fn load_flat_corpus(dir: &Path) -> Result<Vec<(String, ImageBatch)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| Ok((p.display().to_string(), load_image(&p)?)))
        .collect()
}

/// One class per subdirectory of `dir` (sorted by name). Also returns the
/// path of every image, parallel to `images`.
pub fn load_labeled_corpus(dir: &Path) -> Result<(LabeledCorpus, Vec<String>)> {
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    let mut corpus = LabeledCorpus::default();
    let mut paths = Vec::new();
    for (label, sub) in subdirs.iter().enumerate() {
        let name = sub.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for p in list_images(sub)? {
            paths.push(p.display().to_string());
            corpus.images.push((label, load_image(&p)?));
        }
        corpus.classes.push(name);
    }
    Ok((corpus, paths))
}
