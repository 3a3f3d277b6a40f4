//! Encoder, decoder, transformer block and multi-scale discriminator.
//!
//! Layer notation follows the usual CycleGAN shorthand:
//!
//! * encoder: `InstanceNorm, c3s1-32, d3-32, d3-64, d3-128, d3-256`
//! * decoder: `R256 x 9, u256, u128, u64, u32, c7s1-3-sigmoid`
//! * transformer: one 10x10 convolution, 3 filters, unit-norm kernel
//! * discriminator: `d5-128, d5-128, d5-256, d5-512, d5-512, d5-1024,
//!   d5-1024` (LeakyReLU 0.2), a 1-filter 3x3 classifier on top and
//!   auxiliary 1-filter classifiers after layers 1, 2, 4 and 6.
//!
//! Every convolution uses reflection padding. All channel counts are
//! multiplied by [`NetworkSpec::width_scale`]; 1.0 gives the full-size model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bound, InitScheme, ParamSet};
use crate::tensor::Tensor;

/// Spatial reduction of the encoder (four stride-2 stages).
pub const ENCODER_FACTOR: usize = 16;
/// Spatial reduction of the discriminator's main output (seven stride-2 stages).
pub const DISCRIMINATOR_FACTOR: usize = 128;
pub const LEAKY_SLOPE: f64 = 0.2;

const ENCODER_WIDTHS: [usize; 5] = [32, 32, 64, 128, 256];
const DECODER_UP_WIDTHS: [usize; 4] = [256, 128, 64, 32];
const DISCRIMINATOR_WIDTHS: [usize; 7] = [128, 128, 256, 512, 512, 1024, 1024];
/// Discriminator layers (1-based) followed by an auxiliary classifier.
pub const AUX_AFTER_LAYERS: [usize; 4] = [1, 2, 4, 6];

/// Rescales a full-size channel count, rounding to the nearest integer >= 1.
pub fn scaled_width(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(1)
}

/// RGB images `[N, 3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub const MIN_SIDE: usize = 16;

    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n == 0 {
            return Err(Error::Shape("image batch is empty".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", c)));
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::Dimension(format!(
                "images must be at least {0}x{0}, got {1}x{2}",
                Self::MIN_SIDE,
                h,
                w
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("image batch".into()));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {} outside [0, 1]", v)));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn sample(&self, i: usize) -> Result<ImageBatch> {
        Ok(ImageBatch(self.0.narrow_batch(i, 1)?))
    }

    pub fn cat(parts: &[ImageBatch]) -> Result<ImageBatch> {
        let ts: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
        ImageBatch::new(Tensor::cat_batch(&ts)?)
    }
}

/// Encoder output `z = E(x)`, shaped `[N, ch_lat, H/16, W/16]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4()?;
        if !t.all_finite() {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Element count per sample (`d` in the content loss normalisation).
    pub fn dim(&self) -> usize {
        self.0.numel() / self.0.shape()[0]
    }
}

/// Raw logits of the main classifier and of the four auxiliary scales.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<T = Tensor> {
    pub main: T,
    pub aux: [T; 4],
}

impl<T> DiscriminatorOutput<T> {
    /// Main map first, then the auxiliary maps from fine to coarse.
    pub fn maps(&self) -> impl Iterator<Item = &T> {
        std::iter::once(&self.main).chain(self.aux.iter())
    }
}

impl DiscriminatorOutput<Var> {
    pub fn values(&self) -> DiscriminatorOutput<Tensor> {
        DiscriminatorOutput {
            main: self.main.value().clone(),
            aux: self.aux.clone().map(|a| a.value().clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub width_scale: f64,
    pub n_residual_blocks: usize,
    pub transformer_kernel: usize,
    pub instance_norm_epsilon: f64,
    pub init_scheme: InitScheme,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            width_scale: 1.0,
            n_residual_blocks: 9,
            transformer_kernel: 10,
            instance_norm_epsilon: 1e-5,
            init_scheme: InitScheme::default(),
        }
    }
}

impl NetworkSpec {
    pub fn with_width_scale(width_scale: f64) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::Config("n_residual_blocks must be >= 1".into()));
        }
        if self.transformer_kernel == 0 {
            return Err(Error::Config("transformer_kernel must be >= 1".into()));
        }
        if !(self.instance_norm_epsilon > 0.0) {
            return Err(Error::Config("instance_norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, base: usize) -> usize {
        scaled_width(base, self.width_scale)
    }

    pub fn encoder_widths(&self) -> [usize; 5] {
        ENCODER_WIDTHS.map(|c| self.width(c))
    }

    pub fn latent_channels(&self) -> usize {
        self.width(256)
    }

    pub fn decoder_up_widths(&self) -> [usize; 4] {
        DECODER_UP_WIDTHS.map(|c| self.width(c))
    }

    pub fn discriminator_widths(&self) -> [usize; 7] {
        DISCRIMINATOR_WIDTHS.map(|c| self.width(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: InitScheme,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            init.sample(&[c_out, c_in, kernel, kernel], rng),
        );
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
        }
    }

    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        ops::conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    affine: Option<(usize, usize)>,
    eps: f64,
}

impl Norm {
    fn affine(params: &mut ParamSet, name: &str, channels: usize, eps: f64) -> Self {
        let g = params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let b = params.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            affine: Some((g, b)),
            eps,
        }
    }

    fn plain(eps: f64) -> Self {
        Self { affine: None, eps }
    }

    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let affine = self.affine.map(|(g, b)| (p.var(g), p.var(b)));
        ops::instance_norm(x, affine, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Relu,
    Leaky,
    Sigmoid,
}

/// Convolution, instance norm, activation.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBlock {
    conv: Conv,
    norm: Norm,
    act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        act: Act,
        spec: &NetworkSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // A bias right before instance norm is cancelled by the mean removal.
        let conv = Conv::new(
            params,
            &format!("{name}.conv"),
            c_in,
            c_out,
            kernel,
            stride,
            false,
            spec.init_scheme,
            rng,
        );
        let norm = Norm::affine(params, &format!("{name}.norm"), c_out, spec.instance_norm_epsilon);
        Self { conv, norm, act }
    }

    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = self.norm.forward(p, &self.conv.forward(p, x)?)?;
        Ok(match self.act {
            Act::Relu => ops::relu(&y),
            Act::Leaky => ops::leaky_relu(&y, LEAKY_SLOPE),
            Act::Sigmoid => ops::sigmoid(&y),
        })
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn require_multiple(x: &Tensor, factor: usize, what: &str) -> Result<()> {
    let [_, _, h, w] = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "{what} needs spatial dims divisible by {factor}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Latent code together with the first convolutional layer's activations.
pub struct EncoderOutput {
    pub z: Var,
    pub conv1: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    input_norm: Norm,
    layers: [ConvBlock; 5],
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let w = spec.encoder_widths();
        let mut c_in = 3;
        let layers = std::array::from_fn(|i| {
            let stride = if i == 0 { 1 } else { 2 };
            let block = ConvBlock::new(
                &mut params,
                &format!("encoder.{i}"),
                c_in,
                w[i],
                3,
                stride,
                Act::Relu,
                spec,
                rng,
            );
            c_in = w[i];
            block
        });
        Self {
            input_norm: Norm::plain(spec.instance_norm_epsilon),
            layers,
            params,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<EncoderOutput> {
        let h = self.input_norm.forward(p, x)?;
        let conv1 = self.layers[0].forward(p, &h)?;
        let mut z = conv1.clone();
        for layer in &self.layers[1..] {
            z = layer.forward(p, &z)?;
        }
        Ok(EncoderOutput { z, conv1 })
    }
}

/// Two 3x3 convolutions with instance norm and a skip connection.
#[derive(Debug, Clone, PartialEq)]
struct Residual {
    first: ConvBlock,
    second: Conv,
    second_norm: Norm,
}

impl Residual {
    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.first.forward(p, x)?;
        let h = self.second_norm.forward(p, &self.second.forward(p, &h)?)?;
        ops::add(x, &h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    residual: Vec<Residual>,
    up: [ConvBlock; 4],
    out: ConvBlock,
    pub params: ParamSet,
}

impl Decoder {
    pub fn new(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let lat = spec.latent_channels();
        let residual = (0..spec.n_residual_blocks)
            .map(|i| {
                let name = format!("decoder.res{i}");
                let first = ConvBlock::new(
                    &mut params,
                    &format!("{name}.a"),
                    lat,
                    lat,
                    3,
                    1,
                    Act::Relu,
                    spec,
                    rng,
                );
                let second = Conv::new(
                    &mut params,
                    &format!("{name}.b.conv"),
                    lat,
                    lat,
                    3,
                    1,
                    false,
                    spec.init_scheme,
                    rng,
                );
                let second_norm = Norm::affine(
                    &mut params,
                    &format!("{name}.b.norm"),
                    lat,
                    spec.instance_norm_epsilon,
                );
                Residual {
                    first,
                    second,
                    second_norm,
                }
            })
            .collect();
        let widths = spec.decoder_up_widths();
        let mut c_in = lat;
        let up = std::array::from_fn(|i| {
            let block = ConvBlock::new(
                &mut params,
                &format!("decoder.up{i}"),
                c_in,
                widths[i],
                3,
                1,
                Act::Relu,
                spec,
                rng,
            );
            c_in = widths[i];
            block
        });
        let out = ConvBlock::new(
            &mut params,
            "decoder.out",
            c_in,
            3,
            7,
            1,
            Act::Sigmoid,
            spec,
            rng,
        );
        Self {
            residual,
            up,
            out,
            params,
        }
    }

    pub fn forward(&self, p: &Bound, z: &Var) -> Result<Var> {
        let mut h = z.clone();
        for r in &self.residual {
            h = r.forward(p, &h)?;
        }
        for u in &self.up {
            h = u.forward(p, &ops::upsample_nearest2x(&h)?)?;
        }
        self.out.forward(p, &h)
    }
}

/// Single convolution whose kernel is renormalised to unit Frobenius norm on
/// every application.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    kernel: usize,
    bias: usize,
    pub params: ParamSet,
}

impl Transformer {
    pub fn new(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.transformer_kernel;
        let mut params = ParamSet::new();
        let raw = Tensor::from_fn(&[3, 3, k, k], |_| rng.random::<f64>());
        let kernel = params.push("transformer.kernel", raw);
        let bias = params.push("transformer.bias", Tensor::zeros(&[3]));
        Self {
            kernel,
            bias,
            params,
        }
    }

    /// The kernel actually applied, `v / ||v||`.
    pub fn effective_kernel(&self) -> Result<Tensor> {
        Ok(ops::unit_norm(&Var::constant(self.params.get(self.kernel).clone()))?
            .value()
            .clone())
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let w = ops::unit_norm(p.var(self.kernel))?;
        ops::conv2d(x, &w, Some(p.var(self.bias)), 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    layers: [ConvBlock; 7],
    aux: [Conv; 4],
    main: Conv,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let widths = spec.discriminator_widths();
        let mut c_in = 3;
        let layers = std::array::from_fn(|i| {
            let block = ConvBlock::new(
                &mut params,
                &format!("discriminator.{i}"),
                c_in,
                widths[i],
                5,
                2,
                Act::Leaky,
                spec,
                rng,
            );
            c_in = widths[i];
            block
        });
        let aux = std::array::from_fn(|i| {
            let after = AUX_AFTER_LAYERS[i];
            Conv::new(
                &mut params,
                &format!("discriminator.aux{after}"),
                widths[after - 1],
                1,
                3,
                1,
                true,
                spec.init_scheme,
                rng,
            )
        });
        let main = Conv::new(
            &mut params,
            "discriminator.main",
            widths[6],
            1,
            3,
            1,
            true,
            spec.init_scheme,
            rng,
        );
        Self {
            layers,
            aux,
            main,
            params,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<DiscriminatorOutput<Var>> {
        let mut h = x.clone();
        let mut aux = Vec::with_capacity(4);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if let Some(slot) = AUX_AFTER_LAYERS.iter().position(|&l| l == i + 1) {
                aux.push(self.aux[slot].forward(p, &h)?);
            }
        }
        let main = self.main.forward(p, &h)?;
        let aux: [Var; 4] = aux.try_into().expect("four auxiliary classifiers");
        Ok(DiscriminatorOutput { main, aux })
    }
}

/// The four networks of the stylizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub spec: NetworkSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub transformer: Transformer,
    pub discriminator: Discriminator,
}

impl Networks {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            encoder: Encoder::new(&spec, &mut seeded(seed, 1)),
            decoder: Decoder::new(&spec, &mut seeded(seed, 2)),
            transformer: Transformer::new(&spec, &mut seeded(seed, 3)),
            discriminator: Discriminator::new(&spec, &mut seeded(seed, 4)),
        })
    }

    pub fn encode(&self, x: &ImageBatch) -> Result<LatentCode> {
        require_multiple(x.tensor(), ENCODER_FACTOR, "encoder")?;
        let p = self.encoder.params.bind(false);
        let out = self.encoder.forward(&p, &Var::constant(x.tensor().clone()))?;
        LatentCode::new(out.z.value().clone())
    }

    pub fn decode(&self, z: &LatentCode) -> Result<ImageBatch> {
        if !self.decoder.params.all_finite() {
            return Err(Error::NonFinite("decoder parameters".into()));
        }
        let [_, c, _, _] = z.tensor().dims4()?;
        if c != self.spec.latent_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {}",
                self.spec.latent_channels(),
                c
            )));
        }
        let p = self.decoder.params.bind(false);
        let y = self.decoder.forward(&p, &Var::constant(z.tensor().clone()))?;
        ImageBatch::new(y.value().clone())
    }

    /// `G(E(x))`.
    pub fn stylize(&self, x: &ImageBatch) -> Result<ImageBatch> {
        self.decode(&self.encode(x)?)
    }

    pub fn discriminate(&self, img: &ImageBatch) -> Result<DiscriminatorOutput> {
        let p = self.discriminator.params.bind(false);
        let out = self
            .discriminator
            .forward(&p, &Var::constant(img.tensor().clone()))?;
        Ok(out.values())
    }

    pub fn transform(&self, img: &ImageBatch) -> Result<Tensor> {
        let p = self.transformer.params.bind(false);
        Ok(self
            .transformer
            .forward(&p, &Var::constant(img.tensor().clone()))?
            .value()
            .clone())
    }
}

/// Expected main-logit side length for an input side, `ceil(side / 128)`.
pub fn discriminator_main_side(side: usize) -> usize {
    side.div_ceil(DISCRIMINATOR_FACTOR)
}

/// Expected auxiliary-map side lengths for an input side.
pub fn discriminator_aux_sides(side: usize) -> [usize; 4] {
    AUX_AFTER_LAYERS.map(|l| side.div_ceil(1 << l))
}
