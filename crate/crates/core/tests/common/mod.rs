//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylekit::autograd::Var;
use stylekit::losses::{self, GeneratorLoss};
use stylekit::ops;
use stylekit::params::{Bound, ParamSet};
use stylekit::{ImageBatch, Networks, Tensor};

/// Writes straight to the process stderr so the line survives the test
/// harness's output capture.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {criterion}: {verdict} ({detail})");
}

pub fn random_images(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Tensor::from_fn(&[n, 3, h, w], |_| rng.random::<f64>())).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Content,
    Transformed,
    Conv1,
    AdversarialD,
    AdversarialG,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Content,
        LossKind::Transformed,
        LossKind::Conv1,
        LossKind::AdversarialD,
        LossKind::AdversarialG,
    ];

    /// Which of (encoder, decoder, transformer, discriminator) the loss is
    /// differentiated against.
    pub fn groups(self) -> [bool; 4] {
        match self {
            LossKind::Content | LossKind::Conv1 | LossKind::AdversarialG => [true, true, false, false],
            LossKind::Transformed => [true, true, true, false],
            LossKind::AdversarialD => [false, false, false, true],
        }
    }
}

fn param_sets(nets: &Networks) -> [&ParamSet; 4] {
    [
        &nets.encoder.params,
        &nets.decoder.params,
        &nets.transformer.params,
        &nets.discriminator.params,
    ]
}

fn param_sets_mut(nets: &mut Networks) -> [&mut ParamSet; 4] {
    [
        &mut nets.encoder.params,
        &mut nets.decoder.params,
        &mut nets.transformer.params,
        &mut nets.discriminator.params,
    ]
}

/// Builds the loss graph with the selected groups as trainable leaves.
pub fn loss_graph(nets: &Networks, kind: LossKind, x: &Tensor, style: &Tensor) -> (Var, [Bound; 4]) {
    let g = kind.groups();
    let sets = param_sets(nets);
    let b: [Bound; 4] = std::array::from_fn(|i| sets[i].bind(g[i]));
    let xv = Var::constant(x.clone());
    let ex = nets.encoder.forward(&b[0], &xv).unwrap();
    let y = nets.decoder.forward(&b[1], &ex.z).unwrap();
    let loss = match kind {
        LossKind::Content => {
            let ey = nets.encoder.forward(&b[0], &y).unwrap();
            losses::content_loss_var(&ex.z, &ey.z).unwrap()
        }
        LossKind::Transformed => {
            let tx = nets.transformer.forward(&b[2], &xv).unwrap();
            let ty = nets.transformer.forward(&b[2], &y).unwrap();
            ops::normalized_sq_dist(&tx, &ty).unwrap()
        }
        LossKind::Conv1 => {
            let ey = nets.encoder.forward(&b[0], &y).unwrap();
            ops::normalized_sq_dist(&ex.conv1, &ey.conv1).unwrap()
        }
        LossKind::AdversarialD => {
            let real = nets.discriminator.forward(&b[3], &Var::constant(style.clone())).unwrap();
            let fake = nets.discriminator.forward(&b[3], &y).unwrap();
            losses::adversarial_d_var(&real, &fake)
        }
        LossKind::AdversarialG => {
            let fake = nets.discriminator.forward(&b[3], &y).unwrap();
            losses::adversarial_g_var(&fake, GeneratorLoss::NonSaturating)
        }
    };
    (loss, b)
}

pub fn loss_value(nets: &Networks, kind: LossKind, x: &Tensor, style: &Tensor) -> f64 {
    loss_graph(nets, kind, x, style).0.value().item()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    /// `(group, param, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central finite differences with a single step at `n_coords` uniformly
/// drawn parameter coordinates of the differentiated groups.
pub fn grad_check(nets: &Networks, kind: LossKind, x: &Tensor, style: &Tensor, n_coords: usize, step: f64, seed: u64) -> GradCheck {
    grad_check_steps(nets, kind, x, style, n_coords, &[step], REL_FLOOR, seed)
}

/// Like [`grad_check`], but a coordinate's error is the smallest over several
/// step sizes. Piecewise-smooth losses (ReLU kinks) can put a kink inside one
/// step's stencil; a genuine backpropagation error disagrees at every step.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_steps(
    nets: &Networks,
    kind: LossKind,
    x: &Tensor,
    style: &Tensor,
    n_coords: usize,
    steps: &[f64],
    floor: f64,
    seed: u64,
) -> GradCheck {
    let (loss, bound) = loss_graph(nets, kind, x, style);
    let grads = loss.backward();
    let analytic: Vec<Vec<Tensor>> = bound.iter().map(|b| b.grads(&grads)).collect();
    drop(grads);

    let g = kind.groups();
    let mut coords = Vec::new();
    for (gi, set) in param_sets(nets).into_iter().enumerate() {
        if g[gi] {
            for pi in 0..set.len() {
                for ei in 0..set.get(pi).numel() {
                    coords.push((gi, pi, ei));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = nets.clone();
    let mut out = GradCheck {
        coordinates: n_coords,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
        worst: None,
    };
    for _ in 0..n_coords {
        let (gi, pi, ei) = coords[rng.random_range(0..coords.len())];
        let orig = param_sets(&work)[gi].get(pi).data()[ei];
        let a = analytic[gi][pi].data()[ei];
        let (mut e, mut numeric) = (f64::INFINITY, f64::NAN);
        for &step in steps {
            param_sets_mut(&mut work)[gi].get_mut(pi).data_mut()[ei] = orig + step;
            let plus = loss_value(&work, kind, x, style);
            param_sets_mut(&mut work)[gi].get_mut(pi).data_mut()[ei] = orig - step;
            let minus = loss_value(&work, kind, x, style);
            param_sets_mut(&mut work)[gi].get_mut(pi).data_mut()[ei] = orig;
            let n = (plus - minus) / (2.0 * step);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err < e {
                (e, numeric) = (err, n);
            }
        }
        if e > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = out.max_rel_err.max(e);
            out.worst = Some((gi, pi, ei, a, numeric));
        }
        out.max_abs_grad = out.max_abs_grad.max(a.abs());
    }
    out
}
