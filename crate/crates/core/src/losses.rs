//! Training objectives.
//!
//! Each loss exists in two forms: a graph form over [`Var`] used by the
//! training loop and the gradient checks, and a plain form over tensors for
//! evaluation and reporting. The plain form simply evaluates the graph form
//! on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::{DiscriminatorOutput, ImageBatch, LatentCode, Networks};
use crate::ops;
use crate::tensor::Tensor;

/// Relative weight of the adversarial term in the encoder-decoder objective.
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Form of the encoder-decoder adversarial objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-E[log D(G(E(x)))]`.
    #[default]
    NonSaturating,
    /// `E[log(1 - D(G(E(x))))]`, the literal min-max objective.
    Saturating,
}

/// Which image-space term accompanies the latent content loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLoss {
    /// Squared difference after the learned transformer block.
    #[default]
    Transformed,
    /// Squared difference of the encoder's first-layer activations.
    Conv1,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_content: f64,
    pub l_transformed: f64,
    /// Discriminator objective (the quantity `D` maximises).
    pub l_adv_d: f64,
    /// Encoder-decoder adversarial term.
    pub l_adv_g: f64,
    pub total_eg: f64,
    pub lambda: f64,
    pub d_accuracy_batch: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.l_content,
            self.l_transformed,
            self.l_adv_d,
            self.l_adv_g,
            self.total_eg,
            self.d_accuracy_batch,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_content={:.6e} l_transformed={:.6e} l_adv_d={:.6e} l_adv_g={:.6e} total_eg={:.6e} d_acc={:.3}",
            self.l_content,
            self.l_transformed,
            self.l_adv_d,
            self.l_adv_g,
            self.total_eg,
            self.d_accuracy_batch
        )
    }
}

pub fn content_loss_var(z_in: &Var, z_out: &Var) -> Result<Var> {
    ops::normalized_sq_dist(z_in, z_out)
}

/// Batch mean of `||z_in - z_out||^2 / d`.
pub fn style_aware_content_loss(z_in: &LatentCode, z_out: &LatentCode) -> Result<f64> {
    let a = Var::constant(z_in.tensor().clone());
    let b = Var::constant(z_out.tensor().clone());
    Ok(content_loss_var(&a, &b)?.value().item())
}

/// Eq. (1)-style objective summed over all five logit maps:
/// `sum_s mean log D_s(real) + mean log(1 - D_s(fake))`.
pub fn adversarial_d_var(
    real: &DiscriminatorOutput<Var>,
    fake: &DiscriminatorOutput<Var>,
) -> Var {
    let terms: Vec<Var> = real
        .maps()
        .zip(fake.maps())
        .flat_map(|(r, f)| [ops::mean_log_sigmoid(r, 1.0), ops::mean_log_sigmoid(f, -1.0)])
        .collect();
    ops::sum_scalars(&terms)
}

pub fn adversarial_g_var(fake: &DiscriminatorOutput<Var>, form: GeneratorLoss) -> Var {
    let terms: Vec<Var> = fake
        .maps()
        .map(|f| match form {
            GeneratorLoss::NonSaturating => ops::scale(&ops::mean_log_sigmoid(f, 1.0), -1.0),
            GeneratorLoss::Saturating => ops::mean_log_sigmoid(f, -1.0),
        })
        .collect();
    ops::sum_scalars(&terms)
}

fn constant_output(out: &DiscriminatorOutput) -> Result<DiscriminatorOutput<Var>> {
    for m in out.maps() {
        if !m.all_finite() {
            return Err(Error::NonFinite("discriminator logits".into()));
        }
    }
    Ok(DiscriminatorOutput {
        main: Var::constant(out.main.clone()),
        aux: out.aux.clone().map(Var::constant),
    })
}

pub fn adversarial_d_loss(d_real: &DiscriminatorOutput, d_fake: &DiscriminatorOutput) -> Result<f64> {
    Ok(adversarial_d_var(&constant_output(d_real)?, &constant_output(d_fake)?)
        .value()
        .item())
}

pub fn adversarial_g_loss(d_fake: &DiscriminatorOutput, form: GeneratorLoss) -> Result<f64> {
    Ok(adversarial_g_var(&constant_output(d_fake)?, form).value().item())
}

pub fn total_loss(l_c: f64, l_t: f64, l_adv_g: f64, lambda: f64) -> f64 {
    l_c + l_t + lambda * l_adv_g
}

pub fn total_loss_var(l_c: &Var, l_t: &Var, l_adv_g: &Var, lambda: f64) -> Var {
    ops::sum_scalars(&[l_c.clone(), l_t.clone(), ops::scale(l_adv_g, lambda)])
}

fn same_shape(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            x.tensor().shape(),
            y.tensor().shape()
        )));
    }
    Ok(())
}

/// Batch mean of `||T(x) - T(y)||^2 / (C H W)` with the network's transformer.
pub fn transformed_image_loss(x: &ImageBatch, y: &ImageBatch, nets: &Networks) -> Result<f64> {
    same_shape(x, y)?;
    let tx = nets.transform(x)?;
    let ty = nets.transform(y)?;
    Ok(ops::normalized_sq_dist(&Var::constant(tx), &Var::constant(ty))?
        .value()
        .item())
}

/// Batch mean of `||phi(x) - phi(y)||^2 / d` on the encoder's first
/// convolutional layer activations.
pub fn conv1_feature_loss(x: &ImageBatch, y: &ImageBatch, nets: &Networks) -> Result<f64> {
    same_shape(x, y)?;
    let p = nets.encoder.params.bind(false);
    let fx = nets.encoder.forward(&p, &Var::constant(x.tensor().clone()))?.conv1;
    let fy = nets.encoder.forward(&p, &Var::constant(y.tensor().clone()))?.conv1;
    Ok(ops::normalized_sq_dist(&fx, &fy)?.value().item())
}

/// Helper for tests and tooling: a discriminator output with every cell set
/// to `logit` and the given map sizes.
pub fn uniform_output(logit: f64, main: [usize; 2], aux: [[usize; 2]; 4]) -> DiscriminatorOutput {
    let map = |[h, w]: [usize; 2]| Tensor::full(&[1, 1, h, w], logit);
    DiscriminatorOutput {
        main: map(main),
        aux: aux.map(map),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(data: Vec<f64>, shape: &[usize]) -> LatentCode {
        LatentCode::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn content_loss_closed_forms() {
        let a = latent(vec![1.0, 2.0], &[1, 2, 1, 1]);
        let b = latent(vec![1.0, 0.0], &[1, 2, 1, 1]);
        assert!((style_aware_content_loss(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(style_aware_content_loss(&a, &a).unwrap(), 0.0);
        let zeros = latent(vec![0.0; 24], &[2, 3, 2, 2]);
        let ones = latent(vec![1.0; 24], &[2, 3, 2, 2]);
        assert!((style_aware_content_loss(&zeros, &ones).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn content_loss_shape_mismatch() {
        let a = latent(vec![0.0; 4], &[1, 4, 1, 1]);
        let b = latent(vec![0.0; 4], &[1, 1, 2, 2]);
        assert!(matches!(style_aware_content_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 0.5, 10.0, DEFAULT_LAMBDA) - 1.51).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 3.5, 1.0), 3.5);
        assert_eq!(total_loss(0.2, 0.3, 1e9, 0.0), 0.5);
    }

    #[test]
    fn generator_forms_differ_in_sign() {
        let o = uniform_output(0.0, [1, 1], [[2, 2]; 4]);
        let ns = adversarial_g_loss(&o, GeneratorLoss::NonSaturating).unwrap();
        let sat = adversarial_g_loss(&o, GeneratorLoss::Saturating).unwrap();
        assert!((ns - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((sat + 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_logits() {
        let o = uniform_output(f64::NAN, [1, 1], [[1, 1]; 4]);
        assert!(adversarial_g_loss(&o, GeneratorLoss::NonSaturating).is_err());
    }
}
