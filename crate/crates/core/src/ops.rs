//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Reflection-padded "same" convolution; output spatial size is
/// `ceil(input / stride)`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, stride: usize) -> Result<Var> {
    let (out, padded) =
        kernels::conv2d_forward(x.value(), weight.value(), bias.map(|b| b.value()), stride)?;
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let x_shape = x.value().shape().to_vec();
    Ok(Var::from_op(out, parents, move |g, p| {
        let grads = kernels::conv2d_backward(g, &x_shape, &padded, p[1].value(), stride)
            .expect("conv backward shapes were validated in forward");
        let mut res = vec![
            p[0].requires_grad().then_some(grads.input),
            p[1].requires_grad().then_some(grads.weight),
        ];
        if p.len() == 3 {
            res.push(p[2].requires_grad().then_some(grads.bias));
        }
        res
    }))
}

/// Instance normalisation with an optional per-channel affine `(gamma, beta)`.
pub fn instance_norm(x: &Var, affine: Option<(&Var, &Var)>, eps: f64) -> Result<Var> {
    let [_, c, _, _] = x.value().dims4()?;
    let cache = kernels::instance_norm_forward(x.value(), eps)?;
    let (out, parents) = match affine {
        Some((gamma, beta)) => {
            if gamma.value().numel() != c || beta.value().numel() != c {
                return Err(Error::Shape(format!(
                    "instance norm affine expects {} channels",
                    c
                )));
            }
            let out =
                kernels::channel_affine(&cache.xhat, gamma.value().data(), beta.value().data())?;
            (out, vec![x.clone(), gamma.clone(), beta.clone()])
        }
        None => (cache.xhat.clone(), vec![x.clone()]),
    };
    let cache = Rc::new(cache);
    Ok(Var::from_op(out, parents, move |g, p| {
        let [_, c, h, w] = g.dims4().expect("rank-4 gradient");
        let plane = h * w;
        if p.len() == 1 {
            return vec![Some(
                kernels::instance_norm_backward(g, &cache).expect("validated shape"),
            )];
        }
        let gamma = p[1].value().data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (idx, (gp, xp)) in g
            .data()
            .chunks(plane)
            .zip(cache.xhat.data().chunks(plane))
            .enumerate()
        {
            let ch = idx % c;
            dbeta[ch] += gp.iter().sum::<f64>();
            dgamma[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
        }
        let dx = if p[0].requires_grad() {
            let zero = vec![0.0; c];
            let g_xhat = kernels::channel_affine(g, gamma, &zero).expect("validated shape");
            Some(kernels::instance_norm_backward(&g_xhat, &cache).expect("validated shape"))
        } else {
            None
        };
        vec![
            dx,
            Some(Tensor::new(&[c], dgamma).expect("len c")),
            Some(Tensor::new(&[c], dbeta).expect("len c")),
        ]
    }))
}

fn unary(x: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let out = x.value().map(f);
    let y = out.clone();
    Var::from_op(out, vec![x.clone()], move |g, p| {
        let xd = p[0].value().data();
        let data = g
            .data()
            .iter()
            .zip(xd)
            .zip(y.data())
            .map(|((gv, xv), yv)| gv * df(*xv, *yv))
            .collect();
        vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
    })
}

/// NaN passes through so divergence surfaces as a non-finite loss.
pub fn relu(x: &Var) -> Var {
    unary(x, |v| if v < 0.0 { 0.0 } else { v }, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(x: &Var, slope: f64) -> Var {
    unary(
        x,
        move |v| if v > 0.0 { v } else { slope * v },
        move |xv, _| if xv > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid(x: &Var) -> Var {
    unary(x, kernels::sigmoid, |_, y| y * (1.0 - y))
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    if a.value().shape() != b.value().shape() {
        return Err(Error::Shape(format!(
            "cannot add {:?} and {:?}",
            a.value().shape(),
            b.value().shape()
        )));
    }
    let mut out = a.value().clone();
    out.add_assign(b.value());
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], |g, _| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn scale(x: &Var, factor: f64) -> Var {
    let out = x.value().map(|v| v * factor);
    Var::from_op(out, vec![x.clone()], move |g, _| {
        vec![Some(g.map(|v| v * factor))]
    })
}

/// Sum of scalar variables.
pub fn sum_scalars(terms: &[Var]) -> Var {
    let total: f64 = terms.iter().map(|t| t.value().item()).sum();
    Var::from_op(Tensor::scalar(total), terms.to_vec(), |g, p| {
        p.iter().map(|_| Some(g.clone())).collect()
    })
}

pub fn upsample_nearest2x(x: &Var) -> Result<Var> {
    let out = kernels::upsample_nearest2x(x.value())?;
    Ok(Var::from_op(out, vec![x.clone()], |g, _| {
        vec![Some(
            kernels::upsample_nearest2x_backward(g).expect("rank-4 gradient"),
        )]
    }))
}

pub fn max_pool2(x: &Var) -> Result<Var> {
    let (out, arg) = kernels::max_pool2_forward(x.value())?;
    Ok(Var::from_op(out, vec![x.clone()], move |g, p| {
        let mut gx = Tensor::zeros(p[0].value().shape());
        let d = gx.data_mut();
        for (gv, &i) in g.data().iter().zip(&arg) {
            d[i] += gv;
        }
        vec![Some(gx)]
    }))
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten(x: &Var) -> Result<Var> {
    let shape = x.value().shape().to_vec();
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let out = x.value().clone().reshape(&[n, rest])?;
    Ok(Var::from_op(out, vec![x.clone()], move |g, _| {
        vec![Some(g.clone().reshape(&shape).expect("same numel"))]
    }))
}

/// `x [N, F] * weight[O, F]^T + bias[O]`.
pub fn linear(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    let (xs, ws) = (x.value().shape(), weight.value().shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.value().numel() != ws[0] {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            xs,
            ws,
            bias.value().shape()
        )));
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let xd = x.value().data();
    let wd = weight.value().data();
    let bd = bias.value().data();
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        let xr = &xd[i * f..(i + 1) * f];
        for j in 0..o {
            let wr = &wd[j * f..(j + 1) * f];
            out[i * o + j] = bd[j] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let out = Tensor::new(&[n, o], out)?;
    Ok(Var::from_op(
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        move |g, p| {
            let gd = g.data();
            let xd = p[0].value().data();
            let wd = p[1].value().data();
            let mut gx = vec![0.0; n * f];
            let mut gw = vec![0.0; o * f];
            let mut gb = vec![0.0; o];
            for i in 0..n {
                for j in 0..o {
                    let gv = gd[i * o + j];
                    gb[j] += gv;
                    for k in 0..f {
                        gx[i * f + k] += gv * wd[j * f + k];
                        gw[j * f + k] += gv * xd[i * f + k];
                    }
                }
            }
            vec![
                Some(Tensor::new(&[n, f], gx).expect("shape")),
                Some(Tensor::new(&[o, f], gw).expect("shape")),
                Some(Tensor::new(&[o], gb).expect("shape")),
            ]
        },
    ))
}

/// Reparameterises `v` as `v / ||v||` over the whole tensor.
pub fn unit_norm(v: &Var) -> Result<Var> {
    let norm = v.value().sq_norm().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite("weight-normalised kernel".into()));
    }
    let out = v.value().map(|x| x / norm);
    let w = out.clone();
    Ok(Var::from_op(out, vec![v.clone()], move |g, _| {
        // d(v/|v|) = (g - w <w, g>) / |v|
        let dot: f64 = g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let data = g
            .data()
            .iter()
            .zip(w.data())
            .map(|(gv, wv)| (gv - wv * dot) / norm)
            .collect();
        vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
    }))
}

/// Batch mean of `(1/d) * ||a_i - b_i||^2`, with `d` the per-sample element
/// count.
pub fn normalized_sq_dist(a: &Var, b: &Var) -> Result<Var> {
    let shape = a.value().shape();
    if shape != b.value().shape() || shape.is_empty() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            shape,
            b.value().shape()
        )));
    }
    let n = shape[0];
    let total = a.value().numel();
    let diff: Vec<f64> = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(x, y)| x - y)
        .collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / total as f64;
    let coef = 2.0 / total as f64;
    debug_assert!(n >= 1);
    let diff = Rc::new(diff);
    Ok(Var::from_op(
        Tensor::scalar(value),
        vec![a.clone(), b.clone()],
        move |g, p| {
            let s = g.item() * coef;
            let ga: Vec<f64> = diff.iter().map(|d| s * d).collect();
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            let shape = p[0].value().shape();
            vec![
                Some(Tensor::new(shape, ga).expect("shape")),
                Some(Tensor::new(shape, gb).expect("shape")),
            ]
        },
    ))
}

/// Mean over all cells of `ln(max(sigmoid(sign * x), LOG_CLAMP))`.
///
/// With `sign = -1` this is `ln(1 - sigmoid(x))`.
pub fn mean_log_sigmoid(x: &Var, sign: f64) -> Var {
    let floor = LOG_CLAMP.ln();
    let m = x.value().numel() as f64;
    let value = x
        .value()
        .data()
        .iter()
        .map(|&v| {
            // Written out rather than `f64::max`, which would turn NaN into the floor.
            let l = kernels::log_sigmoid(sign * v);
            if l < floor { floor } else { l }
        })
        .sum::<f64>()
        / m;
    Var::from_op(Tensor::scalar(value), vec![x.clone()], move |g, p| {
        let s = g.item() / m;
        let data = p[0]
            .value()
            .data()
            .iter()
            .map(|&v| {
                let z = sign * v;
                if kernels::log_sigmoid(z) > floor {
                    s * sign * (1.0 - kernels::sigmoid(z))
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(Tensor::new(p[0].value().shape(), data).expect("shape"))]
    })
}

/// Mean softmax cross-entropy of `logits [N, K]` against class labels.
pub fn softmax_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.value().shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::OutOfRange(format!("label {} with {} classes", bad, k)));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.value().data()[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..k {
            probs[i * k + j] = (row[j] - mx).exp() / z;
        }
        loss -= row[labels[i]] - mx - z.ln();
    }
    let labels = labels.to_vec();
    Ok(Var::from_op(
        Tensor::scalar(loss / n as f64),
        vec![logits.clone()],
        move |g, _| {
            let s = g.item() / n as f64;
            let mut gd = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                gd[i * k + l] -= 1.0;
            }
            for v in &mut gd {
                *v *= s;
            }
            vec![Some(Tensor::new(&[n, k], gd).expect("shape"))]
        },
    ))
}
