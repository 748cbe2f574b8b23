use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor};

/// Compares reverse-mode gradients of a scalar-valued `f` against central
/// finite differences at step `eps`, perturbing each element of `input`.
///
/// Returns the max over elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&GradTape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check: eps must be positive"));
    }

    // Analytic gradient.
    let x = input.requires_grad();
    let tape = GradTape::new();
    let loss = f(&tape, &x)?;
    if !loss.is_scalar() {
        return Err(Error::contract(format!(
            "grad_check expects a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let analytic = if loss.is_tracked() {
        tape.backward(&loss)?;
        x.grad().unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        // f ignored its input entirely; the true gradient is zero.
        vec![0.0; x.numel()]
    };

    // Central differences.
    let base = input.to_vec();
    let shape = input.shape().to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0.0f64, 0.0f64);
    for i in 0..base.len() {
        let eval = |delta: f32| -> Result<f64> {
            let mut d = base.clone();
            d[i] += delta;
            let t = Tensor::from_vec(&shape, d)?;
            let tape = GradTape::disabled();
            Ok(f(&tape, &t)?.item() as f64)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps as f64);
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = (i, a, numeric);
        }
    }
    if std::env::var("DRB_GRADCHECK_DEBUG").is_ok() && max_rel > 1e-3 {
        eprintln!(
            "gradcheck worst: elem {} analytic {:.6e} numeric {:.6e} rel {:.3e}",
            worst.0, worst.1, worst.2, max_rel
        );
    }
    Ok(max_rel)
}

/// Same check for a `requires_grad` parameter that is referenced inside
/// `forward` (rather than passed in): gradients are read off the parameter
/// and finite differences perturb its storage in place.
pub fn grad_check_param<F>(forward: F, param: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&GradTape) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check: eps must be positive"));
    }
    param.zero_grad();
    let tape = GradTape::new();
    let loss = f_scalar(&forward, &tape)?;
    let analytic = if loss.is_tracked() {
        tape.backward(&loss)?;
        param.grad().unwrap_or_else(|| vec![0.0; param.numel()])
    } else {
        vec![0.0; param.numel()]
    };
    param.zero_grad();

    let mut max_rel = 0.0f64;
    for i in 0..param.numel() {
        let saved = param.data()[i];
        let probe = |delta: f32| -> Result<f64> {
            param.update_data(|d| d[i] = saved + delta);
            let tape = GradTape::disabled();
            let v = f_scalar(&forward, &tape).map(|t| t.item() as f64);
            param.update_data(|d| d[i] = saved);
            v
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps as f64);
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn f_scalar<F>(forward: &F, tape: &GradTape) -> Result<Tensor>
where
    F: Fn(&GradTape) -> Result<Tensor>,
{
    let loss = forward(tape)?;
    if !loss.is_scalar() {
        return Err(Error::contract(format!(
            "grad_check expects a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    Ok(loss)
}
