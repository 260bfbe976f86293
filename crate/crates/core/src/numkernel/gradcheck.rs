use super::{DenseNet, Parameterized};
use crate::error::Result;

const STENCIL_STEP: f64 = 1e-4;

/// Gradient pairs whose combined magnitude is below this are compared in absolute terms.
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ABSOLUTE_FLOOR)
}

/// Max relative error between `analytic` (flattened in the model's parameter order)
/// and a five-point central-difference estimate of `∂loss/∂θ`.
pub fn max_relative_error<M, F>(model: &M, analytic: &[f64], loss: F) -> f64
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let base = model.to_flat();
    assert_eq!(base.len(), analytic.len(), "analytic gradient length");
    let mut probe = model.clone();
    let mut flat = base.clone();
    let mut eval_at = |i: usize, offset: f64, flat: &mut Vec<f64>| {
        flat[i] = base[i] + offset;
        probe.load_flat(flat).expect("same topology");
        let v = loss(&probe);
        flat[i] = base[i];
        v
    };
    let h = STENCIL_STEP;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let f2 = eval_at(i, 2.0 * h, &mut flat);
        let f1 = eval_at(i, h, &mut flat);
        let m1 = eval_at(i, -h, &mut flat);
        let m2 = eval_at(i, -2.0 * h, &mut flat);
        let numeric = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

/// Gradient check for any parameterized model given a function returning
/// `(loss, gradients-as-model)`.
pub fn grad_check_model<M, F>(model: &M, loss_and_grad: F) -> f64
where
    M: Parameterized + Clone,
    F: Fn(&M) -> (f64, M),
{
    let (_, grads) = loss_and_grad(model);
    max_relative_error(model, &grads.to_flat(), |m| loss_and_grad(m).0)
}

/// Gradient check of [`DenseNet::backward`] for a scalar loss of the network output.
///
/// `loss` maps the output `y` to `(L(y), ∂L/∂y)`.
pub fn grad_check<F>(net: &DenseNet, x: &[f64], loss: F) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (y, cache) = net.forward(x)?;
    let (_, upstream) = loss(&y);
    let (grads, _) = net.backward(&cache, &upstream)?;
    Ok(max_relative_error(net, &grads.to_flat(), |n| {
        loss(&n.apply(x).expect("validated input")).0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Activation, DenseLayer, RngStream, Tensor2};

    fn sq_loss(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |y: &[f64]| {
            let r: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
            (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r)
        }
    }

    #[test]
    fn linear_least_squares_matches_closed_form() {
        // L = ½‖Wx + b − t‖²  =>  dW = r xᵀ, db = r
        let net = DenseNet::from_layers(
            vec![DenseLayer {
                weight: Tensor2::from_vec(2, 3, vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.3]).unwrap(),
                bias: vec![0.2, -0.1],
            }],
            Activation::Identity,
        )
        .unwrap();
        let x = [1.0, 2.0, -1.0];
        let t = vec![0.3, 0.7];
        let y = net.apply(&x).unwrap();
        let r: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a - b).collect();
        let mut closed = Vec::new();
        for ri in &r {
            for xj in &x {
                closed.push(ri * xj);
            }
        }
        closed.extend_from_slice(&r);
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &r).unwrap();
        for (a, b) in grads.to_flat().iter().zip(&closed) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(grad_check(&net, &x, sq_loss(t)).unwrap() < 1e-6);
    }

    #[test]
    fn tanh_two_layer_net() {
        let mut rng = RngStream::new(17);
        let net = DenseNet::random(&[3, 6, 2], Activation::Tanh, 1.0, &mut rng).unwrap();
        let err = grad_check(&net, &[0.4, -0.8, 0.1], sq_loss(vec![0.5, -0.5])).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut rng = RngStream::new(1);
        let net = DenseNet::random(&[2, 3, 1], Activation::Tanh, 1.0, &mut rng).unwrap();
        let err = grad_check(&net, &[1.0, 1.0], |y| (3.0, vec![0.0; y.len()])).unwrap();
        assert_eq!(err, 0.0);
    }
}
