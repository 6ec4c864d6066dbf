//! Central finite-difference verification of analytic gradients.
//!
//! Complex parameters are perturbed on their real and imaginary
//! components separately; the reported figure is the max over components
//! of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::{Buffer, Tensor};
use crate::error::{invalid, Result};

fn component_count(t: &Tensor) -> usize {
    t.buffer().real_scalar_count()
}

fn get_component(b: &Buffer, i: usize) -> f64 {
    match b {
        Buffer::Real(v) => v[i],
        Buffer::Complex(v) => {
            if i % 2 == 0 {
                v[i / 2].re
            } else {
                v[i / 2].im
            }
        }
    }
}

fn bump_component(t: &mut Tensor, i: usize, delta: f64) {
    match t.buffer_mut() {
        Buffer::Real(v) => v[i] += delta,
        Buffer::Complex(v) => {
            if i % 2 == 0 {
                v[i / 2].re += delta;
            } else {
                v[i / 2].im += delta;
            }
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Check the gradient of `f(theta)` (a real scalar) against central
/// differences with step `eps`; returns the max relative error.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(invalid("grad_check", "eps must be positive"));
    }
    let mut g = Graph::new();
    let v = g.leaf(theta.clone().with_requires_grad(true));
    let loss = f(&mut g, v)?;
    g.scalar_value(loss)?;
    let mut scratch = ParamSet::new();
    let mut grads = g.backward(loss, &mut scratch)?;
    let analytic = grads
        .take(v)
        .ok_or_else(|| invalid("grad_check", "no gradient reached theta"))?;

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = g.leaf(t.clone().with_requires_grad(false));
        let loss = f(&mut g, v)?;
        g.scalar_value(loss)
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..component_count(theta) {
        let mut plus = theta.clone();
        bump_component(&mut plus, i, eps);
        let mut minus = theta.clone();
        bump_component(&mut minus, i, -eps);
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = get_component(analytic.buffer(), i);
        max_rel = max_rel.max(rel_error(a, numeric));
    }
    Ok(max_rel)
}

/// Finite-difference check for every entry of a ParamSet against the
/// gradients produced by one backward pass of `build`. Returns the max
/// relative error per named entry.
pub fn grad_check_params<F>(
    build: F,
    params: &ParamSet,
    eps: f64,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(invalid("grad_check", "eps must be positive"));
    }
    let mut with_grads = params.clone();
    with_grads.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, &with_grads)?;
    g.scalar_value(loss)?;
    g.backward(loss, &mut with_grads)?;

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::no_grad();
        let loss = build(&mut g, ps)?;
        g.scalar_value(loss)
    };

    let mut report = Vec::new();
    for id in params.ids() {
        let t = with_grads.get(id);
        let analytic = t
            .grad
            .clone()
            .unwrap_or_else(|| Buffer::zeros(t.dtype(), t.numel()));
        let mut max_rel: f64 = 0.0;
        for i in 0..component_count(t) {
            let mut plus = params.clone();
            bump_component(plus.get_mut(id), i, eps);
            let mut minus = params.clone();
            bump_component(minus.get_mut(id), i, -eps);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            max_rel = max_rel.max(rel_error(get_component(&analytic, i), numeric));
        }
        report.push((params.name(id).to_string(), max_rel));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::tensor::Complex64;

    #[test]
    fn sum_of_squares_is_exact_to_fd_noise() {
        let mut rng = StreamRng::new(3, "gc-sq");
        let theta = Tensor::from_real(&[5], rng.normal_vec(5, 1.0)).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn constant_function_reports_error_below_floor() {
        let theta = Tensor::from_real(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let err = grad_check(
            |g, v| {
                let zero = g.scale(v, 0.0)?;
                g.sum(zero)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn two_layer_composition_matches_fd() {
        // matmul -> relu -> matmul -> sum of squares
        let mut rng = StreamRng::new(11, "gc-2layer");
        let w1 = Tensor::from_real(&[4, 6], rng.normal_vec(24, 0.8)).unwrap();
        let x = Tensor::from_real(&[3, 4], rng.normal_vec(12, 1.0)).unwrap();
        let w2 = Tensor::from_real(&[6, 2], rng.normal_vec(12, 0.8)).unwrap();
        let err = grad_check(
            |g, w1v| {
                let xv = g.constant(x.clone());
                let w2v = g.constant(w2.clone());
                let h = g.matmul(xv, w1v)?;
                let h = g.relu(h)?;
                let y = g.matmul(h, w2v)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &w1,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn spectral_round_trip_gradients_match_fd() {
        // x -> rfft2 -> gate by a complex filter -> irfft2 -> sum of squares,
        // checked for the input and for the filter, even and odd widths.
        // This pins the mirrored-column weighting in the transform adjoints.
        for &(h, w) in &[(4usize, 4usize), (3, 5), (4, 6), (5, 3)] {
            let d = 2;
            let mut rng = StreamRng::new(600 + w as u64, "gc-fft");
            let x = Tensor::from_real(&[h, w, d], rng.normal_vec(h * w * d, 1.0)).unwrap();
            let wh = w / 2 + 1;
            let filt: Vec<Complex64> = (0..h * wh * d)
                .map(|_| Complex64::new(rng.normal(), rng.normal()))
                .collect();
            let filter = Tensor::from_complex(&[h, wh, d], filt).unwrap();

            // gradient w.r.t. the spatial input
            let f1 = filter.clone();
            let err_x = grad_check(
                move |g, xv| {
                    let fv = g.constant(f1.clone());
                    let s = g.rfft2(xv)?;
                    let gated = g.mul(s, fv)?;
                    let y = g.irfft2(gated, w)?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err_x < 1e-6, "{h}x{w} input grad err {err_x}");

            // gradient w.r.t. the complex filter
            let x2 = x.clone();
            let err_f = grad_check(
                move |g, fv| {
                    let xv = g.constant(x2.clone());
                    let s = g.rfft2(xv)?;
                    let gated = g.mul(s, fv)?;
                    let y = g.irfft2(gated, w)?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                &filter,
                1e-5,
            )
            .unwrap();
            assert!(err_f < 1e-6, "{h}x{w} filter grad err {err_f}");
        }
    }

    #[test]
    fn truncate_and_pad_gradients_match_fd() {
        let (h, w, d) = (8usize, 8usize, 2usize);
        let mut rng = StreamRng::new(77, "gc-trunc");
        let x = Tensor::from_real(&[h, w, d], rng.normal_vec(h * w * d, 1.0)).unwrap();
        let err = grad_check(
            move |g, xv| {
                let s = g.rfft2(xv)?;
                let t = g.truncate_modes(s, 0.5)?;
                let p = g.pad_modes(t, h, w)?;
                let y = g.irfft2(p, w)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "truncate/pad grad err {err}");
    }

    #[test]
    fn complex_parameters_are_checked_per_component() {
        // loss = sum over components of (W @ x)^2 through a component ReLU
        let mut rng = StreamRng::new(17, "gc-cplx");
        let vals: Vec<Complex64> = (0..6)
            .map(|_| Complex64::new(rng.normal(), rng.normal()))
            .collect();
        let theta = Tensor::from_complex(&[2, 3], vals).unwrap();
        let x = Tensor::from_complex(
            &[3, 2],
            (0..6).map(|_| Complex64::new(rng.normal(), rng.normal())).collect(),
        )
        .unwrap();
        let err = grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let y = g.matmul(v, xv)?;
                let y = g.relu(y)?;
                let comps = g.complex_to_real(y)?;
                let sq = g.mul(comps, comps)?;
                g.sum(sq)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
