//! Adam with exponential learning-rate decay, plus a plain SGD alternative.
//!
//! One [`AdamState`] owns the moment buffers for one parameter set (a list
//! of tensors); the caller feeds gradients pulled off a tape after
//! `backward`.

use crate::autodiff::{TapeError, Tensor};
use crate::real::Real;

/// Moment buffers and step counter for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R: Real> {
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    pub step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            beta1: R::from_f64(0.9),
            beta2: R::from_f64(0.999),
            eps: R::from_f64(1e-8),
            step: 0,
            m: param_sizes.iter().map(|&n| vec![R::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![R::zero(); n]).collect(),
        }
    }

    pub fn for_tensors(params: &[&Tensor<R>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|t| t.numel()).collect();
        Self::new(&sizes)
    }

    /// Flattened moment buffers for checkpoint embedding, in parameter order.
    pub fn buffers(&self) -> (&[Vec<R>], &[Vec<R>]) {
        (&self.m, &self.v)
    }

    pub fn load_buffers(&mut self, m: Vec<Vec<R>>, v: Vec<Vec<R>>, step: u64) -> Result<(), TapeError> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(TapeError::ShapeMismatch {
                op: "adam",
                detail: format!("buffer count {}/{} vs expected {}", m.len(), v.len(), self.m.len()),
            });
        }
        for (dst, src) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if dst.len() != src.len() {
                return Err(TapeError::ShapeMismatch {
                    op: "adam",
                    detail: format!("buffer size {} vs expected {}", src.len(), dst.len()),
                });
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

/// One bias-corrected Adam step over a parameter set.
///
/// `params[i]` is updated in place from `grads[i]`; the slices must line up
/// with the sizes the state was built with.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[&[R]],
    state: &mut AdamState<R>,
    lr: R,
) -> Result<(), TapeError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TapeError::ShapeMismatch {
            op: "adam",
            detail: format!(
                "{} params, {} grads, state built for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if lr <= R::zero() {
        return Err(TapeError::InvalidArg { op: "adam", detail: format!("lr {} must be positive", lr) });
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = R::one() - R::from_f64(b1.to_f64().powf(t));
    let bc2 = R::one() - R::from_f64(b2.to_f64().powf(t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.numel() != g.len() || p.numel() != m.len() {
            return Err(TapeError::ShapeMismatch {
                op: "adam",
                detail: format!("param numel {} vs grad {} vs moment {}", p.numel(), g.len(), m.len()),
            });
        }
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (R::one() - b1) * g[i];
            v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Plain gradient descent with the same calling convention as [`adam_step`].
pub fn sgd_step<R: Real>(params: &mut [&mut Tensor<R>], grads: &[&[R]], lr: R) -> Result<(), TapeError> {
    if params.len() != grads.len() {
        return Err(TapeError::ShapeMismatch {
            op: "sgd",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.numel() != g.len() {
            return Err(TapeError::ShapeMismatch {
                op: "sgd",
                detail: format!("param numel {} vs grad {}", p.numel(), g.len()),
            });
        }
        let data = p.data_mut();
        for i in 0..data.len() {
            data[i] -= lr * g[i];
        }
    }
    Ok(())
}

/// Optional global-norm gradient clipping; a no-op when `max_norm` is `None`.
pub fn clip_grads<R: Real>(grads: &mut [Vec<R>], max_norm: Option<R>) {
    let Some(max_norm) = max_norm else { return };
    let mut sq = R::zero();
    for g in grads.iter() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Exponential per-epoch learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule<R: Real> {
    pub initial: R,
    pub gamma: R,
}

impl<R: Real> LrSchedule<R> {
    pub fn new(initial: R, gamma: R) -> Result<Self, TapeError> {
        if initial <= R::zero() {
            return Err(TapeError::InvalidArg { op: "lr_schedule", detail: format!("initial lr {} must be positive", initial) });
        }
        if gamma <= R::zero() || gamma > R::one() {
            return Err(TapeError::InvalidArg { op: "lr_schedule", detail: format!("gamma {} not in (0,1]", gamma) });
        }
        Ok(LrSchedule { initial, gamma })
    }
}

pub fn lr_at<R: Real>(schedule: &LrSchedule<R>, epoch: u64) -> R {
    schedule.initial * R::from_f64(schedule.gamma.to_f64().powf(epoch as f64))
}
