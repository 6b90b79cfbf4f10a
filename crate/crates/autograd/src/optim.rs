use crate::float::{lit, Float};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Adam with bias correction and optional global-norm clipping.
///
/// Parameters without a gradient in a step are left untouched, moments
/// included, so a parameter the loss never reached does not drift.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    state: Vec<Option<Moments<T>>>,
}

#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: u64,
}

/// Summary of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Float> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            state: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn moments(&self) -> &[Option<Moments<T>>] {
        &self.state
    }

    pub fn restore_moments(&mut self, state: Vec<Option<Moments<T>>>) {
        self.state = state;
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, mut grads: Gradients<T>) -> Result<StepReport> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let grad_norm = grads.global_norm();
        let mut clipped = false;
        if let Some(max) = self.clip_norm {
            if grad_norm > max {
                grads.scale(lit(max / grad_norm));
                clipped = true;
            }
        }
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, g) in grads.iter() {
            let slot = &mut self.state[id.index()];
            let mom = slot.get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            mom.steps += 1;
            let c1 = 1.0 - b1.powi(mom.steps as i32);
            let c2 = 1.0 - b2.powi(mom.steps as i32);
            let step_size: T = lit(self.learning_rate / c1);
            let c2_sqrt: T = lit(c2.sqrt());
            let (b1t, b2t, eps): (T, T, T) = (lit(b1), lit(b2), lit(self.eps));
            let param = store.get_mut(id);
            for (((p, &gv), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = b1t * *m + (T::one() - b1t) * gv;
                *v = b2t * *v + (T::one() - b2t) * gv * gv;
                *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(StepReport { grad_norm, clipped })
    }
}
