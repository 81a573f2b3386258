//! Decoupled-weight-decay adaptive optimizer with two learning-rate
//! groups: the GCN weight stack and everything else.

use crate::num::{real, Real};

use super::{ModelParams, ParamGroup};

pub struct AdamW<R: Real> {
    m: ModelParams<R>,
    v: ModelParams<R>,
    t: u32,
    pub lr_main: R,
    pub lr_gcn: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    pub weight_decay: R,
}

impl<R: Real> AdamW<R> {
    pub fn new(template: &ModelParams<R>, lr_main: R, lr_gcn: R, weight_decay: R) -> Self {
        AdamW {
            m: ModelParams::zeros(template.dims),
            v: ModelParams::zeros(template.dims),
            t: 0,
            lr_main,
            lr_gcn,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<R>, grads: &ModelParams<R>) {
        self.t += 1;
        let one = R::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);

        let mut p_tensors = params.tensors_mut();
        let g_tensors = grads.tensors();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        debug_assert_eq!(p_tensors.len(), g_tensors.len());

        for idx in 0..p_tensors.len() {
            let (info, param) = &mut p_tensors[idx];
            let grad = g_tensors[idx].1;
            let m = &mut m_tensors[idx].1;
            let v = &mut v_tensors[idx].1;
            let lr = match info.group {
                ParamGroup::Gcn => self.lr_gcn,
                ParamGroup::Main => self.lr_main,
            };
            for (((w, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}
