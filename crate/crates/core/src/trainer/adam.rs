use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

/// Adam state for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Adam {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64, betas: (f64, f64)) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let c2_sqrt = c2.sqrt() as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let want = self.m[i].shape().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    if g.shape() != want.as_slice() {
                        return Err(Error::Shape(format!("gradient {i} has shape {:?}", g.shape())));
                    }
                    for (((p, m), v), &g) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1f * *m + (1.0 - b1f) * g;
                        *v = b2f * *v + (1.0 - b2f) * g * g;
                        *p -= step * *m / (v.sqrt() / c2_sqrt + ADAM_EPS as f32);
                    }
                }
                None => {
                    for ((p, m), v) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1f;
                        *v *= b2f;
                        *p -= step * *m / (v.sqrt() / c2_sqrt + ADAM_EPS as f32);
                    }
                }
            }
        }
        Ok(())
    }
}
