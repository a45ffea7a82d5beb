use crate::nn::FusionModel;

/// Adam with bias correction, one moment buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &FusionModel<f32>, lr: f64) -> Self {
        let shapes: Vec<usize> = model.named_params().iter().map(|(_, _, p)| p.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut FusionModel<f32>, grad: &FusionModel<f32>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grad.named_params();
        for (((p, (_, _, g)), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = f64::from(g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = (f64::from(p[i]) - upd) as f32;
            }
        }
        model.step += 1;
    }
}
