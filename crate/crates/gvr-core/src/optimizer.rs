//! ADAM optimizer with externally restorable state.

use ndarray::ArrayD;

use crate::nn::ParamStore;

/// ADAM with bias correction. First/second-moment buffers are exposed so
/// checkpoints can persist and restore them exactly.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[ArrayD<f32>], &[ArrayD<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f32>>, v: Vec<ArrayD<f32>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            assert_eq!(cur.shape(), new.shape(), "moment shape mismatch");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update. `grads` is aligned with the store's id order; `None`
    /// entries are treated as zero gradient (moments still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match &grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), store.get(id).shape(), "gradient shape mismatch");
                    m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let p = store.get_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
