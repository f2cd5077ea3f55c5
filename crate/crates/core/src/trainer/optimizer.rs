use std::collections::HashMap;

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};

/// Adam with decoupled weight decay. Frozen rows and non-trainable
/// parameters are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Array2<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let (frozen, trainable) = {
                let p = store.get(id);
                (p.frozen_rows.clone(), p.trainable)
            };
            if !trainable {
                continue;
            }
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(id);
            let grad = grads.get(&id);
            for ((r, c), w) in value.indexed_iter_mut() {
                if frozen.contains(&r) {
                    continue;
                }
                let g = grad.map_or(0.0, |g| g[[r, c]]);
                let mi = &mut m[[r, c]];
                let vi = &mut v[[r, c]];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let step = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= lr * (step + self.weight_decay * *w);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<ParamId, Array2<f64>>, max_norm: f64) -> f64 {
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort();
    let norm = ids
        .into_iter()
        .map(|id| grads[id].iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]]);
        let mut adam = Adam::new(&store, 0.0);
        let grads = HashMap::from([(id, array![[0.5, -3.0]])]);
        adam.update(&mut store, &grads, 0.1);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_and_skips_frozen_rows() {
        let mut store = ParamStore::new();
        let id = store.add("e", array![[0.0, 0.0], [2.0, 2.0]]);
        store.freeze_row(id, 0);
        let mut adam = Adam::new(&store, 0.5);
        let grads = HashMap::from([(id, array![[1.0, 1.0], [0.0, 0.0]])]);
        adam.update(&mut store, &grads, 0.1);
        let w = store.value(id);
        assert_eq!(w.row(0).to_vec(), vec![0.0, 0.0]);
        assert!((w[[1, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.0]]);
        let b = store.add("b", array![[0.0]]);
        let mut grads = HashMap::from([(a, array![[3.0]]), (b, array![[4.0]])]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads[&a][[0, 0]] - 0.6).abs() < 1e-12);
        assert!((grads[&b][[0, 0]] - 0.8).abs() < 1e-12);
        let mut small = HashMap::from([(a, array![[0.1]])]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[&a][[0, 0]], 0.1);
    }
}
