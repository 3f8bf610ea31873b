//! Internal feed-forward network machinery shared by the feature extractor
//! and the perturbation detector: affine layers with tanh hidden activations,
//! manual batch backprop (parameters *and* inputs), and momentum SGD.
//!
//! tanh everywhere keeps the whole pipeline smooth, so central finite
//! differences are a valid oracle for every gradient this module produces.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One affine layer `z = x·Wᵀ + b`, weights stored `(out, in)`.
/// Doubles as a gradient / velocity container of matching shape.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (inp as f64).sqrt();
        let mut w = Array2::zeros((out, inp));
        for i in 0..out {
            for j in 0..inp {
                let z: f64 = StandardNormal.sample(rng);
                w[[i, j]] = z * scale;
            }
        }
        Linear { w, b: Array1::zeros(out) }
    }

    pub fn zeros_like(&self) -> Self {
        Linear { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Momentum SGD: `v ← momentum·v − lr·g; θ ← θ + v`.
    pub fn sgd_step(&mut self, grad: &Linear, vel: &mut Linear, lr: f64, momentum: f64) {
        vel.w.zip_mut_with(&grad.w, |v, &g| *v = momentum * *v - lr * g);
        vel.b.zip_mut_with(&grad.b, |v, &g| *v = momentum * *v - lr * g);
        self.w.zip_mut_with(&vel.w, |p, &v| *p += v);
        self.b.zip_mut_with(&vel.b, |p, &v| *p += v);
    }
}

/// A multi-layer perceptron: tanh on every layer but the last, which stays
/// linear. `widths = [in, hidden..., out]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer activations from a forward pass; `acts[0]` is the input batch,
/// `acts[l+1]` the output of layer `l` (post-tanh for hidden layers, raw for
/// the final layer).
pub(crate) struct MlpCache {
    pub acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache always holds the input")
    }
}

impl Mlp {
    pub fn init(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one affine layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[1], w[0], &mut rng))
            .collect();
        Mlp { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward_cache(&self, x: &Array2<f64>) -> MlpCache {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(acts.last().unwrap());
            let h = if l + 1 < n { z.mapv(f64::tanh) } else { z };
            acts.push(h);
        }
        MlpCache { acts }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut cache = self.forward_cache(x);
        cache.acts.pop().expect("cache always holds the output")
    }

    /// Backpropagate `d_out = ∂L/∂output` through the cached pass, returning
    /// per-layer parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &MlpCache, d_out: Array2<f64>) -> (Vec<Linear>, Array2<f64>) {
        let n = self.layers.len();
        let mut grads: Vec<Linear> = self.layers.iter().map(Linear::zeros_like).collect();
        let mut d_h = d_out;
        for l in (0..n).rev() {
            // Final layer is linear; hidden layers invert the tanh.
            let d_z = if l + 1 == n {
                d_h
            } else {
                let h = &cache.acts[l + 1];
                let mut d = d_h;
                d.zip_mut_with(h, |g, &hv| *g *= 1.0 - hv * hv);
                d
            };
            grads[l].w = d_z.t().dot(&cache.acts[l]);
            grads[l].b = d_z.sum_axis(Axis(0));
            d_h = d_z.dot(&self.layers[l].w);
        }
        (grads, d_h)
    }

    pub fn zero_grads(&self) -> Vec<Linear> {
        self.layers.iter().map(Linear::zeros_like).collect()
    }

    pub fn sgd_step(&mut self, grads: &[Linear], vel: &mut [Linear], lr: f64, momentum: f64) {
        for ((layer, grad), v) in self.layers.iter_mut().zip(grads).zip(vel) {
            layer.sgd_step(grad, v, lr, momentum);
        }
    }

    // Flat parameter view in a fixed order (layer 0 weights row-major, layer 0
    // biases, layer 1 weights, ...). Used by finite-difference oracles and
    // weight interpolation.

    pub fn flat_len(&self) -> usize {
        self.param_count()
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return layer.w.as_slice().unwrap()[idx];
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for layer in &mut self.layers {
            if idx < layer.w.len() {
                layer.w.as_slice_mut().unwrap()[idx] = v;
                return;
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                layer.b[idx] = v;
                return;
            }
            idx -= layer.b.len();
        }
        panic!("flat index out of range");
    }
}

/// Row-wise L2 normalization onto the unit sphere. Returns the normalized
/// rows and the original row norms. Rows with zero norm are left to the
/// caller to reject.
pub(crate) fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = Array1::from_iter(z.rows().into_iter().map(|r| r.dot(&r).sqrt()));
    let mut e = z.clone();
    for (mut row, &n) in e.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    (e, norms)
}

/// Backward pass through row normalization: for `e = z/‖z‖`,
/// `∂L/∂z = (∂L/∂e − e·(e⋅∂L/∂e)) / ‖z‖` per row.
pub(crate) fn normalize_rows_backward(
    e: &Array2<f64>,
    norms: &Array1<f64>,
    d_e: &Array2<f64>,
) -> Array2<f64> {
    let mut d_z = d_e.clone();
    for ((mut drow, erow), &n) in d_z
        .rows_mut()
        .into_iter()
        .zip(e.rows().into_iter())
        .zip(norms.iter())
    {
        let dot = erow.dot(&drow);
        for (dv, &ev) in drow.iter_mut().zip(erow.iter()) {
            *dv = (*dv - ev * dot) / n;
        }
    }
    d_z
}

/// Mean softmax cross-entropy over a batch of logits; returns the loss and
/// `∂L/∂logits` (already divided by the batch size).
pub(crate) fn softmax_ce(logits: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    debug_assert_eq!(batch, labels.len());
    let inv_b = 1.0 / batch as f64;
    let mut d = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let y = labels[i] as usize;
        loss += -(exps[y] / sum).ln();
        for (j, &ev) in exps.iter().enumerate() {
            let p = ev / sum;
            d[[i, j]] = (p - if j == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    (loss * inv_b, d)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy on logits (numerically stable form); returns the
/// loss and `∂L/∂logits` (divided by batch size). `logits` is `(B, 1)`.
pub(crate) fn bce_logits(logits: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    debug_assert_eq!(batch, targets.len());
    let inv_b = 1.0 / batch as f64;
    let mut d = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..batch {
        let z = logits[[i, 0]];
        let t = targets[i];
        loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        d[[i, 0]] = (sigmoid(z) - t) * inv_b;
    }
    (loss * inv_b, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(&[4, 8, 3], 9);
        let b = Mlp::init(&[4, 8, 3], 9);
        assert_eq!(a, b);
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let z = array![[3.0, 4.0], [0.5, 0.0]];
        let (e, norms) = normalize_rows(&z);
        assert!((e.row(0).dot(&e.row(0)).sqrt() - 1.0).abs() < 1e-12);
        assert!((norms[0] - 5.0).abs() < 1e-12);
        assert_eq!(e[[1, 0]], 1.0);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Array2::zeros((2, 5));
        let (loss, _) = softmax_ce(&logits, &[0, 3]);
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_at_zero_logit() {
        let logits = Array2::zeros((1, 1));
        let (loss, d) = bce_logits(&logits, &[1.0]);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert!((d[[0, 0]] + 0.5).abs() < 1e-12);
    }

    // Finite-difference oracle for the raw MLP: mean of squared outputs.
    fn sq_loss(net: &Mlp, x: &Array2<f64>) -> f64 {
        let out = net.forward_cache(x);
        out.output().iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Mlp::init(&[3, 5, 2], 21);
        let x = array![[0.2, -0.4, 0.9], [0.1, 0.3, -0.7]];
        let cache = net.forward_cache(&x);
        let d_out = cache.output() * (2.0 / x.nrows() as f64);
        let (grads, d_x) = net.backward(&cache, d_out);

        let h = 1e-5;
        // Parameters.
        let flat: Vec<f64> = (0..net.flat_len()).map(|i| net.get_flat(i)).collect();
        for idx in 0..net.flat_len() {
            net.set_flat(idx, flat[idx] + h);
            let up = sq_loss(&net, &x);
            net.set_flat(idx, flat[idx] - h);
            let dn = sq_loss(&net, &x);
            net.set_flat(idx, flat[idx]);
            let num = (up - dn) / (2.0 * h);
            let ana = {
                let mut k = idx;
                let mut v = 0.0;
                for g in &grads {
                    if k < g.w.len() {
                        v = g.w.as_slice().unwrap()[k];
                        break;
                    }
                    k -= g.w.len();
                    if k < g.b.len() {
                        v = g.b[k];
                        break;
                    }
                    k -= g.b.len();
                }
                v
            };
            let denom = ana.abs().max(num.abs()).max(1e-4);
            assert!(
                ((ana - num) / denom).abs() < 1e-4,
                "param {idx}: analytic {ana} vs numeric {num}"
            );
        }
        // Inputs.
        let mut xp = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                xp[[i, j]] = x[[i, j]] + h;
                let up = sq_loss(&net, &xp);
                xp[[i, j]] = x[[i, j]] - h;
                let dn = sq_loss(&net, &xp);
                xp[[i, j]] = x[[i, j]];
                let num = (up - dn) / (2.0 * h);
                let ana = d_x[[i, j]];
                let denom = ana.abs().max(num.abs()).max(1e-4);
                assert!(
                    ((ana - num) / denom).abs() < 1e-4,
                    "input ({i},{j}): analytic {ana} vs numeric {num}"
                );
            }
        }
    }
}
