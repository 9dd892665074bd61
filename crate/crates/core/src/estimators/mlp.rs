//! Dense feedforward networks with hand-written backpropagation, and the
//! AdamW optimiser used to train them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activated value `a`.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the output layer
/// is linear. Parameters are stored flat, layer by layer, each layer as a
/// row-major `out × in` weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(z * scale);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            activation,
            params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            acts: self.sizes.iter().map(|&s| vec![0.0; s]).collect(),
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }

    /// Forward pass; the returned slice is the network output.
    pub fn forward<'a>(&self, x: &[f64], ws: &'a mut Workspace) -> &'a [f64] {
        debug_assert_eq!(x.len(), self.sizes[0]);
        if ws.acts.len() != self.sizes.len() {
            *ws = self.workspace();
        }
        ws.acts[0].copy_from_slice(x);
        let last = self.sizes.len() - 2;
        let mut off = 0;
        for l in 0..=last {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut s = b[j];
                for i in 0..n_in {
                    s += row[i] * input[i];
                }
                out[j] = if l == last { s } else { self.activation.apply(s) };
            }
            off += n_in * n_out + n_out;
        }
        &ws.acts[self.sizes.len() - 1]
    }

    /// Accumulate `∂(grad_out · output)/∂params` into `grad`, using the
    /// activations left in `ws` by the preceding [`Mlp::forward`] call.
    pub fn backward(&self, ws: &mut Workspace, grad_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        ws.delta.clear();
        ws.delta.extend_from_slice(grad_out);
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &ws.acts[l];
            for j in 0..n_out {
                let d = ws.delta[j];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + j * n_in..off + (j + 1) * n_in];
                for i in 0..n_in {
                    g[i] += d * input[i];
                }
                grad[off + n_in * n_out + j] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                ws.next_delta.clear();
                ws.next_delta.resize(n_in, 0.0);
                for j in 0..n_out {
                    let d = ws.delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[j * n_in..(j + 1) * n_in];
                    for i in 0..n_in {
                        ws.next_delta[i] += d * row[i];
                    }
                }
                for i in 0..n_in {
                    ws.next_delta[i] *= self.activation.grad_from_output(input[i]);
                }
                std::mem::swap(&mut ws.delta, &mut ws.next_delta);
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        self.forward(x, &mut ws).to_vec()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn loss(net: &Mlp, x: &[f64], w: &[f64]) -> f64 {
        net.predict(x).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check(activation: Activation) {
        let mut rng = rng_from_seed(11);
        for trial in 0..20 {
            let mut net = Mlp::new(&[3, 5, 4, 2], activation, &mut rng);
            // move biases off zero so relu kinks are not sitting on the inputs
            for p in net.params.iter_mut() {
                *p += 0.1 * rng.random_range(-1.0..1.0);
            }
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut ws = net.workspace();
            net.forward(&x, &mut ws);
            let mut grad = vec![0.0; net.n_params()];
            net.backward(&mut ws, &w, &mut grad);
            let h = 1e-6;
            for k in 0..net.n_params() {
                let orig = net.params[k];
                net.params[k] = orig + h;
                let up = loss(&net, &x, &w);
                net.params[k] = orig - h;
                let down = loss(&net, &x, &w);
                net.params[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
                assert!(rel < 1e-4, "trial {trial} param {k}: fd {fd} analytic {}", grad[k]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(Activation::Tanh);
        check(Activation::Relu);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
