//! Parameter storage, layer building blocks, and the Adam optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::math::sqrtf;
use crate::rng::SeededRng;
use crate::tensor::Matrix;

/// Named parameter matrices owned by one model component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> usize {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Order-sensitive checksum over every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        self.values.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, m| {
            (h.rotate_left(7) ^ m.checksum()).wrapping_mul(0x100_0000_01b3)
        })
    }

    /// Binds this store to a tag for one graph.
    pub fn bind(&self, tag: u8) -> Binding<'_> {
        Binding { tag, store: self }
    }
}

/// A store paired with the tag its parameters carry inside one [`Graph`].
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub tag: u8,
    pub store: &'a ParamStore,
}

impl Binding<'_> {
    pub fn var(&self, g: &mut Graph, idx: usize) -> Var {
        g.param((self.tag, idx), self.store.get(idx))
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let limit = sqrtf(6.0 / (rows + cols) as f32);
    let data = (0..rows * cols)
        .map(|_| rng.uniform_f32(-limit, limit))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn normal_init(rng: &mut SeededRng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.normal() as f32 * std)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            xavier(rng, input_dim, output_dim),
        );
        let bias = store.add(&alloc::format!("{name}.bias"), Matrix::zeros(1, output_dim));
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    /// Square layer initialized to the identity plus small noise.
    pub fn near_identity(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let mut w = normal_init(rng, dim, dim, 0.01);
        for i in 0..dim {
            w.set(i, i, w.get(i, i) + 1.0);
        }
        let weight = store.add(&alloc::format!("{name}.weight"), w);
        let bias = store.add(&alloc::format!("{name}.bias"), Matrix::zeros(1, dim));
        Self {
            weight,
            bias,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Forward on plain matrices, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut out = x.matmul(store.get(self.weight));
        let b = store.get(self.bias);
        for r in 0..out.rows() {
            crate::tensor::axpy(1.0, b.data(), out.row_mut(r));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(&alloc::format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Binding<'_>, x: Var) -> Var {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Weights of one LSTM direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    pub wx: usize,
    pub wh: usize,
    pub bias: usize,
}

impl LstmDirection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let wx = store.add(
            &alloc::format!("{name}.wx"),
            xavier(rng, input_dim, 4 * hidden),
        );
        let wh = store.add(
            &alloc::format!("{name}.wh"),
            xavier(rng, hidden, 4 * hidden),
        );
        let mut b = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.data_mut()[j] = 1.0;
        }
        let bias = store.add(&alloc::format!("{name}.bias"), b);
        Self { wx, wh, bias }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: Binding<'_>,
        x: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Var {
        let wx = p.var(g, self.wx);
        let wh = p.var(g, self.wh);
        let b = p.var(g, self.bias);
        g.lstm(x, wx, wh, b, lengths, reverse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Apply the gradients carrying `tag` to `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, tag: u8) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::powf(c.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(c.beta2, t as f32);
        for (idx, g) in grads.for_store(tag) {
            let p = store.values[idx].data_mut();
            let m = self.first[idx].data_mut();
            let v = self.second[idx].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.learning_rate * mh / (sqrtf(vh) + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let idx = store.add("x", Matrix::from_rows(&[vec![3.0, -2.0]]));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
        );
        for _ in 0..300 {
            let mut g = Graph::new(true, 0);
            let x = store.bind(0).var(&mut g, idx);
            let zero = g.input(Matrix::zeros(1, 2));
            let l = g.mse(x, zero);
            let grads = g.backward(l);
            opt.step(&mut store, &grads, 0);
        }
        assert!(store.get(idx).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let before = store.checksum();
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut g = Graph::new(true, 0);
        let x = g.input(Matrix::filled(4, 3, 0.5));
        let y = lin.forward(&mut g, store.bind(0), x);
        let l = g.cross_entropy(y, &[0, 1, 0, 1]);
        let grads = g.backward(l);
        opt.step(&mut store, &grads, 0);
        assert_eq!(before, store.checksum());
    }

    #[test]
    fn near_identity_linear_is_close_to_identity() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let lin = Linear::near_identity(&mut store, "p", 4, &mut rng);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let y = lin.apply(&store, &x);
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(a, b)| (a - b).abs() < 0.2));
    }
}
