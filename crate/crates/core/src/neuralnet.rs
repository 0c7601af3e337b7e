//! Dense ELU networks with reverse-mode gradients, Adam, and a step-decay
//! learning-rate schedule.
//!
//! Batches are row-major: one sample per row. A layer computes
//! `z = x · Wᵀ + b` with `W` stored as `out × in`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Learning rates above this value trigger a configuration warning.
pub const MAX_RECOMMENDED_LR: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Linear,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Elu => 1,
            Activation::Linear => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Elu),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Elu => pre.mapv(elu),
            Activation::Linear => pre.clone(),
        }
    }
}

/// ELU with α = 1.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { weights: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Gradients have the same shape as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients { layers: mlp.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

impl Mlp {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    /// `dims` lists the input width followed by every layer's width.
    pub fn he_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..bound));
                Layer { weights, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Ok(Mlp { layers, hidden_activation: Activation::Elu, output_activation: Activation::Linear })
    }

    pub fn from_layers(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::InvalidArgument(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for l in &layers {
            check_dim(l.outputs(), l.bias.len())?;
        }
        Ok(Mlp { layers, hidden_activation: hidden, output_activation: output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    /// Input width followed by each layer's width.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        check_dim(self.input_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.dot(&layer.weights.t()) + &layer.bias;
            let a = self.activation_for(i).apply(&z);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok((x, Tape { inputs, pre }))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim(), input.ncols())?;
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            if self.activation_for(i) == Activation::Elu {
                z.mapv_inplace(elu);
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_vec(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (out, tape) = self.forward(x)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse pass: gradients of `sum(output ⊙ output_gradient)` with
    /// respect to every parameter, plus the gradient at the input.
    pub fn backward(&self, tape: &Tape, output_gradient: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        check_dim(self.layers.len(), tape.pre.len())?;
        let last = tape.pre.last().expect("non-empty tape");
        if last.dim() != output_gradient.dim() {
            return Err(Error::DimensionMismatch { expected: last.ncols(), actual: output_gradient.ncols() });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_gradient.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activation_for(i) == Activation::Elu {
                Zip::from(&mut upstream)
                    .and(&tape.pre[i])
                    .for_each(|g, &z| *g *= elu_derivative(z));
            }
            let weights = upstream.t().dot(&tape.inputs[i]);
            let bias = upstream.sum_axis(Axis(0));
            upstream = upstream.dot(&layer.weights);
            grads.push(Layer { weights, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    /// Flattened parameter vector: per layer, row-major weights then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if index < nw {
                return &mut l.weights.as_slice_mut().expect("standard layout")[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamState {
    pub fn new(mlp: &Mlp) -> Self {
        let zeros = Gradients::zeros_like(mlp).layers;
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

pub fn adam_step(params: &mut Mlp, grads: &Gradients, state: &mut AdamState, learning_rate: f64) {
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step);
    let c2 = 1.0 - b2.powi(state.step);
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        Zip::from(&mut p.weights).and(&g.weights).and(&mut m.weights).and(&mut v.weights).for_each(update);
        Zip::from(&mut p.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(update);
    }
}

pub fn sgd_step(params: &mut Mlp, grads: &Gradients, learning_rate: f64) {
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        p.weights.scaled_add(-learning_rate, &g.weights);
        p.bias.scaled_add(-learning_rate, &g.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the KL term (variational models only).
    pub beta_kl: f64,
    /// Distinctness threshold for the dictionary; `None` picks it from data.
    pub lambda_distinct: Option<f64>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            lr_decay_every: 1000,
            lr_decay_factor: 0.5,
            batch_size: 64,
            epochs: 300,
            seed: 0,
            beta_kl: 1.0,
            lambda_distinct: None,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    /// Checks hard constraints; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be nonnegative", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor {} must be in (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("lr_decay_every, batch_size and epochs must be positive".into());
        }
        if !(self.beta_kl >= 0.0) {
            return bad(format!("beta_kl {} must be nonnegative", self.beta_kl));
        }
        if let Some(l) = self.lambda_distinct {
            if !(l > 0.0) {
                return bad(format!("lambda {l} must be positive"));
            }
        }
        let mut warnings = Vec::new();
        if self.learning_rate > MAX_RECOMMENDED_LR {
            warnings.push(format!(
                "learning rate {} exceeds {MAX_RECOMMENDED_LR}; training may be unstable",
                self.learning_rate
            ));
        }
        Ok(warnings)
    }
}

/// `learning_rate × decay_factor^⌊epoch / decay_every⌋`
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.5), 2.5);
        // e^-1 - 1
        assert!((elu(-1.0) - (-0.6321205588285577)).abs() < 1e-12);
    }

    #[test]
    fn identity_and_constant_layers() {
        let id = Mlp::from_layers(
            vec![Layer { weights: Array2::eye(3), bias: Array1::zeros(3) }],
            Activation::Elu,
            Activation::Linear,
        )
        .unwrap();
        let (out, _) = id.forward_vec(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 3.5]);

        let c = Mlp::from_layers(
            vec![Layer { weights: Array2::zeros((2, 3)), bias: array![4.0, -1.0] }],
            Activation::Elu,
            Activation::Linear,
        )
        .unwrap();
        for input in [[0.0, 0.0, 0.0], [9.0, -3.0, 1.0]] {
            assert_eq!(c.forward_vec(&input).unwrap().0, vec![4.0, -1.0]);
        }
        assert!(c.forward_vec(&[1.0]).is_err());
    }

    #[test]
    fn from_layers_checks_chaining() {
        let bad = vec![Layer::zeros(2, 3), Layer::zeros(4, 1)];
        assert!(Mlp::from_layers(bad, Activation::Elu, Activation::Linear).is_err());
    }

    /// Straight-line evaluator with no tape, one sample at a time.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, l) in mlp.layers.iter().enumerate() {
            let mut next = vec![0.0; l.outputs()];
            for o in 0..l.outputs() {
                let mut s = 0.0;
                for k in 0..l.inputs() {
                    s += l.weights[(o, k)] * cur[k];
                }
                s += l.bias[o];
                next[o] = if i + 1 < mlp.layers.len() { elu(s) } else { s };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_reference_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::he_uniform(&[5, 7, 6, 2], &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (out, _) = mlp.forward_vec(&x).unwrap();
            let r = reference_forward(&mlp, &x);
            for (a, b) in out.iter().zip(&r) {
                assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::he_uniform(&[3, 4, 2], &mut rng).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let (_, tape) = mlp.forward(x.view()).unwrap();
        let (g, gin) = mlp.backward(&tape, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.is_zero());
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mlp = Mlp::from_layers(
            vec![Layer { weights: array![[0.3, -0.2, 0.9]], bias: array![0.1] }],
            Activation::Elu,
            Activation::Linear,
        )
        .unwrap();
        let x = array![[1.5, -2.0, 0.25]];
        let (_, tape) = mlp.forward(x.view()).unwrap();
        let (g, _) = mlp.backward(&tape, array![[2.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights, array![[3.0, -4.0, 0.5]]);
        assert_eq!(g.layers[0].bias, array![2.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::he_uniform(&[4, 6, 5, 4, 3], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.5..1.5));
        let w = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let objective = |m: &Mlp, x: &Array2<f64>| (m.predict(x.view()).unwrap() * &w).sum();
        let (_, tape) = mlp.forward(x.view()).unwrap();
        let (g, gin) = mlp.backward(&tape, w.view()).unwrap();
        let h = 1e-5;
        for (i, analytic) in g.flat().into_iter().enumerate() {
            let mut plus = mlp.clone();
            *plus.param_mut(i) += h;
            let mut minus = mlp.clone();
            *minus.param_mut(i) -= h;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {analytic}");
        }
        for ((r, c), analytic) in gin.indexed_iter() {
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let mut xm = x.clone();
            xm[(r, c)] -= h;
            let fd = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
            assert!((fd - analytic).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    fn scalar(w: f64) -> Mlp {
        Mlp::from_layers(
            vec![Layer { weights: array![[w]], bias: array![0.0] }],
            Activation::Elu,
            Activation::Linear,
        )
        .unwrap()
    }

    #[test]
    fn adam_with_zero_rate_or_zero_gradient_is_a_noop() {
        let mut p = scalar(1.25);
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.layers[0].weights[(0, 0)] = 3.0;
        adam_step(&mut p, &g, &mut state, 0.0);
        assert_eq!(p, before);

        let mut state = AdamState::new(&p);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut state, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        for _ in 0..50 {
            let w = p.layers[0].weights[(0, 0)];
            let mut g = Gradients::zeros_like(&p);
            g.layers[0].weights[(0, 0)] = 2.0 * (w - 3.0);
            adam_step(&mut p, &g, &mut state, 0.1);
        }
        let w = p.layers[0].weights[(0, 0)];
        assert!((w - 3.0).abs() < 3.0, "{w}");
        assert_eq!(state.steps(), 50);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { learning_rate: 5e-4, lr_decay_factor: 0.5, lr_decay_every: 1000, ..Default::default() };
        assert_eq!(lr_at_epoch(&cfg, 0), 5e-4);
        assert_eq!(lr_at_epoch(&cfg, 999), 5e-4);
        assert!((lr_at_epoch(&cfg, 2500) - 1.25e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().unwrap().is_empty());
        let hot = TrainConfig { learning_rate: 1e-3, ..Default::default() };
        assert_eq!(hot.validate().unwrap().len(), 1);
        assert!(TrainConfig { lr_decay_factor: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda_distinct: Some(-1.0), ..Default::default() }.validate().is_err());
    }
}
