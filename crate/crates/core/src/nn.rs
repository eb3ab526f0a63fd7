//! Feed-forward networks, a reverse-mode autodiff tape over
//! vector-valued primitives, and the AdamW optimizer.
//!
//! The tape records whole-layer operations (affine, rectifier,
//! sqrt-abs, elementwise products, linear combinations) rather than
//! scalars, so one Euler-Maruyama step of a network-backed process

//! costs a handful of nodes. Closed-form coefficients enter the tape
//! as frozen nodes whose state Jacobian is taken by central
//! differences; they carry no parameters.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::scalar_rng;

/// Shape of a rectified-linear feed-forward network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub output_dim: usize,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_layers: usize, width: usize, output_dim: usize) -> Result<Self> {
        if input_dim < 1 || hidden_layers < 1 || width < 1 || output_dim < 1 {
            return Err(Error::InvalidParameter("all MLP dimensions must be >= 1".into()));
        }
        Ok(Self { input_dim, hidden_layers, width, output_dim })
    }

    /// (out, in) per affine layer; `hidden_layers + 1` layers total.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        dims.push((self.width, self.input_dim));
        for _ in 1..self.hidden_layers {
            dims.push((self.width, self.width));
        }
        dims.push((self.output_dim, self.width));
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights and biases.
    FanUniform,
    /// N(0, variance) weights, zero biases.
    Gaussian(f64),
}

/// Parameters of one network: per-layer weight matrices (out x in,
/// row-major) and bias vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub arch: MlpArch,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(arch: MlpArch) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (o, i) in arch.layer_dims() {
            weights.push(vec![0.0; o * i]);
            biases.push(vec![0.0; o]);
        }
        Self { arch, weights, biases }
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params()
    }

    /// Flattened view: weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch("flat parameter buffer".into()));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wl = w.len();
            w.copy_from_slice(&flat[at..at + wl]);
            at += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[at..at + bl]);
            at += bl;
        }
        Ok(())
    }
}

/// Draws initial parameters. Fan-uniform mirrors the usual linear
/// layer default; Gaussian draws weights N(0, var) with zero biases.
pub fn mlp_init(arch: MlpArch, scheme: InitScheme, seed: u64) -> MlpParams {
    let mut rng = scalar_rng(seed);
    let mut params = MlpParams::zeros(arch);
    for (l, (o, i)) in arch.layer_dims().iter().enumerate() {
        match scheme {
            InitScheme::FanUniform => {
                let bound = 1.0 / (*i as f64).sqrt();
                for w in params.weights[l].iter_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
                for b in params.biases[l].iter_mut() {
                    *b = rng.gen_range(-bound..bound);
                }
            }
            InitScheme::Gaussian(var) => {
                let std = var.sqrt();
                for w in params.weights[l].iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = std * z;
                }
                // biases stay zero
                let _ = o;
            }
        }
    }
    params
}

/// Straight-line evaluation without a tape.
pub fn mlp_eval(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), params.arch.input_dim);
    let n_layers = params.weights.len();
    let mut h = x.to_vec();
    for l in 0..n_layers {
        let (o, i) = (params.biases[l].len(), h.len());
        let mut next = params.biases[l].clone();
        for r in 0..o {
            let row = &params.weights[l][r * i..(r + 1) * i];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(&h) {
                acc += w * v;
            }
            next[r] += acc;
        }
        if l + 1 < n_layers {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        h = next;
    }
    h
}

pub type NodeId = usize;

type FrozenFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

enum Node {
    /// Constant vector; gradients stop here.
    Leaf,
    /// y = W x + b, layer `layer` of registered net `net`.
    Affine { net: usize, layer: usize, x: NodeId },
    /// y_i = max(0, x_i); subgradient 0 at the kink.
    Relu { x: NodeId },
    /// y_i = sqrt(|x_i|); derivative sign(x)/(2 sqrt(|x|)), 0 at 0.
    SqrtAbs { x: NodeId },
    /// y_i = a_i b_i.
    Hadamard { a: NodeId, b: NodeId },
    /// y = sum_k c_k node_k (equal dims).
    LinComb { terms: Vec<(NodeId, f64)> },
    /// y = [x; tail].
    Concat { x: NodeId, tail: Vec<f64> },
    /// Contract a flattened (rows x cols) node with a constant column
    /// weight vector: y_r = sum_c x[r * cols + c] v_c.
    ContractCols { x: NodeId, cols: usize, v: Vec<f64> },
    /// Closed-form vector function of the state; no parameters, state
    /// Jacobian by central differences.
    Frozen { x: NodeId, f: FrozenFn },
}

/// Reverse-mode record over vector-valued primitives. Registered nets
/// contribute parameters; `backward` returns one gradient set per net.
pub struct Tape<'p> {
    nets: Vec<&'p MlpParams>,
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
}

/// Gradient buffers matching one net's parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nets: Vec::new(), nodes: Vec::new(), values: Vec::new() }
    }

    /// Registers a parameter set; affine nodes refer to it by index.
    pub fn register_net(&mut self, params: &'p MlpParams) -> usize {
        self.nets.push(params);
        self.nets.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }

    fn push(&mut self, node: Node, value: Vec<f64>) -> NodeId {
        self.nodes.push(node);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Node::Leaf, value)
    }

    pub fn affine(&mut self, net: usize, layer: usize, x: NodeId) -> NodeId {
        let params = self.nets[net];
        let xin = &self.values[x];
        let (o, i) = (params.biases[layer].len(), xin.len());
        debug_assert_eq!(params.weights[layer].len(), o * i);
        let mut out = params.biases[layer].clone();
        for r in 0..o {
            let row = &params.weights[layer][r * i..(r + 1) * i];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(xin.iter()) {
                acc += w * v;
            }
            out[r] += acc;
        }
        self.push(Node::Affine { net, layer, x }, out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.values[x].iter().map(|v| v.max(0.0)).collect();
        self.push(Node::Relu { x }, out)
    }

    pub fn sqrt_abs(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.values[x].iter().map(|v| v.abs().sqrt()).collect();
        self.push(Node::SqrtAbs { x }, out)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> =
            self.values[a].iter().zip(&self.values[b]).map(|(x, y)| x * y).collect();
        self.push(Node::Hadamard { a, b }, out)
    }

    pub fn lin_comb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let dim = self.values[terms[0].0].len();
        let mut out = vec![0.0; dim];
        for &(id, c) in &terms {
            for (o, v) in out.iter_mut().zip(&self.values[id]) {
                *o += c * v;
            }
        }
        self.push(Node::LinComb { terms }, out)
    }

    pub fn concat(&mut self, x: NodeId, tail: Vec<f64>) -> NodeId {
        let mut out = self.values[x].clone();
        out.extend_from_slice(&tail);
        self.push(Node::Concat { x, tail }, out)
    }

    pub fn contract_cols(&mut self, x: NodeId, cols: usize, v: Vec<f64>) -> NodeId {
        debug_assert_eq!(v.len(), cols);
        let rows = self.values[x].len() / cols;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += self.values[x][r * cols + c] * v[c];
            }
            out[r] = acc;
        }
        self.push(Node::ContractCols { x, cols, v }, out)
    }

    pub fn frozen(&mut self, x: NodeId, f: FrozenFn) -> NodeId {
        let out = f(&self.values[x]);
        self.push(Node::Frozen { x, f }, out)
    }

    /// Full network forward on the tape: alternating affine/rectifier
    /// layers with an affine output layer.
    pub fn mlp(&mut self, net: usize, input: NodeId) -> NodeId {
        let n_layers = self.nets[net].weights.len();
        let mut h = input;
        for l in 0..n_layers {
            h = self.affine(net, l, h);
            if l + 1 < n_layers {
                h = self.relu(h);
            }
        }
        h
    }

    /// Values of affine nodes (rectifier preactivations), for kink
    /// diagnostics in gradient tests.
    pub fn preactivation_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (node, value) in self.nodes.iter().zip(&self.values) {
            if let Node::Affine { .. } = node {
                for v in value {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse accumulation from seeded output nodes. Every node is
/// visited at most once, in reverse topological (= insertion) order;
/// parameters of all registered nets receive (possibly zero) entries.
pub fn backward(tape: &Tape<'_>, seeds: &[(NodeId, Vec<f64>)]) -> Vec<MlpGrads> {
    let mut grads: Vec<MlpGrads> = tape.nets.iter().map(|p| MlpGrads::zeros_like(p)).collect();
    let mut adj: Vec<Option<Vec<f64>>> = (0..tape.nodes.len()).map(|_| None).collect();
    for (id, g) in seeds {
        debug_assert_eq!(g.len(), tape.values[*id].len());
        match &mut adj[*id] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }

    let add_to = |adj: &mut Vec<Option<Vec<f64>>>, id: NodeId, contrib: &[f64]| {
        match &mut adj[id] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    };

    for id in (0..tape.nodes.len()).rev() {
        let Some(g) = adj[id].take() else { continue };
        match &tape.nodes[id] {
            Node::Leaf => {}
            Node::Affine { net, layer, x } => {
                let params = tape.nets[*net];
                let xin = &tape.values[*x];
                let (o, i) = (params.biases[*layer].len(), xin.len());
                {
                    let net_grads = &mut grads[*net];
                    for r in 0..o {
                        let gr = g[r];
                        net_grads.biases[*layer][r] += gr;
                        let row = &mut net_grads.weights[*layer][r * i..(r + 1) * i];
                        for (w, v) in row.iter_mut().zip(xin.iter()) {
                            *w += gr * v;
                        }
                    }
                }
                let mut gx = vec![0.0; i];
                for r in 0..o {
                    let row = &params.weights[*layer][r * i..(r + 1) * i];
                    let gr = g[r];
                    for (gxv, w) in gx.iter_mut().zip(row) {
                        *gxv += gr * w;
                    }
                }
                add_to(&mut adj, *x, &gx);
            }
            Node::Relu { x } => {
                let gx: Vec<f64> = tape.values[*x]
                    .iter()
                    .zip(&g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_to(&mut adj, *x, &gx);
            }
            Node::SqrtAbs { x } => {
                let gx: Vec<f64> = tape.values[*x]
                    .iter()
                    .zip(&g)
                    .map(|(v, gv)| {
                        if *v == 0.0 {
                            0.0
                        } else {
                            gv * v.signum() / (2.0 * v.abs().sqrt())
                        }
                    })
                    .collect();
                add_to(&mut adj, *x, &gx);
            }
            Node::Hadamard { a, b } => {
                let ga: Vec<f64> = tape.values[*b].iter().zip(&g).map(|(v, gv)| gv * v).collect();
                let gb: Vec<f64> = tape.values[*a].iter().zip(&g).map(|(v, gv)| gv * v).collect();
                add_to(&mut adj, *a, &ga);
                add_to(&mut adj, *b, &gb);
            }
            Node::LinComb { terms } => {
                for &(tid, c) in terms {
                    let contrib: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    add_to(&mut adj, tid, &contrib);
                }
            }
            Node::Concat { x, tail } => {
                let keep = g.len() - tail.len();
                add_to(&mut adj, *x, &g[..keep]);
            }
            Node::ContractCols { x, cols, v } => {
                let rows = tape.values[*x].len() / cols;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..*cols {
                        gx[r * cols + c] = g[r] * v[c];
                    }
                }
                add_to(&mut adj, *x, &gx);
            }
            Node::Frozen { x, f } => {
                let xv = &tape.values[*x];
                let out_dim = g.len();
                let mut gx = vec![0.0; xv.len()];
                let mut xp = xv.clone();
                for k in 0..xv.len() {
                    let h = 1e-6 * (1.0 + xv[k].abs());
                    xp[k] = xv[k] + h;
                    let up = f(&xp);
                    xp[k] = xv[k] - h;
                    let dn = f(&xp);
                    xp[k] = xv[k];
                    for r in 0..out_dim {
                        gx[k] += g[r] * (up[r] - dn[r]) / (2.0 * h);
                    }
                }
                add_to(&mut adj, *x, &gx);
            }
        }
    }
    grads
}

/// Taped forward pass of one network; returns the output value, the
/// tape, and the output node for seeding [`backward`].
pub fn mlp_forward<'p>(params: &'p MlpParams, x: &[f64]) -> (Vec<f64>, Tape<'p>, NodeId) {
    let mut tape = Tape::new();
    let net = tape.register_net(params);
    let input = tape.leaf(x.to_vec());
    let out = tape.mlp(net, input);
    (tape.value(out).to_vec(), tape, out)
}

/// AdamW optimizer state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected,
/// then `p <- p - lr m_hat / (sqrt(v_hat) + eps) - lr wd p`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], st: &mut AdamWState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), st.m.len());
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        let p = params[i];
        params[i] = p - st.lr * m_hat / (v_hat.sqrt() + st.eps) - st.lr * st.weight_decay * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arch(input: usize, hidden: usize, width: usize, out: usize) -> MlpArch {
        MlpArch::new(input, hidden, width, out).unwrap()
    }

    #[test]
    fn init_gaussian_zero_variance() {
        let p = mlp_init(arch(3, 2, 5, 2), InitScheme::Gaussian(0.0), 1);
        assert!(p.weights.iter().flatten().all(|&w| w == 0.0));
        assert!(p.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn init_fan_uniform_bounds() {
        let p = mlp_init(arch(4, 1, 8, 2), InitScheme::FanUniform, 2);
        // first layer fan_in = 4 -> every weight and bias in [-0.5, 0.5]
        assert!(p.weights[0].iter().all(|w| w.abs() <= 0.5));
        assert!(p.biases[0].iter().all(|b| b.abs() <= 0.5));
    }

    #[test]
    fn init_gaussian_variance_moment() {
        let p = mlp_init(arch(100, 10, 100, 10), InitScheme::Gaussian(1e-4), 3);
        let all: Vec<f64> = p.weights.iter().flatten().copied().collect();
        assert!(all.len() > 100_000);
        let var = all.iter().map(|w| w * w).sum::<f64>() / all.len() as f64;
        assert!((var - 1e-4).abs() < 0.05 * 1e-4, "sample variance {var}");
    }

    #[test]
    fn init_deterministic() {
        let a = mlp_init(arch(3, 2, 7, 1), InitScheme::FanUniform, 9);
        let b = mlp_init(arch(3, 2, 7, 1), InitScheme::FanUniform, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_zero_params_zero_output() {
        let p = MlpParams::zeros(arch(2, 1, 4, 3));
        let (y, _, _) = mlp_forward(&p, &[0.3, -0.7]);
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_single_layer_affine() {
        // one hidden layer with identity-ish weights and positive input
        // reproduces the affine chain exactly
        let mut p = MlpParams::zeros(arch(2, 1, 2, 2));
        p.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        p.biases[0] = vec![0.1, 0.2];
        p.weights[1] = vec![2.0, 0.0, 0.0, 2.0];
        p.biases[1] = vec![-1.0, 1.0];
        let (y, _, _) = mlp_forward(&p, &[0.5, 0.25]);
        assert_abs_diff_eq!(y[0], 2.0 * 0.6 - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 2.0 * 0.45 + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn taped_forward_matches_straight_line() {
        let p = mlp_init(arch(3, 2, 6, 2), InitScheme::FanUniform, 4);
        let x = [0.3, -0.2, 0.9];
        let (taped, _, _) = mlp_forward(&p, &x);
        let plain = mlp_eval(&p, &x);
        assert_eq!(taped, plain);
    }

    #[test]
    fn backward_linear_chain() {
        // y = w x: dy/dw = x, dy/dbias = 1
        let mut p = MlpParams::zeros(arch(1, 1, 1, 1));
        p.weights[0] = vec![3.0];
        p.weights[1] = vec![1.0];
        let (_, tape, out) = mlp_forward(&p, &[2.0]);
        let grads = backward(&tape, &[(out, vec![1.0])]);
        // first layer: y = 1 * relu(3 x), so dy/dw0 = x = 2
        assert_abs_diff_eq!(grads[0].weights[0][0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grads[0].biases[0][0], 1.0, epsilon = 1e-15);
        // output layer weight sees hidden value 6
        assert_abs_diff_eq!(grads[0].weights[1][0], 6.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_dead_rectifier_zero_grads() {
        let mut p = MlpParams::zeros(arch(1, 1, 1, 1));
        p.weights[0] = vec![1.0];
        p.biases[0] = vec![-10.0]; // rectifier input negative
        p.weights[1] = vec![5.0];
        p.biases[1] = vec![0.5];
        let (y, tape, out) = mlp_forward(&p, &[1.0]);
        assert_eq!(y, vec![0.5]); // constant output
        let grads = backward(&tape, &[(out, vec![1.0])]);
        assert_eq!(grads[0].weights[0][0], 0.0);
        assert_eq!(grads[0].biases[0][0], 0.0);
        // the output bias still participates
        assert_eq!(grads[0].biases[1][0], 1.0);
    }

    fn finite_diff_grads(p: &MlpParams, x: &[f64], seed: &[f64]) -> Vec<f64> {
        let mut flat = p.to_flat();
        let mut fd = vec![0.0; flat.len()];
        let h = 1e-5;
        let eval = |flat: &[f64]| {
            let mut q = p.clone();
            q.assign_flat(flat).unwrap();
            let y = mlp_eval(&q, x);
            y.iter().zip(seed).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            let up = eval(&flat);
            flat[i] = orig - h;
            let dn = eval(&flat);
            flat[i] = orig;
            fd[i] = (up - dn) / (2.0 * h);
        }
        fd
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = scalar_rng(77);
        let mut checked = 0;
        let mut seed_counter = 0u64;
        while checked < 50 {
            seed_counter += 1;
            let a = arch(
                rng.gen_range(1..4),
                rng.gen_range(1..3),
                rng.gen_range(2..7),
                rng.gen_range(1..3),
            );
            let p = mlp_init(a, InitScheme::FanUniform, 1000 + seed_counter);
            let x: Vec<f64> = (0..a.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, tape, out) = mlp_forward(&p, &x);
            // keep away from rectifier kinks so central differences see
            // a smooth function
            if tape.preactivation_margin() < 1e-3 {
                continue;
            }
            let seed: Vec<f64> = (0..a.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grads = backward(&tape, &[(out, seed.clone())]);
            let flat = grads[0].to_flat();
            let fd = finite_diff_grads(&p, &x, &seed);
            let num: f64 =
                flat.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den.max(1e-12) < 1e-5, "rel err {} too large", num / den);
            checked += 1;
        }
    }

    #[test]
    fn tape_primitive_gradients() {
        // sqrt_abs, hadamard, lin_comb, contract_cols, frozen against
        // finite differences through a hand-built graph
        let p = mlp_init(arch(3, 1, 3, 4), InitScheme::FanUniform, 5);
        let x = [0.4, -0.8];
        let build = |params: &MlpParams| -> f64 {
            let mut tape = Tape::new();
            let net = tape.register_net(params);
            let input = tape.leaf(x.to_vec());
            let cat = tape.concat(input, vec![0.5]);
            let y = tape.mlp(net, cat); // 4 outputs
            let s = tape.sqrt_abs(y);
            let h = tape.hadamard(s, y);
            let c = tape.contract_cols(h, 2, vec![0.3, -0.7]);
            let l = tape.lin_comb(vec![(c, 2.0), (c, -0.5)]);
            tape.value(l).iter().sum()
        };
        let base = build(&p);
        assert!(base.is_finite());

        let mut tape = Tape::new();
        let net = tape.register_net(&p);
        let input = tape.leaf(x.to_vec());
        let cat = tape.concat(input, vec![0.5]);
        let y = tape.mlp(net, cat);
        let s = tape.sqrt_abs(y);
        let h = tape.hadamard(s, y);
        let c = tape.contract_cols(h, 2, vec![0.3, -0.7]);
        let l = tape.lin_comb(vec![(c, 2.0), (c, -0.5)]);
        let dim = tape.value(l).len();
        let grads = backward(&tape, &[(l, vec![1.0; dim])]);

        let mut flat = p.to_flat();
        let hstep = 1e-6;
        for i in (0..flat.len()).step_by(3) {
            let orig = flat[i];
            flat[i] = orig + hstep;
            let mut q = p.clone();
            q.assign_flat(&flat).unwrap();
            let up = build(&q);
            flat[i] = orig - hstep;
            q.assign_flat(&flat).unwrap();
            let dn = build(&q);
            flat[i] = orig;
            let fd = (up - dn) / (2.0 * hstep);
            let ad = grads[0].to_flat()[i];
            assert_abs_diff_eq!(ad, fd, epsilon = 1e-4);
        }
    }

    #[test]
    fn frozen_node_jacobian() {
        let mut tape: Tape<'_> = Tape::new();
        let x = tape.leaf(vec![1.2, -0.3]);
        let f: super::FrozenFn = Arc::new(|v: &[f64]| vec![v[0] * v[0] + v[1], 3.0 * v[1]]);
        let y = tape.frozen(x, f);
        assert_abs_diff_eq!(tape.value(y)[0], 1.2 * 1.2 - 0.3, epsilon = 1e-12);
        // no registered nets: backward returns empty grads but still
        // exercises the jacobian path
        let grads = backward(&tape, &[(y, vec![1.0, 1.0])]);
        assert!(grads.is_empty());
    }

    #[test]
    fn adamw_identity_and_shrink() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut st = AdamWState::new(2, 0.01, 0.0);
        adamw_step(&mut p, &g, &mut st);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);

        let mut st = AdamWState::new(2, 0.01, 0.1);
        adamw_step(&mut p, &g, &mut st);
        assert_abs_diff_eq!(p[0], 1.0 * (1.0 - 0.01 * 0.1), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], -2.0 * (1.0 - 0.01 * 0.1), epsilon = 1e-15);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let mut p = vec![1.0];
        let g = vec![1.0];
        let mut st = AdamWState::new(1, 0.002, 0.005);
        adamw_step(&mut p, &g, &mut st);
        let expected = 1.0 - 0.002 * (1.0 / (1.0 + 1e-8)) - 0.002 * 0.005 * 1.0;
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn adamw_gradient_scale_invariance() {
        let g: Vec<f64> = vec![0.3, -0.7, 1.2, -0.01];
        let mut p1 = vec![0.5; 4];
        let mut p2 = vec![0.5; 4];
        let mut s1 = AdamWState::new(4, 0.01, 0.0);
        let mut s2 = AdamWState::new(4, 0.01, 0.0);
        let scaled: Vec<f64> = g.iter().map(|v| v * 1000.0).collect();
        adamw_step(&mut p1, &g, &mut s1);
        adamw_step(&mut p2, &scaled, &mut s2);
        for i in 0..4 {
            let d1 = p1[i] - 0.5;
            let d2 = p2[i] - 0.5;
            assert_eq!(d1.signum(), d2.signum());
            // m_hat / sqrt(v_hat) is exactly scale-free up to eps
            assert_abs_diff_eq!(d1, d2, epsilon = 1e-6);
        }
    }
}
