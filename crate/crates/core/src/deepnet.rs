//! Reverse-mode differentiation over matrix-valued nodes, and the multilayer
//! perceptron used by deep predictor terms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, CoreError, Result};
use crate::linalg::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    /// `n x k` plus a `1 x k` row broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    Log(usize),
    Exp(usize),
    Sum(usize),
    SliceCols(usize, Range<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records matrix operations in evaluation order so adjoints can be
/// propagated backwards. Nodes only reference earlier nodes.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(dim_err(format!("broadcast row {}x{} onto {} columns", rv.nrows(), rv.ncols(), av.ncols())));
        }
        let r = rv.row(0);
        let v = Matrix::from_fn(av.nrows(), av.ncols(), |i, j| av[(i, j)] + r[j]);
        Ok(self.push(v, Op::AddRow(a.0, row.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::exp);
        self.push(v, Op::Exp(a.0))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a.0))
    }

    pub fn slice_cols(&mut self, a: NodeId, cols: Range<usize>) -> Result<NodeId> {
        if cols.end > self.value(a).ncols() {
            return Err(dim_err("column slice out of bounds"));
        }
        let v = self.value(a).select_cols(cols.clone());
        Ok(self.push(v, Op::SliceCols(a.0, cols)))
    }

    /// Propagates adjoints from a scalar root back through the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.nrows() != 1 || rv.ncols() != 1 {
            return Err(CoreError::Dimension(format!(
                "backward needs a scalar root, got {}x{}",
                rv.nrows(),
                rv.ncols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for k in (0..=root.0).rev() {
            let Some(g) = adj[k].take() else { continue };
            let node = &self.nodes[k];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(&self.nodes[*b].value, |x, y| x * y)?;
                    let gb = g.zip_with(&self.nodes[*a].value, |x, y| x * y)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[*b].value.transpose())?;
                    let gb = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut sums = Matrix::zeros(1, g.ncols());
                    for i in 0..g.nrows() {
                        for (s, v) in sums.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *r, sums);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                Op::Relu(a) => {
                    let ga = g.zip_with(&self.nodes[*a].value, |x, z| if z > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_with(&node.value, |x, t| x * (1.0 - t * t))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_with(&self.nodes[*a].value, |x, z| x * math::sigmoid(z))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_with(&self.nodes[*a].value, |x, z| x / z)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_with(&node.value, |x, e| x * e)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let src = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, Matrix::filled(src.nrows(), src.ncols(), g[(0, 0)]));
                }
                Op::SliceCols(a, cols) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(src.nrows(), src.ncols());
                    for i in 0..src.nrows() {
                        ga.row_mut(i)[cols.clone()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *a, ga);
                }
            }
            adj[k] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], k: usize, g: Matrix) {
    adj[k] = Some(match adj[k].take() {
        Some(prev) => prev.add(&g).expect("adjoint shapes match their node"),
        None => g,
    });
}

/// Adjoints `d root / d node` for every node reachable from the root.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of a node; `None` when the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of a node, zero-filled to `like` when the root does not depend on it.
    pub fn wrt(&self, id: NodeId, like: &Matrix) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(like.nrows(), like.ncols()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Multilayer perceptron with hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input_dim: usize,
    layers: Vec<Dense>,
    activation: Activation,
}

/// Parameter and output nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub output: NodeId,
    pub params: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.iter().any(|&w| w == 0) {
            return Err(config_err("network widths must be positive and non-empty"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let scale = math::sqrt(2.0 / fan_in as f64);
            let weights = Matrix::from_fn(fan_in, w, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            });
            layers.push(Dense { weights, bias: vec![0.0; w] });
            fan_in = w;
        }
        Ok(Self { input_dim, layers, activation })
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        let mut fan_in = input_dim;
        for (k, l) in layers.iter().enumerate() {
            if l.weights.nrows() != fan_in || l.bias.len() != l.weights.ncols() {
                return Err(dim_err(format!("layer {k} does not chain onto width {fan_in}")));
            }
            fan_in = l.weights.ncols();
        }
        if layers.is_empty() {
            return Err(config_err("a network needs at least one layer"));
        }
        Ok(Self { input_dim, layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.ncols())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Records the forward pass for `x` (`n x input_dim`) on `tape`.
    pub fn forward(&self, x: &Matrix, tape: &mut Tape) -> Result<MlpTrace> {
        let input = tape.leaf(x.clone());
        self.forward_node(input, tape)
    }

    pub fn forward_node(&self, input: NodeId, tape: &mut Tape) -> Result<MlpTrace> {
        if tape.value(input).ncols() != self.input_dim {
            return Err(dim_err(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                tape.value(input).ncols()
            )));
        }
        let mut h = input;
        let mut params = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(Matrix::from_vec(1, layer.bias.len(), layer.bias.clone())?);
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if k < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
            params.push((w, b));
        }
        Ok(MlpTrace { output: h, params })
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let trace = self.forward(x, &mut tape)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`Mlp::flatten_into`]; returns the number of values consumed.
    pub fn assign_from(&mut self, values: &[f64]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        off
    }

    /// Gradient of a recorded pass in [`Mlp::flatten_into`] order.
    pub fn gradient_into(&self, trace: &MlpTrace, grads: &Gradients, out: &mut Vec<f64>) {
        for (l, (w, b)) in self.layers.iter().zip(&trace.params) {
            out.extend_from_slice(grads.wrt(*w, &l.weights).as_slice());
            match grads.get(*b) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(core::iter::repeat_n(0.0, l.bias.len())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![
            Dense { weights: Matrix::zeros(2, 3), bias: vec![0.0; 3] },
            Dense { weights: Matrix::zeros(3, 1), bias: vec![0.0] },
        ];
        let net = Mlp::from_layers(2, layers, Activation::Relu).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.3, 4.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = Mlp::from_layers(2, vec![Dense { weights: Matrix::identity(2), bias: vec![0.0; 2] }], Activation::Relu)
            .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.3, 4.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
        assert!(net.predict(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn relu_example() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let r = t.relu(a);
        assert_eq!(t.value(r).as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let p = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let sq = t.mul(p, p).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(p).unwrap().as_slice(), &[2.0, 4.0]);

        for w in [-3.0, 0.2, 5.0] {
            let mut t = Tape::new();
            let p = t.leaf(Matrix::filled(1, 1, w));
            let e = t.exp(p);
            let l = t.log(e);
            let g = t.backward(l).unwrap();
            assert!((g.get(p).unwrap()[(0, 0)] - 1.0).abs() < 1e-12);
        }

        let mut t = Tape::new();
        let p = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn slice_and_scale_backward() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let s = t.slice_cols(a, 1..3).unwrap();
        let sp = t.softplus(s);
        let th = t.tanh(sp);
        let sc = t.scale(th, 3.0);
        let root = t.sum(sc);
        let g = t.backward(root).unwrap();
        let ga = g.get(a).unwrap();
        assert_eq!(ga[(0, 0)], 0.0);
        let z: f64 = 2.0;
        let spz = z.exp().ln_1p();
        let expect = 3.0 * (1.0 - spz.tanh().powi(2)) * (1.0 / (1.0 + (-z).exp()));
        assert!((ga[(0, 1)] - expect).abs() < 1e-12);
    }

    fn loss_of(net: &Mlp, x: &Matrix, target: &Matrix) -> f64 {
        let out = net.predict(x).unwrap();
        out.as_slice().iter().zip(target.as_slice()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>()
    }

    #[test]
    fn mlp_gradient_matches_central_differences() {
        for seed in 0..20_u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let activation = if seed % 2 == 0 { Activation::Relu } else { Activation::Tanh };
            let net = Mlp::new(3, &[5, 4, 2], activation, &mut rng).unwrap();
            let x = Matrix::from_fn(6, 3, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let target = Matrix::from_fn(6, 2, |i, j| (i + j) as f64 * 0.1);
            let mut tape = Tape::new();
            let trace = net.forward(&x, &mut tape).unwrap();
            let tgt = tape.leaf(target.clone());
            let diff = tape.sub(trace.output, tgt).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let root = tape.sum(sq);
            let grads = tape.backward(root).unwrap();
            let mut analytic = Vec::new();
            net.gradient_into(&trace, &grads, &mut analytic);

            let mut theta = Vec::new();
            net.flatten_into(&mut theta);
            assert_eq!(theta.len(), net.num_params());
            let base = loss_of(&net, &x, &target);
            let mut worst: f64 = 0.0;
            let mut kinks = 0;
            for k in 0..theta.len() {
                let h = 1e-5 * theta[k].abs().max(1.0);
                let mut probe = net.clone();
                let mut plus = theta.clone();
                plus[k] += h;
                probe.assign_from(&plus);
                let lp = loss_of(&probe, &x, &target);
                let mut minus = theta.clone();
                minus[k] -= h;
                probe.assign_from(&minus);
                let lm = loss_of(&probe, &x, &target);
                let fd = (lp - lm) / (2.0 * h);
                // a relu switching inside the stencil leaves one-sided slopes apart
                if ((lp - base) / h - (base - lm) / h).abs() > 1e-3 * fd.abs().max(1.0) {
                    kinks += 1;
                    continue;
                }
                let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "seed {seed}: {worst}");
            assert!(kinks * 10 <= theta.len(), "seed {seed}: {kinks} kinks");
            if activation == Activation::Tanh {
                assert_eq!(kinks, 0);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::new(4, &[8, 1], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Mlp::new(4, &[8, 1], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c = Mlp::new(4, &[8, 1], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
