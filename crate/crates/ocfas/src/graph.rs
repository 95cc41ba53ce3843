//! Minimal reverse-mode autodiff tape over `f64` vectors. Only the operations
//! the toy backbone and the loss terms need are implemented.

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf value. `requires_grad` controls whether gradients accumulate;
    /// frozen parameter groups register leaves with `requires_grad = false`.
    Input { requires_grad: bool },
    /// `y = W x + b`, `W` is `rows x cols` row-major.
    Affine { w: NodeId, b: NodeId, x: NodeId, rows: usize, cols: usize },
    /// Elementwise GELU (tanh approximation).
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    /// Mean of selected rows of an embedding table (`rows x dim` row-major).
    MeanLookup { table: NodeId, dim: usize, indices: Vec<usize> },
    /// Elementwise mean of several same-length vectors.
    MeanList { xs: Vec<NodeId> },
    /// `[a; b]`.
    Concat { a: NodeId, b: NodeId },
    /// Transposed convolution, kernel 2x2, stride 2: input `c_in x h x w`,
    /// output `c_out x 2h x 2w`. Kernel layout `[c_in][c_out][2][2]`.
    ConvT2x2 { kernel: NodeId, bias: NodeId, x: NodeId, c_in: usize, c_out: usize, h: usize, w: usize },
    /// Scalar `||a - b||_2^2`.
    SqDiff { a: NodeId, b: NodeId },
    /// Scalar cosine similarity; a zero vector on either side yields 0.
    Cos { a: NodeId, b: NodeId },
    /// Scalar `log sum exp` over scalar nodes, max-stabilized.
    LogSumExp { xs: Vec<NodeId> },
    /// Scalar linear combination of scalar nodes.
    LinComb { terms: Vec<(f64, NodeId)> },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// GELU via the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn input(&mut self, value: Vec<f64>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Input { requires_grad })
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.input(value, false)
    }

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let cols = self.nodes[x.0].value.len();
        let rows = self.nodes[b.0].value.len();
        assert_eq!(self.nodes[w.0].value.len(), rows * cols, "affine shape mismatch");
        let mut out = self.nodes[b.0].value.clone();
        {
            let wv = &self.nodes[w.0].value;
            let xv = &self.nodes[x.0].value;
            for i in 0..rows {
                let mut acc = 0.0;
                let row = &wv[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    acc += row[j] * xv[j];
                }
                out[i] += acc;
            }
        }
        self.push(out, Op::Affine { w, b, x, rows, cols })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        self.push(out, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(out, Op::Tanh { x })
    }

    pub fn mean_lookup(&mut self, table: NodeId, dim: usize, indices: Vec<usize>) -> NodeId {
        assert!(!indices.is_empty());
        let mut out = vec![0.0; dim];
        {
            let tv = &self.nodes[table.0].value;
            for &idx in &indices {
                for k in 0..dim {
                    out[k] += tv[idx * dim + k];
                }
            }
        }
        let n = indices.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::MeanLookup { table, dim, indices })
    }

    pub fn mean_list(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.nodes[xs[0].0].value.len();
        let mut out = vec![0.0; dim];
        for &x in &xs {
            for (o, v) in out.iter_mut().zip(&self.nodes[x.0].value) {
                *o += v;
            }
        }
        let n = xs.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::MeanList { xs })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        out.extend_from_slice(&self.nodes[b.0].value);
        self.push(out, Op::Concat { a, b })
    }

    pub fn conv_t_2x2(
        &mut self,
        kernel: NodeId,
        bias: NodeId,
        x: NodeId,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
    ) -> NodeId {
        assert_eq!(self.nodes[x.0].value.len(), c_in * h * w);
        assert_eq!(self.nodes[kernel.0].value.len(), c_in * c_out * 4);
        assert_eq!(self.nodes[bias.0].value.len(), c_out);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c_out * oh * ow];
        {
            let kv = &self.nodes[kernel.0].value;
            let bv = &self.nodes[bias.0].value;
            let xv = &self.nodes[x.0].value;
            for co in 0..c_out {
                for v in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
                    *v = bv[co];
                }
            }
            for ci in 0..c_in {
                for co in 0..c_out {
                    let k = &kv[(ci * c_out + co) * 4..(ci * c_out + co) * 4 + 4];
                    for r in 0..h {
                        for c in 0..w {
                            let v = xv[ci * h * w + r * w + c];
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    out[co * oh * ow + (2 * r + dr) * ow + (2 * c + dc)] +=
                                        v * k[dr * 2 + dc];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::ConvT2x2 { kernel, bias, x, c_in, c_out, h, w })
    }

    pub fn sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "sq_diff length mismatch");
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(vec![s], Op::SqDiff { a, b })
    }

    pub fn cos(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "cos length mismatch");
        let na: f64 = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v = if na == 0.0 || nb == 0.0 {
            log::warn!("cosine similarity of a zero vector, defining cos = 0");
            0.0
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        self.push(vec![v], Op::Cos { a, b })
    }

    pub fn log_sum_exp(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty());
        let m = xs
            .iter()
            .map(|&x| self.scalar(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|&x| (self.scalar(x) - m).exp()).sum();
        self.push(vec![m + s.ln()], Op::LogSumExp { xs })
    }

    pub fn lin_comb(&mut self, terms: Vec<(f64, NodeId)>) -> NodeId {
        let v: f64 = terms.iter().map(|&(c, x)| c * self.scalar(x)).sum();
        self.push(vec![v], Op::LinComb { terms })
    }

    /// Gradients of the scalar `loss` node w.r.t. every node. Leaves with
    /// `requires_grad = false` report zero gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        grads[i] = g;
                    }
                    // else: dropped, stays zero
                    continue;
                }
                Op::Affine { w, b, x, rows, cols } => {
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    for r in 0..*rows {
                        grads[b.0][r] += g[r];
                        for c in 0..*cols {
                            grads[w.0][r * cols + c] += g[r] * xv[c];
                            grads[x.0][c] += g[r] * wv[r * cols + c];
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    for (k, &gv) in g.iter().enumerate() {
                        grads[x.0][k] += gv * gelu_prime(xv[k]);
                    }
                }
                Op::Tanh { x } => {
                    let yv = &self.nodes[i].value;
                    for (k, &gv) in g.iter().enumerate() {
                        grads[x.0][k] += gv * (1.0 - yv[k] * yv[k]);
                    }
                }
                Op::MeanLookup { table, dim, indices } => {
                    let n = indices.len() as f64;
                    for &idx in indices {
                        for k in 0..*dim {
                            grads[table.0][idx * dim + k] += g[k] / n;
                        }
                    }
                }
                Op::MeanList { xs } => {
                    let n = xs.len() as f64;
                    for &x in xs {
                        for (k, &gv) in g.iter().enumerate() {
                            grads[x.0][k] += gv / n;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[a.0].value.len();
                    for k in 0..la {
                        grads[a.0][k] += g[k];
                    }
                    for k in 0..self.nodes[b.0].value.len() {
                        grads[b.0][k] += g[la + k];
                    }
                }
                Op::ConvT2x2 { kernel, bias, x, c_in, c_out, h, w } => {
                    let (oh, ow) = (2 * h, 2 * w);
                    let kv = self.nodes[kernel.0].value.clone();
                    let xv = self.nodes[x.0].value.clone();
                    for co in 0..*c_out {
                        for p in 0..oh * ow {
                            grads[bias.0][co] += g[co * oh * ow + p];
                        }
                    }
                    for ci in 0..*c_in {
                        for co in 0..*c_out {
                            for r in 0..*h {
                                for c in 0..*w {
                                    let v = xv[ci * h * w + r * w + c];
                                    for dr in 0..2 {
                                        for dc in 0..2 {
                                            let go =
                                                g[co * oh * ow + (2 * r + dr) * ow + (2 * c + dc)];
                                            grads[kernel.0][(ci * c_out + co) * 4 + dr * 2 + dc] +=
                                                go * v;
                                            grads[x.0][ci * h * w + r * w + c] +=
                                                go * kv[(ci * c_out + co) * 4 + dr * 2 + dc];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SqDiff { a, b } => {
                    let gs = g[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = &self.nodes[b.0].value;
                    for k in 0..av.len() {
                        let d = 2.0 * (av[k] - bv[k]) * gs;
                        grads[a.0][k] += d;
                        grads[b.0][k] -= d;
                    }
                }
                Op::Cos { a, b } => {
                    let gs = g[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let na: f64 = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        let dot: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
                        let cosv = dot / (na * nb);
                        for k in 0..av.len() {
                            grads[a.0][k] += gs * (bv[k] / (na * nb) - cosv * av[k] / (na * na));
                            grads[b.0][k] += gs * (av[k] / (na * nb) - cosv * bv[k] / (nb * nb));
                        }
                    }
                }
                Op::LogSumExp { xs } => {
                    let gs = g[0];
                    let v = self.nodes[i].value[0];
                    for &x in xs {
                        grads[x.0][0] += gs * (self.scalar(x) - v).exp();
                    }
                }
                Op::LinComb { terms } => {
                    let gs = g[0];
                    for &(c, x) in terms {
                        grads[x.0][0] += gs * c;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}
