//! Reverse-mode tape.
//!
//! Each primitive appends one node holding its forward value and enough
//! information to compute its adjoint. Nodes are only ever appended, so
//! inputs always precede their consumers and `backward` is a single reverse
//! sweep.

use std::borrow::Cow;

use super::{ParamId, ParamStore, Tensor, LOG_CLAMP};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, target: usize },
    Sum(Var),
    Concat(Vec<Var>),
    EmbedMean { table: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    data: Cow<'p, [f32]>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
}

fn dot(a: &[f32], b: impl Iterator<Item = f32>) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub(crate) fn softmax_slice(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that can read parameters from `params` without copying them.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Cow<'p, [f32]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("tape nodes keep valid shapes")
    }

    pub fn item(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    /// Records an input tensor. Gradients flow to it iff the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    fn store(&self) -> &'p ParamStore {
        self.params
            .expect("parameter access requires a tape built with Tape::with_params")
    }

    /// Trainable reference to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store().get(id);
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Param(id),
            true,
        )
    }

    /// Stored parameter read as a constant; no gradient reaches it.
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        let t = self.store().get(id);
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.to_vec());
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Matrix product. A 1-D left operand of length `k` is treated as a
    /// single row, giving a 1-D result of length `n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, out_shape) = match sa.as_slice() {
            [k] => (1, *k, None),
            [m, k] => (*m, *k, Some(*m)),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let n = match sb.as_slice() {
            [k2, n] if *k2 == k => *n,
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (p, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                let x = x as f64;
                for (a, &y) in acc.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *a += x * y as f64;
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
        let shape = match out_shape {
            Some(m) => vec![m, n],
            None => vec![n],
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || lb == 1 {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let shape = self.broadcast(name, a, b)?;
        let n: usize = shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let pick = |v: &[f32], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out = (0..n).map(|i| f(pick(av, i), pick(bv, i))).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(max(x, LOG_CLAMP))`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_CLAMP).ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f32::exp)
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let out = softmax_slice(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax(a), rg))
    }

    /// `-log softmax(logits)[target]`, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if self.shape(logits).len() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![],
            });
        }
        if target >= z.len() {
            return Err(Error::Index {
                index: target,
                len: z.len(),
            });
        }
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = z
            .iter()
            .map(|&v| ((v - max) as f64).exp())
            .sum::<f64>()
            .ln();
        let loss = (lse - (z[target] - max) as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss.max(0.0)]),
            Op::CrossEntropy { logits, target },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), rg)
    }

    /// Flattens and concatenates its inputs into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out: Vec<f32> = parts
            .iter()
            .flat_map(|v| self.value(*v).iter().copied())
            .collect();
        let rg = self.rg(parts);
        self.push(
            vec![out.len()],
            Cow::Owned(out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Mean of the selected rows of a `[rows, dim]` table.
    pub fn embed_mean(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let (nrows, dim) = match shape.as_slice() {
            [r, d] => (*r, *d),
            _ => {
                return Err(Error::Shape {
                    op: "embed_mean",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        if rows.is_empty() {
            return Err(Error::Index { index: 0, len: 0 });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Index {
                index: bad,
                len: nrows,
            });
        }
        let tv = self.value(table);
        let mut acc = vec![0.0f64; dim];
        for &r in rows {
            for (a, &x) in acc.iter_mut().zip(&tv[r * dim..(r + 1) * dim]) {
                *a += x as f64;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        let out = acc.into_iter().map(|a| (a * inv) as f32).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![dim],
            Cow::Owned(out),
            Op::EmbedMean {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    /// Propagates adjoints from the scalar `loss` to every reachable node
    /// that requires a gradient. Previous gradients on this tape are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k) = if sa.len() == 1 {
                        (1, sa[0])
                    } else {
                        (sa[0], sa[1])
                    };
                    let n = sb[1];
                    let av = self.value(a).to_vec();
                    let bv = self.value(b).to_vec();
                    // dA = dY · Bᵀ
                    self.add_grad(a, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                ga[r * k + p] += dot(
                                    &gy[r * n..(r + 1) * n],
                                    bv[p * n..(p + 1) * n].iter().copied(),
                                );
                            }
                        }
                    });
                    // dB = Aᵀ · dY
                    self.add_grad(b, |gb| {
                        for r in 0..m {
                            let gy_row = &gy[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                for (g, &dy) in gb[p * n..(p + 1) * n].iter_mut().zip(gy_row) {
                                    *g += x * dy;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    self.reduce_into(a, &gy, 1.0);
                    self.reduce_into(b, &gy, sign);
                }
                Op::Mul(a, b) => {
                    let av = self.value(a).to_vec();
                    let bv = self.value(b).to_vec();
                    let pick = |v: &[f32], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                    let ga: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * pick(&bv, j))
                        .collect();
                    let gb: Vec<f32> = gy
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * pick(&av, j))
                        .collect();
                    self.reduce_into(a, &ga, 1.0);
                    self.reduce_into(b, &gb, 1.0);
                }
                Op::Scale(a, c) => self.add_grad(a, |ga| {
                    ga.iter_mut().zip(&gy).for_each(|(g, y)| *g += c * y)
                }),
                Op::Relu(a) => {
                    let xv = self.value(a).to_vec();
                    self.add_grad(a, |ga| {
                        for ((g, y), x) in ga.iter_mut().zip(&gy).zip(&xv) {
                            if *x > 0.0 {
                                *g += y;
                            }
                        }
                    })
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[i].data.to_vec();
                    self.add_grad(a, |ga| {
                        for ((g, dy), s) in ga.iter_mut().zip(&gy).zip(&yv) {
                            *g += dy * s * (1.0 - s);
                        }
                    })
                }
                Op::Log(a) => {
                    let xv = self.value(a).to_vec();
                    self.add_grad(a, |ga| {
                        for ((g, dy), x) in ga.iter_mut().zip(&gy).zip(&xv) {
                            if *x > LOG_CLAMP {
                                *g += dy / x;
                            }
                        }
                    })
                }
                Op::Exp(a) => {
                    let yv = self.nodes[i].data.to_vec();
                    self.add_grad(a, |ga| {
                        ga.iter_mut()
                            .zip(&gy)
                            .zip(&yv)
                            .for_each(|((g, dy), y)| *g += dy * y)
                    })
                }
                Op::Softmax(a) => {
                    let s = self.nodes[i].data.to_vec();
                    let inner = dot(&gy, s.iter().copied());
                    self.add_grad(a, |ga| {
                        for ((g, dy), si) in ga.iter_mut().zip(&gy).zip(&s) {
                            *g += si * (dy - inner);
                        }
                    })
                }
                Op::CrossEntropy { logits, target } => {
                    let p = softmax_slice(self.value(logits));
                    let g0 = gy[0];
                    self.add_grad(logits, |ga| {
                        for (j, (g, pj)) in ga.iter_mut().zip(&p).enumerate() {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            *g += g0 * (pj - onehot);
                        }
                    })
                }
                Op::Sum(a) => self.add_grad(a, |ga| ga.iter_mut().for_each(|g| *g += gy[0])),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(p).len();
                        let slice = gy[off..off + n].to_vec();
                        self.add_grad(p, |gp| gp.iter_mut().zip(&slice).for_each(|(g, s)| *g += s));
                        off += n;
                    }
                }
                Op::EmbedMean { table, rows } => {
                    let dim = gy.len();
                    let inv = 1.0 / rows.len() as f32;
                    self.add_grad(table, |gt| {
                        for &r in &rows {
                            for (g, dy) in gt[r * dim..(r + 1) * dim].iter_mut().zip(&gy) {
                                *g += dy * inv;
                            }
                        }
                    })
                }
            }
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Accumulates `g * sign` into `v`, summing if `v` was broadcast from a scalar.
    fn reduce_into(&mut self, v: Var, g: &[f32], sign: f32) {
        let len = self.value(v).len();
        if len == 1 && g.len() != 1 {
            let total = g.iter().map(|&x| x as f64).sum::<f64>() as f32;
            self.add_grad(v, |gv| gv[0] += sign * total);
        } else {
            self.add_grad(v, |gv| {
                gv.iter_mut().zip(g).for_each(|(a, b)| *a += sign * b)
            });
        }
    }

    /// Which side of each non-differentiable point (relu at 0, log clamp)
    /// every recorded input sits on. Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some((a, 0.0)),
                Op::Log(a) => Some((a, LOG_CLAMP)),
                _ => None,
            })
            .flat_map(|(a, at)| self.value(a).iter().map(move |&x| x > at))
            .collect()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter node touched by the last
    /// backward pass. A parameter read twice yields two entries.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => self.grads.get(i)?.as_deref().map(|g| (id, g)),
                _ => None,
            })
    }
}
