use std::sync::Arc;

use super::kernels::{col2im, elu_in_place, gemm, im2col, Mat};
use super::{numel, LayerParams, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    /// Population variance (divides by the axis length).
    Variance,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

impl BnStats {
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, mean: &mut [f64], var: &mut [f64], momentum: f64) {
        for c in 0..self.mean.len() {
            mean[c] = (1.0 - momentum) * mean[c] + momentum * self.mean[c];
            var[c] = (1.0 - momentum) * var[c] + momentum * self.var[c];
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
        batch: usize,
        cin: usize,
        len: usize,
        cout: usize,
        kw: usize,
        l_out: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Elu {
        x: Var,
        alpha: f64,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
        batch: usize,
        channels: usize,
        len: usize,
        m: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        dim: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Nodes are appended in evaluation order, which is also a
/// topological order for the reverse pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    Ok(())
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; saves the buffers the reverse
    /// pass would need.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Drops the value of an intermediate node on an inference graph; later
    /// reads of `v` panic. No-op on graphs that track gradients.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = Arc::new(Vec::new());
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor, name: Option<String>, track: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Arc::new(t.data.clone()),
            op: Op::Leaf { name },
            needs_grad: self.grad_enabled && track,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, None, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t, None, false))
    }

    /// An unnamed leaf that tracks gradients when `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, None, t.requires_grad)
    }

    /// A named parameter leaf; its gradient is routed back by name.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.leaf(t, Some(name.to_string()), t.requires_grad)
    }

    /// Grouped, strided 1-D cross-correlation without padding.
    ///
    /// `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is `[C_out, C_in / groups, k_w]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, len, rank3) = match xs.as_slice() {
            [c, l] => (1, *c, *l, false),
            [b, c, l] => (*b, *c, *l, true),
            _ => return Err(Error::shape(format!("conv1d input must be rank 2 or 3, got {xs:?}"))),
        };
        let [cout, cin_g, kw] = ws[..] else {
            return Err(Error::shape(format!("conv1d weight must be rank 3, got {ws:?}")));
        };
        if groups == 0 || stride == 0 {
            return Err(Error::shape("conv1d stride and groups must be positive"));
        }
        if cin % groups != 0 {
            return Err(Error::GroupIndivisible {
                channels: cin,
                groups,
            });
        }
        if cout % groups != 0 {
            return Err(Error::GroupIndivisible {
                channels: cout,
                groups,
            });
        }
        if cin / groups != cin_g {
            return Err(Error::shape(format!(
                "conv1d weight expects {cin_g} channels per group, input provides {}",
                cin / groups
            )));
        }
        if len < kw {
            return Err(Error::shape(format!("conv1d input length {len} < kernel {kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv1d bias must be [{cout}]")));
            }
        }
        let l_out = (len - kw) / stride + 1;
        let cout_g = cout / groups;
        let direct = kw == 1 && stride == 1;
        // Start from the bias so the products accumulate on top of it.
        let mut out = Vec::with_capacity(batch * cout * l_out);
        match b {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                for _ in 0..batch {
                    for &bias in bv.iter() {
                        out.extend(std::iter::repeat_n(bias, l_out));
                    }
                }
            }
            None => out.resize(batch * cout * l_out, 0.0),
        }
        let mut col = if direct { Vec::new() } else { vec![0.0; cin_g * kw * l_out] };
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for bi in 0..batch {
                for g in 0..groups {
                    let xg = &xv[(bi * cin + g * cin_g) * len..(bi * cin + (g + 1) * cin_g) * len];
                    let cm = if direct {
                        Mat::row_major(xg, cin_g, len)
                    } else {
                        im2col(xg, cin_g, len, kw, stride, l_out, &mut col);
                        Mat::row_major(&col, cin_g * kw, l_out)
                    };
                    let wg = Mat::row_major(
                        &wv[g * cout_g * cin_g * kw..(g + 1) * cout_g * cin_g * kw],
                        cout_g,
                        cin_g * kw,
                    );
                    let o = (bi * cout + g * cout_g) * l_out;
                    gemm(wg, cm, &mut out[o..o + cout_g * l_out], l_out, 1.0);
                }
            }
        }
        let shape = if rank3 {
            vec![batch, cout, l_out]
        } else {
            vec![cout, l_out]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                groups,
                batch,
                cin,
                len,
                cout,
                kw,
                l_out,
            },
            &inputs,
        ))
    }

    /// Affine map on the last axis: `x W^T + b` with `W` shaped `[F_out, F_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [fout, fin] = ws[..] else {
            return Err(Error::shape(format!("linear weight must be rank 2, got {ws:?}")));
        };
        if xs.last() != Some(&fin) {
            return Err(Error::shape(format!("linear expects last dim {fin}, input is {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(format!("linear bias must be [{fout}]")));
            }
        }
        let rows = numel(&xs) / fin;
        let mut out = match b {
            Some(b) => self.nodes[b.0].value.repeat(rows),
            None => vec![0.0; rows * fout],
        };
        let xm = Mat::row_major(&self.nodes[x.0].value, rows, fin);
        let wm = Mat::row_major(&self.nodes[w.0].value, fout, fin).t();
        gemm(xm, wm, &mut out, fout, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
            &inputs,
        ))
    }

    /// Batch normalization over every axis except axis 1 of a `[B, C]` or
    /// `[B, C, L]` input.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BnStats>)> {
        let xs = self.shape(x).to_vec();
        let (outer, channels, inner) = match xs.as_slice() {
            [b, c] => (*b, *c, 1),
            [b, c, l] => (*b, *c, *l),
            _ => return Err(Error::shape(format!("batchnorm input must be rank 2 or 3, got {xs:?}"))),
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape(format!("batchnorm affine params must be [{channels}]")));
        }
        let n = outer * inner;
        let xv = &self.nodes[x.0].value;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for b in 0..outer {
                    for c in 0..channels {
                        let o = (b * channels + c) * inner;
                        mean[c] += xv[o..o + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for b in 0..outer {
                    for c in 0..channels {
                        let o = (b * channels + c) * inner;
                        let m = mean[c];
                        var[c] += xv[o..o + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape(format!("running stats must have {channels} channels")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let track = self.grad_enabled && [x, gamma, beta].iter().any(|&v| self.needs(v));
        let mut xhat = Vec::with_capacity(if track { xv.len() } else { 0 });
        let mut out = Vec::with_capacity(xv.len());
        for (row, c) in xv.chunks_exact(inner).zip((0..channels).cycle()) {
            let (m, s, g, bb) = (mean[c], inv_std[c], gv[c], bv[c]);
            if track {
                xhat.extend(row.iter().map(|v| (v - m) * s));
                out.extend(xhat[xhat.len() - inner..].iter().map(|h| g * h + bb));
            } else {
                out.extend(row.iter().map(|v| g * ((v - m) * s) + bb));
            }
        }
        let v = self.push(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: stats.is_some(),
                outer,
                channels,
                inner,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let mut out = self.nodes[x.0].value.to_vec();
        elu_in_place(&mut out, alpha);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Elu { x, alpha }, &[x])
    }

    /// Like [`Graph::elu`], but on an inference graph the input's storage is
    /// reused and `x` is released.
    pub fn elu_consume(&mut self, x: Var, alpha: f64) -> Var {
        if self.grad_enabled {
            return self.elu(x, alpha);
        }
        let buf = std::mem::take(&mut self.nodes[x.0].value);
        let mut out = Arc::try_unwrap(buf).unwrap_or_else(|shared| shared.to_vec());
        elu_in_place(&mut out, alpha);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Elu { x, alpha }, &[x])
    }

    /// Reduces one axis away; max routes its gradient to the lowest-index maximum.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis(axis, xs.len())?;
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Max if !(self.grad_enabled && self.needs(x)) && inner == 1 => {
                for (o, row) in out.iter_mut().zip(xv.chunks_exact(n)) {
                    *o = row[1..]
                        .iter()
                        .fold(row[0], |a, &b| if b > a { b } else { a });
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for j in 0..n {
                            let v = xv[(o * n + j) * inner + i];
                            if v > best || j == 0 {
                                best = v;
                                arg = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
            ReduceKind::Mean | ReduceKind::Variance => {
                for o in 0..outer {
                    for j in 0..n {
                        let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                out.iter_mut().for_each(|v| *v /= n as f64);
                if kind == ReduceKind::Variance {
                    let mean = std::mem::replace(&mut out, vec![0.0; outer * inner]);
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let d = xv[(o * n + j) * inner + i] - mean[o * inner + i];
                                out[o * inner + i] += d * d;
                            }
                        }
                    }
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        Ok(self.push(
            shape,
            out,
            Op::Reduce {
                x,
                kind,
                outer,
                n,
                inner,
                argmax,
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis(axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(a, (x, y))| a != axis && x != y)
            {
                return Err(Error::shape(format!("concat shapes {base:?} and {s:?} differ off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let row: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.nodes[v.0].value[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            inputs,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    /// Like [`Graph::add`], but on an inference graph `a`'s storage is reused
    /// and `a` is released.
    pub fn add_consume(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.grad_enabled || a == b {
            return self.add(a, b);
        }
        self.same_shape(a, b, "add")?;
        let buf = std::mem::take(&mut self.nodes[a.0].value);
        let mut out = Arc::try_unwrap(buf).unwrap_or_else(|shared| shared.to_vec());
        out.iter_mut()
            .zip(self.nodes[b.0].value.iter())
            .for_each(|(x, y)| *x += y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar(x), &[x])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean(x), &[x])
    }

    /// Picks columns of a `[B, C, L]` tensor: `idx` holds `m` positions per batch row.
    pub fn gather(&mut self, x: Var, idx: &[usize], m: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, channels, len] = xs[..] else {
            return Err(Error::shape(format!("gather input must be rank 3, got {xs:?}")));
        };
        if idx.len() != batch * m {
            return Err(Error::shape(format!("gather needs {} indices, got {}", batch * m, idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::shape(format!("gather index {bad} out of range {len}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(batch * channels * m);
        for b in 0..batch {
            let ib = &idx[b * m..(b + 1) * m];
            for c in 0..channels {
                let src = &xv[(b * channels + c) * len..(b * channels + c + 1) * len];
                out.extend(ib.iter().map(|&i| src[i]));
            }
        }
        Ok(self.push(
            vec![batch, channels, m],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                batch,
                channels,
                len,
                m,
            },
            &[x],
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis(axis, xs.len())?;
        if len == 0 || start + len > xs[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) outside axis of size {}",
                start + len,
                xs[axis]
            )));
        }
        let (outer, dim, inner) = split_at_axis(&xs, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(
            shape,
            out,
            Op::Narrow {
                x,
                outer,
                dim,
                start,
                len,
                inner,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let needs_grad = self.grad_enabled && self.needs(x);
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape(x),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { .. } => leaves[id] = Some(gy),
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    groups,
                    batch,
                    cin,
                    len,
                    cout,
                    kw,
                    l_out,
                } => {
                    let (stride, groups, batch, cin, len, cout, kw, l_out) =
                        (*stride, *groups, *batch, *cin, *len, *cout, *kw, *l_out);
                    let cin_g = cin / groups;
                    let cout_g = cout / groups;
                    let direct = kw == 1 && stride == 1;
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let mut col = if direct { Vec::new() } else { vec![0.0; cin_g * kw * l_out] };
                    let mut dcol = if direct { Vec::new() } else { vec![0.0; cin_g * kw * l_out] };
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                    let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
                    for bi in 0..batch {
                        for g in 0..groups {
                            let o = (bi * cout + g * cout_g) * l_out;
                            let dy = Mat::row_major(&gy[o..o + cout_g * l_out], cout_g, l_out);
                            let wr = g * cout_g * cin_g * kw..(g + 1) * cout_g * cin_g * kw;
                            let xr = (bi * cin + g * cin_g) * len..(bi * cin + (g + 1) * cin_g) * len;
                            if need_w {
                                let cm = if direct {
                                    Mat::row_major(&xv[xr.clone()], cin_g, len)
                                } else {
                                    im2col(&xv[xr.clone()], cin_g, len, kw, stride, l_out, &mut col);
                                    Mat::row_major(&col, cin_g * kw, l_out)
                                };
                                gemm(dy, cm.t(), &mut dw[wr.clone()], cin_g * kw, 1.0);
                            }
                            if need_x {
                                let wt = Mat::row_major(&wv[wr], cout_g, cin_g * kw).t();
                                if direct {
                                    gemm(wt, dy, &mut dx[xr], len, 1.0);
                                } else {
                                    gemm(wt, dy, &mut dcol, l_out, 0.0);
                                    col2im(&dcol, cin_g, len, kw, stride, l_out, &mut dx[xr]);
                                }
                            }
                        }
                    }
                    if need_x {
                        acc(&mut grads, *x, &|s| add_into(s, &dx));
                    }
                    if need_w {
                        acc(&mut grads, *w, &|s| add_into(s, &dw));
                    }
                    if let Some(b) = b {
                        acc(&mut grads, *b, &|s| {
                            for (row, c) in gy.chunks(l_out).zip((0..cout).cycle()) {
                                s[c] += row.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    fin,
                    fout,
                } => {
                    let (rows, fin, fout) = (*rows, *fin, *fout);
                    let dy = Mat::row_major(&gy, rows, fout);
                    acc(&mut grads, *x, &|s| {
                        gemm(dy, Mat::row_major(&nodes[w.0].value, fout, fin), s, fin, 1.0)
                    });
                    acc(&mut grads, *w, &|s| {
                        gemm(dy.t(), Mat::row_major(&nodes[x.0].value, rows, fin), s, fin, 1.0)
                    });
                    if let Some(b) = b {
                        acc(&mut grads, *b, &|s| {
                            for row in gy.chunks(fout) {
                                add_into(s, row);
                            }
                        });
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                    outer,
                    channels,
                    inner,
                } => {
                    let (outer, channels, inner) = (*outer, *channels, *inner);
                    let n = (outer * inner) as f64;
                    let mut dbeta = vec![0.0; channels];
                    let mut dgamma = vec![0.0; channels];
                    for b in 0..outer {
                        for c in 0..channels {
                            let o = (b * channels + c) * inner;
                            for i in o..o + inner {
                                dbeta[c] += gy[i];
                                dgamma[c] += gy[i] * xhat[i];
                            }
                        }
                    }
                    let gv = &nodes[gamma.0].value;
                    acc(&mut grads, *x, &|s| {
                        for b in 0..outer {
                            for c in 0..channels {
                                let o = (b * channels + c) * inner;
                                let k = gv[c] * inv_std[c];
                                for i in o..o + inner {
                                    s[i] += if *train {
                                        k * (gy[i] - dbeta[c] / n - xhat[i] * dgamma[c] / n)
                                    } else {
                                        k * gy[i]
                                    };
                                }
                            }
                        }
                    });
                    acc(&mut grads, *gamma, &|s| add_into(s, &dgamma));
                    acc(&mut grads, *beta, &|s| add_into(s, &dbeta));
                }
                Op::Elu { x, alpha } => {
                    let xv = &nodes[x.0].value;
                    let yv = &node.value;
                    acc(&mut grads, *x, &|s| {
                        for i in 0..s.len() {
                            s[i] += if xv[i] > 0.0 { gy[i] } else { gy[i] * (yv[i] + alpha) };
                        }
                    });
                }
                Op::Reduce {
                    x,
                    kind,
                    outer,
                    n,
                    inner,
                    argmax,
                } => {
                    let (outer, n, inner) = (*outer, *n, *inner);
                    let xv = &nodes[x.0].value;
                    let nf = n as f64;
                    acc(&mut grads, *x, &|s| match kind {
                        ReduceKind::Max => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let j = argmax[o * inner + i];
                                    s[(o * n + j) * inner + i] += gy[o * inner + i];
                                }
                            }
                        }
                        ReduceKind::Mean => {
                            for o in 0..outer {
                                for j in 0..n {
                                    for i in 0..inner {
                                        s[(o * n + j) * inner + i] += gy[o * inner + i] / nf;
                                    }
                                }
                            }
                        }
                        ReduceKind::Variance => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let mean =
                                        (0..n).map(|j| xv[(o * n + j) * inner + i]).sum::<f64>() / nf;
                                    for j in 0..n {
                                        let k = (o * n + j) * inner + i;
                                        s[k] += gy[o * inner + i] * 2.0 * (xv[k] - mean) / nf;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Concat {
                    inputs,
                    outer,
                    chunks,
                } => {
                    let row: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&v, &c) in inputs.iter().zip(chunks) {
                        acc(&mut grads, v, &|s| {
                            for o in 0..*outer {
                                add_into(
                                    &mut s[o * c..(o + 1) * c],
                                    &gy[o * row + offset..o * row + offset + c],
                                );
                            }
                        });
                        offset += c;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &|s| add_into(s, &gy));
                    acc(&mut grads, *b, &|s| add_into(s, &gy));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &|s| add_into(s, &gy));
                    acc(&mut grads, *b, &|s| s.iter_mut().zip(&gy).for_each(|(v, g)| *v -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, &|s| {
                        for i in 0..s.len() {
                            s[i] += gy[i] * bv[i];
                        }
                    });
                    acc(&mut grads, *b, &|s| {
                        for i in 0..s.len() {
                            s[i] += gy[i] * av[i];
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(&mut grads, *x, &|s| s.iter_mut().zip(&gy).for_each(|(v, g)| *v += g * c));
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    acc(&mut grads, *x, &|s| add_into(s, &gy));
                }
                Op::Sum(x) => {
                    acc(&mut grads, *x, &|s| s.iter_mut().for_each(|v| *v += gy[0]));
                }
                Op::Mean(x) => {
                    let k = gy[0] / nodes[x.0].value.len() as f64;
                    acc(&mut grads, *x, &|s| s.iter_mut().for_each(|v| *v += k));
                }
                Op::Gather {
                    x,
                    idx,
                    batch,
                    channels,
                    len,
                    m,
                } => {
                    let (batch, channels, len, m) = (*batch, *channels, *len, *m);
                    acc(&mut grads, *x, &|s| {
                        for b in 0..batch {
                            let ib = &idx[b * m..(b + 1) * m];
                            for c in 0..channels {
                                let dst = &mut s[(b * channels + c) * len..(b * channels + c + 1) * len];
                                let src = &gy[(b * channels + c) * m..(b * channels + c + 1) * m];
                                for (&i, g) in ib.iter().zip(src) {
                                    dst[i] += g;
                                }
                            }
                        }
                    });
                }
                Op::Narrow {
                    x,
                    outer,
                    dim,
                    start,
                    len,
                    inner,
                } => {
                    acc(&mut grads, *x, &|s| {
                        for o in 0..*outer {
                            add_into(
                                &mut s[(o * dim + start) * inner..(o * dim + start + len) * inner],
                                &gy[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                }
            }
        }
        let names = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name: Some(name) } => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, names })
    }

    /// [`Graph::backward`] followed by accumulation into `params`.
    pub fn backward_into(self, loss: Var, params: &mut LayerParams) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(params);
        Ok(grads)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Leaf gradients left after a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    names: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, if the loss depends on it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sum of gradients over every leaf registered under `name`.
    pub fn param(&self, name: &str) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for (n, i) in &self.names {
            if n == name {
                if let Some(g) = &self.leaves[*i] {
                    match &mut out {
                        Some(acc) => add_into(acc, g),
                        None => out = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    /// Adds every named gradient into the matching trainable parameter.
    pub fn accumulate_into(&self, params: &mut LayerParams) {
        for (name, i) in &self.names {
            if let (Some(g), Some(t)) = (&self.leaves[*i], params.get_mut(name)) {
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            }
        }
    }
}
