//! Define-by-run gradient tape.
//!
//! A [`Graph`] is rebuilt per forward pass. Ops append nodes that only refer
//! to earlier nodes, so the tape is acyclic by construction and a single
//! reverse sweep in creation order is a valid topological order for
//! backpropagation.

use std::sync::Arc;

use rayon::prelude::*;

use super::{ParameterStore, Real};
use crate::error::{Result, VqcdError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// y = x @ w + b, x:[B,I] w:[I,O] b:[O]
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Cross-correlation with zero padding (k odd), x:[B,Ci,T] w:[Co,Ci,K].
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Mish {
        x: Var,
        /// d(mish)/dx per element, cached by the forward pass.
        deriv: Vec<T>,
    },
    Silu {
        x: Var,
        deriv: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, rstd) per (batch, group), filled in forward.
        stats: Vec<(f64, f64)>,
    },
    Add(Var, Var),
    Scale(Var, T),
    /// y = x + c with constant c (no gradient into c; backward is identity).
    AddConst(Var),
    /// Same data under a new shape; backward is identity.
    View(Var),
    /// y = x * c elementwise with constant c; backward multiplies by c.
    MulConst {
        x: Var,
        c: Arc<Vec<T>>,
    },
    /// x:[B,C,T] + e:[B,C] broadcast over T.
    AddChannel {
        x: Var,
        e: Var,
    },
    /// Concatenate along the channel axis of [B,C,T].
    ConcatChannel {
        a: Var,
        b: Var,
    },
    /// Nearest-neighbor 2x upsample along T.
    Upsample2(Var),
    /// out[m] = table[indices[m]], table:[N,D].
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    /// mean((a-b)^2) over all elements.
    SqDiffMean {
        a: Var,
        b: Var,
    },
    /// sum((a-b)^2) over all elements.
    SqDiffSum {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient tape. `clear` recycles buffers between passes.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    leases: Vec<(String, Var)>,
    pool: Vec<Vec<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            leases: Vec::new(),
            pool: Vec::new(),
        }
    }

    /// Drop all nodes, keeping a bounded set of allocations for reuse.
    pub fn clear(&mut self) {
        for node in self.nodes.drain(..) {
            if self.pool.len() < POOL_CAP {
                self.pool.push(node.value);
            }
        }
        for g in self.grads.drain(..).flatten() {
            if self.pool.len() < POOL_CAP {
                self.pool.push(g);
            }
        }
        self.leases.clear();
    }

    /// Grab a zeroed buffer, preferring a recycled allocation that already
    /// fits so steady-state passes do not touch the allocator.
    fn buf(&mut self, len: usize) -> Vec<T> {
        let n = self.pool.len();
        for back in 1..=n.min(16) {
            if self.pool[n - back].capacity() >= len {
                let mut v = self.pool.swap_remove(n - back);
                v.clear();
                v.resize(len, T::zero());
                return v;
            }
        }
        vec![T::zero(); len]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (free variable).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Copy a store tensor onto the tape and remember the association so
    /// `collect_grads` can write gradients back.
    pub fn lease(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| VqcdError::invariant(format!("unknown parameter `{name}`")))?;
        let mut data = self.buf(t.numel());
        for (d, &src) in data.iter_mut().zip(t.data()) {
            *d = T::from_f32(src);
        }
        let v = self.push(t.shape().to_vec(), data, Op::Leaf, true);
        self.leases.push((name.to_string(), v));
        Ok(v)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(VqcdError::ShapeMismatch {
                op: "dense",
                expected: xs,
                got: ws,
            });
        }
        let (batch, inner, out) = (xs[0], xs[1], ws[1]);
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [out] {
                return Err(VqcdError::ShapeMismatch {
                    op: "dense_bias",
                    expected: vec![out],
                    got: bs.to_vec(),
                });
            }
        }
        let mut y = self.buf(batch * out);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bias = b.map(|bv| self.nodes[bv.0].value.as_slice());
            let row = |bi: usize, yr: &mut [T]| {
                match bias {
                    Some(bs) => yr.copy_from_slice(bs),
                    None => yr.iter_mut().for_each(|v| *v = T::zero()),
                }
                for i in 0..inner {
                    let xe = xv[bi * inner + i];
                    if xe == T::zero() {
                        continue;
                    }
                    let wr = &wv[i * out..(i + 1) * out];
                    for (ye, &we) in yr.iter_mut().zip(wr) {
                        *ye = *ye + xe * we;
                    }
                }
            };
            if batch * inner * out >= PAR_WORK_THRESHOLD {
                y.par_chunks_mut(out)
                    .enumerate()
                    .for_each(|(bi, yr)| row(bi, yr));
            } else {
                for (bi, yr) in y.chunks_mut(out).enumerate() {
                    row(bi, yr);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(vec![batch, out], y, Op::Dense { x, w, b }, needs))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(VqcdError::ShapeMismatch {
                op: "conv1d",
                expected: xs,
                got: ws,
            });
        }
        let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(VqcdError::config(format!(
                "conv1d kernel size must be odd, got {k}"
            )));
        }
        if stride == 0 || stride > 2 {
            return Err(VqcdError::config(format!(
                "conv1d stride must be 1 or 2, got {stride}"
            )));
        }
        let pad = k / 2;
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [c_out] {
                return Err(VqcdError::ShapeMismatch {
                    op: "conv1d_bias",
                    expected: vec![c_out],
                    got: bs.to_vec(),
                });
            }
        }
        let mut y = self.buf(batch * c_out * t_out);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let t_pad = t_in + 2 * pad;
            let bias = b.map(|bv| self.nodes[bv.0].value.as_slice());
            // Weights transposed to [j][i][o] so the hot loop runs wide and
            // contiguous over output channels.
            let mut wt = vec![T::zero(); k * c_in * c_out];
            for o in 0..c_out {
                for i in 0..c_in {
                    for j in 0..k {
                        wt[(j * c_in + i) * c_out + o] = wv[(o * c_in + i) * k + j];
                    }
                }
            }
            let sample = |bi: usize, ys: &mut [T]| {
                // Time-major padded input for this sample.
                let mut xt = vec![T::zero(); t_pad * c_in];
                for i in 0..c_in {
                    let xr = &xv[(bi * c_in + i) * t_in..(bi * c_in + i + 1) * t_in];
                    for (u, &xe) in xr.iter().enumerate() {
                        xt[(u + pad) * c_in + i] = xe;
                    }
                }
                let mut acc = vec![T::zero(); c_out];
                for t in 0..t_out {
                    match bias {
                        Some(bs) => acc.copy_from_slice(bs),
                        None => acc.iter_mut().for_each(|v| *v = T::zero()),
                    }
                    for j in 0..k {
                        let u = t * stride + j;
                        let xrow = &xt[u * c_in..(u + 1) * c_in];
                        for (i, &xe) in xrow.iter().enumerate() {
                            if xe == T::zero() {
                                continue;
                            }
                            let wrow = &wt[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                            for (ae, &we) in acc.iter_mut().zip(wrow) {
                                *ae = *ae + xe * we;
                            }
                        }
                    }
                    for (o, &ae) in acc.iter().enumerate() {
                        ys[o * t_out + t] = ae;
                    }
                }
            };
            if batch * c_out * c_in * k * t_out >= PAR_WORK_THRESHOLD {
                y.par_chunks_mut(c_out * t_out)
                    .enumerate()
                    .for_each(|(bi, ys)| sample(bi, ys));
            } else {
                for (bi, ys) in y.chunks_mut(c_out * t_out).enumerate() {
                    sample(bi, ys);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(
            vec![batch, c_out, t_out],
            y,
            Op::Conv1d { x, w, b, stride },
            needs,
        ))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut v = self.buf(n);
        let needs = self.needs(x);
        let mut deriv = if needs { self.buf(n) } else { Vec::new() };
        {
            let xv = &self.nodes[x.0].value;
            let cell = |xe: T| {
                let sp = softplus_t(xe);
                let th = sp.tanh();
                let sig = sigmoid_t(xe);
                let y = xe * th;
                let d = th + xe * (T::one() - th * th) * sig;
                (y, d)
            };
            if needs {
                let run = |(ve, de, &xe): (&mut T, &mut T, &T)| {
                    let (y, d) = cell(xe);
                    *ve = y;
                    *de = d;
                };
                if n >= PAR_WORK_THRESHOLD / 8 {
                    v.par_iter_mut()
                        .zip(deriv.par_iter_mut())
                        .zip(xv.par_iter())
                        .for_each(|((ve, de), xe)| run((ve, de, xe)));
                } else {
                    for ((ve, de), xe) in v.iter_mut().zip(deriv.iter_mut()).zip(xv.iter()) {
                        run((ve, de, xe));
                    }
                }
            } else {
                for (ve, &xe) in v.iter_mut().zip(xv.iter()) {
                    *ve = cell(xe).0;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, v, Op::Mish { x, deriv }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut v = self.buf(n);
        let needs = self.needs(x);
        let mut deriv = if needs { self.buf(n) } else { Vec::new() };
        {
            let xv = &self.nodes[x.0].value;
            for (i, &xe) in xv.iter().enumerate() {
                let sig = sigmoid_t(xe);
                v[i] = xe * sig;
                if needs {
                    deriv[i] = sig * (T::one() + xe * (T::one() - sig));
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, v, Op::Silu { x, deriv }, needs)
    }

    /// Per-group normalization over [B,C,T] with learnable per-channel
    /// scale/shift. Channel count must divide evenly into `groups`.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(VqcdError::ShapeMismatch {
                op: "group_norm",
                expected: vec![0, 0, 0],
                got: xs,
            });
        }
        let (batch, c, t) = (xs[0], xs[1], xs[2]);
        if groups == 0 || c % groups != 0 {
            return Err(VqcdError::config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(VqcdError::ShapeMismatch {
                op: "group_norm_affine",
                expected: vec![c],
                got: self.shape(gamma).to_vec(),
            });
        }
        let cg = c / groups;
        let mut stats = Vec::with_capacity(batch * groups);
        let mut y = self.buf(batch * c * t);
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for bi in 0..batch {
                for g in 0..groups {
                    let base = (bi * c + g * cg) * t;
                    let n = cg * t;
                    let slice = &xv[base..base + n];
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for &e in slice {
                        let f = e.to_f64();
                        s += f;
                        s2 += f * f;
                    }
                    let mean = s / n as f64;
                    let var = (s2 / n as f64 - mean * mean).max(0.0);
                    let rstd = 1.0 / (var + eps).sqrt();
                    stats.push((mean, rstd));
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let (ga, be) = (gv[ch].to_f64(), bv[ch].to_f64());
                        for ti in 0..t {
                            let idx = base + ci * t + ti;
                            let xhat = (xv[idx].to_f64() - mean) * rstd;
                            y[idx] = T::from_f64(ga * xhat + be);
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xs,
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(VqcdError::ShapeMismatch {
                op: "add",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let v: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, v, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v: Vec<T> = self.value(x).iter().map(|&e| e * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, v, Op::Scale(x, c), needs)
    }

    /// Reinterpret a node under a new shape with the same element count.
    pub fn view(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.value(x).len(),
            "view must preserve the element count"
        );
        let mut v = self.buf(n);
        v.copy_from_slice(self.value(x));
        let needs = self.needs(x);
        self.push(shape.to_vec(), v, Op::View(x), needs)
    }

    pub fn add_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "add_const",
                expected: vec![self.value(x).len()],
                got: vec![c.len()],
            });
        }
        let v: Vec<T> = self.value(x).iter().zip(&c).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, v, Op::AddConst(x), needs))
    }

    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<T>>) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "mul_const",
                expected: vec![self.value(x).len()],
                got: vec![c.len()],
            });
        }
        let v: Vec<T> = self
            .value(x)
            .iter()
            .zip(c.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, v, Op::MulConst { x, c }, needs))
    }

    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() != 3 || es.len() != 2 || xs[0] != es[0] || xs[1] != es[1] {
            return Err(VqcdError::ShapeMismatch {
                op: "add_channel",
                expected: xs,
                got: es,
            });
        }
        let (batch, c, t) = (xs[0], xs[1], xs[2]);
        let mut y = self.buf(batch * c * t);
        {
            let xv = self.value(x);
            let ev = self.value(e);
            for bi in 0..batch {
                for ci in 0..c {
                    let add = ev[bi * c + ci];
                    let base = (bi * c + ci) * t;
                    for ti in 0..t {
                        y[base + ti] = xv[base + ti] + add;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(e);
        Ok(self.push(xs, y, Op::AddChannel { x, e }, needs))
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(VqcdError::ShapeMismatch {
                op: "concat_channel",
                expected: sa,
                got: sb,
            });
        }
        let (batch, ca, cb, t) = (sa[0], sa[1], sb[1], sa[2]);
        let mut y = self.buf(batch * (ca + cb) * t);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                let dst = bi * (ca + cb) * t;
                y[dst..dst + ca * t].copy_from_slice(&av[bi * ca * t..(bi + 1) * ca * t]);
                y[dst + ca * t..dst + (ca + cb) * t]
                    .copy_from_slice(&bv[bi * cb * t..(bi + 1) * cb * t]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![batch, ca + cb, t],
            y,
            Op::ConcatChannel { a, b },
            needs,
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(VqcdError::ShapeMismatch {
                op: "upsample2",
                expected: vec![0, 0, 0],
                got: xs,
            });
        }
        let (batch, c, t) = (xs[0], xs[1], xs[2]);
        let mut y = self.buf(batch * c * t * 2);
        {
            let xv = self.value(x);
            for row in 0..batch * c {
                for ti in 0..t {
                    let v = xv[row * t + ti];
                    y[row * 2 * t + 2 * ti] = v;
                    y[row * 2 * t + 2 * ti + 1] = v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![batch, c, 2 * t], y, Op::Upsample2(x), needs))
    }

    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(VqcdError::ShapeMismatch {
                op: "gather_rows",
                expected: vec![0, 0],
                got: ts,
            });
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(VqcdError::invariant(format!(
                "gather_rows index {bad} out of range {n}"
            )));
        }
        let mut y = self.buf(indices.len() * d);
        {
            let tv = self.value(table);
            for (m, &i) in indices.iter().enumerate() {
                y[m * d..(m + 1) * d].copy_from_slice(&tv[i * d..(i + 1) * d]);
            }
        }
        let needs = self.needs(table);
        let rows = indices.len();
        Ok(self.push(vec![rows, d], y, Op::GatherRows { table, indices }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|e| e.to_f64()).sum();
        let needs = self.needs(x);
        self.push(vec![], vec![T::from_f64(s)], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: f64 = self.value(x).iter().map(|e| e.to_f64()).sum();
        let needs = self.needs(x);
        self.push(
            vec![],
            vec![T::from_f64(s / n as f64)],
            Op::Mean(x),
            needs,
        )
    }

    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sq_diff(a, b, true)
    }

    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sq_diff(a, b, false)
    }

    fn sq_diff(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(VqcdError::ShapeMismatch {
                op: "sq_diff",
                expected: vec![self.value(a).len()],
                got: vec![self.value(b).len()],
            });
        }
        let mut s = 0.0f64;
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            let d = x.to_f64() - y.to_f64();
            s += d * d;
        }
        if mean {
            s /= self.value(a).len().max(1) as f64;
        }
        let needs = self.needs(a) || self.needs(b);
        let op = if mean {
            Op::SqDiffMean { a, b }
        } else {
            Op::SqDiffSum { a, b }
        };
        Ok(self.push(vec![], vec![T::from_f64(s)], op, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of leased parameters
    /// are collected with [`Graph::collect_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(VqcdError::invariant(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for g in self.grads.drain(..).flatten() {
            self.pool.push(g);
        }
        self.grads = std::iter::repeat_with(|| None)
            .take(self.nodes.len())
            .collect();
        let mut seed = self.buf(1);
        seed[0] = T::one();
        self.grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.grads[idx].is_none() {
                continue;
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    fn take_or_alloc(&mut self, v: Var) -> Vec<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => self.buf(self.nodes[v.0].value.len()),
        }
    }

    fn step_backward(&mut self, idx: usize) {
        // The op payload is consumed: backward runs once per forward tape.
        let gy = self.grads[idx].take().expect("gradient present");
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xs = self.shape(x);
                let (batch, inner) = (xs[0], xs[1]);
                let out = self.shape(w)[1];
                if self.needs(x) {
                    let mut gx = self.take_or_alloc(x);
                    let wv = &self.nodes[w.0].value;
                    let row = |bi: usize, gxr: &mut [T]| {
                        let gyr = &gy[bi * out..(bi + 1) * out];
                        for (i, ge) in gxr.iter_mut().enumerate() {
                            let wr = &wv[i * out..(i + 1) * out];
                            let mut s = T::zero();
                            for (&g, &we) in gyr.iter().zip(wr) {
                                s = s + g * we;
                            }
                            *ge = *ge + s;
                        }
                    };
                    if batch * inner * out >= PAR_WORK_THRESHOLD {
                        gx.par_chunks_mut(inner)
                            .enumerate()
                            .for_each(|(bi, gxr)| row(bi, gxr));
                    } else {
                        for (bi, gxr) in gx.chunks_mut(inner).enumerate() {
                            row(bi, gxr);
                        }
                    }
                    self.grads[x.0] = Some(gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_or_alloc(w);
                    let xv = &self.nodes[x.0].value;
                    let row = |i: usize, gwr: &mut [T]| {
                        for bi in 0..batch {
                            let xe = xv[bi * inner + i];
                            if xe == T::zero() {
                                continue;
                            }
                            let gyr = &gy[bi * out..(bi + 1) * out];
                            for (ge, &g) in gwr.iter_mut().zip(gyr) {
                                *ge = *ge + xe * g;
                            }
                        }
                    };
                    if batch * inner * out >= PAR_WORK_THRESHOLD {
                        gw.par_chunks_mut(out)
                            .enumerate()
                            .for_each(|(i, gwr)| row(i, gwr));
                    } else {
                        for (i, gwr) in gw.chunks_mut(out).enumerate() {
                            row(i, gwr);
                        }
                    }
                    self.grads[w.0] = Some(gw);
                }
                if let Some(bv) = b {
                    if self.needs(bv) {
                        let mut gb = self.take_or_alloc(bv);
                        for bi in 0..batch {
                            let gyr = &gy[bi * out..(bi + 1) * out];
                            for (ge, &g) in gb.iter_mut().zip(gyr) {
                                *ge = *ge + g;
                            }
                        }
                        self.grads[bv.0] = Some(gb);
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = self.shape(Var(idx))[2];
                let pad = k / 2;
                let t_pad = t_in + 2 * pad;
                if self.needs(x) {
                    let mut gx = self.take_or_alloc(x);
                    let wv = &self.nodes[w.0].value;
                    // Weights transposed to [j][o][i]; the hot loop runs
                    // wide over input channels.
                    let mut wt = vec![T::zero(); k * c_out * c_in];
                    for o in 0..c_out {
                        for i in 0..c_in {
                            for j in 0..k {
                                wt[(j * c_out + o) * c_in + i] = wv[(o * c_in + i) * k + j];
                            }
                        }
                    }
                    let sample = |bi: usize, gxs: &mut [T]| {
                        let mut gpad = vec![T::zero(); t_pad * c_in];
                        for t in 0..t_out {
                            for j in 0..k {
                                let u = t * stride + j;
                                let dst = &mut gpad[u * c_in..(u + 1) * c_in];
                                for o in 0..c_out {
                                    let g = gy[(bi * c_out + o) * t_out + t];
                                    if g == T::zero() {
                                        continue;
                                    }
                                    let wrow =
                                        &wt[(j * c_out + o) * c_in..(j * c_out + o + 1) * c_in];
                                    for (de, &we) in dst.iter_mut().zip(wrow) {
                                        *de = *de + g * we;
                                    }
                                }
                            }
                        }
                        // Fold the interior back; margins are zero padding.
                        for i in 0..c_in {
                            let gxr = &mut gxs[i * t_in..(i + 1) * t_in];
                            for (t, ge) in gxr.iter_mut().enumerate() {
                                *ge = *ge + gpad[(t + pad) * c_in + i];
                            }
                        }
                    };
                    if batch * c_out * c_in * k * t_out >= PAR_WORK_THRESHOLD {
                        gx.par_chunks_mut(c_in * t_in)
                            .enumerate()
                            .for_each(|(bi, gxs)| sample(bi, gxs));
                    } else {
                        for (bi, gxs) in gx.chunks_mut(c_in * t_in).enumerate() {
                            sample(bi, gxs);
                        }
                    }
                    self.grads[x.0] = Some(gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_or_alloc(w);
                    let xv = &self.nodes[x.0].value;
                    // Accumulate in [j][i][o] layout, transpose back once.
                    let mut gwt = vec![T::zero(); k * c_in * c_out];
                    let mut xt = vec![T::zero(); t_pad * c_in];
                    let mut gyt = vec![T::zero(); t_out * c_out];
                    for bi in 0..batch {
                        xt.iter_mut().for_each(|v| *v = T::zero());
                        for i in 0..c_in {
                            let xr = &xv[(bi * c_in + i) * t_in..(bi * c_in + i + 1) * t_in];
                            for (u, &xe) in xr.iter().enumerate() {
                                xt[(u + pad) * c_in + i] = xe;
                            }
                        }
                        for o in 0..c_out {
                            let gyr =
                                &gy[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
                            for (t, &g) in gyr.iter().enumerate() {
                                gyt[t * c_out + o] = g;
                            }
                        }
                        for t in 0..t_out {
                            let grow = &gyt[t * c_out..(t + 1) * c_out];
                            for j in 0..k {
                                let u = t * stride + j;
                                let xrow = &xt[u * c_in..(u + 1) * c_in];
                                for (i, &xe) in xrow.iter().enumerate() {
                                    if xe == T::zero() {
                                        continue;
                                    }
                                    let dst = &mut gwt
                                        [(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                                    for (de, &g) in dst.iter_mut().zip(grow) {
                                        *de = *de + xe * g;
                                    }
                                }
                            }
                        }
                    }
                    for o in 0..c_out {
                        for i in 0..c_in {
                            for j in 0..k {
                                let idx = (o * c_in + i) * k + j;
                                gw[idx] = gw[idx] + gwt[(j * c_in + i) * c_out + o];
                            }
                        }
                    }
                    self.grads[w.0] = Some(gw);
                }
                if let Some(bv) = b {
                    if self.needs(bv) {
                        let mut gb = self.take_or_alloc(bv);
                        for bi in 0..batch {
                            for o in 0..c_out {
                                let gyr =
                                    &gy[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
                                let mut s = T::zero();
                                for &g in gyr {
                                    s = s + g;
                                }
                                gb[o] = gb[o] + s;
                            }
                        }
                        self.grads[bv.0] = Some(gb);
                    }
                }
            }
            Op::Mish { x, deriv } | Op::Silu { x, deriv } => {
                if self.needs(x) {
                    let mut gx = self.take_or_alloc(x);
                    for ((ge, &de), &g) in gx.iter_mut().zip(&deriv).zip(&gy) {
                        *ge = *ge + g * de;
                    }
                    self.grads[x.0] = Some(gx);
                }
                self.pool.push(deriv);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(x).to_vec();
                let (batch, c, t) = (xs[0], xs[1], xs[2]);
                let cg = c / groups;
                let n = cg * t;
                let xv_needed = self.needs(x);
                let gamma_needed = self.needs(gamma);
                let beta_needed = self.needs(beta);

                let mut gx = if xv_needed {
                    Some(self.take_or_alloc(x))
                } else {
                    None
                };
                let mut gg = if gamma_needed {
                    Some(self.take_or_alloc(gamma))
                } else {
                    None
                };
                let mut gb = if beta_needed {
                    Some(self.take_or_alloc(beta))
                } else {
                    None
                };
                {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    for bi in 0..batch {
                        for g in 0..groups {
                            let (mean, rstd) = stats[bi * groups + g];
                            let base = (bi * c + g * cg) * t;
                            // First pass: per-group reductions in f64.
                            let mut sum_gh = 0.0f64;
                            let mut sum_gh_xhat = 0.0f64;
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                let ga = gv[ch].to_f64();
                                for ti in 0..t {
                                    let i = base + ci * t + ti;
                                    let xhat = (xv[i].to_f64() - mean) * rstd;
                                    let gyf = gy[i].to_f64();
                                    let gh = gyf * ga;
                                    sum_gh += gh;
                                    sum_gh_xhat += gh * xhat;
                                    if let Some(ggv) = gg.as_deref_mut() {
                                        ggv[ch] = ggv[ch] + T::from_f64(gyf * xhat);
                                    }
                                    if let Some(gbv) = gb.as_deref_mut() {
                                        gbv[ch] = gbv[ch] + T::from_f64(gyf);
                                    }
                                }
                            }
                            if let Some(gxv) = gx.as_deref_mut() {
                                let mgh = sum_gh / n as f64;
                                let mghx = sum_gh_xhat / n as f64;
                                for ci in 0..cg {
                                    let ch = g * cg + ci;
                                    let ga = gv[ch].to_f64();
                                    for ti in 0..t {
                                        let i = base + ci * t + ti;
                                        let xhat = (xv[i].to_f64() - mean) * rstd;
                                        let gh = gy[i].to_f64() * ga;
                                        let d = rstd * (gh - mgh - xhat * mghx);
                                        gxv[i] = gxv[i] + T::from_f64(d);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(g) = gx {
                    self.grads[x.0] = Some(g);
                }
                if let Some(g) = gg {
                    self.grads[gamma.0] = Some(g);
                }
                if let Some(g) = gb {
                    self.grads[beta.0] = Some(g);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        let mut g = self.take_or_alloc(v);
                        for (ge, &gyv) in g.iter_mut().zip(&gy) {
                            *ge = *ge + gyv;
                        }
                        self.grads[v.0] = Some(g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    for (ge, &gyv) in g.iter_mut().zip(&gy) {
                        *ge = *ge + gyv * c;
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            Op::AddConst(x) | Op::View(x) => {
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    for (ge, &gyv) in g.iter_mut().zip(&gy) {
                        *ge = *ge + gyv;
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            Op::MulConst { x, c } => {
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    for ((ge, &gyv), &ce) in g.iter_mut().zip(&gy).zip(c.iter()) {
                        *ge = *ge + gyv * ce;
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            Op::AddChannel { x, e } => {
                let xs = self.shape(x).to_vec();
                let (batch, c, t) = (xs[0], xs[1], xs[2]);
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    for (ge, &gyv) in g.iter_mut().zip(&gy) {
                        *ge = *ge + gyv;
                    }
                    self.grads[x.0] = Some(g);
                }
                if self.needs(e) {
                    let mut g = self.take_or_alloc(e);
                    for bi in 0..batch {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            let mut s = T::zero();
                            for ti in 0..t {
                                s = s + gy[base + ti];
                            }
                            g[bi * c + ci] = g[bi * c + ci] + s;
                        }
                    }
                    self.grads[e.0] = Some(g);
                }
            }
            Op::ConcatChannel { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (batch, ca, cb, t) = (sa[0], sa[1], sb[1], sa[2]);
                if self.needs(a) {
                    let mut g = self.take_or_alloc(a);
                    for bi in 0..batch {
                        let src = bi * (ca + cb) * t;
                        let dst = bi * ca * t;
                        for i in 0..ca * t {
                            g[dst + i] = g[dst + i] + gy[src + i];
                        }
                    }
                    self.grads[a.0] = Some(g);
                }
                if self.needs(b) {
                    let mut g = self.take_or_alloc(b);
                    for bi in 0..batch {
                        let src = bi * (ca + cb) * t + ca * t;
                        let dst = bi * cb * t;
                        for i in 0..cb * t {
                            g[dst + i] = g[dst + i] + gy[src + i];
                        }
                    }
                    self.grads[b.0] = Some(g);
                }
            }
            Op::Upsample2(x) => {
                let xs = self.shape(x).to_vec();
                let (rows, t) = (xs[0] * xs[1], xs[2]);
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    for row in 0..rows {
                        for ti in 0..t {
                            let s = gy[row * 2 * t + 2 * ti] + gy[row * 2 * t + 2 * ti + 1];
                            g[row * t + ti] = g[row * t + ti] + s;
                        }
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            Op::GatherRows { table, indices } => {
                let d = self.shape(table)[1];
                if self.needs(table) {
                    let mut g = self.take_or_alloc(table);
                    for (m, &i) in indices.iter().enumerate() {
                        for di in 0..d {
                            g[i * d + di] = g[i * d + di] + gy[m * d + di];
                        }
                    }
                    self.grads[table.0] = Some(g);
                }
            }
            Op::Sum(x) => {
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    let gv = gy[0];
                    for ge in g.iter_mut() {
                        *ge = *ge + gv;
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            Op::Mean(x) => {
                if self.needs(x) {
                    let mut g = self.take_or_alloc(x);
                    let n = self.nodes[x.0].value.len().max(1);
                    let gv = gy[0] * T::from_f64(1.0 / n as f64);
                    for ge in g.iter_mut() {
                        *ge = *ge + gv;
                    }
                    self.grads[x.0] = Some(g);
                }
            }
            ref op @ (Op::SqDiffMean { a, b } | Op::SqDiffSum { a, b }) => {
                let n = self.nodes[a.0].value.len().max(1);
                let scale = match op {
                    Op::SqDiffMean { .. } => 2.0 / n as f64,
                    _ => 2.0,
                };
                let gv = gy[0].to_f64() * scale;
                if self.needs(a) {
                    let mut g = self.take_or_alloc(a);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    for ((ge, &ae), &be) in g.iter_mut().zip(av).zip(bv) {
                        *ge = *ge + T::from_f64(gv * (ae.to_f64() - be.to_f64()));
                    }
                    self.grads[a.0] = Some(g);
                }
                if self.needs(b) {
                    let mut g = self.take_or_alloc(b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    for ((ge, &ae), &be) in g.iter_mut().zip(av).zip(bv) {
                        *ge = *ge - T::from_f64(gv * (ae.to_f64() - be.to_f64()));
                    }
                    self.grads[b.0] = Some(g);
                }
            }
        }
        self.grads[idx] = Some(gy);
    }

    /// Write gradients of leased parameters back into the store. Trainable
    /// tensors that were not leased (or not reached by backward) receive an
    /// exact zero gradient.
    pub fn collect_grads(&self, store: &mut ParameterStore) {
        store.zero_grads();
        for (name, var) in &self.leases {
            if let Some(g) = self.grad(*var) {
                if let Some(t) = store.get_mut(name) {
                    let dst = t.grad_mut();
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s.to_f64() as f32;
                    }
                }
            }
        }
    }
}

/// Minimum op volume before kernels split across rayon workers.
const PAR_WORK_THRESHOLD: usize = 1 << 23;

/// Recycled buffers kept across `clear`; extras are dropped.
const POOL_CAP: usize = 512;

fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_t<T: Real>(x: T) -> T {
    if x > T::from_f64(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
