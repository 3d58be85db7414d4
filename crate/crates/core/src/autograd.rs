//! A reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its adjoint. Nodes that cannot reach a trainable leaf are
//! marked as not needing gradients, so inference graphs skip the bookkeeping
//! (notably the im2col buffers kept for convolution weight gradients).
//!
//! Shape errors inside the tape are programming errors and panic; the public
//! pipeline functions validate shapes before they build graphs.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, resize_bilinear_raw, sigmoid, AxisInterp, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Resize {
        x: Var,
        ys: AxisInterp,
        xs: AxisInterp,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MulBroadcast {
        x: Var,
        w: Var,
    },
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Focal {
        p: Var,
        target: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    DiceRows {
        p: Var,
        target: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Clamp applied to probabilities inside the focal loss.
pub const FOCAL_EPS: f64 = 1e-12;
/// Smoothing term added to numerator and denominator of the dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Added to the variance in group normalization.
pub const NORM_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    params_trainable: bool,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape without parameters, used for standalone computations.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            params_trainable: false,
        }
    }
}

impl<'p> Tape<'p> {
    /// A tape whose parameter leaves receive gradients.
    pub fn training(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: HashMap::new(),
            params_trainable: true,
        }
    }

    /// A tape that reads parameters but never differentiates them.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape {
            params_trainable: false,
            ..Self::training(store)
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, e.g. for finite-difference checks
    /// with respect to inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let value = store.get(id).clone();
        let v = self.push(value, Op::Param, self.params_trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- operations -----------------------------------------------------

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c_in, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, kh, kw], got {ws:?}");
        assert_eq!(ws[1], c_in, "conv expects {} input channels, got {c_in}", ws[1]);
        assert!(stride >= 1);
        assert!(h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[3], "conv kernel larger than padded input");
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h + 2 * pad - ws[2]) / stride + 1,
            wo: (wd + 2 * pad - ws[3]) / stride + 1,
        };
        if let Some(b) = b {
            assert_eq!(self.value(b).len(), geom.c_out, "conv bias length");
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols: Cow<[f64]> = if geom.is_pointwise() {
            Cow::Borrowed(self.data(x))
        } else {
            Cow::Owned(im2col(self.data(x), &geom))
        };
        let (k, p) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; geom.c_out * p];
        gemm(geom.c_out, k, p, self.data(w), false, &cols, false, &mut out, 0.0);
        if let Some(b) = b {
            for (row, &bias) in out.chunks_mut(p).zip(self.data(b)) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let kept = if self.needs(w) && !geom.is_pointwise() {
            Some(cols.into_owned())
        } else {
            None
        };
        let value = Tensor::from_vec(&[geom.c_out, geom.ho, geom.wo], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: kept,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(value, Op::Silu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a).add(self.value(b)).expect("checked shapes");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    /// Bilinear resize of a `[C, H, W]` tensor.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ys = AxisInterp::new(h, ho);
        let xs = AxisInterp::new(w, wo);
        let out = resize_bilinear_raw(self.data(x), c, (h, w), (ho, wo), &ys, &xs);
        let value = Tensor::from_vec(&[c, ho, wo], out);
        let needs = self.needs(x);
        self.push(value, Op::Resize { x, ys, xs }, needs)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        assert!(axis < first.len());
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat dimension {d} mismatch: {s:?} vs {first:?}");
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * tail;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::from_vec(&out_shape, out);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(value, Op::Transpose(x), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), needs)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(s[1]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&s, out), Op::SoftmaxRows(x), needs)
    }

    /// Maximum of each row of a 2-D tensor; ties resolve to the first column.
    pub fn row_max(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let mut vals = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for row in self.data(x).chunks(s[1]) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[s[0]], vals), Op::RowMax { x, argmax }, needs)
    }

    /// `x * w` where `w` broadcasts over the leading dimensions of `x`, i.e.
    /// `w.len()` divides `x.len()` and matches its trailing block.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Var {
        let inner = self.value(w).len();
        assert!(inner > 0 && self.value(x).len().is_multiple_of(inner), "mul_broadcast size");
        let wd = self.data(w).to_vec();
        let data = self
            .data(x)
            .chunks(inner)
            .flat_map(|row| row.iter().zip(&wd).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        let value = Tensor::from_vec(self.shape(x), data);
        let needs = self.needs(x) || self.needs(w);
        self.push(value, Op::MulBroadcast { x, w }, needs)
    }

    /// Gathers columns of a 2-D tensor.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(idx.iter().all(|&i| i < s[1]), "column index out of range");
        let mut out = Vec::with_capacity(s[0] * idx.len());
        for row in self.data(x).chunks(s[1]) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[s[0], idx.len()], out),
            Op::SelectCols {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(idx.iter().all(|&i| i < s[0]), "row index out of range");
        let mut out = Vec::with_capacity(s[1] * idx.len());
        for &i in idx {
            out.extend_from_slice(&self.data(x)[i * s[1]..(i + 1) * s[1]]);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[idx.len(), s[1]], out),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Summed focal loss of probabilities `p` against targets in `[0, 1]`.
    pub fn focal_loss_sum(&mut self, p: Var, target: &[f64], alpha: f64, gamma: f64) -> Var {
        assert_eq!(self.value(p).len(), target.len(), "focal target length");
        let total = self
            .data(p)
            .iter()
            .zip(target)
            .map(|(&pv, &t)| focal_term(pv, t, alpha, gamma))
            .sum();
        let needs = self.needs(p);
        self.push(
            Tensor::scalar(total),
            Op::Focal {
                p,
                target: target.to_vec(),
                alpha,
                gamma,
            },
            needs,
        )
    }

    /// Per-row dice loss of a `[n, P]` probability matrix against targets.
    pub fn dice_rows(&mut self, p: Var, target: &[f64]) -> Var {
        let s = self.shape(p).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(target.len(), s[0] * s[1], "dice target length");
        let losses = self
            .data(p)
            .chunks(s[1])
            .zip(target.chunks(s[1]))
            .map(|(pr, tr)| {
                let (num, den) = dice_parts(pr, tr);
                1.0 - num / den
            })
            .collect();
        let needs = self.needs(p);
        self.push(
            Tensor::from_vec(&[s[0]], losses),
            Op::DiceRows {
                p,
                target: target.to_vec(),
            },
            needs,
        )
    }

    /// Max pooling over `[C, H, W]` with a square window.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ch * ho + oy) * wo + ox;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ch * h + iy as usize) * w + ix as usize;
                            if xd[i] > out[o] {
                                out[o] = xd[i];
                                argmax[o] = i;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::MaxPool { x, argmax }, needs)
    }

    /// Per-channel `x * scale + shift` on `[C, H, W]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(scale).len(), c);
        assert_eq!(self.value(shift).len(), c);
        let (sc, sh) = (self.data(scale).to_vec(), self.data(shift).to_vec());
        let data = self
            .data(x)
            .chunks(h * w)
            .enumerate()
            .flat_map(|(ch, plane)| plane.iter().map(|v| v * sc[ch] + sh[ch]).collect::<Vec<_>>())
            .collect();
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            Tensor::from_vec(&[c, h, w], data),
            Op::ChannelAffine { x, scale, shift },
            needs,
        )
    }

    /// Normalizes each of `groups` consecutive channel blocks of `[C, H, W]`
    /// to zero mean and unit variance.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, _, _) = self.value(x).chw();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels in {groups} groups");
        let block = self.value(x).len() / groups;
        let mut normalized = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::with_capacity(groups);
        for chunk in self.data(x).chunks(block) {
            let mean = chunk.iter().sum::<f64>() / block as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            normalized.extend(chunk.iter().map(|v| (v - mean) * r));
            inv_std.push(r);
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(&shape, normalized.clone());
        self.push(
            value,
            Op::GroupNorm {
                x,
                groups,
                normalized,
                inv_std,
            },
            needs,
        )
    }

    // ----- reverse pass ---------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            param_vars: self.param_vars.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (k, p) = (geom.patch(), geom.positions());
                if self.needs(*w) {
                    let cols: Cow<[f64]> = match cols {
                        Some(c) => Cow::Borrowed(c),
                        None if geom.is_pointwise() => Cow::Borrowed(self.data(*x)),
                        None => Cow::Owned(im2col(self.data(*x), geom)),
                    };
                    acc(*w, &mut |dw| gemm(geom.c_out, p, k, g, false, &cols, true, dw, 1.0));
                }
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (o, row) in g.chunks(p).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    });
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; k * p];
                    gemm(k, geom.c_out, p, self.data(*w), true, g, false, &mut dcols, 0.0);
                    acc(*x, &mut |dx| {
                        if geom.is_pointwise() {
                            dx.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
                        } else {
                            col2im(&dcols, geom, dx);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        let s = sigmoid(xv);
                        *d += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((x, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gv), &av) in d.iter_mut().zip(g).zip(ad) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, &gv)| *a += gv * f));
            }
            Op::Resize { x, ys, xs } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ho, wo) = node.value.chw();
                acc(*x, &mut |dx| {
                    for ch in 0..c {
                        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
                        for oy in 0..ho {
                            let (y0, y1, wy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
                            for ox in 0..wo {
                                let (x0, x1, wx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                                let gv = gp[oy * wo + ox];
                                plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                                plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                                plane[y1 * w + x1] += gv * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let tail: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * tail;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * tail;
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, bd, true, d, 1.0));
                acc(*b, &mut |d| gemm(k, m, n, ad, true, g, false, d, 1.0));
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RowMax { x, argmax } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (r, &j) in argmax.iter().enumerate() {
                        d[r * n + j] += g[r];
                    }
                });
            }
            Op::MulBroadcast { x, w } => {
                let wd = self.data(*w);
                let xd = self.data(*x);
                let inner = wd.len();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((dv, &gv), &wv) in dr.iter_mut().zip(gr).zip(wd) {
                            *dv += gv * wv;
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for (xr, gr) in xd.chunks(inner).zip(g.chunks(inner)) {
                        for ((dv, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                            *dv += gv * xv;
                        }
                    }
                });
            }
            Op::SelectCols { x, idx } => {
                let n = self.shape(*x)[1];
                let k = idx.len();
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(k.max(1)).enumerate().take(self.shape(*x)[0]) {
                        for (&i, &gv) in idx.iter().zip(gr) {
                            d[r * n + i] += gv;
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (&i, gr) in idx.iter().zip(g.chunks(n)) {
                        d[i * n..(i + 1) * n].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Focal {
                p,
                target,
                alpha,
                gamma,
            } => {
                let pd = self.data(*p);
                acc(*p, &mut |d| {
                    for ((dv, &pv), &t) in d.iter_mut().zip(pd).zip(target) {
                        *dv += g[0] * focal_grad(pv, t, *alpha, *gamma);
                    }
                });
            }
            Op::DiceRows { p, target } => {
                let n = self.shape(*p)[1];
                let pd = self.data(*p);
                acc(*p, &mut |d| {
                    for (r, ((dr, pr), tr)) in d
                        .chunks_mut(n)
                        .zip(pd.chunks(n))
                        .zip(target.chunks(n))
                        .enumerate()
                    {
                        let (num, den) = dice_parts(pr, tr);
                        for ((dv, &pv), &tv) in dr.iter_mut().zip(pr).zip(tr) {
                            *dv -= g[r] * (2.0 * tv * den - num * 2.0 * pv) / (den * den);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |d| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        d[i] += gv;
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                let (xd, sc) = (self.data(*x), self.data(*scale));
                acc(*x, &mut |d| {
                    for (ch, (dr, gr)) in d.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        dr.iter_mut().zip(gr).for_each(|(a, b)| *a += b * sc[ch]);
                    }
                });
                acc(*scale, &mut |d| {
                    for (ch, (xr, gr)) in xd.chunks(hw).zip(g.chunks(hw)).enumerate() {
                        d[ch] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*shift, &mut |d| {
                    for (ch, gr) in g.chunks(hw).enumerate() {
                        d[ch] += gr.iter().sum::<f64>();
                    }
                });
            }
            Op::GroupNorm {
                x,
                groups,
                normalized,
                inv_std,
            } => {
                let block = g.len() / groups;
                acc(*x, &mut |d| {
                    for (k, ((dr, gr), nr)) in d
                        .chunks_mut(block)
                        .zip(g.chunks(block))
                        .zip(normalized.chunks(block))
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / block as f64;
                        let mean_gn = gr.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / block as f64;
                        for ((dv, &gv), &nv) in dr.iter_mut().zip(gr).zip(nr) {
                            *dv += inv_std[k] * (gv - mean_g - nv * mean_gn);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Iterates over `(param, gradient)` for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.param_vars
            .iter()
            .filter_map(|(&id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch() * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One element of the focal loss:
/// `-α t (1-p)^γ ln p - (1-α)(1-t) p^γ ln(1-p)` with `p` clamped away from
/// 0 and 1.
pub fn focal_term(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let pos = if t > 0.0 {
        -alpha * t * (1.0 - p).powf(gamma) * p.ln()
    } else {
        0.0
    };
    let neg = if t < 1.0 {
        -(1.0 - alpha) * (1.0 - t) * p.powf(gamma) * (1.0 - p).ln()
    } else {
        0.0
    };
    pos + neg
}

fn focal_grad(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if p <= FOCAL_EPS || p >= 1.0 - FOCAL_EPS {
        return 0.0;
    }
    let q = 1.0 - p;
    let mut d = 0.0;
    if t > 0.0 {
        d += -alpha * t * (-gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p);
    }
    if t < 1.0 {
        d += -(1.0 - alpha) * (1.0 - t) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
    }
    d
}

fn dice_parts(p: &[f64], t: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut tt = 0.0;
    for (&a, &b) in p.iter().zip(t) {
        inter += a * b;
        pp += a * a;
        tt += b * b;
    }
    (2.0 * inter + DICE_EPS, pp + tt + DICE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradients;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
        // A fixed random projection so every output element matters.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = t.shape(v).to_vec();
        let w = rand_tensor(&mut rng, &shape);
        let wv = t.constant(w);
        let m = t.mul(v, wv);
        t.sum(m)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            let x = rand_tensor(&mut rng, &[2, 9, 8]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let err = check_input_gradients(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                weighted_sum(t, y, 7)
            });
            assert!(err < 1e-6, "stride {stride} pad {pad} k {k}: rel err {err}");
        }
    }

    #[test]
    fn pointwise_and_shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let err = check_input_gradients(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.softmax_rows(m);
            let tr = t.transpose(s);
            let r = t.silu(tr);
            let r = t.relu(r);
            let sg = t.sigmoid(m);
            let rm = t.row_max(sg);
            let c = t.concat(&[r, r], 1);
            let c = t.select_cols(c, &[0, 2, 5]);
            let c = t.select_rows(c, &[4, 1]);
            let l1 = weighted_sum(t, c, 3);
            let l2 = weighted_sum(t, rm, 4);
            t.add(l1, l2)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn resize_pool_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 5, 6]);
        let s = rand_tensor(&mut rng, &[2]);
        let sh = rand_tensor(&mut rng, &[2]);
        let w = rand_tensor(&mut rng, &[30]);
        let err = check_input_gradients(&[x, s, sh, w], |t, v| {
            let up = t.resize(v[0], 9, 4);
            let pooled = t.max_pool(up, 3, 2, 1);
            let normed = t.group_norm(pooled, 2);
            let aff = t.channel_affine(normed, v[1], v[2]);
            let flat = t.reshape(v[0], &[2, 30]);
            let mb = t.mul_broadcast(flat, v[3]);
            let l1 = weighted_sum(t, aff, 5);
            let l2 = weighted_sum(t, mb, 6);
            t.add(l1, l2)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, &[3, 6]);
        let target: Vec<f64> = (0..18).map(|i| f64::from(i % 3 == 0)).collect();
        let t2 = target.clone();
        let err = check_input_gradients(&[logits], move |t, v| {
            let p = t.sigmoid(v[0]);
            let f = t.focal_loss_sum(p, &target, 0.25, 2.0);
            let d = t.dice_rows(p, &t2);
            let dm = t.mean(d);
            let dm = t.scale(dm, 3.0);
            t.add(f, dm)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::full(&[1, 1, 1, 1], 2.0));
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let w = tape.param(id);
        let y = tape.conv2d(x, w, None, 1, 0);
        let l = tape.sum(y);
        assert_eq!(tape.value(l).item(), 8.0);
        assert!(tape.backward(l).param(id).is_none());
    }

    #[test]
    fn param_leaves_are_shared() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::training(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let m = tape.mul(a, b);
        let g = tape.backward(m);
        assert_eq!(g.param(id).unwrap().item(), 6.0);
    }
}
