//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` replays the
//! list in reverse, so recording order is a valid topological order.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::metrics::loss;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
    },
    Bilinear(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Interleave {
        a: Var,
        b: Var,
        group: usize,
    },
    DiceCe {
        logits: Var,
        probs: Vec<T>,
        target: Vec<usize>,
        batch: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation. One tape per training step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, format!("expected rank-4 (b,h,w,c), got {shape:?}"))),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn bias_grad<T: Scalar>(g: &[T], width: usize) -> Vec<T> {
    let mut db = vec![T::zero(); width];
    for row in g.chunks_exact(width) {
        add_into(&mut db, row);
    }
    db
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`; only leaves
    /// keep their gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient matches value shape"))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a leaf. Repeated binds return the same
    /// variable; frozen parameters are recorded without gradient tracking.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of all bound trainable parameters reached by `backward`.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(_, &v)| self.requires_grad(v))
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", value, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", value, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push("scale", value, rg, Op::Scale(a, s))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push("sum", value, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(a).numel());
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push("reshape", value, rg, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let data = kernels::permute(&shape, axes, self.value(a).data());
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a]);
        self.push("permute", value, rg, Op::Permute(a, axes.to_vec()))
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[k, n]`, `b` is `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().expect("rank >= 1");
        let (wk, n) = match *self.shape(w) {
            [wk, n] => (wk, n),
            ref s => return Err(Error::shape("linear", format!("weight must be rank 2, got {s:?}"))),
        };
        if wk != k {
            return Err(Error::shape(
                "linear",
                format!("input last axis {k} != weight rows {wk}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{n}]", self.shape(b)),
                ));
            }
        }
        let m = self.value(x).numel() / k;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            T::one(),
            &mut out,
        );
        let mut os = xs;
        *os.last_mut().expect("rank >= 1") = n;
        let value = Tensor::new(os, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push("linear", value, rg, Op::Linear { x, w, b })
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("left operand must be rank 2, got {:?}", self.shape(a)),
            ));
        }
        self.linear(a, b, None)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = match *self.shape(a) {
            [bb, m, k] => (bb, m, k),
            ref s => return Err(Error::shape("bmm", format!("left operand must be rank 3, got {s:?}"))),
        };
        let (bb, kb, n) = match (self.shape(b), trans_b) {
            (&[bb, r, c], false) => (bb, r, c),
            (&[bb, r, c], true) => (bb, c, r),
            (s, _) => return Err(Error::shape("bmm", format!("right operand must be rank 3, got {s:?}"))),
        };
        if bb != batch || kb != k {
            return Err(Error::shape(
                "bmm",
                format!(
                    "incompatible {:?} x {:?} (trans_b={trans_b})",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..][..m * k],
                k as isize,
                1,
                &bv[i * k * n..][..k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..][..m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        self.push("bmm", value, rg, Op::Bmm { a, b, trans_b })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        let data = loss::softmax_rows(self.value(a).data(), c);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push("softmax", value, rg, Op::Softmax(a))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine parameters must be [{d}]")));
        }
        let eps = T::from_f64_lossy(eps);
        let dt = T::from_usize_lossy(d);
        let xv = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..][..d];
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bta[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * kernels::normal_cdf(x))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push("gelu", value, rg, Op::Gelu(a))
    }

    /// Channels-last cross-correlation of `x [b,h,w,c_in]` with
    /// `kernel [k,k,c_in,c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (b, h, w, c_in) = dims4("conv2d", self.shape(x))?;
        let (k, c_out) = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 && ci == c_in => (k1, co),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} incompatible with input channels {c_in} (expected [k,k,{c_in},c_out])"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span = |ext: usize, axis: &str| -> Result<usize> {
            let padded = ext + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("axis {axis}: extent {ext} with pad {pad} is not tiled by kernel {k} at stride {stride}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch: b,
            h,
            w,
            c_in,
            k,
            c_out,
            stride,
            pad,
            h_out: span(h, "h")?,
            w_out: span(w, "w")?,
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias must be [{c_out}]")));
            }
        }
        let mut out = vec![T::zero(); b * geom.h_out * geom.w_out * c_out];
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data(), &mut out);
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            for row in out.chunks_exact_mut(c_out) {
                add_into(row, bias);
            }
        }
        let value = Tensor::new(vec![b, geom.h_out, geom.w_out, c_out], out)?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            "conv2d",
            value,
            rg,
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                geom,
            },
        )
    }

    /// Transposed convolution whose kernel size equals its stride, giving an
    /// exact `×stride` upsampling.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (b, h, w, c_in) = dims4("conv_transpose2d", self.shape(x))?;
        let c_out = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 && ci == c_in => {
                if k1 != stride {
                    return Err(Error::Config(format!(
                        "conv_transpose2d requires kernel == stride, got kernel {k1}, stride {stride}"
                    )));
                }
                co
            }
            ref s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("kernel {s:?} incompatible with input channels {c_in}"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be positive".into()));
        }
        let mut out = vec![T::zero(); b * h * stride * w * stride * c_out];
        kernels::conv_transpose2d_forward(
            (b, h, w, c_in),
            stride,
            c_out,
            self.value(x).data(),
            self.value(kernel).data(),
            &mut out,
        );
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::shape("conv_transpose2d", format!("bias must be [{c_out}]")));
            }
            let bias = self.value(bv).data();
            for row in out.chunks_exact_mut(c_out) {
                add_into(row, bias);
            }
        }
        let value = Tensor::new(vec![b, h * stride, w * stride, c_out], out)?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(
            "conv_transpose2d",
            value,
            rg,
            Op::ConvTranspose2d {
                x,
                k: kernel,
                b: bias,
                stride,
            },
        )
    }

    /// Bilinear resize with half-pixel (align-corners-false) sampling and edge
    /// clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = dims4("bilinear_resize", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "target size must be at least 1x1"));
        }
        let (b, _, _, c) = dims;
        let mut out = vec![T::zero(); b * out_h * out_w * c];
        kernels::bilinear_forward(dims, (out_h, out_w), self.value(x).data(), &mut out);
        let value = Tensor::new(vec![b, out_h, out_w, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push("bilinear_resize", value, rg, Op::Bilinear(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = dims4("max_pool2", self.shape(x))?;
        let (b, h, w, c) = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial extents {h}x{w} must be even"),
            ));
        }
        let mut out = vec![T::zero(); b * (h / 2) * (w / 2) * c];
        let argmax = kernels::max_pool2_forward(dims, self.value(x).data(), &mut out);
        let value = Tensor::new(vec![b, h / 2, w / 2, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push("max_pool2", value, rg, Op::MaxPool2 { x, argmax })
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("leading axes differ: {:?} vs {:?}", self.shape(*first), s),
                ));
            }
            widths.push(*s.last().expect("rank >= 1"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..][..wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        self.push("concat", value, rg, Op::Concat(parts.to_vec()))
    }

    /// Alternates channel groups of `a` and `b`: `[a_0, b_0, a_1, b_1, ..]`
    /// where each group holds `group` consecutive channels.
    pub fn interleave(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        self.same_shape("interleave", a, b)?;
        let d = self.value(a).last_dim();
        if group == 0 || !d.is_multiple_of(group) {
            return Err(Error::Config(format!(
                "interleave group {group} does not divide {d} channels"
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() * 2);
        for (ra, rb) in av.chunks_exact(d).zip(bv.chunks_exact(d)) {
            for (ga, gb) in ra.chunks_exact(group).zip(rb.chunks_exact(group)) {
                out.extend_from_slice(ga);
                out.extend_from_slice(gb);
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") = 2 * d;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        self.push("interleave", value, rg, Op::Interleave { a, b, group })
    }

    /// Dice + cross-entropy loss of `logits [b, .., C]` against class indices.
    pub fn dice_ce_loss(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "dice_ce_loss",
                "logits need a batch axis and a class axis",
            ));
        }
        let (batch, classes) = (shape[0], shape[shape.len() - 1]);
        let pixels = self.value(logits).numel() / classes;
        if target.len() != pixels {
            return Err(Error::shape(
                "dice_ce_loss",
                format!("target has {} entries, logits have {pixels} pixels", target.len()),
            ));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let (value, probs) = loss::dice_ce_forward(self.value(logits).data(), target, batch, classes);
        let rg = self.any_grad(&[logits]);
        self.push(
            "dice_ce_loss",
            Tensor::scalar(value),
            rg,
            Op::DiceCe {
                logits,
                probs,
                target: target.to_vec(),
                batch,
            },
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must hold one element, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            for (v, dv) in self.backward_node(i, &g) {
                match &mut self.grads[v.0] {
                    Some(acc) => add_into(acc, &dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi).collect()));
                }
                if need(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&gi| gi * *s).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.nodes[a.0].value.numel()])),
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                out.push((*a, kernels::permute(node.value.shape(), &inverse, g)));
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let k = *xs.last().expect("rank >= 1");
                let n = node.value.last_dim();
                let m = g.len() / n;
                if need(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, n as isize, 1, val(*w), 1, n as isize, T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*x), 1, k as isize, g, n as isize, 1, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, bias_grad(g, n)));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let [batch, m, k] = self.nodes[a.0].value.shape()[..] else {
                    unreachable!()
                };
                let n = node.value.last_dim();
                let (av, bv) = (val(*a), val(*b));
                if need(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    // da = g · b^T  (b is [k,n], or [n,k] when transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..][..m * n],
                            n as isize,
                            1,
                            &bv[bi * k * n..][..k * n],
                            rsb,
                            csb,
                            T::zero(),
                            &mut da[bi * m * k..][..m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let (gb, ab) = (&g[bi * m * n..][..m * n], &av[bi * m * k..][..m * k]);
                        let dst = &mut db[bi * k * n..][..k * n];
                        if *trans_b {
                            // d(b^T) = g^T · a, shape [n, k]
                            T::gemm(n, m, k, gb, 1, n as isize, ab, k as isize, 1, T::zero(), dst);
                        } else {
                            T::gemm(k, m, n, ab, 1, k as isize, gb, n as isize, 1, T::zero(), dst);
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gm = val(*gamma);
                if need(*x) {
                    let dt = T::from_usize_lossy(d);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..][..d];
                        let xr = &xhat[r * d..][..d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= dt;
                        mean_dxh_xh /= dt;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gm[j] - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
                if need(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if need(*beta) {
                    out.push((*beta, bias_grad(g, d)));
                }
            }
            Op::Gelu(a) => {
                let dx = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| gi * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x)))
                    .collect();
                out.push((*a, dx));
            }
            Op::Conv2d { x, k, b, geom } => {
                let mut dx = need(*x).then(|| vec![T::zero(); self.nodes[x.0].value.numel()]);
                let mut dk = need(*k).then(|| vec![T::zero(); self.nodes[k.0].value.numel()]);
                kernels::conv2d_backward(geom, val(*x), val(*k), g, dx.as_deref_mut(), dk.as_deref_mut());
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, bias_grad(g, geom.c_out)));
                }
            }
            Op::ConvTranspose2d { x, k, b, stride } => {
                let dims = dims4("conv_transpose2d", self.nodes[x.0].value.shape()).expect("checked in forward");
                let c_out = node.value.last_dim();
                let mut dx = need(*x).then(|| vec![T::zero(); self.nodes[x.0].value.numel()]);
                let mut dk = need(*k).then(|| vec![T::zero(); self.nodes[k.0].value.numel()]);
                kernels::conv_transpose2d_backward(
                    dims,
                    *stride,
                    c_out,
                    val(*x),
                    val(*k),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
                if let Some(b) = b.filter(|&b| need(b)) {
                    out.push((b, bias_grad(g, c_out)));
                }
            }
            Op::Bilinear(x) => {
                let dims = dims4("bilinear_resize", self.nodes[x.0].value.shape()).expect("checked in forward");
                let s = node.value.shape();
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                kernels::bilinear_backward(dims, (s[1], s[2]), g, &mut dx);
                out.push((*x, dx));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.last_dim();
                    if need(p) {
                        let mut dp = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..][..wd]);
                        }
                        out.push((p, dp));
                    }
                    offset += wd;
                }
            }
            Op::Interleave { a, b, group } => {
                let d = self.nodes[a.0].value.last_dim();
                let n = self.nodes[a.0].value.numel();
                let (mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for row in g.chunks_exact(2 * d) {
                    for pair in row.chunks_exact(2 * group) {
                        da.extend_from_slice(&pair[..*group]);
                        db.extend_from_slice(&pair[*group..]);
                    }
                }
                if need(*a) {
                    out.push((*a, da));
                }
                if need(*b) {
                    out.push((*b, db));
                }
            }
            Op::DiceCe {
                logits,
                probs,
                target,
                batch,
            } => {
                let classes = self.nodes[logits.0].value.last_dim();
                out.push((*logits, loss::dice_ce_backward(probs, target, *batch, classes, g[0])));
            }
        }
        out
    }
}
