//! Eager reverse-mode tape.
//!
//! Ops evaluate immediately and record themselves on the tape; node order is
//! therefore a topological order and [`Graph::backward`] walks it in reverse
//! exactly once, accumulating (summing) gradients at shared subexpressions.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Padding convention for [`Graph::conv2d`]. `Same` pads with zeros so the
/// output spatial size is `ceil(in/stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Batch-normalization execution mode.
///
/// * `Train` — batch statistics, running buffers updated.
/// * `Measure` — batch statistics, running buffers untouched (used when a
///   frozen network is only evaluated inside another network's step).
/// * `Eval` — running statistics, pure function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Measure,
    Eval,
}

/// Running batch-norm statistics (not trained, but checkpointed).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a [B,H,W,C] (+|*) b [B,1,1,C]` or `[1,1,1,C]`.
    AddBc(Var, Var),
    MulBc(Var, Var),
    AddBias(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: kernels::ConvGeom,
    },
    /// Adjoint of a `Same`-padded conv2d; `geom` describes that virtual
    /// conv, whose input is this op's *output*.
    TConv2d {
        x: Var,
        k: Var,
        geom: kernels::ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mu: Vec<f64>,
        istd: Vec<f64>,
        batch_stats: bool,
    },
    ResizeBilinear(Var),
    BilinearSample {
        img: Var,
        coords: Tensor,
    },
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SliceChannels {
        x: Var,
        from: usize,
    },
    SliceBatch {
        x: Var,
        from: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    StopGradient,
    SoftmaxCrossEntropy {
        logits: Var,
        onehot: Tensor,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One backward pass per graph; build a fresh graph
/// per training step.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Register an input tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a non-differentiated input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Run `f` against the node's value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.scalar_value()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last backward root w.r.t. `v` (zeros if `v` never
    /// received a contribution).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let nodes = self.nodes.borrow();
        match grads.get(v.0)? {
            Some(g) => Some(Tensor::new(nodes[v.0].value.shape(), g.clone()).unwrap()),
            None => {
                if nodes[v.0].requires_grad {
                    Some(Tensor::zeros(nodes[v.0].value.shape()))
                } else {
                    None
                }
            }
        }
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].value.shape() != nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} vs {:?}",
                nodes[a.0].value.shape(),
                nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let data = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| x + y)
                .collect();
            (
                Tensor::new(na.value.shape(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let data = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| x - y)
                .collect();
            (
                Tensor::new(na.value.shape(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let data = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| x * y)
                .collect();
            (
                Tensor::new(na.value.shape(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn bc_check(&self, a: Var, b: Var, name: &str) -> Result<([usize; 4], [usize; 4])> {
        let nodes = self.nodes.borrow();
        let da = nodes[a.0].value.dims4()?;
        let db = nodes[b.0].value.dims4()?;
        if db[1] != 1 || db[2] != 1 || db[3] != da[3] || (db[0] != da[0] && db[0] != 1) {
            return Err(Error::Dimension(format!(
                "{name}: cannot broadcast {:?} over {:?}",
                db, da
            )));
        }
        Ok((da, db))
    }

    fn bc_apply(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (da, db) = self.bc_check(a, b, "broadcast")?;
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let hw = da[1] * da[2];
        let c = da[3];
        let mut data = Vec::with_capacity(na.value.len());
        for bi in 0..da[0] {
            let brow = if db[0] == 1 { 0 } else { bi };
            let bpix = &nb.value.data()[brow * c..(brow + 1) * c];
            let arow = &na.value.data()[bi * hw * c..(bi + 1) * hw * c];
            for p in 0..hw {
                for ch in 0..c {
                    data.push(f(arow[p * c + ch], bpix[ch]));
                }
            }
        }
        Ok((
            Tensor::new(na.value.shape(), data)?,
            na.requires_grad || nb.requires_grad,
        ))
    }

    /// `a + b` with `b` broadcast over the spatial axes (per-sample or
    /// shared `[.,1,1,C]` bias).
    pub fn add_bc(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.bc_apply(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::AddBc(a, b), rg))
    }

    /// `a * b` with `b` broadcast over the spatial axes.
    pub fn mul_bc(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.bc_apply(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::MulBc(a, b), rg))
    }

    /// Add a per-channel bias `[C]` to `x [B,H,W,C]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            let nb = &nodes[bias.0];
            if nb.value.shape() != [d[3]] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} vs {} channels",
                    nb.value.shape(),
                    d[3]
                )));
            }
            let c = d[3];
            let bdat = nb.value.data();
            let data = nodes[x.0]
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bdat[i % c])
                .collect();
            (
                Tensor::new(nodes[x.0].value.shape(), data)?,
                nodes[x.0].requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v * c), nodes[x.0].requires_grad)
        };
        self.push(value, Op::MulScalar(x, c), rg)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v + c), nodes[x.0].requires_grad)
        };
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `y = x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.map(|v| if v >= 0.0 { v } else { slope * v }),
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.map(|v| 1.0 / (1.0 + (-v).exp())),
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(f64::tanh), nodes[x.0].requires_grad)
        };
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn abs(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(f64::abs), nodes[x.0].requires_grad)
        };
        self.push(value, Op::Abs(x), rg)
    }

    pub fn square(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| v * v), nodes[x.0].requires_grad)
        };
        self.push(value, Op::Square(x), rg)
    }

    /// Cross-correlation of `x [B,H,W,Cin]` with `k [kh,kw,Cin,Cout]`.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize, pad: Padding) -> Result<Var> {
        let (value, geom, rg) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.dims4()?;
            let kd = nodes[k.0].value.dims4()?;
            let geom = kernels::conv_geom(&xd, &kd, stride, pad)?;
            let mut out = vec![0.0; geom.batch * geom.out_h * geom.out_w * geom.out_c];
            kernels::conv_fwd(nodes[x.0].value.data(), nodes[k.0].value.data(), &geom, &mut out);
            (
                Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?,
                geom,
                nodes[x.0].requires_grad || nodes[k.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Conv2d { x, k, geom }, rg))
    }

    /// Transpose convolution: the adjoint of a `Same`-padded [`Self::conv2d`]
    /// with kernel `k [kh,kw,Cout,Cin]`, upsampling `x [B,H,W,Cin]` to
    /// `[B, H*stride, W*stride, Cout]`.
    pub fn transpose_conv2d(&self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Dimension(format!(
                "transpose conv stride must be 1 or 2, got {stride}"
            )));
        }
        let (value, geom, rg) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.dims4()?;
            let kd = nodes[k.0].value.dims4()?;
            if kd[3] != xd[3] {
                return Err(Error::Dimension(format!(
                    "transpose conv kernel {:?} vs input channels {}",
                    kd, xd[3]
                )));
            }
            let out_dims = [xd[0], xd[1] * stride, xd[2] * stride, kd[2]];
            let geom = kernels::conv_geom(&out_dims, &kd, stride, Padding::Same)?;
            debug_assert_eq!(geom.out_h, xd[1]);
            debug_assert_eq!(geom.out_w, xd[2]);
            let mut out = vec![0.0; out_dims.iter().product()];
            kernels::conv_bwd_input(
                nodes[x.0].value.data(),
                nodes[k.0].value.data(),
                &geom,
                &mut out,
            );
            (
                Tensor::new(&out_dims, out)?,
                geom,
                nodes[x.0].requires_grad || nodes[k.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::TConv2d { x, k, geom }, rg))
    }

    /// Batch normalization over the `B,H,W` axes of `x [B,H,W,C]`.
    pub fn batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (value, mu, istd, batch_stats, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            let c = d[3];
            if nodes[gamma.0].value.shape() != [c] || nodes[beta.0].value.shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm gamma/beta must be [{c}]",
                )));
            }
            if stats.mean.len() != c {
                return Err(Error::Dimension(format!(
                    "batchnorm running stats have {} channels, input {}",
                    stats.mean.len(),
                    c
                )));
            }
            let m = d[0] * d[1] * d[2];
            let xd = nodes[x.0].value.data();
            let (mu, var) = match mode {
                Mode::Train | Mode::Measure => {
                    if m < 2 {
                        return Err(Error::Statistics(format!(
                            "batch statistics need at least 2 values per channel, got {m}"
                        )));
                    }
                    let mut mu = vec![0.0; c];
                    for pix in xd.chunks_exact(c) {
                        for (s, &v) in mu.iter_mut().zip(pix) {
                            *s += v;
                        }
                    }
                    for s in &mut mu {
                        *s /= m as f64;
                    }
                    let mut var = vec![0.0; c];
                    for pix in xd.chunks_exact(c) {
                        for ((s, &v), &mean) in var.iter_mut().zip(pix).zip(&mu) {
                            let d = v - mean;
                            *s += d * d;
                        }
                    }
                    for s in &mut var {
                        *s /= m as f64;
                    }
                    (mu, var)
                }
                Mode::Eval => (stats.mean.clone(), stats.var.clone()),
            };
            if mode == Mode::Train {
                for (r, &b) in stats.mean.iter_mut().zip(&mu) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
                for (r, &b) in stats.var.iter_mut().zip(&var) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
            let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let gd = nodes[gamma.0].value.data();
            let bd = nodes[beta.0].value.data();
            let mut out = Vec::with_capacity(xd.len());
            for pix in xd.chunks_exact(c) {
                for (ch, &v) in pix.iter().enumerate() {
                    out.push(gd[ch] * (v - mu[ch]) * istd[ch] + bd[ch]);
                }
            }
            (
                Tensor::new(nodes[x.0].value.shape(), out)?,
                mu,
                istd,
                mode != Mode::Eval,
                nodes[x.0].requires_grad
                    || nodes[gamma.0].requires_grad
                    || nodes[beta.0].requires_grad,
            )
        };
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mu,
                istd,
                batch_stats,
            },
            rg,
        ))
    }

    /// Align-corners bilinear resize to `out_h x out_w`.
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h < 1 || out_w < 1 {
            return Err(Error::Dimension("resize target must be >= 1".into()));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            let mut out = vec![0.0; d[0] * out_h * out_w * d[3]];
            kernels::resize_fwd(nodes[x.0].value.data(), &d, out_h, out_w, &mut out);
            (
                Tensor::new(&[d[0], out_h, out_w, d[3]], out)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::ResizeBilinear(x), rg))
    }

    /// Bilinear lookup of `img [B,H,W,C]` at `coords [B,H,W,2]` (x, y).
    /// Differentiable in the image values; coordinates are fixed inputs.
    pub fn bilinear_sample(&self, img: Var, coords: &Tensor) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[img.0].value.dims4()?;
            let cd = coords.dims4()?;
            if cd != [d[0], d[1], d[2], 2] {
                return Err(Error::Dimension(format!(
                    "coords shape {:?} vs image {:?}",
                    coords.shape(),
                    nodes[img.0].value.shape()
                )));
            }
            let mut out = vec![0.0; nodes[img.0].value.len()];
            kernels::bsample_fwd(nodes[img.0].value.data(), &d, coords.data(), &mut out);
            (
                Tensor::new(nodes[img.0].value.shape(), out)?,
                nodes[img.0].requires_grad,
            )
        };
        Ok(self.push(
            value,
            Op::BilinearSample {
                img,
                coords: coords.clone(),
            },
            rg,
        ))
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let da = nodes[a.0].value.dims4()?;
            let db = nodes[b.0].value.dims4()?;
            if da[..3] != db[..3] {
                return Err(Error::Dimension(format!(
                    "channel concat of {:?} and {:?}",
                    da, db
                )));
            }
            let (ca, cb) = (da[3], db[3]);
            let mut out = Vec::with_capacity(nodes[a.0].value.len() + nodes[b.0].value.len());
            for (pa, pb) in nodes[a.0]
                .value
                .data()
                .chunks_exact(ca)
                .zip(nodes[b.0].value.data().chunks_exact(cb))
            {
                out.extend_from_slice(pa);
                out.extend_from_slice(pb);
            }
            (
                Tensor::new(&[da[0], da[1], da[2], ca + cb], out)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn concat_batch(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Domain("batch concat of zero tensors".into()));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d0 = nodes[xs[0].0].value.dims4()?;
            let mut data = Vec::new();
            let mut batch = 0;
            let mut rg = false;
            for v in xs {
                let d = nodes[v.0].value.dims4()?;
                if d[1..] != d0[1..] {
                    return Err(Error::Dimension(format!(
                        "batch concat of {:?} and {:?}",
                        d0, d
                    )));
                }
                batch += d[0];
                rg |= nodes[v.0].requires_grad;
                data.extend_from_slice(nodes[v.0].value.data());
            }
            (Tensor::new(&[batch, d0[1], d0[2], d0[3]], data)?, rg)
        };
        Ok(self.push(value, Op::ConcatBatch(xs.to_vec()), rg))
    }

    pub fn slice_channels(&self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            if from >= to || to > d[3] {
                return Err(Error::Dimension(format!(
                    "channel slice {from}..{to} of {} channels",
                    d[3]
                )));
            }
            let mut out = Vec::with_capacity(d[0] * d[1] * d[2] * (to - from));
            for pix in nodes[x.0].value.data().chunks_exact(d[3]) {
                out.extend_from_slice(&pix[from..to]);
            }
            (
                Tensor::new(&[d[0], d[1], d[2], to - from], out)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::SliceChannels { x, from }, rg))
    }

    pub fn slice_batch(&self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            if from >= to || to > d[0] {
                return Err(Error::Dimension(format!(
                    "batch slice {from}..{to} of batch {}",
                    d[0]
                )));
            }
            let per = d[1] * d[2] * d[3];
            let out = nodes[x.0].value.data()[from * per..to * per].to_vec();
            (
                Tensor::new(&[to - from, d[1], d[2], d[3]], out)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::SliceBatch { x, from }, rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                Tensor::scalar(nodes[x.0].value.data().iter().sum()),
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = nodes[x.0].value.len() as f64;
            (
                Tensor::scalar(nodes[x.0].value.data().iter().sum::<f64>() / n),
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::Mean(x), rg)
    }

    /// Spatial mean: `[B,H,W,C] -> [B,1,1,C]`.
    pub fn mean_spatial(&self, x: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.dims4()?;
            let hw = (d[1] * d[2]) as f64;
            let mut out = vec![0.0; d[0] * d[3]];
            for (b, sample) in nodes[x.0]
                .value
                .data()
                .chunks_exact(d[1] * d[2] * d[3])
                .enumerate()
            {
                let acc = &mut out[b * d[3]..(b + 1) * d[3]];
                for pix in sample.chunks_exact(d[3]) {
                    for (a, &v) in acc.iter_mut().zip(pix) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= hw;
                }
            }
            (
                Tensor::new(&[d[0], 1, 1, d[3]], out)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::MeanSpatial(x), rg))
    }

    /// Pass the value through, blocking gradient flow.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(value, Op::StopGradient, false)
    }

    /// Mean softmax cross-entropy of `logits [B,1,1,K]` against one-hot
    /// labels `[B,K]`.
    pub fn softmax_cross_entropy(&self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let d = nodes[logits.0].value.dims4()?;
            let (b, k) = (d[0], d[3]);
            if d[1] != 1 || d[2] != 1 || onehot.shape() != [b, k] {
                return Err(Error::Dimension(format!(
                    "softmax CE: logits {:?} vs labels {:?}",
                    d,
                    onehot.shape()
                )));
            }
            let ld = nodes[logits.0].value.data();
            let mut probs = vec![0.0; b * k];
            let mut loss = 0.0;
            for bi in 0..b {
                let row = &ld[bi * k..(bi + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[bi * k + j] = e;
                    z += e;
                }
                let logz = z.ln() + max;
                for j in 0..k {
                    probs[bi * k + j] /= z;
                    let y = onehot.data()[bi * k + j];
                    if y != 0.0 {
                        loss -= y * (row[j] - logz);
                    }
                }
            }
            (
                Tensor::scalar(loss / b as f64),
                probs,
                nodes[logits.0].requires_grad,
            )
        };
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                onehot: onehot.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Gradients accumulate at every
    /// `requires_grad` node; leaves untouched by the sweep get zeros.
    pub fn backward(&self, root: Var) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            if nodes[root.0].value.len() != 1 {
                return Err(Error::Dimension(format!(
                    "backward root must be scalar, got shape {:?}",
                    nodes[root.0].value.shape()
                )));
            }
        }
        let n = self.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        let nodes = self.nodes.borrow();
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&nodes, &mut grads, i, &g);
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // Leaves that never received a contribution still expose zeros.
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    fn propagate(&self, nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
        let accum = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            for (a, &c) in slot.iter_mut().zip(contrib) {
                *a += c;
            }
        };
        // Accumulate directly into the input slot, avoiding a temporary.
        let with_slot = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                accum(grads, *a, g);
                accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g);
                with_slot(grads, *b, &|slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_slot(grads, *a, &|slot| {
                    for ((s, &gv), &y) in slot.iter_mut().zip(g).zip(vb) {
                        *s += gv * y;
                    }
                });
                with_slot(grads, *b, &|slot| {
                    for ((s, &gv), &x) in slot.iter_mut().zip(g).zip(va) {
                        *s += gv * x;
                    }
                });
            }
            Op::AddBc(a, b) | Op::MulBc(a, b) => {
                let da = nodes[a.0].value.dims4().unwrap();
                let db = nodes[b.0].value.dims4().unwrap();
                let c = da[3];
                let hw = da[1] * da[2];
                let is_mul = matches!(nodes[i].op, Op::MulBc(..));
                let vb = nodes[b.0].value.data();
                let va = nodes[a.0].value.data();
                with_slot(grads, *a, &|slot| {
                    for bi in 0..da[0] {
                        let brow = if db[0] == 1 { 0 } else { bi };
                        let bpix = &vb[brow * c..(brow + 1) * c];
                        let srow = &mut slot[bi * hw * c..(bi + 1) * hw * c];
                        let grow = &g[bi * hw * c..(bi + 1) * hw * c];
                        for p in 0..hw {
                            for ch in 0..c {
                                let gv = grow[p * c + ch];
                                srow[p * c + ch] += if is_mul { gv * bpix[ch] } else { gv };
                            }
                        }
                    }
                });
                with_slot(grads, *b, &|slot| {
                    for bi in 0..da[0] {
                        let brow = if db[0] == 1 { 0 } else { bi };
                        let spix = &mut slot[brow * c..(brow + 1) * c];
                        let grow = &g[bi * hw * c..(bi + 1) * hw * c];
                        let arow = &va[bi * hw * c..(bi + 1) * hw * c];
                        for p in 0..hw {
                            for ch in 0..c {
                                let gv = grow[p * c + ch];
                                spix[ch] += if is_mul { gv * arow[p * c + ch] } else { gv };
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                accum(grads, *x, g);
                let c = nodes[bias.0].value.len();
                with_slot(grads, *bias, &|slot| {
                    for (idx, &gv) in g.iter().enumerate() {
                        slot[idx % c] += gv;
                    }
                });
            }
            Op::MulScalar(x, c) => {
                let c = *c;
                with_slot(grads, *x, &|slot| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv * c;
                    }
                });
            }
            Op::AddScalar(x) => accum(grads, *x, g),
            Op::LeakyRelu(x, slope) => {
                let vx = nodes[x.0].value.data();
                let slope = *slope;
                with_slot(grads, *x, &|slot| {
                    for ((s, &gv), &v) in slot.iter_mut().zip(g).zip(vx) {
                        *s += gv * if v >= 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                with_slot(grads, *x, &|slot| {
                    for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(y) {
                        *s += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                with_slot(grads, *x, &|slot| {
                    for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(y) {
                        *s += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = nodes[x.0].value.data();
                with_slot(grads, *x, &|slot| {
                    for ((s, &gv), &v) in slot.iter_mut().zip(g).zip(vx) {
                        *s += gv * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Square(x) => {
                let vx = nodes[x.0].value.data();
                with_slot(grads, *x, &|slot| {
                    for ((s, &gv), &v) in slot.iter_mut().zip(g).zip(vx) {
                        *s += gv * 2.0 * v;
                    }
                });
            }
            Op::Conv2d { x, k, geom } => {
                let (vx, vk) = (nodes[x.0].value.data(), nodes[k.0].value.data());
                with_slot(grads, *x, &|slot| {
                    kernels::conv_bwd_input(g, vk, geom, slot);
                });
                with_slot(grads, *k, &|slot| {
                    kernels::conv_bwd_kernel(vx, g, geom, slot);
                });
            }
            Op::TConv2d { x, k, geom } => {
                let (vx, vk) = (nodes[x.0].value.data(), nodes[k.0].value.data());
                with_slot(grads, *x, &|slot| {
                    kernels::conv_fwd(g, vk, geom, slot);
                });
                with_slot(grads, *k, &|slot| {
                    kernels::conv_bwd_kernel(g, vx, geom, slot);
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mu,
                istd,
                batch_stats,
            } => {
                let d = nodes[x.0].value.dims4().unwrap();
                let c = d[3];
                let m = (d[0] * d[1] * d[2]) as f64;
                let vx = nodes[x.0].value.data();
                let vgamma = nodes[gamma.0].value.data();
                // Per-channel reductions shared by all three gradients.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (pix, gpix) in vx.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ch in 0..c {
                        let xhat = (pix[ch] - mu[ch]) * istd[ch];
                        sum_dy[ch] += gpix[ch];
                        sum_dy_xhat[ch] += gpix[ch] * xhat;
                    }
                }
                with_slot(grads, *beta, &|slot| {
                    for (s, &v) in slot.iter_mut().zip(&sum_dy) {
                        *s += v;
                    }
                });
                with_slot(grads, *gamma, &|slot| {
                    for (s, &v) in slot.iter_mut().zip(&sum_dy_xhat) {
                        *s += v;
                    }
                });
                let use_batch = *batch_stats;
                with_slot(grads, *x, &|slot| {
                    for ((spix, pix), gpix) in slot
                        .chunks_exact_mut(c)
                        .zip(vx.chunks_exact(c))
                        .zip(g.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let gs = vgamma[ch] * istd[ch];
                            if use_batch {
                                let xhat = (pix[ch] - mu[ch]) * istd[ch];
                                spix[ch] += gs
                                    * (gpix[ch]
                                        - sum_dy[ch] / m
                                        - xhat * sum_dy_xhat[ch] / m);
                            } else {
                                spix[ch] += gs * gpix[ch];
                            }
                        }
                    }
                });
            }
            Op::ResizeBilinear(x) => {
                let d = nodes[x.0].value.dims4().unwrap();
                let od = nodes[i].value.dims4().unwrap();
                with_slot(grads, *x, &|slot| {
                    kernels::resize_bwd(g, &d, od[1], od[2], slot);
                });
            }
            Op::BilinearSample { img, coords } => {
                let d = nodes[img.0].value.dims4().unwrap();
                with_slot(grads, *img, &|slot| {
                    kernels::bsample_bwd_img(g, &d, coords.data(), slot);
                });
            }
            Op::ConcatChannels(a, b) => {
                let ca = nodes[a.0].value.dims4().unwrap()[3];
                let cb = nodes[b.0].value.dims4().unwrap()[3];
                let tot = ca + cb;
                with_slot(grads, *a, &|slot| {
                    for (spix, gpix) in slot.chunks_exact_mut(ca).zip(g.chunks_exact(tot)) {
                        for (s, &gv) in spix.iter_mut().zip(&gpix[..ca]) {
                            *s += gv;
                        }
                    }
                });
                with_slot(grads, *b, &|slot| {
                    for (spix, gpix) in slot.chunks_exact_mut(cb).zip(g.chunks_exact(tot)) {
                        for (s, &gv) in spix.iter_mut().zip(&gpix[ca..]) {
                            *s += gv;
                        }
                    }
                });
            }
            Op::ConcatBatch(xs) => {
                let mut offset = 0;
                for v in xs {
                    let len = nodes[v.0].value.len();
                    let part = &g[offset..offset + len];
                    accum(grads, *v, part);
                    offset += len;
                }
            }
            Op::SliceChannels { x, from } => {
                let cx = nodes[x.0].value.dims4().unwrap()[3];
                let co = nodes[i].value.dims4().unwrap()[3];
                let from = *from;
                with_slot(grads, *x, &|slot| {
                    for (spix, gpix) in slot.chunks_exact_mut(cx).zip(g.chunks_exact(co)) {
                        for (s, &gv) in spix[from..from + co].iter_mut().zip(gpix) {
                            *s += gv;
                        }
                    }
                });
            }
            Op::SliceBatch { x, from } => {
                let d = nodes[x.0].value.dims4().unwrap();
                let per = d[1] * d[2] * d[3];
                let from = *from;
                with_slot(grads, *x, &|slot| {
                    for (s, &gv) in slot[from * per..].iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                with_slot(grads, *x, &|slot| {
                    for s in slot.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let gv = g[0] / nodes[x.0].value.len() as f64;
                with_slot(grads, *x, &|slot| {
                    for s in slot.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let d = nodes[x.0].value.dims4().unwrap();
                let hw = (d[1] * d[2]) as f64;
                let c = d[3];
                with_slot(grads, *x, &|slot| {
                    for (b, sample) in slot.chunks_exact_mut(d[1] * d[2] * c).enumerate() {
                        let gpix = &g[b * c..(b + 1) * c];
                        for pix in sample.chunks_exact_mut(c) {
                            for (s, &gv) in pix.iter_mut().zip(gpix) {
                                *s += gv / hw;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                onehot,
                probs,
            } => {
                let b = onehot.shape()[0] as f64;
                let gv = g[0];
                let oh = onehot.data();
                with_slot(grads, *logits, &|slot| {
                    for ((s, &p), &y) in slot.iter_mut().zip(probs).zip(oh) {
                        *s += gv * (p - y) / b;
                    }
                });
            }
        }
    }
}

/// Max relative error between analytic and central finite-difference
/// gradients of a scalar-valued function at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; returns the worst element.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = f(&g, &vars)?;
        g.scalar_value(root)
    };
    // Analytic gradients.
    let g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("leaf gradient"))
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for ei in 0..x.len() {
            let orig = x.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + eps;
            let hi = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = orig - eps;
            let lo = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at tensor {ti} element {ei}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
