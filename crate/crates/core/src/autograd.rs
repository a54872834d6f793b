//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every forward operation appends a node holding its output value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients only along paths that reach a node created with
//! `requires_grad = true`.

use crate::error::{Error, Result};
use crate::kernels::{self, col2im, gemm, im2col, ConvGeometry, Mat, Padding};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        col: Vec<f64>,
    },
    /// Transposed convolution; `geom` describes the adjoint correlation whose
    /// input is this node's output.
    ConvT2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<usize>),
    SliceChannels {
        x: usize,
        start: usize,
    },
    Warp {
        src: usize,
        flow: usize,
    },
    GlobalAvgPool(usize),
    MeanAbsDiff(usize, usize),
    MeanEndpointError(usize, usize),
    GaussianKl {
        mean: usize,
        log_var: usize,
    },
    Sum(usize),
    Dot(usize, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const IN_EPS: f64 = 1e-5;
const EPE_EPS: f64 = 0.0;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked only for `requires_grad` leaves
    /// and the nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Correlation of `x: [Ci, H, W]` with `w: [Co, Ci, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (ci, h, wd) = xv.chw();
        let wd4 = wv.dims();
        if wd4.len() != 4 || wd4[1] != ci {
            return Err(Error::Structural(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                wd4,
                xv.dims()
            )));
        }
        let co = wd4[0];
        let geom = ConvGeometry::new((ci, h, wd), (wd4[2], wd4[3]), stride, pad)?;
        let col = im2col(xv.data(), &geom);
        let p = geom.col_cols();
        let mut out = vec![0.0; co * p];
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            if bv.len() != co {
                return Err(Error::Structural(format!("conv2d bias length {} != {co}", bv.len())));
            }
            for (row, &bias) in out.chunks_mut(p).zip(bv) {
                row.fill(bias);
            }
        }
        gemm(
            Mat::new(wv.data(), co, geom.col_rows()),
            Mat::new(&col, geom.col_rows(), p),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let value = Tensor::from_vec(&[co, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                col,
            },
            &inputs,
        ))
    }

    /// Transposed convolution of `x: [Ci, H, W]` with `w: [Ci, Co, Kh, Kw]`.
    /// Output size is `(H - 1) * stride - 2 * pad + K + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (ci, h, wd) = xv.chw();
        let wd4 = wv.dims();
        if wd4.len() != 4 || wd4[0] != ci || output_pad >= stride.max(1) {
            return Err(Error::Structural(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                wd4,
                xv.dims()
            )));
        }
        let (co, kh, kw) = (wd4[1], wd4[2], wd4[3]);
        let out_h = ((h - 1) * stride + kh + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Structural("conv_transpose2d padding too large".into()))?;
        let out_w = ((wd - 1) * stride + kw + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Structural("conv_transpose2d padding too large".into()))?;
        let geom = ConvGeometry::new((co, out_h, out_w), (kh, kw), stride, Padding::same(pad))?;
        if (geom.out_h, geom.out_w) != (h, wd) {
            return Err(Error::Structural("conv_transpose2d geometry is not invertible".into()));
        }
        let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
        gemm(
            Mat::new(wv.data(), ci, geom.col_rows()).t(),
            Mat::new(xv.data(), ci, h * wd),
            0.0,
            &mut col,
        );
        let mut out = vec![0.0; co * out_h * out_w];
        col2im(&col, &geom, &mut out);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            if bv.len() != co {
                return Err(Error::Structural(format!("deconv bias length {} != {co}", bv.len())));
            }
            for (plane, &bias) in out.chunks_mut(out_h * out_w).zip(bv) {
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::from_vec(&[co, out_h, out_w], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            value,
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * s);
        self.push(value, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + s);
        self.push(value, Op::AddScalar(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a.0), &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.push(value, Op::Exp(a.0), &[a.0])
    }

    /// Per-channel normalization over the spatial axes with an affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = xv.chw();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        if g.len() != c || bt.len() != c {
            return Err(Error::Structural(format!(
                "instance norm affine length {} / {} != {c}",
                g.len(),
                bt.len()
            )));
        }
        let n = (h * w) as f64;
        let mut xhat = vec![0.0; c * h * w];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let xs = xv.channel(ch);
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + IN_EPS).sqrt();
            inv_std[ch] = is;
            for (i, &v) in xs.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat[ch * h * w + i] = xh;
                out[ch * h * w + i] = g[ch] * xh + bt[ch];
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat(idx.clone()), &idx))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0].value.slice_channels(start, len);
        self.push(value, Op::SliceChannels { x: x.0, start }, &[x.0])
    }

    /// Bilinear backward warp of `src: [C, H, W]` by `flow: [2, H, W]`
    /// (channel 0 horizontal, channel 1 vertical sampling offsets), with
    /// border replication outside the image.
    pub fn warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let sv = &self.nodes[src.0].value;
        let fv = &self.nodes[flow.0].value;
        let (c, h, w) = sv.chw();
        if fv.dims() != [2, h, w] {
            return Err(Error::Structural(format!(
                "warp flow {:?} does not match source {:?}",
                fv.dims(),
                sv.dims()
            )));
        }
        let out = kernels::warp_forward(sv.data(), fv.data(), (c, h, w));
        let value = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Op::Warp {
                src: src.0,
                flow: flow.0,
            },
            &[src.0, flow.0],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, _, _) = xv.chw();
        let data = (0..c)
            .map(|ch| {
                let s = xv.channel(ch);
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        let value = Tensor::from_vec(&[c, 1, 1], data).expect("pool dims");
        self.push(value, Op::GlobalAvgPool(x.0), &[x.0])
    }

    /// Mean over all elements of `|a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        av.expect_same_dims(bv)?;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        Ok(self.push(value, Op::MeanAbsDiff(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean over pixels of the Euclidean distance between two `[2, H, W]` fields.
    pub fn mean_endpoint_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        av.expect_same_dims(bv)?;
        let (c, h, w) = av.chw();
        if c != 2 {
            return Err(Error::Structural(format!("endpoint error needs 2 channels, got {c}")));
        }
        let plane = h * w;
        let (ad, bd) = (av.data(), bv.data());
        let s: f64 = (0..plane)
            .map(|p| {
                let du = ad[p] - bd[p];
                let dv = ad[plane + p] - bd[plane + p];
                (du * du + dv * dv + EPE_EPS).sqrt()
            })
            .sum();
        let value = Tensor::scalar(s / plane as f64);
        Ok(self.push(value, Op::MeanEndpointError(a.0, b.0), &[a.0, b.0]))
    }

    /// `KL(N(mean, exp(log_var)) || N(0, I))`, summed over elements.
    pub fn gaussian_kl(&mut self, mean: Var, log_var: Var) -> Result<Var> {
        let mv = &self.nodes[mean.0].value;
        let lv = &self.nodes[log_var.0].value;
        mv.expect_same_dims(lv)?;
        let s: f64 = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - l - 1.0))
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::GaussianKl {
                mean: mean.0,
                log_var: log_var.0,
            },
            &[mean.0, log_var.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a.0), &[a.0])
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn dot_const(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        av.expect_same_dims(&weights)?;
        let s: f64 = av.data().iter().zip(weights.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a.0, weights), &[a.0]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root_dims = self.nodes[root.0].value.dims().to_vec();
        grads[root.0] = Some(Tensor::full(&root_dims, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.wants(i) {
            return;
        }
        match &mut grads[i] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], i: usize, f: impl FnOnce() -> Tensor) {
        if self.wants(i) {
            let g = f();
            self.accumulate(grads, i, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let like = |j: usize, data: Vec<f64>| Tensor::from_vec(val(j).dims(), data).expect("grad dims");
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, col } => {
                let co = val(*w).dims()[0];
                let p = geom.col_cols();
                let k = geom.col_rows();
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, || {
                        like(*b, g.data().chunks(p).map(|r| r.iter().sum()).collect())
                    });
                }
                self.accumulate_with(grads, *w, || {
                    let mut dw = vec![0.0; co * k];
                    gemm(Mat::new(g.data(), co, p), Mat::new(col, k, p).t(), 0.0, &mut dw);
                    like(*w, dw)
                });
                self.accumulate_with(grads, *x, || {
                    let mut dcol = vec![0.0; k * p];
                    gemm(
                        Mat::new(val(*w).data(), co, k).t(),
                        Mat::new(g.data(), co, p),
                        0.0,
                        &mut dcol,
                    );
                    let mut dx = vec![0.0; val(*x).len()];
                    col2im(&dcol, geom, &mut dx);
                    like(*x, dx)
                });
            }
            Op::ConvT2d { x, w, b, geom } => {
                let ci = val(*x).dims()[0];
                let hw = geom.col_cols();
                let k = geom.col_rows();
                if let Some(b) = b {
                    let plane = geom.in_h * geom.in_w;
                    self.accumulate_with(grads, *b, || {
                        like(*b, g.data().chunks(plane).map(|r| r.iter().sum()).collect())
                    });
                }
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                if need_x || need_w {
                    let gcol = im2col(g.data(), geom);
                    if need_w {
                        let mut dw = vec![0.0; ci * k];
                        gemm(
                            Mat::new(val(*x).data(), ci, hw),
                            Mat::new(&gcol, k, hw).t(),
                            0.0,
                            &mut dw,
                        );
                        self.accumulate(grads, *w, like(*w, dw));
                    }
                    if need_x {
                        let mut dx = vec![0.0; ci * hw];
                        gemm(Mat::new(val(*w).data(), ci, k), Mat::new(&gcol, k, hw), 0.0, &mut dx);
                        self.accumulate(grads, *x, like(*x, dx));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, *a, || g.zip_map(val(*b), |gv, bv| gv * bv).unwrap());
                self.accumulate_with(grads, *b, || g.zip_map(val(*a), |gv, av| gv * av).unwrap());
            }
            Op::Scale(a, s) => self.accumulate_with(grads, *a, || g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate_with(grads, *a, || g.clone()),
            Op::Sigmoid(a) => self.accumulate_with(grads, *a, || {
                g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap()
            }),
            Op::Tanh(a) => self.accumulate_with(grads, *a, || {
                g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap()
            }),
            Op::Relu(a) => self.accumulate_with(grads, *a, || {
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap()
            }),
            Op::LeakyRelu(a, slope) => self.accumulate_with(grads, *a, || {
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })
                    .unwrap()
            }),
            Op::Exp(a) => self.accumulate_with(grads, *a, || g.zip_map(&node.value, |gv, y| gv * y).unwrap()),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = node.value.chw();
                let plane = h * w;
                let gd = g.data();
                self.accumulate_with(grads, *beta, || {
                    like(*beta, gd.chunks(plane).map(|r| r.iter().sum()).collect())
                });
                self.accumulate_with(grads, *gamma, || {
                    like(
                        *gamma,
                        (0..c)
                            .map(|ch| {
                                let r = ch * plane..(ch + 1) * plane;
                                gd[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum()
                            })
                            .collect(),
                    )
                });
                self.accumulate_with(grads, *x, || {
                    let gam = val(*gamma).data();
                    let n = plane as f64;
                    let mut dx = vec![0.0; c * plane];
                    for ch in 0..c {
                        let r = ch * plane..(ch + 1) * plane;
                        let dxh: Vec<f64> = gd[r.clone()].iter().map(|v| v * gam[ch]).collect();
                        let xh = &xhat[r.clone()];
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for (k, out) in dx[r].iter_mut().enumerate() {
                            *out = inv_std[ch] / n * (n * dxh[k] - s1 - xh[k] * s2);
                        }
                    }
                    like(*x, dx)
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    self.accumulate_with(grads, p, || like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceChannels { x, start } => self.accumulate_with(grads, *x, || {
                let (_, h, w) = node.value.chw();
                let mut dx = vec![0.0; val(*x).len()];
                let off = start * h * w;
                dx[off..off + g.len()].copy_from_slice(g.data());
                like(*x, dx)
            }),
            Op::Warp { src, flow } => {
                if self.wants(*src) || self.wants(*flow) {
                    let dims = val(*src).chw();
                    let (ds, df) = kernels::warp_backward(val(*src).data(), val(*flow).data(), g.data(), dims);
                    self.accumulate(grads, *src, like(*src, ds));
                    self.accumulate(grads, *flow, like(*flow, df));
                }
            }
            Op::GlobalAvgPool(a) => self.accumulate_with(grads, *a, || {
                let (_, h, w) = val(*a).chw();
                let plane = h * w;
                let mut d = vec![0.0; val(*a).len()];
                for (ch, &gv) in g.data().iter().enumerate() {
                    d[ch * plane..(ch + 1) * plane].fill(gv / plane as f64);
                }
                like(*a, d)
            }),
            Op::MeanAbsDiff(a, b) => {
                let gs = g.data()[0] / val(*a).len() as f64;
                let sign = val(*a).zip_map(val(*b), |x, y| gs * sign(x - y)).unwrap();
                self.accumulate_with(grads, *b, || sign.map(|v| -v));
                self.accumulate(grads, *a, sign);
            }
            Op::MeanEndpointError(a, b) => {
                let (_, h, w) = val(*a).chw();
                let plane = h * w;
                let gs = g.data()[0] / plane as f64;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let mut da = vec![0.0; 2 * plane];
                for p in 0..plane {
                    let du = ad[p] - bd[p];
                    let dv = ad[plane + p] - bd[plane + p];
                    let n = (du * du + dv * dv + EPE_EPS).sqrt();
                    if n > 0.0 {
                        da[p] = gs * du / n;
                        da[plane + p] = gs * dv / n;
                    }
                }
                self.accumulate_with(grads, *b, || like(*b, da.iter().map(|v| -v).collect()));
                self.accumulate(grads, *a, like(*a, da));
            }
            Op::GaussianKl { mean, log_var } => {
                let gs = g.data()[0];
                self.accumulate_with(grads, *mean, || val(*mean).map(|m| gs * m));
                self.accumulate_with(grads, *log_var, || val(*log_var).map(|l| gs * 0.5 * (l.exp() - 1.0)));
            }
            Op::Sum(a) => self.accumulate_with(grads, *a, || Tensor::full(val(*a).dims(), g.data()[0])),
            Op::Dot(a, weights) => {
                let gs = g.data()[0];
                self.accumulate_with(grads, *a, || weights.map(|v| v * gs));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
