//! Parameter storage and the layer building blocks shared by every network.

use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::tensor::Tensor;

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on the tape. With `trainable = false` the values act
    /// as constants and no gradient flows back into them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Bit-level hash over names, shapes and values.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.dims().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Clamps every scalar into `[-bound, bound]`.
    pub fn clamp(&mut self, bound: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data_mut().fill(value);
        }
    }

    /// Replaces values from another set with identical layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.dims() != b.dims())
        {
            return Err(Error::Structural("parameter layouts differ".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Routes parameter `i` through another variable.
    pub fn replace(&mut self, i: usize, v: Var) {
        self.vars[i] = v;
    }

    /// Gradients for every parameter, zero where none reached it.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).dims()))
            })
            .collect()
    }
}

/// Creates parameters with fan-in scaled uniform initialization.
pub struct Builder<'r, R: Rng + ?Sized> {
    pub params: ParamSet,
    rng: &'r mut R,
}

impl<'r, R: Rng + ?Sized> Builder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    fn weight(&mut self, name: &str, dims: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(dims, bound, self.rng);
        self.params.push(format!("{name}.weight"), t)
    }

    fn bias(&mut self, name: &str, n: usize, value: f64) -> usize {
        self.params.push(format!("{name}.bias"), Tensor::full(&[n], value))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: Padding) -> Conv {
        Conv {
            weight: self.weight(name, &[cout, cin, k, k], cin * k * k),
            bias: self.bias(name, cout, 0.0),
            stride,
            pad,
        }
    }

    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Deconv {
        Deconv {
            weight: self.weight(name, &[cin, cout, k, k], cin * k * k),
            bias: self.bias(name, cout, 0.0),
            stride,
            pad: (k - 1) / 2,
            output_pad: stride - 1,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self
                .params
                .push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn conv_lstm(&mut self, name: &str, input: usize, hidden: usize, k: usize) -> ConvLstm {
        let gates = self.conv(
            &format!("{name}.gates"),
            input + hidden,
            4 * hidden,
            k,
            1,
            Padding::keep_size(k),
        );
        // forget-gate bias starts at +1
        let b = self.params.tensors_mut()[gates.bias].data_mut();
        b[hidden..2 * hidden].fill(1.0);
        ConvLstm { gates, hidden }
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Transposed convolution that scales spatial size by exactly `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deconv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl Deconv {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.instance_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Hidden and cell grids of a ConvLSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Convolutional LSTM: all four gates come from one convolution over the
/// channel-wise concatenation of input and hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstm {
    pub gates: Conv,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn zero_state(&self, tape: &mut Tape, h: usize, w: usize) -> LstmState {
        let z = Tensor::zeros(&[self.hidden, h, w]);
        LstmState {
            hidden: tape.constant(z.clone()),
            cell: tape.constant(z),
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: LstmState) -> Result<LstmState> {
        let (_, xh, xw) = tape.value(x).chw();
        let (hc, hh, hw) = tape.value(state.hidden).chw();
        if (xh, xw) != (hh, hw) || hc != self.hidden || tape.value(state.cell).dims() != tape.value(state.hidden).dims()
        {
            return Err(Error::Structural(format!(
                "ConvLSTM input {:?} does not match state {:?}",
                tape.value(x).dims(),
                tape.value(state.hidden).dims()
            )));
        }
        let joined = tape.concat_channels(&[x, state.hidden])?;
        let gates = self.gates.forward(tape, p, joined)?;
        let n = self.hidden;
        let i = tape.slice_channels(gates, 0, n);
        let f = tape.slice_channels(gates, n, n);
        let o = tape.slice_channels(gates, 2 * n, n);
        let g = tape.slice_channels(gates, 3 * n, n);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let keep = tape.mul(f, state.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }
}

/// RMSprop state for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            square_avg: params.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    /// `s = decay * s + (1 - decay) * g^2; p -= lr * g / (sqrt(s) + eps)`.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, decay: f64, eps: f64) {
        for ((p, g), s) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.square_avg) {
            for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = decay * *sv + (1.0 - decay) * gv * gv;
                *pv -= lr * gv / (sv.sqrt() + eps);
            }
        }
    }
}
