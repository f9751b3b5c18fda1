use super::layers::Builder;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{activation, add, add_channel_bias, bilinear_resize, conv2d, hadamard, hadamard_broadcast, Activation, Tensor};

/// Recurrent state of one cell.
#[derive(Clone)]
pub struct HiddenState<T: Real> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    /// Sequence the state belongs to.
    pub sequence_id: u64,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(n: usize, channels: usize, h: usize, w: usize, sequence_id: u64) -> Result<Self> {
        let shape = [n, channels, h, w];
        Ok(Self { h: Tensor::zeros(&shape)?, c: Tensor::zeros(&shape)?, sequence_id })
    }
}

/// Gate order used by the `[_; 4]` parameter arrays.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// Convolutional LSTM cell with peephole connections:
///
/// ```text
/// i = sigmoid(W_xi * x + W_hi * h + W_ci o C + b_i)
/// f = sigmoid(W_xf * x + W_hf * h + W_cf o C + b_f)
/// o = sigmoid(W_xo * x + W_ho * h + W_co o C + b_o)
/// C' = f o C + i o tanh(W_xc * x + W_hc * h + b_c)
/// H' = o o C'
/// ```
///
/// `*` is a same-padded convolution and `o` the elementwise product.
pub struct ConvLstmCell<T: Real> {
    /// Input kernels, gates i, f, o, c.
    pub w_x: [Tensor<T>; 4],
    /// Recurrent kernels, gates i, f, o, c.
    pub w_h: [Tensor<T>; 4],
    /// Peephole maps `1 x hidden x s x s`, gates i, f, o.
    pub w_c: [Tensor<T>; 3],
    pub bias: [Tensor<T>; 4],
    pub tanh_output: bool,
}

impl<T: Real> ConvLstmCell<T> {
    pub(crate) fn build(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        hidden: usize,
        kernel: usize,
        peephole_size: usize,
        tanh_output: bool,
    ) -> Result<Self> {
        let mut b = b.scope(name);
        let mut w_x = Vec::new();
        let mut w_h = Vec::new();
        let mut bias = Vec::new();
        for g in GATES {
            w_x.push(b.he(&format!("w_x{g}"), &[hidden, cin, kernel, kernel], cin * kernel * kernel)?);
            w_h.push(b.he(&format!("w_h{g}"), &[hidden, hidden, kernel, kernel], 4 * hidden * kernel * kernel)?);
            bias.push(b.full(&format!("b_{g}"), &[hidden], if g == "f" { 1.0 } else { 0.0 })?);
        }
        let mut w_c = Vec::new();
        for g in &GATES[..3] {
            w_c.push(b.full(&format!("w_c{g}"), &[1, hidden, peephole_size, peephole_size], 0.0)?);
        }
        let arr4 = |v: Vec<Tensor<T>>| -> [Tensor<T>; 4] { v.try_into().unwrap_or_else(|_| unreachable!()) };
        Ok(Self {
            w_x: arr4(w_x),
            w_h: arr4(w_h),
            w_c: w_c.try_into().unwrap_or_else(|_| unreachable!()),
            bias: arr4(bias),
            tanh_output,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.w_h[0].shape()[0]
    }

    fn peephole(&self, gate: usize, c: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (c.shape()[2], c.shape()[3]);
        let wc = &self.w_c[gate];
        let wc = if wc.shape()[2..] == [h, w] { wc.clone() } else { bilinear_resize(wc, h, w)? };
        hadamard_broadcast(c, &wc)
    }

    fn pre(&self, gate: usize, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let s = add(&conv2d(x, &self.w_x[gate], 1, 1)?, &conv2d(h, &self.w_h[gate], 1, 1)?)?;
        add_channel_bias(&s, &self.bias[gate])
    }

    /// Input, forget and output gate activations for one step.
    pub fn gates(&self, x: &Tensor<T>, state: &HiddenState<T>) -> Result<[Tensor<T>; 3]> {
        self.check(x, state)?;
        let sig = |t: Tensor<T>| activation(&t, Activation::Sigmoid);
        let i = sig(add(&self.pre(0, x, &state.h)?, &self.peephole(0, &state.c)?)?);
        let f = sig(add(&self.pre(1, x, &state.h)?, &self.peephole(1, &state.c)?)?);
        let o = sig(add(&self.pre(2, x, &state.h)?, &self.peephole(2, &state.c)?)?);
        Ok([i, f, o])
    }

    fn check(&self, x: &Tensor<T>, state: &HiddenState<T>) -> Result<()> {
        let hidden = self.hidden_channels();
        if x.rank() != 4 {
            return Err(Error::shape("convlstm_step", format!("input must be rank 4, got {:?}", x.shape())));
        }
        let expect = [x.shape()[0], hidden, x.shape()[2], x.shape()[3]];
        if state.h.shape() != expect || state.c.shape() != expect {
            return Err(Error::shape(
                "convlstm_step",
                format!("input {:?}, state {:?}/{:?}, hidden width {hidden}", x.shape(), state.h.shape(), state.c.shape()),
            ));
        }
        Ok(())
    }

    pub fn step(&self, x: &Tensor<T>, state: &HiddenState<T>) -> Result<(Tensor<T>, HiddenState<T>)> {
        let [i, f, o] = self.gates(x, state)?;
        let candidate = activation(&self.pre(3, x, &state.h)?, Activation::Tanh);
        let c = add(&hadamard(&f, &state.c)?, &hadamard(&i, &candidate)?)?;
        let out = if self.tanh_output { activation(&c, Activation::Tanh) } else { c.clone() };
        let h = hadamard(&o, &out)?;
        Ok((h.clone(), HiddenState { h, c, sequence_id: state.sequence_id }))
    }
}
