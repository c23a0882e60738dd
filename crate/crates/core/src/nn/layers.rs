use candle_core::{DType, Tensor, D};
use rand::Rng;

use super::ops::lstm_recurrence;
use super::{Mode, ParamStore};
use crate::error::Result;

pub use super::ops::softmax_last;

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Weight and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[out_dim], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            shift: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Inverted dropout with masks drawn from the training generator.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self { p }
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let Some(rng) = mode.rng() else {
            return Ok(x.clone());
        };
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    /// `attn_dim` is the total width of the query/key/value projections.
    pub fn new(store: &mut ParamStore, name: &str, model_dim: usize, attn_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention width {attn_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), model_dim, attn_dim)?,
            k: Linear::new(store, &format!("{name}.k"), model_dim, attn_dim)?,
            v: Linear::new(store, &format!("{name}.v"), model_dim, attn_dim)?,
            out: Linear::new(store, &format!("{name}.out"), attn_dim, model_dim)?,
            heads,
            head_dim: attn_dim / heads,
        })
    }

    /// Self-attention over `(batch, time, model_dim)` without any positional term.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (self.head_dim as f64).sqrt()))?;
        let ctx = softmax_last(&scores)?.matmul(&v)?;
        let merged = ctx.transpose(1, 2)?.contiguous()?.reshape((b, t, self.heads * self.head_dim))?;
        self.out.forward(&merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
    dropout: Dropout,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim)?,
            dropout: Dropout::new(dropout),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm_attn.forward(x)?)?;
        let x = (x + self.dropout.forward(&a, mode)?)?;
        let f = self.ff.forward(&self.norm_ff.forward(&x)?)?;
        Ok((&x + self.dropout.forward(&f, mode)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        Ok(Self {
            h: Tensor::zeros((batch, hidden), dtype, device)?,
            c: Tensor::zeros((batch, hidden), dtype, device)?,
        })
    }
}

/// Single-layer unidirectional LSTM with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[4 * hidden, in_dim], bound)?,
            w_hh: store.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `(B, T, 2H)` sequence of `[h | c]` states.
    fn states_tensor(&self, xs: &Tensor, init: &LstmState) -> Result<Tensor> {
        let projected = xs.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let init = Tensor::cat(&[&init.h, &init.c], 1)?;
        lstm_recurrence(&projected, &self.w_hh, &init, self.hidden)
    }

    fn init_state(&self, xs: &Tensor, init: Option<LstmState>) -> Result<LstmState> {
        match init {
            Some(s) => Ok(s),
            None => LstmState::zeros(xs.dim(0)?, self.hidden, xs.dtype(), xs.device()),
        }
    }

    fn state_at(&self, states: &Tensor, t: usize) -> Result<LstmState> {
        let s = states.narrow(1, t, 1)?.squeeze(1)?;
        Ok(LstmState {
            h: s.narrow(1, 0, self.hidden)?,
            c: s.narrow(1, self.hidden, self.hidden)?,
        })
    }

    /// Runs over `(batch, time, in_dim)` and returns the state after every step.
    pub fn forward_states(&self, xs: &Tensor, init: Option<LstmState>) -> Result<Vec<LstmState>> {
        let t = xs.dim(1)?;
        if t == 0 {
            return Ok(Vec::new());
        }
        let init = self.init_state(xs, init)?;
        let states = self.states_tensor(xs, &init)?;
        (0..t).map(|i| self.state_at(&states, i)).collect()
    }

    /// Runs over `(batch, time, in_dim)`; returns all hidden states
    /// `(batch, time, hidden)` and the final state (the initial one if `time == 0`).
    pub fn forward(&self, xs: &Tensor, init: Option<LstmState>) -> Result<(Tensor, LstmState)> {
        let (b, t, _) = xs.dims3()?;
        let init = self.init_state(xs, init)?;
        if t == 0 {
            return Ok((Tensor::zeros((b, 0, self.hidden), xs.dtype(), xs.device())?, init));
        }
        let states = self.states_tensor(xs, &init)?;
        let last = self.state_at(&states, t - 1)?;
        Ok((states.narrow(2, 0, self.hidden)?, last))
    }

    /// Step-by-step composition of tensor ops; reference for the fused kernel.
    #[cfg(test)]
    pub(crate) fn forward_reference(&self, xs: &Tensor, init: LstmState) -> Result<Tensor> {
        let h_dim = self.hidden;
        let projected = xs.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let w_hh_t = self.w_hh.t()?;
        let mut state = init;
        let mut hs = Vec::new();
        for step in 0..xs.dim(1)? {
            let gates = (projected.narrow(1, step, 1)?.squeeze(1)? + state.h.matmul(&w_hh_t)?)?;
            let sig = candle_nn::ops::sigmoid(&gates)?;
            let i = sig.narrow(1, 0, h_dim)?;
            let f = sig.narrow(1, h_dim, h_dim)?;
            let o = sig.narrow(1, 3 * h_dim, h_dim)?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let c = ((f * &state.c)? + (i * g)?)?;
            let h = (o * c.tanh()?)?;
            hs.push(Tensor::cat(&[&h, &c], 1)?);
            state = LstmState { h, c };
        }
        Ok(Tensor::stack(&hs, 1)?)
    }
}

/// 1-D convolution over time on `(batch, time, channels)` with zero padding
/// that preserves the sequence length.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    proj: Linear,
    kernel: usize,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(crate::Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        Ok(Self {
            proj: Linear::new(store, name, in_dim * kernel, out_dim)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 1 {
            return self.proj.forward(x);
        }
        let t = x.dim(1)?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(1, half, half)?;
        let taps = (0..self.kernel)
            .map(|j| padded.narrow(1, j, t))
            .collect::<candle_core::Result<Vec<_>>>()?;
        self.proj.forward(&Tensor::cat(&taps, 2)?)
    }
}
