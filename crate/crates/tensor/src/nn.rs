//! Parameterised building blocks on top of the tape.

use std::f64::consts::PI;

use crate::error::{KernelError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.linear_weight(format!("{name}.weight"), fan_in, fan_out);
        let bias = bias.then(|| store.constant(format!("{name}.bias"), 1, fan_out, 0.0));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Linear layer whose weight and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.constant(format!("{name}.weight"), fan_in, fan_out, 0.0);
        let bias = Some(store.constant(format!("{name}.bias"), 1, fan_out, 0.0));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.constant(format!("{name}.gain"), 1, width, 1.0),
            bias: store.constant(format!("{name}.bias"), 1, width, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Two-layer perceptron: `Linear -> LayerNorm -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, true),
        }
    }

    /// Same as [`Mlp::new`] but the output layer starts at zero.
    pub fn zero_output(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Random Fourier feature embedding followed by an MLP.
///
/// For an input row `x` the MLP sees `[x, cos(2 pi x F), sin(2 pi x F), c]`
/// where `F` is a frozen Gaussian frequency matrix and `c` an optional block
/// of categorical attributes.
#[derive(Debug, Clone)]
pub struct FourierEmbed {
    pub input_dim: usize,
    pub n_freq: usize,
    pub cat_dim: usize,
    pub frequencies: ParamId,
    pub mlp: Mlp,
}

impl FourierEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        cat_dim: usize,
        n_freq: usize,
        freq_std: f64,
        hidden: usize,
        output: usize,
    ) -> Self {
        let frequencies = store.normal(format!("{name}.freq"), input_dim, n_freq, freq_std, false);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), input_dim + 2 * n_freq + cat_dim, hidden, output);
        Self {
            input_dim,
            n_freq,
            cat_dim,
            frequencies,
            mlp,
        }
    }

    /// Pre-MLP feature block `[x, cos, sin, cat]`.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var, cat: Option<Var>) -> Result<Var> {
        let (_, dim) = tape.shape(x);
        if dim != self.input_dim {
            return Err(KernelError::ShapeMismatch {
                op: "fourier_embed",
                detail: format!("expected {} input columns, got {dim}", self.input_dim),
            });
        }
        let f = tape.param(store, self.frequencies);
        let proj = tape.matmul(x, f)?;
        let proj = tape.scale(proj, 2.0 * PI);
        let c = tape.cos(proj);
        let s = tape.sin(proj);
        let mut parts = vec![x, c, s];
        match (cat, self.cat_dim) {
            (Some(cat), w) if tape.shape(cat).1 == w && w > 0 => parts.push(cat),
            (None, 0) => {}
            (cat, w) => {
                return Err(KernelError::ShapeMismatch {
                    op: "fourier_embed",
                    detail: format!("categorical block {:?} vs width {w}", cat.map(|c| tape.shape(c))),
                })
            }
        }
        tape.concat_cols(&parts)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cat: Option<Var>) -> Result<Var> {
        let feats = self.features(tape, store, x, cat)?;
        self.mlp.forward(tape, store, feats)
    }
}

/// Projection weights of one multi-head attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(KernelError::HeadCount { heads, width });
        }
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.q"), width, width, true),
            w_k: Linear::new(store, &format!("{name}.k"), width, width, true),
            w_v: Linear::new(store, &format!("{name}.v"), width, width, true),
            w_o: Linear::new(store, &format!("{name}.o"), width, width, true),
            heads,
            width,
        })
    }
}

/// Output of [`attention`]: the attended rows plus the indices of query rows
/// that had no unmasked key (those rows are exactly zero).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub fully_masked: Vec<usize>,
}

/// Dense multi-head scaled dot-product attention with a boolean mask
/// (`mask[i][j] == true` lets query `i` see key `j`).
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    keys: Var,
    values: Var,
    mask: &[Vec<bool>],
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let (nq, d) = tape.shape(query);
    let (nk, dk) = tape.shape(keys);
    if d != params.width || dk != d || tape.shape(values) != (nk, d) {
        return Err(KernelError::ShapeMismatch {
            op: "attention",
            detail: format!("query {nq}x{d}, keys {nk}x{dk}, values {:?}", tape.shape(values)),
        });
    }
    if mask.len() != nq || mask.iter().any(|r| r.len() != nk) {
        return Err(KernelError::ShapeMismatch {
            op: "attention",
            detail: format!("mask must be {nq}x{nk}"),
        });
    }
    let q = params.w_q.forward(tape, store, query)?;
    let k = params.w_k.forward(tape, store, keys)?;
    let v = params.w_v.forward(tape, store, values)?;
    let mut offsets = vec![0];
    let mut idx = Vec::new();
    for row in mask {
        idx.extend(row.iter().enumerate().filter(|(_, m)| **m).map(|(j, _)| j));
        offsets.push(idx.len());
    }
    let (attn, fully_masked) = if idx.is_empty() {
        (tape.zeros(nq, d), (0..nq).collect())
    } else {
        let ke = tape.gather(k, &idx)?;
        let ve = tape.gather(v, &idx)?;
        tape.edge_attention(q, ke, ve, &offsets, params.heads)?
    };
    let mut out = params.w_o.forward(tape, store, attn)?;
    if !fully_masked.is_empty() {
        let keep: Vec<f64> = (0..nq)
            .map(|i| if fully_masked.contains(&i) { 0.0 } else { 1.0 })
            .collect();
        let keep = tape.constant(nq, 1, keep);
        out = tape.mul_col(out, keep)?;
    }
    Ok(AttentionOutput {
        output: out,
        fully_masked,
    })
}
