//! Relative-pose attention block shared by every attention site.

use cooptraj_tensor::{AttentionParams, FourierEmbed, LayerNorm, Mlp, ParamStore, Result, Tape, Var};

use crate::config::EncoderConfig;
use crate::geometry::REL_FEATURES;
use crate::prepare::EdgeSet;

/// Pre-norm residual block: queries attend over per-edge keys/values
/// `LN(source) + embed(rel)`, followed by a feed-forward residual.
///
/// Queries without edges are returned unchanged (both residual branches are
/// masked), which is what makes isolated tokens and fully masked rows inert.
#[derive(Debug, Clone)]
pub struct RelAttnBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub rel: FourierEmbed,
    pub attn: AttentionParams,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl RelAttnBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d),
            rel: FourierEmbed::new(
                store,
                &format!("{name}.rel"),
                REL_FEATURES,
                0,
                cfg.n_freq,
                cfg.freq_std,
                cfg.hidden,
                d,
            ),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, cfg.heads)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, cfg.hidden, d),
        })
    }

    /// `source` holds the candidate rows; `edges.sources` index into it.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, source: Var, edges: &EdgeSet) -> Result<Var> {
        if edges.is_empty() {
            return Ok(x);
        }
        let rows = tape.gather(source, &edges.sources)?;
        self.forward_rows(tape, store, x, rows, edges)
    }

    /// Like [`forward`](Self::forward) but with the per-edge source rows
    /// already gathered (one row per edge, in edge order).
    pub fn forward_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var, rows: Var, edges: &EdgeSet) -> Result<Var> {
        if edges.is_empty() {
            return Ok(x);
        }
        let rel = tape.constant(edges.len(), REL_FEATURES, edges.rel.clone());
        let rel = self.rel.forward(tape, store, rel, None)?;
        let kv = self.norm_kv.forward(tape, store, rows)?;
        let kv = tape.add(kv, rel)?;
        let q = self.norm_q.forward(tape, store, x)?;
        let q = self.attn.w_q.forward(tape, store, q)?;
        let k = self.attn.w_k.forward(tape, store, kv)?;
        let v = self.attn.w_v.forward(tape, store, kv)?;
        let (a, empty) = tape.edge_attention(q, k, v, &edges.offsets, self.attn.heads)?;
        let mut a = self.attn.w_o.forward(tape, store, a)?;
        let keep = if empty.is_empty() {
            None
        } else {
            let mut m = vec![1.0; edges.n_queries];
            for i in empty {
                m[i] = 0.0;
            }
            Some(tape.constant(edges.n_queries, 1, m))
        };
        if let Some(k) = keep {
            a = tape.mul_col(a, k)?;
        }
        let h = tape.add(x, a)?;
        let f = self.norm_ff.forward(tape, store, h)?;
        let mut f = self.ff.forward(tape, store, f)?;
        if let Some(k) = keep {
            f = tape.mul_col(f, k)?;
        }
        tape.add(h, f)
    }
}
