//! Two-stage decoding: a recurrent anchor-free proposal head, then
//! anchor-based refinement with a mode-probability head; plus the
//! winner-takes-all training loss.

use cooptraj_tensor::{Linear, Mlp, ParamId, ParamStore, Result, Tape, Var};

use crate::blocks::RelAttnBlock;
use crate::config::{DecoderConfig, EncoderConfig, Regression};
use crate::encoder::{MapEncoder, MapFeatureCache};
use crate::prepare::{PreparedDecoder, PreparedMap, DIST_SCALE};

/// Lower bound added to every predicted scale.
pub const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub queries: ParamId,
    pub am_a: RelAttnBlock,
    pub mm_a: RelAttnBlock,
    pub tm_a: RelAttnBlock,
    pub loc_head: Linear,
    pub scale_head: Linear,
    pub feedback: Linear,
    pub anchor_embed: Mlp,
    pub am_a2: RelAttnBlock,
    pub mm_a2: RelAttnBlock,
    pub tm_a2: RelAttnBlock,
    pub offset_head: Mlp,
    pub scale_head2: Linear,
    pub prob_head: Mlp,
}

/// Hypothesis rows are target-major: row `n * K + k` is mode `k` of target
/// `n`. Locations/scales are `[N*K x T']` per coordinate, in each target's
/// local frame.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    pub x: Var,
    pub y: Var,
    pub bx: Var,
    pub by: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub proposal: StageOutput,
    pub refined: StageOutput,
    /// `[N x K]` unnormalised mode scores.
    pub logits: Var,
    pub n_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub propose: f64,
    pub refine: f64,
    pub cls: f64,
    pub total: f64,
    pub lambda: f64,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DecoderConfig) -> cooptraj_tensor::Result<Self> {
        let d = enc.d_model;
        let h = enc.hidden;
        let f = cfg.horizon;
        let chunk = f / cfg.chunks;
        Ok(Self {
            cfg: cfg.clone(),
            queries: store.normal("dec.queries", cfg.modes, d, 1.0, true),
            am_a: RelAttnBlock::new(store, "dec.am_a", enc)?,
            mm_a: RelAttnBlock::new(store, "dec.mm_a", enc)?,
            tm_a: RelAttnBlock::new(store, "dec.tm_a", enc)?,
            loc_head: Linear::new(store, "dec.loc", d, 2 * chunk, true),
            scale_head: Linear::new(store, "dec.scale", d, 2 * chunk, true),
            feedback: Linear::new(store, "dec.feedback", 2 * chunk, d, true),
            anchor_embed: Mlp::new(store, "dec.anchor", 2 * f, h, d),
            am_a2: RelAttnBlock::new(store, "dec.am_a2", enc)?,
            mm_a2: RelAttnBlock::new(store, "dec.mm_a2", enc)?,
            tm_a2: RelAttnBlock::new(store, "dec.tm_a2", enc)?,
            offset_head: Mlp::zero_output(store, "dec.offset", d, h, 2 * f),
            scale_head2: Linear::new(store, "dec.scale2", d, 2 * f, true),
            prob_head: Mlp::new(store, "dec.prob", d, h, 1),
        })
    }

    fn positive(tape: &mut Tape, raw: Var) -> Var {
        let s = tape.softplus(raw);
        tape.add_scalar(s, MIN_SCALE)
    }

    /// Run both stages. `fused` is the fused token grid; `None` when there is
    /// no target.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: Var,
        prep: &PreparedDecoder,
        map: &PreparedMap,
        map_encoder: &MapEncoder,
        cache: &mut MapFeatureCache,
    ) -> Result<Option<DecoderOutput>> {
        let n = prep.targets.len();
        if n == 0 {
            return Ok(None);
        }
        let k = self.cfg.modes;
        let f = self.cfg.horizon;
        let chunk = f / self.cfg.chunks;

        let anchors: Vec<usize> = prep.targets.iter().flat_map(|t| std::iter::repeat(t.anchor_slot).take(k)).collect();
        let cur = tape.gather(fused, &anchors)?;
        let qp = tape.param(store, self.queries);
        let mode_idx: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
        let qm = tape.gather(qp, &mode_idx)?;
        let mut q = tape.add(cur, qm)?;

        q = self.am_a.forward(tape, store, q, fused, &prep.am_edges)?;
        let map_rows = if prep.mm_edges.is_empty() {
            None
        } else {
            Some(map_encoder.lookup(tape, store, map, cache, &prep.mm_edges, |row| row / k)?)
        };
        if let Some(rows) = map_rows {
            q = self.mm_a.forward_rows(tape, store, q, rows, &prep.mm_edges)?;
        }
        q = self.tm_a.forward(tape, store, q, q, &prep.tm_edges)?;

        // Recurrent proposal: each chunk feeds back into the query state.
        let mut h = q;
        let (mut dx, mut dy, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.cfg.chunks {
            let loc = self.loc_head.forward(tape, store, h)?;
            let sc = self.scale_head.forward(tape, store, h)?;
            dx.push(tape.slice_cols(loc, 0, chunk)?);
            dy.push(tape.slice_cols(loc, chunk, chunk)?);
            sx.push(tape.slice_cols(sc, 0, chunk)?);
            sy.push(tape.slice_cols(sc, chunk, chunk)?);
            let fb = self.feedback.forward(tape, store, loc)?;
            h = tape.add(h, fb)?;
        }
        let mut upper = vec![0.0; f * f];
        for s in 0..f {
            for t in s..f {
                upper[s * f + t] = 1.0;
            }
        }
        let upper = tape.constant(f, f, upper);
        let dx = tape.concat_cols(&dx)?;
        let dy = tape.concat_cols(&dy)?;
        let px = tape.matmul(dx, upper)?;
        let py = tape.matmul(dy, upper)?;
        let sx = tape.concat_cols(&sx)?;
        let sy = tape.concat_cols(&sy)?;
        let proposal = StageOutput {
            x: px,
            y: py,
            bx: Self::positive(tape, sx),
            by: Self::positive(tape, sy),
        };

        // Refinement around the anchors, optionally cut from the graph.
        let (ax, ay) = if self.cfg.detach_anchors {
            (tape.detach(px), tape.detach(py))
        } else {
            (px, py)
        };
        let a_in = tape.concat_cols(&[ax, ay])?;
        let a_in = tape.scale(a_in, 1.0 / DIST_SCALE);
        let emb = self.anchor_embed.forward(tape, store, a_in)?;
        let mut q2 = tape.add(h, emb)?;
        q2 = self.am_a2.forward(tape, store, q2, fused, &prep.am_edges)?;
        if let Some(rows) = map_rows {
            q2 = self.mm_a2.forward_rows(tape, store, q2, rows, &prep.mm_edges)?;
        }
        q2 = self.tm_a2.forward(tape, store, q2, q2, &prep.tm_edges)?;
        let off = self.offset_head.forward(tape, store, q2)?;
        let ox = tape.slice_cols(off, 0, f)?;
        let oy = tape.slice_cols(off, f, f)?;
        let rs = self.scale_head2.forward(tape, store, q2)?;
        let rsx = tape.slice_cols(rs, 0, f)?;
        let rsy = tape.slice_cols(rs, f, f)?;
        let refined = StageOutput {
            x: tape.add(ax, ox)?,
            y: tape.add(ay, oy)?,
            bx: Self::positive(tape, rsx),
            by: Self::positive(tape, rsy),
        };

        let score = self.prob_head.forward(tape, store, q2)?;
        let score = tape.transpose(score);
        let rows: Vec<Var> = (0..n)
            .map(|i| tape.slice_cols(score, i * k, k))
            .collect::<Result<_>>()?;
        let logits = tape.concat_rows(&rows)?;
        Ok(Some(DecoderOutput {
            proposal,
            refined,
            logits,
            n_targets: n,
        }))
    }
}

/// Mean over valid steps of the pointwise distance between one hypothesis row
/// and the truth; `None` without valid steps.
pub fn row_ade(x: &[f64], y: &[f64], truth: &[Option<[f64; 2]>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (t, g) in truth.iter().enumerate() {
        if let Some(g) = g {
            sum += (x[t] - g[0]).hypot(y[t] - g[1]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Winner index per target by refined ADE; `None` for targets without any
/// valid future step.
pub fn winners(tape: &Tape, out: &DecoderOutput, prep: &PreparedDecoder, k: usize) -> Vec<Option<usize>> {
    let f = tape.shape(out.refined.x).1;
    let xs = tape.value(out.refined.x);
    let ys = tape.value(out.refined.y);
    prep.targets
        .iter()
        .enumerate()
        .map(|(n, t)| {
            let truth = &t.truth[..f.min(t.truth.len())];
            (0..k)
                .filter_map(|m| {
                    let r = (n * k + m) * f;
                    row_ade(&xs[r..r + f], &ys[r..r + f], truth).map(|a| (m, a))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(m, _)| m)
        })
        .collect()
}

/// Winner-takes-all loss. Returns the scalar to differentiate plus its
/// breakdown, or `None` when no target has a valid future step.
pub fn decoder_loss(
    tape: &mut Tape,
    out: &DecoderOutput,
    prep: &PreparedDecoder,
    cfg: &DecoderConfig,
) -> Result<Option<(Var, LossBreakdown)>> {
    let k = cfg.modes;
    let f = cfg.horizon;
    let win = winners(tape, out, prep, k);
    let valid: Vec<(usize, usize)> = win.iter().enumerate().filter_map(|(n, w)| w.map(|w| (n, w))).collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let nv = valid.len();
    let rows: Vec<usize> = valid.iter().map(|&(n, w)| n * k + w).collect();
    let mut gx = vec![0.0; nv * f];
    let mut gy = vec![0.0; nv * f];
    let mut mask = vec![0.0; nv * f];
    for (i, &(n, _)) in valid.iter().enumerate() {
        for (t, g) in prep.targets[n].truth.iter().take(f).enumerate() {
            if let Some(g) = g {
                gx[i * f + t] = g[0];
                gy[i * f + t] = g[1];
                mask[i * f + t] = 1.0;
            }
        }
    }
    let gx = tape.constant(nv, f, gx);
    let gy = tape.constant(nv, f, gy);
    let mask = tape.constant(nv, f, mask);

    let stage_loss = |tape: &mut Tape, s: &StageOutput| -> Result<Var> {
        let mut terms = Vec::new();
        for (mu, b, g) in [(s.x, s.bx, gx), (s.y, s.by, gy)] {
            let mu = tape.gather(mu, &rows)?;
            let r = tape.sub(g, mu)?;
            let term = match cfg.regression {
                Regression::Laplace => {
                    let b = tape.gather(b, &rows)?;
                    let lb = tape.ln(b);
                    let inv = tape.scale(lb, -1.0);
                    let inv = tape.exp(inv);
                    let a = tape.abs(r);
                    let a = tape.mul(a, inv)?;
                    let norm = tape.add_scalar(lb, std::f64::consts::LN_2);
                    tape.add(norm, a)?
                }
                Regression::L2 => tape.square(r),
            };
            let term = tape.mul(term, mask)?;
            terms.push(tape.sum(term));
        }
        let total = tape.add(terms[0], terms[1])?;
        Ok(tape.scale(total, 1.0 / nv as f64))
    };
    let propose = stage_loss(tape, &out.proposal)?;
    let refine = stage_loss(tape, &out.refined)?;

    let n_all = out.n_targets;
    let keep: Vec<usize> = valid.iter().map(|&(n, _)| n).collect();
    let logits = if keep.len() == n_all {
        out.logits
    } else {
        tape.gather(out.logits, &keep)?
    };
    let ls = tape.log_softmax(logits);
    let mut onehot = vec![0.0; nv * k];
    for (i, &(_, w)) in valid.iter().enumerate() {
        onehot[i * k + w] = 1.0;
    }
    let onehot = tape.constant(nv, k, onehot);
    let picked = tape.mul(ls, onehot)?;
    let picked = tape.sum(picked);
    let cls = tape.scale(picked, -1.0 / nv as f64);

    let reg = tape.add(propose, refine)?;
    let wcls = tape.scale(cls, cfg.lambda);
    let total = tape.add(reg, wcls)?;
    let (p, r, c) = (tape.scalar(propose), tape.scalar(refine), tape.scalar(cls));
    Ok(Some((
        total,
        LossBreakdown {
            propose: p,
            refine: r,
            cls: c,
            total: tape.scalar(total),
            lambda: cfg.lambda,
        },
    )))
}
