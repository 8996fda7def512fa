//! Identity-aligned cross-view fusion.
//!
//! Tokens of every track are first augmented with a learned projection of the
//! DFT of their window sequence along time. Ego tokens then cross-attend the
//! matched other-view track within a small frame window; frames seen only by
//! the other view are filled in from its tokens.

use std::f64::consts::PI;

use cooptraj_tensor::{Linear, ParamStore, Result, Tape, Var};

use crate::blocks::RelAttnBlock;
use crate::config::{EncoderConfig, FusionConfig};
use crate::prepare::{PreparedFusion, PreparedView};

/// Real and imaginary DFT parts along the first axis of a row-major
/// `[t x d]` array: `X_k = sum_n x_n e^{-2 pi i k n / t}`.
pub fn dft(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let (c, s) = dft_matrices(t);
    let mut re = vec![0.0; t * d];
    let mut im = vec![0.0; t * d];
    for k in 0..t {
        for n in 0..t {
            let (ck, sk) = (c[k * t + n], s[k * t + n]);
            for j in 0..d {
                re[k * d + j] += ck * x[n * d + j];
                im[k * d + j] += sk * x[n * d + j];
            }
        }
    }
    (re, im)
}

/// `cos(2 pi k n / t)` and `-sin(2 pi k n / t)` as `[t x t]` matrices.
pub fn dft_matrices(t: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; t * t];
    let mut s = vec![0.0; t * t];
    for k in 0..t {
        for n in 0..t {
            // Reduce k*n mod t first so the angle stays exact for large t.
            let a = 2.0 * PI * ((k * n) % t) as f64 / t as f64;
            c[k * t + n] = a.cos();
            s[k * t + n] = -a.sin();
        }
    }
    (c, s)
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub spectral: Linear,
    pub cross: RelAttnBlock,
    pub fill: Linear,
    pub cfg: FusionConfig,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &FusionConfig) -> Result<Self> {
        let d = enc.d_model;
        Ok(Self {
            spectral: Linear::new(store, "fusion.spectral", 2 * d, d, true),
            cross: RelAttnBlock::new(store, "fusion.cross", enc)?,
            fill: Linear::new(store, "fusion.fill", d, d, true),
            cfg: cfg.clone(),
        })
    }

    /// DFT along time followed by the learned projection back to width `d`.
    pub fn time_dft(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, _) = tape.shape(x);
        let (c, s) = dft_matrices(t);
        let c = tape.constant(t, t, c);
        let s = tape.constant(t, t, s);
        let re = tape.matmul(c, x)?;
        let im = tape.matmul(s, x)?;
        let both = tape.concat_cols(&[re, im])?;
        self.spectral.forward(tape, store, both)
    }

    /// Add each track's projected spectrum to its present tokens.
    pub fn augment(&self, tape: &mut Tape, store: &ParamStore, x: Var, view: &PreparedView) -> Result<Var> {
        let (n, d) = tape.shape(x);
        let zero = tape.zeros(1, d);
        let padded = tape.concat_rows(&[x, zero])?;
        let mut spectra = Vec::new();
        let mut row_of_slot = vec![0; n];
        let mut offset = 0;
        for slots in &view.track_slots {
            let idx: Vec<usize> = slots.iter().map(|s| s.unwrap_or(n)).collect();
            let seq = tape.gather(padded, &idx)?;
            spectra.push(self.time_dft(tape, store, seq)?);
            for (k, s) in slots.iter().enumerate() {
                if let Some(s) = s {
                    row_of_slot[*s] = offset + k;
                }
            }
            offset += slots.len();
        }
        let all = tape.concat_rows(&spectra)?;
        let add = tape.gather(all, &row_of_slot)?;
        tape.add(x, add)
    }

    /// Fused grid `[fused slots x d]` in the order of `prep.slots`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ego: Var,
        other: Option<Var>,
        prep: &PreparedFusion,
        ego_view: &PreparedView,
        other_view: &PreparedView,
    ) -> Result<Var> {
        let Some(other) = other else {
            return Ok(ego);
        };
        let (ego, other) = if self.cfg.spectral {
            (
                self.augment(tape, store, ego, ego_view)?,
                self.augment(tape, store, other, other_view)?,
            )
        } else {
            (ego, other)
        };
        let fused = self.cross.forward(tape, store, ego, other, &prep.cross_edges)?;
        let fill: Vec<usize> = prep.slots.iter().filter_map(|s| s.fill_source).collect();
        if fill.is_empty() {
            return Ok(fused);
        }
        let seed = tape.gather(other, &fill)?;
        let proj = self.fill.forward(tape, store, seed)?;
        let filled = tape.add(seed, proj)?;
        tape.concat_rows(&[fused, filled])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; t * d];
        let mut im = vec![0.0; t * d];
        for k in 0..t {
            for j in 0..d {
                for n in 0..t {
                    let a = -2.0 * PI * (k as f64) * (n as f64) / t as f64;
                    re[k * d + j] += x[n * d + j] * a.cos();
                    im[k * d + j] += x[n * d + j] * a.sin();
                }
            }
        }
        (re, im)
    }

    #[test]
    fn dft_matches_naive_reference() {
        let x: Vec<f64> = (0..32).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.5).collect();
        let (re, im) = dft(&x, 8, 4);
        let (nre, nim) = naive(&x, 8, 4);
        for i in 0..32 {
            assert!((re[i] - nre[i]).abs() < 1e-10);
            assert!((im[i] - nim[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_channel_has_only_dc() {
        let x = vec![2.5; 6];
        let (re, im) = dft(&x, 6, 1);
        assert!((re[0] - 15.0).abs() < 1e-12);
        for k in 1..6 {
            assert!(re[k].abs() < 1e-12 && im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_is_identity() {
        let (re, im) = dft(&[1.0, -2.0, 3.0], 1, 3);
        assert_eq!(re, vec![1.0, -2.0, 3.0]);
        assert_eq!(im, vec![0.0; 3]);
    }
}
