//! Finite-difference and dual-implementation checks for the kernel.

use cooptraj_tensor::{attention, AttentionParams, FourierEmbed, ParamStore, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Composite graph touching most ops; returns the scalar loss.
fn composite(t: &mut Tape, x: Var, w: Var) -> Var {
    let y = t.matmul(x, w).unwrap(); // 3x4
    let n = t.layer_norm(y, 1e-5);
    let a = t.tanh(n);
    let b = t.softplus(y);
    let c = t.mul(a, b).unwrap();
    let s = t.softmax(c);
    let ls = t.log_softmax(y);
    let tr = t.transpose(ls);
    let g = t.gather(tr, &[0, 2, 2]).unwrap();
    let cs = t.cos(g);
    let sn = t.sin(y);
    let cat = t.concat_cols(&[s, sn]).unwrap();
    let sc = t.slice_cols(cat, 2, 4).unwrap();
    let sr = t.sum_rows(sc);
    let sc2 = t.sum_cols(cs);
    let e = t.exp(sc2);
    let l1 = t.sum(sr);
    let l2 = t.mean(e);
    let r = t.relu(y);
    let ab = t.abs(r);
    let l3 = t.sum(ab);
    let sq = t.add_scalar(l3, 1.0);
    let lg = t.ln(sq);
    let p = t.add(l1, l2).unwrap();
    t.add(p, lg).unwrap()
}

#[test]
fn composite_graph_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |xv: &[f64], wv: &[f64]| {
        let mut t = Tape::new();
        let x = t.leaf(3, 2, xv.to_vec(), true);
        let w = t.leaf(2, 4, wv.to_vec(), true);
        let l = composite(&mut t, x, w);
        (t.scalar(l), t, x, w, l)
    };
    let (_, t, x, w, l) = eval(&xv, &wv);
    let g = t.backward(l).unwrap();
    let gx = g.get(x).unwrap().to_vec();
    let gw = g.get(w).unwrap().to_vec();
    for i in 0..xv.len() {
        let mut p = xv.clone();
        let mut m = xv.clone();
        p[i] += H;
        m[i] -= H;
        let fd = (eval(&p, &wv).0 - eval(&m, &wv).0) / (2.0 * H);
        assert!(rel_err(fd, gx[i]) < 1e-4, "x[{i}]: fd {fd} vs {}", gx[i]);
    }
    for i in 0..wv.len() {
        let mut p = wv.clone();
        let mut m = wv.clone();
        p[i] += H;
        m[i] -= H;
        let fd = (eval(&xv, &p).0 - eval(&xv, &m).0) / (2.0 * H);
        assert!(rel_err(fd, gw[i]) < 1e-4, "w[{i}]: fd {fd} vs {}", gw[i]);
    }
}

fn edge_attention_loss(qv: &[f64], kv: &[f64], vv: &[f64], offsets: &[usize], heads: usize) -> (Tape, Var, Var, Var, Var) {
    let d = 4;
    let nq = offsets.len() - 1;
    let ne = *offsets.last().unwrap();
    let mut t = Tape::new();
    let q = t.leaf(nq, d, qv.to_vec(), true);
    let k = t.leaf(ne, d, kv.to_vec(), true);
    let v = t.leaf(ne, d, vv.to_vec(), true);
    let (o, _) = t.edge_attention(q, k, v, offsets, heads).unwrap();
    let w = t.constant(nq, d, (0..nq * d).map(|i| (i as f64 * 0.37).sin()).collect());
    let p = t.mul(o, w).unwrap();
    let l = t.sum(p);
    (t, q, k, v, l)
}

#[test]
fn edge_attention_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let offsets = [0usize, 3, 3, 5];
    let ne = 5;
    let qv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kv: Vec<f64> = (0..ne * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vv: Vec<f64> = (0..ne * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (t, q, k, v, l) = edge_attention_loss(&qv, &kv, &vv, &offsets, 2);
    let g = t.backward(l).unwrap();
    let inputs = [(qv.clone(), q, 0), (kv.clone(), k, 1), (vv.clone(), v, 2)];
    for (base, var, which) in inputs {
        let analytic = g.get(var).unwrap().to_vec();
        for i in 0..base.len() {
            let f = |delta: f64| {
                let mut a = [qv.clone(), kv.clone(), vv.clone()];
                a[which][i] += delta;
                let (t, _, _, _, l) = edge_attention_loss(&a[0], &a[1], &a[2], &offsets, 2);
                t.scalar(l)
            };
            let fd = (f(H) - f(-H)) / (2.0 * H);
            assert!(
                (fd - analytic[i]).abs() < 1e-7 || rel_err(fd, analytic[i]) < 1e-4,
                "input {which}[{i}]: fd {fd} vs {}",
                analytic[i]
            );
        }
    }
}

/// Straight-line scalar reference for dense masked multi-head attention.
fn reference_attention(
    store: &ParamStore,
    p: &AttentionParams,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    mask: &[Vec<bool>],
) -> Vec<Vec<f64>> {
    let lin = |lin: &cooptraj_tensor::Linear, x: &[f64]| -> Vec<f64> {
        let w = store.get(lin.weight).value.data();
        let b = store.get(lin.bias.unwrap()).value.data();
        (0..lin.fan_out)
            .map(|j| b[j] + (0..lin.fan_in).map(|i| x[i] * w[i * lin.fan_out + j]).sum::<f64>())
            .collect()
    };
    let d = p.width;
    let dh = d / p.heads;
    q.iter()
        .zip(mask)
        .map(|(qi, mrow)| {
            if !mrow.iter().any(|m| *m) {
                return vec![0.0; d];
            }
            let qp = lin(&p.w_q, qi);
            let mut heads_out = vec![0.0; d];
            for h in 0..p.heads {
                let mut scores = Vec::new();
                for (j, kj) in k.iter().enumerate() {
                    if !mrow[j] {
                        scores.push(f64::NEG_INFINITY);
                        continue;
                    }
                    let kp = lin(&p.w_k, kj);
                    let s: f64 = (h * dh..(h + 1) * dh).map(|c| qp[c] * kp[c]).sum();
                    scores.push(s / (dh as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    let vp = lin(&p.w_v, vj);
                    for c in h * dh..(h + 1) * dh {
                        heads_out[c] += exps[j] / z * vp[c];
                    }
                }
            }
            lin(&p.w_o, &heads_out)
        })
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

#[test]
fn dense_attention_matches_scalar_reference() {
    let mut store = ParamStore::new(21);
    let p = AttentionParams::new(&mut store, "att", 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let q = rows(3);
    let k = rows(4);
    let v = rows(4);
    let mask = vec![
        vec![true, false, true, true],
        vec![false, false, false, false],
        vec![true, true, true, true],
    ];
    let mut t = Tape::new();
    let qv = t.constant(3, 4, flat(&q));
    let kv = t.constant(4, 4, flat(&k));
    let vv = t.constant(4, 4, flat(&v));
    let out = attention(&mut t, &store, qv, kv, vv, &mask, &p).unwrap();
    assert_eq!(out.fully_masked, vec![1]);
    let expect = flat(&reference_attention(&store, &p, &q, &k, &v, &mask));
    for (a, b) in t.value(out.output).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn single_key_attention_is_projected_value() {
    let mut store = ParamStore::new(2);
    let p = AttentionParams::new(&mut store, "att", 4, 4).unwrap();
    let mut t = Tape::new();
    let q = t.constant(1, 4, vec![0.3, -0.2, 0.9, 1.0]);
    let k = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    let v = t.constant(1, 4, vec![-1.0, 0.5, 0.25, 2.0]);
    let out = attention(&mut t, &store, q, k, v, &[vec![true]], &p).unwrap();
    let vp = p.w_v.forward(&mut t, &store, v).unwrap();
    let expect = p.w_o.forward(&mut t, &store, vp).unwrap();
    for (a, b) in t.value(out.output).iter().zip(t.value(expect)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_keys_get_zero_weight() {
    let mut t = Tape::new();
    let q = t.constant(1, 2, vec![1.0, 1.0]);
    let k = t.constant(2, 2, vec![5.0, 5.0, -5.0, 1.0]);
    let v = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    // Only the second key is unmasked: gathered edge list of one entry.
    let k1 = t.gather(k, &[1]).unwrap();
    let v1 = t.gather(v, &[1]).unwrap();
    let (o, _) = t.edge_attention(q, k1, v1, &[0, 1], 1).unwrap();
    assert_eq!(t.value(o), &[0.0, 1.0]);
    assert_eq!(t.attention_weights(o).unwrap(), &[1.0]);
}

#[test]
fn fourier_embed_zero_input_and_determinism() {
    let mut store = ParamStore::new(4);
    let fe = FourierEmbed::new(&mut store, "fe", 3, 0, 5, 1.0, 8, 6);
    let mut t = Tape::new();
    let x = t.constant(1, 3, vec![0.0; 3]);
    let feats = fe.features(&mut t, &store, x, None).unwrap();
    let fv = t.value(feats);
    assert_eq!(&fv[3..8], &[1.0; 5]);
    assert_eq!(&fv[8..13], &[0.0; 5]);

    let mut store2 = ParamStore::new(4);
    let fe2 = FourierEmbed::new(&mut store2, "fe", 3, 0, 5, 1.0, 8, 6);
    let run = |store: &ParamStore, fe: &FourierEmbed| {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![0.4, -1.2, 3.0]);
        let y = fe.forward(&mut t, store, x, None).unwrap();
        t.value(y).to_vec()
    };
    assert_eq!(run(&store, &fe), run(&store2, &fe2));
    let mut t = Tape::new();
    let bad = t.constant(1, 2, vec![0.0; 2]);
    assert!(fe.forward(&mut t, &store, bad, None).is_err());
}

#[test]
fn fourier_embed_input_slope_matches_gradient() {
    let mut store = ParamStore::new(8);
    let fe = FourierEmbed::new(&mut store, "fe", 2, 1, 4, 0.5, 8, 3);
    let x0 = vec![0.7, -0.3];
    let eval = |x: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(1, 2, x.to_vec(), true);
        let c = t.constant(1, 1, vec![1.0]);
        let y = fe.forward(&mut t, &store, xv, Some(c)).unwrap();
        let l = t.sum(y);
        (t, xv, l)
    };
    let (t, xv, l) = eval(&x0);
    let g = t.backward(l).unwrap().get(xv).unwrap().to_vec();
    for i in 0..2 {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p[i] += H;
        m[i] -= H;
        let (tp, _, lp) = eval(&p);
        let (tm, _, lm) = eval(&m);
        let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * H);
        assert!(rel_err(fd, g[i]) < 1e-4, "coord {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut store = ParamStore::new(0);
    let id = store.constant("w", 1, 2, 1.5);
    for _ in 0..2 {
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let l = t.sum(w);
        t.backward(l).unwrap().accumulate_into(&mut store);
    }
    assert_eq!(store.get(id).grad, vec![2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_a_distribution(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(3, 4, vals);
        let s = t.softmax(x);
        for row in t.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn matmul_gradient_matches_differences(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
        let eval = |a: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(2, 3, a.to_vec(), true);
            let y = t.constant(3, 2, b.clone());
            let m = t.matmul(x, y).unwrap();
            let s = t.square(m);
            let l = t.sum(s);
            (t, x, l)
        };
        let (t, x, l) = eval(&a);
        let g = t.backward(l).unwrap().get(x).unwrap().to_vec();
        for i in 0..6 {
            let mut p = a.clone();
            let mut m = a.clone();
            p[i] += H;
            m[i] -= H;
            let (tp, _, lp) = eval(&p);
            let (tm, _, lm) = eval(&m);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * H);
            prop_assert!((fd - g[i]).abs() < 1e-7 || rel_err(fd, g[i]) < 1e-4);
        }
    }
}
