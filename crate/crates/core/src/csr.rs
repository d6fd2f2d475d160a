//! Complete semantic reconstruction: attention-modulated single-head
//! encoder/decoder that completes masked description words from video
//! features, plus the masked-position reconstruction loss.

use rand::Rng;

use crate::corpus::{DescriptionPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{attention_track, ModelConfig, ModelVars};
use crate::numerics::{Graph, Var};

/// Affine map of the raw fused features into the reconstruction width:
/// [T, D] → [T, d_h].
pub fn embed_video_fc(g: &mut Graph, vars: &ModelVars, fused: Var) -> Result<Var> {
    g.linear(fused, vars.get("csr.fc.w"), vars.get("csr.fc.b"))
}

/// Reconstruction-branch attention over the shared embedding F_e; its
/// parameters are independent from the matching branch's stack.
pub fn csr_attention<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    f_e: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    attention_track(g, vars, "csr.att", f_e, cfg, train, rng)
}

/// Self-attention over the video with per-key attention-weight modulation
/// inside the softmax: foreground video features F_fg [T, d_h].
pub fn reconstruct_encode(g: &mut Graph, vars: &ModelVars, f_complete: Var, a_csr: Var) -> Result<Var> {
    let q = g.matmul(f_complete, vars.get("csr.enc.wq"))?;
    let k = g.matmul(f_complete, vars.get("csr.enc.wk"))?;
    let v = g.matmul(f_complete, vars.get("csr.enc.wv"))?;
    g.masked_scaled_attention(q, k, v, a_csr)
}

/// Lower-triangular averaging matrix: row i holds 1/(i+1) over columns 0..=i.
/// Realizes the causal prefix conditioning of the word distributions: the
/// query at position i sees the sentence embedding up to and including i,
/// never text-to-text attention.
pub fn causal_mean_matrix(m: usize) -> crate::numerics::Tensor {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        let w = 1.0 / (i as f64 + 1.0);
        for j in 0..=i {
            data[i * m + j] = w;
        }
    }
    crate::numerics::Tensor::new(vec![m, m], data).expect("square")
}

/// Cross-attention from the causally pooled sentence embedding to the
/// foreground features, same per-key modulation: H [m, d_h].
pub fn reconstruct_decode(
    g: &mut Graph,
    vars: &ModelVars,
    f_c: Var,
    f_fg: Var,
    a_csr: Var,
) -> Result<Var> {
    let q = g.matmul(f_c, vars.get("csr.dec.wq"))?;
    let k = g.matmul(f_fg, vars.get("csr.dec.wk"))?;
    let v = g.matmul(f_fg, vars.get("csr.dec.wv"))?;
    g.masked_scaled_attention(q, k, v, a_csr)
}

/// Per-position vocabulary distributions: softmax of an affine projection of
/// H, one row per sentence position.
pub fn word_distributions(g: &mut Graph, vars: &ModelVars, h: Var) -> Result<Var> {
    let logits = g.linear(h, vars.get("csr.out.w"), vars.get("csr.out.b"))?;
    g.softmax(logits)
}

/// Negative log-likelihood of the original tokens over every sentence
/// position. Unmasked positions are not a shortcut: the only path from text
/// to output is attention over video values, so they train the query
/// routing that masked completion rides on.
pub fn reconstruction_nll(g: &mut Graph, word_dists: Var, target_ids: &[usize]) -> Result<Var> {
    let at: Vec<(usize, usize)> = target_ids.iter().enumerate().map(|(p, &t)| (p, t)).collect();
    let picked = g.gather_at(word_dists, at)?;
    let logp = g.log_clamped(picked);
    let s = g.sum(logp);
    Ok(g.neg(s))
}

/// Negative log-likelihood of the original tokens, summed over the masked
/// positions only.
pub fn csr_loss(
    g: &mut Graph,
    word_dists: Var,
    target_ids: &[usize],
    mask_positions: &[usize],
) -> Result<Var> {
    if mask_positions.is_empty() {
        return Err(Error::arg("csr_loss", "empty mask set"));
    }
    let at: Vec<(usize, usize)> = mask_positions.iter().map(|&p| (p, target_ids[p])).collect();
    let picked = g.gather_at(word_dists, at)?;
    let logp = g.log_clamped(picked);
    let s = g.sum(logp);
    Ok(g.neg(s))
}

/// Everything the reconstruction branch produces for one video.
pub struct CsrForward {
    pub f_complete: Var,
    pub a_csr: Var,
    pub f_fg: Var,
    pub h: Var,
    pub word_dists: Var,
    /// Full-sentence reconstruction loss (the branch training objective).
    pub loss: Var,
    /// Masked-position share of the loss, for reporting.
    pub masked_loss: Var,
}

/// Sinusoidal position rows at the embedding scale, so masked positions stay
/// distinguishable after [MASK] substitution.
pub fn position_encoding(m: usize, dim: usize, amplitude: f64) -> crate::numerics::Tensor {
    let mut data = vec![0.0; m * dim];
    for i in 0..m {
        for j in 0..dim / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * j as f64 / dim as f64);
            data[i * dim + 2 * j] = amplitude * (i as f64 * rate).sin();
            data[i * dim + 2 * j + 1] = amplitude * (i as f64 * rate).cos();
        }
    }
    crate::numerics::Tensor::new(vec![m, dim], data).expect("pe shape")
}

/// Position term a few times the 0.1-sigma embedding rows: masked slots all
/// carry the same [MASK] embedding, so position must stay visible in their
/// queries.
const PE_AMPLITUDE: f64 = 0.3;

/// Full branch forward: fused features (raw), the shared embedding F_e (a
/// constant from the matching trunk), and the video's masked description.
pub fn forward<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    fused: Var,
    f_e: Var,
    pair: &DescriptionPair,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<CsrForward> {
    let f_complete = embed_video_fc(g, vars, fused)?;
    let a_csr = csr_attention(g, vars, f_e, cfg, train, rng)?;

    let masked = pair.masked_tokens();
    let (emb, _oov) = vocab.embed_tokens(&masked);
    let emb_in = g.input(&emb);
    let pe = g.input(&position_encoding(masked.len(), crate::corpus::EMBED_DIM, PE_AMPLITUDE));
    let emb_pos = g.add(emb_in, pe)?;
    let f_c = g.linear(emb_pos, vars.get("csr.text.proj.w"), vars.get("csr.text.proj.b"))?;

    let f_fg = reconstruct_encode(g, vars, f_complete, a_csr)?;
    let h = reconstruct_decode(g, vars, f_c, f_fg, a_csr)?;
    let word_dists = word_distributions(g, vars, h)?;
    let target_ids = vocab.ids(&pair.complete_text);
    let loss = reconstruction_nll(g, word_dists, &target_ids)?;
    let masked_loss = csr_loss(g, word_dists, &target_ids, &pair.mask_positions)?;
    Ok(CsrForward { f_complete, a_csr, f_fg, h, word_dists, loss, masked_loss })
}

/// Fraction of masked positions whose argmax prediction equals the original
/// token. Plain-value helper for diagnostics and tests.
pub fn masked_accuracy(dists: &crate::numerics::Tensor, target_ids: &[usize], mask_positions: &[usize]) -> f64 {
    if mask_positions.is_empty() {
        return 0.0;
    }
    let v = dists.cols();
    let hits = mask_positions
        .iter()
        .filter(|&&p| {
            let row = &dists.data()[p * v..(p + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            argmax == target_ids[p]
        })
        .count();
    hits as f64 / mask_positions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::{Adam, ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_and_store(seed: u64) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig { vocab_size: 30, max_key_len: 5, ..ModelConfig::desk(3, 6) };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, false, true, &mut ChaCha8Rng::seed_from_u64(seed));
        (cfg, store)
    }

    #[test]
    fn affine_embed_is_linear() {
        let (cfg, store) = cfg_and_store(1);
        let d = cfg.fused_dim();
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let vars = ModelVars::frozen(&mut g, &store);
            let xin = g.input(x);
            let y = embed_video_fc(&mut g, &vars, xin).unwrap();
            g.tensor(y)
        };
        let zero = run(&Tensor::zeros(vec![2, d]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(vec![2, d], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, d], 1.0, &mut rng);
        let mut ab = a.clone();
        ab.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        let (fa, fb, fab) = (run(&a), run(&b), run(&ab));
        // additivity of the linear part: f(a+b) - f(0) == (f(a)-f(0)) + (f(b)-f(0))
        for i in 0..fa.numel() {
            let lhs = fab.data()[i] - zero.data()[i];
            let rhs = (fa.data()[i] - zero.data()[i]) + (fb.data()[i] - zero.data()[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    /// Independent triple-loop reference for modulated attention.
    fn loop_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        a: &[f64],
    ) -> Vec<f64> {
        let (m, d) = (q.rows(), q.cols());
        let b = k.rows();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; m * v.cols()];
        for i in 0..m {
            let mut scores = vec![0.0; b];
            for j in 0..b {
                let mut s = 0.0;
                for p in 0..d {
                    s += q.get2(i, p) * k.get2(j, p);
                }
                scores[j] = s * scale * a[j];
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..b {
                let w = exps[j] / z;
                for p in 0..v.cols() {
                    out[i * v.cols() + p] += w * v.get2(j, p);
                }
            }
        }
        out
    }

    #[test]
    fn encoder_matches_triple_loop_oracle() {
        let (cfg, store) = cfg_and_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f_complete = Tensor::randn(vec![4, cfg.csr_dim], 1.0, &mut rng);
        let a: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, 0.05..0.95)).collect();

        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let fc = g.input(&f_complete);
        let av = g.input(&Tensor::new(vec![4, 1], a.clone()).unwrap());
        let f_fg = reconstruct_encode(&mut g, &vars, fc, av).unwrap();

        // oracle on the projected q/k/v
        let project = |w: &Tensor| {
            let mut gg = Graph::new();
            let x = gg.input(&f_complete);
            let wv = gg.input(w);
            let y = gg.matmul(x, wv).unwrap();
            gg.tensor(y)
        };
        let q = project(store.get("csr.enc.wq"));
        let k = project(store.get("csr.enc.wk"));
        let v = project(store.get("csr.enc.wv"));
        let want = loop_attention(&q, &k, &v, &a);
        for (got, want) in g.value(f_fg).iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn encoder_uniform_modulation_is_plain_self_attention_and_t1_is_value_row() {
        let (cfg, store) = cfg_and_store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // T=1: the softmax over a single key is 1, so F_fg == F_complete Wv
        let f1 = Tensor::randn(vec![1, cfg.csr_dim], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let fc = g.input(&f1);
        let a = g.input(&Tensor::new(vec![1, 1], vec![0.42]).unwrap());
        let f_fg = reconstruct_encode(&mut g, &vars, fc, a).unwrap();
        let wv = g.input(store.get("csr.enc.wv"));
        let want = g.matmul(fc, wv).unwrap();
        for (x, y) in g.value(f_fg).iter().zip(g.value(want)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_matches_loop_oracle_and_is_permutation_invariant() {
        let (cfg, store) = cfg_and_store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = 3;
        let t = 4;
        let f_c = Tensor::randn(vec![m, cfg.csr_dim], 1.0, &mut rng);
        let f_fg = Tensor::randn(vec![t, cfg.csr_dim], 1.0, &mut rng);
        let a: Vec<f64> = (0..t).map(|_| rand::Rng::gen_range(&mut rng, 0.05..0.95)).collect();

        let decode = |fg: &Tensor, aw: &[f64]| {
            let mut g = Graph::new();
            let vars = ModelVars::frozen(&mut g, &store);
            let fcv = g.input(&f_c);
            let fgv = g.input(fg);
            let av = g.input(&Tensor::new(vec![t, 1], aw.to_vec()).unwrap());
            let h = reconstruct_decode(&mut g, &vars, fcv, fgv, av).unwrap();
            g.tensor(h)
        };

        let h = decode(&f_fg, &a);

        // loop oracle
        let project = |x: &Tensor, w: &Tensor| {
            let mut gg = Graph::new();
            let xv = gg.input(x);
            let wv = gg.input(w);
            let y = gg.matmul(xv, wv).unwrap();
            gg.tensor(y)
        };
        let q = project(&f_c, store.get("csr.dec.wq"));
        let k = project(&f_fg, store.get("csr.dec.wk"));
        let v = project(&f_fg, store.get("csr.dec.wv"));
        let want = loop_attention(&q, &k, &v, &a);
        for (got, want) in h.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10);
        }

        // permuting the video segments together with the weights leaves H unchanged
        let perm = [2usize, 0, 3, 1];
        let mut fg_p = Tensor::zeros(vec![t, cfg.csr_dim]);
        let mut a_p = vec![0.0; t];
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..cfg.csr_dim {
                fg_p.set2(dst, c, f_fg.get2(src, c));
            }
            a_p[dst] = a[src];
        }
        let h_p = decode(&fg_p, &a_p);
        for (x, y) in h.data().iter().zip(h_p.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn decoder_single_query_single_key_is_value_row() {
        let (cfg, store) = cfg_and_store(5);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f_c = Tensor::randn(vec![1, cfg.csr_dim], 1.0, &mut rng);
        let f_fg = Tensor::randn(vec![1, cfg.csr_dim], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let fcv = g.input(&f_c);
        let fgv = g.input(&f_fg);
        let a = g.input(&Tensor::new(vec![1, 1], vec![0.9]).unwrap());
        let h = reconstruct_decode(&mut g, &vars, fcv, fgv, a).unwrap();
        let wv = g.input(store.get("csr.dec.wv"));
        let want = g.matmul(fgv, wv).unwrap();
        for (x, y) in g.value(h).iter().zip(g.value(want)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn word_distributions_are_valid_and_uniform_for_zero_weights() {
        let (cfg, mut store) = cfg_and_store(6);
        // zero the output projection: distributions must be uniform
        store.get_mut("csr.out.w").data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = Tensor::randn(vec![4, cfg.csr_dim], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let hv = g.input(&h);
        let dists = word_distributions(&mut g, &vars, hv).unwrap();
        let v = cfg.vocab_size;
        for row in 0..4 {
            let r = &g.value(dists)[row * v..(row + 1) * v];
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            for p in r {
                assert!((p - 1.0 / v as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csr_loss_floor_uniform_and_scalar_oracle() {
        let mut g = Graph::new();
        // probability 1 on every masked target → loss 0
        let mut dists = Tensor::zeros(vec![3, 4]);
        dists.set2(0, 2, 1.0);
        dists.set2(1, 1, 1.0);
        dists.set2(2, 3, 1.0);
        let dv = g.input(&dists);
        let loss = csr_loss(&mut g, dv, &[2, 1, 3], &[0, 2]).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);

        // uniform distributions, 2 masks, |vocab| = 100 → 2 ln 100
        let uniform = Tensor::full(vec![5, 100], 0.01);
        let dv = g.input(&uniform);
        let loss = csr_loss(&mut g, dv, &[7, 8, 9, 10, 11], &[1, 4]).unwrap();
        assert!((g.scalar_value(loss) - 2.0 * 100.0_f64.ln()).abs() < 1e-10);

        // arbitrary fixture matches scalar recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut fix = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        fix.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
        for r in 0..4 {
            let z: f64 = (0..6).map(|c| fix.get2(r, c)).sum();
            for c in 0..6 {
                let v = fix.get2(r, c) / z;
                fix.set2(r, c, v);
            }
        }
        let targets = [3usize, 0, 5, 2];
        let masks = [0usize, 2, 3];
        let dv = g.input(&fix);
        let loss = csr_loss(&mut g, dv, &targets, &masks).unwrap();
        let want: f64 = masks.iter().map(|&p| -fix.get2(p, targets[p]).max(1e-12).ln()).sum();
        assert!((g.scalar_value(loss) - want).abs() < 1e-12);

        // empty mask set is an argument error
        assert!(matches!(csr_loss(&mut g, dv, &targets, &[]), Err(Error::Argument { .. })));
    }

    #[test]
    fn single_video_overfit_reaches_fraction_of_initial_loss() {
        let table = crate::corpus::DescriptionTable::builtin(3);
        let generator = crate::corpus::DescriptionGenerator::stub(table.clone());
        let sentences: Vec<String> = (0..3)
            .flat_map(|c| {
                let e = table.entry(c).unwrap();
                [e.key.clone(), e.complete.clone()]
            })
            .collect();
        let vocab = crate::corpus::Vocabulary::build(sentences.iter().map(String::as_str), 5);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            max_key_len: 8,
            ..ModelConfig::desk(3, 6)
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, false, true, &mut ChaCha8Rng::seed_from_u64(20));
        let names: Vec<String> = store.names().filter(|n| n.starts_with("csr.")).cloned().collect();
        let mut adam = Adam::new(5e-3, 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = 16;
        let fused = Tensor::randn(vec![t, cfg.fused_dim()], 1.0, &mut rng);
        let f_e_fixed = Tensor::randn(vec![t, cfg.fused_dim()], 1.0, &mut rng);

        let video = VideoFixture::build(&mut rng, t, cfg.fused_dim() / 2);
        let pair = DescriptionPair::build(&generator, &video.sample, 3).unwrap();

        let mut losses = Vec::new();
        for step in 0..=50 {
            store.zero_grads();
            let mut g = Graph::new();
            let vars = ModelVars::trainable(&mut g, &store, |n| n.starts_with("csr."));
            let fv = g.input(&fused);
            let fe = g.input(&f_e_fixed);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(900 + step);
            let fwd = forward(&mut g, &vars, fv, fe, &pair, &vocab, &cfg, false, &mut drop_rng).unwrap();
            losses.push(g.scalar_value(fwd.loss));
            g.backward(fwd.loss).unwrap();
            vars.export_grads(&g, &mut store);
            adam.step(&mut store, &names).unwrap();
        }
        // non-increasing at decade granularity (Adam is not per-step
        // monotone through the routing-escape phase) and never above start
        let decades: Vec<f64> = losses.iter().step_by(10).cloned().collect();
        for w in decades.windows(2) {
            assert!(w[1] <= w[0], "decade loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(losses.iter().all(|&v| v <= losses[0] + 1e-9));
        let (f, l) = (losses[0], losses[50]);
        assert!(l < 0.2 * f, "overfit failed: {f} -> {l}");
        assert!(l >= 0.0);
    }

    struct VideoFixture {
        sample: crate::corpus::VideoSample,
    }

    impl VideoFixture {
        fn build(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Self {
            let sample = crate::corpus::VideoSample {
                id: "fixture".into(),
                rgb: Tensor::randn(vec![t, dim], 1.0, rng),
                flow: Tensor::randn(vec![t, dim], 1.0, rng),
                label: vec![1, 0, 0],
                gt_intervals: vec![crate::corpus::GtInterval { class: 0, start_seg: 2.0, end_seg: 8.0 }],
                seconds_per_segment: 1.0,
            };
            VideoFixture { sample }
        }
    }
}
