//! Key semantic matching: text-derived class queries matched against video
//! segment embeddings, with attention-based background suppression and the
//! top-k MIL matching loss.

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelVars};
use crate::numerics::{Graph, Tensor, Var};

/// Per-class key-description embeddings, precomputed once per run.
#[derive(Clone, Debug)]
pub struct QueryTexts {
    /// One [len, 300] embedding block per foreground class.
    pub per_class: Vec<Tensor>,
    pub max_len: usize,
}

impl QueryTexts {
    pub fn new(key_texts: &[Vec<String>], vocab: &Vocabulary) -> Self {
        let per_class: Vec<Tensor> =
            key_texts.iter().map(|toks| vocab.embed_tokens(toks).0).collect();
        let max_len = per_class.iter().map(|t| t.rows()).max().unwrap_or(1);
        QueryTexts { per_class, max_len }
    }
}

/// Channel-concatenate RGB and flow features: [T, D] ‖ [T, D] → [T, 2D].
pub fn fuse_features(g: &mut Graph, rgb: Var, flow: Var) -> Result<Var> {
    let (tr, tf) = (g.shape(rgb)[0], g.shape(flow)[0]);
    if tr != tf {
        return Err(Error::dim("fuse_features", format!("rgb T={tr} vs flow T={tf}")));
    }
    g.concat(&[rgb, flow], 1)
}

/// Fused features for a video as a plain tensor (for precomputation).
pub fn fuse_sample(rgb: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.input(rgb);
    let f = g.input(flow);
    let fused = fuse_features(&mut g, r, f)?;
    Ok(g.tensor(fused))
}

/// Token sequences for every class query: [START], the learnable context,
/// then the projected key text, zero-padded to a common length. The extra
/// class uses the learnable background key rows (initialized to zero).
pub fn build_query_tokens(
    g: &mut Graph,
    vars: &ModelVars,
    texts: &QueryTexts,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let d = cfg.fused_dim();
    let proj = vars.get("ksm.text.proj.w");
    let start = vars.get("ksm.text.start");
    let context = vars.get("ksm.text.context");
    let key_len = texts.max_len;
    let mut out = Vec::with_capacity(texts.per_class.len() + 1);
    for emb in &texts.per_class {
        let e = g.input(emb);
        let projected = g.matmul(e, proj)?;
        let mut parts = vec![start, context, projected];
        if emb.rows() < key_len {
            let pad = g.input_owned(vec![key_len - emb.rows(), d], vec![0.0; (key_len - emb.rows()) * d]);
            parts.push(pad);
        }
        out.push(g.concat(&parts, 0)?);
    }
    // background class: learnable key embedding, zero at initialization
    let bg = vars.get("ksm.text.bgkey");
    let bg_proj = g.matmul(bg, proj)?;
    let bg_rows = g.shape(bg_proj)[0];
    let mut parts = vec![start, context, bg_proj];
    if bg_rows < key_len {
        let pad = g.input_owned(vec![key_len - bg_rows, d], vec![0.0; (key_len - bg_rows) * d]);
        parts.push(pad);
    }
    out.push(g.concat(&parts, 0)?);
    Ok(out)
}

fn transformer_layer(g: &mut Graph, vars: &ModelVars, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let d = cfg.fused_dim();
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = g.matmul(x, vars.get(&format!("ksm.trans.h{h}.wq")))?;
        let k = g.matmul(x, vars.get(&format!("ksm.trans.h{h}.wk")))?;
        let v = g.matmul(x, vars.get(&format!("ksm.trans.h{h}.wv")))?;
        let scores = g.matmul_bt(q, k)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled)?;
        heads.push(g.matmul(attn, v)?);
    }
    let cat = g.concat(&heads, 1)?;
    let mha = g.linear(cat, vars.get("ksm.trans.wo"), vars.get("ksm.trans.bo"))?;
    let res1 = g.add(x, mha)?;
    let x1 = g.layer_norm(res1, vars.get("ksm.trans.ln1.g"), vars.get("ksm.trans.ln1.b"), 1e-5)?;
    let h1 = g.linear(x1, vars.get("ksm.trans.ffn.w1"), vars.get("ksm.trans.ffn.b1"))?;
    let h1 = g.relu(h1);
    let ffn = g.linear(h1, vars.get("ksm.trans.ffn.w2"), vars.get("ksm.trans.ffn.b2"))?;
    let res2 = g.add(x1, ffn)?;
    g.layer_norm(res2, vars.get("ksm.trans.ln2.g"), vars.get("ksm.trans.ln2.b"), 1e-5)
}

/// Encode each class's token sequence and pool the [START] position:
/// [(C+1), D] query matrix.
pub fn encode_text_query(
    g: &mut Graph,
    vars: &ModelVars,
    query_tokens: &[Var],
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(query_tokens.len());
    for &tokens in query_tokens {
        let enc = transformer_layer(g, vars, tokens, cfg)?;
        pooled.push(g.slice_rows(enc, 0, 1)?);
    }
    g.concat(&pooled, 0)
}

/// Class queries for the current mode: text-derived when the ksm branch is
/// enabled, otherwise the learnable query table.
pub fn class_queries(
    g: &mut Graph,
    vars: &ModelVars,
    texts: Option<&QueryTexts>,
    cfg: &ModelConfig,
) -> Result<Var> {
    match texts {
        Some(t) => {
            let tokens = build_query_tokens(g, vars, t, cfg)?;
            encode_text_query(g, vars, &tokens, cfg)
        }
        None => Ok(vars.get("match.queries")),
    }
}

/// Temperature-scaled cosine similarity matrix M [T, C+1] and its
/// background-suppressed counterpart M̂ = A ∘ M (M̂ = M when no attention).
pub fn match_similarity(
    g: &mut Graph,
    f_e: Var,
    attention: Option<Var>,
    f_query: Var,
    tau: f64,
) -> Result<(Var, Var)> {
    let fe_n = g.l2_normalize_rows(f_e)?;
    let fq_n = g.l2_normalize_rows(f_query)?;
    let cos = g.matmul_bt(fe_n, fq_n)?;
    let m = g.scale(cos, tau);
    let m_hat = match attention {
        Some(a) => g.scale_rows(m, a)?,
        None => m,
    };
    Ok((m, m_hat))
}

/// Top-k mean over time per class column, then softmax: video-level
/// similarity scores s and distribution p.
pub fn video_scores(g: &mut Graph, m: Var, k: usize) -> Result<(Var, Var)> {
    let s = g.topk_mean_cols(m, k)?;
    let p = g.softmax(s)?;
    Ok((s, p))
}

/// Matching targets over C+1 entries: the label with the background slot
/// appended as `bg` and normalized to a distribution.
pub fn matching_targets(label: &[u8], bg: f64) -> Result<Vec<f64>> {
    if label.iter().all(|&v| v == 0) {
        return Err(Error::arg("ksm_loss", "label has no positive class"));
    }
    let mut y: Vec<f64> = label.iter().map(|&v| v as f64).collect();
    y.push(bg);
    let sum: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= sum);
    Ok(y)
}

/// Cross-entropy of a distribution node against a constant target.
pub fn cross_entropy(g: &mut Graph, p: Var, target: &[f64]) -> Result<Var> {
    let logp = g.log_clamped(p);
    let t = g.input_owned(vec![target.len()], target.to_vec());
    let prod = g.mul(t, logp)?;
    let s = g.sum(prod);
    Ok(g.neg(s))
}

/// The matching loss of both score tracks: the unsuppressed track is trained
/// with background labeled 1, the suppressed track with background labeled 0.
pub fn ksm_loss(g: &mut Graph, p: Var, p_hat: Var, label: &[u8]) -> Result<Var> {
    let y = matching_targets(label, 1.0)?;
    let y_hat = matching_targets(label, 0.0)?;
    let a = cross_entropy(g, p, &y)?;
    let b = cross_entropy(g, p_hat, &y_hat)?;
    g.add(a, b)
}

/// Everything the matching branch produces for one video.
pub struct MatchForward {
    pub m: Var,
    pub m_hat: Var,
    pub p: Var,
    pub p_hat: Var,
    pub loss: Var,
}

/// Matching branch forward for one video given its embedded features and the
/// (shared) class queries. With attention present this is the full dual-track
/// loss; without it the single unsuppressed track is trained.
pub fn match_forward(
    g: &mut Graph,
    f_e: Var,
    attention: Option<Var>,
    f_query: Var,
    label: &[u8],
    cfg: &ModelConfig,
) -> Result<MatchForward> {
    let t = g.shape(f_e)[0];
    let k = cfg.k_for(t);
    let (m, m_hat) = match_similarity(g, f_e, attention, f_query, cfg.tau)?;
    let (_, p) = video_scores(g, m, k)?;
    let (_, p_hat) = video_scores(g, m_hat, k)?;
    let loss = if attention.is_some() {
        ksm_loss(g, p, p_hat, label)?
    } else {
        let y = matching_targets(label, 1.0)?;
        cross_entropy(g, p, &y)?
    };
    Ok(MatchForward { m, m_hat, p, p_hat, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_track, init_params, video_embedding};
    use crate::numerics::{Adam, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cfg() -> ModelConfig {
        ModelConfig { vocab_size: 40, max_key_len: 6, ..ModelConfig::desk(3, 8) }
    }

    fn test_vocab() -> Vocabulary {
        Vocabulary::build(
            ["the runner leaps over the bar", "a player kicks the ball hard", "someone swims fast"],
            17,
        )
    }

    fn text_fixture(vocab: &Vocabulary) -> QueryTexts {
        let texts: Vec<Vec<String>> = vec![
            crate::corpus::tokenize("the runner leaps over the bar"),
            crate::corpus::tokenize("a player kicks the ball"),
            crate::corpus::tokenize("someone swims fast"),
        ];
        QueryTexts::new(&texts, vocab)
    }

    #[test]
    fn fuse_features_is_channel_concatenation() {
        let mut g = Graph::new();
        let rgb = g.input(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let flow = g.input(&Tensor::zeros(vec![2, 3]));
        let fused = fuse_features(&mut g, rgb, flow).unwrap();
        assert_eq!(g.shape(fused), &[2, 6]);
        // first half of each row is the rgb row, second half the flow row
        assert_eq!(&g.value(fused)[0..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&g.value(fused)[3..6], &[0.0, 0.0, 0.0]);

        let bad = g.input(&Tensor::zeros(vec![3, 3]));
        assert!(matches!(fuse_features(&mut g, rgb, bad), Err(Error::Dim { .. })));
    }

    #[test]
    fn fuse_features_gradient_splits_to_streams() {
        let mut g = Graph::new();
        let rgb_t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let flow_t = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let rgb = g.param(&rgb_t);
        let flow = g.param(&flow_t);
        let fused = fuse_features(&mut g, rgb, flow).unwrap();
        let w = g.input(&Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let p = g.mul(fused, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.leaf_grad(rgb), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(g.leaf_grad(flow), &[3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn query_tokens_shapes_and_background_zero_at_init() {
        let cfg = test_cfg();
        let vocab = test_vocab();
        let texts = text_fixture(&vocab);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, true, false, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let tokens = build_query_tokens(&mut g, &vars, &texts, &cfg).unwrap();
        assert_eq!(tokens.len(), 4);
        let l = 1 + cfg.n_context + texts.max_len;
        for &t in &tokens {
            assert_eq!(g.shape(t), &[l, cfg.fused_dim()]);
        }
        // background key segment rows are all zero at initialization
        let bg = tokens[3];
        let vals = g.value(bg);
        let d = cfg.fused_dim();
        for row in (1 + cfg.n_context)..l {
            for j in 0..d {
                assert_eq!(vals[row * d + j], 0.0);
            }
        }
    }

    #[test]
    fn changing_one_class_text_changes_only_its_query_row() {
        let cfg = test_cfg();
        let vocab = test_vocab();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, true, false, &mut ChaCha8Rng::seed_from_u64(1));

        let encode = |texts: &QueryTexts| {
            let mut g = Graph::new();
            let vars = ModelVars::frozen(&mut g, &store);
            let tokens = build_query_tokens(&mut g, &vars, texts, &cfg).unwrap();
            let q = encode_text_query(&mut g, &vars, &tokens, &cfg).unwrap();
            g.tensor(q)
        };

        let base = text_fixture(&vocab);
        let changed_texts: Vec<Vec<String>> = vec![
            crate::corpus::tokenize("the runner leaps over the bar"),
            crate::corpus::tokenize("a player swims the ball"),
            crate::corpus::tokenize("someone swims fast"),
        ];
        let changed = QueryTexts::new(&changed_texts, &vocab);
        assert_eq!(base.max_len, changed.max_len);

        let qa = encode(&base);
        let qb = encode(&changed);
        let d = cfg.fused_dim();
        for c in 0..4 {
            let same = qa.data()[c * d..(c + 1) * d] == qb.data()[c * d..(c + 1) * d];
            if c == 1 {
                assert!(!same, "row 1 should change");
            } else {
                assert!(same, "row {c} should not change");
            }
        }
        // identical texts and params ⇒ identical rows
        let qc = encode(&base);
        assert_eq!(qa.data(), qc.data());
    }

    #[test]
    fn query_encoding_shape_is_classes_plus_one_by_d() {
        let cfg = test_cfg();
        let vocab = test_vocab();
        let texts = text_fixture(&vocab);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, true, false, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let tokens = build_query_tokens(&mut g, &vars, &texts, &cfg).unwrap();
        let q = encode_text_query(&mut g, &vars, &tokens, &cfg).unwrap();
        assert_eq!(g.shape(q), &[cfg.n_classes + 1, cfg.fused_dim()]);
    }

    #[test]
    fn suppression_identity_annihilation_and_cosine_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau = 10.0;
        let f_e = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let f_q = Tensor::randn(vec![3, 8], 1.0, &mut rng);

        let mut g = Graph::new();
        let fe = g.input(&f_e);
        let fq = g.input(&f_q);
        let ones = g.input(&Tensor::full(vec![6, 1], 1.0));
        let (m, m_hat) = match_similarity(&mut g, fe, Some(ones), fq, tau).unwrap();
        assert_eq!(g.value(m), g.value(m_hat));
        for v in g.value(m) {
            assert!(v.abs() <= tau + 1e-9, "cosine bound violated: {v}");
        }

        let mut g = Graph::new();
        let fe = g.input(&f_e);
        let fq = g.input(&f_q);
        let mut a = vec![0.5; 6];
        a[2] = 0.0;
        let av = g.input(&Tensor::new(vec![6, 1], a).unwrap());
        let (m, m_hat) = match_similarity(&mut g, fe, Some(av), fq, tau).unwrap();
        for j in 0..3 {
            assert_eq!(g.value(m_hat)[2 * 3 + j], 0.0);
        }
        // suppression never flips sign where attention is positive
        for t in [0usize, 1, 3, 4, 5] {
            for j in 0..3 {
                let sm = g.value(m)[t * 3 + j].signum();
                let sh = g.value(m_hat)[t * 3 + j].signum();
                assert_eq!(sm, sh);
            }
        }
    }

    #[test]
    fn query_rescaling_leaves_similarities_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f_e = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let f_q = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let mut scaled = f_q.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 3.7);

        let run = |fq_t: &Tensor| {
            let mut g = Graph::new();
            let fe = g.input(&f_e);
            let fq = g.input(fq_t);
            let (m, _) = match_similarity(&mut g, fe, None, fq, 10.0).unwrap();
            g.value(m).to_vec()
        };
        let a = run(&f_q);
        let b = run(&scaled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn video_scores_degenerate_and_oracle_cases() {
        let mut g = Graph::new();
        // T=1: scores equal the single row
        let m = g.input(&Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap());
        let (s, p) = video_scores(&mut g, m, 1).unwrap();
        assert_eq!(g.value(s), &[0.3, -0.4]);
        let sum: f64 = g.value(p).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // constant column stays constant for any k
        let m = g.input(&Tensor::new(vec![3, 2], vec![0.7, 0.0, 0.7, 0.0, 0.7, 0.0]).unwrap());
        for k in 1..=3 {
            let (s, _) = video_scores(&mut g, m, k).unwrap();
            assert!((g.value(s)[0] - 0.7).abs() < 1e-12);
        }

        // sort-and-average oracle: column [1,3,2], k=2 → 2.5
        let m = g.input(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 3.0, 0.0, 2.0, 0.0]).unwrap());
        let (s, _) = video_scores(&mut g, m, 2).unwrap();
        assert_eq!(g.value(s), &[2.5, 0.0]);
    }

    #[test]
    fn ksm_loss_floor_and_fixture() {
        // exact target distributions reach the entropy floor
        let label = vec![1u8, 0, 1];
        let y = matching_targets(&label, 1.0).unwrap();
        let y_hat = matching_targets(&label, 0.0).unwrap();
        let mut g = Graph::new();
        let p = g.input_owned(vec![4], y.clone());
        let p_hat = g.input_owned(vec![4], y_hat.clone());
        let loss = ksm_loss(&mut g, p, p_hat, &label).unwrap();
        let floor: f64 = -y.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
            - y_hat.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        assert!((g.scalar_value(loss) - floor).abs() < 1e-8);

        // single-class video with C=1: y = [0.5, 0.5], ŷ = [1, 0]
        assert_eq!(matching_targets(&[1], 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(matching_targets(&[1], 0.0).unwrap(), vec![1.0, 0.0]);

        // random fixture matches a scalar recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draw: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, 0.05..1.0)).collect();
        let z: f64 = draw.iter().sum();
        let pv: Vec<f64> = draw.iter().map(|v| v / z).collect();
        let mut g = Graph::new();
        let p = g.input_owned(vec![4], pv.clone());
        let p_hat = g.input_owned(vec![4], pv.clone());
        let loss = ksm_loss(&mut g, p, p_hat, &label).unwrap();
        let mut want = 0.0;
        for j in 0..4 {
            want -= y[j] * pv[j].max(1e-12).ln();
            want -= y_hat[j] * pv[j].max(1e-12).ln();
        }
        assert!((g.scalar_value(loss) - want).abs() < 1e-12);

        // all-zero label is an argument error
        assert!(matches!(matching_targets(&[0, 0], 1.0), Err(Error::Argument { .. })));
    }

    #[test]
    fn matching_loss_decreases_under_gradient_descent() {
        let cfg = test_cfg();
        let vocab = test_vocab();
        let texts = text_fixture(&vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, true, false, &mut rng);
        let names: Vec<String> = store.names().cloned().collect();
        let mut adam = Adam::new(1e-3, 0.0);
        let fused = Tensor::randn(vec![24, cfg.fused_dim()], 1.0, &mut rng);
        let label = vec![1u8, 0, 1];

        let mut first = None;
        let mut last = None;
        for step in 0..50 {
            store.zero_grads();
            let mut g = Graph::new();
            let vars = ModelVars::trainable(&mut g, &store, |_| true);
            let f = g.input(&fused);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(1000 + step);
            let f_e = video_embedding(&mut g, &vars, f, &cfg, true, &mut drop_rng).unwrap();
            let a = attention_track(&mut g, &vars, "att", f_e, &cfg, true, &mut drop_rng).unwrap();
            let q = class_queries(&mut g, &vars, Some(&texts), &cfg).unwrap();
            let fwd = match_forward(&mut g, f_e, Some(a), q, &label, &cfg).unwrap();
            let loss = g.scalar_value(fwd.loss);
            if step == 0 {
                first = Some(loss);
            }
            last = Some(loss);
            g.backward(fwd.loss).unwrap();
            vars.export_grads(&g, &mut store);
            adam.step(&mut store, &names).unwrap();
        }
        assert!(
            last.unwrap() < first.unwrap(),
            "loss did not decrease: {} -> {}",
            first.unwrap(),
            last.unwrap()
        );
    }

    #[test]
    fn forward_quantities_stay_finite() {
        let cfg = test_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, false, false, &mut rng);
        let fused = Tensor::randn(vec![12, cfg.fused_dim()], 5.0, &mut rng);
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let f = g.input(&fused);
        let f_e = video_embedding(&mut g, &vars, f, &cfg, false, &mut rng).unwrap();
        let q = class_queries(&mut g, &vars, None, &cfg).unwrap();
        let fwd = match_forward(&mut g, f_e, None, q, &[1, 1, 0], &cfg).unwrap();
        for var in [fwd.m, fwd.m_hat, fwd.p, fwd.p_hat, fwd.loss] {
            assert!(g.value(var).iter().all(|v| v.is_finite()));
        }
    }
}
