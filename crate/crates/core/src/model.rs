//! Model configuration, parameter initialization, and the shared video
//! trunk (feature embedding and attention heads) used by both branches.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Widths and scalar knobs of the network. The paper-scale profile keeps the
/// I3D convention (1024 per stream, 512 reconstruction width); the desk
/// profile shrinks widths so a full training run fits in CPU minutes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Per-stream feature width; the fused trunk is twice this.
    pub stream_dim: usize,
    /// Hidden width of the attention conv stacks.
    pub att_hidden: usize,
    /// Reconstruction-branch width d_h.
    pub csr_dim: usize,
    /// Hidden width of the localization head convs.
    pub loc_hidden: usize,
    /// Learnable context tokens prepended to each text query.
    pub n_context: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Cosine-similarity temperature for the matching matrix.
    pub tau: f64,
    pub dropout: f64,
    /// Top-k pooling uses k = max(1, T / k_denom).
    pub k_denom: usize,
    /// Filled in when the vocabulary is built.
    pub vocab_size: usize,
    /// Longest key description in tokens; background key rows match it.
    pub max_key_len: usize,
}

impl ModelConfig {
    pub fn paper_default(n_classes: usize) -> Self {
        ModelConfig {
            n_classes,
            stream_dim: 1024,
            att_hidden: 512,
            csr_dim: 512,
            loc_hidden: 512,
            n_context: 10,
            n_heads: 4,
            ffn_mult: 4,
            tau: 10.0,
            dropout: 0.5,
            k_denom: 8,
            vocab_size: 0,
            max_key_len: 0,
        }
    }

    /// Compact profile for CPU-minutes training runs.
    pub fn desk(n_classes: usize, stream_dim: usize) -> Self {
        ModelConfig {
            n_classes,
            stream_dim,
            att_hidden: 64,
            csr_dim: 64,
            loc_hidden: 64,
            n_context: 10,
            n_heads: 4,
            ffn_mult: 4,
            tau: 10.0,
            dropout: 0.3,
            k_denom: 8,
            vocab_size: 0,
            max_key_len: 0,
        }
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.stream_dim
    }

    pub fn k_for(&self, t: usize) -> usize {
        (t / self.k_denom).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.fused_dim() % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "fused dim {} not divisible by {} heads",
                self.fused_dim(),
                self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.k_denom == 0 || self.tau <= 0.0 {
            return Err(Error::Config("k_denom and tau must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter names starting with this prefix form the reconstruction-branch
/// optimizer group; everything else belongs to the matching+localization group.
pub const CSR_PREFIX: &str = "csr.";

pub fn is_reconstruction_param(name: &str) -> bool {
    name.starts_with(CSR_PREFIX)
}

pub fn group1_names(store: &ParamStore) -> Vec<String> {
    store.names().filter(|n| !is_reconstruction_param(n)).cloned().collect()
}

pub fn group2_names(store: &ParamStore) -> Vec<String> {
    store.names().filter(|n| is_reconstruction_param(n)).cloned().collect()
}

fn he(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn xavier(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Projection from the 0.1-sigma embedding rows (plus the position term),
/// scaled for unit output variance; plain Xavier would leave the projected
/// text two orders of magnitude too small and downstream attention flat.
fn text_proj(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let input_var = 0.01 + 0.3 * 0.3 / 2.0;
    let fan = crate::corpus::EMBED_DIM as f64 * input_var;
    Tensor::randn(shape, (1.0 / fan).sqrt(), rng)
}

/// Initialize every parameter for the selected branches.
///
/// Group-1 parameters are created before any reconstruction parameter, so two
/// runs that differ only in `enable_csr` draw identical group-1 tensors from
/// the same init stream.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    enable_ksm: bool,
    enable_csr: bool,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.fused_dim();
    let c1 = cfg.n_classes + 1;

    // shared trunk
    store.insert("emb.conv1.w", he(vec![d, d, 3], d * 3, rng));
    store.insert("emb.conv1.b", Tensor::zeros(vec![d]));
    store.insert("emb.conv2.w", he(vec![d, d, 3], d * 3, rng));
    store.insert("emb.conv2.b", Tensor::zeros(vec![d]));

    // localization head
    store.insert("loc.conv.w", he(vec![cfg.loc_hidden, d, 3], d * 3, rng));
    store.insert("loc.conv.b", Tensor::zeros(vec![cfg.loc_hidden]));
    store.insert("loc.cls.w", xavier(vec![c1, cfg.loc_hidden, 3], cfg.loc_hidden * 3, rng));
    store.insert("loc.cls.b", Tensor::zeros(vec![c1]));
    store.insert("loc.reg.w", xavier(vec![2, cfg.loc_hidden, 3], cfg.loc_hidden * 3, rng));
    store.insert("loc.reg.b", Tensor::zeros(vec![2]));

    if enable_ksm {
        store.insert("att.conv1.w", he(vec![cfg.att_hidden, d, 3], d * 3, rng));
        store.insert("att.conv1.b", Tensor::zeros(vec![cfg.att_hidden]));
        store.insert("att.conv2.w", xavier(vec![1, cfg.att_hidden, 3], cfg.att_hidden * 3, rng));
        store.insert("att.conv2.b", Tensor::zeros(vec![1]));

        store.insert("ksm.text.proj.w", text_proj(vec![crate::corpus::EMBED_DIM, d], rng));
        store.insert("ksm.text.start", Tensor::randn(vec![1, d], 0.02, rng));
        store.insert("ksm.text.context", Tensor::randn(vec![cfg.n_context, d], 0.02, rng));
        store.insert("ksm.text.bgkey", Tensor::zeros(vec![cfg.max_key_len.max(1), crate::corpus::EMBED_DIM]));

        let dh = d / cfg.n_heads;
        for h in 0..cfg.n_heads {
            store.insert(&format!("ksm.trans.h{h}.wq"), xavier(vec![d, dh], d, rng));
            store.insert(&format!("ksm.trans.h{h}.wk"), xavier(vec![d, dh], d, rng));
            store.insert(&format!("ksm.trans.h{h}.wv"), xavier(vec![d, dh], d, rng));
        }
        store.insert("ksm.trans.wo", xavier(vec![d, d], d, rng));
        store.insert("ksm.trans.bo", Tensor::zeros(vec![d]));
        store.insert("ksm.trans.ln1.g", Tensor::full(vec![d], 1.0));
        store.insert("ksm.trans.ln1.b", Tensor::zeros(vec![d]));
        store.insert("ksm.trans.ffn.w1", he(vec![d, d * cfg.ffn_mult], d, rng));
        store.insert("ksm.trans.ffn.b1", Tensor::zeros(vec![d * cfg.ffn_mult]));
        store.insert("ksm.trans.ffn.w2", xavier(vec![d * cfg.ffn_mult, d], d * cfg.ffn_mult, rng));
        store.insert("ksm.trans.ffn.b2", Tensor::zeros(vec![d]));
        store.insert("ksm.trans.ln2.g", Tensor::full(vec![d], 1.0));
        store.insert("ksm.trans.ln2.b", Tensor::zeros(vec![d]));
    } else {
        // learnable query table standing in for text-derived queries
        store.insert("match.queries", xavier(vec![c1, d], d, rng));
    }

    if enable_csr {
        let dh = cfg.csr_dim;
        store.insert("csr.fc.w", xavier(vec![d, dh], d, rng));
        store.insert("csr.fc.b", Tensor::zeros(vec![dh]));
        store.insert("csr.att.conv1.w", he(vec![cfg.att_hidden, d, 3], d * 3, rng));
        store.insert("csr.att.conv1.b", Tensor::zeros(vec![cfg.att_hidden]));
        store.insert("csr.att.conv2.w", xavier(vec![1, cfg.att_hidden, 3], cfg.att_hidden * 3, rng));
        store.insert("csr.att.conv2.b", Tensor::zeros(vec![1]));
        store.insert("csr.text.proj.w", text_proj(vec![crate::corpus::EMBED_DIM, dh], rng));
        store.insert("csr.text.proj.b", Tensor::zeros(vec![dh]));
        // peaked initial self-attention: near-uniform mixing would collapse
        // the encoder output toward the global mean and starve the decoder
        // of key diversity
        let enc_gain = 3.0;
        store.insert("csr.enc.wq", Tensor::randn(vec![dh, dh], enc_gain * (1.0 / dh as f64).sqrt(), rng));
        store.insert("csr.enc.wk", Tensor::randn(vec![dh, dh], enc_gain * (1.0 / dh as f64).sqrt(), rng));
        store.insert("csr.enc.wv", xavier(vec![dh, dh], dh, rng));
        store.insert("csr.dec.wq", xavier(vec![dh, dh], dh, rng));
        store.insert("csr.dec.wk", xavier(vec![dh, dh], dh, rng));
        store.insert("csr.dec.wv", xavier(vec![dh, dh], dh, rng));
        store.insert("csr.out.w", xavier(vec![dh, cfg.vocab_size.max(1)], dh, rng));
        store.insert("csr.out.b", Tensor::zeros(vec![cfg.vocab_size.max(1)]));
    }
}

/// Graph handles for a subset of the parameter store, remembering which were
/// registered as trainable so gradients can be exported back.
pub struct ModelVars {
    map: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl ModelVars {
    /// Register parameters matching `pred` as trainable leaves and the rest
    /// as constants.
    pub fn trainable(g: &mut Graph, store: &ParamStore, pred: impl Fn(&str) -> bool) -> Self {
        let mut map = BTreeMap::new();
        let mut trainable = Vec::new();
        for (name, t) in store.iter() {
            let var = if pred(name) {
                trainable.push(name.clone());
                g.param(t)
            } else {
                g.input(t)
            };
            map.insert(name.clone(), var);
        }
        ModelVars { map, trainable }
    }

    /// Register every parameter as a constant (evaluation pass).
    pub fn frozen(g: &mut Graph, store: &ParamStore) -> Self {
        Self::trainable(g, store, |_| false)
    }

    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("no parameter var {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Accumulate the trainable leaves' gradients into the store.
    pub fn export_grads(&self, g: &Graph, store: &mut ParamStore) {
        for name in &self.trainable {
            store.accumulate_grad(name, g.leaf_grad(self.map[name]));
        }
    }
}

/// Two 1-D convolutions with ReLU and dropout: the video embedding trunk
/// mapping fused features [T, D] to F_e [T, D].
pub fn video_embedding<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    fused: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = g.conv1d(fused, vars.get("emb.conv1.w"), vars.get("emb.conv1.b"))?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout, train, rng);
    let h = g.conv1d(h, vars.get("emb.conv2.w"), vars.get("emb.conv2.b"))?;
    Ok(g.relu(h))
}

/// Per-segment foreground weight in (0,1): conv → ReLU → dropout → conv →
/// sigmoid over F_e. `prefix` selects which attention stack ("att" or
/// "csr.att").
pub fn attention_track<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    prefix: &str,
    f_e: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = g.conv1d(f_e, vars.get(&format!("{prefix}.conv1.w")), vars.get(&format!("{prefix}.conv1.b")))?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout, train, rng);
    let h = g.conv1d(h, vars.get(&format!("{prefix}.conv2.w")), vars.get(&format!("{prefix}.conv2.b")))?;
    Ok(g.sigmoid(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group1_init_is_independent_of_csr_flag() {
        let cfg = ModelConfig { vocab_size: 50, max_key_len: 9, ..ModelConfig::desk(4, 8) };
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        init_params(&mut a, &cfg, true, true, &mut ChaCha8Rng::seed_from_u64(5));
        init_params(&mut b, &cfg, true, false, &mut ChaCha8Rng::seed_from_u64(5));
        for name in group1_names(&a) {
            assert_eq!(a.get(&name).data(), b.get(&name).data(), "{name} differs");
        }
        assert!(group2_names(&b).is_empty());
        assert!(!group2_names(&a).is_empty());
    }

    #[test]
    fn param_groups_are_disjoint_and_cover_store() {
        let cfg = ModelConfig { vocab_size: 50, max_key_len: 9, ..ModelConfig::desk(4, 8) };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, true, true, &mut ChaCha8Rng::seed_from_u64(5));
        let g1 = group1_names(&store);
        let g2 = group2_names(&store);
        assert_eq!(g1.len() + g2.len(), store.len());
        for n in &g1 {
            assert!(!g2.contains(n));
        }
    }

    #[test]
    fn embedding_preserves_temporal_length_and_attention_is_in_unit_interval() {
        let cfg = ModelConfig { vocab_size: 10, max_key_len: 5, ..ModelConfig::desk(3, 8) };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_params(&mut store, &cfg, true, false, &mut rng);
        let mut g = Graph::new();
        let vars = ModelVars::frozen(&mut g, &store);
        let fused = g.input(&Tensor::randn(vec![20, cfg.fused_dim()], 1.0, &mut rng));
        let f_e = video_embedding(&mut g, &vars, fused, &cfg, false, &mut rng).unwrap();
        assert_eq!(g.shape(f_e), &[20, cfg.fused_dim()]);
        let a = attention_track(&mut g, &vars, "att", f_e, &cfg, false, &mut rng).unwrap();
        assert_eq!(g.shape(a), &[20, 1]);
        for v in g.value(a) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn eval_mode_forward_is_deterministic() {
        let cfg = ModelConfig { vocab_size: 10, max_key_len: 5, ..ModelConfig::desk(3, 8) };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_params(&mut store, &cfg, true, false, &mut rng);
        let x = Tensor::randn(vec![16, cfg.fused_dim()], 1.0, &mut rng);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let vars = ModelVars::frozen(&mut g, &store);
            let fused = g.input(&x);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let f_e = video_embedding(&mut g, &vars, fused, &cfg, false, &mut r).unwrap();
            g.value(f_e).to_vec()
        };
        assert_eq!(run(1), run(999));
    }
}
