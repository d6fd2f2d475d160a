//! Alternating two-branch trainer: the matching phase updates the
//! matching+localization group against the reconstruction branch's attention
//! target, then the reconstruction phase updates its own group against the
//! matching attention; the cross targets are stop-gradient copies.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{text, DescriptionGenerator, DescriptionPair, VideoSample, Vocabulary};
use crate::csr;
use crate::error::{Error, Result};
use crate::ksm::{self, QueryTexts};
use crate::lochead::{self, PseudoProposal, MINE_NMS_IOU, MINE_THRESHOLDS};
use crate::model::{
    attention_track, group1_names, group2_names, init_params, video_embedding, ModelConfig,
    ModelVars,
};
use crate::numerics::{Adam, Graph, ParamStore, Tensor, Var};

/// Stop-gradient on an attention track: same values, no path back to the
/// source branch. The receiving branch treats it as a constant target.
pub fn psi(g: &mut Graph, track: Var) -> Var {
    g.detach(track)
}

/// Everything the trainer needs to know about a run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    /// Weight of the matching-side distillation term.
    pub lambda1: f64,
    /// Weight of the reconstruction-side distillation term.
    pub lambda2: f64,
    /// Weight of the localization loss inside the matching phase.
    pub mu1: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Pseudo-proposals are re-mined every this many iterations.
    pub refresh_period: u64,
    pub checkpoint_period: u64,
    pub enable_ksm: bool,
    pub enable_csr: bool,
    pub enable_distill: bool,
    pub enable_locloss: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-3,
            iterations: 5000,
            lambda1: 1.5,
            lambda2: 1.5,
            mu1: 1.0,
            seed: 7,
            batch_size: 8,
            refresh_period: 100,
            checkpoint_period: 500,
            enable_ksm: true,
            enable_csr: true,
            enable_distill: true,
            enable_locloss: true,
            model,
        }
    }

    /// Distillation weights after the switches: disabling distillation (or
    /// the partner branch) zeroes the corresponding term.
    pub fn effective_lambda1(&self) -> f64 {
        if self.enable_distill && self.enable_csr && self.enable_ksm {
            self.lambda1
        } else {
            0.0
        }
    }

    pub fn effective_lambda2(&self) -> f64 {
        if self.enable_distill && self.enable_csr && self.enable_ksm {
            self.lambda2
        } else {
            0.0
        }
    }

    /// Attention source used for mining and inference under this mode.
    pub fn attention_source(&self) -> crate::evaluate::AttentionSource {
        if self.enable_ksm {
            crate::evaluate::AttentionSource::Matching
        } else if self.enable_csr {
            crate::evaluate::AttentionSource::Reconstruction
        } else {
            crate::evaluate::AttentionSource::Flat
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.mu1 < 0.0 {
            return Err(Error::Config("lambda1, lambda2, mu1 must be non-negative".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if self.refresh_period == 0 || self.checkpoint_period == 0 {
            return Err(Error::Config("refresh and checkpoint periods must be positive".into()));
        }
        self.model.validate()
    }
}

/// Prepared training inputs: fused features, description pairs, vocabulary,
/// and the per-class key-text embeddings.
pub struct TrainData {
    pub videos: Vec<VideoSample>,
    pub fused: Vec<Tensor>,
    pub pairs: Vec<DescriptionPair>,
    pub vocab: Vocabulary,
    pub query_texts: QueryTexts,
    pub class_names: Vec<String>,
}

/// Collect descriptions for every class and video, build the vocabulary and
/// masks. This is the only stage that consults the description generator.
pub fn prepare_train_data(
    videos: Vec<VideoSample>,
    generator: &DescriptionGenerator,
    seed: u64,
) -> Result<TrainData> {
    let n_classes = generator.n_classes();
    let mut key_texts = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        key_texts.push(generator.key_text_for_class(c)?);
    }
    let pairs: Vec<DescriptionPair> =
        videos.iter().map(|v| DescriptionPair::build(generator, v, seed)).collect::<Result<_>>()?;

    let mut sentences: Vec<String> = key_texts.iter().map(|t| t.join(" ")).collect();
    for p in &pairs {
        sentences.push(p.complete_text.join(" "));
    }
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str), seed);
    let query_texts = QueryTexts::new(&key_texts, &vocab);
    let fused: Vec<Tensor> =
        videos.iter().map(|v| ksm::fuse_sample(&v.rgb, &v.flow)).collect::<Result<_>>()?;

    Ok(TrainData {
        videos,
        fused,
        pairs,
        vocab,
        query_texts,
        class_names: generator.class_names().to_vec(),
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub l_match: f64,
    pub l_ksm: f64,
    pub l_loc: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_csr: Option<f64>,
    /// Matching-side coupling MSE(A_match, psi(A_rec)).
    pub mse_match: Option<f64>,
    /// Reconstruction-side coupling MSE(A_rec, psi(A_match)).
    pub mse_rec: Option<f64>,
}

/// Snapshot of one optimizer.
#[derive(Clone, Debug)]
pub struct AdamSnapshot {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

/// Versioned container of parameters and training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: TrainConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam_match: AdamSnapshot,
    pub adam_rec: AdamSnapshot,
    /// ChaCha word positions of the data/match/rec streams.
    pub rng_pos: [u128; 3],
    pub history: Vec<MetricsRow>,
}

const CKPT_MAGIC: &[u8; 4] = b"WTCK";
const CKPT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.shape().len() as u8);
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_named_tensors(buf: &mut Vec<u8>, map: &BTreeMap<String, Tensor>) {
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, t) in map {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_tensor(buf, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let flag = self.u8()?;
        let v = self.f64()?;
        Ok(if flag == 1 { Some(v) } else { None })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn named_tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            let t = self.tensor()?;
            map.insert(name, t);
        }
        Ok(map)
    }
}

fn put_opt_f64(buf: &mut Vec<u8>, v: Option<f64>) {
    buf.push(v.is_some() as u8);
    buf.extend_from_slice(&v.unwrap_or(0.0).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);
        put_named_tensors(&mut buf, &self.params);
        for adam in [&self.adam_match, &self.adam_rec] {
            buf.extend_from_slice(&adam.step.to_le_bytes());
            buf.extend_from_slice(&(adam.moments.len() as u32).to_le_bytes());
            for (name, (m, v)) in &adam.moments {
                buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                put_tensor(&mut buf, m);
                put_tensor(&mut buf, v);
            }
        }
        for pos in self.rng_pos {
            buf.extend_from_slice(&pos.to_le_bytes());
        }
        buf.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for row in &self.history {
            buf.extend_from_slice(&row.iteration.to_le_bytes());
            buf.extend_from_slice(&row.l_match.to_le_bytes());
            buf.extend_from_slice(&row.l_ksm.to_le_bytes());
            put_opt_f64(&mut buf, row.l_loc);
            put_opt_f64(&mut buf, row.l_rec);
            put_opt_f64(&mut buf, row.l_csr);
            put_opt_f64(&mut buf, row.mse_match);
            put_opt_f64(&mut buf, row.mse_rec);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let iteration = r.u64()?;
        let config_len = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)?;
        let params = r.named_tensors()?;
        let mut adams = Vec::with_capacity(2);
        for _ in 0..2 {
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..count {
                let len = r.u16()? as usize;
                let name = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::Checkpoint("bad moment name".into()))?;
                let m = r.tensor()?;
                let v = r.tensor()?;
                moments.insert(name, (m, v));
            }
            adams.push(AdamSnapshot { step, moments });
        }
        let rng_pos = [r.u128()?, r.u128()?, r.u128()?];
        let n_rows = r.u32()? as usize;
        let mut history = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            history.push(MetricsRow {
                iteration: r.u64()?,
                l_match: r.f64()?,
                l_ksm: r.f64()?,
                l_loc: r.opt_f64()?,
                l_rec: r.opt_f64()?,
                l_csr: r.opt_f64()?,
                mse_match: r.opt_f64()?,
                mse_rec: r.opt_f64()?,
            });
        }
        let adam_rec = adams.pop().unwrap();
        let adam_match = adams.pop().unwrap();
        Ok(Checkpoint { iteration, config, params, adam_match, adam_rec, rng_pos, history })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuild a parameter store from the saved tensors.
    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.params {
            store.insert(name, t.clone());
        }
        store
    }
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

/// Per-video values computed in eval mode before each iteration's updates:
/// the embedded features and both attention tracks at the current weights.
struct EvalPass {
    f_e: Vec<Tensor>,
    a_match: Vec<Option<Tensor>>,
    a_rec: Vec<Option<Tensor>>,
}

fn eval_pass(
    data: &TrainData,
    indices: &[usize],
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<EvalPass> {
    let mut g = Graph::new();
    let vars = ModelVars::frozen(&mut g, store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f_e_out = Vec::with_capacity(indices.len());
    let mut a_match = Vec::with_capacity(indices.len());
    let mut a_rec = Vec::with_capacity(indices.len());
    for &i in indices {
        let f = g.input(&data.fused[i]);
        let f_e = video_embedding(&mut g, &vars, f, &cfg.model, false, &mut rng)?;
        f_e_out.push(g.tensor(f_e));
        if cfg.enable_ksm {
            let a = attention_track(&mut g, &vars, "att", f_e, &cfg.model, false, &mut rng)?;
            a_match.push(Some(g.tensor(a)));
        } else {
            a_match.push(None);
        }
        if cfg.enable_csr {
            let a = attention_track(&mut g, &vars, "csr.att", f_e, &cfg.model, false, &mut rng)?;
            a_rec.push(Some(g.tensor(a)));
        } else {
            a_rec.push(None);
        }
    }
    Ok(EvalPass { f_e: f_e_out, a_match, a_rec })
}

/// Re-mine pseudo-proposals for every training video from the current
/// matching matrix and attention.
fn refresh_pseudo_proposals(
    data: &TrainData,
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<PseudoProposal>>> {
    let mut g = Graph::new();
    let vars = ModelVars::frozen(&mut g, store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let texts = if cfg.enable_ksm { Some(&data.query_texts) } else { None };
    let queries = ksm::class_queries(&mut g, &vars, texts, &cfg.model)?;
    let mut out = Vec::with_capacity(data.videos.len());
    for (i, video) in data.videos.iter().enumerate() {
        let f = g.input(&data.fused[i]);
        let f_e = video_embedding(&mut g, &vars, f, &cfg.model, false, &mut rng)?;
        let attention = match cfg.attention_source() {
            crate::evaluate::AttentionSource::Matching => {
                Some(attention_track(&mut g, &vars, "att", f_e, &cfg.model, false, &mut rng)?)
            }
            crate::evaluate::AttentionSource::Reconstruction => {
                Some(attention_track(&mut g, &vars, "csr.att", f_e, &cfg.model, false, &mut rng)?)
            }
            crate::evaluate::AttentionSource::Flat => None,
        };
        // suppression uses the matching attention when present
        let match_att = if cfg.enable_ksm { attention } else { None };
        let (_, m_hat) = ksm::match_similarity(&mut g, f_e, match_att, queries, cfg.model.tau)?;
        let scores = g.tensor(m_hat);
        let a_vals: Option<Vec<f64>> = attention.map(|a| g.value(a).to_vec());
        out.push(lochead::mine_pseudo_proposals(
            a_vals.as_deref(),
            &scores,
            &video.label,
            &MINE_THRESHOLDS,
            MINE_NMS_IOU,
        ));
    }
    Ok(out)
}

fn check_finite(value: f64, term: &'static str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

/// Run the full alternating optimization. `on_checkpoint` receives periodic
/// and final checkpoints (write them wherever the caller wants).
pub fn train(
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.videos.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }

    let mut store = ParamStore::new();
    let mut rng_init = text::derive_rng(cfg.seed, 0);
    init_params(&mut store, &cfg.model, cfg.enable_ksm, cfg.enable_csr, &mut rng_init);
    let g1 = group1_names(&store);
    let g2 = group2_names(&store);
    let mut adam_match = Adam::new(cfg.lr, cfg.weight_decay);
    let mut adam_rec = Adam::new(cfg.lr, cfg.weight_decay);

    let mut rng_data = text::derive_rng(cfg.seed, 1);
    let mut rng_match = text::derive_rng(cfg.seed, 2);
    let mut rng_rec = text::derive_rng(cfg.seed, 3);

    let lambda1 = cfg.effective_lambda1();
    let lambda2 = cfg.effective_lambda2();
    let n = data.videos.len();
    let mut pseudo: Vec<Vec<PseudoProposal>> = vec![Vec::new(); n];
    let mut metrics: Vec<MetricsRow> = Vec::with_capacity(cfg.iterations as usize);

    for it in 0..cfg.iterations {
        if cfg.enable_locloss && it % cfg.refresh_period == 0 {
            pseudo = refresh_pseudo_proposals(data, &store, cfg)?;
        }
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng_data.gen_range(0..n)).collect();
        let pre = eval_pass(data, &batch, &store, cfg)?;

        // ── matching phase ───────────────────────────────────────────
        let mut g = Graph::new();
        let vars = ModelVars::trainable(&mut g, &store, |name| !crate::model::is_reconstruction_param(name));
        let texts = if cfg.enable_ksm { Some(&data.query_texts) } else { None };
        let queries = ksm::class_queries(&mut g, &vars, texts, &cfg.model)?;
        let mut video_losses = Vec::with_capacity(batch.len());
        let mut ksm_sum = 0.0;
        let mut loc_sum = 0.0;
        let mut mse_sum = 0.0;
        for (bi, &vi) in batch.iter().enumerate() {
            let video = &data.videos[vi];
            let f = g.input(&data.fused[vi]);
            let f_e = video_embedding(&mut g, &vars, f, &cfg.model, true, &mut rng_match)?;
            let att = if cfg.enable_ksm {
                Some(attention_track(&mut g, &vars, "att", f_e, &cfg.model, true, &mut rng_match)?)
            } else {
                None
            };
            let mf = ksm::match_forward(&mut g, f_e, att, queries, &video.label, &cfg.model)?;
            ksm_sum += g.scalar_value(mf.loss);
            let mut total = mf.loss;
            if lambda1 > 0.0 {
                let target = g.input(pre.a_rec[bi].as_ref().expect("csr attention target"));
                let mse = g.mse(att.expect("matching attention"), target)?;
                mse_sum += g.scalar_value(mse);
                let weighted = g.scale(mse, cfg.lambda1);
                total = g.add(total, weighted)?;
            }
            if cfg.enable_locloss {
                let (logits, offsets) =
                    lochead::head_forward(&mut g, &vars, f_e, &cfg.model, true, &mut rng_match)?;
                let ll = lochead::loc_loss(&mut g, logits, offsets, &pseudo[vi], &video.label, &cfg.model)?;
                loc_sum += g.scalar_value(ll.total);
                let weighted = g.scale(ll.total, cfg.mu1);
                total = g.add(total, weighted)?;
            }
            video_losses.push(total);
        }
        let sum = g.sum_vars(&video_losses)?;
        let l_match_var = g.scale(sum, 1.0 / batch.len() as f64);
        let l_match = check_finite(g.scalar_value(l_match_var), "L_match", it)?;
        g.backward(l_match_var)?;
        vars.export_grads(&g, &mut store);
        adam_match.step(&mut store, &g1)?;
        store.zero_grads();
        drop(g);

        // ── reconstruction phase ─────────────────────────────────────
        let (l_rec, l_csr, mse_rec) = if cfg.enable_csr {
            let mut g = Graph::new();
            let vars = ModelVars::trainable(&mut g, &store, |name| crate::model::is_reconstruction_param(name));
            let mut video_losses = Vec::with_capacity(batch.len());
            let mut csr_sum = 0.0;
            let mut mse_sum2 = 0.0;
            for (bi, &vi) in batch.iter().enumerate() {
                let video = &data.videos[vi];
                let f = g.input(&data.fused[vi]);
                let f_e = g.input(&pre.f_e[bi]);
                let fwd = csr::forward(
                    &mut g,
                    &vars,
                    f,
                    f_e,
                    &data.pairs[vi],
                    &data.vocab,
                    &cfg.model,
                    true,
                    &mut rng_rec,
                )?;
                let _ = video;
                csr_sum += g.scalar_value(fwd.loss);
                let mut total = fwd.loss;
                if lambda2 > 0.0 {
                    let target = g.input(pre.a_match[bi].as_ref().expect("matching attention target"));
                    let mse = g.mse(fwd.a_csr, target)?;
                    mse_sum2 += g.scalar_value(mse);
                    let weighted = g.scale(mse, cfg.lambda2);
                    total = g.add(total, weighted)?;
                }
                video_losses.push(total);
            }
            let sum = g.sum_vars(&video_losses)?;
            let l_rec_var = g.scale(sum, 1.0 / batch.len() as f64);
            let l_rec = check_finite(g.scalar_value(l_rec_var), "L_rec", it)?;
            g.backward(l_rec_var)?;
            vars.export_grads(&g, &mut store);
            adam_rec.step(&mut store, &g2)?;
            store.zero_grads();
            (
                Some(l_rec),
                Some(csr_sum / batch.len() as f64),
                if lambda2 > 0.0 { Some(mse_sum2 / batch.len() as f64) } else { None },
            )
        } else {
            (None, None, None)
        };

        metrics.push(MetricsRow {
            iteration: it,
            l_match,
            l_ksm: ksm_sum / batch.len() as f64,
            l_loc: cfg.enable_locloss.then_some(loc_sum / batch.len() as f64),
            l_rec,
            l_csr,
            mse_match: (lambda1 > 0.0).then_some(mse_sum / batch.len() as f64),
            mse_rec,
        });

        let last = it + 1 == cfg.iterations;
        if (it + 1) % cfg.checkpoint_period == 0 || last {
            let ckpt = snapshot(
                it + 1,
                cfg,
                &store,
                &adam_match,
                &adam_rec,
                [rng_data.get_word_pos(), rng_match.get_word_pos(), rng_rec.get_word_pos()],
                &metrics,
            );
            on_checkpoint(&ckpt)?;
            if last {
                return Ok(TrainOutcome { store, metrics, checkpoint: ckpt });
            }
        }
    }
    unreachable!("loop returns at the final iteration");
}

fn snapshot(
    iteration: u64,
    cfg: &TrainConfig,
    store: &ParamStore,
    adam_match: &Adam,
    adam_rec: &Adam,
    rng_pos: [u128; 3],
    metrics: &[MetricsRow],
) -> Checkpoint {
    Checkpoint {
        iteration,
        config: cfg.clone(),
        params: store.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        adam_match: AdamSnapshot { step: adam_match.step_count(), moments: adam_match.moments().clone() },
        adam_rec: AdamSnapshot { step: adam_rec.step_count(), moments: adam_rec.moments().clone() },
        rng_pos,
        history: metrics.to_vec(),
    }
}

/// Serialize metrics as one JSON object per line.
pub fn metrics_jsonl(rows: &[MetricsRow]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}
