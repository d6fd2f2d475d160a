//! Prior-driven localization head: per-segment class logits and interval
//! offsets trained from mined pseudo-proposals with the focal + DIoU + MIL
//! loss. Inference runs this head alone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ksm::{cross_entropy, matching_targets};
use crate::model::{ModelConfig, ModelVars};
use crate::numerics::{Graph, Tensor, Var};

/// Supervision target mined from the prior branches.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoProposal {
    pub class: usize,
    /// Segment interval, end exclusive.
    pub start_seg: usize,
    pub end_seg: usize,
    /// Mean activation inside the interval, in [0, 1].
    pub confidence: f64,
}

/// Mining thresholds over the attention-scaled score track.
pub const MINE_THRESHOLDS: [f64; 4] = [0.3, 0.4, 0.5, 0.6];
/// Overlap at which duplicate mined proposals merge.
pub const MINE_NMS_IOU: f64 = 0.7;

fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0)) as f64;
    let union = (a.1 - a.0) as f64 + (b.1 - b.0) as f64 - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Contiguous runs where attention · min-max-normalized class score exceeds
/// each threshold, merged per class by 1-D NMS.
///
/// `scores` is the [T, C+1] suppressed similarity matrix (or any score
/// track); `attention` is the per-segment track, `None` meaning all ones.
pub fn mine_pseudo_proposals(
    attention: Option<&[f64]>,
    scores: &Tensor,
    label: &[u8],
    thresholds: &[f64],
    merge_iou: f64,
) -> Vec<PseudoProposal> {
    let t = scores.rows();
    let mut out = Vec::new();
    for (class, &on) in label.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let col: Vec<f64> = (0..t).map(|i| scores.get2(i, class)).collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        let act: Vec<f64> = col
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let norm = (v - lo) / (hi - lo);
                attention.map_or(norm, |a| a[i] * norm)
            })
            .collect();
        let mut candidates = Vec::new();
        for &thr in thresholds {
            let mut start = None;
            for (i, &v) in act.iter().enumerate() {
                if v > thr {
                    start.get_or_insert(i);
                } else if let Some(s) = start.take() {
                    candidates.push((s, i));
                }
            }
            if let Some(s) = start {
                candidates.push((s, t));
            }
        }
        let mut props: Vec<PseudoProposal> = candidates
            .into_iter()
            .map(|(s, e)| {
                let conf = act[s..e].iter().sum::<f64>() / (e - s) as f64;
                PseudoProposal { class, start_seg: s, end_seg: e, confidence: conf }
            })
            .collect();
        props.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.start_seg.cmp(&b.start_seg))
                .then(a.end_seg.cmp(&b.end_seg))
        });
        let mut kept: Vec<PseudoProposal> = Vec::new();
        for p in props {
            if kept
                .iter()
                .all(|q| interval_iou((p.start_seg, p.end_seg), (q.start_seg, q.end_seg)) < merge_iou)
            {
                kept.push(p);
            }
        }
        out.extend(kept);
    }
    out
}

/// Per-segment class targets from proposals: the highest-confidence proposal
/// covering a segment wins; uncovered segments take the background index C.
pub fn segment_pseudo_labels(proposals: &[PseudoProposal], t: usize, n_classes: usize) -> Vec<usize> {
    let mut labels = vec![n_classes; t];
    let mut best = vec![f64::NEG_INFINITY; t];
    for p in proposals {
        for s in p.start_seg..p.end_seg.min(t) {
            if p.confidence > best[s] {
                best[s] = p.confidence;
                labels[s] = p.class;
            }
        }
    }
    labels
}

/// Head forward: shared conv + ReLU, then class logits [T, C+1] and
/// non-negative start/end offsets [T, 2] via softplus.
pub fn head_forward<R: Rng>(
    g: &mut Graph,
    vars: &ModelVars,
    f_e: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let h = g.conv1d(f_e, vars.get("loc.conv.w"), vars.get("loc.conv.b"))?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout, train, rng);
    let logits = g.conv1d(h, vars.get("loc.cls.w"), vars.get("loc.cls.b"))?;
    let raw_offsets = g.conv1d(h, vars.get("loc.reg.w"), vars.get("loc.reg.b"))?;
    let offsets = g.softplus(raw_offsets);
    Ok((logits, offsets))
}

/// Focal-modulated cross-entropy over per-segment pseudo-labels.
///
/// `alpha` of `Some(a)` weights foreground segments by `a` and background by
/// `1-a`; `None` applies uniform weight 1 (with gamma 0 this reduces to mean
/// cross-entropy).
pub fn focal_loss(
    g: &mut Graph,
    class_logits: Var,
    seg_labels: &[usize],
    gamma: f64,
    alpha: Option<f64>,
) -> Result<Var> {
    let (t, c1) = (g.shape(class_logits)[0], g.shape(class_logits)[1]);
    if seg_labels.len() != t {
        return Err(Error::dim("focal_loss", format!("{} labels vs {} segments", seg_labels.len(), t)));
    }
    let bg = c1 - 1;
    let probs = g.softmax(class_logits)?;
    let picked = g.gather_per_row(probs, seg_labels.to_vec())?;
    let logp = g.log_clamped(picked);
    let one_minus = {
        let n = g.neg(picked);
        g.add_const(n, 1.0)
    };
    let weights: Vec<f64> = seg_labels
        .iter()
        .map(|&l| match alpha {
            Some(a) => {
                if l == bg {
                    1.0 - a
                } else {
                    a
                }
            }
            None => 1.0,
        })
        .collect();
    let w = g.input_owned(vec![t], weights);
    let modulated = if gamma == 0.0 {
        logp
    } else {
        let focal = g.pow_const(one_minus, gamma);
        g.mul(focal, logp)?
    };
    let weighted = g.mul(w, modulated)?;
    let mean = g.mean(weighted);
    Ok(g.neg(mean))
}

/// Regression targets: one (segment, interval) pair per covered segment of
/// every mined proposal.
pub fn regression_targets(proposals: &[PseudoProposal], t: usize) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for p in proposals {
        for s in p.start_seg..p.end_seg.min(t) {
            out.push((s, p.start_seg as f64, p.end_seg as f64));
        }
    }
    out
}

/// 1-D distance-IoU loss of decoded intervals against their targets,
/// averaged; zero when there is nothing to regress.
///
/// A segment's interval decodes as [t+0.5-d_start, t+0.5+d_end].
pub fn diou_loss(g: &mut Graph, offsets: Var, targets: &[(usize, f64, f64)]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.scalar_input(0.0));
    }
    let n = targets.len();
    let at_start: Vec<(usize, usize)> = targets.iter().map(|&(s, _, _)| (s, 0)).collect();
    let at_end: Vec<(usize, usize)> = targets.iter().map(|&(s, _, _)| (s, 1)).collect();
    let d_start = g.gather_at(offsets, at_start)?;
    let d_end = g.gather_at(offsets, at_end)?;

    let centers = g.input_owned(vec![n], targets.iter().map(|&(s, _, _)| s as f64 + 0.5).collect());
    let ts = g.input_owned(vec![n], targets.iter().map(|&(_, a, _)| a).collect());
    let te = g.input_owned(vec![n], targets.iter().map(|&(_, _, b)| b).collect());

    let ps = g.sub(centers, d_start)?;
    let pe = g.add(centers, d_end)?;

    let inter_hi = g.minimum(pe, te)?;
    let inter_lo = g.maximum(ps, ts)?;
    let inter_raw = g.sub(inter_hi, inter_lo)?;
    let inter = g.relu(inter_raw);

    let len_p = g.sub(pe, ps)?;
    let len_t = g.sub(te, ts)?;
    let sum_len = g.add(len_p, len_t)?;
    let union = g.sub(sum_len, inter)?;
    let iou = g.div(inter, union)?;

    let pc = {
        let s = g.add(ps, pe)?;
        g.scale(s, 0.5)
    };
    let tc = {
        let s = g.add(ts, te)?;
        g.scale(s, 0.5)
    };
    let dc = g.sub(pc, tc)?;
    let d2 = g.mul(dc, dc)?;
    let enc_hi = g.maximum(pe, te)?;
    let enc_lo = g.minimum(ps, ts)?;
    let enc = g.sub(enc_hi, enc_lo)?;
    let enc2 = g.mul(enc, enc)?;
    let center_pen = g.div(d2, enc2)?;

    let one_minus_iou = {
        let n = g.neg(iou);
        g.add_const(n, 1.0)
    };
    let per = g.add(one_minus_iou, center_pen)?;
    Ok(g.mean(per))
}

/// Top-k MIL classification loss of the segment logits against the video
/// label with the background slot appended as positive.
pub fn mil_loss(g: &mut Graph, class_logits: Var, label: &[u8], k: usize) -> Result<Var> {
    let s = g.topk_mean_cols(class_logits, k)?;
    let p = g.softmax(s)?;
    let y = matching_targets(label, 1.0)?;
    cross_entropy(g, p, &y)
}

/// The localization loss terms, kept separate for logging.
pub struct LocLoss {
    pub focal: Var,
    pub diou: Var,
    pub mil: Var,
    pub total: Var,
}

/// Unweighted sum of focal, DIoU, and MIL terms for one video.
pub fn loc_loss(
    g: &mut Graph,
    class_logits: Var,
    offsets: Var,
    proposals: &[PseudoProposal],
    label: &[u8],
    cfg: &ModelConfig,
) -> Result<LocLoss> {
    let t = g.shape(class_logits)[0];
    let seg_labels = segment_pseudo_labels(proposals, t, cfg.n_classes);
    let focal = focal_loss(g, class_logits, &seg_labels, 2.0, Some(0.25))?;
    let targets = regression_targets(proposals, t);
    let diou = diou_loss(g, offsets, &targets)?;
    let mil = mil_loss(g, class_logits, label, cfg.k_for(t))?;
    let fd = g.add(focal, diou)?;
    let total = g.add(fd, mil)?;
    Ok(LocLoss { focal, diou, mil, total })
}
