//! Description-free inference and the localization metric stack: proposal
//! generation from the trained head, 1-D NMS, IoU, per-class average
//! precision, and mAP tables over IoU threshold ranges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoSample;
use crate::error::{Error, Result};
use crate::ksm;
use crate::lochead;
use crate::model::{attention_track, video_embedding, ModelConfig, ModelVars};
use crate::numerics::{Graph, ParamStore, Tensor};

/// One predicted action instance, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub class: usize,
    /// Outer-inner contrast confidence; may be negative.
    pub q: f64,
    pub t_s: f64,
    pub t_e: f64,
}

/// Proposals of one video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoProposals {
    pub video_id: String,
    pub proposals: Vec<Proposal>,
}

/// Ground truth of one video in seconds: (class, start, end).
#[derive(Clone, Debug)]
pub struct VideoGt {
    pub video_id: String,
    pub intervals: Vec<(usize, f64, f64)>,
}

impl VideoGt {
    pub fn of_sample(sample: &VideoSample) -> Self {
        let spp = sample.seconds_per_segment;
        VideoGt {
            video_id: sample.id.clone(),
            intervals: sample
                .gt_intervals
                .iter()
                .map(|iv| (iv.class, iv.start_seg * spp, iv.end_seg * spp))
                .collect(),
        }
    }
}

/// Intersection over union of two 1-D intervals; 0 when disjoint.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy per-class NMS by descending confidence, ties broken by earlier
/// start. A survivor suppresses anything of its class with IoU >= threshold,
/// so at threshold 1.0 only exact duplicates are removed.
pub fn nms(proposals: Vec<Proposal>, iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals;
    sorted.sort_by(|a, b| {
        b.q.partial_cmp(&a.q)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.t_s.partial_cmp(&b.t_s).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.t_e.partial_cmp(&b.t_e).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.class.cmp(&b.class))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        let clash = kept
            .iter()
            .any(|k| k.class == p.class && iou_1d((k.t_s, k.t_e), (p.t_s, p.t_e)) >= iou_threshold);
        if !clash {
            kept.push(p);
        }
    }
    kept
}

/// Detection with its video association, for corpus-level AP.
#[derive(Clone, Debug)]
struct Det {
    video: usize,
    q: f64,
    span: (f64, f64),
}

/// Interpolated average precision of one class over the corpus, replicating
/// the standard detection-evaluation semantics: detections greedily match
/// the highest-IoU unmatched ground truth of their video in score order.
/// Returns None when the class has no ground-truth instances.
fn average_precision(dets: &mut [Det], gts: &[Vec<(f64, f64)>], iou_thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.len()).sum();
    if npos == 0 {
        return None;
    }
    dets.sort_by(|a, b| {
        b.q.partial_cmp(&a.q)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.video.cmp(&b.video))
            .then(a.span.0.partial_cmp(&b.span.0).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets.iter() {
        let mut order: Vec<usize> = (0..gts[d.video].len()).collect();
        order.sort_by(|&i, &j| {
            iou_1d(d.span, gts[d.video][j])
                .partial_cmp(&iou_1d(d.span, gts[d.video][i]))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut hit = false;
        for gi in order {
            if iou_1d(d.span, gts[d.video][gi]) < iou_thr {
                break;
            }
            if !matched[d.video][gi] {
                matched[d.video][gi] = true;
                hit = true;
                break;
            }
        }
        tp.push(hit);
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut cum = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        if hit {
            cum += 1;
        }
        prec.push(cum as f64 / (i + 1) as f64);
        rec.push(cum as f64 / npos as f64);
    }
    Some(interpolated_ap(&prec, &rec))
}

/// AP from a precision/recall curve with right-monotonized precision,
/// integrated over the recall change points.
fn interpolated_ap(prec: &[f64], rec: &[f64]) -> f64 {
    let n = prec.len();
    let mut mprec = Vec::with_capacity(n + 2);
    mprec.push(0.0);
    mprec.extend_from_slice(prec);
    mprec.push(0.0);
    let mut mrec = Vec::with_capacity(n + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(rec);
    mrec.push(1.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mprec[i];
        }
    }
    ap
}

/// Per-threshold / per-class AP table with the range averages reported by
/// the standard protocol.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// per_class_ap[t][c]: AP of class c at thresholds[t]; None when the
    /// class has no ground truth in the split.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub map_at: Vec<f64>,
    pub avg_map_01_05: f64,
    pub avg_map_03_07: f64,
    pub avg_map_01_07: f64,
}

/// Default THUMOS-style threshold grid [0.1:0.1:0.7].
pub fn default_thresholds() -> Vec<f64> {
    (1..=7).map(|i| i as f64 / 10.0).collect()
}

fn range_avg(report_thresholds: &[f64], map_at: &[f64], lo: f64, hi: f64) -> f64 {
    let sel: Vec<f64> = report_thresholds
        .iter()
        .zip(map_at)
        .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
        .map(|(_, m)| *m)
        .collect();
    if sel.is_empty() {
        0.0
    } else {
        sel.iter().sum::<f64>() / sel.len() as f64
    }
}

/// Full evaluation: per-class interpolated AP at each IoU threshold, mean
/// over classes with ground truth, and the three range averages.
pub fn map_table(
    proposals: &[VideoProposals],
    gt: &[VideoGt],
    n_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let find = |id: &str| (0..gt.len()).find(|&i| gt[i].video_id == id);

    let mut per_video_props: Vec<Vec<Proposal>> = vec![Vec::new(); gt.len()];
    for vp in proposals {
        let idx = find(&vp.video_id).ok_or_else(|| {
            Error::arg("map_table", format!("proposals for unknown video {}", vp.video_id))
        })?;
        per_video_props[idx].extend(vp.proposals.iter().cloned());
    }

    let mut per_class_ap = Vec::with_capacity(thresholds.len());
    let mut map_at = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut row = Vec::with_capacity(n_classes);
        let mut sum = 0.0;
        let mut counted = 0usize;
        for c in 0..n_classes {
            let mut dets: Vec<Det> = Vec::new();
            for (vi, props) in per_video_props.iter().enumerate() {
                for p in props.iter().filter(|p| p.class == c) {
                    dets.push(Det { video: vi, q: p.q, span: (p.t_s, p.t_e) });
                }
            }
            let gts: Vec<Vec<(f64, f64)>> = gt
                .iter()
                .map(|v| {
                    v.intervals
                        .iter()
                        .filter(|(cls, _, _)| *cls == c)
                        .map(|&(_, s, e)| (s, e))
                        .collect()
                })
                .collect();
            let ap = average_precision(&mut dets, &gts, thr);
            if let Some(v) = ap {
                sum += v;
                counted += 1;
            }
            row.push(ap);
        }
        per_class_ap.push(row);
        map_at.push(if counted > 0 { sum / counted as f64 } else { 0.0 });
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        avg_map_01_05: range_avg(thresholds, &map_at, 0.1, 0.5),
        avg_map_03_07: range_avg(thresholds, &map_at, 0.3, 0.7),
        avg_map_01_07: range_avg(thresholds, &map_at, 0.1, 0.7),
        per_class_ap,
        map_at,
    })
}

impl EvalReport {
    /// Aligned plain-text table: one mAP column per threshold plus the three
    /// range averages.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str("IoU      ");
        for t in &self.thresholds {
            out.push_str(&format!("{t:>7.2}"));
        }
        out.push_str("  0.1:0.5  0.3:0.7  0.1:0.7\n");
        out.push_str("mAP(%)   ");
        for m in &self.map_at {
            out.push_str(&format!("{:>7.2}", m * 100.0));
        }
        out.push_str(&format!(
            "  {:>7.2}  {:>7.2}  {:>7.2}\n",
            self.avg_map_01_05 * 100.0,
            self.avg_map_03_07 * 100.0,
            self.avg_map_01_07 * 100.0
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV dump of per-video proposals: video_id,class,q,t_s,t_e.
pub fn proposals_csv(proposals: &[VideoProposals]) -> String {
    let mut out = String::from("video_id,class,q,t_s,t_e\n");
    for vp in proposals {
        for p in &vp.proposals {
            out.push_str(&format!("{},{},{},{},{}\n", vp.video_id, p.class, p.q, p.t_s, p.t_e));
        }
    }
    out
}

/// Which per-segment attention weights inference multiplies into the class
/// score track.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSource {
    /// Matching-branch attention stack.
    Matching,
    /// Reconstruction-branch attention stack.
    Reconstruction,
    /// No attention (weights all one).
    Flat,
}

/// Inference-time knobs.
#[derive(Clone, Debug)]
pub struct InferSettings {
    /// Thresholds swept over the attention-scaled class score track.
    pub sweep: Vec<f64>,
    pub nms_iou: f64,
    /// Minimum video-level class probability for a class to be localized.
    pub video_class_threshold: f64,
    /// Flank length as a fraction of the interval for outer-inner contrast.
    pub flank_frac: f64,
    /// Decode intervals from the regression offsets (run extents otherwise).
    pub use_offsets: bool,
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings {
            sweep: (1..=9).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.5,
            video_class_threshold: 0.1,
            flank_frac: 0.25,
            use_offsets: true,
        }
    }
}

/// Score tracks produced by the inference forward pass.
pub struct InferTracks {
    /// Per-segment class probabilities [T, C+1].
    pub seg_probs: Tensor,
    /// Attention weights, all ones under `AttentionSource::Flat`.
    pub attention: Vec<f64>,
    /// Per-segment decoded offsets [T, 2].
    pub offsets: Tensor,
    /// Video-level class distribution over C+1.
    pub video_probs: Vec<f64>,
}

/// Run the embedding, attention, and localization head in eval mode. No
/// description generator is consulted anywhere on this path.
pub fn infer_tracks(
    sample: &VideoSample,
    store: &ParamStore,
    cfg: &ModelConfig,
    attention: AttentionSource,
) -> Result<InferTracks> {
    let fused = ksm::fuse_sample(&sample.rgb, &sample.flow)?;
    let t = fused.rows();
    let mut g = Graph::new();
    let vars = ModelVars::frozen(&mut g, store);
    let f = g.input(&fused);
    // eval mode consumes no randomness; the rng is never touched
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f_e = video_embedding(&mut g, &vars, f, cfg, false, &mut rng)?;
    let att = match attention {
        AttentionSource::Matching => {
            Some(attention_track(&mut g, &vars, "att", f_e, cfg, false, &mut rng)?)
        }
        AttentionSource::Reconstruction => {
            Some(attention_track(&mut g, &vars, "csr.att", f_e, cfg, false, &mut rng)?)
        }
        AttentionSource::Flat => None,
    };
    let (logits, offsets) = lochead::head_forward(&mut g, &vars, f_e, cfg, false, &mut rng)?;
    let seg_probs = g.softmax(logits)?;
    let s = g.topk_mean_cols(logits, cfg.k_for(t))?;
    let p_vid = g.softmax(s)?;

    Ok(InferTracks {
        seg_probs: g.tensor(seg_probs),
        attention: att.map(|a| g.value(a).to_vec()).unwrap_or_else(|| vec![1.0; t]),
        offsets: g.tensor(offsets),
        video_probs: g.value(p_vid).to_vec(),
    })
}

/// Proposals for one video: threshold sweep over the attention-scaled class
/// score track, offsets decoded over each run, outer-inner contrast
/// confidence, per-class NMS, segment indices converted to seconds.
pub fn infer(
    sample: &VideoSample,
    store: &ParamStore,
    cfg: &ModelConfig,
    attention: AttentionSource,
    settings: &InferSettings,
) -> Result<Vec<Proposal>> {
    let tracks = infer_tracks(sample, store, cfg, attention)?;
    Ok(proposals_from_tracks(&tracks, cfg.n_classes, sample.seconds_per_segment, settings))
}

/// Pure post-processing of score tracks into proposals.
pub fn proposals_from_tracks(
    tracks: &InferTracks,
    n_classes: usize,
    seconds_per_segment: f64,
    settings: &InferSettings,
) -> Vec<Proposal> {
    let t = tracks.seg_probs.rows();
    let mut all = Vec::new();
    for c in 0..n_classes {
        if tracks.video_probs[c] < settings.video_class_threshold {
            continue;
        }
        let track: Vec<f64> =
            (0..t).map(|i| tracks.seg_probs.get2(i, c) * tracks.attention[i]).collect();
        let mut candidates: Vec<(f64, f64)> = Vec::new();
        for &thr in &settings.sweep {
            let mut start = None;
            for (i, &v) in track.iter().enumerate() {
                if v > thr {
                    start.get_or_insert(i);
                } else if let Some(s) = start.take() {
                    candidates.push(decode_run(tracks, s, i, t, settings));
                }
            }
            if let Some(s) = start {
                candidates.push(decode_run(tracks, s, t, t, settings));
            }
        }
        for (ps, pe) in candidates {
            if pe - ps < 0.25 {
                continue;
            }
            let q = outer_inner_contrast(&tracks.seg_probs, c, ps, pe, settings.flank_frac);
            all.push(Proposal {
                class: c,
                q,
                t_s: ps * seconds_per_segment,
                t_e: pe * seconds_per_segment,
            });
        }
    }
    nms(all, settings.nms_iou)
}

/// Decode one run into a fractional segment interval: the mean of the
/// per-segment regressed boundaries over the run (the run extent when
/// offsets are disabled).
fn decode_run(
    tracks: &InferTracks,
    s: usize,
    e: usize,
    t: usize,
    settings: &InferSettings,
) -> (f64, f64) {
    if !settings.use_offsets {
        return (s as f64, e as f64);
    }
    let n = (e - s) as f64;
    let mut ps = 0.0;
    let mut pe = 0.0;
    for i in s..e {
        let center = i as f64 + 0.5;
        ps += center - tracks.offsets.get2(i, 0);
        pe += center + tracks.offsets.get2(i, 1);
    }
    ps /= n;
    pe /= n;
    (ps.clamp(0.0, t as f64), pe.clamp(0.0, t as f64))
}

/// Mean class score inside the interval minus the mean over flanking regions
/// of `flank_frac` of the interval length on each side.
fn outer_inner_contrast(seg_probs: &Tensor, class: usize, ps: f64, pe: f64, flank_frac: f64) -> f64 {
    let t = seg_probs.rows();
    let seg_mean = |lo: f64, hi: f64| -> Option<f64> {
        let a = lo.floor().max(0.0) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(t);
        if a >= b {
            return None;
        }
        Some((a..b).map(|i| seg_probs.get2(i, class)).sum::<f64>() / (b - a) as f64)
    };
    let inner = seg_mean(ps, pe).unwrap_or(0.0);
    let flank = flank_frac * (pe - ps);
    let mut outer_sum = 0.0;
    let mut outer_n = 0usize;
    if let Some(left) = seg_mean(ps - flank, ps) {
        outer_sum += left;
        outer_n += 1;
    }
    if let Some(right) = seg_mean(pe, pe + flank) {
        outer_sum += right;
        outer_n += 1;
    }
    let outer = if outer_n > 0 { outer_sum / outer_n as f64 } else { 0.0 };
    inner - outer
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(class: usize, q: f64, t_s: f64, t_e: f64) -> Proposal {
        Proposal { class, q, t_s, t_e }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou_1d((2.0, 5.0), (2.0, 5.0)), 1.0);
        assert_eq!(iou_1d((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((iou_1d((0.0, 2.0), (1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_hand_trace_and_degenerate_cases() {
        let survivors = nms(
            vec![prop(0, 0.9, 0.0, 10.0), prop(0, 0.8, 1.0, 9.0), prop(0, 0.7, 20.0, 30.0)],
            0.5,
        );
        assert_eq!(survivors.len(), 2);
        assert_eq!(survivors[0].q, 0.9);
        assert_eq!(survivors[1].q, 0.7);

        assert!(nms(vec![], 0.5).is_empty());

        // threshold 1.0: only exact duplicates suppressed
        let survivors = nms(
            vec![prop(0, 0.9, 0.0, 10.0), prop(0, 0.8, 0.0, 10.0), prop(0, 0.7, 0.0, 9.9)],
            1.0,
        );
        assert_eq!(survivors.len(), 2);

        // different classes never suppress each other
        let survivors = nms(vec![prop(0, 0.9, 0.0, 10.0), prop(1, 0.8, 0.0, 10.0)], 0.5);
        assert_eq!(survivors.len(), 2);
    }

    #[test]
    fn nms_survivors_form_subset_with_bounded_overlap() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let props: Vec<Proposal> = (0..20)
                .map(|_| {
                    let s = rand::Rng::gen_range(&mut rng, 0.0..50.0);
                    prop(
                        rand::Rng::gen_range(&mut rng, 0..3usize),
                        rand::Rng::gen_range(&mut rng, 0.0..1.0),
                        s,
                        s + rand::Rng::gen_range(&mut rng, 1.0..10.0),
                    )
                })
                .collect();
            let thr = 0.4;
            let kept = nms(props.clone(), thr);
            assert!(kept.len() <= props.len());
            for k in &kept {
                assert!(props.iter().any(|p| p == k));
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class == kept[j].class {
                        assert!(
                            iou_1d((kept[i].t_s, kept[i].t_e), (kept[j].t_s, kept[j].t_e)) < thr
                        );
                    }
                }
            }
        }
    }

    fn single_class_report(
        props: Vec<(f64, f64, f64)>,
        gts: Vec<(f64, f64)>,
        thr: f64,
    ) -> f64 {
        let proposals = vec![VideoProposals {
            video_id: "v".into(),
            proposals: props.into_iter().map(|(q, s, e)| prop(0, q, s, e)).collect(),
        }];
        let gt = vec![VideoGt {
            video_id: "v".into(),
            intervals: gts.into_iter().map(|(s, e)| (0, s, e)).collect(),
        }];
        map_table(&proposals, &gt, 1, &[thr]).unwrap().map_at[0]
    }

    #[test]
    fn ap_perfect_false_leader_and_empty() {
        // one GT, one overlapping proposal
        assert_eq!(single_class_report(vec![(0.9, 0.0, 10.0)], vec![(0.0, 10.0)], 0.5), 1.0);

        // higher-scored false proposal halves the AP
        let ap = single_class_report(
            vec![(0.9, 50.0, 60.0), (0.8, 0.0, 10.0)],
            vec![(0.0, 10.0)],
            0.5,
        );
        assert!((ap - 0.5).abs() < 1e-12);

        // no proposals
        assert_eq!(single_class_report(vec![], vec![(0.0, 10.0)], 0.5), 0.0);
    }

    #[test]
    fn ap_monotone_in_threshold() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let props: Vec<(f64, f64, f64)> = (0..8)
                .map(|_| {
                    let s = rand::Rng::gen_range(&mut rng, 0.0..40.0);
                    (
                        rand::Rng::gen_range(&mut rng, 0.0..1.0),
                        s,
                        s + rand::Rng::gen_range(&mut rng, 1.0..8.0),
                    )
                })
                .collect();
            let gts: Vec<(f64, f64)> = (0..3)
                .map(|i| {
                    let s = 15.0 * i as f64 + rand::Rng::gen_range(&mut rng, 0.0..3.0);
                    (s, s + rand::Rng::gen_range(&mut rng, 2.0..8.0))
                })
                .collect();
            let mut prev = f64::INFINITY;
            for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let ap = single_class_report(props.clone(), gts.clone(), thr);
                assert!(ap <= prev + 1e-12, "AP not monotone: {ap} after {prev}");
                prev = ap;
            }
        }
    }

    /// Brute-force AP oracle: re-matches every prefix of the ranked
    /// detections from scratch and integrates max-precision over recall.
    pub fn oracle_ap(
        dets: &[(usize, f64, (f64, f64))],
        gts: &[Vec<(f64, f64)>],
        thr: f64,
    ) -> Option<f64> {
        let npos: usize = gts.iter().map(|g| g.len()).sum();
        if npos == 0 {
            return None;
        }
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.2 .0.partial_cmp(&b.2 .0).unwrap_or(std::cmp::Ordering::Equal))
        });
        let match_prefix = |k: usize| -> usize {
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = 0;
            for d in &sorted[..k] {
                let mut best: Option<(f64, usize)> = None;
                for (gi, g) in gts[d.0].iter().enumerate() {
                    if matched[d.0][gi] {
                        continue;
                    }
                    let iou = iou_1d(d.2, *g);
                    if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                        best = Some((iou, gi));
                    }
                }
                if let Some((_, gi)) = best {
                    matched[d.0][gi] = true;
                    tp += 1;
                }
            }
            tp
        };
        let n = sorted.len();
        let mut prec = Vec::with_capacity(n);
        let mut rec = Vec::with_capacity(n);
        for k in 1..=n {
            let tp = match_prefix(k);
            prec.push(tp as f64 / k as f64);
            rec.push(tp as f64 / npos as f64);
        }
        let mut ap = 0.0;
        let mut prev_rec = 0.0;
        for k in 0..n {
            if rec[k] > prev_rec {
                let peak = prec[k..].iter().cloned().fold(0.0, f64::max);
                ap += (rec[k] - prev_rec) * peak;
                prev_rec = rec[k];
            }
        }
        Some(ap)
    }

    #[test]
    fn map_table_matches_brute_force_oracle_on_random_instances() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _trial in 0..200 {
            let n_videos = rand::Rng::gen_range(&mut rng, 1..=5usize);
            let n_classes = 2;
            let mut proposals = Vec::new();
            let mut gt = Vec::new();
            for v in 0..n_videos {
                let mut props = Vec::new();
                for _ in 0..rand::Rng::gen_range(&mut rng, 0..=10usize) {
                    let s = rand::Rng::gen_range(&mut rng, 0.0..30.0);
                    props.push(prop(
                        rand::Rng::gen_range(&mut rng, 0..n_classes),
                        rand::Rng::gen_range(&mut rng, 0.0..1.0),
                        s,
                        s + rand::Rng::gen_range(&mut rng, 0.5..8.0),
                    ));
                }
                let mut intervals = Vec::new();
                for _ in 0..rand::Rng::gen_range(&mut rng, 0..=3usize) {
                    let s = rand::Rng::gen_range(&mut rng, 0.0..25.0);
                    intervals.push((
                        rand::Rng::gen_range(&mut rng, 0..n_classes),
                        s,
                        s + rand::Rng::gen_range(&mut rng, 1.0..6.0),
                    ));
                }
                proposals.push(VideoProposals { video_id: format!("v{v}"), proposals: props });
                gt.push(VideoGt { video_id: format!("v{v}"), intervals });
            }
            let thresholds = [0.1, 0.4, 0.7];
            let report = map_table(&proposals, &gt, n_classes, &thresholds).unwrap();
            for (ti, &thr) in thresholds.iter().enumerate() {
                for c in 0..n_classes {
                    let dets: Vec<(usize, f64, (f64, f64))> = proposals
                        .iter()
                        .enumerate()
                        .flat_map(|(vi, vp)| {
                            vp.proposals
                                .iter()
                                .filter(|p| p.class == c)
                                .map(move |p| (vi, p.q, (p.t_s, p.t_e)))
                        })
                        .collect();
                    let gts: Vec<Vec<(f64, f64)>> = gt
                        .iter()
                        .map(|v| {
                            v.intervals
                                .iter()
                                .filter(|(cls, _, _)| *cls == c)
                                .map(|&(_, s, e)| (s, e))
                                .collect()
                        })
                        .collect();
                    let want = oracle_ap(&dets, &gts, thr);
                    let got = report.per_class_ap[ti][c];
                    match (got, want) {
                        (None, None) => {}
                        (Some(a), Some(b)) => {
                            assert!((a - b).abs() < 1e-9, "AP mismatch {a} vs {b}")
                        }
                        other => panic!("AP presence mismatch {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_predictions_reach_map_one_and_video_order_is_irrelevant() {
        let gt: Vec<VideoGt> = (0..3)
            .map(|v| VideoGt {
                video_id: format!("v{v}"),
                intervals: vec![(0, 2.0, 8.0), (1, 12.0 + v as f64, 20.0)],
            })
            .collect();
        let proposals: Vec<VideoProposals> = gt
            .iter()
            .map(|g| VideoProposals {
                video_id: g.video_id.clone(),
                proposals: g
                    .intervals
                    .iter()
                    .map(|&(c, s, e)| prop(c, 1.0, s, e))
                    .collect(),
            })
            .collect();
        let thresholds = default_thresholds();
        let report = map_table(&proposals, &gt, 2, &thresholds).unwrap();
        for m in &report.map_at {
            assert!((m - 1.0).abs() < 1e-12);
        }
        assert!((report.avg_map_01_07 - 1.0).abs() < 1e-12);

        let mut shuffled_props = proposals.clone();
        shuffled_props.rotate_left(1);
        let report2 = map_table(&shuffled_props, &gt, 2, &thresholds).unwrap();
        assert_eq!(report.map_at, report2.map_at);
    }

    #[test]
    fn report_round_trips_through_json_and_renders_table() {
        let gt = vec![VideoGt { video_id: "v".into(), intervals: vec![(0, 0.0, 5.0)] }];
        let proposals =
            vec![VideoProposals { video_id: "v".into(), proposals: vec![prop(0, 0.8, 0.0, 5.0)] }];
        let report = map_table(&proposals, &gt, 2, &default_thresholds()).unwrap();
        let json = report.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let table = report.text_table();
        assert!(table.contains("0.1:0.7"));
        // class 1 has no ground truth anywhere: excluded, not zero
        assert!(report.per_class_ap[0][1].is_none());
        assert_eq!(report.per_class_ap[0][0], Some(1.0));
    }

    #[test]
    fn proposals_from_plateau_track() {
        // a single clean plateau must survive as one proposal covering it
        let t = 30usize;
        let mut probs = Tensor::full(vec![t, 3], 0.05);
        for i in 10..20 {
            probs.set2(i, 0, 0.9);
        }
        let mut offsets = Tensor::zeros(vec![t, 2]);
        for i in 10..20 {
            offsets.set2(i, 0, i as f64 + 0.5 - 10.0);
            offsets.set2(i, 1, 20.0 - i as f64 - 0.5);
        }
        let tracks = InferTracks {
            seg_probs: probs,
            attention: vec![1.0; t],
            offsets,
            video_probs: vec![0.8, 0.05, 0.15],
        };
        let props = proposals_from_tracks(&tracks, 2, 1.0, &InferSettings::default());
        assert_eq!(props.len(), 1, "{props:?}");
        assert_eq!(props[0].class, 0);
        assert!(props[0].t_s >= 9.0 && props[0].t_s <= 11.0, "{props:?}");
        assert!(props[0].t_e >= 19.0 && props[0].t_e <= 21.0, "{props:?}");
        assert!(props[0].q > 0.5);

        // empty score track → empty list
        let tracks = InferTracks {
            seg_probs: Tensor::full(vec![t, 3], 0.01),
            attention: vec![0.0; t],
            offsets: Tensor::zeros(vec![t, 2]),
            video_probs: vec![0.8, 0.1, 0.1],
        };
        let props = proposals_from_tracks(&tracks, 2, 1.0, &InferSettings::default());
        assert!(props.is_empty());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let vps = vec![VideoProposals {
            video_id: "vid".into(),
            proposals: vec![prop(1, 0.5, 1.0, 2.0)],
        }];
        let csv = proposals_csv(&vps);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "video_id,class,q,t_s,t_e");
        assert_eq!(lines.next().unwrap(), "vid,1,0.5,1,2");
    }
}
