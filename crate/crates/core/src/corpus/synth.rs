use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{CorpusConfig, GtInterval, VideoSample};
use crate::error::Result;
use crate::numerics::Tensor;

/// Class and background prototypes underlying a synthetic corpus.
///
/// Exposed so tests can run the nearest-prototype oracle against the same
/// dictionary the generator sampled from.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// Unit-norm per-class prototypes, one per stream: [C][dim].
    pub rgb: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub bg_rgb: Vec<f64>,
    pub bg_flow: Vec<f64>,
}

impl PrototypeBank {
    fn sample(n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let unit = |rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        };
        let rgb = (0..n_classes).map(|_| unit(rng)).collect();
        let flow = (0..n_classes).map(|_| unit(rng)).collect();
        let bg_rgb = unit(rng);
        let bg_flow = unit(rng);
        PrototypeBank { rgb, flow, bg_rgb, bg_flow }
    }
}

fn place_intervals(
    t: usize,
    n_wanted: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let min_len = (t / 12).max(4);
    let max_len = (t / 4).max(min_len + 1);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..n_wanted {
        let mut ok = None;
        for _attempt in 0..30 {
            let len = rng.gen_range(min_len..=max_len);
            if len >= t {
                continue;
            }
            let start = rng.gen_range(0..=t - len);
            let end = start + len;
            // keep a 2-segment buffer between intervals
            let clash = placed
                .iter()
                .any(|&(s, e)| start < e + 2 && s < end + 2);
            if !clash {
                ok = Some((start, end));
                break;
            }
        }
        if let Some(iv) = ok {
            placed.push(iv);
        }
    }
    placed.sort_unstable();
    placed
}

/// Quantize through f32 so feature files round-trip bit-exactly.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn synth_video(
    idx: usize,
    video_seed: u64,
    cfg: &CorpusConfig,
    bank: &PrototypeBank,
) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let t = rng.gen_range(cfg.t_range.0..=cfg.t_range.1);
    let n_int = rng.gen_range(1..=cfg.max_intervals);
    let spans = place_intervals(t, n_int, &mut rng);

    let mut gt = Vec::with_capacity(spans.len());
    let mut label = vec![0u8; cfg.n_classes];
    for &(s, e) in &spans {
        let class = rng.gen_range(0..cfg.n_classes);
        label[class] = 1;
        gt.push(GtInterval { class, start_seg: s as f64, end_seg: e as f64 });
    }
    let positives: Vec<usize> =
        label.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c).collect();

    let dim = cfg.feature_dim;
    let sigma = 1.0 / (cfg.snr * (dim as f64).sqrt());
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rgb = vec![0.0; t * dim];
    let mut flow = vec![0.0; t * dim];
    for seg in 0..t {
        let inside = gt.iter().find(|iv| (seg as f64) >= iv.start_seg && (seg as f64) < iv.end_seg);
        let (proto_r, proto_f, amp) = match inside {
            Some(iv) => (&bank.rgb[iv.class], &bank.flow[iv.class], 1.0),
            None => {
                if rng.gen::<f64>() < cfg.confuser_frac {
                    let c = positives[rng.gen_range(0..positives.len())];
                    (&bank.rgb[c], &bank.flow[c], cfg.confuser_amp)
                } else {
                    (&bank.bg_rgb, &bank.bg_flow, 1.0)
                }
            }
        };
        for d in 0..dim {
            rgb[seg * dim + d] = q32(amp * proto_r[d] + noise.sample(&mut rng));
            flow[seg * dim + d] = q32(amp * proto_f[d] + noise.sample(&mut rng));
        }
    }

    VideoSample {
        id: format!("video_{idx:04}"),
        rgb: Tensor::new(vec![t, dim], rgb).expect("rgb shape"),
        flow: Tensor::new(vec![t, dim], flow).expect("flow shape"),
        label,
        gt_intervals: gt,
        seconds_per_segment: q32(cfg.seconds_per_segment),
    }
}

/// Generate the synthetic untrimmed-video corpus plus the prototype bank it
/// was sampled from. Fully deterministic given the config seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<(Vec<VideoSample>, PrototypeBank)> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bank = PrototypeBank::sample(cfg.n_classes, cfg.feature_dim, &mut master);
    let video_seeds: Vec<u64> = (0..cfg.n_videos).map(|_| master.gen()).collect();
    let videos = video_seeds
        .iter()
        .enumerate()
        .map(|(idx, &vs)| synth_video(idx, vs, cfg, &bank))
        .collect();
    Ok((videos, bank))
}

/// Nearest-prototype segment classifier over the full generative dictionary
/// (class prototypes, confuser-scaled prototypes, background). Returns the
/// predicted class per segment, `None` meaning background.
pub fn nearest_prototype_segments(
    sample: &VideoSample,
    bank: &PrototypeBank,
    confuser_amp: f64,
) -> Vec<Option<usize>> {
    let dim = sample.rgb.cols();
    let t = sample.rgb.rows();
    let dist2 = |row: &[f64], proto: &[f64], amp: f64| -> f64 {
        row.iter().zip(proto).map(|(x, p)| (x - amp * p) * (x - amp * p)).sum()
    };
    (0..t)
        .map(|seg| {
            let r = &sample.rgb.data()[seg * dim..(seg + 1) * dim];
            let f = &sample.flow.data()[seg * dim..(seg + 1) * dim];
            let mut best = (dist2(r, &bank.bg_rgb, 1.0) + dist2(f, &bank.bg_flow, 1.0), None);
            for c in 0..bank.rgb.len() {
                let fg = dist2(r, &bank.rgb[c], 1.0) + dist2(f, &bank.flow[c], 1.0);
                if fg < best.0 {
                    best = (fg, Some(c));
                }
                let conf = dist2(r, &bank.rgb[c], confuser_amp) + dist2(f, &bank.flow[c], confuser_amp);
                if conf < best.0 {
                    best = (conf, None);
                }
            }
            best.1
        })
        .collect()
}
