use std::time::Instant;

use wtal_core::corpus::{generate_corpus, CorpusConfig, DescriptionGenerator, DescriptionTable};
use wtal_core::dpid::{prepare_train_data, train, TrainConfig};
use wtal_core::evaluate::{infer, map_table, default_thresholds, InferSettings, VideoGt, VideoProposals};
use wtal_core::model::ModelConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mode = args.get(2).map(String::as_str).unwrap_or("full");
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);
    let snr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let conf: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.15);

    let mut ccfg = CorpusConfig::desk_default();
    ccfg.snr = snr;
    ccfg.confuser_frac = conf;
    let (videos, _) = generate_corpus(&ccfg).unwrap();
    let train_videos: Vec<_> = videos[..60].to_vec();
    let test_videos: Vec<_> = videos[60..].to_vec();

    let generator = DescriptionGenerator::stub(DescriptionTable::builtin(ccfg.n_classes));
    let data = prepare_train_data(train_videos, &generator, seed).unwrap();

    let model = ModelConfig {
        vocab_size: data.vocab.len(),
        max_key_len: data.query_texts.max_len,
        ..ModelConfig::desk(ccfg.n_classes, ccfg.feature_dim)
    };
    let mut cfg = TrainConfig::new(model);
    cfg.iterations = iters;
    cfg.seed = seed;
    cfg.checkpoint_period = iters;
    match mode {
        "base" => { cfg.enable_ksm = false; cfg.enable_csr = false; }
        "ksm" => { cfg.enable_csr = false; }
        "csr" => { cfg.enable_ksm = false; }
        _ => {}
    }

    let t0 = Instant::now();
    let out = train(&data, &cfg, |_| Ok(())).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let settings = InferSettings::default();
    let mut proposals = Vec::new();
    let mut gt = Vec::new();
    for v in &test_videos {
        let props = infer(v, &out.store, &cfg.model, cfg.attention_source(), &settings).unwrap();
        proposals.push(VideoProposals { video_id: v.id.clone(), proposals: props });
        gt.push(VideoGt::of_sample(v));
    }
    let n_props: usize = proposals.iter().map(|p| p.proposals.len()).sum();
    let n_gt: usize = gt.iter().map(|g| g.intervals.len()).sum();
    println!("  proposals {n_props} over {} videos, {n_gt} gt", gt.len());
    if let Some(vp) = proposals.iter().find(|p| !p.proposals.is_empty()) {
        println!("  sample {:?}", &vp.proposals[..vp.proposals.len().min(3)]);
        let g0 = gt.iter().find(|g| g.video_id == vp.video_id).unwrap();
        println!("  gt     {:?}", g0.intervals);
    }
    let report = map_table(&proposals, &gt, ccfg.n_classes, &default_thresholds()).unwrap();
    let eval_time = t1.elapsed().as_secs_f64();

    let m0 = &out.metrics[0];
    let ml = out.metrics.last().unwrap();
    println!(
        "mode={mode} iters={iters} seed={seed} snr={snr} conf={conf} train={train_time:.1}s eval={eval_time:.1}s"
    );
    println!(
        "  loss: l_match {:.3}->{:.3} l_ksm {:.3}->{:.3} l_loc {:?}->{:?} l_csr {:?}->{:?}",
        m0.l_match, ml.l_match, m0.l_ksm, ml.l_ksm,
        m0.l_loc.map(|v| (v * 1000.0).round() / 1000.0),
        ml.l_loc.map(|v| (v * 1000.0).round() / 1000.0),
        m0.l_csr.map(|v| (v * 1000.0).round() / 1000.0),
        ml.l_csr.map(|v| (v * 1000.0).round() / 1000.0),
    );
    println!("{}", report.text_table());
}
