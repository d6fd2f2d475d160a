//! Synthetic untrimmed-video corpus, feature-file ingestion, and the
//! deterministic description stub with its tokenizer and embedding table.

mod describe;
mod synth;
pub mod text;
mod wtf1;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use describe::{ClassDescription, DescribeClient, DescribeMode, DescriptionGenerator, DescriptionTable};
pub use synth::{generate_corpus, nearest_prototype_segments, PrototypeBank};
pub use text::{
    apply_mask, mask_count, mask_description, tokenize, Vocabulary, EMBED_DIM, MASK_ID,
    MASK_TOKEN, PAD_ID, PAD_TOKEN, START_ID, START_TOKEN,
};
pub use wtf1::{load_feature_file, write_feature_file};

/// Ground-truth action interval in segment coordinates (end exclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct GtInterval {
    pub class: usize,
    pub start_seg: f64,
    pub end_seg: f64,
}

/// One untrimmed video: per-segment RGB+flow features, a video-level
/// multi-hot label, and ground-truth intervals kept for evaluation only.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub id: String,
    /// [T, D] per-stream features.
    pub rgb: Tensor,
    pub flow: Tensor,
    /// Multi-hot over C classes; at least one positive entry.
    pub label: Vec<u8>,
    pub gt_intervals: Vec<GtInterval>,
    pub seconds_per_segment: f64,
}

impl VideoSample {
    pub fn n_segments(&self) -> usize {
        self.rgb.rows()
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        self.label.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c).collect()
    }
}

/// Key and complete descriptions for one video, with the fixed mask choice
/// for the reconstruction branch.
#[derive(Clone, Debug)]
pub struct DescriptionPair {
    pub video_id: String,
    /// Class whose descriptions were used (lowest positive label id).
    pub class: usize,
    pub key_text: Vec<String>,
    pub complete_text: Vec<String>,
    /// Distinct indices into `complete_text`, exactly ceil(m/3) of them.
    pub mask_positions: Vec<usize>,
}

impl DescriptionPair {
    /// The model input: complete text with selected positions masked.
    pub fn masked_tokens(&self) -> Vec<String> {
        text::apply_mask(&self.complete_text, &self.mask_positions)
    }

    /// Build the pair for a video from the description generator. The mask is
    /// seeded per video so corpora are reproducible from a single run seed.
    pub fn build(
        generator: &DescriptionGenerator,
        video: &VideoSample,
        seed: u64,
    ) -> Result<Self> {
        let class = *video
            .positive_classes()
            .first()
            .ok_or_else(|| Error::arg("DescriptionPair::build", "video has empty label"))?;
        let key_text = generator.describe_key(video, class)?;
        let complete_text = generator.describe_complete(video, class)?;
        let verbs = generator.verbs_for_class(class);
        let mask_seed = seed ^ fnv1a(video.id.as_bytes());
        let mask_positions = text::mask_description(&complete_text, &verbs, mask_seed)?;
        Ok(DescriptionPair { video_id: video.id.clone(), class, key_text, complete_text, mask_positions })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// Settings for the synthetic corpus generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub n_videos: usize,
    /// Inclusive segment-count range; within [16, 512].
    pub t_range: (usize, usize),
    /// Prototype-to-noise amplitude ratio; higher is cleaner.
    pub snr: f64,
    pub seed: u64,
    /// Per-stream feature dimensionality.
    pub feature_dim: usize,
    /// Fraction of background segments replaced by attenuated foreground
    /// prototypes, reproducing the over-complete failure mode.
    pub confuser_frac: f64,
    pub confuser_amp: f64,
    pub max_intervals: usize,
    pub seconds_per_segment: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_classes: 20,
            n_videos: 80,
            t_range: (64, 128),
            snr: 3.0,
            seed: 7,
            feature_dim: 1024,
            confuser_frac: 0.15,
            confuser_amp: 0.45,
            max_intervals: 4,
            seconds_per_segment: 1.0,
        }
    }
}

impl CorpusConfig {
    /// Desk-scale profile used by the acceptance runs: 5 classes, 80 videos
    /// (60 train / 20 test), compact features.
    pub fn desk_default() -> Self {
        CorpusConfig {
            n_classes: 5,
            n_videos: 80,
            t_range: (64, 128),
            snr: 3.0,
            seed: 7,
            feature_dim: 16,
            confuser_frac: 0.15,
            confuser_amp: 0.45,
            max_intervals: 4,
            seconds_per_segment: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.n_videos == 0 {
            return Err(Error::Config("n_videos must be positive".into()));
        }
        if self.t_range.0 < 16 || self.t_range.1 > 512 || self.t_range.0 > self.t_range.1 {
            return Err(Error::Config(format!("t_range {:?} must lie within [16, 512]", self.t_range)));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature_dim must be >= 2, got {}", self.feature_dim)));
        }
        if !(0.0..=1.0).contains(&self.confuser_frac) {
            return Err(Error::Config(format!("confuser_frac {} outside [0,1]", self.confuser_frac)));
        }
        if !(self.confuser_amp > 0.0 && self.confuser_amp < 1.0) {
            return Err(Error::Config(format!("confuser_amp {} outside (0,1)", self.confuser_amp)));
        }
        if self.max_intervals == 0 || self.max_intervals > 4 {
            return Err(Error::Config(format!("max_intervals {} outside 1..=4", self.max_intervals)));
        }
        if !(self.seconds_per_segment > 0.0) {
            return Err(Error::Config("seconds_per_segment must be positive".into()));
        }
        Ok(())
    }
}

/// On-disk index of a generated corpus directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub class_names: Vec<String>,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
    pub description_table: String,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn load_split(&self, dir: &Path, train: bool) -> Result<Vec<VideoSample>> {
        let files = if train { &self.train_files } else { &self.test_files };
        files.iter().map(|f| load_feature_file(&dir.join(f))).collect()
    }
}

/// Write a corpus directory: one WTF1 file per video, the description table,
/// and a manifest. The first `n_train` videos form the training split.
pub fn write_corpus_dir(
    dir: &Path,
    cfg: &CorpusConfig,
    n_train: usize,
    table: &DescriptionTable,
) -> Result<CorpusManifest> {
    if n_train >= cfg.n_videos {
        return Err(Error::Config(format!(
            "n_train {} must leave at least one test video of {}",
            n_train, cfg.n_videos
        )));
    }
    std::fs::create_dir_all(dir)?;
    let (videos, _) = generate_corpus(cfg)?;
    let mut train_files = Vec::new();
    let mut test_files = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        let name = format!("{}.wtf1", v.id);
        write_feature_file(&dir.join(&name), v)?;
        if i < n_train {
            train_files.push(name);
        } else {
            test_files.push(name);
        }
    }
    let table_name = "descriptions.tsv".to_string();
    table.save(&dir.join(&table_name))?;
    let manifest = CorpusManifest {
        config: cfg.clone(),
        class_names: table.class_names(),
        train_files,
        test_files,
        description_table: table_name,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Path of the manifest inside a corpus directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_classes: 3,
            n_videos: 6,
            t_range: (32, 48),
            snr: 4.0,
            seed: 11,
            feature_dim: 8,
            confuser_frac: 0.2,
            confuser_amp: 0.45,
            max_intervals: 3,
            seconds_per_segment: 1.0,
        }
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let cfg = small_cfg();
        let (a, _) = generate_corpus(&cfg).unwrap();
        let (b, _) = generate_corpus(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.rgb.data(), y.rgb.data());
            assert_eq!(x.flow.data(), y.flow.data());
            assert_eq!(x.gt_intervals, y.gt_intervals);
        }
    }

    #[test]
    fn labels_are_union_of_planted_intervals() {
        let (videos, _) = generate_corpus(&small_cfg()).unwrap();
        for v in &videos {
            let mut expect = vec![0u8; 3];
            for iv in &v.gt_intervals {
                expect[iv.class] = 1;
            }
            assert_eq!(v.label, expect, "{}", v.id);
            assert!(!v.gt_intervals.is_empty());
            for iv in &v.gt_intervals {
                assert!(iv.start_seg >= 0.0 && iv.start_seg < iv.end_seg);
                assert!(iv.end_seg <= v.n_segments() as f64);
            }
        }
    }

    #[test]
    fn infinite_snr_recovers_intervals_by_nearest_prototype() {
        let mut cfg = small_cfg();
        cfg.snr = 1e9;
        let (videos, bank) = generate_corpus(&cfg).unwrap();
        for v in &videos {
            let pred = nearest_prototype_segments(v, &bank, cfg.confuser_amp);
            for seg in 0..v.n_segments() {
                let truth = v
                    .gt_intervals
                    .iter()
                    .find(|iv| (seg as f64) >= iv.start_seg && (seg as f64) < iv.end_seg)
                    .map(|iv| iv.class);
                assert_eq!(pred[seg], truth, "{} segment {}", v.id, seg);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.n_classes = 1;
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.t_range = (8, 48);
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.t_range = (32, 1024);
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (videos, _) = generate_corpus(&small_cfg()).unwrap();
        for v in &videos {
            let path = dir.path().join(format!("{}.wtf1", v.id));
            write_feature_file(&path, v).unwrap();
            let back = load_feature_file(&path).unwrap();
            assert_eq!(back.id, v.id);
            assert_eq!(back.label, v.label);
            assert_eq!(back.rgb.data(), v.rgb.data());
            assert_eq!(back.flow.data(), v.flow.data());
            assert_eq!(back.gt_intervals, v.gt_intervals);
            assert_eq!(back.seconds_per_segment, v.seconds_per_segment);
        }
    }

    #[test]
    fn zero_t_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wtf1");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"WTF1");
        buf.extend_from_slice(&0u32.to_le_bytes()); // T = 0
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.push(0);
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        match load_feature_file(&path) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("T=0"), "{detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_expected_vs_actual() {
        let dir = tempfile::tempdir().unwrap();
        let (videos, _) = generate_corpus(&small_cfg()).unwrap();
        let path = dir.path().join("v.wtf1");
        write_feature_file(&path, &videos[0]).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = &full[..full.len() / 2];
        std::fs::write(&path, cut).unwrap();
        match load_feature_file(&path) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("truncated"), "{detail}");
                assert!(detail.contains(&format!("{}", cut.len())), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wtf1");
        std::fs::write(&path, b"NOPE0000000000000000000000").unwrap();
        match load_feature_file(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn describe_stub_is_deterministic_and_class_keyed() {
        let table = DescriptionTable::builtin(5);
        let generator = DescriptionGenerator::stub(table);
        let (videos, _) = generate_corpus(&small_cfg()).unwrap();
        let v = &videos[0];
        let cls = v.positive_classes()[0];
        let a = generator.describe_key(v, cls).unwrap();
        let b = generator.describe_key(v, cls).unwrap();
        assert_eq!(a, b);

        // two videos sharing a class receive the same key description
        if let Some(other) = videos[1..].iter().find(|o| o.label[cls] == 1) {
            assert_eq!(generator.describe_key(other, cls).unwrap(), a);
        }

        // class absent from the label is an argument error
        if let Some(neg) = (0..3).find(|&c| v.label[c] == 0) {
            assert!(matches!(generator.describe_key(v, neg), Err(Error::Argument { .. })));
        }
        assert!(matches!(generator.describe_key(v, 99), Err(Error::Argument { .. })));
    }

    #[test]
    fn complete_descriptions_are_long_and_contain_a_verb() {
        let table = DescriptionTable::builtin(25);
        for c in 0..25 {
            let e = table.entry(c).unwrap();
            let tokens = tokenize(&e.complete);
            assert!(tokens.len() >= 12, "class {c} complete too short: {}", tokens.len());
            assert!(
                e.verbs.iter().any(|v| tokens.contains(v)),
                "class {c} complete lacks all registered verbs"
            );
        }
    }

    #[test]
    fn description_table_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descriptions.tsv");
        let table = DescriptionTable::builtin(7);
        table.save(&path).unwrap();
        let back = DescriptionTable::load(&path).unwrap();
        assert_eq!(back.class_names(), table.class_names());
        for c in 0..7 {
            assert_eq!(back.entry(c).unwrap().key, table.entry(c).unwrap().key);
            assert_eq!(back.entry(c).unwrap().verbs, table.entry(c).unwrap().verbs);
        }
    }

    #[test]
    fn mask_counts_match_ceiling_rule() {
        assert_eq!(mask_count(6), 2);
        assert_eq!(mask_count(3), 1);
        assert_eq!(mask_count(7), 3);

        let tokens: Vec<String> = "one two three four five six".split(' ').map(String::from).collect();
        let pos = mask_description(&tokens, &[], 5).unwrap();
        assert_eq!(pos.len(), 2);
        let short: Vec<String> = "a b".split(' ').map(String::from).collect();
        assert!(matches!(mask_description(&short, &[], 5), Err(Error::Argument { .. })));
    }

    #[test]
    fn verb_masking_frequency_matches_weighted_oracle() {
        // one verb among six tokens, weight 2 vs 1, two draws without
        // replacement: P(verb masked) = 1 - (5/7)(4/6) = 11/21
        let tokens: Vec<String> =
            "the runner leaps over the bar".split(' ').map(String::from).collect();
        let verbs = vec!["leaps".to_string()];
        let verb_idx = 2;
        let oracle = 1.0 - (5.0 / 7.0) * (4.0 / 6.0);
        let trials = 10_000;
        let mut hits = 0;
        for seed in 0..trials {
            let pos = mask_description(&tokens, &verbs, seed).unwrap();
            assert_eq!(pos.len(), 2);
            if pos.contains(&verb_idx) {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - oracle).abs() <= 0.02, "freq {freq} vs oracle {oracle}");
    }

    #[test]
    fn vocabulary_embedding_contract() {
        let table = DescriptionTable::builtin(5);
        let sentences: Vec<String> = (0..5)
            .flat_map(|c| {
                let e = table.entry(c).unwrap();
                [e.key.clone(), e.complete.clone()]
            })
            .collect();
        let vocab = Vocabulary::build(sentences.iter().map(String::as_str), 42);

        let toks = vec!["leaps".to_string(), "leaps".to_string()];
        let (emb, oov) = vocab.embed_tokens(&toks);
        assert_eq!(oov, 0);
        assert_eq!(emb.data()[..EMBED_DIM], emb.data()[EMBED_DIM..]);

        // [MASK] row differs from all word rows
        let mask_row = vocab.embedding_row(MASK_ID).to_vec();
        for id in 3..vocab.len() {
            assert_ne!(vocab.embedding_row(id), &mask_row[..]);
        }

        // unknown words map to the [PAD] row and are counted
        let (emb, oov) = vocab.embed_tokens(&["zzzunknown".to_string()]);
        assert_eq!(oov, 1);
        assert_eq!(emb.data(), vocab.embedding_row(PAD_ID));
    }

    #[test]
    fn external_vector_file_overrides_exact_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        let mut vocab = Vocabulary::build(["the runner leaps"], 3);
        let mut line1 = String::from("leaps");
        let mut line2 = String::from("runner");
        for i in 0..EMBED_DIM {
            line1.push_str(&format!(" {}", i as f64 * 0.5));
            line2.push_str(&format!(" {}", -(i as f64)));
        }
        std::fs::write(&path, format!("{line1}\n{line2}\nabsent {}\n", vec!["0.0"; EMBED_DIM].join(" "))).unwrap();
        let before_the = vocab.embedding_row(vocab.id("the").unwrap()).to_vec();
        let replaced = vocab.load_vectors(&path).unwrap();
        assert_eq!(replaced, 2);
        assert_eq!(vocab.embedding_row(vocab.id("leaps").unwrap())[2], 1.0);
        assert_eq!(vocab.embedding_row(vocab.id("runner").unwrap())[1], -1.0);
        assert_eq!(vocab.embedding_row(vocab.id("the").unwrap()), &before_the[..]);
    }

    #[test]
    fn description_pair_mask_invariant_holds() {
        let table = DescriptionTable::builtin(3);
        let generator = DescriptionGenerator::stub(table);
        let (videos, _) = generate_corpus(&small_cfg()).unwrap();
        for v in &videos {
            let pair = DescriptionPair::build(&generator, v, 99).unwrap();
            let m = pair.complete_text.len();
            assert_eq!(pair.mask_positions.len(), mask_count(m));
            let mut sorted = pair.mask_positions.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), pair.mask_positions.len());
            assert!(pair.mask_positions.iter().all(|&p| p < m));
            let masked = pair.masked_tokens();
            for &p in &pair.mask_positions {
                assert_eq!(masked[p], MASK_TOKEN);
            }
        }
    }

    #[test]
    fn corpus_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let table = DescriptionTable::builtin(cfg.n_classes);
        let manifest = write_corpus_dir(dir.path(), &cfg, 4, &table).unwrap();
        assert_eq!(manifest.train_files.len(), 4);
        assert_eq!(manifest.test_files.len(), 2);
        let loaded = CorpusManifest::load(&manifest_path(dir.path())).unwrap();
        let train = loaded.load_split(dir.path(), true).unwrap();
        assert_eq!(train.len(), 4);
        let (orig, _) = generate_corpus(&cfg).unwrap();
        assert_eq!(train[0].rgb.data(), orig[0].rgb.data());
    }
}
