//! Deterministic synthetic multilingual parallel corpora.
//!
//! Each "language pair" is a bijective token transform over a shared payload
//! vocabulary. Source sentences carry a language-tag token at position 0 to
//! select the target language; the target is the transformed payload. Split
//! sizes are fully controllable, which is how data imbalance (and with it
//! convergence inconsistency) is induced.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{BOS_ID, EOS_ID, PAD_ID};

/// Dense row-major matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Self {
        assert_eq!(rows * cols, data.len());
        IdMatrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Bijective payload transform defining one synthetic "language pair".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Per-token permutation of the payload vocabulary.
    Permutation { param: u64 },
    /// Sequence reversal followed by a token permutation.
    ReversalPermutation { param: u64 },
    /// Cyclic shift of payload indices by `k`.
    Shift { k: usize },
}

impl Transform {
    /// Materializes the token map over payload indices `0..payload_size`.
    fn token_map(&self, payload_size: usize) -> Result<Vec<u32>> {
        match *self {
            Transform::Permutation { param } | Transform::ReversalPermutation { param } => {
                let mut map: Vec<u32> = (0..payload_size as u32).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(param);
                for i in (1..payload_size).rev() {
                    let j = rng.gen_range(0..=i);
                    map.swap(i, j);
                }
                Ok(map)
            }
            Transform::Shift { k } => {
                if k >= payload_size {
                    return Err(Error::InvalidTransform(format!(
                        "shift k={k} not bijective on payload vocabulary of size {payload_size}"
                    )));
                }
                Ok((0..payload_size).map(|i| ((i + k) % payload_size) as u32).collect())
            }
        }
    }

    fn reverses(&self) -> bool {
        matches!(self, Transform::ReversalPermutation { .. })
    }

    /// Applies the transform to a payload-index sequence.
    pub fn apply(&self, payload: &[u32], payload_size: usize) -> Result<Vec<u32>> {
        let map = self.token_map(payload_size)?;
        let mut out: Vec<u32> = payload.iter().map(|&t| map[t as usize]).collect();
        if self.reverses() {
            out.reverse();
        }
        Ok(out)
    }
}

/// One language pair's generation parameters.
#[derive(Debug, Clone)]
pub struct LanguageSpec {
    pub name: String,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub transform: Transform,
    pub payload_len_range: (usize, usize),
}

/// One sentence pair. `src` is [tag, payload...]; `tgt` is the transformed
/// payload. Begin/end markers are added at batching time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct LangData {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl LangData {
    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Generated multilingual corpus with its shared vocabulary.
///
/// Vocabulary layout: id 0 `<pad>`, 1 `<bos>`, 2 `<eos>`, then one tag token
/// per target language, then payload tokens `w0..`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub languages: Vec<String>,
    pub vocab: Vec<String>,
    pub payload_size: usize,
    pub data: Vec<LangData>,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn tag_id(&self, lang: usize) -> u32 {
        3 + lang as u32
    }

    pub fn payload_base(&self) -> u32 {
        3 + self.languages.len() as u32
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.train.len()).collect()
    }

    pub fn lang_index(&self, name: &str) -> Option<usize> {
        self.languages.iter().position(|n| n == name)
    }

    /// Longest sequence batching can emit: tag + payload + end marker.
    pub fn max_emitted_len(&self) -> usize {
        let mut m = 0;
        for d in &self.data {
            for pair in d.train.iter().chain(&d.dev).chain(&d.test) {
                m = m.max(pair.src.len()).max(pair.tgt.len() + 1);
            }
        }
        m
    }
}

fn lang_seed(seed: u64, lang: usize) -> u64 {
    seed.wrapping_add((lang as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generates a corpus fully determined by `(specs, payload_vocab_size, seed)`.
///
/// Per language, train/dev/test are drawn from disjoint index ranges of one
/// generator stream, with rejection on duplicate source payloads so the
/// splits are disjoint.
pub fn generate_corpus(
    specs: &[LanguageSpec],
    payload_vocab_size: usize,
    seed: u64,
) -> Result<Corpus> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("at least one language is required".into()));
    }
    if payload_vocab_size == 0 {
        return Err(Error::InvalidConfig("payload vocabulary must be non-empty".into()));
    }
    let mut vocab = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
    for s in specs {
        vocab.push(format!("<2{}>", s.name));
    }
    for i in 0..payload_vocab_size {
        vocab.push(format!("w{i}"));
    }
    debug_assert_eq!(vocab[PAD_ID as usize], "<pad>");
    debug_assert_eq!(vocab[BOS_ID as usize], "<bos>");
    debug_assert_eq!(vocab[EOS_ID as usize], "<eos>");

    let payload_base = 3 + specs.len() as u32;
    let mut data = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        let (lo, hi) = spec.payload_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "language {}: bad payload_len_range [{lo},{hi}]",
                spec.name
            )));
        }
        if spec.train_size == 0 || spec.dev_size == 0 || spec.test_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "language {}: split sizes must be >= 1",
                spec.name
            )));
        }
        // Fails fast on non-bijective parameters.
        spec.transform.token_map(payload_vocab_size)?;

        let mut rng = ChaCha8Rng::seed_from_u64(lang_seed(seed, l));
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let tag = 3 + l as u32;
        let mut gen_split = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Pair>> {
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                let mut attempts = 0;
                let payload = loop {
                    let len = rng.gen_range(lo..=hi);
                    let p: Vec<u32> =
                        (0..len).map(|_| rng.gen_range(0..payload_vocab_size as u32)).collect();
                    if seen.insert(p.clone()) {
                        break p;
                    }
                    attempts += 1;
                    if attempts > 10_000 {
                        return Err(Error::InvalidConfig(format!(
                            "language {}: payload space too small for disjoint splits",
                            spec.name
                        )));
                    }
                };
                let tgt_payload = spec.transform.apply(&payload, payload_vocab_size)?;
                let mut src = Vec::with_capacity(payload.len() + 1);
                src.push(tag);
                src.extend(payload.iter().map(|&t| payload_base + t));
                let tgt: Vec<u32> = tgt_payload.iter().map(|&t| payload_base + t).collect();
                pairs.push(Pair { src, tgt });
            }
            Ok(pairs)
        };
        let train = gen_split(spec.train_size, &mut rng)?;
        let dev = gen_split(spec.dev_size, &mut rng)?;
        let test = gen_split(spec.test_size, &mut rng)?;
        data.push(LangData { train, dev, test });
    }

    Ok(Corpus {
        languages: specs.iter().map(|s| s.name.clone()).collect(),
        vocab,
        payload_size: payload_vocab_size,
        data,
    })
}

/// p_l ∝ (n_l / Σn)^{1/τ}, normalized.
pub fn temperature_probs(sizes: &[usize], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("language sizes must be > 0".into()));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| (n as f64 / total).powf(1.0 / tau)).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Categorical draw over `probs`.
pub fn sample_language(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Padded mini-batch. Target rows carry the end marker; `tgt_mask` is 1.0 on
/// real target tokens (including the end marker) and 0.0 on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: IdMatrix,
    pub tgt: IdMatrix,
    pub tgt_mask: Vec<f32>,
}

pub fn make_batch(corpus: &Corpus, lang: usize, split: Split, indices: &[usize]) -> Result<Batch> {
    if lang >= corpus.data.len() {
        return Err(Error::IndexOutOfRange { index: lang, what: "language", size: corpus.data.len() });
    }
    let pairs = corpus.data[lang].split(split);
    let mut src_len = 0;
    let mut tgt_len = 0;
    for &i in indices {
        let pair = pairs.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            what: "pair",
            size: pairs.len(),
        })?;
        src_len = src_len.max(pair.src.len());
        tgt_len = tgt_len.max(pair.tgt.len() + 1); // + end marker
    }
    let b = indices.len();
    let mut src = vec![PAD_ID; b * src_len];
    let mut tgt = vec![PAD_ID; b * tgt_len];
    let mut mask = vec![0.0f32; b * tgt_len];
    for (r, &i) in indices.iter().enumerate() {
        let pair = &pairs[i];
        src[r * src_len..r * src_len + pair.src.len()].copy_from_slice(&pair.src);
        tgt[r * tgt_len..r * tgt_len + pair.tgt.len()].copy_from_slice(&pair.tgt);
        tgt[r * tgt_len + pair.tgt.len()] = EOS_ID;
        for m in &mut mask[r * tgt_len..r * tgt_len + pair.tgt.len() + 1] {
            *m = 1.0;
        }
    }
    Ok(Batch {
        src: IdMatrix::new(b, src_len, src),
        tgt: IdMatrix::new(b, tgt_len, tgt),
        tgt_mask: mask,
    })
}

/// Writes the corpus export: one `{lang}.{split}.txt` per language/split
/// ("src-tokens<TAB>tgt-tokens", surface forms), plus `vocab.txt`
/// ("id<TAB>surface", sorted by id).
pub fn export_dir(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut vf = String::new();
    for (id, surface) in corpus.vocab.iter().enumerate() {
        writeln!(vf, "{id}\t{surface}").unwrap();
    }
    std::fs::write(dir.join("vocab.txt"), vf)?;
    for (l, name) in corpus.languages.iter().enumerate() {
        for split in [Split::Train, Split::Dev, Split::Test] {
            let mut out = String::new();
            for pair in corpus.data[l].split(split) {
                let render = |seq: &[u32]| {
                    seq.iter()
                        .map(|&t| corpus.vocab[t as usize].as_str())
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                writeln!(out, "{}\t{}", render(&pair.src), render(&pair.tgt)).unwrap();
            }
            std::fs::write(dir.join(format!("{name}.{}.txt", split.name())), out)?;
        }
    }
    Ok(())
}

/// Reads a corpus back from its export directory.
pub fn load_dir(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join("vocab.txt");
    let malformed = |path: &Path, reason: String| Error::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(&vocab_path)?;
    let mut vocab = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let (id, surface) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&vocab_path, format!("line {}: missing tab", ln + 1)))?;
        let id: usize = id
            .parse()
            .map_err(|_| malformed(&vocab_path, format!("line {}: bad id", ln + 1)))?;
        if id != vocab.len() {
            return Err(malformed(&vocab_path, format!("non-dense vocabulary id {id}")));
        }
        vocab.push(surface.to_string());
    }
    if vocab.len() < 3 || vocab[0] != "<pad>" || vocab[1] != "<bos>" || vocab[2] != "<eos>" {
        return Err(malformed(&vocab_path, "missing reserved tokens".into()));
    }
    let languages: Vec<String> = vocab[3..]
        .iter()
        .take_while(|s| s.starts_with("<2") && s.ends_with('>'))
        .map(|s| s[2..s.len() - 1].to_string())
        .collect();
    if languages.is_empty() {
        return Err(malformed(&vocab_path, "no language tag tokens".into()));
    }
    let payload_size = vocab.len() - 3 - languages.len();
    let id_of: std::collections::HashMap<&str, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();

    let mut data = Vec::with_capacity(languages.len());
    for name in &languages {
        let mut lang_data = LangData::default();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = dir.join(format!("{name}.{}.txt", split.name()));
            let text = std::fs::read_to_string(&path)?;
            let mut pairs = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                let (src, tgt) = line
                    .split_once('\t')
                    .ok_or_else(|| malformed(&path, format!("line {}: missing tab", ln + 1)))?;
                let parse_seq = |side: &str| -> Result<Vec<u32>> {
                    side.split_whitespace()
                        .map(|tok| {
                            id_of.get(tok).copied().ok_or_else(|| {
                                malformed(&path, format!("line {}: unknown token {tok:?}", ln + 1))
                            })
                        })
                        .collect()
                };
                pairs.push(Pair { src: parse_seq(src)?, tgt: parse_seq(tgt)? });
            }
            match split {
                Split::Train => lang_data.train = pairs,
                Split::Dev => lang_data.dev = pairs,
                Split::Test => lang_data.test = pairs,
            }
        }
        data.push(lang_data);
    }
    Ok(Corpus { languages, vocab, payload_size, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_specs() -> Vec<LanguageSpec> {
        vec![
            LanguageSpec {
                name: "aa".into(),
                train_size: 20,
                dev_size: 5,
                test_size: 5,
                transform: Transform::Permutation { param: 11 },
                payload_len_range: (3, 6),
            },
            LanguageSpec {
                name: "bb".into(),
                train_size: 30,
                dev_size: 5,
                test_size: 5,
                transform: Transform::ReversalPermutation { param: 5 },
                payload_len_range: (3, 6),
            },
        ]
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_specs(), 20, 9).unwrap();
        let b = generate_corpus(&small_specs(), 20, 9).unwrap();
        assert_eq!(a.vocab, b.vocab);
        for (da, db) in a.data.iter().zip(&b.data) {
            assert_eq!(da.train, db.train);
            assert_eq!(da.dev, db.dev);
            assert_eq!(da.test, db.test);
        }
    }

    #[test]
    fn shift_zero_is_identity() {
        let t = Transform::Shift { k: 0 };
        assert_eq!(t.apply(&[3, 1, 4], 10).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn shift_k_at_least_payload_size_rejected() {
        let t = Transform::Shift { k: 10 };
        assert!(t.apply(&[0], 10).is_err());
    }

    #[test]
    fn reversal_reverses() {
        // Permutation seeded arbitrarily; verify order reversal via the
        // composed map.
        let t = Transform::ReversalPermutation { param: 3 };
        let map = Transform::Permutation { param: 3 }.apply(&[0, 1, 2], 8).unwrap();
        let out = t.apply(&[0, 1, 2], 8).unwrap();
        assert_eq!(out, vec![map[2], map[1], map[0]]);
    }

    #[test]
    fn pairs_satisfy_transform_and_tag_invariants() {
        let specs = small_specs();
        let corpus = generate_corpus(&specs, 20, 1).unwrap();
        let base = corpus.payload_base();
        for (l, spec) in specs.iter().enumerate() {
            for pair in corpus.data[l]
                .train
                .iter()
                .chain(&corpus.data[l].dev)
                .chain(&corpus.data[l].test)
            {
                assert_eq!(pair.src[0], corpus.tag_id(l));
                let payload: Vec<u32> = pair.src[1..].iter().map(|&t| t - base).collect();
                let expect = spec.transform.apply(&payload, 20).unwrap();
                let got: Vec<u32> = pair.tgt.iter().map(|&t| t - base).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_per_language() {
        let corpus = generate_corpus(&small_specs(), 20, 3).unwrap();
        for d in &corpus.data {
            let train: HashSet<_> = d.train.iter().map(|p| p.src.clone()).collect();
            let dev: HashSet<_> = d.dev.iter().map(|p| p.src.clone()).collect();
            let test: HashSet<_> = d.test.iter().map(|p| p.src.clone()).collect();
            assert!(train.is_disjoint(&dev));
            assert!(train.is_disjoint(&test));
            assert!(dev.is_disjoint(&test));
        }
    }

    #[test]
    fn temperature_probs_proportional_at_tau_one() {
        let p = temperature_probs(&[1, 3], 1.0).unwrap();
        assert_eq!(p, vec![0.25, 0.75]);
    }

    #[test]
    fn temperature_probs_sqrt_case() {
        // sizes [1,4], tau=2: sqrt(0.2), sqrt(0.8) normalize to [1/3, 2/3]
        let p = temperature_probs(&[1, 4], 2.0).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn temperature_probs_high_tau_is_uniform() {
        let p = temperature_probs(&[1, 3], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-5);
        assert!((p[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn temperature_probs_rejects_bad_inputs() {
        assert!(temperature_probs(&[0, 3], 1.0).is_err());
        assert!(temperature_probs(&[1, 3], 0.0).is_err());
        assert!(temperature_probs(&[1, 3], -1.0).is_err());
    }

    #[test]
    fn sample_language_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_language(&[1.0, 0.0], &mut rng), 0);
        }
    }

    #[test]
    fn sample_language_reproducible() {
        let draws = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_language(&[0.2, 0.5, 0.3], &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draws(5), draws(5));
    }

    #[test]
    fn make_batch_pads_and_masks() {
        let corpus = generate_corpus(&small_specs(), 20, 1).unwrap();
        // Find two train pairs with different target lengths.
        let pairs = &corpus.data[0].train;
        let (mut i3, mut i5) = (None, None);
        for (i, p) in pairs.iter().enumerate() {
            if p.tgt.len() == 3 {
                i3 = Some(i);
            }
            if p.tgt.len() == 5 {
                i5 = Some(i);
            }
        }
        let (i3, i5) = (i3.unwrap(), i5.unwrap());
        let batch = make_batch(&corpus, 0, Split::Train, &[i3, i5]).unwrap();
        assert_eq!(batch.tgt.cols, 6); // 5 + EOS
        assert_eq!(&batch.tgt_mask[0..6], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&batch.tgt_mask[6..12], &[1.0; 6]);
        assert_eq!(batch.tgt.get(0, 3), EOS_ID);
        let total: f32 = batch.tgt_mask.iter().sum();
        assert_eq!(total as usize, (3 + 1) + (5 + 1));
    }

    #[test]
    fn make_batch_single_pair_no_padding() {
        let corpus = generate_corpus(&small_specs(), 20, 1).unwrap();
        let pair = &corpus.data[1].dev[0];
        let batch = make_batch(&corpus, 1, Split::Dev, &[0]).unwrap();
        assert_eq!(batch.src.row(0), &pair.src[..]);
        let mut want_tgt = pair.tgt.clone();
        want_tgt.push(EOS_ID);
        assert_eq!(batch.tgt.row(0), &want_tgt[..]);
    }

    #[test]
    fn make_batch_rejects_out_of_range_index() {
        let corpus = generate_corpus(&small_specs(), 20, 1).unwrap();
        assert!(make_batch(&corpus, 0, Split::Dev, &[99]).is_err());
    }

    #[test]
    fn export_load_roundtrip() {
        let corpus = generate_corpus(&small_specs(), 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dir(&corpus, dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.languages, corpus.languages);
        assert_eq!(back.vocab, corpus.vocab);
        assert_eq!(back.payload_size, corpus.payload_size);
        for (a, b) in corpus.data.iter().zip(&back.data) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.dev, b.dev);
            assert_eq!(a.test, b.test);
        }
    }
}
