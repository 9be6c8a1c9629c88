//! Few-shot example selection: random, TF-IDF kNN, interleaved, and embedding kNN.
//!
//! Every strategy returns pool indices (positions in [`StratifiedDataset::examples`])
//! in prompt order. For the similarity-based strategies prompt order is ascending
//! similarity, so the closest example sits right before the input sentence.

use std::collections::HashMap;
use std::fmt;
use std::future::Future;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::TaggedSentence;
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::stratify::StratifiedDataset;
use crate::tfidf::TfIdfModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Tfidf,
    Combined,
    Embedding,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Tfidf => "tfidf",
            Strategy::Combined => "combined",
            Strategy::Embedding => "embedding",
        }
    }

    pub fn needs_tfidf(self) -> bool {
        matches!(self, Strategy::Tfidf | Strategy::Combined)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "rs" => Ok(Strategy::Random),
            "tfidf" | "tf-idf" => Ok(Strategy::Tfidf),
            "combined" | "tfidf+random" => Ok(Strategy::Combined),
            "embedding" => Ok(Strategy::Embedding),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    /// Position of the input sentence in the test stream; sub-seeds the RNG.
    pub input_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Pool indices in prompt order.
    pub chosen: Vec<usize>,
    /// Original corpus ids of the chosen examples, parallel to `chosen`.
    pub source_ids: Vec<usize>,
    /// Similarity of each chosen example to the input, when the strategy has one.
    pub scores: Option<Vec<f64>>,
    pub strategy: Strategy,
    pub k_requested: usize,
    /// `k` exceeded the pool and was clamped.
    pub clamped: bool,
    /// The input had no in-vocabulary terms, so every similarity was zero.
    #[serde(default)]
    pub degenerate: bool,
}

impl SelectionResult {
    fn new(pool: &StratifiedDataset, cfg: &SelectionConfig, chosen: Vec<usize>, scores: Option<Vec<f64>>) -> Self {
        SelectionResult {
            source_ids: chosen.iter().map(|&i| pool.source_ids[i]).collect(),
            chosen,
            scores,
            strategy: cfg.strategy,
            k_requested: cfg.k,
            clamped: cfg.k > pool.len(),
            degenerate: false,
        }
    }

    pub fn examples<'a>(&self, pool: &'a StratifiedDataset) -> Vec<&'a TaggedSentence> {
        self.chosen.iter().map(|&i| &pool.examples[i]).collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-input RNG seed derived from the run seed and the input position.
pub fn mix_seed(seed: u64, input_index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(input_index as u64))
}

fn input_rng(cfg: &SelectionConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, cfg.input_index))
}

/// Uniform integer in `0..n` by rejection sampling.
fn below(rng: &mut impl RngCore, n: usize) -> usize {
    let n = n as u64;
    let limit = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < limit {
            return (x % n) as usize;
        }
    }
}

/// First `k` entries of a Fisher-Yates shuffle of `0..n`.
fn sample_indices(rng: &mut impl RngCore, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + below(rng, n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

pub fn select_random(pool: &StratifiedDataset, cfg: &SelectionConfig) -> SelectionResult {
    let chosen = sample_indices(&mut input_rng(cfg), pool.len(), cfg.k);
    SelectionResult::new(pool, cfg, chosen, None)
}

pub fn select_tfidf(
    pool: &StratifiedDataset,
    model: &TfIdfModel,
    input: &TaggedSentence,
    cfg: &SelectionConfig,
) -> SelectionResult {
    debug_assert_eq!(model.n_docs, pool.len(), "model must be fitted on the pool");
    let query = model.transform(&input.text());
    let mut ranked = model.top_k(&query, cfg.k);
    ranked.reverse();
    let (chosen, scores) = ranked.into_iter().unzip();
    let mut result = SelectionResult::new(pool, cfg, chosen, Some(scores));
    result.degenerate = query.is_zero();
    result
}

/// Alternates between the TF-IDF ranking and a seeded random permutation, starting
/// with TF-IDF. Ids already taken are skipped without passing the turn. The chosen
/// set is then ordered by ascending TF-IDF similarity.
pub fn select_combined(
    pool: &StratifiedDataset,
    model: &TfIdfModel,
    input: &TaggedSentence,
    cfg: &SelectionConfig,
) -> SelectionResult {
    debug_assert_eq!(model.n_docs, pool.len(), "model must be fitted on the pool");
    let n = pool.len();
    let query = model.transform(&input.text());
    let ranking = model.ranking(&query);
    let by_tfidf: Vec<usize> = ranking.iter().map(|(i, _)| *i).collect();
    let by_random = sample_indices(&mut input_rng(cfg), n, n);

    let k = cfg.k.min(n);
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    let lists = [&by_tfidf, &by_random];
    let mut cursors = [0usize; 2];
    let mut turn = 0;
    while chosen.len() < k {
        let (list, cursor) = (lists[turn], &mut cursors[turn]);
        while *cursor < n && taken[list[*cursor]] {
            *cursor += 1;
        }
        if *cursor < n {
            let id = list[*cursor];
            taken[id] = true;
            chosen.push(id);
            *cursor += 1;
        }
        turn = 1 - turn;
    }

    let mut rank_of = vec![0usize; n];
    for (rank, &(i, _)) in ranking.iter().enumerate() {
        rank_of[i] = rank;
    }
    let score_of: HashMap<usize, f64> = ranking.iter().copied().collect();
    chosen.sort_by_key(|&i| std::cmp::Reverse(rank_of[i]));
    let scores = chosen.iter().map(|i| score_of[i]).collect();
    let mut result = SelectionResult::new(pool, cfg, chosen, Some(scores));
    result.degenerate = query.is_zero();
    result
}

/// A source of fixed-dimension sentence embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier folded into the cache key.
    fn id(&self) -> String;

    fn embed(&self, texts: &[String]) -> impl Future<Output = Result<Vec<Vec<f64>>>> + Send;
}

/// Embeddings keyed by a hash of (provider id, text). Shared across concurrent selections.
#[derive(Debug, Default, Clone)]
pub struct EmbeddingCache {
    inner: Arc<RwLock<HashMap<String, Arc<Vec<f64>>>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("embedding cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(provider: &str, text: &str) -> String {
        sha256_hex(&[provider.as_bytes(), text.as_bytes()])
    }

    /// Embeds `texts`, calling the provider only for cache misses, and returns
    /// l2-normalized vectors.
    pub async fn embed<P: EmbeddingProvider>(&self, provider: &P, texts: &[String]) -> Result<Vec<Arc<Vec<f64>>>> {
        let pid = provider.id();
        let keys: Vec<String> = texts.iter().map(|t| Self::key(&pid, t)).collect();
        let mut missing: Vec<usize> = {
            let map = self.inner.read().expect("embedding cache poisoned");
            (0..texts.len()).filter(|&i| !map.contains_key(&keys[i])).collect()
        };
        missing.dedup_by_key(|i| keys[*i].clone());
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = provider.embed(&batch).await?;
            if vectors.len() != batch.len() {
                return Err(Error::BadResponse(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            let mut map = self.inner.write().expect("embedding cache poisoned");
            for (&i, v) in missing.iter().zip(vectors) {
                map.entry(keys[i].clone()).or_insert_with(|| Arc::new(l2_normalize(v)));
            }
        }
        let map = self.inner.read().expect("embedding cache poisoned");
        Ok(keys.iter().map(|k| Arc::clone(&map[k])).collect())
    }
}

fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dense_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Same kNN and ordering rules as [`select_tfidf`], over provider embeddings.
pub async fn select_embedding<P: EmbeddingProvider>(
    pool: &StratifiedDataset,
    provider: &P,
    cache: &EmbeddingCache,
    input: &TaggedSentence,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let mut texts: Vec<String> = pool.examples.iter().map(TaggedSentence::text).collect();
    texts.push(input.text());
    let vectors = cache.embed(provider, &texts).await?;
    let (query, docs) = vectors.split_last().expect("input text is always present");
    if let Some(bad) = docs.iter().find(|d| d.len() != query.len()) {
        return Err(Error::BadResponse(format!(
            "embedding dimension mismatch: {} vs {}",
            bad.len(),
            query.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i, dense_dot(query, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.k);
    ranked.reverse();
    let (chosen, scores) = ranked.into_iter().unzip();
    Ok(SelectionResult::new(pool, cfg, chosen, Some(scores)))
}

/// Dispatches on `cfg.strategy` for the strategies that need no async provider.
pub fn select(
    pool: &StratifiedDataset,
    model: Option<&TfIdfModel>,
    input: &TaggedSentence,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let need_model = || model.ok_or_else(|| Error::Config(format!("strategy {} needs a tf-idf model", cfg.strategy)));
    match cfg.strategy {
        Strategy::Random => Ok(select_random(pool, cfg)),
        Strategy::Tfidf => Ok(select_tfidf(pool, need_model()?, input, cfg)),
        Strategy::Combined => Ok(select_combined(pool, need_model()?, input, cfg)),
        Strategy::Embedding => Err(Error::Config(
            "embedding selection needs an embedding provider".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, EntitySpan, EntityType, TagScheme};
    use proptest::prelude::*;
    use super::Strategy;
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn sentence(text: &str) -> TaggedSentence {
        let tokens: Vec<String> = text.split(' ').map(String::from).collect();
        TaggedSentence {
            id: 0,
            spans: vec![EntitySpan::new(0, 1, EntityType::new("X").unwrap())],
            tokens,
        }
    }

    fn pool_of(texts: &[String]) -> StratifiedDataset {
        let corpus = Corpus::from_sentences(texts.iter().map(|t| sentence(t)).collect(), TagScheme::Bio).unwrap();
        StratifiedDataset::from_corpus(corpus)
    }

    fn numbered_pool(n: usize) -> StratifiedDataset {
        let texts: Vec<String> = (0..n).map(|i| format!("ex{i} part{} op{}", i % 4, i % 7)).collect();
        pool_of(&texts)
    }

    fn cfg(strategy: Strategy, k: usize, seed: u64, input_index: usize) -> SelectionConfig {
        SelectionConfig { strategy, k, seed, input_index }
    }

    #[test]
    fn random_full_permutation() {
        let pool = numbered_pool(10);
        let r = select_random(&pool, &cfg(Strategy::Random, 10, 1, 0));
        let set: BTreeSet<_> = r.chosen.iter().copied().collect();
        assert_eq!(set, (0..10).collect());
        assert!(!r.clamped);
    }

    #[test]
    fn random_is_deterministic_per_input() {
        let pool = numbered_pool(30);
        let a = select_random(&pool, &cfg(Strategy::Random, 5, 9, 3));
        let b = select_random(&pool, &cfg(Strategy::Random, 5, 9, 3));
        assert_eq!(a, b);
        let other = select_random(&pool, &cfg(Strategy::Random, 5, 9, 4));
        assert_ne!(a.chosen, other.chosen);
    }

    #[test]
    fn random_golden_seed_42() {
        // Frozen from the first run; guards the RNG stream and sampling procedure.
        let pool = numbered_pool(10);
        let r = select_random(&pool, &cfg(Strategy::Random, 3, 42, 0));
        assert_eq!(r.chosen, GOLDEN_SEED_42);
    }

    const GOLDEN_SEED_42: [usize; 3] = [8, 6, 2];

    #[test]
    fn random_clamps() {
        let pool = numbered_pool(4);
        let r = select_random(&pool, &cfg(Strategy::Random, 9, 1, 0));
        assert_eq!(r.chosen.len(), 4);
        assert!(r.clamped);
    }

    fn fitted(pool: &StratifiedDataset) -> TfIdfModel {
        TfIdfModel::fit(&pool.examples).unwrap()
    }

    #[test]
    fn tfidf_exact_match_rendered_last() {
        let pool = numbered_pool(12);
        let model = fitted(&pool);
        let input = pool.examples[3].clone();
        let r = select_tfidf(&pool, &model, &input, &cfg(Strategy::Tfidf, 4, 0, 0));
        assert_eq!(*r.chosen.last().unwrap(), 3);
        let scores = r.scores.unwrap();
        assert!((scores.last().unwrap() - 1.0).abs() < 1e-9);
        assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tfidf_k1_is_argmax() {
        let pool = numbered_pool(25);
        let model = fitted(&pool);
        let input = sentence("part2 op5 unknownword");
        let r = select_tfidf(&pool, &model, &input, &cfg(Strategy::Tfidf, 1, 0, 0));
        let q = model.transform(&input.text());
        let mut best = (0, f64::MIN);
        for (i, row) in model.doc_matrix.iter().enumerate() {
            let s = crate::tfidf::cosine(&q, row);
            if s > best.1 {
                best = (i, s);
            }
        }
        assert_eq!(r.chosen, vec![best.0]);
    }

    #[test]
    fn tfidf_80_distinct() {
        let pool = numbered_pool(300);
        let model = fitted(&pool);
        let r = select_tfidf(&pool, &model, &sentence("part1 op3"), &cfg(Strategy::Tfidf, 80, 0, 0));
        assert_eq!(r.chosen.iter().collect::<BTreeSet<_>>().len(), 80);
    }

    #[test]
    fn tfidf_all_oov_is_flagged() {
        let pool = numbered_pool(6);
        let model = fitted(&pool);
        let r = select_tfidf(&pool, &model, &sentence("zzz"), &cfg(Strategy::Tfidf, 3, 0, 0));
        assert!(r.degenerate);
        // Ties resolve by index ascending, rendered reversed.
        assert_eq!(r.chosen, vec![2, 1, 0]);
    }

    #[test]
    fn combined_k2_takes_one_from_each() {
        let pool = numbered_pool(20);
        let model = fitted(&pool);
        let input = pool.examples[5].clone();
        let c = cfg(Strategy::Combined, 2, 11, 0);
        let r = select_combined(&pool, &model, &input, &c);
        let random = sample_indices(&mut input_rng(&c), 20, 20);
        let expected_random = if random[0] == 5 { random[1] } else { random[0] };
        let set: BTreeSet<_> = r.chosen.iter().copied().collect();
        assert_eq!(set, BTreeSet::from([5, expected_random]));
        assert_eq!(*r.chosen.last().unwrap(), 5);
    }

    #[test]
    fn combined_whole_pool() {
        let pool = numbered_pool(6);
        let model = fitted(&pool);
        let r = select_combined(&pool, &model, &sentence("part1"), &cfg(Strategy::Combined, 6, 3, 2));
        assert_eq!(r.chosen.iter().copied().collect::<BTreeSet<_>>(), (0..6).collect());
        let r = select_combined(&pool, &model, &sentence("part1"), &cfg(Strategy::Combined, 60, 3, 2));
        assert_eq!(r.chosen.len(), 6);
        assert!(r.clamped);
    }

    /// Reference interleave written independently: walk both lists, alternating.
    fn interleave_oracle(t: &[usize], r: &[usize], k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        let (mut ti, mut ri) = (t.iter(), r.iter());
        let mut from_t = true;
        while out.len() < k.min(t.len()) {
            let it = if from_t { &mut ti } else { &mut ri };
            if let Some(&x) = it.find(|x| !out.contains(x)) {
                out.push(x);
            }
            from_t = !from_t;
        }
        out
    }

    proptest! {
        #[test]
        fn all_strategies_distinct_and_sized(n in 1usize..40, k in 1usize..50, seed: u64, idx in 0usize..100) {
            let pool = numbered_pool(n);
            let model = fitted(&pool);
            let input = sentence(&format!("part{} op{}", idx % 4, idx % 5));
            for strategy in [Strategy::Random, Strategy::Tfidf, Strategy::Combined] {
                let c = cfg(strategy, k, seed, idx);
                let r = select(&pool, Some(&model), &input, &c).unwrap();
                prop_assert_eq!(r.chosen.len(), k.min(n));
                prop_assert_eq!(r.chosen.iter().collect::<BTreeSet<_>>().len(), r.chosen.len());
                prop_assert_eq!(&r, &select(&pool, Some(&model), &input, &c).unwrap());
                if let Some(scores) = &r.scores {
                    prop_assert!(scores.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }

        #[test]
        fn tfidf_chosen_set_is_top_k(n in 1usize..40, k in 1usize..50, idx in 0usize..100) {
            let pool = numbered_pool(n);
            let model = fitted(&pool);
            let input = sentence(&format!("part{} op{} ex{}", idx % 4, idx % 5, idx % 9));
            let r = select_tfidf(&pool, &model, &input, &cfg(Strategy::Tfidf, k, 0, idx));
            let q = model.transform(&input.text());
            let mut all: Vec<(usize, f64)> = model.doc_matrix.iter().enumerate()
                .map(|(i, row)| (i, crate::tfidf::cosine(&q, row))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expect: BTreeSet<usize> = all.iter().take(k).map(|x| x.0).collect();
            prop_assert_eq!(r.chosen.iter().copied().collect::<BTreeSet<_>>(), expect);
        }

        #[test]
        fn combined_matches_interleave_oracle(n in 1usize..40, k in 1usize..50, seed: u64, idx in 0usize..100) {
            let pool = numbered_pool(n);
            let model = fitted(&pool);
            let input = sentence(&format!("part{} op{}", idx % 4, idx % 5));
            let c = cfg(Strategy::Combined, k, seed, idx);
            let r = select_combined(&pool, &model, &input, &c);
            let t: Vec<usize> = model.ranking(&model.transform(&input.text())).into_iter().map(|x| x.0).collect();
            let rnd = sample_indices(&mut input_rng(&c), n, n);
            let expect: BTreeSet<usize> = interleave_oracle(&t, &rnd, k).into_iter().collect();
            prop_assert_eq!(r.chosen.iter().copied().collect::<BTreeSet<_>>(), expect);

            // No duplicates in the first picks: exactly half from each list.
            let m = k / 2;
            if k % 2 == 0 && 2 * m <= n {
                let head_t: BTreeSet<_> = t.iter().take(m).collect();
                let head_r: BTreeSet<_> = rnd.iter().take(m).collect();
                if head_t.is_disjoint(&head_r) {
                    let chosen: BTreeSet<_> = r.chosen.iter().collect();
                    prop_assert_eq!(chosen.intersection(&head_t).count(), m);
                    prop_assert_eq!(chosen.intersection(&head_r).count(), m);
                }
            }
        }
    }

    struct OneHot {
        dim: usize,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for OneHot {
        fn id(&self) -> String {
            "onehot".into()
        }

        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; self.dim];
                    let id: usize = t.trim_start_matches("ex").split(' ').next().unwrap().parse().unwrap_or(0);
                    v[id % self.dim] = 1.0;
                    v
                })
                .collect())
        }
    }

    struct Constant;

    impl EmbeddingProvider for Constant {
        fn id(&self) -> String {
            "constant".into()
        }

        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts.iter().map(|_| vec![1.0, 2.0, 3.0]).collect())
        }
    }

    struct Failing;

    impl EmbeddingProvider for Failing {
        fn id(&self) -> String {
            "failing".into()
        }

        async fn embed(&self, _texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Err(Error::Http { status: 503, attempts: 3, body: "down".into() })
        }
    }

    /// Deterministic 3-d vectors derived from the text.
    struct Hashed3;

    impl EmbeddingProvider for Hashed3 {
        fn id(&self) -> String {
            "hashed3".into()
        }

        async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts
                .iter()
                .map(|t| {
                    let h = mix_seed(t.len() as u64, t.bytes().map(usize::from).sum());
                    (0..3).map(|i| ((h >> (i * 16)) & 0xffff) as f64 / 65535.0 - 0.5).collect()
                })
                .collect())
        }
    }

    #[tokio::test]
    async fn embedding_one_hot_finds_match() {
        let pool = numbered_pool(10);
        let provider = OneHot { dim: 10, calls: AtomicUsize::new(0) };
        let cache = EmbeddingCache::new();
        let input = sentence("ex5 something");
        let r = select_embedding(&pool, &provider, &cache, &input, &cfg(Strategy::Embedding, 3, 0, 0))
            .await
            .unwrap();
        assert_eq!(*r.chosen.last().unwrap(), 5);
        // Second call is served from the cache.
        select_embedding(&pool, &provider, &cache, &input, &cfg(Strategy::Embedding, 3, 0, 1))
            .await
            .unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.len(), 11);
    }

    #[tokio::test]
    async fn embedding_ties_break_by_id() {
        let pool = numbered_pool(8);
        let r = select_embedding(&pool, &Constant, &EmbeddingCache::new(), &sentence("q"), &cfg(Strategy::Embedding, 3, 0, 0))
            .await
            .unwrap();
        assert_eq!(r.chosen, vec![2, 1, 0]);
    }

    #[tokio::test]
    async fn embedding_failure_surfaces() {
        let pool = numbered_pool(3);
        let err = select_embedding(&pool, &Failing, &EmbeddingCache::new(), &sentence("q"), &cfg(Strategy::Embedding, 1, 0, 0))
            .await
            .unwrap_err();
        assert!(err.to_string().contains("3 attempt"));
    }

    #[tokio::test]
    async fn embedding_matches_brute_force() {
        let pool = numbered_pool(20);
        let input = sentence("query text here");
        let r = select_embedding(&pool, &Hashed3, &EmbeddingCache::new(), &input, &cfg(Strategy::Embedding, 5, 0, 0))
            .await
            .unwrap();
        let mut texts: Vec<String> = pool.examples.iter().map(TaggedSentence::text).collect();
        texts.push(input.text());
        let raw = Hashed3.embed(&texts).await.unwrap();
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q = &raw[20];
        let mut all: Vec<(usize, f64)> = (0..20)
            .map(|i| (i, raw[i].iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (norm(&raw[i]) * norm(q))))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut expect: Vec<usize> = all.iter().take(5).map(|x| x.0).collect();
        expect.reverse();
        assert_eq!(r.chosen, expect);
    }
}
