//! Multi-domain document corpora.
//!
//! A [`Corpus`] holds every document of every domain, each tagged with a
//! train/test split. The protected unit for differential privacy is a whole
//! [`Document`]; an epoch emits exactly one fixed-length [`TokenBlock`] per
//! training document.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const OPEN: u32 = 3;
pub const CLOSE: u32 = 4;
/// First id available to keywords; ids below are structural.
pub const FIRST_KEYWORD: u32 = 8;
pub const DEFAULT_VOCAB: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub domain: usize,
    pub split: Split,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub documents: Vec<Document>,
    /// Generator parameters when the corpus is synthetic.
    pub generator: Option<SyntheticSpec>,
}

/// One fixed-length training or scoring window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBlock {
    pub tokens: Vec<u32>,
    /// `true` for real tokens; padding is a contiguous suffix.
    pub pad_mask: Vec<bool>,
    pub domain: usize,
    pub source_doc_id: u64,
}

impl TokenBlock {
    /// Window of at most `len` tokens starting at `start`, right-padded to `len`.
    pub fn from_window(doc: &Document, start: usize, len: usize) -> Self {
        let end = (start + len).min(doc.tokens.len());
        let mut tokens = doc.tokens[start..end].to_vec();
        let real = tokens.len();
        tokens.resize(len, PAD);
        let mut pad_mask = vec![true; real];
        pad_mask.resize(len, false);
        Self {
            tokens,
            pad_mask,
            domain: doc.domain,
            source_doc_id: doc.id,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of real (non-pad) tokens.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().take_while(|m| **m).count()
    }

    pub fn real_tokens(&self) -> &[u32] {
        &self.tokens[..self.real_len()]
    }
}

/// Parameters of the bracketed-expression grammar.
///
/// Every keyword has a small successor table and an arity. Tables for the
/// shared pool are identical in every domain; each domain's private pool has
/// its own. Expression heads are drawn from the shared pool with probability
/// `shared_mix`, otherwise from the domain's private pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub docs_per_domain: Vec<usize>,
    pub shared_keyword_count: usize,
    pub private_keyword_count: usize,
    pub nesting_depth: usize,
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_shared_mix")]
    pub shared_mix: f64,
    /// Expressions per document, inclusive range.
    #[serde(default = "default_statements")]
    pub statements: (usize, usize),
    /// Successors per keyword.
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Probability mass on the first successor.
    #[serde(default = "default_dominant")]
    pub dominant_prob: f64,
    /// Probability that an argument slot opens a nested expression.
    #[serde(default = "default_nest_prob")]
    pub nest_prob: f64,
    #[serde(default = "default_max_arity")]
    pub max_arity: usize,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}
fn default_shared_mix() -> f64 {
    0.5
}
fn default_statements() -> (usize, usize) {
    (4, 10)
}
fn default_branching() -> usize {
    2
}
fn default_dominant() -> f64 {
    0.8
}
fn default_nest_prob() -> f64 {
    0.2
}
fn default_max_arity() -> usize {
    4
}

impl SyntheticSpec {
    pub fn new(docs_per_domain: Vec<usize>, seed: u64) -> Self {
        Self {
            num_domains: docs_per_domain.len(),
            docs_per_domain,
            shared_keyword_count: 24,
            private_keyword_count: 24,
            nesting_depth: 2,
            seed,
            vocab_size: DEFAULT_VOCAB,
            shared_mix: default_shared_mix(),
            statements: default_statements(),
            branching: default_branching(),
            dominant_prob: default_dominant(),
            nest_prob: default_nest_prob(),
            max_arity: default_max_arity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::invalid("num_domains", "at least 2 domains required"));
        }
        if self.docs_per_domain.len() != self.num_domains {
            return Err(Error::invalid(
                "docs_per_domain",
                format!("expected {} entries", self.num_domains),
            ));
        }
        if self.docs_per_domain.iter().any(|&n| n == 0) {
            return Err(Error::invalid("docs_per_domain", "every domain needs documents"));
        }
        if self.private_keyword_count == 0 {
            return Err(Error::invalid("private_keyword_count", "private pool is empty"));
        }
        if self.shared_keyword_count == 0 && self.shared_mix > 0.0 {
            return Err(Error::invalid(
                "shared_keyword_count",
                "shared pool is empty but shared_mix > 0",
            ));
        }
        let needed = FIRST_KEYWORD as usize
            + self.shared_keyword_count
            + self.num_domains * self.private_keyword_count;
        if needed > self.vocab_size {
            return Err(Error::invalid(
                "vocab_size",
                format!("{needed} ids needed, vocabulary has {}", self.vocab_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_mix) {
            return Err(Error::invalid("shared_mix", "must lie in [0, 1]"));
        }
        if self.statements.0 == 0 || self.statements.0 > self.statements.1 {
            return Err(Error::invalid("statements", "need 1 <= min <= max"));
        }
        if self.branching == 0 || self.max_arity == 0 {
            return Err(Error::invalid("branching", "branching and max_arity must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.dominant_prob) || !(0.0..1.0).contains(&self.nest_prob) {
            return Err(Error::invalid("dominant_prob", "probabilities out of range"));
        }
        Ok(())
    }

    pub fn shared_pool(&self) -> Vec<u32> {
        let start = FIRST_KEYWORD;
        (start..start + self.shared_keyword_count as u32).collect()
    }

    pub fn private_pool(&self, domain: usize) -> Vec<u32> {
        let start = FIRST_KEYWORD
            + self.shared_keyword_count as u32
            + (domain * self.private_keyword_count) as u32;
        (start..start + self.private_keyword_count as u32).collect()
    }
}

/// Successor and arity tables for one keyword pool.
struct PoolGrammar {
    pool: Vec<u32>,
    successors: BTreeMap<u32, Vec<u32>>,
    arity: BTreeMap<u32, usize>,
}

impl PoolGrammar {
    fn sample(pool: Vec<u32>, branching: usize, max_arity: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut successors = BTreeMap::new();
        let mut arity = BTreeMap::new();
        for &w in &pool {
            let succ: Vec<u32> = (0..branching)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect();
            successors.insert(w, succ);
            arity.insert(w, rng.random_range(1..=max_arity));
        }
        Self {
            pool,
            successors,
            arity,
        }
    }

    fn next(&self, prev: u32, dominant: f64, rng: &mut ChaCha8Rng) -> u32 {
        let succ = &self.successors[&prev];
        if succ.len() == 1 || rng.random::<f64>() < dominant {
            succ[0]
        } else {
            succ[rng.random_range(1..succ.len())]
        }
    }
}

struct DomainGrammar<'a> {
    shared: Option<&'a PoolGrammar>,
    private: &'a PoolGrammar,
}

impl DomainGrammar<'_> {
    fn pool_of(&self, head: u32) -> &PoolGrammar {
        match self.shared {
            Some(s) if s.successors.contains_key(&head) => s,
            _ => self.private,
        }
    }

    fn expression(
        &self,
        spec: &SyntheticSpec,
        depth: usize,
        out: &mut Vec<u32>,
        rng: &mut ChaCha8Rng,
    ) {
        out.push(OPEN);
        let use_shared = self.shared.is_some() && rng.random::<f64>() < spec.shared_mix;
        let grammar = if use_shared {
            self.shared.expect("checked")
        } else {
            self.private
        };
        let head = grammar.pool[rng.random_range(0..grammar.pool.len())];
        out.push(head);
        let grammar = self.pool_of(head);
        let mut prev = head;
        for _ in 0..grammar.arity[&head] {
            if depth < spec.nesting_depth && rng.random::<f64>() < spec.nest_prob {
                self.expression(spec, depth + 1, out, rng);
            } else {
                prev = grammar.next(prev, spec.dominant_prob, rng);
                out.push(prev);
            }
        }
        out.push(CLOSE);
    }
}

/// Deterministic synthetic multi-domain corpus; every document starts in the
/// train split.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "grammar"));
    let shared = (spec.shared_keyword_count > 0)
        .then(|| PoolGrammar::sample(spec.shared_pool(), spec.branching, spec.max_arity, &mut rng));
    let privates: Vec<PoolGrammar> = (0..spec.num_domains)
        .map(|k| PoolGrammar::sample(spec.private_pool(k), spec.branching, spec.max_arity, &mut rng))
        .collect();

    let mut documents = Vec::new();
    let mut next_id = 0u64;
    for (k, &count) in spec.docs_per_domain.iter().enumerate() {
        let grammar = DomainGrammar {
            shared: shared.as_ref(),
            private: &privates[k],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("domain/{k}")));
        for _ in 0..count {
            let statements = rng.random_range(spec.statements.0..=spec.statements.1);
            let mut tokens = vec![BOS];
            for _ in 0..statements {
                grammar.expression(spec, 0, &mut tokens, &mut rng);
            }
            tokens.push(EOS);
            documents.push(Document {
                id: next_id,
                domain: k,
                split: Split::Train,
                tokens,
            });
            next_id += 1;
        }
    }
    Ok(Corpus {
        vocab_size: spec.vocab_size,
        num_domains: spec.num_domains,
        documents,
        generator: Some(spec.clone()),
    })
}

/// Parameters of the public pretraining corpus.
///
/// Each public document draws its own small keyword set with its own random
/// successor table and arities, using the same bracket syntax as the private
/// domains. No table is reused across documents, so the corpus carries none
/// of the private grammars; what it teaches is the syntax and how to pick up
/// successor structure from context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicSpec {
    pub docs: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_statements")]
    pub statements: (usize, usize),
    #[serde(default = "default_max_arity")]
    pub max_arity: usize,
    #[serde(default = "default_keywords_per_doc")]
    pub keywords_per_doc: usize,
    #[serde(default = "default_dominant")]
    pub dominant_prob: f64,
    pub seed: u64,
}

fn default_keywords_per_doc() -> usize {
    8
}

impl PublicSpec {
    pub fn new(docs: usize, seed: u64) -> Self {
        Self {
            docs,
            vocab_size: DEFAULT_VOCAB,
            statements: default_statements(),
            max_arity: default_max_arity(),
            keywords_per_doc: default_keywords_per_doc(),
            dominant_prob: default_dominant(),
            seed,
        }
    }
}

/// Single-domain, all-train public corpus.
pub fn generate_public_corpus(spec: &PublicSpec) -> Result<Corpus> {
    if spec.docs == 0 {
        return Err(Error::invalid("docs", "public corpus needs documents"));
    }
    let keywords = spec.vocab_size.saturating_sub(FIRST_KEYWORD as usize);
    if spec.keywords_per_doc < 2 || spec.keywords_per_doc > keywords {
        return Err(Error::invalid(
            "keywords_per_doc",
            format!("must be in [2, {keywords}], got {}", spec.keywords_per_doc),
        ));
    }
    if spec.statements.0 == 0 || spec.statements.0 > spec.statements.1 || spec.max_arity == 0 {
        return Err(Error::invalid("statements", "need 1 <= min <= max and arity >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.dominant_prob) {
        return Err(Error::invalid("dominant_prob", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "public"));
    let all: Vec<u32> = (FIRST_KEYWORD..spec.vocab_size as u32).collect();
    let documents = (0..spec.docs as u64)
        .map(|id| {
            let pool: Vec<u32> = all.choose_multiple(&mut rng, spec.keywords_per_doc).copied().collect();
            let grammar = PoolGrammar::sample(pool, 2, spec.max_arity, &mut rng);
            let mut tokens = vec![BOS];
            for _ in 0..rng.random_range(spec.statements.0..=spec.statements.1) {
                tokens.push(OPEN);
                let head = grammar.pool[rng.random_range(0..grammar.pool.len())];
                tokens.push(head);
                let mut prev = head;
                for _ in 0..grammar.arity[&head] {
                    prev = grammar.next(prev, spec.dominant_prob, &mut rng);
                    tokens.push(prev);
                }
                tokens.push(CLOSE);
            }
            tokens.push(EOS);
            Document {
                id,
                domain: 0,
                split: Split::Train,
                tokens,
            }
        })
        .collect();
    Ok(Corpus {
        vocab_size: spec.vocab_size,
        num_domains: 1,
        documents,
        generator: None,
    })
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for doc in &self.documents {
            if !seen.insert(doc.id) {
                return Err(Error::invalid("documents", format!("duplicate id {}", doc.id)));
            }
            if doc.domain >= self.num_domains {
                return Err(Error::Domain {
                    domain: doc.domain,
                    k: self.num_domains,
                });
            }
            if doc.tokens.is_empty() {
                return Err(Error::invalid("documents", format!("document {} is empty", doc.id)));
            }
            if let Some(t) = doc.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::invalid(
                    "documents",
                    format!("document {} has token {t} >= V = {}", doc.id, self.vocab_size),
                ));
            }
        }
        Ok(())
    }

    pub fn docs(&self, domain: usize, split: Split) -> impl Iterator<Item = &Document> + '_ {
        self.documents
            .iter()
            .filter(move |d| d.domain == domain && d.split == split)
    }

    pub fn train_docs(&self) -> impl Iterator<Item = &Document> + '_ {
        self.documents.iter().filter(|d| d.split == Split::Train)
    }

    /// Total number of training documents, the `N` of the privacy accountant.
    pub fn num_train(&self) -> usize {
        self.train_docs().count()
    }

    pub fn count(&self, domain: usize, split: Split) -> usize {
        self.docs(domain, split).count()
    }

    pub fn get(&self, id: u64) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Copy holding only documents of `domain` (domain ids are preserved).
    pub fn restrict_to_domain(&self, domain: usize) -> Corpus {
        Corpus {
            documents: self
                .documents
                .iter()
                .filter(|d| d.domain == domain)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Per-domain seeded split; `round(n * test_fraction)` documents per domain go
/// to test, clamped so both sides are non-empty.
pub fn split_train_test(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction", "must lie strictly in (0, 1)"));
    }
    let counts = (0..corpus.num_domains)
        .map(|k| {
            let n = corpus.documents.iter().filter(|d| d.domain == k).count();
            ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
        })
        .collect::<Vec<_>>();
    split_train_test_counts(corpus, &counts, seed)
}

/// Per-domain seeded split with an explicit number of test documents.
pub fn split_train_test_counts(corpus: &Corpus, test_counts: &[usize], seed: u64) -> Result<Corpus> {
    if test_counts.len() != corpus.num_domains {
        return Err(Error::invalid("test_counts", "one entry per domain required"));
    }
    let mut out = corpus.clone();
    for (k, &n_test) in test_counts.iter().enumerate() {
        let mut idx: Vec<usize> = out
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.domain == k)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            return Err(Error::invalid(
                format!("domain {k}"),
                format!("{} document(s), at least 2 needed to split", idx.len()),
            ));
        }
        if n_test == 0 || n_test >= idx.len() {
            return Err(Error::invalid(
                format!("test_counts[{k}]"),
                format!("need 1..{} test documents", idx.len() - 1),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split/{k}")));
        idx.shuffle(&mut rng);
        for (rank, &i) in idx.iter().enumerate() {
            out.documents[i].split = if rank < n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

/// One block per training document, in a seeded shuffled order across all
/// domains. Documents longer than `len` contribute a uniformly random window
/// (resampled every epoch); shorter ones are right-padded.
pub fn sample_epoch_blocks(
    corpus: &Corpus,
    len: usize,
    seed: u64,
    epoch_index: usize,
) -> Result<Vec<TokenBlock>> {
    if len < 2 {
        return Err(Error::invalid("context_length", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch_index}")));
    let mut blocks: Vec<TokenBlock> = corpus
        .train_docs()
        .map(|doc| {
            let slack = doc.tokens.len().saturating_sub(len);
            let start = if slack > 0 {
                rng.random_range(0..=slack)
            } else {
                0
            };
            TokenBlock::from_window(doc, start, len)
        })
        .collect();
    if blocks.is_empty() {
        return Err(Error::invalid("corpus", "no training documents"));
    }
    blocks.shuffle(&mut rng);
    Ok(blocks)
}

/// Deterministic scoring window: the first `len` tokens.
pub fn first_window(doc: &Document, len: usize) -> TokenBlock {
    TokenBlock::from_window(doc, 0, len)
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    id: u64,
    domain: usize,
    split: Split,
    tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(rename = "K")]
    pub num_domains: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    /// `counts[k] = [train, test]`
    pub counts: Vec<[usize; 2]>,
    pub generator: Option<SyntheticSpec>,
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            num_domains: self.num_domains,
            vocab_size: self.vocab_size,
            counts: (0..self.num_domains)
                .map(|k| [self.count(k, Split::Train), self.count(k, Split::Test)])
                .collect(),
            seed: self.generator.as_ref().map(|g| g.seed),
            generator: self.generator.clone(),
        }
    }

    /// Writes `path` (JSON Lines) and its manifest next to it.
    /// One JSON object per document, in corpus order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(&JsonDoc {
                id: d.id,
                domain: d.domain,
                split: d.split,
                tokens: d.tokens.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the documents and the sibling manifest; returns the manifest path.
    pub fn write_jsonl(&self, path: &Path) -> Result<PathBuf> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        let manifest_path = manifest_path(path);
        let json = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Reads JSON Lines; K and V come from the sibling manifest when present.
    pub fn read_jsonl(path: &Path) -> Result<Corpus> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut documents = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: JsonDoc = serde_json::from_str(&line).map_err(|e| {
                Error::invalid(format!("{}:{}", path.display(), lineno + 1), e.to_string())
            })?;
            documents.push(Document {
                id: d.id,
                domain: d.domain,
                split: d.split,
                tokens: d.tokens,
            });
        }
        let mp = manifest_path(path);
        let (num_domains, vocab_size, generator) = if mp.exists() {
            let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
            let m: CorpusManifest = serde_json::from_str(&text)?;
            (m.num_domains, m.vocab_size, m.generator)
        } else {
            let k = documents.iter().map(|d| d.domain + 1).max().unwrap_or(0);
            (k, DEFAULT_VOCAB, None)
        };
        let corpus = Corpus {
            vocab_size,
            num_domains,
            documents,
            generator,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub fn manifest_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("manifest.json")
}
