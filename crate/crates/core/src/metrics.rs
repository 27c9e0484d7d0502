//! Corpus-level caption metrics: BLEU@1–4, ROUGE-L, CIDEr / CIDEr-D and an
//! exact-match METEOR variant.
//!
//! Per-image statistics are reduced in image-id order, so every score is
//! independent of the order in which images were supplied.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidates with their references, kept sorted by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(mut items: Vec<EvalItem>) -> Result<Self> {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        for w in items.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!("duplicate image id `{}`", w[0].id)));
            }
        }
        if let Some(it) = items.iter().find(|it| it.references.is_empty()) {
            return Err(Error::Data(format!("image `{}` has no references", it.id)));
        }
        Ok(EvalCorpus { items })
    }

    /// Tokenizes raw caption strings.
    pub fn from_strings<S: AsRef<str>>(entries: &[(S, S, Vec<S>)]) -> Result<Self> {
        Self::new(
            entries
                .iter()
                .map(|(id, cand, refs)| EvalItem {
                    id: id.as_ref().to_string(),
                    candidate: tokenize(cand.as_ref()),
                    references: refs.iter().map(|r| tokenize(r.as_ref())).collect(),
                })
                .collect(),
        )
    }

    /// Pairs candidates with references by id. Every candidate id must have
    /// references; the error lists the missing ids.
    pub fn join(candidates: &BTreeMap<String, String>, references: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let missing: Vec<&str> = candidates
            .keys()
            .filter(|id| !references.contains_key(*id))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("no references for ids: {}", missing.join(", "))));
        }
        Self::new(
            candidates
                .iter()
                .map(|(id, cap)| EvalItem {
                    id: id.clone(),
                    candidate: tokenize(cap),
                    references: references[id].iter().map(|r| tokenize(r)).collect(),
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub type Ngram = Vec<String>;

pub fn ngram_counts(words: &[String], n: usize) -> BTreeMap<Ngram, usize> {
    let mut m = BTreeMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

// ---- BLEU ------------------------------------------------------------------

/// Corpus BLEU@1..BLEU@max_n with clipped counts and the closest-reference
/// brevity penalty. No smoothing.
pub fn bleu(corpus: &EvalCorpus, max_n: usize) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for it in corpus.items() {
        let c = it.candidate.len();
        c_len += c;
        r_len += it
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let cand = ngram_counts(&it.candidate, n);
            let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
            let ref_counts: Vec<_> = it.references.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &ref_counts {
                for (g, &k) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, &k) in &cand {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

// ---- ROUGE-L ---------------------------------------------------------------

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: best precision and best recall over references
/// combined into an F-measure with β = 1.2.
pub fn rouge_l_sentence(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs {
        if rf.is_empty() {
            continue;
        }
        let l = lcs_len(cand, rf) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rf.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    Ok(mean(&rouge_l_per_image(corpus)?))
}

pub fn rouge_l_per_image(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("ROUGE-L of an empty corpus".into()));
    }
    Ok(corpus
        .items()
        .iter()
        .map(|it| rouge_l_sentence(&it.candidate, &it.references))
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

// ---- CIDEr -----------------------------------------------------------------

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    Plain,
    D,
}

/// Document frequencies of reference n-grams, plus the corpus size they
/// were counted over.
#[derive(Clone, Debug, Default)]
pub struct CiderScorer {
    df: HashMap<Ngram, f64>,
    log_docs: f64,
    docs: usize,
}

struct TfIdf {
    vecs: Vec<BTreeMap<Ngram, f64>>,
    norms: Vec<f64>,
    len: usize,
}

impl CiderScorer {
    /// Counts, for each n-gram, the number of images whose reference set
    /// contains it.
    pub fn from_references<'a>(refs: impl IntoIterator<Item = &'a [Vec<String>]>) -> Self {
        let mut df: HashMap<Ngram, f64> = HashMap::new();
        let mut docs = 0;
        for set in refs {
            docs += 1;
            let mut seen: HashSet<Ngram> = HashSet::new();
            for r in set {
                for n in 1..=CIDER_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        CiderScorer {
            df,
            log_docs: (docs.max(1) as f64).ln(),
            docs,
        }
    }

    pub fn for_corpus(corpus: &EvalCorpus) -> Self {
        Self::from_references(corpus.items().iter().map(|it| it.references.as_slice()))
    }

    pub fn num_docs(&self) -> usize {
        self.docs
    }

    fn tfidf(&self, words: &[String]) -> TfIdf {
        let mut vecs = Vec::with_capacity(CIDER_N);
        let mut norms = Vec::with_capacity(CIDER_N);
        for n in 1..=CIDER_N {
            let mut v = BTreeMap::new();
            let mut sq = 0.0;
            for (g, tf) in ngram_counts(words, n) {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let w = tf as f64 * (self.log_docs - df.ln());
                sq += w * w;
                v.insert(g, w);
            }
            vecs.push(v);
            norms.push(sq.sqrt());
        }
        TfIdf {
            vecs,
            norms,
            len: words.len(),
        }
    }

    fn sim(&self, h: &TfIdf, r: &TfIdf, variant: CiderVariant) -> f64 {
        let delta = h.len as f64 - r.len as f64;
        let mut total = 0.0;
        for n in 0..CIDER_N {
            let mut val = 0.0;
            for (g, &hv) in &h.vecs[n] {
                if let Some(&rv) = r.vecs[n].get(g) {
                    val += match variant {
                        CiderVariant::D => hv.min(rv) * rv,
                        CiderVariant::Plain => hv * rv,
                    };
                }
            }
            if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= h.norms[n] * r.norms[n];
            }
            if variant == CiderVariant::D {
                val *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            total += val;
        }
        total
    }

    /// Score of one candidate against its references, on the ×10 scale.
    pub fn score(&self, cand: &[String], refs: &[Vec<String>], variant: CiderVariant) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let h = self.tfidf(cand);
        let s: f64 = refs.iter().map(|r| self.sim(&h, &self.tfidf(r), variant)).sum();
        s / CIDER_N as f64 / refs.len() as f64 * 10.0
    }
}

pub fn cider_per_image(corpus: &EvalCorpus, variant: CiderVariant) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("CIDEr of an empty corpus".into()));
    }
    if corpus.len() == 1 {
        log::warn!("CIDEr over a single image: every IDF weight is log(1) = 0, score is 0");
    }
    let scorer = CiderScorer::for_corpus(corpus);
    Ok(corpus
        .items()
        .iter()
        .map(|it| scorer.score(&it.candidate, &it.references, variant))
        .collect())
}

pub fn cider(corpus: &EvalCorpus, variant: CiderVariant) -> Result<f64> {
    Ok(mean(&cider_per_image(corpus, variant)?))
}

// ---- METEOR-lite -----------------------------------------------------------

/// Exact-unigram METEOR for one reference: greedy left-to-right alignment,
/// `Fmean = 10PR / (R + 9P)`, penalty `0.5 · (chunks / matches)³`.
pub fn meteor_sentence(cand: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut align: Vec<(usize, usize)> = Vec::new();
    for (i, w) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            align.push((i, j));
        }
    }
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1;
    for w in align.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_lite_per_image(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("METEOR of an empty corpus".into()));
    }
    Ok(corpus
        .items()
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| meteor_sentence(&it.candidate, r))
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn meteor_lite(corpus: &EvalCorpus) -> Result<f64> {
    Ok(mean(&meteor_lite_per_image(corpus)?))
}

// ---- report & I/O ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    #[serde(rename = "ROUGE_L")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    #[serde(rename = "METEOR_lite")]
    pub meteor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(rename = "Bleu_1")]
    pub bleu1: f64,
    #[serde(rename = "Bleu_2")]
    pub bleu2: f64,
    #[serde(rename = "Bleu_3")]
    pub bleu3: f64,
    #[serde(rename = "Bleu_4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE_L")]
    pub rouge_l: f64,
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    pub cider_variant: CiderVariant,
    #[serde(rename = "METEOR_lite")]
    pub meteor: f64,
    pub num_images: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_image: Option<Vec<ImageScores>>,
}

pub fn evaluate(corpus: &EvalCorpus, variant: CiderVariant, per_image: bool) -> Result<ScoreReport> {
    let b = bleu(corpus, 4)?;
    let r = rouge_l_per_image(corpus)?;
    let c = cider_per_image(corpus, variant)?;
    let m = meteor_lite_per_image(corpus)?;
    let per = per_image.then(|| {
        corpus
            .items()
            .iter()
            .enumerate()
            .map(|(i, it)| ImageScores {
                id: it.id.clone(),
                rouge_l: r[i],
                cider: c[i],
                meteor: m[i],
            })
            .collect()
    });
    Ok(ScoreReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: mean(&r),
        cider: mean(&c),
        cider_variant: variant,
        meteor: mean(&m),
        num_images: corpus.len(),
        per_image: per,
    })
}

#[derive(Deserialize)]
struct CandidateRow {
    id: String,
    caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub id: String,
    pub captions: Vec<String>,
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// `{"id", "caption"}` lines, keyed by id.
pub fn read_candidates(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for row in read_jsonl::<CandidateRow>(path)? {
        if m.insert(row.id.clone(), row.caption).is_some() {
            return Err(Error::format(path, format!("duplicate id `{}`", row.id)));
        }
    }
    Ok(m)
}

/// `{"id", "captions": [...]}` lines, keyed by id.
pub fn read_references(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut m = BTreeMap::new();
    for row in read_jsonl::<ReferenceRow>(path)? {
        if row.captions.is_empty() {
            return Err(Error::format(path, format!("id `{}` has no captions", row.id)));
        }
        if m.insert(row.id.clone(), row.captions).is_some() {
            return Err(Error::format(path, format!("duplicate id `{}`", row.id)));
        }
    }
    Ok(m)
}
