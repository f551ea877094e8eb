//! Caption metrics over multi-reference corpora: BLEU-1..4, METEOR
//! (exact matching), ROUGE-L, CIDEr-D and their aggregate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::tokenize;
use crate::error::{Error, Result};

type Ngram<'a> = &'a [String];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalEntry {
    pub id: String,
    pub hyp: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

impl EvalEntry {
    /// Normalizes raw strings with the caption tokenizer.
    pub fn from_text(id: impl Into<String>, hyp: &str, refs: &[impl AsRef<str>]) -> Result<Self> {
        let id = id.into();
        let refs: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r.as_ref())).collect();
        if refs.is_empty() || refs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("eval_corpus", format!("entry '{id}' needs non-empty references")));
        }
        Ok(EvalEntry {
            id,
            hyp: tokenize(hyp),
            refs,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalCorpus {
    pub entries: Vec<EvalEntry>,
}

#[derive(Deserialize, Serialize)]
struct Line {
    id: String,
    hyp: String,
    refs: Vec<String>,
}

impl EvalCorpus {
    pub fn new(entries: Vec<EvalEntry>) -> Self {
        EvalCorpus { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `{"id", "hyp", "refs"}` object per line.
    pub fn parse_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let l: Line = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            entries.push(EvalEntry::from_text(l.id, &l.hyp, &l.refs).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(EvalCorpus { entries })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, &path.display().to_string())
    }

    /// Pairs a hypothesis file (`{"id", "hyp"}` lines) with a reference
    /// file (`{"id", "refs"}` lines) by id.
    pub fn join_files(hyp_path: &Path, ref_path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hyp {
            id: String,
            hyp: String,
        }
        #[derive(Deserialize)]
        struct Refs {
            id: String,
            refs: Vec<String>,
        }
        fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
                .collect()
        }
        let hyps: Vec<Hyp> = read(hyp_path)?;
        let refs: HashMap<String, Vec<String>> = read::<Refs>(ref_path)?.into_iter().map(|r| (r.id, r.refs)).collect();
        let entries = hyps
            .into_iter()
            .map(|h| {
                let r = refs
                    .get(&h.id)
                    .ok_or_else(|| Error::invalid("eval_corpus", format!("no references for id '{}'", h.id)))?;
                EvalEntry::from_text(h.id, &h.hyp, r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalCorpus { entries })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = Line {
                id: e.id.clone(),
                hyp: e.hyp.join(" "),
                refs: e.refs.iter().map(|r| r.join(" ")).collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Scores on their reported scales: ×100, so CIDEr-D spans 0..1000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub cider_d: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub s_star_m: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn to_text(&self) -> String {
        let rows = [
            ("BLEU-1", self.bleu[0]),
            ("BLEU-2", self.bleu[1]),
            ("BLEU-3", self.bleu[2]),
            ("BLEU-4", self.bleu[3]),
            ("METEOR", self.meteor),
            ("ROUGE_L", self.rouge_l),
            ("CIDEr-D", self.cider_d),
            ("S*_m", self.s_star_m),
        ];
        rows.iter().map(|(k, v)| format!("{k:<8} {v:>9.4}\n")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.bleu.iter().chain([&self.cider_d, &self.meteor, &self.rouge_l, &self.s_star_m]).all(|v| v.is_finite())
    }
}

fn ngram_counts(words: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut out = BTreeMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn non_empty(corpus: &EvalCorpus, op: &'static str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid(op, "empty corpus"));
    }
    if let Some(e) = corpus.entries.iter().find(|e| e.refs.is_empty() || e.refs.iter().any(Vec::is_empty)) {
        return Err(Error::invalid(op, format!("entry '{}' needs non-empty references", e.id)));
    }
    Ok(())
}

/// Corpus BLEU-1..4 without smoothing. The reference length is the closest
/// one per entry (shorter on ties).
pub fn bleu(corpus: &EvalCorpus) -> Result<[f64; 4]> {
    non_empty(corpus, "bleu")?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for e in &corpus.entries {
        let h = e.hyp.len();
        c += h;
        r += e
            .refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| (l.abs_diff(h), l))
            .expect("non-empty refs");
        for n in 1..=4 {
            let hyp = ngram_counts(&e.hyp, n);
            let mut best: BTreeMap<Ngram, usize> = BTreeMap::new();
            for reference in &e.refs {
                for (g, k) in ngram_counts(reference, n) {
                    let slot = best.entry(g).or_insert(0);
                    *slot = (*slot).max(k);
                }
            }
            matched[n - 1] += hyp.iter().map(|(g, &k)| k.min(best.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += h.saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok([0.0; 4]);
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 {
            // every higher order is zero as well
            break;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out[n] = 100.0 * bp * (log_sum / (n + 1) as f64).exp();
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
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

/// LCS F-measure per entry, with precision and recall each maximized over
/// the references, then averaged over the corpus.
pub fn rouge_l(corpus: &EvalCorpus, beta: f64) -> Result<f64> {
    non_empty(corpus, "rouge_l")?;
    let mut sum = 0.0;
    for e in &corpus.entries {
        if e.hyp.is_empty() {
            continue;
        }
        let (mut p, mut r) = (0.0f64, 0.0f64);
        for reference in &e.refs {
            let l = lcs(&e.hyp, reference) as f64;
            p = p.max(l / e.hyp.len() as f64);
            r = r.max(l / reference.len() as f64);
        }
        if p > 0.0 && r > 0.0 {
            let b2 = beta * beta;
            sum += (1.0 + b2) * p * r / (r + b2 * p);
        }
    }
    Ok(100.0 * sum / corpus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// Exact-match METEOR against one reference. Each hypothesis word aligns
/// to the leftmost unused identical reference word.
pub fn meteor_sentence(hyp: &[String], reference: &[String], params: MeteorParams) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, w) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
    let penalty = params.gamma * (chunks as f64 / m as f64).powf(params.beta);
    f * (1.0 - penalty)
}

pub fn meteor(corpus: &EvalCorpus, params: MeteorParams) -> Result<f64> {
    non_empty(corpus, "meteor")?;
    let sum: f64 = corpus
        .entries
        .iter()
        .map(|e| e.refs.iter().map(|r| meteor_sentence(&e.hyp, r, params)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * sum / corpus.len() as f64)
}

struct TfIdf<'a> {
    orders: [BTreeMap<Ngram<'a>, f64>; 4],
    norms: [f64; 4],
    /// Bigram count, used for the length penalty.
    length: usize,
}

fn all_ngrams(words: &[String]) -> BTreeMap<Ngram<'_>, usize> {
    let mut out = BTreeMap::new();
    for n in 1..=4 {
        out.extend(ngram_counts(words, n));
    }
    out
}

fn tfidf<'a>(words: &'a [String], df: &BTreeMap<Ngram, usize>, log_docs: f64) -> TfIdf<'a> {
    let mut orders: [BTreeMap<Ngram<'a>, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for (g, k) in all_ngrams(words) {
        let n = g.len() - 1;
        let doc = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let v = k as f64 * (log_docs - doc.ln());
        norms[n] += v * v;
        orders[n].insert(g, v);
    }
    TfIdf {
        orders,
        norms: norms.map(f64::sqrt),
        length: words.len().saturating_sub(1),
    }
}

/// CIDEr-D with clipped tf-idf and a Gaussian length penalty, on the
/// 0..10 per-entry scale, then ×100.
pub fn cider_d(corpus: &EvalCorpus, sigma: f64) -> Result<f64> {
    non_empty(corpus, "cider_d")?;
    if corpus.len() < 2 {
        return Err(Error::invalid("cider_d", "document frequencies need at least two entries"));
    }
    let mut df: BTreeMap<Ngram, usize> = BTreeMap::new();
    for e in &corpus.entries {
        let seen: BTreeSet<Ngram> = e.refs.iter().flat_map(|r| all_ngrams(r).into_keys()).collect();
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for e in &corpus.entries {
        let h = tfidf(&e.hyp, &df, log_docs);
        let mut acc = 0.0;
        for reference in &e.refs {
            let r = tfidf(reference, &df, log_docs);
            let delta = h.length as f64 - r.length as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            let mut per_order = 0.0;
            for n in 0..4 {
                let mut dot = 0.0;
                for (g, &x) in &h.orders[n] {
                    let y = r.orders[n].get(g).copied().unwrap_or(0.0);
                    dot += x.min(y) * y;
                }
                if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
                    dot /= h.norms[n] * r.norms[n];
                }
                per_order += dot * penalty;
            }
            acc += per_order / 4.0;
        }
        total += 10.0 * acc / e.refs.len() as f64;
    }
    Ok(100.0 * total / corpus.len() as f64)
}

/// Mean of BLEU-4, METEOR, ROUGE-L and CIDEr-D.
pub fn s_star_m(b4: f64, meteor: f64, rouge_l: f64, cider_d: f64) -> f64 {
    (b4 + meteor + rouge_l + cider_d) / 4.0
}

pub fn evaluate(corpus: &EvalCorpus) -> Result<MetricReport> {
    let bleu = bleu(corpus)?;
    let meteor = meteor(corpus, MeteorParams::default())?;
    let rouge_l = rouge_l(corpus, 1.2)?;
    let cider_d = cider_d(corpus, 6.0)?;
    Ok(MetricReport {
        bleu,
        cider_d,
        meteor,
        rouge_l,
        s_star_m: s_star_m(bleu[3], meteor, rouge_l, cider_d),
    })
}
