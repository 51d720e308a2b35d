//! Recall@K, timing tables and a random-ranking baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::model::VitrParams;
use crate::retrieval::{queries, retrieve, Direction, GlobalIndex, RankedResult};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Query id → relevant candidate ids.
pub type Relevance = BTreeMap<u64, BTreeSet<u64>>;

pub fn relevance(corpus: &Corpus, direction: Direction) -> Relevance {
    match direction {
        Direction::ImageToText => corpus
            .images()
            .iter()
            .map(|i| (i.id, corpus.relevant_descriptions(i.id).cloned().unwrap_or_default()))
            .collect(),
        Direction::TextToImage => corpus
            .descriptions()
            .iter()
            .filter_map(|d| corpus.image_of(d.id).map(|img| (d.id, BTreeSet::from([img]))))
            .collect(),
    }
}

/// Percentage of queries with a relevant candidate among their first `k`.
pub fn recall_at_k(results: &[RankedResult], relevance: &Relevance, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Param("K must be ≥ 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Eval("no queries to evaluate".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let relevant = relevance
            .get(&r.query)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Eval(format!("query {} has no relevant items", r.query)))?;
        if r.ranking.iter().take(k).any(|(id, _)| relevant.contains(id)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Recall at 1, 5 and 10.
pub fn recalls(results: &[RankedResult], relevance: &Relevance) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, k) in out.iter_mut().zip(RECALL_KS) {
        *o = recall_at_k(results, relevance, k)?;
    }
    Ok(out)
}

/// Recall@`k` of rankings drawn uniformly at random, averaged over `seeds`.
pub fn random_baseline(corpus: &Corpus, direction: Direction, k: usize, seeds: &[u64]) -> Result<f64> {
    let rel = relevance(corpus, direction);
    let index = GlobalIndex::candidates(corpus, direction)?;
    let mut total = 0.0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results: Vec<RankedResult> = queries(corpus, direction)
            .into_iter()
            .map(|q| {
                let mut ids = index.ids().to_vec();
                ids.shuffle(&mut rng);
                let n = ids.len();
                RankedResult {
                    query: q,
                    direction,
                    turbo_n: None,
                    shortlisted: n,
                    reranked: 0,
                    ranking: ids.into_iter().enumerate().map(|(i, id)| (id, (n - i) as f64)).collect(),
                }
            })
            .collect();
        total += recall_at_k(&results, &rel, k)?;
    }
    Ok(total / seeds.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub turbo_n: Option<usize>,
    pub median_seconds: f64,
    pub reranked_per_query: f64,
    pub recall: [f64; 3],
}

impl TimingRow {
    pub fn label(&self) -> String {
        self.turbo_n.map_or_else(|| "exhaustive".to_string(), |n| format!("N={n}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingTable {
    pub direction: Direction,
    pub queries: usize,
    pub candidates: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "direction {}  queries {}  candidates {}\n{:<12} {:>14} {:>10} {:>8} {:>8} {:>8}\n",
            self.direction, self.queries, self.candidates, "setting", "median_s/query", "reranked", "R@1", "R@5", "R@10"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>14.6} {:>10.1} {:>8.2} {:>8.2} {:>8.2}\n",
                r.label(),
                r.median_seconds,
                r.reranked_per_query,
                r.recall[0],
                r.recall[1],
                r.recall[2]
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,setting,median_seconds,reranked_per_query,r1,r5,r10\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.direction,
                r.label(),
                r.median_seconds,
                r.reranked_per_query,
                r.recall[0],
                r.recall[1],
                r.recall[2]
            ));
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the first `max_queries` queries (all when `None`) for every turbo
/// size in `n_values` and once exhaustively. Each setting gets one untimed
/// warm-up query; the reported time is the median over timed queries.
pub fn timed_eval(
    corpus: &Corpus,
    model: &VitrParams,
    n_values: &[usize],
    direction: Direction,
    max_queries: Option<usize>,
) -> Result<(TimingTable, Vec<Vec<RankedResult>>)> {
    let rel = relevance(corpus, direction);
    let index = GlobalIndex::candidates(corpus, direction)?;
    let mut qs = queries(corpus, direction);
    if let Some(m) = max_queries {
        qs.truncate(m.max(1));
    }
    let settings: Vec<Option<usize>> = n_values.iter().map(|&n| Some(n)).chain([None]).collect();
    let mut rows = Vec::with_capacity(settings.len());
    let mut all = Vec::with_capacity(settings.len());
    for turbo_n in settings {
        retrieve(qs[0], corpus, model, &index, direction, turbo_n)?;
        let mut times = Vec::with_capacity(qs.len());
        let mut results = Vec::with_capacity(qs.len());
        for &q in &qs {
            let start = Instant::now();
            let r = retrieve(q, corpus, model, &index, direction, turbo_n)?;
            times.push(start.elapsed().as_secs_f64());
            results.push(r);
        }
        let reranked = results.iter().map(|r| r.reranked as f64).sum::<f64>() / results.len() as f64;
        rows.push(TimingRow {
            turbo_n,
            median_seconds: median(times),
            reranked_per_query: reranked,
            recall: recalls(&results, &rel)?,
        });
        all.push(results);
    }
    Ok((
        TimingTable {
            direction,
            queries: qs.len(),
            candidates: index.len(),
            rows,
        },
        all,
    ))
}
