//! Two-stage retrieval: a global-cosine shortlist, then full scoring of the
//! shortlisted candidates only.
//!
//! Orderings everywhere are by descending score, then ascending id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::model::VitrParams;
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries, description candidates.
    #[serde(rename = "i2t")]
    ImageToText,
    /// Description queries, image candidates.
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            other => Err(Error::Param(format!("unknown direction `{other}` (expected i2t or t2i)"))),
        }
    }
}

/// Descending score, then ascending id. `-0.0` ties with `0.0`.
pub fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// Candidate global vectors with their norms.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalIndex {
    ids: Vec<u64>,
    globals: Tensor,
    norms: Vec<f64>,
}

impl GlobalIndex {
    pub fn new(ids: Vec<u64>, globals: Tensor) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("global index is empty".into()));
        }
        if ids.len() != globals.rows() {
            return Err(Error::shape("global index", &[ids.len()], globals.shape()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("global index ids must be unique".into()));
        }
        let norms = (0..globals.rows()).map(|r| norm(globals.row(r))).collect();
        Ok(GlobalIndex { ids, globals, norms })
    }

    /// Index over the candidate side of `direction`.
    pub fn candidates(corpus: &Corpus, direction: Direction) -> Result<Self> {
        let (ids, rows): (Vec<u64>, Vec<&[f64]>) = match direction {
            Direction::ImageToText => corpus.descriptions().iter().map(|d| (d.id, d.global.as_slice())).unzip(),
            Direction::TextToImage => corpus.images().iter().map(|i| (i.id, i.global.as_slice())).unzip(),
        };
        GlobalIndex::new(ids, Tensor::from_rows(&rows)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn globals(&self) -> &Tensor {
        &self.globals
    }

    /// The `min(n, len)` candidates with the highest cosine to `query`.
    pub fn shortlist(&self, query: &[f64], n: usize) -> Result<Vec<(u64, f64)>> {
        if n == 0 {
            return Err(Error::Param("N must be ≥ 1".into()));
        }
        if query.len() != self.globals.cols() {
            return Err(Error::shape("shortlist", &[query.len()], self.globals.shape()));
        }
        let qn = norm(query);
        let mut scored: Vec<(u64, f64)> = (0..self.len())
            .map(|r| {
                let denom = qn * self.norms[r];
                let cos = if denom == 0.0 {
                    0.0
                } else {
                    (dot(query, self.globals.row(r)) / denom).clamp(-1.0, 1.0)
                };
                (self.ids[r], cos)
            })
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(n);
        Ok(scored)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: u64,
    pub direction: Direction,
    /// Turbo shortlist size; `None` for exhaustive scoring.
    pub turbo_n: Option<usize>,
    /// Candidates handed to stage 2.
    pub shortlisted: usize,
    /// Full-model scorer invocations.
    pub reranked: usize,
    pub ranking: Vec<(u64, f64)>,
}

impl RankedResult {
    /// `query direction N id:score …`, tab separated.
    pub fn to_record(&self) -> String {
        let n = self.turbo_n.map_or_else(|| "all".to_string(), |n| n.to_string());
        let ranking: Vec<String> = self.ranking.iter().map(|(id, s)| format!("{id}:{s:.17e}")).collect();
        format!("{}\t{}\t{}\t{}", self.query, self.direction, n, ranking.join(" "))
    }
}

/// Ranks candidates for one query. With `turbo_n = Some(N)` only the `N`
/// best candidates by global cosine are scored by the full model.
pub fn retrieve(
    query: u64,
    corpus: &Corpus,
    model: &VitrParams,
    index: &GlobalIndex,
    direction: Direction,
    turbo_n: Option<usize>,
) -> Result<RankedResult> {
    model.check_dims(corpus.dims())?;
    let candidates: Vec<u64> = match turbo_n {
        Some(n) => {
            let global = match direction {
                Direction::ImageToText => &image(corpus, query)?.global,
                Direction::TextToImage => &description(corpus, query)?.global,
            };
            index.shortlist(global, n)?.into_iter().map(|(id, _)| id).collect()
        }
        None => index.ids().to_vec(),
    };
    let mut ranking: Vec<(u64, f64)> = match direction {
        Direction::ImageToText => {
            let enc = model.encode_image(image(corpus, query)?)?;
            candidates
                .par_iter()
                .map(|&id| {
                    let d = model.encode_description(description(corpus, id)?)?;
                    Ok((id, model.pair_score(&enc, &d)?))
                })
                .collect::<Result<_>>()?
        }
        Direction::TextToImage => {
            let enc = model.encode_description(description(corpus, query)?)?;
            candidates
                .par_iter()
                .map(|&id| {
                    let img = model.encode_image(image(corpus, id)?)?;
                    Ok((id, model.pair_score(&img, &enc)?))
                })
                .collect::<Result<_>>()?
        }
    };
    ranking.sort_by(rank_order);
    Ok(RankedResult {
        query,
        direction,
        turbo_n,
        shortlisted: candidates.len(),
        reranked: ranking.len(),
        ranking,
    })
}

fn image(corpus: &Corpus, id: u64) -> Result<&crate::features::ImageFeatures> {
    corpus.image(id).ok_or_else(|| Error::Input(format!("unknown image {id}")))
}

fn description(corpus: &Corpus, id: u64) -> Result<&crate::features::DescriptionFeatures> {
    corpus.description(id).ok_or_else(|| Error::Input(format!("unknown description {id}")))
}

/// Query ids of `direction`, in corpus order.
pub fn queries(corpus: &Corpus, direction: Direction) -> Vec<u64> {
    match direction {
        Direction::ImageToText => corpus.images().iter().map(|i| i.id).collect(),
        Direction::TextToImage => corpus.descriptions().iter().map(|d| d.id).collect(),
    }
}

/// Retrieves every query of `direction`.
pub fn retrieve_all(
    corpus: &Corpus,
    model: &VitrParams,
    direction: Direction,
    turbo_n: Option<usize>,
) -> Result<Vec<RankedResult>> {
    let index = GlobalIndex::candidates(corpus, direction)?;
    queries(corpus, direction)
        .into_iter()
        .map(|q| retrieve(q, corpus, model, &index, direction, turbo_n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{synth_corpus, SynthConfig};

    fn setup() -> (Corpus, VitrParams) {
        let corpus = synth_corpus(&SynthConfig {
            num_images: 6,
            descriptions_per_image: 2,
            d1: 6,
            d2: 8,
            k: 4,
            n: 4,
            seed: 2,
        })
        .unwrap();
        let model = VitrParams::new(ModelConfig {
            d3: 6,
            d4: 5,
            ..ModelConfig::for_corpus(corpus.dims())
        })
        .unwrap();
        (corpus, model)
    }

    #[test]
    fn shortlist_finds_identical_vector_first() {
        let g = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let idx = GlobalIndex::new(vec![10, 11, 12], g).unwrap();
        let top = idx.shortlist(&[1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(top[0], (11, 1.0));
        // remaining candidates tie at 0 and fall back to ascending id
        assert_eq!(top[1], (10, 0.0));
        assert_eq!(idx.shortlist(&[1.0, 0.0, 0.0], 99).unwrap().len(), 3);
        assert!(idx.shortlist(&[1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn index_rejects_empty_and_duplicates() {
        let g = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(GlobalIndex::new(vec![1, 1], g).is_err());
        assert!(GlobalIndex::new(vec![], Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn full_shortlist_matches_exhaustive() {
        let (corpus, model) = setup();
        for direction in Direction::ALL {
            let index = GlobalIndex::candidates(&corpus, direction).unwrap();
            let q = queries(&corpus, direction)[1];
            let exhaustive = retrieve(q, &corpus, &model, &index, direction, None).unwrap();
            let turbo = retrieve(q, &corpus, &model, &index, direction, Some(index.len())).unwrap();
            assert_eq!(exhaustive.ranking, turbo.ranking);
            let short = retrieve(q, &corpus, &model, &index, direction, Some(3)).unwrap();
            assert_eq!(short.reranked, 3);
            assert!(short.ranking.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater));
        }
    }

    #[test]
    fn record_format() {
        let r = RankedResult {
            query: 3,
            direction: Direction::TextToImage,
            turbo_n: Some(2),
            shortlisted: 2,
            reranked: 2,
            ranking: vec![(1, 0.5), (0, 0.25)],
        };
        assert!(r.to_record().starts_with("3\tt2i\t2\t1:"));
        assert_eq!("i2t".parse::<Direction>().unwrap(), Direction::ImageToText);
        assert!("x".parse::<Direction>().is_err());
    }
}
