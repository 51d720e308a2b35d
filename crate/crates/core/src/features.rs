//! Encoder outputs: per-image global vector and region grid, per-description
//! global vector and word embeddings, and the corpus that ties them together.
//!
//! Corpora are stored in a little-endian binary container:
//!
//! ```text
//! "VITRFEAT" | version: u32
//! header      m: u64 | images: u64 | d1: u64 | d2: u64 | k: u64
//! images      (id: u64 | v_glob: d1 × f64 | V: k·d2 × f64)*
//! descriptions(id: u64 | image_id: u64 | n: u64 | u_glob: d1 × f64 | U: n·d1 × f64
//!              | text_len: u64 | text: UTF-8)*
//! relevance   count: u64 | (image_id: u64 | description_id: u64)*
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, LinearLayer, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 8] = b"VITRFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub id: u64,
    /// Global representation, `d1`.
    pub global: Vec<f64>,
    /// Region features, `[k × d2]`.
    pub regions: Tensor,
}

impl ImageFeatures {
    pub fn region_count(&self) -> usize {
        self.regions.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionFeatures {
    pub id: u64,
    pub image_id: u64,
    /// Global representation, `d1`.
    pub global: Vec<f64>,
    /// Word embeddings, `[n × d1]`.
    pub words: Tensor,
    pub text: String,
}

impl DescriptionFeatures {
    pub fn word_count(&self) -> usize {
        self.words.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusDims {
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
}

/// Validated set of images, descriptions and their relevance edges.
///
/// Every description is relevant to exactly one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    images: Vec<ImageFeatures>,
    descriptions: Vec<DescriptionFeatures>,
    relevance: BTreeMap<u64, BTreeSet<u64>>,
    image_pos: HashMap<u64, usize>,
    description_pos: HashMap<u64, usize>,
    dims: CorpusDims,
}

impl Corpus {
    /// `edges` are `(image_id, description_id)`.
    pub fn new(
        images: Vec<ImageFeatures>,
        descriptions: Vec<DescriptionFeatures>,
        edges: &[(u64, u64)],
    ) -> Result<Self> {
        if images.is_empty() || descriptions.is_empty() {
            return Err(Error::Input("corpus must contain ≥1 pair".into()));
        }
        let d1 = images[0].global.len();
        let (k, d2) = (images[0].regions.rows(), images[0].regions.cols());
        if d1 == 0 {
            return Err(Error::Input("global vectors must be non-empty".into()));
        }

        let mut image_pos = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.global.len() != d1 {
                return Err(Error::Input(format!(
                    "image {}: global dimension {} differs from d1 = {d1}",
                    img.id,
                    img.global.len()
                )));
            }
            if img.regions.shape() != [k, d2] {
                return Err(Error::Input(format!(
                    "image {}: region block {:?} differs from [{k}, {d2}]",
                    img.id,
                    img.regions.shape()
                )));
            }
            if !img.global.iter().all(|v| v.is_finite()) || !img.regions.is_finite() {
                return Err(Error::Input(format!("image {}: non-finite feature", img.id)));
            }
            if image_pos.insert(img.id, i).is_some() {
                return Err(Error::Input(format!("duplicate image id {}", img.id)));
            }
        }

        let mut description_pos = HashMap::with_capacity(descriptions.len());
        for (i, d) in descriptions.iter().enumerate() {
            if d.global.len() != d1 || d.words.cols() != d1 || d.words.shape().len() != 2 {
                return Err(Error::Input(format!(
                    "description {}: text dimension {} / words {:?} differ from image d1 = {d1}",
                    d.id,
                    d.global.len(),
                    d.words.shape()
                )));
            }
            if !d.global.iter().all(|v| v.is_finite()) || !d.words.is_finite() {
                return Err(Error::Input(format!("description {}: non-finite feature", d.id)));
            }
            if !image_pos.contains_key(&d.image_id) {
                return Err(Error::Input(format!(
                    "description {} references unknown image {}",
                    d.id, d.image_id
                )));
            }
            if description_pos.insert(d.id, i).is_some() {
                return Err(Error::Input(format!("duplicate description id {}", d.id)));
            }
        }

        let mut relevance: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for &(img, desc) in edges {
            let Some(&di) = description_pos.get(&desc) else {
                return Err(Error::Input(format!("relevance edge ({img}, {desc}): unknown description")));
            };
            if !image_pos.contains_key(&img) {
                return Err(Error::Input(format!("relevance edge ({img}, {desc}): unknown image")));
            }
            if descriptions[di].image_id != img {
                return Err(Error::Input(format!(
                    "relevance edge ({img}, {desc}) contradicts description's image {}",
                    descriptions[di].image_id
                )));
            }
            if !seen.insert(desc) {
                return Err(Error::Input(format!("description {desc} has more than one relevance edge")));
            }
            relevance.entry(img).or_default().insert(desc);
        }
        if let Some(d) = descriptions.iter().find(|d| !seen.contains(&d.id)) {
            return Err(Error::Input(format!("description {} has no relevance edge", d.id)));
        }

        Ok(Corpus {
            images,
            descriptions,
            relevance,
            image_pos,
            description_pos,
            dims: CorpusDims { d1, d2, k },
        })
    }

    /// Builds relevance from each description's `image_id`.
    pub fn from_pairs(images: Vec<ImageFeatures>, descriptions: Vec<DescriptionFeatures>) -> Result<Self> {
        let edges: Vec<(u64, u64)> = descriptions.iter().map(|d| (d.image_id, d.id)).collect();
        Corpus::new(images, descriptions, &edges)
    }

    pub fn dims(&self) -> CorpusDims {
        self.dims
    }

    pub fn images(&self) -> &[ImageFeatures] {
        &self.images
    }

    pub fn descriptions(&self) -> &[DescriptionFeatures] {
        &self.descriptions
    }

    pub fn image(&self, id: u64) -> Option<&ImageFeatures> {
        self.image_pos.get(&id).map(|&i| &self.images[i])
    }

    pub fn description(&self, id: u64) -> Option<&DescriptionFeatures> {
        self.description_pos.get(&id).map(|&i| &self.descriptions[i])
    }

    pub fn image_position(&self, id: u64) -> Option<usize> {
        self.image_pos.get(&id).copied()
    }

    pub fn description_position(&self, id: u64) -> Option<usize> {
        self.description_pos.get(&id).copied()
    }

    /// Descriptions relevant to `image_id`.
    pub fn relevant_descriptions(&self, image_id: u64) -> Option<&BTreeSet<u64>> {
        self.relevance.get(&image_id)
    }

    /// The image a description is relevant to.
    pub fn image_of(&self, description_id: u64) -> Option<u64> {
        self.description(description_id).map(|d| d.image_id)
    }

    /// `(image_id, description_id)` for every relevant pair, in description order.
    pub fn pairs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.descriptions.iter().map(|d| (d.image_id, d.id))
    }

    pub fn pair_count(&self) -> usize {
        self.descriptions.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let CorpusDims { d1, d2, k } = self.dims;
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for v in [self.descriptions.len(), self.images.len(), d1, d2, k] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let put_f64s = |out: &mut Vec<u8>, xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for img in &self.images {
            out.extend_from_slice(&img.id.to_le_bytes());
            put_f64s(&mut out, &img.global);
            put_f64s(&mut out, img.regions.data());
        }
        for d in &self.descriptions {
            out.extend_from_slice(&d.id.to_le_bytes());
            out.extend_from_slice(&d.image_id.to_le_bytes());
            out.extend_from_slice(&(d.word_count() as u64).to_le_bytes());
            put_f64s(&mut out, &d.global);
            put_f64s(&mut out, d.words.data());
            out.extend_from_slice(&(d.text.len() as u64).to_le_bytes());
            out.extend_from_slice(d.text.as_bytes());
        }
        let edges: Vec<(u64, u64)> = self
            .relevance
            .iter()
            .flat_map(|(img, ds)| ds.iter().map(move |d| (*img, *d)))
            .collect();
        out.extend_from_slice(&(edges.len() as u64).to_le_bytes());
        for (img, d) in edges {
            out.extend_from_slice(&img.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_bytes(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != FEATURE_MAGIC {
            return Err(Error::Format("bad magic, expected VITRFEAT".into()));
        }
        let version = r.u32("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature-file version {version}")));
        }
        let m = r.count("description count")?;
        let image_count = r.count("image count")?;
        let d1 = r.count("d1")?;
        let d2 = r.count("d2")?;
        let k = r.count("k")?;
        if m == 0 || image_count == 0 {
            return Err(Error::Format("corpus must contain ≥1 pair".into()));
        }
        if d1 == 0 || d2 == 0 || k == 0 {
            return Err(Error::Format(format!("header dimensions must be positive (d1={d1}, d2={d2}, k={k})")));
        }

        let mut images = Vec::with_capacity(image_count.min(1 << 16));
        for i in 0..image_count {
            let what = format!("image record {i}");
            let id = r.u64(&what)?;
            let global = r.f64s(d1, &what)?;
            let regions = Tensor::matrix(k, d2, r.f64s(k * d2, &what)?)?;
            images.push(ImageFeatures { id, global, regions });
        }
        let mut descriptions = Vec::with_capacity(m.min(1 << 16));
        for i in 0..m {
            let what = format!("description record {i}");
            let id = r.u64(&what)?;
            let image_id = r.u64(&what)?;
            let n = r.count(&what)?;
            if n == 0 {
                return Err(Error::Format(format!("{what} (id {id}): word count must be ≥ 1")));
            }
            let global = r.f64s(d1, &what)?;
            let words = Tensor::matrix(n, d1, r.f64s(n * d1, &what)?)?;
            let text_len = r.count(&what)?;
            let text = std::str::from_utf8(r.take(text_len, &what)?)
                .map_err(|_| Error::Format(format!("{what} (id {id}): text is not UTF-8")))?
                .to_owned();
            descriptions.push(DescriptionFeatures {
                id,
                image_id,
                global,
                words,
                text,
            });
        }
        let edge_count = r.count("relevance count")?;
        let mut edges = Vec::with_capacity(edge_count.min(1 << 16));
        for i in 0..edge_count {
            let what = format!("relevance record {i}");
            edges.push((r.u64(&what)?, r.u64(&what)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the relevance table (header counts disagree with content)",
                bytes.len() - r.pos
            )));
        }
        Corpus::new(images, descriptions, &edges)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("unexpected end of file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // anything larger than the file cannot be a valid count
        usize::try_from(v)
            .ok()
            .filter(|&c| c <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("{what}: implausible count {v}")))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what}: block too large")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Projects each region row to the unified dimension.
pub fn project_regions(g: &mut Graph<'_>, regions: Var, layer: &LinearLayer) -> Result<Var> {
    project(g, regions, layer, "project_regions")
}

/// Projects each word embedding to the unified dimension.
pub fn project_words(g: &mut Graph<'_>, words: Var, layer: &LinearLayer) -> Result<Var> {
    project(g, words, layer, "project_words")
}

fn project(g: &mut Graph<'_>, x: Var, layer: &LinearLayer, op: &'static str) -> Result<Var> {
    let (rows, cols) = g.dims(x);
    if cols != layer.input_dim {
        return Err(Error::shape(op, &[rows, cols], &[layer.output_dim, layer.input_dim]));
    }
    layer.forward(g, x)
}
