//! Relational reasoning over projected region features.
//!
//! A reasoning pass builds a region-relation matrix, turns it into pairwise
//! and per-region relation signals, and gates each region by a learned scalar
//! in `(0, 1)`. Passes repeat `g1` times, each consuming the previous output.
//! [`attend`] then aligns the gated regions with the projected words.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv1x1Layer, Graph, LinearLayer, ParamStore, Tensor, Var};

/// Weights of one reasoning pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReasoningBlock {
    /// Left factor of the relation matrix, `d3 → d3`.
    pub relation_left: LinearLayer,
    /// Right factor of the relation matrix, `d3 → d3`.
    pub relation_right: LinearLayer,
    /// Kernel-1 convolution over stacked `[Rᵀ; R]`, `2k → k` channels.
    pub pairwise: Conv1x1Layer,
    /// Per-region inner relation, `d3 → 1`.
    pub inner: LinearLayer,
    /// Merge of pairwise row and inner value, `(k + 1) → 1`.
    pub merge: LinearLayer,
}

impl ReasoningBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, k: usize, d3: usize, rng: &mut R) -> Result<Self> {
        Ok(ReasoningBlock {
            relation_left: LinearLayer::new(store, &format!("{name}.relation_left"), d3, d3, rng)?,
            relation_right: LinearLayer::new(store, &format!("{name}.relation_right"), d3, d3, rng)?,
            pairwise: Conv1x1Layer::new(store, &format!("{name}.pairwise"), 2 * k, k, rng)?,
            inner: LinearLayer::new(store, &format!("{name}.inner"), d3, 1, rng)?,
            merge: LinearLayer::new(store, &format!("{name}.merge"), k + 1, 1, rng)?,
        })
    }

    fn check(&self, g: &Graph<'_>, v: Var) -> Result<(usize, usize)> {
        let (k, d3) = g.dims(v);
        if d3 != self.relation_left.input_dim || k != self.pairwise.out_channels {
            return Err(Error::shape(
                "reasoning",
                &[k, d3],
                &[self.pairwise.out_channels, self.relation_left.input_dim],
            ));
        }
        Ok((k, d3))
    }
}

/// All reasoning weights plus the fixed hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningParams {
    /// One block when weights are shared, otherwise one per pass.
    pub blocks: Vec<ReasoningBlock>,
    pub gamma: f64,
    pub passes: usize,
}

impl ReasoningParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        k: usize,
        d3: usize,
        gamma: f64,
        passes: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if passes == 0 {
            return Err(Error::Param("g1 must be ≥ 1".into()));
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::Param(format!("gamma must be positive, got {gamma}")));
        }
        let count = if shared { 1 } else { passes };
        let blocks = (0..count)
            .map(|i| {
                let name = if shared { "reasoning".to_string() } else { format!("reasoning.{i}") };
                ReasoningBlock::new(store, &name, k, d3, rng)
            })
            .collect::<Result<_>>()?;
        Ok(ReasoningParams { blocks, gamma, passes })
    }

    pub fn block(&self, pass: usize) -> &ReasoningBlock {
        &self.blocks[pass.min(self.blocks.len() - 1)]
    }
}

/// `[R]_{i,l} = left(v_i)ᵀ right(v_l)`, shape `[k × k]`.
pub fn relation_matrix(g: &mut Graph<'_>, regions: Var, block: &ReasoningBlock) -> Result<Var> {
    block.check(g, regions)?;
    let left = block.relation_left.forward(g, regions)?;
    let right = block.relation_right.forward(g, regions)?;
    g.matmul_nt(left, right)
}

/// `tanh(conv([Rᵀ; R]))`: `Rᵀ` and `R` stacked as `2k` channels over `k`
/// positions, mapped back to `k` channels. Rows of the result are output
/// channels.
pub fn pairwise_relations(g: &mut Graph<'_>, relations: Var, block: &ReasoningBlock) -> Result<Var> {
    let (k, k2) = g.dims(relations);
    if k != k2 || 2 * k != block.pairwise.in_channels {
        return Err(Error::shape("pairwise_relations", &[k, k2], &[block.pairwise.out_channels; 2]));
    }
    let transposed = g.transpose(relations);
    let stacked = g.concat_rows(&[transposed, relations])?;
    let conv = block.pairwise.forward(g, stacked)?;
    Ok(g.tanh(conv))
}

/// `tanh(inner(v_i))` for every region, as a `[k × 1]` column.
pub fn inner_relations(g: &mut Graph<'_>, regions: Var, block: &ReasoningBlock) -> Result<Var> {
    block.check(g, regions)?;
    let pre = block.inner.forward(g, regions)?;
    Ok(g.tanh(pre))
}

/// Merges the relation signals into one gate per region and scales the regions by it.
pub fn merge_and_gate(
    g: &mut Graph<'_>,
    regions: Var,
    pairwise: Var,
    inner: Var,
    block: &ReasoningBlock,
) -> Result<Var> {
    let (k, _) = block.check(g, regions)?;
    if g.dims(pairwise) != (k, k) || g.dims(inner) != (k, 1) {
        return Err(Error::shape("merge_and_gate", &[k, k], &[g.dims(pairwise).0, g.dims(inner).0]));
    }
    let joined = g.concat_cols(pairwise, inner)?;
    let merged_pre = block.merge.forward(g, joined)?;
    let merged = g.tanh(merged_pre);
    let gate = g.sigmoid(merged);
    g.scale_rows(regions, gate)
}

/// One reasoning pass.
pub fn reasoning_pass(g: &mut Graph<'_>, regions: Var, block: &ReasoningBlock) -> Result<Var> {
    let relations = relation_matrix(g, regions, block)?;
    let pairwise = pairwise_relations(g, relations, block)?;
    let inner = inner_relations(g, regions, block)?;
    merge_and_gate(g, regions, pairwise, inner, block)
}

/// `passes` reasoning passes, each fed the previous gated regions.
pub fn reason(g: &mut Graph<'_>, regions: Var, params: &ReasoningParams) -> Result<Var> {
    let mut current = regions;
    for pass in 0..params.passes {
        current = reasoning_pass(g, current, params.block(pass))?;
    }
    Ok(current)
}

/// Region-word attention weights for one image–description pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `a_{i,j}`, `[k × n]`; each column sums to one.
    pub weights: Tensor,
    /// Mean weight of each region over the words.
    pub region_means: Vec<f64>,
}

impl AttentionTrace {
    pub fn from_weights(weights: Tensor) -> Self {
        let n = weights.cols() as f64;
        let region_means = (0..weights.rows()).map(|i| weights.row(i).iter().sum::<f64>() / n).collect();
        AttentionTrace { weights, region_means }
    }

    /// Plain-text table: one row per region, one column per word, then the
    /// per-region mean.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let n = self.weights.cols();
        out.push_str("region");
        for j in 0..n {
            out.push_str(&format!("\tw{j}"));
        }
        out.push_str("\tmean\n");
        for i in 0..self.weights.rows() {
            out.push_str(&format!("{i}"));
            for v in self.weights.row(i) {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push_str(&format!("\t{:.6}\n", self.region_means[i]));
        }
        out
    }
}

/// Word-aligned local representations.
///
/// `s̄_{i,j}` is the thresholded cosine of region `i` and word `j`, divided by
/// the Euclidean norm of region `i`'s thresholded cosines (zero when that norm
/// is zero); `a_{i,j}` is the softmax over regions of `gamma · s̄_{i,j}`; the
/// result row `j` is `Σ_i a_{i,j} v_i`. Returns `(V_rela [n × d3], a [k × n])`.
pub fn attend(g: &mut Graph<'_>, regions: Var, words: Var, gamma: f64) -> Result<(Var, Var)> {
    let (k, d) = g.dims(regions);
    let (n, dw) = g.dims(words);
    if d != dw {
        return Err(Error::shape("attend", &[k, d], &[n, dw]));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Param(format!("gamma must be positive, got {gamma}")));
    }
    let vn = g.normalize_rows(regions);
    let un = g.normalize_rows(words);
    let cosines = g.matmul_nt(vn, un)?;
    let thresholded = g.relu(cosines);
    let normalized = g.normalize_rows(thresholded);
    let scaled = g.scale(normalized, gamma);
    let weights = g.softmax_cols(scaled);
    let wt = g.transpose(weights);
    let aligned = g.matmul(wt, regions)?;
    Ok((aligned, weights))
}
