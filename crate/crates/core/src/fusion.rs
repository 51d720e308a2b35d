//! Joins local and global image–description pairs, fuses the joined vectors
//! through an edge-gated graph, and reduces them to a similarity in `(0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, GruLayer, LinearLayer, ParamStore, Var};

/// How a node aggregates over its edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseVariant {
    /// `z_j ← Σ_l W(σ(E_jl) z_j)`: each node scales its own vector by every edge gate.
    #[default]
    Literal,
    /// `z_j ← Σ_l W(σ(E_jl) z_l)`: conventional message passing.
    MessagePassing,
}

/// Which recurrent state summarizes the fused sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryState {
    #[default]
    First,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionBlock {
    pub edge_left: LinearLayer,
    pub edge_right: LinearLayer,
    pub fuse: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// Global join projection, `d1 → d4`.
    pub glob: LinearLayer,
    /// Local join projection, `d3 → d4`.
    pub rela: LinearLayer,
    pub blocks: Vec<FusionBlock>,
    pub gru: GruLayer,
    /// `d4 → 1`.
    pub head: LinearLayer,
    pub passes: usize,
    pub variant: FuseVariant,
    pub summary: SummaryState,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d1: usize,
        d3: usize,
        d4: usize,
        passes: usize,
        shared: bool,
        variant: FuseVariant,
        summary: SummaryState,
        rng: &mut R,
    ) -> Result<Self> {
        if passes == 0 {
            return Err(Error::Param("g2 must be ≥ 1".into()));
        }
        let glob = LinearLayer::new(store, "fusion.glob", d1, d4, rng)?;
        let rela = LinearLayer::new(store, "fusion.rela", d3, d4, rng)?;
        let count = if shared { 1 } else { passes };
        let mut blocks = Vec::with_capacity(count);
        for i in 0..count {
            let name = if shared { "fusion".to_string() } else { format!("fusion.{i}") };
            blocks.push(FusionBlock {
                edge_left: LinearLayer::new(store, &format!("{name}.edge_left"), d4, d4, rng)?,
                edge_right: LinearLayer::new(store, &format!("{name}.edge_right"), d4, d4, rng)?,
                fuse: LinearLayer::new(store, &format!("{name}.fuse"), d4, d4, rng)?,
            });
        }
        let gru = GruLayer::new(store, "fusion.gru", d4, d4, rng)?;
        let head = LinearLayer::new(store, "fusion.head", d4, 1, rng)?;
        Ok(FusionParams {
            glob,
            rela,
            blocks,
            gru,
            head,
            passes,
            variant,
            summary,
        })
    }

    pub fn block(&self, pass: usize) -> &FusionBlock {
        &self.blocks[pass.min(self.blocks.len() - 1)]
    }
}

/// Builds the joined sequence `[glob((u − v)²); rela((u*_j − v_j)²)…]`.
///
/// With `globals = None` the global row is left out.
pub fn join(
    g: &mut Graph<'_>,
    globals: Option<(Var, Var)>,
    words: Var,
    aligned: Var,
    params: &FusionParams,
) -> Result<Var> {
    if g.dims(words) != g.dims(aligned) {
        let (a, b) = (g.dims(words), g.dims(aligned));
        return Err(Error::shape("join", &[a.0, a.1], &[b.0, b.1]));
    }
    let mut rows = Vec::with_capacity(2);
    if let Some((u, v)) = globals {
        let diff = g.sub(u, v)?;
        let z = g.square(diff);
        rows.push(params.glob.forward(g, z)?);
    }
    let diff = g.sub(words, aligned)?;
    let z = g.square(diff);
    rows.push(params.rela.forward(g, z)?);
    g.concat_rows(&rows)
}

/// One edge-gated fusion pass.
pub fn fuse_pass(g: &mut Graph<'_>, nodes: Var, block: &FusionBlock, variant: FuseVariant) -> Result<Var> {
    let (count, _) = g.dims(nodes);
    let left = block.edge_left.forward(g, nodes)?;
    let right = block.edge_right.forward(g, nodes)?;
    let edges = g.matmul_nt(left, right)?;
    let gates = g.sigmoid(edges);
    // W is linear, so Σ_l W(x_l) = W_weight · Σ_l x_l + count · bias
    let mixed = match variant {
        FuseVariant::Literal => {
            let gate_sums = g.row_sum(gates);
            g.scale_rows(nodes, gate_sums)?
        }
        FuseVariant::MessagePassing => g.matmul(gates, nodes)?,
    };
    let projected = block.fuse.forward_no_bias(g, mixed)?;
    let bias = g.param(block.fuse.bias);
    let bias = g.scale(bias, count as f64);
    g.add_row_bias(projected, bias)
}

/// `passes` fusion passes, each fed the previous output.
pub fn graph_fuse(g: &mut Graph<'_>, joined: Var, params: &FusionParams) -> Result<Var> {
    let mut current = joined;
    for pass in 0..params.passes {
        current = fuse_pass(g, current, params.block(pass), params.variant)?;
    }
    Ok(current)
}

/// Runs the GRU over the fused rows and maps the summary state to `σ(head(h))`.
pub fn score(g: &mut Graph<'_>, fused: Var, params: &FusionParams) -> Result<Var> {
    let states = params.gru.forward(g, fused)?;
    let summary = match params.summary {
        SummaryState::First => states.first(),
        SummaryState::Last => states.last(),
    }
    .copied()
    .ok_or_else(|| Error::Input("cannot score an empty sequence".into()))?;
    let logit = params.head.forward(g, summary)?;
    Ok(g.sigmoid(logit))
}
