//! Mini-batch training with the hardest-negative loss.
//!
//! Each batch first fills its `b × b` score matrix with gradient-free scorer
//! calls, run in parallel. The loss picks at most two active hinges per
//! anchor, so the tape only records the batch encodings and the pairs those
//! hinges touch before the single backward pass.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::loss::{lseh_outcome, ActiveHinge, TrainConfig};
use crate::model::{EncodedNodes, VitrParams};
use crate::optim::Adam;
use crate::semantic::SemanticIndex;
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// `epoch,mean_loss,learning_rate` lines.
pub fn history_text(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| format!("{},{},{}\n", r.epoch, r.mean_loss, r.learning_rate))
        .collect()
}

/// Trains `model` on every relevant pair of `corpus`.
pub fn train(corpus: &Corpus, model: VitrParams, config: &TrainConfig) -> Result<(VitrParams, Vec<EpochRecord>)> {
    config.validate()?;
    model.check_dims(corpus.dims())?;
    if corpus.pair_count() < config.batch_size {
        return Err(Error::Input(format!(
            "corpus has {} pairs, fewer than the batch size {}",
            corpus.pair_count(),
            config.batch_size
        )));
    }
    let mut model = model;
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let index = SemanticIndex::build(corpus, config.d5)?;
    let mut pairs: Vec<(usize, usize)> = corpus
        .pairs()
        .map(|(img, desc)| {
            let i = corpus.image_position(img).expect("validated corpus");
            let d = corpus.description_position(desc).expect("validated corpus");
            (i, d)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.store, config.beta1, config.beta2, config.epsilon);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        pairs.shuffle(&mut rng);
        let (mut weighted, mut seen) = (0.0, 0usize);
        for (batch_no, batch) in pairs.chunks(config.batch_size).enumerate() {
            // a lone trailing pair has no in-batch negatives
            if batch.len() < 2 {
                continue;
            }
            let loss = train_batch(corpus, &mut model, &index, config, batch, &mut adam, lr)
                .map_err(|e| match e {
                    Error::NonFinite { param, magnitude, .. } => Error::NonFinite {
                        epoch,
                        batch: batch_no + 1,
                        param,
                        magnitude,
                    },
                    other => other,
                })?;
            weighted += loss * batch.len() as f64;
            seen += batch.len();
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: weighted / seen as f64,
            learning_rate: lr,
        });
    }
    Ok((model, history))
}

/// One optimizer step; returns the batch loss.
fn train_batch(
    corpus: &Corpus,
    model: &mut VitrParams,
    index: &SemanticIndex,
    config: &TrainConfig,
    batch: &[(usize, usize)],
    adam: &mut Adam,
    lr: f64,
) -> Result<f64> {
    let b = batch.len();
    let images: Vec<_> = batch.iter().map(|&(i, _)| &corpus.images()[i]).collect();
    let descs: Vec<_> = batch.iter().map(|&(_, d)| &corpus.descriptions()[d]).collect();

    let frozen = &*model;
    let image_enc = images
        .par_iter()
        .map(|img| frozen.encode_image(img))
        .collect::<Result<Vec<_>>>()?;
    let desc_enc = descs
        .par_iter()
        .map(|d| frozen.encode_description(d))
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..b)
        .into_par_iter()
        .map(|p| (0..b).map(|q| frozen.pair_score(&image_enc[p], &desc_enc[q])).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let scores = Tensor::matrix(b, b, rows.concat())?;
    let mut cosines = Vec::with_capacity(b * b);
    for p in &descs {
        for q in &descs {
            cosines.push(index.cosine(p.id, q.id)?);
        }
    }
    let cosines = Tensor::matrix(b, b, cosines)?;

    // two descriptions of one image are never negatives of each other
    let outcome = lseh_outcome(&scores, &cosines, config, |p, q| images[p].id != images[q].id)?;
    let grads = if outcome.loss.is_finite() {
        if outcome.active.is_empty() {
            return Ok(outcome.loss);
        }
        hinge_gradients(frozen, &images, &descs, &outcome.active, b)?
    } else {
        // the diagonal alone is enough to locate the blow-up
        let diagonal: Vec<ActiveHinge> = (0..b)
            .map(|p| ActiveHinge {
                anchor: p,
                image: p,
                description: p,
                margin: 0.0,
                value: f64::NAN,
            })
            .collect();
        hinge_gradients(frozen, &images, &descs, &diagonal, b)?
    };

    let non_finite = !outcome.loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite()));
    if non_finite {
        let (param, magnitude) = largest_gradient(model, &grads);
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            param,
            magnitude,
        });
    }
    adam.step(&mut model.store, &grads, lr)?;
    Ok(outcome.loss)
}

/// Gradients of `(1/b) Σ (s_negative − s_anchor)` over the given hinges.
fn hinge_gradients(
    model: &VitrParams,
    images: &[&crate::features::ImageFeatures],
    descs: &[&crate::features::DescriptionFeatures],
    hinges: &[ActiveHinge],
    b: usize,
) -> Result<Vec<(ParamId, Vec<f64>)>> {
    let mut g = Graph::with_params(&model.store);
    let mut image_nodes: HashMap<usize, EncodedNodes> = HashMap::new();
    let mut desc_nodes: HashMap<usize, EncodedNodes> = HashMap::new();
    let mut pair_nodes: HashMap<(usize, usize), Var> = HashMap::new();
    let mut score = |g: &mut Graph<'_>, i: usize, d: usize| -> Result<Var> {
        if let Some(v) = pair_nodes.get(&(i, d)) {
            return Ok(*v);
        }
        if let Entry::Vacant(e) = image_nodes.entry(i) {
            e.insert(model.encode_image_on(g, images[i])?);
        }
        if let Entry::Vacant(e) = desc_nodes.entry(d) {
            e.insert(model.encode_description_on(g, descs[d])?);
        }
        let v = model.pair_score_on(g, &image_nodes[&i], &desc_nodes[&d])?;
        pair_nodes.insert((i, d), v);
        Ok(v)
    };
    let mut total: Option<Var> = None;
    for h in hinges {
        let positive = score(&mut g, h.anchor, h.anchor)?;
        let term = if (h.image, h.description) == (h.anchor, h.anchor) {
            positive
        } else {
            let negative = score(&mut g, h.image, h.description)?;
            g.sub(negative, positive)?
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no hinges to differentiate".into()))?;
    let loss = g.scale(total, 1.0 / b as f64);
    g.backward(loss)?;
    Ok(g.param_grads().map(|(id, grad)| (id, grad.to_vec())).collect())
}

fn largest_gradient(model: &VitrParams, grads: &[(ParamId, Vec<f64>)]) -> (String, f64) {
    let mut best: Option<(ParamId, f64)> = None;
    for (id, g) in grads {
        for v in g {
            let m = if v.is_finite() { v.abs() } else { f64::INFINITY };
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((*id, m));
            }
        }
    }
    match best {
        Some((id, m)) => (model.store.name(id).to_string(), m),
        None => ("<none>".to_string(), 0.0),
    }
}
