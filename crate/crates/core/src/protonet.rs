//! Episode forward pass: embed support and query images, build prototypes,
//! score queries.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::backbones::Model;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::fewshot::{classify_queries, episode_loss, prototypes};
use crate::hfw::MemoryScope;
use crate::nn::Bound;

pub struct EpisodeOutput {
    pub support_emb: Var,
    pub query_emb: Var,
    pub logits: Var,
    pub loss: Var,
    pub preds: Vec<usize>,
}

/// Embeds the support set under the model's memory scope.
///
/// With episode-scoped memory the support images are fed one at a time in
/// order and the memory carries over; otherwise the set is one batch on
/// fresh memory. Returns the embeddings and the final memory.
pub fn embed_support<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    p: &Bound,
    support: Var,
) -> Result<(Var, crate::backbones::MemoryState)> {
    let mut mem = model.new_memory();
    if model.memory_scope() != Some(MemoryScope::PerEpisode) {
        let z = model.embed(g, p, support, &mut mem)?;
        return Ok((z, mem));
    }
    let n = g.shape(support)[0];
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let x = g.narrow(support, 0, i, 1)?;
        parts.push(model.embed(g, p, x, &mut mem)?);
    }
    Ok((g.concat(&parts, 0)?, mem))
}

/// Full episode: prototypes from `support` `[N·K, C, S, S]`, logits and loss
/// for `query` `[N·Q, C, S, S]`.
///
/// Queries start from the memory the support pass left behind; whatever they
/// write is dropped, so no query influences another.
#[allow(clippy::too_many_arguments)]
pub fn episode_forward<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    p: &Bound,
    support: Var,
    support_labels: &[usize],
    query: Var,
    query_labels: &[usize],
    n_way: usize,
) -> Result<EpisodeOutput> {
    if g.shape(support)[0] != support_labels.len() || g.shape(query)[0] != query_labels.len() {
        return Err(Error::Argument("image and label counts differ".into()));
    }
    let (support_emb, mem) = embed_support(model, g, p, support)?;
    let protos = prototypes(g, support_emb, support_labels, n_way)?;
    let mut query_mem = mem.clone();
    let query_emb = model.embed(g, p, query, &mut query_mem)?;
    let (logits, preds) = classify_queries(g, query_emb, protos)?;
    let loss = episode_loss(g, logits, query_labels)?;
    Ok(EpisodeOutput {
        support_emb,
        query_emb,
        logits,
        loss,
        preds,
    })
}
