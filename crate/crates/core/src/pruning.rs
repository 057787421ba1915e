//! Discretizing a relaxed supergraph into a genotype, and counting the space.

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::search_space::catalog::{normal_op, upsample_op, ZERO_OP};
use crate::search_space::{
    edge_weights, mixed::softmax, EdgeClass, Genotype, GenotypeNode, GraphSpec, Network, OpClass, ResidualChoice,
    Topology,
};

/// Logits of one edge, named by candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAlpha {
    /// Edge id in the topology.
    pub edge: usize,
    pub candidates: Vec<String>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScore {
    pub edge: usize,
    pub candidate: String,
    pub weight: f64,
    pub class: EdgeClass,
}

/// Softmax weights of every candidate on every edge.
pub fn edge_scores(topo: &Topology, alphas: &[EdgeAlpha]) -> Result<Vec<EdgeScore>> {
    let mut out = Vec::new();
    for ea in alphas {
        let info = topo
            .edges
            .get(ea.edge)
            .ok_or_else(|| Error::Topology(format!("edge {} not in topology", ea.edge)))?;
        if ea.alpha.len() != ea.candidates.len() || ea.alpha.is_empty() {
            return Err(Error::Topology(format!(
                "edge {}: {} logits for {} candidates",
                ea.edge,
                ea.alpha.len(),
                ea.candidates.len()
            )));
        }
        if ea.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { op: "prune" });
        }
        for (name, w) in ea.candidates.iter().zip(softmax(&ea.alpha)) {
            out.push(EdgeScore {
                edge: ea.edge,
                candidate: name.clone(),
                weight: w,
                class: info.class,
            });
        }
    }
    Ok(out)
}

/// Logits of a supergraph in the form [`prune`] expects.
pub fn network_alphas(net: &Network) -> Result<Vec<EdgeAlpha>> {
    net.edges
        .iter()
        .map(|e| {
            let id = e
                .alpha
                .ok_or_else(|| Error::Topology(format!("edge {} has no architecture logits", e.id)))?;
            Ok(EdgeAlpha {
                edge: e.id,
                candidates: e.candidate_names(),
                alpha: net.store.get(id).data().to_vec(),
            })
        })
        .collect()
}

/// (weight, index) pair beats `best` under: higher weight, then lower
/// candidate index, then lower edge id (edges are visited in id order).
fn better(w: f64, idx: usize, best: Option<(f64, usize)>) -> bool {
    match best {
        None => true,
        Some((bw, bi)) => w > bw || (w == bw && idx < bi),
    }
}

/// Two-stage rule. Stage 1 picks the strongest (edge, candidate) over all
/// edges entering a node. If that lies on a residual edge, stage 2 adds the
/// best candidate of the node's direct edge; a winning zero drops the residual.
pub fn prune(topo: &Topology, alphas: &[EdgeAlpha]) -> Result<Genotype> {
    edge_scores(topo, alphas)?;
    let mut by_edge: Vec<Option<(&EdgeAlpha, Vec<f64>)>> = vec![None; topo.edges.len()];
    for ea in alphas {
        by_edge[ea.edge] = Some((ea, softmax(&ea.alpha)));
    }
    let mut nodes = Vec::new();
    for (t, info) in topo.nodes.iter().enumerate().skip(1) {
        let mut incoming: Vec<usize> = topo
            .incoming(t)
            .map(|e| e.id)
            .filter(|&id| by_edge[id].is_some())
            .collect();
        incoming.sort_unstable();
        if incoming.is_empty() {
            return Err(Error::Topology(format!("node `{}` has no incoming edges", info.id)));
        }
        let mut best: Option<(f64, usize)> = None;
        let mut best_edge = incoming[0];
        for &id in &incoming {
            let (_, w) = by_edge[id].as_ref().unwrap();
            for (i, &wi) in w.iter().enumerate() {
                if better(wi, i, best) {
                    best = Some((wi, i));
                    best_edge = id;
                }
            }
        }
        let win = &topo.edges[best_edge];
        let direct = topo
            .direct_edge(t)
            .filter(|e| by_edge[e.id].is_some())
            .ok_or_else(|| Error::Topology(format!("node `{}` has no direct edge", info.id)))?;
        let (dea, dw) = by_edge[direct.id].as_ref().unwrap();
        let mut di = 0;
        for (i, &wi) in dw.iter().enumerate() {
            if wi > dw[di] {
                di = i;
            }
        }
        let residual = if win.class == EdgeClass::Residual {
            let (ea, _) = by_edge[win.id].as_ref().unwrap();
            let name = &ea.candidates[best.unwrap().1];
            (name != ZERO_OP).then(|| ResidualChoice {
                source: topo.nodes[win.source].id.clone(),
                op: name.clone(),
            })
        } else {
            None
        };
        nodes.push(GenotypeNode {
            id: info.id.clone(),
            source: topo.nodes[direct.source].id.clone(),
            class: if direct.class == EdgeClass::DirectUpsample {
                OpClass::Upsample
            } else {
                OpClass::Normal
            },
            op: dea.candidates[di].clone(),
            residual,
        });
    }
    Ok(Genotype {
        stages: topo.stages,
        n: topo.n,
        base: topo.base,
        latent_dim: topo.latent_dim,
        nodes,
        provenance: None,
    })
}

/// Prunes a trained supergraph.
pub fn prune_network(net: &Network) -> Result<Genotype> {
    prune(&net.topology, &network_alphas(net)?)
}

/// Every problem with `g` against `topo`; empty when valid.
pub fn validate(g: &Genotype, topo: &Topology) -> Vec<String> {
    let mut errs = Vec::new();
    if (g.stages, g.n) != (topo.stages, topo.n) {
        errs.push(format!(
            "genotype has stages {} n {}, topology has stages {} n {}",
            g.stages, g.n, topo.stages, topo.n
        ));
        return errs;
    }
    let mut seen = vec![false; topo.nodes.len()];
    for gn in &g.nodes {
        let Some(t) = topo.node_index(&gn.id).filter(|&t| t > 0) else {
            errs.push(format!("unknown node `{}`", gn.id));
            continue;
        };
        if seen[t] {
            errs.push(format!("node `{}` listed twice", gn.id));
        }
        seen[t] = true;
        let direct = topo.direct_edge(t).expect("every non-stem node has a direct edge");
        let expected_src = &topo.nodes[direct.source].id;
        if &gn.source != expected_src {
            errs.push(format!(
                "node `{}` takes its direct input from `{}`, expected `{expected_src}`",
                gn.id, gn.source
            ));
        }
        let factor = topo.edge_factor(direct);
        match direct.class {
            EdgeClass::DirectNormal => {
                if gn.class != OpClass::Normal || normal_op(&gn.op).is_err() {
                    errs.push(format!("node `{}` needs a normal op, got `{}`", gn.id, gn.op));
                }
            }
            _ => {
                if gn.class != OpClass::Upsample || upsample_op(&gn.op, factor).is_err() {
                    errs.push(format!("node `{}` needs an up-sample op, got `{}`", gn.id, gn.op));
                }
            }
        }
        if let Some(r) = &gn.residual {
            let edge = topo.node_index(&r.source).and_then(|s| topo.residual_edge(s, t));
            match edge {
                None => errs.push(format!("illegal residual edge {} -> {}", r.source, gn.id)),
                Some(e) => {
                    if upsample_op(&r.op, topo.edge_factor(e)).is_err() {
                        errs.push(format!(
                            "residual {} -> {} cannot use `{}` at factor {}",
                            r.source,
                            gn.id,
                            r.op,
                            topo.edge_factor(e)
                        ));
                    }
                }
            }
        }
    }
    for (t, s) in seen.iter().enumerate().skip(1) {
        if !s {
            errs.push(format!("node `{}` has no direct operation", topo.nodes[t].id));
        }
    }
    errs
}

/// Exact product of per-edge choice counts.
pub fn count_architectures(factors: &[u64]) -> BigUint {
    factors.iter().fold(BigUint::from(1u32), |acc, &f| acc * f)
}

/// Candidate count of every edge of the space described by `spec`, in edge order.
pub fn edge_choice_counts(spec: &GraphSpec) -> Result<Vec<u64>> {
    let topo = spec.topology()?;
    topo.edges
        .iter()
        .map(|e| Ok(spec.candidates(e.class, topo.edge_factor(e))?.len() as u64))
        .collect()
}

/// Uniform logits in [0, 1) on every edge of `spec`'s supergraph, then pruned.
pub fn random_genotype(spec: &GraphSpec, seed: u64) -> Result<Genotype> {
    let topo = spec.topology()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alphas = Vec::with_capacity(topo.edges.len());
    for e in &topo.edges {
        let names: Vec<String> = spec
            .candidates(e.class, topo.edge_factor(e))?
            .into_iter()
            .map(|c| c.name)
            .collect();
        let alpha = (0..names.len()).map(|_| rng.gen::<f64>()).collect();
        alphas.push(EdgeAlpha {
            edge: e.id,
            candidates: names,
            alpha,
        });
    }
    prune(&topo, &alphas)
}

/// Current softmax weights of a supergraph, one row per edge.
pub fn supergraph_weights(net: &Network) -> Vec<Vec<f64>> {
    net.edges.iter().map(|e| edge_weights(&net.store, e)).collect()
}
