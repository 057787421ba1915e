//! Supergraph topology: linear stem, searched body of up-sampled and normal
//! feature maps, fixed bn + relu + conv + tanh head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::search_space::catalog::{normal_op, upsample_op, zero_op, CandidateOp, OpClass};
use crate::search_space::genotype::{Genotype, GenotypeNode, ResidualChoice};
use crate::search_space::mixed::{mixed_forward, EdgeClass, MixedEdge};
use crate::tensor::{Mode, OpParams, ParamGroup, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Stem,
    Up { stage: usize },
    Normal { stage: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub id: String,
    pub kind: NodeKind,
    pub channels: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeInfo {
    pub id: usize,
    pub source: usize,
    pub target: usize,
    pub class: EdgeClass,
}

/// Node and edge structure, independent of any weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub stages: usize,
    pub n: usize,
    pub base: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub nodes: Vec<NodeInfo>,
    pub edges: Vec<EdgeInfo>,
}

pub fn up_id(stage: usize) -> String {
    format!("u{stage}")
}

pub fn normal_id(stage: usize, index: usize) -> String {
    if index == 1 {
        format!("n{stage}")
    } else {
        format!("n{stage}_{index}")
    }
}

impl Topology {
    pub fn new(stages: usize, n: usize, base: usize, latent_dim: usize, channels: usize) -> Result<Self> {
        if stages == 0 || n == 0 || base == 0 || latent_dim == 0 {
            return Err(Error::Topology(format!(
                "stages, n, base and latent dim must be positive (got {stages}, {n}, {base}, {latent_dim})"
            )));
        }
        if stages > 6 {
            return Err(Error::Topology(format!("{stages} stages is more than supported (6)")));
        }
        let shrink = 1usize << stages;
        if channels == 0 || !channels.is_multiple_of(shrink) {
            return Err(Error::Topology(format!(
                "channel plan: {channels} stem channels cannot halve {stages} times"
            )));
        }
        let mut nodes = vec![NodeInfo {
            id: "stem".into(),
            kind: NodeKind::Stem,
            channels,
            size: base,
        }];
        let mut edges = Vec::new();
        let mut ups = vec![0usize];
        for stage in 1..=stages {
            let ch = channels >> stage;
            let size = base << stage;
            let prev = nodes.len() - 1;
            let target = nodes.len();
            nodes.push(NodeInfo {
                id: up_id(stage),
                kind: NodeKind::Up { stage },
                channels: ch,
                size,
            });
            edges.push(EdgeInfo {
                id: edges.len(),
                source: prev,
                target,
                class: EdgeClass::DirectUpsample,
            });
            for &src in &ups {
                if src != prev {
                    edges.push(EdgeInfo {
                        id: edges.len(),
                        source: src,
                        target,
                        class: EdgeClass::Residual,
                    });
                }
            }
            ups.push(target);
            for index in 1..=n {
                let target = nodes.len();
                nodes.push(NodeInfo {
                    id: normal_id(stage, index),
                    kind: NodeKind::Normal { stage, index },
                    channels: ch,
                    size,
                });
                edges.push(EdgeInfo {
                    id: edges.len(),
                    source: target - 1,
                    target,
                    class: EdgeClass::DirectNormal,
                });
            }
        }
        Ok(Topology {
            stages,
            n,
            base,
            latent_dim,
            channels,
            nodes,
            edges,
        })
    }

    pub fn output_size(&self) -> usize {
        self.base << self.stages
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &EdgeInfo> {
        self.edges.iter().filter(move |e| e.target == node)
    }

    pub fn direct_edge(&self, node: usize) -> Option<&EdgeInfo> {
        self.incoming(node).find(|e| e.class.is_direct())
    }

    pub fn residual_edge(&self, source: usize, target: usize) -> Option<&EdgeInfo> {
        self.edges
            .iter()
            .find(|e| e.source == source && e.target == target && e.class == EdgeClass::Residual)
    }

    /// `(direct up-sample, direct normal, residual)` edge counts.
    pub fn census(&self) -> (usize, usize, usize) {
        let count = |c| self.edges.iter().filter(|e| e.class == c).count();
        (
            count(EdgeClass::DirectUpsample),
            count(EdgeClass::DirectNormal),
            count(EdgeClass::Residual),
        )
    }

    pub fn normal_node_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Normal { .. }))
            .count()
    }

    /// Scale factor of an edge (1 for normal edges).
    pub fn edge_factor(&self, e: &EdgeInfo) -> usize {
        self.nodes[e.target].size / self.nodes[e.source].size
    }
}

/// Structural and catalog settings for building a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub stages: usize,
    pub n: usize,
    pub base: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub normal_ops: Vec<String>,
    pub upsample_ops: Vec<String>,
    /// Expected output resolution, checked against `base * 2^stages`.
    pub image_size: Option<usize>,
}

impl GraphSpec {
    pub fn new(stages: usize, n: usize, base: usize, latent_dim: usize, channels: usize) -> Self {
        GraphSpec {
            stages,
            n,
            base,
            latent_dim,
            channels,
            normal_ops: crate::search_space::catalog::NORMAL_OPS.iter().map(|s| s.to_string()).collect(),
            upsample_ops: crate::search_space::catalog::UPSAMPLE_OPS.iter().map(|s| s.to_string()).collect(),
            image_size: None,
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        let t = Topology::new(self.stages, self.n, self.base, self.latent_dim, self.channels)?;
        if let Some(size) = self.image_size {
            if size != t.output_size() {
                return Err(Error::Topology(format!(
                    "base {} x 2^{} = {} does not match image size {size}",
                    self.base,
                    self.stages,
                    t.output_size()
                )));
            }
        }
        Ok(t)
    }

    /// Candidate list for an edge of the given class and factor.
    pub fn candidates(&self, class: EdgeClass, factor: usize) -> Result<Vec<CandidateOp>> {
        let mut c = match class {
            EdgeClass::DirectNormal => self
                .normal_ops
                .iter()
                .map(|n| normal_op(n))
                .collect::<Result<Vec<_>>>()?,
            EdgeClass::DirectUpsample | EdgeClass::Residual => self
                .upsample_ops
                .iter()
                .map(|n| upsample_op(n, factor))
                .collect::<Result<Vec<_>>>()?,
        };
        if c.is_empty() {
            return Err(Error::Topology(format!("empty catalog for {class:?} edges")));
        }
        if class == EdgeClass::Residual {
            let mut z = zero_op();
            z.factor = factor;
            c.push(z);
        }
        Ok(c)
    }
}

/// A generator: stem, edges (mixed or fixed) and head, with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub topology: Topology,
    pub store: ParamStore,
    pub stem: Vec<OpParams>,
    pub edges: Vec<MixedEdge>,
    pub head: Vec<OpParams>,
}

fn build_stem_and_head(topo: &Topology, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> (Vec<OpParams>, Vec<OpParams>) {
    let (c, b) = (topo.channels, topo.base);
    let stem = vec![
        OpParams::linear(store, "stem.linear", topo.latent_dim, c * b * b, rng),
        OpParams::reshape(&[c, b, b]),
    ];
    let last = topo.nodes.last().unwrap().channels;
    let head = vec![
        OpParams::batch_norm2d(store, "head.bn", last),
        OpParams::relu(),
        OpParams::conv2d(store, "head.conv", last, 3, 3, 1, 1, true, rng),
        OpParams::tanh(),
    ];
    (stem, head)
}

fn make_edge(
    topo: &Topology,
    info: &EdgeInfo,
    ops: &[CandidateOp],
    searchable: bool,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<MixedEdge> {
    let (src, dst) = (&topo.nodes[info.source], &topo.nodes[info.target]);
    let prefix = format!("edge{}.{}->{}", info.id, src.id, dst.id);
    let inst = ops
        .iter()
        .map(|op| op.instantiate(store, &format!("{prefix}.{}", op.name), src.channels, dst.channels, rng))
        .collect::<Result<Vec<_>>>()?;
    let alpha = searchable.then(|| {
        store.push(
            format!("{prefix}.alpha"),
            ParamGroup::Arch,
            Tensor::zeros(&[ops.len()]),
        )
    });
    Ok(MixedEdge {
        id: info.id,
        source: info.source,
        target: info.target,
        class: info.class,
        ops: inst,
        alpha,
        in_channels: src.channels,
        out_channels: dst.channels,
        factor: topo.edge_factor(info),
    })
}

/// Relaxed network with every candidate on every edge and zero-initialized logits.
pub fn build_supergraph(spec: &GraphSpec, seed: u64) -> Result<Network> {
    let topo = spec.topology()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (stem, head) = build_stem_and_head(&topo, &mut store, &mut rng);
    let mut edges = Vec::with_capacity(topo.edges.len());
    for info in &topo.edges {
        let ops = spec.candidates(info.class, topo.edge_factor(info))?;
        edges.push(make_edge(&topo, info, &ops, true, &mut store, &mut rng)?);
    }
    Ok(Network {
        topology: topo,
        store,
        stem,
        edges,
        head,
    })
}

/// Fixed network holding exactly the genotype's operations, freshly
/// initialized. `spec` may change base size and latent dim (transfer).
pub fn instantiate_genotype(g: &Genotype, spec: &GraphSpec, seed: u64) -> Result<Network> {
    if g.stages != spec.stages || g.n != spec.n {
        return Err(Error::Genotype(format!(
            "genotype has stages {} n {}, config has stages {} n {}",
            g.stages, g.n, spec.stages, spec.n
        )));
    }
    let topo = spec.topology()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (stem, head) = build_stem_and_head(&topo, &mut store, &mut rng);
    let mut edges = Vec::new();
    let mut covered = vec![false; topo.nodes.len()];
    for gn in &g.nodes {
        let target = topo
            .node_index(&gn.id)
            .ok_or_else(|| Error::Genotype(format!("unknown node `{}`", gn.id)))?;
        if covered[target] {
            return Err(Error::Genotype(format!("node `{}` listed twice", gn.id)));
        }
        covered[target] = true;
        let source = topo
            .node_index(&gn.source)
            .ok_or_else(|| Error::Genotype(format!("unknown source `{}`", gn.source)))?;
        let direct = topo
            .direct_edge(target)
            .filter(|e| e.source == source)
            .ok_or_else(|| {
                Error::Genotype(format!("`{}` is not the direct source of `{}`", gn.source, gn.id))
            })?
            .clone();
        let op = op_for(&topo, &direct, &gn.op)?;
        edges.push(make_edge(&topo, &direct, &[op], false, &mut store, &mut rng)?);
        if let Some(res) = &gn.residual {
            let rsrc = topo
                .node_index(&res.source)
                .ok_or_else(|| Error::Genotype(format!("unknown residual source `{}`", res.source)))?;
            let info = topo
                .residual_edge(rsrc, target)
                .ok_or_else(|| {
                    Error::Genotype(format!("illegal residual edge {} -> {}", res.source, gn.id))
                })?
                .clone();
            let op = op_for(&topo, &info, &res.op)?;
            edges.push(make_edge(&topo, &info, &[op], false, &mut store, &mut rng)?);
        }
    }
    if let Some(missing) = covered.iter().skip(1).position(|c| !c) {
        return Err(Error::Genotype(format!(
            "node `{}` has no direct operation",
            topo.nodes[missing + 1].id
        )));
    }
    edges.sort_by_key(|e| e.id);
    Ok(Network {
        topology: topo,
        store,
        stem,
        edges,
        head,
    })
}

fn op_for(topo: &Topology, info: &EdgeInfo, name: &str) -> Result<CandidateOp> {
    match info.class {
        EdgeClass::DirectNormal => normal_op(name),
        EdgeClass::DirectUpsample | EdgeClass::Residual => upsample_op(name, topo.edge_factor(info)),
    }
}

impl Network {
    pub fn is_searchable(&self) -> bool {
        self.edges.iter().any(|e| e.alpha.is_some())
    }

    /// Maps `z: (B, latent)` to images `(B, 3, S, S)` with values in (-1, 1).
    pub fn forward(&mut self, z: Var, tape: &mut Tape, mode: Mode) -> Result<Var> {
        let zs = tape.shape(z);
        if zs.len() != 2 || zs[1] != self.topology.latent_dim {
            return Err(Error::shape(
                "generator",
                format!("latent batch {zs:?}, expected (B, {})", self.topology.latent_dim),
            ));
        }
        let mut h = z;
        for op in &self.stem {
            h = op.forward(&mut self.store, &[h], tape, mode)?;
        }
        let mut values: Vec<Option<Var>> = vec![None; self.topology.nodes.len()];
        values[0] = Some(h);
        for node in 1..self.topology.nodes.len() {
            let mut terms = Vec::new();
            for edge in self.edges.iter().filter(|e| e.target == node) {
                let x = values[edge.source].ok_or_else(|| {
                    Error::Topology(format!("edge {} reads node {} before it is computed", edge.id, edge.source))
                })?;
                terms.push(mixed_forward(edge, &mut self.store, x, tape, mode)?);
            }
            if terms.is_empty() {
                return Err(Error::Topology(format!(
                    "node `{}` has no incoming edge",
                    self.topology.nodes[node].id
                )));
            }
            values[node] = Some(if terms.len() == 1 { terms[0] } else { tape.add(&terms)? });
        }
        let mut h = values.last().copied().flatten().unwrap();
        for op in &self.head {
            h = op.forward(&mut self.store, &[h], tape, mode)?;
        }
        Ok(h)
    }

    /// Convenience forward on a plain latent batch, without gradients.
    pub fn generate(&mut self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::with_trainable(&[]);
        let v = tape.constant(z.clone())?;
        let y = self.forward(v, &mut tape, mode)?;
        Ok(tape.value(y).clone())
    }

    /// The genotype this fixed network realizes (`None` for a supergraph).
    pub fn genotype(&self) -> Option<Genotype> {
        if self.is_searchable() {
            return None;
        }
        let t = &self.topology;
        let mut nodes = Vec::new();
        for (i, info) in t.nodes.iter().enumerate().skip(1) {
            let direct = self.edges.iter().find(|e| e.target == i && e.class.is_direct())?;
            let residual = self
                .edges
                .iter()
                .find(|e| e.target == i && e.class == EdgeClass::Residual)
                .map(|e| ResidualChoice {
                    source: t.nodes[e.source].id.clone(),
                    op: e.ops[0].op.name.clone(),
                });
            nodes.push(GenotypeNode {
                id: info.id.clone(),
                source: t.nodes[direct.source].id.clone(),
                class: if direct.class == EdgeClass::DirectUpsample {
                    OpClass::Upsample
                } else {
                    OpClass::Normal
                },
                op: direct.ops[0].op.name.clone(),
                residual,
            });
        }
        Some(Genotype {
            stages: t.stages,
            n: t.n,
            base: t.base,
            latent_dim: t.latent_dim,
            nodes,
            provenance: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_three_stages() {
        let t = Topology::new(3, 1, 4, 16, 16).unwrap();
        assert_eq!(t.census(), (3, 3, 5));
        assert_eq!(t.output_size(), 32);
        let pairs: Vec<(String, String)> = t
            .edges
            .iter()
            .filter(|e| e.class == EdgeClass::Residual)
            .map(|e| (t.nodes[e.source].id.clone(), t.nodes[e.target].id.clone()))
            .collect();
        let expect = [("stem", "u2"), ("u1", "u2"), ("stem", "u3"), ("u1", "u3"), ("u2", "u3")];
        assert_eq!(pairs.len(), 5);
        for (s, d) in expect {
            assert!(pairs.contains(&(s.to_string(), d.to_string())), "{s}->{d}");
        }
    }

    #[test]
    fn census_two_stages_has_two_residuals() {
        let t = Topology::new(2, 1, 4, 16, 16).unwrap();
        assert_eq!(t.census(), (2, 2, 2));
        assert_eq!(t.output_size(), 16);
    }

    #[test]
    fn n_two_doubles_normal_nodes() {
        let t = Topology::new(3, 2, 4, 16, 16).unwrap();
        assert_eq!(t.normal_node_count(), 6);
        assert_eq!(t.nodes.len(), 10);
        assert_eq!(t.census(), (3, 6, 5));
        assert_eq!(t.nodes[3].id, "n1_2");
    }

    #[test]
    fn inconsistent_channel_plan_and_size() {
        assert!(Topology::new(3, 1, 4, 16, 12).is_err());
        let mut spec = GraphSpec::new(3, 1, 4, 8, 16);
        spec.image_size = Some(16);
        assert!(build_supergraph(&spec, 0).is_err());
    }
}
