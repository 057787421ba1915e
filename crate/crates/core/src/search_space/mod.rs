//! Operation catalogs, mixed edges and the generator supergraph.

pub mod catalog;
pub mod genotype;
pub mod graph;
pub mod mixed;

pub use catalog::{
    normal_catalog, upsample_catalog, CandidateOp, OpClass, OpInstance, OpSpec, NORMAL_OPS, UPSAMPLE_OPS,
};
pub use genotype::{Genotype, GenotypeNode, Provenance, ResidualChoice};
pub use graph::{build_supergraph, instantiate_genotype, GraphSpec, Network, NodeKind, Topology};
pub use mixed::{edge_weights, mixed_forward, EdgeClass, MixedEdge};
