use crate::search_space::catalog::OpClass;

/// Selected residual connection into a node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResidualChoice {
    pub source: String,
    pub op: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GenotypeNode {
    pub id: String,
    pub source: String,
    /// `Upsample` for up-sampled maps, `Normal` otherwise.
    pub class: OpClass,
    pub op: String,
    pub residual: Option<ResidualChoice>,
}

/// Config hash and seed of the run that produced an artifact.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Discrete generator architecture: one direct operation per node and at
/// most one residual operation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub stages: usize,
    pub n: usize,
    pub base: usize,
    pub latent_dim: usize,
    pub nodes: Vec<GenotypeNode>,
    pub provenance: Option<Provenance>,
}

impl Genotype {
    pub fn node(&self, id: &str) -> Option<&GenotypeNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn residual_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.residual.is_some()).count()
    }
}
