use thiserror::Error;

use super::graph::{BondKind, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeaturizeError {
    #[error("atom {atom}: element {symbol} is outside the featurizer's element table (max Z = {max})")]
    ElementOutOfVocabulary { atom: usize, symbol: &'static str, max: u8 },
}

pub const CHARGE_BUCKETS: usize = 7;
pub const DEGREE_BUCKETS: usize = 7;

/// Shortest-path-distance buckets used for the teacher's attention bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SpdBucket {
    Zero = 0,
    One = 1,
    Two = 2,
    Three = 3,
    /// Four or more bonds apart, or in different fragments.
    Far = 4,
    /// Any pair involving the virtual token.
    Virtual = 5,
}

impl SpdBucket {
    pub const COUNT: usize = 6;

    pub fn from_distance(d: Option<u32>) -> SpdBucket {
        match d {
            Some(0) => SpdBucket::Zero,
            Some(1) => SpdBucket::One,
            Some(2) => SpdBucket::Two,
            Some(3) => SpdBucket::Three,
            _ => SpdBucket::Far,
        }
    }
}

/// Discrete per-atom features plus structure lookups; the teacher turns
/// these into `H_0` rows through its embedding tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphFeatures {
    pub n: usize,
    pub element: Vec<usize>,
    pub charge: Vec<usize>,
    pub aromatic: Vec<usize>,
    pub degree: Vec<usize>,
    /// Row-major `(n+1) x (n+1)` bucket ids; index 0 is the virtual token.
    pub spd: Vec<usize>,
    pub bonds: Vec<(usize, usize, BondKind)>,
}

impl GraphFeatures {
    /// Token count seen by the teacher, `n + 1`.
    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphFeaturizer {
    /// Largest atomic number with an element embedding row.
    pub max_atomic_number: u8,
}

impl Default for GraphFeaturizer {
    fn default() -> Self {
        // through iodine
        GraphFeaturizer { max_atomic_number: 53 }
    }
}

impl GraphFeaturizer {
    pub fn element_rows(&self) -> usize {
        self.max_atomic_number as usize + 1
    }

    pub fn featurize(&self, graph: &MolGraph) -> Result<GraphFeatures, FeaturizeError> {
        let n = graph.atoms.len();
        let mut element = Vec::with_capacity(n);
        for a in &graph.atoms {
            let z = a.element.atomic_number();
            if z > self.max_atomic_number {
                return Err(FeaturizeError::ElementOutOfVocabulary {
                    atom: a.index,
                    symbol: a.element.symbol(),
                    max: self.max_atomic_number,
                });
            }
            element.push(z as usize);
        }
        let charge = graph
            .atoms
            .iter()
            .map(|a| (a.formal_charge.clamp(-3, 3) + 3) as usize)
            .collect();
        let aromatic = graph.atoms.iter().map(|a| a.aromatic as usize).collect();
        let degree = graph
            .degrees()
            .into_iter()
            .map(|d| d.min(DEGREE_BUCKETS - 1))
            .collect();

        let l = n + 1;
        let dist = graph.distance_matrix();
        let mut spd = vec![SpdBucket::Virtual as usize; l * l];
        for i in 0..n {
            for j in 0..n {
                spd[(i + 1) * l + j + 1] = SpdBucket::from_distance(dist[i][j]) as usize;
            }
        }
        Ok(GraphFeatures {
            n,
            element,
            charge,
            aromatic,
            degree,
            spd,
            bonds: graph.bonds.iter().map(|b| (b.u, b.v, b.kind)).collect(),
        })
    }
}

pub fn featurize_graph(graph: &MolGraph) -> Result<GraphFeatures, FeaturizeError> {
    GraphFeaturizer::default().featurize(graph)
}
