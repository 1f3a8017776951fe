//! SMILES reading and writing, and the atom-then-bond token layout the
//! student model consumes.

mod features;
mod graph;
mod parser;
mod writer;

pub use features::{featurize_graph, FeaturizeError, GraphFeaturizer, GraphFeatures, SpdBucket, CHARGE_BUCKETS, DEGREE_BUCKETS};
pub use graph::{AtomNode, BondEdge, BondKind, BondOrigin, Element, MolGraph};
pub use parser::{parse, ParseError};
pub use writer::write_random_smiles;

/// A molecule as an explicit token sequence: all atom tokens in reading
/// order, then all bond tokens in discovery order, with each bond's
/// endpoints (0-based atom ordinals).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedSequence {
    pub atom_tokens: Vec<String>,
    pub bond_tokens: Vec<String>,
    pub bond_endpoints: Vec<(usize, usize)>,
}

impl UnifiedSequence {
    pub fn n(&self) -> usize {
        self.atom_tokens.len()
    }

    pub fn m(&self) -> usize {
        self.bond_tokens.len()
    }

    /// `n + m`; the model adds one more position for the virtual token.
    pub fn len(&self) -> usize {
        self.n() + self.m()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.atom_tokens.iter().chain(&self.bond_tokens).map(String::as_str)
    }
}

pub fn pre_transform(graph: &MolGraph) -> UnifiedSequence {
    UnifiedSequence {
        atom_tokens: graph.atoms.iter().map(AtomNode::token).collect(),
        bond_tokens: graph.bonds.iter().map(|b| b.kind.symbol().to_string()).collect(),
        bond_endpoints: graph.bonds.iter().map(|b| (b.u, b.v)).collect(),
    }
}

/// Parses and pre-transforms in one step.
pub fn smiles_to_sequence(smiles: &str) -> Result<UnifiedSequence, ParseError> {
    parse(smiles).map(|g| pre_transform(&g))
}

/// Splits a raw SMILES string into conventional lexical tokens (bracket
/// atoms, two-letter halogens, `%nn` ring labels, and single characters).
/// Used by the sinusoidal-position baseline that skips pre-transformation.
pub fn tokenize_raw(smiles: &str) -> Vec<String> {
    let b = smiles.trim().as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        let len = match b[i] {
            b'[' => b[i..].iter().position(|&c| c == b']').map_or(b.len() - i, |p| p + 1),
            b'%' if i + 2 < b.len() => 3,
            b'C' if b.get(i + 1) == Some(&b'l') => 2,
            b'B' if b.get(i + 1) == Some(&b'r') => 2,
            c if !c.is_ascii() => {
                let s = std::str::from_utf8(&b[i..]).ok();
                s.and_then(|s| s.chars().next()).map_or(1, char::len_utf8)
            }
            _ => 1,
        };
        out.push(String::from_utf8_lossy(&b[i..i + len]).into_owned());
        i += len;
    }
    out
}
