//! Synthetic small-molecule corpus labelled with the Wiener index.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::smiles::{parse, write_random_smiles, AtomNode, BondEdge, BondKind, BondOrigin, Element, MolGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { molecules: 5000, min_atoms: 5, max_atoms: 12, seed: 20220101 }
    }
}

struct Builder {
    atoms: Vec<AtomNode>,
    bonds: Vec<BondEdge>,
    free: Vec<u8>,
}

impl Builder {
    fn atom(&mut self, element: Element, aromatic: bool, valence: u8) -> usize {
        let index = self.atoms.len();
        self.atoms.push(AtomNode { index, element, aromatic, formal_charge: 0, isotope: None, explicit_h: None, bracket: false });
        self.free.push(valence);
        index
    }

    fn bond(&mut self, u: usize, v: usize, kind: BondKind, cost: u8) {
        let index = self.bonds.len();
        self.bonds.push(BondEdge { index, u, v, kind, origin: BondOrigin::Explicit });
        self.free[u] -= cost;
        self.free[v] -= cost;
    }

    fn bonded(&self, u: usize, v: usize) -> bool {
        self.bonds.iter().any(|b| (b.u == u && b.v == v) || (b.u == v && b.v == u))
    }
}

fn pick_element<R: Rng>(rng: &mut R) -> (Element, u8) {
    match rng.random_range(0..100) {
        0..70 => (Element::C, 4),
        70..85 => (Element::N, 3),
        85..97 => (Element::O, 2),
        _ => (Element::from_symbol("F").unwrap(), 1),
    }
}

/// A random connected heavy-atom graph: a tree grown atom by atom, an
/// optional aromatic six-ring, occasional extra ring bonds and some
/// double or triple bonds, within ordinary valences.
pub fn random_molecule<R: Rng>(rng: &mut R, min_atoms: usize, max_atoms: usize) -> MolGraph {
    let target = rng.random_range(min_atoms..=max_atoms);
    let mut b = Builder { atoms: Vec::new(), bonds: Vec::new(), free: Vec::new() };
    if target >= 6 && rng.random_bool(0.35) {
        let start = b.atoms.len();
        for i in 0..6 {
            let n = i > 0 && rng.random_bool(0.15);
            let (e, free) = if n { (Element::N, 2) } else { (Element::C, 3) };
            b.atom(e, true, free);
        }
        for i in 0..6 {
            b.bond(start + i, start + (i + 1) % 6, BondKind::Aromatic, 1);
        }
    } else {
        let (e, v) = pick_element(rng);
        let v = if v == 1 { 4 } else { v };
        b.atom(if v == 4 { Element::C } else { e }, false, v);
    }
    while b.atoms.len() < target {
        let open: Vec<usize> = (0..b.atoms.len()).filter(|&i| b.free[i] > 0).collect();
        let Some(&parent) = open.get(rng.random_range(0..open.len().max(1))) else { break };
        let (e, v) = pick_element(rng);
        let child = b.atom(e, false, v);
        b.bond(parent, child, BondKind::Single, 1);
    }
    if rng.random_bool(0.3) {
        let dist = MolGraph { atoms: b.atoms.clone(), bonds: b.bonds.clone(), fragments: 1 }.distance_matrix();
        let cands: Vec<(usize, usize)> = (0..b.atoms.len())
            .flat_map(|u| (u + 1..b.atoms.len()).map(move |v| (u, v)))
            .filter(|&(u, v)| b.free[u] > 0 && b.free[v] > 0 && matches!(dist[u][v], Some(2..=6)))
            .collect();
        if !cands.is_empty() {
            let (u, v) = cands[rng.random_range(0..cands.len())];
            b.bond(u, v, BondKind::Single, 1);
        }
    }
    for j in 0..b.bonds.len() {
        let BondEdge { u, v, kind, .. } = b.bonds[j];
        if kind != BondKind::Single || b.free[u] == 0 || b.free[v] == 0 || !rng.random_bool(0.2) {
            continue;
        }
        let triple = b.free[u] >= 2 && b.free[v] >= 2 && rng.random_bool(0.15);
        let (kind, extra) = if triple { (BondKind::Triple, 2) } else { (BondKind::Double, 1) };
        b.bonds[j].kind = kind;
        b.free[u] -= extra;
        b.free[v] -= extra;
    }
    debug_assert!(b.atoms.iter().all(|a| !b.bonded(a.index, a.index)));
    MolGraph { atoms: b.atoms, bonds: b.bonds, fragments: 1 }
}

/// `(smiles, wiener index)` pairs. Each molecule is written from a random
/// starting point and re-parsed before labelling.
pub fn wiener_corpus(cfg: &SyntheticConfig) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.molecules)
        .map(|_| {
            let g = random_molecule(&mut rng, cfg.min_atoms, cfg.max_atoms);
            let smiles = write_random_smiles(&g, rng.random());
            let w = parse(&smiles).expect("writer output parses").wiener_index() as f64;
            (smiles, w)
        })
        .collect()
}

pub fn write_corpus_csv<W: Write>(w: W, corpus: &[(String, f64)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["smiles", "wiener"])?;
    for (s, y) in corpus {
        out.write_record([s.as_str(), &y.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
