#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use stkd_core::smiles::{BondKind, MolGraph};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn druglike_corpus() -> Vec<String> {
    std::fs::read_to_string(fixture("druglike_1000.smi"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

/// One row of the RDKit reference table.
pub struct Reference {
    pub smiles: String,
    pub n: usize,
    pub m: usize,
    /// `(symbol, aromatic, charge, isotope)` per atom in reading order.
    pub atoms: Vec<(String, bool, i32, u32)>,
    /// Sorted `(u, v, order char)` with `u < v`.
    pub bonds: Vec<(usize, usize, char)>,
}

pub fn references() -> Vec<Reference> {
    let text = std::fs::read_to_string(fixture("druglike_1000.ref.tsv")).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let atoms = f[3]
                .split_whitespace()
                .map(|a| {
                    let p: Vec<&str> = a.split(':').collect();
                    (p[0].to_string(), p[1] == "1", p[2].parse().unwrap(), p[3].parse().unwrap())
                })
                .collect();
            let mut bonds: Vec<(usize, usize, char)> = f
                .get(4)
                .copied()
                .unwrap_or("")
                .split_whitespace()
                .map(|b| {
                    let kind = b.chars().last().unwrap();
                    let body = &b[..b.len() - 1];
                    let (u, v) = body.split_once('-').unwrap();
                    (u.parse().unwrap(), v.parse().unwrap(), kind)
                })
                .collect();
            bonds.sort();
            Reference {
                smiles: f[0].to_string(),
                n: f[1].parse().unwrap(),
                m: f[2].parse().unwrap(),
                atoms,
                bonds,
            }
        })
        .collect()
}

pub fn order_char(k: BondKind) -> char {
    match k.order() {
        BondKind::Double => '=',
        BondKind::Triple => '#',
        BondKind::Aromatic => ':',
        _ => '-',
    }
}

/// Compares a parsed graph to its RDKit reference; `Err` names the first
/// difference.
pub fn matches_reference(g: &MolGraph, r: &Reference) -> Result<(), String> {
    if g.atoms.len() != r.n || g.bonds.len() != r.m {
        return Err(format!("counts {}/{} vs {}/{}", g.atoms.len(), g.bonds.len(), r.n, r.m));
    }
    for (a, (sym, arom, charge, iso)) in g.atoms.iter().zip(&r.atoms) {
        let got = (
            a.element.symbol().to_string(),
            a.aromatic,
            a.formal_charge as i32,
            a.isotope.unwrap_or(0) as u32,
        );
        if got != (sym.clone(), *arom, *charge, *iso) {
            return Err(format!("atom {} {:?} vs {:?}", a.index, got, (sym, arom, charge, iso)));
        }
    }
    let mut ours: Vec<(usize, usize, char)> = g
        .bonds
        .iter()
        .map(|b| (b.u.min(b.v), b.u.max(b.v), order_char(b.kind)))
        .collect();
    ours.sort();
    if ours != r.bonds {
        return Err(format!("adjacency differs: {:?} vs {:?}", ours, r.bonds));
    }
    Ok(())
}

fn atom_label(g: &MolGraph, i: usize) -> String {
    let a = &g.atoms[i];
    format!("{}|{}|{}|{:?}|{:?}", a.element, a.aromatic, a.formal_charge, a.isotope, a.explicit_h)
}

/// Colour refinement (1-WL) over atom labels and bond orders; returns the
/// final multiset of colours plus the labelled-edge multiset. Equal outputs
/// are a necessary condition for isomorphism and, on molecular graphs,
/// separate practically every non-isomorphic pair.
pub fn canonical_signature(g: &MolGraph) -> (Vec<String>, Vec<(String, String, char)>) {
    let n = g.atoms.len();
    let adj = g.adjacency();
    let mut colour: Vec<String> = (0..n).map(|i| atom_label(g, i)).collect();
    for _ in 0..n.max(1) {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut nb: Vec<String> = adj[i]
                .iter()
                .map(|&(j, b)| format!("{}{}", order_char(g.bonds[b].kind), colour[j]))
                .collect();
            nb.sort();
            next.push(format!("{}[{}]", colour[i], nb.join(",")));
        }
        // compress to keep strings short
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        for c in &next {
            let len = ids.len();
            ids.entry(c.clone()).or_insert(len);
        }
        let distinct_before: HashMap<&String, ()> = colour.iter().map(|c| (c, ())).collect();
        let compressed: Vec<String> = next.iter().map(|c| format!("#{}", hash(c))).collect();
        let stable = ids.len() == distinct_before.len();
        colour = compressed;
        if stable {
            break;
        }
    }
    let mut cs = colour.clone();
    cs.sort();
    let mut edges: Vec<(String, String, char)> = g
        .bonds
        .iter()
        .map(|b| {
            let (x, y) = (atom_label(g, b.u), atom_label(g, b.v));
            let (x, y) = if x <= y { (x, y) } else { (y, x) };
            (x, y, order_char(b.kind))
        })
        .collect();
    edges.sort();
    (cs, edges)
}

fn hash(s: &str) -> u64 {
    // FNV-1a; stable across runs
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
