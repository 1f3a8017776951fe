mod common;

use proptest::prelude::*;
use stkd_core::smiles::{parse, pre_transform, write_random_smiles};

#[test]
fn parser_agrees_with_reference_toolkit() {
    let refs = common::references();
    assert_eq!(refs.len(), 1000);
    let mut failures = Vec::new();
    for r in &refs {
        match parse(&r.smiles) {
            Ok(g) => {
                if let Err(e) = common::matches_reference(&g, r) {
                    failures.push(format!("{}: {e}", r.smiles));
                }
            }
            Err(e) => failures.push(format!("{}: {e}", r.smiles)),
        }
    }
    assert!(failures.is_empty(), "{} mismatches, first: {:?}", failures.len(), &failures[..failures.len().min(3)]);
}

#[test]
fn sequence_length_is_atoms_plus_bonds() {
    for s in common::druglike_corpus() {
        let g = parse(&s).unwrap();
        let seq = pre_transform(&g);
        assert_eq!(seq.len(), g.atom_count() + g.bond_count());
        for (b, &(u, v)) in g.bonds.iter().zip(&seq.bond_endpoints) {
            assert_eq!((b.u, b.v), (u, v));
        }
    }
}

#[test]
fn random_smiles_reparse_isomorphic_on_corpus_sample() {
    for s in common::druglike_corpus().iter().step_by(20) {
        let g = parse(s).unwrap();
        let sig = common::canonical_signature(&g);
        for seed in 0..3 {
            let w = write_random_smiles(&g, seed);
            let h = parse(&w).unwrap_or_else(|e| panic!("{s} -> {w}: {e}"));
            assert_eq!(common::canonical_signature(&h), sig, "{s} -> {w}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parser_never_panics(s in "[CcNnOo()=#123%0-9\\[\\]+\\-@H.:/\\\\BrClFS ]{0,40}") {
        match parse(&s) {
            Ok(g) => {
                for b in &g.bonds {
                    prop_assert!(b.u != b.v && b.u < g.atom_count() && b.v < g.atom_count());
                }
            }
            Err(e) => prop_assert!(e.position() <= s.len()),
        }
    }

    #[test]
    fn writer_round_trip(idx in 0usize..1000, seed in any::<u64>()) {
        let corpus = common::druglike_corpus();
        let g = parse(&corpus[idx]).unwrap();
        let h = parse(&write_random_smiles(&g, seed)).unwrap();
        prop_assert_eq!(common::canonical_signature(&g), common::canonical_signature(&h));
    }
}
