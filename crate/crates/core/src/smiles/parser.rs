use std::collections::HashSet;

use thiserror::Error;

use super::graph::{AtomNode, BondEdge, BondKind, BondOrigin, Element, MolGraph};

/// Parse failure. Positions are byte offsets into the string passed to
/// [`parse`], leading whitespace included.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("unexpected symbol {symbol:?} at byte {position}")]
    UnknownSymbol { position: usize, symbol: char },
    #[error("ring bond {digit} opened at byte {position} is never closed")]
    UnclosedRing { digit: u8, position: usize },
    #[error("unbalanced branch at byte {position}")]
    UnbalancedBranch { position: usize },
    #[error("bond symbol at byte {position} is not followed by an atom")]
    DanglingBond { position: usize },
    #[error("ring bond at byte {position} duplicates a bond, closes on itself or crosses a dot")]
    InvalidRingBond { position: usize },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match *self {
            ParseError::EmptyInput => 0,
            ParseError::UnknownSymbol { position, .. }
            | ParseError::UnclosedRing { position, .. }
            | ParseError::UnbalancedBranch { position }
            | ParseError::DanglingBond { position }
            | ParseError::InvalidRingBond { position } => position,
        }
    }
}

#[derive(Clone, Copy)]
struct RingOpen {
    atom: usize,
    bond: Option<BondKind>,
    position: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Last {
    Start,
    Atom,
    Bond,
    OpenBranch,
    CloseBranch,
    Ring,
    Dot,
}

struct Parser<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
    atoms: Vec<AtomNode>,
    bonds: Vec<BondEdge>,
    pairs: HashSet<(usize, usize)>,
    prev: Option<usize>,
    pending: Option<(BondKind, usize)>,
    branches: Vec<(usize, usize)>,
    rings: [Option<RingOpen>; 100],
    fragment_start: usize,
    fragments: usize,
    last: Last,
}

/// Parses a SMILES string into a molecular graph.
///
/// Every bond is materialised, including the implicit ones between adjacent
/// atoms and the ring-closure bonds. Atoms are numbered in reading order and
/// bonds in discovery order.
pub fn parse(smiles: &str) -> Result<MolGraph, ParseError> {
    let trimmed = smiles.trim_start();
    let base = smiles.len() - trimmed.len();
    let trimmed = trimmed.trim_end();
    if trimmed.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    Parser {
        bytes: trimmed.as_bytes(),
        base,
        pos: 0,
        atoms: Vec::with_capacity(trimmed.len()),
        bonds: Vec::with_capacity(trimmed.len()),
        pairs: HashSet::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: [None; 100],
        fragment_start: 0,
        fragments: 1,
        last: Last::Start,
    }
    .run()
}

fn is_aromatic_symbol(s: &str) -> bool {
    matches!(s, "b" | "c" | "n" | "o" | "p" | "s" | "se" | "as" | "te")
}

impl<'a> Parser<'a> {
    fn at(&self, p: usize) -> usize {
        self.base + p
    }

    fn unknown(&self, p: usize) -> ParseError {
        let rest = &self.bytes[p..];
        // recover the full char for non-ASCII input
        let symbol = std::str::from_utf8(rest)
            .ok()
            .and_then(|s| s.chars().next())
            .unwrap_or(rest[0] as char);
        ParseError::UnknownSymbol { position: self.at(p), symbol }
    }

    fn run(mut self) -> Result<MolGraph, ParseError> {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            match c {
                b'(' => self.open_branch()?,
                b')' => self.close_branch()?,
                b'.' => self.dot()?,
                b'0'..=b'9' | b'%' => self.ring_bond()?,
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom);
                }
                _ if BondKind::from_byte(c).is_some() => self.bond_symbol(c)?,
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom);
                }
            }
        }
        self.finish()
    }

    fn open_branch(&mut self) -> Result<(), ParseError> {
        let p = self.pos;
        if let Some((_, bp)) = self.pending {
            return Err(ParseError::DanglingBond { position: self.at(bp) });
        }
        let Some(prev) = self.prev else {
            return Err(ParseError::UnbalancedBranch { position: self.at(p) });
        };
        if self.last == Last::OpenBranch {
            return Err(ParseError::UnbalancedBranch { position: self.at(p) });
        }
        self.branches.push((prev, p));
        self.last = Last::OpenBranch;
        self.pos += 1;
        Ok(())
    }

    fn close_branch(&mut self) -> Result<(), ParseError> {
        let p = self.pos;
        if let Some((_, bp)) = self.pending {
            return Err(ParseError::DanglingBond { position: self.at(bp) });
        }
        if self.last == Last::OpenBranch {
            return Err(ParseError::UnbalancedBranch { position: self.at(p) });
        }
        let Some((atom, _)) = self.branches.pop() else {
            return Err(ParseError::UnbalancedBranch { position: self.at(p) });
        };
        self.prev = Some(atom);
        self.last = Last::CloseBranch;
        self.pos += 1;
        Ok(())
    }

    fn dot(&mut self) -> Result<(), ParseError> {
        let p = self.pos;
        if let Some((_, bp)) = self.pending {
            return Err(ParseError::DanglingBond { position: self.at(bp) });
        }
        if let Some(&(_, bp)) = self.branches.last() {
            return Err(ParseError::UnbalancedBranch { position: self.at(bp) });
        }
        if self.prev.is_none() || self.last == Last::Dot {
            return Err(self.unknown(p));
        }
        if let Some(err) = self.first_open_ring() {
            return Err(err);
        }
        self.prev = None;
        self.fragments += 1;
        self.fragment_start = self.atoms.len();
        self.last = Last::Dot;
        self.pos += 1;
        Ok(())
    }

    fn bond_symbol(&mut self, c: u8) -> Result<(), ParseError> {
        let p = self.pos;
        if self.prev.is_none() || self.pending.is_some() {
            return Err(ParseError::DanglingBond { position: self.at(p) });
        }
        self.pending = Some((BondKind::from_byte(c).unwrap(), p));
        self.last = Last::Bond;
        self.pos += 1;
        Ok(())
    }

    fn ring_bond(&mut self) -> Result<(), ParseError> {
        let start = self.pos;
        let Some(atom) = self.prev else {
            return Err(self.unknown(start));
        };
        if matches!(self.last, Last::OpenBranch | Last::CloseBranch | Last::Start | Last::Dot) {
            return Err(self.unknown(start));
        }
        let digit = if self.bytes[start] == b'%' {
            let d = self.bytes.get(start + 1..start + 3);
            match d {
                Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                    self.pos += 3;
                    (a - b'0') * 10 + (b - b'0')
                }
                _ => {
                    let bad = (start + 1..start + 3)
                        .find(|&i| self.bytes.get(i).is_none_or(|b| !b.is_ascii_digit()))
                        .unwrap();
                    return Err(if bad < self.bytes.len() {
                        self.unknown(bad)
                    } else {
                        self.unknown(start)
                    });
                }
            }
        } else {
            self.pos += 1;
            self.bytes[start] - b'0'
        };
        let pending = self.pending.take();
        match self.rings[digit as usize].take() {
            None => {
                self.rings[digit as usize] = Some(RingOpen {
                    atom,
                    bond: pending.map(|(k, _)| k),
                    position: self.at(start),
                });
            }
            Some(open) => {
                let bad = ParseError::InvalidRingBond { position: self.at(start) };
                if open.atom == atom || open.atom < self.fragment_start {
                    return Err(bad);
                }
                let kind = match (open.bond, pending.map(|(k, _)| k)) {
                    (Some(a), Some(b)) if a.order() != b.order() => return Err(bad),
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                let key = (open.atom.min(atom), open.atom.max(atom));
                if !self.pairs.insert(key) {
                    return Err(bad);
                }
                let kind = kind.unwrap_or_else(|| self.implicit_kind(open.atom, atom).0);
                self.bonds.push(BondEdge {
                    index: self.bonds.len(),
                    u: open.atom,
                    v: atom,
                    kind,
                    origin: BondOrigin::RingClosure,
                });
            }
        }
        self.last = Last::Ring;
        Ok(())
    }

    fn implicit_kind(&self, a: usize, b: usize) -> (BondKind, BondOrigin) {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            (BondKind::Aromatic, BondOrigin::ImplicitAromatic)
        } else {
            (BondKind::Single, BondOrigin::ImplicitSingle)
        }
    }

    fn add_atom(&mut self, mut atom: AtomNode) {
        let idx = self.atoms.len();
        atom.index = idx;
        self.atoms.push(atom);
        if let Some(p) = self.prev {
            let (kind, origin) = match self.pending.take() {
                Some((k, _)) => (k, BondOrigin::Explicit),
                None => self.implicit_kind(p, idx),
            };
            self.pairs.insert((p, idx));
            self.bonds.push(BondEdge { index: self.bonds.len(), u: p, v: idx, kind, origin });
        }
        self.prev = Some(idx);
        self.last = Last::Atom;
    }

    fn organic_atom(&mut self) -> Result<AtomNode, ParseError> {
        let p = self.pos;
        let c = self.bytes[p];
        let next = self.bytes.get(p + 1).copied();
        let (sym, len, aromatic) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", 2, false),
            (b'B', Some(b'r')) => ("Br", 2, false),
            (b'B', _) => ("B", 1, false),
            (b'C', _) => ("C", 1, false),
            (b'N', _) => ("N", 1, false),
            (b'O', _) => ("O", 1, false),
            (b'P', _) => ("P", 1, false),
            (b'S', _) => ("S", 1, false),
            (b'F', _) => ("F", 1, false),
            (b'I', _) => ("I", 1, false),
            (b'b', _) => ("B", 1, true),
            (b'c', _) => ("C", 1, true),
            (b'n', _) => ("N", 1, true),
            (b'o', _) => ("O", 1, true),
            (b'p', _) => ("P", 1, true),
            (b's', _) => ("S", 1, true),
            _ => return Err(self.unknown(p)),
        };
        self.pos += len;
        Ok(AtomNode {
            index: 0,
            element: Element::from_symbol(sym).unwrap(),
            aromatic,
            formal_charge: 0,
            isotope: None,
            explicit_h: None,
            bracket: false,
        })
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        let mut value: u32 = 0;
        while let Some(b) = self.bytes.get(self.pos).filter(|b| b.is_ascii_digit()) {
            value = value.saturating_mul(10).saturating_add((b - b'0') as u32);
            self.pos += 1;
        }
        (self.pos > start).then_some(value)
    }

    fn bracket_atom(&mut self) -> Result<AtomNode, ParseError> {
        let open = self.pos;
        self.pos += 1;
        let unexpected = |s: &Self| {
            if s.pos < s.bytes.len() {
                s.unknown(s.pos)
            } else {
                s.unknown(open)
            }
        };

        let isotope = match self.digits() {
            Some(v) if v <= u16::MAX as u32 => Some(v as u16),
            Some(_) => return Err(self.unknown(open + 1)),
            None => None,
        };

        // element: two-letter symbols win over one-letter ones
        let rest = &self.bytes[self.pos..];
        let mut found = None;
        for len in [2usize, 1] {
            let Some(cand) = rest.get(..len) else { continue };
            let Ok(cand) = std::str::from_utf8(cand) else { continue };
            if is_aromatic_symbol(cand) {
                let mut cap = cand.to_string();
                cap[..1].make_ascii_uppercase();
                found = Element::from_symbol(&cap).map(|e| (e, len, true));
            } else if cand.as_bytes()[0].is_ascii_uppercase() {
                found = Element::from_symbol(cand).map(|e| (e, len, false));
            }
            if found.is_some() {
                break;
            }
        }
        let Some((element, len, aromatic)) = found else {
            return Err(unexpected(self));
        };
        self.pos += len;

        // chirality is accepted and discarded
        if self.bytes.get(self.pos) == Some(&b'@') {
            self.pos += 1;
            if self.bytes.get(self.pos) == Some(&b'@') {
                self.pos += 1;
            } else if let Some(tag) = self.bytes.get(self.pos..self.pos + 2) {
                if matches!(tag, b"TH" | b"AL" | b"SP" | b"TB" | b"OH") {
                    self.pos += 2;
                    if self.digits().is_none() {
                        return Err(unexpected(self));
                    }
                }
            }
        }

        let mut explicit_h = 0u8;
        if self.bytes.get(self.pos) == Some(&b'H') {
            self.pos += 1;
            explicit_h = match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_digit() => {
                    self.pos += 1;
                    b - b'0'
                }
                _ => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(&sign @ (b'+' | b'-')) = self.bytes.get(self.pos) {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(v) = self.digits() {
                if v > 15 {
                    return Err(self.unknown(self.pos - 1));
                }
                charge = unit * v as i32;
            } else {
                charge = unit;
                while self.bytes.get(self.pos) == Some(&sign) && charge.abs() < 15 {
                    charge += unit;
                    self.pos += 1;
                }
            }
        }

        // atom class
        if self.bytes.get(self.pos) == Some(&b':') {
            self.pos += 1;
            if self.digits().is_none() {
                return Err(unexpected(self));
            }
        }

        if self.bytes.get(self.pos) != Some(&b']') {
            return Err(unexpected(self));
        }
        self.pos += 1;
        Ok(AtomNode {
            index: 0,
            element,
            aromatic,
            formal_charge: charge as i8,
            isotope,
            explicit_h: Some(explicit_h),
            bracket: true,
        })
    }

    fn first_open_ring(&self) -> Option<ParseError> {
        self.rings
            .iter()
            .enumerate()
            .filter_map(|(d, r)| r.map(|r| (d, r)))
            .min_by_key(|(_, r)| r.position)
            .map(|(d, r)| ParseError::UnclosedRing { digit: d as u8, position: r.position })
    }

    fn finish(self) -> Result<MolGraph, ParseError> {
        if let Some((_, bp)) = self.pending {
            return Err(ParseError::DanglingBond { position: self.at(bp) });
        }
        if let Some(&(_, bp)) = self.branches.first() {
            return Err(ParseError::UnbalancedBranch { position: self.at(bp) });
        }
        if let Some(err) = self.first_open_ring() {
            return Err(err);
        }
        if self.last == Last::Dot {
            return Err(self.unknown(self.bytes.len() - 1));
        }
        Ok(MolGraph { atoms: self.atoms, bonds: self.bonds, fragments: self.fragments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(g: &MolGraph) -> Vec<(usize, usize, BondKind)> {
        g.bonds.iter().map(|b| (b.u, b.v, b.kind)).collect()
    }

    #[test]
    fn ethanol() {
        let g = parse("CCO").unwrap();
        assert_eq!(g.atom_count(), 3);
        assert_eq!(kinds(&g), vec![(0, 1, BondKind::Single), (1, 2, BondKind::Single)]);
        assert!(g.bonds.iter().all(|b| b.origin == BondOrigin::ImplicitSingle));
    }

    #[test]
    fn toluene_ring_closure() {
        let g = parse("c1ccccc1C").unwrap();
        assert_eq!(g.atom_count(), 7);
        assert_eq!(g.bond_count(), 7);
        let ring = &g.bonds[5];
        assert_eq!((ring.u, ring.v, ring.kind, ring.origin), (0, 5, BondKind::Aromatic, BondOrigin::RingClosure));
        assert_eq!(g.bonds[6].kind, BondKind::Single);
        assert_eq!(g.bonds.iter().filter(|b| b.kind == BondKind::Aromatic).count(), 6);
    }

    #[test]
    fn implicit_bond_kinds() {
        assert_eq!(parse("CC").unwrap().bond_count(), 1);
        let g = parse("c1ccccc1").unwrap();
        assert!(g.bonds.iter().all(|b| b.kind == BondKind::Aromatic));
        let g = parse("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(g.bonds[6].kind, BondKind::Single);
        assert_eq!(g.bonds[6].origin, BondOrigin::Explicit);
    }

    #[test]
    fn branches_and_bonds() {
        let g = parse("CC(=O)O").unwrap();
        assert_eq!(kinds(&g), vec![(0, 1, BondKind::Single), (1, 2, BondKind::Double), (1, 3, BondKind::Single)]);
        let g = parse("C#N").unwrap();
        assert_eq!(g.bonds[0].kind, BondKind::Triple);
        let g = parse("F/C=C\\F").unwrap();
        assert_eq!(g.bonds[0].kind, BondKind::Up);
        assert_eq!(g.bonds[2].kind, BondKind::Down);
        assert_eq!(g.bonds[0].kind.symbol(), "-");
    }

    #[test]
    fn two_digit_ring_and_bond_on_ring() {
        let g = parse("C%12CCC%12").unwrap();
        assert_eq!(g.bond_count(), 4);
        assert_eq!((g.bonds[3].u, g.bonds[3].v), (0, 3));
        let g = parse("C=1CCCCC1").unwrap();
        assert_eq!(g.bonds[5].kind, BondKind::Double);
        let g = parse("C1CCCCC=1").unwrap();
        assert_eq!(g.bonds[5].kind, BondKind::Double);
        assert!(matches!(parse("C=1CCCCC#1"), Err(ParseError::InvalidRingBond { .. })));
    }

    #[test]
    fn ring_digit_reuse() {
        let g = parse("C1CC1C1CC1").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.bond_count(), 7);
    }

    #[test]
    fn bracket_atoms() {
        let g = parse("[13CH3][N+](=O)[O-]").unwrap();
        let a = &g.atoms[0];
        assert_eq!((a.element.symbol(), a.isotope, a.explicit_h), ("C", Some(13), Some(3)));
        assert_eq!(g.atoms[1].formal_charge, 1);
        assert_eq!(g.atoms[3].formal_charge, -1);
        assert_eq!(a.token(), "[13CH3]");
        assert_eq!(g.atoms[3].token(), "[O-]");
        let g = parse("c1cc[nH]c1").unwrap();
        assert!(g.atoms[3].aromatic);
        assert_eq!(g.atoms[3].token(), "[nH]");
        let g = parse("[C@@H](F)(Cl)Br").unwrap();
        assert_eq!(g.atoms[0].token(), "[CH]");
        let g = parse("[Fe+++]").unwrap();
        assert_eq!(g.atoms[0].formal_charge, 3);
        let g = parse("[Cu+2].[O-2]").unwrap();
        assert_eq!((g.atoms[0].formal_charge, g.atoms[1].formal_charge), (2, -2));
        assert_eq!(g.atoms[0].token(), "[Cu+2]");
        let g = parse("[CH3:7]C").unwrap();
        assert_eq!(g.atom_count(), 2);
        assert_eq!(parse("[se]1cccc1").unwrap().atoms[0].element.symbol(), "Se");
    }

    #[test]
    fn fragments() {
        let g = parse("[Na+].[Cl-]").unwrap();
        assert_eq!((g.fragments, g.bond_count()), (2, 0));
        assert!(matches!(parse("C1.C1"), Err(ParseError::UnclosedRing { digit: 1, position: 1 })));
    }

    #[test]
    fn errors() {
        assert_eq!(parse(""), Err(ParseError::EmptyInput));
        assert_eq!(parse("   "), Err(ParseError::EmptyInput));
        assert_eq!(parse("C1CC"), Err(ParseError::UnclosedRing { digit: 1, position: 1 }));
        assert_eq!(parse("CC)"), Err(ParseError::UnbalancedBranch { position: 2 }));
        assert_eq!(parse("C(C"), Err(ParseError::UnbalancedBranch { position: 1 }));
        assert_eq!(parse("C()C"), Err(ParseError::UnbalancedBranch { position: 2 }));
        assert_eq!(parse("(C)"), Err(ParseError::UnbalancedBranch { position: 0 }));
        assert_eq!(parse("CC="), Err(ParseError::DanglingBond { position: 2 }));
        assert_eq!(parse("=C"), Err(ParseError::DanglingBond { position: 0 }));
        assert_eq!(parse("C=#C"), Err(ParseError::DanglingBond { position: 2 }));
        assert_eq!(parse("C=(C)"), Err(ParseError::DanglingBond { position: 1 }));
        assert_eq!(parse("CXC"), Err(ParseError::UnknownSymbol { position: 1, symbol: 'X' }));
        assert_eq!(parse(" CXC"), Err(ParseError::UnknownSymbol { position: 2, symbol: 'X' }));
        assert_eq!(parse("C.") , Err(ParseError::UnknownSymbol { position: 1, symbol: '.' }));
        assert_eq!(parse("C11"), Err(ParseError::InvalidRingBond { position: 2 }));
        assert_eq!(parse("CC1C1"), Err(ParseError::InvalidRingBond { position: 4 }));
        assert!(matches!(parse("[Xx]"), Err(ParseError::UnknownSymbol { position: 1, .. })));
        assert!(matches!(parse("[C"), Err(ParseError::UnknownSymbol { .. })));
        assert!(matches!(parse("C%1"), Err(ParseError::UnknownSymbol { .. })));
        assert!(matches!(parse("Cé"), Err(ParseError::UnknownSymbol { position: 1, symbol: 'é' })));
    }

    #[test]
    fn deterministic() {
        let s = "CC(C)Cc1ccc(cc1)[C@@H](C)C(=O)O";
        assert_eq!(parse(s).unwrap(), parse(s).unwrap());
    }
}
