use std::collections::VecDeque;
use std::fmt;

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// A chemical element, stored as its atomic number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Element(u8);

impl Element {
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=ELEMENTS.len() as u8).contains(&z).then_some(Element(z))
    }

    /// Looks up a capitalised element symbol such as `"Cl"`.
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        ELEMENTS
            .iter()
            .position(|s| *s == symbol)
            .map(|i| Element(i as u8 + 1))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        ELEMENTS[self.0 as usize - 1]
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondKind {
    Single,
    Double,
    Triple,
    Aromatic,
    /// `/`: a single bond carrying a direction mark.
    Up,
    /// `\`: a single bond carrying a direction mark.
    Down,
}

impl BondKind {
    pub fn from_byte(b: u8) -> Option<BondKind> {
        Some(match b {
            b'-' => BondKind::Single,
            b'=' => BondKind::Double,
            b'#' => BondKind::Triple,
            b':' => BondKind::Aromatic,
            b'/' => BondKind::Up,
            b'\\' => BondKind::Down,
            _ => return None,
        })
    }

    /// Bond order with the direction mark dropped.
    pub fn order(self) -> BondKind {
        match self {
            BondKind::Up | BondKind::Down => BondKind::Single,
            k => k,
        }
    }

    /// Token symbol. Directional bonds share the single-bond token.
    pub fn symbol(self) -> &'static str {
        match self.order() {
            BondKind::Double => "=",
            BondKind::Triple => "#",
            BondKind::Aromatic => ":",
            _ => "-",
        }
    }

    /// The character used when writing this bond explicitly.
    pub fn smiles_char(self) -> char {
        match self {
            BondKind::Single => '-',
            BondKind::Double => '=',
            BondKind::Triple => '#',
            BondKind::Aromatic => ':',
            BondKind::Up => '/',
            BondKind::Down => '\\',
        }
    }

    pub(crate) fn flipped(self) -> BondKind {
        match self {
            BondKind::Up => BondKind::Down,
            BondKind::Down => BondKind::Up,
            k => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BondOrigin {
    Explicit,
    ImplicitSingle,
    ImplicitAromatic,
    RingClosure,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomNode {
    /// Position in SMILES reading order.
    pub index: usize,
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    pub isotope: Option<u16>,
    /// Hydrogen count written inside brackets; `None` for organic-subset atoms.
    pub explicit_h: Option<u8>,
    pub bracket: bool,
}

impl AtomNode {
    /// The vocabulary symbol for this atom: the bare organic symbol, or the
    /// bracket form without chirality or atom class.
    pub fn token(&self) -> String {
        let sym = if self.aromatic {
            self.element.symbol().to_ascii_lowercase()
        } else {
            self.element.symbol().to_string()
        };
        if !self.bracket {
            return sym;
        }
        let mut s = String::with_capacity(8);
        s.push('[');
        if let Some(iso) = self.isotope {
            s.push_str(&iso.to_string());
        }
        s.push_str(&sym);
        match self.explicit_h.unwrap_or(0) {
            0 => {}
            1 => s.push('H'),
            h => {
                s.push('H');
                s.push_str(&h.to_string());
            }
        }
        match self.formal_charge {
            0 => {}
            1 => s.push('+'),
            -1 => s.push('-'),
            c if c > 0 => s.push_str(&format!("+{c}")),
            c => s.push_str(&format!("-{}", -(c as i16))),
        }
        s.push(']');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondEdge {
    /// Discovery order; ring-closure bonds are numbered at the closing digit.
    pub index: usize,
    pub u: usize,
    pub v: usize,
    pub kind: BondKind,
    pub origin: BondOrigin,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MolGraph {
    pub atoms: Vec<AtomNode>,
    pub bonds: Vec<BondEdge>,
    /// Number of dot-separated components.
    pub fragments: usize,
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbour lists as `(neighbour, bond index)`, in bond discovery order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.u].push((b.v, b.index));
            adj[b.v].push((b.u, b.index));
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.atoms.len()];
        for b in &self.bonds {
            deg[b.u] += 1;
            deg[b.v] += 1;
        }
        deg
    }

    /// All-pairs shortest-path lengths in bonds, by breadth-first search.
    /// Unreachable pairs are `None`.
    pub fn distance_matrix(&self) -> Vec<Vec<Option<u32>>> {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut out = Vec::with_capacity(n);
        let mut queue = VecDeque::new();
        for src in 0..n {
            let mut dist = vec![None; n];
            dist[src] = Some(0u32);
            queue.clear();
            queue.push_back(src);
            while let Some(a) = queue.pop_front() {
                let d = dist[a].unwrap();
                for &(b, _) in &adj[a] {
                    if dist[b].is_none() {
                        dist[b] = Some(d + 1);
                        queue.push_back(b);
                    }
                }
            }
            out.push(dist);
        }
        out
    }

    /// Sum of shortest-path distances over unordered connected atom pairs.
    pub fn wiener_index(&self) -> u64 {
        let dist = self.distance_matrix();
        let mut total = 0u64;
        for (i, row) in dist.iter().enumerate() {
            for d in row.iter().skip(i + 1).flatten() {
                total += *d as u64;
            }
        }
        total
    }
}
