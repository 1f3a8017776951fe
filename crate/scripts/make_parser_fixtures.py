"""Build the parser reference fixtures with RDKit.

Reads SMILES from the datasets bundled with the RDKit wheel, keeps the ones
inside the supported grammar, and writes:

  druglike_1000.smi          one SMILES per line
  druglike_1000.ref.tsv      smiles, n, m, atoms, bonds as parsed by RDKit

Molecules are parsed with sanitize=False so the reference graph is exactly
what the string encodes: heavy atoms as written, implicit bonds between two
aromatic atoms typed aromatic, everything else as written.
"""
import os
import sys

import rdkit
from rdkit import Chem, RDLogger

RDLogger.DisableLog("rdApp.*")

ROOT = os.path.dirname(rdkit.__file__)
SOURCES = [
    (os.path.join(ROOT, "Contrib/FreeWilson/data/CHEMBL2321810.smi"), 600),
    (os.path.join(ROOT, "Contrib/fraggle/data/ChEMBL_11265_actives.smi"), 100),
    (os.path.join(ROOT, "Data/NCI/first_5K.smi"), 300),
]
BOND = {
    Chem.BondType.SINGLE: "-",
    Chem.BondType.DOUBLE: "=",
    Chem.BondType.TRIPLE: "#",
    Chem.BondType.AROMATIC: ":",
}
FORBIDDEN = set("*$~")


def supported(smi):
    if any(c in FORBIDDEN for c in smi):
        return False
    mol = Chem.MolFromSmiles(smi, sanitize=False)
    if mol is None or mol.GetNumAtoms() == 0:
        return False
    # drop strings RDKit only accepts unsanitized
    if Chem.MolFromSmiles(smi) is None:
        return False
    return all(b.GetBondType() in BOND for b in mol.GetBonds())


def reference(smi):
    mol = Chem.MolFromSmiles(smi, sanitize=False)
    atoms = []
    for a in mol.GetAtoms():
        atoms.append(
            "%s:%d:%d:%d"
            % (a.GetSymbol(), int(a.GetIsAromatic()), a.GetFormalCharge(), a.GetIsotope())
        )
    bonds = []
    for b in mol.GetBonds():
        u, v = sorted((b.GetBeginAtomIdx(), b.GetEndAtomIdx()))
        bonds.append("%d-%d%s" % (u, v, BOND[b.GetBondType()]))
    bonds.sort()
    return mol.GetNumAtoms(), mol.GetNumBonds(), " ".join(atoms), " ".join(bonds)


def main(out_dir):
    picked = []
    seen = set()
    for path, quota in SOURCES:
        taken = 0
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                smi = parts[0]
                if smi in seen or not supported(smi):
                    continue
                seen.add(smi)
                picked.append(smi)
                taken += 1
                if taken == quota:
                    break
    assert len(picked) == 1000, len(picked)
    with open(os.path.join(out_dir, "druglike_1000.smi"), "w") as fh:
        fh.write("\n".join(picked) + "\n")
    with open(os.path.join(out_dir, "druglike_1000.ref.tsv"), "w") as fh:
        fh.write("smiles\tn\tm\tatoms\tbonds\n")
        for smi in picked:
            n, m, atoms, bonds = reference(smi)
            fh.write("%s\t%d\t%d\t%s\t%s\n" % (smi, n, m, atoms, bonds))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
