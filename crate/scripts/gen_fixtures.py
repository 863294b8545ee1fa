"""Regenerate the bundled fixture data under crates/core/data.

Requires RDKit. Reactions are produced by applying a small set of reaction
rules to hand-picked substrates; every product atom carries the atom-map
number of the reactant atom it came from, and atoms that leave are unmapped.
"""

import csv
import itertools
import random
from pathlib import Path

from rdkit import Chem, RDLogger
from rdkit.Chem import AllChem

RDLogger.DisableLog("rdApp.*")

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

RULES = {
    "amide": (2, "[C:1](=[O:2])[OH].[N;H1,H2;!$(NC=O);!$(NS=O):4]>>[C:1](=[O:2])[N:4]"),
    "acyl_chloride_ester": (2, "[C:1](=[O:2])Cl.[OH:3][C;!$(C=O):4]>>[C:1](=[O:2])[O:3][C:4]"),
    "sulfonamide": (2, "[S:1](=[O:2])(=[O:3])Cl.[N;H1,H2;!$(NC=O);!$(NS=O):4]>>[S:1](=[O:2])(=[O:3])[N:4]"),
    "n_alkylation": (1, "[CH2:1]Br.[N;H1,H2;!$(NC=O);!$(NS=O);!$(Nc):2]>>[CH2:1][N:2]"),
    "williamson": (1, "[c:1][OH:2].[CH2:3]Br>>[c:1][O:2][CH2:3]"),
    "snar": (1, "[c:1]F.[N;H1,H2;!$(NC=O);!$(NS=O);!$(Nc):2]>>[c:1][N:2]"),
    "suzuki": (3, "[c:1]Br.[c:2]B(O)O>>[c:1]-[c:2]"),
    "boc_deprotection": (6, "[N:1]C(=O)OC(C)(C)C>>[N:1]"),
    "ester_hydrolysis": (6, "[C:1](=[O:2])[O:3][CH3]>>[C:1](=[O:2])[O:3]"),
    "ketone_reduction": (7, "[#6:3][C:1](=[O:2])[#6:4]>>[#6:3][C:1]([O:2])[#6:4]"),
    "alcohol_oxidation": (8, "[#6:3][CH1:1]([OH1:2])[#6:4]>>[#6:3][C:1](=[O:2])[#6:4]"),
    "boc_protection": (5, "[N;H1,H2;!$(NC=O);!$(NS=O):1].[CH3:2][C:3]([CH3:4])([CH3:5])[O:6][C:7](=[O:8])OC(=O)OC(C)(C)C"
                  ">>[N:1][C:7](=[O:8])[O:6][C:3]([CH3:2])([CH3:4])[CH3:5]"),
}

BOC2O = "CC(C)(C)OC(=O)OC(=O)OC(C)(C)C"


def mapped_reaction(rule_smarts, reactant_smiles):
    rxn = AllChem.ReactionFromSmarts(rule_smarts)
    reactants = [Chem.MolFromSmiles(s) for s in reactant_smiles]
    outcomes = rxn.RunReactants(tuple(reactants))
    if not outcomes:
        return None
    product = outcomes[0][0]
    template_owner = {}
    for i in range(rxn.GetNumReactantTemplates()):
        for ta in rxn.GetReactantTemplate(i).GetAtoms():
            if ta.GetAtomMapNum():
                template_owner[ta.GetAtomMapNum()] = i
    Chem.SanitizeMol(product)
    next_map = 1
    for atom in product.GetAtoms():
        raidx = atom.GetIntProp("react_atom_idx")
        if atom.HasProp("react_idx"):
            ridx = atom.GetIntProp("react_idx")
        else:
            ridx = template_owner[atom.GetIntProp("old_mapno")]
        reactants[ridx].GetAtomWithIdx(raidx).SetAtomMapNum(next_map)
        atom.SetAtomMapNum(next_map)
        next_map += 1
    lhs = ".".join(Chem.MolToSmiles(m, canonical=True) for m in reactants)
    rhs = Chem.MolToSmiles(product, canonical=True)
    return f"{lhs}>>{rhs}"


TRAIN = [
    ("amide", ["CC(=O)O", "NCc1ccccc1"]),
    ("amide", ["OC(=O)c1ccccc1", "C1CCNCC1"]),
    ("amide", ["OC(=O)c1ccc(Cl)cc1", "NCCO"]),
    ("amide", ["OC(=O)CC1CC1", "CNC"]),
    ("acyl_chloride_ester", ["CC(=O)Cl", "OCc1ccccc1"]),
    ("acyl_chloride_ester", ["ClC(=O)c1ccccc1", "OCC"]),
    ("acyl_chloride_ester", ["ClC(=O)C1CCCC1", "OCCC#N"]),
    ("sulfonamide", ["Cc1ccc(S(=O)(=O)Cl)cc1", "NCC"]),
    ("sulfonamide", ["CS(=O)(=O)Cl", "Nc1ccccc1"]),
    ("sulfonamide", ["O=S(=O)(Cl)c1ccccc1", "C1CCNC1"]),
    ("n_alkylation", ["BrCc1ccccc1", "C1COCCN1"]),
    ("n_alkylation", ["BrCC(=O)OCC", "CNCc1ccccc1"]),
    ("n_alkylation", ["BrCCc1ccccc1", "C1CCNCC1"]),
    ("williamson", ["Oc1ccccc1", "BrCC=C"]),
    ("williamson", ["Oc1ccc(C#N)cc1", "BrCc1ccccc1"]),
    ("williamson", ["COc1ccc(O)cc1", "BrCC"]),
    ("snar", ["O=[N+]([O-])c1ccc(F)cc1", "C1COCCN1"]),
    ("snar", ["N#Cc1ccc(F)cc1", "C1CCNC1"]),
    ("snar", ["Fc1ncccc1", "NCc1ccccc1"]),
    ("suzuki", ["Brc1ccccc1", "OB(O)c1ccc(C)cc1"]),
    ("suzuki", ["Brc1ccc(C#N)cc1", "OB(O)c1ccccc1"]),
    ("suzuki", ["Brc1cccnc1", "OB(O)c1ccc(OC)cc1"]),
    ("suzuki", ["COC(=O)c1ccc(Br)cc1", "OB(O)c1cccs1"]),
    ("boc_deprotection", ["CC(C)(C)OC(=O)NCc1ccccc1"]),
    ("boc_deprotection", ["CC(C)(C)OC(=O)N1CCC(CC1)C(=O)O"]),
    ("boc_deprotection", ["CC(C)(C)OC(=O)NCCO"]),
    ("boc_deprotection", ["CC(C)(C)OC(=O)N1CCN(CC1)c1ccccc1"]),
    ("ester_hydrolysis", ["COC(=O)c1ccccc1"]),
    ("ester_hydrolysis", ["COC(=O)CCc1ccccc1"]),
    ("ester_hydrolysis", ["COC(=O)c1ccc(N)cc1"]),
    ("ketone_reduction", ["CC(=O)c1ccccc1"]),
    ("ketone_reduction", ["O=C1CCCCC1"]),
    ("ketone_reduction", ["CC(=O)CCc1ccccc1"]),
    ("alcohol_oxidation", ["CC(O)CC"]),
    ("alcohol_oxidation", ["OC1CCC(CC1)c1ccccc1"]),
    ("alcohol_oxidation", ["CC(O)c1ccc(Cl)cc1"]),
    ("boc_protection", ["NCc1ccccc1", BOC2O]),
    ("boc_protection", ["C1CCNCC1", BOC2O]),
    ("boc_protection", ["NCCc1ccccc1", BOC2O]),
    ("amide", ["OC(=O)c1ccncc1", "NC1CC1"]),
]

PERTURBED = [
    ("amide", ["CCC(=O)O", "NCc1ccc(C)cc1"]),
    ("acyl_chloride_ester", ["CCC(=O)Cl", "OCc1ccc(C)cc1"]),
    ("sulfonamide", ["CCS(=O)(=O)Cl", "NCc1ccccc1"]),
    ("n_alkylation", ["BrCc1ccc(C)cc1", "C1CCNCC1"]),
    ("williamson", ["Oc1ccc(C)cc1", "BrCc1ccccc1"]),
    ("snar", ["N#Cc1ccc(F)cc1", "C1CCNCC1"]),
    ("suzuki", ["Brc1ccc(C)cc1", "OB(O)c1ccccc1"]),
    ("boc_deprotection", ["CC(C)(C)OC(=O)NCc1ccc(C)cc1"]),
    ("ester_hydrolysis", ["COC(=O)c1ccc(C)cc1"]),
    ("ketone_reduction", ["CC(=O)c1ccc(C)cc1"]),
]

# Route grammar: amide coupling, Boc removal and Suzuki coupling.
GRAMMAR_ARYL_BORONIC = ["OB(O)c1ccccc1", "OB(O)c1ccc(C)cc1", "OB(O)c1ccc(F)cc1", "OB(O)c1cccs1"]
GRAMMAR_BROMIDES = ["CC(C)(C)OC(=O)NCc1ccc(Br)cc1", "CC(C)(C)OC(=O)NCc1cccc(Br)c1"]
GRAMMAR_ACIDS = ["CC(=O)O", "OC(=O)C1CC1", "OC(=O)c1ccccc1"]


def write_corpus(path, rows, prefix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "reaction"])
        for i, (rule, reactants) in enumerate(rows):
            cls, smarts = RULES[rule]
            rxn = mapped_reaction(smarts, reactants)
            assert rxn is not None, (rule, reactants)
            w.writerow([f"{prefix}{i + 1:03d}", cls, rxn])


def product_smiles(rule, reactants):
    rxn = AllChem.ReactionFromSmarts(RULES[rule][1])
    mols = [Chem.MolFromSmiles(s) for s in reactants]
    p = rxn.RunReactants(tuple(mols))[0][0]
    Chem.SanitizeMol(p)
    return Chem.MolToSmiles(p)


def grammar():
    rows, targets = [], []
    for bromide, boronic in itertools.product(GRAMMAR_BROMIDES, GRAMMAR_ARYL_BORONIC):
        protected = product_smiles("suzuki", [bromide, boronic])
        rows.append(("suzuki", [bromide, boronic]))
        amine = product_smiles("boc_deprotection", [protected])
        rows.append(("boc_deprotection", [protected]))
        for acid in GRAMMAR_ACIDS:
            rows.append(("amide", [acid, amine]))
            targets.append(product_smiles("amide", [acid, amine]))
    blocks = sorted(set(GRAMMAR_BROMIDES + GRAMMAR_ARYL_BORONIC + GRAMMAR_ACIDS))
    return rows, targets, blocks


def molecule_sample(n=500, seed=7):
    rng = random.Random(seed)
    pool = set()
    substrates = set()
    for _, reactants in TRAIN + PERTURBED:
        substrates.update(reactants)
    extra = [
        "c1ccc2ccccc2c1", "c1ccc2[nH]ccc2c1", "c1ccoc1", "c1ccsc1", "c1cn[nH]c1", "c1ncncn1",
        "C1CC1", "C1CCC2CCCCC2C1", "C1CC2CCC1C2", "OC(=O)C(F)(F)F", "C#CCO", "N#CC(=O)N",
        "C[N+](C)(C)C", "[NH4+]", "CC(=O)[O-]", "O=[N+]([O-])c1ccccc1", "CS(C)=O",
        "O=P(O)(O)O", "CC[Si](C)(C)C", "Brc1ccc2ccccc2c1", "Ic1ccccc1", "Clc1ccncc1",
        "C[C@H](N)C(=O)O", "C/C=C/C(=O)O", "F/C=C\\F", "[2H]C([2H])([2H])O", "[13CH3]O",
        "Cn1cnc2c1c(=O)n(C)c(=O)n2C", "O=c1cc[nH]cc1", "c1ccc(cc1)-c1ccccc1",
        "CC(C)(C)OC(=O)N1CCC2(CC1)OCCO2", "OCC1OC(O)C(O)C(O)C1O", "C1=CCC=CC1",
        "C=CC=CC=C", "CC#N", "C1CCOC1", "O=C1CCC(=O)N1", "c1ccc2c(c1)oc1ccccc12",
    ]
    substrates.update(extra)
    pool.update(substrates)
    decorations = ["C", "CC", "OC", "F", "Cl", "Br", "C#N", "C(=O)O", "C(=O)OC", "N", "O",
                   "C(F)(F)F", "S(=O)(=O)C", "c1ccccc1", "C1CC1", "N1CCOCC1", "[N+](=O)[O-]"]
    cores = ["c1ccc({})cc1", "c1cc({})ccn1", "C1CCC({})CC1", "c1csc({})c1", "O=C(N{})C",
             "c1ccc2cc({})ccc2c1", "C({})CN1CCNCC1", "c1cnc({})nc1", "C=C({})C", "OCC({})O"]
    for core in cores:
        for d in decorations:
            m = Chem.MolFromSmiles(core.format(d))
            if m is not None:
                pool.add(Chem.MolToSmiles(m))
    for rule, (_, smarts) in RULES.items():
        rxn = AllChem.ReactionFromSmarts(smarts)
        mols = [Chem.MolFromSmiles(s) for s in sorted(pool)]
        for combo in itertools.product(mols, repeat=rxn.GetNumReactantTemplates()):
            if len(pool) > 4 * n:
                break
            try:
                outs = rxn.RunReactants(combo)
            except Exception:
                continue
            for o in outs[:1]:
                p = o[0]
                try:
                    Chem.SanitizeMol(p)
                except Exception:
                    continue
                pool.add(Chem.MolToSmiles(p))
    sample = sorted(pool)
    rng.shuffle(sample)
    # Keep the hand-picked extras so ring, charge, isotope and stereo cases stay covered.
    chosen = list(dict.fromkeys([Chem.MolToSmiles(Chem.MolFromSmiles(e)) for e in extra] + sample))
    out = []
    for s in chosen:
        m = Chem.MolFromSmiles(s)
        if m is None or m.GetNumAtoms() > 50:
            continue
        # Alternate RDKit canonical and random-order writers.
        if len(out) % 2:
            s = Chem.MolToSmiles(m, doRandom=True, canonical=False)
        out.append(s)
        if len(out) == n:
            break
    return out


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write_corpus(OUT / "mini_corpus.csv", TRAIN, "mini")
    with open(OUT / "mini_corpus.splits.csv", "w") as fh:
        fh.write("id,split\n")
        for i in range(len(TRAIN)):
            fh.write(f"mini{i + 1:03d},train\n")
    write_corpus(OUT / "perturbation_set.csv", PERTURBED, "pert")
    rows, targets, blocks = grammar()
    write_corpus(OUT / "route_grammar.csv", rows, "gram")
    (OUT / "route_grammar_targets.smi").write_text("\n".join(targets) + "\n")
    (OUT / "route_grammar_blocks.smi").write_text("\n".join(blocks) + "\n")
    (OUT / "molecules_500.smi").write_text("\n".join(molecule_sample()) + "\n")


if __name__ == "__main__":
    main()
