"""Shared bits for the demo scripts: a synthetic conformer dataset and
a couple of hand-placed molecules.

The synthetic targets follow a simple composition rule (size, oxygen
and nitrogen counts, plus noise), so a model that reads the graph can
actually learn them; real workflows would load an SDF + CSV instead.
"""

import os

import numpy as np

from molgraph3d.molio import Atom, Bond, DatasetRecord, Molecule

OUT_DIR = os.path.join(os.path.dirname(__file__), "output")
CHECKPOINT = os.path.join(OUT_DIR, "demo_model.json")


def random_molecule(rng, n_min=4, n_max=8):
    n = int(rng.integers(n_min, n_max + 1))
    elements = [str(rng.choice(["C", "N", "O"])) for _ in range(n)]
    atoms = [Atom(e, 0, tuple(rng.normal(scale=2.0, size=3))) for e in elements]
    bonds = [Bond(int(rng.integers(0, i)), i, 1) for i in range(1, n)]
    return Molecule(id=f"demo-{rng.integers(1 << 30)}", atoms=atoms, bonds=bonds)


def synthetic_records(n=24, seed=5):
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        mol = random_molecule(rng)
        mol.id = f"demo-{k}"
        target = (0.7 * len(mol.atoms)
                  - 1.9 * sum(1 for a in mol.atoms if a.element == "O")
                  + 0.8 * sum(1 for a in mol.atoms if a.element == "N")
                  + rng.normal(scale=0.3))
        records.append(DatasetRecord(mol, float(target)))
    return records


def ethanol():
    return Molecule(
        id="ethanol",
        atoms=[Atom("C", 0, (0.0, 0.0, 0.0)),
               Atom("C", 0, (1.5, 0.0, 0.0)),
               Atom("O", 0, (2.2, 1.2, 0.0))],
        bonds=[Bond(0, 1, 1), Bond(1, 2, 1)])


def benzene():
    ring = [(np.cos(t), np.sin(t)) for t in np.linspace(0, 2 * np.pi, 7)[:6]]
    orders = [2, 1, 2, 1, 2, 1]
    return Molecule(
        id="benzene",
        atoms=[Atom("C", 0, (1.39 * c, 1.39 * s, 0.0)) for c, s in ring],
        bonds=[Bond(k, (k + 1) % 6, orders[k]) for k in range(6)])
