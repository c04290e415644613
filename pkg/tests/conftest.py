"""Shared fixtures: hand-built molecules with known chemistry, an
independent V2000 writer for parser round-trips, and random small
molecules for property and gradient sweeps."""

import numpy as np
import pytest

from molgraph3d.molio import Atom, Bond, DatasetRecord, Molecule

_CHARGE_CODE = {0: 0, 3: 1, 2: 2, 1: 3, -1: 5, -2: 6, -3: 7}


def make_mol(mol_id, atoms, bonds=()):
    """atoms: (element, charge, (x, y, z)); bonds: (i, j, order[, aromatic])."""
    return Molecule(
        id=mol_id,
        atoms=[Atom(e, c, tuple(float(v) for v in xyz)) for e, c, xyz in atoms],
        bonds=[Bond(b[0], b[1], b[2], bool(b[3]) if len(b) > 3 else False) for b in bonds],
    ).validate()


def mol_to_sdf(mol, data_fields=None):
    """Minimal V2000 writer, independent of the package parser."""
    lines = [mol.id, "  test-writer", ""]
    lines.append(f"{len(mol.atoms):3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
    charged = []
    for k, a in enumerate(mol.atoms):
        x, y, z = a.xyz
        parity = a.parity or 0
        code = _CHARGE_CODE[a.charge]
        lines.append(
            f"{x:10.4f}{y:10.4f}{z:10.4f} {a.element:<3s}{0:2d}{code:3d}{parity:3d}"
            + "  0" * 9
        )
        if a.charge != 0:
            charged.append((k + 1, a.charge))
    for b in mol.bonds:
        btype = 4 if b.aromatic else b.order
        lines.append(f"{b.i + 1:3d}{b.j + 1:3d}{btype:3d}  0  0  0  0")
    for at, chg in charged:
        lines.append(f"M  CHG  1{at:4d}{chg:4d}")
    lines.append("M  END")
    for name, value in (data_fields or {}).items():
        lines.append(f"> <{name}>")
        lines.append(str(value))
        lines.append("")
    lines.append("$$$$")
    return "\n".join(lines) + "\n"


def random_molecule(rng, n_min=3, n_max=8, elements=("C", "N", "O")):
    """Random connected molecule: spanning tree plus sometimes one ring
    closure, all single bonds, gaussian coordinates."""
    n = int(rng.integers(n_min, n_max + 1))
    atoms = [(str(rng.choice(elements)), 0, rng.normal(scale=2.0, size=3)) for _ in range(n)]
    bonds = [(int(rng.integers(0, i)), i, 1) for i in range(1, n)]
    if n >= 4 and rng.random() < 0.5:
        existing = {(min(i, j), max(i, j)) for i, j, _ in bonds}
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (i, j) not in existing:
            bonds.append((i, j, 1))
    return make_mol(f"rand-{rng.integers(1 << 30)}", atoms, bonds)


def regression_fixture(n=16, seed=7):
    """Small regression dataset: distinct random molecules with targets
    tied loosely to size and composition (learnable, not degenerate)."""
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        mol = random_molecule(rng, 4, 8)
        target = (
            0.7 * len(mol.atoms)
            - 1.9 * sum(1 for a in mol.atoms if a.element == "O")
            + 0.8 * sum(1 for a in mol.atoms if a.element == "N")
            + rng.normal(scale=0.3)
        )
        mol.id = f"fix-{k}"
        records.append(DatasetRecord(mol, float(target)))
    return records


# --- named molecules -------------------------------------------------------

_HEX = [(np.cos(t), np.sin(t)) for t in np.linspace(0, 2 * np.pi, 7)[:6]]


@pytest.fixture
def methane():
    # no explicit hydrogens: 4 implicit
    return make_mol("methane", [("C", 0, (0.0, 0.0, 0.0))])


@pytest.fixture
def water():
    return make_mol("water", [("O", 0, (0.0, 0.0, 0.0))])


@pytest.fixture
def ethane():
    return make_mol("ethane", [("C", 0, (0, 0, 0)), ("C", 0, (1.54, 0, 0))], [(0, 1, 1)])


@pytest.fixture
def ethanol():
    return make_mol(
        "ethanol",
        [("C", 0, (0, 0, 0)), ("C", 0, (1.5, 0, 0)), ("O", 0, (2.2, 1.2, 0))],
        [(0, 1, 1), (1, 2, 1)],
    )


@pytest.fixture
def acetic_acid():
    # C0 (methyl) - C1 (=O2) - O3 (hydroxyl)
    return make_mol(
        "acetic-acid",
        [("C", 0, (0, 0, 0)), ("C", 0, (1.5, 0, 0)),
         ("O", 0, (2.1, 1.1, 0)), ("O", 0, (2.2, -1.2, 0))],
        [(0, 1, 1), (1, 2, 2), (1, 3, 1)],
    )


def _ring(symbols, radius=1.39, orders=(2, 1, 2, 1, 2, 1)):
    atoms = [(sym, 0, (radius * c, radius * s, 0.0)) for sym, (c, s) in zip(symbols, _HEX)]
    bonds = [(k, (k + 1) % 6, orders[k]) for k in range(6)]
    return atoms, bonds


@pytest.fixture
def benzene():
    atoms, bonds = _ring(["C"] * 6)
    return make_mol("benzene", atoms, bonds)


@pytest.fixture
def pyridine():
    atoms, bonds = _ring(["N", "C", "C", "C", "C", "C"])
    return make_mol("pyridine", atoms, bonds)


@pytest.fixture
def cyclohexane():
    atoms, bonds = _ring(["C"] * 6, radius=1.54, orders=(1,) * 6)
    return make_mol("cyclohexane", atoms, bonds)


@pytest.fixture
def pyrrole():
    pent = [(np.cos(t), np.sin(t)) for t in np.linspace(0, 2 * np.pi, 6)[:5]]
    atoms = [(sym, 0, (1.37 * c, 1.37 * s, 0.0))
             for sym, (c, s) in zip(["N", "C", "C", "C", "C"], pent)]
    bonds = [(0, 1, 1), (1, 2, 2), (2, 3, 1), (3, 4, 2), (4, 0, 1)]
    return make_mol("pyrrole", atoms, bonds)


@pytest.fixture
def bicyclo_5_6():
    """Fused 5-6 saturated system (hydrindane skeleton); atoms 0 and 4
    are the shared fusion carbons."""
    atoms = [("C", 0, (np.cos(t), np.sin(t), 0.05 * k)) for k, t in
             enumerate(np.linspace(0, 2 * np.pi, 10)[:9])]
    bonds = [(0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 4, 1), (4, 0, 1),  # 5-ring
             (4, 5, 1), (5, 6, 1), (6, 7, 1), (7, 8, 1), (8, 0, 1)]  # 6-ring closes via 0
    return make_mol("bicyclo-5-6", atoms, bonds)


@pytest.fixture
def chfclbr_r():
    """(R)-CHFClBr: priorities Br > Cl > F > H; with H pointing down -z
    the top three run clockwise seen from +z, giving R."""
    return make_mol(
        "chfclbr-R",
        [("C", 0, (0.0, 0.0, 0.0)),
         ("H", 0, (0.0, 0.0, -1.09)),
         ("Br", 0, (0.0, 1.70, 0.60)),
         ("Cl", 0, (1.472, -0.85, 0.60)),
         ("F", 0, (-1.472, -0.85, 0.60))],
        [(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)],
    )
