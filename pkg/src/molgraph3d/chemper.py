"""Chemical perception and model-input construction.

From a parsed Molecule this module derives per-atom chemistry (rings,
aromaticity, hybridization, hydrogen counts, donor/acceptor and
acid/base flags, R/S tags from 3D geometry) and assembles the three
model inputs: the N x 60 feature matrix, the symmetrically normalized
adjacency, and the antisymmetric relative-position tensor.

Two graph modes exist.  The default heavy-atom mode drops hydrogens
from the graph and folds them into per-atom hydrogen counts; explicit-H
mode keeps every atom as a node.  Perception itself is mode-independent
and always runs over the full molecule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .molio import Molecule


class PerceptionWarning(UserWarning):
    """A value fell outside its encodable range and was clamped/defaulted."""


class EmptyMoleculeError(ValueError):
    """No graph nodes remain after mode selection."""


# element -> (default valence, valence electrons, periodic group)
_ELEMENT_DATA = {
    "H": (1, 1, 1),
    "B": (3, 3, 13),
    "C": (4, 4, 14),
    "Si": (4, 4, 14),
    "N": (3, 5, 15),
    "P": (3, 5, 15),
    "As": (3, 5, 15),
    "O": (2, 6, 16),
    "S": (2, 6, 16),
    "Se": (2, 6, 16),
    "F": (1, 7, 17),
    "Cl": (1, 7, 17),
    "Br": (1, 7, 17),
    "I": (1, 7, 17),
}

_ATOMIC_NUMBER = {
    "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8,
    "F": 9, "Ne": 10, "Na": 11, "Mg": 12, "Al": 13, "Si": 14, "P": 15,
    "S": 16, "Cl": 17, "K": 19, "Ca": 20, "Fe": 26, "Cu": 29, "Zn": 30,
    "As": 33, "Se": 34, "Br": 35, "I": 53,
}

DEFAULT_VOCABULARY = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I",
                      "B", "Si", "Se", "As")

HYBRIDIZATIONS = ("sp", "sp2", "sp3", "sp3d", "sp3d2")

FEATURE_BLOCKS = (
    ("atom_type", 15),
    ("degree", 7),
    ("n_hydrogens", 5),
    ("implicit_valence", 7),
    ("hybridization", 5),
    ("formal_charge", 7),
    ("ring_size", 6),
    ("aromatic", 1),
    ("chirality", 3),
    ("acid_base", 2),
    ("hydrogen_bonding", 2),
)
FEATURE_WIDTH = sum(w for _, w in FEATURE_BLOCKS)  # 60


@dataclass(frozen=True)
class FeatureConfig:
    """Featurization options: element vocabulary (14 symbols + catch-all
    slot = one-hot width 15) and the graph mode."""

    elements: tuple = DEFAULT_VOCABULARY
    explicit_hydrogens: bool = False

    def __post_init__(self):
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("element vocabulary has duplicates")
        if len(self.elements) != 14:
            raise ValueError(f"vocabulary must have 14 symbols (+1 catch-all), got {len(self.elements)}")


@dataclass
class PerceivedAtom:
    element: str
    heavy_degree: int
    attached_h: int
    implicit_h: int
    hybridization: str
    ring_sizes: set
    aromatic: bool
    chirality: str  # "R", "S", or "nonchiral"
    formal_charge: int
    acidic: bool
    basic: bool
    donor: bool
    acceptor: bool


@dataclass
class RingInfo:
    cycles: list  # list of vertex tuples, each a witness simple cycle
    sizes_per_atom: list  # set of cycle sizes (3..8) per atom


@dataclass
class GraphTensors:
    """Model input for one molecule: features [N, 60], normalized
    adjacency [N, N], relative positions [N, N, 3] in angstrom."""

    features: np.ndarray
    adjacency: np.ndarray
    rel_pos: np.ndarray
    n_atoms: int
    node_atoms: list  # original atom indices per node row


# ---------------------------------------------------------------------------
# bond bookkeeping helpers


def _adjacency_lists(mol: Molecule):
    adj = [[] for _ in mol.atoms]
    for b in mol.bonds:
        adj[b.i].append((b.j, b))
        adj[b.j].append((b.i, b))
    return adj


def _is_h(mol, i):
    return mol.atoms[i].element == "H"


def _order_value(bond):
    return 1.5 if bond.aromatic else float(bond.order)


def _element_data(element):
    return _ELEMENT_DATA.get(element, (0, 0, 0))


def default_valence(element: str, charge: int) -> int:
    """Default valence with charge adjustment by periodic group."""
    dv, _, group = _element_data(element)
    if group in (1, 14):
        dv -= abs(charge)
    elif group == 13:
        dv -= charge
    elif group in (15, 16, 17):
        dv += charge
    return max(0, dv)


# ---------------------------------------------------------------------------
# rings


def perceive_rings(mol: Molecule, max_size: int = 8) -> RingInfo:
    """All simple cycles of size 3..max_size in the heavy-atom bond graph.

    Bounded-depth DFS; a cycle is emitted once by requiring its smallest
    vertex first and its second vertex below its last (direction canon).
    """
    heavy = [i for i in range(len(mol.atoms)) if not _is_h(mol, i)]
    adj = {i: [] for i in heavy}
    for b in mol.bonds:
        if not _is_h(mol, b.i) and not _is_h(mol, b.j):
            adj[b.i].append(b.j)
            adj[b.j].append(b.i)
    cycles = []
    seen = set()
    for start in heavy:
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for nxt in adj[node]:
                if nxt == start and len(path) >= 3 and path[1] < path[-1]:
                    key = (len(path), frozenset(path))
                    if key not in seen:
                        seen.add(key)
                        cycles.append(tuple(path))
                elif nxt > start and nxt not in path and len(path) < max_size:
                    stack.append((nxt, path + [nxt]))
    sizes = [set() for _ in mol.atoms]
    for cyc in cycles:
        if 3 <= len(cyc) <= max_size:
            for v in cyc:
                sizes[v].add(len(cyc))
    return RingInfo(cycles=cycles, sizes_per_atom=sizes)


# ---------------------------------------------------------------------------
# aromaticity


def perceive_aromaticity(mol: Molecule, rings: RingInfo) -> list:
    """Aromatic flag per atom.

    An atom incident to an aromatic-flagged file bond is aromatic
    outright.  Otherwise a ring is aromatic when every member can go
    planar-sp2 (C/N/O/S, at most 3 heavy neighbors, carbon must carry a
    multiple bond or a charge) and the ring pi count hits 4n + 2 under
    the contribution table: 1 for a double bond inside the ring, 0 for a
    carbon with only an exocyclic double bond or a bare cation, 2 for a
    lone-pair donor (pyrrole/furan/thiophene-type or carbanion).
    """
    n = len(mol.atoms)
    flags = [False] * n
    adj = _adjacency_lists(mol)
    for b in mol.bonds:
        if b.aromatic:
            flags[b.i] = True
            flags[b.j] = True

    def capable(i, members):
        a = mol.atoms[i]
        if a.element not in ("C", "N", "O", "S"):
            return False
        heavy_deg = sum(1 for j, _ in adj[i] if not _is_h(mol, j))
        if heavy_deg > 3:
            return False
        if a.element == "C":
            multiple = any(bond.order >= 2 or bond.aromatic for _, bond in adj[i])
            return multiple or a.charge != 0
        return True

    def contribution(i, members):
        a = mol.atoms[i]
        in_ring_double = any(
            bond.order == 2 and j in members for j, bond in adj[i]
        )
        if in_ring_double:
            return 1
        exo_double = any(bond.order == 2 for _, bond in adj[i])
        if a.element == "C":
            if a.charge > 0:
                return 0
            if a.charge < 0:
                return 2
            return 0 if exo_double else None  # saturated C never reaches here
        if a.element in ("N", "P"):
            return 1 if exo_double else 2
        return 2  # O, S lone pair

    for cyc in rings.cycles:
        members = set(cyc)
        if not all(capable(i, members) for i in cyc):
            continue
        pi = 0
        ok = True
        for i in cyc:
            c = contribution(i, members)
            if c is None:
                ok = False
                break
            pi += c
        if ok and pi % 4 == 2:
            for i in cyc:
                flags[i] = True
    return flags


# ---------------------------------------------------------------------------
# hydrogens and hybridization


def hydrogen_counts(mol: Molecule) -> list:
    """(attached H, implicit H) per atom.

    Implicit count = default valence (charge-adjusted) minus the bond
    order total, floored at zero; attached = explicit H neighbors plus
    implicit.  Aromatic-flagged bonds count 1.5 toward the total.
    """
    adj = _adjacency_lists(mol)
    out = []
    for i, a in enumerate(mol.atoms):
        explicit_h = sum(1 for j, _ in adj[i] if _is_h(mol, j))
        used = sum(_order_value(bond) for _, bond in adj[i])
        implicit = max(0, default_valence(a.element, a.charge) - int(used + 0.5))
        out.append((explicit_h + implicit, implicit))
    return out


def perceive_hybridization(mol: Molecule, aromatic: list | None = None) -> list:
    """Hybridization per atom from the steric number (heavy neighbors +
    hydrogens + lone pairs), with aromatic atoms forced to sp2 and
    triple-bonded or cumulated-diene centers forced to sp."""
    if aromatic is None:
        aromatic = perceive_aromaticity(mol, perceive_rings(mol))
    adj = _adjacency_lists(mol)
    hcounts = hydrogen_counts(mol)
    out = []
    for i, a in enumerate(mol.atoms):
        orders = [bond.order for _, bond in adj[i] if not bond.aromatic]
        if any(o == 3 for o in orders) or sum(1 for o in orders if o == 2) >= 2:
            out.append("sp")
            continue
        if aromatic[i]:
            out.append("sp2")
            continue
        heavy_deg = sum(1 for j, _ in adj[i] if not _is_h(mol, j))
        attached_h, implicit_h = hcounts[i]
        _, ve, _ = _element_data(a.element)
        bonding = sum(_order_value(b) for _, b in adj[i]) + implicit_h
        lone = max(0, int(ve - a.charge - bonding) // 2) if ve else 0
        steric = heavy_deg + attached_h + lone
        if 2 <= steric <= 6:
            out.append(HYBRIDIZATIONS[steric - 2])
        else:
            warnings.warn(
                f"atom {i} ({a.element}) has steric number {steric}; defaulting to sp3",
                PerceptionWarning,
            )
            out.append("sp3")
    return out


# ---------------------------------------------------------------------------
# donor / acceptor / acid / base


def assign_donor_acceptor_acid_base(mol: Molecule, aromatic: list | None = None,
                                    rings: RingInfo | None = None) -> list:
    """(donor, acceptor, acidic, basic) per atom.

    Rule table (a deliberately small stand-in, not a pKa model):
      donor     N/O/S bearing at least one hydrogen
      acceptor  N/O with a free lone pair; aromatic N-H (pyrrole-type)
                is donor-only
      acidic    O-H on carboxylic/sulfonic-sulfinic/phosphonic groups,
                deprotonated O(-) on the same groups, tetrazole-type
                ring N-H, sulfonamide N-H
      basic     aliphatic amine N (lone pair, single bonds only, no
                adjacent carbonyl), plus the =N of amidine/guanidine
    """
    if rings is None:
        rings = perceive_rings(mol)
    if aromatic is None:
        aromatic = perceive_aromaticity(mol, rings)
    adj = _adjacency_lists(mol)
    hcounts = hydrogen_counts(mol)

    def lone_pairs(i):
        a = mol.atoms[i]
        _, ve, _ = _element_data(a.element)
        if ve == 0:
            return 0
        bonding = sum(_order_value(b) for _, b in adj[i]) + hcounts[i][1]
        return max(0, int(ve - a.charge - bonding) // 2)

    def double_bonded_oxygens(i):
        return sum(
            1 for j, bond in adj[i]
            if bond.order == 2 and mol.atoms[j].element == "O"
        )

    out = []
    for i, a in enumerate(mol.atoms):
        nh = hcounts[i][0]
        donor = a.element in ("N", "O", "S") and nh >= 1
        acceptor = a.element in ("N", "O") and lone_pairs(i) >= 1
        if a.element == "N" and aromatic[i] and nh >= 1:
            acceptor = False

        acidic = False
        if a.element == "O" and (nh >= 1 or a.charge == -1):
            for j, bond in adj[i]:
                if bond.order != 1:
                    continue
                if mol.atoms[j].element in ("C", "S", "P") and double_bonded_oxygens(j) >= 1:
                    acidic = True
        if a.element == "N" and nh >= 1:
            if aromatic[i]:
                for cyc in rings.cycles:
                    if i in cyc and len(cyc) == 5:
                        n_count = sum(1 for v in cyc if mol.atoms[v].element == "N")
                        if n_count >= 3:
                            acidic = True
            for j, _ in adj[i]:
                if mol.atoms[j].element == "S" and double_bonded_oxygens(j) >= 2:
                    acidic = True

        basic = False
        if a.element == "N" and not aromatic[i]:
            orders = [bond.order for _, bond in adj[i]]
            if all(o == 1 for o in orders) and not any(b.aromatic for _, b in adj[i]) \
                    and lone_pairs(i) >= 1:
                next_to_carbonyl = any(
                    mol.atoms[j].element == "C" and double_bonded_oxygens(j) >= 1
                    for j, _ in adj[i]
                )
                basic = not next_to_carbonyl
            for j, bond in adj[i]:
                if bond.order == 2 and mol.atoms[j].element == "C":
                    other_n = any(
                        mol.atoms[k].element == "N" and bk.order == 1
                        for k, bk in adj[j] if k != i
                    )
                    if other_n:  # amidine / guanidine imino nitrogen
                        basic = True
        out.append((donor, acceptor, acidic, basic))
    return out


# ---------------------------------------------------------------------------
# chirality


def _branch_signature(mol, adj, start, blocked):
    """Deterministic BFS signature of the branch entered at `start`,
    never crossing `blocked`; layers of sorted atom invariants."""

    def invariant(k):
        a = mol.atoms[k]
        return (a.element, a.charge, len(adj[k]))

    layers = []
    frontier = [start]
    visited = {blocked, start}
    while frontier:
        layers.append(tuple(sorted(invariant(k) for k in frontier)))
        nxt = []
        for k in frontier:
            for j, _ in adj[k]:
                if j not in visited:
                    visited.add(j)
                    nxt.append(j)
        frontier = nxt
    return tuple(layers)


def chirality_tags(mol: Molecule, hybridization: list | None = None) -> list:
    """R/S/nonchiral per atom from 3D geometry.

    Considers sp3 carbons whose four substituent branches are pairwise
    distinct (by neighborhood signature; one branch may be a lone
    hydrogen, implicit or explicit).  Priority approximates CIP by the
    first atom's atomic number, tie-broken by signature order.  The tag
    comes from the sign of the triple product of the three top-priority
    substituent vectors: negative means R.  Near-planar geometry
    (|det| below 1e-6 cubic angstrom) is reported nonchiral.
    """
    if hybridization is None:
        hybridization = perceive_hybridization(mol)
    adj = _adjacency_lists(mol)
    hcounts = hydrogen_counts(mol)
    tags = []
    for i, a in enumerate(mol.atoms):
        if a.element != "C" or hybridization[i] != "sp3":
            tags.append("nonchiral")
            continue
        neighbor_ids = [j for j, _ in adj[i]]
        total_h = sum(1 for j in neighbor_ids if _is_h(mol, j)) + hcounts[i][1]
        if total_h >= 2:
            tags.append("nonchiral")
            continue
        branches = []  # (atomic_number, signature, xyz or None)
        for j in neighbor_ids:
            sig = _branch_signature(mol, adj, j, i)
            z = _ATOMIC_NUMBER.get(mol.atoms[j].element, 0)
            branches.append((z, sig, np.asarray(mol.atoms[j].xyz)))
        if hcounts[i][1] == 1:
            branches.append((1, ("implicit-H",), None))
        if len(branches) != 4:
            tags.append("nonchiral")
            continue
        signatures = [b[1] for b in branches]
        if len(set(signatures)) != 4:
            tags.append("nonchiral")
            continue
        branches.sort(key=lambda b: (-b[0], b[1]))
        # hydrogen (atomic number 1) always ranks last, so the top three
        # are explicit atoms with real coordinates
        center = np.asarray(a.xyz)
        vecs = [xyz - center for _, _, xyz in branches[:3]]
        det = float(np.dot(vecs[0], np.cross(vecs[1], vecs[2])))
        if abs(det) < 1e-6:
            warnings.warn(f"atom {i}: degenerate stereo geometry (|det|={abs(det):.2e})",
                          PerceptionWarning)
            tags.append("nonchiral")
        else:
            tags.append("R" if det < 0 else "S")
    return tags


# ---------------------------------------------------------------------------
# assembled perception + featurization


def perceive(mol: Molecule) -> list:
    """Run the full perception pipeline; one PerceivedAtom per atom."""
    rings = perceive_rings(mol)
    aromatic = perceive_aromaticity(mol, rings)
    hybrid = perceive_hybridization(mol, aromatic)
    hcounts = hydrogen_counts(mol)
    daab = assign_donor_acceptor_acid_base(mol, aromatic, rings)
    chir = chirality_tags(mol, hybrid)
    adj = _adjacency_lists(mol)
    atoms = []
    for i, a in enumerate(mol.atoms):
        heavy_deg = sum(1 for j, _ in adj[i] if not _is_h(mol, j))
        donor, acceptor, acidic, basic = daab[i]
        atoms.append(
            PerceivedAtom(
                element=a.element,
                heavy_degree=heavy_deg,
                attached_h=hcounts[i][0],
                implicit_h=hcounts[i][1],
                hybridization=hybrid[i],
                ring_sizes=rings.sizes_per_atom[i],
                aromatic=aromatic[i],
                chirality=chir[i],
                formal_charge=a.charge,
                acidic=acidic,
                basic=basic,
                donor=donor,
                acceptor=acceptor,
            )
        )
    return atoms


def node_indices(mol: Molecule, config: FeatureConfig) -> list:
    if config.explicit_hydrogens:
        return list(range(len(mol.atoms)))
    return [i for i in range(len(mol.atoms)) if mol.atoms[i].element != "H"]


def _one_hot(width, index, label, clamp=True):
    row = np.zeros(width)
    if index < 0 or index >= width:
        if not clamp:
            return row
        warnings.warn(f"{label} value {index} clamped into 0..{width - 1}", PerceptionWarning)
        index = min(max(index, 0), width - 1)
    row[index] = 1.0
    return row


def featurize(mol: Molecule, config: FeatureConfig | None = None) -> np.ndarray:
    """The [N, 60] feature matrix, blocks in fixed order: atom type 15,
    degree 7, hydrogens 5, implicit valence 7, hybridization 5, formal
    charge 7, ring sizes 6, aromatic 1, chirality 3, acid/base 2,
    donor/acceptor 2.  Out-of-vocabulary elements hit the catch-all
    type slot; out-of-range counts clamp with a warning."""
    if config is None:
        config = FeatureConfig()
    perceived = perceive(mol)
    vocab = {sym: k for k, sym in enumerate(config.elements)}
    rows = []
    for i in node_indices(mol, config):
        p = perceived[i]
        blocks = [
            _one_hot(15, vocab.get(p.element, 14), "atom type"),
            _one_hot(7, p.heavy_degree, "degree"),
            _one_hot(5, p.attached_h, "hydrogen count"),
            _one_hot(7, p.implicit_h, "implicit valence"),
            _one_hot(5, HYBRIDIZATIONS.index(p.hybridization), "hybridization"),
            _one_hot(7, p.formal_charge + 3, "formal charge"),
            np.array([1.0 if s in p.ring_sizes else 0.0 for s in range(3, 9)]),
            np.array([1.0 if p.aromatic else 0.0]),
            _one_hot(3, {"R": 0, "S": 1, "nonchiral": 2}[p.chirality], "chirality"),
            np.array([1.0 if p.acidic else 0.0, 1.0 if p.basic else 0.0]),
            np.array([1.0 if p.donor else 0.0, 1.0 if p.acceptor else 0.0]),
        ]
        rows.append(np.concatenate(blocks))
    out = np.array(rows, dtype=np.float64).reshape(len(rows), FEATURE_WIDTH)
    return out


def normalized_adjacency(bonds01: np.ndarray) -> np.ndarray:
    """Self-loop symmetric normalization D^{-1/2} (A + I) D^{-1/2},
    D = diag(1 + degree); the standard graph-convolution weighting."""
    n = bonds01.shape[0]
    a_hat = bonds01 + np.eye(n)
    d = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_graph_tensors(mol: Molecule, config: FeatureConfig | None = None) -> GraphTensors:
    """Assemble model inputs for one molecule.

    The relative-position convention is rel_pos[i][j] = coords(j) -
    coords(i): the vector points from the center atom toward its
    neighbor.  Only differences of coordinates enter, which makes the
    representation translation invariant.
    """
    if config is None:
        config = FeatureConfig()
    nodes = node_indices(mol, config)
    n = len(nodes)
    if n == 0:
        raise EmptyMoleculeError(f"molecule {mol.id!r} has no graph nodes")
    pos_of = {orig: k for k, orig in enumerate(nodes)}
    a = np.zeros((n, n))
    for b in mol.bonds:
        if b.i in pos_of and b.j in pos_of:
            a[pos_of[b.i], pos_of[b.j]] = 1.0
            a[pos_of[b.j], pos_of[b.i]] = 1.0
    coords = np.array([mol.atoms[i].xyz for i in nodes], dtype=np.float64)
    rel = coords[None, :, :] - coords[:, None, :]
    return GraphTensors(
        features=featurize(mol, config),
        adjacency=normalized_adjacency(a),
        rel_pos=rel,
        n_atoms=n,
        node_atoms=nodes,
    )
