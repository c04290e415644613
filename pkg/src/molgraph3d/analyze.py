"""Rotation experiments and atomic-contribution maps.

Rotation sweeps re-orient test molecules (stepwise about one axis, or
randomly about all three), re-featurize, and re-evaluate a trained
model without touching its parameters; the fine sweep traces one
molecule's prediction over a full turn.  Contribution maps attribute
the aggregated molecular feature back to atoms, either by feature mass
(sum aggregation) or by counting per-channel wins (max aggregation).

Rotations are applied about the origin of the file's coordinate frame,
not the centroid: pocket-aligned datasets depend on the absolute frame,
and for translation-invariant evaluations the center is immaterial.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import gcn3d, train
from .chemper import FeatureConfig, build_graph_tensors
from .gcn3d import ForwardResult, ModelParams
from .molio import Atom, Molecule
from .train import TargetScaler


class DegenerateMapError(ValueError):
    """Contribution weights are undefined because all features are zero."""


@dataclass(frozen=True)
class RotationSpec:
    mode: str = "stepwise"  # stepwise | random | fine
    axis: str = "z"
    step: float = 45.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("stepwise", "random", "fine"):
            raise ValueError(f"unknown rotation mode {self.mode!r}")
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.mode in ("stepwise", "fine") and (self.step <= 0 or 360.0 % self.step != 0):
            raise ValueError("step must divide 360 for a complete sweep")


@dataclass
class FoldEval:
    """One trained fold: parameters, target scaler, and its test records."""

    params: ModelParams
    scaler: TargetScaler
    records: list


@dataclass
class SweepRow:
    axis: str  # "x" | "y" | "z" | "xyz" for the random row
    degrees: object  # float, or the string "random"
    values: dict  # metric -> mean across folds
    stderr: dict  # metric -> sample std across folds (zero for one fold)


@dataclass
class ContributionMap:
    molecule_id: str
    strategy: str
    scalar_weights: list
    vector_weights: list


# ---------------------------------------------------------------------------
# rotations


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    """Right-handed rotation about a coordinate axis; determinant +1."""
    t = np.deg2rad(float(degrees))
    c, s = np.cos(t), np.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    raise ValueError(f"unknown axis {axis!r}")


def random_rotation(rng) -> np.ndarray:
    """Composition R_z(c) R_y(b) R_x(a) with independent uniform angles
    on [0, 360).  Matches per-axis sampling, which is not Haar-uniform
    over the rotation group."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    a, b, c = rng.uniform(0.0, 360.0, size=3)
    return rotation_matrix("z", c) @ rotation_matrix("y", b) @ rotation_matrix("x", a)


def rotate_molecule(mol: Molecule, matrix: np.ndarray) -> Molecule:
    """Map every coordinate x -> Q x about the origin; the graph, charges,
    and data fields are untouched."""
    q = np.asarray(matrix, dtype=np.float64)
    atoms = [
        Atom(a.element, a.charge, tuple(q @ np.asarray(a.xyz)), a.parity)
        for a in mol.atoms
    ]
    return Molecule(id=mol.id, atoms=atoms, bonds=list(mol.bonds),
                    properties=dict(mol.properties))


# ---------------------------------------------------------------------------
# sweeps


def _evaluate_rotated(fold: FoldEval, matrix_for, feature_config):
    """Metric dict for one fold with every test molecule rotated by
    matrix_for(index)."""
    preds = []
    for k, rec in enumerate(fold.records):
        mol = rotate_molecule(rec.molecule, matrix_for(k))
        res = gcn3d.forward(build_graph_tensors(mol, feature_config), fold.params)
        preds.append(res.prediction)
    preds = np.asarray(preds, dtype=np.float64)
    task = fold.params.config.task
    if task == "regression":
        preds = fold.scaler.invert(preds)
    targets = [rec.target for rec in fold.records]
    return train.metrics(preds, targets, task)


def _mean_std(dicts):
    keys = sorted(dicts[0])
    mean = {k: float(np.mean([d[k] for d in dicts])) for k in keys}
    std = {k: float(np.std([d[k] for d in dicts], ddof=1)) if len(dicts) > 1 else 0.0
           for k in keys}
    return mean, std


def rotation_sweep(folds, spec: RotationSpec = RotationSpec(),
                   feature_config: FeatureConfig | None = None) -> list:
    """The full stepwise grid (0 to 360-step per axis) plus one random
    row; metrics are averaged across the given folds.

    ``folds`` is a FoldEval or a list of them (a cross-validation
    ensemble, each fold evaluated on its own test set).  The random row
    rotates every molecule independently from the spec seed; with
    ``spec.mode == "random"`` only that row is produced.  Trained
    parameters are never modified.
    """
    if isinstance(folds, FoldEval):
        folds = [folds]
    if not folds:
        raise ValueError("no folds to evaluate")
    rows = []
    if spec.mode != "random":
        angles = np.arange(0.0, 360.0, spec.step)
        for axis in ("x", "y", "z"):
            for deg in angles:
                q = rotation_matrix(axis, deg)
                per_fold = [_evaluate_rotated(f, lambda k: q, feature_config)
                            for f in folds]
                mean, std = _mean_std(per_fold)
                rows.append(SweepRow(axis=axis, degrees=float(deg), values=mean, stderr=std))
    rng = np.random.default_rng(spec.seed)
    per_fold = []
    for f in folds:
        matrices = [random_rotation(rng) for _ in f.records]
        per_fold.append(_evaluate_rotated(f, lambda k: matrices[k], feature_config))
    mean, std = _mean_std(per_fold)
    rows.append(SweepRow(axis="xyz", degrees="random", values=mean, stderr=std))
    return rows


def fine_sweep(params: ModelParams, molecule: Molecule,
               scaler: TargetScaler | None = None, axis: str = "z",
               step: float = 5.0,
               feature_config: FeatureConfig | None = None) -> list:
    """Prediction of one molecule at every rotation 0, step, ...,
    360-step about one axis; (degrees, prediction) pairs."""
    spec = RotationSpec(mode="fine", axis=axis, step=step)
    series = []
    for deg in np.arange(0.0, 360.0, spec.step):
        mol = rotate_molecule(molecule, rotation_matrix(axis, deg))
        res = gcn3d.forward(build_graph_tensors(mol, feature_config), params)
        pred = res.prediction
        if params.config.task == "regression" and scaler is not None:
            pred = float(scaler.invert(pred))
        series.append((float(deg), float(pred)))
    return series


# ---------------------------------------------------------------------------
# contribution maps


def contribution_map(result: ForwardResult, molecule_id: str = "") -> ContributionMap:
    """Per-atom influence weights from a forward cache.

    Sum aggregation: an atom's scalar weight is the l1 mass of its
    scalar features over the total scalar mass; its vector weight uses
    the summed Euclidean norms of its channel vectors.  Max aggregation:
    the fraction of channels whose recorded winner is that atom.
    Weights sum to one per form.
    """
    strategy = result.config.aggregation
    s = result.final_state.scalars.data
    v = result.final_state.vectors.data
    if strategy == "sum":
        s_mass = np.abs(s).sum(axis=1)
        v_mass = np.linalg.norm(v, axis=2).sum(axis=1)
        if s_mass.sum() == 0.0 or v_mass.sum() == 0.0:
            raise DegenerateMapError("all features are zero; weights undefined")
        scalar_w = s_mass / s_mass.sum()
        vector_w = v_mass / v_mass.sum()
    else:
        prov = result.provenance
        if prov is None:
            raise DegenerateMapError("no max-aggregation provenance in cache")
        n = s.shape[0]
        nchan = len(prov.scalar_winners)
        scalar_w = np.bincount(prov.scalar_winners, minlength=n) / nchan
        vector_w = np.bincount(prov.vector_winners, minlength=n) / nchan
    return ContributionMap(
        molecule_id=molecule_id,
        strategy=strategy,
        scalar_weights=[float(w) for w in scalar_w],
        vector_weights=[float(w) for w in vector_w],
    )


# ---------------------------------------------------------------------------
# writers


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "degrees", "metric", "value", "stderr"])
        for row in rows:
            for metric in sorted(row.values):
                writer.writerow([row.axis, row.degrees, metric,
                                 repr(row.values[metric]), repr(row.stderr[metric])])


def write_fine_csv(series, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["degrees", "prediction"])
        for deg, pred in series:
            writer.writerow([deg, repr(pred)])


def write_contributions(maps, path) -> None:
    doc = [
        {
            "id": m.molecule_id,
            "strategy": m.strategy,
            "scalar_weights": m.scalar_weights,
            "vector_weights": m.vector_weights,
        }
        for m in maps
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
