"""Molecular structure and dataset I/O.

Reads MDL SDF (V2000 connection tables) and a small JSON fixture format
into Molecule records, joins structures with a target CSV into dataset
records, and writes prediction CSVs.  Conformer generation is out of
scope: files must already carry 3D coordinates.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

# Elements accepted from structure files.  Parsing is deliberately wider
# than the featurization vocabulary; unknown vocabulary entries later
# fall into the catch-all one-hot slot.
ELEMENTS = {
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al",
    "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Ti", "Cr", "Mn", "Fe", "Co",
    "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Zr",
    "Mo", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe",
    "Cs", "Ba", "W", "Pt", "Au", "Hg", "Tl", "Pb", "Bi",
}

# Legacy atom-block charge column: code -> formal charge.  Code 4 is a
# doublet radical, not a charge.
_LEGACY_CHARGE = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}


class ParseError(ValueError):
    """Malformed structure input; carries record index and line number."""

    def __init__(self, message, record=None, line=None):
        loc = ""
        if record is not None:
            loc += f" [record {record}"
            loc += f", line {line}]" if line is not None else "]"
        elif line is not None:
            loc += f" [line {line}]"
        super().__init__(message + loc)
        self.record = record
        self.line = line


class LoadError(ValueError):
    """Dataset join failure; message lists the offending ids."""


class WriteError(ValueError):
    """Refusal to serialize invalid output (e.g. NaN predictions)."""


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int
    xyz: tuple
    parity: int | None = None


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: int
    aromatic: bool = False


@dataclass
class Molecule:
    id: str
    atoms: list = field(default_factory=list)
    bonds: list = field(default_factory=list)
    properties: dict = field(default_factory=dict)

    def validate(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if b.i == b.j:
                raise ParseError(f"bond joins atom {b.i} to itself")
            if not (0 <= b.i < n and 0 <= b.j < n):
                raise ParseError(f"bond ({b.i}, {b.j}) out of range for {n} atoms")
            key = (min(b.i, b.j), max(b.i, b.j))
            if key in seen:
                raise ParseError(f"duplicate bond between atoms {key[0]} and {key[1]}")
            seen.add(key)
        for k, a in enumerate(self.atoms):
            if not all(math.isfinite(c) for c in a.xyz):
                raise ParseError(f"atom {k} has non-finite coordinates")
            if not -3 <= a.charge <= 3:
                raise ParseError(f"atom {k} charge {a.charge} outside -3..+3")
        return self

    def neighbors(self, i):
        out = []
        for b in self.bonds:
            if b.i == i:
                out.append(b.j)
            elif b.j == i:
                out.append(b.i)
        return out


@dataclass
class DatasetRecord:
    molecule: Molecule
    target: float
    split: str | None = None


# ---------------------------------------------------------------------------
# SDF (V2000)


def _decode(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8", errors="replace")
    return data.replace("\r\n", "\n")


def _record_spans(lines):
    spans = []
    start = 0
    while start < len(lines):
        if all(not ln.strip() for ln in lines[start:]):
            break  # trailing blank lines after the last record
        end = start
        while end < len(lines) and lines[end].strip() != "$$$$":
            end += 1
        spans.append((start, end))
        start = end + 1
    return spans


def parse_sdf(data) -> list:
    """Parse an MDL SDF file (V2000) into a list of Molecules.

    Charges come from M CHG property lines when present, else from the
    legacy atom-block column.  Bond type 4 is stored as order 1 with the
    aromatic flag set.  Data items (``> <name>`` blocks) are kept in
    Molecule.properties.  Any structural defect raises ParseError with
    the record index and line number; arbitrary bytes never crash.
    """
    lines = _decode(data).split("\n")
    return [
        _parse_record(lines[start:end], record, start)
        for record, (start, end) in enumerate(_record_spans(lines))
    ]


def parse_sdf_lenient(data):
    """Like parse_sdf, but collects per-record ParseErrors instead of
    stopping at the first; returns (molecules, errors)."""
    lines = _decode(data).split("\n")
    molecules, errors = [], []
    for record, (start, end) in enumerate(_record_spans(lines)):
        try:
            molecules.append(_parse_record(lines[start:end], record, start))
        except ParseError as exc:
            errors.append(str(exc))
    return molecules, errors


def _parse_record(lines, record, offset):
    def err(msg, local_line):
        raise ParseError(msg, record=record, line=offset + local_line + 1)

    if len(lines) < 4:
        err("record too short for a molfile header", len(lines))
    title = lines[0].strip()
    counts = lines[3]
    try:
        natoms = int(counts[0:3])
        nbonds = int(counts[3:6])
    except (ValueError, IndexError):
        err(f"malformed counts line {counts!r}", 3)
    if natoms < 0 or nbonds < 0:
        err("negative counts", 3)
    need = 4 + natoms + nbonds
    if len(lines) < need:
        err(f"record ends before {natoms} atoms + {nbonds} bonds", len(lines))

    atoms = []
    legacy_charges = {}
    for k in range(natoms):
        ln = lines[4 + k]
        try:
            x = float(ln[0:10])
            y = float(ln[10:20])
            z = float(ln[20:30])
            symbol = ln[31:34].strip()
        except (ValueError, IndexError):
            err(f"malformed atom line {ln!r}", 4 + k)
        if symbol not in ELEMENTS:
            err(f"unknown element symbol {symbol!r}", 4 + k)
        code = _int_field(ln, 36, 39)
        if code not in _LEGACY_CHARGE:
            err(f"invalid charge code {code}", 4 + k)
        legacy_charges[k] = _LEGACY_CHARGE[code]
        parity = _int_field(ln, 39, 42)
        atoms.append(Atom(symbol, 0, (x, y, z), parity if parity in (1, 2) else None))

    bonds = []
    for k in range(nbonds):
        ln = lines[4 + natoms + k]
        try:
            i = int(ln[0:3])
            j = int(ln[3:6])
            btype = int(ln[6:9])
        except (ValueError, IndexError):
            err(f"malformed bond line {ln!r}", 4 + natoms + k)
        if not (1 <= i <= natoms and 1 <= j <= natoms):
            err(f"bond endpoint ({i}, {j}) outside 1..{natoms}", 4 + natoms + k)
        if btype == 4:
            bonds.append(Bond(i - 1, j - 1, 1, aromatic=True))
        elif btype in (1, 2, 3):
            bonds.append(Bond(i - 1, j - 1, btype, aromatic=False))
        else:
            err(f"unsupported bond type {btype}", 4 + natoms + k)

    chg = {}
    properties = {}
    k = need
    while k < len(lines):
        ln = lines[k]
        if ln.startswith("M  CHG"):
            try:
                cnt = int(ln[6:9])
                for c in range(cnt):
                    at = int(ln[9 + 8 * c: 13 + 8 * c])
                    val = int(ln[13 + 8 * c: 17 + 8 * c])
                    chg[at - 1] = val
            except (ValueError, IndexError):
                err(f"malformed M  CHG line {ln!r}", k)
        elif ln.startswith("> "):
            name = ln[ln.find("<") + 1: ln.rfind(">")]
            vals = []
            k += 1
            while k < len(lines) and lines[k].strip() != "":
                vals.append(lines[k])
                k += 1
            properties[name] = "\n".join(vals)
        k += 1

    charges = chg if chg else legacy_charges  # M CHG supersedes the whole legacy column
    final = [
        Atom(a.element, charges.get(idx, 0), a.xyz, a.parity)
        for idx, a in enumerate(atoms)
    ]
    mol = Molecule(id=title, atoms=final, bonds=bonds, properties=properties)
    try:
        mol.validate()
    except ParseError as exc:
        raise ParseError(str(exc), record=record) from None
    return mol


def _int_field(line, a, b):
    raw = line[a:b].strip()
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError:
        return 0


# ---------------------------------------------------------------------------
# JSON molecule fixtures


def parse_molecule_json(data) -> Molecule:
    """Parse the JSON fixture format; errors name the offending path."""
    try:
        doc = json.loads(_decode(data))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None

    def need(obj, key, path):
        if not isinstance(obj, dict) or key not in obj:
            raise ParseError(f"missing field at {path}.{key}")
        return obj[key]

    mol_id = need(doc, "id", "$")
    atoms = []
    for k, entry in enumerate(need(doc, "atoms", "$")):
        path = f"$.atoms[{k}]"
        xyz = need(entry, "xyz", path)
        if not isinstance(xyz, list) or len(xyz) != 3:
            raise ParseError(f"xyz must have 3 components at {path}.xyz")
        atoms.append(
            Atom(
                str(need(entry, "element", path)),
                int(need(entry, "charge", path)),
                tuple(float(v) for v in xyz),
                entry.get("parity"),
            )
        )
    bonds = []
    for k, entry in enumerate(need(doc, "bonds", "$")):
        path = f"$.bonds[{k}]"
        bonds.append(
            Bond(
                int(need(entry, "i", path)),
                int(need(entry, "j", path)),
                int(need(entry, "order", path)),
                bool(need(entry, "aromatic", path)),
            )
        )
    return Molecule(id=str(mol_id), atoms=atoms, bonds=bonds).validate()


def write_molecule_json(mol: Molecule) -> str:
    """Canonical serialization; parse(write(m)) reproduces m bit-exactly.

    Floats are emitted with repr, which round-trips float64 exactly.
    """
    doc = {
        "id": mol.id,
        "atoms": [
            {
                "element": a.element,
                "charge": a.charge,
                "xyz": list(a.xyz),
                **({"parity": a.parity} if a.parity is not None else {}),
            }
            for a in mol.atoms
        ],
        "bonds": [
            {"i": b.i, "j": b.j, "order": b.order, "aromatic": b.aromatic}
            for b in mol.bonds
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


# ---------------------------------------------------------------------------
# dataset join


def resolve_id(mol: Molecule, id_field: str | None) -> str:
    """Record id: a named SDF data field when configured, else the title line."""
    if id_field is not None and id_field in mol.properties:
        return mol.properties[id_field].strip()
    return mol.id


def load_dataset(structures_path, targets_path, id_column: str, target_column: str,
                 task: str, id_field: str | None = None,
                 label_map: dict | None = None) -> list:
    """Join an SDF file with a target CSV into DatasetRecords, in CSV row order.

    ``task`` is "regression" or "classification".  ``label_map`` maps raw
    CSV labels onto 0/1 before validation (e.g. {"CA": 1, "CM": 1, "CI": 0}
    to merge confirmed-active classes).  Every CSV id must match exactly
    one structure; all offenders are reported together.
    """
    if task not in ("regression", "classification"):
        raise LoadError(f"unknown task {task!r}")
    with open(structures_path, "rb") as fh:
        molecules = parse_sdf(fh.read())
    by_id: dict = {}
    duplicates = set()
    for mol in molecules:
        key = resolve_id(mol, id_field)
        if key in by_id:
            duplicates.add(key)
        by_id[key] = mol
    if duplicates:
        raise LoadError(f"duplicate structure ids: {sorted(duplicates)}")

    records = []
    missing, bad = [], []
    with open(targets_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or id_column not in reader.fieldnames \
                or target_column not in reader.fieldnames:
            raise LoadError(
                f"CSV must have columns {id_column!r} and {target_column!r}, "
                f"found {reader.fieldnames}"
            )
        for row in reader:
            rid = row[id_column].strip()
            raw = row[target_column].strip()
            if rid not in by_id:
                missing.append(rid)
                continue
            if label_map is not None and raw in label_map:
                raw = str(label_map[raw])
            try:
                target = float(raw)
            except ValueError:
                bad.append(f"{rid}={raw!r}")
                continue
            if task == "classification" and target not in (0.0, 1.0):
                bad.append(f"{rid}={raw!r} (not in {{0,1}})")
                continue
            records.append(DatasetRecord(by_id[rid], target))
    problems = []
    if missing:
        problems.append(f"ids without structures: {missing}")
    if bad:
        problems.append(f"invalid targets: {bad}")
    if problems:
        raise LoadError("; ".join(problems))
    return records


def write_predictions(records, predictions, path):
    """CSV of id, target, prediction (6 decimals).  NaN predictions are refused."""
    records = list(records)
    predictions = list(predictions)
    if len(records) != len(predictions):
        raise WriteError(f"{len(records)} records vs {len(predictions)} predictions")
    for rec, p in zip(records, predictions):
        if not math.isfinite(p):
            raise WriteError(f"non-finite prediction for id {resolve_id(rec.molecule, None)!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "target", "prediction"])
    for rec, p in zip(records, predictions):
        writer.writerow([rec.molecule.id, f"{rec.target:.6f}", f"{p:.6f}"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
