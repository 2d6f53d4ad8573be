"""Molecules: restricted SMILES parsing, featurization, synthesis.

The SMILES subset covers kekulized organic-subset atoms (B, C, N, O, P,
S, F, Cl, Br, I), bracket atoms with charges (hydrogen counts are parsed
and ignored), single/double/triple bonds, branches, and ring closures
(digits and %nn). No aromatic lowercase, stereochemistry, isotopes or
dot-disconnected fragments.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pfgm
from .errors import InputError, ParseError
from .rng import substream

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
ELEMENT_CODE = {sym: i for i, sym in enumerate(ELEMENTS)}
VALENCE = (3, 4, 3, 2, 3, 2, 1, 1, 1, 1)
CARBON = ELEMENT_CODE["C"]

BOND_SYMBOL = ("", "=", "#")  # order codes 0/1/2 mean single/double/triple
BOND_ORDER_OF_SYMBOL = {"-": 0, "=": 1, "#": 2}
NUM_BOND_ORDERS = 3


@dataclass(frozen=True)
class Molecule:
    elements: np.ndarray  # int8 [A] codes into ELEMENTS
    charges: np.ndarray  # int8 [A]
    bond_i: np.ndarray  # int32 [B]
    bond_j: np.ndarray  # int32 [B]
    bond_order: np.ndarray  # int8 [B]
    ring_atom: np.ndarray  # bool [A]
    ring_bond: np.ndarray  # bool [B]
    coords: np.ndarray | None = None  # f64 [A, 3] when a conformer exists
    target: float | None = None

    @property
    def num_atoms(self) -> int:
        return len(self.elements)

    @property
    def num_bonds(self) -> int:
        return len(self.bond_i)

    def replace(self, **kw) -> "Molecule":
        fields = {k: getattr(self, k) for k in
                  ("elements", "charges", "bond_i", "bond_j", "bond_order",
                   "ring_atom", "ring_bond", "coords", "target")}
        fields.update(kw)
        return Molecule(**fields)


def _find_ring_memberships(num_atoms: int, bond_i, bond_j):
    """Cycle membership via bridge finding (an edge is in a ring iff it
    is not a bridge); iterative DFS to stay clear of recursion limits."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(num_atoms)]
    for b in range(len(bond_i)):
        adj[bond_i[b]].append((bond_j[b], b))
        adj[bond_j[b]].append((bond_i[b], b))
    disc = np.full(num_atoms, -1, dtype=np.int64)
    low = np.zeros(num_atoms, dtype=np.int64)
    ring_bond = np.zeros(len(bond_i), dtype=bool)
    timer = 0
    for root in range(num_atoms):
        if disc[root] != -1:
            continue
        stack = [(root, -1, 0)]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            u, pbond, ptr = stack.pop()
            if ptr < len(adj[u]):
                stack.append((u, pbond, ptr + 1))
                v, b = adj[u][ptr]
                if b == pbond:
                    continue
                if disc[v] == -1:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, b, 0))
                else:
                    low[u] = min(low[u], disc[v])
                    ring_bond[b] = True  # back edge, always on a cycle
            elif pbond != -1:
                # u finished; propagate low to parent
                p = bond_i[pbond] if bond_j[pbond] == u else bond_j[pbond]
                low[p] = min(low[p], low[u])
                if low[u] <= disc[p]:
                    ring_bond[pbond] = True
    ring_atom = np.zeros(num_atoms, dtype=bool)
    for b in range(len(bond_i)):
        if ring_bond[b]:
            ring_atom[bond_i[b]] = True
            ring_atom[bond_j[b]] = True
    return ring_atom, ring_bond


def make_molecule(elements, charges, bond_i, bond_j, bond_order,
                  coords=None, target=None) -> Molecule:
    elements = np.asarray(elements, dtype=np.int8)
    charges = np.asarray(charges, dtype=np.int8)
    bond_i = np.asarray(bond_i, dtype=np.int32)
    bond_j = np.asarray(bond_j, dtype=np.int32)
    bond_order = np.asarray(bond_order, dtype=np.int8)
    a = len(elements)
    if bond_i.size and (min(bond_i.min(), bond_j.min()) < 0 or max(bond_i.max(), bond_j.max()) >= a):
        raise InputError("bond endpoint outside atom range")
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (a, 3):
            raise InputError(f"coords must be [{a}, 3], got {coords.shape}")
        if not np.isfinite(coords).all():
            raise InputError("conformer coordinates must be finite")
    ring_atom, ring_bond = _find_ring_memberships(a, bond_i, bond_j)
    return Molecule(elements=elements, charges=charges, bond_i=bond_i, bond_j=bond_j,
                    bond_order=bond_order, ring_atom=ring_atom, ring_bond=ring_bond,
                    coords=coords, target=target)


# ---------------------------------------------------------------------------
# SMILES subset parser

_BRACKET_RE = re.compile(r"(Br|Cl|[BCNOPSFI])(H\d*)?([+-]\d+|[+-]+)?")


def _parse_bracket(content: str, offset: int) -> tuple[int, int]:
    m = _BRACKET_RE.fullmatch(content)
    if not m:
        raise ParseError(f"unsupported bracket atom [{content}]", offset)
    symbol, _hydrogens, charge_s = m.group(1), m.group(2), m.group(3)
    charge = 0
    if charge_s:
        if charge_s in ("+", "-"):
            charge = 1 if charge_s == "+" else -1
        elif charge_s[1:].isdigit():
            charge = int(charge_s[1:]) * (1 if charge_s[0] == "+" else -1)
        elif set(charge_s) == {"+"}:
            charge = len(charge_s)
        elif set(charge_s) == {"-"}:
            charge = -len(charge_s)
        else:
            raise ParseError(f"mixed charge signs in [{content}]", offset)
    return ELEMENT_CODE[symbol], charge


def parse_smiles_subset(text: str) -> Molecule:
    """Parse one molecule from the documented SMILES subset."""
    if not text:
        raise ParseError("empty SMILES", 0)
    elements: list[int] = []
    charges: list[int] = []
    bonds: dict[tuple[int, int], int] = {}
    ring_open: dict[int, tuple[int, int | None, int]] = {}
    branch_stack: list[int] = []
    prev = -1
    pending: int | None = None

    def add_atom(code: int, charge: int, pos: int) -> None:
        nonlocal prev, pending
        idx = len(elements)
        elements.append(code)
        charges.append(charge)
        if prev >= 0:
            add_bond(prev, idx, pending if pending is not None else 0, pos)
        prev = idx
        pending = None

    def add_bond(a: int, b: int, order: int, pos: int) -> None:
        if a == b:
            raise ParseError("bond joins an atom to itself", pos)
        key = (min(a, b), max(a, b))
        if key in bonds:
            raise ParseError(f"duplicate bond between atoms {a} and {b}", pos)
        bonds[key] = order

    def close_ring(digit: int, pos: int) -> None:
        nonlocal pending
        if prev < 0:
            raise ParseError("ring closure before any atom", pos)
        if digit in ring_open:
            atom, order0, _ = ring_open.pop(digit)
            if pending is not None and order0 is not None and pending != order0:
                raise ParseError(f"ring closure {digit} bond order mismatch", pos)
            order = pending if pending is not None else (order0 if order0 is not None else 0)
            add_bond(atom, prev, order, pos)
        else:
            ring_open[digit] = (prev, pending, pos)
        pending = None

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in "-=#":
            if pending is not None:
                raise ParseError("two bond symbols in a row", i)
            pending = BOND_ORDER_OF_SYMBOL[ch]
            i += 1
        elif ch == "(":
            if prev < 0:
                raise ParseError("branch before any atom", i)
            if pending is not None:
                raise ParseError("bond symbol before branch open", i)
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise ParseError("unmatched ')'", i)
            if pending is not None:
                raise ParseError("dangling bond before ')'", i)
            prev = branch_stack.pop()
            i += 1
        elif ch.isdigit():
            close_ring(int(ch), i)
            i += 1
        elif ch == "%":
            seg = text[i + 1 : i + 3]
            if len(seg) != 2 or not seg.isdigit():
                raise ParseError("'%' must be followed by two digits", i)
            close_ring(int(seg), i)
            i += 3
        elif ch == "[":
            end = text.find("]", i)
            if end < 0:
                raise ParseError("unterminated bracket atom", i)
            code, charge = _parse_bracket(text[i + 1 : end], i)
            add_atom(code, charge, i)
            i = end + 1
        elif text[i : i + 2] in ("Cl", "Br"):
            add_atom(ELEMENT_CODE[text[i : i + 2]], 0, i)
            i += 2
        elif ch in "BCNOPSFI":
            add_atom(ELEMENT_CODE[ch], 0, i)
            i += 1
        elif ch in "bcnops":
            raise ParseError("aromatic atoms are outside the subset; kekulize the input", i)
        elif ch == ".":
            raise ParseError("disconnected fragments are outside the subset", i)
        else:
            raise ParseError(f"unknown token {ch!r}", i)

    if pending is not None:
        raise ParseError("trailing bond symbol", n - 1)
    if branch_stack:
        raise ParseError("unmatched '('", n - 1)
    if ring_open:
        digit, (_, _, pos) = next(iter(ring_open.items()))
        raise ParseError(f"dangling ring closure {digit}", pos)
    if not elements:
        raise ParseError("empty SMILES", 0)

    keys = sorted(bonds)
    return make_molecule(
        elements, charges,
        [k[0] for k in keys], [k[1] for k in keys], [bonds[k] for k in keys],
    )


# ---------------------------------------------------------------------------
# subset writer (DFS serialisation; ring bonds become closures)

def _atom_token(mol: Molecule, idx: int) -> str:
    sym = ELEMENTS[mol.elements[idx]]
    charge = int(mol.charges[idx])
    if charge == 0:
        return sym
    sign = "+" if charge > 0 else "-"
    mag = abs(charge)
    return f"[{sym}{sign}{mag if mag > 1 else ''}]"


def _digit_token(number: int) -> str:
    if number < 10:
        return str(number)
    if number < 100:
        return f"%{number:02d}"
    raise InputError("more than 99 simultaneous ring closures")


def write_smiles_with_order(mol: Molecule) -> tuple[str, list[int]]:
    """Serialise a connected molecule; returns (smiles, emission order).

    ``order[k]`` is the original atom index written k-th, so parsing the
    string yields the same graph relabelled by ``order``.
    """
    a = mol.num_atoms
    adj: list[list[tuple[int, int]]] = [[] for _ in range(a)]
    for b in range(mol.num_bonds):
        adj[mol.bond_i[b]].append((int(mol.bond_j[b]), b))
        adj[mol.bond_j[b]].append((int(mol.bond_i[b]), b))
    for lst in adj:
        lst.sort()

    # classify tree vs ring-closure bonds with a DFS from atom 0
    tree_children: list[list[tuple[int, int]]] = [[] for _ in range(a)]
    closure_bonds: list[int] = []
    visited = np.zeros(a, dtype=bool)
    visited[0] = True
    seen_bond = np.zeros(mol.num_bonds, dtype=bool)
    stack = [0]
    reach = 1
    while stack:
        u = stack.pop()
        for v, b in adj[u]:
            if seen_bond[b]:
                continue
            seen_bond[b] = True
            if visited[v]:
                closure_bonds.append(b)
            else:
                visited[v] = True
                reach += 1
                tree_children[u].append((v, b))
                stack.append(v)
    if reach != a:
        raise InputError("write_smiles requires a connected molecule")

    closures_at: list[list[int]] = [[] for _ in range(a)]
    for b in closure_bonds:
        closures_at[mol.bond_i[b]].append(b)
        closures_at[mol.bond_j[b]].append(b)

    closure_number: dict[int, int] = {}
    next_number = 1
    order: list[int] = []
    pieces: list[str] = []

    def emit(u: int, via_bond: int) -> None:
        nonlocal next_number
        if via_bond >= 0:
            pieces.append(BOND_SYMBOL[mol.bond_order[via_bond]])
        pieces.append(_atom_token(mol, u))
        order.append(u)
        for b in closures_at[u]:
            if b not in closure_number:
                closure_number[b] = next_number
                next_number += 1
            pieces.append(BOND_SYMBOL[mol.bond_order[b]] + _digit_token(closure_number[b]))
        kids = tree_children[u]
        for k, (v, b) in enumerate(kids):
            if k < len(kids) - 1:
                pieces.append("(")
                emit(v, b)
                pieces.append(")")
            else:
                emit(v, b)

    emit(0, -1)
    return "".join(pieces), order


def write_smiles(mol: Molecule) -> str:
    return write_smiles_with_order(mol)[0]


# ---------------------------------------------------------------------------
# featurization

@dataclass(frozen=True)
class MolFeatures:
    node_x: np.ndarray  # f32 [A, 13]
    edge_x: np.ndarray  # f32 [2B, 4] or [2B, 8] with conformer columns
    edge_src: np.ndarray  # int64 [2B]
    edge_dst: np.ndarray  # int64 [2B]


NODE_FEATURE_DIM = len(ELEMENTS) + 3  # one-hot + charge + degree + ring flag
EDGE_FEATURE_DIM_PLAIN = NUM_BOND_ORDERS + 1
EDGE_FEATURE_DIM_CONF = EDGE_FEATURE_DIM_PLAIN + 4


def mol_features(mol: Molecule) -> MolFeatures:
    """Node/edge input matrices; each bond yields two directed rows.

    With a conformer, edge rows gain the displacement (destination minus
    source) and its norm; the two directions mirror the displacement.
    """
    a, nb = mol.num_atoms, mol.num_bonds
    node = np.zeros((a, NODE_FEATURE_DIM), dtype=np.float32)
    node[np.arange(a), mol.elements] = 1.0
    node[:, len(ELEMENTS)] = mol.charges
    deg = np.zeros(a, dtype=np.float32)
    np.add.at(deg, mol.bond_i, 1.0)
    np.add.at(deg, mol.bond_j, 1.0)
    node[:, len(ELEMENTS) + 1] = deg
    node[:, len(ELEMENTS) + 2] = mol.ring_atom

    width = EDGE_FEATURE_DIM_CONF if mol.coords is not None else EDGE_FEATURE_DIM_PLAIN
    edge = np.zeros((2 * nb, width), dtype=np.float32)
    src = np.concatenate([mol.bond_i, mol.bond_j]).astype(np.int64)
    dst = np.concatenate([mol.bond_j, mol.bond_i]).astype(np.int64)
    if nb:
        rows = np.arange(2 * nb)
        orders = np.concatenate([mol.bond_order, mol.bond_order])
        edge[rows, orders] = 1.0
        edge[:, NUM_BOND_ORDERS] = np.concatenate([mol.ring_bond, mol.ring_bond])
        if mol.coords is not None:
            disp = (mol.coords[dst] - mol.coords[src]).astype(np.float32)
            edge[:, NUM_BOND_ORDERS + 1 : NUM_BOND_ORDERS + 4] = disp
            edge[:, NUM_BOND_ORDERS + 4] = np.linalg.norm(disp, axis=1)
    return MolFeatures(node_x=node, edge_x=edge, edge_src=src, edge_dst=dst)


# ---------------------------------------------------------------------------
# synthetic dataset

TARGET_COEFFS = {"ring": 0.9, "hetero": 0.45, "atoms": -0.12, "distance": 1.8,
                 "gain": 0.45, "scale": 20.0, "ref_length": 1.5}


def synthetic_target(mol: Molecule) -> float:
    """The generator's published target formula.

    raw = 0.9*rings + 0.45*heteroatoms - 0.12*atoms + 1.8*(dbar - 1.5)
    target = 20 * sigmoid(0.45 * raw)

    with rings the cyclomatic count B - A + 1, heteroatoms the non-carbon
    count, and dbar the mean bonded distance (1.5 when no conformer).
    """
    c = TARGET_COEFFS
    rings = mol.num_bonds - mol.num_atoms + 1
    hetero = int((mol.elements != CARBON).sum())
    if mol.coords is not None and mol.num_bonds:
        lengths = np.linalg.norm(mol.coords[mol.bond_j] - mol.coords[mol.bond_i], axis=1)
        dbar = float(lengths.mean())
    else:
        dbar = c["ref_length"]
    raw = (c["ring"] * rings + c["hetero"] * hetero + c["atoms"] * mol.num_atoms
           + c["distance"] * (dbar - c["ref_length"]))
    return c["scale"] / (1.0 + math.exp(-c["gain"] * raw))


_ELEMENT_WEIGHTS = np.array([0.02, 0.55, 0.12, 0.12, 0.02, 0.04, 0.05, 0.04, 0.02, 0.02])


def _synth_one(rng: np.random.Generator, size_range: tuple[int, int],
               with_conformer: bool) -> Molecule:
    lo, hi = size_range
    a = int(rng.integers(lo, hi + 1))
    parents = np.zeros(a, dtype=np.int64)
    deg = np.zeros(a, dtype=np.int64)
    for i in range(1, a):
        candidates = np.flatnonzero(deg[:i] < 4)
        parents[i] = candidates[rng.integers(0, len(candidates))]
        deg[parents[i]] += 1
        deg[i] += 1

    elements = np.empty(a, dtype=np.int8)
    val = np.asarray(VALENCE)
    for i in range(a):
        ok = val >= deg[i]
        w = _ELEMENT_WEIGHTS * ok
        elements[i] = rng.choice(len(ELEMENTS), p=w / w.sum())
    cap = val[elements] - deg

    bond_i = list(parents[1:].astype(int))
    bond_j = list(range(1, a))
    orders = []
    for k in range(a - 1):
        u, v = bond_i[k], bond_j[k]
        x = rng.random()
        if x < 0.08 and cap[u] >= 2 and cap[v] >= 2:
            orders.append(2)
            cap[u] -= 2
            cap[v] -= 2
        elif x < 0.33 and cap[u] >= 1 and cap[v] >= 1:
            orders.append(1)
            cap[u] -= 1
            cap[v] -= 1
        else:
            orders.append(0)

    existing = {(min(u, v), max(u, v)) for u, v in zip(bond_i, bond_j)}
    for _ in range(rng.poisson(0.8)):
        for _attempt in range(5):
            u, v = int(rng.integers(0, a)), int(rng.integers(0, a))
            key = (min(u, v), max(u, v))
            if u != v and key not in existing and cap[u] >= 1 and cap[v] >= 1:
                existing.add(key)
                bond_i.append(key[0])
                bond_j.append(key[1])
                orders.append(0)
                cap[u] -= 1
                cap[v] -= 1
                break

    coords = None
    if with_conformer:
        coords = np.zeros((a, 3))
        for i in range(1, a):
            direction = rng.normal(size=3)
            direction /= max(np.linalg.norm(direction), 1e-9)
            length = 1.2 + 0.6 * rng.random()
            coords[i] = coords[parents[i]] + length * direction

    mol = make_molecule(elements, np.zeros(a, dtype=np.int8),
                        bond_i, bond_j, orders, coords=coords)
    return mol.replace(target=synthetic_target(mol))


def synth_mol_dataset(count: int, size_range: tuple[int, int] = (4, 14),
                      conformer_fraction: float = 1.0, seed: int = 0) -> list[Molecule]:
    """Random connected molecules inside the SMILES subset.

    A ``1 - conformer_fraction`` share of molecules carries no
    coordinates, standing in for conformer-generation failures.
    """
    if count < 1:
        raise InputError("dataset size must be >= 1")
    mols = []
    for idx in range(count):
        rng = substream(seed, "synth-mol", idx)
        with_conf = bool(rng.random() < conformer_fraction)
        mols.append(_synth_one(rng, size_range, with_conf))
    return mols


# ---------------------------------------------------------------------------
# dataset files: id TAB smiles TAB target|NA TAB coords|NA

def save_dataset(path: str | Path, mols: list[Molecule]) -> None:
    lines = []
    for idx, mol in enumerate(mols):
        smiles, order = write_smiles_with_order(mol)
        target_s = "NA" if mol.target is None else f"{mol.target:.6f}"
        if mol.coords is None:
            coords_s = "NA"
        else:
            coords_s = ";".join(
                f"{mol.coords[o, 0]:.6f},{mol.coords[o, 1]:.6f},{mol.coords[o, 2]:.6f}"
                for o in order
            )
        lines.append(f"{idx}\t{smiles}\t{target_s}\t{coords_s}\n")
    pfgm.atomic_write_text(path, "".join(lines))


def load_dataset(path: str | Path) -> list[Molecule]:
    mols = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"dataset line {ln + 1}: expected 4 fields, got {len(parts)}")
        _id, smiles, target_s, coords_s = parts
        mol = parse_smiles_subset(smiles)
        target = None if target_s == "NA" else float(target_s)
        coords = None
        if coords_s != "NA":
            triples = [tuple(float(x) for x in part.split(",")) for part in coords_s.split(";")]
            if len(triples) != mol.num_atoms:
                raise ParseError(f"dataset line {ln + 1}: {len(triples)} coordinates for {mol.num_atoms} atoms")
            coords = np.asarray(triples, dtype=np.float64)
        mols.append(make_molecule(mol.elements, mol.charges, mol.bond_i, mol.bond_j,
                                  mol.bond_order, coords=coords, target=target))
    return mols
