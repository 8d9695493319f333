"""Fragment vocabulary construction from annotated molecule corpora.

Molecules arrive with pre-tagged cleavable bonds; decomposition cuts those
plus single bonds joining a non-ring heavy atom to a ring atom, tags the cut
endpoints as attachment atoms, and canonicalizes the resulting fragments so
occurrence counting is representation-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .fraggraph import Fragment, FragmentVocabulary

BOND_ORDERS = ("single", "double", "triple", "aromatic")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusMolecule:
    """Annotated molecule: atom labels/features/ring flags and typed bonds.

    atoms: tuple of (element, features, ring_member)
    bonds: tuple of (i, j, order, cleavable)
    """

    atoms: tuple
    bonds: tuple

    def __post_init__(self):
        n = len(self.atoms)
        for i, j, order, cleavable in self.bonds:
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise CorpusError(f"bond ({i},{j}) out of range")
            if order not in BOND_ORDERS:
                raise CorpusError(f"unknown bond order {order!r}")
            if cleavable and order != "single":
                raise CorpusError("cleavable bonds must be single bonds")
        if n > 1 and not self._connected():
            raise CorpusError("molecule must be connected")

    def _connected(self) -> bool:
        adj = {v: [] for v in range(len(self.atoms))}
        for i, j, _, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for u in adj[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(self.atoms)


@dataclass(frozen=True)
class DecompositionRules:
    cleave_tagged: bool = True
    cleave_ring_attachments: bool = True
    min_count: int = 1
    min_fraction: float = 0.0

    def __post_init__(self):
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if not 0.0 <= self.min_fraction <= 1.0:
            raise ValueError("min_fraction must be in [0, 1]")


def effective_min_count(rules: DecompositionRules, corpus_size: int) -> int:
    return max(rules.min_count, math.ceil(rules.min_fraction * corpus_size))


# -- atom-graph canonicalization ------------------------------------------------

def _refine(labels: list[str], adj: dict) -> list[str]:
    colors = list(labels)
    for _ in range(len(labels)):
        signatures = []
        for v in range(len(labels)):
            nb = sorted(f"{order}:{colors[u]}" for u, order in adj[v])
            signatures.append(colors[v] + "#" + ",".join(nb))
        ranks = {s: str(r) for r, s in enumerate(sorted(set(signatures)))}
        new_colors = [ranks[s] for s in signatures]
        if new_colors == colors:
            break
        colors = new_colors
    return colors


def _certificate(order: list[int], labels: list[str], bonds) -> str:
    pos = {old: new for new, old in enumerate(order)}
    atom_part = ";".join(labels[v] for v in order)
    edge_list = sorted(
        (min(pos[i], pos[j]), max(pos[i], pos[j]), bond_order)
        for i, j, bond_order in bonds)
    edge_part = ";".join(f"{i}-{j}:{o}" for i, j, o in edge_list)
    return atom_part + "|" + edge_part


def canonical_atom_order(labels: list[str], bonds) -> list[int]:
    """Canonical vertex order of a small labeled graph.

    WL color refinement with individualization backtracking; exact for the
    fragment sizes seen here (tens of atoms).
    """
    n = len(labels)
    adj = {v: [] for v in range(n)}
    for i, j, order in bonds:
        adj[i].append((j, order))
        adj[j].append((i, order))

    best: list[str | None] = [None]
    best_order: list[list[int]] = [[]]

    def search(colors: list[str]):
        colors = _refine(colors, adj)
        groups: dict[str, list[int]] = {}
        for v, c in enumerate(colors):
            groups.setdefault(c, []).append(v)
        ambiguous = sorted((c for c, vs in groups.items() if len(vs) > 1))
        if not ambiguous:
            order = sorted(range(n), key=lambda v: colors[v])
            cert = _certificate(order, labels, bonds)
            if best[0] is None or cert < best[0]:
                best[0] = cert
                best_order[0] = order
            return
        target = groups[ambiguous[0]]
        for v in target:
            branched = list(colors)
            branched[v] = branched[v] + "*"
            search(branched)

    search(list(labels))
    return best_order[0]


def _fragment_labels(atoms, attach_flags) -> list[str]:
    labels = []
    for (element, features), attached in zip(atoms, attach_flags):
        feat = ",".join(sorted(features))
        labels.append(f"{element}|{feat}|{'@' if attached else '.'}")
    return labels


@dataclass(frozen=True)
class DecomposedFragment:
    """One connected component after cutting, in canonical atom order."""

    atoms: tuple  # ((element, features), ...)
    attachment_atoms: tuple
    bonds: tuple  # ((i, j, order), ...)
    certificate: str
    source_atoms: tuple  # original atom index per canonical position

    def to_fragment(self, fid: int) -> Fragment:
        return Fragment(id=fid, atoms=self.atoms,
                        attachment_atoms=self.attachment_atoms,
                        bonds=tuple((i, j) for i, j, _ in self.bonds))


def _cut_bonds(mol: CorpusMolecule, rules: DecompositionRules) -> set:
    cuts = set()
    for idx, (i, j, order, cleavable) in enumerate(mol.bonds):
        if rules.cleave_tagged and cleavable:
            cuts.add(idx)
            continue
        if rules.cleave_ring_attachments and order == "single":
            ring_i = mol.atoms[i][2]
            ring_j = mol.atoms[j][2]
            if ring_i != ring_j:
                non_ring = j if ring_i else i
                if mol.atoms[non_ring][0] != "H":
                    cuts.add(idx)
    return cuts


def decompose_full(mol: CorpusMolecule, rules: DecompositionRules):
    """Cut, split into components, canonicalize each; returns
    (fragments, atom_map, cut_bonds) where atom_map[orig] = (frag_idx, pos)."""
    cuts = _cut_bonds(mol, rules)
    n = len(mol.atoms)
    adj = {v: [] for v in range(n)}
    for idx, (i, j, order, _) in enumerate(mol.bonds):
        if idx not in cuts:
            adj[i].append((j, order))
            adj[j].append((i, order))
    component = [-1] * n
    comp_count = 0
    for start in range(n):
        if component[start] != -1:
            continue
        stack = [start]
        component[start] = comp_count
        while stack:
            v = stack.pop()
            for u, _ in adj[v]:
                if component[u] == -1:
                    component[u] = comp_count
                    stack.append(u)
        comp_count += 1

    attach_flags = [False] * n
    for idx in cuts:
        i, j, _, _ = mol.bonds[idx]
        attach_flags[i] = True
        attach_flags[j] = True

    fragments = []
    atom_map: dict[int, tuple] = {}
    for comp in range(comp_count):
        members = [v for v in range(n) if component[v] == comp]
        local = {v: k for k, v in enumerate(members)}
        atoms = [(mol.atoms[v][0], tuple(sorted(mol.atoms[v][1]))) for v in members]
        flags = [attach_flags[v] for v in members]
        bonds = []
        for idx, (i, j, order, _) in enumerate(mol.bonds):
            if idx not in cuts and component[i] == comp:
                bonds.append((local[i], local[j], order))
        labels = _fragment_labels(atoms, flags)
        order_map = canonical_atom_order(labels, bonds)
        pos = {old: new for new, old in enumerate(order_map)}
        canon_atoms = tuple(atoms[v] for v in order_map)
        canon_bonds = tuple(sorted(
            (min(pos[i], pos[j]), max(pos[i], pos[j]), o) for i, j, o in bonds))
        canon_attach = tuple(sorted(pos[v] for v in range(len(members)) if flags[v]))
        cert = _certificate(order_map, labels, bonds)
        frag = DecomposedFragment(atoms=canon_atoms, attachment_atoms=canon_attach,
                                  bonds=canon_bonds, certificate=cert,
                                  source_atoms=tuple(members[v] for v in order_map))
        for local_old, v in enumerate(members):
            atom_map[v] = (len(fragments), pos[local_old])
        fragments.append(frag)
    cut_list = [mol.bonds[idx] for idx in sorted(cuts)]
    return fragments, atom_map, cut_list


def decompose(mol: CorpusMolecule, rules: DecompositionRules) -> list[Fragment]:
    fragments, _, _ = decompose_full(mol, rules)
    return [df.to_fragment(i) for i, df in enumerate(fragments)]


def build_vocabulary(corpus: list[CorpusMolecule],
                     rules: DecompositionRules) -> FragmentVocabulary:
    """Decompose the corpus, count per-molecule fragment presence, filter, id."""
    if not corpus:
        raise CorpusError("corpus is empty")
    counts: dict[str, int] = {}
    exemplar: dict[str, DecomposedFragment] = {}
    for mol in corpus:
        fragments, _, _ = decompose_full(mol, rules)
        seen = set()
        for df in fragments:
            if df.certificate in seen:
                continue
            seen.add(df.certificate)
            counts[df.certificate] = counts.get(df.certificate, 0) + 1
            exemplar.setdefault(df.certificate, df)
    threshold = effective_min_count(rules, len(corpus))
    kept = [(cert, count) for cert, count in counts.items() if count >= threshold]
    if not kept:
        raise CorpusError(
            f"no fragment occurs in at least {threshold} molecules; vocabulary is empty")
    kept.sort(key=lambda item: (-item[1], item[0]))
    frags = tuple(exemplar[cert].to_fragment(fid) for fid, (cert, _) in enumerate(kept))
    return FragmentVocabulary(frags)


# -- file formats -----------------------------------------------------------------

def corpus_molecule_from_json(record: dict) -> CorpusMolecule:
    atoms = tuple((a["element"], tuple(a.get("features", ())), bool(a.get("ring", False)))
                  for a in record["atoms"])
    bonds = tuple((int(b["a"]), int(b["b"]), b.get("order", "single"),
                   bool(b.get("cleavable", False)))
                  for b in record.get("bonds", ()))
    return CorpusMolecule(atoms=atoms, bonds=bonds)


def load_corpus(path: str | Path) -> list[CorpusMolecule]:
    corpus = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            corpus.append(corpus_molecule_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, CorpusError) as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    if not corpus:
        raise CorpusError(f"{path}: no molecules found")
    return corpus


def save_vocabulary(vocab: FragmentVocabulary, path: str | Path):
    payload = {
        "version_hash": vocab.version_hash,
        "fragments": [
            {
                "atoms": [[el, list(feats)] for el, feats in f.atoms],
                "attachment_atoms": list(f.attachment_atoms),
                "bonds": [list(b) for b in f.bonds],
                "heavy_atom_count": f.heavy_atom_count,
            }
            for f in vocab.fragments
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_vocabulary(path: str | Path) -> FragmentVocabulary:
    payload = json.loads(Path(path).read_text())
    frags = []
    for fid, f in enumerate(payload["fragments"]):
        atoms = tuple((el, tuple(feats)) for el, feats in f["atoms"])
        frags.append(Fragment(id=fid, atoms=atoms,
                              attachment_atoms=tuple(f["attachment_atoms"]),
                              bonds=tuple(tuple(b) for b in f["bonds"]),
                              heavy_atom_count=f["heavy_atom_count"]))
    vocab = FragmentVocabulary(tuple(frags))
    stored = payload.get("version_hash")
    if stored and stored != vocab.version_hash:
        raise CorpusError(f"vocabulary hash mismatch: file says {stored}, "
                          f"content hashes to {vocab.version_hash}")
    return vocab
