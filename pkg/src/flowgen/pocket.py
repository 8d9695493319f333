"""Protein pocket ingestion and rotation/translation-invariant encoding.

Pockets arrive as JSON files carrying residue backbones plus pharmacophore
points. The KNN residue graph exposes only invariant scalars (one-hot types,
dihedral sin/cos, unit-vector dot products, distances), so the encoder is
invariant to rigid transforms by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensornn as tn

RESIDUE_TYPES = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
PHARMACOPHORE_TYPES = ("aromatic", "donor", "acceptor", "hydrophobic", "ring")

RBF_BINS = 16
RBF_MAX_DISTANCE = 20.0
OFFSET_CLIP = 32
NODE_FEATURE_DIM = len(RESIDUE_TYPES) + 4 + 6
EDGE_FEATURE_DIM = RBF_BINS + (2 * OFFSET_CLIP + 1) + 4


class PocketSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Residue:
    type: str
    n: tuple
    ca: tuple
    c: tuple
    index: int

    def __post_init__(self):
        if self.type not in RESIDUE_TYPES:
            raise PocketSchemaError(f"unknown residue type {self.type!r}")
        for name, coord in (("N", self.n), ("CA", self.ca), ("C", self.c)):
            if len(coord) != 3 or not all(math.isfinite(x) for x in coord):
                raise PocketSchemaError(f"residue {self.index}: bad {name} coordinate")


@dataclass(frozen=True)
class PharmacophorePoint:
    type: str
    center: tuple

    def __post_init__(self):
        if self.type not in PHARMACOPHORE_TYPES:
            raise PocketSchemaError(f"unknown pharmacophore type {self.type!r}")
        if len(self.center) != 3 or not all(math.isfinite(x) for x in self.center):
            raise PocketSchemaError("pharmacophore center must be a finite 3-vector")


@dataclass(frozen=True)
class PocketStructure:
    id: str
    residues: tuple
    pharmacophore_points: tuple = ()

    def __post_init__(self):
        if len(self.residues) < 2:
            raise PocketSchemaError("pocket needs at least 2 residues")
        indices = [r.index for r in self.residues]
        if len(set(indices)) != len(indices):
            raise PocketSchemaError("residue chain positions must be unique")


def parse_pocket(path: str | Path) -> PocketStructure:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PocketSchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return pocket_from_json(payload, source=str(path))


def pocket_from_json(payload: dict, source: str = "<memory>") -> PocketStructure:
    residues = []
    for pos, rec in enumerate(payload.get("residues", ())):
        try:
            residues.append(Residue(
                type=rec["type"],
                n=tuple(float(x) for x in rec["N"]),
                ca=tuple(float(x) for x in rec["CA"]),
                c=tuple(float(x) for x in rec["C"]),
                index=int(rec["index"]),
            ))
        except KeyError as exc:
            raise PocketSchemaError(
                f"{source}: residue #{pos} missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise PocketSchemaError(f"{source}: residue #{pos}: {exc}") from exc
    points = []
    for pos, rec in enumerate(payload.get("pharmacophores", ())):
        try:
            points.append(PharmacophorePoint(
                type=rec["type"], center=tuple(float(x) for x in rec["center"])))
        except KeyError as exc:
            raise PocketSchemaError(
                f"{source}: pharmacophore #{pos} missing field {exc.args[0]!r}") from exc
    try:
        return PocketStructure(id=str(payload["id"]), residues=tuple(residues),
                               pharmacophore_points=tuple(points))
    except KeyError as exc:
        raise PocketSchemaError(f"{source}: missing field {exc.args[0]!r}") from exc


def pocket_to_json(pocket: PocketStructure) -> dict:
    return {
        "id": pocket.id,
        "residues": [
            {"type": r.type, "N": list(r.n), "CA": list(r.ca), "C": list(r.c),
             "index": r.index}
            for r in pocket.residues
        ],
        "pharmacophores": [
            {"type": p.type, "center": list(p.center)}
            for p in pocket.pharmacophore_points
        ],
    }


def save_pocket(pocket: PocketStructure, path: str | Path):
    Path(path).write_text(json.dumps(pocket_to_json(pocket), indent=1) + "\n")


# -- geometry -------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-9:
        return np.zeros(3)
    return v / norm


def _dihedral_sincos(p0, p1, p2, p3) -> tuple[float, float]:
    """(sin, cos) of the dihedral angle; (0, 1) for degenerate geometry."""
    b0 = p1 - p0
    b1 = p2 - p1
    b2 = p3 - p2
    n1 = np.cross(b0, b1)
    n2 = np.cross(b1, b2)
    b1n = np.linalg.norm(b1)
    if np.linalg.norm(n1) < 1e-9 or np.linalg.norm(n2) < 1e-9 or b1n < 1e-9:
        return 0.0, 1.0
    x = float(np.dot(n1, n2))
    y = float(np.dot(np.cross(n1, n2), b1 / b1n))
    norm = math.hypot(x, y)
    if norm < 1e-12:
        return 0.0, 1.0
    return y / norm, x / norm


def rbf_expand(distance: float, bins: int = RBF_BINS,
               max_distance: float = RBF_MAX_DISTANCE) -> np.ndarray:
    centers = np.linspace(0.0, max_distance, bins)
    width = max_distance / (bins - 1)
    return np.exp(-(((distance - centers) / width) ** 2))


@dataclass
class KnnResidueGraph:
    n_nodes: int
    node_features: np.ndarray  # (n, NODE_FEATURE_DIM)
    edge_src: np.ndarray       # (E,)
    edge_dst: np.ndarray       # (E,)
    edge_features: np.ndarray  # (E, EDGE_FEATURE_DIM)


def build_knn_graph(pocket: PocketStructure, k: int = 30) -> KnnResidueGraph:
    """Directed KNN graph over residues; ties broken by lower chain index."""
    residues = sorted(pocket.residues, key=lambda r: r.index)
    n = len(residues)
    if n < 2:
        raise PocketSchemaError("KNN graph needs at least 2 residues")
    ca = np.array([r.ca for r in residues])
    n_xyz = np.array([r.n for r in residues])
    c_xyz = np.array([r.c for r in residues])
    by_index = {r.index: pos for pos, r in enumerate(residues)}

    frames = []
    node_feats = np.zeros((n, NODE_FEATURE_DIM), dtype=np.float32)
    for i, res in enumerate(residues):
        onehot = np.zeros(len(RESIDUE_TYPES))
        onehot[RESIDUE_TYPES.index(res.type)] = 1.0
        prev = by_index.get(res.index - 1)
        nxt = by_index.get(res.index + 1)
        if prev is not None:
            phi = _dihedral_sincos(c_xyz[prev], n_xyz[i], ca[i], c_xyz[i])
        else:
            phi = (0.0, 1.0)
        if nxt is not None:
            psi = _dihedral_sincos(n_xyz[i], ca[i], c_xyz[i], n_xyz[nxt])
        else:
            psi = (0.0, 1.0)
        u_n = _unit(n_xyz[i] - ca[i])
        u_c = _unit(c_xyz[i] - ca[i])
        u_fwd = _unit(ca[nxt] - ca[i]) if nxt is not None else np.zeros(3)
        u_bwd = _unit(ca[prev] - ca[i]) if prev is not None else np.zeros(3)
        dots = [np.dot(u_fwd, u_bwd), np.dot(u_fwd, u_n), np.dot(u_fwd, u_c),
                np.dot(u_bwd, u_n), np.dot(u_bwd, u_c), np.dot(u_n, u_c)]
        node_feats[i] = np.concatenate([onehot, phi, psi, dots])
        frames.append((u_n, u_c, u_fwd, u_bwd))

    dist = np.linalg.norm(ca[:, None, :] - ca[None, :, :], axis=-1)
    src, dst, feats = [], [], []
    k_eff = min(k, n - 1)
    for i in range(n):
        order = sorted((j for j in range(n) if j != i),
                       key=lambda j: (dist[i, j], residues[j].index))
        for j in order[:k_eff]:
            offset = residues[j].index - residues[i].index
            offset = max(-OFFSET_CLIP, min(OFFSET_CLIP, offset))
            offset_onehot = np.zeros(2 * OFFSET_CLIP + 1)
            offset_onehot[offset + OFFSET_CLIP] = 1.0
            d_ij = _unit(ca[j] - ca[i])
            u_n, u_c, u_fwd, u_bwd = frames[i]
            direction = [np.dot(d_ij, u_n), np.dot(d_ij, u_c),
                         np.dot(d_ij, u_fwd), np.dot(d_ij, u_bwd)]
            feats.append(np.concatenate([rbf_expand(dist[i, j]), offset_onehot,
                                         direction]))
            src.append(i)
            dst.append(j)
    return KnnResidueGraph(
        n_nodes=n,
        node_features=node_feats,
        edge_src=np.array(src, dtype=np.int64),
        edge_dst=np.array(dst, dtype=np.int64),
        edge_features=np.array(feats, dtype=np.float32),
    )


# -- encoder --------------------------------------------------------------------

@dataclass(frozen=True)
class PocketEncoderConfig:
    hidden_dim: int = 128
    rounds: int = 3


@dataclass(frozen=True)
class PocketEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("pocket embedding must be finite")


def init_pocket_encoder(cfg: PocketEncoderConfig, seed: int = 0) -> tn.ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0C]))
    ps = tn.ParamSet()
    d = cfg.hidden_dim
    tn.init_linear(ps, "node_in", NODE_FEATURE_DIM, d, rng)
    tn.init_linear(ps, "edge_in", EDGE_FEATURE_DIM, d, rng)
    for r in range(cfg.rounds):
        tn.init_linear(ps, f"msg{r}.l1", 3 * d, d, rng)
        tn.init_linear(ps, f"msg{r}.l2", d, d, rng)
        tn.init_linear(ps, f"upd{r}.l1", 2 * d, d, rng)
        tn.init_linear(ps, f"upd{r}.l2", d, d, rng)
        tn.init_layernorm(ps, f"ln{r}", d)
    return ps


def encode(graph: KnnResidueGraph, params: tn.ParamSet,
           cfg: PocketEncoderConfig = PocketEncoderConfig()) -> PocketEmbedding:
    """Message passing over invariant scalar features, mean-pooled."""
    with tn.no_grad():
        h = tn.linear(params, "node_in", tn.Tensor(graph.node_features))
        e = tn.linear(params, "edge_in", tn.Tensor(graph.edge_features))
        src = graph.edge_src
        dst = graph.edge_dst
        deg = np.bincount(src, minlength=graph.n_nodes).astype(np.float32)
        inv_deg = (1.0 / np.maximum(deg, 1.0))[:, None]
        for r in range(cfg.rounds):
            h_src = tn.gather(h, (src,))
            h_dst = tn.gather(h, (dst,))
            m = tn.concat([h_src, h_dst, e], axis=-1)
            m = tn.linear(params, f"msg{r}.l2",
                          tn.relu(tn.linear(params, f"msg{r}.l1", m)))
            agg = tn.scatter_nd(m, (src,), (graph.n_nodes, m.shape[-1]))
            agg = tn.mul(agg, inv_deg)
            upd = tn.concat([h, agg], axis=-1)
            upd = tn.linear(params, f"upd{r}.l2",
                            tn.relu(tn.linear(params, f"upd{r}.l1", upd)))
            h = tn.layernorm(params, f"ln{r}", tn.add(h, upd))
        pooled = tn.tmean(h, axis=0)
    return PocketEmbedding(vector=pooled.data.astype(np.float32))


def encode_pocket(pocket: PocketStructure, params: tn.ParamSet,
                  cfg: PocketEncoderConfig = PocketEncoderConfig(),
                  k: int = 30) -> PocketEmbedding:
    return encode(build_knn_graph(pocket, k=k), params, cfg)
