"""Docking-score predictor: ligand GIN encoder, pharmacophore embeddings,
pairwise interaction map, and the energy head, trained with SmoothL1/AdamW.

The pocket enters only through its pharmacophore points: per-point type
embeddings attend over RBF-encoded pairwise distances, so the prediction is
invariant to rigid transforms of the pocket and to ligand atom order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensornn as tn
from .fraggraph import (FEATURE_LABELS, FragmentVocabulary, MolGraphState,
                        state_from_json, state_to_json)
from .pocket import PocketStructure, rbf_expand

ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I", "H")
ATOM_FEATURE_DIM = len(ELEMENTS) + 1 + len(FEATURE_LABELS)  # +1 = other bucket


@dataclass(frozen=True)
class LigandAtomGraph:
    """Atom-level expansion of a terminal fragment graph."""

    features: np.ndarray   # (n_atoms, ATOM_FEATURE_DIM) float32
    bond_src: np.ndarray   # directed bonds, both orientations
    bond_dst: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.features)

    @classmethod
    def from_state(cls, state: MolGraphState, vocab: FragmentVocabulary) -> "LigandAtomGraph":
        if not state.terminal:
            raise ValueError("ligand atom graphs are built from terminal states")
        offsets = []
        total = 0
        for fid in state.nodes:
            offsets.append(total)
            total += len(vocab[fid].atoms)
        feats = np.zeros((total, ATOM_FEATURE_DIM), dtype=np.float32)
        for fid, off in zip(state.nodes, offsets):
            for k, (element, features) in enumerate(vocab[fid].atoms):
                row = off + k
                if element in ELEMENTS:
                    feats[row, ELEMENTS.index(element)] = 1.0
                else:
                    feats[row, len(ELEMENTS)] = 1.0
                for feat in features:
                    feats[row, len(ELEMENTS) + 1 + FEATURE_LABELS.index(feat)] += 1.0
        src, dst = [], []

        def add_bond(a, b):
            src.extend((a, b))
            dst.extend((b, a))

        for node, (fid, off) in enumerate(zip(state.nodes, offsets)):
            for i, j in vocab[fid].bonds:
                add_bond(off + i, off + j)
        for i, j, ai, aj in state.links:
            if ai is None or aj is None:
                raise ValueError("terminal state has unset attachments")
            add_bond(offsets[i] + ai, offsets[j] + aj)
        return cls(features=feats,
                   bond_src=np.array(src, dtype=np.int64),
                   bond_dst=np.array(dst, dtype=np.int64))


@dataclass(frozen=True)
class ProxyConfig:
    hidden_dim: int = 128
    gin_rounds: int = 3
    rbf_bins: int = 16
    rbf_max: float = 20.0


def init_proxy_params(cfg: ProxyConfig, seed: int = 0) -> tn.ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0C]))
    ps = tn.ParamSet()
    d = cfg.hidden_dim
    tn.init_embedding(ps, "ph_type_emb", len(FEATURE_LABELS), d, rng)
    tn.init_linear(ps, "ph_q", d, d, rng)
    tn.init_linear(ps, "ph_k", d, d, rng)
    tn.init_linear(ps, "ph_v", d, d, rng)
    tn.init_linear(ps, "ph_o", d, d, rng)
    tn.init_linear(ps, "ph_rbf", cfg.rbf_bins, 1, rng)
    tn.init_linear(ps, "ph_pool", d, d, rng)  # z^P projection
    tn.init_linear(ps, "atom_in", ATOM_FEATURE_DIM, d, rng)
    for r in range(cfg.gin_rounds):
        tn.init_linear(ps, f"gin{r}.l1", d, d, rng)
        tn.init_linear(ps, f"gin{r}.l2", d, d, rng)
    tn.init_linear(ps, "phi_i.l1", d, d // 2, rng)
    tn.init_linear(ps, "phi_i.l2", d // 2, 1, rng)
    tn.init_linear(ps, "phi_z.l1", 3 * d, d, rng)
    tn.init_linear(ps, "phi_z.l2", d, 1, rng)
    return ps


def zero_proxy_params(cfg: ProxyConfig) -> tn.ParamSet:
    ps = init_proxy_params(cfg, 0)
    for _, t in ps.items():
        t.data[...] = 0.0
    return ps


def encode_ligand_atoms(graph: LigandAtomGraph, params: tn.ParamSet,
                        cfg: ProxyConfig = ProxyConfig()):
    """GIN-style rounds with sum aggregation; returns ({h_j}, z_L)."""
    h = tn.linear(params, "atom_in", tn.Tensor(graph.features))
    for r in range(cfg.gin_rounds):
        if len(graph.bond_src):
            msgs = tn.gather(h, (graph.bond_src,))
            agg = tn.scatter_nd(msgs, (graph.bond_dst,), h.shape)
            mixed = tn.add(h, agg)
        else:
            mixed = h
        h = tn.linear(params, f"gin{r}.l2",
                      tn.relu(tn.linear(params, f"gin{r}.l1", mixed)))
    z = tn.tmean(h, axis=0)
    return h, z


def embed_pharmacophores(points, params: tn.ParamSet,
                         cfg: ProxyConfig = ProxyConfig()):
    """Type embeddings + attention over RBF pairwise distances.

    Returns ({h_i}, z_pp, z_P) where z_P is a second learned pooled
    projection standing in for a pretrained pocket embedding.
    """
    if not points:
        raise ValueError("at least one pharmacophore point is required")
    n = len(points)
    type_idx = np.array([FEATURE_LABELS.index(p.type) for p in points], dtype=np.int64)
    centers = np.array([p.center for p in points], dtype=np.float64)
    dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    rbf = np.stack([[rbf_expand(dists[i, j], cfg.rbf_bins, cfg.rbf_max)
                     for j in range(n)] for i in range(n)]).astype(np.float32)
    t = tn.gather(params["ph_type_emb"], (type_idx,))     # (P, d)
    q = tn.linear(params, "ph_q", t)
    k = tn.linear(params, "ph_k", t)
    v = tn.linear(params, "ph_v", t)
    scale = 1.0 / math.sqrt(cfg.hidden_dim)
    bias = tn.reshape(tn.linear(params, "ph_rbf", tn.Tensor(rbf)), (n, n))
    scores = tn.add(tn.mul(tn.matmul(q, tn.swapaxes(k, 0, 1)), scale), bias)
    attn = tn.softmax(scores)
    h = tn.add(t, tn.linear(params, "ph_o", tn.matmul(attn, v)))
    z_pp = tn.tmean(h, axis=0)
    z_p = tn.linear(params, "ph_pool", tn.reshape(z_pp, (1, -1)))
    return h, z_pp, tn.reshape(z_p, (-1,))


def interaction_map(ph_embeddings: tn.Tensor, atom_embeddings: tn.Tensor) -> tn.Tensor:
    """I[i, j, :] = ph_i * atom_j elementwise; shape (points, atoms, width)."""
    if ph_embeddings.shape[-1] != atom_embeddings.shape[-1]:
        raise tn.ShapeError("interaction_map", ph_embeddings.shape,
                            atom_embeddings.shape)
    p, d = ph_embeddings.shape
    a = atom_embeddings.shape[0]
    left = tn.reshape(ph_embeddings, (p, 1, d))
    right = tn.reshape(atom_embeddings, (1, a, d))
    return tn.mul(left, right)


def predict(pocket: PocketStructure, ligand: LigandAtomGraph,
            params: tn.ParamSet, cfg: ProxyConfig = ProxyConfig()) -> tn.Tensor:
    """Predicted docking energy in kcal/mol (scalar tensor)."""
    if not pocket.pharmacophore_points:
        raise ValueError(f"pocket {pocket.id} has no pharmacophore points")
    h_atoms, z_l = encode_ligand_atoms(ligand, params, cfg)
    h_ph, z_pp, z_p = embed_pharmacophores(pocket.pharmacophore_points, params, cfg)
    imap = interaction_map(h_ph, h_atoms)
    pair_scores = tn.linear(params, "phi_i.l2",
                            tn.relu(tn.linear(params, "phi_i.l1", imap)))
    pooled_pairs = tn.tsum(pair_scores)
    z = tn.concat([z_p, z_pp, z_l], axis=0)
    global_term = tn.linear(params, "phi_z.l2",
                            tn.relu(tn.linear(params, "phi_z.l1",
                                              tn.reshape(z, (1, -1)))))
    return tn.add(tn.reshape(global_term, ()), pooled_pairs)


def smooth_l1(pred: tn.Tensor, target: float) -> tn.Tensor:
    """0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, d = pred - target."""
    d = tn.sub(pred, float(target))
    inner = np.abs(d.data) < 1.0
    quad = tn.mul(tn.mul(d, d), 0.5 * inner.astype(d.data.dtype))
    sign = np.sign(d.data) * (~inner)
    lin = tn.sub(tn.mul(d, sign.astype(d.data.dtype)),
                 0.5 * (~inner).astype(d.data.dtype))
    return tn.add(quad, lin)


# -- training --------------------------------------------------------------------

@dataclass(frozen=True)
class DockingRecord:
    pocket_id: str
    molecule: dict
    ds: float

    def __post_init__(self):
        if not math.isfinite(self.ds):
            raise ValueError("docking score must be finite")


def load_docking_records(path: str | Path) -> list[DockingRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            records.append(DockingRecord(pocket_id=str(rec["pocket_id"]),
                                         molecule=rec["molecule"],
                                         ds=float(rec["ds"])))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def save_docking_records(records, path: str | Path):
    lines = [json.dumps({"pocket_id": r.pocket_id, "molecule": r.molecule,
                         "ds": r.ds}) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ProxyTrainConfig:
    iterations: int = 2000
    pockets_per_iter: int = 32
    ligands_per_pocket: int = 128
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 20_000
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    val_fraction: float = 0.15
    eval_every: int = 100
    seed: int = 0


def pocket_disjoint_split(records: list[DockingRecord], val_fraction: float,
                          rng: np.random.Generator):
    """Index split keeping every pocket entirely in one side."""
    pocket_ids = sorted({r.pocket_id for r in records})
    if len(pocket_ids) < 2:
        raise ValueError("pocket-disjoint split needs at least 2 pockets")
    shuffled = list(pocket_ids)
    rng.shuffle(shuffled)
    n_val = max(1, round(val_fraction * len(pocket_ids)))
    val_ids = set(shuffled[:n_val])
    train = [i for i, r in enumerate(records) if r.pocket_id not in val_ids]
    val = [i for i, r in enumerate(records) if r.pocket_id in val_ids]
    if not train or not val:
        raise ValueError("empty train or validation split")
    assert not ({records[i].pocket_id for i in train}
                & {records[i].pocket_id for i in val})
    return train, val


@dataclass
class ProxyTrainResult:
    params: tn.ParamSet
    best_val_loss: float
    history: list = field(default_factory=list)


def train_proxy(records: list[DockingRecord], pockets: dict,
                vocab: FragmentVocabulary, hyper: ProxyTrainConfig,
                cfg: ProxyConfig = ProxyConfig()) -> ProxyTrainResult:
    """Minibatch AdamW on SmoothL1; keeps the best-validation checkpoint."""
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0x7A]))
    train_idx, val_idx = pocket_disjoint_split(records, hyper.val_fraction, rng)
    graphs = [LigandAtomGraph.from_state(state_from_json(r.molecule), vocab)
              for r in records]
    by_pocket: dict[str, list[int]] = {}
    for i in train_idx:
        by_pocket.setdefault(records[i].pocket_id, []).append(i)
    train_pockets = sorted(by_pocket)

    params = init_proxy_params(cfg, seed=hyper.seed)
    opt = tn.make_optimizer("adamw", params, lr=hyper.lr, beta1=hyper.beta1,
                            beta2=hyper.beta2, weight_decay=hyper.weight_decay)

    def eval_loss(indices) -> float:
        total = 0.0
        with tn.no_grad():
            for i in indices:
                pred = predict(pockets[records[i].pocket_id], graphs[i], params, cfg)
                total += float(smooth_l1(pred, records[i].ds).data)
        return total / len(indices)

    best_val = eval_loss(val_idx)
    best_params = params.copy()
    history = []
    for it in range(hyper.iterations):
        opt.lr = hyper.lr * (hyper.lr_decay ** (it // hyper.lr_decay_every))
        chosen = rng.choice(len(train_pockets),
                            size=min(hyper.pockets_per_iter, len(train_pockets)),
                            replace=False)
        batch = []
        for pi in chosen:
            pool = by_pocket[train_pockets[pi]]
            take = min(hyper.ligands_per_pocket, len(pool))
            for ri in rng.choice(len(pool), size=take, replace=False):
                batch.append(pool[ri])
        params.zero_grad()
        loss_sum = None
        for i in batch:
            pred = predict(pockets[records[i].pocket_id], graphs[i], params, cfg)
            term = smooth_l1(pred, records[i].ds)
            loss_sum = term if loss_sum is None else tn.add(loss_sum, term)
        loss = tn.mul(loss_sum, 1.0 / len(batch))
        loss.backward()
        tn.optimizer_step(params, params.grads(), opt)
        history.append((it, float(loss.data)))
        if (it + 1) % hyper.eval_every == 0 or it == hyper.iterations - 1:
            current = eval_loss(val_idx)
            if current < best_val:
                best_val = current
                best_params = params.copy()
    return ProxyTrainResult(params=best_params, best_val_loss=best_val,
                            history=history)
