"""Unique-molecule sampling from a trained checkpoint, optionally parallel.

Each trajectory index derives its own RNG stream, so the produced molecule
set is a pure function of (checkpoint, pocket, beta, seed) regardless of
worker count or chunking. Duplicates are dropped in index order until the
requested count or the retry budget is reached.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fraggraph import (FragmentVocabulary, canonical_key, heavy_atom_count,
                        state_to_json)
from .pocket import PocketEncoderConfig, PocketStructure, encode_pocket
from .policy import Policy, condition
from .reward import RewardSpec, compose
from .trainer import derive_rng, load_checkpoint, rollout_batch

RETRY_FACTOR = 10

_WORKER: dict = {}


@dataclass
class SampleResult:
    states: list          # unique terminal states, deterministic order
    rollouts_used: int
    exhausted: bool       # retry budget hit before n unique molecules


def _rollout_chunk(policy: Policy, cond: np.ndarray,
                   vocab: FragmentVocabulary, indices, seed: int,
                   max_nodes: int) -> list:
    rngs = [derive_rng(seed, 3, int(i)) for i in indices]
    conds = np.tile(cond, (len(indices), 1))
    trajectories = rollout_batch(policy, conds, vocab, rngs, max_nodes,
                                 epsilon=0.0)
    return [t.states[-1] for t in trajectories]


def _worker_init(ckpt_dir, pocket_json, vocab, seed, beta, pocket_dim):
    from .pocket import pocket_from_json
    gfn, encoder_params, policy_cfg = load_checkpoint(ckpt_dir)
    pocket = pocket_from_json(pocket_json)
    enc_cfg = PocketEncoderConfig(hidden_dim=pocket_dim)
    emb = encode_pocket(pocket, encoder_params, enc_cfg).vector
    _WORKER["policy"] = gfn.target
    _WORKER["cond"] = condition(emb, beta, policy_cfg)
    _WORKER["vocab"] = vocab
    _WORKER["seed"] = seed


def _worker_chunk(args):
    indices, max_nodes = args
    states = _rollout_chunk(_WORKER["policy"], _WORKER["cond"], _WORKER["vocab"],
                            indices, _WORKER["seed"], max_nodes)
    return [(int(i), state_to_json(s)) for i, s in zip(indices, states)]


def sample_unique(ckpt_dir: str | Path, pocket: PocketStructure,
                  vocab: FragmentVocabulary, n: int, beta: float, seed: int,
                  max_nodes: int, workers: int = 1,
                  chunk_size: int = 16) -> SampleResult:
    """Sample until n canonically distinct terminal molecules (or budget)."""
    from .fraggraph import state_from_json
    budget = RETRY_FACTOR * n
    gfn, encoder_params, policy_cfg = load_checkpoint(ckpt_dir)
    enc_cfg = PocketEncoderConfig(hidden_dim=policy_cfg.pocket_dim)
    emb = encode_pocket(pocket, encoder_params, enc_cfg).vector
    cond = condition(emb, beta, policy_cfg)

    unique: dict[str, object] = {}
    used = 0

    def consume(pairs) -> bool:
        nonlocal used
        for _, record in sorted(pairs, key=lambda p: p[0]):
            used += 1
            state = record if not isinstance(record, dict) else None
            if state is None:
                state = state_from_json(record)
            key = canonical_key(state)
            if key not in unique:
                unique[key] = state
                if len(unique) >= n:
                    return True
        return False

    if workers <= 1:
        idx = 0
        done = False
        while not done and idx < budget:
            chunk = list(range(idx, min(idx + chunk_size, budget)))
            idx = chunk[-1] + 1
            states = _rollout_chunk(gfn.target, cond, vocab, chunk, seed,
                                    max_nodes)
            done = consume(list(zip(chunk, states)))
    else:
        from .pocket import pocket_to_json
        ctx = mp.get_context("fork")
        chunks = [(list(range(i, min(i + chunk_size, budget))), max_nodes)
                  for i in range(0, budget, chunk_size)]
        done = False
        with ctx.Pool(workers, initializer=_worker_init,
                      initargs=(str(ckpt_dir), pocket_to_json(pocket), vocab,
                                seed, beta, policy_cfg.pocket_dim)) as pool:
            for pairs in pool.imap(_worker_chunk, chunks):
                if consume(pairs):
                    done = True
                    break
    return SampleResult(states=list(unique.values()), rollouts_used=used,
                        exhausted=len(unique) < n)


def score_and_record(states, pocket: PocketStructure, scorer,
                     reward_spec: RewardSpec, vocab: FragmentVocabulary):
    """Attach scores and composed rewards; returns evaluation records."""
    from .evaluation import MoleculeRecord
    triples = scorer.score(pocket, states)
    records = []
    for state, triple in zip(states, triples):
        hac = heavy_atom_count(state, vocab)
        records.append(MoleculeRecord(
            pocket_id=pocket.id, canonical_key=canonical_key(state),
            molecule=state_to_json(state), triple=triple,
            reward=compose(triple, reward_spec, hac)))
    return records


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
