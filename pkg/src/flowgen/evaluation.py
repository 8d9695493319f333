"""Metrics and the exact-distribution verifier.

The verifier enumerates every canonical terminal molecule, computes the
tempered target distribution in log domain, and compares it against empirical
sampling frequencies. Sampling walks canonical states with per-state action
distributions memoized, which is exact because the policy is pure and
permutation-equivariant, and keeps a hundred thousand rollouts cheap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensornn as tn
from .fraggraph import (FragmentVocabulary, MolGraphState, action_class_keys,
                        apply_action, canonical_key, enumerate_terminals,
                        fingerprint, heavy_atom_count, new_state,
                        state_from_json, valid_actions)
from .policy import Policy, action_distribution, action_logit_vector, condition
from .reward import RewardSpec, ScoreTriple, compose, sa_normalized


@dataclass(frozen=True)
class MoleculeRecord:
    pocket_id: str
    canonical_key: str
    molecule: dict
    triple: ScoreTriple
    reward: float

    @property
    def sa_norm(self) -> float:
        return sa_normalized(self.triple.sa_raw)


@dataclass(frozen=True)
class MetricThresholds:
    qed_min: float = 0.25
    sa_min: float = 0.59
    ds_max: float = -8.18


def record_fingerprint(record: MoleculeRecord) -> dict:
    return fingerprint(state_from_json(record.molecule))


def tanimoto_distance(fp_a: dict, fp_b: dict) -> float:
    keys = set(fp_a) | set(fp_b)
    num = sum(min(fp_a.get(k, 0), fp_b.get(k, 0)) for k in keys)
    den = sum(max(fp_a.get(k, 0), fp_b.get(k, 0)) for k in keys)
    if den == 0:
        return 0.0
    return 1.0 - num / den


def diversity(records: list[MoleculeRecord]) -> float:
    """Mean pairwise Tanimoto distance on count fingerprints."""
    if len(records) < 2:
        raise ValueError("diversity needs at least 2 records")
    fps = [record_fingerprint(r) for r in records]
    total = 0.0
    pairs = 0
    for i in range(len(fps)):
        for j in range(i + 1, len(fps)):
            total += tanimoto_distance(fps[i], fps[j])
            pairs += 1
    return total / pairs


def success_rate(records: list[MoleculeRecord],
                 thresholds: MetricThresholds = MetricThresholds()) -> float:
    if not records:
        return 0.0
    passing = sum(1 for r in records
                  if r.triple.qed > thresholds.qed_min
                  and r.sa_norm > thresholds.sa_min
                  and r.triple.ds < thresholds.ds_max)
    return passing / len(records)


def high_affinity(records: list[MoleculeRecord], reference_ds: float) -> float:
    if not records:
        return 0.0
    return sum(1 for r in records if r.triple.ds < reference_ds) / len(records)


def topk_stats(records: list[MoleculeRecord], k: int):
    """(mean ds, mean reward, mean qed) over the k best rewards."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(records, key=lambda r: (-r.reward, r.canonical_key))[:k]
    if not ranked:
        raise ValueError("no records")
    return (float(np.mean([r.triple.ds for r in ranked])),
            float(np.mean([r.reward for r in ranked])),
            float(np.mean([r.triple.qed for r in ranked])))


# -- exact-distribution verification ----------------------------------------------

class CachedPolicySampler:
    """Random walk over canonical states under the policy's induced
    transition probabilities (actions grouped by canonical child)."""

    def __init__(self, policy: Policy, cond: np.ndarray,
                 vocab: FragmentVocabulary, max_nodes: int):
        self.policy = policy
        self.cond = cond
        self.vocab = vocab
        self.max_nodes = max_nodes
        self._table: dict[str, tuple] = {}

    def _expand(self, state: MolGraphState):
        key = canonical_key(state)
        cached = self._table.get(key)
        if cached is not None:
            return cached
        actions = valid_actions(state, self.vocab, self.max_nodes)
        logits = self.policy.forward(state, self.cond, self.vocab)
        vec = action_logit_vector(state, actions, logits, self.vocab)
        probs = action_distribution(vec)
        keys = action_class_keys(state, actions, self.vocab, self.max_nodes)
        children: dict[str, MolGraphState] = {}
        mass: dict[str, float] = {}
        for action, child_key, p in zip(actions, keys, probs):
            if child_key not in children:
                children[child_key] = apply_action(state, action, self.vocab,
                                                   self.max_nodes)
            mass[child_key] = mass.get(child_key, 0.0) + float(p)
        ordered = sorted(mass)
        entry = ([children[k] for k in ordered],
                 np.array([mass[k] for k in ordered]))
        self._table[key] = entry
        return entry

    def sample_terminal(self, rng: np.random.Generator) -> str:
        state = new_state()
        while not state.terminal:
            children, probs = self._expand(state)
            idx = rng.choice(len(children), p=probs / probs.sum())
            state = children[idx]
        return canonical_key(state)


def terminal_rewards(terminals: dict, scorer, pocket,
                     reward_spec: RewardSpec,
                     vocab: FragmentVocabulary) -> dict[str, float]:
    keys = sorted(terminals)
    states = [terminals[k] for k in keys]
    triples = scorer.score(pocket, states)
    return {k: compose(t, reward_spec, heavy_atom_count(s, vocab))
            for k, t, s in zip(keys, triples, states)}


def target_distribution(rewards: dict[str, float], beta: float) -> dict[str, float]:
    """p*(x) = r(x)^beta / Z over canonical terminals, computed in log domain."""
    keys = sorted(rewards)
    logw = np.array([beta * math.log(rewards[k]) for k in keys])
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    return dict(zip(keys, w))


def tv_distance(p: dict[str, float], q: dict[str, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical_distribution(sample_fn, n_samples: int,
                           rng: np.random.Generator) -> dict[str, float]:
    counts: dict[str, int] = {}
    for _ in range(n_samples):
        key = sample_fn(rng)
        counts[key] = counts.get(key, 0) + 1
    return {k: c / n_samples for k, c in counts.items()}


def verify_distribution(policy: Policy, vocab: FragmentVocabulary,
                        pocket_vector: np.ndarray, beta: float, n_samples: int,
                        scorer, pocket, reward_spec: RewardSpec,
                        max_nodes: int, seed: int = 0,
                        budget: int = 1_000_000):
    """Returns (tv, table); table rows are
    (canonical_key, reward, target_prob, empirical_prob)."""
    terminals = enumerate_terminals(vocab, max_nodes, budget)
    rewards = terminal_rewards(terminals, scorer, pocket, reward_spec, vocab)
    target = target_distribution(rewards, beta)
    cond = condition(pocket_vector, beta, policy.cfg)
    sampler = CachedPolicySampler(policy, cond, vocab, max_nodes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    empirical = empirical_distribution(sampler.sample_terminal, n_samples, rng)
    unknown = set(empirical) - set(target)
    if unknown:
        raise RuntimeError(f"sampled keys outside the enumerated terminal set: "
                           f"{sorted(unknown)[:3]}")
    table = [(key, rewards[key], target[key], empirical.get(key, 0.0))
             for key in sorted(terminals)]
    return tv_distance(target, empirical), table


# -- reports --------------------------------------------------------------------------

def _svg_histogram(values: list[float], title: str, width=400, height=240,
                   bins=10) -> str:
    if not values:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    counts = [0] * bins
    for v in values:
        idx = min(int((v - lo) / (hi - lo) * bins), bins - 1)
        counts[idx] += 1
    peak = max(counts)
    bar_w = (width - 40) / bins
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="10" y="16" font-size="12">{title}</text>']
    for i, c in enumerate(counts):
        h = 0 if peak == 0 else (height - 60) * c / peak
        x = 20 + i * bar_w
        y = height - 30 - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w - 2:.1f}" '
                     f'height="{h:.1f}" fill="#4477aa"/>')
    parts.append(f'<text x="10" y="{height - 10}" font-size="10">'
                 f'{lo:.3g} .. {hi:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(records: list[MoleculeRecord], out_dir: str | Path,
                thresholds: MetricThresholds = MetricThresholds(),
                reference_ds: float | None = None,
                wall_time_s: float | None = None) -> dict:
    """Per-molecule CSV, per-pocket aggregate CSV, and SVG histograms."""
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mol_csv = out_dir / "molecules.csv"
    with open(mol_csv, "w") as fh:
        fh.write("pocket_id,canonical_key,ds,qed,sa_norm,reward,success\n")
        for r in records:
            ok = int(r.triple.qed > thresholds.qed_min
                     and r.sa_norm > thresholds.sa_min
                     and r.triple.ds < thresholds.ds_max)
            fh.write(f"{r.pocket_id},{json.dumps(r.canonical_key)},{r.triple.ds:.6g},"
                     f"{r.triple.qed:.6g},{r.sa_norm:.6g},{r.reward:.6g},{ok}\n")
    by_pocket: dict[str, list[MoleculeRecord]] = {}
    for r in records:
        by_pocket.setdefault(r.pocket_id, []).append(r)
    agg_csv = out_dir / "aggregate.csv"
    with open(agg_csv, "w") as fh:
        fh.write("pocket_id,avg_ds,med_ds,high_affinity,avg_qed,avg_sa_norm,"
                 "diversity,success_rate,wall_time_s\n")
        for pid in sorted(by_pocket):
            rs = by_pocket[pid]
            ds = [r.triple.ds for r in rs]
            ha = "" if reference_ds is None else f"{high_affinity(rs, reference_ds):.6g}"
            div = f"{diversity(rs):.6g}" if len(rs) >= 2 else ""
            wt = "" if wall_time_s is None else f"{wall_time_s:.6g}"
            fh.write(f"{pid},{np.mean(ds):.6g},{np.median(ds):.6g},{ha},"
                     f"{np.mean([r.triple.qed for r in rs]):.6g},"
                     f"{np.mean([r.sa_norm for r in rs]):.6g},"
                     f"{div},{success_rate(rs, thresholds):.6g},{wt}\n")
    ds_svg = out_dir / "ds_histogram.svg"
    ds_svg.write_text(_svg_histogram([r.triple.ds for r in records],
                                     "docking score distribution"))
    reward_svg = out_dir / "reward_histogram.svg"
    reward_svg.write_text(_svg_histogram([r.reward for r in records],
                                         "reward distribution"))
    return {"molecules": mol_csv, "aggregate": agg_csv,
            "ds_histogram": ds_svg, "reward_histogram": reward_svg}
