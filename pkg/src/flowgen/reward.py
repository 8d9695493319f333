"""Multi-objective reward: affinity x drug-likeness x synthesizability.

Component rewards are clipped at their thresholds, the affinity term is
normalized by the cube root of the heavy-atom count and clamped at zero, and
the product is floored at a small positive value so the log-domain loss stays
finite. Scores come from either a deterministic synthetic scorer or an
external oracle process speaking newline-delimited JSON.
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass

from .fraggraph import (FEATURE_LABELS, FragmentVocabulary, MolGraphState,
                        heavy_atom_count, state_to_json)


@dataclass(frozen=True)
class RewardSpec:
    t_qed: float = 0.7
    t_sa: float = 0.8
    t_ds: float = -8.0
    ds_shortfall_scale: float = 0.2
    reward_floor: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.t_qed <= 1.0:
            raise ValueError(f"t_qed must be in (0, 1], got {self.t_qed}")
        if not 0.0 < self.t_sa <= 1.0:
            raise ValueError(f"t_sa must be in (0, 1], got {self.t_sa}")
        if not self.t_ds < 0.0:
            raise ValueError(f"t_ds must be negative, got {self.t_ds}")
        if not self.reward_floor > 0.0:
            raise ValueError("reward_floor must be positive")


@dataclass(frozen=True)
class ScoreTriple:
    ds: float       # kcal/mol, lower is better
    qed: float      # [0, 1]
    sa_raw: float   # [1, 10], lower is easier to synthesize

    def __post_init__(self):
        for name, value in (("ds", self.ds), ("qed", self.qed), ("sa_raw", self.sa_raw)):
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if not 1.0 <= self.sa_raw <= 10.0:
            raise ValueError(f"sa_raw must be in [1, 10], got {self.sa_raw}")


def sa_normalized(sa_raw: float) -> float:
    return (10.0 - sa_raw) / 9.0


def r_qed(qed: float, t_qed: float) -> float:
    if not 0.0 <= qed <= 1.0:
        raise ValueError(f"qed must be in [0, 1], got {qed}")
    return min(qed / t_qed, 1.0)


def r_sa(sa_raw: float, t_sa: float) -> float:
    if not 1.0 <= sa_raw <= 10.0:
        raise ValueError(f"sa_raw must be in [1, 10], got {sa_raw}")
    return min(sa_normalized(sa_raw) / t_sa, 1.0)


def r_ds(ds: float, t_ds: float, hac: int, shortfall_scale: float = 0.2) -> float:
    """Affinity reward: negative shifted score over cbrt(HAC), clamped at 0.

    The raw formula goes negative for poor docking scores, which a reward
    must not; the clamp is the documented repair.
    """
    if hac < 1:
        raise ValueError(f"heavy atom count must be >= 1, got {hac}")
    raw = -((ds - t_ds) + shortfall_scale * max(ds, t_ds)) / (hac ** (1.0 / 3.0))
    return max(raw, 0.0)


def compose(triple: ScoreTriple, spec: RewardSpec, hac: int) -> float:
    value = (r_ds(triple.ds, spec.t_ds, hac, spec.ds_shortfall_scale)
             * r_qed(triple.qed, spec.t_qed)
             * r_sa(triple.sa_raw, spec.t_sa))
    return max(value, spec.reward_floor)


def log_tempered_reward(r: float, beta: float) -> float:
    if r <= 0.0:
        raise ValueError(f"reward must be positive, got {r}")
    return beta * math.log(r)


# -- synthetic scorers -----------------------------------------------------------

def synthetic_scores(state: MolGraphState, pocket,
                     vocab: FragmentVocabulary) -> ScoreTriple:
    """Deterministic desk-scale stand-in for docking/QED/SA programs.

    DS rewards overlap between ligand atom features and pocket pharmacophore
    type counts; QED is a bell around 23 heavy atoms; SA grows with fragment
    variety and link count.
    """
    if not state.terminal:
        raise ValueError("synthetic scores are defined for terminal states only")
    hac = heavy_atom_count(state, vocab)
    ligand_counts = {label: 0 for label in FEATURE_LABELS}
    for fid in state.nodes:
        for _, features in vocab[fid].atoms:
            for feat in features:
                ligand_counts[feat] += 1
    pocket_counts = {label: 0 for label in FEATURE_LABELS}
    for point in pocket.pharmacophore_points:
        pocket_counts[point.type] += 1
    overlap = sum(min(ligand_counts[t], pocket_counts[t]) for t in FEATURE_LABELS)
    ds = max(-16.0, min(0.0, -2.0 * overlap + 0.05 * hac))
    qed = math.exp(-(((hac - 23.0) / 10.0) ** 2))
    sa = max(1.0, min(10.0, 1.0 + 0.4 * len(set(state.nodes)) + 0.2 * len(state.links)))
    return ScoreTriple(ds=ds, qed=qed, sa_raw=sa)


class SyntheticScorer:
    """Scores batches with the synthetic formulas; pure and process-local."""

    kind = "synthetic"

    def __init__(self, vocab: FragmentVocabulary):
        self.vocab = vocab

    def score(self, pocket, states) -> list[ScoreTriple]:
        return [synthetic_scores(s, pocket, self.vocab) for s in states]

    def close(self):
        pass


# -- external oracle -----------------------------------------------------------

class OracleError(RuntimeError):
    def __init__(self, message: str, unanswered=()):
        super().__init__(message)
        self.unanswered = tuple(unanswered)


class OracleClient:
    """Owns one oracle child process speaking JSON lines on stdin/stdout.

    Startup handshake: {"op": "ping"} -> {"op": "pong"}. Scoring requests are
    {seq, pocket_id, molecule}; responses {seq, ds, qed, sa} may arrive in any
    order and are re-matched by seq.
    """

    def __init__(self, command: str | list, handshake_timeout: float = 10.0):
        args = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            args, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._seq = 0
        self._handshake(handshake_timeout)

    def _read_loop(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF marker

    def _next_line(self, deadline: float) -> str:
        import time
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise queue.Empty
        line = self._lines.get(timeout=remaining)
        if line is None:
            raise OracleError("oracle process closed its stdout")
        return line

    def _handshake(self, timeout: float):
        import time
        try:
            self._proc.stdin.write(json.dumps({"op": "ping"}) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle unreachable at startup: {exc}") from exc
        deadline = time.monotonic() + timeout
        try:
            reply = json.loads(self._next_line(deadline))
        except queue.Empty:
            raise OracleError("oracle did not answer the ping handshake") from None
        except json.JSONDecodeError as exc:
            raise OracleError(f"malformed handshake reply: {exc}") from exc
        if reply.get("op") != "pong":
            raise OracleError(f"expected pong, got {reply!r}")

    def score_batch(self, items, timeout: float = 120.0) -> list[ScoreTriple]:
        """items: iterable of (pocket_id, molecule_record_dict)."""
        import time
        requests = {}
        for pocket_id, molecule in items:
            seq = self._seq
            self._seq += 1
            requests[seq] = None
            try:
                self._proc.stdin.write(json.dumps(
                    {"seq": seq, "pocket_id": pocket_id, "molecule": molecule}) + "\n")
            except (BrokenPipeError, OSError) as exc:
                raise OracleError(f"oracle process died mid-request: {exc}",
                                  unanswered=sorted(requests)) from exc
        try:
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle process died mid-request: {exc}",
                              unanswered=sorted(requests)) from exc
        deadline = time.monotonic() + timeout
        pending = {seq for seq, v in requests.items() if v is None}
        while pending:
            try:
                line = self._next_line(deadline)
            except queue.Empty:
                raise OracleError(
                    f"oracle timed out after {timeout}s with {len(pending)} "
                    "unanswered requests", unanswered=sorted(pending)) from None
            except OracleError as exc:
                raise OracleError(str(exc), unanswered=sorted(pending)) from None
            try:
                reply = json.loads(line)
                seq = int(reply["seq"])
                triple = ScoreTriple(ds=float(reply["ds"]), qed=float(reply["qed"]),
                                     sa_raw=float(reply["sa"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise OracleError(f"malformed oracle response {line!r}: {exc}",
                                  unanswered=sorted(pending)) from exc
            if seq in pending:
                requests[seq] = triple
                pending.discard(seq)
        return [requests[seq] for seq in sorted(requests)]

    def close(self):
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def external_oracle_score(client: OracleClient, batch,
                          timeout: float = 120.0) -> list[ScoreTriple]:
    """batch: list of (pocket_id, serialized molecule dict)."""
    return client.score_batch(batch, timeout=timeout)


class OracleScorer:
    """Scorer backed by an external oracle process."""

    kind = "external-oracle"

    def __init__(self, command: str | list, timeout: float = 120.0):
        self.client = OracleClient(command)
        self.timeout = timeout

    def score(self, pocket, states) -> list[ScoreTriple]:
        batch = [(pocket.id, state_to_json(s)) for s in states]
        return self.client.score_batch(batch, timeout=self.timeout)

    def close(self):
        self.client.close()
