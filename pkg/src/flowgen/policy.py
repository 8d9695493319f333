"""Conditioned graph-transformer policy over fragment-graph states.

Tokens are [virtual node, fragment nodes...]; the virtual node carries the
pocket + temperature condition and attends to everything. Link sides enter as
directed-edge embeddings that bias attention and feed the attachment head.
The forward pass is batched over padded states so rollouts and loss
evaluation stay cheap on CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensornn as tn
from .fraggraph import (AttachmentSpecification, FragmentAddition,
                        FragmentVocabulary, MolGraphState, StopConstruction)

NEG_INF = -1e9


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    max_attachment_atoms: int
    pocket_dim: int = 128
    beta_bins: int = 32
    beta_max: float = 64.0
    hidden_dim: int = 256
    layers: int = 2
    heads: int = 4

    @property
    def cond_dim(self) -> int:
        return self.pocket_dim + self.beta_bins

    @classmethod
    def for_vocab(cls, vocab: FragmentVocabulary, **kw) -> "PolicyConfig":
        return cls(vocab_size=len(vocab),
                   max_attachment_atoms=vocab.max_attachment_atoms, **kw)


def condition(pocket_vector: np.ndarray, beta: float,
              cfg: PolicyConfig) -> np.ndarray:
    """Concatenate the pocket embedding with a thermometer encoding of beta.

    Bin k lights up once beta reaches beta_max * (k + 1) / beta_bins, so
    beta=0 leaves all bins dark and beta=beta_max fills them all.
    """
    if not 0.0 <= beta <= cfg.beta_max:
        raise ValueError(f"beta must be in [0, {cfg.beta_max}], got {beta}")
    vec = np.asarray(pocket_vector, dtype=np.float32)
    if vec.shape != (cfg.pocket_dim,):
        raise ValueError(f"pocket vector must have dim {cfg.pocket_dim}, got {vec.shape}")
    thresholds = cfg.beta_max * (np.arange(cfg.beta_bins) + 1) / cfg.beta_bins
    thermo = (beta >= thresholds).astype(np.float32)
    return np.concatenate([vec, thermo])


def init_policy_params(cfg: PolicyConfig, seed: int = 0) -> tn.ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF10]))
    ps = tn.ParamSet()
    d = cfg.hidden_dim
    tn.init_embedding(ps, "frag_emb", cfg.vocab_size, d, rng)
    tn.init_embedding(ps, "attach_emb", cfg.max_attachment_atoms + 1, d, rng)
    tn.init_linear(ps, "virtual_in", cfg.cond_dim, d, rng)
    for l in range(cfg.layers):
        tn.init_layernorm(ps, f"l{l}.ln1", d)
        tn.init_linear(ps, f"l{l}.q", d, d, rng)
        tn.init_linear(ps, f"l{l}.k", d, d, rng)
        tn.init_linear(ps, f"l{l}.v", d, d, rng)
        tn.init_linear(ps, f"l{l}.o", d, d, rng)
        tn.init_linear(ps, f"l{l}.ebias", d, cfg.heads, rng)
        tn.init_layernorm(ps, f"l{l}.ln2", d)
        tn.init_linear(ps, f"l{l}.ffn1", d, 2 * d, rng)
        tn.init_linear(ps, f"l{l}.ffn2", 2 * d, d, rng)
        tn.init_linear(ps, f"l{l}.eup1", 3 * d, d, rng)
        tn.init_linear(ps, f"l{l}.eup2", d, d, rng)
        tn.init_layernorm(ps, f"l{l}.eln", d)
    tn.init_layernorm(ps, "ln_out", d)
    tn.init_linear(ps, "add_head.l1", d, d, rng)
    tn.init_linear(ps, "add_head.l2", d, cfg.vocab_size, rng)
    tn.init_linear(ps, "att_head.l1", d, d, rng)
    tn.init_linear(ps, "att_head.l2", d, cfg.max_attachment_atoms, rng)
    tn.init_linear(ps, "stop_head.l1", 2 * d, d, rng)
    tn.init_linear(ps, "stop_head.l2", d, 1, rng)
    tn.init_linear(ps, "logz.l1", cfg.cond_dim, d // 2, rng)
    tn.init_linear(ps, "logz.l2", d // 2, 1, rng)
    return ps


def zero_policy_params(cfg: PolicyConfig) -> tn.ParamSet:
    ps = init_policy_params(cfg, seed=0)
    for _, t in ps.items():
        t.data[...] = 0.0
    return ps


@dataclass
class ActionLogits:
    """Three-head logit bundle for one state.

    addition: (rows, V) tensor; one row per node, or a single ROOT row for
    the empty state. attachment: one tensor per unset directed edge, sized by
    the source fragment's attachment-atom count. stop: scalar tensor.
    """

    addition: tn.Tensor
    attachment: list
    stop: tn.Tensor
    root: bool


class Policy:
    def __init__(self, cfg: PolicyConfig, params: tn.ParamSet):
        self.cfg = cfg
        self.params = params

    # -- batched trunk -----------------------------------------------------

    def _marshal(self, states: list[MolGraphState], vocab: FragmentVocabulary):
        b = len(states)
        max_n = max((s.n_nodes for s in states), default=0)
        max_e = max((2 * len(s.links) for s in states), default=0)
        node_ids = np.zeros((b, max(max_n, 1)), dtype=np.int64)
        node_mask = np.zeros((b, max(max_n, 1)), dtype=np.float32)
        edge_label = np.zeros((b, max(max_e, 1)), dtype=np.int64)
        edge_src = np.zeros((b, max(max_e, 1)), dtype=np.int64)
        edge_dst = np.zeros((b, max(max_e, 1)), dtype=np.int64)
        edge_valid: list[tuple[int, int]] = []
        unset_slots: list[list[int]] = []
        for bi, state in enumerate(states):
            for ni, fid in enumerate(state.nodes):
                node_ids[bi, ni] = fid
                node_mask[bi, ni] = 1.0
            slots_for_unset = []
            for li, (i, j, ai, aj) in enumerate(state.links):
                for direction, (src, dst, atom) in enumerate(((i, j, ai), (j, i, aj))):
                    slot = 2 * li + direction
                    edge_src[bi, slot] = src
                    edge_dst[bi, slot] = dst
                    if atom is None:
                        edge_label[bi, slot] = 0
                    else:
                        frag = vocab[state.nodes[src]]
                        edge_label[bi, slot] = frag.attachment_atoms.index(atom) + 1
                    edge_valid.append((bi, slot))
            # order must match MolGraphState.unset_directed_edges()
            for li, (i, j, ai, aj) in enumerate(state.links):
                if ai is None:
                    slots_for_unset.append(2 * li)
                if aj is None:
                    slots_for_unset.append(2 * li + 1)
            unset_slots.append(slots_for_unset)
        return (node_ids, node_mask, edge_label, edge_src, edge_dst,
                edge_valid, unset_slots, max_n)

    def _trunk(self, states, conds: np.ndarray, vocab: FragmentVocabulary):
        """Returns (tokens (B,T,d), edge_repr (B,E,d), marshal data)."""
        ps = self.params
        cfg = self.cfg
        data = self._marshal(states, vocab)
        (node_ids, node_mask, edge_label, edge_src, edge_dst,
         edge_valid, unset_slots, max_n) = data
        b = len(states)
        t_len = max_n + 1
        d = cfg.hidden_dim
        heads = cfg.heads
        hd = d // heads

        cond_t = tn.Tensor(conds.astype(np.float32))
        virtual = tn.linear(ps, "virtual_in", cond_t)          # (B, d)
        virtual = tn.reshape(virtual, (b, 1, d))
        node_emb = tn.gather(ps["frag_emb"], (node_ids,))      # (B, maxN, d)
        node_emb = tn.mul(node_emb, node_mask[:, :, None])
        if max_n == 0:
            tokens = virtual
            t_len = 1
        else:
            tokens = tn.concat([virtual, node_emb], axis=1)    # (B, T, d)

        edges = tn.gather(ps["attach_emb"], (edge_label,))     # (B, maxE, d)

        token_mask = np.zeros((b, t_len), dtype=np.float32)
        token_mask[:, 0] = 1.0
        if max_n > 0:
            token_mask[:, 1:] = node_mask[:, :t_len - 1]
        key_bias = np.where(token_mask[:, None, None, :] > 0, 0.0, NEG_INF)
        key_bias = key_bias.astype(np.float32)

        if edge_valid:
            ev_b = np.array([x[0] for x in edge_valid], dtype=np.int64)
            ev_e = np.array([x[1] for x in edge_valid], dtype=np.int64)
            ev_src = edge_src[ev_b, ev_e] + 1
            ev_dst = edge_dst[ev_b, ev_e] + 1
        else:
            ev_b = ev_e = ev_src = ev_dst = None

        scale = 1.0 / math.sqrt(hd)
        for l in range(cfg.layers):
            x = tn.layernorm(ps, f"l{l}.ln1", tokens)

            def split_heads(t):
                return tn.swapaxes(tn.reshape(t, (b, t_len, heads, hd)), 1, 2)

            q = split_heads(tn.linear(ps, f"l{l}.q", x))
            k = split_heads(tn.linear(ps, f"l{l}.k", x))
            v = split_heads(tn.linear(ps, f"l{l}.v", x))
            scores = tn.mul(tn.matmul(q, tn.swapaxes(k, -1, -2)), scale)
            if ev_b is not None:
                bias_vals = tn.linear(ps, f"l{l}.ebias", tn.gather(edges, (ev_b, ev_e)))
                dense = tn.scatter_nd(bias_vals, (ev_b, ev_dst, ev_src),
                                      (b, t_len, t_len, heads))
                scores = tn.add(scores, tn.swapaxes(dense, 1, 3))
            scores = tn.add(scores, key_bias)
            attn = tn.softmax(scores)
            mixed = tn.matmul(attn, v)                          # (B, H, T, hd)
            mixed = tn.reshape(tn.swapaxes(mixed, 1, 2), (b, t_len, d))
            tokens = tn.add(tokens, tn.linear(ps, f"l{l}.o", mixed))

            y = tn.layernorm(ps, f"l{l}.ln2", tokens)
            ffn = tn.linear(ps, f"l{l}.ffn2", tn.relu(tn.linear(ps, f"l{l}.ffn1", y)))
            tokens = tn.add(tokens, ffn)

            if ev_b is not None:
                h_src = tn.gather(tokens, (ev_b, ev_src))
                h_dst = tn.gather(tokens, (ev_b, ev_dst))
                e_sel = tn.gather(edges, (ev_b, ev_e))
                upd = tn.concat([e_sel, h_src, h_dst], axis=-1)
                upd = tn.linear(ps, f"l{l}.eup2",
                                tn.relu(tn.linear(ps, f"l{l}.eup1", upd)))
                new_vals = tn.layernorm(ps, f"l{l}.eln", tn.add(e_sel, upd))
                edges = tn.scatter_nd(new_vals, (ev_b, ev_e), edges.shape)

        tokens = tn.layernorm(ps, "ln_out", tokens)
        return tokens, edges, data, token_mask

    def forward_batch(self, states: list[MolGraphState], conds: np.ndarray,
                      vocab: FragmentVocabulary) -> list[ActionLogits]:
        for s in states:
            if s.terminal:
                raise ValueError("policy forward is undefined on terminal states")
        if len(vocab) != self.cfg.vocab_size:
            raise ValueError(
                f"vocabulary size {len(vocab)} does not match policy config "
                f"{self.cfg.vocab_size}")
        ps = self.params
        tokens, edges, data, token_mask = self._trunk(states, conds, vocab)
        (node_ids, node_mask, edge_label, edge_src, edge_dst,
         edge_valid, unset_slots, max_n) = data
        b = len(states)
        d = self.cfg.hidden_dim

        virtual_h = tn.gather(tokens, (slice(None), 0))         # (B, d)
        if max_n > 0:
            node_h = tn.gather(tokens, (slice(None), slice(1, None)))
            masked = tn.mul(node_h, node_mask[:, :, None])
            counts = np.maximum(node_mask.sum(axis=1), 1.0)[:, None].astype(np.float32)
            pooled = tn.mul(tn.tsum(masked, axis=1), 1.0 / counts)
            add_logits = tn.linear(ps, "add_head.l2",
                                   tn.relu(tn.linear(ps, "add_head.l1", node_h)))
        else:
            pooled = tn.Tensor(np.zeros((b, d), dtype=np.float32))
            add_logits = None
        root_logits = tn.linear(ps, "add_head.l2",
                                tn.relu(tn.linear(ps, "add_head.l1", virtual_h)))
        stop_in = tn.concat([pooled, virtual_h], axis=-1)
        stop_logits = tn.linear(ps, "stop_head.l2",
                                tn.relu(tn.linear(ps, "stop_head.l1", stop_in)))
        att_all = tn.linear(ps, "att_head.l2",
                            tn.relu(tn.linear(ps, "att_head.l1", edges)))

        out = []
        for bi, state in enumerate(states):
            n = state.n_nodes
            if n == 0:
                addition = tn.reshape(tn.gather(root_logits, (np.array([bi]),)),
                                      (1, self.cfg.vocab_size))
                root = True
            else:
                addition = tn.gather(add_logits, (np.full(n, bi), np.arange(n)))
                root = False
            attachment = []
            for slot in unset_slots[bi]:
                src = edge_src[bi, slot]
                frag = vocab[state.nodes[src]]
                row = tn.gather(att_all, (np.array([bi]), np.array([slot])))
                row = tn.reshape(row, (self.cfg.max_attachment_atoms,))
                attachment.append(tn.gather(row, (np.arange(len(frag.attachment_atoms)),)))
            stop = tn.reshape(tn.gather(stop_logits, (np.array([bi]),)), (1,))
            out.append(ActionLogits(addition=addition, attachment=attachment,
                                    stop=stop, root=root))
        return out

    def forward(self, state: MolGraphState, cond: np.ndarray,
                vocab: FragmentVocabulary) -> ActionLogits:
        return self.forward_batch([state], cond[None, :], vocab)[0]

    # -- logZ ----------------------------------------------------------------

    def log_z_batch(self, conds: np.ndarray) -> tn.Tensor:
        h = tn.relu(tn.linear(self.params, "logz.l1", tn.Tensor(conds)))
        return tn.reshape(tn.linear(self.params, "logz.l2", h), (len(conds),))

    def log_z(self, cond: np.ndarray) -> tn.Tensor:
        return tn.reshape(self.log_z_batch(cond[None, :]), (1,))


def action_logit_vector(state: MolGraphState, actions, logits: ActionLogits,
                        vocab: FragmentVocabulary) -> tn.Tensor:
    """Flatten head outputs into one logit per valid action.

    Relies on valid_actions ordering: additions first, then attachments
    grouped per unset directed edge, then stop.
    """
    edge_pos = {edge: k for k, edge in enumerate(state.unset_directed_edges())}
    parts = []
    i = 0
    total = len(actions)
    add_rows, add_cols = [], []
    while i < total and isinstance(actions[i], FragmentAddition):
        a = actions[i]
        add_rows.append(0 if a.source is None else a.source)
        add_cols.append(a.fragment)
        i += 1
    if add_rows:
        parts.append(tn.gather(logits.addition,
                               (np.array(add_rows), np.array(add_cols))))
    while i < total and isinstance(actions[i], AttachmentSpecification):
        edge = actions[i].edge
        frag = vocab[state.nodes[edge[0]]]
        cols = []
        while (i < total and isinstance(actions[i], AttachmentSpecification)
               and actions[i].edge == edge):
            cols.append(frag.attachment_atoms.index(actions[i].atom))
            i += 1
        parts.append(tn.gather(logits.attachment[edge_pos[edge]], (np.array(cols),)))
    if i < total:
        if not isinstance(actions[i], StopConstruction):
            raise ValueError("unexpected action ordering")
        parts.append(logits.stop)
        i += 1
    vec = parts[0] if len(parts) == 1 else tn.concat(parts, axis=0)
    if vec.shape != (total,):
        raise ValueError(f"logit vector shape {vec.shape} != action count {total}")
    return vec


def action_distribution(logit_vec: tn.Tensor) -> np.ndarray:
    """Masked softmax over the valid-action logit vector."""
    if logit_vec.shape[0] == 0:
        raise ValueError("action distribution over an empty mask")
    with tn.no_grad():
        probs = tn.softmax(tn.reshape(logit_vec, (1, -1)))
    return probs.data[0].astype(np.float64)


def sample_action(actions, probs: np.ndarray, rng: np.random.Generator,
                  epsilon: float = 0.01):
    """Pick an action (epsilon-uniform exploration) and return the log-prob
    of the chosen action under the unmixed policy distribution."""
    if rng.random() < epsilon:
        idx = int(rng.integers(len(actions)))
    else:
        idx = int(rng.choice(len(actions), p=probs / probs.sum()))
    return actions[idx], float(np.log(max(probs[idx], 1e-300)))
