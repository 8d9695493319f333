"""Fragment-graph state space: states, actions, transitions, and enumeration.

A molecule is a tree of fragments joined by single bonds. Every link between
fragments carries two directed attachment slots, one per side, each naming
the attachment atom used on that fragment (or UNSET while under
construction). Because links are only created together with a new node, every
reachable graph is a tree, which keeps canonicalization exact and cheap.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

FEATURE_LABELS = ("aromatic", "donor", "acceptor", "hydrophobic", "ring")

MAX_NODES_DEFAULT = 9
ENUMERATION_BUDGET_DEFAULT = 1_000_000


class InvalidActionError(ValueError):
    """Raised when an action violates a masking rule; message names the rule."""


class EnumerationBudgetError(RuntimeError):
    """Raised when exhaustive enumeration exceeds its state budget."""


@dataclass(frozen=True)
class Fragment:
    """A building block: atoms with chemical feature tags plus attachment atoms.

    ``bonds`` lists intra-fragment bonds so a terminal fragment graph can be
    expanded to an atom-level ligand graph.
    """

    id: int
    atoms: tuple  # ((element, (feature, ...)), ...)
    attachment_atoms: tuple
    bonds: tuple = ()
    heavy_atom_count: int = -1

    def __post_init__(self):
        # zero attachment atoms is allowed (an uncut corpus molecule); such a
        # fragment can only ever be a singleton molecule, enforced by masking
        n = len(self.atoms)
        for a in self.attachment_atoms:
            if not 0 <= a < n:
                raise ValueError(f"attachment atom {a} out of range for {n} atoms")
        for i, j in self.bonds:
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise ValueError(f"bond ({i},{j}) out of range")
        heavy = sum(1 for el, _ in self.atoms if el != "H")
        if self.heavy_atom_count == -1:
            object.__setattr__(self, "heavy_atom_count", heavy)
        elif self.heavy_atom_count != heavy:
            raise ValueError("heavy_atom_count does not match non-hydrogen atoms")


def make_fragment(fid: int, atoms, attachment_atoms, bonds=()) -> Fragment:
    """Convenience constructor; atoms as (element, features) pairs."""
    norm = tuple((el, tuple(sorted(feats))) for el, feats in atoms)
    return Fragment(id=fid, atoms=norm, attachment_atoms=tuple(attachment_atoms),
                    bonds=tuple(tuple(sorted(b)) for b in bonds))


@dataclass(frozen=True)
class FragmentVocabulary:
    fragments: tuple
    version_hash: str = ""

    def __post_init__(self):
        for idx, frag in enumerate(self.fragments):
            if frag.id != idx:
                raise ValueError(f"fragment at position {idx} has id {frag.id}")
        if not self.version_hash:
            object.__setattr__(self, "version_hash", _vocab_hash(self.fragments))

    def __len__(self) -> int:
        return len(self.fragments)

    def __getitem__(self, fid: int) -> Fragment:
        return self.fragments[fid]

    @property
    def max_attachment_atoms(self) -> int:
        return max(1, max(len(f.attachment_atoms) for f in self.fragments))


def _vocab_hash(fragments) -> str:
    payload = json.dumps(
        [[f.atoms, f.attachment_atoms, f.bonds] for f in fragments],
        sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# A link is (i, j, atom_i, atom_j) with i < j; atom_x is the attachment atom
# chosen on node x's fragment for this link, or None while unset.
Link = tuple


@dataclass(frozen=True)
class MolGraphState:
    nodes: tuple = ()
    links: tuple = ()
    terminal: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def unset_directed_edges(self) -> list[tuple[int, int]]:
        """Directed edges (i -> j) whose attachment atom is still unset."""
        out = []
        for i, j, ai, aj in self.links:
            if ai is None:
                out.append((i, j))
            if aj is None:
                out.append((j, i))
        return out

    def used_atoms(self, node: int) -> set[int]:
        used = set()
        for i, j, ai, aj in self.links:
            if i == node and ai is not None:
                used.add(ai)
            if j == node and aj is not None:
                used.add(aj)
        return used

    def link_count(self, node: int) -> int:
        return sum(1 for i, j, _, _ in self.links if i == node or j == node)


@dataclass(frozen=True)
class FragmentAddition:
    source: Optional[int]  # None means ROOT (first fragment)
    fragment: int


@dataclass(frozen=True)
class AttachmentSpecification:
    edge: tuple  # directed (i, j)
    atom: int


@dataclass(frozen=True)
class StopConstruction:
    pass


GraphAction = object  # FragmentAddition | AttachmentSpecification | StopConstruction


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    log_probs: tuple

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("trajectory must hold one more state than actions")


def new_state() -> MolGraphState:
    return MolGraphState()


def free_slots(state: MolGraphState, node: int, vocab: FragmentVocabulary) -> int:
    """Attachment atoms of ``node`` not yet claimed by an incident link."""
    frag = vocab[state.nodes[node]]
    return len(frag.attachment_atoms) - state.link_count(node)


@lru_cache(maxsize=1 << 18)
def valid_actions(state: MolGraphState, vocab: FragmentVocabulary,
                  max_nodes: int = MAX_NODES_DEFAULT) -> tuple:
    """All legal actions, in a deterministic order.

    Additions are offered per node that can still host a link (and from ROOT
    on the empty state); attachment choices per unset directed edge and free
    source atom; Stop only once every attachment is specified.
    """
    if state.terminal:
        raise InvalidActionError("no actions available: state is terminal")
    actions: list = []
    n = state.n_nodes
    if n == 0:
        for fid in range(len(vocab)):
            actions.append(FragmentAddition(None, fid))
        return tuple(actions)
    if n < max_nodes:
        attachable = [fid for fid in range(len(vocab))
                      if vocab[fid].attachment_atoms]
        for node in range(n):
            if free_slots(state, node, vocab) >= 1:
                for fid in attachable:
                    actions.append(FragmentAddition(node, fid))
    for i, j in state.unset_directed_edges():
        frag = vocab[state.nodes[i]]
        used = state.used_atoms(i)
        for atom in frag.attachment_atoms:
            if atom not in used:
                actions.append(AttachmentSpecification((i, j), atom))
    if not state.unset_directed_edges():
        actions.append(StopConstruction())
    return tuple(actions)


def apply_action(state: MolGraphState, action: GraphAction,
                 vocab: FragmentVocabulary,
                 max_nodes: int = MAX_NODES_DEFAULT) -> MolGraphState:
    """Pure transition function; raises InvalidActionError naming the rule."""
    if state.terminal:
        raise InvalidActionError("cannot act on a terminal state")
    if isinstance(action, FragmentAddition):
        if not 0 <= action.fragment < len(vocab):
            raise InvalidActionError(f"fragment id {action.fragment} not in vocabulary")
        if action.source is None:
            if state.n_nodes != 0:
                raise InvalidActionError("ROOT addition only valid on the empty state")
            return MolGraphState(nodes=(action.fragment,), links=())
        if state.n_nodes == 0:
            raise InvalidActionError("non-ROOT addition on the empty state")
        if state.n_nodes >= max_nodes:
            raise InvalidActionError(f"node budget {max_nodes} exhausted")
        if not 0 <= action.source < state.n_nodes:
            raise InvalidActionError(f"source node {action.source} does not exist")
        if free_slots(state, action.source, vocab) < 1:
            raise InvalidActionError(f"source node {action.source} has no free attachment atom")
        if not vocab[action.fragment].attachment_atoms:
            raise InvalidActionError(
                f"fragment {action.fragment} has no attachment atoms to bind the new link")
        new_idx = state.n_nodes
        link = (action.source, new_idx, None, None)
        return MolGraphState(nodes=state.nodes + (action.fragment,),
                             links=state.links + (link,))
    if isinstance(action, AttachmentSpecification):
        i, j = action.edge
        for idx, (a, b, ai, aj) in enumerate(state.links):
            if (a, b) == (min(i, j), max(i, j)):
                side_i = ai if a == i else aj
                if side_i is not None:
                    raise InvalidActionError(f"edge {i}->{j} already specified")
                frag = vocab[state.nodes[i]]
                if action.atom not in frag.attachment_atoms:
                    raise InvalidActionError(
                        f"atom {action.atom} is not an attachment atom of fragment {state.nodes[i]}")
                if action.atom in state.used_atoms(i):
                    raise InvalidActionError(
                        f"atom {action.atom} on node {i} already used by another link")
                if a == i:
                    new_link = (a, b, action.atom, aj)
                else:
                    new_link = (a, b, ai, action.atom)
                links = state.links[:idx] + (new_link,) + state.links[idx + 1:]
                return MolGraphState(nodes=state.nodes, links=links)
        raise InvalidActionError(f"no link between nodes {i} and {j}")
    if isinstance(action, StopConstruction):
        if state.n_nodes == 0:
            raise InvalidActionError("cannot stop on the empty state")
        if state.unset_directed_edges():
            raise InvalidActionError("cannot stop with unset attachment edges")
        return MolGraphState(nodes=state.nodes, links=state.links, terminal=True)
    raise InvalidActionError(f"unknown action type {type(action).__name__}")


def heavy_atom_count(state: MolGraphState, vocab: FragmentVocabulary) -> int:
    if state.n_nodes == 0:
        raise ValueError("heavy atom count undefined for the empty state")
    return sum(vocab[fid].heavy_atom_count for fid in state.nodes)


# -- canonicalization ---------------------------------------------------------

def _neighbors(state: MolGraphState) -> dict:
    """node -> list of (neighbor, atom_here, atom_there)."""
    nbr: dict[int, list] = {v: [] for v in range(state.n_nodes)}
    for i, j, ai, aj in state.links:
        nbr[i].append((j, ai, aj))
        nbr[j].append((i, aj, ai))
    return nbr


def _atom_repr(a) -> str:
    return "u" if a is None else str(a)


def _rooted_code(state: MolGraphState, nbr: dict, root: int, parent: int) -> str:
    children = []
    for child, a_here, a_there in nbr[root]:
        if child == parent:
            continue
        children.append(f"[{_atom_repr(a_here)},{_atom_repr(a_there)}]"
                        + _rooted_code(state, nbr, child, root))
    children.sort()
    return f"({state.nodes[root]}|{''.join(children)})"


def _tree_centers(state: MolGraphState, nbr: dict) -> list[int]:
    n = state.n_nodes
    if n == 1:
        return [0]
    degree = {v: len(nbr[v]) for v in range(n)}
    layer = [v for v in range(n) if degree[v] <= 1]
    remaining = n
    while remaining > 2:
        remaining -= len(layer)
        nxt = []
        for v in layer:
            degree[v] = 0
            for u, _, _ in nbr[v]:
                if degree[u] > 1:
                    degree[u] -= 1
                    if degree[u] == 1:
                        nxt.append(u)
        layer = nxt
    return sorted(layer)


@lru_cache(maxsize=1 << 18)
def canonical_key(state: MolGraphState) -> str:
    """Stable key equal exactly for isomorphic fragment graphs.

    Uses a center-rooted canonical encoding of the labeled tree (fragment ids
    on nodes, attachment-atom assignments on link sides).
    """
    if state.n_nodes == 0:
        return "empty"
    nbr = _neighbors(state)
    centers = _tree_centers(state, nbr)
    code = min(_rooted_code(state, nbr, c, -1) for c in centers)
    return ("T" if state.terminal else "N") + code


def action_class_keys(state: MolGraphState, actions: Iterable,
                      vocab: FragmentVocabulary,
                      max_nodes: int = MAX_NODES_DEFAULT) -> tuple:
    """Canonical key of each action's successor state.

    Actions sharing a key land on the same canonical child, so a forward
    policy over canonical states sums their probabilities. Heavy lifting is
    absorbed by the canonical_key cache since toy state spaces repeat.
    """
    return tuple(canonical_key(apply_action(state, a, vocab, max_nodes))
                 for a in actions)


def equivalent_action_indices(state: MolGraphState, actions, taken,
                              child_key: str, vocab: FragmentVocabulary,
                              max_nodes: int = MAX_NODES_DEFAULT) -> list[int]:
    """Indices of actions whose successor is canonically ``child_key``.

    Only actions of the taken action's type with an identical payload
    (fragment id or atom index) can be equivalent, because isomorphisms
    preserve node labels and attachment indices; the child key is computed
    only for those few candidates.
    """
    out = []
    for i, action in enumerate(actions):
        if type(action) is not type(taken):
            continue
        if isinstance(taken, FragmentAddition) and action.fragment != taken.fragment:
            continue
        if isinstance(taken, AttachmentSpecification) and action.atom != taken.atom:
            continue
        if action == taken:
            out.append(i)
            continue
        if canonical_key(apply_action(state, action, vocab, max_nodes)) == child_key:
            out.append(i)
    return out


def fingerprint(state: MolGraphState) -> dict:
    """Count vector over fragment ids and fragment-pair link types."""
    if not state.terminal:
        raise ValueError("fingerprint is defined only for terminal states")
    counts: dict[str, int] = {}
    for fid in state.nodes:
        key = f"f{fid}"
        counts[key] = counts.get(key, 0) + 1
    for i, j, _, _ in state.links:
        a, b = sorted((state.nodes[i], state.nodes[j]))
        key = f"p{a}:{b}"
        counts[key] = counts.get(key, 0) + 1
    return counts


def parents(state: MolGraphState, vocab: FragmentVocabulary,
            max_nodes: int = MAX_NODES_DEFAULT) -> list:
    """All (parent, action) pairs reproducing ``state``, canonically deduplicated."""
    if state.n_nodes == 0:
        raise ValueError("the empty state has no parents")
    if state.terminal:
        prev = MolGraphState(nodes=state.nodes, links=state.links, terminal=False)
        return [(prev, StopConstruction())]
    target_key = canonical_key(state)
    found: dict[str, tuple] = {}

    def consider(parent: MolGraphState, action: GraphAction):
        try:
            nxt = apply_action(parent, action, vocab, max_nodes)
        except InvalidActionError:
            return
        if canonical_key(nxt) != target_key:
            return
        pkey = canonical_key(parent)
        if pkey not in found:
            found[pkey] = (parent, action)

    # undo one attachment specification
    for idx, (i, j, ai, aj) in enumerate(state.links):
        if ai is not None:
            links = state.links[:idx] + ((i, j, None, aj),) + state.links[idx + 1:]
            consider(MolGraphState(state.nodes, links), AttachmentSpecification((i, j), ai))
        if aj is not None:
            links = state.links[:idx] + ((i, j, ai, None),) + state.links[idx + 1:]
            consider(MolGraphState(state.nodes, links), AttachmentSpecification((j, i), aj))
    # undo the last fragment addition: any leaf whose link is fully unset
    if state.n_nodes == 1:
        consider(new_state(), FragmentAddition(None, state.nodes[0]))
    else:
        for v in range(state.n_nodes):
            incident = [(i, j, ai, aj) for (i, j, ai, aj) in state.links if v in (i, j)]
            if len(incident) != 1:
                continue
            i, j, ai, aj = incident[0]
            if ai is not None or aj is not None:
                continue
            other = j if v == i else i

            def remap(w):
                return w - 1 if w > v else w

            nodes = tuple(f for idx2, f in enumerate(state.nodes) if idx2 != v)
            links = tuple((remap(i2), remap(j2), a2, b2)
                          for (i2, j2, a2, b2) in state.links if v not in (i2, j2))
            consider(MolGraphState(nodes, links), FragmentAddition(remap(other), state.nodes[v]))
    return list(found.values())


def enumerate_terminals(vocab: FragmentVocabulary,
                        max_nodes: int = MAX_NODES_DEFAULT,
                        budget: int = ENUMERATION_BUDGET_DEFAULT) -> dict:
    """Exhaustive BFS over canonical states; returns canonical_key -> terminal state."""
    start = new_state()
    seen = {canonical_key(start): start}
    queue = deque([start])
    terminals: dict[str, MolGraphState] = {}
    while queue:
        current = queue.popleft()
        if current.terminal:
            terminals[canonical_key(current)] = current
            continue
        for action in valid_actions(current, vocab, max_nodes):
            child = apply_action(current, action, vocab, max_nodes)
            key = canonical_key(child)
            if key not in seen:
                if len(seen) >= budget:
                    raise EnumerationBudgetError(
                        f"state budget {budget} exceeded during enumeration")
                seen[key] = child
                queue.append(child)
    return terminals


# -- serialization -------------------------------------------------------------

def state_to_json(state: MolGraphState) -> dict:
    attachments = {}
    for i, j, ai, aj in state.links:
        if ai is not None:
            attachments[f"{i}->{j}"] = ai
        if aj is not None:
            attachments[f"{j}->{i}"] = aj
    return {
        "nodes": list(state.nodes),
        "links": [[i, j] for i, j, _, _ in state.links],
        "attachments": attachments,
    }


def state_from_json(record: dict, terminal: bool = True) -> MolGraphState:
    nodes = tuple(int(f) for f in record["nodes"])
    attachments = {}
    for key, atom in record.get("attachments", {}).items():
        src, dst = key.split("->")
        attachments[(int(src), int(dst))] = int(atom)
    links = []
    for i, j in record["links"]:
        i, j = int(i), int(j)
        a, b = min(i, j), max(i, j)
        links.append((a, b, attachments.get((a, b)), attachments.get((b, a))))
    return MolGraphState(nodes=nodes, links=tuple(links), terminal=terminal)
