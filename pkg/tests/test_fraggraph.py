"""State space semantics: masking, transitions, canonical keys, enumeration."""

import itertools

import numpy as np
import pytest

from flowgen import fraggraph as fg


def frag_a():
    return fg.make_fragment(0, [("C", [])], [0])


def frag_b():
    return fg.make_fragment(1, [("C", []), ("N", ["donor"])], [0, 1], bonds=[(0, 1)])


def vocab_a():
    return fg.FragmentVocabulary((frag_a(),))


def vocab_ab():
    return fg.FragmentVocabulary((frag_a(), frag_b()))


def brute_force_isomorphic(s1: fg.MolGraphState, s2: fg.MolGraphState) -> bool:
    """Oracle: try every node permutation preserving labels and attachments."""
    if s1.terminal != s2.terminal or len(s1.nodes) != len(s2.nodes):
        return False
    n = len(s1.nodes)

    def link_set(state, perm):
        out = set()
        for i, j, ai, aj in state.links:
            pi, pj = perm[i], perm[j]
            if pi < pj:
                out.add((pi, pj, ai, aj))
            else:
                out.add((pj, pi, aj, ai))
        return out

    target = link_set(s2, list(range(n)))
    for perm in itertools.permutations(range(n)):
        if all(s1.nodes[v] == s2.nodes[perm[v]] for v in range(n)):
            if link_set(s1, list(perm)) == target:
                return True
    return False


def build(vocab, actions, max_nodes=9):
    state = fg.new_state()
    for a in actions:
        state = fg.apply_action(state, a, vocab, max_nodes)
    return state


# -- new_state ----------------------------------------------------------------

def test_new_state_is_empty():
    assert fg.new_state().n_nodes == 0


def test_new_states_share_canonical_key():
    assert fg.canonical_key(fg.new_state()) == fg.canonical_key(fg.new_state())


def test_empty_state_offers_no_stop():
    actions = fg.valid_actions(fg.new_state(), vocab_ab())
    assert not any(isinstance(a, fg.StopConstruction) for a in actions)


# -- valid_actions --------------------------------------------------------------

def test_empty_state_offers_one_addition_per_fragment():
    frags = tuple(fg.make_fragment(i, [("C", [])], [0]) for i in range(3))
    vocab = fg.FragmentVocabulary(frags)
    actions = fg.valid_actions(fg.new_state(), vocab)
    assert len(actions) == 3
    assert all(isinstance(a, fg.FragmentAddition) and a.source is None for a in actions)


def test_single_node_offers_additions_plus_stop():
    vocab = vocab_ab()
    state = build(vocab, [fg.FragmentAddition(None, 0)])
    actions = fg.valid_actions(state, vocab, max_nodes=9)
    adds = [a for a in actions if isinstance(a, fg.FragmentAddition)]
    stops = [a for a in actions if isinstance(a, fg.StopConstruction)]
    assert len(adds) == len(vocab)
    assert len(stops) == 1


def test_unset_edge_masks_stop():
    vocab = vocab_ab()
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1)])
    actions = fg.valid_actions(state, vocab)
    assert not any(isinstance(a, fg.StopConstruction) for a in actions)


def test_terminal_state_rejects_action_listing():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.StopConstruction()])
    with pytest.raises(fg.InvalidActionError):
        fg.valid_actions(state, vocab)


def test_node_without_free_slot_offers_no_addition():
    vocab = vocab_a()  # one attachment atom per fragment
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 0)])
    actions = fg.valid_actions(state, vocab)
    # both nodes have their single atom claimed by the link
    assert not any(isinstance(a, fg.FragmentAddition) for a in actions)


# -- apply_action ---------------------------------------------------------------

def test_root_addition_creates_single_node():
    state = build(vocab_ab(), [fg.FragmentAddition(None, 1)])
    assert state.nodes == (1,)
    assert state.links == ()


def test_addition_creates_link_with_two_unset_edges():
    state = build(vocab_ab(), [fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1)])
    assert state.n_nodes == 2
    assert len(state.links) == 1
    assert set(state.unset_directed_edges()) == {(0, 1), (1, 0)}


def test_stop_marks_terminal():
    vocab = vocab_ab()
    state = build(vocab, [
        fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1),
        fg.AttachmentSpecification((0, 1), 0), fg.AttachmentSpecification((1, 0), 0),
        fg.StopConstruction(),
    ])
    assert state.terminal


def test_apply_is_pure():
    vocab = vocab_ab()
    state = build(vocab, [fg.FragmentAddition(None, 0)])
    fg.apply_action(state, fg.FragmentAddition(0, 1), vocab)
    assert state.n_nodes == 1
    assert state.links == ()


def test_invalid_actions_name_the_rule():
    vocab = vocab_a()
    with pytest.raises(fg.InvalidActionError, match="ROOT"):
        fg.apply_action(build(vocab, [fg.FragmentAddition(None, 0)]),
                        fg.FragmentAddition(None, 0), vocab)
    with pytest.raises(fg.InvalidActionError, match="unset"):
        fg.apply_action(build(vocab, [fg.FragmentAddition(None, 0),
                                      fg.FragmentAddition(0, 0)]),
                        fg.StopConstruction(), vocab)
    with pytest.raises(fg.InvalidActionError, match="budget"):
        fg.apply_action(build(vocab, [fg.FragmentAddition(None, 0)]),
                        fg.FragmentAddition(0, 0), vocab, max_nodes=1)


def test_attachment_atom_reuse_rejected():
    vocab = vocab_ab()
    state = build(vocab, [
        fg.FragmentAddition(None, 1), fg.FragmentAddition(0, 0),
        fg.AttachmentSpecification((0, 1), 0),
    ])
    state = fg.apply_action(state, fg.FragmentAddition(0, 0), vocab)
    with pytest.raises(fg.InvalidActionError, match="already used"):
        fg.apply_action(state, fg.AttachmentSpecification((0, 2), 0), vocab)


# -- heavy_atom_count -------------------------------------------------------------

def test_heavy_atom_counts():
    benzene = fg.make_fragment(0, [("C", ["aromatic", "ring"])] * 6, [0],
                               bonds=[(i, (i + 1) % 6) for i in range(6)])
    methyl = fg.make_fragment(1, [("C", [])], [0])
    vocab = fg.FragmentVocabulary((benzene, methyl))
    one = build(vocab, [fg.FragmentAddition(None, 0)])
    assert fg.heavy_atom_count(one, vocab) == 6
    two = fg.apply_action(one, fg.FragmentAddition(0, 1), vocab)
    assert fg.heavy_atom_count(two, vocab) == 7
    with pytest.raises(ValueError):
        fg.heavy_atom_count(fg.new_state(), vocab)


def test_hydrogens_not_counted_as_heavy():
    frag = fg.make_fragment(0, [("C", []), ("H", []), ("H", [])], [0],
                            bonds=[(0, 1), (0, 2)])
    assert frag.heavy_atom_count == 1


# -- canonical_key -----------------------------------------------------------------

def test_construction_order_does_not_change_key():
    vocab = vocab_ab()
    ab = build(vocab, [
        fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1),
        fg.AttachmentSpecification((0, 1), 0), fg.AttachmentSpecification((1, 0), 0),
    ])
    ba = build(vocab, [
        fg.FragmentAddition(None, 1), fg.FragmentAddition(0, 0),
        fg.AttachmentSpecification((1, 0), 0), fg.AttachmentSpecification((0, 1), 0),
    ])
    assert fg.canonical_key(ab) == fg.canonical_key(ba)
    assert brute_force_isomorphic(ab, ba)


def test_attachment_atom_choice_changes_key():
    vocab = vocab_ab()
    prefix = [fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1),
              fg.AttachmentSpecification((0, 1), 0)]
    via0 = build(vocab, prefix + [fg.AttachmentSpecification((1, 0), 0)])
    via1 = build(vocab, prefix + [fg.AttachmentSpecification((1, 0), 1)])
    assert fg.canonical_key(via0) != fg.canonical_key(via1)


def test_empty_state_sentinel_key():
    assert fg.canonical_key(fg.new_state()) == "empty"


def test_terminal_flag_distinguishes_key():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0)])
    done = fg.apply_action(state, fg.StopConstruction(), vocab)
    assert fg.canonical_key(state) != fg.canonical_key(done)


def all_representations(vocab, max_nodes):
    """Every reachable representation (not canonicalized), by exact identity."""
    seen = {fg.new_state()}
    frontier = [fg.new_state()]
    while frontier:
        state = frontier.pop()
        if state.terminal:
            continue
        for action in fg.valid_actions(state, vocab, max_nodes):
            child = fg.apply_action(state, action, vocab, max_nodes)
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return sorted(seen, key=repr)


def test_canonical_key_matches_isomorphism_oracle_up_to_4_nodes():
    vocab = vocab_ab()
    reps = all_representations(vocab, max_nodes=4)
    rng = np.random.default_rng(0)
    reps = [r for r in reps if r.n_nodes <= 4]
    # exhaustive within same-key groups, sampled across groups
    by_key = {}
    for r in reps:
        by_key.setdefault(fg.canonical_key(r), []).append(r)
    for group in by_key.values():
        for a, b in zip(group, group[1:]):
            assert brute_force_isomorphic(a, b)
    keys = sorted(by_key)
    for _ in range(400):
        k1, k2 = rng.choice(len(keys), size=2, replace=False)
        a = by_key[keys[k1]][0]
        b = by_key[keys[k2]][0]
        assert not brute_force_isomorphic(a, b)


# -- fingerprint -------------------------------------------------------------------

def test_fingerprint_single_fragment():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.StopConstruction()])
    assert fg.fingerprint(state) == {"f0": 1}


def test_fingerprint_pair_counts():
    vocab = vocab_ab()
    state = build(vocab, [
        fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1),
        fg.AttachmentSpecification((0, 1), 0), fg.AttachmentSpecification((1, 0), 0),
        fg.StopConstruction(),
    ])
    assert fg.fingerprint(state) == {"f0": 1, "f1": 1, "p0:1": 1}


def test_fingerprint_requires_terminal():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0)])
    with pytest.raises(ValueError):
        fg.fingerprint(state)


# -- parents ----------------------------------------------------------------------

def test_single_node_parent_is_empty_state():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0)])
    result = fg.parents(state, vocab)
    assert len(result) == 1
    parent, action = result[0]
    assert parent.n_nodes == 0
    assert isinstance(action, fg.FragmentAddition)


def test_terminal_parent_is_unflagged_twin():
    vocab = vocab_a()
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.StopConstruction()])
    result = fg.parents(state, vocab)
    assert len(result) == 1
    parent, action = result[0]
    assert not parent.terminal and parent.nodes == state.nodes
    assert isinstance(action, fg.StopConstruction)


def test_two_parents_when_either_edge_could_be_last():
    vocab = vocab_ab()
    state = build(vocab, [
        fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 1),
        fg.AttachmentSpecification((0, 1), 0), fg.AttachmentSpecification((1, 0), 0),
    ])
    assert len(fg.parents(state, vocab)) == 2


def test_empty_state_has_no_parents():
    with pytest.raises(ValueError):
        fg.parents(fg.new_state(), vocab_a())


def test_parents_match_exhaustive_inverse_search():
    vocab = vocab_ab()
    max_nodes = 3
    reps = all_representations(vocab, max_nodes)
    # forward edge map over canonical keys
    in_edges: dict[str, set] = {}
    for state in reps:
        if state.terminal:
            continue
        skey = fg.canonical_key(state)
        for action in fg.valid_actions(state, vocab, max_nodes):
            child = fg.apply_action(state, action, vocab, max_nodes)
            in_edges.setdefault(fg.canonical_key(child), set()).add(skey)
    checked = 0
    seen_keys = set()
    for state in reps:
        key = fg.canonical_key(state)
        if state.n_nodes == 0 or key in seen_keys:
            continue
        seen_keys.add(key)
        got = {fg.canonical_key(p) for p, _ in fg.parents(state, vocab, max_nodes)}
        assert got == in_edges[key], key
        checked += 1
    assert checked > 20


def test_apply_then_parents_round_trips():
    vocab = vocab_ab()
    rng = np.random.default_rng(3)
    state = fg.new_state()
    for _ in range(200):
        if state.terminal:
            state = fg.new_state()
            continue
        actions = fg.valid_actions(state, vocab, 4)
        action = actions[rng.integers(len(actions))]
        child = fg.apply_action(state, action, vocab, 4)
        parent_keys = {fg.canonical_key(p) for p, _ in fg.parents(child, vocab, 4)}
        assert fg.canonical_key(state) in parent_keys
        state = child


# -- enumerate_terminals -------------------------------------------------------------

def test_enumerate_single_fragment_max1():
    assert len(fg.enumerate_terminals(vocab_a(), max_nodes=1)) == 1


def test_enumerate_single_fragment_max2():
    terminals = fg.enumerate_terminals(vocab_a(), max_nodes=2)
    assert len(terminals) == 2  # {A} and {A-A}


def test_enumerate_two_fragments_max2_matches_hand_count():
    # terminals: A, B, A-A, A-B via B atom0, A-B via B atom1,
    # B-B with side pairs {0,0}, {0,1}, {1,1}
    terminals = fg.enumerate_terminals(vocab_ab(), max_nodes=2)
    assert len(terminals) == 8


def test_enumeration_budget_guard():
    with pytest.raises(fg.EnumerationBudgetError):
        fg.enumerate_terminals(vocab_ab(), max_nodes=4, budget=10)


# -- fuzz ---------------------------------------------------------------------------

def test_random_rollouts_always_reach_valid_terminals():
    vocab = vocab_ab()
    max_nodes = 4
    max_attach = vocab.max_attachment_atoms
    step_bound = max_nodes * (1 + 2 * max_attach)
    rng = np.random.default_rng(42)
    for _ in range(10_000):
        state = fg.new_state()
        steps = 0
        while not state.terminal:
            actions = fg.valid_actions(state, vocab, max_nodes)
            assert actions, "non-terminal state must offer actions"
            state = fg.apply_action(state, actions[rng.integers(len(actions))],
                                    vocab, max_nodes)
            steps += 1
            assert steps <= step_bound
        assert not state.unset_directed_edges()
        # connectivity: tree reachability over links
        if state.n_nodes > 1:
            seen = {0}
            frontier = [0]
            adj = {v: [] for v in range(state.n_nodes)}
            for i, j, _, _ in state.links:
                adj[i].append(j)
                adj[j].append(i)
            while frontier:
                v = frontier.pop()
                for u in adj[v]:
                    if u not in seen:
                        seen.add(u)
                        frontier.append(u)
            assert len(seen) == state.n_nodes


def test_action_class_keys_group_symmetric_actions():
    vocab = vocab_a()
    # two A leaves on one A ... build star impossible with 1 atom; use A-A with both unset
    state = build(vocab, [fg.FragmentAddition(None, 0), fg.FragmentAddition(0, 0)], 4)
    actions = fg.valid_actions(state, vocab, 4)
    keys = fg.action_class_keys(state, actions, vocab, 4)
    spec_keys = [k for a, k in zip(actions, keys)
                 if isinstance(a, fg.AttachmentSpecification)]
    # specifying 0->1 or 1->0 leads to isomorphic children
    assert len(spec_keys) == 2
    assert spec_keys[0] == spec_keys[1]
