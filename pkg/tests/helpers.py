"""Shared toy fixtures: vocabularies, pockets, and rollout utilities."""

import math

import numpy as np

from flowgen import fraggraph as fg
from flowgen import pocket as pk


def vocab_ab() -> fg.FragmentVocabulary:
    """Two fragments: A (1 attachment atom), B (2 attachment atoms)."""
    a = fg.make_fragment(0, [("C", ["hydrophobic"])], [0])
    b = fg.make_fragment(1, [("C", ["donor"]), ("N", ["acceptor"])], [0, 1],
                         bonds=[(0, 1)])
    return fg.FragmentVocabulary((a, b))


def vocab_rich() -> fg.FragmentVocabulary:
    """Three fragments with varied features for reward landscapes."""
    a = fg.make_fragment(0, [("C", ["donor"]), ("C", ["donor"]), ("C", [])],
                         [0, 1, 2], bonds=[(0, 1), (1, 2)])
    b = fg.make_fragment(1, [("N", ["acceptor"]), ("C", ["acceptor"])], [0, 1],
                         bonds=[(0, 1)])
    c = fg.make_fragment(2, [("C", ["hydrophobic"])], [0])
    return fg.FragmentVocabulary((a, b, c))


def helix_pocket(n_residues=8, pid="pocket", phase=0.0, pharmacophores=()):
    residues = []
    for i in range(n_residues):
        angle = phase + i * 100.0 * math.pi / 180.0
        ca = (2.3 * math.cos(angle), 2.3 * math.sin(angle), 1.5 * i)
        nn = (ca[0] - 0.8, ca[1] + 0.9, ca[2] - 0.4)
        cc = (ca[0] + 1.0, ca[1] - 0.2, ca[2] + 0.5)
        rtype = pk.RESIDUE_TYPES[i % len(pk.RESIDUE_TYPES)]
        residues.append(pk.Residue(type=rtype, n=nn, ca=ca, c=cc, index=i))
    points = tuple(pk.PharmacophorePoint(type=t, center=(1.0 * k, 0.5, 0.0))
                   for k, t in enumerate(pharmacophores))
    return pk.PocketStructure(id=pid, residues=tuple(residues),
                              pharmacophore_points=points)


def build_state(vocab, actions, max_nodes=9):
    state = fg.new_state()
    for a in actions:
        state = fg.apply_action(state, a, vocab, max_nodes)
    return state


def two_node_two_unset(vocab):
    return build_state(vocab, [fg.FragmentAddition(None, 0),
                               fg.FragmentAddition(0, 1)])


def random_rollout(vocab, rng, max_nodes=4):
    state = fg.new_state()
    while not state.terminal:
        actions = fg.valid_actions(state, vocab, max_nodes)
        state = fg.apply_action(state, actions[rng.integers(len(actions))],
                                vocab, max_nodes)
    return state
