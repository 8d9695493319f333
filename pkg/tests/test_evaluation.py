"""Metrics, exact-distribution verification, and report emission."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from flowgen import evaluation as ev
from flowgen import fraggraph as fg
from flowgen.policy import Policy, PolicyConfig, zero_policy_params
from flowgen.reward import RewardSpec, ScoreTriple
from helpers import helix_pocket, vocab_ab
from test_trainer import KeyedScorer, single_vocab, tiny_policy


def record(pocket_id="p", key="k", nodes=(0,), links=(), ds=-9.0, qed=0.5,
           sa_norm=0.8, reward=0.5):
    sa_raw = 10.0 - 9.0 * sa_norm
    state = fg.MolGraphState(nodes=tuple(nodes), links=tuple(links), terminal=True)
    return ev.MoleculeRecord(
        pocket_id=pocket_id, canonical_key=key,
        molecule=fg.state_to_json(state),
        triple=ScoreTriple(ds=ds, qed=qed, sa_raw=sa_raw), reward=reward)


# -- diversity ------------------------------------------------------------------

def test_identical_molecules_zero_diversity():
    a = record(key="a", nodes=(0,))
    b = record(key="b", nodes=(0,))
    assert ev.diversity([a, b]) == 0.0


def test_disjoint_fingerprints_full_diversity():
    a = record(key="a", nodes=(0,))
    b = record(key="b", nodes=(1,))
    assert ev.diversity([a, b]) == 1.0


def test_subset_fingerprint_distance_half():
    a = record(key="a", nodes=(0,))
    link = (0, 1, 0, 0)
    b = record(key="b", nodes=(0, 1), links=(link,))
    # fingerprints {f0:1} vs {f0:1, f1:1, p0:1}: sum min 1, sum max 3
    assert ev.tanimoto_distance(ev.record_fingerprint(a),
                                ev.record_fingerprint(b)) == pytest.approx(2 / 3)
    fa = {"A": 1}
    fb = {"A": 1, "B": 1}
    assert ev.tanimoto_distance(fa, fb) == pytest.approx(0.5)


def test_diversity_needs_two_records():
    with pytest.raises(ValueError):
        ev.diversity([record()])


# -- success rate ------------------------------------------------------------------

def test_success_rate_passing_record():
    r = record(ds=-9.0, qed=0.3, sa_norm=0.6)
    assert ev.success_rate([r]) == 1.0


def test_success_rate_ds_boundary_strict():
    r = record(ds=-8.0, qed=0.3, sa_norm=0.6)
    assert ev.success_rate([r]) == 0.0  # -8.0 is not < -8.18


def test_success_rate_empty_set():
    assert ev.success_rate([]) == 0.0


def test_success_rate_monotone_in_thresholds():
    rng = np.random.default_rng(0)
    records = [record(key=str(i), ds=float(rng.uniform(-12, -5)),
                      qed=float(rng.uniform(0, 1)),
                      sa_norm=float(rng.uniform(0, 1))) for i in range(50)]
    base = ev.MetricThresholds()
    relaxed = ev.MetricThresholds(qed_min=0.1, sa_min=0.4, ds_max=-7.0)
    assert ev.success_rate(records, relaxed) >= ev.success_rate(records, base)


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(1)
    records = [record(key=str(i), nodes=(i % 2,), ds=float(rng.uniform(-12, -5)),
                      reward=float(rng.uniform(0, 1))) for i in range(10)]
    shuffled = list(records)
    rng.shuffle(shuffled)
    assert ev.success_rate(records) == ev.success_rate(shuffled)
    assert ev.diversity(records) == pytest.approx(ev.diversity(shuffled))
    assert ev.topk_stats(records, 3) == ev.topk_stats(shuffled, 3)


# -- high affinity -------------------------------------------------------------------

def test_high_affinity_strict_inequality():
    assert ev.high_affinity([record(ds=-8.0)], -8.0) == 0.0
    assert ev.high_affinity([record(ds=-9.0)], -8.0) == 1.0


def test_high_affinity_mixed():
    records = [record(key=str(i), ds=d) for i, d in
               enumerate([-9.0, -8.5, -7.0, -6.0])]
    assert ev.high_affinity(records, -8.0) == 0.5


# -- topk -----------------------------------------------------------------------------

def test_topk_with_k_exceeding_records():
    records = [record(key=str(i), reward=0.1 * (i + 1)) for i in range(3)]
    assert ev.topk_stats(records, 10) == ev.topk_stats(records, 3)


def test_topk_single_best():
    records = [record(key="a", reward=0.1, ds=-5.0),
               record(key="b", reward=0.9, ds=-11.0)]
    ds, reward, _ = ev.topk_stats(records, 1)
    assert ds == -11.0 and reward == 0.9


def test_topk_mean_over_best_pair():
    records = [record(key=str(i), reward=r) for i, r in
               enumerate([0.1, 0.2, 0.3])]
    _, reward, _ = ev.topk_stats(records, 2)
    assert reward == pytest.approx(0.25)


# -- verify_distribution -----------------------------------------------------------------

def test_single_terminal_tv_zero_for_any_policy():
    vocab = single_vocab()
    policy = tiny_policy(vocab, seed=9)
    scorer = KeyedScorer({}, vocab, default=0.7)
    pocket = helix_pocket(3)
    tv, table = ev.verify_distribution(policy, vocab, np.zeros(16, np.float32),
                                       1.0, 1000, scorer, pocket, RewardSpec(),
                                       max_nodes=1, seed=0)
    assert tv == 0.0
    assert len(table) == 1


def test_uniform_sampler_matches_uniform_target():
    vocab = vocab_ab()
    terms = fg.enumerate_terminals(vocab, max_nodes=2)
    keys = sorted(terms)
    target = {k: 1.0 / len(keys) for k in keys}
    rng = np.random.default_rng(3)
    empirical = ev.empirical_distribution(
        lambda r: keys[r.integers(len(keys))], 100_000, rng)
    assert ev.tv_distance(target, empirical) <= 0.02


def test_untrained_policy_far_from_skewed_target():
    vocab = single_vocab()
    terms = fg.enumerate_terminals(vocab, max_nodes=2)
    keys = sorted(terms, key=lambda k: terms[k].n_nodes)
    scorer = KeyedScorer({keys[0]: 1.0, keys[1]: 3.0}, vocab)
    policy = tiny_policy(vocab, zero=True)
    pocket = helix_pocket(3)
    tv, _ = ev.verify_distribution(policy, vocab, np.zeros(16, np.float32),
                                   1.0, 20_000, scorer, pocket, RewardSpec(),
                                   max_nodes=2, seed=1)
    # uniform-over-actions walker puts 0.5 on each terminal vs (0.25, 0.75)
    assert abs(tv - 0.25) < 0.02


def test_target_table_sums_to_one():
    vocab = vocab_ab()
    scorer = KeyedScorer({}, vocab, default=0.4)
    policy = tiny_policy(vocab, seed=4)
    pocket = helix_pocket(3)
    tv, table = ev.verify_distribution(policy, vocab, np.zeros(16, np.float32),
                                       1.0, 500, scorer, pocket, RewardSpec(),
                                       max_nodes=2, seed=2)
    assert abs(sum(row[2] for row in table) - 1.0) < 1e-9


def test_tempered_target_concentrates():
    rewards = {"a": 1.0, "b": 3.0}
    flat = ev.target_distribution(rewards, 1.0)
    sharp = ev.target_distribution(rewards, 8.0)
    assert sharp["b"] > flat["b"] > 0.5


# -- emit_report ----------------------------------------------------------------------------

def sample_records():
    rng = np.random.default_rng(5)
    out = []
    for i in range(6):
        out.append(record(pocket_id="p1" if i < 3 else "p2", key=f"m{i}",
                          nodes=(i % 2,), ds=float(rng.uniform(-11, -6)),
                          qed=float(rng.uniform(0.2, 0.9)),
                          sa_norm=float(rng.uniform(0.4, 0.95)),
                          reward=float(rng.uniform(0.01, 1.0))))
    return out


def test_report_row_count(tmp_path):
    records = sample_records()
    paths = ev.emit_report(records, tmp_path)
    lines = paths["molecules"].read_text().strip().splitlines()
    assert len(lines) == len(records) + 1


def test_report_deterministic_bytes(tmp_path):
    records = sample_records()
    p1 = ev.emit_report(records, tmp_path / "a")
    p2 = ev.emit_report(records, tmp_path / "b")
    for key in p1:
        assert p1[key].read_bytes() == p2[key].read_bytes()


def test_report_svg_is_well_formed_xml(tmp_path):
    paths = ev.emit_report(sample_records(), tmp_path)
    for key in ("ds_histogram", "reward_histogram"):
        root = ET.fromstring(paths[key].read_text())
        assert root.tag.endswith("svg")


def test_report_aggregate_has_per_pocket_rows(tmp_path):
    paths = ev.emit_report(sample_records(), tmp_path, reference_ds=-8.0,
                           wall_time_s=1.5)
    lines = paths["aggregate"].read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 pockets
    assert lines[0].split(",")[0] == "pocket_id"


def test_report_requires_records(tmp_path):
    with pytest.raises(ValueError):
        ev.emit_report([], tmp_path)
