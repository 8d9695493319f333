"""Operator surface: subcommands wiring vocabulary construction, training,
proxy regression, fine-tuning, sampling, verification, and evaluation.

Exit codes: 0 success, 1 user/config error, 2 runtime failure (oracle death,
retry budget exhaustion). All randomness flows from the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

ORACLE_ENV = "FLOWGEN_ORACLE_CMD"


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    pass


# -- config -----------------------------------------------------------------------

TOP_LEVEL_KEYS = {"seed", "out_dir", "vocabulary", "pockets", "scorer",
                  "reward", "trainer", "proxy", "docking_dataset"}
SCORER_KEYS = {"kind", "command", "timeout"}


def _check_keys(section: dict, allowed, context: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {context}: {sorted(unknown)}")


def _dataclass_kwargs(cls, section: dict, context: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    _check_keys(section, allowed, context)
    return section


def load_config(path: str | Path, overrides=()) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        target[parts[-1]] = parsed
    _check_keys(raw, TOP_LEVEL_KEYS, "config")
    if "scorer" in raw:
        _check_keys(raw["scorer"], SCORER_KEYS, "scorer")
    for pathkey in ("vocabulary", "docking_dataset"):
        if pathkey in raw and not Path(raw[pathkey]).exists():
            raise ConfigError(f"{pathkey} path does not exist: {raw[pathkey]}")
    for p in raw.get("pockets", ()):
        if not Path(p).exists():
            raise ConfigError(f"pocket file does not exist: {p}")
    return raw


def build_trainer_config(raw: dict):
    from .trainer import TrainerConfig
    section = dict(raw.get("trainer", {}))
    section.setdefault("seed", raw.get("seed", 0))
    try:
        return TrainerConfig(**_dataclass_kwargs(TrainerConfig, section, "trainer"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer config: {exc}")


def build_reward_spec(raw: dict):
    from .reward import RewardSpec
    try:
        return RewardSpec(**_dataclass_kwargs(RewardSpec, raw.get("reward", {}),
                                              "reward"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"reward config: {exc}")


def build_scorer(raw: dict, vocab):
    from .reward import OracleScorer, SyntheticScorer
    section = raw.get("scorer", {"kind": "synthetic"})
    kind = section.get("kind", "synthetic")
    if kind == "synthetic":
        return SyntheticScorer(vocab)
    if kind == "external-oracle":
        command = section.get("command") or os.environ.get(ORACLE_ENV)
        if not command:
            raise ConfigError(
                f"external-oracle scorer needs a command (config or ${ORACLE_ENV})")
        return OracleScorer(command, timeout=float(section.get("timeout", 120.0)))
    raise ConfigError(f"unknown scorer kind {kind!r}")


def load_inputs(raw: dict):
    from .pocket import parse_pocket
    from .vocab import load_vocabulary
    if "vocabulary" not in raw:
        raise ConfigError("config must name a vocabulary file")
    vocab = load_vocabulary(raw["vocabulary"])
    pockets = [parse_pocket(p) for p in raw.get("pockets", ())]
    return vocab, pockets


# -- subcommands --------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    from .vocab import (DecompositionRules, build_vocabulary, load_corpus,
                        save_vocabulary)
    corpus = load_corpus(args.corpus)
    rules = DecompositionRules(
        cleave_tagged=not args.no_tagged_cut,
        cleave_ring_attachments=not args.no_ring_cut,
        min_count=args.min_count, min_fraction=args.min_fraction)
    vocab = build_vocabulary(corpus, rules)
    save_vocabulary(vocab, args.out)
    sizes = {}
    for frag in vocab.fragments:
        sizes[frag.heavy_atom_count] = sizes.get(frag.heavy_atom_count, 0) + 1
    print(f"vocabulary: {len(vocab)} fragments from {len(corpus)} molecules "
          f"-> {args.out}")
    for hac in sorted(sizes):
        print(f"  heavy atoms {hac:>3}: {'#' * sizes[hac]} ({sizes[hac]})")
    return 0


def cmd_train(args) -> int:
    from .trainer import train
    raw = load_config(args.config, args.set or ())
    vocab, pockets = load_inputs(raw)
    if not pockets:
        raise ConfigError("training needs at least one pocket")
    config = build_trainer_config(raw)
    scorer = build_scorer(raw, vocab)
    out_dir = Path(raw.get("out_dir", "runs/train"))
    try:
        result = train(config, vocab, pockets, scorer, build_reward_spec(raw),
                       out_dir, resume=args.resume)
    finally:
        scorer.close() if hasattr(scorer, "close") else None
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"log: {result.log_path}")
    return 0


def cmd_train_proxy(args) -> int:
    from .proxy import ProxyTrainConfig, load_docking_records, train_proxy
    from .tensornn import save_params
    raw = load_config(args.config, args.set or ())
    vocab, pockets = load_inputs(raw)
    if "docking_dataset" not in raw:
        raise ConfigError("train-proxy needs a docking_dataset path")
    records = load_docking_records(raw["docking_dataset"])
    section = dict(raw.get("proxy", {}))
    section.setdefault("seed", raw.get("seed", 0))
    try:
        hyper = ProxyTrainConfig(**_dataclass_kwargs(ProxyTrainConfig, section,
                                                     "proxy"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"proxy config: {exc}")
    pocket_map = {p.id: p for p in pockets}
    missing = {r.pocket_id for r in records} - set(pocket_map)
    if missing:
        raise ConfigError(f"docking records reference unknown pockets: "
                          f"{sorted(missing)[:5]}")
    result = train_proxy(records, pocket_map, vocab, hyper)
    out_dir = Path(raw.get("out_dir", "runs/proxy"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out_dir / "proxy")
    print(f"proxy params: {out_dir / 'proxy'}.json (best val loss "
          f"{result.best_val_loss:.6g})")
    return 0


def cmd_finetune(args) -> int:
    from .pocket import parse_pocket
    from .trainer import finetune
    raw = load_config(args.config, args.set or ())
    vocab, _ = load_inputs(raw)
    pocket = parse_pocket(args.pocket)
    config = build_trainer_config(raw)
    scorer = build_scorer(raw, vocab)
    out_dir = Path(raw.get("out_dir", "runs/finetune"))
    try:
        result = finetune(args.checkpoint, pocket, scorer,
                          build_reward_spec(raw), vocab, config, out_dir)
    finally:
        scorer.close() if hasattr(scorer, "close") else None
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"top-{config.top_k}: {result.topk_path} "
          f"({len(result.topk)} molecules)")
    return 0


def cmd_sample(args) -> int:
    from .evaluation import emit_report
    from .pocket import parse_pocket
    from .sampling import default_workers, sample_unique, score_and_record
    from .trainer import checkpoint_meta
    raw = load_config(args.config, args.set or ())
    vocab, _ = load_inputs(raw)
    pocket = parse_pocket(args.pocket)
    meta = checkpoint_meta(args.checkpoint)
    max_nodes = meta["trainer_config"]["max_nodes"]
    beta = args.beta if args.beta is not None else \
        meta["trainer_config"].get("beta_inference", 64.0)
    workers = args.workers or default_workers()
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    t0 = time.perf_counter()
    result = sample_unique(args.checkpoint, pocket, vocab, args.n, beta, seed,
                           max_nodes, workers=workers)
    wall = time.perf_counter() - t0
    scorer = build_scorer(raw, vocab)
    try:
        records = score_and_record(result.states, pocket, scorer,
                                   build_reward_spec(raw), vocab)
    finally:
        scorer.close() if hasattr(scorer, "close") else None
    out_dir = Path(args.out or raw.get("out_dir", "runs/sample"))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "molecules.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "pocket_id": r.pocket_id, "canonical_key": r.canonical_key,
                "molecule": r.molecule, "ds": r.triple.ds, "qed": r.triple.qed,
                "sa_raw": r.triple.sa_raw, "reward": r.reward}) + "\n")
    if records:
        emit_report(records, out_dir, wall_time_s=wall)
    print(f"{len(records)} unique molecules in {wall:.2f}s "
          f"({result.rollouts_used} rollouts, {workers} workers) -> {out_dir}")
    if result.exhausted:
        raise RunFailure(f"retry budget exhausted: produced {len(records)} "
                         f"of {args.n} requested molecules")
    return 0


def cmd_verify(args) -> int:
    from .evaluation import verify_distribution
    from .pocket import (PocketEncoderConfig, encode_pocket, parse_pocket)
    from .trainer import checkpoint_meta, load_checkpoint
    raw = load_config(args.config, args.set or ())
    vocab, _ = load_inputs(raw)
    pocket = parse_pocket(args.pocket)
    gfn, encoder_params, policy_cfg = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    max_nodes = meta["trainer_config"]["max_nodes"]
    emb = encode_pocket(pocket, encoder_params,
                        PocketEncoderConfig(hidden_dim=policy_cfg.pocket_dim))
    scorer = build_scorer(raw, vocab)
    try:
        tv, table = verify_distribution(
            gfn.target, vocab, emb.vector, args.beta, args.n, scorer, pocket,
            build_reward_spec(raw), max_nodes,
            seed=args.seed if args.seed is not None else raw.get("seed", 0))
    finally:
        scorer.close() if hasattr(scorer, "close") else None
    out_dir = Path(args.out or raw.get("out_dir", "runs/verify"))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "distribution.csv", "w") as fh:
        fh.write("canonical_key,reward,target_prob,empirical_prob\n")
        for key, reward, target, emp in table:
            fh.write(f"{json.dumps(key)},{reward:.6g},{target:.6g},{emp:.6g}\n")
    print(f"TV distance: {tv:.4f} over {len(table)} terminal molecules "
          f"({args.n} samples at beta={args.beta})")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import (MetricThresholds, MoleculeRecord, diversity,
                             emit_report, high_affinity, success_rate)
    from .reward import ScoreTriple
    records = []
    for lineno, line in enumerate(Path(args.records).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            records.append(MoleculeRecord(
                pocket_id=rec["pocket_id"], canonical_key=rec["canonical_key"],
                molecule=rec["molecule"],
                triple=ScoreTriple(ds=rec["ds"], qed=rec["qed"],
                                   sa_raw=rec["sa_raw"]),
                reward=rec["reward"]))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ConfigError(f"{args.records}:{lineno}: {exc}")
    if not records:
        raise ConfigError(f"no records in {args.records}")
    thresholds = MetricThresholds(qed_min=args.qed_min, sa_min=args.sa_min,
                                  ds_max=args.ds_max)
    out_dir = Path(args.out)
    paths = emit_report(records, out_dir, thresholds,
                        reference_ds=args.reference_ds)
    rate = success_rate(records, thresholds)
    print(f"records: {len(records)}")
    print(f"success rate: {rate:.3f}")
    if len(records) >= 2:
        print(f"diversity: {diversity(records):.3f}")
    if args.reference_ds is not None:
        print(f"high affinity: {high_affinity(records, args.reference_ds):.3f}")
    print(f"report: {paths['aggregate']}")
    return 0


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgen",
        description="Pocket-conditioned GFlowNet molecule generation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a fragment vocabulary")
    p.add_argument("corpus", help="JSON-lines corpus of annotated molecules")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--min-fraction", type=float, default=0.0)
    p.add_argument("--no-ring-cut", action="store_true")
    p.add_argument("--no-tagged-cut", action="store_true")
    p.set_defaults(func=cmd_build_vocab)

    for name, func, extra in (
            ("train", cmd_train, ()),
            ("train-proxy", cmd_train_proxy, ()),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "train":
            p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("finetune", help="fine-tune on a single pocket")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pocket", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="sample unique scored molecules")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pocket", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="TV distance against the exact target")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pocket", required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("-n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="metrics report over sampled molecules")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qed-min", type=float, default=0.25)
    p.add_argument("--sa-min", type=float, default=0.59)
    p.add_argument("--ds-max", type=float, default=-8.18)
    p.add_argument("--reference-ds", type=float, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RunFailure as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map known runtime failures to 2
        from .fraggraph import EnumerationBudgetError
        from .pocket import PocketSchemaError
        from .reward import OracleError
        from .vocab import CorpusError
        if isinstance(exc, (OracleError, EnumerationBudgetError)):
            print(f"failure: {exc}", file=sys.stderr)
            return 2
        if isinstance(exc, (PocketSchemaError, CorpusError, FileNotFoundError,
                            ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
