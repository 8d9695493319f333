"""Double-GFN training loop: target-network rollouts, trajectory-balance
updates on the online network, Polyak averaging, and per-pocket fine-tuning.

States are identified canonically: the forward log-probability of a step sums
over all actions landing on the same canonical child, and the backward policy
is uniform over canonically distinct parents. With those two choices the
trajectory-balance fixed point samples canonical molecules with probability
proportional to reward^beta exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensornn as tn
from .fraggraph import (FragmentVocabulary, MolGraphState, StopConstruction,
                        Trajectory, apply_action, canonical_key,
                        heavy_atom_count, new_state, parents, state_to_json,
                        valid_actions, equivalent_action_indices)
from .pocket import (PocketEncoderConfig, PocketStructure, encode_pocket,
                     init_pocket_encoder)
from .policy import (ActionLogits, Policy, PolicyConfig, action_distribution,
                     action_logit_vector, condition, init_policy_params,
                     sample_action)
from .reward import RewardSpec, compose


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 30_000
    batch_size: int = 8
    lr: float = 1e-4
    z_lr: float = 1e-3
    weight_decay: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.99
    copy_every_n: int = 0  # 0: Polyak every step; n>0: hard copy every n steps
    epsilon: float = 0.01
    max_nodes: int = 9
    beta_min: float = 0.0
    beta_max: float = 64.0
    beta_inference: float = 64.0
    seed: int = 0
    checkpoint_every: int = 1000
    finetune_steps: int = 300
    finetune_batch_size: int = 64
    top_k: int = 100
    hidden_dim: int = 256
    layers: int = 2
    heads: int = 4
    pocket_dim: int = 128
    beta_bins: int = 32

    def __post_init__(self):
        if not 0.0 <= self.beta_min <= self.beta_max:
            raise ValueError("invalid beta range")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if self.batch_size < 1 or self.max_nodes < 1:
            raise ValueError("batch_size and max_nodes must be positive")


@dataclass
class DoubleGfnState:
    online: Policy
    target: Policy
    opt_policy: tn.OptimizerState
    opt_z: tn.OptimizerState
    step: int = 0


def derive_rng(seed: int, *scope) -> np.random.Generator:
    parts = [seed] + [s if isinstance(s, int) else abs(hash(s)) % (2**31) for s in scope]
    return np.random.default_rng(np.random.SeedSequence(parts))


def make_double_gfn(policy_cfg: PolicyConfig, config: TrainerConfig) -> DoubleGfnState:
    online = Policy(policy_cfg, init_policy_params(policy_cfg, seed=config.seed))
    target = Policy(policy_cfg, online.params.copy())
    is_z = lambda name: name.startswith("logz.")
    opt_policy = tn.make_optimizer(
        "adam", online.params.subset(lambda n: not is_z(n)), lr=config.lr,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        weight_decay=config.weight_decay)
    opt_z = tn.make_optimizer(
        "adam", online.params.subset(is_z), lr=config.z_lr,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        weight_decay=config.weight_decay)
    return DoubleGfnState(online=online, target=target,
                          opt_policy=opt_policy, opt_z=opt_z)


# -- rollouts ------------------------------------------------------------------

def sample_trajectory(policy: Policy, cond: np.ndarray,
                      vocab: FragmentVocabulary, rng: np.random.Generator,
                      max_nodes: int, epsilon: float = 0.01) -> Trajectory:
    return rollout_batch(policy, cond[None, :], vocab, [rng], max_nodes, epsilon)[0]


def rollout_batch(policy: Policy, conds: np.ndarray, vocab: FragmentVocabulary,
                  rngs: list, max_nodes: int, epsilon: float) -> list[Trajectory]:
    """Roll all trajectories forward in lockstep so policy calls stay batched."""
    n = len(rngs)
    states = [new_state() for _ in range(n)]
    traj_states = [[states[i]] for i in range(n)]
    traj_actions: list[list] = [[] for _ in range(n)]
    traj_logps: list[list] = [[] for _ in range(n)]
    active = list(range(n))
    with tn.no_grad():
        while active:
            batch_states = [states[i] for i in active]
            batch_conds = conds[active]
            logits = policy.forward_batch(batch_states, batch_conds, vocab)
            next_active = []
            for slot, i in enumerate(active):
                acts = valid_actions(states[i], vocab, max_nodes)
                vec = action_logit_vector(states[i], acts, logits[slot], vocab)
                probs = action_distribution(vec)
                action, logp = sample_action(acts, probs, rngs[i], epsilon)
                states[i] = apply_action(states[i], action, vocab, max_nodes)
                traj_states[i].append(states[i])
                traj_actions[i].append(action)
                traj_logps[i].append(logp)
                if not states[i].terminal:
                    next_active.append(i)
            active = next_active
    return [Trajectory(states=tuple(traj_states[i]), actions=tuple(traj_actions[i]),
                       log_probs=tuple(traj_logps[i])) for i in range(n)]


# -- backward policy -------------------------------------------------------------

_PARENT_COUNT_CACHE: dict = {}


def parent_count(state: MolGraphState, vocab: FragmentVocabulary,
                 max_nodes: int) -> int:
    key = (canonical_key(state), vocab.version_hash, max_nodes)
    if key not in _PARENT_COUNT_CACHE:
        _PARENT_COUNT_CACHE[key] = len(parents(state, vocab, max_nodes))
    return _PARENT_COUNT_CACHE[key]


def uniform_backward_logprob(trajectory: Trajectory, vocab: FragmentVocabulary,
                             max_nodes: int) -> float:
    """Sum of log(1 / number of canonical parents) over non-initial states."""
    total = 0.0
    for state in trajectory.states[1:]:
        total -= np.log(parent_count(state, vocab, max_nodes))
    return float(total)


# -- trajectory balance loss -------------------------------------------------------

def trajectory_forward_logprob(trajectory: Trajectory, policy: Policy,
                               cond: np.ndarray, vocab: FragmentVocabulary,
                               max_nodes: int) -> tn.Tensor:
    """Differentiable sum of canonical-class forward log-probs (batch of 1)."""
    return _forward_logprobs([trajectory], policy, np.stack([cond]), vocab,
                             max_nodes)[0]


def _forward_logprobs(trajectories, policy: Policy, conds: np.ndarray,
                      vocab: FragmentVocabulary, max_nodes: int) -> list[tn.Tensor]:
    """Per-trajectory sums of log P_F under ``policy``, batching every
    non-terminal state of every trajectory into one forward pass."""
    flat_states = []
    flat_conds = []
    owner = []
    for ti, traj in enumerate(trajectories):
        for state in traj.states[:-1]:
            flat_states.append(state)
            flat_conds.append(conds[ti])
            owner.append(ti)
    logits = policy.forward_batch(flat_states, np.stack(flat_conds), vocab)
    step_of: dict[int, list] = {ti: [] for ti in range(len(trajectories))}
    cursor = 0
    for ti, traj in enumerate(trajectories):
        for k, state in enumerate(traj.states[:-1]):
            acts = valid_actions(state, vocab, max_nodes)
            vec = action_logit_vector(state, acts, logits[cursor], vocab)
            logp = tn.log_softmax(tn.reshape(vec, (1, -1)))
            target_key = canonical_key(traj.states[k + 1])
            idx = np.array(equivalent_action_indices(
                state, acts, traj.actions[k], target_key, vocab, max_nodes))
            if len(idx) == 0:
                raise RuntimeError("taken action missing from valid set")
            sel = tn.gather(tn.reshape(logp, (-1,)), (idx,))
            step_of[ti].append(tn.logsumexp(tn.reshape(sel, (1, -1))))
            cursor += 1
    sums = []
    for ti in range(len(trajectories)):
        terms = step_of[ti]
        total = terms[0]
        for term in terms[1:]:
            total = tn.add(total, term)
        sums.append(total)
    return sums


def tb_loss(trajectory: Trajectory, online: Policy, cond: np.ndarray,
            beta: float, log_r: float, vocab: FragmentVocabulary,
            max_nodes: int) -> tn.Tensor:
    """(log Z + sum log P_F - beta*log r - sum log P_B)^2 for one trajectory."""
    losses = tb_loss_batch([trajectory], online, np.stack([cond]), [beta],
                           [log_r], vocab, max_nodes)
    return losses


def tb_loss_batch(trajectories, online: Policy, conds: np.ndarray, betas,
                  log_rs, vocab: FragmentVocabulary, max_nodes: int) -> tn.Tensor:
    """Mean trajectory-balance loss over a batch (differentiable)."""
    for traj, log_r in zip(trajectories, log_rs):
        if not traj.states[-1].terminal:
            raise ValueError("trajectory must end in a terminal state")
        if not np.isfinite(log_r):
            raise FloatingPointError(f"non-finite log reward {log_r}")
    fwd = _forward_logprobs(trajectories, online, conds, vocab, max_nodes)
    log_z = online.log_z_batch(conds)
    total = None
    for ti, traj in enumerate(trajectories):
        back = uniform_backward_logprob(traj, vocab, max_nodes)
        const = -betas[ti] * log_rs[ti] - back
        inner = tn.add(tn.add(tn.gather(log_z, (np.array([ti]),)), fwd[ti]), const)
        tn.assert_finite(inner, "trajectory balance residual")
        term = tn.mul(inner, inner)
        total = term if total is None else tn.add(total, term)
    return tn.reshape(tn.mul(total, 1.0 / len(trajectories)), ())


# -- training loop -----------------------------------------------------------------

@dataclass
class PocketSet:
    """Pockets with their frozen condition embeddings."""

    pockets: list
    embeddings: np.ndarray  # (P, pocket_dim)

    @classmethod
    def build(cls, pockets: list, encoder_params: tn.ParamSet,
              encoder_cfg: PocketEncoderConfig, k: int = 30) -> "PocketSet":
        vecs = [encode_pocket(p, encoder_params, encoder_cfg, k=k).vector
                for p in pockets]
        return cls(pockets=list(pockets), embeddings=np.stack(vecs))


def _grads_or_zeros(params: tn.ParamSet) -> dict:
    out = {}
    for name, t in params.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


def train_step(gfn: DoubleGfnState, pocket_set: PocketSet, scorer,
               reward_spec: RewardSpec, vocab: FragmentVocabulary,
               config: TrainerConfig):
    """One batch: rollout with the target net, score, TB-update the online
    net, then move the target toward the online net."""
    step = gfn.step
    policy_cfg = gfn.online.cfg
    rngs = [derive_rng(config.seed, 1, step, slot)
            for slot in range(config.batch_size)]
    pick = derive_rng(config.seed, 2, step)
    pocket_idx = pick.integers(len(pocket_set.pockets), size=config.batch_size)
    betas = pick.uniform(config.beta_min, config.beta_max, size=config.batch_size)
    conds = np.stack([
        condition(pocket_set.embeddings[pocket_idx[i]], float(betas[i]), policy_cfg)
        for i in range(config.batch_size)])
    trajectories = rollout_batch(gfn.target, conds, vocab, rngs,
                                 config.max_nodes, config.epsilon)
    # score per pocket so oracle scorers see batched requests
    by_pocket: dict[int, list[int]] = {}
    for i, pi in enumerate(pocket_idx):
        by_pocket.setdefault(int(pi), []).append(i)
    rewards = [0.0] * config.batch_size
    for pi, slots in sorted(by_pocket.items()):
        states = [trajectories[i].states[-1] for i in slots]
        triples = scorer.score(pocket_set.pockets[pi], states)
        for i, triple in zip(slots, triples):
            hac = heavy_atom_count(trajectories[i].states[-1], vocab)
            rewards[i] = compose(triple, reward_spec, hac)
    log_rs = [float(np.log(r)) for r in rewards]
    gfn.online.params.zero_grad()
    loss = tb_loss_batch(trajectories, gfn.online, conds, betas.tolist(),
                         log_rs, vocab, config.max_nodes)
    loss.backward()
    grads = _grads_or_zeros(gfn.online.params)
    is_z = lambda name: name.startswith("logz.")
    tn.optimizer_step(gfn.online.params.subset(lambda n: not is_z(n)),
                      grads, gfn.opt_policy)
    tn.optimizer_step(gfn.online.params.subset(is_z), grads, gfn.opt_z)
    if config.copy_every_n > 0:
        if (step + 1) % config.copy_every_n == 0:
            gfn.target.params.load_values(gfn.online.params)
    else:
        tn.polyak_update(gfn.target.params, gfn.online.params, config.tau)
    gfn.step += 1
    with tn.no_grad():
        mean_logz = float(gfn.online.log_z_batch(conds).data.mean())
    return float(loss.data), float(np.mean(rewards)), mean_logz


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    losses: list = field(default_factory=list)


def train(config: TrainerConfig, vocab: FragmentVocabulary, pockets: list,
          scorer, reward_spec: RewardSpec, workdir: str | Path,
          resume: bool = False) -> TrainResult:
    """Full training loop with CSV metrics log and periodic checkpoints."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    encoder_cfg = PocketEncoderConfig(hidden_dim=config.pocket_dim)
    ckpt_dir = workdir / "checkpoint"
    if resume and (ckpt_dir / "meta.json").exists():
        gfn, encoder_params, policy_cfg = load_checkpoint(ckpt_dir, config)
    else:
        encoder_params = init_pocket_encoder(encoder_cfg, seed=config.seed)
        policy_cfg = PolicyConfig.for_vocab(
            vocab, pocket_dim=config.pocket_dim, beta_bins=config.beta_bins,
            beta_max=config.beta_max, hidden_dim=config.hidden_dim,
            layers=config.layers, heads=config.heads)
        gfn = make_double_gfn(policy_cfg, config)
    pocket_set = PocketSet.build(pockets, encoder_params, encoder_cfg)
    log_path = workdir / "train_log.csv"
    mode = "a" if (resume and log_path.exists()) else "w"
    losses = []
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,loss,mean_reward,mean_logZ,trajectories_per_sec\n")
        while gfn.step < config.steps:
            t0 = time.perf_counter()
            loss, mean_reward, mean_logz = train_step(
                gfn, pocket_set, scorer, reward_spec, vocab, config)
            dt = time.perf_counter() - t0
            losses.append(loss)
            log.write(f"{gfn.step},{loss:.6g},{mean_reward:.6g},"
                      f"{mean_logz:.6g},{config.batch_size / dt:.3g}\n")
            if gfn.step % config.checkpoint_every == 0 or gfn.step == config.steps:
                save_checkpoint(ckpt_dir, gfn, encoder_params, config, vocab)
    save_checkpoint(ckpt_dir, gfn, encoder_params, config, vocab)
    return TrainResult(checkpoint_dir=ckpt_dir, log_path=log_path, losses=losses)


# -- fine-tuning --------------------------------------------------------------------

@dataclass
class TopK:
    """Running best-by-reward set, deduplicated by canonical key."""

    k: int
    entries: dict = field(default_factory=dict)  # canonical key -> record dict

    def offer(self, state: MolGraphState, reward: float, triple):
        key = canonical_key(state)
        existing = self.entries.get(key)
        if existing is not None and existing["reward"] >= reward:
            return
        self.entries[key] = {
            "canonical_key": key,
            "molecule": state_to_json(state),
            "reward": reward,
            "ds": triple.ds,
            "qed": triple.qed,
            "sa_raw": triple.sa_raw,
        }
        if len(self.entries) > self.k:
            worst = min(self.entries.values(),
                        key=lambda e: (e["reward"], e["canonical_key"]))
            del self.entries[worst["canonical_key"]]

    def records(self) -> list[dict]:
        return sorted(self.entries.values(),
                      key=lambda e: (-e["reward"], e["canonical_key"]))


@dataclass
class FinetuneResult:
    checkpoint_dir: Path
    topk_path: Path
    topk: list


def finetune(checkpoint_dir: str | Path, pocket: PocketStructure, scorer,
             reward_spec: RewardSpec, vocab: FragmentVocabulary,
             config: TrainerConfig, workdir: str | Path) -> FinetuneResult:
    """Continue training against a single pocket with oracle-scored rewards,
    maintaining a running top-k molecule set."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ft_config = TrainerConfig(**{**asdict(config),
                                 "batch_size": config.finetune_batch_size,
                                 "steps": config.finetune_steps})
    gfn, encoder_params, policy_cfg = load_checkpoint(Path(checkpoint_dir), ft_config)
    gfn.step = 0
    encoder_cfg = PocketEncoderConfig(hidden_dim=ft_config.pocket_dim)
    pocket_set = PocketSet.build([pocket], encoder_params, encoder_cfg)
    topk = TopK(k=ft_config.top_k)
    topk_path = workdir / "topk.json"
    ckpt_dir = workdir / "checkpoint"

    class RecordingScorer:
        def score(self, pocket_, states):
            triples = scorer.score(pocket_, states)
            for state, triple in zip(states, triples):
                hac = heavy_atom_count(state, vocab)
                topk.offer(state, compose(triple, reward_spec, hac), triple)
            return triples

    recorder = RecordingScorer()
    log_path = workdir / "finetune_log.csv"
    try:
        with open(log_path, "w") as log:
            log.write("step,loss,mean_reward,mean_logZ,trajectories_per_sec\n")
            while gfn.step < ft_config.steps:
                t0 = time.perf_counter()
                loss, mean_reward, mean_logz = train_step(
                    gfn, pocket_set, recorder, reward_spec, vocab, ft_config)
                dt = time.perf_counter() - t0
                log.write(f"{gfn.step},{loss:.6g},{mean_reward:.6g},"
                          f"{mean_logz:.6g},{ft_config.batch_size / dt:.3g}\n")
    finally:
        # oracle failures abort the loop but the partial top-k is persisted
        topk_path.write_text(json.dumps(topk.records(), indent=1))
    save_checkpoint(ckpt_dir, gfn, encoder_params, ft_config, vocab)
    return FinetuneResult(checkpoint_dir=ckpt_dir, topk_path=topk_path,
                          topk=topk.records())


# -- checkpointing -------------------------------------------------------------------

def _optimizer_to_paramset(opt: tn.OptimizerState) -> tn.ParamSet:
    ps = tn.ParamSet()
    for name, m in opt.m.items():
        ps.add(f"m/{name}", m)
    for name, v in opt.v.items():
        ps.add(f"v/{name}", v)
    return ps


def _optimizer_from_paramset(opt: tn.OptimizerState, ps: tn.ParamSet,
                             step_count: int):
    opt.step_count = step_count
    for name in list(opt.m):
        opt.m[name] = ps[f"m/{name}"].data.astype(np.float32).copy()
        opt.v[name] = ps[f"v/{name}"].data.astype(np.float32).copy()


def save_checkpoint(ckpt_dir: str | Path, gfn: DoubleGfnState,
                    encoder_params: tn.ParamSet, config: TrainerConfig,
                    vocab: FragmentVocabulary):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tn.save_params(gfn.online.params, ckpt_dir / "online")
    tn.save_params(gfn.target.params, ckpt_dir / "target")
    tn.save_params(encoder_params, ckpt_dir / "encoder")
    tn.save_params(_optimizer_to_paramset(gfn.opt_policy), ckpt_dir / "opt_policy")
    tn.save_params(_optimizer_to_paramset(gfn.opt_z), ckpt_dir / "opt_z")
    meta = {
        "format": "flowgen-checkpoint-v1",
        "step": gfn.step,
        "opt_policy_steps": gfn.opt_policy.step_count,
        "opt_z_steps": gfn.opt_z.step_count,
        "policy_cfg": asdict(gfn.online.cfg),
        "trainer_config": asdict(config),
        "vocab_hash": vocab.version_hash,
    }
    (ckpt_dir / "meta.json").write_text(json.dumps(meta, indent=1))


def load_checkpoint(ckpt_dir: str | Path, config: TrainerConfig | None = None):
    """Returns (DoubleGfnState, encoder_params, policy_cfg)."""
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "meta.json").read_text())
    policy_cfg = PolicyConfig(**meta["policy_cfg"])
    if config is None:
        config = TrainerConfig(**meta["trainer_config"])
    gfn = make_double_gfn(policy_cfg, config)
    gfn.online.params.load_values(tn.load_params(ckpt_dir / "online"))
    gfn.target.params.load_values(tn.load_params(ckpt_dir / "target"))
    _optimizer_from_paramset(gfn.opt_policy, tn.load_params(ckpt_dir / "opt_policy"),
                             meta["opt_policy_steps"])
    _optimizer_from_paramset(gfn.opt_z, tn.load_params(ckpt_dir / "opt_z"),
                             meta["opt_z_steps"])
    gfn.step = meta["step"]
    encoder_params = tn.load_params(ckpt_dir / "encoder")
    return gfn, encoder_params, policy_cfg


def checkpoint_meta(ckpt_dir: str | Path) -> dict:
    return json.loads((Path(ckpt_dir) / "meta.json").read_text())
