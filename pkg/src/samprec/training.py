"""Joint training loop: Adam on the recommender's subset loss, REINFORCE ascent on the sampler."""

from __future__ import annotations

import hashlib
import itertools
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig, SrsParams, init_srs, stepwise_loglik, subset_loss
from .dataset import PAD, InteractionSequence, batch_rng, batch_with_negatives
from .numerics import Tensor
from .rewards import RewardConfig, compute_rewards, future_prediction_reward
from .sampler import (SamplerConfig, SamplerParams, SamplingStrategy, baseline_select, init_sampler,
                      policy_forward, sample_actions)

CHECKPOINT_VERSION = 1

# random streams per batch, see dataset.batch_rng
STREAM_SHUFFLE, STREAM_NEGATIVES, STREAM_ACTIONS, STREAM_DROPOUT, STREAM_BASELINE, STREAM_SAMPLER_DROPOUT = range(6)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, items: np.ndarray, actions: np.ndarray | None = None):
        super().__init__(message)
        self.items = items
        self.actions = actions


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    lr_srs: float = 1e-3
    lr_sampler: float = 0.02
    seed: int = 0
    num_negatives: int | None = None  # None scores the full catalog
    strategy: str = "auto"
    sample_rate: float = 1.0  # used by random / last / popular
    grad_clip: float | None = 5.0
    dtype: str = "float32"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def validate(self) -> list[str]:
        errs = []
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if not self.lr_srs > 0:
            errs.append(f"lr_srs={self.lr_srs} must be > 0")
        if not self.lr_sampler > 0:
            errs.append(f"lr_sampler={self.lr_sampler} must be > 0")
        if self.num_negatives is not None and self.num_negatives < 1:
            errs.append("num_negatives must be >= 1 or null")
        if self.grad_clip is not None and not self.grad_clip > 0:
            errs.append("grad_clip must be > 0 or null")
        if self.dtype not in ("float32", "float64"):
            errs.append(f"dtype={self.dtype!r} must be float32 or float64")
        try:
            self.strategy_obj()
        except ValueError as exc:
            errs.append(str(exc))
        errs += self.backbone.validate()
        errs += self.sampler.validate(self.backbone.d)
        errs += self.reward.validate()
        return errs

    def strategy_obj(self) -> SamplingStrategy:
        return SamplingStrategy(self.strategy, self.sample_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        nested = {"backbone": BackboneConfig, "sampler": SamplerConfig, "reward": RewardConfig}
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise nx.ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, kind in nested.items():
            sub = raw.get(key, {})
            if isinstance(sub, dict):
                bad = set(sub) - set(kind.__dataclass_fields__)
                if bad:
                    raise nx.ConfigError(f"unknown {key} keys: {sorted(bad)}")
                raw[key] = kind(**sub)
        return cls(**raw)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Published settings per benchmark; the reward fields are the reported best values.
PRESETS: dict[str, dict] = {
    "paper-tmall": {"reward": {"tau": 5.0, "b": 1.0, "k": 2e-3, "lam": 0.5, "psi0": 0.8}, "min_count": 10},
    "paper-alipay": {"reward": {"tau": 5.0, "b": 2.0, "k": 2e-3, "lam": 0.5, "psi0": 0.8}, "min_count": 10},
    "paper-yelp": {"reward": {"tau": 5.0, "b": 1.0, "k": 2e-2, "lam": 0.5, "psi0": 0.8}, "min_count": 5},
    "paper-amazon": {"reward": {"tau": 3.0, "b": 0.5, "k": 2e-3, "lam": 0.5, "psi0": 0.5}, "min_count": 10},
}
PRESET_COMMON = {
    "batch_size": 128,
    "num_negatives": 10_000,
    "lr_srs": 1e-3,
    "lr_sampler": 0.1,
    "backbone": {"d": 128, "hidden": 256, "layers": 2},
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise nx.ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = TrainConfig(**{k: v for k, v in PRESET_COMMON.items() if k != "backbone"})
    cfg.backbone = BackboneConfig(**{**asdict(cfg.backbone), **PRESET_COMMON["backbone"]})
    cfg.reward = RewardConfig(**{**asdict(cfg.reward), **PRESETS[name]["reward"]})
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# optimisers


def zero_grads(tensors: dict[str, Tensor]) -> None:
    for t in tensors.values():
        t.grad = None


def clip_global_norm(tensors: dict[str, Tensor], max_norm: float | None) -> float:
    """Rescale gradients in place when their joint norm exceeds ``max_norm``; returns the norm."""
    sq = 0.0
    for t in tensors.values():
        if t.grad is not None:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
    norm = sq ** 0.5
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors.values():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v, g = self.m[name], self.v[name], p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    srs: SrsParams
    sampler: SamplerParams
    adam: Adam
    popularity: np.ndarray
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)


def init_state(config: TrainConfig, num_items: int, popularity: np.ndarray | None = None) -> TrainState:
    errs = config.validate()
    if errs:
        raise nx.ConfigError("; ".join(errs))
    dtype = np.dtype(config.dtype)
    # separate streams so runs that differ only in strategy share the recommender's init
    srs = init_srs(config.backbone, num_items + 1, np.random.default_rng([config.seed, 101]), dtype)
    sp = init_sampler(config.backbone.d, config.backbone.max_len, config.sampler,
                      np.random.default_rng([config.seed, 202]), dtype)
    if popularity is None:
        popularity = np.zeros(num_items + 1, dtype=np.int64)
    return TrainState(config, srs, sp, Adam(lr=config.lr_srs), np.asarray(popularity, dtype=np.int64))


# ---------------------------------------------------------------------------
# one step


def policy_objective(log_pi: Tensor, rewards: np.ndarray, normalize: bool = True) -> Tensor:
    """``sum_t log pi(a_t) * r_t`` per row, averaged over rows when ``normalize``.

    Rewards enter as constants.
    """
    rewards = np.asarray(rewards, dtype=log_pi.dtype)
    total = nx.sum(nx.mul(log_pi, rewards))
    if normalize:
        total = nx.mul(total, 1.0 / log_pi.shape[0])
    return total


def policy_gradient_update(params: SamplerParams, log_pi: Tensor, rewards: np.ndarray, lr: float,
                           grad_clip: float | None = None) -> dict:
    """One ascent step on the batch-averaged policy objective."""
    tensors = params.tensors()
    zero_grads(tensors)
    obj = policy_objective(log_pi, rewards)
    obj.backward()
    norm = clip_global_norm(tensors, grad_clip)
    for t in tensors.values():
        if t.grad is not None:
            t.data += (lr * t.grad).astype(t.data.dtype)
    zero_grads(tensors)
    return {"objective": float(obj.data), "grad_norm": norm}


def select_actions(state: TrainState, items: np.ndarray, epoch: int, b: int):
    """Training-time selection; returns actions and, for the learned sampler, its draw."""
    cfg = state.config
    valid = items != PAD
    if cfg.strategy == "auto":
        drop_rng = batch_rng(cfg.seed, epoch, b, STREAM_SAMPLER_DROPOUT) if cfg.sampler.dropout > 0 else None
        policy = policy_forward(state.sampler, state.srs.item_emb, items, cfg.reward.tau, rng=drop_rng)
        sampled = sample_actions(policy, batch_rng(cfg.seed, epoch, b, STREAM_ACTIONS), cfg.sampler.force_keep_first)
        return sampled.actions, policy, sampled
    if cfg.strategy == "full":
        return valid.astype(np.int64), None, None
    actions = baseline_select(cfg.strategy_obj(), items, state.popularity,
                              batch_rng(cfg.seed, epoch, b, STREAM_BASELINE))
    return actions, None, None


def train_step(state: TrainState, items: np.ndarray, negatives, epoch: int, b: int) -> dict:
    cfg = state.config
    valid = items != PAD
    actions, policy, sampled = select_actions(state, items, epoch, b)
    drop_rng = batch_rng(cfg.seed, epoch, b, STREAM_DROPOUT) if cfg.backbone.dropout > 0 else None
    res = subset_loss(state.srs, items, actions, negatives, rng=drop_rng)
    B = items.shape[0]
    loss = nx.mul(nx.sum(res.total), 1.0 / B)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", items, actions)

    stats = {"loss": float(loss.data), "terms": int((res.per_step != 0).sum()),
             "sample_rate": float(actions[valid].mean()) if valid.any() else 0.0}
    trace = None
    if sampled is not None:
        # reward inputs come from the parameters before this step's updates
        loglik, base = stepwise_loglik(state.srs, items)
        trace = compute_rewards(res.per_step, base, loglik, actions, policy.keep, valid, cfg.reward, epoch)

    params = state.srs.tensors()
    zero_grads(params)
    loss.backward()
    if params["item_emb"].grad is not None:
        params["item_emb"].grad[PAD] = 0.0
    stats["grad_norm"] = clip_global_norm(params, cfg.grad_clip)
    state.adam.step(params)
    zero_grads(params)
    state.srs.item_emb.data[PAD] = 0.0

    if trace is not None:
        pg = policy_gradient_update(state.sampler, sampled.log_pi, trace.reward, cfg.lr_sampler, cfg.grad_clip)
        stats.update({
            "keep_prob": float(policy.keep[valid].mean()),
            "r_pre": float(trace.r_pre[valid].mean()),
            "r_pp": float(trace.r_pp[valid].mean()),
            "reward": float(trace.reward[valid].mean()),
            "pg_objective": pg["objective"],
        })
    for name, t in {**params, **state.sampler.tensors()}.items():
        if not np.all(np.isfinite(t.data)):
            raise TrainingDiverged(f"non-finite parameter {name} after epoch {epoch}, batch {b}", items, actions)
    return stats


@dataclass
class EpochStats:
    epoch: int
    loss: float
    sample_rate: float
    keep_prob: float | None = None
    r_pre: float | None = None
    r_pp: float | None = None
    reward: float | None = None
    batches: int = 0


def train_epoch(state: TrainState, train: Sequence[InteractionSequence]) -> EpochStats:
    cfg = state.config
    epoch = state.epoch + 1
    rows = []
    weights = []
    for b, batch in enumerate(batch_with_negatives(train, cfg.batch_size, cfg.num_negatives, cfg.seed,
                                                   state.srs.vocab_size - 1, cfg.backbone.max_len, epoch)):
        rows.append(train_step(state, batch.items, batch.negatives, epoch, b))
        weights.append(len(batch.items))
    w = np.asarray(weights, dtype=np.float64)

    def avg(key):
        if not rows or key not in rows[0]:
            return None
        return float(np.dot([r[key] for r in rows], w) / w.sum())

    out = EpochStats(epoch, avg("loss"), avg("sample_rate"), avg("keep_prob"), avg("r_pre"), avg("r_pp"),
                     avg("reward"), len(rows))
    state.epoch = epoch
    state.history.append(asdict(out))
    return out


def train(config: TrainConfig, train_seqs: Sequence[InteractionSequence], num_items: int,
          popularity: np.ndarray | None = None,
          callback: Callable[[TrainState, EpochStats], None] | None = None) -> TrainState:
    state = init_state(config, num_items, popularity)
    for _ in range(config.epochs):
        stats = train_epoch(state, train_seqs)
        if callback is not None:
            callback(state, stats)
    return state


# ---------------------------------------------------------------------------
# exact gradient check of the policy-gradient estimator


@dataclass
class OracleReport:
    max_abs_dev: float  # enumerated REINFORCE expectation vs finite-difference gradient
    baseline_shift_dev: float  # change in the expectation after adding a constant reward
    reward_to_go_dev: float  # same comparison for the discounted per-step form (informational)
    exact_norm: float
    num_params: int
    num_actions: int


def _tiny_instance(n: int, num_items: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    bcfg = BackboneConfig(d=d, layers=1, heads=1, hidden=2 * d, dropout=0.0, max_len=n)
    srs = init_srs(bcfg, num_items + 1, rng, np.float64)
    sp = init_sampler(d, n, SamplerConfig(heads=1, hidden=2 * d), rng, np.float64)
    for name, t in srs.tensors().items():
        t.data += rng.standard_normal(t.shape) * 0.3
    srs.item_emb.data[PAD] = 0.0
    for t in sp.tensors().values():
        t.data += rng.standard_normal(t.shape) * 0.5
    items = rng.integers(1, num_items + 1, size=(1, n))
    return srs, sp, items


def exact_gradient_oracle(n: int = 4, num_items: int = 6, d: int = 4, tau: float = 1.0, seed: int = 0,
                          shift: float = 3.0, h: float = 1e-5) -> OracleReport:
    """Enumerate all ``2**n`` action vectors of a tiny instance.

    Compares (a) a finite-difference gradient of the expected trajectory reward
    ``sum_A pi(A) * (-L(A))`` with (b) the exact expectation of the REINFORCE
    estimator, built with the training code's objective and reward functions
    (discount 1, threshold 0, no baseline).
    """
    if n > 6:
        raise ValueError("enumeration oracle is limited to n <= 6")
    srs, sp, items = _tiny_instance(n, num_items, d, seed)
    acts = np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.int64)
    rows = np.repeat(items, len(acts), axis=0)
    res = subset_loss(srs, rows, acts)
    traj_loss = res.total.data

    def log_prob_of_actions() -> Tensor:
        pol = policy_forward(sp, srs.item_emb, rows, tau)
        return nx.take_last(pol.log_probs, acts)

    def expected_reward() -> float:
        with nx.no_grad():
            lp = log_prob_of_actions().data.sum(axis=1)
        return float(np.dot(np.exp(lp), -traj_loss))

    # (a) finite differences over every sampler parameter entry
    tensors = sp.tensors()
    exact = {}
    for name, t in tensors.items():
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = expected_reward()
            flat[i] = old - h
            down = expected_reward()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        exact[name] = g

    # (b) closed-form expectation, one weighted backward pass over all action vectors
    with nx.no_grad():
        weights = np.exp(log_prob_of_actions().data.sum(axis=1))
    keep = policy_forward(sp, srs.item_emb, rows, tau).keep

    def estimator(reward: np.ndarray) -> dict[str, np.ndarray]:
        zero_grads(tensors)
        obj = policy_objective(log_prob_of_actions(), weights[:, None] * reward, normalize=False)
        obj.backward()
        out = {k: v.grad.copy() for k, v in tensors.items()}
        zero_grads(tensors)
        return out

    r_traj = future_prediction_reward(res.per_step, np.zeros_like(res.per_step), keep, psi=0.0, gamma=1.0)
    traj = np.repeat(r_traj[:, :1], n, axis=1)  # the whole-trajectory reward on every step
    est = estimator(traj)
    shifted = estimator(traj + shift)
    to_go = estimator(r_traj)

    def dev(a, b):
        return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)

    return OracleReport(
        max_abs_dev=dev(exact, est),
        baseline_shift_dev=dev(est, shifted),
        reward_to_go_dev=dev(exact, to_go),
        exact_norm=float(np.sqrt(sum(np.sum(g * g) for g in exact.values()))),
        num_params=sum(t.data.size for t in tensors.values()),
        num_actions=len(acts),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"srs.{k}": t.data for k, t in state.srs.tensors().items()}
    arrays.update({f"sampler.{k}": t.data for k, t in state.sampler.tensors().items()})
    arrays.update({f"adam.m.{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    arrays["popularity"] = state.popularity
    return arrays


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Directory with ``manifest.json`` and one little-endian ``tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    chunks = []
    for name in sorted(_state_arrays(state)):
        arr = _state_arrays(state)[name]
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        index[name] = {"offset": offset, "nbytes": len(raw), "shape": list(arr.shape),
                       "dtype": arr.dtype.newbyteorder("<").str, "crc32": zlib.crc32(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "rng": {"kind": "counter", "seed": state.config.seed, "next_epoch": state.epoch + 1},
        "history": state.history,
        "tensors": index,
    }
    (path / "tensors.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "tensors.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise CheckpointError("config_hash does not match the stored config")
    if expected_config is not None and expected_config.hash() != manifest["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {manifest['config_hash']}, "
                              f"requested {expected_config.hash()}")
    arrays = {}
    for name, meta in manifest["tensors"].items():
        raw = blob[meta["offset"]:meta["offset"] + meta["nbytes"]]
        if len(raw) != meta["nbytes"] or zlib.crc32(raw) != meta["crc32"]:
            raise CheckpointError(f"corrupt tensor blob for field {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).astype(
            np.dtype(meta["dtype"]).newbyteorder("="))

    num_items = arrays["srs.item_emb"].shape[0] - 1
    state = init_state(config, num_items, arrays["popularity"])
    for prefix, tensors in (("srs.", state.srs.tensors()), ("sampler.", state.sampler.tensors())):
        for k, t in tensors.items():
            key = prefix + k
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing field {key!r}")
            if arrays[key].shape != t.data.shape:
                raise CheckpointError(f"field {key!r} has shape {arrays[key].shape}, expected {t.data.shape}")
            t.data = arrays[key].copy()
    state.adam.t = manifest["adam_t"]
    state.adam.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
    state.adam.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}
    state.epoch = manifest["epoch"]
    state.history = manifest["history"]
    return state
