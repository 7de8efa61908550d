"""Behaviour sampler: a one-block causal transformer scoring keep/drop per step,
plus the fixed-rule selection strategies used as baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataset import PAD
from .numerics import BlockParams, Tensor

STRATEGIES = ("auto", "full", "random", "last", "popular")
DROP, KEEP = 0, 1


@dataclass
class SamplerConfig:
    heads: int = 2
    hidden: int = 64
    dropout: float = 0.0
    threshold: float = 0.5
    stochastic_inference: bool = False
    force_keep_first: bool = False

    def validate(self, d: int) -> list[str]:
        errs = []
        if self.heads < 1 or d % self.heads:
            errs.append(f"sampler.heads={self.heads} must divide d={d}")
        if self.hidden < 1:
            errs.append("sampler.hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"sampler.dropout={self.dropout} outside [0, 1)")
        if not 0.0 <= self.threshold <= 1.0:
            errs.append(f"sampler.threshold={self.threshold} outside [0, 1]")
        return errs


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "auto"
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind in ("random", "last", "popular") and not 0.0 < self.rate <= 1.0:
            raise ValueError(f"sample rate must be in (0, 1], got {self.rate}")


@dataclass
class SamplerParams:
    block: BlockParams
    pos_emb: Tensor  # (max_len, d)
    ln_g: Tensor  # (2d,) norm over [H, E] before the MLP
    ln_b: Tensor
    W1: Tensor  # (2d, d)
    b1: Tensor
    W2: Tensor  # (d, 2); column 1 is the keep logit
    b2: Tensor
    heads: int = 2
    dropout: float = 0.0

    def tensors(self) -> dict[str, Tensor]:
        out = {f"block.{k}": v for k, v in self.block.tensors().items()}
        out.update({"pos_emb": self.pos_emb, "ln_g": self.ln_g, "ln_b": self.ln_b, "W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2})
        return out


def init_sampler(d: int, max_len: int, config: SamplerConfig, rng: np.random.Generator,
                 dtype=np.float32, std: float = 0.02) -> SamplerParams:
    """Output layer starts at zero so the initial policy keeps every item with probability 1/2.

    The MLP sees normalised features and He-scaled weights; with embedding-scale inputs its
    hidden units would be too small for the policy gradient to move it.
    """

    def leaf(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return SamplerParams(
        block=nx.init_block(d, config.hidden, rng, dtype, std),
        pos_emb=leaf(nx.truncated_normal(rng, (max_len, d), std)),
        ln_g=leaf(np.ones(2 * d)),
        ln_b=leaf(np.zeros(2 * d)),
        W1=leaf(nx.truncated_normal(rng, (2 * d, d), np.sqrt(1.0 / d))),
        b1=leaf(np.zeros(d)),
        W2=leaf(np.zeros((d, 2))),
        b2=leaf(np.zeros(2)),
        heads=config.heads,
        dropout=config.dropout,
    )


@dataclass
class SamplerPolicy:
    probs: np.ndarray  # (B, n, 2), rows sum to 1
    log_probs: Tensor  # (B, n, 2), differentiable w.r.t. the sampler parameters
    valid: np.ndarray  # (B, n) real items

    @property
    def keep(self) -> np.ndarray:
        """Keep-probabilities with padded steps forced to zero."""
        return np.where(self.valid, self.probs[..., KEEP], 0.0)


def _positions(valid: np.ndarray) -> np.ndarray:
    start = valid.shape[-1] - valid.sum(axis=-1)
    cols = np.arange(valid.shape[-1])
    return np.where(valid, cols[None, :] - start[:, None], 0)


def policy_forward(params: SamplerParams, item_emb: Tensor, items: np.ndarray, tau: float,
                   rng: np.random.Generator | None = None) -> SamplerPolicy:
    """Keep/drop distribution per step from items up to and including that step.

    The shared item table is read as a constant: no gradient reaches it from here.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    valid = items != PAD
    if valid.sum(axis=-1).max(initial=0) > params.pos_emb.shape[0]:
        raise nx.ShapeError(f"sequence longer than sampler max_len={params.pos_emb.shape[0]}")
    shared = Tensor(item_emb.data)
    E = nx.add(nx.embed_gather(shared, items), nx.embed_gather(params.pos_emb, _positions(valid)))
    E = nx.mul(E, valid[..., None].astype(E.dtype))
    p = params.dropout if rng is not None else 0.0
    H = nx.causal_self_attention_block(E, params.block, params.heads, valid=valid, dropout_p=p, rng=rng)
    feats = nx.layer_norm(nx.concat([H, E], axis=-1), params.ln_g, params.ln_b)
    hidden = nx.relu(nx.affine(feats, params.W1, params.b1))
    S = nx.affine(hidden, params.W2, params.b2)
    logp = nx.log_softmax_rows(S, tau)
    return SamplerPolicy(np.exp(logp.data), logp, valid)


@dataclass
class SampledActions:
    actions: np.ndarray  # (B, n) in {0, 1}; padded steps are 0
    log_pi: Tensor  # (B, n) log pi(a_t), zero at padded or forced steps
    trainable: np.ndarray  # (B, n) steps that take part in the policy gradient


def first_real(valid: np.ndarray) -> np.ndarray:
    first = np.zeros_like(valid)
    has = valid.any(axis=-1)
    first[np.nonzero(has)[0], valid.argmax(axis=-1)[has]] = True
    return first


def sample_actions(policy: SamplerPolicy, rng: np.random.Generator, force_keep_first: bool = False) -> SampledActions:
    """Independent Bernoulli draws with the per-step keep-probability."""
    keep = policy.keep
    actions = ((rng.random(keep.shape) < keep) & policy.valid).astype(np.int64)
    trainable = policy.valid.copy()
    if force_keep_first:
        first = first_real(policy.valid)
        actions[first] = 1
        trainable &= ~first
    picked = nx.take_last(policy.log_probs, actions)
    log_pi = nx.mul(picked, trainable.astype(picked.dtype))
    return SampledActions(actions, log_pi, trainable)


def deterministic_select(keep_probs: np.ndarray, threshold: float = 0.5, valid: np.ndarray | None = None) -> np.ndarray:
    """Keep exactly the steps whose keep-probability reaches ``threshold``."""
    keep_probs = np.asarray(keep_probs)
    out = keep_probs >= threshold
    if valid is not None:
        out &= valid
    return out.astype(np.int64)


def _top_count(rate: float, n: int) -> int:
    # small epsilon guards float products such as 0.7 * 10 = 7.000000000000001
    return min(n, math.ceil(rate * n - 1e-9))


def baseline_select(strategy: SamplingStrategy, items: np.ndarray, popularity: np.ndarray | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Fixed-rule selection for one sequence (1-D) or left-padded rows (2-D)."""
    items = np.asarray(items, dtype=np.int64)
    if items.ndim == 2:
        return np.stack([baseline_select(strategy, row, popularity, rng) for row in items])
    valid = items != PAD
    n = int(valid.sum())
    out = np.zeros(len(items), dtype=np.int64)
    real = np.nonzero(valid)[0]
    kind = strategy.kind
    if kind == "auto":
        raise ValueError("the learned sampler is not a fixed-rule strategy")
    if kind == "full":
        out[real] = 1
    elif kind == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        out[real] = (rng.random(n) < strategy.rate).astype(np.int64)
    elif kind == "last":
        m = _top_count(strategy.rate, n)
        if m:
            out[real[-m:]] = 1
    elif kind == "popular":
        if popularity is None:
            raise ValueError("popular selection needs item popularity counts")
        m = _top_count(strategy.rate, n)
        counts = np.asarray(popularity)[items[real]]
        # highest count first; among equal counts the more recent step wins
        order = np.lexsort((-real, -counts))
        out[real[order[:m]]] = 1
    return out
