"""Causal transformer recommender: embeddings, stacked blocks, prediction head, losses.

Every forward pass prepends a learned BOS token right before the first real
item, so the state at BOS scores the first item and ``log P(x_1)`` is defined.
Positions count from BOS (0) and are independent of how much left padding a
row carries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .dataset import PAD
from .numerics import BlockParams, Tensor


@dataclass
class BackboneConfig:
    d: int = 32
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    dropout: float = 0.2
    max_len: int = 50

    def validate(self) -> list[str]:
        errs = []
        for name in ("d", "layers", "heads", "hidden", "max_len"):
            if getattr(self, name) < 1:
                errs.append(f"backbone.{name} must be >= 1")
        if self.heads >= 1 and self.d % self.heads:
            errs.append(f"backbone.d={self.d} must be divisible by backbone.heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"backbone.dropout={self.dropout} outside [0, 1)")
        return errs


@dataclass
class SrsParams:
    item_emb: Tensor  # (V+1, d); row 0 is padding and stays zero
    pos_emb: Tensor  # (max_len+1, d); row 0 belongs to BOS
    bos: Tensor  # (d,)
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor
    W_out: Tensor  # (d, V+1)
    b_out: Tensor  # (V+1,)
    config: BackboneConfig = field(default_factory=BackboneConfig)

    @property
    def vocab_size(self) -> int:
        return self.item_emb.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {"item_emb": self.item_emb, "pos_emb": self.pos_emb, "bos": self.bos}
        for i, blk in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in blk.tensors().items()})
        out.update({"ln_g": self.ln_g, "ln_b": self.ln_b, "W_out": self.W_out, "b_out": self.b_out})
        return out


def init_srs(config: BackboneConfig, vocab_size: int, rng: np.random.Generator,
             dtype=np.float32, std: float = 0.02) -> SrsParams:
    d = config.d
    item = nx.truncated_normal(rng, (vocab_size, d), std)
    item[PAD] = 0.0

    def leaf(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return SrsParams(
        item_emb=leaf(item),
        pos_emb=leaf(nx.truncated_normal(rng, (config.max_len + 1, d), std)),
        bos=leaf(nx.truncated_normal(rng, (d,), std)),
        blocks=[nx.init_block(d, config.hidden, rng, dtype, std) for _ in range(config.layers)],
        ln_g=leaf(np.ones(d)),
        ln_b=leaf(np.zeros(d)),
        W_out=leaf(nx.truncated_normal(rng, (d, vocab_size), std)),
        b_out=leaf(np.zeros(vocab_size)),
        config=config,
    )


def _augment(items: np.ndarray, max_len: int):
    """Insert BOS before each row's first real item; returns ids, positions, validity."""
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    B, n = items.shape
    lengths = (items != PAD).sum(axis=1)
    if lengths.max(initial=0) > max_len:
        raise nx.ShapeError(f"sequence length {int(lengths.max())} exceeds max_len={max_len}")
    aug = np.full((B, n + 1), PAD, dtype=np.int64)
    aug[:, 1:] = items
    start = n - lengths  # column of BOS in the augmented row
    cols = np.arange(n + 1)
    is_bos = cols[None, :] == start[:, None]
    valid = cols[None, :] >= start[:, None]
    positions = np.where(valid, cols[None, :] - start[:, None], 0)
    return aug, is_bos, valid, positions


def _states(params: SrsParams, items: np.ndarray, rng: np.random.Generator | None = None):
    """Hidden states for the BOS-augmented rows: ``(B, n+1, d)`` plus validity mask.

    Column ``j`` holds the state that scores the item at augmented column ``j+1``.
    """
    cfg = params.config
    aug, is_bos, valid, positions = _augment(items, cfg.max_len)
    V = params.vocab_size
    table = nx.concat([params.item_emb, nx.reshape(params.bos, (1, cfg.d))], axis=0)
    ids = np.where(is_bos, V, aug)
    x = nx.add(nx.embed_gather(table, ids), nx.embed_gather(params.pos_emb, positions))
    p = cfg.dropout if rng is not None else 0.0
    x = nx.dropout(x, p, rng)
    for blk in params.blocks:
        x = nx.causal_self_attention_block(x, blk, cfg.heads, valid=valid, dropout_p=p, rng=rng)
    x = nx.layer_norm(x, params.ln_g, params.ln_b)
    x = nx.mul(x, valid[..., None].astype(x.dtype))
    return x, valid


def forward_states(params: SrsParams, items: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Per-item hidden states ``(B, n, d)``; padded positions are zero."""
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    x, _ = _states(params, items, rng)
    return nx.mul(x[:, 1:, :], (items != PAD)[..., None].astype(x.dtype))


@dataclass
class LossResult:
    per_step: np.ndarray  # (B, n-1) loss values; entry t scores the prediction of item t+1
    total: Tensor  # (B,) differentiable per-sequence sums
    skipped: int  # sequences with fewer than two selected/real items


def autoregressive_loss(params: SrsParams, items: np.ndarray, negatives=None,
                        rng: np.random.Generator | None = None) -> LossResult:
    """Next-item cross entropy at every real position that has a successor."""
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    x, _ = _states(params, items, rng)
    states = x[:, 1:-1, :]  # item t's state predicts item t+1
    targets = items[:, 1:]
    valid = items[:, :-1] != PAD
    losses = nx.sampled_softmax_cross_entropy(states, params.W_out, params.b_out, targets, negatives,
                                              valid=valid, excluded=(PAD,))
    skipped = int(((items != PAD).sum(axis=1) < 2).sum())
    return LossResult(losses.data.copy(), nx.sum(losses, axis=1), skipped)


def compact(items: np.ndarray, actions: np.ndarray):
    """Left-pad the kept items of every row; returns compacted ids and original columns.

    ``origin[b, c]`` is the original column of compacted column ``c`` (-1 for padding).
    """
    items = np.atleast_2d(items)
    keep = (np.asarray(actions) == 1) & (items != PAD)
    B, n = items.shape
    counts = keep.sum(axis=1)
    out = np.full((B, n), PAD, dtype=np.int64)
    origin = np.full((B, n), -1, dtype=np.int64)
    rows, cols = np.nonzero(keep)
    # rank of each kept entry within its row
    rank = np.arange(len(rows)) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    dest = (n - counts)[rows] + rank
    out[rows, dest] = items[rows, cols]
    origin[rows, dest] = cols
    return out, origin


def subset_loss(params: SrsParams, items: np.ndarray, actions: np.ndarray, negatives=None,
                rng: np.random.Generator | None = None) -> LossResult:
    """Loss of the kept subsequence, with each term stored at its original step.

    The term predicting kept item ``x_k`` lives at original index ``k - 1``;
    every other entry is zero.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    real = items != PAD
    if np.array_equal(np.asarray(actions) == 1, real):
        return autoregressive_loss(params, items, negatives, rng)
    packed, origin = compact(items, actions)
    width = max(int((packed != PAD).sum(axis=1).max(initial=0)), 1)
    packed, origin = packed[:, -width:], origin[:, -width:]
    res = autoregressive_loss(params, packed, negatives, rng)
    per_step = np.zeros((items.shape[0], items.shape[1] - 1), dtype=res.per_step.dtype)
    tgt_origin = origin[:, 1:]
    src_valid = packed[:, :-1] != PAD
    rows, cols = np.nonzero(src_valid)
    per_step[rows, tgt_origin[rows, cols] - 1] = res.per_step[rows, cols]
    return LossResult(per_step, res.total, res.skipped)


def stepwise_loglik(params: SrsParams, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full-catalog ``log P(x_t | x_<t)`` for every real item and baseline losses.

    Returns ``(loglik, baseline)`` with shapes ``(B, n)`` and ``(B, n-1)``;
    ``baseline[:, t] = -loglik[:, t+1]`` where item ``t`` is real. Padded entries are
    zero. No graph is built.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    valid = items != PAD
    with nx.no_grad():
        x, _ = _states(params, items, None)
    rows, cols = np.nonzero(valid)
    z = x.data[rows, cols] @ params.W_out.data + params.b_out.data  # state at column j scores item j
    z[:, PAD] = -np.inf
    z -= z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loglik = np.zeros(items.shape, dtype=np.float64)
    loglik[rows, cols] = z[np.arange(len(rows)), items[rows, cols]] - lse
    return loglik, np.where(valid[:, :-1], -loglik[:, 1:], 0.0)


def score_last(params: SrsParams, contexts: np.ndarray) -> np.ndarray:
    """Full-catalog scores from the last real position of each left-padded row."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.int64))
    if ((contexts != PAD).sum(axis=1) == 0).any():
        raise ValueError("empty context cannot be scored")
    with nx.no_grad():
        x, _ = _states(params, contexts, None)
        last = x.data[:, -1, :]  # left padding puts the newest item last
        return last @ params.W_out.data + params.b_out.data


def rank_scores(scores: np.ndarray, k: int, exclude=()) -> np.ndarray:
    """Top-k ids by descending score, ties to the smaller id; PAD and ``exclude`` removed."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    scores[PAD] = -np.inf
    if len(exclude):
        scores[np.asarray(list(exclude), dtype=np.int64)] = -np.inf
    ids = np.arange(len(scores))
    order = np.lexsort((ids, -scores))
    order = order[np.isfinite(scores[order])]
    return order[:k]


def predict_topk(params: SrsParams, context, k: int, exclude=()) -> np.ndarray:
    context = np.asarray(context, dtype=np.int64)
    context = context[context != PAD]
    if len(context) == 0:
        raise ValueError("empty context")
    if k > params.vocab_size - 1:
        raise ValueError(f"K={k} exceeds catalog size {params.vocab_size - 1}")
    context = context[-params.config.max_len:]
    return rank_scores(score_last(params, context[None, :])[0], k, exclude)


def config_dict(config: BackboneConfig) -> dict:
    return asdict(config)
