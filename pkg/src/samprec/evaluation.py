"""Ranking metrics, evaluation with inference-time selection, cost model and sampler analysis."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .backbone import SrsParams, compact, rank_scores, score_last
from .dataset import PAD, EvalExample, InteractionSequence, SplitSpec, batch_rng, pad_left, split
from .sampler import SamplerParams, SamplingStrategy, baseline_select, deterministic_select, policy_forward

STREAM_EVAL = 7


# ---------------------------------------------------------------------------
# metrics


def _check_k(k: int) -> None:
    if k <= 0:
        raise ValueError(f"K must be positive, got {k}")


def rank_of(target: int, scores: np.ndarray, exclude=()) -> int:
    """1-based rank of ``target``; ties go to the smaller id, PAD never ranks."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    if target == PAD or target in set(int(e) for e in exclude):
        raise ValueError(f"target {target} is excluded from ranking")
    scores[PAD] = -np.inf
    if len(exclude):
        scores[np.asarray(list(exclude), dtype=np.int64)] = -np.inf
    t = scores[target]
    ids = np.arange(len(scores))
    return int(1 + np.sum(scores > t) + np.sum((scores == t) & (ids < target)))


def recall_at_k(rank: int, k: int) -> float:
    _check_k(k)
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    _check_k(k)
    return 1.0 / math.log2(1 + rank) if rank <= k else 0.0


def ideal_dcg(num_targets: int, k: int) -> float:
    return sum(1.0 / math.log2(1 + j) for j in range(1, min(k, num_targets) + 1))


def multi_target_metrics(topk: Sequence[int], targets: Sequence[int], k: int) -> tuple[float, float]:
    """Recall@K = |top-K ∩ T| / |T| and NDCG@K with the ideal DCG of ``min(K, |T|)`` hits.

    Repeated target ids count once.
    """
    _check_k(k)
    tset = set(int(t) for t in targets)
    if not tset:
        raise ValueError("empty target set")
    hits = [j for j, item in enumerate(list(topk)[:k], start=1) if int(item) in tset]
    recall = len(hits) / len(tset)
    dcg = sum(1.0 / math.log2(1 + j) for j in hits)
    return recall, dcg / ideal_dcg(len(tset), k)


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostModel:
    layers: int
    seq_len: float
    mu: float = 1.0
    sigma2: float = 0.0
    d: int = 32
    hidden: int = 64
    vocab: int = 500
    sampler: bool = False

    def validate(self) -> None:
        if self.layers < 1 or self.seq_len <= 0 or self.d < 1 or self.hidden < 1:
            raise ValueError("cost model sizes must be positive")
        if not 0.0 <= self.mu <= 1.0 or self.sigma2 < 0:
            raise ValueError(f"need mu in [0, 1] and sigma2 >= 0, got {self.mu}, {self.sigma2}")


@dataclass
class FlopsReport:
    srs: float
    sampler: float
    head: float
    total: float
    full_total: float
    saving_ratio: float
    quadratic_saving: float  # in FLOPs, attention terms only
    quad_coeff: float  # FLOPs per N^2 per layer
    linear_coeff: float  # FLOPs per token per layer

    @property
    def mflops(self) -> float:
        return self.total / 1e6


def flops_estimate(cm: CostModel) -> FlopsReport:
    """Matmul FLOPs (multiply-add = 2) for one scored sequence.

    Per layer: projections and feed-forward cost ``linear * m``; attention
    scores plus the weighted sum cost ``quad * m**2`` with ``quad = 4 d``.
    With selection, ``E[m] = mu N`` and ``E[m^2] = mu^2 N^2 + N sigma2``. The
    sampler is one block on all ``N`` items plus its two-layer head.
    """
    cm.validate()
    N, L, d = float(cm.seq_len), cm.layers, cm.d
    linear = 8.0 * d * d + 4.0 * d * cm.hidden
    quad = 4.0 * d
    full_srs = L * (linear * N + quad * N * N)
    Em = cm.mu * N
    Em2 = cm.mu * cm.mu * N * N + N * cm.sigma2
    srs = L * (linear * Em + quad * Em2)
    sampler = 0.0
    sampler_quad = 0.0
    if cm.sampler:
        head_mlp = 2.0 * (2 * d) * d + 2.0 * d * 2
        sampler = linear * N + quad * N * N + head_mlp * N
        sampler_quad = quad * N * N
    head = 2.0 * d * cm.vocab
    total = srs + sampler + head
    full_total = full_srs + head
    return FlopsReport(
        srs=srs, sampler=sampler, head=head, total=total, full_total=full_total,
        saving_ratio=1.0 - total / full_total,
        quadratic_saving=L * quad * N * N - sampler_quad - L * quad * Em2,
        quad_coeff=quad, linear_coeff=linear,
    )


# ---------------------------------------------------------------------------
# sampler analysis


def roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney form of ROC-AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class SamplerQuality:
    kept: dict[str, float] = field(default_factory=dict)  # type -> share among kept items
    dropped: dict[str, float] = field(default_factory=dict)
    auc: float | None = None
    n_kept: int = 0
    n_dropped: int = 0
    notice: str | None = None


def sampler_quality_report(keep_probs, labels, actions=None, positive: str = "signal",
                           threshold: float = 0.5) -> SamplerQuality:
    """Type composition of kept and dropped items plus keep-probability AUC for ``positive``.

    ``keep_probs``, ``labels`` and ``actions`` may be flat or lists of per-sequence arrays.
    """
    if labels is None or (isinstance(labels, list) and any(lb is None for lb in labels)):
        return SamplerQuality(notice="behaviour labels missing; report skipped")
    flat = lambda xs: np.concatenate([np.asarray(x).ravel() for x in xs]) if isinstance(xs, list) else np.asarray(xs).ravel()
    probs = flat(keep_probs).astype(np.float64) if keep_probs is not None else None
    labs = flat(labels).astype(str)
    if actions is None:
        if probs is None:
            raise ValueError("need keep-probabilities or actions")
        acts = probs >= threshold
    else:
        acts = flat(actions).astype(bool)
    if len(labs) != len(acts):
        raise ValueError(f"{len(labs)} labels for {len(acts)} decisions")
    out = SamplerQuality(n_kept=int(acts.sum()), n_dropped=int((~acts).sum()))
    for t in sorted(set(labs.tolist())):
        is_t = labs == t
        out.kept[t] = float(is_t[acts].mean()) if acts.any() else 0.0
        out.dropped[t] = float(is_t[~acts].mean()) if (~acts).any() else 0.0
    if probs is not None:
        out.auc = roc_auc(probs, labs == positive)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricReport:
    strategy: str
    users: int
    recall: dict[str, float]
    ndcg: dict[str, float]
    sample_rate: float
    sample_var: float
    mean_context: float
    mflops: float
    fallbacks: int = 0
    quality: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def flat(self) -> dict:
        row = {"strategy": self.strategy, "users": self.users}
        row.update({f"recall@{k}": v for k, v in self.recall.items()})
        row.update({f"ndcg@{k}": v for k, v in self.ndcg.items()})
        row.update({"sample_rate": self.sample_rate, "sample_var": self.sample_var,
                    "mean_context": self.mean_context, "mflops": self.mflops, "fallbacks": self.fallbacks})
        if self.quality and self.quality.get("auc") is not None:
            row["auc"] = self.quality["auc"]
        return row

    def to_csv(self) -> str:
        return rows_to_csv([self.flat()])


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = list(rows[0]) if rows else []
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def select_for_inference(srs: SrsParams, contexts: np.ndarray, strategy: SamplingStrategy,
                         sampler: SamplerParams | None = None, tau: float = 1.0, threshold: float = 0.5,
                         popularity: np.ndarray | None = None, rng: np.random.Generator | None = None,
                         stochastic: bool = False):
    """Actions for left-padded contexts plus keep-probabilities for the learned sampler."""
    valid = contexts != PAD
    if strategy.kind == "auto":
        if sampler is None:
            raise ValueError("the learned strategy needs sampler parameters")
        keep = policy_forward(sampler, srs.item_emb, contexts, tau).keep
        if stochastic:
            if rng is None:
                raise ValueError("stochastic inference needs an rng")
            actions = ((rng.random(keep.shape) < keep) & valid).astype(np.int64)
        else:
            actions = deterministic_select(keep, threshold, valid)
        return actions, keep
    if strategy.kind == "full":
        return valid.astype(np.int64), None
    return baseline_select(strategy, contexts, popularity, rng), None


def evaluate(srs: SrsParams, examples: Sequence[EvalExample], ks: Sequence[int] = (10, 20),
             strategy: SamplingStrategy = SamplingStrategy("full"), sampler: SamplerParams | None = None,
             tau: float = 1.0, threshold: float = 0.5, popularity: np.ndarray | None = None, seed: int = 0,
             stochastic: bool = False, batch_size: int = 256, sampler_cost: bool | None = None) -> MetricReport:
    """Score the full catalog from each selected context; metrics are means over users."""
    for k in ks:
        _check_k(k)
    if max(ks) > srs.vocab_size - 1:
        raise ValueError(f"K={max(ks)} exceeds catalog size {srs.vocab_size - 1}")
    max_len = srs.config.max_len
    sums_r = {k: 0.0 for k in ks}
    sums_n = {k: 0.0 for k in ks}
    kept_total = ctx_total = fallbacks = 0
    probs_all, acts_all, labels_all = [], [], []
    have_labels = all(ex.behaviors is not None for ex in examples) and len(examples) > 0
    for b, start in enumerate(range(0, len(examples), batch_size)):
        chunk = examples[start:start + batch_size]
        contexts, lengths = pad_left([ex.context for ex in chunk], max_len)
        if (lengths == 0).any():
            raise ValueError("evaluation example with an empty context")
        rng = batch_rng(seed, 0, b, STREAM_EVAL)
        actions, keep = select_for_inference(srs, contexts, strategy, sampler, tau, threshold, popularity,
                                             rng, stochastic)
        valid = contexts != PAD
        empty = actions.sum(axis=1) == 0
        fallbacks += int(empty.sum())
        kept_total += int(actions.sum())
        ctx_total += int(valid.sum())
        if empty.any():
            actions[empty] = valid[empty]
        packed, _ = compact(contexts, actions)
        width = int((packed != PAD).sum(axis=1).max())
        scores = score_last(srs, packed[:, -width:])
        for r, ex in enumerate(chunk):
            top = rank_scores(scores[r], max(ks))
            for k in ks:
                rec, nd = multi_target_metrics(top, ex.targets, k)
                sums_r[k] += rec
                sums_n[k] += nd
        if have_labels:
            for r, ex in enumerate(chunk):
                n = lengths[r]
                labels_all.append(np.asarray(ex.behaviors[-max_len:]))
                acts_all.append(actions[r, -n:])
                if keep is not None:
                    probs_all.append(keep[r, -n:])
    users = len(examples)
    mu = kept_total / ctx_total if ctx_total else 0.0
    sigma2 = mu * (1.0 - mu)  # per-item keep indicator variance
    mean_ctx = ctx_total / users if users else 0.0
    use_sampler = strategy.kind == "auto" if sampler_cost is None else sampler_cost
    cost = flops_estimate(CostModel(srs.config.layers, max(mean_ctx, 1e-9), mu, sigma2, srs.config.d,
                                    srs.config.hidden, srs.vocab_size - 1, use_sampler)) if users else None
    quality = None
    if have_labels:
        q = sampler_quality_report(probs_all if probs_all else None, labels_all, acts_all)
        quality = asdict(q)
    return MetricReport(
        strategy=strategy.kind if strategy.kind in ("auto", "full") else f"{strategy.kind}({strategy.rate})",
        users=users,
        recall={str(k): sums_r[k] / users for k in ks} if users else {},
        ndcg={str(k): sums_n[k] / users for k in ks} if users else {},
        sample_rate=mu, sample_var=sigma2, mean_context=mean_ctx,
        mflops=cost.mflops if cost else 0.0, fallbacks=fallbacks, quality=quality,
    )


def evaluate_state(state, examples: Sequence[EvalExample], ks: Sequence[int] = (10, 20),
                   strategy: SamplingStrategy | None = None, **kw) -> MetricReport:
    """``evaluate`` with the strategy and sampler settings stored in a training state."""
    cfg = state.config
    strategy = strategy or cfg.strategy_obj()
    return evaluate(state.srs, examples, ks, strategy, state.sampler, cfg.reward.tau, cfg.sampler.threshold,
                    state.popularity, cfg.seed, cfg.sampler.stochastic_inference, **kw)


def evaluate_multi_step(state, sequences: Sequence[InteractionSequence], ks: Sequence[int] = (10,),
                        steps: Sequence[int] = (1, 2, 3, 4, 5), strategy: SamplingStrategy | None = None) -> list[dict]:
    """One row per window size ``i`` with multi-target metrics on the test targets."""
    rows = []
    for i in steps:
        views = split(sequences, SplitSpec("multistep", steps=i, max_len=state.config.backbone.max_len))
        rep = evaluate_state(state, views.test, ks, strategy)
        rows.append({"steps": i, **rep.flat()})
    return rows


def sample_rate_sweep(b_values: Sequence[float], run: Callable[[float], MetricReport]) -> list[dict]:
    """Rows of ``(b, sample rate, metrics, MFLOPs)``; ``run`` retrains and evaluates for one ``b``."""
    if not len(b_values):
        raise ValueError("empty relax-factor list")
    rows = []
    for b in b_values:
        rep = run(float(b))
        rows.append({"b": float(b), **rep.flat()})
    return rows
