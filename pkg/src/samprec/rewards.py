"""Sampler rewards: discounted future-prediction gain, perplexity coherence, and their blend.

Array convention (0-based, per row of length n):
  * item arrays (actions, keep-probabilities, log-likelihoods) have length n;
  * step-loss arrays have length n-1, entry s scores the prediction of item s+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSI_SLOPE = 0.03
PSI_CAP = 0.999


@dataclass
class RewardConfig:
    gamma: float = 0.9
    psi0: float = 0.8
    psi_slope: float = PSI_SLOPE
    b: float = 0.0
    k: float = 0.5
    lam: float = 0.5
    tau: float = 1.0

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.gamma <= 1.0:
            errs.append(f"reward.gamma={self.gamma} outside [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            errs.append(f"reward.lam={self.lam} outside [0, 1]")
        if not self.k > 0:
            errs.append(f"reward.k={self.k} must be > 0")
        if not self.tau > 0:
            errs.append(f"reward.tau={self.tau} must be > 0")
        return errs


def psi_schedule(psi0: float, epoch: int, slope: float = PSI_SLOPE) -> float:
    """Threshold ``psi0 + slope * (epoch - 1)``, capped just below one."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return min(psi0 + slope * (epoch - 1), PSI_CAP)


def future_prediction_reward(step_loss: np.ndarray, baseline: np.ndarray, keep_probs: np.ndarray,
                             psi: float, gamma: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Discounted reward-to-go of baseline-corrected, gated prediction gains.

    ``r[i] = sum_{s >= i} gamma**(s-i) * g[s]`` with
    ``g[s] = -[keep[s+1] > psi] * (step_loss[s] - baseline[s])``; ``r[n-1] = 0``.
    Computed with the backward recursion ``r[i] = g[i] + gamma * r[i+1]``.
    """
    step_loss = np.atleast_2d(step_loss)
    baseline = np.atleast_2d(baseline)
    keep_probs = np.atleast_2d(keep_probs)
    gate = keep_probs[:, 1:] > psi
    g = -np.where(gate, step_loss - baseline, 0.0)
    B, n = keep_probs.shape
    r = np.zeros((B, n), dtype=np.float64)
    for i in range(n - 2, -1, -1):
        r[:, i] = g[:, i] + gamma * r[:, i + 1]
    if valid is not None:
        r = np.where(valid, r, 0.0)
    return r


def perplexity(loglik: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """``exp(-mean log P(x_t | x_<t))`` over real steps, one value per row."""
    loglik = np.atleast_2d(loglik)
    if valid is None:
        valid = np.ones(loglik.shape, dtype=bool)
    count = valid.sum(axis=-1)
    if (count < 1).any():
        raise ValueError("perplexity needs at least one real step per row")
    return np.exp(-np.where(valid, loglik, 0.0).sum(axis=-1) / count)


def perplexity_reward(loglik: np.ndarray, actions: np.ndarray, b: float,
                      valid: np.ndarray | None = None) -> np.ndarray:
    """``(loglik_t - log(1/PP) + b) * (2 a_t - 1)``; ``log(1/PP)`` is the mean log-likelihood."""
    loglik = np.atleast_2d(loglik)
    actions = np.atleast_2d(actions)
    if valid is None:
        valid = np.ones(loglik.shape, dtype=bool)
    mean_ll = -np.log(perplexity(loglik, valid))
    r = (loglik - mean_ll[:, None] + b) * (2 * actions - 1)
    return np.where(valid, r, 0.0)


def combine(r_pre: np.ndarray, r_pp: np.ndarray, k: float, lam: float) -> np.ndarray:
    return k * (lam * r_pre + (1.0 - lam) * r_pp)


@dataclass
class RewardTrace:
    loglik: np.ndarray
    baseline: np.ndarray
    step_loss: np.ndarray
    r_pre: np.ndarray
    r_pp: np.ndarray
    reward: np.ndarray
    actions: np.ndarray
    keep_probs: np.ndarray


def compute_rewards(step_loss: np.ndarray, baseline: np.ndarray, loglik: np.ndarray, actions: np.ndarray,
                    keep_probs: np.ndarray, valid: np.ndarray, config: RewardConfig, epoch: int) -> RewardTrace:
    psi = psi_schedule(config.psi0, epoch, config.psi_slope)
    r_pre = future_prediction_reward(step_loss, baseline, keep_probs, psi, config.gamma, valid)
    r_pp = perplexity_reward(loglik, actions, config.b, valid)
    reward = np.where(valid, combine(r_pre, r_pp, config.k, config.lam), 0.0)
    return RewardTrace(loglik, baseline, step_loss, r_pre, r_pp, reward, actions, keep_probs)
