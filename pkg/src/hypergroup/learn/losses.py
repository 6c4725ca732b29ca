"""Task and auxiliary objectives.

All functions take tensors laid out sample-major: rows ``s*n .. s*n+n-1``
hold the n agents of sample ``s``.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import combinations

import numpy as np

from .. import tensor as T
from ..config import LossWeights
from ..tensor import Tensor

DIST_EPS = 1e-16


@lru_cache(maxsize=32)
def _pairs(n: int) -> np.ndarray:
    return np.array(list(combinations(range(n), 2)), dtype=int).reshape(-1, 2)


def _pair_distances(h_l: Tensor, n: int) -> tuple[Tensor, np.ndarray]:
    """Euclidean distance of every unordered agent pair in every sample, (S*P, 1)."""
    pairs = _pairs(n)
    samples = h_l.shape[0] // n
    base = (np.arange(samples) * n)[:, None]
    left = (base + pairs[:, 0]).reshape(-1)
    right = (base + pairs[:, 1]).reshape(-1)
    diff = T.gather(h_l, left) - T.gather(h_l, right)
    dist = T.sqrt(T.sum_(T.square(diff), axis=1, keepdims=True) + DIST_EPS)
    return dist, pairs


def _group_coefficients(dist: np.ndarray, pairs: np.ndarray, labels: np.ndarray, beta: float,
                        literal: bool = False) -> np.ndarray:
    """Per-pair weights making the group objective linear in the pair distances.

    The inner ``min`` over other groups is resolved on the current values.
    """
    k = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=k)
    lk, ll = labels[pairs[:, 0]], labels[pairs[:, 1]]
    within = lk == ll
    samples = dist.shape[0]
    coef = np.zeros((samples, len(pairs)))
    if literal:
        # sum over ordered pairs in C_k is twice the unordered sum
        coef[:, within] = 2.0 / sizes[lk[within]]
    else:
        n_pairs = sizes * (sizes - 1) / 2.0
        coef[:, within] = 1.0 / np.maximum(n_pairs[lk[within]], 1.0)
    if k < 2:
        return coef
    cross_idx = np.flatnonzero(~within)
    # mean cross distance for every ordered group pair, per sample
    for g in range(k):
        best_val = np.full(samples, np.inf)
        best_l = np.zeros(samples, dtype=int)
        for other in range(k):
            if other == g:
                continue
            sel = cross_idx[((lk[cross_idx] == g) & (ll[cross_idx] == other))
                            | ((lk[cross_idx] == other) & (ll[cross_idx] == g))]
            norm = sizes[other] if literal else sizes[g] * sizes[other]
            val = dist[:, sel].sum(axis=1) / norm
            better = val < best_val
            best_val = np.where(better, val, best_val)
            best_l = np.where(better, other, best_l)
        for other in range(k):
            if other == g:
                continue
            sel = cross_idx[((lk[cross_idx] == g) & (ll[cross_idx] == other))
                            | ((lk[cross_idx] == other) & (ll[cross_idx] == g))]
            norm = sizes[other] if literal else sizes[g] * sizes[other]
            rows = best_l == other
            coef[np.ix_(rows, sel)] -= beta / norm
    return coef


def group_loss(h_l: Tensor, labels, beta: float, n: int | None = None) -> Tensor:
    """Intra-group spread minus ``beta`` times separation from the nearest group.

    Summed over groups, averaged over samples.  Intra terms are means over
    unordered pairs; cross terms are means over the |C_k|*|C_l| cross pairs.
    """
    labels = np.asarray(labels, dtype=int)
    n = len(labels) if n is None else n
    if n < 2:
        return T.scale(T.sum_(h_l), 0.0)
    dist, pairs = _pair_distances(h_l, n)
    samples = h_l.shape[0] // n
    per_pair = dist.data.reshape(samples, len(pairs))
    coef = _group_coefficients(per_pair, pairs, labels, beta).reshape(-1, 1)
    return T.scale(T.sum_(T.mul(dist, Tensor(coef))), 1.0 / samples)


def unit_rows(h: Tensor, eps: float = 1e-8) -> Tensor:
    """Rows scaled to unit L2 norm, so pair distances are bounded by 2."""
    inv_norm = T.exp(T.scale(T.log(T.sum_(T.square(h), axis=1, keepdims=True) + eps), -0.5))
    return T.mul(h, inv_norm)


def group_loss_literal(h_l: np.ndarray, labels, beta: float) -> float:
    """The same objective with the per-term normalizers taken at face value
    (1/|C_k| over ordered intra pairs, 1/|C_l| over cross pairs); logged only."""
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n < 2:
        return 0.0
    h = np.asarray(h_l).reshape(-1, n, np.asarray(h_l).shape[-1])
    pairs = _pairs(n)
    dist = np.sqrt(((h[:, pairs[:, 0]] - h[:, pairs[:, 1]]) ** 2).sum(-1) + DIST_EPS)
    coef = _group_coefficients(dist, pairs, labels, beta, literal=True)
    return float((coef * dist).sum() / h.shape[0])


def att_entropy_loss(alpha: Tensor, members: np.ndarray, samples: int = 1) -> Tensor:
    """Total attention entropy over member edges (0 log 0 = 0), averaged over samples."""
    members = np.asarray(members, dtype=bool)
    safe = T.add(alpha, Tensor(np.where(members, 1e-300, 1.0)))
    plogp = T.mul(alpha, T.log(safe))
    return T.scale(T.sum_(plogp), -1.0 / samples)


def td_targets(reward, done, q_tot_next, gamma: float) -> np.ndarray:
    reward = np.asarray(reward, dtype=np.float64)
    return reward + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * np.asarray(q_tot_next)


def td_loss(q_tot: Tensor, targets, mask=None) -> Tensor:
    """Masked mean squared TD error; ``targets`` are constants."""
    targets = np.asarray(targets, dtype=np.float64).reshape(q_tot.shape)
    mask = np.ones(q_tot.shape) if mask is None else np.asarray(mask, np.float64).reshape(q_tot.shape)
    err = T.sub(q_tot, Tensor(targets))
    return T.scale(T.sum_(T.mul(T.square(err), Tensor(mask))), 1.0 / max(mask.sum(), 1.0))


def lambda_advantages(reward, done, value, value_next, gamma: float, lam: float,
                      steps: int) -> np.ndarray:
    """GAE(lambda) over a time-major (steps*batch, 1) layout.

    ``lam=0`` is the one-step TD error ``r + gamma V(s') - V(s)``; ``lam=1`` is
    the Monte-Carlo return minus ``V(s)``.  Terminal steps cut the recursion.
    """
    shape = (steps, -1)
    r = np.reshape(reward, shape)
    live = 1.0 - np.reshape(np.asarray(done, np.float64), shape)
    v = np.reshape(value, shape)
    delta = r + gamma * live * np.reshape(value_next, shape) - v
    adv = np.zeros_like(delta)
    running = np.zeros(delta.shape[1])
    for t in range(steps - 1, -1, -1):
        running = delta[t] + gamma * lam * live[t] * running
        adv[t] = running
    return adv.reshape(-1, 1)


def actor_critic_loss(logp_chosen: Tensor, agent_mask, value: Tensor, value_next, reward, done,
                      gamma: float, alpha_critic: float, step_mask=None,
                      agents_per_step: int | None = None, lam: float = 0.0,
                      steps: int | None = None) -> tuple[Tensor, dict]:
    """Policy-gradient term with a detached advantage plus a critic term.

    ``value`` is (S, 1) over steps, ``logp_chosen`` (S*n, 1) over agents.
    With ``lam=0`` the advantage is the one-step TD error, bootstrapping 0 at
    terminal steps; otherwise GAE(lam) along the time-major layout of
    ``steps`` rows per batch element.  The critic regresses onto
    ``V(s) + advantage``.
    """
    s = value.shape[0]
    n = logp_chosen.shape[0] // s if agents_per_step is None else agents_per_step
    step_mask = np.ones((s, 1)) if step_mask is None else np.asarray(step_mask, np.float64).reshape(s, 1)
    agent_mask = np.asarray(agent_mask, np.float64).reshape(s * n, 1)
    if lam == 0.0 or steps is None:
        target = td_targets(np.reshape(reward, (s, 1)), np.reshape(done, (s, 1)),
                            np.reshape(value_next, (s, 1)), gamma)
        adv = target - value.data
    else:
        adv = lambda_advantages(reward, done, value.data, value_next, gamma, lam, steps)
        target = value.data + adv
    adv = adv * step_mask
    adv_rows = np.repeat(adv, n, axis=0) * agent_mask
    actor = T.scale(T.sum_(T.mul(logp_chosen, Tensor(adv_rows))), -1.0 / max(agent_mask.sum(), 1.0))
    critic = td_loss(value, target, step_mask)
    loss = actor + T.scale(critic, alpha_critic)
    return loss, {"actor": actor.item(), "critic": critic.item()}


def total_loss(task, group, att, weights: LossWeights):
    return task + group * weights.lambda1 + att * weights.lambda2
