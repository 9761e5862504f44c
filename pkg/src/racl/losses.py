"""RACL objective with analytic gradients.

total = (1 - alpha - beta) * cls + alpha * std + beta * enh + gamma * (reg_bona + reg_spoof)

``cls`` is class-weighted cross-entropy on the logits; ``std``/``enh`` are
margin contrastive losses over embedding pairs (all pairs with a binary
same-class target, and bona fide vs reconstructed bona fide pairs only);
``reg_*`` is a hinge on the per-dimension standard deviation of each class's
embeddings, which is negative and approaches -1 as a class collapses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import Decimal
from typing import NamedTuple

import numpy as np

from racl.audio import Provenance
from racl.errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RaclWeights:
    alpha: float = 0.6
    beta: float = 0.1
    gamma: float = 0.3
    margin: float = 1.0
    delta: float = 1e-4
    class_weights: tuple[float, float] = (10.0, 1.0)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ConfigError("losses: alpha, beta and gamma must be non-negative")
        if self.alpha + self.beta >= 1:
            raise ConfigError("losses: alpha + beta must stay below 1 so the CE weight is positive")
        if self.margin <= 0:
            raise ConfigError("losses.margin must be positive")
        if self.delta <= 0:
            raise ConfigError("losses.delta must be positive")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigError("losses.class_weights must be two positive numbers")

    @property
    def ce_coefficient(self) -> float:
        # decimal arithmetic so the documented defaults give exactly 0.3
        return float(Decimal(1) - Decimal(repr(self.alpha)) - Decimal(repr(self.beta)))


class PairSet(NamedTuple):
    i: np.ndarray
    j: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.i.shape[0]


def contrastive(a: np.ndarray, b: np.ndarray, y: np.ndarray, margin: float = 1.0):
    """Mean of Y*D^2 + (1-Y)*max(0, m-D)^2 over pairs; returns (loss, grad_a, grad_b).

    The hinge side has zero gradient at D = m and at D = 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = a.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    diff = a - b
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    slack = np.maximum(0.0, margin - dist)
    loss = float(np.sum(y * dist * dist + (1.0 - y) * slack * slack) / n)

    coef = 2.0 * y
    safe = np.where(dist > 0.0, dist, 1.0)
    hinge = np.where((dist > 0.0) & (slack > 0.0), -2.0 * slack / safe, 0.0)
    coef = coef + (1.0 - y) * hinge
    grad_a = (coef / n)[:, None] * diff
    return loss, grad_a, -grad_a


def make_pairs_std(binary_labels) -> PairSet:
    """All unordered pairs; Y = 1 when both samples have the same binary label."""
    labels = np.asarray(binary_labels)
    i, j = np.triu_indices(labels.shape[0], k=1)
    return PairSet(i, j, (labels[i] == labels[j]).astype(np.float64))


def make_pairs_enh(provenance) -> PairSet:
    """Pairs among bona fide and reconstructed bona fide samples only."""
    prov = [Provenance(p) for p in provenance]
    keep = np.array(
        [k for k, p in enumerate(prov) if p in (Provenance.BONAFIDE, Provenance.REC_BONAFIDE)],
        dtype=np.intp,
    )
    if keep.shape[0] < 2:
        return PairSet(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0))
    ii, jj = np.triu_indices(keep.shape[0], k=1)
    i, j = keep[ii], keep[jj]
    y = np.array([prov[p] == prov[q] for p, q in zip(i, j)], dtype=np.float64)
    return PairSet(i, j, y)


def pair_loss(emb: np.ndarray, pairs: PairSet, margin: float) -> tuple[float, np.ndarray]:
    grad = np.zeros_like(emb)
    if len(pairs) == 0:
        return 0.0, grad
    loss, ga, gb = contrastive(emb[pairs.i], emb[pairs.j], pairs.y, margin)
    np.add.at(grad, pairs.i, ga)
    np.add.at(grad, pairs.j, gb)
    return loss, grad


def variance_reg(x: np.ndarray, delta: float = 1e-4) -> tuple[float, np.ndarray]:
    """-(1/d) * sum_j max(0, 1 - sqrt(Var(x_j) + delta)), population variance."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        return 0.0, np.zeros_like(x)
    centered = x - x.mean(axis=0)
    var = np.mean(centered * centered, axis=0)
    std = np.sqrt(var + delta)
    active = std < 1.0
    loss = float(-np.sum(np.where(active, 1.0 - std, 0.0)) / d)
    scale = np.where(active, 1.0 / (n * d * std), 0.0)
    return loss, centered * scale


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def spoof_probability(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.atleast_2d(logits))[:, 1])


def weighted_ce(logits: np.ndarray, labels, class_weights=(10.0, 1.0)) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    m = logits.shape[0]
    logp = log_softmax(logits)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    loss = float(-np.sum(w * logp[np.arange(m), labels]) / m)
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    grad *= (w / m)[:, None]
    return loss, grad


@dataclass
class LossBreakdown:
    cls: float
    std: float
    enh: float
    reg_bona: float
    reg_spoof: float
    total: float
    grad_embedding: np.ndarray
    grad_logits: np.ndarray
    n_std_pairs: int = 0
    n_enh_pairs: int = 0

    @property
    def reg(self) -> float:
        return self.reg_bona + self.reg_spoof

    def components(self) -> dict[str, float]:
        return {"cls": self.cls, "std": self.std, "enh": self.enh, "reg": self.reg, "total": self.total}


def combine(cls: float, std: float, enh: float, reg: float, weights: RaclWeights) -> float:
    total = weights.ce_coefficient * cls
    if weights.alpha:
        total += weights.alpha * std
    if weights.beta:
        total += weights.beta * enh
    if weights.gamma:
        total += weights.gamma * reg
    return total


def racl_total(embeddings: np.ndarray, logits: np.ndarray, provenance,
               weights: RaclWeights = RaclWeights()) -> LossBreakdown:
    """Evaluate every component and accumulate the weighted gradients.

    Terms whose weight is zero are still reported but add nothing to the total
    or the gradients, so the all-zero configuration is exactly weighted CE.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    prov = [Provenance(p) for p in provenance]
    labels = np.array([p.binary() for p in prov], dtype=np.intp)

    cls, g_logits = weighted_ce(logits, labels, weights.class_weights)
    std_pairs = make_pairs_std(labels)
    enh_pairs = make_pairs_enh(prov)
    std, g_std = pair_loss(emb, std_pairs, weights.margin)
    enh, g_enh = pair_loss(emb, enh_pairs, weights.margin)
    if len(enh_pairs) == 0:
        log.debug("batch has fewer than two bona fide / rec bona fide samples; enh is 0")

    bona = labels == 0
    reg_b, g_reg_b = variance_reg(emb[bona], weights.delta)
    reg_s, g_reg_s = variance_reg(emb[~bona], weights.delta)
    g_reg = np.zeros_like(emb)
    g_reg[bona] = g_reg_b
    g_reg[~bona] = g_reg_s

    total = combine(cls, std, enh, reg_b + reg_s, weights)
    grad_logits = weights.ce_coefficient * g_logits
    grad_emb = np.zeros_like(emb)
    if weights.alpha:
        grad_emb += weights.alpha * g_std
    if weights.beta:
        grad_emb += weights.beta * g_enh
    if weights.gamma:
        grad_emb += weights.gamma * g_reg
    return LossBreakdown(cls, std, enh, reg_b, reg_s, total, grad_emb, grad_logits,
                         len(std_pairs), len(enh_pairs))
