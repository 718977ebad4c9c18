"""Entropy-minimization losses with temperature scaling and their logit gradients.

Every loss returns the batch mean of the per-sample loss together with the
exact gradient with respect to the logits, so callers can feed it straight
into ``Model.backward``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

VARIANTS = ("em", "gem", "gem-t", "gem-skd", "gem-aug")


@dataclass(frozen=True)
class GemConfig:
    variant: str = "gem"
    tau_p: float = 1.0
    tau_q: float = 1.0
    s: float = 1.0
    detach_p: bool = False
    m: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if not (self.tau_p > 0 and self.tau_q > 0):
            raise ConfigError("temperatures must be positive")
        if self.s <= 0 or self.m < 1:
            raise ConfigError("s must be positive and m at least 1")
        # "gem" is the free-temperature form; named variants pin their bindings
        if self.variant == "em" and (self.tau_p, self.tau_q, self.detach_p) != (1.0, 1.0, False):
            raise ConfigError("em uses tau_p = tau_q = 1 without detaching p")
        if self.variant == "gem-t" and (self.tau_p != self.tau_q or self.detach_p):
            raise ConfigError("gem-t ties tau_p to tau_q and keeps p attached")
        if self.variant in ("gem-skd", "gem-aug") and (self.tau_p != 1.0 or not self.detach_p):
            raise ConfigError(f"{self.variant} requires tau_p = 1 and detach_p")
        if self.variant != "gem" and not self.tau_q >= self.tau_p >= 1.0:
            raise ConfigError(f"{self.variant} requires tau_q >= tau_p >= 1")


@dataclass
class LossResult:
    value: float
    logit_grad: np.ndarray


def log_softmax_t(z: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise ``log softmax(z / tau)`` via max subtraction."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = np.asarray(z) / tau
    u = u - u.max(axis=-1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=-1, keepdims=True))


def softmax_t(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax_t(z, tau))


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"logits must be N x C with C >= 2, got {z.shape}")
    return z


def em_loss(logits: np.ndarray) -> LossResult:
    """Mean Shannon entropy of ``softmax(z)``."""
    z = _check_logits(logits)
    logp = log_softmax_t(z, 1.0)
    p = np.exp(logp)
    plogp = (p * logp).sum(axis=1, keepdims=True)
    value = (-plogp[:, 0]).mean()
    grad = -(p * (logp - plogp))
    return LossResult(float(value), grad / z.shape[0])


def gem_loss(logits: np.ndarray, cfg: GemConfig, teacher_logits: Optional[np.ndarray] = None) -> LossResult:
    """``-tau_q^2 * sum_i p_i log q_i`` averaged over the batch.

    ``p`` comes from ``teacher_logits`` at ``tau_p`` when given (treated as a
    constant), otherwise from ``logits``; ``q = softmax(logits / tau_q)``.
    """
    z = _check_logits(logits)
    if (teacher_logits is not None) != (cfg.variant == "gem-aug"):
        raise ConfigError("teacher_logits must be given exactly for the gem-aug variant")
    tp, tq = cfg.tau_p, cfg.tau_q
    logq = log_softmax_t(z, tq)
    if teacher_logits is not None:
        t = np.asarray(teacher_logits)
        if t.shape != z.shape:
            raise ValueError("teacher logits must match the student logits' shape")
        p = softmax_t(t, tp)
        q = np.exp(logq)
    elif tp == tq:
        p = np.exp(logq)
        q = p
    else:
        p = softmax_t(z, tp)
        q = np.exp(logq)
    plogq = (p * logq).sum(axis=1, keepdims=True)
    value = (-(tq * tq) * plogq[:, 0]).mean()
    if cfg.detach_p or teacher_logits is not None:
        grad = -(tq * tq) * ((1.0 / tq) * (p - q))
    else:
        grad = -(tq * tq) * ((1.0 / tq) * (p - q) + (p / tp) * (logq - plogq))
    return LossResult(float(value), grad / z.shape[0])


def dynamic_temperature(logits: np.ndarray, s: float = 1.0) -> float:
    """``s`` times the batch-mean of each sample's logit std, floored at 1."""
    z = _check_logits(logits)
    tau = s * z.std(axis=1).mean()
    return float(max(tau, 1.0))


def make_variant(variant: str, logits: np.ndarray, s: float = 1.0,
                 aug_logits: Optional[Sequence[np.ndarray]] = None, m: int = 8
                 ) -> Tuple[GemConfig, Optional[np.ndarray]]:
    """Bind temperatures for a named variant; returns (config, teacher logits or None)."""
    if (aug_logits is not None and len(aug_logits) > 0) != (variant == "gem-aug"):
        raise ConfigError("augmented logits are required for gem-aug and only for it")
    if variant == "em":
        return GemConfig("em", 1.0, 1.0, s, False, m), None
    tau_a = dynamic_temperature(logits, s)
    if variant == "gem-t":
        return GemConfig("gem-t", tau_a, tau_a, s, False, m), None
    if variant == "gem-skd":
        return GemConfig("gem-skd", 1.0, tau_a, s, True, m), None
    if variant == "gem-aug":
        teacher = np.mean(np.stack([np.asarray(a) for a in aug_logits]), axis=0)
        return GemConfig("gem-aug", 1.0, tau_a, s, True, len(aug_logits)), teacher
    raise ConfigError(f"make_variant does not handle {variant!r}")
