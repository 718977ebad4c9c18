"""Normalization statistics: AdaMixBN mixing, the dynamic mixing coefficient,
and the re-parameterization of source statistics into the affine pair.

All feature maps are ``N x C x H x W`` numpy arrays. Variances are biased
(population) estimates throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError, StateError

BN_MODES = ("source", "adabn", "mix-fixed", "adamix")


@dataclass
class ChannelStats:
    """Per-channel mean and (population) variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.var = np.asarray(self.var)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ShapeError(
                f"mean/var must be 1-D of equal length, got {self.mean.shape} and {self.var.shape}"
            )
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def std(self, eps: float = 0.0) -> np.ndarray:
        return np.sqrt(self.var + eps)


@dataclass
class AlphaRecord:
    layer_index: int
    alpha: float
    d_st: float
    mean_d_s: float
    mean_d_t: float


@dataclass
class BnLayerState:
    """Everything a single BN layer needs to normalize a batch."""

    gamma: np.ndarray
    beta: np.ndarray
    running: ChannelStats
    eps: float = 1e-5
    mode: str = "source"
    fixed_alpha: Optional[float] = None
    transformed: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.mode not in BN_MODES:
            raise ConfigError(f"unknown BN mode {self.mode!r}; expected one of {BN_MODES}")
        if (self.fixed_alpha is not None) != (self.mode == "mix-fixed"):
            raise ConfigError("fixed_alpha is required for mode 'mix-fixed' and only for it")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError("fixed_alpha must lie in [0, 1]")


def _channel_view(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def _check_rank4(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected an N x C x H x W feature map, got shape {x.shape}")


def batch_stats(x: np.ndarray) -> ChannelStats:
    """Channel mean and biased variance over the N, H, W axes."""
    _check_rank4(x)
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - _channel_view(mean)) ** 2).mean(axis=(0, 2, 3))
    return ChannelStats(mean, var)


def image_stats(x_i: np.ndarray, eps: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial mean and population std per channel of one ``C x H x W`` sample."""
    if x_i.ndim != 3:
        raise ShapeError(f"expected a C x H x W sample, got shape {x_i.shape}")
    mean = x_i.mean(axis=(1, 2))
    var = ((x_i - mean[:, None, None]) ** 2).mean(axis=(1, 2))
    return mean, np.sqrt(var + eps)


def image_stats_batch(x: np.ndarray, eps: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`image_stats` for every sample; returns two ``N x C`` arrays."""
    _check_rank4(x)
    mean = x.mean(axis=(2, 3))
    var = ((x - mean[:, :, None, None]) ** 2).mean(axis=(2, 3))
    return mean, np.sqrt(var + eps)


def stats_distance(a: Tuple[np.ndarray, np.ndarray], b: Tuple[np.ndarray, np.ndarray]) -> float:
    """``||mean_a - mean_b||_2 + ||std_a - std_b||_2``."""
    ma, sa = (np.asarray(v) for v in a)
    mb, sb = (np.asarray(v) for v in b)
    if ma.shape != mb.shape or sa.shape != sb.shape:
        raise ShapeError("statistics have different channel counts")
    return float(np.linalg.norm(ma - mb) + np.linalg.norm(sa - sb))


def _as_image_arrays(per_image) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(per_image, tuple) and len(per_image) == 2 and np.ndim(per_image[0]) == 2:
        return np.asarray(per_image[0]), np.asarray(per_image[1])
    means = np.stack([np.asarray(m) for m, _ in per_image])
    stds = np.stack([np.asarray(s) for _, s in per_image])
    return means, stds


def compute_alpha(
    source: ChannelStats,
    test: ChannelStats,
    per_image: Union[Sequence[Tuple[np.ndarray, np.ndarray]], Tuple[np.ndarray, np.ndarray]],
    eps: float = 0.0,
    layer_index: int = 0,
) -> AlphaRecord:
    """Dynamic source weight ``alpha = 1 - mean_i d_st / (d_t^i + d_s^i)``.

    ``per_image`` holds (mean, std) pairs whose std already includes ``eps``;
    the source and test stds are formed here as ``sqrt(var + eps)``. A sample
    whose two distances are both zero contributes a ratio of 0.
    """
    img_mean, img_std = _as_image_arrays(per_image)
    if img_mean.shape[0] == 0:
        raise ValueError("per_image must be non-empty")
    if img_mean.shape[1] != source.channels or test.channels != source.channels:
        raise ShapeError("source, test and image statistics have different channel counts")
    s_std = source.std(eps)
    t_std = test.std(eps)
    d_st = np.linalg.norm(source.mean - test.mean) + np.linalg.norm(s_std - t_std)
    d_s = np.linalg.norm(img_mean - source.mean, axis=1) + np.linalg.norm(img_std - s_std, axis=1)
    d_t = np.linalg.norm(img_mean - test.mean, axis=1) + np.linalg.norm(img_std - t_std, axis=1)
    denom = d_s + d_t
    safe = np.where(denom > 0, denom, 1.0)
    ratio = np.where(denom > 0, d_st / safe, 0.0)
    # each ratio is at most 1 by the triangle inequality; the clip only absorbs rounding
    alpha = min(max(1.0 - float(ratio.mean()), 0.0), 1.0)
    return AlphaRecord(
        layer_index=layer_index,
        alpha=float(alpha),
        d_st=float(d_st),
        mean_d_s=float(d_s.mean()),
        mean_d_t=float(d_t.mean()),
    )


def mix_stats(source: ChannelStats, test: ChannelStats, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Convex combination of the two statistics (mean, var)."""
    mean = alpha * source.mean + (1.0 - alpha) * test.mean
    var = alpha * source.var + (1.0 - alpha) * test.var
    return mean, var


def normalize(x, gamma, beta, mean, var, eps) -> np.ndarray:
    inv = 1.0 / np.sqrt(var + eps)
    return (x - _channel_view(mean)) * _channel_view(inv * gamma) + _channel_view(beta)


def mixbn_forward(x: np.ndarray, state: BnLayerState, test: Optional[ChannelStats], alpha: float) -> np.ndarray:
    """Normalize with ``alpha`` parts source statistics and ``1 - alpha`` test statistics."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if test is None:
        test = batch_stats(x)
    mean, var = mix_stats(state.running, test, alpha)
    return normalize(x, state.gamma, state.beta, mean, var, state.eps)


def transform_affine(state: BnLayerState, test: ChannelStats, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Fold the source-statistics share of the mixture into ``(gamma', beta')``.

    Normalizing with test statistics alone and the returned pair reproduces
    :func:`mixbn_forward` on the same batch.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    sigma_t = np.sqrt(test.var + state.eps)
    sigma_mix = np.sqrt(alpha * state.running.var + (1.0 - alpha) * test.var + state.eps)
    gamma_t = sigma_t / sigma_mix * state.gamma
    beta_t = alpha * (test.mean - state.running.mean) / sigma_t * gamma_t + state.beta
    return gamma_t, beta_t


class BatchNormOp:
    """Forward/backward of one BN application.

    ``source_weight`` is the share of source statistics in the normalizer;
    batch statistics enter with weight ``1 - source_weight`` and are treated
    as functions of the input during backward. The weight itself is a
    constant for differentiation.
    """

    def __init__(self, eps: float):
        self.eps = eps
        self._cache = None

    def forward(self, x, gamma, beta, source: Optional[ChannelStats], source_weight: float,
                test: Optional[ChannelStats] = None) -> np.ndarray:
        _check_rank4(x)
        w = 1.0 - source_weight
        if w == 0.0:
            if source is None:
                raise ValueError("source statistics required when source_weight is 1")
            mean, var, t_mean = source.mean, source.var, None
        else:
            if test is None:
                test = batch_stats(x)
            if source_weight == 0.0:
                mean, var = test.mean, test.var
            else:
                mean, var = mix_stats(source, test, source_weight)
            t_mean = test.mean
        inv = 1.0 / np.sqrt(var + self.eps)
        xc = x - _channel_view(mean)
        xhat = xc * _channel_view(inv)
        self._cache = (x, xc, xhat, inv, gamma, w, t_mean)
        return xhat * _channel_view(gamma) + _channel_view(beta)

    def backward(self, dy: np.ndarray, need_dx: bool = True):
        if self._cache is None:
            raise StateError("BatchNorm backward called before forward")
        x, xc, xhat, inv, gamma, w, t_mean = self._cache
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dx = None
        if need_dx:
            dxhat = dy * _channel_view(gamma)
            dx = dxhat * _channel_view(inv)
            if w != 0.0:
                count = x.shape[0] * x.shape[2] * x.shape[3]
                d_mean = -(dxhat.sum(axis=(0, 2, 3)) * inv)
                d_var = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5 * inv ** 3)
                dx = dx + _channel_view(d_mean * (w / count))
                dx = dx + (x - _channel_view(t_mean)) * _channel_view(d_var * (2.0 * w / count))
        return dx, dgamma, dbeta


def bn_forward_backward(x: np.ndarray, state: BnLayerState, mode: Optional[str] = None
                        ) -> Tuple[np.ndarray, Callable[[np.ndarray], dict]]:
    """Apply one BN layer and return its output plus a backward closure.

    The closure maps ``dL/d(output)`` to a dict with ``dx``, ``dgamma`` and
    ``dbeta``. When ``state.transformed`` is set, the transformed pair is
    used with batch statistics and the gradients refer to that pair.
    """
    mode = mode or state.mode
    gamma, beta = state.gamma, state.beta
    test = None
    if state.transformed is not None:
        gamma, beta = state.transformed
        weight = 0.0
    elif mode == "source":
        weight = 1.0
    elif mode == "adabn":
        weight = 0.0
    elif mode == "mix-fixed":
        if state.fixed_alpha is None:
            raise ConfigError("mode 'mix-fixed' needs fixed_alpha")
        weight = state.fixed_alpha
    elif mode == "adamix":
        test = batch_stats(x)
        rec = compute_alpha(state.running, test, image_stats_batch(x, state.eps), state.eps)
        weight = min(max(rec.alpha, 0.0), 1.0)
    else:
        raise ConfigError(f"unknown BN mode {mode!r}")
    op = BatchNormOp(state.eps)
    out = op.forward(x, gamma, beta, state.running, weight, test)

    def backward(dy: np.ndarray) -> dict:
        dx, dgamma, dbeta = op.backward(dy)
        return {"dx": dx, "dgamma": dgamma, "dbeta": dbeta}

    return out, backward
