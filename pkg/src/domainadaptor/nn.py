"""A small numpy CNN with hand-written forward and backward passes.

Parameters live in ``Model.params`` (name -> ndarray) and BN running
statistics in ``Model.buffers``. How BN layers normalize is chosen per
forward call with a :class:`NormMode`.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .bn import AlphaRecord, BatchNormOp, ChannelStats, batch_stats, compute_alpha, image_stats_batch
from .errors import IncompatibleSnapshotError, ShapeError, StateError

LAYER_KINDS = ("conv2d", "batchnorm2d", "relu", "global-avg-pool", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NormMode:
    """How every BN layer normalizes during one forward pass.

    kind is one of ``train`` (batch stats, running stats updated), ``source``,
    ``adabn``, ``mix-fixed`` (needs ``alpha``) or ``adamix``.
    """

    kind: str
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("train", "source", "adabn", "mix-fixed", "adamix"):
            raise ValueError(f"unknown normalization mode {self.kind!r}")
        if (self.alpha is not None) != (self.kind == "mix-fixed"):
            raise ValueError("alpha is given exactly when kind == 'mix-fixed'")


TRAIN = NormMode("train")
SOURCE = NormMode("source")
ADABN = NormMode("adabn")
ADAMIX = NormMode("adamix")


def mix(alpha: float) -> NormMode:
    return NormMode("mix-fixed", float(alpha))


@dataclass
class BnTrace:
    """What one BN layer saw during the latest forward pass."""

    layer_index: int
    name: str
    test: Optional[ChannelStats]
    alpha: Optional[float]
    record: Optional[AlphaRecord] = None


def small_convnet(num_classes: int = 5, in_ch: int = 3) -> List[LayerSpec]:
    """conv(3->16,s1)-BN-ReLU, conv(16->32,s2)-BN-ReLU, conv(32->64,s2)-BN-ReLU, GAP, linear."""
    specs: List[LayerSpec] = []
    chans = [in_ch, 16, 32, 64]
    strides = [1, 2, 2]
    for i in range(3):
        specs += [
            LayerSpec("conv2d", f"conv{i + 1}", chans[i], chans[i + 1], 3, strides[i], 1),
            LayerSpec("batchnorm2d", f"bn{i + 1}", chans[i + 1], chans[i + 1]),
            LayerSpec("relu", f"relu{i + 1}"),
        ]
    specs += [LayerSpec("global-avg-pool", "pool"), LayerSpec("linear", "fc", 64, num_classes)]
    return specs


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # xp is channels-last (N, H, W, C); columns are ordered (kh, kw, c)
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols.reshape(n * ho * wo, k * k * c)


class Model:
    """Sequential network over a fixed list of :class:`LayerSpec`."""

    def __init__(self, specs: Iterable[LayerSpec], seed: int = 0, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.specs = list(specs)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.trace: List[BnTrace] = []
        self._caches: Optional[list] = None
        self._check_chain()
        self._init_params()

    # construction -------------------------------------------------------

    def _check_chain(self) -> None:
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique")
        width = None
        for s in self.specs:
            if s.kind in ("conv2d", "linear", "batchnorm2d"):
                if width is not None and s.in_ch != width:
                    raise ShapeError(f"layer {s.name} expects {s.in_ch} channels, receives {width}")
                width = s.out_ch if s.kind != "batchnorm2d" else s.in_ch
                if s.kind == "batchnorm2d" and s.out_ch not in (0, s.in_ch):
                    raise ShapeError(f"BN layer {s.name} must preserve the channel count")

    def _init_params(self) -> None:
        rng = np.random.default_rng(self.seed)
        for s in self.specs:
            if s.kind == "conv2d":
                fan_in = s.in_ch * s.kernel * s.kernel
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, (s.out_ch, s.in_ch, s.kernel, s.kernel))
                self.params[f"{s.name}.weight"] = w.astype(self.dtype)
            elif s.kind == "linear":
                bound = np.sqrt(6.0 / s.in_ch)
                w = rng.uniform(-bound, bound, (s.out_ch, s.in_ch))
                self.params[f"{s.name}.weight"] = w.astype(self.dtype)
                self.params[f"{s.name}.bias"] = np.zeros(s.out_ch, dtype=self.dtype)
            elif s.kind == "batchnorm2d":
                self.params[f"{s.name}.gamma"] = np.ones(s.in_ch, dtype=self.dtype)
                self.params[f"{s.name}.beta"] = np.zeros(s.in_ch, dtype=self.dtype)
                self.buffers[f"{s.name}.running_mean"] = np.zeros(s.in_ch, dtype=self.dtype)
                self.buffers[f"{s.name}.running_var"] = np.ones(s.in_ch, dtype=self.dtype)

    def architecture(self) -> dict:
        return {
            "layers": [asdict(s) for s in self.specs],
            "dtype": self.dtype.name,
            "eps": self.eps,
            "momentum": self.momentum,
        }

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "Model":
        specs = [LayerSpec(**d) for d in arch["layers"]]
        return cls(specs, seed=seed, dtype=arch["dtype"], eps=arch["eps"], momentum=arch["momentum"])

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.trace = []
        other._caches = None
        return other

    @property
    def bn_layers(self) -> List[LayerSpec]:
        return [s for s in self.specs if s.kind == "batchnorm2d"]

    def affine_names(self) -> List[str]:
        out = []
        for s in self.bn_layers:
            out += [f"{s.name}.gamma", f"{s.name}.beta"]
        return out

    def running_stats(self, bn_name: str) -> ChannelStats:
        return ChannelStats(self.buffers[f"{bn_name}.running_mean"], self.buffers[f"{bn_name}.running_var"])

    # forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, mode: NormMode = SOURCE) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        first = self.specs[0]
        if first.kind == "linear":
            if x.ndim != 2 or x.shape[1] != first.in_ch:
                raise ShapeError(f"expected input N x {first.in_ch}, got {x.shape}")
        elif x.ndim != 4 or x.shape[1] != first.in_ch:
            raise ShapeError(f"expected input N x {first.in_ch} x H x W, got {x.shape}")
        self.trace = []
        caches = []
        bn_index = 0
        for s in self.specs:
            if s.kind == "conv2d":
                x, cache = self._conv_forward(s, x)
            elif s.kind == "batchnorm2d":
                x, cache = self._bn_forward(s, x, mode, bn_index)
                bn_index += 1
            elif s.kind == "relu":
                cache = x > 0
                x = x * cache
            elif s.kind == "global-avg-pool":
                if x.ndim != 4:
                    raise ShapeError(f"{s.name} expects a rank-4 input, got {x.shape}")
                cache = x.shape
                x = x.mean(axis=(2, 3))
            else:
                if x.ndim != 2 or x.shape[1] != s.in_ch:
                    raise ShapeError(f"{s.name} expects N x {s.in_ch}, got {x.shape}")
                cache = x
                x = x @ self.params[f"{s.name}.weight"].T + self.params[f"{s.name}.bias"]
            caches.append(cache)
        self._caches = caches
        return x

    def _conv_forward(self, s: LayerSpec, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != s.in_ch:
            raise ShapeError(f"{s.name} expects N x {s.in_ch} x H x W, got {x.shape}")
        n, _, h, w = x.shape
        k, st, p = s.kernel, s.stride, s.padding
        ho = (h + 2 * p - k) // st + 1
        wo = (w + 2 * p - k) // st + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{s.name}: input {h}x{w} too small for kernel {k}")
        xp = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        if p:
            xp = np.pad(xp, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = _im2col(xp, k, st, ho, wo)
        wmat = self.params[f"{s.name}.weight"].transpose(0, 2, 3, 1).reshape(s.out_ch, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, s.out_ch).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, xp.shape, ho, wo)

    def _bn_forward(self, s: LayerSpec, x: np.ndarray, mode: NormMode, index: int):
        gamma = self.params[f"{s.name}.gamma"]
        beta = self.params[f"{s.name}.beta"]
        source = self.running_stats(s.name)
        op = BatchNormOp(self.eps)
        test = None
        record = None
        if mode.kind == "source":
            weight = 1.0
        elif mode.kind in ("adabn", "train"):
            weight = 0.0
            test = batch_stats(x)
        elif mode.kind == "mix-fixed":
            weight = mode.alpha
            test = batch_stats(x)
        else:
            test = batch_stats(x)
            record = compute_alpha(source, test, image_stats_batch(x, self.eps), self.eps, index)
            weight = record.alpha
        out = op.forward(x, gamma, beta, source, weight, test)
        if mode.kind == "train":
            m = self.momentum
            self.buffers[f"{s.name}.running_mean"] = ((1 - m) * source.mean + m * test.mean).astype(self.dtype)
            self.buffers[f"{s.name}.running_var"] = ((1 - m) * source.var + m * test.var).astype(self.dtype)
        self.trace.append(BnTrace(index, s.name, test, None if mode.kind == "train" else weight, record))
        return out, op

    def backward(self, dlogits: np.ndarray, trainable: Iterable[str]) -> Dict[str, np.ndarray]:
        """Back-propagate ``dL/dlogits``; return gradients for ``trainable`` names only."""
        if self._caches is None:
            raise StateError("backward called before forward")
        trainable = set(trainable)
        unknown = trainable - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        grads: Dict[str, np.ndarray] = {}
        dy = np.asarray(dlogits, dtype=self.dtype)
        for pos in range(len(self.specs) - 1, -1, -1):
            s = self.specs[pos]
            cache = self._caches[pos]
            need_dx = pos > 0
            if s.kind == "linear":
                wname, bname = f"{s.name}.weight", f"{s.name}.bias"
                if wname in trainable:
                    grads[wname] = dy.T @ cache
                if bname in trainable:
                    grads[bname] = dy.sum(axis=0)
                dy = dy @ self.params[wname] if need_dx else None
            elif s.kind == "global-avg-pool":
                n, c, h, w = cache
                dy = np.broadcast_to((dy / (h * w))[:, :, None, None], cache).copy()
            elif s.kind == "relu":
                dy = dy * cache
            elif s.kind == "batchnorm2d":
                dx, dgamma, dbeta = cache.backward(dy, need_dx)
                if f"{s.name}.gamma" in trainable:
                    grads[f"{s.name}.gamma"] = dgamma
                if f"{s.name}.beta" in trainable:
                    grads[f"{s.name}.beta"] = dbeta
                dy = dx
            else:
                dy = self._conv_backward(s, cache, dy, trainable, grads, need_dx)
            if dy is None:
                break
        return grads

    def _conv_backward(self, s, cache, dy, trainable, grads, need_dx):
        cols, xp_shape, ho, wo = cache
        k, st, p = s.kernel, s.stride, s.padding
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, s.out_ch)
        wname = f"{s.name}.weight"
        if wname in trainable:
            gw = (d2.T @ cols).reshape(s.out_ch, k, k, s.in_ch)
            grads[wname] = np.ascontiguousarray(gw.transpose(0, 3, 1, 2))
        if not need_dx:
            return None
        wmat = self.params[wname].transpose(0, 2, 3, 1).reshape(s.out_ch, -1)
        n, c = xp_shape[0], xp_shape[3]
        dcols = (d2 @ wmat).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + st * ho:st, j:j + st * wo:st, :] += dcols[:, :, :, i, j, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def forward(model: Model, x: np.ndarray, bn_mode: NormMode = SOURCE) -> np.ndarray:
    return model.forward(x, bn_mode)


def backward(model: Model, loss_grad_on_logits: np.ndarray, trainable: Iterable[str]) -> Dict[str, np.ndarray]:
    return model.backward(loss_grad_on_logits, trainable)


def sgd_step(model: Model, grads: Dict[str, np.ndarray], lr: float) -> None:
    """Plain SGD (no momentum), in place."""
    for name, g in grads.items():
        if name not in model.params:
            raise KeyError(f"no parameter named {name!r}")
        p = model.params[name]
        p -= np.asarray(lr * g, dtype=p.dtype)


@dataclass
class ParamSnapshot:
    architecture: dict
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)


def snapshot(model: Model) -> ParamSnapshot:
    return ParamSnapshot(
        architecture=model.architecture(),
        params={k: v.copy() for k, v in model.params.items()},
        buffers={k: v.copy() for k, v in model.buffers.items()},
    )


def restore(model: Model, snap: ParamSnapshot) -> None:
    if snap.architecture != model.architecture():
        raise IncompatibleSnapshotError("snapshot was taken from a different architecture")
    for k, v in snap.params.items():
        np.copyto(model.params[k], v)
    for k, v in snap.buffers.items():
        model.buffers[k] = v.copy()
