"""Test-time adaptation of a trained :class:`~domainadaptor.nn.Model` on unlabeled batches.

``adapt_batch`` runs one method on one batch. For the DomainAdaptor methods the
order is: forward with AdaMixBN (per-layer alpha), fold the source share into
the BN affine pair, take ``steps`` SGD steps on that pair with a GEM loss, then
re-predict. In episodic mode the parameters are restored afterwards.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .bn import AlphaRecord, BnLayerState, transform_affine
from .errors import ConfigError, PreconditionError
from .gem import em_loss, gem_loss, make_variant, softmax_t
from .nn import ADABN, ADAMIX, SOURCE, Model, NormMode, mix, restore, sgd_step, snapshot

NORM_ONLY = ("source-only", "adabn", "mixbn-fixed", "adamixbn-no-finetune")
FINETUNE = ("tent", "domainadaptor-T", "domainadaptor-SKD", "domainadaptor-AUG")
METHODS = NORM_ONLY + FINETUNE
LOSS_OF = {
    "tent": "em",
    "domainadaptor-T": "gem-t",
    "domainadaptor-SKD": "gem-skd",
    "domainadaptor-AUG": "gem-aug",
}


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "domainadaptor-T"
    lr: float = 1e-3
    steps: int = 1
    mode: str = "episodic"
    confidence_threshold: float = 0.0
    # fixed source weight; required by mixbn-fixed, replaces the dynamic alpha elsewhere
    alpha: Optional[float] = None
    transform: bool = True
    s: float = 1.0
    m: int = 8
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mode not in ("episodic", "online"):
            raise ConfigError("mode must be 'episodic' or 'online'")
        if self.lr < 0 or self.steps < 0:
            raise ConfigError("lr and steps must be non-negative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0, 1]")
        if self.method == "mixbn-fixed" and self.alpha is None:
            raise ConfigError("mixbn-fixed needs alpha")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.s <= 0 or self.m < 1:
            raise ConfigError("s must be positive and m at least 1")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")

    @property
    def label(self) -> str:
        if self.method == "mixbn-fixed":
            return f"mixbn-fixed({self.alpha:g})"
        return self.method


@dataclass
class BatchReport:
    method: str
    batch_index: int
    batch_size: int
    seed: int
    alphas: List[Optional[float]]
    alpha_records: List[AlphaRecord]
    loss: float = float("nan")
    grad_norm: float = float("nan")
    n_used: int = 0
    acc_pre: Optional[float] = None
    acc_post: Optional[float] = None
    correct: Optional[int] = None


@dataclass
class AdaptReport:
    method: str
    seed: int
    entries: List[BatchReport] = field(default_factory=list)
    predictions: List[np.ndarray] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        total = sum(e.batch_size for e in self.entries if e.correct is not None)
        if total == 0:
            return float("nan")
        return sum(e.correct for e in self.entries if e.correct is not None) / total

    def write_csv(self, path, run_id: str, domain: str, append: bool = False) -> None:
        write_report_csv([self], path, run_id, domain, append=append)


def _check_source_stats(model: Model) -> None:
    for s in model.bn_layers:
        if not np.any(model.buffers[f"{s.name}.running_var"] > 0):
            raise PreconditionError(f"BN layer {s.name} has no running statistics (all-zero variance)")


def _norm_mode(cfg: AdaptConfig) -> NormMode:
    if cfg.method == "source-only":
        return SOURCE
    if cfg.method in ("adabn", "tent"):
        return ADABN
    if cfg.alpha is not None:
        return mix(cfg.alpha)
    return ADAMIX


def _accuracy(preds: np.ndarray, labels) -> Tuple[Optional[float], Optional[int]]:
    if labels is None:
        return None, None
    correct = int((preds == np.asarray(labels)).sum())
    return correct / len(preds), correct


def batch_seed(seed: int, batch: np.ndarray) -> int:
    """Per-batch seed that depends on content, not stream position."""
    digest = zlib.crc32(np.ascontiguousarray(batch).tobytes())
    return int(np.random.SeedSequence([seed, digest]).generate_state(1)[0])


def _bilinear_resize(crops: List[np.ndarray], size: Tuple[int, int]) -> np.ndarray:
    out = []
    h, w = size
    for img in crops:
        ch, cw = img.shape[1:]
        ys = (np.arange(h) + 0.5) * (ch / h) - 0.5
        xs = (np.arange(w) + 0.5) * (cw / w) - 0.5
        ys = np.clip(ys, 0, ch - 1)
        xs = np.clip(xs, 0, cw - 1)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, ch - 1)
        x1 = np.minimum(x0 + 1, cw - 1)
        wy = (ys - y0).astype(img.dtype)[:, None]
        wx = (xs - x0).astype(img.dtype)[None, :]
        top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
        bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
        out.append(top * (1 - wy) + bottom * wy)
    return np.stack(out)


def augment_views(batch: np.ndarray, m: int, seed: int, crop_scale=(0.8, 1.0), flip_prob: float = 0.5
                  ) -> List[np.ndarray]:
    """``m`` independently augmented copies: square random crop covering an area
    fraction drawn from ``crop_scale``, bilinear resize back, random horizontal flip."""
    if m < 1:
        raise ValueError("m must be at least 1")
    n, _, h, w = batch.shape
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(m):
        crops = []
        for i in range(n):
            scale = rng.uniform(*crop_scale)
            ch = max(1, min(h, int(round(h * np.sqrt(scale)))))
            cw = max(1, min(w, int(round(w * np.sqrt(scale)))))
            top = rng.integers(0, h - ch + 1)
            left = rng.integers(0, w - cw + 1)
            crop = batch[i, :, top:top + ch, left:left + cw]
            if rng.random() < flip_prob:
                crop = crop[:, :, ::-1]
            crops.append(crop)
        views.append(_bilinear_resize(crops, (h, w)).astype(batch.dtype))
    return views


def _apply_transform(model: Model) -> None:
    """Replace each BN layer's (gamma, beta) by the transformed pair for the latest trace."""
    for tr in model.trace:
        g = model.params[f"{tr.name}.gamma"]
        b = model.params[f"{tr.name}.beta"]
        state = BnLayerState(g, b, model.running_stats(tr.name), model.eps)
        gamma_t, beta_t = transform_affine(state, tr.test, tr.alpha)
        np.copyto(g, gamma_t.astype(g.dtype))
        np.copyto(b, beta_t.astype(b.dtype))


def _loss_and_grad(loss_name: str, logits: np.ndarray, mask: np.ndarray, cfg: AdaptConfig,
                   teacher_views: Optional[List[np.ndarray]]):
    z = logits[mask]
    if loss_name == "em":
        res = em_loss(z)
    else:
        aug = [v[mask] for v in teacher_views] if teacher_views is not None else None
        gcfg, teacher = make_variant(loss_name, z, cfg.s, aug, cfg.m)
        res = gem_loss(z, gcfg, teacher)
    full = np.zeros_like(logits)
    full[mask] = res.logit_grad
    return res.value, full


def adapt_batch(model: Model, batch: np.ndarray, labels=None, cfg: AdaptConfig = AdaptConfig(),
                batch_index: int = 0) -> Tuple[np.ndarray, BatchReport]:
    """Adapt to one unlabeled batch and predict it. Labels only feed the report."""
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError(f"batch must be N x C x H x W with N >= 1, got {batch.shape}")
    _check_source_stats(model)
    report = BatchReport(cfg.label, batch_index, batch.shape[0], cfg.seed, [], [])
    norm = _norm_mode(cfg)
    logits0 = model.forward(batch, norm)
    trace0 = list(model.trace)
    if norm.kind != "source":
        report.alphas = [tr.alpha for tr in trace0]
        report.alpha_records = [tr.record for tr in trace0 if tr.record is not None]
    pre = logits0.argmax(axis=1)
    report.acc_pre, _ = _accuracy(pre, labels)
    if cfg.method in NORM_ONLY:
        report.acc_post, report.correct = _accuracy(pre, labels)
        return pre, report

    snap = snapshot(model) if cfg.mode == "episodic" else None
    try:
        if cfg.method == "tent" or cfg.transform:
            if cfg.method != "tent":
                _apply_transform(model)
            train_mode = ADABN
        else:
            train_mode = norm
        confidence = softmax_t(logits0, 1.0).max(axis=1)
        mask = confidence >= cfg.confidence_threshold
        report.n_used = int(mask.sum())
        loss_name = LOSS_OF[cfg.method]
        teacher_views = None
        if loss_name == "gem-aug" and report.n_used:
            views = augment_views(batch, cfg.m, batch_seed(cfg.seed, batch), cfg.crop_scale, cfg.flip_prob)
            teacher_views = [model.forward(v, train_mode) for v in views]
        trainable = model.affine_names()
        logits = None
        for step in range(cfg.steps):
            logits = model.forward(batch, train_mode)
            if not report.n_used:
                break
            value, grad = _loss_and_grad(loss_name, logits, mask, cfg, teacher_views)
            grads = model.backward(grad, trainable)
            if step == 0:
                report.loss = value
                report.grad_norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                                     for g in grads.values())))
            sgd_step(model, grads, cfg.lr)
        if cfg.steps == 0 or report.n_used:
            logits = model.forward(batch, train_mode)
        post = logits.argmax(axis=1)
    finally:
        if snap is not None:
            restore(model, snap)
    report.acc_post, report.correct = _accuracy(post, labels)
    return post, report


def tent_adapt(model: Model, batch: np.ndarray, cfg: AdaptConfig = AdaptConfig(method="tent")) -> np.ndarray:
    """Entropy minimization of the original BN affine pair under batch statistics."""
    return adapt_batch(model, batch, None, replace(cfg, method="tent"))[0]


def _split(item):
    if isinstance(item, tuple):
        return item[0], item[1]
    return item, None


def run_stream(model: Model, batches: Iterable, cfg: AdaptConfig) -> AdaptReport:
    """Apply :func:`adapt_batch` to each batch (``x`` or ``(x, labels)``) in order."""
    report = AdaptReport(cfg.label, cfg.seed)
    for i, item in enumerate(batches):
        x, y = _split(item)
        preds, entry = adapt_batch(model, x, y, cfg, batch_index=i)
        report.entries.append(entry)
        report.predictions.append(preds)
    return report


REPORT_FIELDS = ["run_id", "method", "domain", "seed", "batch_index", "batch_size"]
REPORT_TAIL = ["loss", "grad_norm", "acc_pre", "acc_post"]
ALPHA_FIELDS = ["run_id", "method", "domain", "seed", "batch_index",
                "layer_index", "alpha", "d_st", "mean_d_s", "mean_d_t"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(reports: Sequence[AdaptReport], path, run_id: str, domain: str,
                     n_layers: Optional[int] = None, append: bool = False) -> None:
    """One row per batch; columns ``alpha_bn<k>`` hold the per-layer source weight."""
    if n_layers is None:
        n_layers = max((len(e.alphas) for r in reports for e in r.entries), default=0)
    header = REPORT_FIELDS + [f"alpha_bn{k + 1}" for k in range(n_layers)] + REPORT_TAIL
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(header)
        for r in reports:
            for e in r.entries:
                alphas = list(e.alphas) + [None] * (n_layers - len(e.alphas))
                w.writerow([_fmt(v) for v in [run_id, e.method, domain, e.seed, e.batch_index, e.batch_size,
                                             *alphas, e.loss, e.grad_norm, e.acc_pre, e.acc_post]])


def write_alpha_csv(reports: Sequence[AdaptReport], path, run_id: str, domain: str, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(ALPHA_FIELDS)
        for r in reports:
            for e in r.entries:
                for rec in e.alpha_records:
                    w.writerow([_fmt(v) for v in [run_id, e.method, domain, e.seed, e.batch_index,
                                                 rec.layer_index, rec.alpha, rec.d_st, rec.mean_d_s, rec.mean_d_t]])
