"""Synthetic four-domain shape benchmark, ERM training and evaluation sweeps."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .adapt import METHODS, AdaptConfig, AdaptReport, run_stream
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, DivergenceError
from .nn import TRAIN, Model, SOURCE, small_convnet

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "star")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    hue: float = 0.0  # degrees
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.0
    sketch: bool = False
    stroke: int = 1  # outline width in pixels for sketch domains
    seed: int = 0


@dataclass
class DatasetSplit:
    images: np.ndarray  # N x 3 x H x W, float32 in [0, 1]
    labels: np.ndarray  # int64
    domain: str
    role: str = "test"

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, role: Optional[str] = None) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], self.domain, role or self.role)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    seed: int = 0
    # fraction of every minibatch drawn from a single source domain; 0 is plain shuffling
    domain_purity: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.domain_purity <= 1.0:
            raise ConfigError("domain_purity must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")


# rendering ---------------------------------------------------------------

def _polygon(n_points: int, outer: float, inner: Optional[float] = None) -> np.ndarray:
    if inner is None:
        ang = np.pi / 2 + 2 * np.pi * np.arange(n_points) / n_points
        return np.stack([np.cos(ang), np.sin(ang)], axis=1) * outer
    ang = np.pi / 2 + np.pi * np.arange(2 * n_points) / n_points
    rad = np.where(np.arange(2 * n_points) % 2 == 0, outer, inner)
    return np.stack([np.cos(ang) * rad, np.sin(ang) * rad], axis=1)


_TRIANGLE = _polygon(3, 1.0)
_STAR = _polygon(5, 1.0, 0.42)


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(u.shape, dtype=bool)
    xj, yj = poly[-1]
    for xi, yi in poly:
        crosses = (yi > v) != (yj > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (v - yi) / (yj - yi) + xi
        inside ^= crosses & (u < xint)
        xj, yj = xi, yi
    return inside


def _shape_mask(label: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    shape = SHAPES[label]
    if shape == "circle":
        return u * u + v * v <= 0.85
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.75
    if shape == "triangle":
        return _inside_polygon(u, v, _TRIANGLE)
    if shape == "cross":
        au, av = np.abs(u), np.abs(v)
        return ((au <= 0.28) & (av <= 1.0)) | ((av <= 0.28) & (au <= 1.0))
    return _inside_polygon(u, v, _STAR)


def render_shape(label: int, rng: np.random.Generator, size: int = 32, supersample: int = 3,
                 max_rotation: float = 0.26) -> np.ndarray:
    """Anti-aliased coverage mask (size x size) of one randomly placed shape."""
    radius = rng.uniform(0.3, 0.42) * size
    cx, cy = rng.uniform(0.8 * radius + 1, size - 0.8 * radius - 1, size=2)
    theta = rng.uniform(-max_rotation, max_rotation)
    grid = (np.arange(size * supersample) + 0.5) / supersample
    px, py = np.meshgrid(grid, grid)
    dx, dy = (px - cx) / radius, (py - cy) / radius
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = _shape_mask(label, u, v).astype(np.float32)
    return mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the gray axis (1, 1, 1) / sqrt(3)
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    a = c + (1 - c) * k
    b = k * (1 - c) - r * s
    d = k * (1 - c) + r * s
    return np.array([[a, b, d], [d, a, b], [b, d, a]], dtype=np.float64)


def _erode(solid: np.ndarray) -> np.ndarray:
    padded = np.pad(solid, 1)
    out = np.ones_like(solid)
    for di in range(3):
        for dj in range(3):
            out &= padded[di:di + solid.shape[0], dj:dj + solid.shape[1]]
    return out


def _outline(mask: np.ndarray, width: int = 1) -> np.ndarray:
    solid = mask > 0.5
    inner = solid
    for _ in range(width):
        inner = _erode(inner)
    return solid & ~inner


def render_sample(domain: DomainSpec, label: int, seed: int, index: int, size: int = 32) -> np.ndarray:
    """One 3 x size x size image of class ``label``; pure function of its arguments."""
    rng = np.random.default_rng([seed, domain.seed, index])
    mask = render_shape(label, rng, size)
    bg = np.full(3, rng.uniform(0.0, 0.35))
    fg = rng.uniform(0.0, 1.0, 3)
    fg = fg / max(fg.max(), 1e-6) * rng.uniform(0.6, 1.0)
    shade = 1.0 + 0.15 * np.linspace(-1, 1, size)[None, :] * rng.choice([-1.0, 1.0])
    img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask * shade
    if domain.sketch:
        img = np.repeat(1.0 - 0.9 * _outline(mask, domain.stroke)[None].astype(np.float64), 3, axis=0)
    elif domain.hue:
        img = np.einsum("ij,jhw->ihw", _hue_matrix(domain.hue), img)
    img = (img - 0.5) * domain.contrast + 0.5 + domain.brightness
    if domain.noise:
        img = img + rng.normal(0.0, domain.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_domain(domain: DomainSpec, n: int, num_classes: int = 5, seed: int = 0, size: int = 32) -> DatasetSplit:
    if n < 2 * num_classes:
        raise ConfigError(f"per-domain size must be at least {2 * num_classes}")
    if not 2 <= num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes must lie in [2, {len(SHAPES)}]")
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.stack([render_sample(domain, int(labels[i]), seed, i, size) for i in range(n)])
    return DatasetSplit(images, labels, domain.name, "test")


def generate_dataset(domains: Sequence[DomainSpec], per_domain_n: int, num_classes: int = 5,
                     seed: int = 0, size: int = 32) -> Dict[str, DatasetSplit]:
    return {d.name: generate_domain(d, per_domain_n, num_classes, seed, size) for d in domains}


def save_split(split: DatasetSplit, path) -> None:
    save_tensors(path, {"images": split.images, "labels": split.labels},
                 {"domain": split.domain, "role": split.role})


def load_split(path) -> DatasetSplit:
    tensors, meta = load_tensors(path)
    return DatasetSplit(tensors["images"], tensors["labels"], meta["domain"], meta.get("role", "test"))


# training ------------------------------------------------------------------

def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Plain inference with the stored source statistics."""
    out = [model.forward(images[i:i + batch_size], SOURCE).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _epoch_batches(tr_idx, domain_of, cfg: TrainConfig, rng) -> List[np.ndarray]:
    bsz = cfg.batch_size
    k = int(round(cfg.domain_purity * bsz))
    chunks, rest = [], []
    for d in np.unique(domain_of[tr_idx]):
        g = tr_idx[domain_of[tr_idx] == d]
        g = g[rng.permutation(len(g))]
        n_pure = (int(round(cfg.domain_purity * len(g))) // k) * k if k else 0
        if k:
            chunks += [g[i:i + k] for i in range(0, n_pure, k)]
        rest.append(g[n_pure:])
    rest = np.concatenate(rest)
    rest = rest[rng.permutation(len(rest))]
    batches, pos = [], 0
    for c in chunks:
        take = rest[pos:pos + bsz - k]
        pos += len(take)
        batches.append(np.concatenate([c, take]))
    batches += [rest[i:i + bsz] for i in range(pos, len(rest), bsz)]
    batches = [b for b in batches if len(b) >= 2]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_baseline(sources: Sequence[DatasetSplit], cfg: TrainConfig = TrainConfig(),
                   num_classes: int = 5, model: Optional[Model] = None) -> Tuple[Model, List[dict]]:
    """ERM on the union of the source splits (momentum SGD, cosine learning rate).

    Returns the model and one log dict per epoch with train loss/accuracy and
    source-validation accuracy.
    """
    if len(sources) < 2:
        raise ConfigError("need at least two source splits")
    images = np.concatenate([s.images for s in sources])
    labels = np.concatenate([s.labels for s in sources])
    domain_of = np.concatenate([np.full(len(s), i) for i, s in enumerate(sources)])
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(labels))
    n_val = int(round(cfg.val_fraction * len(labels)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if model is None:
        model = Model(small_convnet(num_classes), seed=cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    names = list(model.params)
    total = cfg.epochs * len(_epoch_batches(tr_idx, domain_of, cfg, np.random.default_rng(0)))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        for b, idx in enumerate(_epoch_batches(tr_idx, domain_of, cfg, rng)):
            x, y = images[idx], labels[idx]
            logits = model.forward(x, TRAIN)
            loss, dlogits = _cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {b}")
            grads = model.backward(dlogits, names)
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total))
            for k in names:
                g = grads[k]
                if cfg.weight_decay and not k.endswith((".gamma", ".beta", ".bias")):
                    g = g + cfg.weight_decay * model.params[k]
                velocity[k] = cfg.momentum * velocity[k] + g
                model.params[k] -= (lr * velocity[k]).astype(model.dtype)
            step += 1
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(idx)
        entry = {"epoch": epoch + 1, "train_loss": loss_sum / max(seen, 1), "train_acc": correct / max(seen, 1)}
        if n_val:
            entry["val_acc"] = float((predict(model, images[val_idx]) == labels[val_idx]).mean())
        log.info("epoch %d: %s", epoch + 1, entry)
        history.append(entry)
    return model, history


# evaluation ----------------------------------------------------------------

def parse_method(spec: str, base: AdaptConfig) -> AdaptConfig:
    """``method[@modifier...]`` with modifiers ``online``, ``episodic`` and ``noT``."""
    name, *mods = spec.split("@")
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}")
    cfg = replace(base, method=name)
    for mod in mods:
        if mod in ("online", "episodic"):
            cfg = replace(cfg, mode=mod)
        elif mod == "noT":
            cfg = replace(cfg, transform=False)
        else:
            raise ConfigError(f"unknown method modifier {mod!r} in {spec!r}")
    return cfg


def stream_batches(split: DatasetSplit, batch_size: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Fixed test order for a given seed, shared by every method."""
    order = np.random.default_rng(seed).permutation(len(split))
    return [(split.images[order[i:i + batch_size]], split.labels[order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)]


def evaluate(model: Model, split: DatasetSplit, cfg: AdaptConfig, batch_size: int = 64,
             seed: Optional[int] = None, subset_size: Optional[int] = None) -> AdaptReport:
    """Stream ``split`` through the adaptation method on a private model copy.

    With ``subset_size`` the ordered stream is cut into subsets and the model is
    reset to the checkpoint at the start of each subset.
    """
    seed = cfg.seed if seed is None else seed
    cfg = replace(cfg, seed=seed)
    order = np.random.default_rng(seed).permutation(len(split))
    chunks = [order] if subset_size is None else [order[i:i + subset_size] for i in range(0, len(order), subset_size)]
    report = AdaptReport(cfg.label, seed)
    for chunk in chunks:
        work = model.clone()
        batches = [(split.images[chunk[i:i + batch_size]], split.labels[chunk[i:i + batch_size]])
                   for i in range(0, len(chunk), batch_size)]
        part = run_stream(work, batches, cfg)
        offset = len(report.entries)
        for e in part.entries:
            e.batch_index += offset
        report.entries += part.entries
        report.predictions += part.predictions
    return report


SWEEP_KINDS = ("alpha", "batch_size", "confidence", "subset", "degradation")
DEFAULT_SWEEP_METHODS = {
    "alpha": ["mixbn-fixed"],
    "batch_size": ["adabn", "adamixbn-no-finetune"],
    "confidence": ["tent", "domainadaptor-T", "domainadaptor-SKD", "domainadaptor-AUG"],
    "subset": ["domainadaptor-T", "tent@online"],
    "degradation": ["adamixbn-no-finetune", "domainadaptor-AUG@noT", "domainadaptor-AUG"],
}


@dataclass
class SweepRow:
    sweep: str
    domain: str
    seed: int
    grid_value: float
    method: str
    accuracy: float
    n: int


def _grid_point(kind: str, value, spec: str, base: AdaptConfig, batch_size: int):
    if kind in ("alpha", "degradation"):
        base = replace(base, alpha=float(value))
    cfg = parse_method(spec, base)
    subset = None
    if kind == "batch_size":
        batch_size = int(value)
    elif kind == "confidence":
        cfg = replace(cfg, confidence_threshold=float(value))
    elif kind == "subset":
        subset = int(value)
    return cfg, batch_size, subset


def _sweep_unit(args) -> List[SweepRow]:
    kind, grid, methods, base, domain, model, split, seed, batch_size = args
    rows = []
    for value in grid:
        for spec in methods:
            cfg, bs, subset = _grid_point(kind, value, spec, base, batch_size)
            rep = evaluate(model, split, cfg, bs, seed=seed, subset_size=subset)
            rows.append(SweepRow(kind, domain, seed, float(value), spec, rep.accuracy, len(split)))
    return rows


def sweep(kind: str, grid: Sequence[float], base: AdaptConfig, targets: Dict[str, Tuple[Model, DatasetSplit]],
          seeds: Iterable[int] = range(5), methods: Optional[Sequence[str]] = None, batch_size: int = 64,
          out_dir=None, jobs: int = 1) -> List[SweepRow]:
    """Evaluate every (grid value, method) on every held-out domain and seed.

    When ``out_dir`` is given writes ``<kind>_<domain>_<seed>.csv`` per unit and
    ``<kind>_summary.csv`` with the mean and std over seeds.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    if not grid:
        raise ConfigError("sweep grid must be non-empty")
    methods = list(methods or DEFAULT_SWEEP_METHODS[kind])
    for spec in methods:
        _grid_point(kind, grid[0], spec, base, batch_size)
    units = [(kind, list(grid), methods, base, d, m, s, seed, batch_size)
             for d, (m, s) in targets.items() for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_unit, units))
    else:
        results = [_sweep_unit(u) for u in units]
    rows = [r for unit_rows in results for r in unit_rows]
    if out_dir is not None:
        write_sweep_csvs(rows, kind, Path(out_dir))
    return rows


SWEEP_FIELDS = ["sweep", "domain", "seed", "grid_value", "method", "accuracy", "n"]


def write_sweep_csvs(rows: List[SweepRow], kind: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    by_unit: Dict[Tuple[str, int], List[SweepRow]] = {}
    for r in rows:
        by_unit.setdefault((r.domain, r.seed), []).append(r)
    for (domain, seed), unit in by_unit.items():
        with open(out_dir / f"{kind}_{domain}_{seed}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_FIELDS)
            for r in unit:
                w.writerow([r.sweep, r.domain, r.seed, repr(r.grid_value), r.method, repr(r.accuracy), r.n])
    with open(out_dir / f"{kind}_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "domain", "grid_value", "method", "mean_accuracy", "std_accuracy", "n_seeds"])
        for key, accs in summarize(rows).items():
            domain, value, method = key
            w.writerow([kind, domain, repr(value), method, repr(float(np.mean(accs))),
                        repr(float(np.std(accs))), len(accs)])


def summarize(rows: Iterable[SweepRow]) -> Dict[Tuple[str, float, str], List[float]]:
    """Group accuracies by (domain, grid value, method), keeping first-seen order."""
    out: Dict[Tuple[str, float, str], List[float]] = {}
    for r in rows:
        out.setdefault((r.domain, r.grid_value, r.method), []).append(r.accuracy)
    return out
