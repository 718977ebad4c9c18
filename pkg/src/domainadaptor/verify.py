"""Self-contained invariant checks run by ``domainadaptor verify``.

Each check returns a :class:`CheckResult`; none of them touch the filesystem.
The pytest suite covers the same ground in more depth.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .adapt import AdaptConfig, adapt_batch
from .bn import BnLayerState, ChannelStats, batch_stats, compute_alpha, image_stats_batch, mixbn_forward, normalize, transform_affine
from .gem import GemConfig, em_loss, gem_loss
from .nn import ADABN, SOURCE, Model, mix, small_convnet, snapshot


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_bn_case(rng, dtype, eps):
    c = int(rng.integers(1, 9))
    n = int(rng.integers(1, 6))
    x = rng.normal(rng.normal(0, 2, (1, c, 1, 1)), rng.uniform(0.1, 3), (n, c, 3, 3)).astype(dtype)
    running = ChannelStats(rng.normal(0, 2, c).astype(dtype), rng.uniform(0.05, 4, c).astype(dtype))
    state = BnLayerState(rng.normal(1, 0.5, c).astype(dtype), rng.normal(0, 1, c).astype(dtype), running, eps)
    return x, state, float(rng.uniform())


def transform_max_diff(n_cases: int, dtype, eps: float, seed: int = 0) -> float:
    """Worst |mixed-stat output - transformed-affine output| over random cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, state, alpha = _random_bn_case(rng, dtype, eps)
        test = batch_stats(x)
        ref = mixbn_forward(x, state, test, alpha)
        g, b = transform_affine(state, test, alpha)
        out = normalize(x, g, b, test.mean, test.var, eps)
        worst = max(worst, float(np.max(np.abs(ref - out))))
    return worst


def _gem_rows(z, p, tau_q):
    """Per-row loss ``-tau_q^2 sum_i p_i log q_i``, written independently of :mod:`gem`."""
    return -(tau_q ** 2) * (p * _log_softmax(z, tau_q)).sum(axis=1)


def gem_fd_error(tau_p: float, tau_q: float, detach: bool, c: int, rng, draws: int = 100,
                 rows: int = 4, h: float = 1e-5) -> float:
    """Worst relative error of the analytic logit gradient against central
    differences over ``draws`` random ``rows x c`` logit matrices.

    Rows do not interact, so one perturbed column per pass covers every row.
    """
    cfg = GemConfig("gem", tau_p, tau_q, detach_p=detach)
    worst = 0.0
    for _ in range(draws):
        z = rng.normal(0, 2, (rows, c))
        res = gem_loss(z, cfg)
        p_fixed = np.exp(_log_softmax(z, tau_p))

        def f(zz):
            p = p_fixed if detach else np.exp(_log_softmax(zz, tau_p))
            return _gem_rows(zz, p, tau_q)

        num = np.empty_like(z)
        for j in range(c):
            zp, zm = z.copy(), z.copy()
            zp[:, j] += h
            zm[:, j] -= h
            num[:, j] = (f(zp) - f(zm)) / (2 * h) / rows
        worst = max(worst, _rel_err(res.logit_grad, num))
    return worst


def _log_softmax(z, tau):
    u = z / tau
    u = u - u.max(axis=1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=1, keepdims=True))


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # the floor keeps exactly-zero gradients (detached p with equal temperatures) meaningful
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-3)
    return float(np.max(np.abs(a - b))) / scale


def network_fd_error(seed: int = 0, per_param: int = 4, h: float = 1e-6, mode=ADABN) -> float:
    """Worst relative error over sampled entries of every parameter of a small float64 network."""
    rng = np.random.default_rng(seed)
    model = Model(small_convnet(num_classes=3), seed=seed, dtype=np.float64)
    for name in model.buffers:
        if name.endswith("running_mean"):
            model.buffers[name] = rng.normal(0, 0.3, model.buffers[name].shape)
        else:
            model.buffers[name] = rng.uniform(0.5, 2.0, model.buffers[name].shape)
    x = rng.normal(0, 1, (4, 3, 8, 8))
    r = rng.normal(0, 1, (4, 3))
    model.forward(x, mode)
    grads = model.backward(r, list(model.params))
    worst = 0.0
    for name, w in model.params.items():
        flat = w.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        num = np.empty(len(picks))
        for k, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + h
            fp = float((model.forward(x, mode) * r).sum())
            flat[i] = old - h
            fm = float((model.forward(x, mode) * r).sum())
            flat[i] = old
            num[k] = (fp - fm) / (2 * h)
        ana = grads[name].reshape(-1)[picks]
        worst = max(worst, _rel_err(ana, num))
    return worst


def _check_transform() -> CheckResult:
    d64 = transform_max_diff(1000, np.float64, 1e-12)
    d32 = transform_max_diff(1000, np.float32, 1e-5, seed=1)
    ok = d64 <= 1e-12 and d32 <= 1e-5
    return CheckResult("transform-exactness", ok, f"max diff 64-bit {d64:.2e}, 32-bit {d32:.2e}")


def _check_gem_gradients() -> CheckResult:
    rng = np.random.default_rng(0)
    taus = (1.0, 1.5, 3.0, 7.0)
    worst = max(gem_fd_error(tp, tq, det, c, rng)
                for tp in taus for tq in taus for det in (False, True) for c in (2, 5, 65))
    return CheckResult("gem-gradient-oracle", worst <= 1e-4, f"worst relative error {worst:.2e}")


def _check_network_gradients() -> CheckResult:
    worst = max(network_fd_error(seed=0, mode=ADABN), network_fd_error(seed=1, mode=mix(0.6)))
    return CheckResult("network-gradient-oracle", worst <= 1e-4, f"worst relative error {worst:.2e}")


def _check_alpha() -> CheckResult:
    rng = np.random.default_rng(0)
    lo, hi = 1.0, 0.0
    for _ in range(10_000):
        c = int(rng.integers(1, 6))
        n = int(rng.integers(1, 6))
        src = ChannelStats(rng.normal(0, 2, c), rng.uniform(0, 4, c))
        test = ChannelStats(rng.normal(0, 2, c), rng.uniform(0, 4, c))
        per = (rng.normal(0, 2, (n, c)), rng.uniform(0, 2, (n, c)))
        a = compute_alpha(src, test, per).alpha
        lo, hi = min(lo, a), max(hi, a)
    x = rng.normal(0, 1, (5, 4, 3, 3))
    stats = batch_stats(x)
    same = compute_alpha(stats, stats, image_stats_batch(x, 1e-5), 1e-5).alpha
    one = x[:1]
    single = compute_alpha(ChannelStats(np.ones(4), np.full(4, 2.0)), batch_stats(one),
                           image_stats_batch(one, 1e-5), 1e-5).alpha
    ok = lo >= 0.0 and hi <= 1.0 and same == 1.0 and abs(single) <= 1e-12
    return CheckResult("alpha-properties", ok,
                       f"range [{lo:.4f}, {hi:.4f}], same-stats {same}, single-image {single:.1e}")


def _check_reductions() -> CheckResult:
    rng = np.random.default_rng(0)
    z = rng.normal(0, 3, (16, 7))
    em, g1 = em_loss(z), gem_loss(z, GemConfig("gem", 1.0, 1.0))
    bit_same = em.value == g1.value and np.array_equal(em.logit_grad, g1.logit_grad)
    tq = 2.5
    det = gem_loss(z, GemConfig("gem-skd", 1.0, tq, detach_p=True)).logit_grad
    p, q = np.exp(_log_softmax(z, 1.0)), np.exp(_log_softmax(z, tq))
    det_err = float(np.max(np.abs(det - (-tq * (p - q)) / len(z))))
    model = Model(small_convnet(), seed=0, dtype=np.float64)
    for name in model.buffers:
        model.buffers[name] = rng.uniform(0.5, 1.5, model.buffers[name].shape)
    x = rng.normal(0, 1, (6, 3, 8, 8))
    a0 = float(np.max(np.abs(model.forward(x, mix(0.0)) - model.forward(x, ADABN))))
    a1 = float(np.max(np.abs(model.forward(x, mix(1.0)) - model.forward(x, SOURCE))))
    pred_nf, _ = adapt_batch(model, x, cfg=AdaptConfig(method="adamixbn-no-finetune"))
    pred_lr0, _ = adapt_batch(model, x, cfg=AdaptConfig(method="domainadaptor-T", lr=0.0))
    ok = bit_same and det_err <= 1e-12 and a0 <= 1e-12 and a1 <= 1e-12 and np.array_equal(pred_nf, pred_lr0)
    detail = (f"gem(1,1)==em bitwise {bit_same}; detached grad err {det_err:.1e}; "
              f"alpha=0 vs adabn {a0:.1e}; alpha=1 vs source {a1:.1e}; lr=0 preds equal {np.array_equal(pred_nf, pred_lr0)}")
    return CheckResult("reductions", ok, detail)


def _check_episodic() -> CheckResult:
    rng = np.random.default_rng(0)
    model = Model(small_convnet(), seed=0)
    for name in model.buffers:
        model.buffers[name] = rng.uniform(0.5, 1.5, model.buffers[name].shape).astype(np.float32)
    before = snapshot(model)
    x = rng.uniform(0, 1, (8, 3, 12, 12)).astype(np.float32)
    for method in ("tent", "domainadaptor-T", "domainadaptor-SKD", "domainadaptor-AUG"):
        adapt_batch(model, x, cfg=AdaptConfig(method=method, lr=0.1, m=2))
    same = all(np.asarray(model.params[k]).tobytes() == v.tobytes() for k, v in before.params.items())
    same &= all(np.asarray(model.buffers[k]).tobytes() == v.tobytes() for k, v in before.buffers.items())
    return CheckResult("episodic-restore", same, "parameter and buffer bytes restored" if same else "state drifted")


CHECKS: List[Callable[[], CheckResult]] = [
    _check_transform, _check_gem_gradients, _check_network_gradients,
    _check_alpha, _check_reductions, _check_episodic,
]


def run_all() -> List[CheckResult]:
    results = []
    for check in CHECKS:
        t0 = time.perf_counter()
        res = check()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
