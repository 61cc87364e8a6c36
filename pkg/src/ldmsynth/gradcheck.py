"""Central finite-difference checks of the analytic gradients.

Each registered check builds a small float64 problem, a scalar function of a
few leaf tensors, and compares ``backward`` against central differences,
either element by element or along random directions for large inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REL_TOL = 1e-3
ABS_FLOOR = 1e-8
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    module: str
    max_rel: float
    passed: bool
    worst: str = ""


def _errors(analytic: np.ndarray, numeric: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry relative error and pass flags (abs floor where both are tiny)."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    big = scale > ABS_FLOOR
    rel = np.where(big, diff / np.where(big, scale, 1.0), 0.0)
    ok = np.where(big, rel < REL_TOL, diff < ABS_FLOOR)
    return rel, ok


def check_gradients(fn: Callable[[], Tensor], inputs: dict[str, Tensor], eps: float = FD_STEP,
                    max_elems: int = 64, directions: int = 2, seed: int = 0) -> tuple[float, bool, str]:
    """Compare d fn / d inputs with central differences.

    Tensors with at most ``max_elems`` entries are checked entry by entry; larger
    ones at ``max_elems`` random entries plus ``directions`` random directional
    derivatives.
    """
    rng = np.random.default_rng(seed)
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    loss = fn()
    ad.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}

    def f() -> float:
        return float(fn().data.sum())

    worst_rel, all_ok, worst = 0.0, True, ""
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        g = grads[name].reshape(-1)
        if flat.size <= max_elems:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_elems, replace=False)
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            num[j] = (fp - fm) / (2 * eps)
        rel, ok = _errors(g[picks], num)
        if flat.size > max_elems:
            base = t.data.copy()
            an, nu = [], []
            for _ in range(directions):
                d = rng.standard_normal(t.shape)
                t.data[...] = base + eps * d
                fp = f()
                t.data[...] = base - eps * d
                fm = f()
                t.data[...] = base
                an.append(float((grads[name] * d).sum()))
                nu.append((fp - fm) / (2 * eps))
            r2, ok2 = _errors(np.array(an), np.array(nu))
            rel = np.concatenate([rel, r2])
            ok = np.concatenate([ok, ok2])
        if rel.size and rel.max() > worst_rel:
            worst_rel = float(rel.max())
            worst = f"{name}[{int(np.argmax(rel))}]"
        if not ok.all():
            all_ok = False
            bad = np.flatnonzero(~ok)
            worst = f"{name} entries {bad[:8].tolist()}"
    return worst_rel, all_ok, worst


# ----------------------------------------------------------------------------
# registry

_REGISTRY: list[tuple[str, str, Callable]] = []


def register(module: str, name: str):
    def deco(builder):
        _REGISTRY.append((module, name, builder))
        return builder
    return deco


def registered(module: str = "all") -> list[tuple[str, str, Callable]]:
    from . import _checks  # noqa: F401  populates the registry
    return [r for r in _REGISTRY if module == "all" or r[0] == module]


def run_checks(module: str = "all") -> list[CheckResult]:
    results = []
    for mod, name, builder in registered(module):
        fn, inputs, kw = builder()
        max_rel, ok, worst = check_gradients(fn, inputs, **kw)
        results.append(CheckResult(name, mod, max_rel, ok, worst))
    return results
