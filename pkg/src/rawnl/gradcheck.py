"""Central finite-difference checks of tape gradients, run in 64-bit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tape, Tensor, mul, sum_all

STEP = 1e-4
# entries whose gradient is below this magnitude are compared in absolute terms
ATOL = 1e-6


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    checked: int
    kinks: int = 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def analytic_grads(fn: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, step: float = STEP,
                 indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. entries of ``leaf`` (all, or flat ``indices``)."""
    flat = leaf.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def check(fn: Callable[[], Tensor], leaves: dict[str, Tensor], step: float = STEP,
          max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
          tol: float = 1e-4, exclude_kinks: bool = False) -> list[GradReport]:
    """Compare tape gradients of scalar ``fn()`` against finite differences for each named leaf.

    Leaves must already hold float64 data. With ``max_entries`` set, larger tensors are
    checked on a random subset of that many entries.

    With ``exclude_kinks``, an entry failing ``tol`` is re-differenced with step/10; if
    the two quotients disagree by more than ``tol`` the function is not smooth on the
    scale of the step there (a ReLU, clamp or bilinear cell boundary lies within it) and
    the entry is skipped. Smooth entries agree to O(step^2), so a wrong gradient is
    never skipped by this rule.
    """
    names = list(leaves)
    tensors = [leaves[n] for n in names]
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
    grads = analytic_grads(fn, tensors)
    for t in tensors:
        t.requires_grad = False
    rng = rng or np.random.default_rng(0)
    reports = []
    for name, t, g in zip(names, tensors, grads):
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        num = numeric_grad(fn, t, step, idx)
        ana = g.reshape(-1)[idx]
        err = relative_error(ana, num)
        kinks = 0
        if exclude_kinks:
            bad = np.where(err >= tol)[0]
            if len(bad):
                fine = numeric_grad(fn, t, step / 10, idx[bad])
                skip = relative_error(num[bad], fine) > tol
                err[bad[skip]] = 0.0
                kinks = int(skip.sum())
        reports.append(GradReport(name, float(err.max()), len(num), kinks))
    return reports


MICRO_CONFIG = {"scales": 2, "c_per_scale": [4, 8], "k_per_scale": [2, 2], "search_radius": 2.0}


def randomize_params(params, rng: np.random.Generator, offset_scale: float = 0.3) -> None:
    """Give zero-initialized tensors (biases, last offset layer) small random values.

    Offsets then land on fractional positions, away from the bilinear kinks at
    integer coordinates.
    """
    for name, p in params.items():
        data = p.value.data
        if name.endswith(".bias"):
            data[...] = rng.uniform(-0.1, 0.1, data.shape)
        elif ".offset_cnn.conv5." in name:
            data[...] = rng.uniform(-offset_scale, offset_scale, data.shape)


def group_name(name: str) -> str:
    """Parameter group for reporting: the name up to the layer, e.g. ``scale0.enc.nlfemf.transform``."""
    return name.rsplit(".", 1)[0]


def network_check(cfg, seed: int = 0, max_entries: Optional[int] = 16, size: int = 8,
                  batch: int = 1, tol: float = 1e-4) -> dict[str, GradReport]:
    """Finite-difference check of every parameter tensor of a network, kinks excluded.

    Returns one report per parameter group (max relative error, entries checked, kinks skipped).
    """
    from .network import forward, init_params

    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed).astype(np.float64)
    randomize_params(params, rng)
    c_img = cfg.out_channels
    c_map = cfg.in_channels - cfg.out_channels
    noisy = Tensor(rng.uniform(0, 1, (batch, c_img, size, size)))
    nmap = Tensor(rng.uniform(0.01, 0.2, (batch, c_map, size, size)))
    proj = Tensor(rng.standard_normal((batch, cfg.out_channels, size, size)))
    fn = lambda: sum_all(mul(forward(noisy, nmap, params, cfg), proj))
    leaves = {name: params[name] for name in params}
    reports = check(fn, leaves, max_entries=max_entries, rng=rng, tol=tol, exclude_kinks=True)
    out: dict[str, GradReport] = {}
    for rep in reports:
        g = group_name(rep.name)
        prev = out.get(g, GradReport(g, 0.0, 0, 0))
        out[g] = GradReport(g, max(prev.max_rel_err, rep.max_rel_err), prev.checked + rep.checked,
                            prev.kinks + rep.kinks)
    return out
