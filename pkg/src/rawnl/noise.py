"""Poisson-Gaussian sensor noise: synthesis, noise level function estimation, noise maps.

All coefficients are in black-level-subtracted, saturation-normalized [0, 1] units:
noise variance at intensity x is ``a * x + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter


class NoiseModelError(ValueError):
    pass


class EstimationError(NoiseModelError):
    pass


# --- profiles -----------------------------------------------------------------

@dataclass(frozen=True)
class NoisePoint:
    iso: float
    a: float
    b: float


@dataclass
class NoiseProfile:
    sensor_id: str
    points: list[NoisePoint]
    note: Optional[str] = None

    def __post_init__(self):
        if not self.points:
            raise NoiseModelError(f"profile {self.sensor_id!r} has no points")
        self.points = sorted(self.points, key=lambda p: p.iso)
        isos = [p.iso for p in self.points]
        if len(set(isos)) != len(isos):
            raise NoiseModelError(f"profile {self.sensor_id!r} has duplicate ISO values")
        for p in self.points:
            if p.iso <= 0:
                raise NoiseModelError(f"ISO must be positive, got {p.iso}")
            if p.a < 0 or p.b < 0 or p.a + p.b <= 0:
                raise NoiseModelError(f"need a, b >= 0 and a + b > 0, got a={p.a}, b={p.b} at ISO {p.iso}")

    @property
    def iso_range(self) -> tuple[float, float]:
        return self.points[0].iso, self.points[-1].iso

    def to_dict(self) -> dict:
        d = {"sensor_id": self.sensor_id, "points": [{"iso": p.iso, "a": p.a, "b": p.b} for p in self.points]}
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProfile":
        try:
            pts = [NoisePoint(float(p["iso"]), float(p["a"]), float(p["b"])) for p in d["points"]]
            return cls(str(d["sensor_id"]), pts, d.get("note"))
        except (KeyError, TypeError) as e:
            raise NoiseModelError(f"malformed noise profile: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NoiseProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def bundled_profiles() -> list[NoiseProfile]:
    """Illustrative example profiles shipped with the package (approximate values)."""
    root = Path(__file__).parent / "profiles"
    return [NoiseProfile.load(p) for p in sorted(root.glob("*.json"))]


def _interp_coeff(c0: float, c1: float, t: float) -> float:
    if c0 > 0 and c1 > 0:
        return math.exp((1 - t) * math.log(c0) + t * math.log(c1))
    return (1 - t) * c0 + t * c1


def interpolate_iso(profile: NoiseProfile, iso: float) -> tuple[float, float]:
    """(a, b) at ``iso``, piecewise linear in log-log between the bracketing profile points."""
    lo, hi = profile.iso_range
    if not lo <= iso <= hi:
        raise NoiseModelError(f"ISO {iso} outside profile range [{lo}, {hi}] of {profile.sensor_id!r}")
    pts = profile.points
    for p in pts:
        if p.iso == iso:
            return p.a, p.b
    i = next(i for i in range(len(pts) - 1) if pts[i].iso < iso < pts[i + 1].iso)
    p0, p1 = pts[i], pts[i + 1]
    t = (math.log(iso) - math.log(p0.iso)) / (math.log(p1.iso) - math.log(p0.iso))
    return _interp_coeff(p0.a, p1.a, t), _interp_coeff(p0.b, p1.b, t)


def sample_training_noise(profiles: Sequence[NoiseProfile], rng: np.random.Generator):
    """Pick a sensor uniformly and an ISO log-uniformly in its range; return (sensor_id, iso, a, b)."""
    if not profiles:
        raise NoiseModelError("no noise profiles to sample from")
    prof = profiles[int(rng.integers(len(profiles)))]
    lo, hi = prof.iso_range
    iso = lo if lo == hi else float(np.clip(math.exp(rng.uniform(math.log(lo), math.log(hi))), lo, hi))
    a, b = interpolate_iso(prof, iso)
    return prof.sensor_id, iso, a, b


# --- synthesis and noise maps ----------------------------------------------------

def _float_dtype(x: np.ndarray):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.float32


def sample_poisson_gaussian(clean: np.ndarray, a: float, b: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``a * Poisson(x / a) + N(0, b)`` per pixel. The result is not clipped."""
    if a < 0 or b < 0:
        raise NoiseModelError(f"noise coefficients must be non-negative, got a={a}, b={b}")
    x = np.asarray(clean, dtype=np.float64)
    if a > 0:
        out = rng.poisson(np.maximum(x, 0.0) / a) * a
    else:
        out = x.copy()
    if b > 0:
        out = out + rng.normal(0.0, math.sqrt(b), size=x.shape)
    return out.astype(_float_dtype(np.asarray(clean)))


def build_noise_map(noisy: np.ndarray, a: float, b: float) -> np.ndarray:
    """Per-pixel noise std ``sqrt(a * max(noisy, 0) + b)``, computed from the noisy values."""
    if a < 0 or b < 0:
        raise NoiseModelError(f"noise coefficients must be non-negative, got a={a}, b={b}")
    x = np.asarray(noisy)
    dt = _float_dtype(x)
    return np.sqrt(a * np.maximum(x.astype(np.float64), 0.0) + b).astype(dt)


def clip_unit(x: np.ndarray) -> np.ndarray:
    """Clip to [0, 1]; only for exporting images, never applied during synthesis."""
    return np.clip(x, 0.0, 1.0)


# --- estimation ------------------------------------------------------------------

MIN_BIN_SAMPLES = 50
OUTLIER_FRACTION = 0.9
BLOCK = 8
QUANTILE = 0.005
MIN_BIN_BLOCKS = 16


@dataclass
class NlfFit:
    a: float
    b: float
    bin_means: np.ndarray
    bin_vars: np.ndarray
    bin_counts: np.ndarray
    inliers: np.ndarray = field(repr=False)

    def variance(self, x) -> np.ndarray:
        return self.a * np.asarray(x) + self.b

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b,
            "bins": [{"mean": float(m), "variance": float(v), "count": int(c), "inlier": bool(i)}
                     for m, v, c, i in zip(self.bin_means, self.bin_vars, self.bin_counts, self.inliers)],
        }


def fit_affine_nonneg(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Weighted least squares y ~ a*x + b subject to a, b >= 0."""
    w = w / w.sum()
    xm, ym = (w * x).sum(), (w * y).sum()
    sxx = (w * (x - xm) ** 2).sum()
    a = (w * (x - xm) * (y - ym)).sum() / sxx if sxx > 0 else 0.0
    b = ym - a * xm
    if a >= 0 and b >= 0:
        return float(a), float(b)
    # best fit on each boundary of the feasible quadrant
    cands = [(0.0, max(ym, 0.0))]
    sx2 = (w * x * x).sum()
    if sx2 > 0:
        cands.append((max((w * x * y).sum() / sx2, 0.0), 0.0))
    return min(cands, key=lambda ab: float((w * (y - ab[0] * x - ab[1]) ** 2).sum()))


REFINE_PASSES = 2


def _fit_bins(means, variances, counts, max_intensity, bin_width, min_bins=2) -> NlfFit:
    inliers = (counts >= 1) & (means <= OUTLIER_FRACTION * max_intensity)
    if min_bins == 1 and len(means):
        inliers[np.argmin(means)] = True  # the darkest bin is never a saturation outlier
    if inliers.sum() < min_bins:
        raise EstimationError(f"only {int(inliers.sum())} usable intensity bins, need at least {min_bins}")
    x, y, n = means[inliers], variances[inliers], counts[inliers].astype(np.float64)
    flat = float(max((n * y).sum() / n.sum(), 0.0))
    if x.max() - x.min() < max(bin_width, math.sqrt(flat)):
        # intensity spread no wider than the noise itself: no resolvable slope
        return NlfFit(0.0, flat, means, variances, counts, inliers)
    a, b = fit_affine_nonneg(x, y, n)
    # A bin variance estimated from n samples has spread ~ sigma^2 * sqrt(2 / n), so
    # reweight by n / sigma^4 using the current fit; otherwise bright, noisy bins swamp b.
    for _ in range(REFINE_PASSES):
        fitted = a * x + b
        if not np.all(fitted > 0):
            break
        a, b = fit_affine_nonneg(x, y, n / fitted ** 2)
    return NlfFit(a, b, means, variances, counts, inliers)


def estimate_nlf_paired(clean: np.ndarray, noisy: np.ndarray, n_bins: int = 20) -> NlfFit:
    """Fit variance = a*x + b from a clean/noisy pair by binning the residual on clean intensity."""
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    noisy = np.asarray(noisy, dtype=np.float64).reshape(-1)
    if clean.shape != noisy.shape:
        raise NoiseModelError(f"clean and noisy sizes differ: {clean.size} vs {noisy.size}")
    if n_bins < 2:
        raise NoiseModelError("n_bins must be >= 2")
    r = noisy - clean
    idx = np.clip((clean * n_bins).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    s1 = np.bincount(idx, clean, n_bins)
    rs = np.bincount(idx, r, n_bins)
    rs2 = np.bincount(idx, r * r, n_bins)
    keep = counts >= MIN_BIN_SAMPLES
    n = counts[keep].astype(np.float64)
    means = s1[keep] / n
    rmean = rs[keep] / n
    variances = np.maximum((rs2[keep] - n * rmean ** 2) / (n - 1), 0.0)
    return _fit_bins(means, variances, counts[keep], clean.max(), 1.0 / n_bins)


def _block_stats(noisy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per 8x8 block: mean intensity and variance of the high-pass residual."""
    planes = noisy.reshape(-1, *noisy.shape[-2:])
    h, w = planes.shape[1:]
    hb, wb = h // BLOCK, w // BLOCK
    means, variances = [], []
    for p in planes:
        p = p.astype(np.float64)
        hf = p - uniform_filter(p, size=3, mode="reflect")
        blk = lambda a: a[:hb * BLOCK, :wb * BLOCK].reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3).reshape(-1, BLOCK * BLOCK)
        means.append(blk(p).mean(axis=1))
        variances.append(blk(hf).var(axis=1, ddof=1))
    return np.concatenate(means), np.concatenate(variances)


@lru_cache(maxsize=1)
def _reference_block_variances() -> np.ndarray:
    """Block residual variances of unit-variance white Gaussian noise (fixed seed)."""
    rng = np.random.default_rng(12345)
    return _block_stats(rng.standard_normal((8, 512, 512)))[1]


@lru_cache(maxsize=None)
def calibration_factor(quantile: float = QUANTILE, n_blocks: Optional[int] = None) -> float:
    """Expected low-quantile block variance for unit-variance white Gaussian noise.

    Folds the residual filter's variance loss and the low-quantile bias into one constant.
    With ``n_blocks`` the expectation is taken over samples of that many blocks, since a
    low quantile of a small sample sits closer to its minimum.
    """
    ref = _reference_block_variances()
    if n_blocks is None or n_blocks >= ref.size:
        return float(np.quantile(ref, quantile))
    rng = np.random.default_rng(n_blocks)
    draws = ref[rng.integers(0, ref.size, (256, n_blocks))]
    return float(np.quantile(draws, quantile, axis=1).mean())


def estimate_nlf_single(noisy: np.ndarray, n_bins: int = 20, quantile: float = QUANTILE) -> NlfFit:
    """Estimate the noise level function from one noisy image via flat-block statistics.

    Blocks are binned by mean intensity; a low quantile of the block residual variances in
    each bin, rescaled by :func:`calibration_factor`, estimates the noise variance there.
    """
    noisy = np.asarray(noisy)
    if noisy.ndim < 2 or min(noisy.shape[-2:]) < 64:
        raise NoiseModelError(f"single-image estimation needs at least 64x64 pixels, got {noisy.shape}")
    means, variances = _block_stats(noisy)
    idx = np.clip((means * n_bins).astype(np.int64), 0, n_bins - 1)
    bm, bv, bc = [], [], []
    for k in range(n_bins):
        sel = idx == k
        n = int(sel.sum())
        if n < MIN_BIN_BLOCKS:
            continue
        bm.append(means[sel].mean())
        bv.append(np.quantile(variances[sel], quantile) / calibration_factor(quantile, n))
        bc.append(n)
    # a flat field may populate a single bin; it still determines b
    return _fit_bins(np.array(bm), np.array(bv), np.array(bc), float(noisy.max()), 1.0 / n_bins, min_bins=1)
