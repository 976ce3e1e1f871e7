"""Training loop: crop, D8 augmentation, synthetic noise, L1 loss, Adam with cosine decay, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import ConfigError, NetworkConfig
from .core import Tape, Tensor, mean_abs_diff
from .layers import ParamStore
from .network import denoise, forward, init_params
from .noise import NoiseProfile, build_noise_map, sample_poisson_gaussian, sample_training_noise
from .raw import dihedral_transform

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 128
    batch_size: int = 4
    total_steps: int = 1000
    lr_start: float = 1e-4
    lr_end: float = 5e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final step
    keep_checkpoints: bool = True

    def __post_init__(self):
        if not self.lr_end < self.lr_start:
            raise ConfigError(f"lr_end ({self.lr_end}) must be below lr_start ({self.lr_start})")
        if self.crop_size < 2 or self.crop_size % 2:
            raise ConfigError(f"crop_size must be even, got {self.crop_size}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be >= 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    def check_network(self, net: NetworkConfig) -> None:
        least = net.multiple * 8
        if self.crop_size < least or self.crop_size % net.multiple:
            raise ConfigError(
                f"crop_size {self.crop_size} must be a multiple of {net.multiple} and >= {least} for {net.scales} scales")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# --- optimization pieces --------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return mean_abs_diff(pred, target)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Single-cycle cosine decay from lr_start at step 0 to lr_end at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    if step == 0:
        return cfg.lr_start
    if step == cfg.total_steps:
        return cfg.lr_end
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * w


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    A non-finite gradient anywhere aborts the whole step before any parameter moves.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name}; step {params.adam_t + 1} aborted")
    t = params.adam_t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for _, p in params.items():
        g = p.grad
        dt = p.value.dtype.type
        p.m *= dt(beta1)
        p.m += dt(1 - beta1) * g
        p.v *= dt(beta2)
        p.v += dt(1 - beta2) * g * g
        denom = np.sqrt(p.v / dt(c2)) + dt(eps)
        p.value.data -= dt(lr) * (p.m / dt(c1)) / denom
    params.adam_t = t
    params.zero_grad()


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at PSNR_CAP for identical inputs."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


# --- samples ----------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    top: int
    left: int
    transform: int
    sensor_id: str
    iso: float
    a: float
    b: float


def noise_map_for(noisy: np.ndarray, a: float, b: float, net: NetworkConfig) -> np.ndarray:
    """Noise map matching the network's map channels (per channel for RAW, one plane for AWGN)."""
    m = build_noise_map(noisy, a, b)
    map_channels = net.in_channels - net.out_channels
    if m.shape[-3] == map_channels:
        return m
    if map_channels == 1:
        return np.sqrt(np.mean(m * m, axis=-3, keepdims=True, dtype=np.float64)).astype(m.dtype)
    raise ConfigError(f"cannot build a {map_channels}-channel noise map for {m.shape[-3]} image channels")


def make_training_sample(clean: np.ndarray, profiles: Sequence[NoiseProfile], cfg: TrainConfig,
                         rng: np.random.Generator, net: Optional[NetworkConfig] = None):
    """Random crop of a C x H x W clean image, random D8 element, synthetic noise, noise map.

    Returns (noisy, noise_map, clean_crop, SampleRecord). The same transform is applied to
    every returned array because noise and map are generated after the transform.
    """
    c, h, w = clean.shape
    s = cfg.crop_size
    if h < s or w < s:
        raise ValueError(f"image {h}x{w} smaller than crop {s}")
    top = int(rng.integers(0, h - s + 1))
    left = int(rng.integers(0, w - s + 1))
    g = int(rng.integers(0, 8))
    crop = dihedral_transform(clean[:, top:top + s, left:left + s], g).astype(np.float32)
    sensor, iso, a, b = sample_training_noise(profiles, rng)
    noisy = sample_poisson_gaussian(crop, a, b, rng)
    nmap = build_noise_map(noisy, a, b) if net is None else noise_map_for(noisy, a, b, net)
    return noisy, nmap, crop, SampleRecord(top, left, g, sensor, iso, a, b)


def usable_images(data: Sequence[np.ndarray], crop_size: int) -> list[np.ndarray]:
    kept = []
    for i, img in enumerate(data):
        if min(img.shape[-2:]) < crop_size:
            log.warning("skipping image %d: %s smaller than crop %d", i, img.shape[-2:], crop_size)
        else:
            kept.append(img)
    return kept


def make_validation_set(clean: Sequence[np.ndarray], profiles: Sequence[NoiseProfile], seed: int,
                        net: Optional[NetworkConfig] = None):
    """Fixed (noisy, noise_map, clean) triples for full-image validation."""
    rng = np.random.default_rng(seed)
    out = []
    for img in clean:
        img = np.asarray(img, dtype=np.float32)
        _, _, a, b = sample_training_noise(profiles, rng)
        noisy = sample_poisson_gaussian(img, a, b, rng)
        nmap = build_noise_map(noisy, a, b) if net is None else noise_map_for(noisy, a, b, net)
        out.append((noisy, nmap, img))
    return out


def validate(params: ParamStore, net: NetworkConfig, val_set) -> float:
    """Mean PSNR over full validation images; sizes are padded to the network multiple."""
    if not val_set:
        raise ValueError("empty validation set")
    scores = [psnr(denoise(noisy[None], nmap[None], params, net)[0], clean) for noisy, nmap, clean in val_set]
    return float(np.mean(scores))


def noisy_psnr(val_set) -> float:
    return float(np.mean([psnr(noisy, clean) for noisy, _, clean in val_set]))


# --- the loop ---------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    params: ParamStore
    rng: np.random.Generator
    best_step: Optional[int] = None
    best_psnr: Optional[float] = None
    losses: Optional[list] = None


def train_step(params: ParamStore, net: NetworkConfig, batch, lr: float, cfg: TrainConfig) -> float:
    noisy = np.stack([b[0] for b in batch])
    nmap = np.stack([b[1] for b in batch])
    clean = np.stack([b[2] for b in batch])
    with Tape() as tape:
        out = forward(Tensor(noisy), Tensor(nmap), params, net)
        loss = l1_loss(out, Tensor(clean))
    tape.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    adam_step(params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return value


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(out_dir: Path, state: TrainState, net: NetworkConfig, cfg: TrainConfig) -> Path:
    d = Path(out_dir) / f"step_{state.step}"
    if d.exists():
        shutil.rmtree(d)
    state.params.save(d, {"network": net.to_dict(), "train": cfg.to_dict()}, moments=True)
    (d / "rng.json").write_text(json.dumps(_rng_state(state.rng)))
    (d / "state.json").write_text(json.dumps(
        {"step": state.step, "best_step": state.best_step, "best_psnr": state.best_psnr}))
    return d


def load_checkpoint(directory) -> tuple[TrainState, NetworkConfig, TrainConfig]:
    d = Path(directory)
    params, config = ParamStore.load(d)
    if not config or "network" not in config:
        raise ConfigError(f"{d}: manifest has no network config")
    meta = json.loads((d / "state.json").read_text())
    rng = _restore_rng(json.loads((d / "rng.json").read_text()))
    state = TrainState(meta["step"], params, rng, meta.get("best_step"), meta.get("best_psnr"))
    return state, NetworkConfig.from_dict(config["network"]), TrainConfig.from_dict(config["train"])


def latest_checkpoint(out_dir) -> Optional[Path]:
    steps = [(int(p.name[5:]), p) for p in Path(out_dir).glob("step_*") if p.name[5:].isdigit()]
    return max(steps)[1] if steps else None


def _trim_log(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= last_step]
    path.write_text("".join(ln + "\n" for ln in keep))


def train(cfg: TrainConfig, net: NetworkConfig, data: Sequence[np.ndarray], profiles: Sequence[NoiseProfile],
          out_dir=None, val_set=None, resume: bool = False, progress=None) -> TrainState:
    """Run the step loop. ``data`` holds normalized C x H x W clean images.

    With ``out_dir`` each checkpoint goes to ``step_<N>/`` and every step appends
    ``{step, lr, loss}`` to ``train.log``. ``resume`` continues from the newest checkpoint.
    """
    cfg.check_network(net)
    data = usable_images(data, cfg.crop_size)
    if not data:
        raise ValueError("no training image is at least crop_size in both dimensions")
    out = Path(out_dir) if out_dir is not None else None
    state = None
    if resume and out is not None and (ck := latest_checkpoint(out)) is not None:
        state, net_saved, cfg_saved = load_checkpoint(ck)
        if net_saved != net or cfg_saved != cfg:
            raise ConfigError(f"{ck}: checkpoint was written with a different configuration")
        _trim_log(out / "train.log", state.step)
    if state is None:
        state = TrainState(0, init_params(net, cfg.seed), np.random.default_rng(cfg.seed))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "train.log").write_text("")
    state.losses = []
    logf = open(out / "train.log", "a") if out is not None else None
    try:
        while state.step < cfg.total_steps:
            lr = cosine_lr(state.step, cfg)
            batch = [make_training_sample(data[int(state.rng.integers(len(data)))], profiles, cfg, state.rng, net)
                     for _ in range(cfg.batch_size)]
            loss = train_step(state.params, net, batch, lr, cfg)
            state.step += 1
            state.losses.append(loss)
            if logf is not None:
                logf.write(json.dumps({"step": state.step, "lr": lr, "loss": loss}) + "\n")
            if progress is not None:
                progress(state.step, lr, loss)
            due = state.step == cfg.total_steps or (
                cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0)
            if due:
                _checkpoint(state, net, cfg, out, val_set, logf)
    finally:
        if logf is not None:
            logf.close()
    return state


def _checkpoint(state: TrainState, net, cfg, out: Optional[Path], val_set, logf) -> None:
    if val_set:
        score = validate(state.params, net, val_set)
        log.info("step %d: validation PSNR %.3f dB", state.step, score)
        if state.best_psnr is None or score > state.best_psnr:
            state.best_step, state.best_psnr = state.step, score
            if out is not None:
                if (out / "best").exists():
                    shutil.rmtree(out / "best")
                state.params.save(out / "best", {"network": net.to_dict(), "train": cfg.to_dict()})
    if out is None:
        return
    logf.flush()
    save_checkpoint(out, state, net, cfg)
    summary = {"last_step": state.step, "best_step": state.best_step, "best_psnr": state.best_psnr}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


# --- synthetic data ---------------------------------------------------------------

def synthetic_textures(n: int, size: int, channels: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Smooth random clean images in [0.05, 0.95]: blurred noise at a random scale plus stripes."""
    out = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n):
        base = gaussian_filter(rng.standard_normal((size, size)), rng.uniform(1.5, 5.0), mode="wrap")
        base /= np.abs(base).max() + 1e-12
        theta, freq = rng.uniform(0, np.pi), rng.uniform(0.05, 0.3)
        stripes = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        img = []
        for _ in range(channels):
            c = 0.6 * base + 0.3 * rng.uniform(0.3, 1.0) * stripes + rng.uniform(-0.2, 0.2)
            img.append(c)
        img = np.stack(img)
        lo, hi = img.min(), img.max()
        out.append((0.05 + 0.9 * (img - lo) / (hi - lo)).astype(np.float32))
    return out
