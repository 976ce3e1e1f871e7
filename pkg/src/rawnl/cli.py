"""``rawnl`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (missing or malformed
input), 3 numerical failure. Machine-readable results go to stdout as JSON; diagnostics
go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .config import ConfigError, NetworkConfig
from .core import ntf
from .core.tensor import ShapeError
from .layers import ParamStore
from .network import count_params, denoise, pad_reflect_to_multiple
from .noise import (
    NoiseModelError, NoisePoint, NoiseProfile, estimate_nlf_paired, estimate_nlf_single, interpolate_iso,
    sample_poisson_gaussian,
)
from .raw import (
    PackedRaw, RawFormatError, denormalize, list_raw_dir, load_raw, normalize, pack, save_raw, sidecar_path, unpack,
    with_iso,
)
from .training import NumericalError, TrainConfig, make_validation_set, noise_map_for, psnr, train

log = logging.getLogger("rawnl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# --- input helpers --------------------------------------------------------------

def _read_json(path, what: str, usage: bool = False) -> dict:
    """Parse a JSON file; problems are usage errors for config files and data errors otherwise."""
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        msg = f"{what} {path}: no such file"
        if usage:
            raise UsageError(msg) from None
        raise
    except json.JSONDecodeError as e:
        if usage:
            raise UsageError(f"{what} {path}: invalid JSON ({e})") from None
        raise RawFormatError(f"{what} {path}: invalid JSON ({e})") from None


def _network_config(path: Optional[str], default: NetworkConfig) -> NetworkConfig:
    if path is None:
        return default
    d = _read_json(path, "config", usage=True)
    try:
        return NetworkConfig.from_dict(d.get("network", d))
    except ConfigError as e:
        raise UsageError(f"config {path}: {e}") from None


def _load_image(path):
    """An .ntf with a JSON sidecar is RAW (packed and normalized); a bare .ntf is taken as normalized.

    Returns (normalized array C x H x W, RawMeta or None).
    """
    path = Path(path)
    if sidecar_path(path).exists():
        raw = load_raw(path)
        return normalize(pack(raw))[0], raw.meta
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    arr = ntf.load(path)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise RawFormatError(f"{path}: expected an H x W, C x H x W or 1 x C x H x W tensor, got {arr.shape}")
    return arr, None


def _save_image(path, arr: np.ndarray, meta) -> list[str]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if meta is None:
        ntf.save(path, arr)
        return [str(path)]
    save_raw(path, unpack(PackedRaw(denormalize(arr[None], meta), meta)))
    return [str(path), str(sidecar_path(path))]


def _load_profiles(paths: Sequence[str]) -> list[NoiseProfile]:
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"{p}: no such profile file or directory")
    if not files:
        raise NoiseModelError("no noise profiles found")
    return [NoiseProfile.from_dict(_read_json(f, "profile")) for f in files]


def _coefficients(args) -> tuple[float, float, dict]:
    if args.profile is not None:
        if args.iso is None:
            raise UsageError("--profile needs --iso")
        prof = _load_profiles([args.profile])[0]
        a, b = interpolate_iso(prof, args.iso)
        return a, b, {"sensor_id": prof.sensor_id, "iso": args.iso}
    if args.a is None or args.b is None:
        raise UsageError("give either --a and --b, or --profile and --iso")
    if args.a < 0 or args.b < 0:
        raise UsageError("--a and --b must be non-negative")
    return args.a, args.b, {}


# --- commands ---------------------------------------------------------------------

def cmd_grad_check(args) -> int:
    cfg = _network_config(args.config, NetworkConfig.from_dict(gradcheck.MICRO_CONFIG))
    reports = gradcheck.network_check(cfg, seed=args.seed, max_entries=args.max_entries, size=args.size,
                                      tol=args.tolerance)
    worst = max(r.max_rel_err for r in reports.values())
    result = {
        "tolerance": args.tolerance,
        "max_rel_err": worst,
        "passed": worst < args.tolerance,
        "groups": {g: {"max_rel_err": r.max_rel_err, "checked": r.checked, "kinks_skipped": r.kinks}
                   for g, r in reports.items()},
    }
    if not result["passed"]:
        raise NumericFailure(f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance}", result)
    _emit(result)
    return EXIT_OK


def cmd_estimate_noise(args) -> int:
    noisy, meta = _load_image(args.noisy)
    if args.clean is not None:
        clean, _ = _load_image(args.clean)
        if clean.shape != noisy.shape:
            raise ShapeError(f"clean {clean.shape} and noisy {noisy.shape} differ in shape")
        fit = estimate_nlf_paired(clean, noisy, args.bins)
        method = "paired"
    else:
        fit = estimate_nlf_single(noisy, args.bins)
        method = "single"
    report = {"method": method, **fit.to_dict()}
    if args.out is not None:
        iso = args.iso if args.iso is not None else (meta.iso if meta is not None else None)
        if iso is None:
            raise UsageError("writing a profile needs an ISO: pass --iso or use a RAW input with one")
        sensor = args.sensor_id or (meta.sensor_id if meta is not None else None) or "unknown"
        try:
            prof = NoiseProfile(sensor, [NoisePoint(float(iso), fit.a, fit.b)])
        except NoiseModelError as e:
            raise NumericFailure(f"estimated coefficients cannot form a profile: {e}", report) from None
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        prof.save(args.out)
        report["profile"] = str(args.out)
    _emit(report)
    return EXIT_OK


def cmd_synth(args) -> int:
    clean, meta = _load_image(args.clean)
    prof = _load_profiles([args.profile])[0]
    a, b = interpolate_iso(prof, args.iso)
    noisy = sample_poisson_gaussian(clean, a, b, np.random.default_rng(args.seed))
    if meta is not None:
        meta = with_iso(meta, args.iso)
    written = _save_image(args.out, noisy, meta)
    _emit({"a": a, "b": b, "iso": args.iso, "sensor_id": prof.sensor_id, "seed": args.seed, "written": written})
    return EXIT_OK


def _load_checkpoint(path) -> tuple[ParamStore, NetworkConfig]:
    d = Path(path)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"{d}: no manifest.json, not a checkpoint directory")
    params, config = ParamStore.load(d)
    if not config:
        raise RawFormatError(f"{d}: manifest carries no network config")
    return params, NetworkConfig.from_dict(config.get("network", config))


def cmd_denoise(args) -> int:
    a, b, extra = _coefficients(args)
    noisy, meta = _load_image(args.noisy)
    params, net = _load_checkpoint(args.checkpoint)
    if noisy.shape[0] != net.out_channels:
        raise ShapeError(f"input has {noisy.shape[0]} channels, network expects {net.out_channels}")
    nmap = noise_map_for(noisy, a, b, net)
    out = denoise(noisy[None], nmap[None], params, net)[0]
    if not np.all(np.isfinite(out)):
        raise NumericalError("network produced non-finite values")
    padded, rec = pad_reflect_to_multiple(noisy, net.multiple)
    written = _save_image(args.out, out, meta)
    _emit({"a": a, "b": b, **extra, "written": written,
           "size": [rec.height, rec.width], "padded_size": list(padded.shape[-2:]),
           "padded": padded.shape[-2:] != (rec.height, rec.width)})
    return EXIT_OK


def _load_dir(path) -> list[np.ndarray]:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    files = sorted(set(list_raw_dir(d)) | set(d.glob("*.ntf")))
    if not files:
        raise RawFormatError(f"{d}: no .ntf images")
    return [_load_image(f)[0] for f in files]


def cmd_train(args) -> int:
    conf = _read_json(args.config, "config", usage=True)
    try:
        net = NetworkConfig.from_dict(conf.get("network", {}))
        cfg = TrainConfig.from_dict(conf.get("train", {}))
        cfg.check_network(net)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"config {args.config}: {e}") from None
    data = _load_dir(args.data)
    profiles = _load_profiles(args.profiles)
    val = None
    if args.val is not None:
        val = make_validation_set(_load_dir(args.val), profiles, cfg.seed + 1, net)

    def progress(step, lr, loss):
        if step % max(1, args.log_every) == 0:
            log.info("step %d lr %.3e loss %.5f", step, lr, loss)

    state = train(cfg, net, data, profiles, out_dir=args.out, val_set=val, resume=args.resume, progress=progress)
    losses = state.losses or [float("nan")]
    _emit({"steps": state.step, "final_loss": losses[-1], "best_step": state.best_step,
           "best_psnr": state.best_psnr, "out": str(args.out)})
    return EXIT_OK


def cmd_psnr(args) -> int:
    x, _ = _load_image(args.a)
    y, _ = _load_image(args.b)
    if x.shape != y.shape:
        raise ShapeError(f"{args.a} {x.shape} and {args.b} {y.shape} differ in shape")
    _emit({"psnr": psnr(x, y, args.peak)})
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _network_config(args.config, NetworkConfig())
    _emit({"params": count_params(cfg), "config": cfg.to_dict()})
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

FORMATS = """file formats:
  images    .ntf tensor files (magic NTENSOR1, u32 rank, u32 extents, float32 payload).
            With a .json sidecar of the same stem ({cfa, black_level, saturation, iso,
            sensor_id}) the file is a Bayer mosaic that is packed to R, Gr, B, Gb and
            normalized; without one it is an already normalized C x H x W array.
  profiles  JSON {sensor_id, points: [{iso, a, b}]}, variance a*x + b in [0, 1] units.
  configs   JSON network config {scales, k_per_scale, c_per_scale, search_radius,
            matching, mode, ...}; train configs hold {"network": {...}, "train": {...}}.
exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure."""


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rawnl", description="Nonlocal RAW denoising toolkit.", epilog=FORMATS,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("grad-check", help="finite-difference gradient check of a small network")
    g.add_argument("--config", help="network config JSON (default: 2-scale micro network)")
    g.add_argument("--seed", type=int, default=0, help="seed for parameters and inputs (default 0)")
    g.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    g.add_argument("--max-entries", type=int, default=16, help="entries sampled per tensor (default 16)")
    g.add_argument("--size", type=int, default=8, help="input height and width (default 8)")
    g.set_defaults(func=cmd_grad_check)

    e = sub.add_parser("estimate-noise", help="fit the noise level function a*x + b")
    e.add_argument("--noisy", required=True, help="noisy image (.ntf)")
    e.add_argument("--clean", help="clean reference for paired estimation; omit for single-image")
    e.add_argument("--bins", type=int, default=20, help="intensity bins (default 20)")
    e.add_argument("--out", help="write a one-point noise profile JSON here")
    e.add_argument("--iso", type=float, help="ISO for the written profile (default: from the sidecar)")
    e.add_argument("--sensor-id", help="sensor id for the written profile (default: from the sidecar)")
    e.set_defaults(func=cmd_estimate_noise)

    s = sub.add_parser("synth", help="add Poisson-Gaussian noise to a clean image")
    s.add_argument("--clean", required=True, help="clean image (.ntf)")
    s.add_argument("--profile", required=True, help="noise profile JSON")
    s.add_argument("--iso", type=float, required=True, help="ISO inside the profile's range")
    s.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    s.add_argument("--out", required=True, help="output .ntf (a sidecar is written for RAW input)")
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("denoise", help="denoise an image with a trained checkpoint")
    d.add_argument("--noisy", required=True, help="noisy image (.ntf)")
    d.add_argument("--checkpoint", required=True, help="checkpoint directory (step_<N>/ or best/)")
    d.add_argument("--a", type=float, help="shot noise coefficient")
    d.add_argument("--b", type=float, help="readout noise variance")
    d.add_argument("--profile", help="noise profile JSON, instead of --a/--b")
    d.add_argument("--iso", type=float, help="ISO to read from --profile")
    d.add_argument("--out", required=True, help="output .ntf")
    d.set_defaults(func=cmd_denoise)

    t = sub.add_parser("train", help="train a network on clean images with synthetic noise")
    t.add_argument("--config", required=True, help='JSON {"network": {...}, "train": {...}}')
    t.add_argument("--data", required=True, help="directory of clean .ntf images")
    t.add_argument("--profiles", required=True, nargs="+", help="noise profile JSON files or directories")
    t.add_argument("--out", required=True, help="output directory for checkpoints and train.log")
    t.add_argument("--val", help="directory of clean validation images")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    t.add_argument("--log-every", type=int, default=50, help="progress line interval on stderr")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("psnr", help="PSNR between two images (peak 1.0 on normalized data)")
    q.add_argument("--a", required=True, help="first image (.ntf)")
    q.add_argument("--b", required=True, help="second image (.ntf)")
    q.add_argument("--peak", type=float, default=1.0, help="peak signal value (default 1.0)")
    q.set_defaults(func=cmd_psnr)

    n = sub.add_parser("params", help="count learnable parameters")
    n.add_argument("--config", help="network config JSON (default: 15/9/7 neighbors, 48/96/192 channels)")
    n.set_defaults(func=cmd_params)
    return p


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("rawnl")
    for h in [h for h in root.handlers if getattr(h, "_rawnl_cli", False)]:
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._rawnl_cli = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{e}\n\n{parser.format_usage()}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except NumericFailure as e:
        if e.report is not None:
            _emit(e.report)
        log.error("%s", e)
        return EXIT_NUMERIC
    except (FloatingPointError, NumericalError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (RawFormatError, ntf.NTFError, NoiseModelError, ShapeError, ValueError, KeyError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
