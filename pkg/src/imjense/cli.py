"""Command-line entry point: ``imjense phantom|mask|recon|eval|tune|upsample``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Every command writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .formats import (FormatError, read_checkpoint, read_kspc, read_raw_f32, write_checkpoint, write_kspc,
                      write_pgm16, write_raw_f32)
from .hypertune import SearchSpace, bayes_optimize
from .inference import query_upsampled, reconstruct, reference_image
from .metrics import evaluate, write_metrics_csv
from .mrop import SamplingMask
from .synthdata import SHEPP_LOGAN, DEFAULT_PHASE, MaskSpec, PhantomSpec, acquire, make_mask, make_phantom, simulate_coils
from .trainer import PRESETS, VARIANTS, NonFiniteError, ReconConfig, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(d: dict, key: str, where: str):
    if key not in d:
        raise InputError(f"{where}: missing field '{key}'")
    return d[key]


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise InputError(f"{path}: expected a JSON object")
    return d


def _write_manifest(out: Path, command: str, args, inputs, outputs, seeds, config=None, t0=None, extra=None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:] if args is None else getattr(args, "_argv", sys.argv[1:]),
        "config": str(config) if config else None,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "seeds": seeds,
        "version": __version__,
        "wall_clock_seconds": None if t0 is None else round(time.perf_counter() - t0, 3),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _parallel_map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def phantom_spec_from_json(d: dict) -> tuple[PhantomSpec, dict]:
    """Parse a phantom JSON object. Returns the spec and the acquisition settings."""
    where = "phantom spec"
    d1 = int(_require(d, "d1", where))
    d2 = int(_require(d, "d2", where))
    coils = int(_require(d, "coils", where))
    sigma_n = float(_require(d, "sigma_n", where))
    seed = int(_require(d, "seed", where))
    if d1 < 2 or d2 < 2 or coils < 1 or sigma_n < 0:
        raise InputError(f"{where}: need d1, d2 >= 2, coils >= 1, sigma_n >= 0")
    ellipses = SHEPP_LOGAN
    if "ellipses" in d:
        ellipses = []
        for k, e in enumerate(d["ellipses"]):
            w = f"{where} ellipse {k}"
            a, b = _require(e, "axes", w)
            x0, y0 = _require(e, "center", w)
            ellipses.append((float(_require(e, "intensity", w)), float(a), float(b), float(x0), float(y0),
                             float(e.get("angle", 0.0))))
        ellipses = tuple(ellipses)
    phase = DEFAULT_PHASE
    if "phase" in d:
        phase = tuple(((int(_require(t, "p", "phase term")), int(_require(t, "q", "phase term"))),
                       float(_require(t, "coef", "phase term"))) for t in d["phase"])
    spec = PhantomSpec(d1, d2, ellipses, phase, sigma_n, seed)
    acq = {"coils": coils, "coil_seed": int(d.get("coil_seed", seed)), "mask": d.get("mask")}
    return spec, acq


def _mask_from(d: dict | None, d_pe: int, d_ro: int) -> SamplingMask | None:
    if d is None:
        return None
    spec = MaskSpec(d_pe, int(_require(d, "R", "mask")), int(_require(d, "acs", "mask")), d_ro)
    return make_mask(spec)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    t0 = time.perf_counter()
    spec, acq = phantom_spec_from_json(_load_json(args.spec))
    if args.R is not None or args.acs is not None:
        acq["mask"] = {"R": args.R if args.R is not None else 1, "acs": args.acs or 0}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_phantom(spec)
    coils = simulate_coils(acq["coils"], spec.d1, spec.d2, acq["coil_seed"])
    full = acquire(truth, coils, SamplingMask.full(spec.d1, spec.d2), spec.sigma_n, spec.seed)
    files = [out / "truth.raw", out / "truth.pgm", out / "sens.raw", out / "full.kspc"]
    write_raw_f32(files[0], truth)
    write_pgm16(files[1], np.abs(truth), 0.0, 1.0)
    write_raw_f32(files[2], coils)
    write_kspc(files[3], full)
    mask = _mask_from(acq["mask"], spec.d2, spec.d1)
    extra = {"shape": [spec.d1, spec.d2], "coils": acq["coils"]}
    if mask is not None:
        # same noise draw as the fully sampled file, restricted to the kept lines
        under = acquire(truth, coils, mask, spec.sigma_n, spec.seed)
        files.append(out / "under.kspc")
        write_kspc(files[-1], under)
        extra.update(R=acq["mask"]["R"], ACS=acq["mask"]["acs"], rate=mask.rate())
    _write_manifest(out, "phantom", args, [args.spec], files,
                    {"noise": spec.seed, "coils": acq["coil_seed"]}, args.spec, t0, extra)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    t0 = time.perf_counter()
    mask = make_mask(MaskSpec(args.d_pe, args.R, args.acs, args.d_ro))
    info = {"d_pe": args.d_pe, "R": args.R, "ACS": args.acs, "lines": len(mask.kept_lines),
            "rate": mask.rate(), "kept_lines": list(mask.kept_lines)}
    print(f"d_pe={args.d_pe} R={args.R} ACS={args.acs}: {len(mask.kept_lines)} lines, "
          f"rate {100 * mask.rate():.1f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "mask.json").write_text(json.dumps(info, indent=2) + "\n")
        _write_manifest(out, "mask", args, [], [out / "mask.json"], {}, None, t0)
    return EXIT_OK


def _recon_config(args) -> ReconConfig:
    cfg = ReconConfig.from_dict(_load_json(args.config)) if args.config else ReconConfig()
    updates = cfg.__dict__.copy()
    if args.preset:
        updates["w0"], updates["lam"] = PRESETS[args.preset]
    if args.iters is not None:
        updates["iters"] = args.iters
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["poly_seed"] = args.seed
    return ReconConfig(**updates).with_variant(args.variant)


def cmd_recon(args) -> int:
    t0 = time.perf_counter()
    if args.variant not in VARIANTS:
        raise InputError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    try:
        cfg = _recon_config(args)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    measured = read_kspc(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if args.verbose and (rec.iteration % 50 == 0 or rec.iteration == cfg.iters - 1):
            print(f"iter {rec.iteration:5d}  L_DC {rec.dc:.4g}  L_TV {rec.tv:.4g}  {rec.seconds:.1f}s", flush=True)

    params, coeffs, history = train(measured, cfg, callback=progress)
    res = reconstruct(params, coeffs, measured, cfg.use_kc)
    mag = np.abs(res.combined)
    files = {
        "config": out / "config.json",
        "magnitude": out / "combined_mag.raw",
        "phase": out / "combined_phase.raw",
        "pgm": out / "combined.pgm",
        "network": out / "network.raw",
        "kspace": out / "composite.kspc",
        "checkpoint": out / "model.imjw",
        "history": out / "history.csv",
    }
    files["config"].write_text(cfg.to_json() + "\n")
    write_raw_f32(files["magnitude"], mag)
    write_raw_f32(files["phase"], np.angle(res.combined))
    write_pgm16(files["pgm"], mag)
    write_raw_f32(files["network"], res.network_image)
    write_kspc(files["kspace"], res.kspace)
    write_checkpoint(files["checkpoint"], params, coeffs, measured.shape)
    history.write_csv(files["history"])
    extra = {"variant": args.variant, "shape": list(measured.shape), "coils": measured.n_coils,
             "rate": measured.mask.rate()}
    _write_manifest(out, "recon", args, [args.input], files.values(),
                    {"network": cfg.seed, "poly": cfg.poly_seed}, args.config, t0, extra)
    print(f"final L_DC {history.records[-1].dc:.6g}; outputs in {out}")
    return EXIT_OK


def _load_magnitude(path: str, shape=None) -> np.ndarray:
    """Magnitude image from a fully sampled KSPC (reference combination) or a raw float32 file."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"{path}: no such file")
    if p.suffix == ".kspc":
        vol = read_kspc(p)
        if vol.mask.rate() < 1.0:
            raise InputError(f"{path}: reference k-space must be fully sampled")
        return np.abs(reference_image(vol.data))
    if shape is None:
        manifest = p.parent / "manifest.json"
        if manifest.exists():
            shape = json.loads(manifest.read_text()).get("shape")
    if shape is None:
        raise InputError(f"{path}: --shape is required for raw images")
    n = int(np.prod(shape))
    size = p.stat().st_size
    if size == 8 * n:
        return np.abs(read_raw_f32(p, tuple(shape), complex_data=True))
    return read_raw_f32(p, tuple(shape))


def _eval_case(item):
    name, truth, recon, shape = item
    t0 = time.perf_counter()
    ref = _load_magnitude(truth, shape)
    test = _load_magnitude(recon, shape)
    if ref.shape != test.shape:
        raise InputError(f"case {name}: reference {ref.shape} and reconstruction {test.shape} differ")
    rep = evaluate(ref, test)
    row = {"case": name, "psnr_db": rep.psnr_db, "ssim": rep.ssim, "seconds": round(time.perf_counter() - t0, 4)}
    manifest = Path(recon).parent / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        row["variant"] = m.get("variant", "")
        src = m.get("inputs") or []
        if src:
            pm = Path(src[0]).parent / "manifest.json"
            if pm.exists():
                pmd = json.loads(pm.read_text())
                row["R"], row["ACS"] = pmd.get("R", ""), pmd.get("ACS", "")
    return row


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cases = [tuple(c) for c in (args.case or [])]
    if args.truth or args.recon:
        if not (args.truth and args.recon):
            raise InputError("--truth and --recon go together")
        cases.insert(0, ("case0", args.truth, args.recon))
    if not cases:
        raise InputError("nothing to evaluate: give --truth/--recon or --case")
    items = [(name, t, r, args.shape) for name, t, r in cases]
    rows = _parallel_map(_eval_case, items, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    for row in rows:
        p = row["psnr_db"]
        ptxt = "inf" if math.isinf(p) else f"{p:.2f}"
        print(f"{row['case']}: PSNR {ptxt} dB  SSIM {row['ssim']:.4f}")
    inputs = [p for _, t, r in cases for p in (t, r)]
    _write_manifest(out.parent, "eval", args, inputs, [out], {}, None, t0)
    return EXIT_OK


def _tune_case(item):
    case_dir, cfg_json = item
    cfg = ReconConfig.from_json(cfg_json)
    case = Path(case_dir)
    measured = read_kspc(case / "under.kspc")
    ref = np.abs(reference_image(read_kspc(case / "full.kspc").data))
    try:
        params, coeffs, _ = train(measured, cfg)
    except NonFiniteError:
        return -math.inf
    from .metrics import psnr
    return psnr(ref, np.abs(reconstruct(params, coeffs, measured, cfg.use_kc).combined))


def cmd_tune(args) -> int:
    t0 = time.perf_counter()
    if args.init < 1 or args.total < args.init:
        raise InputError("need --total >= --init >= 1")
    for c in args.case:
        for f in ("under.kspc", "full.kspc"):
            if not (Path(c) / f).exists():
                raise InputError(f"case {c}: missing {f}")
    base = ReconConfig.from_dict(_load_json(args.config)) if args.config else ReconConfig()
    space = SearchSpace(tuple(args.w0_range), tuple(args.lam_range))

    def objective(point):
        cfg = ReconConfig(**{**base.__dict__, "w0": point[0], "lam": point[1]})
        scores = _parallel_map(_tune_case, [(c, cfg.to_json()) for c in args.case], args.jobs)
        return float(np.mean(scores))

    def progress(it, point, score):
        print(f"eval {it:2d}: w0={point[0]:g} lambda={point[1]:g} score={score:.4f}", flush=True)

    trace = bayes_optimize(objective, space, args.total, args.init, args.seed, callback=progress)
    (w0, lam), score = trace.best()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    best = ReconConfig(**{**base.__dict__, "w0": w0, "lam": lam})
    (out / "best_config.json").write_text(best.to_json() + "\n")
    _write_manifest(out, "tune", args, args.case, [out / "trace.csv", out / "best_config.json"],
                    {"bo": args.seed}, args.config, t0, {"best": {"w0": w0, "lambda": lam, "score": score}})
    print(f"best w0={w0:g} lambda={lam:g} score={score:.4f}")
    return EXIT_OK


def cmd_upsample(args) -> int:
    t0 = time.perf_counter()
    if args.scale < 1:
        raise InputError("--scale must be >= 1")
    params, _, shape = read_checkpoint(args.checkpoint)
    img = query_upsampled(params, args.scale, shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = out / f"network_x{args.scale}.raw"
    pgm = out / f"network_x{args.scale}.pgm"
    write_raw_f32(raw, img)
    write_pgm16(pgm, np.abs(img))
    _write_manifest(out, "upsample", args, [args.checkpoint], [raw, pgm], {}, None, t0,
                    {"shape": list(img.shape), "scale": args.scale})
    print(f"wrote {img.shape[0]}x{img.shape[1]} image to {raw}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imjense", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="simulate a phantom, coil maps and k-space")
    p.add_argument("spec", help="phantom spec JSON (d1, d2, coils, sigma_n, seed; optional mask {R, acs})")
    p.add_argument("--out", required=True)
    p.add_argument("--R", type=int, help="override the spec's acceleration factor")
    p.add_argument("--acs", type=int, help="override the spec's ACS line count")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("mask", help="print the kept lines and rate of a Cartesian mask")
    p.add_argument("--d-pe", type=int, required=True)
    p.add_argument("--R", type=int, required=True)
    p.add_argument("--acs", type=int, required=True)
    p.add_argument("--d-ro", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("recon", help="reconstruct undersampled k-space")
    p.add_argument("input", help="undersampled KSPC file")
    p.add_argument("--config", help="ReconConfig JSON (defaults when omitted)")
    p.add_argument("--variant", default="full", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--preset", choices=sorted(PRESETS), help="take (w0, lambda) from a preset")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, help="network and polynomial initialization seed")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="PSNR/SSIM of reconstructions against references")
    p.add_argument("--truth", help="reference: fully sampled .kspc or raw float32 image")
    p.add_argument("--recon", help="reconstruction: raw float32 magnitude or complex image")
    p.add_argument("--case", nargs=3, action="append", metavar=("NAME", "TRUTH", "RECON"))
    p.add_argument("--shape", type=int, nargs=2, metavar=("D1", "D2"))
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="Bayesian search over (w0, lambda)")
    p.add_argument("--case", action="append", required=True,
                   help="phantom output directory holding full.kspc and under.kspc (repeatable)")
    p.add_argument("--config", help="base ReconConfig JSON")
    p.add_argument("--total", type=int, default=24)
    p.add_argument("--init", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w0-range", type=float, nargs=2, default=(10.0, 50.0))
    p.add_argument("--lam-range", type=float, nargs=2, default=(0.0, 100.0))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("upsample", help="render a checkpoint on a denser grid")
    p.add_argument("checkpoint")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upsample)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
