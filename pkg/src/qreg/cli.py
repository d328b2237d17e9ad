"""``qreg`` command line: register, evaluate, synth and bench subcommands.

Settings come from an optional key-value file (``--config``) overridden by
repeated ``--set key=value`` flags. Unknown keys are rejected. The only
environment variable read is ``QREG_THREADS`` (bench worker count).
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from qreg import io as qio
from qreg.core import Correspondences
from qreg.errors import ConfigError, InvalidSpec, NoEligibleCorrespondences, QRegError
from qreg.estimator import (
    EstimatorConfig,
    RegistrationReport,
    kabsch_register,
    pose_rmse,
    qreg_register,
    ransac_register,
)
from qreg.metrics import PROTOCOLS, PairEvaluation, evaluate_pair, rre, rte, summarize
from qreg.synth import SceneSpec, generate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NO_ELIGIBLE = 2

THREADS_ENV = "QREG_THREADS"
SUCCESS_RMSE = 0.2

ESTIMATOR_KEYS = frozenset(f.name for f in fields(EstimatorConfig))
SCENE_KEYS = frozenset(f.name for f in fields(SceneSpec))
METHOD_KEYS = frozenset({"method"})
REGISTER_PATH_KEYS = frozenset({"source", "target", "corrs", "out_transform", "out_report", "gt"})
BENCH_KEYS = frozenset({"inlier_ratios", "noise_sigmas", "methods", "seeds"})

_RANSAC_RE = re.compile(r"^ransac(?:\((\d+)\)|:(\d+))?$")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def parse_overrides(items: Sequence[str] | None) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = qio._parse_value(value)
    return out


def load_settings(config_path: str | None, overrides: Sequence[str] | None, allowed: frozenset[str]) -> dict[str, Any]:
    settings = qio.read_config(config_path) if config_path else {}
    settings.update(parse_overrides(overrides))
    unknown = sorted(set(settings) - allowed)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    return settings


def estimator_config(settings: dict[str, Any]) -> EstimatorConfig:
    kwargs = {k: v for k, v in settings.items() if k in ESTIMATOR_KEYS}
    try:
        return EstimatorConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid estimator setting: {exc}") from None


def parse_method(method: str) -> tuple[str, int | None]:
    """``qreg``, ``qreg_no_lo``, ``kabsch_weighted`` or ``ransac(N)`` / ``ransac:N``."""
    method = str(method).strip()
    if method in ("qreg", "qreg_no_lo", "kabsch_weighted"):
        return method, None
    m = _RANSAC_RE.match(method)
    if m:
        n = m.group(1) or m.group(2)
        return "ransac", int(n) if n else 1000
    raise ConfigError(f"unknown method {method!r}")


def run_method(method: str, corrs: Correspondences, clouds, cfg: EstimatorConfig) -> RegistrationReport:
    name, iterations = parse_method(method)
    if name == "qreg":
        return qreg_register(corrs, clouds, cfg=cfg)
    if name == "qreg_no_lo":
        return qreg_register(corrs, clouds, cfg=cfg, refine=False)
    if name == "ransac":
        return ransac_register(corrs, clouds, iterations, cfg)
    return kabsch_register(corrs, clouds, cfg)


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def cmd_register(args: argparse.Namespace) -> int:
    settings = load_settings(args.config, args.set, ESTIMATOR_KEYS | METHOD_KEYS | REGISTER_PATH_KEYS)
    for key in ("source", "target", "corrs", "out_transform", "out_report", "gt"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    missing = [k for k in ("source", "target", "corrs") if not settings.get(k)]
    if missing:
        raise ConfigError(f"missing required inputs: {missing}")
    method = settings.get("method", args.method)
    parse_method(method)
    cfg = estimator_config(settings)

    clouds = (qio.read_cloud(settings["source"]), qio.read_cloud(settings["target"]))
    corrs = qio.read_correspondences(settings["corrs"])
    corrs.check_bounds(*clouds)
    report = run_method(method, corrs, clouds, cfg)

    extra: dict[str, Any] = {
        "inputs": {k: str(settings[k]) for k in ("source", "target", "corrs")},
        "method_selector": str(method),
    }
    if settings.get("gt"):
        gt = qio.read_transform(settings["gt"])
        extra["rre_degrees"] = rre(report.best_transform, gt)
        extra["rte_units"] = rte(report.best_transform, gt)
    out_transform = settings.get("out_transform")
    if out_transform:
        qio.write_transform(report.best_transform, out_transform)
    else:
        sys.stdout.write(qio.format_transform(report.best_transform))
    if settings.get("out_report"):
        qio.write_report(report, settings["out_report"], **extra)
    print(
        f"{report.method}: {report.inlier_count}/{len(corrs)} inliers, "
        f"{report.candidates_evaluated} candidates, {report.stage_timings.get('total', 0.0):.3f}s",
        file=sys.stderr,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

EVAL_COLUMNS = ["pair", "rre_degrees", "rte_units", "rmse_units", "registered_3dmatch", "registered_kitti", "chamfer"]
SUMMARY_COLUMNS = ["registration_recall", "median_rre", "median_rte", "mean_rre", "mean_rte", "mean_rmse", "pairs"]


def _evaluate_one(est_path, gt_path, gt_corrs_path, source, target, protocol) -> PairEvaluation:
    est = qio.read_transform(est_path)
    gt = qio.read_transform(gt_path)
    clouds = None
    if source and target:
        clouds = (qio.read_cloud(source), qio.read_cloud(target))
    gt_corrs = qio.read_correspondences(gt_corrs_path) if gt_corrs_path else None
    if gt_corrs is not None and clouds is None:
        raise ConfigError("ground-truth correspondences need --source and --target clouds")
    return evaluate_pair(est, gt, gt_corrs, clouds, protocol)


def _batch_pairs(root: Path):
    """Sub-directories holding ``est.txt`` and ``gt.txt``, in sorted order."""
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (d / "est.txt").exists() or not (d / "gt.txt").exists():
            continue

        def opt(name: str) -> Path | None:
            return d / name if (d / name).exists() else None

        yield d.name, d / "est.txt", d / "gt.txt", opt("gt_corrs.csv"), opt("source.ply"), opt("target.ply")


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_evaluate(args: argparse.Namespace) -> int:
    rows: list[tuple[str, PairEvaluation]] = []
    if args.batch:
        root = Path(args.batch)
        if not root.is_dir():
            raise FileNotFoundError(f"batch directory {root} does not exist")
        for name, est, gt, gt_corrs, src, dst in _batch_pairs(root):
            rows.append((name, _evaluate_one(est, gt, gt_corrs, src, dst, args.protocol)))
    else:
        if not args.est or not args.gt:
            raise ConfigError("evaluate needs --est and --gt (or --batch DIR)")
        rows.append(("pair", _evaluate_one(args.est, args.gt, args.gt_corrs, args.source, args.target, args.protocol)))

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for name, ev in rows:
        d = ev.as_row()
        w.writerow([name] + [_fmt(d[c]) for c in EVAL_COLUMNS[1:]])
    if args.batch:
        summary = summarize([ev for _, ev in rows], args.protocol).as_row()
        sys.stdout.write("\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([_fmt(summary[c]) for c in SUMMARY_COLUMNS])
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def scene_spec(settings: dict[str, Any]) -> SceneSpec:
    try:
        return SceneSpec.from_dict({k: v for k, v in settings.items() if k in SCENE_KEYS})
    except TypeError as exc:
        raise InvalidSpec(str(exc)) from None


def cmd_synth(args: argparse.Namespace) -> int:
    settings = load_settings(args.config, args.set, SCENE_KEYS)
    spec = scene_spec(settings)
    scene = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    qio.write_cloud(scene.source, out / "source.ply")
    qio.write_cloud(scene.target, out / "target.ply")
    qio.write_correspondences(scene.correspondences, out / "corrs.csv")
    qio.write_correspondences(scene.gt_correspondences, out / "gt_corrs.csv")
    qio.write_transform(scene.gt, out / "gt.txt")
    # spec.cfg regenerates this exact scene; surfaces.cfg records what was sampled.
    qio.write_config(spec.to_dict(), out / "spec.cfg")
    realized = [
        {"kind": s.kind, "center": list(s.center), "semi_axes": list(s.semi_axes), "rotation": [list(r) for r in s.rotation]}
        for s in scene.surfaces
    ]
    qio.write_config({"surfaces": realized}, out / "surfaces.cfg")
    print(f"wrote scene with {len(scene.source)} source points and {len(scene.correspondences)} correspondences to {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_COLUMNS = [
    "inlier_ratio",
    "noise_sigma",
    "method",
    "trials",
    "success_rate",
    "median_rre",
    "median_rte",
    "mean_wall_time",
    "seeds",
]


def _seeds(value: Any) -> list[int]:
    if isinstance(value, int):
        return list(range(value))
    return [int(s) for s in value]


def _run_cell(task: tuple) -> list:
    """One (inlier_ratio, noise, method) cell over every seed."""
    ratio, noise, method, seeds, scene_settings, est_settings = task
    successes, rres, rtes, walls = 0, [], [], []
    for seed in seeds:
        spec = SceneSpec.from_dict({**scene_settings, "inlier_ratio": ratio, "noise_sigma": noise, "seed": seed})
        scene = generate(spec)
        cfg = EstimatorConfig(**{**est_settings, "rng_seed": seed})
        t0 = time.perf_counter()
        try:
            report = run_method(method, scene.correspondences, scene.clouds, cfg)
        except NoEligibleCorrespondences:
            walls.append(time.perf_counter() - t0)
            continue
        walls.append(time.perf_counter() - t0)
        est = report.best_transform
        rres.append(rre(est, scene.gt))
        rtes.append(rte(est, scene.gt))
        if pose_rmse(est, scene.gt_correspondences, scene.clouds) < SUCCESS_RMSE:
            successes += 1

    def med(v):
        return float(np.median(v)) if v else float("nan")

    n = len(seeds)
    return [
        ratio,
        noise,
        method,
        n,
        successes / n if n else float("nan"),
        med(rres),
        med(rtes),
        float(np.mean(walls)) if walls else float("nan"),
        ";".join(str(s) for s in seeds),
    ]


def bench_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def cmd_bench(args: argparse.Namespace) -> int:
    settings = load_settings(args.config, args.set, BENCH_KEYS | SCENE_KEYS | ESTIMATOR_KEYS)
    ratios = [float(r) for r in settings.pop("inlier_ratios", [0.3])]
    noises = [float(s) for s in settings.pop("noise_sigmas", [0.0])]
    methods = [str(m) for m in settings.pop("methods", ["qreg", "ransac(1000)"])]
    seeds = _seeds(settings.pop("seeds", 10))
    for m in methods:
        parse_method(m)
    est_settings = {k: v for k, v in settings.items() if k in ESTIMATOR_KEYS}
    scene_settings = {k: v for k, v in settings.items() if k in SCENE_KEYS and k not in ("inlier_ratio", "noise_sigma", "seed")}
    estimator_config(est_settings)
    scene_spec(scene_settings).validate()

    tasks = [(r, s, m, seeds, scene_settings, est_settings) for r in ratios for s in noises for m in methods]
    threads = bench_threads()
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]

    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qreg", description="Single-correspondence quadric point cloud registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")

    p = sub.add_parser("register", help="estimate the rigid transform between two clouds")
    p.add_argument("--source", help="source cloud (.ply or .xyz)")
    p.add_argument("--target", help="target cloud (.ply or .xyz)")
    p.add_argument("--corrs", help="correspondence CSV (src,dst[,score])")
    p.add_argument("--method", default="qreg", help="qreg, qreg_no_lo, ransac(N) or kabsch_weighted (default: qreg)")
    p.add_argument("--out-transform", dest="out_transform", help="write the 4x4 transform here (default: stdout)")
    p.add_argument("--out-report", dest="out_report", help="write a JSON report here")
    p.add_argument("--gt", help="ground-truth transform; adds rotation and translation errors to the report")
    common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score estimated transforms against ground truth")
    p.add_argument("--est", help="estimated transform file")
    p.add_argument("--gt", help="ground-truth transform file")
    p.add_argument("--gt-corrs", dest="gt_corrs", help="ground-truth correspondences for the RMSE")
    p.add_argument("--source", help="source cloud (needed for RMSE and chamfer)")
    p.add_argument("--target", help="target cloud (needed for RMSE and chamfer)")
    p.add_argument("--protocol", choices=PROTOCOLS, default="threedmatch")
    p.add_argument("--batch", help="directory of pair sub-directories with est.txt and gt.txt")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help=f"sweep inlier ratio x noise x method (workers: ${THREADS_ENV})")
    p.add_argument("--out", help="output CSV (default: stdout)")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NoEligibleCorrespondences as exc:
        print(f"qreg: no eligible correspondences: {exc}", file=sys.stderr)
        return EXIT_NO_ELIGIBLE
    except (QRegError, OSError, ValueError, IndexError) as exc:
        print(f"qreg: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
