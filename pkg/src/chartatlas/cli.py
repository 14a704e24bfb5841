"""Command-line front end: reconstruct, fit-patch, evaluate, lambda-sweep, estimate-normals.

Every command writes into ``--out`` and leaves a ``config.txt`` echo there;
``--config config.txt`` replays the run. Flags override values from the file.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import atlas as A
from . import evaluate as E
from .geometry import GeometryError, PointCloud, denormalize, estimate_normals, normalize
from .mlp import ChartSpecError, DEFAULT_LAYERS
from .plyio import CloudFormatError, read_cloud, read_mesh, write_cloud
from .transport import TransportError, exact_assignment, squared_distances

log = logging.getLogger("chartatlas")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    input: str = ""
    out: str = ""
    r: float = 0.025
    c: float = 1.5
    c_tilde: float = 1.5
    alpha_deg: float = 100.0
    lam: float = 1000.0  # entropic weight is eps = 1 / lam
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    phase1_iters: int = 2000
    phase2_iters: int = 1000
    w_fit: float = 1.0
    grid_m: int = 32
    margin: float = 0.0
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    layers: tuple = DEFAULT_LAYERS
    plan_refresh_interval: int = 1
    phase2_refresh_interval: int = 250
    sinkhorn_iters: int = 500
    plateau_tol: float = 1e-6
    normals_k: int = 16

    @property
    def eps(self) -> float:
        return 1.0 / self.lam

    def validate(self) -> None:
        positive = ("r", "c", "c_tilde", "alpha_deg", "lam", "lr", "eps_adam", "grid_m", "threads", "sinkhorn_iters")
        for name in positive:
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("phase1_iters", "phase2_iters", "w_fit", "plan_refresh_interval", "phase2_refresh_interval"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("betas must lie in [0, 1)")
        if not 0 <= self.margin < 0.5:
            raise UsageError("margin must lie in [0, 0.5)")
        if self.grid_m < 2:
            raise UsageError("grid_m must be at least 2")
        if self.lr_schedule not in A.LR_SCHEDULES:
            raise UsageError(f"lr_schedule must be one of {', '.join(A.LR_SCHEDULES)}, got {self.lr_schedule!r}")
        if self.lr_min < 0:
            raise UsageError(f"lr_min must be non-negative, got {self.lr_min}")
        if self.c_tilde < self.c:
            raise UsageError("c_tilde must be >= c")

    def atlas_config(self) -> A.AtlasConfig:
        return A.AtlasConfig(
            r=self.r, c=self.c, c_tilde=self.c_tilde, alpha_deg=self.alpha_deg, eps=self.eps,
            layers=tuple(self.layers), lr=self.lr, lr_schedule=self.lr_schedule, lr_min=self.lr_min,
            beta1=self.beta1, beta2=self.beta2, eps_adam=self.eps_adam,
            phase1_iters=self.phase1_iters, phase2_iters=self.phase2_iters, plateau_tol=self.plateau_tol,
            plan_refresh_interval=self.plan_refresh_interval, phase2_refresh_interval=self.phase2_refresh_interval,
            w_fit=self.w_fit, sinkhorn_iters=self.sinkhorn_iters, normals_k=self.normals_k, seed=self.seed,
            threads=self.threads,
        )


# key in the echo file / dataclass field -> command-line flag
FLAG_NAMES = {f.name: "--" + ("lambda" if f.name == "lam" else f.name.replace("_", "-")) for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    default = getattr(RunConfig(), name)
    raw = raw.strip()
    try:
        if name == "layers":
            return tuple(int(t) for t in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    """``key = value`` lines; keys may use dashes or underscores; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, raw = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        key = "lam" if key == "lambda" else key
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def write_config_echo(config: RunConfig, path, extra: Optional[dict] = None) -> None:
    lines = [f"{'lambda' if k == 'lam' else k} = {_format_value(v)}" for k, v in asdict(config).items()]
    lines.append(f"# eps = {config.eps!r}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags given here override it")
    for f in fields(RunConfig):
        flag = FLAG_NAMES[f.name]
        if f.name == "layers":
            p.add_argument(flag, dest=f.name, default=None, help="comma separated layer widths, 2 in and 3 out")
        elif f.name == "lam":
            p.add_argument(flag, dest=f.name, type=float, default=None, help="Sinkhorn parameter; eps = 1/lambda")
        else:
            default = getattr(RunConfig(), f.name)
            kind = type(default) if isinstance(default, (int, float)) else str
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = _parse_value("layers", v) if f.name == "layers" else v
    cfg = RunConfig(**values)
    cfg.validate()
    if not cfg.out:
        raise UsageError("--out is required")
    return cfg


def _load_input(path: str) -> PointCloud:
    if not path:
        raise UsageError("--input is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return read_cloud(p)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _absolute(cfg: RunConfig) -> RunConfig:
    if cfg.input:
        cfg.input = str(Path(cfg.input).resolve())
    return cfg


# -- commands ----------------------------------------------------------------------------------


def cmd_reconstruct(cfg: RunConfig) -> dict:
    cloud = _load_input(cfg.input)
    out = _out_dir(cfg)
    write_config_echo(cfg, out / "config.txt")
    res = A.reconstruct(cloud, cfg.atlas_config(), cfg.grid_m, cfg.margin)
    write_cloud(res.dense, out / "dense.ply")
    A.save_atlas(res.atlas, out / "atlas")
    scale = res.atlas.transform.scale
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch", "status", "center_index", "n_core", "n_fit", "fit_loss", "rms_world", "iterations", "seconds"])
        for p in res.atlas.patches:
            rms = np.sqrt(p.fit_loss / p.n_fit) * scale
            w.writerow([p.id, "fitted", p.center_index, len(p.core), p.n_fit, repr(p.fit_loss), repr(float(rms)),
                        p.iterations, f"{p.seconds:.3f}"])
        for ci, n in res.build.dropped:
            w.writerow(["", "dropped", ci, "", n, "", "", 0, ""])
    summary = {
        "n_points": res.build.n_points,
        "n_centers": res.build.n_centers,
        "n_patches": len(res.atlas.patches),
        "n_dropped": len(res.build.dropped),
        "covered": res.build.covered,
        "filtered_everywhere": res.build.filtered_everywhere,
        "dropped_only": res.build.dropped_only,
        "n_overlap_pairs": len(res.atlas.overlaps),
        "n_correspondences": res.atlas.overlaps.n_correspondences(),
        "consistency_before": res.consistency_before,
        "consistency_after": res.consistency_after,
        "phase2_run": cfg.phase2_iters > 0,
        "n_dense": len(res.dense),
        "timings": res.timings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    log.info("reconstructed %d dense points from %d patches; consistency %.4g -> %.4g",
             len(res.dense), len(res.atlas.patches), res.consistency_before, res.consistency_after)
    return summary


def _fit_single(cloud: PointCloud, cfg: RunConfig):
    normed, transform = normalize(cloud)
    config = cfg.atlas_config()
    patch = A.single_patch(normed)
    A.prepare_patch(patch, config)
    A.fit_chart(patch, normed.points, config)
    atlas = A.Atlas([patch], A.OverlapTable(), transform, config)
    exact = exact_assignment(squared_distances(normed.points[patch.fit], patch.outputs())).cost
    return atlas, patch, exact


def cmd_fit_patch(cfg: RunConfig) -> dict:
    cloud = _load_input(cfg.input)
    out = _out_dir(cfg)
    write_config_echo(cfg, out / "config.txt")
    atlas, patch, exact = _fit_single(cloud, cfg)
    write_cloud(A.resample(atlas, cfg.grid_m, cfg.margin), out / "dense.ply")
    A.save_atlas(atlas, out / "atlas")
    with open(out / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sinkhorn_loss"])
        for k, v in enumerate(patch.loss_log):
            w.writerow([k, repr(v)])
    summary = {
        "n_points": patch.n_fit,
        "iterations": patch.iterations,
        "seconds": patch.seconds,
        "emd_projected": patch.fit_loss,
        "emd_projected_per_point": patch.fit_loss / patch.n_fit,
        "emd_exact": exact,
        "eps": cfg.eps,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    log.info("fitted %d points in %d iterations; EMD/pt %.4g", patch.n_fit, patch.iterations, patch.fit_loss / patch.n_fit)
    return summary


def cmd_lambda_sweep(cfg: RunConfig, lambdas: Sequence[float]) -> list:
    if not lambdas:
        raise UsageError("lambda-sweep needs at least one lambda")
    if any(not lam > 0 for lam in lambdas):
        raise UsageError("lambdas must be positive")
    cloud = _load_input(cfg.input)
    out = _out_dir(cfg)
    write_config_echo(cfg, out / "config.txt", {"lambdas": ",".join(repr(x) for x in lambdas)})
    rows = []
    for lam in lambdas:
        sub = RunConfig(**{**asdict(cfg), "lam": float(lam), "out": str(out / f"lambda_{lam:g}")})
        s = cmd_fit_patch(sub)
        rows.append((lam, sub.eps, s["emd_projected"], s["emd_projected_per_point"], s["emd_exact"], s["iterations"]))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "eps", "emd_projected", "emd_projected_per_point", "emd_exact", "iterations"])
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    return rows


def cmd_evaluate(recon: str, inp: str, out: str, ground_truth: Optional[str] = None, gt_samples: int = 1_000_000,
                 n_bins: int = 100, model: str = "model", method: str = "ours", seed: int = 0) -> list:
    for path in (recon, inp) + ((ground_truth,) if ground_truth else ()):
        if not Path(path).is_file():
            raise UsageError(f"input file not found: {path}")
    rec = read_cloud(recon).points
    src = read_cloud(inp).points
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    directions = [(E.INP_TO_REC, "inp_to_rec", E.one_sided(src, rec, E.INP_TO_REC))]
    if ground_truth:
        try:
            verts, tris = read_mesh(ground_truth)
            gt = E.sample_mesh(verts, tris, gt_samples, seed)
        except CloudFormatError:
            gt = read_cloud(ground_truth).points
        directions.append((E.REC_TO_GT, "rec_to_gt", E.one_sided(rec, gt, E.REC_TO_GT)))
    rows = []
    for label, stem, d in directions:
        np.savetxt(outdir / f"{stem}.csv", d.values, fmt="%.17g", header="distance", comments="")
        E.write_histogram(E.cumulative_histogram(d, n_bins), outdir / f"{stem}_hist.csv")
        rows.append((model, method, label, E.stats(d)))
    E.write_stats(rows, outdir / "stats.csv")
    return rows


def cmd_estimate_normals(inp: str, out: str, k: int = 16) -> PointCloud:
    cloud = _load_input(inp)
    normed, transform = normalize(cloud)
    oriented = denormalize(estimate_normals(PointCloud(normed.points), k=k), transform)
    outp = Path(out)
    outp.parent.mkdir(parents=True, exist_ok=True)
    write_cloud(oriented, outp)
    return oriented


# -- entry point -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chartatlas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="fit an atlas to a point cloud and resample it densely")
    _add_config_flags(p)
    p = sub.add_parser("fit-patch", help="fit a single chart to a whole (small) cloud")
    _add_config_flags(p)
    p = sub.add_parser("lambda-sweep", help="fit-patch once per lambda and tabulate the exact EMD")
    _add_config_flags(p)
    p.add_argument("--lambdas", required=True, help="comma separated lambda values")

    p = sub.add_parser("evaluate", help="one-sided distances, histograms and statistics")
    p.add_argument("--recon", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ground-truth")
    p.add_argument("--gt-samples", type=int, default=1_000_000)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--model", default="model")
    p.add_argument("--method", default="ours")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate-normals", help="PCA normals with consistent orientation")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output .ply or .xyz path")
    p.add_argument("--k", type=int, default=16)
    return parser


def _parse_lambdas(raw: str) -> list:
    try:
        return [float(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"bad lambda list: {raw!r}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        if args.command == "evaluate":
            cmd_evaluate(args.recon, args.input, args.out, args.ground_truth, args.gt_samples, args.bins,
                         args.model, args.method, args.seed)
        elif args.command == "estimate-normals":
            cmd_estimate_normals(args.input, args.out, args.k)
        else:
            cfg = _absolute(resolve_config(args))
            if args.command == "reconstruct":
                cmd_reconstruct(cfg)
            elif args.command == "fit-patch":
                cmd_fit_patch(cfg)
            else:
                cmd_lambda_sweep(cfg, _parse_lambdas(args.lambdas))
    except (UsageError, CloudFormatError, GeometryError, ChartSpecError, FileNotFoundError, ValueError) as exc:
        print(f"chartatlas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (A.FitError, TransportError, FloatingPointError) as exc:
        print(f"chartatlas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("done in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
