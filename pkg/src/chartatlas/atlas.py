"""Atlas construction: patches, per-chart transport fitting, overlap maps and joint consistency.

Conventions. A patch owns a *fit set* (cloud indices inside the larger ball,
normal-filtered) and a *core set* (same for the smaller ball). Its
parametric samples ``V`` have one entry per fit point, and ``perm[j]`` is
the position in the fit set matched to sample ``j``, so the cloud index
behind sample ``j`` is ``fit[perm[j]]``.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import mlp
from .geometry import NormalizationTransform, PointCloud, SpatialIndex, estimate_normals, normalize
from .mlp import AdamState, ChartNet
from .sampling import ParamSample, patch_seed, poisson_disk_cloud, poisson_disk_square
from .transport import TransportError, project_to_permutation, sinkhorn, squared_distances

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class FitError(RuntimeError):
    pass


@dataclass
class AtlasConfig:
    r: float = 0.025
    c: float = 1.5
    c_tilde: float = 1.5
    alpha_deg: float = 100.0
    eps: float = 1e-3
    layers: tuple = mlp.DEFAULT_LAYERS
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    phase1_iters: int = 2000
    phase2_iters: int = 1000
    plateau_tol: float = 1e-6
    plateau_window: int = 100
    plan_refresh_interval: int = 1
    phase2_refresh_interval: int = 250
    w_fit: float = 1.0
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6
    final_sinkhorn_iters: int = 10000
    lr_schedule: str = "constant"
    lr_min: float = 1e-6
    min_fit_points: int = 4
    normals_k: int = 16
    seed: int = 0
    threads: int = 1


@dataclass
class Patch:
    id: int
    center_index: int
    center: np.ndarray
    center_normal: Optional[np.ndarray]
    core: np.ndarray
    fit: np.ndarray
    samples: Optional[ParamSample] = None
    net: Optional[ChartNet] = None
    adam: Optional[AdamState] = None
    perm: Optional[np.ndarray] = None
    fit_loss: float = float("nan")
    loss_log: list = field(default_factory=list)
    potentials: Optional[tuple] = None
    iterations: int = 0
    seconds: float = 0.0

    @property
    def fitted(self) -> bool:
        return self.perm is not None and self.net is not None

    @property
    def n_fit(self) -> int:
        return len(self.fit)

    def assigned(self) -> np.ndarray:
        """Cloud index matched to each parametric sample."""
        return self.fit[self.perm]

    def outputs(self) -> np.ndarray:
        return mlp.forward(self.net, self.samples.points)


@dataclass
class PatchReport:
    n_points: int
    n_centers: int
    dropped: list  # (center_index, n_fit) of patches with too few points
    covered: int  # points in at least one kept core set
    filtered_everywhere: int  # inside some core ball, rejected by the normal filter at all of them
    dropped_only: int  # covered only by dropped patches


@dataclass
class OverlapTable:
    """``pairs[(p, q)] = (src, dst)``: sample ``src[k]`` of ``p`` corresponds to sample ``dst[k]`` of ``q``."""

    pairs: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def items(self):
        return self.pairs.items()

    def n_correspondences(self) -> int:
        return sum(len(s) for s, _ in self.pairs.values())


@dataclass
class Atlas:
    patches: list
    overlaps: OverlapTable
    transform: NormalizationTransform
    config: AtlasConfig


@dataclass
class DenseSample:
    points: np.ndarray
    normals: np.ndarray
    uv: np.ndarray
    patch_id: np.ndarray
    residual: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


# -- construction ------------------------------------------------------------------------------


def _normal_filter(normals, idx, center_normal, alpha_deg):
    if normals is None or alpha_deg >= 180.0:
        return idx
    cosines = normals[idx] @ center_normal
    return idx[cosines >= np.cos(np.deg2rad(alpha_deg))]


def build_patches(
    cloud: PointCloud,
    r: float = 0.025,
    c: float = 1.5,
    c_tilde: float = 1.5,
    alpha_deg: float = 100.0,
    seed: int = 0,
    min_fit_points: int = 4,
) -> tuple[list, PatchReport]:
    """Unfitted patches around Poisson-disk centers.

    Points whose normal deviates from the center normal by more than
    ``alpha_deg`` are removed from both balls. Patches left with fewer than
    ``min_fit_points`` fit points are dropped and reported.
    """
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    if not (c > 0 and c_tilde > 0):
        raise ValueError("c and c_tilde must be positive")
    if c_tilde < c:
        raise ValueError(f"c_tilde ({c_tilde}) must be >= c ({c})")
    pts = cloud.points
    normals = cloud.normals
    index = SpatialIndex(pts)
    centers = poisson_disk_cloud(cloud, r, seed)
    patches, dropped = [], []
    in_ball = np.zeros(len(pts), dtype=bool)
    in_kept_core = np.zeros(len(pts), dtype=bool)
    in_dropped_core = np.zeros(len(pts), dtype=bool)
    for ci in centers.indices:
        ci = int(ci)
        cn = None if normals is None else normals[ci]
        core_ball = index.radius_query(pts[ci], c * r)
        in_ball[core_ball] = True
        fit = _normal_filter(normals, index.radius_query(pts[ci], c_tilde * r), cn, alpha_deg)
        core = _normal_filter(normals, core_ball, cn, alpha_deg)
        if len(fit) < min_fit_points:
            log.warning("dropping patch at point %d: %d fit points after filtering", ci, len(fit))
            dropped.append((ci, len(fit)))
            in_dropped_core[core] = True
            continue
        in_kept_core[core] = True
        patches.append(Patch(len(patches), ci, pts[ci].copy(), None if cn is None else cn.copy(), core, fit))
    report = PatchReport(
        n_points=len(pts),
        n_centers=len(centers.indices),
        dropped=dropped,
        covered=int(in_kept_core.sum()),
        filtered_everywhere=int((in_ball & ~in_kept_core & ~in_dropped_core).sum()),
        dropped_only=int((in_dropped_core & ~in_kept_core).sum()),
    )
    return patches, report


def single_patch(cloud: PointCloud) -> Patch:
    """One patch holding the whole cloud, for single-chart fitting."""
    idx = np.arange(len(cloud))
    center = cloud.points.mean(axis=0)
    ci = int(np.argmin(np.linalg.norm(cloud.points - center, axis=1)))
    cn = None if cloud.normals is None else cloud.normals[ci].copy()
    return Patch(0, ci, cloud.points[ci].copy(), cn, idx, idx.copy())


# -- phase 1 -----------------------------------------------------------------------------------


def prepare_patch(patch: Patch, config: AtlasConfig) -> Patch:
    """Draw parametric samples and initialise the chart and its optimizer."""
    n = patch.n_fit
    if n < config.min_fit_points:
        raise FitError(f"patch {patch.id}: {n} fit points, need at least {config.min_fit_points}")
    patch.samples = poisson_disk_square(n, patch_seed(config.seed, patch.id, 0))
    patch.net = mlp.init_chart(config.layers, patch_seed(config.seed, patch.id, 1), n_fit=n)
    patch.adam = AdamState.for_net(patch.net, config.lr, config.beta1, config.beta2, config.eps_adam)
    return patch


def _plan(patch: Patch, C, config: AtlasConfig, final: bool = False):
    """Warm-started plan for one step; ``final`` runs the full budget with the Newton polish."""
    max_iters = config.final_sinkhorn_iters if final else config.sinkhorn_iters
    try:
        # the O(n^3) polish is only worth it once, on the plan that gets projected
        plan = sinkhorn(C, config.eps, max_iters, config.sinkhorn_tol, init=patch.potentials,
                        newton_max_n=256 if final else 0)
    except TransportError as exc:
        raise FitError(f"patch {patch.id}: Sinkhorn diverged ({exc})") from exc
    patch.potentials = (plan.f, plan.g)
    return plan


LR_SCHEDULES = ("constant", "cosine")


def _schedule(config: AtlasConfig) -> str:
    if config.lr_schedule not in LR_SCHEDULES:
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}; expected one of {LR_SCHEDULES}")
    return config.lr_schedule


def fit_chart(patch: Patch, points: np.ndarray, config: AtlasConfig, max_iters: Optional[int] = None) -> Patch:
    """Phase 1: alternate Sinkhorn plans and Adam steps on ``<P, C(theta)>`` with P frozen.

    ``lr_schedule="cosine"`` anneals the Adam step size from ``lr`` to
    ``lr_min`` over the ``max_iters`` budget; ``"constant"`` keeps ``lr``. Stops after ``max_iters`` steps or once the mean transport
    cost over the last ``plateau_window`` steps improved by less than
    ``plateau_tol`` (relative) on the mean over the window before. The final
    plan is projected to a permutation and ``fit_loss`` is the exact
    matching cost under it.
    """
    if patch.samples is None:
        prepare_patch(patch, config)
    max_iters = config.phase1_iters if max_iters is None else max_iters
    t0 = time.perf_counter()
    X = points[patch.fit]
    V = patch.samples.points
    net = patch.net
    refresh = max(1, int(config.plan_refresh_interval))
    cosine = _schedule(config) == "cosine"
    window = config.plateau_window
    plan = None
    losses = patch.loss_log
    start = len(losses)
    for it in range(max_iters):
        Y, cache = mlp.forward_with_cache(net, V)
        C = squared_distances(X, Y)
        if plan is None or it % refresh == 0:
            plan = _plan(patch, C, config)
        P = plan.plan
        loss = float(np.sum(P * C))
        if not np.isfinite(loss):
            raise FitError(f"patch {patch.id}: loss became non-finite at step {it}")
        losses.append(loss)
        dY = 2.0 * (P.sum(axis=0)[:, None] * Y - P.T @ X)
        if cosine:
            patch.adam.lr = config.lr_min + 0.5 * config.lr * (1.0 + np.cos(np.pi * it / max_iters))
        mlp.adam_step(net, patch.adam, mlp.backward(net, V, dY, cache))
        if loss == 0.0:
            break
        if len(losses) - start >= 2 * window:
            # window means, so single Adam jumps do not end the run
            prev = float(np.mean(losses[-2 * window:-window]))
            cur = float(np.mean(losses[-window:]))
            if prev - cur < config.plateau_tol * prev:
                break
    patch.iterations += len(losses) - start
    finalize_permutation(patch, points, config)
    patch.seconds += time.perf_counter() - t0
    return patch


def finalize_permutation(patch: Patch, points: np.ndarray, config: AtlasConfig) -> None:
    X = points[patch.fit]
    Y = patch.outputs()
    C = squared_distances(X, Y)
    plan = _plan(patch, C, config, final=True)
    patch.perm = project_to_permutation(plan, cost=C).perm
    patch.fit_loss = data_loss(patch, points, Y)


def data_loss(patch: Patch, points: np.ndarray, Y: Optional[np.ndarray] = None) -> float:
    """Matching cost ``sum_j |phi(v_j) - x_perm(j)|^2`` under the patch's permutation."""
    Y = patch.outputs() if Y is None else Y
    d = Y - points[patch.assigned()]
    return float(np.einsum("ij,ij->", d, d))


def data_residuals(patch: Patch, points: np.ndarray, Y: Optional[np.ndarray] = None) -> np.ndarray:
    Y = patch.outputs() if Y is None else Y
    return np.linalg.norm(Y - points[patch.assigned()], axis=1)


def _pool_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_all(patches: Sequence[Patch], points: np.ndarray, config: AtlasConfig) -> list:
    def work(p):
        prepare_patch(p, config)
        return fit_chart(p, points, config)

    return _pool_map(work, list(patches), config.threads)


# -- overlaps and phase 2 ----------------------------------------------------------------------


def _pair_map(pa: Patch, pb: Patch, shared: np.ndarray):
    ga = pa.assigned()
    gb = pb.assigned()
    src = np.flatnonzero(np.isin(ga, shared))
    order = np.argsort(gb, kind="stable")
    dst = order[np.searchsorted(gb, ga[src], sorter=order)]
    return src, dst


def build_overlaps(patches: Sequence[Patch]) -> OverlapTable:
    """Transition maps between every pair of patches whose core sets intersect."""
    for p in patches:
        if not p.fitted:
            raise FitError(f"patch {p.id} is not fitted; cannot build overlaps")
    if not patches:
        return OverlapTable()
    owner = np.concatenate([np.full(len(p.core), k) for k, p in enumerate(patches)])
    member = np.concatenate([p.core for p in patches])
    order = np.lexsort((owner, member))
    owner, member = owner[order], member[order]
    pairs = set()
    bounds = np.flatnonzero(np.diff(member)) + 1
    for group in np.split(owner, bounds):
        if len(group) > 1:
            for a in range(len(group)):
                for b in range(a + 1, len(group)):
                    pairs.add((int(group[a]), int(group[b])))
    table = OverlapTable()
    for a, b in sorted(pairs):
        pa, pb = patches[a], patches[b]
        shared = np.intersect1d(pa.core, pb.core)
        table.pairs[(a, b)] = _pair_map(pa, pb, shared)
        table.pairs[(b, a)] = _pair_map(pb, pa, shared)
    return table


def check_correspondences(patches: Sequence[Patch], overlaps: OverlapTable) -> bool:
    """Both ends of every correspondence are matched to the same cloud point."""
    for (a, b), (src, dst) in overlaps.items():
        if not np.array_equal(patches[a].assigned()[src], patches[b].assigned()[dst]):
            return False
    return True


def consistency_terms(patches, overlaps: OverlapTable, outputs=None) -> dict:
    """Per-correspondence distances ``|phi_p(v_i) - phi_q(v_pi(i))|`` for each ordered pair."""
    outputs = [p.outputs() for p in patches] if outputs is None else outputs
    return {
        (a, b): np.linalg.norm(outputs[a][src] - outputs[b][dst], axis=1)
        for (a, b), (src, dst) in overlaps.items()
    }


def consistency_loss(patches, overlaps: OverlapTable, outputs=None) -> float:
    outputs = [p.outputs() for p in patches] if outputs is None else outputs
    total = 0.0
    for (a, b), (src, dst) in overlaps.items():
        d = outputs[a][src] - outputs[b][dst]
        total += float(np.einsum("ij,ij->", d, d))
    return total


@dataclass
class ConsistencyHistory:
    consistency: list = field(default_factory=list)
    data: list = field(default_factory=list)
    refreshes: int = 0


def refresh_permutations(patches, points, config: AtlasConfig) -> None:
    def work(p):
        finalize_permutation(p, points, config)

    _pool_map(work, list(patches), config.threads)


def fit_consistency(
    patches: Sequence[Patch],
    overlaps: OverlapTable,
    points: np.ndarray,
    config: AtlasConfig,
    w_fit: Optional[float] = None,
    max_iters: Optional[int] = None,
    refresh_interval: Optional[int] = None,
) -> tuple[OverlapTable, ConsistencyHistory]:
    """Phase 2: joint Adam descent on consistency + ``w_fit`` * data terms.

    Each sweep evaluates every chart on a frozen snapshot, accumulates the
    gradients of all pair terms and data terms, then steps every chart. The
    permutations (and hence the overlap table) are re-estimated every
    ``refresh_interval`` sweeps; 0 keeps them fixed. Returns the possibly
    refreshed overlap table and the loss history, recorded before each sweep
    and once more at the end.
    """
    w_fit = config.w_fit if w_fit is None else w_fit
    max_iters = config.phase2_iters if max_iters is None else max_iters
    refresh = config.phase2_refresh_interval if refresh_interval is None else refresh_interval
    patches = list(patches)
    cosine = _schedule(config) == "cosine"
    for p in patches:
        p.adam.lr = config.lr  # restart the schedule; moments carry over
    X = [points[p.assigned()] for p in patches]
    hist = ConsistencyHistory()

    def snapshot():
        return _pool_map(lambda p: mlp.forward_with_cache(p.net, p.samples.points), patches, config.threads)

    for sweep in range(max_iters):
        if refresh and sweep > 0 and sweep % refresh == 0:
            refresh_permutations(patches, points, config)
            overlaps = build_overlaps(patches)
            X = [points[p.assigned()] for p in patches]
            hist.refreshes += 1
        snap = snapshot()
        Y = [s[0] for s in snap]
        grads = [2.0 * w_fit * (y - x) for y, x in zip(Y, X)]
        hist.data.append([float(np.einsum("ij,ij->", y - x, y - x)) for y, x in zip(Y, X)])
        total = 0.0
        for (a, b), (src, dst) in overlaps.items():
            d = Y[a][src] - Y[b][dst]
            total += float(np.einsum("ij,ij->", d, d))
            grads[a][src] += 2.0 * d
            grads[b][dst] -= 2.0 * d
        hist.consistency.append(total)

        lr = config.lr_min + 0.5 * config.lr * (1.0 + np.cos(np.pi * sweep / max_iters)) if cosine else config.lr

        def step(k):
            p = patches[k]
            p.adam.lr = lr
            g = mlp.backward(p.net, p.samples.points, grads[k], snap[k][1])
            mlp.adam_step(p.net, p.adam, g)

        _pool_map(step, list(range(len(patches))), config.threads)

    Y = [p.outputs() for p in patches]
    hist.consistency.append(consistency_loss(patches, overlaps, Y))
    hist.data.append([data_loss(p, points, y) for p, y in zip(patches, Y)])
    for p, d in zip(patches, hist.data[-1]):
        p.fit_loss = d
    return overlaps, hist


# -- resampling --------------------------------------------------------------------------------


def resample(atlas: Atlas, grid_m: int = 64, margin: float = 0.0) -> DenseSample:
    """Evaluate every chart on an ``m x m`` grid over ``[margin, 1 - margin]^2``.

    Normals come from the chart Jacobian; points with a degenerate Jacobian
    are dropped. Normals are flipped to agree with the patch center's input
    normal when one is known. Outputs are in world coordinates.
    """
    if grid_m < 2:
        raise ValueError("grid_m must be at least 2")
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must lie in [0, 0.5)")
    t = np.linspace(margin, 1.0 - margin, grid_m)
    uu, vv = np.meshgrid(t, t, indexing="xy")
    uv = np.column_stack([uu.ravel(), vv.ravel()])
    pts, nrm, uvs, ids, res = [], [], [], [], []
    for p in atlas.patches:
        y = mlp.forward(p.net, uv)
        n, ok = mlp.chart_normals(mlp.jacobian(p.net, uv))
        if p.center_normal is not None:
            flip = n @ p.center_normal < 0
            n[flip] *= -1.0
        rms = np.sqrt(p.fit_loss / max(p.n_fit, 1)) * atlas.transform.scale
        pts.append(y[ok])
        nrm.append(n[ok])
        uvs.append(uv[ok])
        ids.append(np.full(int(ok.sum()), p.id, dtype=np.int32))
        res.append(np.full(int(ok.sum()), rms))
    if not pts:
        empty = np.zeros((0, 3))
        return DenseSample(empty, empty.copy(), np.zeros((0, 2)), np.zeros(0, dtype=np.int32), np.zeros(0))
    return DenseSample(
        atlas.transform.invert(np.concatenate(pts)),
        np.concatenate(nrm),
        np.concatenate(uvs),
        np.concatenate(ids),
        np.concatenate(res),
    )


# -- pipeline ----------------------------------------------------------------------------------


@dataclass
class RunResult:
    atlas: Atlas
    dense: DenseSample
    build: PatchReport
    history: Optional[ConsistencyHistory]
    consistency_before: float
    consistency_after: float
    timings: dict


def reconstruct(cloud: PointCloud, config: AtlasConfig, grid_m: int = 16, margin: float = 0.0) -> RunResult:
    """Normalize, build and fit the atlas, run phase 2, resample."""
    timings = {}
    t0 = time.perf_counter()
    normed, transform = normalize(cloud)
    if normed.normals is None:
        normed = estimate_normals(normed, k=min(config.normals_k, len(normed)))
    patches, build = build_patches(
        normed, config.r, config.c, config.c_tilde, config.alpha_deg, config.seed, config.min_fit_points
    )
    if not patches:
        raise FitError("no patch survived construction")
    timings["build"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fit_all(patches, normed.points, config)
    timings["phase1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    overlaps = build_overlaps(patches)
    before = consistency_loss(patches, overlaps)
    history = None
    after = before
    if config.phase2_iters > 0:
        overlaps, history = fit_consistency(patches, overlaps, normed.points, config)
        after = history.consistency[-1]
    timings["phase2"] = time.perf_counter() - t0
    atlas = Atlas(patches, overlaps, transform, config)
    t0 = time.perf_counter()
    dense = resample(atlas, grid_m, margin)
    timings["resample"] = time.perf_counter() - t0
    return RunResult(atlas, dense, build, history, before, after, timings)


# -- persistence -------------------------------------------------------------------------------


def save_atlas(atlas: Atlas, directory) -> None:
    """Write ``manifest.json`` plus one CHARTNET1 file per chart."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = asdict(atlas.config)
    cfg["layers"] = list(cfg["layers"])
    manifest = {
        "version": MANIFEST_VERSION,
        "config": cfg,
        "transform": {"center": atlas.transform.center.tolist(), "scale": atlas.transform.scale},
        "patches": [],
        "overlaps": [
            {"p": a, "q": b, "src": src.tolist(), "dst": dst.tolist()}
            for (a, b), (src, dst) in sorted(atlas.overlaps.items())
        ],
    }
    for p in atlas.patches:
        chart = f"chart_{p.id:05d}.chartnet"
        mlp.save_chart(p.net, directory / chart)
        manifest["patches"].append(
            {
                "id": p.id,
                "chart": chart,
                "center_index": p.center_index,
                "center": p.center.tolist(),
                "center_normal": None if p.center_normal is None else p.center_normal.tolist(),
                "core": p.core.tolist(),
                "fit": p.fit.tolist(),
                "perm": p.perm.tolist(),
                "samples": p.samples.points.tolist(),
                "sample_radius": p.samples.radius,
                "fit_loss": p.fit_loss,
                "iterations": p.iterations,
            }
        )
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_atlas(directory) -> Atlas:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{directory}: unsupported manifest version {manifest.get('version')}")
    cfg = dict(manifest["config"])
    cfg["layers"] = tuple(cfg["layers"])
    config = AtlasConfig(**cfg)
    patches = []
    for rec in manifest["patches"]:
        cn = rec["center_normal"]
        samples = np.asarray(rec["samples"], dtype=np.float64).reshape(-1, 2)
        patches.append(
            Patch(
                id=rec["id"],
                center_index=rec["center_index"],
                center=np.asarray(rec["center"]),
                center_normal=None if cn is None else np.asarray(cn),
                core=np.asarray(rec["core"], dtype=np.int64),
                fit=np.asarray(rec["fit"], dtype=np.int64),
                samples=ParamSample(samples, rec["sample_radius"], samples.copy()),
                net=mlp.load_chart(directory / rec["chart"]),
                perm=np.asarray(rec["perm"], dtype=np.int64),
                fit_loss=rec["fit_loss"],
                iterations=rec["iterations"],
            )
        )
    overlaps = OverlapTable(
        {
            (o["p"], o["q"]): (np.asarray(o["src"], dtype=np.int64), np.asarray(o["dst"], dtype=np.int64))
            for o in manifest["overlaps"]
        }
    )
    t = manifest["transform"]
    return Atlas(patches, overlaps, NormalizationTransform(np.asarray(t["center"]), t["scale"]), config)
