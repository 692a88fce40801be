"""Cooperative localization across transmitter/receiver pairs.

Each link path yields a basic position fix (range ellipsoid intersected with
the angle-of-arrival ray). Fixes from different pairs are associated by
cutting a minimum spanning tree, outliers are isolated by a distance
threshold, and each cluster is refined by a path-loss weighted soft fusion
followed by a closed-form weighted least-squares velocity solve.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence, TextIO

import numpy as np
from scipy.optimize import minimize

from .geometry import Scenario, direction_vector_global
from .params import LinkMeasurement

FUSION_METHODS = ("proposed", "averaging", "single-pair")


@dataclass(frozen=True)
class FusionConfig:
    """Knobs of the fusion chain.

    ``varpi=None`` derives the pruning threshold from the data as
    ``max(varpi_floor, varpi_scale * median nearest-neighbour distance)``.
    """
    method: str = "proposed"
    varpi: float | None = None
    varpi_floor: float = 5.0
    varpi_scale: float = 3.0
    max_iters: int = 50
    grad_step: float = 1e-4
    step_tol: float = 1e-6
    velocity_cond: float = 1e-6

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ValueError(f"unknown fusion method {self.method!r}")


@dataclass(frozen=True, eq=False)
class BasicEstimate:
    pair_id: tuple[int, int]
    path: int
    position: np.ndarray
    d_t: float
    d_r: float
    range_m: float
    doppler_mps: float
    direction: np.ndarray       # unit, rBS -> target, from the measured AoA
    tbs_position: np.ndarray
    rbs_position: np.ndarray
    valid: bool = True
    vertex_id: int = -1
    subset: int = -1

    @property
    def alpha(self) -> float:
        return (self.d_t * self.d_r) ** -2


@dataclass(eq=False)
class AssociationGraph:
    vertices: list[BasicEstimate]
    weights: np.ndarray              # V x V, inf where no edge
    varpi: float
    pruned: set[int] = field(default_factory=set)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> list[tuple[float, int, int]]:
        i, j = np.nonzero(np.triu(np.isfinite(self.weights), 1))
        return [(float(self.weights[a, b]), int(a), int(b)) for a, b in zip(i, j)]


@dataclass(eq=False)
class FusedTarget:
    members: list[BasicEstimate]
    position: np.ndarray
    velocity: np.ndarray | None = None
    weights: np.ndarray | None = None
    fallback: bool = False
    diagnostic: str = ""


@dataclass(eq=False)
class FusionResult:
    targets: list[FusedTarget]
    outliers: list[BasicEstimate]
    complete: bool = True  # False when fewer than K clusters were formed


# -- vertex indexing -------------------------------------------------------

def encode_vertex(n_t: int, k: int, n_r: int, n_tx: int, n_paths: int) -> int:
    """Zero-based vertex id; pair subsets are laid out receiver-major."""
    return (n_r * n_tx + n_t) * n_paths + k


def decode_vertex(v: int, n_tx: int, n_paths: int) -> tuple[int, int, int]:
    block, k = divmod(v, n_paths)
    n_r, n_t = divmod(block, n_tx)
    return n_t, k, n_r


# -- basic localization ------------------------------------------------------

def basic_localize(range_m: float, elev: float, azim: float, tbs_position, rbs_position,
                   rbs_chi: float, *, doppler_mps: float = math.nan, pair_id=(0, 0),
                   path: int = 0, valid: bool = True) -> BasicEstimate:
    """Intersect the bistatic range ellipsoid with the AoA ray from the rBS."""
    pt = np.asarray(tbs_position, float)
    pr = np.asarray(rbs_position, float)
    delta = pt - pr
    base = float(np.linalg.norm(delta))
    u = direction_vector_global(elev, azim, rbs_chi) if np.isfinite([elev, azim]).all() \
        else np.full(3, np.nan)
    den = 2 * (range_m - float(delta @ u))
    ok = bool(valid) and np.isfinite(range_m) and range_m > base and np.isfinite(den) and den > 0
    if ok:
        d_r = (range_m ** 2 - base ** 2) / den
        p = pr + d_r * u
        d_t = float(np.linalg.norm(p - pt))
    else:
        d_r = d_t = math.nan
        p = np.full(3, np.nan)
    return BasicEstimate(tuple(pair_id), path, p, d_t, d_r, float(range_m), float(doppler_mps),
                         u, pt, pr, ok)


def basic_estimates(measurements: Sequence[LinkMeasurement], scenario: Scenario) -> list[BasicEstimate]:
    """Basic fixes for every path of every pair, with vertex ids assigned."""
    txs = sorted({m.pair_id[0] for m in measurements})
    rxs = sorted({m.pair_id[1] for m in measurements})
    K = max((m.n_paths for m in measurements), default=0)
    out = []
    for m in measurements:
        tbs = scenario.base_stations[m.pair_id[0]]
        rbs = scenario.base_stations[m.pair_id[1]]
        n_t, n_r = txs.index(m.pair_id[0]), rxs.index(m.pair_id[1])
        for k in range(m.n_paths):
            e = basic_localize(m.ranges[k], m.elev[k], m.azim[k], tbs.p, rbs.p,
                               rbs.orientation_chi, doppler_mps=m.dopplers[k],
                               pair_id=m.pair_id, path=k, valid=bool(m.valid[k]))
            out.append(replace(e, vertex_id=encode_vertex(n_t, k, n_r, len(txs), K),
                               subset=n_r * len(txs) + n_t))
    return out


# -- graph and association -----------------------------------------------------

def default_varpi(weights: np.ndarray, floor: float = 5.0, scale: float = 3.0) -> float:
    nn = np.min(weights, axis=1) if weights.size else np.zeros(0)
    nn = nn[np.isfinite(nn)]
    return max(floor, scale * float(np.median(nn))) if nn.size else floor


def build_graph(estimates: Sequence[BasicEstimate], varpi: float | None = None,
                floor: float = 5.0, scale: float = 3.0) -> AssociationGraph:
    """Cross-pair distance graph over valid estimates, with outlier pruning.

    A vertex whose nearest cross-pair neighbour is farther than ``varpi`` loses
    all its edges.
    """
    verts = sorted((e for e in estimates if e.valid), key=lambda e: e.vertex_id)
    if len({e.subset for e in verts}) < 2 and len(verts) > 1:
        # a single pair: nothing to associate, every vertex stands alone
        W = np.full((len(verts), len(verts)), np.inf)
        return AssociationGraph(verts, W, math.inf if varpi is None else varpi)
    P = np.array([e.position for e in verts]).reshape(-1, 3)
    sub = np.array([e.subset for e in verts])
    W = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    W[sub[:, None] == sub[None, :]] = np.inf
    if varpi is None:
        varpi = default_varpi(W, floor, scale)
    nearest = W.min(axis=1) if len(verts) else np.zeros(0)
    pruned = {int(i) for i in np.nonzero(nearest > varpi)[0]}
    for i in pruned:
        W[i, :] = np.inf
        W[:, i] = np.inf
    return AssociationGraph(verts, W, float(varpi), pruned)


def minimum_spanning_forest(graph: AssociationGraph) -> list[tuple[float, int, int]]:
    """Kruskal with union-find; ties broken by vertex indices."""
    parent = list(range(graph.n_vertices))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = []
    for w, i, j in sorted(graph.edges()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            tree.append((w, i, j))
    return tree


def _components(n: int, edges) -> list[list[int]]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values())


def associate(graph: AssociationGraph, K: int) -> tuple[list[list[int]], list[int], bool]:
    """Cut the spanning forest into clusters.

    Returns ``(clusters, outliers, complete)`` with vertex indices into
    ``graph.vertices``. The ``K - 1`` longest forest edges are removed;
    vertices left without edges by pruning are outliers. ``complete`` is
    False when fewer than ``K`` clusters result.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    tree = minimum_spanning_forest(graph)
    cut = sorted(tree, key=lambda e: (-e[0], e[1], e[2]))[:K - 1]
    kept = [e for e in tree if e not in cut]
    outliers = sorted(graph.pruned)
    clusters = [c for c in _components(graph.n_vertices, kept)
                if not (len(c) == 1 and c[0] in graph.pruned)]
    clusters = [_unique_subsets(c, graph, outliers) for c in clusters]
    return clusters, outliers, len(clusters) >= K


def _unique_subsets(cluster: list[int], graph: AssociationGraph, outliers: list[int]) -> list[int]:
    """Keep one member per pair subset, the one nearest the cluster median."""
    if len({graph.vertices[i].subset for i in cluster}) == len(cluster):
        return cluster
    med = np.median([graph.vertices[i].position for i in cluster], axis=0)
    best: dict[int, int] = {}
    for i in cluster:
        s = graph.vertices[i].subset
        d = np.linalg.norm(graph.vertices[i].position - med)
        if s not in best or d < np.linalg.norm(graph.vertices[best[s]].position - med):
            best[s] = i
    dropped = sorted(set(cluster) - set(best.values()))
    outliers.extend(dropped)
    return sorted(best.values())


# -- soft fusion -----------------------------------------------------------------

def fusion_loss(p: np.ndarray, members: Sequence[BasicEstimate], alpha: np.ndarray) -> float:
    """Weighted range-sum residuals plus weighted direction mismatches.

    Directions are unit vectors from the candidate position toward each rBS;
    ``beta = alpha * d_r``. Both terms are normalized by their weight sums.
    """
    p = np.asarray(p, float)
    beta = alpha * np.array([m.d_r for m in members])
    rng_res = 0.0
    dir_res = 0.0
    for m, a, b in zip(members, alpha, beta):
        to_r = m.rbs_position - p
        dr = np.linalg.norm(to_r)
        rng_res += a * abs(m.range_m - np.linalg.norm(m.tbs_position - p) - dr)
        dir_res += b * np.linalg.norm(-m.direction - to_r / dr)
    return float(rng_res / alpha.sum() + dir_res / beta.sum())


def _central_gradient(f, h: float):
    def g(x):
        out = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            out[i] = (f(x + e) - f(x - e)) / (2 * h)
        return out
    return g


def fuse_position(members: Sequence[BasicEstimate], cfg: FusionConfig = FusionConfig()):
    """Soft-fused position of one cluster, started from the member average.

    Returns ``(position, alpha_weights, fallback)``; ``fallback`` is True when
    the optimizer failed to lower the loss and the average was kept.
    """
    if not members:
        raise ValueError("empty cluster")
    p0 = np.mean([m.position for m in members], axis=0)
    alpha = np.array([m.alpha for m in members])
    alpha = alpha / alpha.sum()
    f = lambda x: fusion_loss(x, members, alpha)  # noqa: E731
    f0 = f(p0)
    if f0 == 0.0:
        return p0, alpha, False
    res = minimize(f, p0, method="BFGS", jac=_central_gradient(f, cfg.grad_step),
                   options=dict(maxiter=cfg.max_iters, gtol=0.0,
                                xrtol=cfg.step_tol / max(np.linalg.norm(p0), 1.0)))
    if not np.all(np.isfinite(res.x)) or res.fun > f0:
        return p0, alpha, True
    return np.asarray(res.x), alpha, False


def fuse_velocity(members: Sequence[BasicEstimate], position, cond_floor: float = 1e-6):
    """Closed-form weighted least-squares velocity at ``position``.

    Rows are the bistatic direction sums recomputed at ``position``; weights
    are the normalized inverse squared path-length products. Returns
    ``(velocity or None, diagnostic)``.
    """
    ms = [m for m in members if np.isfinite(m.doppler_mps)]
    if len(ms) < 3:
        return None, f"{len(ms)} Doppler rows, need 3"
    p = np.asarray(position, float)
    rows, alpha = [], []
    for m in ms:
        to_t, to_r = m.tbs_position - p, m.rbs_position - p
        dt, dr = np.linalg.norm(to_t), np.linalg.norm(to_r)
        rows.append(to_t / dt + to_r / dr)
        alpha.append((dt * dr) ** -2)
    R = np.array(rows)
    w = np.array(alpha) / np.sum(alpha)
    v_hat = np.array([m.doppler_mps for m in ms])
    return solve_wls(R, w, v_hat, cond_floor)


def solve_wls(R: np.ndarray, w: np.ndarray, v_hat: np.ndarray, cond_floor: float = 1e-6):
    """``(R^T W R)^{-1} R^T W v_hat`` with a conditioning check on ``sqrt(W) R``."""
    sw = np.sqrt(w)[:, None]
    s = np.linalg.svd(sw * R, compute_uv=False)
    if s.size < 3 or s[-1] <= cond_floor * s[0]:
        return None, "rank-deficient geometry"
    RtW = R.T * w
    return np.linalg.solve(RtW @ R, RtW @ v_hat), ""


# -- full chain ------------------------------------------------------------------------

def cooperative_fusion(measurements: Sequence[LinkMeasurement], scenario: Scenario, K: int,
                       cfg: FusionConfig = FusionConfig()) -> FusionResult:
    """Positions and velocities of up to ``K`` targets from all pairs' measurements."""
    if not measurements:
        raise ValueError("no measurements")
    est = basic_estimates(measurements, scenario)
    if cfg.method == "single-pair":
        return _single_pair(est, measurements[0].pair_id, K)
    graph = build_graph(est, cfg.varpi, cfg.varpi_floor, cfg.varpi_scale)
    clusters, outlier_idx, complete = associate(graph, K)
    # keep the K best-supported clusters, the rest count as outliers
    clusters.sort(key=lambda c: (-len(c), c[0]))
    for c in clusters[K:]:
        outlier_idx.extend(c)
    targets = []
    for c in sorted(clusters[:K]):
        members = [graph.vertices[i] for i in c]
        if cfg.method == "averaging":
            pos = np.mean([m.position for m in members], axis=0)
            alpha = np.array([m.alpha for m in members])
            w, fb = alpha / alpha.sum(), False
        else:
            pos, w, fb = fuse_position(members, cfg)
        vel, diag = fuse_velocity(members, pos, cfg.velocity_cond)
        targets.append(FusedTarget(members, pos, vel, w, fb, diag))
    outliers = [graph.vertices[i] for i in sorted(set(outlier_idx))]
    outliers += [e for e in est if not e.valid]
    return FusionResult(targets, outliers, complete)


def _single_pair(est: list[BasicEstimate], pair_id, K: int) -> FusionResult:
    mine = [e for e in est if e.pair_id == tuple(pair_id)]
    good = [e for e in mine if e.valid][:K]
    targets = [FusedTarget([e], e.position.copy(), None, np.ones(1), False, "single pair")
               for e in good]
    return FusionResult(targets, [e for e in mine if not e.valid], len(good) >= K)


# -- CSV ----------------------------------------------------------------------------

FUSED_FIELDS = ("cluster", "x", "y", "z", "vx", "vy", "vz", "members", "outliers")


def write_fused_csv(result: FusionResult, fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FUSED_FIELDS)
    for i, t in enumerate(result.targets):
        vel = [f"{x:.12g}" for x in t.velocity] if t.velocity is not None else ["", "", ""]
        w.writerow([i, *(f"{x:.12g}" for x in t.position), *vel, len(t.members),
                    len(result.outliers)])


def read_fused_csv(fh: TextIO) -> list[dict]:
    rows = []
    for r in csv.DictReader(fh):
        vel = [r["vx"], r["vy"], r["vz"]]
        rows.append(dict(cluster=int(r["cluster"]),
                         position=np.array([float(r[k]) for k in "xyz"]),
                         velocity=None if "" in vel else np.array([float(v) for v in vel]),
                         members=int(r["members"]), outliers=int(r["outliers"])))
    return rows

