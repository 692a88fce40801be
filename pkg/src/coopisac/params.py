"""Physical link parameters from recovered CP factors.

Turns a :class:`~coopisac.tensor.FactorEstimate` into bistatic ranges,
bistatic Doppler velocities and 2-D angles of arrival, after calibrating the
timing and frequency offsets of the pair on its line-of-sight path.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import C0, KMH, ArrayConfig, WaveformConfig, ula_response
from .tensor import FactorEstimate, als_recover, estimate_factors
from .waveform import Beamformer, doppler_vector, split_rf_chains


class BoundaryOptimumWarning(RuntimeWarning):
    """A 1-D search peaked on the edge of its grid."""


@dataclass(frozen=True)
class LinkConfig:
    """Search grids and physical validity caps for one link.

    ``cfo_max_hz=None`` means one percent of the subcarrier spacing.
    """
    doppler_points: int = 2048
    angle_points: int = 512
    v_max_mps: float = 60 * KMH
    cfo_max_hz: float | None = None
    range_cap_m: float = 5000.0
    velocity_cap_mps: float = 40.0
    estimator: str = "proposed"
    als_max_iters: int = 500
    als_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.doppler_points < 3 or self.angle_points < 3:
            raise ValueError("search grids need at least 3 points")
        if self.estimator not in ("proposed", "als"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass(frozen=True, eq=False)
class KroneckerCombinerFactors:
    q_v: np.ndarray  # N_v x J_v
    q_h: np.ndarray  # N_h x J_h
    residual: float = 0.0  # relative Frobenius error of q_v kron q_h

    @property
    def j_v(self) -> int:
        return self.q_v.shape[1]

    @property
    def j_h(self) -> int:
        return self.q_h.shape[1]


@dataclass(frozen=True, eq=False)
class LinkMeasurement:
    """Per-pair estimates for the scattered paths (LoS removed).

    Arrays are indexed by path ``k = 0..K-1`` in factor-column order.
    """
    pair_id: tuple[int, int]
    ranges: np.ndarray
    dopplers: np.ndarray     # bistatic Doppler velocity, m/s
    elev: np.ndarray         # rad
    azim: np.ndarray         # rad
    valid: np.ndarray        # bool
    sto_s: float = 0.0
    cfo_hz: float = 0.0
    k_los: int = 0
    columns: np.ndarray = field(default_factory=lambda: np.zeros(0, int))  # factor column per path

    @property
    def n_paths(self) -> int:
        return int(self.ranges.size)

    def rows(self) -> list[dict]:
        return [dict(tbs=self.pair_id[0], rbs=self.pair_id[1], path=k,
                     range_m=float(self.ranges[k]), doppler_mps=float(self.dopplers[k]),
                     elev_deg=math.degrees(self.elev[k]), azim_deg=math.degrees(self.azim[k]),
                     valid=int(bool(self.valid[k])))
                for k in range(self.n_paths)]


# -- delay ---------------------------------------------------------------

def relative_delays(generators, wf: WaveformConfig) -> np.ndarray:
    """Offset-inclusive delays in ``[0, 1/scs)`` from unit-modulus generators."""
    ang = np.mod(-np.angle(np.asarray(generators)), 2 * np.pi)
    return ang / (2 * np.pi * wf.scs_hz)


def identify_los(generators, los_distance_m: float, wf: WaveformConfig) -> tuple[int, float]:
    """Index of the earliest path and the timing offset it implies."""
    dt = relative_delays(generators, wf)
    if dt.size == 0:
        raise ValueError("no paths")
    k = int(np.argmin(dt))
    return k, float(dt[k] - los_distance_m / C0)


def extract_ranges(generators, k_los: int, sto_s: float, wf: WaveformConfig,
                   los_distance_m: float, range_cap_m: float = math.inf):
    """Bistatic ranges of the non-LoS paths plus a validity mask.

    A range not exceeding the direct distance or beyond ``range_cap_m`` is
    flagged. A timing offset longer than the cyclic prefix means a wrapped
    delay was taken for the LoS path, so every range is flagged then.
    """
    dt = relative_delays(generators, wf)
    keep = np.arange(dt.size) != k_los
    d = (dt[keep] - sto_s) * C0
    ok = (d > los_distance_m) & (d <= range_cap_m)
    if abs(sto_s) > wf.symbol_period_s - 1 / wf.scs_hz:
        ok[:] = False
    return d, ok


# -- 1-D search ------------------------------------------------------------

def _quadratic_peak(y0: float, y1: float, y2: float) -> float:
    den = y0 - 2 * y1 + y2
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (y0 - y2) / den, -0.5, 0.5))


def grid_search(objective: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                n: int, zoom: int = 2) -> tuple[float, bool]:
    """Maximize a vectorized objective on ``[lo, hi]``.

    Uses ``n`` grid points, then quadratic interpolation of the peak. Each of
    the ``zoom`` extra passes repeats this on a finer grid around the peak.
    Returns ``(x, on_boundary)``.
    """
    x = np.linspace(lo, hi, n)
    y = objective(x)
    i = int(np.argmax(y))
    if i == 0 or i == n - 1:
        return float(x[i]), True
    step = x[1] - x[0]
    for _ in range(zoom):
        x = np.linspace(x[i] - step, x[i] + step, 9)
        y = objective(x)
        i = int(np.clip(np.argmax(y), 1, 7))
        step = x[1] - x[0]
    return float(x[i] + _quadratic_peak(y[i - 1], y[i], y[i + 1]) * step), False


# -- Doppler ---------------------------------------------------------------

def doppler_span_hz(wf: WaveformConfig, cfg: LinkConfig) -> float:
    cfo_max = 0.01 * wf.scs_hz if cfg.cfo_max_hz is None else cfg.cfo_max_hz
    return 2 * cfg.v_max_mps / wf.wavelength + 2 * abs(cfo_max)


def doppler_objective(b_hat: np.ndarray, wf: WaveformConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Normalized correlation of ``b_hat`` against Doppler vectors, scale invariant."""
    b = np.asarray(b_hat).ravel()
    nb = np.linalg.norm(b) ** 2 * b.size

    def f(freqs):
        g = doppler_vector(b.size, wf.symbol_period_s, np.asarray(freqs, float))
        return np.abs(b.conj() @ g) ** 2 / nb
    return f


def extract_dopplers(b_hat: np.ndarray, k_los: int, wf: WaveformConfig,
                     cfg: LinkConfig = LinkConfig()):
    """Bistatic Doppler velocities (m/s) of non-LoS paths and the CFO estimate (Hz)."""
    span = doppler_span_hz(wf, cfg)
    shifts = np.empty(b_hat.shape[1])
    for k in range(b_hat.shape[1]):
        shifts[k], edge = grid_search(doppler_objective(b_hat[:, k], wf), -span, span,
                                      cfg.doppler_points)
        if edge:
            warnings.warn(f"Doppler peak of path {k} on the search boundary",
                          BoundaryOptimumWarning, stacklevel=2)
    cfo = float(shifts[k_los])
    keep = np.arange(shifts.size) != k_los
    return (shifts[keep] - cfo) * wf.wavelength, cfo


# -- angle of arrival ----------------------------------------------------------

def rearrange(q: np.ndarray, n_v: int, n_h: int, j_v: int, j_h: int) -> np.ndarray:
    """Block rearrangement mapping ``Q_v kron Q_h`` to ``vec(Q_v) vec(Q_h)^T``."""
    return (np.asarray(q).reshape(n_v, n_h, j_v, j_h).transpose(0, 2, 1, 3)
            .reshape(n_v * j_v, n_h * j_h))


def kronecker_split_combiner(q: np.ndarray, n_v: int, n_h: int, j_v: int,
                             j_h: int) -> KroneckerCombinerFactors:
    """Nearest Kronecker product ``Q ~ Q_v kron Q_h`` by a rank-one SVD."""
    L, R = q.shape
    if j_v * j_h != R or n_v * n_h != L:
        raise ValueError(f"shape {q.shape} does not match {n_v}x{n_h} elements, {j_v}x{j_h} chains")
    U, s, Vh = np.linalg.svd(rearrange(q, n_v, n_h, j_v, j_h), full_matrices=False)
    root = math.sqrt(s[0])
    qv = (root * U[:, 0]).reshape(n_v, j_v)
    qh = (root * Vh[0]).reshape(n_h, j_h)
    res = float(np.linalg.norm(q - np.kron(qv, qh)) / max(np.linalg.norm(q), 1e-300))
    return KroneckerCombinerFactors(qv, qh, res)


def combiner_factors(bf: Beamformer, array: ArrayConfig) -> KroneckerCombinerFactors:
    jv, jh = split_rf_chains(bf.n_rf, array.n_v, array.n_h)
    return kronecker_split_combiner(bf.combined, array.n_v, array.n_h, jv, jh)


def _beam_objective(target: np.ndarray, q: np.ndarray, spacing: float):
    t = np.asarray(target).ravel()
    nt = np.linalg.norm(t) ** 2

    def f(u):
        g = q.conj().T @ ula_response(q.shape[0], spacing, np.asarray(u, float))
        return np.abs(t.conj() @ g) ** 2 / (nt * np.sum(np.abs(g) ** 2, axis=0))
    return f


def extract_aoas(a_hat: np.ndarray, factors: KroneckerCombinerFactors,
                 spacing_over_lambda: float = 0.5, points: int = 512):
    """Elevation and azimuth (rad) per column of ``a_hat`` plus a validity mask.

    Each column is folded into a ``J_v x J_h`` matrix whose rank-one part
    separates the vertical and horizontal beamspace responses. The vertical
    direction cosine is searched first, then the horizontal one within the
    range allowed by the elevation.
    """
    a_hat = np.asarray(a_hat)
    P = a_hat.shape[1]
    elev, azim = np.empty(P), np.empty(P)
    valid = np.ones(P, bool)
    for k in range(P):
        U, s, Vh = np.linalg.svd(a_hat[:, k].reshape(factors.j_v, factors.j_h))
        o, w = s[0] * U[:, 0], Vh[0]
        big_phi, _ = grid_search(_beam_objective(o, factors.q_v, spacing_over_lambda),
                                 -1.0, 1.0, points)
        theta = math.acos(min(1.0, max(-1.0, big_phi)))
        st = math.sin(theta)
        elev[k] = theta
        if st < 1e-6:
            azim[k], valid[k] = math.nan, False
            continue
        big_theta, _ = grid_search(_beam_objective(w, factors.q_h, spacing_over_lambda),
                                   -st, st, points)
        ratio = big_theta / st
        if abs(ratio) > 1:
            ratio, valid[k] = math.copysign(1.0, ratio), False
        azim[k] = math.acos(ratio)
    return elev, azim, valid


# -- full link ---------------------------------------------------------------

def estimate_link_parameters(tensor, K: int, los_distance_m: float,
                             factors: KroneckerCombinerFactors, wf: WaveformConfig,
                             cfg: LinkConfig = LinkConfig(), pair_id=(0, 0),
                             spacing_over_lambda: float = 0.5) -> LinkMeasurement:
    """Ranges, Doppler velocities and angles of the ``K`` scattered paths of one link.

    Columns stay aligned across quantities because every quantity is read
    from the same factor column.
    """
    data = np.asarray(getattr(tensor, "data", tensor))
    if cfg.estimator == "als":
        est = als_recover(data, K, cfg.als_max_iters, cfg.als_tol, cfg.seed)
    else:
        est = estimate_factors(data, K)
    return measurements_from_factors(est, los_distance_m, factors, wf, cfg,
                                     tuple(getattr(tensor, "pair_id", pair_id)), spacing_over_lambda)


def measurements_from_factors(est: FactorEstimate, los_distance_m: float,
                              factors: KroneckerCombinerFactors, wf: WaveformConfig,
                              cfg: LinkConfig = LinkConfig(), pair_id=(0, 0),
                              spacing_over_lambda: float = 0.5) -> LinkMeasurement:
    k_los, sto = identify_los(est.generators, los_distance_m, wf)
    ranges, ok_r = extract_ranges(est.generators, k_los, sto, wf, los_distance_m, cfg.range_cap_m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryOptimumWarning)
        vel, cfo = extract_dopplers(est.b_hat, k_los, wf, cfg)
    cols = np.array([k for k in range(est.n_paths) if k != k_los], dtype=int)
    elev, azim, ok_a = extract_aoas(est.a_hat[:, cols], factors, spacing_over_lambda,
                                    cfg.angle_points)
    valid = ok_r & ok_a & (np.abs(vel) <= cfg.velocity_cap_mps) & np.isfinite(ranges)
    return LinkMeasurement(tuple(pair_id), ranges, vel, elev, azim, valid, sto, cfo, k_los, cols)


# -- CSV ---------------------------------------------------------------------

CSV_FIELDS = ("tbs", "rbs", "path", "range_m", "doppler_mps", "elev_deg", "azim_deg", "valid")


def write_measurements_csv(measurements: Iterable[LinkMeasurement], fh: TextIO) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for m in measurements:
        for row in m.rows():
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})


def read_measurements_csv(fh: TextIO) -> list[LinkMeasurement]:
    """Inverse of :func:`write_measurements_csv`; pairs keep first-seen order."""
    groups: dict[tuple[int, int], list[dict]] = {}
    reader = csv.DictReader(fh)
    missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"measurement CSV lacks columns {sorted(missing)}")
    for row in reader:
        groups.setdefault((int(row["tbs"]), int(row["rbs"])), []).append(row)
    out = []
    for pair, rows in groups.items():
        rows.sort(key=lambda r: int(r["path"]))
        col = lambda key: np.array([float(r[key]) for r in rows])  # noqa: E731
        out.append(LinkMeasurement(pair, col("range_m"), col("doppler_mps"),
                                   np.deg2rad(col("elev_deg")), np.deg2rad(col("azim_deg")),
                                   np.array([r["valid"].strip() in ("1", "True", "true") for r in rows]),
                                   columns=np.arange(len(rows))))
    return out


def match_paths(measured_ranges: Sequence[float], true_ranges: Sequence[float]) -> np.ndarray:
    """Assignment of measured paths to true paths minimizing total squared range error.

    Returns ``perm`` with ``measured[perm[j]]`` matched to ``true[j]``.
    """
    cost = (np.asarray(measured_ranges)[:, None] - np.asarray(true_ranges)[None, :]) ** 2
    rows, cols = linear_sum_assignment(np.nan_to_num(cost, nan=1e30).T)
    perm = np.empty(len(true_ranges), int)
    perm[rows] = cols
    return perm
