"""Monte Carlo experiments: scene generation, link estimation, fusion and RMSE."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fusion import FusionConfig, cooperative_fusion
from .geometry import Scenario, scenario_from_dict, select_pairs
from .params import LinkConfig, LinkMeasurement, combiner_factors, estimate_link_parameters, match_paths
from .tensor import als_recover, estimate_factors
from .waveform import NoiseConfig, design_region_beamformer, simulate_received_tensor

log = logging.getLogger(__name__)

SWEEPS = ("none", "tx_power_dbm", "n_rx", "k_targets")
METRICS = ("range_m", "doppler_mps", "elev_deg", "azim_deg", "position_m", "velocity_mps")


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep of Monte Carlo trials.

    ``scenario`` holds overrides in the scenario config format (see
    :func:`coopisac.geometry.scenario_from_dict`); the sweep value replaces
    the matching scalar field for each point.
    """
    sweep: str = "tx_power_dbm"
    values: tuple = (35.0, 45.0, 55.0)
    trials: int = 50
    seed: int = 0
    estimator: str = "proposed"
    fusion: str = "proposed"
    k_targets: int = 3
    n_tx: int = 2
    n_rx: int = 3
    tx_power_dbm: float = 55.0
    n_subcarriers: int = 96
    trim: float = 0.05
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)
    scenario: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.sweep not in SWEEPS:
            raise ValueError(f"unknown sweep {self.sweep!r}; choose from {SWEEPS}")
        if len(self.values) == 0:
            raise ValueError("sweep values must be non-empty")
        if self.estimator not in ("proposed", "als"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        FusionConfig(method=self.fusion)
        if not 0 <= self.trim < 1:
            raise ValueError("trim must lie in [0, 1)")

    def at(self, value) -> "ExperimentConfig":
        """Configuration with the sweep variable fixed to ``value``."""
        if self.sweep == "none":
            return self
        cast = float if self.sweep == "tx_power_dbm" else int
        return replace(self, **{self.sweep: cast(value)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["values"] = list(self.values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sub = {"noise": NoiseConfig, "link": LinkConfig, "fusion_cfg": FusionConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "values" in d:
            d["values"] = tuple(d["values"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrialOutcome:
    errors: dict[str, np.ndarray]   # metric -> absolute errors of this trial
    link_failures: int = 0
    n_velocity: int = 0


@dataclass
class RmseReport:
    sweep: str
    values: list
    rmse: dict[str, list]          # metric -> value per sweep point (None if absent)
    trials: int
    trim: float
    link_failures: list[int] = field(default_factory=list)
    stderr: dict[str, list] = field(default_factory=dict)  # Monte Carlo standard errors

    def rows(self) -> list[dict]:
        out = []
        for i, v in enumerate(self.values):
            row = {"sweep": self.sweep, "value": v, "trials": self.trials,
                   "link_failures": self.link_failures[i] if self.link_failures else 0}
            row.update({f"rmse_{m}": self.rmse[m][i] for m in METRICS})
            out.append(row)
        return out


# -- metric ----------------------------------------------------------------------

def _retained_mse(errors, trim_fraction: float) -> list[float]:
    mse = sorted(float(np.mean(np.square(e))) for e in errors if np.size(e))
    keep = math.ceil(len(mse) * (1 - trim_fraction) - 1e-9)
    return mse[:max(keep, 0)]


def compute_rmse(errors: Sequence[Sequence[float]], trim_fraction: float = 0.0) -> float | None:
    """Trimmed RMSE over trials.

    ``errors[t]`` holds the error magnitudes of trial ``t``. Each trial is
    reduced to its mean squared error, the worst ``trim_fraction`` of trials
    is dropped and the root of the mean of the rest is returned. ``None`` when
    nothing is left.
    """
    kept = _retained_mse(errors, trim_fraction)
    return math.sqrt(float(np.mean(kept))) if kept else None


def rmse_standard_error(errors: Sequence[Sequence[float]], trim_fraction: float = 0.0) -> float | None:
    """Delta-method Monte Carlo standard error of :func:`compute_rmse`."""
    kept = _retained_mse(errors, trim_fraction)
    if len(kept) < 2:
        return None
    rmse = math.sqrt(float(np.mean(kept)))
    se_mse = float(np.std(kept, ddof=1)) / math.sqrt(len(kept))
    return se_mse / (2 * rmse) if rmse > 0 else 0.0


def prior_mean(scenario: Scenario) -> np.ndarray:
    """Centre of the target sampling volume; stands in for missed targets."""
    return np.array([0.0, 0.0, float(np.mean(scenario.bounds.height_range))])


# -- one trial ----------------------------------------------------------------------

def trial_scene(cfg: ExperimentConfig, trial: int) -> tuple[Scenario, list[tuple[int, int]]]:
    """Scene and (tBS, rBS) pairs of one trial, drawn from the (seed, trial) stream."""
    seq = np.random.SeedSequence([cfg.seed, trial])
    scene_seed, pick_seed = (int(s) for s in seq.generate_state(2))
    sc = scenario_from_dict(cfg.scenario, seed=scene_seed, k_targets=cfg.k_targets)
    sc = sc.with_waveform(n_subcarriers=cfg.n_subcarriers, tx_power_dbm=cfg.tx_power_dbm)
    order = np.random.default_rng(pick_seed).permutation(len(sc.base_stations))
    if cfg.n_tx + cfg.n_rx > order.size:
        raise ValueError("not enough base stations for the requested pairs")
    tx, rx = order[:cfg.n_tx], order[cfg.n_tx:cfg.n_tx + cfg.n_rx]
    return sc, select_pairs([int(t) for t in tx], [int(r) for r in rx])


def estimate_links(sc: Scenario, pairs, cfg: ExperimentConfig, trial: int):
    """Simulate and estimate every pair; returns measurements, truths and failure count."""
    bf = design_region_beamformer(sc.array, *sc.beam_region)
    factors = combiner_factors(bf, sc.array)
    link = replace(cfg.link, estimator=cfg.estimator)
    K = sc.k_targets
    out, truths, failures = [], [], 0
    for t, r in pairs:
        seed = int(np.random.SeedSequence([cfg.seed, trial, t, r]).generate_state(1)[0])
        T = simulate_received_tensor(sc, (t, r), (bf, bf), cfg.noise, seed)
        d_los = float(np.linalg.norm(sc.base_stations[t].p - sc.base_stations[r].p))
        try:
            m = estimate_link_parameters(T, K, d_los, factors, sc.waveform, link, (t, r),
                                         sc.array.spacing_over_lambda)
        except np.linalg.LinAlgError as exc:
            log.info("trial %d pair %s failed: %s", trial, (t, r), exc)
            failures += 1
            nan = np.full(K, np.nan)
            m = LinkMeasurement((t, r), nan, nan, nan, nan, np.zeros(K, bool))
        out.append(m)
        truths.append([p for p in T.paths if not p.is_los])
    return out, truths, failures


def link_errors(ms, truths) -> dict[str, np.ndarray]:
    """Absolute per-path errors of all links, matched to truth by range."""
    err = {k: [] for k in METRICS[:4]}
    for m, tr in zip(ms, truths):
        perm = match_paths(np.nan_to_num(m.ranges, nan=1e9), [p.bistatic_range for p in tr])
        for j, p in enumerate(tr):
            i = perm[j]
            err["range_m"].append(m.ranges[i] - p.bistatic_range)
            err["doppler_mps"].append(m.dopplers[i] - p.doppler_velocity)
            err["elev_deg"].append(math.degrees(m.elev[i] - p.aoa_elev))
            err["azim_deg"].append(math.degrees(m.azim[i] - abs(p.aoa_azim)))
    # failed links carry no estimate; they are counted in link_failures instead
    out = {k: np.abs(np.array(v, float)) for k, v in err.items()}
    return {k: v[np.isfinite(v)] for k, v in out.items()}


def target_errors(fused, sc: Scenario) -> tuple[np.ndarray, np.ndarray, int]:
    """Position and velocity errors under optimal truth assignment.

    Missed targets are scored as if estimated at the prior mean with zero
    velocity. Returns ``(position_errors, velocity_errors, n_velocity)``.
    """
    truth_p = np.array([t.p for t in sc.targets])
    truth_v = np.array([t.v for t in sc.targets])
    est_p = [t.position for t in fused.targets]
    est_v = [t.velocity for t in fused.targets]
    while len(est_p) < len(truth_p):
        est_p.append(prior_mean(sc))
        est_v.append(None)
    P = np.array(est_p)
    cost = np.sum((P[:, None, :] - truth_p[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    vel = [np.linalg.norm((est_v[i] if est_v[i] is not None else 0.0) - truth_v[j])
           for i, j in zip(rows, cols)]
    return np.sqrt(cost[rows, cols]), np.array(vel), sum(est_v[i] is not None for i in rows)


def run_trial(cfg: ExperimentConfig, trial: int, methods: Sequence[str] | None = None):
    """One scene end to end.

    Returns a :class:`TrialOutcome`, or a dict of them keyed by fusion method
    when ``methods`` is given (links are then estimated once and shared).
    """
    sc, pairs = trial_scene(cfg, trial)
    ms, truths, failures = estimate_links(sc, pairs, cfg, trial)
    lerr = link_errors(ms, truths)
    out = {}
    for method in methods or [cfg.fusion]:
        fused = cooperative_fusion(ms, sc, sc.k_targets, replace(cfg.fusion_cfg, method=method))
        pos, vel, n_vel = target_errors(fused, sc)
        out[method] = TrialOutcome({**lerr, "position_m": pos, "velocity_mps": vel}, failures, n_vel)
    return out if methods else out[cfg.fusion]


def _run_point(args):
    cfg, trial, methods = args
    return run_trial(cfg, trial, methods)


def run_experiment(cfg: ExperimentConfig, methods: Sequence[str] | None = None):
    """All sweep points; trial ``t`` sees the same scene at every point.

    With ``methods`` a dict of reports keyed by fusion method is returned.
    """
    keys = list(methods) if methods else [cfg.fusion]
    rmse = {k: {m: [] for m in METRICS} for k in keys}
    se = {k: {m: [] for m in METRICS} for k in keys}
    fails = []
    for value in cfg.values:
        point = cfg.at(value)
        jobs = [(point, t, keys) for t in range(cfg.trials)]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                outcomes = list(pool.map(_run_point, jobs))
        else:
            outcomes = [_run_point(j) for j in jobs]
        for k in keys:
            for m in METRICS:
                val = compute_rmse([o[k].errors[m] for o in outcomes], cfg.trim)
                if m == "velocity_mps" and not any(o[k].n_velocity for o in outcomes):
                    val = None
                rmse[k][m].append(val)
                se[k][m].append(rmse_standard_error([o[k].errors[m] for o in outcomes], cfg.trim))
        fails.append(sum(o[keys[0]].link_failures for o in outcomes))
        log.info("%s=%s done", cfg.sweep, value)
    reports = {k: RmseReport(cfg.sweep, list(cfg.values), rmse[k], cfg.trials, cfg.trim, fails, se[k])
               for k in keys}
    return reports if methods else reports[cfg.fusion]


# -- outputs ------------------------------------------------------------------------

CSV_COLUMNS = ("sweep", "value", "trials", "link_failures") + tuple(f"rmse_{m}" for m in METRICS)


def prepare_out_dir(out_dir: str | Path, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_rmse_csv(report: RmseReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in report.rows():
            w.writerow({k: ("" if v is None else (f"{v:.9g}" if isinstance(v, float) else v))
                        for k, v in row.items()})


def plot_report(report: RmseReport, out_dir: Path) -> list[Path]:
    """One log-scale SVG per metric; output bytes are deterministic."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "coopisac", "svg.fonttype": "none"}):
        for m in METRICS:
            pts = [(v, y) for v, y in zip(report.values, report.rmse[m]) if y is not None and y > 0]
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            if pts:
                ax.plot(*zip(*pts), marker="o")
                ax.set_yscale("log")
            ax.set_xlabel(report.sweep)
            ax.set_ylabel(f"RMSE {m}")
            ax.grid(True, which="both", alpha=0.3)
            fig.tight_layout()
            p = out_dir / f"rmse_{m}.svg"
            fig.savefig(p, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(p)
    return paths


def emit_outputs(report: RmseReport, cfg: ExperimentConfig, out_dir: str | Path,
                 force: bool = False) -> list[Path]:
    """Write ``rmse.csv``, ``config.json`` and the SVG plots into ``out_dir``."""
    out = prepare_out_dir(out_dir, force)
    write_rmse_csv(report, out / "rmse.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return [out / "rmse.csv", out / "config.json", *plot_report(report, out)]


# -- runtime comparison -------------------------------------------------------------

def bench(ks: Sequence[int] = range(1, 7), reps: int = 3, seed: int = 0,
          n_subcarriers: int = 96, noise: NoiseConfig | None = None) -> list[dict]:
    """CPU time of closed-form recovery vs ALS on one pair's tensor for each K.

    The pair is the two diametrically opposite base stations on the x axis.
    Each timing is the minimum over ``reps`` runs.
    """
    noise = noise or NoiseConfig()
    rows = []
    for K in ks:
        sc = scenario_from_dict({}, seed=seed + K, k_targets=K).with_waveform(n_subcarriers=n_subcarriers)
        n = len(sc.base_stations)
        pair = (n // 2, 0)
        bf = design_region_beamformer(sc.array, *sc.beam_region)
        Y = simulate_received_tensor(sc, pair, (bf, bf), noise, seed).data
        t_prop = t_als = math.inf
        est = None
        for _ in range(reps):
            t0 = time.process_time()
            estimate_factors(Y, K)
            t_prop = min(t_prop, time.process_time() - t0)
            t0 = time.process_time()
            est = als_recover(Y, K, seed=seed)
            t_als = min(t_als, time.process_time() - t0)
        rows.append(dict(k=K, proposed_s=t_prop, als_s=t_als, als_iters=est.n_iters,
                         als_converged=int(est.converged)))
    return rows


def write_bench_csv(rows: list[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=("k", "proposed_s", "als_s", "als_iters", "als_converged"),
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
