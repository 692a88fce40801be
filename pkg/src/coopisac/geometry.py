"""Scene description and ground-truth propagation parameters.

Frames
------
Global coordinates are right-handed with z up. Each base station carries a
uniform planar array whose local frame has the horizontal element axis along
local x, the vertical element axis along local z and the array normal along
local +y. Local and global coordinates are related by ``g = T(chi) @ l`` with

    T(chi) = [[ cos chi, sin chi, 0],
              [-sin chi, cos chi, 0],
              [       0,       0, 1]]

A direction with elevation ``theta`` (measured from local z) and azimuth
``phi`` (measured from local x) maps to ``[sin t cos p, sin t sin p, cos t]``
in the local frame, so broadside is ``theta = phi = pi/2``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

C0 = 299_792_458.0
KMH = 1.0 / 3.6

Vec3 = tuple[float, float, float]


def _vec3(x) -> Vec3:
    a = np.asarray(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite 3-vector: {x!r}")
    return (float(a[0]), float(a[1]), float(a[2]))


def wrap_angle(x: float) -> float:
    """Wrap to [-pi, pi)."""
    return (x + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class ArrayConfig:
    n_h: int = 16
    n_v: int = 24
    spacing_over_lambda: float = 0.5
    n_rf: int = 64

    def __post_init__(self):
        if self.n_rf < 1 or self.n_h * self.n_v <= self.n_rf:
            raise ValueError(
                f"need n_h*n_v > n_rf >= 1, got {self.n_h}x{self.n_v}, n_rf={self.n_rf}")
        if not self.spacing_over_lambda > 0:
            raise ValueError("spacing_over_lambda must be positive")

    @property
    def n_elements(self) -> int:
        return self.n_h * self.n_v


@dataclass(frozen=True)
class WaveformConfig:
    carrier_hz: float = 4.9e9
    scs_hz: float = 30e3
    n_subcarriers: int = 96
    n_symbols: int = 7
    # 14 symbols per 0.5 ms slot, cyclic prefix included
    symbol_period_s: float = 0.5e-3 / 14
    tx_power_dbm: float = 55.0
    sto_s: float = 1e-8
    cfo_hz: float = 300.0

    def __post_init__(self):
        if self.n_subcarriers < 2 or self.n_symbols < 2:
            raise ValueError("need at least 2 subcarriers and 2 symbols")
        if not self.symbol_period_s > 1.0 / self.scs_hz:
            raise ValueError("symbol period must exceed 1/scs (cyclic prefix included)")

    @property
    def wavelength(self) -> float:
        return C0 / self.carrier_hz


@dataclass(frozen=True)
class BaseStation:
    position: Vec3
    orientation_chi: float = 0.0
    role: str = "transceiver"  # "transmit", "receive" or "transceiver"
    array: ArrayConfig = field(default_factory=ArrayConfig)

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        if not -math.pi <= self.orientation_chi < math.pi:
            raise ValueError(f"orientation_chi out of [-pi, pi): {self.orientation_chi}")
        if self.role not in ("transmit", "receive", "transceiver"):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def p(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def normal(self) -> np.ndarray:
        return rotation(self.orientation_chi) @ np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Target:
    position: Vec3
    velocity: Vec3 = (0.0, 0.0, 0.0)
    rcs: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "velocity", _vec3(self.velocity))
        if not self.rcs > 0:
            raise ValueError("rcs must be positive")

    @property
    def p(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def v(self) -> np.ndarray:
        return np.array(self.velocity)


@dataclass(frozen=True)
class PathTruth:
    """Ground-truth parameters of one propagation path of a tBS-rBS pair.

    ``gain`` is the path-loss amplitude for unit transmit power per subcarrier
    (real, zero phase); the simulator scales it and draws a random phase.
    """
    delay: float
    doppler_hz: float
    aoa_elev: float
    aoa_azim: float
    aod_elev: float
    aod_azim: float
    gain: complex
    is_los: bool
    bistatic_range: float
    doppler_velocity: float


@dataclass(frozen=True)
class SceneBounds:
    """Sampling bounds for randomly generated low-altitude scenes."""
    n_bs: int = 8
    bs_radius: float = 500.0
    bs_height: float = 30.0
    target_radius: float = 400.0
    height_range: tuple[float, float] = (50.0, 300.0)
    speed_range_kmh: tuple[float, float] = (5.0, 60.0)
    min_separation: float = 10.0
    rcs: float = 0.01
    max_attempts: int = 1000


@dataclass(frozen=True)
class Scenario:
    base_stations: tuple[BaseStation, ...]
    targets: tuple[Target, ...]
    array: ArrayConfig = field(default_factory=ArrayConfig)
    waveform: WaveformConfig = field(default_factory=WaveformConfig)
    # beamformed sensing region, degrees: (elevation range, azimuth range)
    beam_region: tuple[tuple[float, float], tuple[float, float]] = ((40.0, 90.0), (40.0, 140.0))
    bounds: SceneBounds = field(default_factory=SceneBounds)

    @property
    def k_targets(self) -> int:
        return len(self.targets)

    def with_waveform(self, **changes) -> "Scenario":
        return replace(self, waveform=replace(self.waveform, **changes))


class OvercrowdedSceneError(ValueError):
    """Raised when targets cannot be placed with the required separation."""


def rotation(chi: float) -> np.ndarray:
    c, s = math.cos(chi), math.sin(chi)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def chi_facing(position, point) -> float:
    """Orientation whose array normal points horizontally from ``position`` toward ``point``."""
    d = np.asarray(point, float) - np.asarray(position, float)
    # T(chi) @ e_y = (sin chi, cos chi, 0)
    return wrap_angle(math.atan2(d[0], d[1]))


def direction_vector_global(theta: float, phi: float, chi: float) -> np.ndarray:
    """Unit global direction for local elevation ``theta`` and azimuth ``phi``.

    Uses the physical spherical map with ``cos(theta)`` as third component.
    """
    st = math.sin(theta)
    local = np.array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)])
    u = rotation(chi) @ local
    return u / np.linalg.norm(u)


def local_angles(direction, chi: float) -> tuple[float, float]:
    """Inverse of :func:`direction_vector_global`: (theta, phi) in the array frame."""
    u = np.asarray(direction, float)
    u = rotation(chi).T @ (u / np.linalg.norm(u))
    theta = math.acos(min(1.0, max(-1.0, u[2])))
    phi = math.atan2(u[1], u[0])
    return theta, phi


def ula_response(n: int, spacing_over_lambda: float, u) -> np.ndarray:
    """Uniform linear array response(s) for direction cosine(s) ``u``.

    Returns shape ``(n,)`` for scalar ``u`` or ``(n, len(u))`` for arrays.
    """
    u = np.asarray(u, dtype=float)
    idx = np.arange(n).reshape((n,) + (1,) * u.ndim)
    return np.exp(2j * np.pi * spacing_over_lambda * idx * u)


def steering_vector_dc(array: ArrayConfig, big_phi, big_theta) -> np.ndarray:
    """Steering vector from vertical (``cos theta``) and horizontal
    (``sin theta cos phi``) direction cosines; element ``n_v*N_h + n_h``."""
    av = ula_response(array.n_v, array.spacing_over_lambda, big_phi)
    ah = ula_response(array.n_h, array.spacing_over_lambda, big_theta)
    if av.ndim == 1:
        return np.kron(av, ah)
    # column-wise Kronecker for vectorized input
    return (av[:, None, :] * ah[None, :, :]).reshape(array.n_elements, -1)


def steering_vector(array: ArrayConfig, theta: float, phi: float) -> np.ndarray:
    if not (0.0 <= theta <= math.pi and 0.0 <= phi <= math.pi):
        raise ValueError(f"angles out of range: theta={theta}, phi={phi}")
    return steering_vector_dc(array, math.cos(theta), math.sin(theta) * math.cos(phi))


def path_loss_scattered_db(carrier_hz: float, d_t: float, d_r: float, rcs: float) -> float:
    """Bistatic radar path loss; frequency in MHz and distances in km inside the logs."""
    return (103.4 + 20 * math.log10(carrier_hz / 1e6) + 20 * math.log10(d_t / 1e3)
            + 20 * math.log10(d_r / 1e3) - 10 * math.log10(rcs))


def path_loss_los_db(carrier_hz: float, d: float) -> float:
    return 32.4 + 20 * math.log10(carrier_hz / 1e6) + 20 * math.log10(d / 1e3)


def path_truth(tbs: BaseStation, rbs: BaseStation, target: Target | None,
               wf: WaveformConfig) -> PathTruth:
    """True delay, Doppler, angles and path-loss amplitude of one path.

    ``target=None`` selects the direct line-of-sight path of the pair.
    """
    if tbs.role == "receive" or rbs.role == "transmit":
        raise ValueError("path_truth needs a transmitting tBS and a receiving rBS")
    pt, pr = tbs.p, rbs.p
    if target is None:
        d = float(np.linalg.norm(pr - pt))
        if d < 1e-6:
            raise ValueError("tBS and rBS coincide")
        u_r = (pt - pr) / d  # at rBS, toward the source
        u_t = -u_r
        aoa = local_angles(u_r, rbs.orientation_chi)
        aod = local_angles(u_t, tbs.orientation_chi)
        gain = 10 ** (-path_loss_los_db(wf.carrier_hz, d) / 20)
        return PathTruth(d / C0, 0.0, aoa[0], aoa[1], aod[0], aod[1], gain, True, d, 0.0)

    pu = target.p
    to_t, to_r = pt - pu, pr - pu
    d_t, d_r = float(np.linalg.norm(to_t)), float(np.linalg.norm(to_r))
    if d_t < 1e-6 or d_r < 1e-6:
        raise ValueError("target coincides with a base station")
    r_t, r_r = to_t / d_t, to_r / d_r
    v_bi = float((r_t + r_r) @ target.v)
    aoa = local_angles(-r_r, rbs.orientation_chi)
    aod = local_angles(-r_t, tbs.orientation_chi)
    gain = 10 ** (-path_loss_scattered_db(wf.carrier_hz, d_t, d_r, target.rcs) / 20)
    d = d_t + d_r
    return PathTruth(d / C0, v_bi / wf.wavelength, aoa[0], aoa[1], aod[0], aod[1],
                     gain, False, d, v_bi)


def pair_paths(scenario: Scenario, pair: tuple[int, int]) -> list[PathTruth]:
    """LoS path first, then one scattered path per target in scenario order."""
    tbs = scenario.base_stations[pair[0]]
    rbs = scenario.base_stations[pair[1]]
    wf = scenario.waveform
    return [path_truth(tbs, rbs, None, wf)] + [path_truth(tbs, rbs, t, wf) for t in scenario.targets]


def circle_base_stations(bounds: SceneBounds, array: ArrayConfig) -> tuple[BaseStation, ...]:
    out = []
    for i in range(bounds.n_bs):
        ang = 2 * math.pi * i / bounds.n_bs
        pos = (bounds.bs_radius * math.cos(ang), bounds.bs_radius * math.sin(ang), bounds.bs_height)
        chi = chi_facing(pos, (0.0, 0.0, bounds.bs_height))
        out.append(BaseStation(pos, chi, "transceiver", array))
    return tuple(out)


def sample_targets(rng: np.random.Generator, k: int, bounds: SceneBounds) -> tuple[Target, ...]:
    targets: list[Target] = []
    attempts = 0
    while len(targets) < k:
        attempts += 1
        if attempts > bounds.max_attempts:
            raise OvercrowdedSceneError(
                f"could not place {k} targets {bounds.min_separation} m apart "
                f"in {bounds.max_attempts} attempts")
        r = bounds.target_radius * math.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * math.pi)
        pos = np.array([r * math.cos(a), r * math.sin(a), rng.uniform(*bounds.height_range)])
        if any(np.linalg.norm(pos - t.p) < bounds.min_separation for t in targets):
            continue
        speed = rng.uniform(*bounds.speed_range_kmh) * KMH
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        targets.append(Target(pos, speed * direction, bounds.rcs))
    return tuple(targets)


def build_default_scenario(seed: int, k_targets: int, *, bounds: SceneBounds | None = None,
                           array: ArrayConfig | None = None,
                           waveform: WaveformConfig | None = None) -> Scenario:
    """Eight BSs on a 500 m circle facing its centre plus ``k_targets`` random UAVs."""
    if k_targets < 1:
        raise ValueError("k_targets must be >= 1")
    bounds = bounds or SceneBounds()
    array = array or ArrayConfig()
    rng = np.random.default_rng(seed)
    return Scenario(circle_base_stations(bounds, array), sample_targets(rng, k_targets, bounds),
                    array, waveform or WaveformConfig(), bounds=bounds)


# -- config file (JSON) ------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "base_stations": [
            {"position": list(b.position), "orientation_chi": b.orientation_chi, "role": b.role}
            for b in sc.base_stations],
        "targets": [
            {"position": list(t.position), "velocity": list(t.velocity), "rcs": t.rcs}
            for t in sc.targets],
        "array": asdict(sc.array),
        "waveform": asdict(sc.waveform),
        "beam_region": [list(sc.beam_region[0]), list(sc.beam_region[1])],
        "bounds": asdict(sc.bounds),
    }


def scenario_from_dict(d: dict, seed: int = 0, k_targets: int | None = None) -> Scenario:
    """Build a scenario from a config mapping.

    Base stations come from ``base_stations`` or, if absent, from the circle
    parameters in ``bounds``. Targets come from ``targets`` or are sampled with
    ``seed`` (``k_targets`` or ``bounds.k_targets``, default 3).
    """
    bounds_d = dict(d.get("bounds", {}))
    k_cfg = bounds_d.pop("k_targets", None)
    for key in ("height_range", "speed_range_kmh"):
        if key in bounds_d:
            bounds_d[key] = tuple(bounds_d[key])
    bounds = SceneBounds(**bounds_d)
    array = ArrayConfig(**d.get("array", {}))
    waveform = WaveformConfig(**d.get("waveform", {}))
    if "base_stations" in d:
        bss = tuple(BaseStation(b["position"], b.get("orientation_chi", 0.0),
                                b.get("role", "transceiver"), array) for b in d["base_stations"])
    else:
        bss = circle_base_stations(bounds, array)
    if "targets" in d:
        tg = tuple(Target(t["position"], t.get("velocity", (0, 0, 0)), t.get("rcs", bounds.rcs))
                   for t in d["targets"])
    else:
        k = k_targets if k_targets is not None else (k_cfg or 3)
        tg = sample_targets(np.random.default_rng(seed), k, bounds)
    region = d.get("beam_region", ((40.0, 90.0), (40.0, 140.0)))
    region = (tuple(region[0]), tuple(region[1]))
    return Scenario(bss, tg, array, waveform, region, bounds)


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2))


def load_scenario(path: str | Path, seed: int = 0, k_targets: int | None = None) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()), seed, k_targets)


def select_pairs(tx: Sequence[int], rx: Sequence[int]) -> list[tuple[int, int]]:
    return [(t, r) for r in rx for t in tx]
