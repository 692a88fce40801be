"""Hybrid beamformers, frequency-domain channel and received echo tensors."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (ArrayConfig, PathTruth, Scenario, WaveformConfig, pair_paths,
                       steering_vector_dc)


@dataclass(frozen=True, eq=False)
class Beamformer:
    analog: np.ndarray   # L x R, unit-modulus entries
    digital: np.ndarray  # R x R

    @property
    def combined(self) -> np.ndarray:
        return self.analog @ self.digital

    @property
    def n_rf(self) -> int:
        return self.analog.shape[1]


@dataclass(frozen=True)
class NoiseConfig:
    """Receiver noise.

    By default the per-subcarrier noise power is ``N0 * scs`` with thermal
    density ``n0_dbm_hz`` and ``noise_figure_db``. Setting ``snr_db`` instead
    fixes the ratio of mean noiseless entry power to mean noise power at the
    RF-chain outputs. ``enabled=False`` yields noiseless tensors.
    """
    n0_dbm_hz: float = -174.0
    noise_figure_db: float = 9.0
    snr_db: float | None = None
    enabled: bool = True


@dataclass(frozen=True, eq=False)
class ReceivedTensor:
    data: np.ndarray              # R x N x M, complex
    pair_id: tuple[int, int]
    wf: WaveformConfig
    paths: tuple[PathTruth, ...] = ()   # with the complex gains actually used

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def split_rf_chains(n_rf: int, n_v: int, n_h: int) -> tuple[int, int]:
    """Factor pair ``(J_v, J_h)`` of ``n_rf`` closest to square with
    ``J_v <= n_v`` and ``J_h <= n_h``."""
    best = None
    for jv in range(1, n_rf + 1):
        if n_rf % jv:
            continue
        jh = n_rf // jv
        if jv > n_v or jh > n_h:
            continue
        score = (abs(math.log(jv / jh)), -jv)
        if best is None or score < best[0]:
            best = (score, (jv, jh))
    if best is None:
        raise ValueError(f"no J_v x J_h = {n_rf} split fits a {n_v}x{n_h} array")
    return best[1]


def _samples(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([(lo + hi) / 2])
    return np.linspace(lo, hi, n)


def design_region_beamformer(array: ArrayConfig, elev_range_deg: Sequence[float],
                             azim_range_deg: Sequence[float], separable: bool = True) -> Beamformer:
    """Analog beams on a J_v x J_h grid spanning the sensing region, ``F_d = I``.

    Column ``j_v*J_h + j_h`` steers to elevation sample ``j_v`` and azimuth
    sample ``j_h``. With ``separable=True`` the horizontal phase uses the
    direction cosine ``cos(phi)`` so that ``F_a = F_v kron F_h`` exactly;
    ``separable=False`` uses the joint steering vector ``a(theta, phi)``.
    """
    lo_e, hi_e = elev_range_deg
    lo_a, hi_a = azim_range_deg
    if not (hi_e > lo_e and hi_a > lo_a) and array.n_rf > 1:
        raise ValueError("degenerate sensing region")
    jv, jh = split_rf_chains(array.n_rf, array.n_v, array.n_h)
    th = np.deg2rad(_samples(lo_e, hi_e, jv))
    ph = np.deg2rad(_samples(lo_a, hi_a, jh))
    cols = []
    for t in th:
        for p in ph:
            horiz = math.cos(p) if separable else math.sin(t) * math.cos(p)
            cols.append(steering_vector_dc(array, math.cos(t), horiz))
    return Beamformer(np.stack(cols, axis=1), np.eye(array.n_rf, dtype=complex))


def random_beamformer(array: ArrayConfig, rng: np.random.Generator) -> Beamformer:
    phases = rng.uniform(0, 2 * np.pi, (array.n_elements, array.n_rf))
    return Beamformer(np.exp(1j * phases), np.eye(array.n_rf, dtype=complex))


def evaluate_gain(bf: Beamformer, array: ArrayConfig, theta, phi) -> np.ndarray:
    """Beam gain ``||F^H a(theta, phi)||^2 / ||F||_F^2`` in dB (vectorized)."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    a = steering_vector_dc(array, np.cos(theta).ravel(), (np.sin(theta) * np.cos(phi)).ravel())
    F = bf.combined
    g = np.sum(np.abs(F.conj().T @ a) ** 2, axis=0) / np.linalg.norm(F) ** 2
    return (10 * np.log10(g)).reshape(theta.shape)


def transmit_vector(bf: Beamformer) -> np.ndarray:
    """Effective unit-norm transmit vector ``F 1 / ||F 1||`` after symbol removal."""
    x = bf.combined @ np.ones(bf.n_rf)
    return x / np.linalg.norm(x)


def _aoa_vec(array: ArrayConfig, p: PathTruth) -> np.ndarray:
    return steering_vector_dc(array, math.cos(p.aoa_elev), math.sin(p.aoa_elev) * math.cos(p.aoa_azim))


def _aod_vec(array: ArrayConfig, p: PathTruth) -> np.ndarray:
    return steering_vector_dc(array, math.cos(p.aod_elev), math.sin(p.aod_elev) * math.cos(p.aod_azim))


def channel_matrix(paths: Sequence[PathTruth], m: int, n: int, wf: WaveformConfig,
                   rx_array: ArrayConfig, tx_array: ArrayConfig) -> np.ndarray:
    """Frequency-domain L_r x L_t channel at subcarrier ``m`` and symbol ``n``."""
    if not (0 <= m < wf.n_subcarriers and 0 <= n < wf.n_symbols):
        raise IndexError(f"(m, n) = ({m}, {n}) outside the resource grid")
    H = np.zeros((rx_array.n_elements, tx_array.n_elements), dtype=complex)
    for p in paths:
        ph = (-2j * np.pi * m * wf.scs_hz * (p.delay + wf.sto_s)
              + 2j * np.pi * (p.doppler_hz + wf.cfo_hz) * n * wf.symbol_period_s)
        H += p.gain * np.exp(ph) * np.outer(_aoa_vec(rx_array, p), _aod_vec(tx_array, p).conj())
    return H


def doppler_vector(n_symbols: int, symbol_period_s: float, freq_hz) -> np.ndarray:
    f = np.asarray(freq_hz, float)
    idx = np.arange(n_symbols).reshape((n_symbols,) + (1,) * f.ndim)
    return np.exp(2j * np.pi * idx * symbol_period_s * f)


def delay_generator(wf: WaveformConfig, delay: float) -> complex:
    return complex(np.exp(-2j * np.pi * wf.scs_hz * (delay + wf.sto_s)))


def cp_factors(paths: Sequence[PathTruth], wf: WaveformConfig, tx_bf: Beamformer,
               rx_bf: Beamformer, rx_array: ArrayConfig, tx_array: ArrayConfig):
    """True factor matrices ``A`` (R x P), ``B`` (N x P, gains folded in) and
    Vandermonde ``C`` (M x P) for the given paths."""
    Q = rx_bf.combined
    x = transmit_vector(tx_bf)
    A = np.stack([(Q.conj().T @ _aoa_vec(rx_array, p)) * (_aod_vec(tx_array, p).conj() @ x)
                  for p in paths], axis=1)
    B = np.stack([p.gain * doppler_vector(wf.n_symbols, wf.symbol_period_s, p.doppler_hz + wf.cfo_hz)
                  for p in paths], axis=1)
    z = np.array([delay_generator(wf, p.delay) for p in paths])
    C = z[None, :] ** np.arange(wf.n_subcarriers)[:, None]
    return A, B, C


def cp_tensor(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("rk,nk,mk->rnm", A, B, C)


def noise_power_w(noise: NoiseConfig, wf: WaveformConfig) -> float:
    dbm = noise.n0_dbm_hz + noise.noise_figure_db + 10 * math.log10(wf.scs_hz)
    return 10 ** (dbm / 10) / 1e3


def realize_paths(paths: Sequence[PathTruth], wf: WaveformConfig,
                  rng: np.random.Generator) -> tuple[PathTruth, ...]:
    """Scale path-loss amplitudes by per-subcarrier power and draw random phases."""
    amp = math.sqrt(10 ** (wf.tx_power_dbm / 10) / 1e3 / wf.n_subcarriers)
    phases = rng.uniform(0, 2 * np.pi, len(paths))
    return tuple(replace(p, gain=complex(abs(p.gain) * amp * np.exp(1j * ph)))
                 for p, ph in zip(paths, phases))


def simulate_received_tensor(scenario: Scenario, pair: tuple[int, int],
                             beamformers: tuple[Beamformer, Beamformer],
                             noise: NoiseConfig | None = None, seed=0) -> ReceivedTensor:
    """Symbol-compensated R x N x M echo tensor for tBS ``pair[0]`` -> rBS ``pair[1]``.

    ``beamformers`` is ``(tx, rx)``. The LoS path is included as the first path.
    """
    if pair[0] == pair[1]:
        raise ValueError("tBS and rBS must differ")
    noise = noise or NoiseConfig()
    wf = scenario.waveform
    rng = np.random.default_rng(seed)
    tx_bf, rx_bf = beamformers
    tx_arr = scenario.base_stations[pair[0]].array
    rx_arr = scenario.base_stations[pair[1]].array
    paths = realize_paths(pair_paths(scenario, pair), wf, rng)
    data = cp_tensor(*cp_factors(paths, wf, tx_bf, rx_bf, rx_arr, tx_arr))
    if noise.enabled:
        data = data + _noise(rng, noise, wf, rx_bf, data)
    return ReceivedTensor(data, tuple(pair), wf, paths)


def _noise(rng, noise: NoiseConfig, wf: WaveformConfig, rx_bf: Beamformer, clean: np.ndarray):
    R, N, M = clean.shape
    Q = rx_bf.combined
    G = Q.conj().T @ Q
    try:
        Lc = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(G)
        Lc = V * np.sqrt(np.clip(w, 0, None))
    if noise.snr_db is None:
        var = noise_power_w(noise, wf)
    else:
        # per-element variance that gives the requested output SNR
        out_var = np.mean(np.abs(clean) ** 2) / 10 ** (noise.snr_db / 10)
        var = out_var / np.mean(np.real(np.diag(G)))
    w = (rng.standard_normal((R, N * M)) + 1j * rng.standard_normal((R, N * M))) * math.sqrt(var / 2)
    return (Lc @ w).reshape(R, N, M)


# -- binary dump -----------------------------------------------------------
# Layout: three little-endian int64 dims, then the C-ordered body as
# interleaved little-endian float64 (re, im) pairs.

def dump_tensor(data: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(data, dtype="<c16")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("expected a 2-D or 3-D array")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = struct.unpack("<3q", raw[:24])
    body = np.frombuffer(raw[24:], dtype="<c16")
    if body.size != int(np.prod(dims)):
        raise ValueError(f"body has {body.size} values, header says {dims}")
    return body.reshape(dims).astype(complex)
