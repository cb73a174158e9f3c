"""Complex-baseband V2V link simulation.

Two link models are provided:

* a flat Rician block-fading link with distance path loss and AWGN,
  ``y = sqrt(p0 / d**n) * h * x + w``;
* a tap-delay-line multi-path link carried over OFDM with a cyclic prefix,
  comb pilots, least-squares estimation and per-subcarrier zero forcing,
  ``Y[i] = H[i] X[i] + W[i]``.

Every random draw comes from an explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

ZF_FLOOR = 1e-6


@dataclass(frozen=True)
class FlatChannelConfig:
    p0: float = 1.0
    d: float = 1.0
    n: float = 2.0
    rician_k: float = 1.0
    snr_db: float = 30.0
    csi_variance: float | None = None  # None means perfect CSI
    calibrate_at_unit_distance: bool = False

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"distance must be positive, got {self.d}")
        if self.n < 0:
            raise ValueError(f"path-loss exponent must be >= 0, got {self.n}")
        if self.rician_k < 0:
            raise ValueError(f"Rician K must be >= 0, got {self.rician_k}")
        if self.csi_variance is not None and self.csi_variance < 0:
            raise ValueError(f"CSI variance must be >= 0, got {self.csi_variance}")

    @property
    def csi_mode(self) -> str:
        return "perfect" if self.csi_variance is None else f"perturbed({self.csi_variance:g})"


@dataclass(frozen=True)
class MultipathChannelConfig:
    num_subcarriers: int = 64
    num_paths: int = 24
    max_delay: int = 16
    cyclic_prefix: int = 16
    pilot_count: int = 16
    snr_db: float = 30.0
    carrier_frequency_hz: float = 2.6e9  # recorded only
    delay_decay: float = 4.0
    perfect_csi: bool = False
    allow_short_prefix: bool = False

    def __post_init__(self):
        if self.max_delay >= self.num_subcarriers:
            raise ValueError("max_delay must be smaller than num_subcarriers")
        if self.cyclic_prefix < self.max_delay and not self.allow_short_prefix:
            raise ValueError(
                f"cyclic prefix {self.cyclic_prefix} shorter than max delay {self.max_delay}"
            )
        if self.pilot_count <= 0 or self.num_subcarriers % self.pilot_count:
            raise ValueError(
                f"pilot_count {self.pilot_count} must divide num_subcarriers {self.num_subcarriers}"
            )
        if self.num_paths < 1:
            raise ValueError("num_paths must be >= 1")

    @property
    def pilot_positions(self) -> np.ndarray:
        return np.arange(0, self.num_subcarriers, self.num_subcarriers // self.pilot_count)


@dataclass
class FlatRealization:
    h: complex
    gain: float


@dataclass
class MultipathRealization:
    taps: np.ndarray
    delays: np.ndarray
    freq_response: np.ndarray

    def impulse_response(self) -> np.ndarray:
        """Taps summed onto an integer delay grid."""
        ir = np.zeros(int(self.delays.max()) + 1, dtype=complex)
        np.add.at(ir, self.delays, self.taps)
        return ir


@dataclass
class CsiEstimate:
    values: np.ndarray
    provenance: str


@dataclass
class OfdmReception:
    """Frequency-domain view of one received OFDM packet.

    ``data`` is (num_data_symbols, num_subcarriers); ``pilots`` holds the
    received values on the pilot subcarriers of the leading training symbol.
    """

    data: np.ndarray
    pilots_rx: np.ndarray
    pilots_tx: np.ndarray
    pilot_positions: np.ndarray
    noise_var: float
    diagnostics: Counter = field(default_factory=Counter)


def snr_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


def complex_normal(rng: np.random.Generator, size, variance: float = 1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian with the given total variance."""
    s = np.sqrt(variance / 2.0)
    return s * rng.standard_normal(size) + 1j * s * rng.standard_normal(size)


# ----------------------------------------------------------------------
# flat Rician link
# ----------------------------------------------------------------------

def draw_flat_channel(config: FlatChannelConfig, rng: np.random.Generator) -> FlatRealization:
    """Unit-average-power Rician coefficient with a uniform line-of-sight phase."""
    k = config.rician_k
    phi = rng.uniform(0.0, 2.0 * np.pi)
    los = np.sqrt(k / (k + 1.0)) * np.exp(1j * phi)
    diffuse = np.sqrt(1.0 / (k + 1.0)) * complex_normal(rng, None)
    gain = float(np.sqrt(config.p0 / config.d**config.n))
    return FlatRealization(h=complex(los + diffuse), gain=gain)


def draw_flat_channels(config: FlatChannelConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized ``h`` draws (no path loss) for Monte-Carlo statistics."""
    k = config.rician_k
    phi = rng.uniform(0.0, 2.0 * np.pi, size)
    return np.sqrt(k / (k + 1.0)) * np.exp(1j * phi) + np.sqrt(1.0 / (k + 1.0)) * complex_normal(rng, size)


def flat_noise_variance(realization: FlatRealization, snr_db: float, config: FlatChannelConfig | None = None) -> float:
    """Noise variance for unit-power symbols.

    By default the noise is calibrated against the realized received power
    ``|gain * h|**2``. With ``calibrate_at_unit_distance`` the reference is
    the power the same fading draw would give at d = 1, so the path loss
    actually lowers the effective SNR.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return 0.0
    if config is not None and config.calibrate_at_unit_distance:
        ref = config.p0 * abs(realization.h) ** 2
    else:
        ref = abs(realization.gain * realization.h) ** 2
    return ref / snr_linear(snr_db)


def apply_flat(
    x: np.ndarray,
    realization: FlatRealization,
    snr_db: float,
    rng: np.random.Generator,
    config: FlatChannelConfig | None = None,
) -> np.ndarray:
    """y = gain * h * x + w with per-link SNR calibration."""
    x = np.asarray(x, dtype=complex)
    if x.size == 0:
        raise ValueError("apply_flat: empty frame")
    sigma2 = flat_noise_variance(realization, snr_db, config)
    y = realization.gain * realization.h * x
    if sigma2 > 0:
        y = y + complex_normal(rng, x.shape, sigma2)
    return y


def perturb_csi(truth, variance: float, rng: np.random.Generator) -> CsiEstimate:
    """Add a zero-mean complex Gaussian error of the given total variance."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    truth = np.asarray(truth, dtype=complex)
    if variance == 0:
        return CsiEstimate(truth.copy(), "perfect")
    return CsiEstimate(truth + complex_normal(rng, truth.shape, variance), f"perturbed({variance:g})")


def zf_detect(y, csi, gain: float = 1.0, diagnostics: Counter | None = None) -> np.ndarray:
    """Zero-forcing: divide by ``gain * csi`` (scalar or broadcastable per subcarrier).

    Estimates with magnitude below 1e-6 are floored (phase kept) and counted
    under ``diagnostics["zf_floor"]``.
    """
    values = csi.values if isinstance(csi, CsiEstimate) else csi
    hh = gain * np.asarray(values, dtype=complex)
    mag = np.abs(hh)
    small = mag < ZF_FLOOR
    if np.any(small):
        if diagnostics is not None:
            diagnostics["zf_floor"] += int(np.count_nonzero(small))
        phase = np.where(mag > 0, hh / np.where(mag > 0, mag, 1.0), 1.0)
        hh = np.where(small, ZF_FLOOR * phase, hh)
    return np.asarray(y, dtype=complex) / hh


# ----------------------------------------------------------------------
# multi-path OFDM link
# ----------------------------------------------------------------------

def draw_multipath_channel(config: MultipathChannelConfig, rng: np.random.Generator) -> MultipathRealization:
    """Tap-delay line with an exponential power-delay profile.

    Delays are integers drawn uniformly from ``0..max_delay``; the profile
    ``exp(-delay / delay_decay)`` is normalized to unit total power.
    """
    delays = rng.integers(0, config.max_delay + 1, size=config.num_paths)
    power = np.exp(-delays / config.delay_decay)
    power /= power.sum()
    taps = np.sqrt(power) * complex_normal(rng, config.num_paths)
    return MultipathRealization(taps, delays, frequency_response(taps, delays, config.num_subcarriers))


def frequency_response(taps: np.ndarray, delays: np.ndarray, n: int) -> np.ndarray:
    ir = np.zeros(n, dtype=complex)
    np.add.at(ir, delays, taps)
    return np.fft.fft(ir)


def ofdm_transmit(
    symbols,
    realization: MultipathRealization,
    config: MultipathChannelConfig,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> OfdmReception:
    """Send data symbols over the multi-path link.

    The packet is one pilot OFDM symbol (unit-magnitude QPSK on the comb
    pilot subcarriers, zeros elsewhere) followed by data OFDM symbols that
    load every subcarrier. Each OFDM symbol is inverse-transformed (unitary
    FFT), prefixed with its cyclic prefix, the whole stream is linearly
    convolved with the taps, AWGN is added, and the receiver strips the
    prefix and transforms back.
    """
    n = config.num_subcarriers
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.size == 0 or symbols.size % n:
        raise ValueError(f"ofdm_transmit: {symbols.size} symbols is not a multiple of {n}")
    pos = config.pilot_positions
    pilots = np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, size=pos.size)))
    pilot_sym = np.zeros(n, dtype=complex)
    pilot_sym[pos] = pilots
    grid = np.vstack([pilot_sym, symbols.reshape(-1, n)])

    cp = config.cyclic_prefix
    td = np.fft.ifft(grid, axis=1, norm="ortho")
    td = np.hstack([td[:, n - cp :], td]) if cp else td
    stream = td.reshape(-1)
    rx = np.convolve(stream, realization.impulse_response())[: stream.size]

    # Per-link SNR: mean subcarrier gain times the data symbol power.
    sig = np.mean(np.abs(realization.freq_response) ** 2) * np.mean(np.abs(symbols) ** 2)
    noise_var = 0.0 if noiseless or np.isinf(config.snr_db) else sig / snr_linear(config.snr_db)
    if noise_var > 0:
        rx = rx + complex_normal(rng, rx.shape, noise_var)

    rx = rx.reshape(grid.shape[0], n + cp)[:, cp:]
    fd = np.fft.fft(rx, axis=1, norm="ortho")
    return OfdmReception(
        data=fd[1:],
        pilots_rx=fd[0, pos],
        pilots_tx=pilots,
        pilot_positions=pos,
        noise_var=noise_var,
    )


def ls_estimate(received_pilots, transmitted_pilots, pilot_positions, num_subcarriers: int) -> CsiEstimate:
    """Least-squares pilot estimate with linear interpolation between pilots.

    Real and imaginary parts are interpolated independently; subcarriers
    beyond the outermost pilots take the nearest pilot value.
    """
    tx = np.asarray(transmitted_pilots, dtype=complex)
    if np.any(tx == 0):
        raise ValueError("ls_estimate: zero pilot symbol")
    at_pilots = np.asarray(received_pilots, dtype=complex) / tx
    pos = np.asarray(pilot_positions)
    grid = np.arange(num_subcarriers)
    est = np.interp(grid, pos, at_pilots.real) + 1j * np.interp(grid, pos, at_pilots.imag)
    return CsiEstimate(est, f"ls_estimated({pos.size})")


def dump_channel_trace(path, rows) -> None:
    """Write (frame, H, Hhat) triples as the debugging CSV trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "subcarrier", "H_real", "H_imag", "Hhat_real", "Hhat_imag"])
        for frame, h, hhat in rows:
            for i, (a, b) in enumerate(zip(h, hhat)):
                w.writerow([frame, i] + [repr(float(v)) for v in (a.real, a.imag, b.real, b.imag)])

