"""Feature maps to unit-power complex symbols and back, through a channel."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .channel import (
    FlatChannelConfig,
    MultipathChannelConfig,
    apply_flat,
    draw_flat_channel,
    draw_multipath_channel,
    ls_estimate,
    ofdm_transmit,
    perturb_csi,
    zf_detect,
)


@dataclass
class FeaturePacket:
    source_id: int
    shape: tuple[int, ...]
    scale: float
    payload: np.ndarray

    def hexdump(self, limit: int = 8) -> str:
        raw = self.payload[:limit].astype(np.complex64).tobytes()
        return f"agent={self.source_id} shape={self.shape} scale={self.scale!r} " + raw.hex()


def pack(f, source_id: int = 0) -> FeaturePacket:
    """Pair consecutive values into I/Q and normalize to unit average power."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("pack: feature map has non-finite values")
    flat = f.reshape(-1)
    if flat.size % 2:
        flat = np.append(flat, 0.0)
    peak = np.max(np.abs(flat))
    if peak == 0:
        return FeaturePacket(source_id, tuple(f.shape), 1.0, flat[0::2] + 1j * flat[1::2])
    # shift by an exact power of two first so tiny or huge maps neither underflow nor overflow
    exp = int(np.frexp(peak)[1])
    flat = np.ldexp(flat, -exp)
    sym = flat[0::2] + 1j * flat[1::2]
    rms = float(np.sqrt(np.mean(np.abs(sym) ** 2)))
    return FeaturePacket(source_id, tuple(f.shape), float(np.ldexp(rms, exp)), sym / rms)


def unpack(packet: FeaturePacket, recovered) -> np.ndarray:
    recovered = np.asarray(recovered, dtype=complex)
    if recovered.shape != packet.payload.shape:
        raise ValueError(
            f"unpack: got {recovered.size} symbols, packet carries {packet.payload.size}"
        )
    sym = recovered * packet.scale
    flat = np.empty(2 * sym.size)
    flat[0::2] = sym.real
    flat[1::2] = sym.imag
    n = int(np.prod(packet.shape))
    return flat[:n].reshape(packet.shape)


Link = FlatChannelConfig | MultipathChannelConfig | None


def transmit(
    f,
    link: Link,
    rng: np.random.Generator,
    source_id: int = 0,
    diagnostics: Counter | None = None,
) -> np.ndarray:
    """pack -> channel -> detection -> unpack; returns the recovered feature map.

    ``link=None`` is the ideal (identity) channel. Shape and scale travel on
    an error-free side channel. One channel realization covers the packet.
    """
    packet = pack(f, source_id)
    if link is None:
        return unpack(packet, packet.payload)
    if isinstance(link, FlatChannelConfig):
        real = draw_flat_channel(link, rng)
        y = apply_flat(packet.payload, real, link.snr_db, rng, link)
        if link.csi_variance is None:
            csi = real.h
        else:
            csi = perturb_csi(real.h, link.csi_variance, rng).values
        x_hat = zf_detect(y, csi, real.gain, diagnostics)
        return unpack(packet, x_hat)
    if isinstance(link, MultipathChannelConfig):
        n = link.num_subcarriers
        payload = packet.payload
        pad = (-payload.size) % n
        if pad:
            payload = np.concatenate([payload, np.zeros(pad, dtype=complex)])
        real = draw_multipath_channel(link, rng)
        rx = ofdm_transmit(payload, real, link, rng)
        if link.perfect_csi:
            h_est = real.freq_response
        else:
            h_est = ls_estimate(rx.pilots_rx, rx.pilots_tx, rx.pilot_positions, n).values
        x_hat = zf_detect(rx.data, h_est[None, :], 1.0, diagnostics).reshape(-1)
        return unpack(packet, x_hat[: packet.payload.size])
    raise TypeError(f"unsupported link type {type(link).__name__}")
