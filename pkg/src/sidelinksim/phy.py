"""Propagation, noise, SINR and probabilistic decoding of the control and data channels.

All powers are handled in dBm / mW, all bandwidths in Hz. A subchannel range
is a ``(first_subchannel, width)`` pair of non-negative ints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

THERMAL_NOISE_DBM_PER_HZ = -174.0
SUBCARRIERS_PER_PRB = 12

# Bundled modulation-and-coding ladder: index -> (bits per symbol, code rate x 1024).
# Index 6 (QPSK, 602/1024) is the default data-channel entry; index 0 is the most
# robust entry and the control-channel default. Override via RadioParams.mcs_table.
DEFAULT_MCS_TABLE: dict[int, tuple[int, int]] = {
    0: (2, 120), 1: (2, 193), 2: (2, 308), 3: (2, 379), 4: (2, 449),
    5: (2, 526), 6: (2, 602), 7: (2, 679),
    8: (4, 340), 9: (4, 434), 10: (4, 490), 11: (4, 553), 12: (4, 616),
    13: (4, 658),
    14: (6, 438), 15: (6, 466), 16: (6, 517), 17: (6, 567), 18: (6, 616),
    19: (6, 666), 20: (6, 719), 21: (6, 772), 22: (6, 822), 23: (6, 873),
    24: (6, 910), 25: (6, 948),
}

PSCCH = "pscch"
PSSCH = "pssch"


def db_to_linear(db):
    """dB (or dBm) to linear ratio (or mW)."""
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0) if isinstance(db, np.ndarray) \
        else 10.0 ** (db / 10.0)


def linear_to_db(x):
    """Linear ratio (or mW) to dB (or dBm)."""
    return 10.0 * np.log10(x) if isinstance(x, np.ndarray) else 10.0 * math.log10(x)


@dataclass(frozen=True)
class RadioParams:
    """Static radio-layer parameterization shared by every UE."""

    tx_power_dbm: float = 23.0
    noise_figure_db: float = 5.0
    ref_loss_db: float = 46.7
    ref_distance_m: float = 1.0
    pathloss_exponent: float = 3.0
    mcs_pssch: int = 6
    mcs_pscch: int = 0
    subcarrier_spacing_khz: float = 30.0
    prbs_per_subchannel: int = 10
    n_subchannels: int = 10
    slot_duration_us: float = 500.0
    packet_size_bytes: int = 290
    error_model: str = "logistic"
    error_model_params: dict = field(default_factory=dict)
    mcs_table: dict = field(default_factory=lambda: dict(DEFAULT_MCS_TABLE))

    def validate(self) -> None:
        if self.tx_power_dbm <= -100:
            raise ValueError("tx_power_dbm implausibly low")
        for name in ("ref_distance_m", "pathloss_exponent", "subcarrier_spacing_khz",
                     "slot_duration_us"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        for name in ("prbs_per_subchannel", "n_subchannels", "packet_size_bytes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        expected_us = 1000.0 * 15.0 / self.subcarrier_spacing_khz
        if abs(self.slot_duration_us - expected_us) > 1e-6:
            raise ValueError(
                f"slot_duration_us={self.slot_duration_us:g} inconsistent with "
                f"subcarrier_spacing_khz={self.subcarrier_spacing_khz:g} "
                f"(expected {expected_us:g} us)")
        for idx in (self.mcs_pssch, self.mcs_pscch):
            if idx not in self.mcs_table:
                raise ValueError(f"MCS index {idx} not in the MCS table")

    def mcs(self, index: int) -> tuple[int, float]:
        """Resolve an MCS index to (modulation bits per symbol, code rate)."""
        bits, rate_x1024 = self.mcs_table[index]
        return bits, rate_x1024 / 1024.0

    @property
    def subchannel_bandwidth_hz(self) -> float:
        return self.prbs_per_subchannel * SUBCARRIERS_PER_PRB * self.subcarrier_spacing_khz * 1e3


@dataclass(frozen=True)
class LinkSample:
    """One transmitter-receiver observation of a channel in a slot."""

    tx: int
    rx: int
    slot: int
    subchannels: tuple[int, int]
    sinr_db: float
    channel: str  # PSCCH | PSSCH


def path_loss_db(d, params: RadioParams):
    """Log-distance loss, clamped to the reference loss below the reference distance.

    Accepts scalars or arrays; rejects non-positive distances.
    """
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr <= 0):
        raise ValueError("distance must be strictly positive")
    clamped = np.maximum(d_arr, params.ref_distance_m)
    loss = params.ref_loss_db + 10.0 * params.pathloss_exponent * np.log10(
        clamped / params.ref_distance_m)
    return float(loss) if np.isscalar(d) else loss


def noise_power_dbm(params: RadioParams, n_subchannels_used: int) -> float:
    """Thermal noise plus receiver noise figure over the used subchannels."""
    if not 1 <= n_subchannels_used <= params.n_subchannels:
        raise ValueError("n_subchannels_used out of range")
    bw = n_subchannels_used * params.subchannel_bandwidth_hz
    return THERMAL_NOISE_DBM_PER_HZ + 10.0 * math.log10(bw) + params.noise_figure_db


def overlap_subchannels(a: tuple[int, int], b: tuple[int, int]) -> int:
    """Number of subchannels two (start, width) ranges have in common."""
    lo = max(a[0], b[0])
    hi = min(a[0] + a[1], b[0] + b[1])
    return max(0, hi - lo)


def sinr_db(tx: int, rx: int, interferers, subchannels: tuple[int, int],
            topology, params: RadioParams) -> float:
    """SINR at ``rx`` for a transmission from ``tx`` on the given subchannel range.

    ``interferers`` is an iterable of ``(ue, (start, width))`` pairs transmitting in
    the same slot. Each contributes its received power scaled by the fraction of
    its own subchannels that fall inside the target range; disjoint interferers
    contribute nothing.
    """
    if tx == rx:
        raise ValueError("transmitter and receiver must differ")
    pos = topology.positions_m
    signal_mw = db_to_linear(params.tx_power_dbm - path_loss_db(abs(pos[rx] - pos[tx]), params))
    noise_mw = db_to_linear(noise_power_dbm(params, subchannels[1]))
    interference_mw = 0.0
    for ue, rng in sorted(interferers):
        ov = overlap_subchannels(subchannels, rng)
        if ov == 0 or ue == rx:
            continue
        rx_mw = db_to_linear(params.tx_power_dbm - path_loss_db(abs(pos[rx] - pos[ue]), params))
        interference_mw += rx_mw * (ov / rng[1])
    return linear_to_db(signal_mw / (noise_mw + interference_mw))


class LogisticErrorModel:
    """Single-threshold logistic block-error curve per channel.

    BLER(sinr) = 1 / (1 + exp((sinr_db - threshold_db) / slope_db)); the data
    threshold defaults to a spectral-efficiency fit of the configured MCS and
    the control threshold sits a fixed margin below it.
    """

    name = "logistic"

    def __init__(self, radio: RadioParams, *, slope_db: float = 0.5,
                 snr_gap_db: float = 2.0, pssch_threshold_db: float | None = None,
                 pscch_offset_db: float = -5.0, pscch_threshold_db: float | None = None):
        if slope_db <= 0:
            raise ValueError("slope_db must be strictly positive")
        self.slope_db = slope_db
        if pssch_threshold_db is None:
            bits, rate = radio.mcs(radio.mcs_pssch)
            pssch_threshold_db = 10.0 * math.log10(2.0 ** (bits * rate) - 1.0) + snr_gap_db
        self.pssch_threshold_db = pssch_threshold_db
        if pscch_threshold_db is None:
            pscch_threshold_db = pssch_threshold_db + pscch_offset_db
        self.pscch_threshold_db = pscch_threshold_db

    def _threshold(self, channel: str) -> float:
        if channel == PSSCH:
            return self.pssch_threshold_db
        if channel == PSCCH:
            return self.pscch_threshold_db
        raise ValueError(f"unknown channel: {channel!r}")

    def bler(self, sinr_db, channel: str):
        t = self._threshold(channel)
        x = (np.asarray(sinr_db, dtype=float) - t) / self.slope_db
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(x))
        return float(out) if np.ndim(sinr_db) == 0 else out

    def success_probability(self, sinr_db, channel: str):
        t = self._threshold(channel)
        x = (np.asarray(sinr_db, dtype=float) - t) / self.slope_db
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-x))
        return float(out) if np.ndim(sinr_db) == 0 else out


ERROR_MODELS = {
    LogisticErrorModel.name: LogisticErrorModel,
}


def make_error_model(params: RadioParams):
    """Instantiate the configured error model; rejects unknown names/parameters."""
    try:
        cls = ERROR_MODELS[params.error_model]
    except KeyError:
        raise ValueError(f"unknown error model: {params.error_model!r}") from None
    try:
        return cls(params, **params.error_model_params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for error model "
                         f"{params.error_model!r}: {exc}") from None


def decode(sample: LinkSample, tb_bits: int, params: RadioParams,
           rng: np.random.Generator) -> bool:
    """Bernoulli decode draw for one link sample under the configured error model."""
    if tb_bits <= 0:
        raise ValueError("tb_bits must be strictly positive")
    model = make_error_model(params)
    p = model.success_probability(sample.sinr_db, sample.channel)
    return bool(rng.random() < p)
