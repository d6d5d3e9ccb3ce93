"""Per-step radio models: fading, closed-loop power control, CQI, BLER and TA."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import lfilter

from ..telemetry import ConfigSnapshot

TX_POWER_MIN_DBM = -40.0
TX_POWER_MAX_DBM = 23.0

# channel quality (dB) at which each CQI index is reached; linear in between
CQI_KNOTS_DB = np.array([
    -9.0, -6.7, -4.7, -2.3, 0.2, 2.4, 4.3, 5.9, 8.1, 10.3, 11.7, 14.1, 16.3, 18.7, 21.0, 22.7,
])


@dataclass(frozen=True)
class GnbParams:
    """Receiver-side constants of the emulated cell."""

    pathloss_db: float = 95.0
    noise_dbm: float = -116.0
    snr_target_db: float = 18.0
    # closed-loop integrator gain per 50 ms report and per-report step clamp
    tpc_gain: float = 0.3
    tpc_step_max_db: float = 1.0
    # mean downlink quality fed to CQI; x.45 of an index so CQI sits near one value
    dl_quality_db: float = 15.1
    csi_noise_db: float = 1.0
    cqi_half_life_s: float = 2.0
    bler_margin_db: float = 2.3
    bler_slope_db: float = 0.5
    snr_meas_noise_db: float = 0.2
    monitor_noise_db: float = 0.3
    ta_geometric_units: int = 3
    ta_noise_units: float = 0.15


@dataclass(frozen=True)
class ChannelState:
    mean_gain_db: float
    fade_db: float = 0.0
    fade_sigma_db: float = 0.45
    fade_rho: float = math.exp(-1.0 / 200.0)  # ~100 ms coherence at 0.5 ms slots


@dataclass(frozen=True)
class UeState:
    tx_power_dbm: float
    closed_loop_db: float = 0.0
    true_timing_offset_us: float = 0.0
    ta_state_units: int = 0


def ar1_fading(n: int, channel: ChannelState, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) fading trace in dB, one value per slot."""
    rho, sigma = channel.fade_rho, channel.fade_sigma_db
    b = sigma * math.sqrt(1.0 - rho * rho)
    w = rng.standard_normal(n)
    if n:
        # start in the stationary distribution
        w[0] /= math.sqrt(1.0 - rho * rho)
    return lfilter([b], [1.0, -rho], w)


def step_power_control(ue: UeState, config: ConfigSnapshot, channel: ChannelState,
                       gnb: GnbParams = GnbParams(), measured_snr_db: float | None = None) -> UeState:
    """One closed-loop power-control update.

    Transmit power is ``p0 + alpha * pathloss + f`` where the accumulated
    correction ``f`` integrates the gap between the SNR target and the SNR the
    gNB measured last (computed from the channel when not supplied).
    Returns the updated state; the new power is ``tx_power_dbm``.
    """
    pathloss = -channel.mean_gain_db
    if measured_snr_db is None:
        measured_snr_db = ue.tx_power_dbm + channel.mean_gain_db + channel.fade_db - gnb.noise_dbm
    step = gnb.tpc_gain * (gnb.snr_target_db - measured_snr_db)
    step = min(max(step, -gnb.tpc_step_max_db), gnb.tpc_step_max_db)
    f = ue.closed_loop_db + step
    tx = config.p0_nominal_dbm + config.alpha * pathloss + f
    tx = min(max(tx, TX_POWER_MIN_DBM), TX_POWER_MAX_DBM)
    return replace(ue, tx_power_dbm=tx, closed_loop_db=f)


def cqi_from_quality(quality_db: float) -> int:
    idx = float(np.interp(quality_db, CQI_KNOTS_DB, np.arange(16)))
    return int(min(max(round(idx), 0), 15))


class CqiReporter:
    """EMA-smoothed CQI from the UE's view of channel quality.

    The input is downlink channel quality only; uplink transmit power never
    enters, which is why power inflation barely moves CQI.
    """

    def __init__(self, half_life_s: float = 2.0, period_s: float = 0.05):
        self.a = 1.0 - 2.0 ** (-period_s / half_life_s)
        self.ema: float | None = None

    def report(self, quality_db: float) -> int:
        self.ema = quality_db if self.ema is None else self.ema + self.a * (quality_db - self.ema)
        return cqi_from_quality(self.ema)


def cqi_report(channel: ChannelState, config: ConfigSnapshot, gnb: GnbParams = GnbParams(),
               reporter: CqiReporter | None = None) -> int:
    quality = gnb.dl_quality_db + channel.fade_db
    if reporter is None:
        return cqi_from_quality(quality)
    return reporter.report(quality)


def mcs_for_cqi(cqi: int) -> int:
    return min(27, round(1.8 * cqi))


def block_error_prob(snr_db, gnb: GnbParams = GnbParams()):
    """Logistic BLER curve; link adaptation keeps the MCS threshold a fixed margin below target."""
    threshold = gnb.snr_target_db - gnb.bler_margin_db
    return 1.0 / (1.0 + np.exp((np.asarray(snr_db) - threshold) / gnb.bler_slope_db))


def ta_drift_units(units_per_min: float, t_s):
    return units_per_min / 60.0 * np.asarray(t_s)
