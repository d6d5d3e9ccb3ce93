"""Slot-level simulation of one gNB serving one (possibly adversarial) UE."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import telemetry as tm
from ..telemetry import ConfigSnapshot, MacRecord, PhySample, SpectrumFrame
from .models import (
    TX_POWER_MAX_DBM, TX_POWER_MIN_DBM, ChannelState, CqiReporter, GnbParams, UeState,
    ar1_fading, block_error_prob, mcs_for_cqi, step_power_control,
)
from .scenario import ScenarioSpec

SLOTS_PER_PHY = int(tm.PHY_PERIOD_MS / tm.SLOT_MS)
SLOTS_PER_MAC = int(tm.MAC_PERIOD_MS / tm.SLOT_MS)
# the TA loop re-arms after a command only once the estimate has sat at the
# commanded value for 10 s
TA_SETTLE_REPORTS = 200
TA_FILTER_REPORTS = 20


@dataclass(frozen=True)
class SimConfig:
    gnb: GnbParams = GnbParams()
    ue_id: str = "ue-0001"
    p0_nominal_dbm: float = -80.0
    alpha: float = 0.8
    bwp_prbs: int = tm.REFERENCE_BWP_PRBS
    scs_khz: int = tm.REFERENCE_SCS_KHZ
    slice_id: int = 1
    qos_5qi: int = 9
    mcs_table_id: int = 1
    ta_granularity_us: float = 0.2604
    grant_min_prbs: int = 8
    grant_max_prbs: int = 24
    burst_slots: int = 4
    burst_prbs: int = 4
    # off-grant burst level above the per-PRB in-grant level of the same slot
    burst_boost_db: float = 6.0
    noise_floor_db: float = tm.NOISE_FLOOR_DB

    def snapshot(self, t_ms: int = 0) -> ConfigSnapshot:
        return ConfigSnapshot(
            t_ms=t_ms, ue_id=self.ue_id, p0_nominal_dbm=self.p0_nominal_dbm, alpha=self.alpha,
            bwp_prbs=self.bwp_prbs, scs_khz=self.scs_khz, slice_id=self.slice_id,
            qos_5qi=self.qos_5qi, mcs_table_id=self.mcs_table_id,
            ta_granularity_us=self.ta_granularity_us,
        )


# --------------------------------------------------------------------------- spectrum cells

@dataclass
class SpectrumCells:
    """Column store of energized spectrum cells, sorted by (t_ms, prb).

    This is the in-memory form of a spectrum stream; ``frames`` rebuilds the
    per-slot :class:`SpectrumFrame` records.
    """

    t_ms: np.ndarray
    prb: np.ndarray
    energy_db: np.ndarray
    noise_floor_db: float = tm.NOISE_FLOOR_DB

    @classmethod
    def empty(cls, noise_floor_db: float = tm.NOISE_FLOOR_DB) -> "SpectrumCells":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int32), np.zeros(0), noise_floor_db)

    @classmethod
    def from_frames(cls, frames) -> "SpectrumCells":
        frames = list(frames)
        if not frames:
            return cls.empty()
        t, p, e = [], [], []
        for fr in frames:
            for prb, energy in fr.energized:
                t.append(fr.t_ms)
                p.append(prb)
                e.append(energy)
        floor = frames[0].noise_floor_db
        cells = cls(np.asarray(t, dtype=float), np.asarray(p, dtype=np.int32), np.asarray(e, dtype=float), floor)
        return cells.sorted()

    def sorted(self) -> "SpectrumCells":
        order = np.lexsort((self.prb, self.t_ms))
        return SpectrumCells(self.t_ms[order], self.prb[order], self.energy_db[order], self.noise_floor_db)

    def shifted(self, offset_ms: float) -> "SpectrumCells":
        return SpectrumCells(self.t_ms + offset_ms, self.prb, self.energy_db, self.noise_floor_db)

    def __len__(self) -> int:
        return len(self.t_ms)

    def _bounds(self):
        if not len(self.t_ms):
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        cut = np.flatnonzero(np.diff(self.t_ms)) + 1
        starts = np.concatenate(([0], cut))
        ends = np.concatenate((cut, [len(self.t_ms)]))
        return starts, ends

    @property
    def n_frames(self) -> int:
        return len(self._bounds()[0])

    def frames(self):
        t, p, e = self.t_ms.tolist(), self.prb.tolist(), self.energy_db.tolist()
        for a, b in zip(*self._bounds()):
            yield emit_spectrum_frame(t[a], p[a:b], e[a:b], self.noise_floor_db)

    def encode_lines(self):
        """Yield JSON lines byte-identical to ``encode_record`` on each frame."""
        t, p, e = self.t_ms.tolist(), self.prb.tolist(), self.energy_db.tolist()
        tail = f'],"noise_floor_db":{self.noise_floor_db!r}}}\n'
        for a, b in zip(*self._bounds()):
            body = ",".join([f"[{p[i]},{e[i]!r}]" for i in range(a, b)])
            yield f'{{"kind":"spectrum","t_ms":{t[a]!r},"energized":[{body}{tail}'


# --------------------------------------------------------------------------- emitters

def emit_phy_report(t_ms: int, ue_id: str, snr_db_slots, block_errors, cqi: int, ta_units: int,
                    previous: PhySample | None = None) -> PhySample:
    """Summarise one 50 ms window.

    ``snr_db_slots`` and ``block_errors`` cover the granted slots only.  A
    window without grants holds the previous report.
    """
    snr_db_slots = np.asarray(snr_db_slots, dtype=float)
    if snr_db_slots.size == 0:
        if previous is None:
            raise ValueError("first PHY window has no granted slots to hold from")
        return replace(previous, t_ms=t_ms, bler=0.0, held=True)
    errors = np.asarray(block_errors, dtype=bool)
    bler = float(errors.sum()) / errors.size
    return PhySample(t_ms=t_ms, ue_id=ue_id, snr_db=round(float(snr_db_slots.mean()), 4),
                     bler=bler, cqi=int(cqi), ta_units=int(ta_units))


def emit_mac_trace(t_ms: int, ue_id: str, slot_index, prb_start, prb_count, block_errors,
                   mcs: int, ta_command_delta: int = 0) -> MacRecord:
    """Aggregate the granted slots of one 100 ms interval into a MAC record."""
    grants = tuple((int(s), int(a), int(c)) for s, a, c in zip(slot_index, prb_start, prb_count))
    errors = np.asarray(block_errors, dtype=bool)
    nacks = int(errors.sum())
    return MacRecord(t_ms=t_ms, ue_id=ue_id, grants=grants, harq_acks=int(errors.size) - nacks,
                     harq_nacks=nacks, mcs=int(mcs), ta_command_delta=int(ta_command_delta))


def emit_spectrum_frame(t_ms: float, prb_index, energy_db, noise_floor_db: float = tm.NOISE_FLOOR_DB) -> SpectrumFrame:
    """Build a sparse frame; cells at or below the floor are left out."""
    cells = tuple((int(p), float(e)) for p, e in zip(prb_index, energy_db) if e > noise_floor_db)
    return SpectrumFrame(t_ms=float(t_ms), energized=cells, noise_floor_db=noise_floor_db)


# --------------------------------------------------------------------------- manipulation

@dataclass
class SlotBatch:
    """Per-slot transmission state of the UE for a contiguous run of slots."""

    t_s: np.ndarray
    tx_power_dbm: np.ndarray
    timing_offset_us: np.ndarray
    granted: np.ndarray
    grant_start: np.ndarray
    grant_count: np.ndarray
    burst: np.ndarray = None
    burst_start: np.ndarray = None

    def __post_init__(self):
        n = len(self.t_s)
        if self.burst is None:
            self.burst = np.zeros(n, dtype=bool)
        if self.burst_start is None:
            self.burst_start = np.full(n, -1, dtype=np.int32)


def _burst_starts(n_slots: int, duty: float, length: int, rng: np.random.Generator) -> np.ndarray:
    # renewal process: a burst of `length` slots, then a geometric gap; the
    # start probability is thinned so the occupied fraction equals `duty`
    p = duty / (length * (1.0 - duty))
    expected = int(n_slots * duty / length * 1.5) + 16
    gaps = rng.geometric(p, size=expected) - 1
    steps = gaps + length
    starts = np.cumsum(steps) - length
    starts = starts[starts + length <= n_slots]
    return starts


def apply_manipulation(batch: SlotBatch, scenario: ScenarioSpec, config: SimConfig,
                       rng: np.random.Generator | None = None) -> SlotBatch:
    """Return a copy of ``batch`` with the scenario's misbehaviour applied.

    Only UE-side transmission state changes; control-plane state is untouched.
    """
    if scenario.kind == "baseline":
        raise ValueError("baseline scenarios carry no manipulation")
    out = replace(batch)
    if scenario.kind == "power_offset":
        out.tx_power_dbm = np.clip(batch.tx_power_dbm + scenario.offset_db, TX_POWER_MIN_DBM, TX_POWER_MAX_DBM)
    elif scenario.kind == "ta_drift":
        rate_us_per_s = scenario.units_per_min * config.ta_granularity_us / 60.0
        out.timing_offset_us = batch.timing_offset_us + rate_us_per_s * batch.t_s
    elif scenario.kind == "offgrant":
        if rng is None:
            raise ValueError("off-grant injection needs a random generator")
        n = len(batch.t_s)
        L, W, bwp = config.burst_slots, config.burst_prbs, config.bwp_prbs
        burst = np.zeros(n, dtype=bool)
        burst_start = np.full(n, -1, dtype=np.int32)
        gs = np.where(batch.granted, batch.grant_start, 0)
        ge = np.where(batch.granted, batch.grant_start + batch.grant_count, 0)
        candidates = np.arange(bwp - W + 1)
        for s in _burst_starts(n, scenario.duty_fraction, L, rng):
            sl = slice(s, s + L)
            # a W-wide range [c, c+W) is free if it misses every grant in the burst's slots
            ok = np.ones(len(candidates), dtype=bool)
            for a, b in zip(gs[sl], ge[sl]):
                if b > a:
                    ok &= (candidates + W <= a) | (candidates >= b)
            free = candidates[ok]
            if free.size == 0:
                continue
            burst[sl] = True
            burst_start[sl] = free[rng.integers(free.size)]
        out.burst, out.burst_start = burst, burst_start
    else:
        raise ValueError(f"unknown scenario kind {scenario.kind!r}")
    return out


# --------------------------------------------------------------------------- run

@dataclass
class RunBundle:
    scenario: ScenarioSpec
    phy: list
    mac: list
    rrc: list
    spectrum: SpectrumCells
    # per-slot ground truth, kept for tests and diagnostics
    truth: dict = field(default_factory=dict, repr=False)

    def manifest(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "label": self.scenario.label,
            "seed": self.scenario.seed,
            "dropped": {"phy": 0, "mac": 0, "rrc": 0, "spectrum": 0},
            "counts": {"phy": len(self.phy), "mac": len(self.mac), "rrc": len(self.rrc),
                       "spectrum": self.spectrum.n_frames},
        }

    def write(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        for kind, records in (("phy", self.phy), ("mac", self.mac), ("rrc", self.rrc)):
            (run_dir / tm.STREAM_FILES[kind]).write_bytes(tm.encode_stream(records))
        with open(run_dir / tm.STREAM_FILES["spectrum"], "w", encoding="utf-8") as fh:
            fh.writelines(self.spectrum.encode_lines())
        (run_dir / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return run_dir


def simulate_run(scenario: ScenarioSpec, config: SimConfig = SimConfig()) -> RunBundle:
    """Simulate one run; a pure function of ``(scenario, config)``."""
    scenario.validate()
    gnb = config.gnb
    n_slots = int(round(scenario.duration_s * 1000 / tm.SLOT_MS))
    n_win = n_slots // SLOTS_PER_PHY
    n_mac = n_slots // SLOTS_PER_MAC

    # independent streams so a manipulation never perturbs the draws of another component
    seeds = np.random.SeedSequence(scenario.seed).spawn(8)
    r_fade, r_sched, r_size, r_pos, r_block, r_ta, r_csi, r_burst = (np.random.default_rng(s) for s in seeds)

    channel = ChannelState(mean_gain_db=-gnb.pathloss_db)
    fade = ar1_fading(n_slots, channel, r_fade)
    granted = r_sched.random(n_slots) < scenario.traffic_load
    count = r_size.integers(config.grant_min_prbs, config.grant_max_prbs + 1, size=n_slots)
    start = np.floor(r_pos.random(n_slots) * (config.bwp_prbs - count + 1)).astype(np.int64)
    count = np.where(granted, count, 0)
    start = np.where(granted, start, 0)
    meas_noise = gnb.snr_meas_noise_db * r_block.standard_normal(n_slots)
    block_u = r_block.random(n_slots)
    monitor_noise_seed = r_block.integers(2**63)

    win_of_slot = np.arange(n_slots) // SLOTS_PER_PHY
    g_count = np.bincount(win_of_slot, weights=granted, minlength=n_win)
    g_fade = np.bincount(win_of_slot, weights=np.where(granted, fade + meas_noise, 0.0), minlength=n_win)

    # closed-loop power control at report cadence; the adversarial UE keeps the
    # honest loop and adds its offset on top, so the loop cannot absorb it
    snapshot = config.snapshot(0)
    ue = UeState(tx_power_dbm=0.0, ta_state_units=gnb.ta_geometric_units)
    ue = step_power_control(ue, snapshot, channel, gnb, measured_snr_db=gnb.snr_target_db)
    tx_win = np.empty(n_win)
    for w in range(n_win):
        tx_win[w] = ue.tx_power_dbm
        if g_count[w]:
            meas = ue.tx_power_dbm + channel.mean_gain_db - gnb.noise_dbm + g_fade[w] / g_count[w]
            ue = step_power_control(ue, snapshot, channel, gnb, measured_snr_db=meas)

    t_s = np.arange(n_slots) * tm.SLOT_MS / 1000.0
    batch = SlotBatch(t_s=t_s, tx_power_dbm=tx_win[win_of_slot], timing_offset_us=np.zeros(n_slots),
                      granted=granted, grant_start=start, grant_count=count)
    if scenario.kind != "baseline":
        batch = apply_manipulation(batch, scenario, config, r_burst)

    snr_true = batch.tx_power_dbm + channel.mean_gain_db + fade - gnb.noise_dbm
    snr_meas = snr_true + meas_noise
    errors = granted & (block_u < block_error_prob(snr_true, gnb))

    # CQI and TA at report cadence
    fade_win = np.bincount(win_of_slot, weights=fade, minlength=n_win) / SLOTS_PER_PHY
    csi = gnb.csi_noise_db * r_csi.standard_normal(n_win)
    ta_noise = gnb.ta_noise_units * r_ta.standard_normal(n_win)
    timing_units = batch.timing_offset_us / config.ta_granularity_us
    reporter = CqiReporter(gnb.cqi_half_life_s, tm.PHY_PERIOD_MS / 1000.0)
    compliant = scenario.kind != "ta_drift"

    phy, mac = [], []
    ta_state = gnb.ta_geometric_units
    applied = 0.0  # corrections the UE has folded into its timing
    pending = False
    settled = 0  # consecutive reports at the commanded state
    last_est = ta_state
    raw_est: list[float] = []  # unquantised arrival estimates of recent reports
    prev = None
    cqi = None
    ta_cmd = np.zeros(n_mac, dtype=np.int64)
    mcs_rec = np.zeros(n_mac, dtype=np.int64)
    for w in range(n_win):
        sl = slice(w * SLOTS_PER_PHY, (w + 1) * SLOTS_PER_PHY)
        if w % 2 == 0:
            m = w // 2
            # decide on a 1 s average so a single noisy report never triggers a command
            recent = raw_est[-TA_FILTER_REPORTS:]
            deviation = int(round(math.fsum(recent) / len(recent) - ta_state)) if recent else 0
            if pending and settled >= TA_SETTLE_REPORTS:
                pending = False
            if not pending and abs(deviation) >= 1:
                # corrective command; a compliant UE applies it, the drifting UE
                # re-applies its delay so the estimate keeps escaping
                ta_cmd[m] = deviation
                ta_state += deviation
                if compliant:
                    applied += deviation
                pending = True
        cqi = reporter.report(gnb.dl_quality_db + fade_win[w] + csi[w])
        if w % 2 == 0:
            mcs_rec[w // 2] = mcs_for_cqi(cqi)
        residual = timing_units[w * SLOTS_PER_PHY + SLOTS_PER_PHY // 2] - applied
        g = granted[sl]
        if g.any():
            raw = ta_state + residual + ta_noise[w]
            raw_est.append(raw)
            last_est = max(0, int(round(raw)))
        settled = settled + 1 if last_est == ta_state else 0
        prev = emit_phy_report(w * tm.PHY_PERIOD_MS, config.ue_id, snr_meas[sl][g], errors[sl][g], cqi, last_est, prev)
        phy.append(prev)

    slot_idx = np.arange(n_slots)
    for m in range(n_mac):
        sl = slice(m * SLOTS_PER_MAC, (m + 1) * SLOTS_PER_MAC)
        g = granted[sl]
        mac.append(emit_mac_trace(m * tm.MAC_PERIOD_MS, config.ue_id, slot_idx[sl][g], start[sl][g], count[sl][g],
                                  errors[sl][g], mcs_rec[m], ta_cmd[m]))

    spectrum = _spectrum_cells(batch, snr_true, config, np.random.default_rng(monitor_noise_seed))
    if scenario.spectrum_offset_ms:
        spectrum = spectrum.shifted(scenario.spectrum_offset_ms)
        keep = spectrum.t_ms >= 0
        spectrum = SpectrumCells(spectrum.t_ms[keep], spectrum.prb[keep], spectrum.energy_db[keep], spectrum.noise_floor_db)

    truth = {
        "granted": granted, "grant_start": start, "grant_count": count, "block_errors": errors,
        "burst": batch.burst, "burst_start": batch.burst_start, "snr_true": snr_true,
        "tx_power_dbm": batch.tx_power_dbm, "timing_units": timing_units, "ta_command": ta_cmd,
    }
    return RunBundle(scenario, phy, mac, [snapshot], spectrum, truth)


def _spectrum_cells(batch: SlotBatch, snr_true: np.ndarray, config: SimConfig, rng) -> SpectrumCells:
    gnb = config.gnb
    floor = config.noise_floor_db
    # in-grant cells: received per-PRB level above the monitor floor
    gslots = np.flatnonzero(batch.granted)
    counts = batch.grant_count[gslots]
    slot_rep = np.repeat(gslots, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    prb = np.repeat(batch.grant_start[gslots], counts) + (np.arange(counts.sum()) - first)
    energy = floor + snr_true[slot_rep] + gnb.monitor_noise_db * rng.standard_normal(slot_rep.size)
    # off-grant bursts sit above what a granted PRB would receive in that slot
    bslots = np.flatnonzero(batch.burst)
    W = config.burst_prbs
    b_slot = np.repeat(bslots, W)
    b_prb = np.repeat(batch.burst_start[bslots], W) + np.tile(np.arange(W), bslots.size)
    b_energy = floor + snr_true[b_slot] + config.burst_boost_db + gnb.monitor_noise_db * rng.standard_normal(b_slot.size)
    slots = np.concatenate((slot_rep, b_slot))
    cells = SpectrumCells(
        t_ms=slots * tm.SLOT_MS,
        prb=np.concatenate((prb, b_prb)).astype(np.int32),
        energy_db=np.round(np.maximum(np.concatenate((energy, b_energy)), floor + 0.01), 2),
        noise_floor_db=floor,
    )
    return cells.sorted()
