"""Baseline calibration and the four cross-layer consistency rules.

R1  SNR against the SNR expected for the reported CQI
R2  measured TA against reference TA plus commanded TA changes
R3  spectrum energy in PRBs the scheduler never granted
R4  HARQ NACK fraction against the reported BLER trend
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import telemetry as tm
from .align import FusedSeries
from .telemetry import FusedSample

RULES = ("r1", "r2", "r3", "r4")
MIN_CQI_GROUP = 30


@dataclass(frozen=True)
class RuleConstants:
    """Tunable knobs that turn baseline statistics into rule thresholds."""

    snr_k: float = 4.0
    ta_tol_units: float = 1.0
    energy_margin_db: float = 3.0
    harq_bler_tol: float = 0.05
    harq_window_s: float = 1.0
    snr_tol_floor_db: float = 0.5

    def scaled(self, **factors) -> "RuleConstants":
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})

    @classmethod
    def from_dict(cls, d: dict) -> "RuleConstants":
        known = {k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def default_constants() -> RuleConstants:
    """The frozen constants shipped with the package."""
    text = resources.files("uplink_coherence").joinpath("data/profile.defaults.json").read_text()
    return RuleConstants.from_dict(json.loads(text)["constants"])


@dataclass
class CalibrationProfile:
    snr_by_cqi: dict  # cqi -> (mean_db, std_db)
    snr_residual_tol_db: float
    ta_reference_units: int
    ta_tol_units: float
    energy_margin_db: float
    harq_bler_tol: float
    harq_window_s: float = 1.0
    noise_floor_db: float = tm.NOISE_FLOOR_DB
    snr_residual_std_db: float = 0.0
    snr_k: float = 4.0
    snr_tol_floor_db: float = 0.5
    # CQIs with too few samples and the neighbour whose statistics they took
    inherited_cqi: dict = field(default_factory=dict)
    # baseline mean/std of single-layer counters, for envelope checks
    envelopes: dict = field(default_factory=dict)
    source_runs: list = field(default_factory=list)

    def expected_snr(self, cqi: int) -> float:
        if cqi in self.snr_by_cqi:
            return self.snr_by_cqi[cqi][0]
        nearest = min(self.snr_by_cqi, key=lambda c: (abs(c - cqi), c))
        return self.snr_by_cqi[nearest][0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_by_cqi"] = {str(k): list(v) for k, v in sorted(self.snr_by_cqi.items())}
        d["inherited_cqi"] = {str(k): v for k, v in sorted(self.inherited_cqi.items())}
        d["envelopes"] = {k: list(v) for k, v in sorted(self.envelopes.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        d = dict(d)
        d["snr_by_cqi"] = {int(k): tuple(v) for k, v in d["snr_by_cqi"].items()}
        d["inherited_cqi"] = {int(k): int(v) for k, v in d.get("inherited_cqi", {}).items()}
        d["envelopes"] = {k: tuple(v) for k, v in d.get("envelopes", {}).items()}
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def constants(self) -> RuleConstants:
        return RuleConstants(snr_k=self.snr_k, ta_tol_units=self.ta_tol_units, energy_margin_db=self.energy_margin_db,
                             harq_bler_tol=self.harq_bler_tol, harq_window_s=self.harq_window_s,
                             snr_tol_floor_db=self.snr_tol_floor_db)

    def with_constants(self, c: RuleConstants) -> "CalibrationProfile":
        """Re-derive thresholds from the stored baseline statistics."""
        tol = max(c.snr_k * self.snr_residual_std_db, c.snr_tol_floor_db)
        return replace(self, snr_residual_tol_db=tol, snr_k=c.snr_k, snr_tol_floor_db=c.snr_tol_floor_db,
                       ta_tol_units=c.ta_tol_units,
                       energy_margin_db=c.energy_margin_db, harq_bler_tol=c.harq_bler_tol,
                       harq_window_s=c.harq_window_s)


# --------------------------------------------------------------------------- calibration

def _mean_std(values) -> tuple[float, float]:
    # exact summation: duplicated or reordered inputs give bit-identical moments
    values = list(values)
    if not values:
        return 0.0, 0.0
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def _mode(values) -> int:
    vals, counts = np.unique(np.asarray(values), return_counts=True)
    return int(vals[np.argmax(counts)])


def _nack_fractions(series: FusedSeries) -> list[float]:
    fr = []
    _, first = np.unique(series.mac_t_ms, return_index=True)
    for i in first:
        if series.mac_t_ms[i] < 0:
            continue
        decoded = series.harq_acks[i] + series.harq_nacks[i]
        if decoded:
            fr.append(series.harq_nacks[i] / decoded)
    return fr


def calibrate(runs, constants: RuleConstants | None = None, source_runs=None,
              noise_floor_db: float = tm.NOISE_FLOOR_DB) -> CalibrationProfile:
    """Derive envelopes and thresholds from one or more baseline fused runs."""
    runs = list(runs)
    if not runs:
        raise ValueError("calibration needs at least one baseline run")
    c = constants or default_constants()
    snr = [float(x) for s in runs for x in s.snr_db]
    cqi = [int(x) for s in runs for x in s.cqi]
    groups: dict[int, list[float]] = {}
    for q, v in zip(cqi, snr):
        groups.setdefault(q, []).append(v)
    stats = {q: _mean_std(sorted(v)) for q, v in groups.items()}
    populated = [q for q, v in groups.items() if len(v) >= MIN_CQI_GROUP] or list(groups)
    inherited = {}
    for q in sorted(groups):
        if q not in populated:
            src = min(populated, key=lambda p: (abs(p - q), p))
            stats[q] = stats[src]
            inherited[q] = src
    residuals = sorted(v - stats[q][0] for q, v in zip(cqi, snr))
    _, resid_std = _mean_std(residuals)

    bler = sorted(float(x) for s in runs for x in s.bler)
    nacks = sorted(f for s in runs for f in _nack_fractions(s))
    per_run = lambda fn: sorted(fn(s) for s in runs)
    envelopes = {
        "bler": _mean_std(bler),
        "nack_fraction": _mean_std(nacks),
        "cqi": _mean_std(sorted(float(q) for q in cqi)),
        "snr_db": _mean_std(sorted(snr)),
        "run_mean_bler": _mean_std(per_run(lambda s: _mean_std(sorted(s.bler.tolist()))[0])),
    }
    profile = CalibrationProfile(
        snr_by_cqi=dict(sorted(stats.items())), snr_residual_tol_db=0.0,
        ta_reference_units=_mode([x for s in runs for x in s.ta_units]),
        ta_tol_units=c.ta_tol_units, energy_margin_db=c.energy_margin_db, harq_bler_tol=c.harq_bler_tol,
        harq_window_s=c.harq_window_s, noise_floor_db=noise_floor_db, snr_residual_std_db=resid_std,
        inherited_cqi=inherited, envelopes=envelopes, source_runs=sorted(source_runs or []),
    )
    return profile.with_constants(c)


# --------------------------------------------------------------------------- single-sample rules

@dataclass(frozen=True)
class RuleOutcome:
    flag: bool
    value: float
    evaluable: bool = True


@dataclass(frozen=True)
class RuleVerdict:
    t_ms: int
    r1_snr_cqi: RuleOutcome
    r2_ta: RuleOutcome
    r3_prb_energy: RuleOutcome
    r4_harq_bler: RuleOutcome

    @property
    def any(self) -> bool:
        return self.r1_snr_cqi.flag or self.r2_ta.flag or self.r3_prb_energy.flag or self.r4_harq_bler.flag


def check_snr_cqi(sample: FusedSample, profile: CalibrationProfile) -> RuleOutcome:
    residual = sample.snr_db - profile.expected_snr(sample.cqi)
    return RuleOutcome(abs(residual) > profile.snr_residual_tol_db, residual)


def check_ta(sample: FusedSample, profile: CalibrationProfile, commanded_units: int) -> RuleOutcome:
    """``commanded_units`` is the cumulative TA command delta logged up to the sample."""
    deviation = abs(sample.ta_units - (profile.ta_reference_units + commanded_units))
    return RuleOutcome(deviation > profile.ta_tol_units, float(deviation))


def check_prb_energy(sample: FusedSample, profile: CalibrationProfile) -> RuleOutcome:
    if sample.offgrant_energy_db is None:
        return RuleOutcome(False, 0.0)
    excess = sample.offgrant_energy_db - (profile.noise_floor_db + profile.energy_margin_db)
    return RuleOutcome(excess > 0, excess)


def check_harq_bler(window, profile: CalibrationProfile) -> RuleOutcome:
    """Compare the window's NACK fraction with its mean reported BLER.

    MAC counts are taken once per MAC record even though each record covers
    two fused samples.  A window without decoded blocks is not evaluable.
    """
    window = list(window)
    seen = set()
    acks = nacks = 0
    for s in window:
        if s.mac_t_ms < 0 or s.mac_t_ms in seen:
            continue
        seen.add(s.mac_t_ms)
        acks += s.harq_acks
        nacks += s.harq_nacks
    if acks + nacks == 0 or not window:
        return RuleOutcome(False, 0.0, evaluable=False)
    gap = abs(nacks / (acks + nacks) - math.fsum(s.bler for s in window) / len(window))
    return RuleOutcome(gap > profile.harq_bler_tol, gap)


# --------------------------------------------------------------------------- series evaluation

@dataclass
class VerdictSeries:
    t_ms: np.ndarray
    flags: dict        # rule -> bool array
    values: dict       # rule -> float array (residual, deviation, excess, gap)
    r4_evaluable: np.ndarray

    def __len__(self) -> int:
        return len(self.t_ms)

    @property
    def any(self) -> np.ndarray:
        out = np.zeros(len(self.t_ms), dtype=bool)
        for r in RULES:
            out |= self.flags[r]
        return out

    def verdicts(self):
        for i in range(len(self)):
            o = [RuleOutcome(bool(self.flags[r][i]), float(self.values[r][i]),
                             bool(self.r4_evaluable[i]) if r == "r4" else True) for r in RULES]
            yield RuleVerdict(int(self.t_ms[i]), *o)


def commanded_history(series: FusedSeries) -> np.ndarray:
    """Cumulative logged TA commands, counting each MAC record once."""
    first = np.ones(len(series), dtype=bool)
    first[1:] = series.mac_t_ms[1:] != series.mac_t_ms[:-1]
    first &= series.mac_t_ms >= 0
    return np.cumsum(np.where(first, series.ta_command_delta, 0))


def harq_windows(series: FusedSeries, window_s: float) -> np.ndarray:
    if not len(series):
        return np.zeros(0, dtype=np.int64)
    return (series.t_ms - series.t_ms[0]) // int(round(window_s * 1000))


def evaluate(series: FusedSeries, profile: CalibrationProfile) -> VerdictSeries:
    """Apply R1-R4 to every fused sample; R4 is shared across its 1 s window."""
    n = len(series)
    if n == 0:
        z = np.zeros(0)
        return VerdictSeries(np.zeros(0, dtype=np.int64), {r: z.astype(bool) for r in RULES},
                             {r: z.copy() for r in RULES}, z.astype(bool))
    cqis = sorted(profile.snr_by_cqi)
    lut = np.array([profile.expected_snr(q) for q in range(16)])
    r1v = series.snr_db - lut[np.clip(series.cqi, 0, 15)]
    r1 = np.abs(r1v) > profile.snr_residual_tol_db
    del cqis

    expected_ta = profile.ta_reference_units + commanded_history(series)
    r2v = np.abs(series.ta_units - expected_ta).astype(float)
    r2 = r2v > profile.ta_tol_units

    present = ~np.isnan(series.offgrant_energy_db)
    r3v = np.where(present, series.offgrant_energy_db - (profile.noise_floor_db + profile.energy_margin_db), 0.0)
    r3 = present & (r3v > 0)

    win = harq_windows(series, profile.harq_window_s)
    r4v = np.zeros(n)
    r4 = np.zeros(n, dtype=bool)
    ev = np.zeros(n, dtype=bool)
    bounds = np.flatnonzero(np.diff(win)) + 1
    for a, b in zip(np.concatenate(([0], bounds)), np.concatenate((bounds, [n]))):
        mt = series.mac_t_ms[a:b]
        _, first = np.unique(mt, return_index=True)
        first = first[mt[first] >= 0]
        acks = int(series.harq_acks[a:b][first].sum())
        nacks = int(series.harq_nacks[a:b][first].sum())
        if acks + nacks == 0:
            continue
        gap = abs(nacks / (acks + nacks) - math.fsum(series.bler[a:b].tolist()) / (b - a))
        r4v[a:b] = gap
        r4[a:b] = gap > profile.harq_bler_tol
        ev[a:b] = True

    return VerdictSeries(series.t_ms.copy(), {"r1": r1, "r2": r2, "r3": r3, "r4": r4},
                         {"r1": r1v, "r2": r2v, "r3": r3v, "r4": r4v}, ev)


# --------------------------------------------------------------------------- rates

@dataclass
class ViolationSeries:
    window_s: float
    rates: np.ndarray
    per_rule_rates: dict
    run_rate: float
    per_rule_run_rates: dict
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "window_s": self.window_s, "rates": self.rates.tolist(), "run_rate": self.run_rate,
            "per_rule_rates": {r: v.tolist() for r, v in self.per_rule_rates.items()},
            "per_rule_run_rates": dict(self.per_rule_run_rates), "counts": self.counts.tolist(),
        }


def violation_rate(verdicts: VerdictSeries, window_s: float = 10.0, duration_s: float | None = None,
                   t0_ms: int | None = None) -> ViolationSeries:
    """Tumbling-window fraction of samples with at least one rule flagged."""
    if not window_s > 0:
        raise ValueError("window_s must be positive")
    n = len(verdicts)
    if t0_ms is None:
        t0_ms = int(verdicts.t_ms[0]) if n else 0
    if duration_s is None:
        duration_s = (int(verdicts.t_ms[-1]) - t0_ms + tm.PHY_PERIOD_MS) / 1000.0 if n else 0.0
    n_win = int(math.ceil(round(duration_s / window_s, 9)))
    idx = ((verdicts.t_ms - t0_ms) // (window_s * 1000)).astype(np.int64) if n else np.zeros(0, dtype=np.int64)
    idx = np.clip(idx, 0, max(n_win - 1, 0))
    counts = np.bincount(idx, minlength=n_win)[:n_win] if n_win else np.zeros(0, dtype=np.int64)

    def rate(flags):
        hits = np.bincount(idx, weights=flags.astype(float), minlength=n_win)[:n_win] if n_win else np.zeros(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, hits / np.maximum(counts, 1), 0.0)

    any_ = verdicts.any
    return ViolationSeries(
        window_s=window_s, rates=rate(any_), per_rule_rates={r: rate(verdicts.flags[r]) for r in RULES},
        run_rate=float(any_.mean()) if n else 0.0,
        per_rule_run_rates={r: float(verdicts.flags[r].mean()) if n else 0.0 for r in RULES},
        counts=counts,
    )


def rule_activation_matrix(scenarios) -> tuple[list, np.ndarray]:
    """Scenario x rule matrix of per-rule run rates.

    ``scenarios`` is a sequence of ``(label, [VerdictSeries, ...])``; runs of a
    scenario are pooled sample-wise.  Row order follows the input.
    """
    labels, rows = [], []
    for label, runs in scenarios:
        runs = list(runs)
        total = sum(len(v) for v in runs)
        row = [sum(int(v.flags[r].sum()) for v in runs) / total if total else 0.0 for r in RULES]
        labels.append(label)
        rows.append(row)
    return labels, np.asarray(rows, dtype=float).reshape(len(rows), len(RULES))
