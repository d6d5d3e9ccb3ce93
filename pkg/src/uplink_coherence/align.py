"""Parse the four raw streams, align the spectrum monitor clock and fuse on a 50 ms grid."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import telemetry as tm
from .sim.run import SpectrumCells
from .telemetry import FusedSample

GRID_MS = tm.PHY_PERIOD_MS
MASK_HEX_DIGITS = (tm.REFERENCE_BWP_PRBS + 3) // 4


class StreamNotFound(FileNotFoundError):
    pass


class AlignmentError(ValueError):
    pass


class FusionError(ValueError):
    pass


@dataclass
class ParsedStreams:
    phy: list
    mac: list
    rrc: list
    spectrum: SpectrumCells
    dropped: dict
    manifest: dict = field(default_factory=dict)


def parse_streams(run_dir: str | Path) -> ParsedStreams:
    """Read and validate the four streams of a run directory.

    Lines that fail to decode or validate are dropped and counted; surviving
    records are passed through unmodified.
    """
    run_dir = Path(run_dir)
    out, dropped = {}, {}
    for kind, name in tm.STREAM_FILES.items():
        path = run_dir / name
        if not path.is_file():
            raise StreamNotFound(f"stream not found: {kind}")
        res = tm.decode_stream(path.read_bytes(), kind)
        good = [r for r in res.records if not tm.validate(r)]
        dropped[kind] = res.dropped_count + len(res.records) - len(good)
        out[kind] = good
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
    return ParsedStreams(out["phy"], out["mac"], out["rrc"], SpectrumCells.from_frames(out["spectrum"]),
                         dropped, manifest)


# --------------------------------------------------------------------------- alignment

def _grant_slots(mac) -> np.ndarray:
    slots = [g[0] for rec in mac for g in rec.grants]
    return np.unique(np.asarray(slots, dtype=np.int64))


def estimate_spectrum_offset(cells: SpectrumCells, mac, search_ms: float = 500.0,
                             min_ratio: float = 1.2) -> tuple[float, float]:
    """Estimate the monitor's constant clock offset in ms.

    Cross-correlates the slot-level energy-presence series against grant
    occupancy over +/- ``search_ms`` at slot resolution.  Returns
    ``(offset_ms, peak_ratio)``.
    """
    step = tm.SLOT_MS
    max_lag = int(round(search_ms / step))
    g_slots = _grant_slots(mac)
    p_slots = np.unique(np.round(cells.t_ms / step).astype(np.int64)) if len(cells) else np.zeros(0, dtype=np.int64)
    if g_slots.size == 0 or p_slots.size == 0:
        raise AlignmentError("alignment ambiguous")
    lo = min(g_slots.min(), p_slots.min()) - max_lag
    n = max(g_slots.max(), p_slots.max()) - lo + max_lag + 1
    g = np.zeros(n)
    p = np.zeros(n)
    g[g_slots - lo] = 1.0
    p[p_slots - lo] = 1.0
    corr = np.rint(fftconvolve(p, g[::-1], mode="full"))
    centre = n - 1  # index of zero lag
    window = corr[centre - max_lag: centre + max_lag + 1]
    k = int(np.argmax(window))
    peak = window[k]
    others = window.copy()
    others[max(0, k - 1): k + 2] = 0.0
    second = others.max()
    ratio = np.inf if second == 0 else peak / second
    if peak <= 0 or ratio < min_ratio:
        raise AlignmentError("alignment ambiguous")
    return (k - max_lag) * step, float(ratio)


def align_spectrum(cells: SpectrumCells, mac, search_ms: float = 500.0) -> tuple[SpectrumCells, float, float]:
    offset, ratio = estimate_spectrum_offset(cells, mac, search_ms)
    return cells.shifted(-offset), offset, ratio


# --------------------------------------------------------------------------- fusion

@dataclass
class FusionReport:
    fused_count: int
    dropped_per_stream: dict
    spectrum_offset_ms: float
    coverage: float
    grid_points: int = 0
    alignment_ratio: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["alignment_ratio"] is not None and not np.isfinite(d["alignment_ratio"]):
            d["alignment_ratio"] = None
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


FUSED_FIELDS = [f.name for f in fields(FusedSample)]


@dataclass
class FusedSeries:
    """Column form of a fused run; ``NaN`` marks absent energy evidence."""

    ue_id: str
    t_ms: np.ndarray
    snr_db: np.ndarray
    bler: np.ndarray
    cqi: np.ndarray
    ta_units: np.ndarray
    granted_prb_mask: list
    harq_acks: np.ndarray
    harq_nacks: np.ndarray
    ta_command_delta: np.ndarray
    config_index: np.ndarray
    offgrant_energy_db: np.ndarray
    ingrant_energy_db: np.ndarray
    mac_t_ms: np.ndarray

    def __len__(self) -> int:
        return len(self.t_ms)

    @classmethod
    def from_samples(cls, samples) -> "FusedSeries":
        samples = list(samples)
        col = lambda name, dtype: np.asarray([getattr(s, name) for s in samples], dtype=dtype)
        nan = lambda name: np.asarray([np.nan if getattr(s, name) is None else getattr(s, name) for s in samples], dtype=float)
        return cls(
            ue_id=samples[0].ue_id if samples else "",
            t_ms=col("t_ms", np.int64), snr_db=col("snr_db", float), bler=col("bler", float),
            cqi=col("cqi", np.int64), ta_units=col("ta_units", np.int64),
            granted_prb_mask=[s.granted_prb_mask for s in samples],
            harq_acks=col("harq_acks", np.int64), harq_nacks=col("harq_nacks", np.int64),
            ta_command_delta=col("ta_command_delta", np.int64), config_index=col("config_index", np.int64),
            offgrant_energy_db=nan("offgrant_energy_db"), ingrant_energy_db=nan("ingrant_energy_db"),
            mac_t_ms=col("mac_t_ms", np.int64),
        )

    def samples(self):
        def opt(x):
            return None if np.isnan(x) else float(x)
        for i in range(len(self)):
            yield FusedSample(
                t_ms=int(self.t_ms[i]), ue_id=self.ue_id, snr_db=float(self.snr_db[i]), bler=float(self.bler[i]),
                cqi=int(self.cqi[i]), ta_units=int(self.ta_units[i]), granted_prb_mask=self.granted_prb_mask[i],
                harq_acks=int(self.harq_acks[i]), harq_nacks=int(self.harq_nacks[i]),
                ta_command_delta=int(self.ta_command_delta[i]), config_index=int(self.config_index[i]),
                offgrant_energy_db=opt(self.offgrant_energy_db[i]), ingrant_energy_db=opt(self.ingrant_energy_db[i]),
                mac_t_ms=int(self.mac_t_ms[i]),
            )

    def take(self, idx) -> "FusedSeries":
        idx = np.asarray(idx, dtype=np.int64)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ue_id":
                kw[f.name] = v
            elif isinstance(v, list):
                kw[f.name] = [v[i] for i in idx]
            else:
                kw[f.name] = v[idx]
        return FusedSeries(**kw)

    def equals(self, other: "FusedSeries") -> bool:
        if self.ue_id != other.ue_id or len(self) != len(other):
            return False
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif a != b:
                return False
        return True


def _mask_ints(bits: np.ndarray) -> list:
    # rows of a boolean (n, prbs) matrix -> python ints with bit i = PRB i
    packed = np.packbits(bits, axis=1, bitorder="little")
    return [int.from_bytes(row.tobytes(), "little") for row in packed]


def _time_sorted(records) -> list:
    # ties on t_ms are broken by the encoded record so input order never matters
    out = sorted(records, key=lambda r: r.t_ms)
    if any(a.t_ms == b.t_ms for a, b in zip(out, out[1:])):
        out.sort(key=lambda r: (r.t_ms, tm.encode_record(r)))
    return out


def fuse(phy, mac, rrc, spectrum: SpectrumCells, spectrum_offset_ms: float = 0.0,
         dropped: dict | None = None, bwp_prbs: int = tm.REFERENCE_BWP_PRBS) -> tuple[FusedSeries, FusionReport]:
    """Join the streams on the 50 ms PHY grid.

    ``spectrum`` must already be offset-corrected.  Values are copied from the
    raw records as they are; no smoothing or interpolation happens here.
    """
    dropped = dict(dropped or {})
    phy, mac, rrc = _time_sorted(phy), _time_sorted(mac), _time_sorted(rrc)
    if not phy:
        empty = FusedSeries.from_samples([])
        return empty, FusionReport(0, dropped, spectrum_offset_ms, 0.0, 0)

    t0 = phy[0].t_ms
    kept, seen = [], set()
    off_grid = 0
    for r in phy:
        if (r.t_ms - t0) % GRID_MS or r.t_ms in seen:
            off_grid += 1
            continue
        seen.add(r.t_ms)
        kept.append(r)
    if off_grid:
        dropped["phy"] = dropped.get("phy", 0) + off_grid
    phy = kept
    t = np.asarray([r.t_ms for r in phy], dtype=np.int64)
    n = len(phy)
    grid_points = int((t[-1] - t0) // GRID_MS) + 1

    rrc_t = np.asarray([r.t_ms for r in rrc], dtype=np.int64)
    cfg = np.searchsorted(rrc_t, t, side="right") - 1
    if n and cfg[0] < 0:
        raise FusionError("no configuration snapshot at or before the first grid point")

    # MAC record covering [t_mac, t_mac + 100)
    mac_t = np.asarray([r.t_ms for r in mac], dtype=np.int64)
    mi = np.searchsorted(mac_t, t, side="right") - 1
    covered = (mi >= 0) & (t < np.where(mi >= 0, mac_t[np.maximum(mi, 0)], 0) + tm.MAC_PERIOD_MS)
    acks = np.zeros(n, dtype=np.int64)
    nacks = np.zeros(n, dtype=np.int64)
    delta = np.zeros(n, dtype=np.int64)
    mac_start = np.full(n, -1, dtype=np.int64)
    for i in np.flatnonzero(covered):
        rec = mac[mi[i]]
        acks[i], nacks[i], delta[i], mac_start[i] = rec.harq_acks, rec.harq_nacks, rec.ta_command_delta, rec.t_ms

    # row of each grid interval, -1 where the PHY point was dropped
    row_of_k = np.full(grid_points, -1, dtype=np.int64)
    row_of_k[(t - t0) // GRID_MS] = np.arange(n)

    def interval_rows(times_ms: np.ndarray) -> np.ndarray:
        k = np.floor((times_ms - t0) / GRID_MS).astype(np.int64)
        ok = (k >= 0) & (k < grid_points)
        rows = np.full(times_ms.shape, -1, dtype=np.int64)
        rows[ok] = row_of_k[k[ok]]
        return rows

    g = np.asarray([gr for rec in mac for gr in rec.grants], dtype=np.int64).reshape(-1, 3)
    if g.size:
        g = np.unique(g, axis=0)  # sorted by (slot, start)
    g_slot, g_start, g_count = g[:, 0], g[:, 1], g[:, 2]
    g_rows = interval_rows(g_slot * tm.SLOT_MS)
    diff = np.zeros((n, bwp_prbs + 1), dtype=np.int64)
    sel = g_rows >= 0
    np.add.at(diff, (g_rows[sel], g_start[sel]), 1)
    np.add.at(diff, (g_rows[sel], g_start[sel] + g_count[sel]), -1)
    masks = _mask_ints(np.cumsum(diff, axis=1)[:, :bwp_prbs] > 0)

    offgrant = np.full(n, -np.inf)
    ingrant = np.full(n, -np.inf)
    if len(spectrum):
        c_slot = np.round(spectrum.t_ms / tm.SLOT_MS).astype(np.int64)
        c_prb = spectrum.prb.astype(np.int64)
        c_rows = interval_rows(spectrum.t_ms)
        # cell is in-grant when a grant of the same slot spans its PRB
        key_g = g_slot * (bwp_prbs + 1) + g_start
        key_c = c_slot * (bwp_prbs + 1) + c_prb
        j = np.searchsorted(key_g, key_c, side="right") - 1
        jj = np.maximum(j, 0)
        inside = (j >= 0) & (g_slot[jj] == c_slot) & (c_prb < g_start[jj] + g_count[jj]) if g.size else np.zeros(len(c_slot), bool)
        sel = c_rows >= 0
        np.maximum.at(ingrant, c_rows[sel & inside], spectrum.energy_db[sel & inside])
        np.maximum.at(offgrant, c_rows[sel & ~inside], spectrum.energy_db[sel & ~inside])
    offgrant[np.isneginf(offgrant)] = np.nan
    ingrant[np.isneginf(ingrant)] = np.nan

    if len(spectrum):
        lo, hi = spectrum.t_ms.min(), spectrum.t_ms.max()
        spec_ok = (t + GRID_MS > lo) & (t <= hi)
    else:
        spec_ok = np.zeros(n, dtype=bool)
    coverage = float(np.sum(covered & spec_ok)) / grid_points

    series = FusedSeries(
        ue_id=phy[0].ue_id, t_ms=t,
        snr_db=np.asarray([r.snr_db for r in phy], dtype=float),
        bler=np.asarray([r.bler for r in phy], dtype=float),
        cqi=np.asarray([r.cqi for r in phy], dtype=np.int64),
        ta_units=np.asarray([r.ta_units for r in phy], dtype=np.int64),
        granted_prb_mask=masks, harq_acks=acks, harq_nacks=nacks, ta_command_delta=delta,
        config_index=cfg.astype(np.int64), offgrant_energy_db=offgrant, ingrant_energy_db=ingrant,
        mac_t_ms=mac_start,
    )
    report = FusionReport(fused_count=n, dropped_per_stream=dropped, spectrum_offset_ms=spectrum_offset_ms,
                          coverage=coverage, grid_points=grid_points)
    return series, report


def fuse_run(parsed: ParsedStreams, align: bool = True) -> tuple[FusedSeries, FusionReport]:
    spectrum, offset, ratio = parsed.spectrum, 0.0, None
    if align:
        spectrum, offset, ratio = align_spectrum(parsed.spectrum, parsed.mac)
    series, report = fuse(parsed.phy, parsed.mac, parsed.rrc, spectrum, offset, parsed.dropped)
    report.alignment_ratio = ratio
    return series, report


def fuse_bundle(bundle, align: bool = True) -> tuple[FusedSeries, FusionReport]:
    """Fuse a simulated run straight from memory, skipping the file round trip."""
    parsed = ParsedStreams(bundle.phy, bundle.mac, bundle.rrc, bundle.spectrum,
                           {"phy": 0, "mac": 0, "rrc": 0, "spectrum": 0})
    return fuse_run(parsed, align)


# --------------------------------------------------------------------------- CSV

def _fmt_float(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def write_fused_csv(series: FusedSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FUSED_FIELDS)
        for i in range(len(series)):
            w.writerow([
                int(series.t_ms[i]), series.ue_id, repr(float(series.snr_db[i])), repr(float(series.bler[i])),
                int(series.cqi[i]), int(series.ta_units[i]), format(series.granted_prb_mask[i], f"0{MASK_HEX_DIGITS}x"),
                int(series.harq_acks[i]), int(series.harq_nacks[i]), int(series.ta_command_delta[i]),
                int(series.config_index[i]), _fmt_float(series.offgrant_energy_db[i]),
                _fmt_float(series.ingrant_energy_db[i]), int(series.mac_t_ms[i]),
            ])


def read_fused_csv(path: str | Path) -> FusedSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    opt = lambda s: None if s == "" else float(s)
    samples = [FusedSample(
        t_ms=int(r["t_ms"]), ue_id=r["ue_id"], snr_db=float(r["snr_db"]), bler=float(r["bler"]), cqi=int(r["cqi"]),
        ta_units=int(r["ta_units"]), granted_prb_mask=int(r["granted_prb_mask"], 16), harq_acks=int(r["harq_acks"]),
        harq_nacks=int(r["harq_nacks"]), ta_command_delta=int(r["ta_command_delta"]),
        config_index=int(r["config_index"]), offgrant_energy_db=opt(r["offgrant_energy_db"]),
        ingrant_energy_db=opt(r["ingrant_energy_db"]), mac_t_ms=int(r["mac_t_ms"]),
    ) for r in rows]
    return FusedSeries.from_samples(samples)
