"""Telemetry record types shared by the simulator, the fusion stage and the rules.

Every stream is JSON Lines with a ``kind`` discriminator.  Records are frozen
dataclasses; unknown keys found while decoding are kept in ``extras`` so a
decode/encode cycle reproduces the input bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

REFERENCE_BWP_PRBS = 106
REFERENCE_SCS_KHZ = 30
SLOT_MS = 0.5
PHY_PERIOD_MS = 50
MAC_PERIOD_MS = 100
NOISE_FLOOR_DB = -10.0


@dataclass(frozen=True)
class PhySample:
    t_ms: int
    ue_id: str
    snr_db: float
    bler: float
    cqi: int
    ta_units: int
    held: bool = False
    extras: dict = field(default_factory=dict, compare=True, repr=False)

    kind = "phy"


@dataclass(frozen=True)
class MacRecord:
    t_ms: int
    ue_id: str
    grants: tuple  # ((slot_index, prb_start, prb_count), ...)
    harq_acks: int
    harq_nacks: int
    mcs: int
    ta_command_delta: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    kind = "mac"


@dataclass(frozen=True)
class ConfigSnapshot:
    t_ms: int
    ue_id: str
    p0_nominal_dbm: float
    alpha: float
    bwp_prbs: int
    scs_khz: int
    slice_id: int
    qos_5qi: int
    mcs_table_id: int
    ta_granularity_us: float
    extras: dict = field(default_factory=dict, repr=False)

    kind = "rrc"


@dataclass(frozen=True)
class SpectrumFrame:
    # slot start time; a multiple of 0.5 ms, so exactly representable
    t_ms: float
    energized: tuple  # ((prb_index, energy_db), ...)
    noise_floor_db: float = NOISE_FLOOR_DB
    extras: dict = field(default_factory=dict, repr=False)

    kind = "spectrum"


@dataclass(frozen=True)
class FusedSample:
    t_ms: int
    ue_id: str
    snr_db: float
    bler: float
    cqi: int
    ta_units: int
    granted_prb_mask: int
    harq_acks: int
    harq_nacks: int
    ta_command_delta: int
    config_index: int
    offgrant_energy_db: float | None
    ingrant_energy_db: float | None
    # start of the covering MAC record, -1 when no record covers the point
    mac_t_ms: int = -1


RECORD_TYPES = {cls.kind: cls for cls in (PhySample, MacRecord, ConfigSnapshot, SpectrumFrame)}
STREAM_FILES = {"phy": "phy.jsonl", "mac": "mac.jsonl", "rrc": "rrc.jsonl", "spectrum": "spectrum.jsonl"}


class TelemetryError(ValueError):
    pass


# --------------------------------------------------------------------------- validation

def _finite(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(record, bwp_prbs: int = REFERENCE_BWP_PRBS) -> list[str]:
    """Return the list of violated invariants; an empty list means the record passes."""
    problems: list[str] = []
    if isinstance(record, PhySample):
        if not _is_int(record.t_ms) or record.t_ms < 0:
            problems.append("t_ms must be a non-negative integer")
        if not _finite(record.snr_db):
            problems.append("snr_db not finite")
        if not _finite(record.bler) or not 0.0 <= record.bler <= 1.0:
            problems.append("bler out of range")
        if not _is_int(record.cqi) or not 0 <= record.cqi <= 15:
            problems.append("cqi out of range")
        if not _is_int(record.ta_units) or record.ta_units < 0:
            problems.append("ta_units out of range")
    elif isinstance(record, MacRecord):
        if not _is_int(record.t_ms) or record.t_ms < 0:
            problems.append("t_ms must be a non-negative integer")
        for name in ("harq_acks", "harq_nacks", "mcs"):
            v = getattr(record, name)
            if not _is_int(v) or v < 0:
                problems.append(f"{name} must be a non-negative integer")
        if not _is_int(record.ta_command_delta):
            problems.append("ta_command_delta must be an integer")
        cells: dict[int, list[tuple[int, int]]] = {}
        for g in record.grants:
            if len(g) != 3 or not all(_is_int(v) for v in g):
                problems.append("malformed grant")
                continue
            slot, start, count = g
            if slot < 0 or start < 0 or count <= 0 or start + count > bwp_prbs:
                problems.append("grant outside bandwidth part")
                continue
            cells.setdefault(slot, []).append((start, start + count))
        for spans in cells.values():
            spans.sort()
            if any(b[0] < a[1] for a, b in zip(spans, spans[1:])):
                problems.append("overlapping grants")
                break
    elif isinstance(record, ConfigSnapshot):
        if not _is_int(record.t_ms) or record.t_ms < 0:
            problems.append("t_ms must be a non-negative integer")
        if not _finite(record.alpha) or not 0.0 <= record.alpha <= 1.0:
            problems.append("alpha out of range")
        if not _finite(record.p0_nominal_dbm):
            problems.append("p0_nominal_dbm not finite")
        if not _is_int(record.bwp_prbs) or record.bwp_prbs <= 0:
            problems.append("bwp_prbs must be positive")
        if not _is_int(record.scs_khz) or record.scs_khz not in (15, 30, 60, 120):
            problems.append("scs_khz not a valid numerology")
        if not _finite(record.ta_granularity_us) or record.ta_granularity_us <= 0:
            problems.append("ta_granularity_us must be positive")
    elif isinstance(record, SpectrumFrame):
        if not _finite(record.t_ms) or record.t_ms < 0 or (record.t_ms * 2) % 1:
            problems.append("t_ms must be a non-negative multiple of the slot length")
        if not _finite(record.noise_floor_db):
            problems.append("noise_floor_db not finite")
        for cell in record.energized:
            if len(cell) != 2 or not _is_int(cell[0]) or not _finite(cell[1]):
                problems.append("malformed cell")
                break
            prb, energy = cell
            if not 0 <= prb < bwp_prbs:
                problems.append("prb_index outside bandwidth part")
                break
            if energy <= record.noise_floor_db:
                problems.append("cell at or below noise floor")
                break
    else:
        problems.append(f"unsupported record type {type(record).__name__}")
    return problems


# --------------------------------------------------------------------------- JSON Lines

def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls) if f.name != "extras"]


def to_dict(record) -> dict:
    out: dict[str, Any] = {"kind": record.kind}
    for name in _field_names(type(record)):
        v = getattr(record, name)
        if isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[name] = v
    for k in sorted(record.extras):
        out[k] = record.extras[k]
    return out


def encode_record(record) -> str:
    return json.dumps(to_dict(record), separators=(",", ":"), allow_nan=False)


def encode_stream(records: Iterable) -> bytes:
    """Encode records as JSON Lines; the empty list encodes to an empty byte string."""
    return "".join(encode_record(r) + "\n" for r in records).encode("utf-8")


# fields that may be absent from a line and take the dataclass default
_OPTIONAL = {"phy": {"held"}, "mac": {"ta_command_delta"}, "spectrum": {"noise_floor_db"}}


def from_dict(obj: dict, kind: str):
    cls = RECORD_TYPES[kind]
    if obj.get("kind", kind) != kind:
        raise TelemetryError(f"kind mismatch: {obj.get('kind')!r}")
    kwargs = {}
    for name in _field_names(cls):
        if name not in obj:
            if name in _OPTIONAL.get(kind, ()):
                continue
            raise TelemetryError(f"missing field {name}")
        v = obj[name]
        if name in ("grants", "energized"):
            if not isinstance(v, list) or not all(isinstance(x, list) for x in v):
                raise TelemetryError(f"{name} must be a list of lists")
            v = tuple(tuple(x) for x in v)
        kwargs[name] = v
    extras = {k: v for k, v in obj.items() if k != "kind" and k not in kwargs and k not in _field_names(cls)}
    return cls(**kwargs, extras=extras)


@dataclass
class DecodeResult:
    records: list
    dropped_count: int = 0
    # unknown keys seen, kept in extras; reported so callers can warn
    rejected_keys: set = field(default_factory=set)
    errors: list = field(default_factory=list)


def decode_stream(data: bytes | str, kind: str) -> DecodeResult:
    """Decode a JSON Lines stream of one kind.

    Malformed lines (bad JSON, missing fields, wrong kind) are skipped and
    counted rather than raising.
    """
    if kind not in RECORD_TYPES:
        raise TelemetryError(f"unknown stream kind {kind!r}")
    text = data.decode("utf-8", errors="replace") if isinstance(data, bytes) else data
    result = DecodeResult(records=[])
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise TelemetryError("line is not an object")
            rec = from_dict(obj, kind)
        except (ValueError, TypeError) as exc:
            result.dropped_count += 1
            result.errors.append((lineno, str(exc)))
            continue
        result.rejected_keys.update(rec.extras)
        result.records.append(rec)
    return result
