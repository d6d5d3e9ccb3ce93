"""Scenario descriptions and the flat ``key = value`` scenario file format."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

KINDS = ("baseline", "power_offset", "ta_drift", "offgrant")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "baseline"
    offset_db: float = 0.0
    units_per_min: float = 0.0
    duty_fraction: float = 0.0
    duration_s: float = 360.0
    seed: int = 0
    traffic_load: float = 0.35
    # constant clock error of the external spectrum monitor
    spectrum_offset_ms: float = 0.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if not 180 <= self.duration_s <= 360:
            raise ScenarioError("duration_s must lie in [180, 360]")
        if (self.duration_s * 1000) % 100:
            raise ScenarioError("duration_s must be a whole number of 100 ms intervals")
        if not 0 < self.traffic_load <= 1:
            raise ScenarioError("traffic_load must lie in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        if not math.isfinite(self.offset_db) or abs(self.offset_db) > 30:
            raise ScenarioError("offset_db out of range")
        if not math.isfinite(self.units_per_min) or self.units_per_min < 0:
            raise ScenarioError("units_per_min must be non-negative")
        if self.kind == "offgrant" and not 0 < self.duty_fraction < 0.5:
            raise ScenarioError("duty_fraction must lie in (0, 0.5)")
        if (self.spectrum_offset_ms * 2) % 1 or abs(self.spectrum_offset_ms) > 500:
            raise ScenarioError("spectrum_offset_ms must be a slot multiple within +/-500 ms")

    @property
    def label(self) -> str:
        if self.kind == "power_offset":
            return f"power_offset_{self.offset_db:+g}dB"
        if self.kind == "ta_drift":
            return f"ta_drift_{self.units_per_min:g}"
        if self.kind == "offgrant":
            return f"offgrant_{self.duty_fraction:g}"
        return "baseline"

    def to_dict(self) -> dict:
        return asdict(self)


_FLOAT_KEYS = {"offset_db", "units_per_min", "duty_fraction", "duration_s", "traffic_load", "spectrum_offset_ms"}


def parse_kv(text: str) -> list[tuple[str, str]]:
    """Split ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    return pairs


def scenario_from_mapping(values: dict) -> ScenarioSpec:
    kwargs = {}
    for key, value in values.items():
        if key == "kind":
            kwargs["kind"] = str(value)
        elif key == "seed":
            kwargs["seed"] = int(value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        else:
            raise ScenarioError(f"unknown scenario key {key!r}")
    spec = ScenarioSpec(**kwargs)
    spec.validate()
    return spec


def load_scenario(path: str | Path) -> ScenarioSpec:
    try:
        return scenario_from_mapping(dict(parse_kv(Path(path).read_text())))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def dump_scenario(spec: ScenarioSpec) -> str:
    return "".join(f"{k} = {v}\n" for k, v in spec.to_dict().items())
