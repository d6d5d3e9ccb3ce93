"""Cross-layer consistency checks over simulated 5G SA uplink telemetry."""

__version__ = "0.1.0"
