import pytest

from uplink_coherence.sim import ScenarioSpec, simulate_run


@pytest.fixture(scope="session")
def bundles():
    """A handful of seed-7 six-minute runs shared by the simulator and fusion tests."""
    specs = {
        "baseline": ScenarioSpec(seed=7),
        "power4": ScenarioSpec(kind="power_offset", offset_db=4.0, seed=7),
        "drift04": ScenarioSpec(kind="ta_drift", units_per_min=0.4, seed=7),
        "drift09": ScenarioSpec(kind="ta_drift", units_per_min=0.9, seed=7),
        "offgrant05": ScenarioSpec(kind="offgrant", duty_fraction=0.05, seed=7),
    }
    return {k: simulate_run(v) for k, v in specs.items()}


@pytest.fixture(scope="session")
def fused(bundles):
    from uplink_coherence.align import fuse_bundle

    return {k: fuse_bundle(b) for k, b in bundles.items()}
