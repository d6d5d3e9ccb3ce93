import math

import numpy as np
import pytest

from uplink_coherence import telemetry as tm
from uplink_coherence.sim import (
    ChannelState, CqiReporter, GnbParams, ScenarioError, ScenarioSpec, SimConfig, SlotBatch, UeState,
    apply_manipulation, ar1_fading, cqi_from_quality, emit_mac_trace, emit_phy_report, emit_spectrum_frame,
    load_scenario, simulate_run, step_power_control,
)
from uplink_coherence.sim.models import CQI_KNOTS_DB, ta_drift_units
from uplink_coherence.sim.scenario import dump_scenario


def stream_bytes(b):
    return (tm.encode_stream(b.phy), tm.encode_stream(b.mac), tm.encode_stream(b.rrc),
            "".join(b.spectrum.encode_lines()))


def snapshot(**kw):
    return SimConfig().snapshot(0).__class__(**{**SimConfig().snapshot(0).__dict__, **kw})


class TestScenario:
    def test_labels(self):
        assert ScenarioSpec().label == "baseline"
        assert ScenarioSpec(kind="power_offset", offset_db=2).label == "power_offset_+2dB"
        assert ScenarioSpec(kind="ta_drift", units_per_min=0.9).label == "ta_drift_0.9"
        assert ScenarioSpec(kind="offgrant", duty_fraction=0.025).label == "offgrant_0.025"

    @pytest.mark.parametrize("kw", [
        {"duration_s": 120}, {"duration_s": 400}, {"duration_s": 200.05}, {"traffic_load": 0},
        {"kind": "offgrant", "duty_fraction": 0.0}, {"kind": "wobble"}, {"seed": -1},
        {"spectrum_offset_ms": 0.3}, {"spectrum_offset_ms": 600},
    ])
    def test_rejected_before_simulation(self, kw):
        with pytest.raises(ScenarioError):
            simulate_run(ScenarioSpec(**kw))

    def test_file_round_trip(self, tmp_path):
        sc = ScenarioSpec(kind="ta_drift", units_per_min=0.4, duration_s=240, seed=11)
        p = tmp_path / "s.txt"
        p.write_text("# drift run\n" + dump_scenario(sc))
        assert load_scenario(p) == sc

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("kind = baseline\ncolour = red\n")
        with pytest.raises(ScenarioError):
            load_scenario(p)


class TestModels:
    def test_fading_is_stationary(self):
        x = ar1_fading(200_000, ChannelState(-95.0), np.random.default_rng(3))
        assert abs(x.std() - 0.45) < 0.045

    def test_power_open_loop_only(self):
        cfg = snapshot(alpha=0.0, p0_nominal_dbm=-10.0)
        gnb = GnbParams()
        ue = step_power_control(UeState(0.0), cfg, ChannelState(-95.0), gnb, measured_snr_db=gnb.snr_target_db)
        assert ue.tx_power_dbm == cfg.p0_nominal_dbm

    def test_power_clamped(self):
        ue = step_power_control(UeState(0.0), snapshot(p0_nominal_dbm=0.0, alpha=1.0), ChannelState(-95.0))
        assert ue.tx_power_dbm == 23.0
        ue = step_power_control(UeState(0.0), snapshot(p0_nominal_dbm=-200.0), ChannelState(-95.0))
        assert ue.tx_power_dbm == -40.0

    def _converge(self, cfg, channel, ue=None, steps=400):
        gnb = GnbParams()
        ue = ue or UeState(0.0)
        for _ in range(steps):
            ue = step_power_control(ue, cfg, channel, gnb)
        return ue, ue.tx_power_dbm + channel.mean_gain_db - gnb.noise_dbm

    def test_closed_loop_converges_to_target(self):
        _, snr = self._converge(snapshot(), ChannelState(-95.0))
        assert abs(snr - GnbParams().snr_target_db) <= 0.25

    def test_pathloss_step_alpha_one(self):
        cfg = snapshot(alpha=1.0, p0_nominal_dbm=-90.0)
        ue, _ = self._converge(cfg, ChannelState(-95.0))
        ue2, _ = self._converge(cfg, ChannelState(-98.0), ue)
        assert ue2.tx_power_dbm - ue.tx_power_dbm == pytest.approx(3.0, abs=1e-6)

    @pytest.mark.parametrize("i", range(16))
    def test_cqi_knot_identity(self, i):
        assert cqi_from_quality(CQI_KNOTS_DB[i]) == i

    def test_cqi_clamped(self):
        assert cqi_from_quality(-40) == 0 and cqi_from_quality(40) == 15

    def test_cqi_step_response(self):
        q0 = CQI_KNOTS_DB[10]
        rep = CqiReporter(2.0, 0.05)
        for _ in range(2000):
            assert rep.report(q0) == 10
        target = cqi_from_quality(q0 + 1.5)
        assert target == 11
        # closed form: the EMA must cover the share of the step that lifts the index past x.5
        share = (0.5 * (CQI_KNOTS_DB[11] - CQI_KNOTS_DB[10])) / 1.5
        k_expected = math.ceil(math.log(1 - share) / math.log(2 ** (-0.05 / 2.0)))
        k = next(k for k in range(1, 1000) if rep.report(q0 + 1.5) == target)
        assert k == k_expected
        assert k * 0.05 <= 6.0

    def test_drift_units(self):
        assert ta_drift_units(0.4, 300.0) == pytest.approx(2.0)


class TestEmitters:
    def test_all_decoded_gives_zero_bler(self):
        s = emit_phy_report(50, "u", [18.0, 18.2], [False, False], 11, 3)
        assert s.bler == 0.0 and s.snr_db == pytest.approx(18.1) and not s.held

    def test_empty_window_holds(self):
        prev = emit_phy_report(0, "u", [18.0], [True], 11, 3)
        s = emit_phy_report(50, "u", [], [], 12, 4, prev)
        assert s.held and s.t_ms == 50 and s.snr_db == prev.snr_db and s.cqi == prev.cqi

    def test_mac_trace_counts(self):
        m = emit_mac_trace(100, "u", [200, 205], [0, 10], [8, 8], [False, True], 20, -1)
        assert m.grants == ((200, 0, 8), (205, 10, 8))
        assert (m.harq_acks, m.harq_nacks, m.ta_command_delta) == (1, 1, -1)

    def test_spectrum_frame_sparse(self):
        f = emit_spectrum_frame(1.5, [0, 1, 2], [-12.0, -10.0, 5.0])
        assert f.energized == ((2, 5.0),)

    def test_baseline_manipulation_rejected(self):
        b = SlotBatch(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1, bool), np.zeros(1, int), np.zeros(1, int))
        with pytest.raises(ValueError):
            apply_manipulation(b, ScenarioSpec(), SimConfig())

    def test_power_offset_clamped(self):
        b = SlotBatch(np.zeros(2), np.array([10.0, 21.0]), np.zeros(2), np.ones(2, bool), np.zeros(2, int),
                      np.full(2, 8))
        out = apply_manipulation(b, ScenarioSpec(kind="power_offset", offset_db=4.0), SimConfig())
        assert out.tx_power_dbm.tolist() == [14.0, 23.0]
        assert b.tx_power_dbm.tolist() == [10.0, 21.0]


class TestRuns:
    def test_determinism(self):
        sc = ScenarioSpec(duration_s=180, seed=7, kind="offgrant", duty_fraction=0.05)
        assert stream_bytes(simulate_run(sc)) == stream_bytes(simulate_run(sc))

    def test_cadences(self, bundles):
        b = bundles["baseline"]
        assert [p.t_ms for p in b.phy] == list(range(0, 360_000, 50))
        assert [m.t_ms for m in b.mac] == list(range(0, 360_000, 100))
        assert len(b.rrc) == 1 and b.rrc[0].t_ms == 0

    def test_baseline_envelope(self, bundles):
        b = bundles["baseline"]
        snr = np.array([p.snr_db for p in b.phy])
        assert np.mean(np.abs(snr - snr.mean()) <= 0.9) >= 0.95
        cqi = np.array([p.cqi for p in b.phy])
        mode = np.bincount(cqi).argmax()
        assert np.all(np.abs(cqi - mode) <= 1)
        ta = np.array([p.ta_units for p in b.phy])
        assert np.all(np.abs(ta - GnbParams().ta_geometric_units) <= 1)
        assert np.all(np.abs(b.truth["timing_units"]) < 1)

    def test_baseline_bler_near_one_percent(self, bundles):
        bler = np.mean([p.bler for p in bundles["baseline"].phy])
        assert 0.005 < bler < 0.02

    @pytest.mark.parametrize("name", ["baseline", "power4", "drift09"])
    def test_no_offgrant_energy_without_bursts(self, bundles, name):
        b = bundles[name]
        tr = b.truth
        for f in b.spectrum.frames():
            s = int(round(f.t_ms / tm.SLOT_MS))
            assert tr["granted"][s]
            lo, hi = tr["grant_start"][s], tr["grant_start"][s] + tr["grant_count"][s]
            assert all(lo <= p < hi for p, _ in f.energized)

    def test_power_offset_isolation(self, bundles):
        base, pw = bundles["baseline"], bundles["power4"]
        assert tm.encode_stream(pw.rrc) == tm.encode_stream(base.rrc)
        assert [m.grants for m in pw.mac] == [m.grants for m in base.mac]
        assert [p.cqi for p in pw.phy] == [p.cqi for p in base.phy]
        uplift = np.median([p.snr_db for p in pw.phy]) - np.median([p.snr_db for p in base.phy])
        assert 3.2 <= uplift <= 4.2

    def test_manipulations_leave_rrc_alone(self, bundles):
        ref = tm.encode_stream(bundles["baseline"].rrc)
        assert all(tm.encode_stream(b.rrc) == ref for b in bundles.values())

    @pytest.mark.parametrize("name,rate", [("drift04", 0.4), ("drift09", 0.9)])
    def test_drift_linearity(self, bundles, name, rate):
        b, base = bundles[name], bundles["baseline"]
        t = np.array([p.t_ms for p in b.phy]) / 1000.0
        cmd = np.cumsum([m.ta_command_delta for m in b.mac])
        cum = np.repeat(cmd, 2)
        est = np.array([p.ta_units for p in b.phy]) - cum - np.array([p.ta_units for p in base.phy])
        slope = np.polyfit(t, est, 1)[0]
        assert slope == pytest.approx(rate / 60.0, rel=0.10)

    def test_drift_true_offset_at_300s(self, bundles):
        tu = bundles["drift04"].truth["timing_units"]
        assert tu[600_000] == pytest.approx(2.0)

    def test_drift_departs_within_first_minute(self, bundles):
        b, base = bundles["drift09"], bundles["baseline"]
        first = next(p.t_ms for p, q in zip(b.phy, base.phy) if p.ta_units != q.ta_units)
        assert first < 60_000

    def test_drift_logs_commands(self, bundles):
        assert any(m.ta_command_delta for m in bundles["drift09"].mac)
        assert not any(m.ta_command_delta for m in bundles["baseline"].mac)

    def test_duty_accuracy(self, bundles):
        b = bundles["offgrant05"]
        assert b.truth["burst"].mean() == pytest.approx(0.05, rel=0.10)
        tr = b.truth
        hit = 0
        for f in b.spectrum.frames():
            s = int(round(f.t_ms / tm.SLOT_MS))
            lo, hi = tr["grant_start"][s], tr["grant_start"][s] + tr["grant_count"][s]
            if any(not (tr["granted"][s] and lo <= p < hi) for p, _ in f.energized):
                hit += 1
        assert hit / len(tr["granted"]) == pytest.approx(0.05, rel=0.10)

    @pytest.mark.parametrize("name", ["baseline", "power4", "drift04", "drift09", "offgrant05"])
    def test_harq_matches_bler(self, bundles, name):
        b = bundles[name]
        acks = sum(m.harq_acks for m in b.mac)
        nacks = sum(m.harq_nacks for m in b.mac)
        mean_bler = np.mean([p.bler for p in b.phy])
        assert abs(nacks / (acks + nacks) - mean_bler) <= 0.02

    def test_mac_grant_recount(self):
        b = simulate_run(ScenarioSpec(duration_s=180, seed=5, traffic_load=0.3))
        granted = b.truth["granted"]
        first = b.mac[0]
        assert len(first.grants) == int(granted[:200].sum())
        assert [g[0] for g in first.grants[:sum(granted[:100])]] == list(np.flatnonzero(granted[:100]))
        for m in b.mac:
            s0 = m.t_ms * 2
            assert [g[0] for g in m.grants] == list(np.flatnonzero(granted[s0:s0 + 200]) + s0)
            assert m.harq_acks + m.harq_nacks == len(m.grants)
        assert abs(granted.mean() - 0.3) < 0.01

    def test_records_validate(self, bundles):
        b = bundles["offgrant05"]
        for rec in b.phy[:500] + b.mac[:200] + b.rrc + list(b.spectrum.frames())[:500]:
            assert tm.validate(rec) == []

    def test_write_manifest(self, tmp_path):
        b = simulate_run(ScenarioSpec(duration_s=180, seed=1))
        d = b.write(tmp_path / "run")
        assert sorted(p.name for p in d.iterdir()) == ["mac.jsonl", "manifest.json", "phy.jsonl", "rrc.jsonl",
                                                        "spectrum.jsonl"]
        dec = tm.decode_stream((d / "spectrum.jsonl").read_bytes(), "spectrum")
        assert dec.dropped_count == 0 and dec.records == list(b.spectrum.frames())
