import json
import random

import numpy as np
import pytest

from uplink_coherence import telemetry as tm
from uplink_coherence.align import (
    AlignmentError, FusedSeries, FusionError, StreamNotFound, align_spectrum, estimate_spectrum_offset, fuse,
    fuse_bundle, fuse_run, parse_streams, read_fused_csv, write_fused_csv,
)
from uplink_coherence.sim import ScenarioSpec, SimConfig, SpectrumCells, simulate_run
from uplink_coherence.telemetry import MacRecord, PhySample, SpectrumFrame


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, bundles):
    return bundles["offgrant05"].write(tmp_path_factory.mktemp("run") / "r")


def phy(t, **kw):
    return PhySample(**{**dict(t_ms=t, ue_id="u", snr_db=18.0 + t / 1000, bler=0.0, cqi=11, ta_units=3), **kw})


def mac(t, grants, **kw):
    return MacRecord(**{**dict(t_ms=t, ue_id="u", grants=tuple(grants), harq_acks=len(grants), harq_nacks=0,
                               mcs=20), **kw})


RRC = [SimConfig().snapshot(0)]


class TestParse:
    def test_pristine_has_no_drops(self, run_dir):
        p = parse_streams(run_dir)
        assert p.dropped == {"phy": 0, "mac": 0, "rrc": 0, "spectrum": 0}
        assert len(p.phy) == 7200 and len(p.mac) == 3600

    def test_three_lines_without_timestamp(self, tmp_path, bundles):
        d = bundles["baseline"].write(tmp_path / "r")
        lines = (d / "phy.jsonl").read_text().splitlines()
        for i in (5, 500, 5000):
            obj = json.loads(lines[i])
            del obj["t_ms"]
            lines[i] = json.dumps(obj)
        (d / "phy.jsonl").write_text("\n".join(lines) + "\n")
        p = parse_streams(d)
        assert p.dropped["phy"] == 3 and len(p.phy) == 7197
        series, report = fuse_run(p)
        assert report.dropped_per_stream["phy"] == 3
        # dropped grid points are omitted, never interpolated
        assert len(series) == 7197 and report.grid_points == 7200
        assert report.coverage == pytest.approx(7197 / 7200)

    def test_invalid_records_dropped(self, tmp_path):
        d = simulate_run(ScenarioSpec(duration_s=180, seed=2)).write(tmp_path / "r")
        lines = (d / "phy.jsonl").read_text().splitlines()
        obj = json.loads(lines[10])
        obj["cqi"] = 17
        lines[10] = json.dumps(obj)
        (d / "phy.jsonl").write_text("\n".join(lines) + "\n")
        assert parse_streams(d).dropped["phy"] == 1

    def test_missing_stream(self, tmp_path, run_dir):
        d = tmp_path / "partial"
        d.mkdir()
        for name in ("phy.jsonl", "mac.jsonl", "rrc.jsonl"):
            (d / name).write_bytes((run_dir / name).read_bytes())
        with pytest.raises(StreamNotFound, match="stream not found: spectrum"):
            parse_streams(d)

    def test_file_and_memory_paths_agree(self, run_dir, fused):
        series, _ = fuse_run(parse_streams(run_dir))
        assert series.equals(fused["offgrant05"][0])


class TestAlignment:
    @pytest.mark.parametrize("offset", [-500.0, -499.5, -130.0, 0.0, 0.5, 130.0, 317.5, 500.0])
    def test_offset_recovery(self, offset):
        b = simulate_run(ScenarioSpec(duration_s=180, seed=3, spectrum_offset_ms=offset))
        series, report = fuse_bundle(b)
        assert abs(report.spectrum_offset_ms - offset) <= 0.5
        assert report.alignment_ratio >= 1.2

    def test_shift_sign(self):
        b = simulate_run(ScenarioSpec(duration_s=180, seed=3, spectrum_offset_ms=130.0))
        shifted, off, _ = align_spectrum(b.spectrum, b.mac)
        assert off == 130.0
        assert shifted.t_ms.min() == pytest.approx(b.spectrum.t_ms.min() - 130.0)

    def test_no_grants_is_ambiguous(self):
        cells = SpectrumCells.from_frames([SpectrumFrame(0.5 * k, ((3, 1.0),)) for k in range(0, 40000, 7)])
        with pytest.raises(AlignmentError, match="alignment ambiguous"):
            estimate_spectrum_offset(cells, [mac(0, [])])

    def test_noise_is_ambiguous(self):
        rng = np.random.default_rng(0)
        slots = np.flatnonzero(rng.random(40000) < 0.3)
        cells = SpectrumCells.from_frames([SpectrumFrame(0.5 * s, ((3, 1.0),)) for s in slots])
        grants = [(int(s), 0, 8) for s in np.flatnonzero(rng.random(40000) < 0.3)]
        recs = [mac(100 * m, [g for g in grants if 200 * m <= g[0] < 200 * (m + 1)]) for m in range(200)]
        with pytest.raises(AlignmentError, match="alignment ambiguous"):
            estimate_spectrum_offset(cells, recs)


class TestFuse:
    def test_hold_forward(self):
        series, _ = fuse([phy(100), phy(150)], [mac(100, [(200, 0, 8), (310, 20, 4)])], RRC, SpectrumCells.empty())
        assert series.granted_prb_mask == [0xFF, 0xF << 20]
        assert series.harq_acks.tolist() == [2, 2] and series.mac_t_ms.tolist() == [100, 100]

    def test_offgrant_cell_lands_in_its_interval(self):
        cells = SpectrumCells.from_frames([SpectrumFrame(70.0, ((50, 4.5),)), SpectrumFrame(100.0, ((2, 7.0),))])
        recs = [mac(0, [(200, 0, 8)]), mac(100, [(200, 0, 8)])]
        s = list(fuse([phy(0), phy(50), phy(100)], recs, RRC, cells)[0].samples())
        assert s[0].offgrant_energy_db is None
        assert s[1].offgrant_energy_db == 4.5
        assert s[2].ingrant_energy_db == 7.0 and s[2].offgrant_energy_db is None

    def test_missing_config_is_fatal(self):
        late = [SimConfig().snapshot(100)]
        with pytest.raises(FusionError):
            fuse([phy(0), phy(50)], [mac(0, [])], late, SpectrumCells.empty())

    def test_config_hold_forward(self):
        cfgs = [SimConfig().snapshot(0), SimConfig().snapshot(100)]
        s = fuse([phy(t) for t in range(0, 250, 50)], [mac(0, [])], cfgs, SpectrumCells.empty())[0]
        assert s.config_index.tolist() == [0, 0, 1, 1, 1]

    def test_off_grid_and_duplicate_phy_dropped(self):
        s, rep = fuse([phy(0), phy(25), phy(50), phy(50)], [mac(0, [])], RRC, SpectrumCells.empty())
        assert s.t_ms.tolist() == [0, 50] and rep.dropped_per_stream["phy"] == 2

    def test_baseline_has_no_offgrant(self, fused):
        series, report = fused["baseline"]
        assert np.all(np.isnan(series.offgrant_energy_db))
        assert report.coverage == 1.0 and report.fused_count == 7200

    @pytest.mark.parametrize("name", ["baseline", "power4", "drift04", "drift09", "offgrant05"])
    def test_no_smoothing(self, bundles, fused, name):
        raw, series = bundles[name], fused[name][0]
        for field in ("snr_db", "bler", "cqi", "ta_units"):
            assert set(getattr(series, field).tolist()) <= {getattr(p, field) for p in raw.phy}
        by_t = {p.t_ms: p for p in raw.phy}
        assert all(by_t[t].snr_db == x for t, x in zip(series.t_ms.tolist(), series.snr_db.tolist()))

    def test_invariants(self, fused):
        for series, report in fused.values():
            assert np.all(np.diff(series.t_ms) == 50)
            assert report.fused_count * 50 <= 360_000 and 0 <= report.coverage <= 1

    def test_order_independence_and_idempotence(self):
        b = simulate_run(ScenarioSpec(duration_s=180, seed=4, kind="offgrant", duty_fraction=0.05))
        ref, _ = fuse(b.phy, b.mac, b.rrc, b.spectrum)
        rnd = random.Random(1)
        phy_s, mac_s = b.phy[:], b.mac[:]
        rnd.shuffle(phy_s)
        rnd.shuffle(mac_s)
        perm = np.random.default_rng(1).permutation(len(b.spectrum))
        sp = SpectrumCells(b.spectrum.t_ms[perm], b.spectrum.prb[perm], b.spectrum.energy_db[perm], -10.0)
        assert fuse(phy_s, mac_s, b.rrc, sp)[0].equals(ref)
        assert fuse(b.phy, b.mac, b.rrc, b.spectrum)[0].equals(ref)

    def test_csv_round_trip(self, tmp_path, fused):
        series = fused["offgrant05"][0]
        p = tmp_path / "fused.csv"
        write_fused_csv(series, p)
        header = p.read_text().splitlines()[0].split(",")
        assert header == [f for f in tm.FusedSample.__dataclass_fields__]
        back = read_fused_csv(p)
        assert back.equals(series)
        write_fused_csv(back, tmp_path / "again.csv")
        assert (tmp_path / "again.csv").read_bytes() == p.read_bytes()

    def test_samples_round_trip(self, fused):
        series = fused["offgrant05"][0].take(np.arange(0, 7200, 37))
        assert FusedSeries.from_samples(series.samples()).equals(series)
