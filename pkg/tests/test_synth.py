import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from scipy import stats as sst

from drivetel.errors import ConfigError
from drivetel.evt import GpdFit, gpd_cdf
from drivetel.ingest import build_trips, inventory_report, parse_can_log, parse_phone_log
from drivetel.mapmatch import load_network
from drivetel.pipeline import PipelineConfig, smooth_phone
from drivetel.synth import SynthConfig, drive_cycle, generate_dataset, sample_gpd, simulate

SMALL = dict(n_trips=12, trip_duration=(200.0, 400.0), can_channels=("speed", "rpm"))


@pytest.fixture(scope="module")
def small_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return generate_dataset(SynthConfig(seed=5, **SMALL), out)


def test_sample_gpd_endpoints_and_inverse():
    assert sample_gpd(1, 1.0, 0.5, uniforms=[0.0])[0] == 0.0
    assert sample_gpd(1, 1.0, 0.5, uniforms=[0.5556])[0] == pytest.approx(2 * (0.4444 ** -0.5 - 1), abs=1e-12)
    assert sample_gpd(1, 1.0, 0.5, uniforms=[0.5556])[0] == pytest.approx(1.0, abs=1e-3)
    assert sample_gpd(1, 2.0, 0.0, uniforms=[0.5])[0] == pytest.approx(2 * np.log(2))


def test_sample_gpd_mean():
    x = sample_gpd(1_000_000, 1.0, 0.2, seed=0)
    assert x.mean() == pytest.approx(1.25, abs=0.01)


def test_sample_gpd_matches_cdf():
    x = sample_gpd(10_000, 1.3, 0.25, seed=1)
    fit = GpdFit(0.0, 1.3, 0.25, 1.0, len(x), len(x), 0.0)
    d = sst.kstest(x, lambda a: gpd_cdf(a, fit)).statistic
    assert d < 1.628 / np.sqrt(len(x))


def test_sample_gpd_validation():
    with pytest.raises(ConfigError):
        sample_gpd(10, 0.0, 0.1)
    with pytest.raises(ConfigError):
        sample_gpd(0, 1.0, 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(phone_rate=0)
    with pytest.raises(ConfigError):
        SynthConfig(xi_active=1.0)
    with pytest.raises(ConfigError):
        SynthConfig(active_fraction=1.5)
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"bogus": 1})
    cfg = SynthConfig(seed=3)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_determinism(tmp_path, small_files):
    again = generate_dataset(SynthConfig(seed=5, **SMALL), tmp_path)
    for name, p in small_files.items():
        assert p.read_bytes() == again[name].read_bytes()


def test_different_seed_differs(tmp_path, small_files):
    other = generate_dataset(SynthConfig(seed=6, **SMALL), tmp_path)
    assert other["phone"].read_bytes() != small_files["phone"].read_bytes()


def test_trip_streams_independent_of_trip_count():
    a = simulate(SynthConfig(seed=9, n_trips=3, trip_duration=(100, 150)))
    b = simulate(SynthConfig(seed=9, n_trips=5, trip_duration=(100, 150)))
    assert [t.phone for t in a.trips] == [t.phone for t in b.trips[:3]]


def test_phone_deltas_one_second_outside_gaps(small_files):
    phone = parse_phone_log(small_files["phone"])
    by_trip = {}
    for r in phone:
        by_trip.setdefault(r.trip_id, []).append(r.timestamp)
    n_one = n_gap = 0
    for ts in by_trip.values():
        d = np.diff(ts)
        assert np.all(d == np.round(d))
        n_one += int(np.sum(d == 1.0))
        n_gap += int(np.sum(d != 1.0))
        assert np.all((d == 1.0) | (d >= 2.0))
    assert n_one > 50 * max(n_gap, 1)


def test_output_passes_ingest_and_preprocess(small_files):
    phone = parse_phone_log(small_files["phone"])
    can, unmapped = parse_can_log(small_files["can"])
    assert not unmapped
    trips = build_trips(phone + can)
    rep = inventory_report(phone + can, trips)
    assert {r["channel"] for r in rep.rows()} == {"speed", "rpm"}
    sm = smooth_phone(phone, PipelineConfig())
    # only idle runs are dropped, so every moving fix survives cleaning
    moving = sum(r.speed > 0 for r in phone)
    assert sm.n_pieces > 0 and sum(len(a) for a in sm.acceleration) >= moving
    load_network(small_files["network"])


def test_truth_file(small_files):
    truth = json.loads(small_files["truth"].read_text())
    schema = json.loads(resources.files("drivetel").joinpath("schemas", "truth.schema.json").read_text())
    jsonschema.validate(truth, schema)
    assert len(truth["trips"]) == SMALL["n_trips"]


def test_truth_segment_within_candidate_radius(small_files):
    truth = json.loads(small_files["truth"].read_text())
    net = load_network(small_files["network"])
    phone = parse_phone_log(small_files["phone"])
    by_key = {(r.trip_id, r.timestamp): r for r in phone}
    for trip in truth["trips"]:
        recs = [by_key[(trip["trip_id"], t)] for t in trip["phone_timestamps"]]
        cands = net.candidates_many([r.latitude for r in recs], [r.longitude for r in recs], 50.0)
        for (segs, _, _), true in zip(cands, trip["true_segment"]):
            assert net.index[true] in segs.tolist()


def test_tail_99th_percentile_heavier_inactive():
    cfg = SynthConfig(seed=13, xi_active=0.1, xi_inactive=0.2)
    q = {}
    for active in (True, False):
        rng = np.random.default_rng(100 + active)
        vals = []
        while sum(len(v) for v in vals) < 100_000:
            _, _, acc, _ = drive_cycle(cfg, rng, 1200.0, active)
            vals.append(np.abs(acc[::30]))
        q[active] = np.quantile(np.concatenate(vals), 0.99)
    assert q[False] > q[True]


def test_drive_cycle_kinematics():
    cfg = SynthConfig()
    t, v, a, s = drive_cycle(cfg, np.random.default_rng(0), 600.0, False)
    assert np.all(v >= 0) and v.max() <= cfg.max_speed + 1e-9
    assert np.all(np.diff(s) >= 0)
    assert a.max() <= 3.9 and a.min() >= -5.9
    assert t[30] == 1.0


def test_unwritable_directory(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(ConfigError):
        generate_dataset(SynthConfig(**SMALL), f / "sub")
