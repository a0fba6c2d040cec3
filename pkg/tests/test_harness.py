import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forgelab.core import RngStream
from forgelab.harness.cli import main
from forgelab.harness.experiments import (ExperimentConfig, ExperimentReport, StageError, ablate, aggregate,
                                          check_report, run)
from forgelab.harness.synth import DOMAINS, synth_dataset

# recorded on 1,000 32x32 images from RngStream(0).child("mean")
SYNTH_MEAN = 0.49766804399271153


def tiny(tmp_path, **kw):
    base = dict(n_train=40, n_attack=6, n_reference=20, iterations=30, batch_size=8, features=4, T_S=10, L=5,
                chunk=2, cache_dir=str(tmp_path / "cache"), out=str(tmp_path / "out"), n_detect=4,
                t_grid=[0, 1, 50])
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("shared")


# -- synthetic data ----------------------------------------------------------------

def test_synth_deterministic_per_stream():
    a = synth_dataset(5, 32, RngStream(3).child("d"))
    b = synth_dataset(5, 32, RngStream(3).child("d"))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = synth_dataset(5, 32, RngStream(4).child("d"))
    assert not np.array_equal(a[0], c[0])
    # image i only depends on its own substream
    assert np.array_equal(synth_dataset(2, 32, RngStream(3).child("d"))[1], a[1])


def test_synth_single_small_image():
    (img,) = synth_dataset(1, 16, RngStream(0))
    assert img.shape == (16, 16, 1)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_synth_histogram_span_and_mean():
    d = np.stack(synth_dataset(1000, 32, RngStream(0).child("mean")))
    assert np.all(d.min(axis=(1, 2, 3)) <= 0.1) and np.all(d.max(axis=(1, 2, 3)) >= 0.9)
    assert 0.35 <= d.mean() <= 0.65
    assert d.mean() == pytest.approx(SYNTH_MEAN, rel=1e-12)


def test_synth_rgb_and_errors():
    (img,) = synth_dataset(1, 32, RngStream(1), channels=3)
    assert img.shape == (32, 32, 3)
    with pytest.raises(ValueError):
        synth_dataset(0, 32, RngStream(0))
    with pytest.raises(ValueError):
        synth_dataset(1, 8, RngStream(0))
    with pytest.raises(ValueError, match="domain"):
        synth_dataset(1, 32, RngStream(0), domain="scan")


def test_photo_domain_carries_checkerboard_trace():
    gen = np.stack(synth_dataset(200, 32, RngStream(2), domain="generated"))
    photo = np.stack(synth_dataset(200, 32, RngStream(2), domain="photo"))
    yy, xx = np.mgrid[0:32, 0:32]
    site = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    trace = lambda d: float(np.mean(d.mean(axis=0)[..., 0] * site))
    assert abs(trace(gen)) < 1e-3
    assert trace(photo) > 0.5 * DOMAINS["photo"]["cfa"] * gen.mean()


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(scenario="sample"), dict(scheme="rivagan"), dict(n_attack=0),
                                 dict(jobs=0), dict(pool_sizes=[]), dict(target_domain="scan"),
                                 dict(T_S=101), dict(lam=-1.0), dict(ema_decay=1.0),
                                 dict(probe={"kind": "jpeg", "parameter": 0})])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad).validate()


def test_config_missing_network_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(network=str(tmp_path / "nope.bin")).validate()


def test_config_json_roundtrip_and_hash(tmp_path):
    cfg = ExperimentConfig(seed=5, L=7)
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()
    # runtime-only fields do not change the hash
    assert cfg.replace(jobs=4, out="elsewhere").digest() == cfg.digest()
    assert cfg.replace(lam=10.0).digest() != cfg.digest()
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"sead": 1})


# -- aggregation ---------------------------------------------------------------------

@given(st.lists(st.floats(0, 60), min_size=1, max_size=30), st.integers(0, 1000))
def test_aggregate_independent_of_record_order(vals, seed):
    records = [{"index": i, "psnr": v, "detected": v > 30} for i, v in enumerate(vals)]
    shuffled = records[:]
    random.Random(seed).shuffle(shuffled)
    assert aggregate(records) == aggregate(shuffled)
    agg = aggregate(records)["all"]
    assert agg["n"] == len(vals) and agg["fpr"] == agg["mean_detected"]


# -- scenarios -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def attack_reports(cache):
    base = tiny(cache)
    one = run(base.replace(out=str(cache / "a1")))
    two = run(base.replace(out=str(cache / "a2"), jobs=2))
    again = run(base.replace(out=str(cache / "a3")))
    return base, one, two, again


def test_attack_report_aggregates_recomputable(attack_reports):
    _, one, _, _ = attack_reports
    assert check_report(one)
    assert len(one.records) == 6 and one.threshold_c > 16
    stored = ExperimentReport.load(one.config["out"])
    assert check_report(stored) and stored.records == one.records


def test_attack_records_identical_across_jobs(attack_reports):
    _, one, two, _ = attack_reports
    assert one.records == two.records
    assert one.aggregates == two.aggregates


def test_rerun_byte_identical_modulo_wall_time(attack_reports, cache):
    _, one, _, again = attack_reports
    a = json.loads((cache / "a1" / "report.json").read_text())
    b = json.loads((cache / "a3" / "report.json").read_text())
    for d in (a, b):
        d.pop("wall_time")
        d["config"].pop("out")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert (cache / "a1" / "table.csv").read_bytes() == (cache / "a3" / "table.csv").read_bytes()


def test_tampered_report_fails_check(attack_reports):
    _, one, _, _ = attack_reports
    bad = ExperimentReport.from_json(one.to_json())
    bad.records[0]["psnr"] += 1.0
    assert not check_report(bad)


def test_ablate_single_value_equals_plain_run(attack_reports, cache):
    base, one, _, _ = attack_reports
    (row,) = ablate(base.replace(out=str(cache / "abl")), "L", [base.L])
    assert row[0] == base.L
    assert row[1] == one.aggregates["all"]["mean_psnr"]
    assert row[2] == one.aggregates["all"]["mean_bit_accuracy"]
    assert row[3] == one.aggregates["all"]["fpr"]
    assert (cache / "abl" / "ablation_L.csv").exists()


def test_ablate_errors(cache):
    with pytest.raises(ValueError):
        ablate(tiny(cache), "eta", [1e-4])
    with pytest.raises(ValueError):
        ablate(tiny(cache), "L", [])


def test_stage_named_on_failure(tmp_path):
    bad = tmp_path / "net.bin"
    bad.write_bytes(b"garbage")
    with pytest.raises(StageError) as info:
        run(tiny(tmp_path, network=str(bad)))
    assert info.value.stage == "load-network"


@pytest.mark.parametrize("scenario", ["train", "baseline", "detectability"])
def test_other_scenarios_run(scenario, cache):
    rep = run(tiny(cache, scenario=scenario, out=str(cache / scenario)))
    assert check_report(rep)
    assert rep.records


def test_defense_groups_by_pool(cache):
    rep = run(tiny(cache, scenario="defense", pool_sizes=[1, 3], n_attack=4, out=str(cache / "def")))
    assert set(rep.aggregates) == {"1", "3"}
    assert check_report(rep)


def test_robustness_writes_table(cache):
    rep = run(tiny(cache, scenario="robustness", out=str(cache / "rob")))
    assert check_report(rep)
    assert (cache / "rob" / "robustness.csv").exists()
    assert set(rep.extras["roc"]) == {"clean_genuine", "pre_distorted_genuine"}


# -- CLI -----------------------------------------------------------------------------

def test_cli_synth_and_embed(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--set", "n_attack=3", "--domain", "photo"]) == 0
    assert len(list((tmp_path / "s" / "images").glob("*.pgm"))) == 3
    assert main(["embed", str(tmp_path / "s" / "images"), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "scheme.json").exists()


def test_cli_report_roundtrip(attack_reports, cache, capsys):
    assert main(["report", str(cache / "a1")]) == 0
    assert "aggregates verified" in capsys.readouterr().out


def test_cli_failures_exit_nonzero(tmp_path, capsys):
    assert main(["attack", "--config", str(tmp_path / "missing.json")]) != 0
    assert "stage 'config'" in capsys.readouterr().err
    assert main(["attack", "--set", "L=-1", "--out", str(tmp_path)]) != 0
    assert main(["embed", str(tmp_path), "--out", str(tmp_path / "o")]) != 0
    with pytest.raises(SystemExit):
        main(["ablate", "--param", "eta", "--values", "1"])


def test_cli_train_with_overrides(tmp_path):
    cfg = tiny(tmp_path)
    cfg.save(tmp_path / "c.json")
    assert main(["train", "--config", str(tmp_path / "c.json"), "--seed", "3", "--out", str(tmp_path / "t")]) == 0
    rep = ExperimentReport.load(tmp_path / "t")
    assert rep.config["seed"] == 3
    assert (tmp_path / "t" / "network.bin").exists()
