import csv
import itertools
import json

import pytest
from hypothesis import given, settings, strategies as st

from encscan.config import config_from_dict
from encscan.data import DataError, PatchTrigger
from encscan.detection import ScanReport
from encscan.encoders import read_checkpoint
from encscan.harness import (TRIGGER_VARIANTS, BenchmarkResult, Population, PopulationError, PopulationSpec,
                             Workbench, ablation_adaptive, ablation_shadow, ablation_trigger, build_population,
                             forge_gated, make_shadow, roc_auc, scan_population, trend_violations)

TINY = {
    "data": {"count": 160, "shape": [16, 16, 3]},
    "pretrain": {"epochs": 1, "batch": 64, "widths": [4, 8], "embedding_dim": 16},
    "attack": {"trigger": {"height": 4, "width": 4}, "epochs": 1, "batch": 32,
               "reference_size": 64, "probe_count": 150},
    "scan": {"batch": 16, "max_iters": 25, "restarts": 1},
    "shadow": {"size": 32},
    "harness": {"n_clean": 2, "n_trojaned": 2, "asr_gate": -1.0, "retries": 1},
}


@pytest.fixture(scope="module")
def bench():
    return Workbench.from_config(config_from_dict(TINY))


@pytest.fixture(scope="module")
def population(bench, tmp_path_factory):
    spec = PopulationSpec.from_config(bench.config)
    return build_population(spec, bench, tmp_path_factory.mktemp("pop"))


def _pairwise_auc(clean, troj):
    wins = [1.0 if t < c else 0.5 if t == c else 0.0 for c, t in itertools.product(clean, troj)]
    return sum(wins) / len(wins)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0.01, 0.02, 0.05, 0.1, 0.2]), min_size=1, max_size=8),
       st.lists(st.sampled_from([0.01, 0.02, 0.05, 0.1, 0.2]), min_size=1, max_size=8))
def test_auc_matches_pairwise_oracle(clean, troj):
    points, auc = roc_auc(clean, troj)
    assert abs(auc - _pairwise_auc(clean, troj)) <= 1e-9
    assert points[-1][1:] == (1.0, 1.0)
    assert [p[0] for p in points] == sorted(p[0] for p in points)


def test_auc_edges():
    assert roc_auc([0.2, 0.3], [0.01, 0.02])[1] == 1.0
    assert roc_auc([0.01], [0.2])[1] == 0.0
    with pytest.raises(ValueError):
        roc_auc([], [0.1])


def _rep(eid, pl1, tau=0.1):
    return ScanReport(encoder_id=eid, pl1=pl1, l1_norm=pl1 * 768, tau=tau, trojaned=pl1 < tau, converged=True,
                      beta=-0.99, shadow_source="s", shadow_size=10, final_loss=-0.995, iterations=1,
                      wall_time=0.1, seed=0)


def test_benchmark_result_counts_and_files(tmp_path):
    reports = {"a": _rep("a", 0.2), "b": _rep("b", 0.15), "c": _rep("c", 0.02), "d": _rep("d", 0.12)}
    truth = {"a": False, "b": False, "c": True, "d": True}
    res = BenchmarkResult(reports, truth, 0.1, {"e": "boom"})
    assert res.confusion == {"tp": 1, "tn": 2, "fp": 0, "fn": 1}
    assert res.accuracy == 0.75
    assert res.rescored(0.13).accuracy == 1.0
    summary = res.summary()
    assert summary["n_errors"] == 1 and summary["auc"] == 1.0
    paths = res.write(tmp_path)
    rows = list(csv.DictReader(open(paths["pl1"])))
    assert [r["encoder_id"] for r in rows] == ["a", "b", "c", "d"]
    assert float(rows[2]["pl1"]) == 0.02
    hist = list(csv.DictReader(open(paths["hist"])))
    assert sum(int(r["clean"]) for r in hist) == 2 and sum(int(r["trojaned"]) for r in hist) == 2
    with pytest.raises(PopulationError):
        BenchmarkResult({"x": _rep("x", 0.1)}, {}, 0.1)


def test_all_clean_with_zero_tau_is_perfect():
    reports = {str(i): _rep(str(i), p) for i, p in enumerate([0.0, 0.01, 0.3])}
    res = BenchmarkResult(reports, {k: False for k in reports}, 0.0)
    assert res.accuracy == 1.0 and "auc" not in res.summary()


def test_trend_violations():
    rows = [{"asr": 1.0, "pl1": 0.02}, {"asr": 0.9, "pl1": 0.05}, {"asr": 0.95, "pl1": 0.04}]
    assert trend_violations(rows) == {"asr": 1, "pl1": 1}


def test_plan_is_anonymous_and_seeded():
    spec = PopulationSpec(n_clean=3, n_trojaned=4, alphas=(0.0, 1.0))
    plan = spec.plan()
    assert plan == spec.plan()
    assert sorted(m["id"] for m in plan) == [f"enc-{i:02d}" for i in range(7)]
    troj = sorted((m for m in plan if m["kind"] == "trojaned"), key=lambda m: m["index"])
    assert [m["base"] for m in troj] == [0, 1, 2, 0]
    assert [m["alpha"] for m in troj] == [0.0, 1.0, 0.0, 1.0]
    assert [m["kind"] for m in plan] != ["clean"] * 3 + ["trojaned"] * 4
    with pytest.raises(PopulationError):
        PopulationSpec(n_clean=0)


def test_shadow_sources(bench, tmp_path):
    cfg = bench.config
    assert len(make_shadow(cfg, bench.pretraining)) == 32
    syn = make_shadow(cfg.override(shadow={"source": "synthetic", "size": 12}))
    assert len(syn) == 12 and syn.source == "synthetic-B"
    with pytest.raises(DataError):
        make_shadow(cfg.override(shadow={"source": "dir"}))
    with pytest.raises(DataError):
        make_shadow(cfg.override(shadow={"source": "nowhere"}))


def test_impossible_gate_names_seeds(bench, population):
    clean = read_checkpoint(population.root / "bases" / "clean-000.ckpt")
    with pytest.raises(PopulationError, match="not met after 2 seeds"):
        forge_gated(clean, bench, 1.0, 2)


def test_population_layout_hides_labels(population):
    truth = population.ground_truth()
    assert sorted(truth) == population.ids
    assert sum(t["trojaned"] for t in truth.values()) == 2
    for eid, path in population.paths.items():
        assert read_checkpoint(path).provenance == {"id": eid}
    troj = [t for t in truth.values() if t["trojaned"]]
    assert all("asr" in t["attack_report"] for t in troj)
    assert Population.open(population.root).ids == population.ids


def test_build_population_resumes(bench, population):
    before = {p: p.stat().st_mtime_ns for p in population.paths.values()}
    again = build_population(PopulationSpec.from_config(bench.config), bench, population.root)
    assert {p: p.stat().st_mtime_ns for p in again.paths.values()} == before


def test_scan_population_writes_and_resumes(bench, population, tmp_path):
    cfg = bench.config.scan.inversion()
    res = scan_population(population, bench.shadow, cfg, 0.1, tmp_path)
    assert set(res.reports) == set(population.ids) and not res.errors
    assert (tmp_path / "summary.json").exists() and (tmp_path / "roc.csv").exists()
    assert len(list((tmp_path / "triggers").glob("*_mask.png"))) == 4
    stamps = {p: p.stat().st_mtime_ns for p in (tmp_path / "reports").iterdir()}
    again = scan_population(population, bench.shadow, cfg, 0.3, tmp_path)
    assert {p: p.stat().st_mtime_ns for p in (tmp_path / "reports").iterdir()} == stamps
    assert [r.pl1 for r in again.reports.values()] == [r.pl1 for r in res.reports.values()]
    assert all(r.tau == 0.3 for r in again.reports.values())
    assert json.loads((tmp_path / "summary.json").read_text())["tau"] == 0.3


def test_scan_records_broken_checkpoint(bench, population, tmp_path):
    from encscan.harness import scan_encoders
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    reports, errors = scan_encoders({"bad": bad}, bench.shadow, bench.config.scan.inversion())
    assert not reports and "bad" in errors


def test_ablations_run_small(bench, population, tmp_path):
    clean = read_checkpoint(population.root / "bases" / "clean-000.ckpt")
    cfg = bench.config.scan.inversion()
    rows = ablation_trigger([("4x4", PatchTrigger(4, 4)), ("green", PatchTrigger(4, 4, fill=(0, 1, 0)))],
                            [clean], bench, cfg, out_dir=tmp_path)
    assert [r["variant"] for r in rows] == ["4x4", "green"]
    assert rows[0]["size_ratio"] == pytest.approx(16 / 256)
    assert (tmp_path / "ablation_trigger.csv").exists()
    with pytest.raises(DataError):
        ablation_trigger([("big", PatchTrigger(20, 20))], [clean], bench, cfg)
    srows = ablation_shadow(clean, bench.shadow, [4, 8], cfg)
    assert [r["M"] for r in srows] == [4, 8]
    with pytest.raises(DataError):
        ablation_shadow(clean, bench.shadow, [1000], cfg)
    arows = ablation_adaptive(clean, bench, [0.0, 1.0], cfg)
    assert [r["alpha"] for r in arows] == [0.0, 1.0]
    with pytest.raises(ValueError):
        ablation_adaptive(clean, bench, [1.0, 0.0], cfg)


def test_trigger_variants_fit_default_shape():
    for variants in TRIGGER_VARIANTS.values():
        for _, trig in variants:
            trig.origin((32, 32, 3))
    assert [t.height for _, t in TRIGGER_VARIANTS["size"]] == [5, 7, 10, 12, 14]
    assert len(TRIGGER_VARIANTS["color"]) == 3
