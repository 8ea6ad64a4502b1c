import json

import pytest
import yaml

from encscan.cli import main
from encscan.data import save_image_dir, synth_dataset
from encscan.detection import ScanReport
from encscan.encoders import read_checkpoint

TINY = {
    "data": {"count": 128, "shape": [16, 16, 3]},
    "pretrain": {"epochs": 1, "batch": 64, "widths": [4, 8], "embedding_dim": 16},
    "attack": {"trigger": {"height": 4, "width": 4}, "epochs": 1, "batch": 32,
               "reference_size": 64, "probe_count": 150},
    "scan": {"batch": 16, "max_iters": 20, "restarts": 1},
    "shadow": {"size": 24},
    "harness": {"n_clean": 1, "n_trojaned": 1, "asr_gate": -1.0, "retries": 1,
                "ablation_bases": 1, "shadow_sizes": [4, 8], "alphas": [0.0, 1.0]},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture(scope="module")
def clean_ckpt(cfg_path):
    out = cfg_path.parent / "clean.ckpt"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out), "--seed", "3"]) == 0
    return out


def test_pretrain_attack_scan_chain(cfg_path, clean_ckpt, tmp_path, capsys):
    assert read_checkpoint(clean_ckpt).provenance["pretrain"]["seed"] == 3
    troj = tmp_path / "troj.ckpt"
    assert main(["attack", "--config", str(cfg_path), "--clean", str(clean_ckpt), "--out", str(troj),
                 "--alpha", "0.5"]) == 0
    doc = json.loads((tmp_path / "troj.attack.json").read_text())
    assert doc["attack"]["alpha"] == 0.5 and 0 <= doc["report"]["asr"] <= 1
    capsys.readouterr()
    assert main(["scan", "--config", str(cfg_path), "--encoder", str(troj), "--out", str(tmp_path / "scan"),
                 "--tau", "0.25", "--beta", "-0.9"]) == 0
    printed = json.loads(capsys.readouterr().out)
    report = ScanReport.from_json((tmp_path / "scan" / "report.json").read_text())
    assert report.tau == 0.25 and report.beta == -0.9 and printed["pl1"] == report.pl1
    assert report.trojaned == (report.pl1 < 0.25)
    assert {p.name for p in (tmp_path / "scan").iterdir()} >= {"trigger_mask.png", "trigger_pattern.png"}


def test_scan_is_deterministic(cfg_path, clean_ckpt, tmp_path):
    docs = []
    for k in range(2):
        assert main(["scan", "--config", str(cfg_path), "--encoder", str(clean_ckpt),
                     "--out", str(tmp_path / str(k)), "--seed", "5"]) == 0
        docs.append(ScanReport.from_json((tmp_path / str(k) / "report.json").read_text()).without_timing())
    assert docs[0] == docs[1] and docs[0]["seed"] == 5


def test_scan_with_shadow_directory(cfg_path, clean_ckpt, tmp_path):
    save_image_dir(synth_dataset(9, 6, (16, 16, 3), "B").images, tmp_path / "imgs")
    assert main(["scan", "--config", str(cfg_path), "--encoder", str(clean_ckpt), "--out", str(tmp_path / "o"),
                 "--shadow", str(tmp_path / "imgs")]) == 0
    report = ScanReport.from_json((tmp_path / "o" / "report.json").read_text())
    assert report.shadow_size == 6


@pytest.mark.parametrize("argv", [
    ["scan", "--encoder", "x.ckpt", "--out", "o", "--bogus"],
    ["scan", "--encoder", "x.ckpt", "--out", "o", "--tau", "abc"],
    ["scan", "--encoder", "x.ckpt", "--out", "o", "--shadow", "/no/such/dir"],
    ["scan", "--encoder", "x.ckpt", "--out", "o", "--beta", "-3"],
    ["benchmark", "--out", "o", "--workers", "0"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse rejects before main's handler
        code = exc.code
    assert code == 2


def test_config_file_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scan: {taux: 1}\n")
    assert main(["scan", "--config", str(bad), "--encoder", "x", "--out", str(tmp_path / "o")]) == 2
    big = tmp_path / "big.yaml"
    big.write_text(yaml.safe_dump({**TINY, "attack": {"trigger": {"height": 30}}}))
    assert main(["pretrain", "--config", str(big), "--out", str(tmp_path / "c.ckpt")]) == 2


def test_runtime_errors_exit_3(cfg_path, tmp_path):
    assert main(["scan", "--config", str(cfg_path), "--encoder", str(tmp_path / "missing.ckpt"),
                 "--out", str(tmp_path / "o")]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"junk")
    assert main(["attack", "--config", str(cfg_path), "--clean", str(junk), "--out", str(tmp_path / "t")]) == 3


def test_benchmark_resume_and_ablations(cfg_path, tmp_path):
    out = tmp_path / "bench"
    argv = ["benchmark", "--config", str(cfg_path), "--out", str(out), "--tau", "0.2",
            "--ablation", "shadow-size", "--ablation", "adaptive"]
    assert main(argv) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["population"]["tau"] == 0.2 and summary["population"]["n_scanned"] == 2
    assert [r["M"] for r in summary["shadow-size"]] == [4, 8]
    assert set(summary["adaptive"]["violations"]) == {"asr", "pl1"}
    assert main(argv) == 2  # non-empty output without --resume
    stamp = (out / "ablations" / "adaptive.json").stat().st_mtime_ns
    assert main(argv + ["--resume"]) == 0
    assert (out / "ablations" / "adaptive.json").stat().st_mtime_ns == stamp
    assert json.loads((out / "summary.json").read_text()) == summary
