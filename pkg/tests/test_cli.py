import json
import subprocess
import sys

import pytest

from kmig.cli import main
from kmig.memory import MemoryImage


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"num_files": 60, "num_processes": 2, "seed": 1}))
    return path


def test_gen_writes_image_and_sidecar(spec_file, tmp_path):
    out = tmp_path / "guest.img"
    assert main(["gen", "--spec", str(spec_file), "--out", str(out)]) == 0
    image = MemoryImage.restore(out)
    assert image.size == 16 << 20 and image.regions


@pytest.mark.parametrize("case", ["dentry", "fdt"])
def test_scenario_json(spec_file, case, capsys):
    assert main(["scenario", "--spec", str(spec_file), "--case", case, "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["passed"] and doc["case"] == case


def test_bench_csv(spec_file, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["bench", "--spec", str(spec_file), "--ks", "10,60", "--repeats", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "k,mode,repeat,events_total,events_false,modeled_time,pages_used"
    assert len(lines) == 1 + 10 + 5


def test_validate_pass_and_fault(spec_file, capsys):
    assert main(["validate", "--spec", str(spec_file), "--dry-run", "--decoys", "2"]) == 0
    assert main(["validate", "--spec", str(spec_file), "--dry-run", "--decoys", "2", "--no-verify", "--json"]) == 1
    doc = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert not doc["passed"] and len(doc["corrupted_slots"]) == 2


def test_config_errors(tmp_path, spec_file, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert main(["bench", "--spec", str(spec_file), "--ks", "10,999"]) == 2
    assert main(["scenario", "--spec", str(spec_file), "--case", "inode"]) == 2
    monkeypatch.setenv("KMIG_SEED", "nope")
    assert main(["gen", "--spec", str(spec_file), "--out", str(tmp_path / "x")]) == 2


def test_seed_override_changes_the_image(spec_file, tmp_path, monkeypatch):
    a, b, c = (tmp_path / n for n in ("a.img", "b.img", "c.img"))
    main(["gen", "--spec", str(spec_file), "--out", str(a)])
    monkeypatch.setenv("KMIG_SEED", "1")
    main(["gen", "--spec", str(spec_file), "--out", str(b)])
    monkeypatch.setenv("KMIG_SEED", "99")
    main(["gen", "--spec", str(spec_file), "--out", str(c)])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_module_entry_point(spec_file):
    proc = subprocess.run(
        [sys.executable, "-m", "kmig", "scenario", "--spec", str(spec_file), "--case", "fdt"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and "PASS" in proc.stdout
