import json

import pytest
import yaml

from degforge.cli import main
from degforge.config import ConfigError, load_config, validate

TINY = {
    "toyworld": {"size": 32, "scenes_per_degradation": 3, "held_out_per_degradation": 2},
    "codec": {"mode": "identity", "steps": 0},
    "generator": {"T": 10, "channels": [8, 16, 16], "steps": 3, "batch_size": 4},
    "scm": {"steps": 2, "batch_size": 2, "width": 8},
    "synth": {"sampling_steps": 2, "max_images": 2},
    "restore": {"epochs": 1, "batch_size": 4},
    "eval": {"wasserstein_projections": 8},
}


def _write_cfg(tmp_path, doc=None, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc if doc is not None else TINY))
    return path


def test_defaults_validate():
    cfg = validate({})
    assert cfg.synth.s_img == 1.5 and cfg.synth.s_text == 7.5 and cfg.generator.T == 200


def test_unknown_key_reports_key_path():
    with pytest.raises(ConfigError) as info:
        validate({"generator": {"stepz": 3}})
    assert info.value.errors[0][0] == "generator.stepz"


def test_bad_degradation_name_rejected():
    with pytest.raises(ConfigError) as info:
        validate({"toyworld": {"degradations": ["fog"]}})
    assert info.value.errors[0][0].startswith("toyworld.degradations")


def test_json_config_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4}))
    assert load_config(path).seed == 4
    assert load_config(path, {"seed": 9, "out": None}).seed == 9


def test_config_error_exit_code(tmp_path, capsys):
    code = main(["stats", "--config", str(_write_cfg(tmp_path, {"bogus": 1}))])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and err["details"][0]["key"] == "bogus"


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["stats", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_missing_generator_is_precondition_error(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["toyworld", "--config", str(_write_cfg(tmp_path)), "--out", str(out)]) == 0
    code = main(["train-scm", "--config", str(_write_cfg(tmp_path)), "--out", str(out)])
    assert code == 3
    assert "generator checkpoint required" in capsys.readouterr().err


def test_missing_corpus_is_precondition_error(tmp_path):
    assert main(["stats", "--out", str(tmp_path / "empty")]) == 3


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "dry"
    assert main(["toyworld", "--dry-run", "--out", str(out), "--config", str(_write_cfg(tmp_path))]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["dry_run"] is True and plan["command"] == "toyworld"
    assert not out.exists()


def test_no_clobber_without_overwrite(tmp_path):
    cfg = str(_write_cfg(tmp_path))
    out = str(tmp_path / "run")
    assert main(["toyworld", "--config", cfg, "--out", out]) == 0
    assert main(["toyworld", "--config", cfg, "--out", out]) == 3
    assert main(["toyworld", "--config", cfg, "--out", out, "--overwrite"]) == 0


def test_tiny_pipeline_end_to_end(tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(_write_cfg(tmp_path)), "--out", str(out)]) == 0
    counts = json.loads((out / "mix" / "counts.json").read_text())
    n = 3 * 6
    m = 2 * 5
    assert counts == {"existing": n, "generated": m, "combined": n + m}
    for name in ("report.json", "report.csv", "radar.json", "wasserstein.json"):
        assert (out / "eval" / name).exists()
    assert (out / "restorer" / "loss_curve.csv").exists()
    lines = (out / "synth" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == m and all(l.startswith('{"schema_version": 1') for l in lines)


def test_shipped_configs_validate():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    desk = load_config(root / "desk.yaml")
    assert desk == validate({"out": "runs/desk"})
    load_config(root / "smoke.yaml")
