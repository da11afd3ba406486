import json

import numpy as np
import pytest

from dgflow.cli import main
from dgflow.config import STAGES, ConfigError, RunConfig, from_dict, load_config, stage_seed, validate
from dgflow.harness import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, run

SMALL = {
    "n": 32, "quad_spacing": 0.05, "K": 2, "T": 0.1, "flow_dt": 0.5, "flow_t_end": 5.0, "flow_grad_tol": 0.0,
    "K_list": [1, 2], "kernel_samples": 2000, "kernel_points": 12, "n_list": [16, 64], "t_probe": [0.0, 0.5],
    "limit_dt": 0.1, "assumption_trials": 3,
}


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_defaults_validate():
    cfg = validate(RunConfig())
    assert cfg.h == pytest.approx(0.0125)
    assert cfg.eta_n == pytest.approx(256**0.5)


@pytest.mark.parametrize("delta", [0.4, 0.5, 1.0])
def test_delta_out_of_range(delta):
    with pytest.raises(ConfigError, match="delta"):
        from_dict({"delta": delta})


def test_step_bound():
    with pytest.raises(ConfigError, match="lambda_2"):
        from_dict({"T": 1.0, "K": 1})
    with pytest.raises(ConfigError, match="T, K"):
        from_dict({"T": 0.8, "K": 8, "K_list": [1, 8]})


def test_unknown_field_and_types(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="n:"):
        from_dict({"n": 3.5})
    with pytest.raises(ConfigError, match="warm_start"):
        from_dict({"warm_start": 1})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="parse"):
        load_config(bad)


def test_clip_radius_bounds():
    with pytest.raises(ConfigError, match="clip_radius"):
        from_dict({"n": 100, "clip_radius": 5.0})
    assert from_dict({"n": 100, "clip_radius": 2.0}).r_n == 2.0


def test_manifest_records_learning_rate(tmp_path):
    cfg = from_dict({**SMALL, "n": 100})
    assert run("kernel", cfg, tmp_path) == EXIT_OK
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["derived"]["eta_n"] == pytest.approx(10.0)
    assert man["config"]["n"] == 100
    assert set(man["seeds"]) == set(STAGES)


def test_cli_config_error_exit(tmp_path, capsys):
    path = write(tmp_path, {"delta": 0.4})
    assert main(["flow", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err)
    assert "delta" in err["message"]


def test_cli_numerical_failure_exit(tmp_path, capsys):
    path = write(tmp_path, {**SMALL, "flow_dt": 1e9, "flow_t_end": 1e10, "flow_max_backoffs": 0})
    out = tmp_path / "o"
    assert main(["flow", "--config", str(path), "--out", str(out)]) == EXIT_NUMERIC
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "TrainingStall"
    assert json.loads((out / "manifest.json").read_text())["status"] == "numerical-failure"


def test_cli_out_from_environment(tmp_path, monkeypatch):
    path = write(tmp_path, SMALL)
    monkeypatch.setenv("DGFLOW_OUT", str(tmp_path / "env"))
    assert main(["kernel", "--config", str(path)]) == EXIT_OK
    assert (tmp_path / "env" / "kernel.csv").exists()


@pytest.mark.parametrize("sub,extra", [
    ("solve", {}),
    ("flow", {}),
    ("kernel", {}),
    ("spectra", {}),
    ("converge", {}),
    ("converge", {"sweep": "n", "kernel_half_width": 3.0, "quad_spacing": 0.1}),
    ("check-assumptions", {"problem": "merton", "lam": 0.5, "jump_samples": 200, "quad_spacing": 0.1,
                           "assumption_trials": 50}),
])
def test_rerun_from_manifest_is_byte_identical(tmp_path, sub, extra):
    first = tmp_path / "a"
    assert main([sub, "--config", str(write(tmp_path, {**SMALL, **extra})), "--out", str(first)]) == EXIT_OK
    man = json.loads((first / "manifest.json").read_text())
    csvs = [o["path"] for o in man["outputs"] if o["kind"] == "csv"]
    assert csvs
    second = tmp_path / "b"
    assert main([sub, "--config", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    for rel in csvs:
        assert (first / rel).read_bytes() == (second / rel).read_bytes()
    man2 = json.loads((second / "manifest.json").read_text())
    # json side files may carry wall-clock timings; tables and checkpoints may not differ
    stable = [(o["path"], o["sha256"]) for o in man["outputs"] if o["kind"] != "json"]
    assert stable == [(o["path"], o["sha256"]) for o in man2["outputs"] if o["kind"] != "json"]


def test_csv_format(tmp_path):
    cfg = from_dict(SMALL)
    run("solve", cfg, tmp_path)
    raw = (tmp_path / "errors.csv").read_bytes().decode()
    lines = raw.split("\r\n")
    assert lines[0].startswith("k [step index] (reference.error_report)")
    assert lines[-1] == "" and "\n" not in raw.replace("\r\n", "")
    assert len(lines) == cfg.K + 3  # header, k = 0 row, one per step, trailing empty
    assert (tmp_path / "checkpoints" / "U_0002.json").exists()


def test_seed_override_changes_results(tmp_path):
    path = write(tmp_path, SMALL)
    main(["kernel", "--config", str(path), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["kernel", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "kernel.csv").read_bytes() != (tmp_path / "b" / "kernel.csv").read_bytes()


def test_stage_seeds_are_distinct_and_stable():
    seeds = {stage: stage_seed(7, stage) for stage in STAGES}
    assert len(set(seeds.values())) == len(STAGES)
    again = {stage: stage_seed(7, stage) for stage in STAGES}
    assert seeds == again
    # each stage is an independent child stream of the master sequence
    child = np.random.SeedSequence(7).spawn(len(STAGES))
    for stage, idx in STAGES.items():
        assert seeds[stage] == int(child[idx].generate_state(1, dtype=np.uint32)[0])
    with pytest.raises(ConfigError):
        from_dict({"seed": -1})
