import json
import subprocess
import sys

import pytest

from starseq.cli import main
from starseq.config import ConfigError, RunConfig

SMALL = """\
[model]
d = 16
n = 10
n_heads = 2
n_blocks = 2

[train]
max_epochs = 2
batch_size = 64

[synth]
users = 30
items = 15
steps = 8

[probe]
sample_size = 10
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL, encoding="utf-8")
    return str(p)


# --- config -------------------------------------------------------------------


def test_defaults_cover_every_field():
    cfg = RunConfig.load()
    assert cfg["model"]["d"] == 256 and cfg["train"]["lr"] == 1e-3
    assert cfg.model_config(3, 10).n == 75


def test_file_then_override_precedence(small_config):
    cfg = RunConfig.load(small_config, ["model.d=32", "model.use_user_embedding=no"])
    assert cfg["model"]["d"] == 32 and cfg["model"]["n"] == 10
    assert cfg["model"]["use_user_embedding"] is False


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["model.depth=3"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["model.d=wide"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["nodot=1"])


def test_invalid_model_settings_surface_as_config_errors():
    cfg = RunConfig.load(None, ["model.d=10", "model.n_heads=3"])
    with pytest.raises(ConfigError):
        cfg.model_config(2, 5)


def test_digest_ignores_paths_but_not_values():
    a = RunConfig.load(None, ["paths.out=/tmp/a"])
    b = RunConfig.load(None, ["paths.out=/tmp/b"])
    c = RunConfig.load(None, ["run.seed=1"])
    assert a.digest() == b.digest() != c.digest()


def test_text_round_trip(tmp_path):
    cfg = RunConfig.load(None, ["model.d=48", "eval.ks=5,10"])
    p = tmp_path / "echo.ini"
    p.write_text(cfg.to_text(), encoding="utf-8")
    assert RunConfig.load(p).echo() == cfg.echo()


# --- commands -----------------------------------------------------------------


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_bench_ops_small_case(tmp_path, capsys):
    code, _, _ = run(["bench", "ops", "--n", "2", "--d", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    body = json.loads((tmp_path / "ops.json").read_text())
    assert (body["sa"], body["star"], body["diff"]) == (24, 14, 10)
    manifest = json.loads((tmp_path / "ops.json.manifest.json").read_text())
    assert manifest["artifact"] == "ops.json" and manifest["config_hash"] == body["config_hash"]


def test_prep_three_line_log(tmp_path, capsys):
    log = tmp_path / "three.tsv"
    log.write_text("u1\ti1\t5\t10\nu1\ti2\t4\t11\nu2\ti1\t3\t12\n", encoding="utf-8")
    code, out, _ = run(
        ["prep", "--input", str(log), "--out", str(tmp_path), "--set", "data.min_user=1", "--set", "data.min_item=1"],
        capsys,
    )
    assert code == 0
    # u2's only record is below the rating threshold
    assert json.loads(out.strip())["users"] == 1
    snap = json.loads((tmp_path / "dataset.json").read_text())
    assert len(snap["user_ids"]) == 1 and len(snap["item_ids"]) == 3  # two items plus padding


def test_missing_input_exits_with_config_error(tmp_path, capsys):
    code, _, err = run(["prep", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert err.startswith("starseq: error: config:") and err.count("\n") == 1


def test_unreadable_input_exits_with_runtime_error(tmp_path, capsys):
    code, _, err = run(["prep", "--input", str(tmp_path / "none.tsv"), "--out", str(tmp_path)], capsys)
    assert code == 1 and err.startswith("starseq: error: runtime:") and err.count("\n") == 1


def test_bad_override_exits_2(capsys):
    code, _, err = run(["bench", "ops", "--set", "bench.reps=many"], capsys)
    assert code == 2 and "bench.reps" in err


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "flops"])
    assert exc.value.code == 2


def pipeline(workdir, config, seed, capsys):
    paths = {k: workdir / k for k in ("synth", "prep", "train", "eval")}
    common = ["--config", config, "--seed", str(seed)]
    assert run(["synth", *common, "--out", str(paths["synth"])], capsys)[0] == 0
    assert run(["prep", *common, "--input", str(paths["synth"] / "synthetic.tsv"), "--out", str(paths["prep"])], capsys)[0] == 0
    data = str(paths["prep"] / "dataset.json")
    assert run(["train", *common, "--data", data, "--out", str(paths["train"])], capsys)[0] == 0
    ck = str(paths["train"] / "checkpoint.zip")
    assert run(["eval", *common, "--data", data, "--checkpoint", ck, "--out", str(paths["eval"])], capsys)[0] == 0
    return paths


def test_pipeline_is_byte_identical(tmp_path, small_config, capsys):
    a = pipeline(tmp_path / "a", small_config, 3, capsys)
    b = pipeline(tmp_path / "b", small_config, 3, capsys)
    for name, step in (("synthetic.tsv", "synth"), ("dataset.json", "prep"), ("checkpoint.zip", "train"), ("metrics.json", "eval")):
        assert (a[step] / name).read_bytes() == (b[step] / name).read_bytes(), name
    report = json.loads((a["eval"] / "metrics.json").read_text())
    assert report["config"]["model"]["d"] == 16
    manifest = json.loads((a["eval"] / "metrics.json.manifest.json").read_text())
    assert manifest["data_hash"] == report["data_hash"] and manifest["seed"] == 3
    log = (a["train"] / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2 and json.loads(log[0])["epoch"] == 1


def test_eval_rejects_checkpoint_from_other_data(tmp_path, small_config, capsys):
    a = pipeline(tmp_path / "a", small_config, 1, capsys)
    other = tmp_path / "other"
    run(["synth", "--config", small_config, "--seed", "2", "--out", str(other)], capsys)
    run(["prep", "--config", small_config, "--input", str(other / "synthetic.tsv"), "--out", str(other)], capsys)
    code, _, err = run(
        ["eval", "--config", small_config, "--data", str(other / "dataset.json"),
         "--checkpoint", str(a["train"] / "checkpoint.zip"), "--out", str(other)],
        capsys,
    )
    assert code == 1 and "trained on data" in err


@pytest.mark.parametrize("probe,model", [("smoothing", "star"), ("smoothing", "baseline"), ("entropy", "baseline")])
def test_probe_commands(tmp_path, small_config, capsys, probe, model):
    paths = pipeline(tmp_path, small_config, 0, capsys)
    code, _, _ = run(
        ["probe", probe, "--config", small_config, "--model", model,
         "--data", str(paths["prep"] / "dataset.json"), "--out", str(tmp_path / "probe")],
        capsys,
    )
    assert code == 0
    body = json.loads((tmp_path / "probe" / f"{probe}.json").read_text())
    assert body["model"] == model
    if probe == "entropy":
        assert body["information_gain"] >= 0


def test_entropy_probe_on_star_fails_cleanly(tmp_path, small_config, capsys):
    paths = pipeline(tmp_path, small_config, 0, capsys)
    code, _, err = run(["probe", "entropy", "--config", small_config, "--data", str(paths["prep"] / "dataset.json")], capsys)
    assert code == 1 and "baseline" in err


def test_bench_runtime_writes_csv(tmp_path, capsys):
    code, _, _ = run(
        ["bench", "runtime", "--out", str(tmp_path), "--set", "bench.n_grid=4,8", "--set", "bench.reps=5", "--d", "8"],
        capsys,
    )
    assert code == 0
    rows = (tmp_path / "runtime.csv").read_text().splitlines()
    assert rows[0] == "kind,n,d,n_b,median_us,p95_us" and len(rows) == 5
    assert set(json.loads((tmp_path / "runtime.json").read_text())["loglog_slope"]) == {"star", "baseline"}


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "starseq", "bench", "ops", "--n", "3", "--d", "2", "--out", str(tmp_path)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "ops.json").read_text())["diff"] == 4 * 4 * 2 + 2 * 2 * 8
