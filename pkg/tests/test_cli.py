import csv
import json
import struct

import numpy as np
import pytest
from pydantic import ValidationError

from lrse import __version__, config
from lrse.algorithm.calib import collect_stats
from lrse.commands.sweep import error_trend, monotonicity_violations, run_sweep
from lrse.commands.verify import probe_inputs
from lrse.main import main
from lrse.schemas import RunConfig
from lrse.storage.archive import ALIGNMENT, MAGIC, load_archive
from lrse.storage.calib_data import synth_calib
from lrse.storage.model_store import load_compressed


@pytest.fixture(scope="module", autouse=True)
def keep_test_logging():
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(config, "setup_logging", lambda level=None: None)
        yield


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Low-rank model, calibration set and statistics built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    paths = {name: root / f"{name}.lrta" for name in ("model", "calib", "stats")}
    assert main(["synth", "--weight-rank", "4", "--seed", "7", "-o", str(paths["model"])]) == 0
    assert main(["gen-calib", "--n", "8", "--rank", "4", "--seed", "3", "-o", str(paths["calib"])]) == 0
    assert main(["calibrate", "--model", str(paths["model"]), "--calib", str(paths["calib"]), "-o", str(paths["stats"])]) == 0
    paths["root"] = root
    return paths


def compress_args(ws, output, *policy):
    return ["compress", "--model", str(ws["model"]), "--stats", str(ws["stats"]), *policy, "-o", str(output)]


def test_synth_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a.lrta", tmp_path / "b.lrta", tmp_path / "c.lrta"
    assert main(["synth", "--seed", "5", "-o", str(a)]) == 0
    assert main(["synth", "--seed", "5", "-o", str(b)]) == 0
    assert main(["synth", "--seed", "6", "-o", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_calibrate_prints_spectra(tmp_path, workspace, capsys):
    output = tmp_path / "stats.lrta"
    assert main(["calibrate", "--model", str(workspace["model"]), "--calib", str(workspace["calib"]), "--workers", "2", "-o", str(output)]) == 0
    out = capsys.readouterr().out
    assert "0.q_proj" in out and "3.fc2" in out
    assert output.read_bytes() == workspace["stats"].read_bytes()


def test_preset_equals_explicit_thresholds(tmp_path, workspace):
    preset, explicit = tmp_path / "preset.lrta", tmp_path / "explicit.lrta"
    assert main(compress_args(workspace, preset, "--preset", "b")) == 0
    assert main(compress_args(workspace, explicit, "--theta-attn", "0.99", "--theta-mlp", "0.999")) == 0
    assert preset.read_bytes() == explicit.read_bytes()


def test_theta_one_keeps_every_layer_dense(tmp_path, workspace):
    output, report = tmp_path / "dense.lrta", tmp_path / "report.json"
    args = compress_args(workspace, output, "--theta-attn", "1", "--theta-mlp", "1") + ["--report", str(report)]
    assert main(args) == 0
    assert load_compressed(output).n_factorized == 0
    assert json.loads(report.read_text())["total_compressed_macs"] == json.loads(report.read_text())["total_dense_macs"]


def test_compress_rejects_preset_with_thresholds(tmp_path, workspace):
    args = compress_args(workspace, tmp_path / "x.lrta", "--preset", "b", "--theta-attn", "0.9", "--theta-mlp", "0.9")
    assert main(args) == 2
    assert main(compress_args(workspace, tmp_path / "x.lrta", "--theta-attn", "1.5", "--theta-mlp", "0.9")) == 2
    assert main(compress_args(workspace, tmp_path / "x.lrta", "--preset", "z")) == 2


@pytest.fixture(scope="module")
def compressed_path(workspace):
    output = workspace["root"] / "compressed.lrta"
    args = compress_args(workspace, output, "--theta-attn", "0.999", "--theta-mlp", "0.999", "--granularity", "4")
    assert main(args) == 0
    return output


def test_verify_passes(tmp_path, workspace, compressed_path):
    report = tmp_path / "verify.json"
    args = ["verify", "--original", str(workspace["model"]), "--compressed", str(compressed_path)]
    assert main(args + ["--probes", "3", "--tolerance", "1e-6", "--json", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["passed"] and rep["certificates_ok"]
    assert rep["max_rel_err"] < 1e-6
    assert len(rep["path_residuals"]) == 4


def test_verify_detects_a_flipped_sign(tmp_path, workspace, compressed_path):
    data = bytearray(compressed_path.read_bytes())
    (length,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + length])
    payload = (16 + length + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT
    entry = next(e for e in manifest["tensors"] if e["name"] == "0.fc1.w_down")
    index = int(np.argmax(np.abs(load_archive(compressed_path)["0.fc1.w_down"])))
    # sign bit lives in the last byte of a little-endian float64
    data[payload + entry["offset"] + 8 * index + 7] ^= 0x80
    corrupted = tmp_path / "corrupted.lrta"
    corrupted.write_bytes(bytes(data))

    args = ["verify", "--original", str(workspace["model"]), "--compressed", str(corrupted), "--probes", "3"]
    assert main(args + ["--tolerance", "1e-6"]) == 1


def test_verify_usage_and_io_errors(tmp_path, workspace, compressed_path):
    base = ["verify", "--original", str(workspace["model"]), "--compressed", str(compressed_path)]
    assert main(base + ["--probes", "0"]) == 2
    assert main(base + ["--tolerance", "-1"]) == 2
    assert main(base + ["--tolerance", "0"]) == 2
    missing = ["verify", "--original", str(tmp_path / "nope.lrta"), "--compressed", str(compressed_path)]
    assert main(missing) == 1
    assert main(["verify", "--original", str(workspace["model"]), "--compressed", str(workspace["stats"])]) == 1


def test_verify_options_name_the_compressed_archive(workspace, compressed_path):
    options = RunConfig(model=workspace["model"], compressed=compressed_path, tolerance=1e-6)
    assert options.compressed == compressed_path
    assert options.output is None
    with pytest.raises(ValidationError):
        RunConfig(compressed=compressed_path, tolerance=0)


def test_deeply_nested_manifest_exits_one(tmp_path, workspace):
    body = b"[" * 100_000 + b"]" * 100_000
    nested = tmp_path / "nested.lrta"
    nested.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
    assert main(["verify", "--original", str(workspace["model"]), "--compressed", str(nested)]) == 1


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_sweep_single_threshold(tmp_path, workspace):
    output = tmp_path / "sweep.csv"
    args = ["sweep", "--model", str(workspace["model"]), "--stats", str(workspace["stats"])]
    assert main(args + ["--theta", "0.99", "--granularity", "4", "--probes", "2", "-o", str(output)]) == 0
    rows = read_rows(output)
    assert len(rows) == 1
    assert list(rows[0]) == ["theta_attn", "theta_mlp", "params", "macs", "rel_err"]


def test_sweep_grid_is_monotone(tmp_path, workspace):
    output = tmp_path / "sweep.csv"
    args = ["sweep", "--model", str(workspace["model"]), "--stats", str(workspace["stats"]), "--granularity", "4"]
    args += ["--theta-attn", "0.9", "1.0", "--theta-mlp", "0.9", "1.0", "--probes", "2", "-o", str(output)]
    assert main(args) == 0
    rows = read_rows(output)
    assert len(rows) == 4
    params = {(float(r["theta_attn"]), float(r["theta_mlp"])): int(r["params"]) for r in rows}
    assert params[(0.9, 0.9)] < params[(0.9, 1.0)] < params[(1.0, 1.0)]
    assert params[(0.9, 0.9)] < params[(1.0, 0.9)] < params[(1.0, 1.0)]


THRESHOLDS = [0.95, 0.97, 0.99, 0.995, 0.999]


def test_sweep_on_noisy_calibration(toy_spec, toy_weights):
    calib = synth_calib(toy_spec, n_calib=8, effective_rank=4, noise=0.1, seed=3)
    stats = collect_stats(toy_spec, toy_weights, calib)
    probes = probe_inputs(toy_spec, 4, seed=11, rank=4, noise=0.1, basis_seed=3)
    rows = run_sweep(toy_weights, stats, [(t, t) for t in THRESHOLDS], granularity=16, probes=probes)
    assert [r.theta_attn for r in rows] == THRESHOLDS
    assert all(a.params <= b.params for a, b in zip(rows, rows[1:]))
    assert monotonicity_violations(rows) == []
    assert error_trend(rows) >= 0.9
    assert all(r.certificates_ok for r in rows)


def test_sweep_usage_errors(workspace):
    base = ["sweep", "--model", str(workspace["model"]), "--stats", str(workspace["stats"])]
    assert main(base + ["--theta"]) == 2
    assert main(base) == 2
    assert main(base + ["--theta-attn", "0.9"]) == 2
    assert main(base + ["--theta", "0.9", "--theta-mlp", "0.9"]) == 2


def test_pipeline(tmp_path, capsys):
    work = tmp_path / "run"
    args = ["pipeline", "--weight-rank", "4", "--n-calib", "8", "--probes", "2", "--granularity", "4"]
    args += ["--theta-attn", "0.999", "--theta-mlp", "0.999", "--work-dir", str(work)]
    assert main(args) == 0
    for name in ("model.lrta", "calib.lrta", "stats.lrta", "compressed.lrta", "report.json", "verify.json"):
        assert (work / name).exists()
    assert json.loads((work / "verify.json").read_text())["passed"]
    assert "PASS" in capsys.readouterr().out


def test_parser_exit_codes(capsys):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_generator_errors_exit_one(tmp_path):
    assert main(["gen-calib", "--rank", "999", "-o", str(tmp_path / "c.lrta")]) == 1
    assert main(["synth", "--dmodel", "30", "--heads", "4", "-o", str(tmp_path / "m.lrta")]) == 2
