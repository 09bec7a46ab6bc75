import json
import struct

import numpy as np
import pytest

from faelvm import io as fio
from faelvm.cli import main
from faelvm.errors import FormatError, VersionError
from faelvm.model import FaeLVM, ModelConfig

# wall-clock files are the only outputs allowed to differ between runs
TIMING_FILES = {"timing.json", "timing_history.csv"}


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name not in TIMING_FILES}


def rerun_identical(out, tmp_path, name):
    again = tmp_path / name
    assert run(main_cmd(out), "--config", out / "manifest.json", "--out", again) == 0
    a, b = snapshot(out), snapshot(again)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k], f"{k} differs after rerun"


def main_cmd(out):
    return json.loads((out / "manifest.json").read_text())["command"]


# -- file formats --------------------------------------------------------------------


def test_spike_csv_roundtrip(tmp_path, rng):
    y = rng.poisson(1.0, (4, 7)).astype(float)
    y[1, 2] = 0.25
    fio.save_spikes_csv(tmp_path / "s.csv", y)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "neuron_id," + ",".join(f"bin_{t}" for t in range(7))
    assert lines[1].split(",")[0] == "0"
    np.testing.assert_array_equal(fio.load_spikes(tmp_path / "s.csv"), y)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "neuron_id\n0\n",
        "id,bin_0\n0,1\n",
        "neuron_id,bin_0,bin_2\n0,1,2\n",
        "neuron_id,bin_0,bin_1\n0,1\n",
        "neuron_id,bin_0\n0,abc\n",
        "neuron_id,bin_0\n0,nan\n",
        "neuron_id,bin_0\n",
    ],
)
def test_malformed_spike_csv(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(FormatError):
        fio.load_spikes(tmp_path / "bad.csv")


def test_binary_roundtrip_and_header(tmp_path, rng):
    y = rng.normal(size=(3, 5))
    fio.save_spikes(tmp_path / "s.bin", y)
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:4] == b"FAEL"
    assert struct.unpack("<III", raw[4:16]) == (1, 3, 5)
    assert len(raw) == 16 + 8 * 15
    np.testing.assert_array_equal(fio.load_spikes(tmp_path / "s.bin"), y)
    (tmp_path / "v2.bin").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionError):
        fio.load_spikes(tmp_path / "v2.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        fio.load_spikes(tmp_path / "short.bin")


def test_labels_and_json(tmp_path):
    fio.save_labels_csv(tmp_path / "l.csv", [1, 0, 1])
    assert fio.load_labels_csv(tmp_path / "l.csv").tolist() == [1, 0, 1]
    fio.dump_json(tmp_path / "a.json", {"b": np.float64(np.nan), "a": np.arange(2)})
    assert (tmp_path / "a.json").read_text() == '{\n "a": [\n  0,\n  1\n ],\n "b": null\n}\n'
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(FormatError):
        fio.load_json(tmp_path / "bad.json")


# -- CLI -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sim"
    assert run("simulate", "--preset", "appendix-b", "--n", 12, "--t", 300, "--seed", 0, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "fit"
    code = run("fit", "--spikes", sim / "spikes.csv", "--nonlinearity", "exp", "--learn-coeff", "--learning-rate", 0.01,
               "--max-epochs", 4, "--n-test-neurons", 3, "--test-frac", 0.2, "--out", out)
    assert code == 0
    return out


def test_simulate_outputs(sim, tmp_path):
    for name in ("spikes.csv", "latents.csv", "labels.csv", "ground_truth.json", "manifest.json"):
        assert (sim / name).exists()
    y = fio.load_spikes(sim / "spikes.csv")
    assert y.shape == (12, 300)
    gt = json.loads((sim / "ground_truth.json").read_text())
    assert gt["generator"] == {"width": 1.2, "peak": 0.5, "background": 0.005, "gp_sd": 5.0, "gp_scale": 50.0}
    # a second run from scratch is byte-identical
    other = tmp_path / "again"
    assert run("simulate", "--preset", "appendix-b", "--n", 12, "--t", 300, "--seed", 0, "--out", other) == 0
    assert snapshot(other) == snapshot(sim)


def test_simulate_binary_and_multi(tmp_path):
    out = tmp_path / "m"
    assert run("simulate", "--kind", "multi", "--k", 2, "--n", 10, "--t", 100, "--format", "bin", "--out", out) == 0
    assert fio.load_spikes(out / "spikes.bin").shape == (10, 100)
    assert sorted(set(fio.load_labels_csv(out / "labels.csv"))) == [0, 1]


def test_manifest_records_config_and_version(sim):
    m = json.loads((sim / "manifest.json").read_text())
    assert m["command"] == "simulate"
    assert m["config"]["n"] == 12 and m["config"]["seed"] == 0
    assert m["version"].startswith("v0.1.0")
    assert "wall_clock_s" in json.loads((sim / "timing.json").read_text())


def test_flags_override_config_file(sim, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 5, "t": 50}))
    out = tmp_path / "o"
    assert run("simulate", "--config", cfg, "--t", 60, "--out", out) == 0
    assert fio.load_spikes(out / "spikes.csv").shape == (5, 60)


def test_fit_outputs(fitted):
    for name in ("model.json", "history.csv", "fits.csv", "split.json", "latents_train.csv", "test_model.json", "fit.json"):
        assert (fitted / name).exists()
    split = json.loads((fitted / "split.json").read_text())
    assert len(split["test_neurons"]) == 3 and split["n_train_bins"] == 240
    assert FaeLVM.load(fitted / "model.json").n_neurons == 9


def test_pipeline_through_files(sim, fitted, tmp_path):
    inf = tmp_path / "inf"
    assert run("infer", "--model", fitted / "model.json", "--spikes", sim / "spikes.csv", "--split", fitted / "split.json",
               "--test-model", fitted / "test_model.json", "--steps", 20, "--samples", 2, "--out", inf) == 0
    from faelvm.manifold import load_trajectory_csv, save_trajectory_csv

    ev = tmp_path / "ev"
    truth = tmp_path / "truth.csv"
    save_trajectory_csv(truth, load_trajectory_csv(sim / "latents.csv")[240:])
    assert run("eval", "--metric", "ge", "--truth", truth, "--inferred", inf / "latents.csv", "--out", ev) == 0
    ge = json.loads((ev / "eval.json").read_text())
    assert 0 <= ge["ge"] <= np.pi
    rerun_identical(inf, tmp_path, "inf2")
    rerun_identical(ev, tmp_path, "ev2")


def test_fit_rerun_is_identical(fitted, tmp_path):
    rerun_identical(fitted, tmp_path, "fit2")


def test_other_commands_rerun_identically(sim, tmp_path):
    from faelvm.manifold import load_trajectory_csv, save_trajectory_csv

    z = load_trajectory_csv(sim / "latents.csv")
    coords = tmp_path / "coords.csv"
    save_trajectory_csv(coords, np.hstack([z, np.roll(z, 50, axis=0)]))
    cases = {
        "ratemap": ["ratemap", "--spikes", sim / "spikes.csv", "--coords", coords, "--circular", "--n-bins", 10, "--neurons", "0,1"],
        "ens": ["ensembles", "--spikes", sim / "spikes.csv", "--k", 2, "--labels", sim / "labels.csv", "--n-fits", 1,
                "--max-epochs", 2, "--chance-draws", 500, "--greedy"],
        "hs": ["hypersearch", "--n", 8, "--t", 200, "--n-samples", 2, "--n-seeds", 1, "--max-epochs", 2],
        "t1": ["repro-table1", "--cell", "6x150", "--n-test", 3, "--t-test", 50, "--seeds", 1, "--decoders", "b",
               "--n-init", 1, "--samples", 2, "--steps", 5, "--num-worse", 1],
        "f4": ["repro-fig4", "--t", "100", "--reps", 1, "--n-per", 4, "--n-fits", 1, "--chance-draws", 100, "--num-worse", 1],
    }
    for name, argv in cases.items():
        out = tmp_path / name
        assert run(*argv, "--out", out) == 0, name
        rerun_identical(out, tmp_path, name + "_again")


def test_exit_codes(sim, fitted, tmp_path):
    one_col = tmp_path / "one.csv"
    one_col.write_text("neuron_id\n0\n1\n")
    assert run("fit", "--spikes", one_col, "--out", tmp_path / "e1") == 3
    err = json.loads((tmp_path / "e1" / "error.json").read_text())
    assert err["exit_code"] == 3 and err["error"] == "FormatError"
    assert run("fit", "--bogus", "--out", tmp_path / "e2") == 2
    assert run("fit", "--out", tmp_path / "e3") == 5
    d = json.loads((fitted / "model.json").read_text())
    d["format_version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(d))
    assert run("infer", "--model", tmp_path / "m.json", "--spikes", sim / "spikes.csv", "--out", tmp_path / "e4") == 4
    # the 9-neuron model cannot read 12-neuron spikes without the split
    assert run("infer", "--model", fitted / "model.json", "--spikes", sim / "spikes.csv", "--method", "variational",
               "--out", tmp_path / "e5") == 6
    assert run("simulate", "--n", 3, "--t", 10, "--threads", 0, "--out", tmp_path / "e6") == 5


def test_manifest_for_other_command_rejected(sim, tmp_path):
    assert run("fit", "--config", sim / "manifest.json", "--out", tmp_path / "x") == 5


def test_threads_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FAELVM_THREADS", "two")
    assert run("simulate", "--n", 3, "--t", 10, "--out", tmp_path / "a") == 5
    monkeypatch.setenv("FAELVM_THREADS", "1")
    assert run("simulate", "--n", 3, "--t", 10, "--out", tmp_path / "b") == 0


def test_help_exits_cleanly(capsys):
    assert run("fit", "--help") == 0
    assert "--learning-rate" in capsys.readouterr().out
