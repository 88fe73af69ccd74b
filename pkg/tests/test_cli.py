import json
import os

import numpy as np
import pytest

from segtriage.cli import RunConfig, main, parse_n_grid, resolve_config
from segtriage.data import load_dataset
from segtriage.pipeline import run_case_inference
from segtriage.referral import parse_tau_grid, pixel_metrics, read_report_csv
from segtriage.rng import RngStream
from segtriage.store import CaseStore
from segtriage.uncertainty import read_sweep_csv
from segtriage.unet import Architecture, init_he, load_checkpoint


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth-run")
    code = run_cli("synth", "--out", str(out), "--count", "4",
                   "--image-size", "32", "--seed", "5")
    assert code == 0
    return str(out / "dataset")


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("train-run")
    code = run_cli("train", "--data", dataset, "--out", str(out),
                   "--epochs", "1", "--train-patches", "16",
                   "--patch-size", "16", "--seed", "3")
    assert code == 0
    return str(out / "checkpoint")


@pytest.fixture(scope="module")
def store_with_cases(tmp_path_factory, dataset, trained):
    store_dir = tmp_path_factory.mktemp("stores") / "s1"
    out = tmp_path_factory.mktemp("infer-run")
    code = run_cli("infer", "--checkpoint", trained, "--data", dataset,
                   "--store", str(store_dir), "--out", str(out),
                   "--samples", "4", "--seed", "9")
    assert code == 0
    return str(store_dir), str(out)


# ---------------------------------------------------------------------------
# grid parsing


def test_parse_n_grid_forms():
    assert parse_n_grid("1:30") == tuple(range(1, 31))
    assert parse_n_grid("5") == (5,)
    assert parse_n_grid("3,1,7") == (3, 1, 7)
    for bad in ("0:5", "5:1", "a", "1:2:3", ""):
        with pytest.raises(ValueError):
            parse_n_grid(bad)


def test_parse_tau_grid_forms():
    grid = parse_tau_grid("0.1:0.9:0.1")
    assert grid == tuple(round(0.1 * i, 1) for i in range(1, 10))
    assert parse_tau_grid("0.6") == (0.6,)
    assert parse_tau_grid("0.2:0.8:0.3") == (0.2, 0.5, 0.8)
    for bad in ("1.5", "0.9:0.1:0.1", "0.1:0.9:0", "x", "0.1:0.9"):
        with pytest.raises(ValueError):
            parse_tau_grid(bad)


# ---------------------------------------------------------------------------
# config resolution


def test_config_priority_defaults_file_env_flags(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"T": 3, "tau": 0.2, "seed": 1}))
    parser_args = type("A", (), {})()
    parser_args.config = str(cfg_file)
    parser_args.tau = 0.9
    resolved = resolve_config(parser_args, environ={"TRIAGE_SEED": "7"})
    assert resolved.T == 3        # file beats default
    assert resolved.seed == 7     # env beats file
    assert resolved.tau == 0.9    # flag beats everything
    assert resolved.dropout_p == 0.25  # untouched default


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.T, cfg.dropout_p, cfg.tau) == (20, 0.25, 0.6)
    assert cfg.tau_grid == "0.1:0.9:0.1"
    assert cfg.n_grid == "1:30"
    assert (cfg.train_patches, cfg.eval_patches, cfg.patch_size) == (1000, 100, 48)
    assert cfg.seed == 42
    assert cfg.metric == "epistemic"


def test_unknown_config_key_rejected(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"banana": 1}))
    args = type("A", (), {"config": str(cfg_file)})()
    from segtriage.cli import ConfigError
    with pytest.raises(ConfigError):
        resolve_config(args, environ={})


# ---------------------------------------------------------------------------
# synth


def test_synth_run_dir_contents(dataset):
    run_dir = os.path.dirname(dataset)
    manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
    assert manifest["command"] == "synth"
    assert manifest["config"]["seed"] == 5
    assert manifest["config"]["T"] == 20  # full resolved config, not just flags
    assert "dataset" in manifest["outputs"]
    assert os.path.exists(os.path.join(run_dir, "summary.txt"))
    records = load_dataset(dataset)
    assert len(records) == 4
    assert records[0].image.shape == (1, 32, 32)


def test_synth_rerun_is_byte_identical(tmp_path, dataset):
    code = run_cli("synth", "--out", str(tmp_path), "--count", "4",
                   "--image-size", "32", "--seed", "5")
    assert code == 0
    first = json.load(open(os.path.join(os.path.dirname(dataset), "manifest.json")))
    second = json.load(open(tmp_path / "manifest.json"))
    assert first["outputs"]["dataset"] == second["outputs"]["dataset"]


# ---------------------------------------------------------------------------
# train


def test_train_zero_epochs_equals_init(tmp_path, dataset):
    code = run_cli("train", "--data", dataset, "--out", str(tmp_path),
                   "--epochs", "0", "--train-patches", "8",
                   "--patch-size", "16", "--seed", "11")
    assert code == 0
    params, manifest = load_checkpoint(tmp_path / "checkpoint")
    expected = init_he(Architecture(), RngStream(11))
    assert manifest["epoch"] == 0
    for name in expected.blocks:
        np.testing.assert_array_equal(params.blocks[name][0], expected.blocks[name][0])
        np.testing.assert_array_equal(params.blocks[name][1], expected.blocks[name][1])


def test_train_writes_loss_trace(trained):
    run_dir = os.path.dirname(trained)
    trace = json.load(open(os.path.join(run_dir, "loss_trace.json")))
    assert len(trace["epoch_mean_loss"]) == 1
    assert trace["epoch_mean_loss"][0] > 0
    manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
    assert "data" in manifest["inputs"]
    assert manifest["inputs"]["data"]["digest"]


def test_train_rerun_same_inputs_same_digests(tmp_path, dataset, trained):
    code = run_cli("train", "--data", dataset, "--out", str(tmp_path),
                   "--epochs", "1", "--train-patches", "16",
                   "--patch-size", "16", "--seed", "3")
    assert code == 0
    first = json.load(open(os.path.join(os.path.dirname(trained), "manifest.json")))
    second = json.load(open(tmp_path / "manifest.json"))
    assert first["inputs"]["data"]["digest"] == second["inputs"]["data"]["digest"]
    assert first["outputs"] == second["outputs"]


# ---------------------------------------------------------------------------
# infer


def test_infer_populates_store(store_with_cases, dataset):
    store_dir, run_dir = store_with_cases
    cases = json.load(open(os.path.join(run_dir, "cases.json")))
    assert len(cases) == len(load_dataset(dataset))
    for case in cases:
        assert case["status"] in ("retained", "referred")
        assert set(case["scores"]) == {"aleatoric", "epistemic", "entropy",
                                       "mutual-information", "combined"}
    store = CaseStore(store_dir)
    assert len(store) == len(cases)


def test_infer_rerun_identical_cases_output(tmp_path, dataset, trained, store_with_cases):
    code = run_cli("infer", "--checkpoint", trained, "--data", dataset,
                   "--store", str(tmp_path / "store"), "--out", str(tmp_path / "run"),
                   "--samples", "4", "--seed", "9")
    assert code == 0
    _, first_run = store_with_cases
    first = json.load(open(os.path.join(first_run, "manifest.json")))
    second = json.load(open(tmp_path / "run" / "manifest.json"))
    assert first["outputs"]["cases.json"] == second["outputs"]["cases.json"]


# ---------------------------------------------------------------------------
# sweep-samples


def test_sweep_samples_csv(tmp_path, dataset, trained):
    code = run_cli("sweep-samples", "--checkpoint", trained, "--data", dataset,
                   "--out", str(tmp_path), "--n-grid", "1:3", "--seed", "2")
    assert code == 0
    records = read_sweep_csv(tmp_path / "sweep.csv")
    assert [r.n for r in records] == [1, 2, 3]
    assert all(r.runtime_s > 0 for r in records)
    with open(tmp_path / "sweep.csv") as fh:
        lines = fh.read().strip().split("\n")
    assert len(lines) == 1 + 3 * 5  # header + one row per (N, metric)


# ---------------------------------------------------------------------------
# sweep-threshold


def test_sweep_threshold_report(tmp_path, store_with_cases):
    store_dir, _ = store_with_cases
    code = run_cli("sweep-threshold", "--store", store_dir, "--out", str(tmp_path))
    assert code == 0
    reports = read_report_csv(tmp_path / "report.csv")
    assert len(reports) == 9
    assert [r.tau for r in reports] == [round(0.1 * i, 1) for i in range(1, 10)]
    referred = [r.referred for r in reports]
    assert referred == sorted(referred, reverse=True)
    payload = json.load(open(tmp_path / "report.json"))
    assert len(payload) == 9


def test_sweep_threshold_empty_store_is_data_error(tmp_path):
    code = run_cli("sweep-threshold", "--store", str(tmp_path / "empty"),
                   "--out", str(tmp_path / "run"))
    assert code == 3


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_tau_one_equals_plain_metrics(tmp_path, dataset, trained):
    code = run_cli("evaluate", "--checkpoint", trained, "--data", dataset,
                   "--out", str(tmp_path), "--tau", "1.0",
                   "--samples", "4", "--seed", "6")
    assert code == 0
    payload = json.load(open(tmp_path / "evaluation.json"))
    assert payload["referred"] == 0
    params, _ = load_checkpoint(trained)
    pairs = []
    for rec in load_dataset(dataset):
        result = run_case_inference(params, rec.image, T=4, seed=6)
        pairs.append((result.pred_mask, rec.mask))
    accuracy, precision, recall = pixel_metrics(pairs)
    assert payload["accuracy"] == accuracy
    assert payload["precision"] == precision
    assert payload["recall"] == recall


# ---------------------------------------------------------------------------
# exit codes


def test_config_error_exit_code(tmp_path, dataset):
    code = run_cli("train", "--data", dataset, "--out", str(tmp_path),
                   "--epochs", "-1")
    assert code == 2


def test_bad_config_file_exit_code(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = run_cli("synth", "--out", str(tmp_path / "run"), "--config", str(bad))
    assert code == 2


def test_data_error_exit_code(tmp_path):
    code = run_cli("train", "--data", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "run"), "--epochs", "1",
                   "--train-patches", "8", "--patch-size", "16")
    assert code == 3


def test_numeric_error_exit_code(tmp_path, dataset):
    code = run_cli("train", "--data", dataset, "--out", str(tmp_path),
                   "--epochs", "2", "--train-patches", "8", "--patch-size", "16",
                   "--learning-rate", "1e12")
    assert code == 4


def test_missing_required_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# env and output forms


def test_env_overrides_default(tmp_path, dataset, trained, monkeypatch):
    monkeypatch.setenv("TRIAGE_TAU", "0.05")
    code = run_cli("evaluate", "--checkpoint", trained, "--data", dataset,
                   "--out", str(tmp_path), "--samples", "2", "--seed", "1")
    assert code == 0
    manifest = json.load(open(tmp_path / "manifest.json"))
    assert manifest["config"]["tau"] == 0.05


def test_flag_overrides_env(tmp_path, dataset, trained, monkeypatch):
    monkeypatch.setenv("TRIAGE_TAU", "0.05")
    code = run_cli("evaluate", "--checkpoint", trained, "--data", dataset,
                   "--out", str(tmp_path), "--tau", "0.8",
                   "--samples", "2", "--seed", "1")
    assert code == 0
    manifest = json.load(open(tmp_path / "manifest.json"))
    assert manifest["config"]["tau"] == 0.8


def test_json_output_mode(tmp_path, dataset, capsys):
    code = run_cli("synth", "--out", str(tmp_path), "--count", "2",
                   "--image-size", "16", "--seed", "1", "--output", "json")
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["images"] == 2
    assert payload["manifest"]["command"] == "synth"


# ---------------------------------------------------------------------------
# export-report


def test_export_report_state(tmp_path, store_with_cases):
    store_dir, _ = store_with_cases
    code = run_cli("export-report", "--store", store_dir, "--out", str(tmp_path))
    assert code == 0
    payload = json.load(open(tmp_path / "state.json"))
    assert payload["config"]["metric"] == "epistemic"
    assert payload["report"]["retained"] + payload["report"]["referred"] == len(payload["cases"])
    assert all(c["status"] in ("retained", "referred", "reviewed")
               for c in payload["cases"])
