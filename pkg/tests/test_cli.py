import json
from dataclasses import fields, replace

import numpy as np
import pytest

from commap import modelio
from commap.cli import (
    EXIT_CONFIG, EXIT_DATA, OUT_ENV, RunConfig, build_parser, config_from_args, config_hash,
    main, ramp_colour, read_ppm,
)
from commap.data import load_events, preset, simulate_mission
from commap.errors import ConfigError, DataError
from commap.evaluation import EvalConfig, fit_method, parse_keyvalue, read_table_csv
from commap.laplace_gpc import GpcConfig
from commap.noisy_input import NiConfig
from commap.regression import GprConfig
from commap.svgpc import SparseConfig

FAST = ["--epochs", "5", "--seed", "3"]


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def events(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run_cli("simulate", "--n-events", 60, "--seed", 1, "--out-dir", out) == 0
    return out / "events.csv"


class TestPipeline:
    def test_simulate_artifacts(self, events):
        ds = load_events(events)
        assert len(ds) == 60
        text = events.read_text()
        assert text.startswith("# seed = 1\n# config_hash = ")
        truth = json.loads((events.parent / "events_truth.json").read_text())
        assert len(truth["true_X"]) == 60 and truth["meta"]["seed"] == 1

    def test_train_evaluate(self, events, tmp_path):
        assert run_cli("train", "--data", events, "--method", "svgpc", *FAST,
                       "--out-dir", tmp_path) == 0
        meta, header, trace = read_table_csv(tmp_path / "trace_svgpc.csv")
        assert header == ["epoch", "mean_elbo"] and trace.shape == (5, 2)
        assert meta["seed"] == "3"
        assert modelio.read_meta(tmp_path / "model_svgpc.json")["config_hash"] == meta["config_hash"]

        assert run_cli("evaluate", "--data", events, "--methods", "svgpc,gpc", "--splits", 2,
                       *FAST, "--out-dir", tmp_path) == 0
        kv = parse_keyvalue((tmp_path / "report.kv").read_text())
        for m in ("SVGPC", "GPC"):
            assert 0.0 <= float(kv[f"{m}.ratio@0.5.mean"]) <= 1.0
            assert float(kv[f"{m}.nll.mean"]) >= 0.0
        assert "SVGPC" in (tmp_path / "report.txt").read_text()

    def test_heatmap(self, events, tmp_path):
        run_cli("train", "--data", events, "--method", "gpr", "--out-dir", tmp_path)
        assert run_cli("heatmap", "--model", tmp_path / "model_gpr.json", "--resolution", "4x3",
                       "--tx", "10,20", "--out-dir", tmp_path) == 0
        meta, header, grid = read_table_csv(tmp_path / "heatmap.csv")
        assert header == ["rx_x", "rx_y", "value", "latent_var"] and grid.shape == (12, 4)
        assert meta["method"] == "GPR"
        comments, rgb = read_ppm(tmp_path / "heatmap.ppm")
        assert rgb.shape == (3, 4, 3) and comments["seed"] == "0"
        # top image row is the largest rx_y
        vals = grid[:, 2].reshape(3, 4)
        lo, hi = vals.min(), vals.max()
        np.testing.assert_array_equal(rgb, ramp_colour(vals[::-1], lo, hi))

    def test_sweep(self, events, tmp_path):
        assert run_cli("sweep", "--data", events, "--method", "gpr", "--splits", 2,
                       "--out-dir", tmp_path) == 0
        meta, header, curve = read_table_csv(tmp_path / "sweep_gpr.csv")
        best = float(meta["best_threshold"])
        assert curve[curve[:, 0] == best, 1][0] == curve[:, 1].max()

    def test_rerun_is_byte_identical(self, events, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("train", "--data", events, "--method", "ni-nn", *FAST,
                           "--out-dir", out) == 0
        for name in ("model_ni_nn.json", "trace_ni_nn.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestErrors:
    def test_unknown_method(self, events, tmp_path, capsys):
        out = tmp_path / "o"
        assert run_cli("train", "--data", events, "--method", "knn", "--out-dir", out) == EXIT_CONFIG
        assert not out.exists()
        assert "config error" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        assert run_cli("train", "--data", tmp_path / "none.csv", "--method", "gpr",
                       "--out-dir", tmp_path) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_bad_rows_report_line(self, tmp_path, capsys, events):
        bad = tmp_path / "bad.csv"
        lines = events.read_text().splitlines()
        lines[5] = lines[5].rsplit(",", 1)[0]
        bad.write_text("\n".join(lines) + "\n")
        assert run_cli("train", "--data", bad, "--method", "gpr", "--out-dir", tmp_path) == EXIT_DATA
        err = capsys.readouterr().err
        assert "line 6" in err and "[commap.data]" in err

    def test_argparse_failure(self, capsys):
        assert run_cli("heatmap") == EXIT_CONFIG
        assert run_cli("--help") == 0

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(gh_nodes=1), dict(region=(0, 0, 0, 1)),
                                    dict(inducing_fraction=0.0), dict(methods=("GPR", "GPC"))])
    def test_validation(self, kw, tmp_path):
        cfg = RunConfig("heatmap", model=None, out_dir=str(tmp_path), **kw)
        with pytest.raises(ConfigError):
            cfg.validate()


class TestConfig:
    def test_environment_out_dir(self):
        ns = build_parser().parse_args(["simulate"])
        assert config_from_args(ns, {OUT_ENV: "/x"}).out_dir == "/x"
        ns = build_parser().parse_args(["simulate", "--out-dir", "/y"])
        assert config_from_args(ns, {OUT_ENV: "/x"}).out_dir == "/y"

    def test_method_case(self):
        ns = build_parser().parse_args(["evaluate", "--data", "d", "--methods", "gpr, ni-nn"])
        assert config_from_args(ns, {}).methods == ("GPR", "NI-NN")

    def test_hash_tracks_semantic_fields(self, events, tmp_path):
        base = RunConfig("train", data=str(events), out_dir="a")
        h = config_hash(base)
        assert config_hash(replace(base, out_dir="b")) == h
        copy = tmp_path / "renamed.csv"
        copy.write_bytes(events.read_bytes())
        assert config_hash(replace(base, data=str(copy))) == h
        changes = dict(seed=1, epochs=2, batch_size=3, gh_nodes=10, splits=3,
                       snr_thresholds=(1.0,), methods=("GPR",), tx=(1.0, 0.0))
        for k, v in changes.items():
            assert config_hash(replace(base, **{k: v})) != h, k
        copy.write_bytes(events.read_bytes() + b"\n")
        assert config_hash(replace(base, data=str(copy))) != h

    def test_every_field_is_classified(self):
        non_semantic = [f.name for f in fields(RunConfig) if not f.metadata.get("semantic", True)]
        assert non_semantic == ["out_dir"]


@pytest.fixture(scope="module")
def small_mission():
    return simulate_mission(preset("mixed", n_events=50), seed=0)


class TestModelIo:
    CFG = EvalConfig(sparse=SparseConfig(epochs=3), ni=NiConfig(epochs=3, predict_samples=5),
                     gpr=GprConfig(optimize=False), gpc=GpcConfig(optimize=False))

    @pytest.mark.parametrize("method", ["GPR", "SVGPR", "GPC", "SVGPC", "NI-NN"])
    def test_round_trip(self, method, small_mission, tmp_path):
        ds = small_mission
        model = fit_method(method, ds, np.arange(len(ds)), self.CFG)
        path = tmp_path / "m.json"
        modelio.save_model(model, path, {"seed": 0})
        again = modelio.load_model(path)
        X = ds.X[:7] + 5.0
        a, b = model.predict(X), again.predict(X)
        np.testing.assert_allclose(b.value, a.value, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(b.variance, a.variance, rtol=1e-9, atol=1e-12)
        assert modelio.dumps(modelio.model_to_dict(again, {"seed": 0})) == path.read_text()

    def test_rejects_other_versions(self, small_mission, tmp_path):
        model = fit_method("SVGPC", small_mission, np.arange(50), self.CFG)
        d = modelio.model_to_dict(model)
        with pytest.raises(DataError, match="version"):
            modelio.model_from_dict({**d, "version": 99})
        with pytest.raises(DataError):
            modelio.model_from_dict({**d, "format": "other"})
        with pytest.raises(DataError, match="unknown"):
            modelio.model_from_dict({**d, "config": {**d["config"], "bogus": 1}})
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(DataError):
            modelio.load_model(bad)
