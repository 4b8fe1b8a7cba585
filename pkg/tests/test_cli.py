import json
import os
import warnings

import numpy as np

from bmc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def _run(argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return main(argv)


def _simulate(tmp_path, scenario=2, seed=5, cfg=None):
    tmp_path.mkdir(parents=True, exist_ok=True)
    out = str(tmp_path / f"sim{scenario}")
    argv = ["simulate", "--scenario", str(scenario), "--seed", str(seed), "--out", out]
    if cfg is not None:
        cfg_path = str(tmp_path / "sim_cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump(cfg, fh)
        argv += ["--config", cfg_path]
    assert _run(argv) == EXIT_OK
    return out


def _fit(tmp_path, sim_dir, **extra):
    out = str(tmp_path / "fit")
    argv = [
        "fit", "--data", os.path.join(sim_dir, "data.csv"),
        "--mask", os.path.join(sim_dir, "mask.csv"),
        "--out", out, "--seed", "1",
        "--iterations", "30", "--burnin", "10", "--thin", "2",
    ]
    for k, v in extra.items():
        argv += [f"--{k}", str(v)]
    assert _run(argv) == EXIT_OK
    return out


class TestSimulate:
    def test_outputs_and_determinism(self, tmp_path):
        out1 = _simulate(tmp_path / "a", cfg={"m": 4, "J": 4})
        out2 = _simulate(tmp_path / "b", cfg={"m": 4, "J": 4})
        for name in ("data.csv", "mask.csv", "truth.json", "manifest.json"):
            assert os.path.exists(os.path.join(out1, name))
        with open(os.path.join(out1, "data.csv")) as fh:
            d1 = fh.read()
        with open(os.path.join(out2, "data.csv")) as fh:
            d2 = fh.read()
        assert d1 == d2

    def test_seed_changes_data(self, tmp_path):
        out1 = _simulate(tmp_path / "a", seed=1, cfg={"m": 4, "J": 4})
        out2 = _simulate(tmp_path / "b", seed=2, cfg={"m": 4, "J": 4})
        with open(os.path.join(out1, "data.csv")) as fh:
            d1 = fh.read()
        with open(os.path.join(out2, "data.csv")) as fh:
            d2 = fh.read()
        assert d1 != d2

    def test_unknown_scenario_is_usage_error(self, tmp_path):
        r = _run(["simulate", "--scenario", "9", "--out", str(tmp_path / "x")])
        assert r == EXIT_USAGE

    def test_manifest_contents(self, tmp_path):
        out = _simulate(tmp_path, cfg={"m": 3, "J": 3})
        with open(os.path.join(out, "manifest.json")) as fh:
            man = json.load(fh)
        assert man["command"] == "simulate"
        assert man["seed"] == 5
        assert man["tool_version"]
        assert any(k.endswith("sim_cfg.json") for k in man["input_hashes"])


class TestFit:
    def test_fit_smoke_and_chain_files(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        for name in ("config.json", "design.npz", "acceptance.json",
                     "holdout_mask.csv", "manifest.json"):
            assert os.path.exists(os.path.join(fit, name))
        assert os.path.exists(os.path.join(fit, "draws", "gamma.csv"))
        assert os.path.exists(os.path.join(fit, "draws", "lambda.csv"))

    def test_flat_variant_has_no_loading_draws(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim, variant="bmc0")
        assert not os.path.exists(os.path.join(fit, "draws", "lambda.csv"))
        assert os.path.exists(os.path.join(fit, "draws", "pi.csv"))

    def test_multiple_chains(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim, chains=2)
        assert os.path.exists(os.path.join(fit, "chain00", "design.npz"))
        assert os.path.exists(os.path.join(fit, "chain01", "design.npz"))

    def test_corrupt_csv_is_usage_error(self, tmp_path):
        bad = str(tmp_path / "bad.csv")
        with open(bad, "w") as fh:
            fh.write("chemical,assay_endpoint,log10_dose_uM,response\n")
            fh.write("c1,e1,not_a_number,0.5\n")
        r = _run(["fit", "--data", bad, "--out", str(tmp_path / "f")])
        assert r == EXIT_USAGE

    def test_missing_required_argument(self, capsys):
        assert _run(["fit", "--out", "somewhere"]) == EXIT_USAGE


class TestSummarize:
    def test_summarize_outputs(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        out = str(tmp_path / "summary")
        assert _run(["summarize", "--chain", fit, "--out", out,
                     "--cells", "chem000:ep001"]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "activity_probs.csv"))
        assert os.path.exists(os.path.join(out, "rankings.csv"))
        curves = os.listdir(os.path.join(out, "curves"))
        assert curves == ["chem000__ep001.csv"]

    def test_unknown_cell_is_usage_error(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        r = _run(["summarize", "--chain", fit, "--out", str(tmp_path / "s"),
                  "--cells", "nope:ep001"])
        assert r == EXIT_USAGE

    def test_partial_chain_dir_is_runtime_error(self, tmp_path):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "config.json").write_text("{}")
        r = _run(["summarize", "--chain", str(broken), "--out", str(tmp_path / "s")])
        assert r == EXIT_RUNTIME


class TestEvaluate:
    def test_metrics_file(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        out = str(tmp_path / "metrics.json")
        assert _run(["evaluate", "--chain", fit,
                     "--truth", os.path.join(sim, "truth.json"),
                     "--out", out]) == EXIT_OK
        with open(out) as fh:
            metrics = json.load(fh)
        assert "rmse" in metrics and metrics["rmse"] >= 0
        assert "rmse_zero_predictor" in metrics
        assert "auc_out_union" in metrics  # scenario 2 holds out cells
        for k in ("fp_gamma_at_0.5", "fp_t_at_0.5"):
            assert isinstance(metrics[k], int)

    def test_dimension_mismatch_is_usage_error(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        other = _simulate(tmp_path / "other", cfg={"m": 5, "J": 3})
        r = _run(["evaluate", "--chain", fit,
                  "--truth", os.path.join(other, "truth.json"),
                  "--out", str(tmp_path / "m.json")])
        assert r == EXIT_USAGE

    def test_missing_truth_is_usage_error(self, tmp_path):
        sim = _simulate(tmp_path, cfg={"m": 4, "J": 4})
        fit = _fit(tmp_path, sim)
        r = _run(["evaluate", "--chain", fit,
                  "--truth", str(tmp_path / "none.json"),
                  "--out", str(tmp_path / "m.json")])
        assert r == EXIT_USAGE
