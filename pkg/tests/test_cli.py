import json
import os

import numpy as np
import pytest

from chanprune import zoo
from chanprune.cli import RunConfig, main
from chanprune.graph import LayerNode, load_graph, make_graph, save_graph


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["demo", "--out", str(out), "--images", "64"]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def table(out):
    return dict(line.split("\t")[0::len(line.split("\t")) - 1] for line in out.splitlines()
                if "\t" in line and not line.startswith("#"))


def test_demo_writes_files(demo):
    for name in ("model.json", "model.pkw", "model_bn.json", "model_bn.pkw", "data.pkt", "config.json"):
        assert (demo / name).exists()


def test_fold_bn(demo, tmp_path, capsys):
    code, out, _ = run(capsys, "fold-bn", "--model", demo / "model_bn.json", "--out-model", tmp_path / "f.json")
    assert code == 0
    vals = table(out)
    assert int(vals["folded_bn_nodes"]) == 4 and float(vals["max_abs_diff"]) <= 1e-4
    assert (tmp_path / "f.pkw").exists()


def test_fold_bn_without_bn(demo, tmp_path, capsys):
    code, out, err = run(capsys, "fold-bn", "--model", demo / "model.json", "--out-model", tmp_path / "same.json")
    assert code == 0 and "no BN nodes" in err
    assert float(table(out)["max_abs_diff"]) == 0.0
    assert load_graph(tmp_path / "same.json", tmp_path / "same.pkw") == load_graph(demo / "model.json",
                                                                                 demo / "model.pkw")


def test_fold_bn_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "fold-bn", "--model", tmp_path / "nope.json", "--out-model", tmp_path / "o.json")
    assert code == 1 and "file not found" in err


def prune_args(demo, tmp_path, tag, *extra):
    return ["prune", "--config", demo / "config.json", "--out-model", tmp_path / f"{tag}.json",
            "--report", tmp_path / f"{tag}_report.json", *extra]


def test_prune_writes_outputs_and_figures(demo, tmp_path, capsys):
    code, out, err = run(capsys, *prune_args(demo, tmp_path, "p", "--figures-dir", tmp_path / "figs"))
    assert code == 0
    assert out.splitlines()[0].startswith("layer\tc\tc_kept\trel_err\tlambda")
    rep = json.loads((tmp_path / "p_report.json").read_text())
    assert float(table(out)["achieved_speedup"]) == pytest.approx(rep["achieved_speedup"], rel=1e-5)
    assert rep["config"]["seed"] == 0 and rep["version"] and "FLOP" in rep["flop_convention"].upper()
    assert 1.8 <= rep["achieved_speedup"] <= 2.3
    for name in ("layer_errors.png", "channels.png", "flops.png"):
        assert (tmp_path / "figs" / name).stat().st_size > 1000
    assert (tmp_path / "p.pkw").exists()


def test_prune_deterministic_and_strategies(demo, tmp_path, capsys):
    assert run(capsys, *prune_args(demo, tmp_path, "a"))[0] == 0
    assert run(capsys, *prune_args(demo, tmp_path, "b"))[0] == 0
    ra = json.loads((tmp_path / "a_report.json").read_text())
    rb = json.loads((tmp_path / "b_report.json").read_text())
    ra["config"].pop("out_model"), rb["config"].pop("out_model")
    ra["config"].pop("report"), rb["config"].pop("report")
    ra["config"].pop("out_weights"), rb["config"].pop("out_weights")
    assert ra == rb
    assert run(capsys, *prune_args(demo, tmp_path, "a"))[0] == 0
    a_bytes = (tmp_path / "a_report.json").read_bytes()
    assert run(capsys, *prune_args(demo, tmp_path, "a"))[0] == 0
    assert (tmp_path / "a_report.json").read_bytes() == a_bytes
    assert run(capsys, *prune_args(demo, tmp_path, "fk", "--strategy", "first_k"))[0] == 0
    rf = json.loads((tmp_path / "fk_report.json").read_text())
    assert [l["c_after"] for l in rf["layers"]] == [l["c_after"] for l in ra["layers"]]
    assert [l["rel_err"] for l in rf["layers"]] != [l["rel_err"] for l in ra["layers"]]


def test_prune_target_one_is_noop(demo, tmp_path, capsys):
    code, out, _ = run(capsys, *prune_args(demo, tmp_path, "id", "--target-speedup", 1.0))
    assert code == 0 and float(table(out)["achieved_speedup"]) == 1.0
    code, out, _ = run(capsys, "eval", "--model-a", demo / "model.json", "--model-b", tmp_path / "id.json",
                       "--data", demo / "data.pkt")
    assert code == 0 and float(table(out)["mean_output_rel_err"]) <= 1e-4


def test_prune_errors(demo, tmp_path, capsys):
    code, _, err = run(capsys, *prune_args(demo, tmp_path, "x", "--target-speedup", 1000))
    assert code == 1 and "unreachable" in err
    (tmp_path / "bad_sched.json").write_text(json.dumps({"per_layer": {"ghost": 2}}))
    code, _, err = run(capsys, *prune_args(demo, tmp_path, "x", "--schedule", tmp_path / "bad_sched.json"))
    assert code == 1 and "ghost" in err
    code, _, err = run(capsys, "prune", "--model", tmp_path / "none.json", "--data", demo / "data.pkt")
    assert code == 1 and "file not found" in err
    code, _, err = run(capsys, "prune", "--config", tmp_path / "missing.json")
    assert code == 1 and "file not found" in err


def test_config_paths_resolve_relative_to_config(demo):
    cfg = RunConfig.load(demo / "config.json").finalize()
    assert cfg.model == os.path.join(str(demo), "model.json")
    assert cfg.weights.endswith("model.pkw") and cfg.seed == 0


def test_eval(demo, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--model-a", demo / "model.json", "--model-b", demo / "model.json",
                       "--data", demo / "data.pkt")
    assert code == 0 and float(table(out)["mean_output_rel_err"]) == 0.0
    assert run(capsys, *prune_args(demo, tmp_path, "agg", "--target-speedup", 4.0))[0] == 0
    code, out, _ = run(capsys, "eval", "--model-a", demo / "model.json", "--model-b", tmp_path / "agg.json",
                       "--data", demo / "data.pkt")
    value = table(out)["mean_output_rel_err"]
    assert code == 0 and 0 < float(value) < np.inf and len(value.replace(".", "").lstrip("0")) <= 6
    assert "conv3" in table(out) and "conv0" not in table(out)  # conv0 changed width


def test_eval_shape_mismatch(demo, tmp_path, capsys):
    g = zoo.conv_chain([4], input_shape=(3, 5, 5))
    save_graph(g, tmp_path / "small.json", tmp_path / "small.pkw")
    code, _, err = run(capsys, "eval", "--model-a", demo / "model.json", "--model-b", tmp_path / "small.json",
                       "--data", demo / "data.pkt")
    assert code == 1 and "do not match" in err


def test_flops(tmp_path, capsys):
    nodes = [LayerNode("in", "Input", [], {"shape": [64, 32, 32]}),
             LayerNode("conv", "Conv2D", ["in"], {"in_channels": 64, "out_channels": 64, "kernel": [3, 3],
                                                  "stride": 1, "padding": 1, "groups": 1, "has_bias": False}),
             LayerNode("out", "Output", ["conv"])]
    save_graph(make_graph(nodes, {"conv": np.zeros((64, 64, 3, 3))}), tmp_path / "m.json", tmp_path / "m.pkw")
    code, out, _ = run(capsys, "flops", "--model", tmp_path / "m.json", "--input-shape", "1x64x32x32")
    assert code == 0 and table(out)["conv"] == "75497472" and table(out)["total"] == "75497472"
    code, out, _ = run(capsys, "flops", "--model", tmp_path / "m.json", "--input-shape", "1x64x32x32", "--json")
    assert json.loads(out)["per_layer"]["conv"] == 75_497_472
    code, _, err = run(capsys, "flops", "--model", tmp_path / "m.json", "--input-shape", "3x32")
    assert code == 1 and "error" in err


def test_flops_empty_graph(tmp_path, capsys):
    nodes = [LayerNode("in", "Input", [], {"shape": [3, 4, 4]}), LayerNode("out", "Output", ["in"])]
    save_graph(make_graph(nodes), tmp_path / "e.json", tmp_path / "e.pkw")
    code, out, _ = run(capsys, "flops", "--model", tmp_path / "e.json", "--input-shape", "1x3x4x4")
    assert code == 0 and table(out)["total"] == "0"
