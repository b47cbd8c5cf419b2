import json

import numpy as np
import pytest

from nestdrop.checkpoint import load_checkpoint
from nestdrop.curves import read_curve, select_capacity
from nestdrop.errors import ConfigError, ProtocolError
from nestdrop.experiment import (
    ExperimentConfig,
    cmd_brain_damage,
    cmd_k_sweep,
    cmd_layerwise,
    cmd_oracle,
    cmd_train,
    cost_report,
    evaluate_checkpoint,
    read_run,
    truncate_network,
)
from nestdrop.network import accuracy, forward

from conftest import make_toy_idx, toy_config_dict


def config(root, **solver):
    d = toy_config_dict(root / "data", root / "out")
    d["solver"].update(solver)
    return ExperimentConfig.from_dict(d, base_dir=root)


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    make_toy_idx(root / "data")
    cfg = config(root)
    data = cfg.load_datasets()
    nested = cmd_train(cfg, root / "nested", data)
    plain = cmd_train(cfg, root / "plain", data, nested=False)
    return {"root": root, "cfg": cfg, "data": data, "nested": nested, "plain": plain,
            "sweep": cmd_k_sweep(nested, data[1])}


def test_run_directory_layout(env):
    d = env["nested"]
    names = sorted(p.name for p in (d / "checkpoints").iterdir())
    assert names == ["final.ndck", "k001.ndck", "k002.ndck", "k003.ndck", "k004.ndck"]
    run = read_run(d)
    assert run["n"] == 4 and run["target_layer"] == "conv1" and run["total_iterations"] == 120
    assert [s["k"] for s in run["sweeps"]] == [1, 2, 3, 4]
    assert [s["iteration"] for s in run["sweeps"]] == [25, 50, 75, 100]
    assert (d / "train_log.csv").read_text().count("\n") == 121
    saved = json.loads((d / "config.json").read_text())
    assert saved["dataset"]["train_images"].startswith("/")


def test_k_sweep_final_row_equals_full_evaluation(env):
    curve, data = env["sweep"], env["data"]
    assert curve.ks == [1, 2, 3, 4]
    final = load_checkpoint(env["nested"] / "checkpoints" / "final.ndck")
    full = accuracy(final.network, final.params, data[1].images, data[1].labels)
    assert curve.at(4) == full


def test_k_sweep_rows_match_independent_reevaluation(env):
    data = env["data"][1]
    for row in env["sweep"].rows[:-1]:
        ck = load_checkpoint(env["nested"] / "checkpoints" / row.checkpoint)
        assert ck.sweep_index() == row.k
        # rebuilt network with the first k filters only
        spec, params = truncate_network(ck.network, ck.params, "conv1", row.k)
        assert accuracy(spec, params, data.images, data.labels) == row.accuracy
        assert evaluate_checkpoint(ck, data, "conv1", row.k) == row.accuracy


def test_k_sweep_csv_written(env):
    back = read_curve(env["nested"] / "k_sweep.csv")
    assert back.rows == env["sweep"].rows and back.run_id == "k_sweep"


def test_truncated_equals_rebuilt_on_three_filter_network(tmp_path):
    d = toy_config_dict(tmp_path / "data", tmp_path / "out")
    d["network"]["spec"]["layers"][0]["num_output"] = 3
    make_toy_idx(tmp_path / "data")
    cfg = ExperimentConfig.from_dict(d)
    data = cfg.load_datasets()
    run = cmd_train(cfg, tmp_path / "r3", data)
    ck = load_checkpoint(run / "checkpoints" / "final.ndck")
    x, y = data[1].images, data[1].labels
    for k in (1, 2, 3):
        spec, params = truncate_network(ck.network, ck.params, "conv1", k)
        assert evaluate_checkpoint(ck, data[1], "conv1", k) == accuracy(spec, params, x, y)
        a, _ = forward(ck.network, ck.params, x, truncate={"conv1": k})
        b, _ = forward(spec, params, x)
        # same terms, different BLAS blocking: at most float32 rounding apart
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


def test_brain_damage_full_width_equals_baseline(env):
    data = env["data"][1]
    final = load_checkpoint(env["plain"] / "checkpoints" / "final.ndck")
    base = accuracy(final.network, final.params, data.images, data.labels)
    for order in ("trained", "norm"):
        curve = cmd_brain_damage(env["plain"], data, order=order)
        assert curve.ks == [1, 2, 3, 4] and curve.at(4) == base
    assert (env["plain"] / "brain_damage_norm.csv").exists()


def test_brain_damage_mask_equals_physical_truncation(env):
    data = env["data"][1]
    curve = cmd_brain_damage(env["plain"], data)
    ck = load_checkpoint(env["plain"] / "checkpoints" / "final.ndck")
    for k in (1, 2, 3):
        spec, params = truncate_network(ck.network, ck.params, "conv1", k)
        assert curve.at(k) == accuracy(spec, params, data.images, data.labels)


def test_norm_order_keeps_largest_filters(env):
    ck = load_checkpoint(env["plain"] / "checkpoints" / "final.ndck")
    from nestdrop.experiment import filter_order

    norms = np.linalg.norm(ck.params["conv1"]["weights"].reshape(4, -1).astype(np.float64), axis=1)
    order = filter_order(ck, "conv1", "norm")
    assert np.all(np.diff(norms[order]) <= 0)
    with pytest.raises(ConfigError):
        filter_order(ck, "conv1", "random")


def test_k_sweep_rejects_baseline_run(env):
    with pytest.raises(ProtocolError):
        cmd_k_sweep(env["plain"], env["data"][1])


def test_missing_checkpoint_names_k(env, tmp_path):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(env["nested"], d)
    (d / "checkpoints" / "k002.ndck").unlink()
    with pytest.raises(ProtocolError, match="k=2"):
        cmd_k_sweep(d, env["data"][1])


def test_not_a_run_directory(tmp_path):
    with pytest.raises(ProtocolError):
        read_run(tmp_path)


def test_oracle_totals(env, tmp_path):
    cfg = config(env["root"], max_iters=30, sweep_interval=1000)
    curve, total = cmd_oracle(cfg, run_dir=tmp_path / "oracle", datasets=env["data"])
    assert curve.ks == [1, 2, 4] and total == 90 == curve.total_iterations
    saved = json.loads((tmp_path / "oracle" / "oracle.json").read_text())
    assert saved == {"k_list": [1, 2, 4], "per_run_iterations": 30, "total_iterations": 90}
    for k in (1, 2, 4):
        ck = load_checkpoint(tmp_path / "oracle" / f"oracle_k{k:03d}" / "checkpoints" / "final.ndck")
        assert ck.params["conv1"]["weights"].shape[0] == k and not ck.nd_states


def test_cost_report():
    r = cost_report(90000, 4 * 90000)
    assert r["ratio"] == 0.25 and r["nested_iterations"] == 90000


def test_single_layer_layerwise_is_composition(env, tmp_path):
    report = cmd_layerwise(env["cfg"], epsilon=0.005, run_dir=tmp_path / "lw", datasets=env["data"])
    k_star = select_capacity(env["sweep"], 0.005)
    (stage,) = report["layers"]
    assert stage["selected"] == k_star and stage["accuracy_at_selected"] == env["sweep"].at(k_star)
    stage_dir = tmp_path / "lw" / "stage1_conv1"
    for name in ("k001.ndck", "final.ndck"):
        assert (stage_dir / "checkpoints" / name).read_bytes() == \
            (env["nested"] / "checkpoints" / name).read_bytes()
    assert report["final_spec"]["layers"][0]["num_output"] == k_star
    assert json.loads((tmp_path / "lw" / "layerwise.json").read_text()) == report


def test_two_layer_layerwise_warm_starts_from_truncated_network(env, tmp_path):
    report = cmd_layerwise(env["cfg"], epsilon=0.005, layers=["conv1", "fc1"], run_dir=tmp_path / "lw2",
                           datasets=env["data"])
    k1 = report["layers"][0]["selected"]
    assert [s["layer"] for s in report["layers"]] == ["conv1", "fc1"]
    assert report["filters_before"] == 4 + 16
    assert report["filters_after"] == k1 + report["layers"][1]["selected"]
    assert report["params_after"] < report["params_before"] or report["filters_after"] == 20
    # stage 2 started from the stage-1 network truncated at k1
    run1 = read_run(tmp_path / "lw2" / "stage1_conv1")
    ck1 = load_checkpoint(tmp_path / "lw2" / "stage1_conv1" /
                          (run1["final"] if k1 == 4 else f"checkpoints/k{k1:03d}.ndck"))
    _, init = truncate_network(ck1.network, ck1.params, "conv1", k1)
    ck2 = load_checkpoint(tmp_path / "lw2" / "stage2_fc1" / "checkpoints" / "final.ndck")
    assert ck2.params["conv1"]["weights"].shape[0] == k1
    assert ck2.params["fc1"]["weights"].shape[1] == init["fc1"]["weights"].shape[1]


def test_rebuilt_network_matches_truncated_accuracy_before_training(env):
    data = env["data"][1]
    k_star = select_capacity(env["sweep"], 0.005)
    run = read_run(env["nested"])
    rel = run["final"] if k_star == run["n"] else f"checkpoints/k{k_star:03d}.ndck"
    ck = load_checkpoint(env["nested"] / rel)
    spec, params = truncate_network(ck.network, ck.params, "conv1", k_star)
    assert accuracy(spec, params, data.images, data.labels) == env["sweep"].at(k_star)


def test_short_run_has_no_sweeps_and_records_warning(env, tmp_path):
    cfg = config(env["root"], max_iters=20, sweep_interval=25)
    d = cmd_train(cfg, tmp_path / "short", env["data"])
    run = read_run(d)
    assert run["sweeps"] == [] and run["final"] == "checkpoints/final.ndck"
    assert any("will not be swept" in w for w in run["warnings"])
    curve = cmd_k_sweep(d, env["data"][1])
    assert curve.ks == [4]


def test_reruns_are_byte_identical(env, tmp_path):
    d = cmd_train(env["cfg"], tmp_path / "again", env["data"])
    for p in sorted(env["nested"].rglob("*")):
        rel = p.relative_to(env["nested"])
        if p.is_file() and rel.name != "k_sweep.csv":
            assert (d / rel).read_bytes() == p.read_bytes(), rel


def test_config_errors(tmp_path):
    d = toy_config_dict(tmp_path / "data", tmp_path / "out")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**d, "bogus": 1})
    bad = json.loads(json.dumps(d))
    bad["solver"]["base_lr"] = -1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["solver"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["nested_dropout"]["layer"] = "nope"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d).load_datasets()  # files do not exist
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_preset_config(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "network": {"preset": "mnist_desk", "widths": {"conv1": 8}},
        "dataset": {"format": "mnist"},
        "solver": {},
        "nested_dropout": {"layer": "conv1", "rho": 0.15},
    })
    spec = cfg.build_spec()
    assert spec.layer("conv1").num_output == 8
    assert [l.name for l in spec.nd_layers()] == ["nd_conv1"]
    assert not cfg.build_spec(nested=False).nd_layers()


def test_brain_damage_on_nested_run_equals_truncated_evaluation(env, tmp_path):
    data = env["data"][1]
    curve = cmd_brain_damage(env["nested"], data, out_csv=tmp_path / "bd.csv")
    final = load_checkpoint(env["nested"] / "checkpoints" / "final.ndck")
    for k in curve.ks:
        assert curve.at(k) == evaluate_checkpoint(final, data, "conv1", k)
