"""Acceptance criteria 1-9.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion (see conftest).
"""
import json
import time

import numpy as np
import pytest

from bsprune.checkpoint import load_checkpoint
from bsprune.cli import main
from bsprune.cost import count_flops, count_params
from bsprune.data import synth_dataset, train_val_split
from bsprune.decomposition import decompose_all
from bsprune.engine import softmax_cross_entropy
from bsprune.execution import forward, loss_and_grads, predict_logits
from bsprune.factorization import compact_svd, pca_identities_check
from bsprune.head import replace_head
from bsprune.importance import layerwise_keep_masks, score
from bsprune.pipeline import RunConfig, accounting, emit_report, run_procedure
from bsprune.pruner import apply_basis_masks, apply_channel_masks
from bsprune.templates import build_architecture
from bsprune.training import TrainConfig, evaluate, recompute_bn_stats, train_stage
from conftest import TINY, randomize_trainables, set_s, tiny_decomposed, tiny_source
from oracles import central_difference


def within(value, target, rel):
    return abs(value - target) <= rel * target


def count_json(capsys, *argv):
    assert main(["count", *argv, "--json"]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.mark.criterion(1, "counting reproduction")
def test_criterion_1_counting(capsys):
    start = time.perf_counter()
    vgg = count_json(capsys, "vgg16", "--input", "128x128x3")
    res = count_json(capsys, "resnet50")
    dense = count_json(capsys, "densenet121", "--input", "112x112x3")
    assert time.perf_counter() - start < 10
    assert within(vgg["params"], 14.74e6, 0.005) and within(vgg["flops"], 5.03e9, 0.05)
    assert within(res["params"], 23.61e6, 0.005) and within(res["flops"], 1.29e9, 0.05)
    assert within(dense["params"], 7.05e6, 0.005) and within(dense["flops"], 0.71e9, 0.05)
    assert res["conv_layers"] == 53


@pytest.mark.criterion(2, "decomposition accounting")
def test_criterion_2_decomposition_accounting():
    start = time.perf_counter()
    vgg = accounting("vgg16", (128, 128, 3))
    res = accounting("resnet50", (128, 128, 3))
    dense = accounting("densenet121", (112, 112, 3))
    assert time.perf_counter() - start < 30
    assert within(vgg["decomposed_params"], 16.55e6, 0.005)
    assert vgg["decomposed_trainable"] == 17_765
    assert within(dense["decomposed_params"], 8.40e6, 0.01)
    assert within(dense["decomposed_trainable"], 104.04e3, 0.01)
    assert within(res["decomposed_params"], 28.78e6, 0.01)
    assert within(res["decomposed_trainable"], 86.86e3, 0.01)
    for info in (vgg, res, dense):
        assert info["growth"] - 1 < 0.22


@pytest.mark.criterion(3, "factorization suite")
def test_criterion_3_factorization_suite():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=tuple(rng.integers(1, 80, size=2)))
        f = compact_svd(w)
        norm = np.linalg.norm(w)
        r = min(w.shape)
        assert np.linalg.norm(f.reconstruct() - w) <= 1e-5 * norm
        assert np.abs(f.U.T @ f.U - np.eye(r)).max() <= 1e-5
        assert np.abs(f.V.T @ f.V - np.eye(r)).max() <= 1e-5
        res = pca_identities_check(w, f)
        assert res["covariance"] <= 1e-4 * norm and res["projection"] <= 1e-4 * norm


@pytest.mark.criterion(4, "equivalence oracles")
def test_criterion_4_equivalence():
    for template in TINY:
        rng = np.random.default_rng(0)
        g = replace_head(tiny_source(template, seed=1), 3, seed=1)
        d = set_s(decompose_all(g), 1.0)
        x = rng.normal(size=(100,) + g.input_shape)
        a, b = predict_logits(g, x), predict_logits(d, x)
        assert np.abs(a - b).max() <= 1e-3
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))

        d = randomize_trainables(tiny_decomposed(template, seed=2), 2)
        keeps = {n.id: rng.random(n.attrs["rank"]) > 0.5 for n in d if n.kind == "basis_scaling_conv"}
        for k in keeps.values():
            k[0] = True
        pruned, _ = apply_basis_masks(d, keeps)
        masked = d.copy()
        for pid, keep in keeps.items():
            masked[pid].params["s"] = np.where(keep, masked[pid].params["s"], 0).astype(np.float32)
        assert np.abs(predict_logits(pruned, x) - predict_logits(masked, x)).max() <= 1e-6

    rng = np.random.default_rng(3)
    for depth in (2, 4):
        chain = build_architecture({"format": 1, "input": [10, 10, 3], "num_classes": 4, "layers": [
            {"kind": "conv", "id": f"c{i}", "filters": 8} for i in range(depth)]}, seed=depth)
        d = decompose_all(chain)
        masks = {f"c{i}_scaling": rng.random(8) > 0.4 for i in range(depth - 1)}
        pruned, _ = apply_channel_masks(d, masks)
        masked = d.copy()
        for pid, keep in masks.items():
            masked[pid].params["vbar_t"][:, ~keep] = 0
            masked[pid].params["bias"][~keep] = 0
        x = rng.normal(size=(20, 10, 10, 3))
        assert np.abs(predict_logits(pruned, x) - predict_logits(masked, x)).max() <= 1e-6


@pytest.mark.criterion(5, "gradient checks")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_criterion_5_gradients(seed):
    g = randomize_trainables(tiny_decomposed("tiny_resnet", 3, seed=seed), seed)
    for n in g:
        n.params = {k: v.astype(np.float64) for k, v in n.params.items()}
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4,) + g.input_shape)
    y = rng.integers(0, 3, 4)
    _, _, grads = loss_and_grads(g, x, y, mode="train", update_stats=False)

    def loss():
        return softmax_cross_entropy(forward(g, x, "train", update_stats=False), y)[0]

    checked = 0
    for (nid, name), grad in grads.items():
        fd = central_difference(loss, g[nid].params[name], 1e-6)
        err = np.abs(grad - fd) / (np.abs(fd) + 1e-8)
        assert err.max() < 1e-2, (nid, name, float(err.max()))
        checked += grad.size
    assert checked == sum(g[nid].params[k].size for nid, k in g.trainable_set())


@pytest.mark.criterion(6, "desk-scale pipeline")
def test_criterion_6_pipeline(tmp_path):
    start = time.perf_counter()
    cfg = RunConfig()  # tiny_vgg, synthetic 2-class n=1000, 10 epochs, 50% basis removal
    assert cfg.architecture == "tiny_vgg" and cfg.remove_fraction["basis"] == 0.5
    report = run_procedure(cfg, tmp_path)
    assert time.perf_counter() - start < 300
    rows = {r["stage"]: r for r in report["rows"]}
    print({k: round(r["accuracy"], 4) for k, r in rows.items()})
    assert rows["trained"]["accuracy"] >= 0.95
    assert rows["trained"]["accuracy"] - rows["basis_pruned_1"]["accuracy"] <= 0.02
    for stage in ("basis_pruned_1", "double_pruned_1"):
        assert rows[stage]["param_pr"] > 0 and rows[stage]["flop_pr"] > 0
    for row in report["rows"]:
        g = load_checkpoint(tmp_path / "checkpoints" / f"{row['stage']}.bsp")
        assert count_params(g).total_params == row["params"]
        assert count_flops(g).total_flops == row["flops"]


METHODS = ("taylor_fo", "singular", "random", "reverse")


def ablation_seed(seed):
    ds = synth_dataset(1000, seed=seed)
    train, val = train_val_split(ds, seed=seed)
    g = tiny_decomposed("tiny_vgg", 2, seed=seed)
    g, _ = train_stage(g, train, TrainConfig(epochs=10, seed=seed))
    out = {}
    for method in METHODS:
        table = score(g, method, val.as_tuple(), seed=seed)
        pruned, _ = apply_basis_masks(g, layerwise_keep_masks(table, 0.5), seed)
        out[method] = evaluate(recompute_bn_stats(pruned, train), val)  # no retraining
    return out


@pytest.mark.criterion(7, "importance ablation trend")
def test_criterion_7_ablation_trend():
    start = time.perf_counter()
    runs = [ablation_seed(seed) for seed in range(5)]
    assert time.perf_counter() - start < 15 * 60
    mean = {m: 100 * np.mean([r[m] for r in runs]) for m in METHODS}
    print({m: round(v, 2) for m, v in mean.items()})
    for hi, lo in zip(METHODS, METHODS[1:]):
        assert mean[hi] - mean[lo] >= -1.0, (hi, lo)
    assert mean["taylor_fo"] - mean["reverse"] > 3.0


@pytest.mark.criterion(8, "full-scale accuracy substituted by criteria 3-7")
def test_criterion_8_substitution_is_documented():
    from pathlib import Path
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    assert "not reproducible at desk scale" in readme
    for n in range(3, 8):
        assert f"test_criterion_{n}_" in Path(__file__).read_text()


@pytest.mark.criterion(9, "determinism")
def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": 1, "dataset": {"kind": "synthetic", "n": 400},
                               "epochs": {"train": 2, "basis": 1, "double": 1}, "seed": 11}))
    for name in ("a", "b"):
        assert main(["run", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in ("report.csv", "report.json", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
