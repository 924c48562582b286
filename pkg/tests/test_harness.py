from pathlib import Path

import numpy as np
import pytest

from algebra_nn.algebra import M2R
from algebra_nn.autodiff import Tape
from algebra_nn.cost import model_cost, product_cost
from algebra_nn.harness import bench as B
from algebra_nn.harness import data as D
from algebra_nn.harness.config import ExperimentConfig
from algebra_nn.harness.train import (DataBundle, NonFiniteLossError, build_model, l2_scale, load_checkpoint,
                                      matched_width, train)
from algebra_nn.pruning import PruneSchedule, target_sparsity

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small(**over):
    cfg = ExperimentConfig().override(["steps=200", "log_every=50", "model.hidden=[4, 4]"])
    return cfg.override([f"{k}={v}" for k, v in over.items()])


# config


def test_config_round_trip():
    cfg = ExperimentConfig().override(["optim.lr=0.003", "model.hidden=[3, 5]", "prune.final_sparsity=0.7",
                                       "model.gate=true", "data.name=blobs"])
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    assert ExperimentConfig.loads(ExperimentConfig().dumps()) == ExperimentConfig()


def test_config_file_round_trip(tmp_path):
    cfg = small(algebra="H")
    cfg.save(tmp_path / "c.yaml")
    assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg


def test_override_parses_yaml_scalars():
    cfg = ExperimentConfig().override(["steps=17", "optim.lr=1e-3", "model.batchnorm=true", "algebra=H"])
    assert cfg.steps == 17 and cfg.optim.lr == 1e-3 and cfg.model.batchnorm is True and cfg.algebra == "H"


@pytest.mark.parametrize("bad", ["nope=1", "model.nope=1", "steps", "model=3", "steps=abc", "model.bias=1"])
def test_bad_overrides_are_rejected(bad):
    with pytest.raises((KeyError, ValueError, TypeError)):
        ExperimentConfig().override([bad])


def test_config_version_is_checked():
    with pytest.raises(ValueError, match="version"):
        ExperimentConfig.from_dict({"version": 99})


# data


def test_spiral_and_blobs_are_seeded():
    x1, y1 = D.spiral(50, 3, seed=4)
    x2, y2 = D.spiral(50, 3, seed=4)
    np.testing.assert_array_equal(x1, x2)
    assert x1.shape == (150, 2) and np.bincount(y1).tolist() == [50, 50, 50]
    xb, yb = D.blobs(10, 4, features=6, seed=1)
    assert xb.shape == (40, 6) and set(yb) == {0, 1, 2, 3}


def _cifar_bytes(labels, rng):
    recs = np.zeros((len(labels), D.CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = rng.integers(0, 256, (len(labels), 3072))
    return recs


def test_cifar_batch_parsing(tmp_path):
    rng = np.random.default_rng(0)
    recs = _cifar_bytes(rng.integers(0, 10, D.CIFAR_RECORDS_PER_BATCH), rng)
    path = tmp_path / "data_batch_1.bin"
    recs.tofile(path)
    x, y = D.load_cifar_batch(path)
    assert x.shape == (10000, 32, 32, 3) and y.shape == (10000,)
    np.testing.assert_array_equal(y, recs[:, 0])
    # channel-planar bytes: red plane first, row-major pixels
    assert x[7, 0, 1, 0] == recs[7, 2] / 255.0
    assert x[7, 0, 0, 2] == recs[7, 1 + 2048] / 255.0
    assert 0.0 <= x.min() and x.max() <= 1.0


def test_cifar_rejects_partial_records(tmp_path):
    path = tmp_path / "bad.bin"
    np.zeros(D.CIFAR_RECORD * 2 + 5, dtype=np.uint8).tofile(path)
    with pytest.raises(D.DatasetError, match=f"offset {2 * D.CIFAR_RECORD}"):
        D.load_cifar_batch(path, expect_records=None)


def test_cifar_rejects_bad_labels_and_counts(tmp_path):
    rng = np.random.default_rng(1)
    recs = _cifar_bytes([1, 12, 3], rng)
    path = tmp_path / "b.bin"
    recs.tofile(path)
    with pytest.raises(D.DatasetError, match=f"offset {D.CIFAR_RECORD}"):
        D.load_cifar_batch(path, expect_records=None)
    with pytest.raises(D.DatasetError, match="expected 10000"):
        D.load_cifar_batch(path)


def test_crop_and_flip_are_seeded():
    imgs = np.random.default_rng(2).random((6, 32, 32, 3))
    a = D.random_crop_flip(imgs, 24, np.random.default_rng(3))
    b = D.random_crop_flip(imgs, 24, np.random.default_rng(3))
    assert a.shape == (6, 24, 24, 3)
    np.testing.assert_array_equal(a, b)
    full = D.random_crop_flip(imgs, 32, np.random.default_rng(4))
    for i in range(6):
        assert np.array_equal(full[i], imgs[i]) or np.array_equal(full[i], imgs[i, :, ::-1])


def test_text_loader(tmp_path):
    (tmp_path / "t.txt").write_bytes(b"hello world")
    tokens = D.load_text(tmp_path / "t.txt")
    assert tokens.tolist() == list(b"hello world")
    (tmp_path / "e.txt").write_bytes(b"x")
    with pytest.raises(D.DatasetError):
        D.load_text(tmp_path / "e.txt")


# training


def test_real_mlp_fits_blobs():
    cfg = ExperimentConfig.load(CONFIGS / "blobs_real.yaml")
    res = train(cfg)
    assert res.eval_metric >= 0.99


def test_training_is_deterministic():
    cfg = small(algebra="M2R")
    a, b = train(cfg), train(cfg)
    assert a.history == b.history
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def _lifted(model, x):
    tape = Tape()
    return model._lift(model.bind(tape), tape.constant(x)).value


def test_lift_is_trained_from_the_first_step():
    cfg = small(**{"algebra": "M2R", "steps": 1})
    x = np.random.default_rng(0).normal(size=(3, 2))
    before = build_model(cfg)
    after = train(cfg).model
    assert np.all(_lifted(after, x)[..., 1:] != 0.0)
    assert not np.array_equal(after.params["lift.weight"], before.params["lift.weight"])
    np.testing.assert_array_equal(_lifted(after, x)[..., 0], x)


def test_zero_lift_only_escapes_through_first_column():
    # inputs [[x, 0], [0, 0]] span a left ideal: weight-left products and the
    # norm readout never feed gradient into the second matrix column
    cfg = small(**{"algebra": "M2R", "model.lift": "zeros", "steps": 1})
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.all(_lifted(build_model(cfg), x)[..., 1:] == 0.0)
    after = _lifted(train(cfg).model, x)
    assert np.all(after[..., 2] != 0.0)
    assert np.all(after[..., [1, 3]] == 0.0)


def test_pruned_run_hits_target_and_spares_frozen(tmp_path):
    cfg = small(**{"steps": 1000, "prune.final_sparsity": 0.9, "model.hidden": "[6, 6]"})
    seen = []
    res = train(cfg, tmp_path, on_step=lambda row: seen.append(row) and False)
    n = sum(res.mask.keep[k].size for k in res.mask.prunable)
    assert abs(res.mask.sparsity() - 0.9) <= 1.0 / n
    assert res.mask.keep["out.weight"].all()
    s = PruneSchedule(1000, 0.9)
    for row in seen:
        if row["step"] in s.boundaries():
            assert abs(row["sparsity"] - target_sparsity(s, row["step"])) <= 1.0 / n
    assert (tmp_path / "model.mask").exists()


def test_zero_sparsity_matches_plain_training():
    cfg = small()
    a = train(cfg)
    b = train(cfg.override(["prune.final_sparsity=0.0"]))
    assert a.history == b.history and b.mask is None


def test_checkpoint_restores_model(tmp_path):
    cfg = small(**{"algebra": "H", "model.batchnorm": "true", "prune.final_sparsity": 0.5})
    res = train(cfg, tmp_path)
    model, cfg2, mask = load_checkpoint(tmp_path / "model.ckpt")
    assert cfg2 == cfg
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(model.predict(x), res.model.predict(x))
    assert mask.sparsity() == res.mask.sparsity()
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "step,loss,metric,sparsity"


def test_nonfinite_loss_keeps_last_good_checkpoint(tmp_path):
    cfg = small(steps=5)
    x, y = D.spiral(5, 3)
    x[0, 0] = np.nan
    ds = D.Dataset("table", x, y)
    with pytest.raises(NonFiniteLossError) as info:
        train(cfg, tmp_path, bundle=DataBundle(ds, ds, features=2, classes=3))
    assert info.value.step == 1
    model, _, _ = load_checkpoint(info.value.checkpoint)
    fresh = build_model(cfg)
    for k in fresh.params:
        np.testing.assert_array_equal(model.params[k], fresh.params[k])


def test_gru_and_conv_configs_train(tmp_path):
    text = tmp_path / "t.txt"
    text.write_bytes(b"abcabcabcabc" * 20)
    cfg = ExperimentConfig().override(["algebra=C", "model.kind=gru", "model.hidden=[3]", "model.embed=2",
                                       "model.seq_len=6", "data.name=text", f"data.path={text}",
                                       "data.batch_size=2", "steps=3", "log_every=1"])
    res = train(cfg)
    assert len(res.history) == 3 and np.isfinite(res.eval_metric)


def test_l2_scale_defaults():
    assert l2_scale(small(algebra="M2R")) == 1.0
    cifar = small(**{"algebra": "M2R", "data.name": "cifar10"})
    assert l2_scale(cifar) == 0.725
    assert l2_scale(cifar.override(["algebra=C"])) == 1.0
    assert l2_scale(cifar.override(["optim.l2_scale=0.5"])) == 0.5


def test_matched_width_respects_budget():
    real = small(algebra="R").override(["model.hidden=[32, 32]"])
    budget = model_cost(build_model(real).layer_specs()).multiplies
    mat = small(algebra="M2R")
    w = matched_width(mat, budget)
    cost = lambda width: model_cost(build_model(mat.override([f"model.hidden=[{width}, {width}]"]))  # noqa: E731
                                    .layer_specs()).multiplies
    assert cost(w) <= budget < cost(w + 1)


# bench


def test_counting_array_counts_multiplies_only():
    B.CountingArray.reset()
    a = B.CountingArray.wrap(np.ones((3, 4)))
    (a * 2.0 + a) * a
    assert B.CountingArray.counter["multiplies"] == 24


@pytest.mark.parametrize("kernel", B.KERNELS)
def test_bench_kernels_match_reference(kernel):
    rng = np.random.default_rng(0)
    a, b = B.make_operands(kernel, (5, 5, 2, 3) if kernel == "dwconv" else (3, 4) if kernel == "matvec"
                           else (2, 3, 4), 4, rng)
    out = B.run_kernel(kernel, M2R, a, b)
    A = lambda t: t.reshape(t.shape[:-1] + (2, 2))  # noqa: E731
    if kernel == "matvec":
        ref = np.einsum("mnij,njk->mik", A(a), A(b))
    elif kernel == "matmul":
        ref = np.einsum("mnij,npjk->mpik", A(a), A(b))
    else:
        ref = sum(np.einsum("cij,hwcjk->hwcik", A(b)[u, v], A(a)[u:u + 3, v:v + 3]) for u in range(3) for v in range(3))
    np.testing.assert_allclose(out, ref.reshape(out.shape), atol=1e-12)


def test_bench_rows():
    row = B.bench_one("matvec", "H", (8, 8), repetitions=2)
    assert row.analytic_density == 2.0
    assert row.counted_multiplies == row.predicted_multiplies == 64 * product_cost("H").multiplies
    assert row.operand_bytes == 64 * 2 * 4 * 8
    assert row.wall_time_s > 0
    empty = B.bench_one("matvec", "H", (8, 8), repetitions=0)
    assert empty.counted_multiplies is None and empty.wall_time_s is None
    text = B.rows_to_csv([empty])
    assert text.splitlines()[1].endswith(",,,,,0")


def test_cifar_pipeline_smoke(tmp_path):
    rng = np.random.default_rng(3)
    for name in ("data_batch_1.bin", "test_batch.bin"):
        _cifar_bytes(rng.integers(0, 10, D.CIFAR_RECORDS_PER_BATCH), rng).tofile(tmp_path / name)
    cfg = ExperimentConfig.load(CONFIGS / "cifar_m2r.yaml").override([
        f"data.path={tmp_path}", "data.max_records=8", "data.batch_size=4", "steps=2", "log_every=1",
        "model.stem=2", "model.blocks=[2]", "optim.l2=0.001"])
    res = train(cfg)
    assert [r["step"] for r in res.history] == [1, 2]
    assert 0.0 <= res.eval_metric <= 1.0
