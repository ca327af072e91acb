import io
import json
import math

import numpy as np
import pytest

from lmscnet import Tensor
from lmscnet.bench import benchmark, format_bench
from lmscnet.data import InMemoryDataset, Sample
from lmscnet.errors import ConfigError, DataError, DimensionError, NumericalError
from lmscnet.metrics import ConfusionMatrix, MetricsReport, ScaleMetrics, evaluate, format_report, report_metrics
from lmscnet.model import ModelConfig, build
from lmscnet.training import TrainConfig, level_loss, total_loss, train
from lmscnet.voxel import UNKNOWN, ClassTable, GridDims, LabelGrid, OccupancyGrid, flip_array

from oracles import finite_difference_grad, max_relative_error, softmax_nll

DIMS = GridDims(16, 16, 8)
CLASSES = ClassTable(("road", "building", "car"))
TINY = dict(num_classes=3, nx=16, ny=16, nz=8, channels=(8, 10, 12, 14), head_width=3)


def tiny_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        occ = rng.random(DIMS.shape) < 0.1
        labels = rng.integers(0, 4, DIMS.shape).astype(np.uint16)
        labels[rng.random(DIMS.shape) < 0.2] = UNKNOWN
        samples.append(Sample(OccupancyGrid.from_dense(DIMS, occ), LabelGrid(DIMS, labels)))
    return InMemoryDataset(samples, DIMS, CLASSES)


# --- configuration ---------------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr(0) == 1e-3
    assert math.isclose(cfg.lr(10), 1e-3 * 0.98**10) and abs(cfg.lr(10) - 8.17e-4) < 1e-6


@pytest.mark.parametrize("kw", [dict(lr0=0), dict(alpha=(0, 0, 0, 0)), dict(alpha=(1, -1, 1, 1)), dict(alpha=(1, 1))])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_singlescale_forces_level_zero():
    cfg = TrainConfig(singlescale=True, alpha=(1, 2, 3, 4))
    assert cfg.level_weights == (1.0, 0.0, 0.0, 0.0) and cfg.active_levels == (0,)


# --- losses ------------------------------------------------------------------------------


def test_level_loss_saturates_on_perfect_logits(float64):
    labels = np.array([[[[0, 1], [2, 3]], [[1, 1], [0, 2]]]], dtype=np.uint16)
    logits = np.moveaxis(np.eye(4)[labels] * 50.0, -1, 1)
    assert level_loss(Tensor(logits), labels, np.ones(4), 0).item() < 1e-3


def test_level_loss_fully_unknown_is_zero(float64, rng):
    logits = Tensor(rng.standard_normal((1, 4, 2, 2, 2)))
    grid = LabelGrid(GridDims(2, 2, 2), np.full((2, 2, 2), UNKNOWN, dtype=np.uint16))
    assert level_loss(logits, [grid], np.ones(4), 0).item() == 0.0


def test_level_loss_four_voxel_oracle(float64, rng):
    logits = rng.standard_normal((1, 3, 2, 2, 1))
    labels = np.array([0, 2, UNKNOWN, 1], dtype=np.uint16).reshape(2, 2, 1)
    w = np.array([0.5, 2.0, 1.0])
    grid = LabelGrid(GridDims(2, 2, 1), labels)
    got = level_loss(Tensor(logits), [grid], w, 0).item()
    mask = labels != UNKNOWN
    expected = softmax_nll(logits, np.where(mask, labels, 0)[None], w, mask[None])
    assert abs(got - expected) < 1e-12


def test_level_loss_pools_full_resolution_labels(float64, rng):
    labels = rng.integers(0, 3, (4, 4, 4)).astype(np.uint16)
    grid = LabelGrid(GridDims(4, 4, 4), labels)
    loss = level_loss(Tensor(rng.standard_normal((1, 3, 2, 2, 2))), [grid], np.ones(3), 1)
    assert np.isfinite(loss.item())
    with pytest.raises(DimensionError):
        level_loss(Tensor(rng.standard_normal((1, 3, 4, 4, 4))), [grid], np.ones(3), 1)


def test_total_loss_weighted_sum(float64):
    parts = {l: Tensor(np.array(float(l + 1))) for l in range(4)}
    assert total_loss(parts, (1, 1, 1, 1)).item() == 10.0
    assert total_loss(parts, (1, 0, 0, 0)).item() == 1.0
    assert total_loss(parts, (0.5, 2, 0, 1)).item() == 0.5 + 4 + 4


def test_total_loss_gradient_is_sum_of_level_gradients(float64, rng):
    m = build(ModelConfig(**{**TINY, "head_width": 2}))
    x = Tensor((rng.random((1, 8, 16, 16)) < 0.2).astype(np.float64))
    grid = tiny_dataset(1)[0].labels
    w = np.ones(4)
    name = "head.l1.cls.bias"
    target = m.params[name]

    def loss_at(levels, alpha):
        out = m(x)
        return total_loss({l: level_loss(out[l], [grid], w, l) for l in levels}, alpha)

    loss_at(range(4), (1, 1, 1, 1)).backward()
    total_grad = target.grad.copy()
    target.grad = None
    per_level = np.zeros_like(total_grad)
    for l in range(4):
        alpha = tuple(1.0 if i == l else 0.0 for i in range(4))
        loss_at([l], alpha).backward()
        if target.grad is not None:
            per_level += target.grad
        for p in m.params.values():
            p.grad = None
    assert np.allclose(total_grad, per_level, rtol=1e-12, atol=1e-15)

    def f(b):
        saved = target.data.copy()
        target.data[...] = b
        v = loss_at(range(4), (1, 1, 1, 1)).item()
        target.data[...] = saved
        return v

    fd = finite_difference_grad(f, [target.data.copy()], 0)
    assert max_relative_error(total_grad, fd) < 1e-6


def test_loss_ignores_unknown_voxels(float64, rng):
    logits = rng.standard_normal((1, 4, 2, 2, 2))
    labels = rng.integers(0, 4, (1, 2, 2, 2)).astype(np.uint16)
    labels[0, 0, 0, 0] = UNKNOWN
    t1 = Tensor(logits, requires_grad=True)
    l1 = level_loss(t1, labels, np.ones(4), 0)
    l1.backward()
    logits2 = logits.copy()
    logits2[0, :, 0, 0, 0] += 7.0
    t2 = Tensor(logits2, requires_grad=True)
    l2 = level_loss(t2, labels, np.ones(4), 0)
    l2.backward()
    assert l1.item() == l2.item()
    assert np.array_equal(t1.grad, t2.grad) and not t1.grad[0, :, 0, 0, 0].any()


# --- training loop -----------------------------------------------------------------------


def test_train_is_deterministic_and_logs(tmp_path):
    ds = tiny_dataset(3)
    cfg = TrainConfig(batch_size=2, epochs=2, lr0=1e-2, seed=4)
    r1 = train(build(ModelConfig(**TINY)), ds, cfg, out_dir=tmp_path / "a")
    r2 = train(build(ModelConfig(**TINY)), ds, cfg, out_dir=tmp_path / "b")
    assert [s.loss for s in r1.steps] == [s.loss for s in r2.steps]
    assert len(r1.steps) == 2  # one full batch per epoch, remainder dropped
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "epoch_0001.ckpt").exists()
    lines = [json.loads(l) for l in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1]
    assert lines[1]["lr"] == cfg.lr(1) and set(lines[0]) == {"epoch", "loss", "lr", "wall_time"}


def test_train_rejects_empty_and_short_datasets():
    with pytest.raises(DataError):
        train(build(ModelConfig(**TINY)), InMemoryDataset([], DIMS, CLASSES), TrainConfig())
    with pytest.raises(DataError):
        train(build(ModelConfig(**TINY)), tiny_dataset(1), TrainConfig(batch_size=2))


def test_nonfinite_loss_aborts_with_diagnostics():
    m = build(ModelConfig(**TINY))
    m.params["head.l0.cls.bias"].data[0] = np.nan
    with pytest.raises(NumericalError, match=r"epoch 0, batch 0"):
        train(m, tiny_dataset(1), TrainConfig(batch_size=1, epochs=1))


def test_singlescale_leaves_coarse_heads_untouched():
    m = build(ModelConfig(**TINY))
    before = {n: t.data.copy() for n, t in m.params.items()}
    train(m, tiny_dataset(2), TrainConfig(batch_size=1, epochs=1, singlescale=True, lr0=1e-2))
    for n, t in m.params.items():
        changed = not np.array_equal(before[n], t.data)
        if n.startswith(("head.l1", "head.l2", "head.l3")):
            assert not changed, n
        elif n.startswith(("head.l0", "enc.l0")):
            assert changed, n


# --- metrics -----------------------------------------------------------------------------


def handcrafted_case():
    truth = np.zeros(30, dtype=np.uint16)
    truth[:10] = 1
    pred = np.zeros(30, dtype=np.uint16)
    pred[:6] = 1
    pred[10:12] = 1
    return pred, truth


def test_completion_metrics_handcrafted():
    pred, truth = handcrafted_case()
    cm = ConfusionMatrix(4)
    cm.update(pred, truth)
    assert cm.completion() == (0.5, 0.75, 0.6)
    assert cm.class_iou()[1] == 0.5
    assert cm.class_iou()[2] is None and cm.total == 30


def test_perfect_prediction_gives_ones(rng):
    truth = rng.integers(0, 4, 500).astype(np.uint16)
    truth[::7] = UNKNOWN
    pred = np.where(truth == UNKNOWN, 3, truth)
    cm = ConfusionMatrix(4)
    cm.update(pred, truth)
    m = ScaleMetrics.from_confusion(0, cm, CLASSES.names)
    assert m.class_iou == [1.0, 1.0, 1.0] and m.miou == 1.0
    assert (m.completion_iou, m.precision, m.recall) == (1.0, 1.0, 1.0)
    assert cm.total == int((truth != UNKNOWN).sum())


def test_all_free_prediction():
    _, truth = handcrafted_case()
    cm = ConfusionMatrix(4)
    cm.update(np.zeros_like(truth), truth)
    iou, p, r = cm.completion()
    assert (iou, p, r) == (0.0, 0.0, 0.0)


def test_absent_classes_excluded_or_zeroed():
    pred, truth = handcrafted_case()
    cm = ConfusionMatrix(4)
    cm.update(pred, truth)
    assert ScaleMetrics.from_confusion(0, cm, CLASSES.names).miou == 0.5
    assert ScaleMetrics.from_confusion(0, cm, CLASSES.names, "zero").miou == pytest.approx(0.5 / 3, abs=1e-15)
    with pytest.raises(ConfigError):
        ScaleMetrics.from_confusion(0, cm, CLASSES.names, "nan")


def test_confusion_merge_is_order_independent(rng):
    parts = [(rng.integers(0, 4, 50), rng.integers(0, 4, 50)) for _ in range(3)]
    cms = []
    for p, t in parts:
        cm = ConfusionMatrix(4)
        cm.update(p, t.astype(np.uint16))
        cms.append(cm)
    a = cms[0].merge(cms[1]).merge(cms[2])
    b = cms[2].merge(cms[0]).merge(cms[1])
    assert np.array_equal(a.counts, b.counts)


def test_evaluate_flip_consistency():
    m = build(ModelConfig(**TINY))
    ds = tiny_dataset(2, seed=3)
    rep = evaluate(m, ds, (0, 1, 2, 3))
    assert sorted(rep.scales) == [0, 1, 2, 3]
    s = ds[0]
    pred = m.predict(np.ascontiguousarray(s.occupancy.dense().transpose(2, 0, 1)[None]).astype(float), (0,))[0][0]
    a = ConfusionMatrix(4)
    a.update(pred, s.labels.labels)
    b = ConfusionMatrix(4)
    b.update(flip_array(pred, True, True), flip_array(s.labels.labels, True, True))
    assert np.array_equal(a.counts, b.counts)


def test_evaluate_counts_known_voxels_per_scale():
    m = build(ModelConfig(**TINY))
    ds = tiny_dataset(1)
    rep = evaluate(m, ds, (0, 2))
    assert rep.scales[0].voxels == int(ds[0].labels.known().sum())
    for v in rep.scales.values():
        assert 0 <= v.miou <= 1 and 0 <= v.completion_iou <= 1


def test_report_formatting_and_json_twin():
    pred, truth = handcrafted_case()
    cm = ConfusionMatrix(4)
    cm.update(pred, truth)
    rep = MetricsReport({0: ScaleMetrics.from_confusion(0, cm, CLASSES.names)})
    table, twin = io.StringIO(), io.StringIO()
    report_metrics(rep, table, twin)
    lines = table.getvalue().splitlines()
    assert lines[0].split() == ["scale", "IoU", "Prec", "Recall", "road", "building", "car", "mIoU"]
    assert lines[1].split() == ["1:1", "50.00", "75.00", "60.00", "50.00", "-", "-", "50.00"]
    assert MetricsReport.from_json(twin.getvalue()) == rep
    assert format_report(MetricsReport()).strip().split() == ["scale", "IoU", "Prec", "Recall", "mIoU"]


# --- benchmark ---------------------------------------------------------------------------


def test_benchmark_report():
    m = build(ModelConfig(**TINY))
    r = benchmark(m, (3,), reps=10, warmup=3)
    assert len(r.latencies) == 10 and r.fps == 1.0 / r.mean
    assert r.params < sum(t.data.size for t in m.params.values())
    assert "FPS" in format_bench([r])
    with pytest.raises(ConfigError):
        benchmark(m, (3,), reps=9)
    with pytest.raises(ConfigError):
        benchmark(m, (3,), reps=10, warmup=2)
