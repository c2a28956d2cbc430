import numpy as np
import pytest

from roverseg import autodiff as ad
from roverseg import network as nw
from roverseg import storage, training
from roverseg.autodiff import Tensor
from roverseg.errors import ConfigError, DegenerateInputError, ShapeError, TrainingDivergence
from roverseg.training import OptimizerState, TrainConfig, lr_at, sgd_step

ENC = nw.EncoderConfig(3, (4, 6, 8, 10, 12), 3)


def learnable_samples(n, h=32, w=32, seed=0):
    """Blocky scenes whose color and depth encode the class, so a few epochs
    of SGD must visibly reduce the loss."""
    rng = np.random.default_rng(seed)
    presets = ("hf", "hr", "lf", "lr")
    out = []
    for i in range(n):
        coarse = rng.random((h // 16, w // 16))
        field = np.kron(coarse, np.ones((16, 16)))
        labels = np.zeros((h, w), np.uint8)
        labels[field > 0.55] = 1
        labels[field < 0.25] = 2
        onehot = np.eye(3)[labels].transpose(2, 0, 1)
        rgb = np.clip(0.1 + 0.8 * onehot + 0.03 * rng.normal(size=(3, h, w)), 0.0, 1.0)
        depth = np.clip(0.3 + 0.2 * labels[None] + 0.02 * rng.normal(size=(1, h, w)), 0.0, 1.0)
        out.append(
            storage.SegSample(
                sample_id=f"lrn_{i:03d}",
                rgb=rgb,
                depth=depth,
                labels=labels,
                preset=presets[i % 4],
                split="train",
            )
        )
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_sgd_momentum_hand_values():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    state = OptimizerState(p)
    g = {"w": np.array([1.0])}
    sgd_step(p, g, state, lr=0.01, momentum=0.9)
    assert abs(p["w"].data[0] - 0.99) < 1e-12
    # velocity 0.9*1 + 1 = 1.9, so the second step moves 0.019
    sgd_step(p, g, state, lr=0.01, momentum=0.9)
    assert abs(p["w"].data[0] - 0.971) < 1e-12


def test_sgd_rejects_missing_or_misshapen_grad():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    state = OptimizerState(p)
    with pytest.raises(ShapeError):
        sgd_step(p, {}, state, 0.1, 0.9)
    with pytest.raises(ShapeError):
        sgd_step(p, {"w": np.ones(4)}, state, 0.1, 0.9)


def test_sgd_nonfinite_gradient_diverges():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = OptimizerState(p)
    with pytest.raises(TrainingDivergence):
        sgd_step(p, {"w": np.array([1.0, np.inf])}, state, 0.1, 0.9)


def test_quadratic_bowl_converges():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    state = OptimizerState(p)
    for _ in range(200):
        sgd_step(p, {"w": p["w"].data.copy()}, state, lr=0.1, momentum=0.9)
    assert np.linalg.norm(p["w"].data) < 1e-3


def test_lr_schedule():
    cfg = TrainConfig(lr0=0.01, decay=0.95)
    assert lr_at(0, cfg) == 0.01
    assert abs(lr_at(1, cfg) - 0.0095) < 1e-15
    assert abs(lr_at(2, cfg) - 0.009025) < 1e-15
    with pytest.raises(ConfigError):
        lr_at(-1, cfg)


def test_train_config_validation():
    for bad in (
        dict(lr0=0.0),
        dict(momentum=1.0),
        dict(momentum=-0.1),
        dict(decay=0.0),
        dict(decay=1.5),
        dict(epochs=-1),
        dict(batch_size=0),
        dict(tau=0.0),
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    TrainConfig(momentum=0.0, decay=1.0, epochs=0)  # boundary values are legal


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage1_loss_descends(seed):
    samples = learnable_samples(8, seed=seed + 50)
    cfg = TrainConfig(lr0=0.2, epochs=10, batch_size=2, seed=seed)
    net, log = training.train_stage1(samples, cfg, ENC)
    first, last = log.records[0].l_ls, log.records[-1].l_ls
    assert last < first
    assert (first - last) / first > 0.02
    assert all(np.isfinite(r.l_ls) for r in log.records)


def test_stage1_log_contract():
    samples = learnable_samples(4)
    cfg = TrainConfig(lr0=0.02, epochs=3, batch_size=2, seed=1)
    seen = []
    net, log = training.train_stage1(samples, cfg, ENC, progress=seen.append)
    assert len(log.records) == 3
    assert seen == log.lines()
    for e, (rec, line) in enumerate(zip(log.records, log.lines())):
        assert rec.epoch == e
        assert abs(rec.lr - 0.02 * 0.95**e) < 1e-15
        assert rec.l_cont == 0.0 and rec.total == rec.l_ls
        assert line == f"epoch={e} l_ls={rec.l_ls:.6f} l_cont=0.000000 total={rec.total:.6f} lr={rec.lr:.6f}"


def test_stage1_deterministic_bitwise():
    samples = learnable_samples(4)
    cfg = TrainConfig(lr0=0.05, epochs=2, batch_size=2, seed=3)
    net_a, log_a = training.train_stage1(samples, cfg, ENC)
    net_b, log_b = training.train_stage1(samples, cfg, ENC)
    for name, t in net_a.named().items():
        assert np.array_equal(t.data, net_b.named()[name].data), name
    assert log_a.lines() == log_b.lines()


def test_stage1_zero_epochs_is_init():
    samples = learnable_samples(2)
    cfg = TrainConfig(epochs=0, seed=9)
    net, log = training.train_stage1(samples, cfg, ENC)
    ref = nw.build_network(ENC, 3, seed=9)
    for name, t in net.named().items():
        assert np.array_equal(t.data, ref.named()[name].data)
    assert log.records == []


def test_stage1_empty_dataset_rejected():
    with pytest.raises(DegenerateInputError):
        training.train_stage1([], TrainConfig(epochs=1), ENC)


def test_nonfinite_loss_reports_location(monkeypatch):
    samples = learnable_samples(4)

    def bad_loss(probs, labels):
        return ad.constant(np.array(np.nan))

    monkeypatch.setattr(training.losses, "lovasz_softmax", bad_loss)
    with pytest.raises(TrainingDivergence) as exc:
        training.train_stage1(samples, TrainConfig(epochs=1, batch_size=2), ENC)
    assert exc.value.epoch == 0
    assert exc.value.batch == 0


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def _quick_stage1(samples, seed=0):
    # gentle warm start: aggressive short runs can kill a narrow decoder
    # stage outright, and a dead relu layer blocks every encoder gradient
    cfg = TrainConfig(lr0=0.02, epochs=2, batch_size=2, seed=seed)
    net, _ = training.train_stage1(samples, cfg, ENC)
    return net


@pytest.mark.parametrize("seed", [0, 1, 3])
def test_stage2_contrast_descends(seed):
    samples = learnable_samples(8, seed=seed + 70)
    s1 = _quick_stage1(samples, seed=seed)
    cfg = TrainConfig(lr0=0.05, epochs=6, batch_size=4, seed=seed)
    net2, log = training.train_stage2(samples, s1, cfg, contrast=True)
    cont = [r.l_cont for r in log.records]
    head = np.mean(cont[:2])
    tail = np.mean(cont[-2:])
    assert tail < head - 0.02
    assert all(np.isfinite(v) for v in cont)


def test_stage2_loss_accounting():
    samples = learnable_samples(8)
    s1 = _quick_stage1(samples)
    cfg = TrainConfig(lr0=0.02, epochs=2, batch_size=4, seed=0)
    _, log = training.train_stage2(samples, s1, cfg, contrast=True)
    for r in log.records:
        assert abs(r.total - (r.l_ls + r.l_cont)) < 1e-12
        assert r.l_cont > 0.0
    _, log_plain = training.train_stage2(samples, s1, cfg, contrast=False)
    for r in log_plain.records:
        assert r.l_cont == 0.0
        assert r.total == r.l_ls


def test_stage2_freezing_and_stage1_untouched():
    samples = learnable_samples(8)
    s1 = _quick_stage1(samples)
    before = {n: t.data.copy() for n, t in s1.named().items()}
    cfg = TrainConfig(lr0=0.05, epochs=2, batch_size=4, seed=0)
    net2, _ = training.train_stage2(samples, s1, cfg, contrast=True)
    assert training.frozen_drift(net2, s1) == 0.0
    for name, t in s1.named().items():
        assert np.array_equal(t.data, before[name]), name
    # the trainable rgb twin must have moved away from the frozen copy
    moved = sum(
        float(np.abs(a[0].data - b[0].data).sum())
        for a, b in zip(net2.rgb_encoder.stages, net2.frozen_encoder.stages)
    )
    assert moved > 0.0


def test_stage2_deterministic_bitwise():
    samples = learnable_samples(6)
    s1 = _quick_stage1(samples)
    cfg = TrainConfig(lr0=0.05, epochs=2, batch_size=3, seed=5)
    a, log_a = training.train_stage2(samples, s1, cfg, contrast=True)
    b, log_b = training.train_stage2(samples, s1, cfg, contrast=True)
    for name, t in a.trainable_named().items():
        assert np.array_equal(t.data, b.trainable_named()[name].data), name
    assert log_a.lines() == log_b.lines()


def test_stage2_batch_size_one_rejected():
    samples = learnable_samples(4)
    s1 = _quick_stage1(samples)
    with pytest.raises(ConfigError):
        training.train_stage2(samples, s1, TrainConfig(epochs=1, batch_size=1))


def test_stage2_needs_one_full_batch():
    samples = learnable_samples(3)
    s1 = _quick_stage1(samples)
    with pytest.raises(DegenerateInputError):
        training.train_stage2(samples, s1, TrainConfig(epochs=1, batch_size=4))
    with pytest.raises(DegenerateInputError):
        training.train_stage2([], s1, TrainConfig(epochs=1, batch_size=4))


def test_stage2_partial_batches_dropped():
    # 6 samples at batch 4: exactly one optimizer step per epoch
    samples = learnable_samples(6)
    s1 = _quick_stage1(samples)
    steps = []
    orig = training.sgd_step

    def counting(*a, **kw):
        steps.append(1)
        return orig(*a, **kw)

    import unittest.mock as mock

    with mock.patch.object(training, "sgd_step", counting):
        training.train_stage2(samples, s1, TrainConfig(epochs=2, batch_size=4), contrast=False)
    assert len(steps) == 2


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def test_evaluate_counts_and_presets(tiny_samples):
    net = nw.build_network(nw.EncoderConfig(3, (2, 3, 4, 5, 6), 3), 3, seed=0)
    overall, by_preset = training.evaluate(net, tiny_samples)
    h, w = tiny_samples[0].labels.shape
    assert overall.counts.sum() == len(tiny_samples) * h * w
    assert set(by_preset) <= {"hf", "hr", "lf", "lr"}
    assert sum(cm.counts.sum() for cm in by_preset.values()) == overall.counts.sum()
    with pytest.raises(DegenerateInputError):
        training.evaluate(net, [])


def test_predict_mask_domain(tiny_samples):
    net = nw.build_network(nw.EncoderConfig(3, (2, 3, 4, 5, 6), 3), 3, seed=1)
    mask = training.predict_mask(net, tiny_samples[0])
    assert mask.shape == tiny_samples[0].labels.shape
    assert set(np.unique(mask)) <= {0, 1, 2}
    with pytest.raises(ShapeError):
        training.predict_logits(object(), tiny_samples[0])
