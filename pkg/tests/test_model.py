import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch import model as md
from augsearch.augment import SignalBatch
from augsearch.autodiff import Tape
from augsearch.model import ChambonNetConfig, TrainConfig, build_net
from augsearch.policy import AugOpSpec, Policy, Subpolicy
from augsearch.rng import RandomStream

SFREQ = 128.0


def toy_batches(n_train=48, n_valid=16, C=2, T=512, seed=0):
    """Linearly separable two-class task: class bumps the channel mean."""
    rng = np.random.default_rng(seed)
    n = n_train + n_valid
    labels = np.arange(n) % 2
    data = 0.3 * rng.standard_normal((n, C, T)) + labels[:, None, None] * 1.0
    train = SignalBatch(data[:n_train], SFREQ, labels[:n_train])
    valid = SignalBatch(data[n_train:], SFREQ, labels[n_train:])
    return train, valid


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------

def test_parameter_counts_formulas():
    cfg = ChambonNetConfig(n_channels=6, n_times=3840, n_classes=5)
    net = build_net(cfg, RandomStream(0))
    counts = net.parameter_counts()
    assert counts["spatial_conv"] == 6 * 6 == 36
    assert counts["temporal_conv1_w"] + counts["temporal_conv1_b"] == \
        8 * 64 + 8 == 520
    assert counts["temporal_conv2_w"] + counts["temporal_conv2_b"] == \
        8 * 8 * 64 + 8 == 4104
    assert counts["dense"] == 5 * (6 * (3840 // 256) * 8) == 3600


def test_forward_shape_and_log_probabilities():
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=3)
    net = build_net(cfg, RandomStream(1))
    x = np.random.default_rng(2).standard_normal((4, 2, 512))
    with Tape():
        out = net.forward(ad.constant(x))
    assert out.value.shape == (4, 3)
    assert np.allclose(np.exp(out.value).sum(axis=1), 1.0)


def test_invalid_window_length_rejected():
    with pytest.raises(ValueError):
        ChambonNetConfig(n_channels=2, n_times=256)
    cfg = ChambonNetConfig(n_channels=2, n_times=512)
    net = build_net(cfg, RandomStream(0))
    with Tape():
        with pytest.raises(ValueError):
            net.forward(ad.constant(np.zeros((1, 2, 768))))


def test_end_to_end_gradient_check_tiny_net():
    """Reverse-mode gradient of every parameter vs central differences."""
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    net = build_net(cfg, RandomStream(3))
    x = np.random.default_rng(4).standard_normal((2, 2, 512))
    labels = np.array([0, 1])

    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in net.params.items()}
        loss = md.nll_loss(net.forward(ad.constant(x), leaves=leaves), labels)
        grads = tape.backward(loss)
        g_ad = {k: grads.wrt(lv) for k, lv in leaves.items()}

    def loss_value():
        with Tape():
            logp = net.forward(ad.constant(x))
            return float(md.nll_loss(logp, labels).value)

    h = 1e-5
    for name, base in net.params.items():
        flat = base.reshape(-1)
        picked = np.linspace(0, flat.size - 1,
                             min(flat.size, 24)).astype(int)
        for i in picked:
            keep = flat[i]
            flat[i] = keep + h
            f_plus = loss_value()
            flat[i] = keep - h
            f_minus = loss_value()
            flat[i] = keep
            fd = (f_plus - f_minus) / (2 * h)
            err = abs(g_ad[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
            assert err < 1e-4, f"{name}[{i}]: {err}"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_fit_deterministic():
    train, valid = toy_batches()
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    tc = TrainConfig(max_epochs=3, patience=3, batch_size=16)
    runs = []
    for _ in range(2):
        net = build_net(cfg, RandomStream(5))
        hist = md.fit(net, train, valid, cfg=tc, rng=RandomStream(6))
        runs.append((hist["valid_loss"], net.clone_params()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()


def test_fit_learns_separable_data():
    train, valid = toy_batches()
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    net = build_net(cfg, RandomStream(7))
    tc = TrainConfig(max_epochs=50, patience=50, batch_size=16)
    md.fit(net, train, valid, cfg=tc, rng=RandomStream(8))
    report = md.evaluate(net, train)
    assert report.balanced_accuracy > 0.95


def test_early_stopping_patience():
    train, valid = toy_batches(n_train=32, n_valid=16)
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    net = build_net(cfg, RandomStream(9))
    # updates far below float64 resolution: parameters never move, so the
    # validation loss can never improve past epoch 0
    tc = TrainConfig(max_epochs=300, patience=4, batch_size=16,
                     learning_rate=1e-30)
    hist = md.fit(net, train, valid, cfg=tc, rng=RandomStream(10))
    # epoch 0 is best; training halts after `patience` non-improving epochs
    assert len(hist["valid_loss"]) == 1 + tc.patience
    assert hist["best_epoch"] == 0


def test_identity_policy_does_not_change_trajectory():
    train, valid = toy_batches(n_train=32, n_valid=16)
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    tc = TrainConfig(max_epochs=3, patience=3, batch_size=16)
    identity = Policy([Subpolicy([AugOpSpec("sign_flip", p=0.0)])])
    net_a = build_net(cfg, RandomStream(11))
    hist_a = md.fit(net_a, train, valid, cfg=tc, rng=RandomStream(12))
    net_b = build_net(cfg, RandomStream(11))
    hist_b = md.fit(net_b, train, valid, policy=identity, cfg=tc,
                    rng=RandomStream(12))
    assert hist_a["valid_loss"] == hist_b["valid_loss"]
    for k in net_a.params:
        assert net_a.params[k].tobytes() == net_b.params[k].tobytes()


def test_dropout_only_during_training():
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    net = build_net(cfg, RandomStream(13))
    x = np.random.default_rng(14).standard_normal((3, 2, 512))
    with Tape():
        a = net.forward(ad.constant(x)).value
    with Tape():
        b = net.forward(ad.constant(x)).value
    assert np.array_equal(a, b)
    with Tape():
        c = net.forward(ad.constant(x), train=True,
                        dropout_rng=RandomStream(15)).value
    assert not np.array_equal(a, c)


def test_non_finite_loss_aborts_with_diagnostic():
    train, valid = toy_batches(n_train=32, n_valid=16)
    cfg = ChambonNetConfig(n_channels=2, n_times=512, n_classes=2)
    net = build_net(cfg, RandomStream(16))
    # a step of ~1e155 makes the next forward pass overflow to inf/nan
    tc = TrainConfig(max_epochs=2, patience=2, batch_size=16,
                     learning_rate=1e155)
    with np.errstate(all="ignore"):
        with pytest.raises(md.TrainingDiverged) as err:
            md.fit(net, train, valid, cfg=tc, rng=RandomStream(17))
    assert err.value.batch_index >= 1
    assert "parameter norm" in str(err.value)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect_predictions():
    labels = np.array([0, 1, 2, 0, 1, 2])
    rep = md.metrics_from_predictions(labels, labels, 3)
    assert rep.balanced_accuracy == 1.0 and rep.macro_f1 == 1.0


def test_metrics_constant_predictor():
    labels = np.repeat(np.arange(5), 10)
    preds = np.zeros(50, dtype=int)
    rep = md.metrics_from_predictions(labels, preds, 5)
    assert abs(rep.balanced_accuracy - 0.2) < 1e-12


def test_metrics_match_direct_formula_oracle():
    rng = np.random.default_rng(18)
    labels = rng.integers(0, 4, size=200)
    preds = rng.integers(0, 4, size=200)
    rep = md.metrics_from_predictions(labels, preds, 4)
    # independent direct computation
    recalls, f1s = [], []
    for c in range(4):
        tp = np.sum((labels == c) & (preds == c))
        fn = np.sum((labels == c) & (preds != c))
        fp = np.sum((labels != c) & (preds == c))
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recalls.append(recall)
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    assert abs(rep.balanced_accuracy - np.mean(recalls)) < 1e-12
    assert abs(rep.macro_f1 - np.mean(f1s)) < 1e-12
    assert rep.confusion.sum(axis=1).tolist() == \
        [int(np.sum(labels == c)) for c in range(4)]


def test_metrics_absent_class_flagged():
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 0, 1, 1])
    rep = md.metrics_from_predictions(labels, preds, 3)
    assert rep.absent_classes == [2]
    assert rep.balanced_accuracy == 1.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    cfg = ChambonNetConfig(n_channels=3, n_times=512, n_classes=4)
    net = build_net(cfg, RandomStream(19))
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(net, path)
    loaded = md.load_checkpoint(path)
    assert loaded.cfg == cfg
    for k in net.params:
        assert net.params[k].tobytes() == loaded.params[k].tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    import struct
    with open(path, "wb") as fh:
        blob = b'{"magic": "something-else"}'
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
    with pytest.raises(ValueError):
        md.load_checkpoint(path)
