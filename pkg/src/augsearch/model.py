"""Shape-parameterized CNN classifier, its trainer, and evaluation metrics.

The network follows the compact sleep-stager layout: a C x C spatial filter
mixing channels linearly, two temporal convolution blocks (8 filters of
width 64, max-pooled by 16), 50% dropout, and a dense softmax readout. All
arithmetic runs on the autodiff tape in float64 so training is exactly
reproducible and gradient-checkable.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .augment import SignalBatch
from .rng import RandomStream

CHECKPOINT_MAGIC = "augsearch-checkpoint"
CHECKPOINT_VERSION = 1

N_TEMPORAL_FILTERS = 8
TEMPORAL_KERNEL = 64
POOL = 16


@dataclass
class ChambonNetConfig:
    n_channels: int
    n_times: int
    n_classes: int = 5
    dropout: float = 0.5

    def __post_init__(self):
        if self.n_times < 512:
            raise ValueError(
                f"n_times must be >= 512 so that T//256 >= 2, got {self.n_times}")
        if self.n_channels < 1 or self.n_classes < 2:
            raise ValueError("need at least 1 channel and 2 classes")

    @property
    def feature_dim(self):
        return self.n_channels * (self.n_times // 256) * N_TEMPORAL_FILTERS


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 30

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs,
               self.patience) <= 0:
            raise ValueError("train settings must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


@dataclass
class MetricsReport:
    balanced_accuracy: float
    macro_f1: float
    per_class_f1: dict[int, float]
    confusion: np.ndarray
    absent_classes: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class ChambonNet:
    """Parameter container plus tape-based forward pass."""

    PARAM_LAYERS = ("spatial_conv", "temporal_conv1_w", "temporal_conv1_b",
                    "temporal_conv2_w", "temporal_conv2_b", "dense")

    def __init__(self, cfg: ChambonNetConfig, rng: RandomStream):
        self.cfg = cfg
        C, F, K = cfg.n_channels, N_TEMPORAL_FILTERS, TEMPORAL_KERNEL

        def uniform(shape, fan_in, stream):
            bound = 1.0 / np.sqrt(fan_in)
            return stream.uniform(size=shape, low=-bound, high=bound)

        self.params: dict[str, np.ndarray] = {
            "spatial_conv": uniform((C, C), C, rng.child("spatial")),
            "temporal_conv1_w": uniform((F, 1, K), K, rng.child("conv1")),
            "temporal_conv1_b": np.zeros(F),
            "temporal_conv2_w": uniform((F, F, K), F * K, rng.child("conv2")),
            "temporal_conv2_b": np.zeros(F),
            "dense": uniform((cfg.feature_dim, cfg.n_classes),
                             cfg.feature_dim, rng.child("dense")),
        }

    def parameter_counts(self) -> dict[str, int]:
        return {name: arr.size for name, arr in self.params.items()}

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = params[k].copy()

    def forward(self, x, leaves: dict[str, Variable] | None = None,
                train: bool = False, dropout_rng: RandomStream | None = None
                ) -> Variable:
        """B x C x T -> B x n_classes log-probabilities."""
        cfg = self.cfg
        p = leaves if leaves is not None else {
            k: ad.constant(v) for k, v in self.params.items()}
        xv = x if isinstance(x, Variable) else ad.constant(np.asarray(x))
        B, C, T = xv.value.shape
        if C != cfg.n_channels or T != cfg.n_times:
            raise ValueError(f"expected {cfg.n_channels}x{cfg.n_times} windows, "
                             f"got {C}x{T}")
        # spatial filter: virtual channels as linear combinations
        h = ad.matmul(p["spatial_conv"], xv)                     # (B, C, T)
        h = ad.reshape(h, (B * C, 1, T))
        pad = (TEMPORAL_KERNEL // 2 - 1, TEMPORAL_KERNEL // 2)   # same length
        h = ad.relu(ad.conv1d(h, p["temporal_conv1_w"],
                              bias=p["temporal_conv1_b"], padding=pad))
        h = ad.maxpool1d(h, POOL)                                # (B*C, 8, T//16)
        h = ad.relu(ad.conv1d(h, p["temporal_conv2_w"],
                              bias=p["temporal_conv2_b"], padding=pad))
        h = ad.maxpool1d(h, POOL)                                # (B*C, 8, T//256)
        h = ad.reshape(h, (B, cfg.feature_dim))
        if train and cfg.dropout > 0:
            if dropout_rng is None:
                raise ValueError("training forward needs a dropout stream")
            keep = (dropout_rng.uniform(size=(B, cfg.feature_dim))
                    >= cfg.dropout) / (1.0 - cfg.dropout)
            h = ad.mul(h, ad.constant(keep))
        logits = ad.matmul(h, p["dense"])
        return ad.log_softmax(logits, axis=-1)


def build_net(cfg: ChambonNetConfig, rng: RandomStream | None = None
              ) -> ChambonNet:
    return ChambonNet(cfg, rng or RandomStream(0))


def nll_loss(log_probs: Variable, labels: np.ndarray) -> Variable:
    picked = ad.gather_labels(log_probs, np.asarray(labels, dtype=np.int64))
    return ad.neg(ad.vmean(picked))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, param_names, lr=1e-3, beta1=0.0, beta2=0.999,
                 eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: None for k in param_names}
        self.v = {k: None for k in param_names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if self.m[k] is None:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, batch_index, param_norm):
        super().__init__(f"non-finite loss at batch {batch_index}; "
                         f"parameter norm {param_norm:.3e}")
        self.batch_index = batch_index
        self.param_norm = param_norm


def model_loss(net: ChambonNet, data: np.ndarray, labels: np.ndarray,
               params: dict[str, np.ndarray] | None = None) -> float:
    with Tape():
        out = net.forward(ad.constant(data) if params is None else data,
                          leaves=None if params is None else {
                              k: ad.constant(v) for k, v in params.items()})
        return float(nll_loss(out, labels).value)


def _loss_and_grads(net, data, labels, dropout_rng):
    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in net.params.items()}
        logp = net.forward(data, leaves=leaves, train=True,
                           dropout_rng=dropout_rng)
        loss = nll_loss(logp, labels)
        grads_map = tape.backward(loss)
        grads = {k: grads_map.wrt(lv) for k, lv in leaves.items()}
    return float(loss.value), grads


def fit(net: ChambonNet, train: SignalBatch, valid: SignalBatch,
        policy=None, cfg: TrainConfig | None = None,
        rng: RandomStream | None = None, montage=None) -> dict:
    """Adam on cross-entropy with early stopping on validation loss.

    If a policy is given, every training batch is augmented (hard sampling
    path) before the forward pass. Returns a history dict; the best
    parameters (lowest validation loss) are restored into ``net``.
    """
    from .policy import apply_policy  # deferred: policy imports augment

    cfg = cfg or TrainConfig()
    rng = rng or RandomStream(0)
    if train.labels is None or valid.labels is None:
        raise ValueError("fit needs labeled train and valid batches")
    opt = Adam(net.params.keys(), lr=cfg.learning_rate, beta1=cfg.beta1,
               beta2=cfg.beta2)
    n = train.n
    history = {"train_loss": [], "valid_loss": []}
    best_loss = np.inf
    best_params = net.clone_params()
    best_epoch = -1
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.child(("shuffle", epoch)).permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            batch = SignalBatch(train.data[rows], train.sfreq,
                                train.labels[rows])
            if policy is not None:
                batch = apply_policy(policy, batch,
                                     rng.child(("augment", step)), montage)
            loss, grads = _loss_and_grads(
                net, batch.data, batch.labels, rng.child(("dropout", step)))
            if not np.isfinite(loss):
                norm = float(np.sqrt(sum((p ** 2).sum()
                                         for p in net.params.values())))
                raise TrainingDiverged(step, norm)
            opt.step(net.params, grads)
            epoch_losses.append(loss)
            step += 1
        vloss = model_loss(net, valid.data, valid.labels)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["valid_loss"].append(vloss)
        if vloss < best_loss:
            best_loss = vloss
            best_params = net.clone_params()
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    net.load_params(best_params)
    history["best_epoch"] = best_epoch
    history["best_valid_loss"] = best_loss
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(net: ChambonNet, data: np.ndarray) -> np.ndarray:
    with Tape():
        logp = net.forward(ad.constant(data), train=False)
    return np.argmax(logp.value, axis=-1)


def evaluate(net: ChambonNet, batch: SignalBatch) -> MetricsReport:
    if batch.labels is None:
        raise ValueError("evaluation needs labels")
    preds = predict(net, batch.data)
    return metrics_from_predictions(batch.labels, preds, net.cfg.n_classes)


def metrics_from_predictions(labels: np.ndarray, preds: np.ndarray,
                             n_classes: int) -> MetricsReport:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    support = confusion.sum(axis=1)
    absent = [c for c in range(n_classes) if support[c] == 0]
    recalls, f1s = {}, {}
    for c in range(n_classes):
        if support[c] == 0:
            continue
        tp = confusion[c, c]
        recalls[c] = tp / support[c]
        predicted = confusion[:, c].sum()
        precision = tp / predicted if predicted else 0.0
        denom = precision + recalls[c]
        f1s[c] = 2 * precision * recalls[c] / denom if denom else 0.0
    balanced = float(np.mean(list(recalls.values())))
    macro_f1 = float(np.mean(list(f1s.values())))
    return MetricsReport(balanced, macro_f1, f1s, confusion, absent)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: ChambonNet, path):
    """Text header (JSON line with shapes) + little-endian float64 blobs."""
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": {"n_channels": net.cfg.n_channels,
                   "n_times": net.cfg.n_times,
                   "n_classes": net.cfg.n_classes,
                   "dropout": net.cfg.dropout},
        "tensors": [{"name": k, "shape": list(v.shape)}
                    for k, v in net.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in net.params.values():
            fh.write(v.astype("<f8").tobytes())


def load_checkpoint(path) -> ChambonNet:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("magic") != CHECKPOINT_MAGIC or \
                header.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unrecognized checkpoint format")
        cfg = ChambonNetConfig(**header["config"])
        net = build_net(cfg, RandomStream(0))
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            net.params[entry["name"]] = arr.astype(np.float64).copy()
    return net
