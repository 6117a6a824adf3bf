"""Stochastic reparameterizations and discrete-gradient estimators.

Three samplers drive the augmentation machinery:

* relaxed Bernoulli (Concrete) gates, pathwise-differentiable in p;
* straight-through Gumbel-softmax categorical draws, hard forward / soft
  backward;
* the RELAX estimator for unbiased gradients of E[f(one-hot)] w.r.t. the
  categorical weights, with the objective-on-relaxed-point control variate by
  default or an optional small learned critic.

An exact enumeration oracle for categorical expectations lives here too; the
test suite checks every estimator against it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .rng import RandomStream

DEFAULT_BERNOULLI_TEMPERATURE = 0.05
DEFAULT_GUMBEL_TEMPERATURE = 0.5


@dataclass
class RelaxedBernoulli:
    """Concrete relaxation of a coin flip with success probability p."""
    p: float | Variable
    temperature: float = DEFAULT_BERNOULLI_TEMPERATURE

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class GumbelSoftmaxST:
    """Categorical distribution with straight-through one-hot samples.

    ``w`` are selection weights interpreted as log-probabilities up to an
    additive constant: P(index n) = softmax(w)_n.
    """
    w: np.ndarray | Variable
    temperature: float = DEFAULT_GUMBEL_TEMPERATURE

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        wv = self.w.value if isinstance(self.w, Variable) else np.asarray(self.w)
        if not np.isfinite(wv).all():
            raise ValueError("weights must be finite")


@dataclass
class RelaxConfig:
    surrogate: str = "relaxed-loss"  # or "critic"
    critic_width: int = 16
    critic_lr: float = 1e-3
    # temperature of the control variate's relaxed points; a free parameter
    # of the estimator (the hard draws never depend on it), kept warmer than
    # the sampling temperature because cold softmaxes make the pathwise
    # terms spiky enough to lose against plain REINFORCE
    cv_temperature: float = 1.0


def _p_values(p) -> np.ndarray:
    return p.value if isinstance(p, Variable) else np.asarray(p, dtype=float)


def sample_relaxed_bernoulli(d: RelaxedBernoulli, rng: RandomStream,
                             size=None) -> Variable:
    """Draw sigmoid((logit(p) + logistic noise) / temperature).

    The sample lies in (0, 1) for p in (0, 1) and is pathwise differentiable
    w.r.t. p when p is a tape Variable. p = 0 and p = 1 give exactly 0 / 1.
    """
    pv = _p_values(d.p)
    if np.any(pv < 0) or np.any(pv > 1):
        raise ValueError(f"p must lie in [0, 1], got {pv}")
    noise = rng.logistic(size=size)
    if np.all(pv == 0.0) or np.all(pv == 1.0):
        value = np.broadcast_to(pv, np.broadcast_shapes(pv.shape, np.shape(noise)))
        return ad.constant(np.array(value, dtype=float))
    p = d.p if isinstance(d.p, Variable) else ad.constant(pv)
    logit = ad.sub(ad.vlog(p), ad.vlog(ad.sub(1.0, p)))
    z = ad.scalar_mul(1.0 / d.temperature, ad.add(logit, ad.constant(noise)))
    return ad.sigmoid(z)


def sample_gumbel_softmax_st(d: GumbelSoftmaxST, rng: RandomStream) -> Variable:
    """One-hot forward value, softmax((w + g)/temperature) backward."""
    wv = d.w.value if isinstance(d.w, Variable) else np.asarray(d.w, dtype=float)
    g = rng.gumbel(size=wv.shape)
    hard = np.zeros_like(wv)
    hard[np.argmax(wv + g)] = 1.0
    if isinstance(d.w, Variable) and d.w.requires_grad:
        w = d.w
    else:
        return ad.constant(hard)
    soft = ad.softmax(ad.scalar_mul(1.0 / d.temperature,
                                    ad.add(w, ad.constant(g))))
    return ad.straight_through(hard, soft)


def _softmax_np(w: np.ndarray) -> np.ndarray:
    e = np.exp(w - w.max())
    return e / e.sum()


def enumerated_categorical_gradient(objective, w: np.ndarray) -> np.ndarray:
    """Exact gradient of E[f(one-hot)] over the categorical softmax(w).

    Closed form: d/dw_j sum_n s_n f_n = s_j (f_j - sum_n s_n f_n).
    """
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if n > 32:
        raise ValueError("enumeration limited to 32 categories")
    f = np.array([float(_objective_value(objective, _onehot(n, i)))
                  for i in range(n)])
    s = _softmax_np(w)
    return s * (f - float(s @ f))


def _onehot(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _objective_value(objective, point) -> float:
    out = objective(ad.constant(point)) if not isinstance(point, Variable) \
        else objective(point)
    val = out.value if isinstance(out, Variable) else np.asarray(out)
    val = float(np.asarray(val).reshape(()))
    if not np.isfinite(val):
        raise FloatingPointError(
            f"objective returned non-finite value at sample {point}")
    return val


class RelaxCritic:
    """One-hidden-layer scalar critic c(simplex point) for RELAX."""

    def __init__(self, n_categories: int, width: int, rng: RandomStream):
        scale = 1.0 / np.sqrt(n_categories)
        self.w1 = rng.uniform(size=(n_categories, width), low=-scale, high=scale)
        self.b1 = np.zeros(width)
        self.w2 = rng.uniform(size=(width, 1), low=-scale, high=scale)
        self.b2 = np.zeros(1)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, point: Variable, leaves: dict | None = None) -> Variable:
        p = leaves if leaves is not None else {k: ad.constant(v)
                                               for k, v in self.params().items()}
        h = ad.relu(ad.add(ad.matmul(ad.reshape(point, (1, -1)), p["w1"]),
                           ad.reshape(p["b1"], (1, -1))))
        out = ad.add(ad.matmul(h, p["w2"]), ad.reshape(p["b2"], (1, -1)))
        return ad.reshape(out, ())

    def fit_step(self, point_value: np.ndarray, target: float, lr: float):
        """One SGD step of (c(point) - target)^2; keeps the critic tracking f."""
        with Tape() as t:
            leaves = {k: t.leaf(v) for k, v in self.params().items()}
            c = self.forward(ad.constant(point_value), leaves)
            loss = ad.mul(ad.sub(c, float(target)), ad.sub(c, float(target)))
            grads = t.backward(loss)
            for name, leaf in leaves.items():
                param = getattr(self, name)
                param -= lr * grads.wrt(leaf)


def _conditional_gumbel_scores(theta: Variable, hard: np.ndarray,
                               v: np.ndarray) -> Variable:
    """Reparameterized z~ ~ p(z | argmax = b) for Gumbel scores z.

    For the winning index b: z~_b = -log(-log v_b); for the rest:
    z~_i = -log( -log(v_i)/theta_i - log(v_b) ). Differentiable through theta.
    """
    L = -np.log(np.clip(v, 1e-10, 1 - 1e-10))
    b = int(np.argmax(hard))
    core = ad.div(ad.constant(L), theta)
    inner = ad.add(ad.mul(core, ad.constant(1.0 - hard)),
                   ad.constant(np.full_like(L, L[b])))
    return ad.neg(ad.vlog(inner))


def relax_gradient(objective, d: GumbelSoftmaxST, cfg: RelaxConfig,
                   rng: RandomStream, critic: RelaxCritic | None = None
                   ) -> np.ndarray:
    """Single-sample RELAX estimate of d E[f(one-hot)] / d w.

    ghat = (f(b) - c(z~)) * grad log p(b|w) + grad_w c(z) - grad_w c(z~)
    with z the Gumbel scores that produced the hard draw b and z~ their
    conditional resample given b. With the default relaxed-loss surrogate,
    c(.) = objective(softmax(./cv_temperature)); with a critic, c is the
    critic applied to that simplex point (and the critic takes one
    regression step toward f(b) per call).
    """
    wv = d.w.value if isinstance(d.w, Variable) else np.asarray(d.w, dtype=float)
    tau = cfg.cv_temperature
    n = wv.shape[0]
    u = np.clip(rng.uniform(size=n), 1e-10, 1 - 1e-10)
    v = np.clip(rng.uniform(size=n), 1e-10, 1 - 1e-10)
    gum = -np.log(-np.log(u))
    z_val = wv + gum
    hard = _onehot(n, int(np.argmax(z_val)))

    f_hard = _objective_value(objective, hard)

    with Tape() as t:
        w = t.leaf(wv)
        z = ad.add(w, ad.constant(gum))
        theta = ad.softmax(w)
        z_cond = _conditional_gumbel_scores(theta, hard, v)
        relaxed = ad.softmax(ad.scalar_mul(1.0 / tau, z))
        relaxed_cond = ad.softmax(ad.scalar_mul(1.0 / tau, z_cond))
        if cfg.surrogate == "critic":
            if critic is None:
                raise ValueError("critic surrogate requested without a critic")
            c_z = critic.forward(relaxed)
            c_zc = critic.forward(relaxed_cond)
        else:
            c_z = objective(relaxed)
            c_zc = objective(relaxed_cond)
        c_zc_val = float(np.asarray(c_zc.value).reshape(()))
        if not (np.isfinite(c_zc_val) and np.isfinite(c_z.value).all()):
            raise FloatingPointError("control variate returned non-finite value")
        pathwise = ad.sub(c_z, c_zc)
        grad_path = t.backward(pathwise).wrt(w)

    score = hard - _softmax_np(wv)
    estimate = (f_hard - c_zc_val) * score + grad_path

    if cfg.surrogate == "critic":
        critic.fit_step(relaxed.value, f_hard, cfg.critic_lr)
    return estimate


def reinforce_gradient(objective, d: GumbelSoftmaxST, rng: RandomStream
                       ) -> np.ndarray:
    """Plain score-function estimate, used as a variance baseline in tests."""
    wv = d.w.value if isinstance(d.w, Variable) else np.asarray(d.w, dtype=float)
    n = wv.shape[0]
    u = np.clip(rng.uniform(size=n), 1e-10, 1 - 1e-10)
    hard = _onehot(n, int(np.argmax(wv - np.log(-np.log(u)))))
    f = _objective_value(objective, hard)
    return f * (hard - _softmax_np(wv))
