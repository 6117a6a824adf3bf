"""Policy optimization: alternating bilevel search, and gradient-free baselines.

The gradient-based loop alternates between model steps and policy steps.
The policy gradient follows the one-step-unrolled hypergradient: simulate a
plain SGD step theta' = theta - xi*g, take the validation gradient there,
and approximate the mixed Hessian-gradient product with a central finite
difference of the augmented-training gradient at theta +- eps*g'. Gate
probabilities and magnitudes receive pathwise gradients; the discrete
operation (or candidate-subpolicy) selections receive RELAX gradients with
the relaxed-loss control variate.

Both augmented-loss evaluations of the finite difference replay the same
counter-based noise streams, so the pair differs only through theta
(common random numbers).
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment as ag
from . import autodiff as ad
from . import estimators as est
from . import model as md
from . import policy as pol
from .augment import Montage, SignalBatch
from .autodiff import Tape, Variable
from .model import ChambonNet, TrainConfig
from .policy import ClasswisePolicy, Policy
from .rng import RandomStream

TRACE_HEADER = ["step", "wall_time_s", "train_loss", "valid_loss",
                "retrain_valid_balacc", "running_test_balacc",
                "policy_snapshot_path"]

GRADIENT_MODES = ("adda", "cadda", "dada", "faster_aa_bilevel")


@dataclass
class SearchConfig:
    model_lr: float = 1e-3         # xi for the model and the unrolled step
    policy_lr: float = 5e4         # xi for the policy parameters
    epsilon_scale: float = 0.01    # eps = epsilon_scale / ||g'_theta||
    epochs: int = 4                # search epochs (passes over train batches)
    retrain_every: int = 2         # retrain cadence, in search epochs
    batch_size: int = 16           # doubled for class-wise search
    gate_temperature: float = est.DEFAULT_BERNOULLI_TEMPERATURE
    cv_temperature: float = 1.0    # control-variate softmax temperature
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        max_epochs=60, patience=12))

    def __post_init__(self):
        # policy_lr = 0 freezes the policy (the loop degenerates to plain
        # augmented training); negative rates are nonsense
        if self.policy_lr < 0 or self.epsilon_scale <= 0:
            raise ValueError("policy_lr must be >= 0, epsilon_scale > 0")


@dataclass
class TraceRow:
    step: int
    wall_time_s: float
    train_loss: float | None = None
    valid_loss: float | None = None
    retrain_valid_balacc: float | None = None
    running_test_balacc: float | None = None
    policy_snapshot_path: str = ""


@dataclass
class SearchTrace:
    rows: list[TraceRow] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in self.rows:
            writer.writerow([
                r.step,
                repr(float(r.wall_time_s)),
                "" if r.train_loss is None else repr(float(r.train_loss)),
                "" if r.valid_loss is None else repr(float(r.valid_loss)),
                "" if r.retrain_valid_balacc is None
                else repr(float(r.retrain_valid_balacc)),
                "" if r.running_test_balacc is None
                else repr(float(r.running_test_balacc)),
                r.policy_snapshot_path,
            ])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# generic one-step-unrolled hypergradient (Eqs. of the bilevel approximation)
# ---------------------------------------------------------------------------

def hypergradient_estimate(theta: dict, grad_train_theta, grad_train_alpha,
                           grad_valid_theta, xi_model: float,
                           epsilon_scale: float = 0.01,
                           epsilon: float | None = None):
    """Finite-difference estimate of d L_valid(theta') / d alpha.

    theta' = theta - xi*grad_train_theta(theta);
    estimate = -xi * [gA(theta + eps v) - gA(theta - eps v)] / (2 eps),
    v = grad_valid_theta(theta'), gA = grad_train_alpha (a dict over the
    policy parameters). Returns (alpha_gradient | None, info dict); None
    means the validation gradient underflowed and the step should be skipped.
    """
    g_theta = grad_train_theta(theta)
    theta_prime = {k: theta[k] - xi_model * g_theta[k] for k in theta}
    g_valid = grad_valid_theta(theta_prime)
    norm = float(np.sqrt(sum(float((g ** 2).sum())
                             for g in g_valid.values())))
    info = {"valid_grad_norm": norm}
    if epsilon is None:
        if norm < 1e-12:
            return None, info
        epsilon = epsilon_scale / norm
    info["epsilon"] = epsilon
    theta_plus = {k: theta[k] + epsilon * g_valid[k] for k in theta}
    theta_minus = {k: theta[k] - epsilon * g_valid[k] for k in theta}
    g_plus = grad_train_alpha(theta_plus)
    g_minus = grad_train_alpha(theta_minus)
    hyper = {k: -xi_model * (g_plus[k] - g_minus[k]) / (2 * epsilon)
             for k in g_plus}
    return hyper, info


# ---------------------------------------------------------------------------
# relaxed policy evaluation (alpha gradients at fixed model parameters)
# ---------------------------------------------------------------------------

def _policy_groups(policy_like, labels: np.ndarray | None):
    """(policy, rows, key) per class; class-agnostic uses one group."""
    if isinstance(policy_like, ClasswisePolicy):
        if labels is None:
            raise ValueError("class-wise policies require labels")
        groups = []
        for cls in sorted(set(int(v) for v in labels)):
            if cls not in policy_like.per_class:
                raise ValueError(f"label {cls} has no policy entry")
            groups.append((policy_like.per_class[cls],
                           np.flatnonzero(labels == cls), cls))
        return groups
    return [(policy_like, None, None)]


def _stage_param_leaves(tape, policy_like):
    """Tape leaves for every alpha array; keyed by stable paths."""
    leaves = {}

    def add_policy(prefix, p: Policy):
        if p.is_dada:
            leaves[prefix + ("dada_w",)] = tape.leaf(p.dada_weights)
            leaves[prefix + ("dada_p",)] = tape.leaf(p.dada_p)
            leaves[prefix + ("dada_mu",)] = tape.leaf(p.dada_mu)
            return
        for i, sp in enumerate(p.subpolicies):
            for k, st in enumerate(sp.stages):
                leaves[prefix + (i, k, "w")] = tape.leaf(st.w)
                leaves[prefix + (i, k, "p")] = tape.leaf(st.p)
                leaves[prefix + (i, k, "mu")] = tape.leaf(st.mu)

    if isinstance(policy_like, ClasswisePolicy):
        for cls, p in sorted(policy_like.per_class.items()):
            add_policy((cls,), p)
    else:
        add_policy((None,), policy_like)
    return leaves


def alpha_arrays(policy_like) -> dict:
    """The live parameter arrays, keyed like the tape leaves."""
    arrays = {}

    def add_policy(prefix, p: Policy):
        if p.is_dada:
            arrays[prefix + ("dada_w",)] = p.dada_weights
            arrays[prefix + ("dada_p",)] = p.dada_p
            arrays[prefix + ("dada_mu",)] = p.dada_mu
            return
        for i, sp in enumerate(p.subpolicies):
            for k, st in enumerate(sp.stages):
                arrays[prefix + (i, k, "w")] = st.w
                arrays[prefix + (i, k, "p")] = st.p
                arrays[prefix + (i, k, "mu")] = st.mu

    if isinstance(policy_like, ClasswisePolicy):
        for cls, p in sorted(policy_like.per_class.items()):
            add_policy((cls,), p)
    else:
        add_policy((None,), policy_like)
    return arrays


def _gated_relaxed_op(x, kind, p_var, mu_var, noise, sfreq, montage,
                      gate_temperature):
    return ag.apply_operation_relaxed(
        x, kind, p_var, mu_var, RandomStream(0), sfreq, montage,
        gate_temperature=gate_temperature, noise=noise)


def _stage_mixture(stage, leaves, key_prefix, k, x, weight_var, noise_lookup,
                   sfreq, montage, gate_temperature):
    """Convex combination of the whole pool with external mixture weights."""
    B = x.value.shape[0]
    total = None
    p_leaf = leaves.get(key_prefix + (k, "p"))
    mu_leaf = leaves.get(key_prefix + (k, "mu"))
    for i, kind in enumerate(stage.pool):
        p_var = p_leaf[i] if p_leaf is not None else ad.constant(stage.p[i])
        mu_var = mu_leaf[i] if mu_leaf is not None \
            else ad.constant(stage.mu[i])
        y = _gated_relaxed_op(x, kind, p_var, mu_var, noise_lookup(k, kind),
                              sfreq, montage, gate_temperature)
        term = ad.mul(ad.reshape(weight_var[i], (1, 1, 1)), y)
        total = term if total is None else ad.add(total, term)
    return total


def relaxed_policy_loss(policy_like, net: ChambonNet, theta: dict,
                        batch: SignalBatch, rng: RandomStream,
                        cfg: SearchConfig, montage: Montage | None,
                        mode: str):
    """One stochastic realization of L(theta | T_alpha(batch)) on a tape.

    mode "sample": discrete selections drawn hard (z-noise); pathwise
    gradients for p/mu. mode "mix-z" / "mix-cond": every stage (or dada
    candidate) evaluated as a mixture weighted by softmax(z/tau) or
    softmax(z~/tau); used as the RELAX control-variate passes, gradients
    w.r.t. the selection weights only.

    Returns (loss Variable, leaves dict, relax_info) where relax_info maps
    each selection-weight key to (hard_onehot, softmax_of_values).
    """
    data = batch.data
    B, C, T = data.shape
    sfreq = batch.sfreq
    tape = ad._active_tape()
    leaves = _stage_param_leaves(tape, policy_like)
    theta_leaves = {k: ad.constant(v) for k, v in theta.items()}

    choice_rng = rng.child("choice")
    choice_u = float(choice_rng.uniform())
    n_cand = pol._max_pool_size(policy_like) \
        if pol._is_dada_like(policy_like) else 0
    choice_g = choice_rng.gumbel(size=n_cand) if n_cand else None
    choice_v = np.clip(choice_rng.uniform(size=n_cand),
                       1e-10, 1 - 1e-10) if n_cand else None
    n_stages = pol._max_stage_count(policy_like)
    max_pool = pol._max_pool_size(policy_like)
    select_rngs = [rng.child(("alpha-select", k)) for k in range(n_stages)]
    select_u = [np.clip(r.uniform(size=max_pool), 1e-10, 1 - 1e-10)
                for r in select_rngs]
    select_v = [np.clip(r.uniform(size=max_pool), 1e-10, 1 - 1e-10)
                for r in select_rngs]

    def noise_lookup(k, kind):
        return ag.draw_noise(kind, rng.child(("stage", k, "op", kind)),
                             B, C, T)

    groups = _policy_groups(policy_like, batch.labels)
    relax_info = {}
    total_loss = None
    for policy, rows, cls in groups:
        prefix = (cls,)
        x_rows = data if rows is None else data[rows]
        labels_rows = batch.labels if rows is None else batch.labels[rows]
        x = ad.constant(x_rows)

        def sliced(noise, rows=rows):
            return noise if rows is None else ag.slice_noise(noise, rows)

        if policy.is_dada:
            out = _dada_forward(policy, leaves, prefix, x, choice_g, choice_v,
                                lambda k, kind, rows=rows: sliced(
                                    noise_lookup(k, kind), rows),
                                sfreq, montage, cfg, mode, relax_info)
        else:
            idx = pol._choose_subpolicy_index(policy, choice_u, choice_g)
            sub = policy.subpolicies[idx]
            out = x
            for k, stage in enumerate(sub.stages):
                key_w = prefix + (idx, k, "w")
                gumbel = -np.log(-np.log(select_u[k][:len(stage.pool)]))
                z = stage.w + gumbel
                hard = np.zeros(len(stage.pool))
                hard[int(np.argmax(z))] = 1.0
                if mode == "sample":
                    i = int(np.argmax(z))
                    p_var = leaves[prefix + (idx, k, "p")][i]
                    mu_var = leaves[prefix + (idx, k, "mu")][i]
                    out = _gated_relaxed_op(
                        out, stage.pool[i], p_var, mu_var,
                        sliced(noise_lookup(k, stage.pool[i])), sfreq,
                        montage, cfg.gate_temperature)
                    soft = est._softmax_np(stage.w)
                    relax_info[key_w] = (hard, soft)
                else:
                    w_leaf = leaves[key_w]
                    if mode == "mix-z":
                        zvar = ad.add(w_leaf, ad.constant(gumbel))
                    elif mode == "mix-cond":
                        theta_soft = ad.softmax(w_leaf)
                        zvar = est._conditional_gumbel_scores(
                            theta_soft, hard, select_v[k][:len(stage.pool)])
                    elif mode == "mix-softmax":
                        zvar = ad.scalar_mul(cfg.cv_temperature, w_leaf)
                    else:
                        raise ValueError(f"unknown mode {mode!r}")
                    weights = ad.softmax(
                        ad.scalar_mul(1.0 / cfg.cv_temperature, zvar))
                    out = _stage_mixture(
                        stage, leaves if mode == "mix-softmax" else {},
                        prefix + (idx,), k, out, weights,
                        lambda kk, kind, rows=rows: sliced(
                            noise_lookup(kk, kind), rows),
                        sfreq, montage, cfg.gate_temperature)
        logp = net.forward(out, leaves=theta_leaves)
        loss = md.nll_loss(logp, labels_rows)
        frac = 1.0 if rows is None else len(rows) / B
        term = loss if frac == 1.0 else ad.scalar_mul(frac, loss)
        total_loss = term if total_loss is None else ad.add(total_loss, term)
    return total_loss, leaves, relax_info


def _dada_forward(policy, leaves, prefix, x, choice_g, choice_v, noise_for,
                  sfreq, montage, cfg, mode, relax_info):
    n_cand = len(policy.dada_weights)
    z = policy.dada_weights + choice_g[:n_cand]
    b = int(np.argmax(z))
    hard = np.zeros(n_cand)
    hard[b] = 1.0
    key_w = prefix + ("dada_w",)

    def candidate_chain(idx, p_source, mu_source):
        kinds = pol.dada_candidate_ops(policy.dada_pool, policy.dada_k, idx)
        out = x
        for k, kind in enumerate(kinds):
            out = _gated_relaxed_op(out, kind, p_source(idx, k),
                                    mu_source(idx, k), noise_for(k, kind),
                                    sfreq, montage, cfg.gate_temperature)
        return out

    if mode == "sample":
        p_leaf = leaves[prefix + ("dada_p",)]
        mu_leaf = leaves[prefix + ("dada_mu",)]
        relax_info[key_w] = (hard, est._softmax_np(policy.dada_weights))
        return candidate_chain(b, lambda i, k: p_leaf[i, k],
                               lambda i, k: mu_leaf[i, k])
    w_leaf = leaves[key_w]
    if mode == "mix-z":
        zvar = ad.add(w_leaf, ad.constant(choice_g[:n_cand]))
    elif mode == "mix-cond":
        theta_soft = ad.softmax(w_leaf)
        zvar = est._conditional_gumbel_scores(theta_soft, hard,
                                              choice_v[:n_cand])
    else:
        zvar = ad.scalar_mul(cfg.cv_temperature, w_leaf)
    weights = ad.softmax(ad.scalar_mul(1.0 / cfg.cv_temperature, zvar))
    total = None
    for idx in range(n_cand):
        chain = candidate_chain(idx,
                                lambda i, k: ad.constant(policy.dada_p[i, k]),
                                lambda i, k: ad.constant(policy.dada_mu[i, k]))
        term = ad.mul(ad.reshape(weights[idx], (1, 1, 1)), chain)
        total = term if total is None else ad.add(total, term)
    return total


def policy_alpha_gradients(policy_like, net: ChambonNet, theta: dict,
                           batch: SignalBatch, rng: RandomStream,
                           cfg: SearchConfig, montage: Montage | None
                           ) -> dict:
    """Single-sample gradient of the augmented loss w.r.t. every alpha array.

    Pathwise terms come from the hard-sampled pass; selection weights get
    RELAX terms assembled from the two mixture passes (all three passes
    replay identical noise, so calling this twice with clones of the same
    stream is bit-reproducible).
    """
    arch = policy_like.architecture
    grads = {}
    if arch == "faster_aa":
        # the relaxed objective IS the softmax mixture: fully pathwise
        with Tape() as tape:
            loss, leaves, _ = relaxed_policy_loss(
                policy_like, net, theta, batch, rng.clone(), cfg, montage,
                mode="mix-softmax")
            gmap = tape.backward(loss)
            return {key: gmap.wrt(leaf) for key, leaf in leaves.items()}

    with Tape() as tape:
        loss, leaves, relax_info = relaxed_policy_loss(
            policy_like, net, theta, batch, rng.clone(), cfg, montage,
            mode="sample")
        f_hard = float(loss.value)
        gmap = tape.backward(loss)
        for key, leaf in leaves.items():
            grads[key] = gmap.wrt(leaf)

    if not relax_info:
        return grads

    # RELAX for the discrete selections
    with Tape() as tape:
        loss_z, leaves_z, _ = relaxed_policy_loss(
            policy_like, net, theta, batch, rng.clone(), cfg, montage,
            mode="mix-z")
        loss_c, leaves_c, _ = relaxed_policy_loss(
            policy_like, net, theta, batch, rng.clone(), cfg, montage,
            mode="mix-cond")
        c_cond = float(loss_c.value)
        pathwise = ad.sub(loss_z, loss_c)
        gmap = tape.backward(pathwise)
        for key, (hard, soft) in relax_info.items():
            score = hard - soft
            gz = gmap.wrt(leaves_z[key])
            gc = gmap.wrt(leaves_c[key])
            grads[key] = (f_hard - c_cond) * score + gz + gc
    return grads


# ---------------------------------------------------------------------------
# the alternating search step
# ---------------------------------------------------------------------------

@dataclass
class HyperGradState:
    net: ChambonNet
    policy_like: object
    optimizer: md.Adam
    montage: Montage | None = None

    @property
    def theta(self):
        return self.net.params


def _augmented_theta_grads(state: HyperGradState, theta, batch, rng,
                           dropout_rng):
    aug = pol.apply_policy(state.policy_like, batch, rng,
                           state.montage)
    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in theta.items()}
        logp = state.net.forward(aug.data, leaves=leaves, train=True,
                                 dropout_rng=dropout_rng)
        loss = md.nll_loss(logp, aug.labels)
        gmap = tape.backward(loss)
        grads = {k: gmap.wrt(v) for k, v in leaves.items()}
    return grads, float(loss.value)


def adda_step(state: HyperGradState, train_batch: SignalBatch,
              valid_batch: SignalBatch, cfg: SearchConfig,
              rng: RandomStream) -> dict:
    """One alternating update of (theta, alpha).

    Unroll a plain SGD step on the augmented loss, estimate the policy
    hypergradient by central differences at theta +- eps*valid-gradient with
    shared augmentation noise, update alpha with projection, then take a
    fresh augmented Adam step on theta.
    """
    net = state.net
    theta = state.theta
    noise_rng = rng.child("train-noise")
    dropout_rng = rng.child("dropout")

    def grad_train_theta(th):
        grads, _ = _augmented_theta_grads(state, th, train_batch,
                                          noise_rng.clone(),
                                          dropout_rng.clone())
        return grads

    def grad_valid_theta(th):
        with Tape() as tape:
            leaves = {k: tape.leaf(v) for k, v in th.items()}
            logp = net.forward(valid_batch.data, leaves=leaves)
            loss = md.nll_loss(logp, valid_batch.labels)
            gmap = tape.backward(loss)
            return {k: gmap.wrt(v) for k, v in leaves.items()}

    def grad_train_alpha(th):
        return policy_alpha_gradients(state.policy_like, net, th, train_batch,
                                      noise_rng.clone(), cfg, state.montage)

    hyper, info = hypergradient_estimate(
        theta, grad_train_theta, grad_train_alpha, grad_valid_theta,
        xi_model=cfg.model_lr, epsilon_scale=cfg.epsilon_scale)
    if hyper is not None:
        arrays = alpha_arrays(state.policy_like)
        for key, grad in hyper.items():
            arrays[key] -= cfg.policy_lr * grad
        state.policy_like.project()
        info["alpha_updated"] = True
    else:
        info["alpha_updated"] = False

    fresh_rng = rng.child("fresh")
    grads, train_loss = _augmented_theta_grads(
        state, theta, train_batch, fresh_rng.child("noise"),
        fresh_rng.child("dropout"))
    state.optimizer.step(theta, grads)
    info["train_loss"] = train_loss
    return info


# ---------------------------------------------------------------------------
# search drivers
# ---------------------------------------------------------------------------

def _valid_loss(net, batch):
    with Tape():
        logp = net.forward(ad.constant(batch.data))
        return float(md.nll_loss(logp, batch.labels).value)


def make_search_policy(mode: str, pool: list[str], L: int, K: int,
                       classes) -> object:
    if mode == "adda":
        return pol.make_policy(pool, L, K, architecture="adda")
    if mode == "cadda":
        return ClasswisePolicy({int(c): pol.make_policy(pool, L, K, "adda")
                                for c in classes})
    if mode == "dada":
        return pol.make_policy(pool, L, K, architecture="dada")
    if mode == "faster_aa_bilevel":
        return pol.make_policy(pool, L, K, architecture="faster_aa")
    raise ValueError(f"unknown gradient search mode: {mode!r}")


def run_gradient_search(mode: str, splits: dict[str, SignalBatch],
                        cfg: SearchConfig, rng: RandomStream,
                        pool: list[str] | None = None, L: int = 5, K: int = 2,
                        montage: Montage | None = None,
                        net_cfg: md.ChambonNetConfig | None = None,
                        out_dir=None):
    """Alternating bilevel search with periodic retrain-from-scratch.

    Returns (trace, best_policy, state). ``splits`` holds disjoint
    'train'/'valid'/'test' SignalBatches. Every ``retrain_every`` search
    epochs the current policy is discretized, a fresh model is trained with
    it, and the trace records validation balanced accuracy plus the running
    test accuracy at the best validation so far.
    """
    from pathlib import Path

    train, valid, test = splits["train"], splits["valid"], splits["test"]
    pool = pool or [k for k in ag.differentiable_pool()]
    classes = sorted(set(int(v) for v in train.labels))
    policy_like = make_search_policy(mode, pool, L, K, classes)
    classwise = isinstance(policy_like, ClasswisePolicy)
    batch_size = cfg.batch_size * 2 if classwise and len(classes) > 1 \
        else cfg.batch_size

    if net_cfg is None:
        net_cfg = md.ChambonNetConfig(n_channels=train.n_channels,
                                      n_times=train.n_times,
                                      n_classes=max(2, len(classes)))
    net = md.build_net(net_cfg, rng.child("init"))
    state = HyperGradState(
        net=net, policy_like=policy_like,
        optimizer=md.Adam(net.params.keys(), lr=cfg.model_lr, beta1=0.0,
                          beta2=0.999),
        montage=montage)

    trace = SearchTrace()
    t0 = time.time()
    best = {"valid": -np.inf, "test": None, "policy": None}
    initial_valid_loss = None
    bad_retrains = 0
    step = 0

    def do_retrain(retrain_idx):
        nonlocal initial_valid_loss, bad_retrains
        discretized = pol.discretize(policy_like, L)
        re_net = md.build_net(net_cfg, rng.child(("retrain-init", retrain_idx)))
        md.fit(re_net, train, valid, policy=discretized, cfg=cfg.retrain,
               rng=rng.child(("retrain", retrain_idx)), montage=montage)
        v_report = md.evaluate(re_net, valid)
        t_report = md.evaluate(re_net, test)
        if v_report.balanced_accuracy > best["valid"]:
            best["valid"] = v_report.balanced_accuracy
            best["test"] = t_report.balanced_accuracy
            best["policy"] = discretized
        snapshot = ""
        if out_dir is not None:
            path = Path(out_dir) / f"policy_step{step:06d}.json"
            path.write_text(pol.serialize(discretized))
            snapshot = path.name  # relative: traces stay byte-comparable
        trace.rows.append(TraceRow(
            step=step, wall_time_s=time.time() - t0,
            retrain_valid_balacc=v_report.balanced_accuracy,
            running_test_balacc=best["test"],
            policy_snapshot_path=snapshot))
        vloss = _valid_loss(re_net, valid)
        if initial_valid_loss is None:
            initial_valid_loss = vloss
            bad_retrains = 0
        elif vloss > 10.0 * initial_valid_loss:
            bad_retrains += 1
        else:
            bad_retrains = 0
        return bad_retrains >= 3

    retrain_idx = 0
    halted = False
    for epoch in range(cfg.epochs):
        order = rng.child(("search-shuffle", epoch)).permutation(train.n)
        vorder = rng.child(("valid-shuffle", epoch)).permutation(valid.n)
        vpos = 0
        for start in range(0, train.n, batch_size):
            rows = order[start:start + batch_size]
            vrows = vorder[vpos:vpos + batch_size]
            if len(vrows) < min(batch_size, valid.n):
                vpos = 0
                vrows = vorder[:batch_size]
            vpos += len(vrows)
            tb = SignalBatch(train.data[rows], train.sfreq, train.labels[rows])
            vb = SignalBatch(valid.data[vrows], valid.sfreq,
                             valid.labels[vrows])
            info = adda_step(state, tb, vb, cfg, rng.child(("step", step)))
            if not info["alpha_updated"]:
                trace.events.append(f"step {step}: skipped alpha update "
                                    f"(validation gradient underflow)")
            trace.rows.append(TraceRow(
                step=step, wall_time_s=time.time() - t0,
                train_loss=info["train_loss"],
                valid_loss=_valid_loss(net, valid)))
            step += 1
        if (epoch + 1) % cfg.retrain_every == 0:
            if do_retrain(retrain_idx):
                trace.events.append(
                    f"halted after retrain {retrain_idx}: validation loss "
                    f"diverged for 3 consecutive retrains")
                halted = True
            retrain_idx += 1
            if halted:
                break
    if retrain_idx == 0 or (not halted and cfg.epochs % cfg.retrain_every):
        do_retrain(retrain_idx)
    return trace, best["policy"], state


# ---------------------------------------------------------------------------
# gradient-free baselines
# ---------------------------------------------------------------------------

@dataclass
class RandomSearchSpace:
    pool: list[str]
    p_grid: list[float]
    mu_grid: list[float]
    L: int = 5
    K: int = 1

    def size(self, n_classes: int = 1) -> int:
        return pol.policy_space_size(len(self.p_grid), len(self.mu_grid),
                                     max(len(self.pool), 1), self.L, self.K,
                                     n_classes)


def identity_policy() -> Policy:
    return Policy([pol.Subpolicy([ag.AugOpSpec("time_reverse", p=0.0)])])


def sample_discrete_policy(space: RandomSearchSpace, rng: RandomStream
                           ) -> Policy:
    if not space.pool:
        return identity_policy()
    subs = []
    for _ in range(space.L):
        specs = []
        for _ in range(space.K):
            kind = space.pool[int(rng.integers(0, len(space.pool)))]
            p = space.p_grid[int(rng.integers(0, len(space.p_grid)))]
            mu = None if kind in ag.MAGNITUDE_FREE else \
                space.mu_grid[int(rng.integers(0, len(space.mu_grid)))]
            specs.append(ag.AugOpSpec(kind, p=p, mu=mu))
        subs.append(pol.Subpolicy(specs))
    return Policy(subs)


def random_search(space: RandomSearchSpace, splits: dict[str, SignalBatch],
                  trials: int, rng: RandomStream,
                  class_wise: bool = False,
                  train_cfg: TrainConfig | None = None,
                  montage: Montage | None = None,
                  net_cfg: md.ChambonNetConfig | None = None):
    """Uniform policies from the grid, each retrained from scratch; the
    winner is the best validation balanced accuracy."""
    if trials < 1:
        raise ValueError("need at least one trial")
    train, valid, test = splits["train"], splits["valid"], splits["test"]
    classes = sorted(set(int(v) for v in train.labels))
    train_cfg = train_cfg or TrainConfig(max_epochs=60, patience=12)
    if net_cfg is None:
        net_cfg = md.ChambonNetConfig(n_channels=train.n_channels,
                                      n_times=train.n_times,
                                      n_classes=max(2, len(classes)))
    rows = []
    best = {"valid": -np.inf, "policy": None, "test": None}
    t0 = time.time()
    for trial in range(trials):
        trial_rng = rng.child(("trial", trial))
        if class_wise:
            candidate = ClasswisePolicy(
                {c: sample_discrete_policy(space, trial_rng.child(("cls", c)))
                 for c in classes})
        else:
            candidate = sample_discrete_policy(space, trial_rng.child("pol"))
        net = md.build_net(net_cfg, trial_rng.child("init"))
        md.fit(net, train, valid, policy=candidate, cfg=train_cfg,
               rng=trial_rng.child("fit"), montage=montage)
        v_acc = md.evaluate(net, valid).balanced_accuracy
        if v_acc > best["valid"]:
            best["valid"] = v_acc
            best["policy"] = candidate
            best["test"] = md.evaluate(net, test).balanced_accuracy
        rows.append(TraceRow(step=trial, wall_time_s=time.time() - t0,
                             retrain_valid_balacc=v_acc,
                             running_test_balacc=best["test"]))
    return SearchTrace(rows), best["policy"], best


def density_matching_search(candidates: list, splits: dict[str, SignalBatch],
                            rng: RandomStream,
                            train_cfg: TrainConfig | None = None,
                            montage: Montage | None = None,
                            net_cfg: md.ChambonNetConfig | None = None):
    """Score candidates by a pre-trained model's loss on the augmented
    validation split; ascending (lower is better)."""
    train, valid = splits["train"], splits["valid"]
    classes = sorted(set(int(v) for v in train.labels))
    train_cfg = train_cfg or TrainConfig(max_epochs=60, patience=12)
    if net_cfg is None:
        net_cfg = md.ChambonNetConfig(n_channels=train.n_channels,
                                      n_times=train.n_times,
                                      n_classes=max(2, len(classes)))
    net = md.build_net(net_cfg, rng.child("init"))
    md.fit(net, train, valid, cfg=train_cfg, rng=rng.child("fit"),
           montage=montage)
    scored = []
    for candidate in candidates:
        # noise keyed by policy content: duplicates score identically
        key = pol.serialize(candidate)
        aug = pol.apply_policy(candidate, valid, rng.child(("cand", key)),
                               montage)
        with Tape():
            logp = net.forward(ad.constant(aug.data))
            loss = float(md.nll_loss(logp, aug.labels).value)
        scored.append((loss, candidate))
    scored.sort(key=lambda pair: pair[0])
    return scored
