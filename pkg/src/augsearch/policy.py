"""Augmentation policies: stages, subpolicies, architectures, class routing.

A relaxed policy holds continuous parameters (selection weights w plus
per-operation p and mu) and exists in three architectures:

* adda: L subpolicies of K stages; a stage samples ONE operation per call
  through a straight-through Gumbel-softmax over w;
* faster_aa: same structure, but a stage evaluates the convex combination of
  the whole pool weighted by softmax(w);
* dada: every ordered operation sequence of length K is a candidate
  subpolicy (materialized lazily), sampled by Gumbel-softmax over candidate
  weights.

Class-wise policies map each label to its own policy. Subpolicy and
operation selections reuse one shared noise draw across classes, so a
class-wise policy whose per-class policies are identical reproduces the
class-agnostic behaviour draw for draw.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import augment as ag
from . import autodiff as ad
from .augment import AugOpSpec, Montage, SignalBatch
from .rng import RandomStream

DEFAULT_GATE_PROB = 0.5
DEFAULT_MAGNITUDE = 0.5
ARCHITECTURES = ("adda", "dada", "faster_aa")

SCHEMA_VERSION = 1


class PolicyParseError(ValueError):
    """Raised when a serialized policy document is malformed."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Stage:
    """One relaxed selection over an operation pool."""
    pool: list[str]
    w: np.ndarray = None
    p: np.ndarray = None
    mu: np.ndarray = None

    def __post_init__(self):
        for kind in self.pool:
            if kind not in ag.OP_KINDS:
                raise ValueError(f"unknown operation kind: {kind!r}")
            if kind in ag.NON_DIFFERENTIABLE:
                raise ValueError(
                    f"{kind} cannot appear in a relaxed stage pool")
        n = len(self.pool)
        self.w = np.zeros(n) if self.w is None else np.asarray(self.w, float)
        self.p = np.full(n, DEFAULT_GATE_PROB) if self.p is None \
            else np.asarray(self.p, float)
        self.mu = np.full(n, DEFAULT_MAGNITUDE) if self.mu is None \
            else np.asarray(self.mu, float)
        if not (self.w.shape == self.p.shape == self.mu.shape == (n,)):
            raise ValueError("stage parameter vectors must match the pool")

    def project(self):
        np.clip(self.p, 0.0, 1.0, out=self.p)
        np.clip(self.mu, 0.0, 1.0, out=self.mu)

    def top_spec(self) -> AugOpSpec:
        i = int(np.argmax(self.w))  # argmax takes the lowest index on ties
        kind = self.pool[i]
        mu = None if kind in ag.MAGNITUDE_FREE else float(self.mu[i])
        return AugOpSpec(kind, p=float(self.p[i]), mu=mu,
                         differentiable=kind not in ag.NON_DIFFERENTIABLE)


@dataclass
class Subpolicy:
    """Ordered chain applied as stage_K(...stage_1(X)); discrete form holds
    AugOpSpecs instead of Stages."""
    stages: list

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("a subpolicy needs at least one stage")

    @property
    def is_discrete(self):
        return isinstance(self.stages[0], AugOpSpec)


@dataclass
class Policy:
    subpolicies: list[Subpolicy] = field(default_factory=list)
    architecture: str = "adda"
    # dada state: weights over the (N_O)^K lazily-materialized candidates
    dada_pool: list[str] | None = None
    dada_k: int = 0
    dada_weights: np.ndarray | None = None
    dada_p: np.ndarray | None = None
    dada_mu: np.ndarray | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture: {self.architecture!r}")

    @property
    def is_dada(self):
        return self.architecture == "dada" and self.dada_weights is not None

    @property
    def n_candidates(self):
        return len(self.dada_weights) if self.is_dada else len(self.subpolicies)

    def project(self):
        for sp in self.subpolicies:
            for st in sp.stages:
                if isinstance(st, Stage):
                    st.project()
        if self.is_dada:
            np.clip(self.dada_p, 0.0, 1.0, out=self.dada_p)
            np.clip(self.dada_mu, 0.0, 1.0, out=self.dada_mu)


@dataclass
class ClasswisePolicy:
    per_class: dict[int, Policy]

    def __post_init__(self):
        if not self.per_class:
            raise ValueError("class-wise policy needs at least one class")
        archs = {p.architecture for p in self.per_class.values()}
        if len(archs) != 1:
            raise ValueError("per-class policies must share an architecture")

    @property
    def architecture(self):
        return next(iter(self.per_class.values())).architecture

    def project(self):
        for p in self.per_class.values():
            p.project()


def make_policy(pool: list[str], L: int, K: int,
                architecture: str = "adda") -> Policy:
    """Fresh relaxed policy: uniform weights, p = mu = 0.5 everywhere."""
    if architecture == "dada":
        n_cand = len(pool) ** K
        return Policy(architecture="dada", dada_pool=list(pool), dada_k=K,
                      dada_weights=np.zeros(n_cand),
                      dada_p=np.full((n_cand, K), DEFAULT_GATE_PROB),
                      dada_mu=np.full((n_cand, K), DEFAULT_MAGNITUDE))
    subs = [Subpolicy([Stage(list(pool)) for _ in range(K)])
            for _ in range(L)]
    return Policy(subpolicies=subs, architecture=architecture)


def make_classwise(policy_factory, classes) -> ClasswisePolicy:
    return ClasswisePolicy({int(c): policy_factory() for c in classes})


def dada_candidate_ops(pool: list[str], K: int, index: int) -> tuple[str, ...]:
    digits = np.unravel_index(index, (len(pool),) * K)
    return tuple(pool[d] for d in digits)


# ---------------------------------------------------------------------------
# exact search-space arithmetic
# ---------------------------------------------------------------------------

def policy_space_size(n_p: int, n_mu: int, n_ops: int, L: int, K: int,
                      n_classes: int = 1) -> int:
    """(N_p * N_mu * N_O) ** (L * K * |Y|) with exact integers."""
    for name, v in [("n_p", n_p), ("n_mu", n_mu), ("n_ops", n_ops),
                    ("L", L), ("K", K), ("n_classes", n_classes)]:
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    return (n_p * n_mu * n_ops) ** (L * K * n_classes)


# ---------------------------------------------------------------------------
# hard application
# ---------------------------------------------------------------------------

def _stage_noise(rng: RandomStream, stage_index: int, kind: str,
                 B: int, C: int, T: int) -> dict:
    return ag.draw_noise(kind, rng.child(("stage", stage_index, "op", kind)),
                         B, C, T)


def _apply_spec_rows(data: np.ndarray, rows: np.ndarray, spec: AugOpSpec,
                     noise: dict, sfreq: float, montage) -> np.ndarray:
    sliced = ag.slice_noise(noise, rows)
    sub = data[rows]
    transformed = ag.transform_hard(spec.kind, sub, spec.mu, sliced, sfreq,
                                    montage)
    out = data.copy()
    out[rows] = ag.gate(transformed, sub, spec.p, sliced["gate"])
    return out


def stage_forward(stage, batch: SignalBatch, rng: RandomStream,
                  mode: str = "adda", montage: Montage | None = None,
                  stage_index: int = 0) -> SignalBatch:
    """Hard evaluation of one relaxed stage on a whole batch.

    adda samples one operation from softmax(w); faster_aa evaluates the
    gated pool and mixes it with softmax(w) weights.
    """
    B, C, T = batch.data.shape
    rows = np.arange(B)
    if mode == "adda":
        g = rng.child(("stage", stage_index, "select")).gumbel(
            size=len(stage.pool))
        i = int(np.argmax(stage.w + g))
        spec = _stage_spec(stage, i)
        noise = _stage_noise(rng, stage_index, spec.kind, B, C, T)
        return batch.with_data(_apply_spec_rows(batch.data, rows, spec, noise,
                                                batch.sfreq, montage))
    if mode == "faster_aa":
        weights = np.exp(stage.w - stage.w.max())
        weights /= weights.sum()
        mix = np.zeros_like(batch.data)
        for i, kind in enumerate(stage.pool):
            spec = _stage_spec(stage, i)
            noise = _stage_noise(rng, stage_index, kind, B, C, T)
            mix += weights[i] * _apply_spec_rows(batch.data, rows, spec,
                                                 noise, batch.sfreq, montage)
        return batch.with_data(mix)
    raise ValueError(f"unknown stage mode: {mode!r}")


def _stage_spec(stage: Stage, i: int) -> AugOpSpec:
    kind = stage.pool[i]
    mu = None if kind in ag.MAGNITUDE_FREE else float(stage.mu[i])
    return AugOpSpec(kind, p=float(stage.p[i]), mu=mu,
                     differentiable=kind not in ag.NON_DIFFERENTIABLE)


def _choose_subpolicy_index(policy: Policy, choice_u: float,
                            choice_gumbel: np.ndarray | None) -> int:
    if policy.is_dada:
        return int(np.argmax(policy.dada_weights +
                             choice_gumbel[:len(policy.dada_weights)]))
    return min(int(choice_u * len(policy.subpolicies)),
               len(policy.subpolicies) - 1)


def _subpolicy_specs(policy: Policy, index: int,
                     select_gumbels: list[np.ndarray]) -> list[AugOpSpec]:
    """Resolve the chosen subpolicy into concrete per-stage op specs."""
    if policy.is_dada:
        kinds = dada_candidate_ops(policy.dada_pool, policy.dada_k, index)
        specs = []
        for k, kind in enumerate(kinds):
            mu = None if kind in ag.MAGNITUDE_FREE \
                else float(policy.dada_mu[index, k])
            specs.append(AugOpSpec(kind, p=float(policy.dada_p[index, k]),
                                   mu=mu, differentiable=True))
        return specs
    sub = policy.subpolicies[index]
    if sub.is_discrete:
        return list(sub.stages)
    specs = []
    for k, stage in enumerate(sub.stages):
        i = int(np.argmax(stage.w + select_gumbels[k][:len(stage.pool)]))
        specs.append(_stage_spec(stage, i))
    return specs


def _max_stage_count(policy_like) -> int:
    policies = policy_like.per_class.values() \
        if isinstance(policy_like, ClasswisePolicy) else [policy_like]
    counts = []
    for p in policies:
        if p.is_dada:
            counts.append(p.dada_k)
        else:
            counts.extend(len(sp.stages) for sp in p.subpolicies)
    return max(counts)


def _max_pool_size(policy_like) -> int:
    policies = policy_like.per_class.values() \
        if isinstance(policy_like, ClasswisePolicy) else [policy_like]
    sizes = [1]
    for p in policies:
        if p.is_dada:
            sizes.append(len(p.dada_weights))
        else:
            for sp in p.subpolicies:
                for st in sp.stages:
                    if isinstance(st, Stage):
                        sizes.append(len(st.pool))
    return max(sizes)


def apply_policy(policy, batch: SignalBatch, rng: RandomStream,
                 montage: Montage | None = None,
                 mode: str | None = None) -> SignalBatch:
    """Hard application: one subpolicy index drawn per batch; class-wise
    routing applies each class's subpolicy at that draw to its own rows.

    Pass a fresh rng child per batch; the draws consumed here are pure
    functions of that stream.
    """
    classwise = isinstance(policy, ClasswisePolicy)
    if classwise and batch.labels is None:
        raise ValueError("class-wise policies require labels")
    B, C, T = batch.data.shape

    choice_rng = rng.child("choice")
    choice_u = float(choice_rng.uniform())
    n_cand = _max_pool_size(policy) if _is_dada_like(policy) else 0
    choice_gumbel = choice_rng.gumbel(size=n_cand) if n_cand else None
    n_stages = _max_stage_count(policy)
    select_gumbels = [rng.child(("stage", k, "select")).gumbel(
        size=_max_pool_size(policy)) for k in range(n_stages)]

    if classwise:
        groups = []
        for cls in sorted(set(int(v) for v in batch.labels)):
            if cls not in policy.per_class:
                raise ValueError(f"label {cls} has no policy entry")
            groups.append((policy.per_class[cls],
                           np.flatnonzero(batch.labels == cls)))
    else:
        groups = [(policy, np.arange(B))]

    data = batch.data.copy()
    mode = mode or ("faster_aa" if _arch_of(policy) == "faster_aa" else "adda")
    for pol, rows in groups:
        if len(rows) == 0:
            continue
        idx = _choose_subpolicy_index(pol, choice_u, choice_gumbel)
        if mode == "faster_aa" and not pol.is_dada \
                and not pol.subpolicies[idx].is_discrete:
            sub = pol.subpolicies[idx]
            for k, stage in enumerate(sub.stages):
                staged = stage_forward(stage,
                                       SignalBatch(data, batch.sfreq),
                                       rng, mode="faster_aa", montage=montage,
                                       stage_index=k)
                data[rows] = staged.data[rows]
            continue
        specs = _subpolicy_specs(pol, idx, select_gumbels)
        for k, spec in enumerate(specs):
            noise = _stage_noise(rng, k, spec.kind, B, C, T)
            data = _apply_spec_rows(data, rows, spec, noise, batch.sfreq,
                                    montage)
    return batch.with_data(data)


def _arch_of(policy) -> str:
    return policy.architecture


def _is_dada_like(policy) -> bool:
    if isinstance(policy, ClasswisePolicy):
        return any(p.is_dada for p in policy.per_class.values())
    return policy.is_dada


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def discretize(policy, L: int | None = None):
    """Collapse relaxed state: argmax-of-w operation per stage with its
    learned (p, mu); dada keeps the L highest-weight candidates."""
    if isinstance(policy, ClasswisePolicy):
        return ClasswisePolicy({c: discretize(p, L)
                                for c, p in policy.per_class.items()})
    if policy.is_dada:
        L = L or 5
        order = np.argsort(-policy.dada_weights, kind="stable")[:L]
        subs = []
        for idx in order:
            kinds = dada_candidate_ops(policy.dada_pool, policy.dada_k,
                                       int(idx))
            specs = []
            for k, kind in enumerate(kinds):
                mu = None if kind in ag.MAGNITUDE_FREE \
                    else float(policy.dada_mu[idx, k])
                specs.append(AugOpSpec(kind, p=float(policy.dada_p[idx, k]),
                                       mu=mu))
            subs.append(Subpolicy(specs))
        return Policy(subpolicies=subs, architecture="dada")
    subs = []
    for sp in policy.subpolicies:
        if sp.is_discrete:
            subs.append(Subpolicy(list(sp.stages)))
        else:
            subs.append(Subpolicy([st.top_spec() for st in sp.stages]))
    return Policy(subpolicies=subs, architecture=policy.architecture)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _spec_to_doc(spec: AugOpSpec) -> dict:
    return {"kind": spec.kind, "p": spec.p, "mu": spec.mu}


def _spec_from_doc(doc: dict, where: str) -> AugOpSpec:
    kind = doc.get("kind")
    if kind not in ag.OP_KINDS:
        raise PolicyParseError(f"{where}.kind: unknown operation kind {kind!r}")
    p = doc.get("p")
    if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
        raise PolicyParseError(f"{where}.p: out of range value {p!r}")
    mu = doc.get("mu")
    if kind not in ag.MAGNITUDE_FREE:
        if not isinstance(mu, (int, float)) or not 0.0 <= mu <= 1.0:
            raise PolicyParseError(f"{where}.mu: out of range value {mu!r}")
    return AugOpSpec(kind, p=float(p),
                     mu=None if kind in ag.MAGNITUDE_FREE else float(mu))


def _policy_to_doc(policy: Policy) -> dict:
    doc = {"architecture": policy.architecture}
    discrete = discretize(policy)
    doc["subpolicies"] = [[_spec_to_doc(s) for s in sp.stages]
                          for sp in discrete.subpolicies]
    weights = {}
    if policy.is_dada:
        weights["dada"] = {
            "pool": policy.dada_pool,
            "K": policy.dada_k,
            "weights": policy.dada_weights.tolist(),
            "p": policy.dada_p.tolist(),
            "mu": policy.dada_mu.tolist(),
        }
    elif policy.subpolicies and not policy.subpolicies[0].is_discrete:
        weights["stages"] = [[{
            "pool": st.pool,
            "w": st.w.tolist(),
            "p": st.p.tolist(),
            "mu": st.mu.tolist(),
        } for st in sp.stages] for sp in policy.subpolicies]
    if weights:
        doc["weights"] = weights
    return doc


def _policy_from_doc(doc: dict, where: str) -> Policy:
    arch = doc.get("architecture")
    if arch not in ARCHITECTURES:
        raise PolicyParseError(f"{where}.architecture: unknown value {arch!r}")
    weights = doc.get("weights") or {}
    if "dada" in weights:
        d = weights["dada"]
        return Policy(architecture="dada", dada_pool=list(d["pool"]),
                      dada_k=int(d["K"]),
                      dada_weights=np.asarray(d["weights"], float),
                      dada_p=np.asarray(d["p"], float),
                      dada_mu=np.asarray(d["mu"], float))
    if "stages" in weights:
        subs = []
        for si, sp in enumerate(weights["stages"]):
            stages = [Stage(st["pool"], np.asarray(st["w"], float),
                            np.asarray(st["p"], float),
                            np.asarray(st["mu"], float)) for st in sp]
            subs.append(Subpolicy(stages))
        return Policy(subpolicies=subs, architecture=arch)
    subs_doc = doc.get("subpolicies")
    if not isinstance(subs_doc, list) or not subs_doc:
        raise PolicyParseError(f"{where}.subpolicies: missing or empty")
    subs = []
    for i, sp in enumerate(subs_doc):
        specs = [_spec_from_doc(s, f"{where}.subpolicies[{i}][{k}]")
                 for k, s in enumerate(sp)]
        subs.append(Subpolicy(specs))
    return Policy(subpolicies=subs, architecture=arch)


def serialize(policy) -> str:
    """Lossless JSON round trip of policy structure and relaxed state."""
    if isinstance(policy, ClasswisePolicy):
        doc = {
            "version": SCHEMA_VERSION,
            "architecture": policy.architecture,
            "n_classes": len(policy.per_class),
            "per_class": {str(c): _policy_to_doc(p)
                          for c, p in sorted(policy.per_class.items())},
        }
    else:
        doc = {"version": SCHEMA_VERSION, "n_classes": 1}
        doc.update(_policy_to_doc(policy))
    return json.dumps(doc, indent=2, sort_keys=True)


def parse(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyParseError(f"invalid JSON: {exc}") from exc
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise PolicyParseError(f"version: unsupported value {version!r}")
    if "per_class" in doc:
        n_classes = doc.get("n_classes")
        entries = doc["per_class"]
        if not isinstance(entries, dict) or len(entries) != n_classes:
            raise PolicyParseError(
                f"per_class: expected {n_classes} entries, got "
                f"{len(entries) if isinstance(entries, dict) else 'none'}")
        per_class = {}
        for key, sub in entries.items():
            try:
                cls = int(key)
            except ValueError:
                raise PolicyParseError(f"per_class key {key!r} is not a class id")
            per_class[cls] = _policy_from_doc(sub, f"per_class[{key}]")
        missing = set(range(n_classes)) - set(per_class)
        if missing:
            raise PolicyParseError(f"per_class: missing classes {sorted(missing)}")
        return ClasswisePolicy(per_class)
    return _policy_from_doc(doc, "policy")
