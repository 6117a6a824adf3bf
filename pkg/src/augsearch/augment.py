"""Augmentation operations for multichannel windows, hard and relaxed.

Every operation exists in two forms sharing one noise draw:

* hard: plain numpy transform, gated per example by a Bernoulli coin;
* relaxed: the same transform expressed through autodiff primitives, gated by
  a relaxed-Bernoulli blend, so that gradients w.r.t. the gate probability p
  and the magnitude mu flow pathwise onto the active tape.

The bandstop filter deliberately has no relaxed form and is excluded from
differentiable operation pools.

Noise is always drawn at full-batch shape in a fixed number of stream calls,
so the policy layer can apply one operation to class subsets while keeping
draws aligned with the class-agnostic case.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .estimators import DEFAULT_BERNOULLI_TEMPERATURE
from .rng import RandomStream

OP_KINDS = (
    "time_reverse", "sign_flip", "ft_surrogate", "frequency_shift",
    "bandstop", "time_mask", "gaussian_noise", "channel_dropout",
    "channel_shuffle", "channel_symmetry",
    "rotation_x", "rotation_y", "rotation_z",
)
MAGNITUDE_FREE = frozenset({"time_reverse", "sign_flip", "channel_symmetry"})
NON_DIFFERENTIABLE = frozenset({"bandstop"})
MONTAGE_OPS = frozenset({"channel_symmetry", "rotation_x", "rotation_y",
                         "rotation_z"})

MASK_STEEPNESS = 1.0 / 0.001     # sigmoid slope of the time mask, per second
NOISE_STD_AT_FULL_MAGNITUDE = 0.2
FREQ_SHIFT_MAX_HZ = 5.0          # shift range upper bound at mu = 1
BANDSTOP_WIDTH_AT_FULL_MAGNITUDE = 2.0   # Hz
ROTATION_MAX_ANGLE = np.pi / 6   # radians at mu = 1

# instrumentation hook: counts core transform evaluations per op kind
op_call_counter: dict[str, int] = {k: 0 for k in OP_KINDS}


def reset_op_call_counter():
    for k in op_call_counter:
        op_call_counter[k] = 0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class SignalBatch:
    """B x C x T windows with a sampling rate and optional integer labels."""
    data: np.ndarray
    sfreq: float
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"data must be B x C x T, got {self.data.shape}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 2:
            raise ValueError("need C >= 1 and T >= 2")
        if not np.isfinite(self.data).all():
            raise ValueError("signal values must be finite")
        if self.sfreq <= 0:
            raise ValueError("sfreq must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise ValueError("labels must be one integer per window")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_times(self):
        return self.data.shape[2]

    def with_data(self, data) -> "SignalBatch":
        return SignalBatch(data, self.sfreq, self.labels)


@dataclass
class Montage:
    """Sensor names, unit positions on the head sphere, left/right pairs."""
    channel_names: list[str]
    positions: np.ndarray                 # (C, 3), unit vectors
    symmetry_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (len(self.channel_names), 3):
            raise ValueError("positions must be one 3-vector per channel")
        norms = np.linalg.norm(self.positions, axis=1)
        if np.any(norms < 1e-9):
            raise ValueError("zero-length sensor position")
        self.positions = self.positions / norms[:, None]
        c = len(self.channel_names)
        # coincident sensors make interpolation degenerate
        for i in range(c):
            for j in range(i + 1, c):
                if np.linalg.norm(self.positions[i] - self.positions[j]) < 1e-6:
                    raise ValueError(
                        f"sensors {self.channel_names[i]} and "
                        f"{self.channel_names[j]} coincide")
        seen = set()
        for l, r in self.symmetry_pairs:
            if l in seen or r in seen or l == r:
                raise ValueError("symmetry pairs must be disjoint")
            seen.update((l, r))

    @property
    def n_channels(self):
        return len(self.channel_names)


def default_montage() -> Montage:
    """Built-in 6-channel montage (C3, C4, F3, F4, O1, O2)."""
    names = ["C3", "C4", "F3", "F4", "O1", "O2"]
    pos = np.array([
        [-0.71, 0.00, 0.71],
        [0.71, 0.00, 0.71],
        [-0.55, 0.67, 0.50],
        [0.55, 0.67, 0.50],
        [-0.45, -0.85, 0.30],
        [0.45, -0.85, 0.30],
    ])
    return Montage(names, pos, [(0, 1), (2, 3), (4, 5)])


def montage_to_csv(montage: Montage, path):
    lines = ["name,x,y,z,pair"]
    pair_of = {}
    for l, r in montage.symmetry_pairs:
        pair_of[l] = montage.channel_names[r]
        pair_of[r] = montage.channel_names[l]
    for i, name in enumerate(montage.channel_names):
        x, y, z = (float(v) for v in montage.positions[i])
        lines.append(f"{name},{x!r},{y!r},{z!r},{pair_of.get(i, '')}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def montage_from_csv(path) -> Montage:
    names, rows, pair_names = [], [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["name", "x", "y", "z", "pair"]:
            raise ValueError(f"bad montage header: {header}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, x, y, z, pair = line.split(",")
            names.append(name)
            rows.append([float(x), float(y), float(z)])
            pair_names.append(pair)
    pairs = []
    for i, pname in enumerate(pair_names):
        if pname:
            j = names.index(pname)
            if i < j:
                pairs.append((i, j))
    return Montage(names, np.asarray(rows), pairs)


@dataclass
class AugOpSpec:
    """One operation instance: kind, gate probability, magnitude."""
    kind: str
    p: float = 0.5
    mu: float | None = 0.5
    differentiable: bool = False

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown operation kind: {self.kind!r}")
        if self.kind in MAGNITUDE_FREE:
            self.mu = None
        elif self.mu is None:
            raise ValueError(f"{self.kind} requires a magnitude")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p out of range: {self.p}")
        if self.mu is not None and not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu out of range: {self.mu}")
        if self.kind in NON_DIFFERENTIABLE and self.differentiable:
            raise ValueError(f"{self.kind} has no relaxed form")


def differentiable_pool() -> list[str]:
    return [k for k in OP_KINDS if k not in NON_DIFFERENTIABLE]


# ---------------------------------------------------------------------------
# noise draws (fixed count of stream calls per op, full batch shape)
# ---------------------------------------------------------------------------

def draw_noise(kind: str, rng: RandomStream, B: int, C: int, T: int) -> dict:
    """Draw everything the op and its gate need, per example."""
    noise = {"gate": rng.uniform(size=B)}
    if kind == "ft_surrogate":
        m = (T - 1) // 2
        noise["phase"] = rng.uniform(size=(B, C, m))
    elif kind == "frequency_shift":
        noise["shift"] = rng.uniform(size=B)
    elif kind == "bandstop":
        noise["center"] = rng.uniform(size=B)
    elif kind == "time_mask":
        noise["cut"] = rng.uniform(size=B)
    elif kind == "gaussian_noise":
        noise["z"] = rng.normal(size=(B, C, T))
    elif kind == "channel_dropout":
        noise["keep"] = rng.uniform(size=(B, C))
    elif kind == "channel_shuffle":
        noise["select"] = rng.uniform(size=(B, C))
        noise["order"] = rng.uniform(size=(B, C))
    elif kind in ("rotation_x", "rotation_y", "rotation_z"):
        noise["angle"] = rng.uniform(size=B)
    return noise


def slice_noise(noise: dict, rows: np.ndarray) -> dict:
    return {k: v[rows] for k, v in noise.items()}


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _ctx(batch_or_sfreq, montage=None) -> SimpleNamespace:
    if isinstance(batch_or_sfreq, SignalBatch):
        sfreq = batch_or_sfreq.sfreq
    else:
        sfreq = float(batch_or_sfreq)
    return SimpleNamespace(sfreq=sfreq, montage=montage)


def analytic_signal(x):
    """x + j*H[x] along the last axis, via the frequency-domain multiplier."""
    if isinstance(x, Variable):
        T = x.value.shape[-1]
        h = _analytic_multiplier(T)
        return ad.ifft(ad.mul(ad.fft(x), ad.constant(h)))
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if T < 2:
        raise ValueError("analytic_signal needs T >= 2")
    return np.fft.ifft(np.fft.fft(x, axis=-1) * _analytic_multiplier(T), axis=-1)


def _analytic_multiplier(T: int) -> np.ndarray:
    h = np.zeros(T)
    h[0] = 1.0
    if T % 2 == 0:
        h[1:T // 2] = 2.0
        h[T // 2] = 1.0
    else:
        h[1:(T + 1) // 2] = 2.0
    return h


def _safe_logit(p: Variable, eps: float = 1e-6) -> Variable:
    """logit of p with the value nudged off {0,1}; gradient passes through."""
    clipped = np.clip(p.value, eps, 1.0 - eps)
    ps = ad.straight_through(clipped, p) if isinstance(p, Variable) else \
        ad.constant(clipped)
    return ad.sub(ad.vlog(ps), ad.vlog(ad.sub(1.0, ps)))


def relaxed_bernoulli_from_uniform(p, u: np.ndarray,
                                   temperature: float) -> Variable:
    """Concrete sample reusing an explicit uniform draw (CRN-friendly)."""
    u = np.clip(u, 1e-10, 1 - 1e-10)
    noise = np.log(u) - np.log1p(-u)
    p = p if isinstance(p, Variable) else ad.constant(np.asarray(p, float))
    z = ad.scalar_mul(1.0 / temperature, ad.add(_safe_logit(p), ad.constant(noise)))
    return ad.sigmoid(z)


def hard_gate_mask(p: float, u: np.ndarray) -> np.ndarray:
    """Bernoulli(p) coupled to the relaxed gate's zero-temperature limit."""
    return u > 1.0 - p


def gate(transformed, original, p, u: np.ndarray, relaxed: bool = False,
         temperature: float = DEFAULT_BERNOULLI_TEMPERATURE):
    """Per-example choice between transformed and original signals.

    Hard mode picks rows by a Bernoulli(p) mask; relaxed mode blends with a
    relaxed-Bernoulli coefficient so d(output)/dp exists at frozen noise.
    """
    if relaxed:
        b = relaxed_bernoulli_from_uniform(p, u, temperature)
        B = len(u)
        b3 = ad.reshape(b, (B, 1, 1))
        return ad.add(ad.mul(b3, transformed),
                      ad.mul(ad.sub(1.0, b3), original))
    mask = hard_gate_mask(float(p), u)
    out = np.array(original, copy=True)
    out[mask] = transformed[mask]
    return out


# ---------------------------------------------------------------------------
# core transforms: hard (numpy) and relaxed (autodiff) forms
# ---------------------------------------------------------------------------

def _hard_time_reverse(x, mu, noise, ctx):
    return x[:, :, ::-1].copy()


def _relaxed_time_reverse(x, mu, noise, ctx):
    return ad.flip(x, axis=-1)


def _hard_sign_flip(x, mu, noise, ctx):
    return -x


def _relaxed_sign_flip(x, mu, noise, ctx):
    return ad.neg(x)


def _phase_multiplier_np(theta: np.ndarray, T: int) -> np.ndarray:
    B, C, m = theta.shape
    rot = np.exp(1j * theta)
    M = np.ones((B, C, T), dtype=np.complex128)
    M[:, :, 1:m + 1] = rot
    if m > 0:
        M[:, :, T - m:] = np.conj(rot[:, :, ::-1])
    return M


def _hard_ft_surrogate(x, mu, noise, ctx):
    T = x.shape[-1]
    theta = 2.0 * np.pi * mu * noise["phase"]
    spec = np.fft.fft(x, axis=-1) * _phase_multiplier_np(theta, T)
    return np.fft.ifft(spec, axis=-1).real


def _relaxed_ft_surrogate(x, mu, noise, ctx):
    B, C, T = x.value.shape
    m = noise["phase"].shape[-1]
    theta = ad.mul(ad.scalar_mul(2.0 * np.pi, mu), ad.constant(noise["phase"]))
    rot = ad.make_complex(ad.vcos(theta), ad.vsin(theta))
    ones = ad.constant(np.ones((B, C, 1), dtype=np.complex128))
    parts = [ones, rot]
    if T - 1 - 2 * m == 1:  # even length: keep the Nyquist bin untouched
        parts.append(ad.constant(np.ones((B, C, 1), dtype=np.complex128)))
    parts.append(ad.conj(ad.flip(rot, axis=-1)))
    M = ad.concat(parts, axis=-1)
    return ad.real(ad.ifft(ad.mul(ad.fft(x), M)))


def _time_vector(T: int, sfreq: float) -> np.ndarray:
    return np.arange(T) / sfreq


def _hard_frequency_shift(x, mu, noise, ctx):
    if ctx.sfreq <= 2 * FREQ_SHIFT_MAX_HZ:
        raise ValueError("sampling rate too low for a safe frequency shift")
    B, C, T = x.shape
    df = FREQ_SHIFT_MAX_HZ * mu * noise["shift"]           # (B,)
    t = _time_vector(T, ctx.sfreq)
    phase = 2.0 * np.pi * df[:, None, None] * t[None, None, :]
    xa = analytic_signal(x)
    return (xa * np.exp(1j * phase)).real


def _relaxed_frequency_shift(x, mu, noise, ctx):
    if ctx.sfreq <= 2 * FREQ_SHIFT_MAX_HZ:
        raise ValueError("sampling rate too low for a safe frequency shift")
    B, C, T = x.value.shape
    df = ad.mul(ad.scalar_mul(FREQ_SHIFT_MAX_HZ, mu), ad.constant(noise["shift"]))
    t = _time_vector(T, ctx.sfreq)
    phase = ad.scalar_mul(2.0 * np.pi,
                          ad.mul(ad.reshape(df, (B, 1, 1)),
                                 ad.constant(t[None, None, :])))
    rot = ad.make_complex(ad.vcos(phase), ad.vsin(phase))
    return ad.real(ad.mul(analytic_signal(x), rot))


def _mask_window(tgrid, t_cut, half_width, steep):
    """1 - product of two opposing steep sigmoids; ~0 inside the window."""
    rise = ad.sigmoid(ad.scalar_mul(steep, ad.add(ad.sub(tgrid, t_cut), half_width)))
    fall = ad.sigmoid(ad.scalar_mul(-steep, ad.sub(ad.sub(tgrid, t_cut), half_width)))
    return ad.sub(1.0, ad.mul(rise, fall))


def _hard_time_mask(x, mu, noise, ctx):
    B, C, T = x.shape
    t = _time_vector(T, ctx.sfreq)
    t_total = T / ctx.sfreq
    dt = mu * 1.0
    if dt > t_total:
        raise ValueError("mask length exceeds the window")
    t_cut = dt / 2 + noise["cut"] * (t_total - dt)         # (B,)
    arg = t[None, :] - t_cut[:, None]
    rise = 0.5 * (1 + np.tanh(0.5 * MASK_STEEPNESS * (arg + dt / 2)))
    fall = 0.5 * (1 + np.tanh(-0.5 * MASK_STEEPNESS * (arg - dt / 2)))
    mask = 1.0 - rise * fall
    return x * mask[:, None, :]


def _relaxed_time_mask(x, mu, noise, ctx):
    B, C, T = x.value.shape
    t = _time_vector(T, ctx.sfreq)
    t_total = T / ctx.sfreq
    dt = mu                                                 # seconds, mu * 1 s
    half = ad.scalar_mul(0.5, dt)
    t_cut = ad.add(half, ad.mul(ad.constant(noise["cut"]),
                                ad.sub(t_total, dt)))       # (B,)
    tgrid = ad.constant(np.broadcast_to(t[None, None, :], (1, 1, T)).copy())
    mask = _mask_window(tgrid, ad.reshape(t_cut, (B, 1, 1)),
                        ad.reshape(half, (1, 1, 1)), MASK_STEEPNESS)
    return ad.mul(x, mask)


def _hard_gaussian_noise(x, mu, noise, ctx):
    return x + (NOISE_STD_AT_FULL_MAGNITUDE * mu) * noise["z"]


def _relaxed_gaussian_noise(x, mu, noise, ctx):
    sigma = ad.scalar_mul(NOISE_STD_AT_FULL_MAGNITUDE, mu)
    return ad.add(x, ad.mul(sigma, ad.constant(noise["z"])))


def _hard_channel_dropout(x, mu, noise, ctx):
    keep = noise["keep"] > mu          # keep with probability 1 - mu
    return x * keep[:, :, None]


def _relaxed_channel_dropout(x, mu, noise, ctx):
    B, C, T = x.value.shape
    keep_p = ad.sub(1.0, mu)
    b = relaxed_bernoulli_from_uniform(keep_p, noise["keep"],
                                       DEFAULT_BERNOULLI_TEMPERATURE)
    return ad.mul(x, ad.reshape(b, (B, C, 1)))


def _shuffle_permutation(selected: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Identity permutation except selected channels reordered by random keys."""
    B, C = selected.shape
    perm = np.tile(np.arange(C), (B, 1))
    for b in range(B):
        idx = np.flatnonzero(selected[b])
        if len(idx) > 1:
            perm[b, idx] = idx[np.argsort(order[b, idx], kind="stable")]
    return perm


def _hard_channel_shuffle(x, mu, noise, ctx):
    selected = noise["select"] > 1.0 - mu
    perm = _shuffle_permutation(selected, noise["order"])
    return np.take_along_axis(x, perm[:, :, None], axis=1)


def _relaxed_channel_shuffle(x, mu, noise, ctx):
    B, C, T = x.value.shape
    m = relaxed_bernoulli_from_uniform(mu, noise["select"],
                                       DEFAULT_BERNOULLI_TEMPERATURE)
    hard_sel = m.value > 0.5
    perm = _shuffle_permutation(hard_sel, noise["order"])
    # the permutation map is treated as constant in mu (straight-through on
    # the index operation); the continuous selection mask carries the
    # pathwise gradient back to mu
    x_perm = ad.take_rows(x, perm)
    m3 = ad.reshape(m, (B, C, 1))
    return ad.add(ad.mul(m3, x_perm), ad.mul(ad.sub(1.0, m3), x))


def _symmetry_index(montage: Montage, C: int) -> np.ndarray:
    if montage is None:
        raise ValueError("channel_symmetry requires a montage")
    if montage.n_channels != C:
        raise ValueError(
            f"montage has {montage.n_channels} channels, batch has {C}")
    idx = np.arange(C)
    for l, r in montage.symmetry_pairs:
        idx[l], idx[r] = r, l
    return idx


def _hard_channel_symmetry(x, mu, noise, ctx):
    idx = _symmetry_index(ctx.montage, x.shape[1])
    return x[:, idx, :]


def _relaxed_channel_symmetry(x, mu, noise, ctx):
    B, C, T = x.value.shape
    idx = _symmetry_index(ctx.montage, C)
    return ad.take_rows(x, np.tile(idx, (B, 1)))


_AXIS_INDEX = {"rotation_x": 0, "rotation_y": 1, "rotation_z": 2}


def _check_rotation_inputs(montage, n_channels: int, axis_name: str):
    if montage is None:
        raise ValueError(f"{axis_name} requires a montage")
    if montage.n_channels != n_channels:
        raise ValueError(
            f"montage has {montage.n_channels} channels, batch has {n_channels}")
    if n_channels < 2:
        raise ValueError("rotation needs at least two channels")


def _rotation_matrices(axis: int, angles: np.ndarray) -> np.ndarray:
    B = angles.shape[0]
    c, s = np.cos(angles), np.sin(angles)
    R = np.zeros((B, 3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R[:, axis, axis] = 1.0
    R[:, i, i] = c
    R[:, j, j] = c
    R[:, i, j] = -s
    R[:, j, i] = s
    return R


def _interp_weights_np(pos: np.ndarray, rotated: np.ndarray) -> np.ndarray:
    """Inverse-great-circle-distance rows over the 4 nearest rotated sensors."""
    B, C, _ = rotated.shape
    dots = np.clip(np.einsum("ik,bjk->bij", pos, rotated), -1.0, 1.0)
    d = np.arccos(dots)                                    # (B, C, C)
    k = min(4, C)
    nearest = np.argsort(d, axis=-1, kind="stable")[:, :, :k]
    mask = np.zeros_like(d)
    np.put_along_axis(mask, nearest, 1.0, axis=-1)
    w = mask / (d + 1e-12)
    W = w / w.sum(axis=-1, keepdims=True)
    hit = d.min(axis=-1) < 1e-9                            # exact pass-through
    if hit.any():
        bi, ci = np.nonzero(hit)
        W[bi, ci, :] = 0.0
        W[bi, ci, d[bi, ci].argmin(axis=-1)] = 1.0
    return W


def _make_hard_rotation(axis_name):
    axis = _AXIS_INDEX[axis_name]

    def hard(x, mu, noise, ctx):
        _check_rotation_inputs(ctx.montage, x.shape[1], axis_name)
        angles = ROTATION_MAX_ANGLE * mu * (2 * noise["angle"] - 1)
        R = _rotation_matrices(axis, angles)
        rotated = np.einsum("bij,cj->bci", R, ctx.montage.positions)
        W = _interp_weights_np(ctx.montage.positions, rotated)
        return np.einsum("bij,bjt->bit", W, x)

    return hard


def _make_relaxed_rotation(axis_name):
    axis = _AXIS_INDEX[axis_name]

    def relaxed(x, mu, noise, ctx):
        B, C, T = x.value.shape
        _check_rotation_inputs(ctx.montage, C, axis_name)
        pos = ctx.montage.positions
        u = ad.constant(2 * noise["angle"] - 1)             # (B,)
        psi = ad.mul(ad.scalar_mul(ROTATION_MAX_ANGLE, mu), u)
        c = ad.reshape(ad.vcos(psi), (B, 1))
        s = ad.reshape(ad.vsin(psi), (B, 1))
        i, j = [(1, 2), (2, 0), (0, 1)][axis]
        comp = [None, None, None]
        pa = ad.constant(np.tile(pos[:, axis], (B, 1)))     # (B, C)
        pi_ = ad.constant(pos[None, :, i])
        pj_ = ad.constant(pos[None, :, j])
        comp[axis] = pa
        comp[i] = ad.sub(ad.mul(c, pi_), ad.mul(s, pj_))
        comp[j] = ad.add(ad.mul(s, pi_), ad.mul(c, pj_))
        rotated = ad.concat([ad.reshape(cc, (B, C, 1)) for cc in comp], axis=-1)
        dots = ad.matmul(ad.constant(pos), ad.transpose_last2(rotated))
        d = ad.varccos(dots)                                # (B, C, C)
        dv = d.value
        k = min(4, C)
        nearest = np.argsort(dv, axis=-1, kind="stable")[:, :, :k]
        mask = np.zeros_like(dv)
        np.put_along_axis(mask, nearest, 1.0, axis=-1)
        w = ad.div(ad.constant(mask), ad.add(d, 1e-12))
        W = ad.div(w, ad.vsum(w, axis=-1, keepdims=True))
        hit = dv.min(axis=-1) < 1e-9
        if hit.any():
            keep = np.ones_like(dv)
            onehots = np.zeros_like(dv)
            bi, ci = np.nonzero(hit)
            keep[bi, ci, :] = 0.0
            onehots[bi, ci, dv[bi, ci].argmin(axis=-1)] = 1.0
            W = ad.add(ad.mul(W, ad.constant(keep)), ad.constant(onehots))
        return ad.matmul(W, x)

    return relaxed


# the ideal prototype's stop edges are pushed out by this allowance so the
# Hamming window's transition region stays outside the nominal band and the
# notch reaches full depth across it (1 s filters have ~3 Hz transitions,
# wider than a 2 Hz band)
BANDSTOP_EDGE_ALLOWANCE_HZ = 0.75


def _design_bandstop_fir(sfreq: float, lo: float, hi: float) -> np.ndarray:
    """Hamming-windowed sinc band-stop, one second long, odd length."""
    L = int(round(sfreq))
    if L % 2 == 0:
        L += 1
    mid = L // 2
    n = np.arange(L) - mid

    def lowpass(fc):
        h = 2 * fc / sfreq * np.sinc(2 * fc / sfreq * n)
        return h

    lo = max(lo - BANDSTOP_EDGE_ALLOWANCE_HZ, 1e-3)
    hi = min(hi + BANDSTOP_EDGE_ALLOWANCE_HZ, sfreq / 2 - 1e-3)
    bandpass = lowpass(hi) - lowpass(lo)
    window = np.hamming(L)
    bandpass *= window
    notch = -bandpass
    notch[mid] += 1.0
    return notch


def _hard_bandstop(x, mu, noise, ctx):
    if mu == 0.0:
        return np.array(x, copy=True)
    B, C, T = x.shape
    nyq = ctx.sfreq / 2
    width = BANDSTOP_WIDTH_AT_FULL_MAGNITUDE * mu
    out = np.empty_like(x)
    for b in range(B):
        f0 = noise["center"][b] * nyq
        lo = np.clip(f0 - width / 2, 1e-3, nyq - 1e-3)
        hi = np.clip(f0 + width / 2, 1e-3, nyq - 1e-3)
        h = _design_bandstop_fir(ctx.sfreq, lo, hi)
        for c in range(C):
            fwd = np.convolve(x[b, c], h, mode="same")
            out[b, c] = np.convolve(fwd[::-1], h, mode="same")[::-1]
    return out


_HARD = {
    "time_reverse": _hard_time_reverse,
    "sign_flip": _hard_sign_flip,
    "ft_surrogate": _hard_ft_surrogate,
    "frequency_shift": _hard_frequency_shift,
    "bandstop": _hard_bandstop,
    "time_mask": _hard_time_mask,
    "gaussian_noise": _hard_gaussian_noise,
    "channel_dropout": _hard_channel_dropout,
    "channel_shuffle": _hard_channel_shuffle,
    "channel_symmetry": _hard_channel_symmetry,
    "rotation_x": _make_hard_rotation("rotation_x"),
    "rotation_y": _make_hard_rotation("rotation_y"),
    "rotation_z": _make_hard_rotation("rotation_z"),
}

_RELAXED = {
    "time_reverse": _relaxed_time_reverse,
    "sign_flip": _relaxed_sign_flip,
    "ft_surrogate": _relaxed_ft_surrogate,
    "frequency_shift": _relaxed_frequency_shift,
    "time_mask": _relaxed_time_mask,
    "gaussian_noise": _relaxed_gaussian_noise,
    "channel_dropout": _relaxed_channel_dropout,
    "channel_shuffle": _relaxed_channel_shuffle,
    "channel_symmetry": _relaxed_channel_symmetry,
    "rotation_x": _make_relaxed_rotation("rotation_x"),
    "rotation_y": _make_relaxed_rotation("rotation_y"),
    "rotation_z": _make_relaxed_rotation("rotation_z"),
}


# ---------------------------------------------------------------------------
# public application entry points
# ---------------------------------------------------------------------------

def transform_hard(kind: str, x: np.ndarray, mu, noise: dict,
                   sfreq: float, montage: Montage | None = None) -> np.ndarray:
    op_call_counter[kind] += 1
    return _HARD[kind](x, 0.0 if mu is None else float(mu), noise,
                       _ctx(sfreq, montage))


def transform_relaxed(kind: str, x: Variable, mu, noise: dict, sfreq: float,
                      montage: Montage | None = None) -> Variable:
    if kind in NON_DIFFERENTIABLE:
        raise ValueError(f"{kind} has no relaxed form")
    op_call_counter[kind] += 1
    if kind in MAGNITUDE_FREE:
        mu_var = None
    else:
        mu_var = mu if isinstance(mu, Variable) else ad.constant(float(mu))
    return _RELAXED[kind](x, mu_var, noise, _ctx(sfreq, montage))


def apply_operation(batch: SignalBatch, spec: AugOpSpec, rng: RandomStream,
                    montage: Montage | None = None) -> SignalBatch:
    """Hard, gated application of one operation to a whole batch."""
    B, C, T = batch.data.shape
    noise = draw_noise(spec.kind, rng, B, C, T)
    transformed = transform_hard(spec.kind, batch.data, spec.mu, noise,
                                 batch.sfreq, montage)
    out = gate(transformed, batch.data, spec.p, noise["gate"])
    return batch.with_data(out)


def apply_operation_relaxed(x: Variable, kind: str, p, mu, rng: RandomStream,
                            sfreq: float, montage: Montage | None = None,
                            gate_temperature: float = DEFAULT_BERNOULLI_TEMPERATURE,
                            noise: dict | None = None) -> Variable:
    """Relaxed, gated application; returns a tape-connected Variable."""
    B, C, T = x.value.shape
    if noise is None:
        noise = draw_noise(kind, rng, B, C, T)
    transformed = transform_relaxed(kind, x, mu, noise, sfreq, montage)
    return gate(transformed, x, p, noise["gate"], relaxed=True,
                temperature=gate_temperature)
