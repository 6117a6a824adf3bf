import numpy as np
import pytest
from scipy import stats

from augsearch import augment as ag
from augsearch import autodiff as ad
from augsearch.augment import AugOpSpec, Montage, SignalBatch
from augsearch.rng import RandomStream

SFREQ = 128.0


@pytest.fixture
def montage():
    return ag.default_montage()


def make_batch(B=3, C=6, T=256, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    return SignalBatch(rng.standard_normal((B, C, T)), SFREQ, labels)


def psd(x):
    return np.abs(np.fft.rfft(x, axis=-1)) ** 2


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def test_signal_batch_validation():
    with pytest.raises(ValueError):
        SignalBatch(np.zeros((2, 3)), SFREQ)
    with pytest.raises(ValueError):
        SignalBatch(np.full((1, 1, 4), np.nan), SFREQ)
    with pytest.raises(ValueError):
        SignalBatch(np.zeros((2, 1, 4)), SFREQ, labels=[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        AugOpSpec("time_warp")
    with pytest.raises(ValueError):
        AugOpSpec("gaussian_noise", p=1.5)
    with pytest.raises(ValueError):
        AugOpSpec("bandstop", differentiable=True)
    s = AugOpSpec("time_reverse", p=0.5, mu=0.7)
    assert s.mu is None  # magnitude-free


def test_montage_roundtrip(tmp_path, montage):
    path = tmp_path / "montage.csv"
    ag.montage_to_csv(montage, path)
    loaded = ag.montage_from_csv(path)
    assert loaded.channel_names == montage.channel_names
    assert np.allclose(loaded.positions, montage.positions)
    assert loaded.symmetry_pairs == montage.symmetry_pairs


def test_montage_rejects_coincident_sensors():
    with pytest.raises(ValueError):
        Montage(["a", "b"], np.array([[0, 0, 1.0], [0, 0, 1.0]]))


# ---------------------------------------------------------------------------
# gate
# ---------------------------------------------------------------------------

def test_gate_limits():
    batch = make_batch()
    rng = RandomStream(0)
    out0 = ag.apply_operation(batch, AugOpSpec("sign_flip", p=0.0), rng)
    assert np.array_equal(out0.data, batch.data)
    out1 = ag.apply_operation(batch, AugOpSpec("sign_flip", p=1.0), rng)
    assert np.array_equal(out1.data, -batch.data)


def test_gate_relaxed_gradient_wrt_p():
    batch = make_batch(B=4)
    u = RandomStream(3).uniform(size=4)
    x0 = batch.data

    def f(p):
        flipped = ad.neg(ad.constant(x0))
        out = ag.gate(flipped, ad.constant(x0), p, u, relaxed=True,
                      temperature=0.1)
        return ad.vmean(ad.mul(out, ad.constant(x0)))

    assert ad.grad_check(f, np.array(0.45), h=1e-6) < 1e-6


def test_gate_hard_and_relaxed_agree_at_limits():
    batch = make_batch(B=8)
    u = RandomStream(5).uniform(size=8)
    flipped = -batch.data
    for p in (0.0, 1.0):
        hard = ag.gate(flipped, batch.data, p, u)
        relaxed = ag.gate(ad.constant(flipped), ad.constant(batch.data), p, u,
                          relaxed=True, temperature=0.01)
        assert np.allclose(hard, relaxed.value, atol=1e-12)


def test_per_example_gate_independence():
    # two identical examples, p=0.5: gate coins are independent
    n = 10_000
    rng = RandomStream(17)
    draws = np.array([ag.hard_gate_mask(0.5, rng.uniform(size=2))
                      for _ in range(n)], dtype=float)
    corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    assert abs(corr) < 0.05


# ---------------------------------------------------------------------------
# time_reverse / sign_flip
# ---------------------------------------------------------------------------

def test_time_reverse_values():
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    out = ag.transform_hard("time_reverse", x, None, {}, SFREQ)
    assert np.array_equal(out, [[[4.0, 3.0, 2.0, 1.0]]])


def test_time_reverse_involution_and_spectrum():
    batch = make_batch()
    spec = AugOpSpec("time_reverse", p=1.0)
    once = ag.apply_operation(batch, spec, RandomStream(1))
    twice = ag.apply_operation(once, spec, RandomStream(2))
    assert np.allclose(twice.data, batch.data, atol=0)
    assert np.max(np.abs(np.abs(np.fft.fft(once.data)) -
                         np.abs(np.fft.fft(batch.data)))) < 1e-10


def test_sign_flip_values_involution_psd():
    x = np.array([[[0.5, -1.0]]])
    out = ag.transform_hard("sign_flip", x, None, {}, SFREQ)
    assert np.array_equal(out, [[[-0.5, 1.0]]])
    batch = make_batch()
    spec = AugOpSpec("sign_flip", p=1.0)
    once = ag.apply_operation(batch, spec, RandomStream(1))
    twice = ag.apply_operation(once, spec, RandomStream(2))
    assert np.array_equal(twice.data, batch.data)
    assert np.max(np.abs(psd(once.data) - psd(batch.data))) < 1e-10


# ---------------------------------------------------------------------------
# analytic signal
# ---------------------------------------------------------------------------

def test_analytic_signal_pure_tone():
    t = np.arange(256) / SFREQ
    x = np.cos(2 * np.pi * 8.0 * t)  # bin-aligned: 8 Hz * 2 s = bin 16
    xa = ag.analytic_signal(x)
    assert np.max(np.abs(np.abs(xa) - 1.0)) < 1e-6


def test_analytic_signal_real_part():
    x = np.random.default_rng(0).standard_normal(101)
    xa = ag.analytic_signal(x)
    assert np.max(np.abs(xa.real - x)) < 1e-10


def test_analytic_signal_dc_has_no_imaginary_part():
    xa = ag.analytic_signal(np.ones(64))
    assert np.max(np.abs(xa.imag)) < 1e-12


# ---------------------------------------------------------------------------
# frequency shift
# ---------------------------------------------------------------------------

def test_frequency_shift_zero_magnitude_identity():
    batch = make_batch(B=2, C=2, T=512)
    noise = ag.draw_noise("frequency_shift", RandomStream(2), 2, 2, 512)
    out = ag.transform_hard("frequency_shift", batch.data, 0.0, noise, SFREQ)
    assert np.max(np.abs(out - batch.data)) < 1e-10


def test_frequency_shift_moves_tone_peak():
    T = 1280
    t = np.arange(T) / SFREQ
    tone = np.cos(2 * np.pi * 10.0 * t)[None, None, :]
    noise = {"shift": np.array([0.4]), "gate": np.ones(1)}  # 5*1*0.4 = 2 Hz
    out = ag.transform_hard("frequency_shift", tone, 1.0, noise, SFREQ)
    freqs = np.fft.rfftfreq(T, 1 / SFREQ)
    peak = freqs[np.argmax(np.abs(np.fft.rfft(out[0, 0])))]
    assert peak == 12.0


def test_frequency_shift_range_uniform():
    # realized shifts at mu=1 cover [0, 5) Hz uniformly
    n = 10_000
    T = 256
    rng = RandomStream(11)
    u = rng.uniform(size=n)
    t = np.arange(T) / SFREQ
    x = np.cos(2 * np.pi * 20.0 * t)[None, None, :].repeat(n, axis=0)
    noise = {"shift": u, "gate": np.ones(n)}
    out = ag.transform_hard("frequency_shift", x, 1.0, noise, SFREQ)
    # measure each realized shift from the phase slope of the cross signal
    za = ag.analytic_signal(out[:, 0, :]) * np.conj(ag.analytic_signal(x[:, 0, :]))
    core = slice(T // 4, 3 * T // 4)  # avoid edge effects
    dphi = np.unwrap(np.angle(za[:, core]), axis=-1)
    slopes = (dphi[:, -1] - dphi[:, 0]) / (dphi.shape[1] - 1)
    df_est = slopes * SFREQ / (2 * np.pi)
    assert np.max(np.abs(df_est - 5.0 * u)) < 0.05
    _, pval = stats.kstest(df_est, stats.uniform(loc=0, scale=5).cdf)
    assert pval > 0.01


def test_frequency_shift_nyquist_guard():
    batch = SignalBatch(np.zeros((1, 1, 16)), sfreq=8.0)
    noise = ag.draw_noise("frequency_shift", RandomStream(0), 1, 1, 16)
    with pytest.raises(ValueError):
        ag.transform_hard("frequency_shift", batch.data, 0.5, noise, 8.0)


# ---------------------------------------------------------------------------
# FT surrogate
# ---------------------------------------------------------------------------

def test_ft_surrogate_zero_magnitude_identity():
    batch = make_batch(T=100)
    noise = ag.draw_noise("ft_surrogate", RandomStream(4), 3, 6, 100)
    out = ag.transform_hard("ft_surrogate", batch.data, 0.0, noise, SFREQ)
    assert np.max(np.abs(out - batch.data)) < 1e-10


def test_ft_surrogate_preserves_amplitude_spectrum():
    batch = make_batch(T=250)
    out = ag.apply_operation(batch, AugOpSpec("ft_surrogate", p=1.0, mu=0.8),
                             RandomStream(5))
    assert np.max(np.abs(np.abs(np.fft.fft(out.data)) -
                         np.abs(np.fft.fft(batch.data)))) < 1e-8
    assert np.isrealobj(out.data)


def test_ft_surrogate_phase_increments_uniform():
    T = 20_002  # ~10k rotatable bins
    x = np.random.default_rng(3).standard_normal((1, 1, T))
    noise = ag.draw_noise("ft_surrogate", RandomStream(6), 1, 1, T)
    out = ag.transform_hard("ft_surrogate", x, 1.0, noise, SFREQ)
    m = (T - 1) // 2
    dphi = np.mod(np.angle(np.fft.fft(out[0, 0])[1:m + 1]) -
                  np.angle(np.fft.fft(x[0, 0])[1:m + 1]), 2 * np.pi)
    _, pval = stats.kstest(dphi, stats.uniform(loc=0, scale=2 * np.pi).cdf)
    assert pval > 0.01


# ---------------------------------------------------------------------------
# bandstop
# ---------------------------------------------------------------------------

def test_bandstop_zero_magnitude_is_identity():
    batch = make_batch()
    noise = ag.draw_noise("bandstop", RandomStream(7), 3, 6, 256)
    out = ag.transform_hard("bandstop", batch.data, 0.0, noise, SFREQ)
    assert np.array_equal(out, batch.data)


def test_bandstop_attenuates_band_on_white_noise():
    T = 4096
    x = np.random.default_rng(1).standard_normal((1, 1, T))
    noise = {"center": np.array([11.0 / (SFREQ / 2)]), "gate": np.ones(1)}
    out = ag.transform_hard("bandstop", x, 1.0, noise, SFREQ)
    f = np.fft.rfftfreq(T, 1 / SFREQ)
    p = np.abs(np.fft.rfft(out[0, 0])) ** 2
    inband = (f >= 10) & (f <= 12)
    flank = ((f >= 8) & (f < 10)) | ((f > 12) & (f <= 14))
    contrast_db = 10 * np.log10(p[inband].mean() / p[flank].mean())
    assert contrast_db <= -20.0


def test_bandstop_shared_across_channels():
    batch = make_batch(B=1, C=3)
    data = np.tile(batch.data[:, :1, :], (1, 3, 1))
    noise = ag.draw_noise("bandstop", RandomStream(8), 1, 3, 256)
    out = ag.transform_hard("bandstop", data, 0.7, noise, SFREQ)
    assert np.allclose(out[0, 0], out[0, 1]) and np.allclose(out[0, 0], out[0, 2])


def test_bandstop_has_no_relaxed_form():
    with pytest.raises(ValueError):
        ag.transform_relaxed("bandstop", ad.constant(np.zeros((1, 1, 16))),
                             0.5, {}, SFREQ)


# ---------------------------------------------------------------------------
# time mask
# ---------------------------------------------------------------------------

def test_time_mask_span_at_full_magnitude():
    T = int(SFREQ * 4)
    x = np.ones((1, 1, T))
    noise = {"cut": np.array([0.5]), "gate": np.ones(1)}
    out = ag.transform_hard("time_mask", x, 1.0, noise, SFREQ)
    masked = np.sum(out[0, 0] < 0.5)
    assert abs(masked - int(SFREQ)) <= 1  # one second of samples


def test_time_mask_profile():
    T = int(SFREQ * 8)
    x = np.ones((1, 1, T))
    noise = {"cut": np.array([0.5]), "gate": np.ones(1)}
    mu = 0.5
    out = ag.transform_hard("time_mask", x, mu, noise, SFREQ)
    dt = mu * 1.0
    t_total = T / SFREQ
    t_cut = dt / 2 + 0.5 * (t_total - dt)
    i_cut = int(round(t_cut * SFREQ))
    assert abs(out[0, 0, i_cut]) < 1e-3
    i_far = int(round((t_cut + 3 * dt) * SFREQ))
    assert abs(out[0, 0, i_far] - 1.0) < 1e-6


def test_time_mask_shared_across_channels():
    batch = make_batch(B=2, C=2, T=int(SFREQ * 2))
    data = np.tile(batch.data[:, :1, :], (1, 2, 1))
    noise = ag.draw_noise("time_mask", RandomStream(9), 2, 2, data.shape[-1])
    out = ag.transform_hard("time_mask", data, 0.8, noise, SFREQ)
    assert np.array_equal(out[:, 0, :], out[:, 1, :])


# ---------------------------------------------------------------------------
# gaussian noise
# ---------------------------------------------------------------------------

def test_gaussian_noise_zero_magnitude_identity():
    batch = make_batch()
    noise = ag.draw_noise("gaussian_noise", RandomStream(10), 3, 6, 256)
    out = ag.transform_hard("gaussian_noise", batch.data, 0.0, noise, SFREQ)
    assert np.array_equal(out, batch.data)


def test_gaussian_noise_std_at_full_magnitude():
    n_total = 1_000_000
    x = np.zeros((16, 1, n_total // 16))
    noise = ag.draw_noise("gaussian_noise", RandomStream(11), 16, 1,
                          n_total // 16)
    out = ag.transform_hard("gaussian_noise", x, 1.0, noise, SFREQ)
    sd = out.std()
    se = 0.2 / np.sqrt(2 * n_total)  # SE of a std estimate
    assert abs(sd - 0.2) < 3 * se


def test_gaussian_noise_pathwise_gradient_is_scaled_noise():
    x0 = np.zeros((2, 2, 8))
    noise = ag.draw_noise("gaussian_noise", RandomStream(12), 2, 2, 8)
    with ad.Tape() as t:
        mu = t.leaf(np.array(0.7))
        out = ag.transform_relaxed("gaussian_noise", ad.constant(x0), mu,
                                   noise, SFREQ)
        y = ad.vsum(out)
        g = t.backward(y).wrt(mu)
    assert abs(g - 0.2 * noise["z"].sum()) < 1e-10


# ---------------------------------------------------------------------------
# channel dropout / shuffle / symmetry
# ---------------------------------------------------------------------------

def test_channel_dropout_limits():
    batch = make_batch(B=2, C=4)
    noise = ag.draw_noise("channel_dropout", RandomStream(13), 2, 4, 256)
    out0 = ag.transform_hard("channel_dropout", batch.data, 0.0, noise, SFREQ)
    assert np.array_equal(out0, batch.data)
    out1 = ag.transform_hard("channel_dropout", batch.data, 1.0, noise, SFREQ)
    assert np.max(np.abs(out1)) == 0.0
    # relaxed forms approach the same limits as temperature -> 0
    r0 = ag.transform_relaxed("channel_dropout", ad.constant(batch.data),
                              0.0, noise, SFREQ)
    assert np.max(np.abs(r0.value - batch.data)) < 1e-12


def test_channel_dropout_fraction():
    n = 10_000
    mu = 0.3
    noise = ag.draw_noise("channel_dropout", RandomStream(14), n, 1, 4)
    out = ag.transform_hard("channel_dropout", np.ones((n, 1, 4)), mu, noise,
                            SFREQ)
    frac = np.mean(out[:, 0, 0] == 0.0)
    se = np.sqrt(mu * (1 - mu) / n)
    assert abs(frac - mu) < 3 * se


def test_channel_shuffle_identity_at_zero():
    batch = make_batch()
    noise = ag.draw_noise("channel_shuffle", RandomStream(15), 3, 6, 256)
    out = ag.transform_hard("channel_shuffle", batch.data, 0.0, noise, SFREQ)
    assert np.array_equal(out, batch.data)


def test_channel_shuffle_preserves_multiset():
    batch = make_batch(B=4, C=5)
    noise = ag.draw_noise("channel_shuffle", RandomStream(16), 4, 5, 256)
    out = ag.transform_hard("channel_shuffle", batch.data, 0.8, noise, SFREQ)
    for b in range(4):
        got = {out[b, c].tobytes() for c in range(5)}
        want = {batch.data[b, c].tobytes() for c in range(5)}
        assert got == want


def test_channel_shuffle_uniform_permutations():
    n = 60_000
    noise = ag.draw_noise("channel_shuffle", RandomStream(18), n, 3, 2)
    x = np.tile(np.arange(3.0)[None, :, None], (n, 1, 2))
    out = ag.transform_hard("channel_shuffle", x, 1.0, noise, SFREQ)
    codes = (out[:, 0, 0] * 9 + out[:, 1, 0] * 3 + out[:, 2, 0]).astype(int)
    _, counts = np.unique(codes, return_counts=True)
    assert len(counts) == 6
    se = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * se)


def test_channel_symmetry(montage):
    batch = make_batch(B=2)
    out = ag.apply_operation(batch, AugOpSpec("channel_symmetry", p=1.0),
                             RandomStream(19), montage)
    # pairs (C3,C4), (F3,F4), (O1,O2) exchange rows
    assert np.array_equal(out.data[:, 0], batch.data[:, 1])
    assert np.array_equal(out.data[:, 1], batch.data[:, 0])
    assert np.array_equal(out.data[:, 2], batch.data[:, 3])
    twice = ag.apply_operation(out, AugOpSpec("channel_symmetry", p=1.0),
                               RandomStream(20), montage)
    assert np.array_equal(twice.data, batch.data)


def test_channel_symmetry_midline_unchanged():
    m = Montage(["C3", "C4", "Cz"],
                np.array([[-0.7, 0, 0.7], [0.7, 0, 0.7], [0, 0, 1.0]]),
                [(0, 1)])
    batch = make_batch(B=1, C=3)
    out = ag.apply_operation(batch, AugOpSpec("channel_symmetry", p=1.0),
                             RandomStream(21), m)
    assert np.array_equal(out.data[:, 2], batch.data[:, 2])


def test_channel_symmetry_montage_mismatch(montage):
    batch = make_batch(B=1, C=3)
    with pytest.raises(ValueError):
        ag.apply_operation(batch, AugOpSpec("channel_symmetry", p=1.0),
                           RandomStream(22), montage)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def test_rotation_zero_angle_identity(montage):
    batch = make_batch(B=2)
    noise = {"angle": np.full(2, 0.5), "gate": np.ones(2)}  # 2u-1 = 0
    for kind in ("rotation_x", "rotation_y", "rotation_z"):
        out = ag.transform_hard(kind, batch.data, 1.0, noise, SFREQ, montage)
        assert np.max(np.abs(out - batch.data)) < 1e-10


def test_rotation_angle_bound(montage):
    u = RandomStream(23).uniform(size=10_000)
    angles = ag.ROTATION_MAX_ANGLE * 1.0 * (2 * u - 1)
    assert np.all(np.abs(angles) <= np.pi / 6)


def test_rotation_weights_partition_of_unity(montage):
    angles = np.array([0.3, -0.2, 0.05])
    R = ag._rotation_matrices(2, angles)
    rotated = np.einsum("bij,cj->bci", R, montage.positions)
    W = ag._interp_weights_np(montage.positions, rotated)
    assert np.max(np.abs(W.sum(axis=-1) - 1.0)) < 1e-10


def test_rotation_montage_required():
    batch = make_batch(B=1, C=2)
    noise = ag.draw_noise("rotation_x", RandomStream(24), 1, 2, 256)
    with pytest.raises(ValueError):
        ag.transform_hard("rotation_x", batch.data, 0.5, noise, SFREQ, None)


# ---------------------------------------------------------------------------
# cross-cutting invariants
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ag.OP_KINDS)
def test_shape_and_sfreq_preserved(kind, montage):
    batch = make_batch(B=2, C=6, T=256, labels=[0, 1])
    spec = AugOpSpec(kind, p=1.0, mu=None if kind in ag.MAGNITUDE_FREE else 0.5)
    out = ag.apply_operation(batch, spec, RandomStream(25), montage)
    assert out.data.shape == batch.data.shape
    assert out.sfreq == batch.sfreq
    assert np.array_equal(out.labels, batch.labels)


@pytest.mark.parametrize("kind", [k for k in ag.OP_KINDS
                                  if k not in ag.NON_DIFFERENTIABLE])
def test_relaxed_gradients_match_finite_differences(kind, montage):
    """Both p and mu gradients through every relaxed op, frozen noise."""
    x0 = np.random.default_rng(31).standard_normal((2, 6, 256))
    noise = ag.draw_noise(kind, RandomStream(26).child(kind), 2, 6, 256)
    probe = ad.constant(np.random.default_rng(32).standard_normal((2, 6, 256)))

    if kind not in ag.MAGNITUDE_FREE:
        def fmu(mu):
            y = ag.transform_relaxed(kind, ad.constant(x0), mu, noise, SFREQ,
                                     montage)
            return ad.vmean(ad.mul(y, probe))

        assert ad.grad_check(fmu, np.array(0.5), h=1e-6) < 1e-4

    def fp(p):
        y = ag.apply_operation_relaxed(ad.constant(x0), kind, p,
                                       ad.constant(0.5), RandomStream(27),
                                       SFREQ, montage, noise=noise)
        return ad.vmean(ad.mul(y, probe))

    assert ad.grad_check(fp, np.array(0.4), h=1e-6) < 1e-4


def test_relaxed_ops_accept_variable_inputs(montage):
    # stage chaining feeds one op's output Variable into the next
    x0 = np.random.default_rng(33).standard_normal((2, 6, 256))
    noise1 = ag.draw_noise("frequency_shift", RandomStream(28), 2, 6, 256)
    noise2 = ag.draw_noise("time_mask", RandomStream(29), 2, 6, 256)

    def f(mu):
        y1 = ag.transform_relaxed("frequency_shift", ad.constant(x0), mu,
                                  noise1, SFREQ, montage)
        y2 = ag.transform_relaxed("time_mask", y1, ad.constant(0.5), noise2,
                                  SFREQ, montage)
        return ad.vmean(ad.mul(y2, y2))

    assert ad.grad_check(f, np.array(0.5), h=1e-6) < 1e-4
