import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trackplan import trackdiff as td
from trackplan.nn import layers as L
from trackplan.trackdiff import NoiseSchedule, TrackDenoiser

from conftest import TINY_TD, jitter

SCHED = NoiseSchedule.cosine(100)


def test_schedule_invariants():
    ab = SCHED.alpha_bar
    assert ab[0] >= 0.999 and (np.diff(ab) < 0).all() and ab[-1] > 0
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.99, 0.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.9999, 0.9999]))
    assert np.array_equal(NoiseSchedule.from_dict(SCHED.to_dict()).alpha_bar, ab)


def test_config_validation():
    with pytest.raises(ValueError):
        td.DenoiserConfig(hidden_size=10, n_heads=4)


def test_zero_init_tensors():
    P = TrackDenoiser(td.DenoiserConfig()).params
    for k, v in P.items():
        if k.endswith(".adaln.w") or k.endswith(".adaln.b") or k.startswith("final.out"):
            assert not v.any(), k


def test_encode_raster(tiny_episodes):
    m = TrackDenoiser(TINY_TD, params=jitter(TrackDenoiser(TINY_TD).params))
    assert not m.encode_raster(np.zeros((16, 16))).any()
    r = tiny_episodes[0].initial_raster
    z = m.encode_raster(r)
    assert z.shape == (16,)
    assert np.array_equal(z, m.encode_raster(r.copy()))
    assert not np.array_equal(m.encode_raster(r, "goal"), z)
    with pytest.raises(td.ShapeMismatch):
        m.encode_raster(np.zeros((32, 32)))


def test_forward_noise_examples():
    g = np.random.default_rng(0)
    x0 = g.uniform(-1, 1, (5, 4, 2))
    eps = g.normal(size=x0.shape)
    s = NoiseSchedule(np.array([0.9999, 0.5, 0.1]))
    assert np.abs(td.forward_noise(x0, 0, eps, s) - x0).max() < 0.02 * np.abs(eps).max() + 1e-4
    assert np.array_equal(td.forward_noise(x0, 1, np.zeros_like(x0), s), np.sqrt(0.5) * x0)
    with pytest.raises(td.ShapeMismatch):
        td.forward_noise(x0, 0, eps[:2], s)
    with pytest.raises(ValueError):
        td.forward_noise(x0, 3, eps, s)


def test_forward_noise_variance():
    g = np.random.default_rng(1)
    x0 = np.full((10, 4, 2), 0.3)
    k = 40
    out = np.stack([td.forward_noise(x0, k, g.normal(size=x0.shape), SCHED) for _ in range(10_000)])
    var = out.var(axis=0)
    assert np.abs(var / (1 - SCHED.alpha_bar[k]) - 1).max() < 0.05


def test_predict_noise_zero_at_init_and_shapes():
    m = TrackDenoiser(td.DenoiserConfig(H=8))
    g = np.random.default_rng(2)
    z = g.normal(size=128)
    out = m.predict_noise(g.normal(size=(16, 8, 2)), z, z, 5, g.uniform(0, 256, (16, 2)))
    assert out.shape == (16, 8, 2) and not out.any()
    with pytest.raises(td.ShapeMismatch):
        m.predict_noise(g.normal(size=(16, 7, 2)), z, z, 5, g.uniform(0, 256, (16, 2)))
    with pytest.raises(td.ShapeMismatch):
        m.predict_noise(g.normal(size=(16, 8, 2)), z, z, 5, g.uniform(0, 256, (15, 2)))


def test_permutation_equivariance():
    m = TrackDenoiser(TINY_TD, params=jitter(TrackDenoiser(TINY_TD).params))
    g = np.random.default_rng(3)
    x = g.normal(size=(9, 4, 2))
    p0 = g.uniform(0, 256, (9, 2))
    z0, zg = g.normal(size=16), g.normal(size=16)
    perm = g.permutation(9)
    a = m.predict_noise(x, z0, zg, 7, p0)
    b = m.predict_noise(x[perm], z0, zg, 7, p0[perm])
    assert np.allclose(a[perm], b, atol=1e-12)


def test_normalization_roundtrip():
    g = np.random.default_rng(4)
    tr = g.uniform(0, 256, (20, 6, 2))
    back = td.from_normalized(td.to_normalized(tr, tr[:, 0]), tr[:, 0])
    assert np.abs(back - tr).max() < 1e-12
    assert not td.to_normalized(tr, tr[:, 0])[:, 0].any()


def test_loss_at_init_is_unit(tiny_episodes):
    m = TrackDenoiser(TINY_TD)
    vals = [m.loss(tiny_episodes, SCHED, seed) for seed in range(40)]
    assert abs(np.mean(vals) - 1.0) < 0.05
    assert min(vals) >= 0


def test_loss_duplicate_batch_invariant(tiny_episodes):
    m = TrackDenoiser(TINY_TD, params=jitter(TrackDenoiser(TINY_TD).params))
    b = td.make_batch(TINY_TD, tiny_episodes, SCHED, 0)
    doubled = {k: np.concatenate([v, v]) for k, v in b.items()}
    P = L.as_params(m.params)
    assert td._loss(P, TINY_TD, b).data == pytest.approx(td._loss(P, TINY_TD, doubled).data, rel=1e-12)


def test_make_batch_rejects_wrong_horizon(tiny_episodes):
    with pytest.raises(td.ShapeMismatch):
        td.make_batch(td.DenoiserConfig(H=5), tiny_episodes, SCHED, 0)
    with pytest.raises(ValueError):
        td.make_batch(TINY_TD, [], SCHED, 0)


def test_lr_zero_keeps_params(tiny_episodes):
    m = TrackDenoiser(TINY_TD)
    m2, _, _ = td.train_step(m, tiny_episodes, SCHED, None, 0, lr=0.0)
    assert all(np.array_equal(m.params[k], m2.params[k]) for k in m.params)


def test_training_deterministic_and_overfits(tiny_episodes):
    two = tiny_episodes[:2]
    m = TrackDenoiser(TINY_TD, seed=1)
    runs = []
    for _ in range(2):
        out, _, losses = td.train(m, two, SCHED, steps=200, batch_size=2, lr=3e-3, seed=5)
        runs.append((out, losses))
    (a, la), (b, lb) = runs
    assert la == lb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.mean(la[-20:]) <= 0.5 * np.mean(la[:20])


def test_resume_matches_single_run(tiny_episodes):
    m = TrackDenoiser(TINY_TD)
    full, _, _ = td.train(m, tiny_episodes, SCHED, steps=6, batch_size=2, lr=1e-3, seed=2)
    half, st, _ = td.train(m, tiny_episodes, SCHED, steps=3, batch_size=2, lr=1e-3, seed=2)
    rest, _, _ = td.train(half, tiny_episodes, SCHED, steps=3, batch_size=2, lr=1e-3, seed=2,
                          opt_state=st, start_step=3)
    assert all(np.array_equal(full.params[k], rest.params[k]) for k in full.params)


def test_nonfinite_loss_aborts(tiny_episodes):
    m = TrackDenoiser(TINY_TD)
    bad = dict(m.params)
    bad["tok.w"] = bad["tok.w"] * np.nan
    with pytest.raises(td.NonFiniteLoss):
        td.train(m.with_params(bad), tiny_episodes, SCHED, steps=1, batch_size=2)


def test_sampling_shape_determinism_and_prior(tiny_episodes):
    ep = tiny_episodes[0]
    m = TrackDenoiser(TINY_TD)
    a = m.predict_episode(ep, SCHED, 10, seed=3)
    b = m.predict_episode(ep, SCHED, 10, seed=3)
    assert a.shape == ep.gt_tracks.shape and np.array_equal(a, b)
    assert np.array_equal(a[:, 0], ep.p0)
    assert not np.array_equal(a, m.predict_episode(ep, SCHED, 10, seed=4))


def test_untrained_sampler_is_prior_map():
    # zero noise prediction makes each reverse step an affine map of x plus
    # scheduled noise; replay that map by hand and compare
    from trackplan.seeding import child_seed

    m = TrackDenoiser(TINY_TD)
    g = np.random.default_rng(5)
    p0 = g.uniform(50, 200, (7, 2))
    z = np.zeros(16)
    out = m.sample_tracks(z, z, p0, SCHED, 20, seed=9)
    K = SCHED.K_steps
    ks = np.unique(np.round(np.linspace(0, K - 1, 20)).astype(int))[::-1]
    r = np.random.default_rng(child_seed(9, "sample"))
    x = r.normal(size=(7, 4, 2))
    ab = SCHED.alpha_bar
    for i, k in enumerate(ks):
        prev = ab[ks[i + 1]] if i + 1 < len(ks) else 1.0
        x0 = np.clip(x / np.sqrt(ab[k]), -td.X0_CLIP, td.X0_CLIP)
        alpha = ab[k] / prev
        mean = np.sqrt(prev) * (1 - alpha) / (1 - ab[k]) * x0 + np.sqrt(alpha) * (1 - prev) / (1 - ab[k]) * x
        if i + 1 < len(ks):
            x = mean + np.sqrt((1 - alpha) * (1 - prev) / (1 - ab[k])) * r.normal(size=x.shape)
        else:
            x = mean
    expect = td.from_normalized(x, p0)
    expect[:, 0] = p0
    assert np.allclose(out, expect, rtol=0, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 99), st.integers(0, 10**6))
def test_forward_noise_zero_eps_property(k, seed):
    x0 = np.random.default_rng(seed).uniform(-1, 1, (3, 4, 2))
    assert np.array_equal(td.forward_noise(x0, k, np.zeros_like(x0), SCHED), np.sqrt(SCHED.alpha_bar[k]) * x0)
