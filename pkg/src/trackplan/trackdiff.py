"""Conditional diffusion model over future point tracks.

One transformer token per tracked point. A token's input is the point's
clean first-frame location concatenated with its noisy H-step trajectory.
The condition (initial-raster embedding + goal-raster embedding +
diffusion-step embedding) enters every block through adaLN-Zero.

Tracks are diffused as displacements from the first-frame location,
``(tracks - p0) / (image_size / 4)``, so a static point is exactly zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import autograd as ag
from .nn import layers as L
from .nn.layers import NonFiniteLoss, ShapeMismatch
from .seeding import child_seed

__all__ = [
    "DenoiserConfig", "NoiseSchedule", "TrackDenoiser", "ShapeMismatch", "NonFiniteLoss",
    "forward_noise", "train_step", "to_normalized", "from_normalized",
]


@dataclass(frozen=True)
class DenoiserConfig:
    # sized for CPU training; the full-size model is 24 blocks, hidden 1024, 16 heads
    n_blocks: int = 4
    hidden_size: int = 128
    n_heads: int = 4
    embed_dim: int = 128
    p_max: int = 512
    H: int = 16
    freq_dim: int = 64
    raster_resolution: int = 64
    image_size: int = 256
    train_points: int = 64

    def __post_init__(self):
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")

    @property
    def disp_scale(self):
        return self.image_size / 4.0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise ValueError("alpha_bar must be a non-empty vector")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[0] < 0.999 or ab[-1] <= 0 or ab[0] > 1:
            raise ValueError("alpha_bar must lie in (0, 1] with alpha_bar[0] >= 0.999")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def K_steps(self):
        return len(self.alpha_bar)

    @classmethod
    def cosine(cls, K_steps=100, s=0.008, max_beta=0.999):
        f = lambda t: np.cos((t / K_steps + s) / (1 + s) * np.pi / 2) ** 2
        ab = f(np.arange(1, K_steps + 1)) / f(0.0)
        # clip per-step betas like the usual cosine schedule
        alphas = ab / np.concatenate([[1.0], ab[:-1]])
        alphas = np.maximum(alphas, 1.0 - max_beta)
        return cls(np.cumprod(alphas))

    def to_dict(self):
        return {"alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["alpha_bar"], dtype=np.float64))


# ---------------------------------------------------------------- coordinates

X0_CLIP = 4.0  # one frame width, in units of image_size / 4


def to_normalized(tracks, p0, image_size=256):
    return (np.asarray(tracks) - np.asarray(p0)[:, None, :]) / (image_size / 4.0)


def from_normalized(x, p0, image_size=256):
    return np.asarray(x) * (image_size / 4.0) + np.asarray(p0)[:, None, :]


def normalize_p0(p0, image_size=256):
    return np.asarray(p0) / image_size * 2.0 - 1.0


def forward_noise(x0, k, eps, sched: NoiseSchedule):
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    if not 0 <= k < sched.K_steps:
        raise ValueError(f"diffusion step {k} out of range")
    ab = sched.alpha_bar[k]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------- model


def init_params(cfg: DenoiserConfig, seed=0):
    g = np.random.default_rng(child_seed(seed, "denoiser-init"))
    P = {}
    L.init_encoder(P, g, "enc0", cfg.raster_resolution, cfg.embed_dim)
    L.init_encoder(P, g, "encg", cfg.raster_resolution, cfg.embed_dim)
    L.init_step_embedder(P, g, "kemb", cfg.freq_dim, cfg.embed_dim)
    L.init_linear(P, g, "tok", 2 + 2 * cfg.H, cfg.hidden_size)
    for i in range(cfg.n_blocks):
        L.init_block(P, g, f"blk{i}", cfg.hidden_size, cfg.embed_dim)
    L.init_final(P, g, "final", cfg.hidden_size, cfg.embed_dim, 2 * cfg.H)
    return P


def _net(P, cfg, noisy, p0n, cond):
    """noisy: (B, p, H, 2); p0n: (B, p, 2); cond: (B, embed_dim) Tensor."""
    B, p, H, _ = noisy.shape
    feats = np.concatenate([p0n, noisy.reshape(B, p, 2 * H)], axis=-1)
    x = L.linear(P, "tok", ag.Tensor(feats))
    for i in range(cfg.n_blocks):
        x = L.dit_block(P, f"blk{i}", x, cond, cfg.n_heads)
    out = L.final_layer(P, "final", x, cond)
    return out.reshape(B, p, H, 2)


def _condition(P, cfg, r0, rg, k):
    z0 = L.encode(P, "enc0", r0)
    zg = L.encode(P, "encg", rg)
    zk = L.step_embed(P, "kemb", k, cfg.freq_dim)
    return ag.add(ag.add(z0, zg), zk)


class TrackDenoiser:
    """Config + parameter dict of the noise predictor."""

    def __init__(self, config: DenoiserConfig, params=None, seed=0):
        self.config = config
        self.params = init_params(config, seed) if params is None else dict(params)

    def with_params(self, params):
        return TrackDenoiser(self.config, params)

    # -- single-example API ------------------------------------------------

    def _check_raster(self, r):
        r = np.asarray(r, dtype=np.float64)
        R = self.config.raster_resolution
        if r.shape != (R, R):
            raise ShapeMismatch(f"raster shape {r.shape}, expected {(R, R)}")
        return r

    def encode_raster(self, raster, role="initial"):
        """Embedding of an initial (``role="initial"``) or goal raster."""
        r = self._check_raster(raster)
        name = {"initial": "enc0", "goal": "encg"}[role]
        P = L.as_params(self.params)
        return L.encode(P, name, r[None]).data[0]

    def predict_noise(self, noisy, z0, zg, k, p0):
        cfg = self.config
        noisy = np.asarray(noisy, dtype=np.float64)
        p0 = np.asarray(p0, dtype=np.float64)
        if noisy.ndim != 3 or noisy.shape[1:] != (cfg.H, 2):
            raise ShapeMismatch(f"noisy tracks {noisy.shape}, expected (p, {cfg.H}, 2)")
        if p0.shape != (noisy.shape[0], 2):
            raise ShapeMismatch(f"p0 {p0.shape} does not match {noisy.shape[0]} points")
        if noisy.shape[0] > cfg.p_max:
            raise ShapeMismatch(f"{noisy.shape[0]} points exceed p_max={cfg.p_max}")
        P = L.as_params(self.params)
        zk = L.step_embed(P, "kemb", [k], cfg.freq_dim).data[0]
        cond = ag.Tensor((np.asarray(z0) + np.asarray(zg) + zk)[None])
        out = _net(P, cfg, noisy[None], normalize_p0(p0, cfg.image_size)[None], cond)
        return out.data[0]

    def sample_tracks(self, z0, zg, p0, sched: NoiseSchedule, n_denoise_steps=None, seed=0):
        """Ancestral sampling from N(0, I) down to step 0; returns pixels (p, H, 2)."""
        cfg = self.config
        p0 = np.asarray(p0, dtype=np.float64)
        K = sched.K_steps
        n = K if n_denoise_steps is None else int(n_denoise_steps)
        ks = np.unique(np.round(np.linspace(0, K - 1, n)).astype(int))[::-1]
        g = np.random.default_rng(child_seed(seed, "sample"))
        x = g.normal(size=(len(p0), cfg.H, 2))
        ab = sched.alpha_bar
        for i, k in enumerate(ks):
            ab_t = ab[k]
            ab_prev = ab[ks[i + 1]] if i + 1 < len(ks) else 1.0
            eps = self.predict_noise(x, z0, zg, int(k), p0)
            x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            # displacements beyond the frame size are impossible; without the
            # clip the estimate explodes at the noisiest steps (alpha_bar ~ 1e-7)
            x0 = np.clip(x0, -X0_CLIP, X0_CLIP)
            alpha = ab_t / ab_prev
            beta = 1.0 - alpha
            mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 \
                + (np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
            if i + 1 < len(ks):
                var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
                x = mean + np.sqrt(var) * g.normal(size=x.shape)
            else:
                x = mean
        tracks = from_normalized(x, p0, cfg.image_size)
        tracks[:, 0] = p0
        return tracks

    def predict_episode(self, episode, sched, n_denoise_steps=None, seed=0):
        z0 = self.encode_raster(episode.initial_raster, "initial")
        zg = self.encode_raster(episode.goal_raster, "goal")
        return self.sample_tracks(z0, zg, episode.p0, sched, n_denoise_steps, seed)

    # -- training ----------------------------------------------------------

    def loss(self, batch, sched, seed):
        return _loss(L.as_params(self.params), self.config, make_batch(self.config, batch, sched, seed)).data.item()


def make_batch(cfg: DenoiserConfig, episodes, sched: NoiseSchedule, seed):
    """Fixed-size training arrays; every random draw is tied to ``seed``."""
    if not episodes:
        raise ValueError("empty batch")
    for ep in episodes:
        if ep.H != cfg.H:
            raise ShapeMismatch(f"episode {ep.episode_id} has H={ep.H}, model expects {cfg.H}")
    g = np.random.default_rng(child_seed(seed, "batch"))
    n = min([cfg.train_points] + [ep.p for ep in episodes])
    x0, p0n, r0, rg = [], [], [], []
    for ep in episodes:
        idx = np.sort(g.choice(ep.p, size=n, replace=False))
        x0.append(to_normalized(ep.gt_tracks[idx], ep.p0[idx], cfg.image_size))
        p0n.append(normalize_p0(ep.p0[idx], cfg.image_size))
        r0.append(ep.initial_raster)
        rg.append(ep.goal_raster)
    x0 = np.stack(x0)
    k = g.integers(0, sched.K_steps, size=len(episodes))
    eps = g.normal(size=x0.shape)
    ab = sched.alpha_bar[k][:, None, None, None]
    noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return {"noisy": noisy, "eps": eps, "k": k, "p0n": np.stack(p0n),
            "r0": np.stack(r0), "rg": np.stack(rg)}


def _loss(P, cfg, b):
    cond = _condition(P, cfg, b["r0"], b["rg"], b["k"])
    pred = _net(P, cfg, b["noisy"], b["p0n"], cond)
    return ag.mse(pred, b["eps"])


def loss_and_grads(model: TrackDenoiser, batch, sched, seed):
    b = make_batch(model.config, batch, sched, seed)
    return L.value_and_grad(_loss, model.params, model.config, b)


def train_step(model: TrackDenoiser, batch, sched, opt_state, seed, lr=1e-4):
    """One Adam step; returns (new_model, new_opt_state, loss)."""
    if opt_state is None:
        opt_state = L.adam_init(model.params)
    value, grads = loss_and_grads(model, batch, sched, seed)
    params, opt_state = L.adam_update(model.params, grads, opt_state, lr=lr)
    return model.with_params(params), opt_state, value


def batch_indices(n_episodes, batch_size, seed, step):
    """Episode indices for a training step; a pure function of (seed, step)."""
    g = np.random.default_rng(child_seed(seed, "tracker-batch", step))
    return g.choice(n_episodes, size=min(batch_size, n_episodes), replace=False)


def train(model: TrackDenoiser, episodes, sched, steps, batch_size=32, lr=1e-4, seed=0,
          opt_state=None, start_step=0, callback=None):
    """Plain training loop; returns (model, opt_state, losses).

    ``callback(step, model, loss)`` runs after every step. Resuming with the
    saved ``opt_state`` and ``start_step`` continues the exact same run.
    """
    losses = []
    for s in range(start_step, start_step + steps):
        idx = batch_indices(len(episodes), batch_size, seed, s)
        try:
            model, opt_state, loss = train_step(model, [episodes[i] for i in idx], sched,
                                                opt_state, child_seed(seed, "tracker-step", s), lr)
        except NonFiniteLoss as e:
            raise NonFiniteLoss(f"step {s}: {e}") from e
        losses.append(loss)
        if callback is not None:
            callback(s, model, loss)
    return model, opt_state, losses
