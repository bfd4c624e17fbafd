"""Functional building blocks shared by the track denoiser and the residual
policy: linear layers, adaLN-Zero transformer blocks, a raster encoder,
sinusoidal embeddings and Adam.

Parameters live in flat ``{name: ndarray}`` dicts. Forward functions take a
dict of ``Tensor`` views (see ``as_params``) so the same code serves
inference and training.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------- init


def xavier(g, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-a, a, size=(fan_in, fan_out))


def init_linear(params, g, name, fan_in, fan_out, bias=True, zero=False):
    params[f"{name}.w"] = np.zeros((fan_in, fan_out)) if zero else xavier(g, fan_in, fan_out)
    if bias:
        params[f"{name}.b"] = np.zeros(fan_out)


def init_block(params, g, name, hidden, cond_dim, mlp_ratio=4):
    init_linear(params, g, f"{name}.adaln", cond_dim, 6 * hidden, zero=True)
    init_linear(params, g, f"{name}.qkv", hidden, 3 * hidden)
    init_linear(params, g, f"{name}.proj", hidden, hidden)
    init_linear(params, g, f"{name}.fc1", hidden, mlp_ratio * hidden)
    init_linear(params, g, f"{name}.fc2", mlp_ratio * hidden, hidden)


def init_final(params, g, name, hidden, cond_dim, out_dim):
    init_linear(params, g, f"{name}.adaln", cond_dim, 2 * hidden, zero=True)
    init_linear(params, g, f"{name}.out", hidden, out_dim, zero=True)


def init_encoder(params, g, name, resolution, embed_dim, c1=16, c2=32):
    if resolution % 8:
        raise ValueError("raster resolution must be a multiple of 8")
    init_linear(params, g, f"{name}.conv1", 16, c1, bias=False)
    init_linear(params, g, f"{name}.conv2", 4 * c1, c2, bias=False)
    cells = (resolution // 8) ** 2
    init_linear(params, g, f"{name}.head", cells * c2, embed_dim, bias=False)


def init_step_embedder(params, g, name, freq_dim, embed_dim):
    init_linear(params, g, f"{name}.fc1", freq_dim, embed_dim)
    init_linear(params, g, f"{name}.fc2", embed_dim, embed_dim)


# ---------------------------------------------------------------- forward


def as_params(params, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def linear(P, name, x):
    y = ag.matmul(x, P[f"{name}.w"])
    b = P.get(f"{name}.b")
    return y if b is None else ag.add(y, b)


def modulate(x, shift, scale):
    # x: (B, N, D); shift/scale: (B, D)
    B, D = shift.shape
    return ag.add(ag.mul(x, ag.add(scale.reshape(B, 1, D), 1.0)), shift.reshape(B, 1, D))


def attention(P, name, x, n_heads):
    B, N, D = x.shape
    hd = D // n_heads
    qkv = linear(P, f"{name}.qkv", x).reshape(B, N, 3, n_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.mul(ag.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(hd))
    out = ag.matmul(ag.softmax(scores, axis=-1), v)
    out = out.transpose(0, 2, 1, 3).reshape(B, N, D)
    return linear(P, f"{name}.proj", out)


def dit_block(P, name, x, c, n_heads):
    """adaLN-Zero transformer block; ``c`` is the (B, cond_dim) condition."""
    B, N, D = x.shape
    mod = linear(P, f"{name}.adaln", ag.silu(c))
    shift1, scale1, gate1, shift2, scale2, gate2 = ag.split(mod, 6, axis=-1)
    h = modulate(ag.layer_norm(x), shift1, scale1)
    x = ag.add(x, ag.mul(gate1.reshape(B, 1, D), attention(P, name, h, n_heads)))
    h = modulate(ag.layer_norm(x), shift2, scale2)
    h = linear(P, f"{name}.fc2", ag.gelu(linear(P, f"{name}.fc1", h)))
    return ag.add(x, ag.mul(gate2.reshape(B, 1, D), h))


def final_layer(P, name, x, c):
    shift, scale = ag.split(linear(P, f"{name}.adaln", ag.silu(c)), 2, axis=-1)
    return linear(P, f"{name}.out", modulate(ag.layer_norm(x), shift, scale))


def _patchify(x, k):
    # (B, H, W, C) -> (B, H/k, W/k, k*k*C), non-overlapping k x k windows
    B, H, W, C = x.shape
    x = x.reshape(B, H // k, k, W // k, k, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // k, W // k, k * k * C)


def encode(P, name, raster):
    """Two strided convolutions (4x4/4 then 2x2/2), flatten, linear.

    Bias-free, so an all-zero raster maps to the zero embedding.
    """
    r = ag.as_tensor(raster)
    B, R, _ = r.shape
    x = _patchify(r.reshape(B, R, R, 1), 4)
    x = ag.relu(linear(P, f"{name}.conv1", x))
    x = ag.relu(linear(P, f"{name}.conv2", _patchify(x, 2)))
    return linear(P, f"{name}.head", x.reshape(B, -1))


def sinusoid(t, dim, max_period=10000.0):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def step_embed(P, name, t, freq_dim):
    h = Tensor(sinusoid(t, freq_dim))
    return linear(P, f"{name}.fc2", ag.silu(linear(P, f"{name}.fc1", h)))


# ---------------------------------------------------------------- training


def adam_init(params):
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_update(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """Returns (new_params, new_state); inputs are not modified."""
    b1, b2 = betas
    step = state["step"] + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k, p in params.items():
        g = grads[k]
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * g * g
        new_m[k], new_v[k] = m, v
        if lr == 0:
            new_p[k] = p
        else:
            new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_p, {"step": step, "m": new_m, "v": new_v}


def value_and_grad(loss_fn, params, *args, **kw):
    """Evaluates ``loss_fn(P, ...)`` on Tensor views and backpropagates."""
    P = as_params(params, requires_grad=True)
    loss = loss_fn(P, *args, **kw)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return value, grads


def count_params(params):
    return int(sum(v.size for v in params.values()))


def gradcheck(loss_fn, params, n_dirs=100, seed=0, h=1e-5, floor=1e-6, *args, **kw):
    """Analytic vs central-difference directional derivatives.

    Each direction is a random unit vector over all parameters. Returns the
    array of relative errors ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grads = value_and_grad(loss_fn, params, *args, **kw)
    g = np.random.default_rng(seed)
    names = sorted(params)

    def f(p):
        return float(loss_fn(as_params(p), *args, **kw).data)

    errs = []
    for _ in range(n_dirs):
        d = {k: g.normal(size=params[k].shape) for k in names}
        norm = np.sqrt(sum(float((v * v).sum()) for v in d.values()))
        d = {k: v / norm for k, v in d.items()}
        analytic = sum(float((grads[k] * d[k]).sum()) for k in names)
        plus = f({k: params[k] + h * d[k] for k in names})
        minus = f({k: params[k] - h * d[k] for k in names})
        numeric = (plus - minus) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return np.array(errs)
