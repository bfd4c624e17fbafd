"""Recover per-step rigid object transforms from 2D point tracks.

Pipeline per trajectory: keep points whose track moves, then for every step
run RANSAC over 6-point samples and refine on the consensus set with a
damped Gauss-Newton solve over SE(3), warm-started from the previous step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .geometry import CameraIntrinsics, RigidTransform
from .seeding import child_seed

MIN_POINTS = 6
SAMPLE_SIZE = 6


class NoMovingPoints(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


class DivergedSolve(RuntimeError):
    pass


class NoConsensus(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class FitConfig:
    motion_threshold: float = 5.0
    ransac_iters: int = 200
    ransac_inlier_px: float = 3.0
    ransac_confidence: float = 0.99
    gn_max_iters: int = 50
    gn_tol: float = 1e-10
    huber_delta: float = 2.0
    loss: str = "huber"  # or "l2"
    smoothness_weight: float = 0.0
    parallel: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("motion_threshold", "ransac_inlier_px", "gn_tol", "huber_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ransac_iters < 1 or self.gn_max_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.loss not in ("huber", "l2"):
            raise ValueError("loss must be 'huber' or 'l2'")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class MovingPointSet:
    indices: np.ndarray
    tracks: np.ndarray  # (m, H, 2)
    points3d: np.ndarray  # (m, 3)
    valid: np.ndarray  # (m, H)


@dataclass
class TransformTrajectory:
    transforms: list
    per_step_residual: np.ndarray
    per_step_inliers: list = field(repr=False)
    moving_indices: np.ndarray = field(repr=False)

    @property
    def inlier_count(self):
        return int(self.inlier_set.size)

    @property
    def inlier_set(self):
        """Original point indices that are inliers in at least half the steps."""
        m = len(self.moving_indices)
        votes = np.zeros(m)
        for inl in self.per_step_inliers:
            votes[inl] += 1
        return self.moving_indices[votes >= 0.5 * len(self.per_step_inliers)]


# ---------------------------------------------------------------- filtering


def filter_moving(tracks, points3d, cfg: FitConfig, valid=None, width=None, height=None):
    """Points whose max displacement from their first position exceeds the threshold.

    Points flagged invalid (out of frame) at any step are dropped.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    points3d = np.asarray(points3d, dtype=np.float64)
    if not np.all(np.isfinite(tracks)):
        raise ValueError("tracks must be finite")
    if valid is None:
        valid = np.ones(tracks.shape[:2], dtype=bool)
        if width is not None:
            valid &= (tracks[..., 0] >= 0) & (tracks[..., 0] < width)
        if height is not None:
            valid &= (tracks[..., 1] >= 0) & (tracks[..., 1] < height)
    valid = np.asarray(valid, dtype=bool)
    disp = np.linalg.norm(tracks - tracks[:, :1], axis=-1).max(axis=1)
    keep = (disp > cfg.motion_threshold) & valid.all(axis=1)
    idx = np.flatnonzero(keep)
    if len(idx) < MIN_POINTS:
        raise NoMovingPoints(f"only {len(idx)} moving points (need {MIN_POINTS})")
    return MovingPointSet(idx, tracks[idx], points3d[idx], valid[idx])


# ---------------------------------------------------------------- single step


def _check_geometry(X):
    if len(X) < 3:
        raise DegenerateGeometry(f"{len(X)} points cannot fix a rigid transform")
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateGeometry("points are collinear")


def _project_residuals(T, X, obs, K):
    Y = X @ T.rotation.T + T.translation
    z = Y[:, 2]
    if np.any(z <= 0):
        return None, Y
    uv = np.stack([K.fx * Y[:, 0] / z + K.cx, K.fy * Y[:, 1] / z + K.cy], axis=1)
    return uv - obs, Y


def _jacobian(T, X, Y, K):
    """d residual / d twist for the update T <- T exp(delta); shape (2n, 6)."""
    n = len(X)
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    iz = 1.0 / z
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = K.fx * iz
    Jp[:, 0, 2] = -K.fx * x * iz * iz
    Jp[:, 1, 1] = K.fy * iz
    Jp[:, 1, 2] = -K.fy * y * iz * iz
    R = T.rotation
    RX = X @ R.T
    # d(R (X + w x X + v))/dw = -hat(R X) R ; d/dv = R
    H = np.zeros((n, 3, 3))
    H[:, 0, 1], H[:, 0, 2] = -RX[:, 2], RX[:, 1]
    H[:, 1, 0], H[:, 1, 2] = RX[:, 2], -RX[:, 0]
    H[:, 2, 0], H[:, 2, 1] = -RX[:, 1], RX[:, 0]
    dw = -H @ R
    J = np.concatenate([Jp @ dw, Jp @ R], axis=2)
    return J.reshape(2 * n, 6)


def _robust(r, cfg):
    if cfg.loss == "l2":
        return 0.5 * float(r @ r), np.ones_like(r)
    a = np.abs(r)
    d = cfg.huber_delta
    quad = a <= d
    cost = np.where(quad, 0.5 * r * r, d * (a - 0.5 * d)).sum()
    w = np.where(quad, 1.0, d / np.maximum(a, 1e-300))
    return float(cost), w


def _prior_residual(T, prior, weight):
    return math.sqrt(weight) * geo.log_map(geo.compose(prior.inverse(), T))


def objective(T, points3d, obs2d, K, cfg: FitConfig, prior=None):
    """Robust reprojection cost (plus optional smoothness term)."""
    r, _ = _project_residuals(T, np.asarray(points3d, float), np.asarray(obs2d, float), K)
    if r is None:
        return math.inf
    cost, _ = _robust(r.ravel(), cfg)
    if prior is not None and cfg.smoothness_weight > 0:
        pr = _prior_residual(T, prior, cfg.smoothness_weight)
        cost += 0.5 * float(pr @ pr)
    return cost


def fit_transform_step(points3d, obs2d, K: CameraIntrinsics, init: RigidTransform,
                       cfg: FitConfig, prior: RigidTransform | None = None):
    """Damped Gauss-Newton over the twist; returns (T, mean px error)."""
    X = np.asarray(points3d, dtype=np.float64)
    obs = np.asarray(obs2d, dtype=np.float64)
    _check_geometry(X)
    use_prior = prior is not None and cfg.smoothness_weight > 0
    T = init
    r, Y = _project_residuals(T, X, obs, K)
    if r is None:
        raise DivergedSolve("initial pose puts points behind the camera")

    def total_cost(T, r):
        c, _ = _robust(r.ravel(), cfg)
        if use_prior:
            pr = _prior_residual(T, prior, cfg.smoothness_weight)
            c += 0.5 * float(pr @ pr)
        return c

    cost = total_cost(T, r)
    lam = 1e-3
    rejections = 0
    for _ in range(cfg.gn_max_iters):
        rv = r.ravel()
        _, w = _robust(rv, cfg)
        J = _jacobian(T, X, Y, K)
        A = J.T @ (J * w[:, None])
        b = J.T @ (w * rv)
        if use_prior:
            pr = _prior_residual(T, prior, cfg.smoothness_weight)
            Jpr = _numeric_prior_jacobian(T, prior, cfg.smoothness_weight)
            A += Jpr.T @ Jpr
            b += Jpr.T @ pr
        accepted = converged = False
        while rejections < 5:
            step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -b)
            gain = -(b @ step) - 0.5 * step @ A @ step
            if np.linalg.norm(step) < cfg.gn_tol or gain <= 1e-12 * cost:
                converged = True
                break
            T_new = geo.compose(T, geo.exp_map(step))
            r_new, Y_new = _project_residuals(T_new, X, obs, K)
            new_cost = math.inf if r_new is None else total_cost(T_new, r_new)
            if new_cost <= cost:
                accepted = True
                rejections = 0
                lam = max(lam / 10.0, 1e-12)
                break
            rejections += 1
            lam *= 10.0
        if converged:
            break
        if not accepted:
            grad = float(np.linalg.norm(b))
            if grad > 1e-6 * (1.0 + cost) * max(1.0, np.abs(J).max()):
                raise DivergedSolve(f"cost failed to decrease in 5 damped retries (|g|={grad:.3g})")
            break
        small = np.linalg.norm(step) < cfg.gn_tol
        tiny_gain = cost - new_cost <= 1e-10 * cost
        T, r, Y, cost = T_new, r_new, Y_new, new_cost
        if small or tiny_gain or cost == 0.0:
            break
    err = np.linalg.norm(r, axis=1)
    return T, float(err.mean())


def _numeric_prior_jacobian(T, prior, weight, h=1e-7):
    J = np.zeros((6, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        fp = _prior_residual(geo.compose(T, geo.exp_map(d)), prior, weight)
        fm = _prior_residual(geo.compose(T, geo.exp_map(-d)), prior, weight)
        J[:, i] = (fp - fm) / (2 * h)
    return J


def reprojection_errors(T, points3d, obs2d, K):
    """Per-point pixel error; inf for points that land behind the camera."""
    X = np.asarray(points3d, dtype=np.float64)
    Y = X @ T.rotation.T + T.translation
    z = Y[:, 2]
    err = np.full(len(X), np.inf)
    ok = z > 0
    uv = np.stack([K.fx * Y[ok, 0] / z[ok] + K.cx, K.fy * Y[ok, 1] / z[ok] + K.cy], axis=1)
    err[ok] = np.linalg.norm(uv - np.asarray(obs2d, float)[ok], axis=1)
    return err


# ---------------------------------------------------------------- RANSAC


def ransac_fit(moving: MovingPointSet, K: CameraIntrinsics, t: int, cfg: FitConfig,
               init: RigidTransform | None = None, prior: RigidTransform | None = None):
    """Consensus fit at step ``t``; returns (T, inlier positions into ``moving``).

    Hypotheses come from 6-point samples; sampling stops early once the
    usual adaptive bound for ``ransac_confidence`` is met.
    """
    init = RigidTransform.identity() if init is None else init
    avail = np.flatnonzero(moving.valid[:, t])
    if len(avail) < SAMPLE_SIZE:
        raise NoConsensus(f"step {t}: only {len(avail)} valid points", step=t)
    X = moving.points3d[avail]
    obs = moving.tracks[avail, t]
    g = np.random.default_rng(child_seed(cfg.seed, "ransac", t))
    hyp_cfg = replace(cfg, loss="l2", smoothness_weight=0.0, gn_max_iters=10)
    best_T, best_inl = None, None
    needed, it = cfg.ransac_iters, 0
    while it < needed:
        it += 1
        sample = g.choice(len(avail), SAMPLE_SIZE, replace=False)
        try:
            T_h, _ = fit_transform_step(X[sample], obs[sample], K, init, hyp_cfg)
        except (DegenerateGeometry, DivergedSolve):
            continue
        inl = reprojection_errors(T_h, X, obs, K) < cfg.ransac_inlier_px
        if best_inl is None or inl.sum() > best_inl.sum():
            # local refit on the consensus set sharpens the inlier estimate
            if inl.sum() >= SAMPLE_SIZE:
                try:
                    T_lo, _ = fit_transform_step(X[inl], obs[inl], K, T_h, hyp_cfg)
                    inl_lo = reprojection_errors(T_lo, X, obs, K) < cfg.ransac_inlier_px
                    if inl_lo.sum() > inl.sum():
                        T_h, inl = T_lo, inl_lo
                except (DegenerateGeometry, DivergedSolve):
                    pass
            best_T, best_inl = T_h, inl
            w = inl.mean()
            if w >= 1.0:
                needed = it
            elif w > 0:
                bound = math.log(1 - cfg.ransac_confidence) / math.log(1 - w**SAMPLE_SIZE)
                needed = min(cfg.ransac_iters, int(math.ceil(bound)))
    if best_inl is None or best_inl.sum() < MIN_POINTS:
        n = 0 if best_inl is None else int(best_inl.sum())
        raise NoConsensus(f"step {t}: best consensus has {n} points", step=t)
    T, inl = best_T, best_inl
    for _ in range(3):
        T, _ = fit_transform_step(X[inl], obs[inl], K, T, cfg, prior)
        new_inl = reprojection_errors(T, X, obs, K) < cfg.ransac_inlier_px
        if new_inl.sum() < MIN_POINTS or np.array_equal(new_inl, inl):
            break
        inl = new_inl
    return T, avail[inl]


def fit_trajectory(tracks, points3d, K: CameraIntrinsics, cfg: FitConfig = FitConfig(),
                   valid=None) -> TransformTrajectory:
    """Transforms of the moving object at every step, relative to step 0."""
    moving = filter_moving(tracks, points3d, cfg, valid, K.width, K.height)
    H = moving.tracks.shape[1]
    transforms, residuals, inliers = [], np.zeros(H), []
    prev = RigidTransform.identity()
    for t in range(H):
        init = RigidTransform.identity() if cfg.parallel else prev
        prior = prev if (cfg.smoothness_weight > 0 and t > 0 and not cfg.parallel) else None
        T, inl = ransac_fit(moving, K, t, cfg, init, prior)
        err = reprojection_errors(T, moving.points3d[inl], moving.tracks[inl, t], K)
        transforms.append(T)
        residuals[t] = float(err.mean())
        inliers.append(inl)
        prev = T
    return TransformTrajectory(transforms, residuals, inliers, moving.indices)


def backproject_first_frame(K, p0, depth):
    """First-frame 3D points from pixel locations and per-point depth."""
    return geo.backproject(K, p0, depth)
