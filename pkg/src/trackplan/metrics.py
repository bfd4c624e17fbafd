"""Track accuracy metrics and the split benchmark.

``delta_x_t`` is the fraction of points within ``x`` pixels (Euclidean, <=)
of ground truth at step ``t``; ``delta_auc`` averages it over thresholds
``1..N`` and over steps, so it lies in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.layers import ShapeMismatch


@dataclass(frozen=True)
class MetricConfig:
    N_threshold_max: int = 10

    def __post_init__(self):
        if self.N_threshold_max < 1:
            raise ValueError("N_threshold_max must be >= 1")


def _check(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape[:2]:
        raise ShapeMismatch(f"valid mask {valid.shape} vs tracks {gt.shape[:2]}")
    return pred, gt, valid


def delta_x_t(pred, gt, x, t, valid=None):
    pred, gt, valid = _check(pred, gt, valid)
    d = np.linalg.norm(pred[:, t] - gt[:, t], axis=-1)
    v = valid[:, t]
    if not v.any():
        return float("nan")
    return float(np.mean(d[v] <= x))


def delta_table(pred, gt, cfg=MetricConfig(), valid=None):
    """(N, H) table with rows x = 1..N."""
    pred, gt, valid = _check(pred, gt, valid)
    d = np.linalg.norm(pred - gt, axis=-1)  # (p, H)
    xs = np.arange(1, cfg.N_threshold_max + 1)
    within = d[None] <= xs[:, None, None]  # (N, p, H)
    counts = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (within & valid[None]).sum(axis=1) / counts[None]


def delta_auc(pred, gt, cfg=MetricConfig(), valid=None):
    table = delta_table(pred, gt, cfg, valid)
    cols = ~np.isnan(table).any(axis=0)
    if not cols.any():
        return float("nan")
    return float(table[:, cols].mean(axis=0).mean())


def zero_motion(tracks):
    """Baseline predicting that nothing moves."""
    tracks = np.asarray(tracks)
    return np.repeat(tracks[:, :1], tracks.shape[1], axis=1)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def splits(self):
        out = []
        for r in self.rows:
            if r["split"] not in out:
                out.append(r["split"])
        return out

    def summary(self):
        out = {}
        for s in self.splits():
            rows = [r for r in self.rows if r["split"] == s]
            entry = {"episodes": len(rows)}
            for key in ("delta_auc", "zero_motion_delta_auc", "open_loop_success",
                        "closed_loop_success", "actions_success", "fit_residual", "excluded_points"):
                vals = [r[key] for r in rows if r.get(key) is not None]
                if vals:
                    entry[key] = float(np.mean(vals))
            out[s] = entry
        return out

    @property
    def delta_auc(self):
        vals = [r["delta_auc"] for r in self.rows if r.get("delta_auc") is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self):
        return {"config": self.config, "summary": self.summary(), "rows": self.rows}

    @classmethod
    def from_dict(cls, d):
        return cls(rows=list(d["rows"]), config=dict(d.get("config", {})))

    COLUMNS = ("split", "episode_id", "delta_auc", "open_loop_success",
               "closed_loop_success", "fit_residual")

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(c)) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_text(self):
        summ = self.summary()
        cols = ["split", "episodes", "delta_auc", "zero_motion", "open_loop", "closed_loop",
                "actions", "fit_res_px"]
        keys = [None, "episodes", "delta_auc", "zero_motion_delta_auc", "open_loop_success",
                "closed_loop_success", "actions_success", "fit_residual"]
        table = [cols]
        for s, e in summ.items():
            table.append([s] + [_fmt(e.get(k)) for k in keys[1:]])
        widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchmarkConfig:
    n_denoise_steps: int = 50
    seed: int = 0
    metric: MetricConfig = MetricConfig()


def run_benchmark(episodes, tracker=None, policy=None, error_model=None, fit_config=None,
                  config=BenchmarkConfig(), ablation=None, sched=None):
    """Track, fit, plan and roll out every episode; one report row per episode.

    ``tracker=None`` feeds ground-truth tracks straight through. ``policy``
    (residual) and ``ablation`` (absolute-action policy) are optional.
    """
    from . import residual as rs
    from . import rigidfit as rf
    from . import simenv
    from .planner import initial_grasp_pose, open_loop_plan
    from .seeding import child_seed
    from .trackdiff import NoiseSchedule

    error_model = error_model or simenv.ErrorModel()
    fit_config = fit_config or rf.FitConfig(seed=config.seed)
    sched = sched or NoiseSchedule.cosine()
    rows = []
    for ep in episodes:
        row = {"split": ep.split, "episode_id": ep.episode_id}
        valid = ~ep.out_of_frame
        row["excluded_points"] = int(ep.out_of_frame.any(axis=1).sum())
        if tracker is None:
            tracks = ep.gt_tracks
            row["track_source"] = "ground-truth"
        else:
            tracks = tracker.predict_episode(ep, sched, config.n_denoise_steps,
                                             seed=child_seed(config.seed, "sample", ep.episode_id))
            row["track_source"] = "model"
        row["delta_auc"] = delta_auc(tracks, ep.gt_tracks, config.metric, valid)
        row["zero_motion_delta_auc"] = delta_auc(zero_motion(ep.gt_tracks), ep.gt_tracks,
                                                 config.metric, valid)
        goal = simenv.GoalSpec.for_episode(ep)
        try:
            fit = rf.fit_trajectory(tracks, ep.points3d, ep.intrinsics, fit_config)
        except (rf.NoMovingPoints, rf.NoConsensus, rf.DegenerateGeometry, rf.DivergedSolve) as e:
            row["fit_error"] = f"{type(e).__name__}: {e}"
            row["open_loop_success"] = False
            if policy is not None:
                row["closed_loop_success"] = False
            if ablation is not None:
                row["actions_success"] = False
            rows.append(row)
            continue
        row["fit_residual"] = float(fit.per_step_residual.mean())
        e1 = initial_grasp_pose(simenv.home_pose(), ep.points3d[fit.inlier_set])
        plan = open_loop_plan(fit, e1)
        em = _episode_error_model(error_model, config.seed, ep.episode_id)
        row["open_loop_success"] = bool(rs.rollout_open_loop(ep, plan, em, goal)[1])
        for key, pol in (("closed_loop_success", policy), ("actions_success", ablation)):
            if pol is not None:
                sel = rs.select_tracks(tracks, pol.config.p, child_seed(config.seed, ep.episode_id))
                row[key] = bool(rs.rollout_closed_loop(pol, ep, sel, plan, em, goal)[1])
        rows.append(row)
    return MetricReport(rows, {"n_denoise_steps": config.n_denoise_steps, "seed": config.seed,
                               "N_threshold_max": config.metric.N_threshold_max,
                               "error_model": error_model.to_dict()})


def _episode_error_model(em, seed, episode_id):
    # same offset everywhere, per-episode action noise stream
    from dataclasses import replace

    from .seeding import child_seed

    return replace(em, seed=child_seed(seed, em.seed, "rollout", episode_id))
