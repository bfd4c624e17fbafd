"""Command-line pipeline: gen-data -> train-tracker -> predict-tracks -> fit -> plan
-> train-residual -> rollout -> eval -> report.

Every command takes ``--seed``; all derived seeds come from it through
``seeding.child_seed``. Each stage writes ``<stage>.artifact.json`` with its
config, seed and the digests of its inputs.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import io
from . import metrics as M
from . import residual as rs
from . import rigidfit as rf
from . import simenv
from . import synth
from . import trackdiff as td
from .nn.layers import NonFiniteLoss, ShapeMismatch
from .planner import EndEffectorPlan, initial_grasp_pose, open_loop_plan
from .seeding import child_seed


class ConfigError(ValueError):
    pass


DATASET_REQUIRED = ("counts", "H", "p_range", "image_size", "raster_resolution")


def _build(cls, fields, what):
    try:
        return cls(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {what} config: {e}") from e


def _merge(defaults, given, what):
    extra = sorted(set(given) - set(defaults))
    if extra:
        raise ConfigError(f"unknown {what} field(s): {', '.join(extra)}")
    return {**defaults, **given}


def _load_config(path, required=()):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    cfg = io.read_json(p)
    for k in required:
        if k not in cfg:
            raise ConfigError(f"config {p} is missing required field '{k}'")
    return cfg


def _need(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _episodes(data, splits=None):
    return io.load_dataset(_need(data, "dataset"), splits)


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])
    Path(path).write_text(buf.getvalue())


def _per_episode_files(d):
    d = _need(d, "stage directory")
    return {p.stem: p for p in sorted(d.glob("*.json")) if not p.name.endswith(".artifact.json")}


# ---------------------------------------------------------------- commands


def cmd_gen_data(a):
    cfgd = _load_config(_need(a.config, "config"), DATASET_REQUIRED)
    cfgd["seed"] = a.seed
    try:
        cfg = synth.DatasetConfig.from_dict(cfgd)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    manifest = synth.generate_dataset(cfg, a.out)
    io.write_artifact(a.out, "gen-data", cfg.to_dict(), a.seed, {"config": a.config},
                      {"manifest": str(Path(manifest).name)})
    print(f"wrote {sum(cfg.counts.values())} episodes to {a.out}")


def _denoiser_setup(a, episodes):
    c = _load_config(a.config)
    model_cfg = _build(td.DenoiserConfig, c.get("model", {}), "model")
    train = {"steps": 1000, "batch_size": 32, "lr": 1e-4, "K_steps": 100,
             "eval_every": 0, "eval_episodes": 2, "eval_denoise_steps": 20}
    train = _merge(train, c.get("train", {}), "train")
    for k in ("steps", "batch_size", "lr"):
        if getattr(a, k) is not None:
            train[k] = getattr(a, k)
    H = {ep.H for ep in episodes}
    if H != {model_cfg.H}:
        raise ConfigError(f"model H={model_cfg.H} but dataset has H={sorted(H)}")
    R = {ep.initial_raster.shape[0] for ep in episodes}
    if R != {model_cfg.raster_resolution}:
        raise ConfigError(f"model raster_resolution={model_cfg.raster_resolution}, dataset {sorted(R)}")
    return model_cfg, train


def cmd_train_tracker(a):
    train_eps = _episodes(a.data, ["train"])
    if not train_eps:
        raise ConfigError("dataset has no train split")
    held = [e for e in _episodes(a.data, ["MG"])]
    model_cfg, train = _denoiser_setup(a, train_eps)
    try:
        sched = td.NoiseSchedule.cosine(train["K_steps"])
    except ValueError as e:
        raise ConfigError(f"K_steps={train['K_steps']}: {e}") from e
    model, opt, start = td.TrackDenoiser(model_cfg, seed=child_seed(a.seed, "tracker-init")), None, 0
    if a.resume:
        meta, params, opt = io.load_checkpoint(_need(a.resume, "checkpoint"))
        model = model.with_params(params)
        start = meta["extra"]["step"]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    evals = []

    def cb(s, m, loss):
        if train["eval_every"] and held and (s + 1) % train["eval_every"] == 0:
            vals = []
            for ep in held[: train["eval_episodes"]]:
                pr = m.predict_episode(ep, sched, train["eval_denoise_steps"], seed=child_seed(a.seed, "eval", s))
                vals.append(M.delta_auc(pr, ep.gt_tracks, valid=~ep.out_of_frame))
            evals.append((s + 1, float(np.mean(vals))))

    try:
        model, opt, losses = td.train(model, train_eps, sched, train["steps"], train["batch_size"],
                                      train["lr"], child_seed(a.seed, "tracker-train"), opt, start, cb)
    except NonFiniteLoss as e:
        raise SystemExit(f"error: training aborted: {e}")
    end = start + train["steps"]
    config = {"model": model_cfg.to_dict(), "train": train, "schedule": sched.to_dict()}
    io.save_checkpoint(out / "tracker.ckpt", "tracker", config, model.params, opt, {"step": end})
    _write_csv(out / "loss.csv", ["step", "loss"], [(start + i, l) for i, l in enumerate(losses)])
    _write_csv(out / "eval.csv", ["step", "delta_auc_MG"], evals)
    io.write_artifact(out, "train-tracker", config, a.seed,
                      {"data": a.data, "resume": a.resume or ""}, {"checkpoint": "tracker.ckpt", "step": end})
    print(f"step {end}: loss {losses[-1]:.6f}" if losses else "no steps run")


def load_tracker(path):
    meta, params, _ = io.load_checkpoint(_need(path, "tracker checkpoint"))
    if meta["kind"] != "tracker":
        raise ConfigError(f"{path} is a {meta['kind']} checkpoint, expected tracker")
    cfg = td.DenoiserConfig(**meta["config"]["model"])
    return td.TrackDenoiser(cfg, params), td.NoiseSchedule.from_dict(meta["config"]["schedule"])


def load_policy(path):
    meta, params, _ = io.load_checkpoint(_need(path, "residual checkpoint"))
    if meta["kind"] != "residual":
        raise ConfigError(f"{path} is a {meta['kind']} checkpoint, expected residual")
    return rs.ResidualPolicy(rs.ResidualPolicyConfig(**meta["config"]["model"]), params)


def cmd_predict_tracks(a):
    eps = _episodes(a.data, a.splits)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model = sched = None
    if not a.ground_truth:
        model, sched = load_tracker(a.checkpoint)
    for ep in eps:
        if model is None:
            tracks, source = ep.gt_tracks, "ground-truth"
        else:
            tracks = model.predict_episode(ep, sched, a.denoise_steps, seed=child_seed(a.seed, "sample", ep.episode_id))
            source = "model"
        io.write_json(out / f"{ep.episode_id}.json",
                      {"episode_id": ep.episode_id, "split": ep.split, "source": source,
                       "tracks": tracks.tolist()})
    cfg = {"denoise_steps": a.denoise_steps, "ground_truth": a.ground_truth, "splits": a.splits}
    io.write_artifact(out, "predict-tracks", cfg, a.seed,
                      {"data": a.data, "checkpoint": a.checkpoint or ""}, {"episodes": len(eps)})


def cmd_fit(a):
    eps = {e.episode_id: e for e in _episodes(a.data)}
    files = _per_episode_files(a.tracks)
    c = _load_config(a.config)
    c["seed"] = child_seed(a.seed, "fit")
    cfg = _build(rf.FitConfig, c, "fit")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for eid, f in files.items():
        ep = eps[eid]
        tracks = np.asarray(io.read_json(f)["tracks"])
        rec = {"episode_id": eid, "split": ep.split}
        try:
            fit = rf.fit_trajectory(tracks, ep.points3d, ep.intrinsics, cfg)
            rec.update({
                "transforms": [geo.transform_to_list(T) for T in fit.transforms],
                "per_step_residual": fit.per_step_residual.tolist(),
                "inlier_count": fit.inlier_count,
                "inlier_set": fit.inlier_set.tolist(),
            })
        except (rf.NoMovingPoints, rf.NoConsensus, rf.DegenerateGeometry, rf.DivergedSolve) as e:
            failures += 1
            rec["error"] = f"{type(e).__name__}: {e}"
            print(f"episode {eid}: {rec['error']}", file=sys.stderr)
        io.write_json(out / f"{eid}.json", rec)
    io.write_artifact(out, "fit", cfg.to_dict(), a.seed, {"data": a.data, "tracks": a.tracks},
                      {"episodes": len(files), "failures": failures})


def cmd_plan(a):
    eps = {e.episode_id: e for e in _episodes(a.data)}
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for eid, f in _per_episode_files(a.fits).items():
        rec = io.read_json(f)
        if "error" in rec:
            continue
        ep = eps[eid]
        transforms = [geo.transform_from_list(m) for m in rec["transforms"]]
        e1 = initial_grasp_pose(simenv.home_pose(), ep.points3d[rec["inlier_set"]])
        io.write_json(out / f"{eid}.json", open_loop_plan(transforms, e1).to_dict())
        n += 1
    io.write_artifact(out, "plan", {}, a.seed, {"data": a.data, "fits": a.fits}, {"plans": n})


def _error_model(path, seed):
    d = _load_config(path) if path else {}
    d.setdefault("seed", child_seed(seed, "error-model"))
    try:
        return simenv.ErrorModel.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad error model: {e}") from e


def cmd_train_residual(a):
    eps = _episodes(a.data, ["train"])
    if not eps:
        raise ConfigError("dataset has no train split")
    c = _load_config(a.config)
    model = dict(c.get("model", {}))
    if a.mode:
        model["mode"] = a.mode
    cfg = _build(rs.ResidualPolicyConfig, model, "policy")
    train = _merge({"steps": 500, "batch_size": 32, "lr": 1e-4, "n_demos": 50}, c.get("train", {}), "train")
    for k in ("steps", "batch_size", "lr"):
        if getattr(a, k) is not None:
            train[k] = getattr(a, k)
    if {ep.H for ep in eps} != {cfg.H}:
        raise ConfigError(f"policy H={cfg.H} does not match the dataset")
    em = _error_model(a.error_model, a.seed)
    demos = [simenv.scripted_demo(ep, em) for ep in eps[: train["n_demos"]]]
    policy, opt, start = rs.ResidualPolicy(cfg, seed=child_seed(a.seed, "residual-init")), None, 0
    if a.resume:
        meta, params, opt = io.load_checkpoint(_need(a.resume, "checkpoint"))
        policy, start = policy.with_params(params), meta["extra"]["step"]
    try:
        policy, opt, losses = rs.train(policy, demos, train["steps"], train["batch_size"], train["lr"],
                                       child_seed(a.seed, "residual-train"), opt, start)
    except NonFiniteLoss as e:
        raise SystemExit(f"error: training aborted: {e}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    end = start + train["steps"]
    config = {"model": cfg.to_dict(), "train": train, "error_model": em.to_dict(),
              "track_source": "ground-truth"}
    io.save_checkpoint(out / "residual.ckpt", "residual", config, policy.params, opt, {"step": end})
    _write_csv(out / "loss.csv", ["step", "loss"], [(start + i, l) for i, l in enumerate(losses)])
    io.write_artifact(out, "train-residual", config, a.seed, {"data": a.data, "resume": a.resume or ""},
                      {"checkpoint": "residual.ckpt", "step": end})


def cmd_rollout(a):
    eps = {e.episode_id: e for e in _episodes(a.data)}
    plans = _per_episode_files(a.plans)
    tracks = _per_episode_files(a.tracks) if a.tracks else {}
    em = _error_model(a.error_model, a.seed)
    policy = None
    if a.closed_loop:
        policy = load_policy(a.checkpoint)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    wins = 0
    for eid, f in plans.items():
        ep = eps[eid]
        plan = EndEffectorPlan.from_dict(io.read_json(f))
        e_em = M._episode_error_model(em, a.seed, eid)
        goal = simenv.GoalSpec.for_episode(ep)
        if policy is None:
            trace, ok = rs.rollout_open_loop(ep, plan, e_em, goal)
        else:
            tr = np.asarray(io.read_json(tracks[eid])["tracks"]) if eid in tracks else ep.gt_tracks
            sel = rs.select_tracks(tr, policy.config.p, child_seed(a.seed, eid))
            trace, ok = rs.rollout_closed_loop(policy, ep, sel, plan, e_em, goal)
        wins += ok
        io.write_json(out / f"{eid}.json", {"episode_id": eid, "split": ep.split, "success": bool(ok),
                                             "trace": trace.to_dict()})
    mode = "open-loop" if policy is None else f"closed-loop/{policy.config.mode}"
    io.write_artifact(out, "rollout", {"mode": mode, "error_model": em.to_dict()}, a.seed,
                      {"data": a.data, "plans": a.plans, "checkpoint": a.checkpoint or ""},
                      {"rollouts": len(plans), "successes": wins})


def cmd_eval(a):
    eps = _episodes(a.data)
    tracks = _per_episode_files(a.tracks) if a.tracks else {}
    fits = _per_episode_files(a.fits) if a.fits else {}
    roll = {}
    for key, d in (("open_loop_success", a.open_loop), ("closed_loop_success", a.closed_loop),
                   ("actions_success", a.actions)):
        if d:
            roll[key] = {k: io.read_json(v)["success"] for k, v in _per_episode_files(d).items()}
    rows = []
    for ep in eps:
        if ep.split == "train":
            continue
        row = {"split": ep.split, "episode_id": ep.episode_id,
               "excluded_points": int(ep.out_of_frame.any(axis=1).sum())}
        valid = ~ep.out_of_frame
        row["zero_motion_delta_auc"] = M.delta_auc(M.zero_motion(ep.gt_tracks), ep.gt_tracks, valid=valid)
        if ep.episode_id in tracks:
            tr = np.asarray(io.read_json(tracks[ep.episode_id])["tracks"])
            row["delta_auc"] = M.delta_auc(tr, ep.gt_tracks, valid=valid)
        if ep.episode_id in fits:
            rec = io.read_json(fits[ep.episode_id])
            if "per_step_residual" in rec:
                row["fit_residual"] = float(np.mean(rec["per_step_residual"]))
        for key, res in roll.items():
            # an episode without a plan (failed fit) counts as a failed rollout
            row[key] = bool(res.get(ep.episode_id, False))
        rows.append(row)
    report = M.MetricReport(rows, {"seed": a.seed})
    out = Path(a.out)
    io.write_json(out / "report.json", report.to_dict())
    io.write_artifact(out, "eval", {}, a.seed,
                      {k: v for k, v in (("data", a.data), ("tracks", a.tracks), ("fits", a.fits),
                                         ("open_loop", a.open_loop), ("closed_loop", a.closed_loop),
                                         ("actions", a.actions)) if v},
                      {"report": "report.json"})
    print(report.to_text(), end="")


def cmd_report(a):
    rep = M.MetricReport.from_dict(io.read_json(_need(a.report, "report")))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(rep.to_text())
    (out / "report.csv").write_text(rep.to_csv())
    print(rep.to_text(), end="")


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="trackplan", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, required=True, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--config", required=True)

    for name, fn in (("train-tracker", cmd_train_tracker), ("train-residual", cmd_train_residual)):
        p = add(name, fn, f"{name.split('-')[1]} training")
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--resume")
        if name == "train-residual":
            p.add_argument("--error-model")
            p.add_argument("--mode", choices=rs.MODES)

    p = add("predict-tracks", cmd_predict_tracks, "sample tracks for held-out episodes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--ground-truth", action="store_true", help="export ground-truth tracks instead")
    p.add_argument("--splits", nargs="+", default=["MG", "G", "CG", "TG"])
    p.add_argument("--denoise-steps", type=int, default=50)

    p = add("fit", cmd_fit, "recover rigid transforms from tracks")
    p.add_argument("--data", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--config")

    p = add("plan", cmd_plan, "open-loop end-effector plans from fits")
    p.add_argument("--data", required=True)
    p.add_argument("--fits", required=True)

    p = add("rollout", cmd_rollout, "execute plans in the simulator")
    p.add_argument("--data", required=True)
    p.add_argument("--plans", required=True)
    p.add_argument("--tracks")
    p.add_argument("--checkpoint")
    p.add_argument("--error-model")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--open-loop", action="store_true")
    g.add_argument("--closed-loop", action="store_true")

    p = add("eval", cmd_eval, "collect stage outputs into a metric report")
    p.add_argument("--data", required=True)
    p.add_argument("--tracks")
    p.add_argument("--fits")
    p.add_argument("--open-loop")
    p.add_argument("--closed-loop")
    p.add_argument("--actions")

    p = add("report", cmd_report, "render a report as text and CSV")
    p.add_argument("--report", required=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "rollout" and args.closed_loop and not args.checkpoint:
        print("error: --closed-loop needs --checkpoint", file=sys.stderr)
        return 2
    if args.command == "predict-tracks" and not (args.ground_truth or args.checkpoint):
        print("error: predict-tracks needs --checkpoint or --ground-truth", file=sys.stderr)
        return 2
    try:
        args.fn(args)
    except (ConfigError, ShapeMismatch, FileNotFoundError, synth.DegenerateShape) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
