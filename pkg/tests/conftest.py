import numpy as np
import pytest

from trackplan import residual as rp, simenv, synth, trackdiff as td

TINY_TD = td.DenoiserConfig(n_blocks=2, hidden_size=16, n_heads=2, embed_dim=16, H=4,
                            raster_resolution=16, train_points=6, freq_dim=8)
TINY_DATA = synth.DatasetConfig(counts={"train": 3, "MG": 2}, H=4, p_range=(10, 14),
                                raster_resolution=16)
TINY_RP = rp.ResidualPolicyConfig(n_blocks=1, hidden_size=16, n_heads=2, embed_dim=16, h=3,
                                  p=5, H=4, freq_dim=8, raster_resolution=16)


def jitter(params, scale=0.1, seed=0):
    """Random nonzero parameters so zero-initialized paths carry gradient."""
    g = np.random.default_rng(seed)
    return {k: v + scale * g.normal(size=v.shape) for k, v in params.items()}


@pytest.fixture(scope="session")
def tiny_episodes():
    return list(synth.iter_episodes(TINY_DATA))


@pytest.fixture(scope="session")
def tiny_demos(tiny_episodes):
    em = simenv.ErrorModel((0.05, 0.0, 0.0))
    return [simenv.scripted_demo(ep, em) for ep in tiny_episodes]


PIPELINE_DATA = {"counts": {"train": 6, "MG": 2, "G": 2, "CG": 1, "TG": 1}, "H": 4,
                 "p_range": [16, 24], "image_size": 256, "raster_resolution": 16}
PIPELINE_TRAIN = {"model": {"n_blocks": 1, "hidden_size": 16, "n_heads": 2, "embed_dim": 16, "H": 4,
                            "raster_resolution": 16, "train_points": 8, "freq_dim": 8},
                  "train": {"steps": 4, "batch_size": 3, "lr": 1e-3, "K_steps": 100,
                            "eval_every": 2, "eval_episodes": 1, "eval_denoise_steps": 4}}
PIPELINE_POLICY = {"model": {"n_blocks": 1, "hidden_size": 16, "n_heads": 2, "embed_dim": 16, "h": 2,
                             "p": 6, "H": 4, "freq_dim": 8, "raster_resolution": 16},
                   "train": {"steps": 3, "batch_size": 4, "lr": 1e-3, "n_demos": 4}}
PIPELINE_ERRORS = {"grasp_offset": [0.05, 0.0, 0.0], "grasp_radius": 0.15, "action_noise_sigma": 0.001}


def run_pipeline(root, seed=7):
    """Every CLI stage on a tiny config; returns the stage directories."""
    import json
    from pathlib import Path

    from trackplan.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, obj in (("data.json", PIPELINE_DATA), ("train.json", PIPELINE_TRAIN),
                      ("policy.json", PIPELINE_POLICY), ("errors.json", PIPELINE_ERRORS)):
        (root / name).write_text(json.dumps(obj))
    s = ["--seed", str(seed)]
    d = {k: str(root / k) for k in ("data", "tracker", "tracks", "fits", "plans", "residual",
                                    "ablation", "open", "closed", "actions", "eval", "report")}
    steps = [
        ["gen-data", "--config", str(root / "data.json"), "--out", d["data"]],
        ["train-tracker", "--data", d["data"], "--config", str(root / "train.json"), "--out", d["tracker"]],
        ["predict-tracks", "--data", d["data"], "--checkpoint", d["tracker"] + "/tracker.ckpt",
         "--denoise-steps", "5", "--out", d["tracks"]],
        ["fit", "--data", d["data"], "--tracks", d["tracks"], "--out", d["fits"]],
        ["plan", "--data", d["data"], "--fits", d["fits"], "--out", d["plans"]],
        ["train-residual", "--data", d["data"], "--config", str(root / "policy.json"),
         "--error-model", str(root / "errors.json"), "--out", d["residual"]],
        ["train-residual", "--data", d["data"], "--config", str(root / "policy.json"), "--mode", "actions",
         "--error-model", str(root / "errors.json"), "--out", d["ablation"]],
        ["rollout", "--data", d["data"], "--plans", d["plans"], "--open-loop",
         "--error-model", str(root / "errors.json"), "--out", d["open"]],
        ["rollout", "--data", d["data"], "--plans", d["plans"], "--closed-loop", "--tracks", d["tracks"],
         "--checkpoint", d["residual"] + "/residual.ckpt", "--error-model", str(root / "errors.json"),
         "--out", d["closed"]],
        ["rollout", "--data", d["data"], "--plans", d["plans"], "--closed-loop", "--tracks", d["tracks"],
         "--checkpoint", d["ablation"] + "/residual.ckpt", "--error-model", str(root / "errors.json"),
         "--out", d["actions"]],
        ["eval", "--data", d["data"], "--tracks", d["tracks"], "--fits", d["fits"], "--open-loop", d["open"],
         "--closed-loop", d["closed"], "--actions", d["actions"], "--out", d["eval"]],
        ["report", "--report", d["eval"] + "/report.json", "--out", d["report"]],
    ]
    for argv in steps:
        rc = main(argv[:1] + s + argv[1:])
        if rc != 0:
            raise RuntimeError(f"stage {argv[0]} exited with {rc}")
    return d


def pytest_terminal_summary(terminalreporter):
    import test_acceptance as acc

    if acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acc.RESULTS):
            terminalreporter.write_line(acc.RESULTS[n])
