"""Shared experiment helpers for pipeline and acceptance tests.

Warm-ups are cached per (seed, preset) so the many ablation arms reuse them;
every config is resolved through the same TOY_DEFAULTS + stage_config path
the experiment runner uses.
"""

import dataclasses

import numpy as np

from protoadapt.config import stage_config
from protoadapt.data import generate, preset
from protoadapt.denoise import modulation_weights, rectified_labels
from protoadapt.metrics import reveal
from protoadapt.nn import Network
from protoadapt.pipeline import (TOY_DEFAULTS, derive_seed, generate_boilerplate,
                                 run_distill_stage, run_stage1, warmup, _seed_int)
from protoadapt.prototypes import distances

_warm_cache = {}


def merged_config(preset_name, seed):
    return {**TOY_DEFAULTS[preset_name], "preset": preset_name, "seed": seed}


def warmed(seed, preset_name="gauss-shift"):
    """Dataset, hidden truth and a warmup-trained network (fresh copy)."""
    key = (seed, preset_name)
    if key not in _warm_cache:
        spec = dataclasses.replace(preset(preset_name), seed=_seed_int(seed, "data"))
        data = generate(spec)
        cfg = merged_config(preset_name, seed)
        net = Network(spec.dim, cfg["arch.hidden"], cfg["arch.feature_dim"],
                      spec.class_count, seed=derive_seed(seed, "init"))
        warmup(data.source_x, data.source_y, net, stage_config(cfg, "warmup"))
        _warm_cache[key] = (data, net)
    data, net = _warm_cache[key]
    return data, reveal(data.target_truth), net.copy()


def target_accuracy(net, data, truth) -> float:
    _, probs = net.forward(data.target_x)
    return float((probs.argmax(axis=1) == truth).mean())


def stage1_run(seed, preset_name="gauss-shift", track=False, **overrides):
    """Warm-up + stage 1 with the preset toy defaults and field overrides.

    Returns (final_target_acc, trained_net, trajectory) where trajectory rows
    are (iteration, target_acc, pseudo_acc).
    """
    data, truth, net = warmed(seed, preset_name)
    scfg = stage_config(merged_config(preset_name, seed), "stage1")
    if overrides:
        scfg = dataclasses.replace(scfg, **overrides)
    store = generate_boilerplate(net, data.target_x, scfg.tau)
    traj = []

    def eval_fn(model, ema, bank, it, losses):
        _, probs = model.forward(data.target_x)
        feats = ema.features(data.target_x)
        if scfg.omega_mode == "prototype":
            omega = modulation_weights(distances(bank, feats), scfg.tau)
        else:
            omega = np.full(probs.shape, 1.0 / store.class_count)
        base = probs if scfg.label_mode == "dynamic" else store.boilerplate
        pseudo = rectified_labels(base, omega, scfg.rectify_threshold)
        keep = pseudo != -1
        pseudo_acc = float((pseudo[keep] == truth[keep]).mean()) if keep.any() else 0.0
        traj.append((it, float((probs.argmax(axis=1) == truth).mean()), pseudo_acc))
        return None

    run_stage1(data.source_x, data.source_y, data.target_x, store, net, scfg,
               eval_fn=eval_fn if track else None)
    return target_accuracy(net, data, truth), net, traj


ABLATION_ARMS = {
    "vanilla": dict(omega_mode="uniform", gamma1=0.0, gamma2=0.0),
    "denoise": dict(omega_mode="prototype", gamma1=0.0, gamma2=0.0),
    "structure": dict(omega_mode="uniform", gamma1=10.0, gamma2=0.1),
    "full": dict(omega_mode="prototype", gamma1=10.0, gamma2=0.1),
}

_ablation_cache = {}


def ablation_results(seeds=range(5)):
    """Final target accuracy per arm per seed on gauss-shift; cached."""
    key = tuple(seeds)
    if key not in _ablation_cache:
        out = {}
        for arm, overrides in ABLATION_ARMS.items():
            out[arm] = [stage1_run(s, **overrides)[0] for s in seeds]
        _ablation_cache[key] = out
    return _ablation_cache[key]


_teacher_cache = {}


def stage1_teacher(seed):
    """The full-configuration stage-1 model for distillation tests; cached."""
    if seed not in _teacher_cache:
        acc, net, _ = stage1_run(seed)
        _teacher_cache[seed] = (acc, net)
    acc, net = _teacher_cache[seed]
    return acc, net.copy()


def distill_chain(seed, stages=2, **overrides):
    """stage-1 teacher -> N successive distillation stages; returns accuracies."""
    data, truth, _ = warmed(seed)
    teacher_acc, net = stage1_teacher(seed)
    accs = [teacher_acc]
    for i in range(stages):
        name = f"distill{i + 1}"
        dcfg = stage_config(merged_config("gauss-shift", seed), name)
        if overrides:
            dcfg = dataclasses.replace(dcfg, **overrides)
        result = run_distill_stage(net, data.source_x, data.source_y,
                                   data.target_x, dcfg, stage_name=name)
        net = result.student
        accs.append(target_accuracy(net, data, truth))
    return accs


def drawdown(series):
    peak = -np.inf
    worst = 0.0
    for v in series:
        peak = max(peak, v)
        worst = max(worst, peak - v)
    return worst
