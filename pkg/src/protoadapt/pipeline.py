"""Training orchestration: warm-up, denoised self-training, distillation.

One experiment is a single thread of control: source-only warm-up produces
the frozen boilerplate predictions, stage 1 runs the denoised self-training
loop with consistency learning, and each distillation stage transfers the
current model into a freshly initialised student.  Every run writes a
metrics CSV, SVG plots and a manifest; identical configs and seeds produce
byte-identical CSV/SVG artifacts.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import data as bench
from . import metrics as mt
from .config import StageConfig, canonical_config, content_hash, stage_config, stage_list
from .consistency import (AugmentConfig, augment, soft_assignment,
                          soft_assignment_backward)
from .denoise import (PseudoLabelStore, hard_label, modulation_weights,
                      rectified_labels, rectified_soft, rectify)
from .errors import StateError
from .losses import (ce_loss, kd_loss, kl_consistency, regularizer, sce_loss,
                     sce_loss_soft, total_stage1_loss)
from .nn import EmaEncoder, Network
from .prototypes import (PrototypeBank, batch_centroids, distances,
                         ema_update_prototypes, init_prototypes,
                         write_centroids_csv)

METRIC_FIELDS = ["iter", "stage", "ce_s", "sce_t", "kl", "reg", "total",
                 "source_acc", "target_acc", "pseudo_acc", "proto_drift",
                 "pseudo_miou"]

NAN = float("nan")

# per-preset training defaults tuned for the desk-scale benchmarks; any key
# in the user config overrides these
TOY_DEFAULTS = {
    "gauss-shift": {
        "arch.hidden": [24, 24],
        "arch.feature_dim": 8,
        "warmup.epochs": 12,
        "warmup.lr": 0.1,
        "stage1.epochs": 20,
        "stage1.lr": 0.1,
        "stage1.ema_decay": 0.99,
        "distill1.epochs": 10,
        "distill1.lr": 0.04,
        "distill2.epochs": 10,
        "distill2.lr": 0.04,
    },
    "moons-shift": {
        "arch.hidden": [24, 24],
        "arch.feature_dim": 8,
        "warmup.epochs": 12,
        "warmup.lr": 0.1,
        "stage1.epochs": 120,
        "stage1.lr": 0.12,
        "stage1.lr_decay": 0.97,
        "stage1.tau": 2.0,
        "stage1.gamma2": 0.02,
        "stage1.ema_decay": 0.99,
        "distill1.epochs": 10,
        "distill1.lr": 0.04,
        "distill2.epochs": 10,
        "distill2.lr": 0.04,
    },
}


def derive_seed(seed: int, tag: str) -> np.random.SeedSequence:
    """Independent, reproducible seed stream per (run seed, purpose)."""
    return np.random.SeedSequence((int(seed), zlib.crc32(tag.encode("utf-8"))))


def _seed_int(seed: int, tag: str) -> int:
    return int(derive_seed(seed, tag).generate_state(1)[0])


def _augment_config(cfg: StageConfig) -> AugmentConfig:
    return AugmentConfig(cfg.weak_jitter_std, cfg.strong_jitter_std,
                         cfg.strong_drop_prob,
                         (cfg.strong_scale_lo, cfg.strong_scale_hi))


def _check_finite(value: float, what: str, iteration: int) -> None:
    if not np.isfinite(value):
        raise StateError(f"{what} became non-finite at iteration {iteration}")


class _SourceCycler:
    """Deterministic endless stream of shuffled source batches."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.ptr = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.ptr >= self.n:
                self.order = self.rng.permutation(self.n)
                self.ptr = 0
            chunk = self.order[self.ptr:self.ptr + count]
            out.append(chunk)
            self.ptr += len(chunk)
            count -= len(chunk)
        return np.concatenate(out)


# -- warm-up -----------------------------------------------------------------


class WarmupResult(NamedTuple):
    net: Network
    history: list          # (epoch, mean_ce, source_acc)
    eval_rows: list


def warmup(source_x, source_y, net: Network, cfg: StageConfig,
           eval_fn=None) -> WarmupResult:
    """Source-only cross-entropy training until the accuracy plateaus.

    Stops when source accuracy improved by less than half a point over the
    last three epochs, or at the epoch cap.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "warmup"))
    n = len(source_x)
    history = []
    eval_rows = []
    velocity = None
    it = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rec = net.forward_recorded(source_x[idx])
            ce = ce_loss(rec.probs, source_y[idx], cfg.clamp_floor)
            _check_finite(ce.value, "warm-up loss", it)
            grads = net.backward(rec, grad_logits=ce.grad_logits)
            velocity = net.apply_gradients(grads, lr, velocity, cfg.momentum)
            epoch_loss += ce.value
            batches += 1
            it += 1
        _, probs = net.forward(source_x)
        acc = float((probs.argmax(axis=1) == source_y).mean())
        history.append((epoch, epoch_loss / max(batches, 1), acc))
        if eval_fn is not None:
            row = eval_fn(net, it, {"ce_s": epoch_loss / max(batches, 1)})
            if row is not None:
                eval_rows.append(row)
        if epoch >= 3 and acc - history[epoch - 3][2] < 0.005:
            break
    if eval_fn is not None and not history:
        row = eval_fn(net, 0, {"ce_s": NAN})
        if row is not None:
            eval_rows.append(row)
    return WarmupResult(net, history, eval_rows)


def generate_boilerplate(net: Network, target_x, temperature: float = 1.0
                         ) -> PseudoLabelStore:
    """Freeze the warmed-up model's soft predictions for every target sample."""
    _, probs = net.forward(target_x)
    return PseudoLabelStore(probs, temperature)


# -- stage 1: denoised self-training + structure learning ---------------------


class Stage1Result(NamedTuple):
    net: Network
    ema: EmaEncoder
    bank: PrototypeBank
    store: PseudoLabelStore
    eval_rows: list


def run_stage1(source_x, source_y, target_x, store: PseudoLabelStore,
               net: Network, cfg: StageConfig, eval_fn=None) -> Stage1Result:
    """The online-denoising training loop.

    Per iteration: source CE step, pseudo-label rectification from momentum
    features, target SCE step, consistency + regulariser step, prototype
    EMA update, momentum-encoder update.
    """
    n_t = len(target_x)
    class_count = store.class_count
    feats0 = net.features(target_x)
    bank = init_prototypes(feats0, hard_label(store.boilerplate, 0.0),
                           class_count, cfg.proto_momentum)
    if not bank.seen.any():
        raise StateError("degenerate prototype bank: no class was ever seen")
    ema = EmaEncoder(net)
    aug_cfg = _augment_config(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "stage1"))
    source = _SourceCycler(len(source_x), rng)
    vel_src = vel_sce = vel_cons = None
    eval_rows = []
    it = 0
    last_eval = -1

    def emit(losses):
        nonlocal last_eval
        if eval_fn is None:
            return
        row = eval_fn(net, ema, bank, it, losses)
        if row is not None:
            eval_rows.append(row)
        last_eval = it

    emit({})
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        t_order = rng.permutation(n_t)
        for start in range(0, n_t, cfg.batch_size):
            t_idx = t_order[start:start + cfg.batch_size]
            xb = target_x[t_idx]

            # source supervision
            s_idx = source.take(cfg.batch_size)
            rec_s = net.forward_recorded(source_x[s_idx])
            ce_s = ce_loss(rec_s.probs, source_y[s_idx], cfg.clamp_floor)
            _check_finite(ce_s.value, "source CE", it)
            grads = net.backward(rec_s, grad_logits=ce_s.grad_logits)
            vel_src = net.apply_gradients(grads, lr, vel_src, cfg.momentum)

            # trust weights from the momentum encoder, then refresh labels
            feats_t = ema.features(xb)
            if cfg.omega_mode == "prototype":
                omega = modulation_weights(distances(bank, feats_t), cfg.tau)
            else:
                omega = np.full((len(t_idx), class_count), 1.0 / class_count)
            if cfg.label_mode == "dynamic":
                _, base = net.forward(xb)
            else:
                base = store.boilerplate[t_idx]
            labels_b = rectify(store, omega, rows=t_idx,
                               threshold=cfg.rectify_threshold, base_probs=base)

            # target classification step on the refreshed labels
            rec_t = net.forward_recorded(xb)
            if cfg.label_form == "soft":
                sce = sce_loss_soft(rec_t.probs, rectified_soft(base, omega),
                                    cfg.alpha, cfg.beta_sce, cfg.clamp_floor)
            else:
                sce = sce_loss(rec_t.probs, labels_b, cfg.alpha, cfg.beta_sce,
                               cfg.clamp_floor)
            _check_finite(sce.value, "target SCE", it)
            grads = net.backward(rec_t, grad_logits=sce.grad_logits)
            vel_sce = net.apply_gradients(grads, lr, vel_sce, cfg.momentum)

            # consistency between views plus the anti-degeneration term
            kl_val = reg_val = NAN
            if cfg.gamma1 > 0.0 or cfg.gamma2 > 0.0:
                x_strong = augment(xb, aug_cfg, "strong", cfg.seed, it, t_idx)
                rec_a = net.forward_recorded(x_strong)
                grad_feat = None
                grad_logits = None
                if cfg.gamma1 > 0.0:
                    x_weak = augment(xb, aug_cfg, "weak", cfg.seed, it, t_idx)
                    z_weak = soft_assignment(ema.features(x_weak), bank, cfg.tau)
                    z_strong = soft_assignment(rec_a.acts[-1], bank, cfg.tau)
                    kl = kl_consistency(z_weak, z_strong, cfg.clamp_floor)
                    kl_val = kl.value
                    grad_feat = cfg.gamma1 * soft_assignment_backward(
                        rec_a.acts[-1], bank, cfg.tau, z_strong, kl.grad_target)
                if cfg.gamma2 > 0.0:
                    reg = regularizer(rec_a.probs, cfg.clamp_floor)
                    reg_val = reg.value
                    grad_logits = cfg.gamma2 * reg.grad_logits
                grads = net.backward(rec_a, grad_logits=grad_logits,
                                     grad_features=grad_feat)
                vel_cons = net.apply_gradients(grads, lr, vel_cons, cfg.momentum)

            # prototype EMA from the momentum features of this batch
            cents, counts = batch_centroids(feats_t, labels_b, class_count)
            ema_update_prototypes(bank, cents, counts)
            ema.update(net, cfg.ema_decay)

            it += 1
            if it % cfg.eval_interval == 0:
                total = total_stage1_loss(
                    ce_s.value, sce.value,
                    kl_val if cfg.gamma1 > 0 else 0.0,
                    reg_val if cfg.gamma2 > 0 else 0.0,
                    cfg.gamma1, cfg.gamma2)
                emit({"ce_s": ce_s.value, "sce_t": sce.value, "kl": kl_val,
                      "reg": reg_val, "total": total})
    if last_eval != it:
        emit({})
    return Stage1Result(net, ema, bank, store, eval_rows)


# -- distillation -------------------------------------------------------------


class DistillResult(NamedTuple):
    student: Network
    pseudo: np.ndarray
    eval_rows: list


def contrastive_pretrain(net: Network, x, cfg: StageConfig, tag: str = "pretrain"
                         ) -> Network:
    """Instance-matching warm start for a fresh student's feature extractor.

    Two jittered views of a point must land closer to each other than to the
    views of other batch members, by at least a margin.  Only the feature
    extractor receives gradient.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, tag))
    n = len(x)
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = x[idx]
            view1 = xb + cfg.pretrain_jitter * rng.standard_normal(xb.shape)
            view2 = xb + cfg.pretrain_jitter * rng.standard_normal(xb.shape)
            rec1 = net.forward_recorded(view1)
            rec2 = net.forward_recorded(view2)
            z1, z2 = rec1.acts[-1], rec2.acts[-1]
            roll = np.roll(np.arange(len(idx)), -1)
            diff_pos = z1 - z2
            diff_neg = z1 - z2[roll]
            d_pos = np.sqrt((diff_pos ** 2).sum(axis=1))
            d_neg = np.sqrt((diff_neg ** 2).sum(axis=1))
            active = (d_pos - d_neg + cfg.pretrain_margin > 0)[:, None]
            b = len(idx)
            u_pos = diff_pos / np.maximum(d_pos, 1e-12)[:, None]
            u_neg = diff_neg / np.maximum(d_neg, 1e-12)[:, None]
            g1 = np.where(active, (u_pos - u_neg) / b, 0.0)
            g2 = np.where(active, -u_pos / b, 0.0)
            np.add.at(g2, roll, np.where(active, u_neg / b, 0.0))
            grads1 = net.backward(rec1, grad_features=g1)
            grads2 = net.backward(rec2, grad_features=g2)
            net.apply_gradients([a + c for a, c in zip(grads1, grads2)],
                                cfg.pretrain_lr)
    return net


def run_distill_stage(teacher: Network, source_x, source_y, target_x,
                      cfg: StageConfig, stage_name: str = "distill1",
                      eval_fn=None) -> DistillResult:
    """Transfer the teacher into a student via hard pseudo labels plus KL.

    Teacher predictions are computed once and stay fixed for the stage; the
    student starts from the configured initialisation.
    """
    _, teacher_probs = teacher.forward(target_x)
    pseudo = hard_label(teacher_probs, cfg.kd_threshold)
    if cfg.student_init == "resume":
        student = teacher.copy()
    else:
        student = Network(teacher.in_dim, teacher.hidden, teacher.feature_dim,
                          teacher.classes,
                          seed=derive_seed(cfg.seed, stage_name + ".init"))
        if cfg.student_init == "fresh-pretrained":
            contrastive_pretrain(student, target_x, cfg, tag=stage_name + ".pre")
    rng = np.random.default_rng(derive_seed(cfg.seed, stage_name))
    source = _SourceCycler(len(source_x), rng)
    n_t = len(target_x)
    velocity = None
    eval_rows = []
    it = 0
    last_eval = -1

    def emit(losses):
        nonlocal last_eval
        if eval_fn is None:
            return
        row = eval_fn(student, it, losses)
        if row is not None:
            eval_rows.append(row)
        last_eval = it

    emit({})
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        t_order = rng.permutation(n_t)
        for start in range(0, n_t, cfg.batch_size):
            t_idx = t_order[start:start + cfg.batch_size]
            s_idx = source.take(cfg.batch_size)
            rec_s = student.forward_recorded(source_x[s_idx])
            rec_t = student.forward_recorded(target_x[t_idx])
            kd = kd_loss(rec_s.probs, source_y[s_idx], rec_t.probs,
                         teacher_probs[t_idx], cfg.kd_threshold, cfg.beta_kd,
                         cfg.clamp_floor)
            _check_finite(kd.value, "distillation loss", it)
            grads_s = student.backward(rec_s, grad_logits=kd.grad_source_logits)
            grads_t = student.backward(rec_t, grad_logits=kd.grad_target_logits)
            grads = [a + c for a, c in zip(grads_s, grads_t)]
            velocity = student.apply_gradients(grads, lr, velocity, cfg.momentum)
            it += 1
            if it % cfg.eval_interval == 0:
                emit({"ce_s": kd.source_ce, "sce_t": kd.target_ce,
                      "kl": kd.kl, "total": kd.value})
    if last_eval != it:
        emit({})
    return DistillResult(student, pseudo, eval_rows)


# -- whole experiment ---------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    content_hash: str
    baseline_target_acc: float
    stages: list
    wall_clock_s: float
    failure_stage: str = ""


def write_manifest(manifest: RunManifest, path) -> None:
    path = Path(path)
    if path.exists():
        raise StateError(f"manifest already written: {path}")
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True),
                    encoding="utf-8")


def _fmt_cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".10g")


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(METRIC_FIELDS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row.get(f, NAN)) for f in METRIC_FIELDS)
                     + "\n")


def write_features_csv(path, features, labels, pseudo) -> None:
    features = np.asarray(features)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        cols = ",".join(f"f{i}" for i in range(features.shape[1]))
        fh.write(f"id,{cols},y,pseudo\n")
        for i, row in enumerate(features):
            coords = ",".join(format(v, ".10g") for v in row)
            fh.write(f"{i},{coords},{labels[i]},{pseudo[i]}\n")


def run_experiment(cfg: dict, out_dir) -> RunManifest:
    """Warm-up, then every configured stage; writes all artifacts to out_dir."""
    from .report import emit_plots

    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preset_name = cfg.get("preset", "gauss-shift")
    cfg = {**TOY_DEFAULTS.get(preset_name, {}), **cfg}
    seed = int(cfg.get("seed", 0))

    spec = bench.preset(preset_name)
    overrides = {"seed": _seed_int(seed, "data")}
    if "data.n_samples" in cfg:
        overrides["n_samples"] = int(cfg["data.n_samples"])
    spec = replace(spec, **overrides)
    dataset = bench.generate(spec)
    bench.export_dataset(out_dir / "dataset", spec, dataset)
    truth = mt.reveal(dataset.target_truth)

    hidden_layers = cfg.get("arch.hidden", [24, 24])
    if not isinstance(hidden_layers, list):
        hidden_layers = [hidden_layers]
    feature_dim = int(cfg.get("arch.feature_dim", 2))
    net = Network(spec.dim, hidden_layers, feature_dim, spec.class_count,
                  seed=derive_seed(seed, "init"))

    csv_rows = []
    summaries = []
    failure = ""
    store = None
    bank = None

    def base_row(stage, iteration, losses, model, pseudo=None, drift=NAN):
        _, tgt_probs = model.forward(dataset.target_x)
        report = mt.evaluate(tgt_probs.argmax(axis=1), dataset.target_truth,
                             spec.class_count, pseudo=pseudo,
                             proto_drift_value=drift)
        _, src_probs = model.forward(dataset.source_x)
        src_acc = float((src_probs.argmax(axis=1) == dataset.source_y).mean())
        row = {"iter": iteration, "stage": stage, "ce_s": NAN, "sce_t": NAN,
               "kl": NAN, "reg": NAN, "total": NAN, "source_acc": src_acc,
               "target_acc": report.accuracy, "pseudo_acc": report.pseudo_accuracy,
               "proto_drift": report.proto_drift, "pseudo_miou": report.pseudo_miou}
        row.update(losses)
        csv_rows.append(row)
        return row

    def warmup_eval(model, iteration, losses):
        return base_row("warmup", iteration, losses, model)

    def stage1_eval_factory(scfg: StageConfig, the_store: PseudoLabelStore):
        def stage1_eval(model, ema_enc, proto_bank, iteration, losses):
            feats = ema_enc.features(dataset.target_x)
            if scfg.omega_mode == "prototype":
                omega = modulation_weights(distances(proto_bank, feats), scfg.tau)
            else:
                omega = np.full((len(dataset.target_x), spec.class_count),
                                1.0 / spec.class_count)
            if scfg.label_mode == "dynamic":
                _, base = model.forward(dataset.target_x)
            else:
                base = the_store.boilerplate
            pseudo = rectified_labels(base, omega, scfg.rectify_threshold)
            drift = mt.prototype_drift(proto_bank.centroids, proto_bank.seen,
                                       feats, truth)
            return base_row("stage1", iteration, losses, model, pseudo, drift)
        return stage1_eval

    def distill_eval_factory(stage_name, pseudo_labels):
        def distill_eval(model, iteration, losses):
            return base_row(stage_name, iteration, losses, model,
                            pseudo=pseudo_labels)
        return distill_eval

    baseline_acc = NAN
    current_stage = "warmup"
    try:
        wcfg = stage_config(cfg, "warmup")
        warmup(dataset.source_x, dataset.source_y, net, wcfg,
               eval_fn=warmup_eval)
        _, probs = net.forward(dataset.target_x)
        baseline_acc = float((probs.argmax(axis=1) == truth).mean())
        summaries.append({"stage": "warmup", "target_acc": baseline_acc})

        for stage in stage_list(cfg):
            current_stage = stage
            scfg = stage_config(cfg, stage)
            if stage == "stage1":
                store = generate_boilerplate(net, dataset.target_x, scfg.tau)
                result = run_stage1(dataset.source_x, dataset.source_y,
                                    dataset.target_x, store, net, scfg,
                                    eval_fn=stage1_eval_factory(scfg, store))
                net = result.net
                bank = result.bank
            else:
                _, tprobs = net.forward(dataset.target_x)
                stage_pseudo = hard_label(tprobs, scfg.kd_threshold)
                result = run_distill_stage(net, dataset.source_x,
                                           dataset.source_y, dataset.target_x,
                                           scfg, stage_name=stage,
                                           eval_fn=distill_eval_factory(
                                               stage, stage_pseudo))
                net = result.student
            _, probs = net.forward(dataset.target_x)
            summaries.append({"stage": stage,
                              "target_acc": float((probs.argmax(axis=1) == truth).mean())})
    except StateError as exc:
        failure = f"{current_stage}: {exc}"

    write_metrics_csv(csv_rows, out_dir / "metrics.csv")
    feats, probs = net.forward(dataset.target_x)
    pseudo_final = store.current_hard if store is not None else probs.argmax(axis=1)
    write_features_csv(out_dir / "target_features.csv", feats, truth, pseudo_final)
    proto_csv = None
    if bank is not None:
        proto_csv = out_dir / "prototypes.csv"
        write_centroids_csv(bank, proto_csv)
    emit_plots(out_dir / "metrics.csv", out_dir / "target_features.csv", out_dir,
               prototypes_csv=proto_csv)

    manifest = RunManifest(
        config={k: cfg[k] for k in sorted(cfg)},
        content_hash=content_hash([canonical_config(cfg)]),
        baseline_target_acc=baseline_acc,
        stages=summaries,
        wall_clock_s=time.perf_counter() - t0,
        failure_stage=failure,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
