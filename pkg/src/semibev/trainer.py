"""Mean-Teacher training loop with flip consistency and conjoint rotation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import flip_pair, random_conjoint_rotate
from .config import TrainConfig, dump_config
from .evaluation import EvalReport, evaluate, format_metric
from .losses import (dice_loss, feat_consistency, flip_x, seg_consistency,
                     total_loss)
from .model import ModelParams, ema_update, forward, init_model, save_checkpoint
from .seeding import rng_for
from .synthworld import CLASS_NAMES, Sample, load_dataset, read_manifest

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss went non-finite; carries the path of the diagnostic dump."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- batches

class CyclingSampler:
    """Endless stream over a dataset, reshuffled at the start of every pass."""

    def __init__(self, items: list, seed: int, name: str):
        if not items:
            raise ValueError(f"{name} dataset is empty")
        self.items = items
        self.seed = seed
        self.name = name
        self.cycle = 0
        self._order = self._shuffle()
        self._pos = 0

    def _shuffle(self) -> np.ndarray:
        return rng_for(self.seed, "order", self.name, self.cycle).permutation(len(self.items))

    def take(self, k: int) -> list:
        out = []
        for _ in range(k):
            if self._pos == len(self._order):
                self.cycle += 1
                self._order = self._shuffle()
                self._pos = 0
            out.append(self.items[self._order[self._pos]])
            self._pos += 1
        return out


def make_batch(labeled: CyclingSampler, unlabeled: CyclingSampler | None,
               batch_size: int) -> tuple[list, list]:
    """Half labeled, half unlabeled."""
    if batch_size % 2:
        raise ValueError("batch_size must be even")
    half = batch_size // 2
    return labeled.take(half), (unlabeled.take(half) if unlabeled is not None else [])


def augment_batch(samples: list[Sample], cfg: TrainConfig, step: int, tag: str) -> list[Sample]:
    out = []
    for slot, s in enumerate(samples):
        rng = rng_for(cfg.seed, "augment", step, tag, slot)
        out.append(random_conjoint_rotate(s, rng, cfg.augment)[0])
    return out


# ------------------------------------------------------------------- step

@dataclass
class StepResult:
    l_sup: float
    l_sc: float
    l_fc: float
    total: float
    student_grads: dict
    teacher_grads: dict


def _stack(samples: list[Sample]):
    return np.stack([s.image for s in samples]), [s.intrinsics for s in samples]


def ema_decay_at(cfg: TrainConfig, step: int) -> float:
    """EMA factor for update number ``step`` (0-based)."""
    if cfg.ema_warmup:
        return min(cfg.ema_decay, 1.0 - 1.0 / (step + 1))
    return cfg.ema_decay


def train_step(student: ModelParams, teacher: ModelParams, batch: tuple[list, list],
               cfg: TrainConfig, adam: AdamState, lr: float, step: int = 0,
               dump_dir=None) -> StepResult:
    """Student losses + Adam update, then the teacher EMA update.

    The teacher forward pass runs before the EMA update, on the previous
    teacher weights. Teacher parameters never enter the tape.
    """
    labeled, unlabeled = batch
    w = cfg.loss_weights
    student.zero_grad()
    teacher.zero_grad()
    with T.Tape():
        imgs, Ks = _stack(labeled)
        out = forward(student, imgs, Ks)
        gt = np.stack([s.gt_bev.values for s in labeled]).astype(np.float64)
        l_sup = dice_loss(out.segmentation, gt)
        if unlabeled and cfg.semi_supervised:
            u_imgs, u_Ks = _stack(unlabeled)
            with T.no_grad():
                t_out = forward(teacher, u_imgs, u_Ks)
            f_imgs, f_Ks = _stack([flip_pair(s) for s in unlabeled])
            s_out = forward(student, f_imgs, f_Ks)
            l_sc = seg_consistency(t_out.segmentation, flip_x(s_out.segmentation))
            l_fc = feat_consistency(t_out.bev_feature, flip_x(s_out.bev_feature))
        else:
            l_sc = T.zeros(())
            l_fc = T.zeros(())
        loss = total_loss(l_sup, l_sc, l_fc, w)
        values = (l_sup.item(), l_sc.item(), l_fc.item(), loss.item())
        if not all(math.isfinite(v) for v in values):
            path = _dump(dump_dir, step, values, student)
            raise NumericalError(f"non-finite loss at step {step}: {values}", path)
        grads = T.backward(loss, list(student.values()))

    student_grads = dict(zip(student.names(), grads))
    teacher_grads = {n: (t.grad if t.grad is not None else np.zeros(t.shape)) for n, t in teacher.items()}
    adam_step(student, student_grads, adam, lr)
    ema_update(teacher, student, ema_decay_at(cfg, step))
    return StepResult(*values, student_grads, teacher_grads)


def _dump(dump_dir, step, values, params: ModelParams) -> str | None:
    lines = [f"step\t{step}", "l_sup\tl_sc\tl_fc\ttotal", "\t".join(repr(v) for v in values)]
    for name, t in params.items():
        finite = np.isfinite(t.data)
        absmax = float(np.abs(t.data[finite]).max()) if finite.any() else float("nan")
        lines.append(f"{name}\tfinite={bool(finite.all())}\tabsmax_finite={absmax:.6g}")
    text = "\n".join(lines) + "\n"
    log.error("non-finite loss, state:\n%s", text)
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"nonfinite_step{step}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


# ------------------------------------------------------------------ train

METRIC_COLUMNS = (["epoch", "L_sup", "L_sc", "L_fc"]
                  + [f"IoU_{c}" for c in CLASS_NAMES] + ["mIoU"])


def metrics_row(epoch: int, losses: tuple, report: EvalReport | None) -> str:
    cells = [str(epoch)] + [f"{v:.6f}" for v in losses]
    if report is None:
        cells += ["-"] * (len(CLASS_NAMES) + 1)
    else:
        cells += [format_metric(v) for v in report.iou] + [format_metric(report.miou)]
    return "\t".join(cells)


@dataclass
class TrainResult:
    teacher: ModelParams
    student: ModelParams
    rows: list[str]
    last_report: EvalReport | None
    out_dir: Path


def load_training_data(cfg: TrainConfig):
    root = Path(cfg.train_dir)
    if not (root / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no dataset at {root} (manifest.tsv missing)")
    grid = cfg.model.grid
    labeled = load_dataset(root, grid, split="labeled")
    n_unlabeled = sum(1 for _, sp in read_manifest(root) if sp == "unlabeled")
    unlabeled = []
    if cfg.semi_supervised:
        unlabeled = load_dataset(root, grid, split="unlabeled", with_labels=False)
        if cfg.unlabeled_includes_labeled:
            unlabeled += [Sample(s.image, s.intrinsics, None, s.visibility, s.id) for s in labeled]
    return labeled, unlabeled, n_unlabeled


def load_eval_data(cfg: TrainConfig) -> list[Sample]:
    root = Path(cfg.eval_dir)
    if not (root / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no eval dataset at {root} (manifest.tsv missing)")
    return load_dataset(root, cfg.model.grid)


def train(cfg: TrainConfig, labeled=None, unlabeled=None, eval_set=None,
          n_unlabeled: int | None = None) -> TrainResult:
    """Run the full schedule and write checkpoints plus ``metrics.tsv``.

    Datasets are read from ``cfg.train_dir`` / ``cfg.eval_dir`` unless
    passed in. The number of steps per epoch is set by the larger of the
    labeled and unlabeled splits on disk, whether or not the unlabeled
    images are used, so every ablation arm takes the same number of steps.
    """
    if labeled is None:
        labeled, unlabeled, n_unlabeled = load_training_data(cfg)
    if eval_set is None:
        eval_set = load_eval_data(cfg)
    unlabeled = unlabeled or []
    if n_unlabeled is None:
        n_unlabeled = len(unlabeled)
    if cfg.semi_supervised and not unlabeled:
        raise ValueError("consistency losses are on but there is no unlabeled data")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(dump_config(cfg))

    student = init_model(cfg.model, rng_for(cfg.seed, "init", "student"), requires_grad=True)
    teacher = init_model(cfg.model, rng_for(cfg.seed, "init", "teacher"), requires_grad=False)
    adam = AdamState()

    half = cfg.batch_size // 2
    steps_per_epoch = math.ceil(max(len(labeled), n_unlabeled) / half)
    lab_stream = CyclingSampler(labeled, cfg.seed, "labeled")
    unl_stream = CyclingSampler(unlabeled, cfg.seed, "unlabeled") if unlabeled and cfg.semi_supervised else None

    rows = []
    header = "\t".join(METRIC_COLUMNS)
    metrics_path = out_dir / "metrics.tsv"
    metrics_path.write_text(header + "\n")
    report = None
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_initial if epoch < cfg.decay_epoch else cfg.lr_final
        sums = np.zeros(3)
        for _ in range(steps_per_epoch):
            lab, unl = make_batch(lab_stream, unl_stream, cfg.batch_size)
            batch = (augment_batch(lab, cfg, step, "L"), augment_batch(unl, cfg, step, "U"))
            res = train_step(student, teacher, batch, cfg, adam, lr, step, dump_dir=out_dir)
            sums += (res.l_sup, res.l_sc, res.l_fc)
            step += 1
        means = tuple(sums / steps_per_epoch)
        epoch_report = None
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            epoch_report = evaluate(teacher, eval_set, cfg.threshold)
            report = epoch_report
        row = metrics_row(epoch + 1, means, epoch_report)
        rows.append(row)
        with open(metrics_path, "a") as f:
            f.write(row + "\n")
        log.info("epoch %d  L_sup %.4f  L_sc %.5f  L_fc %.5f  mIoU %s", epoch + 1, *means,
                 format_metric(epoch_report.miou) if epoch_report else "-")

    save_checkpoint(teacher, out_dir / "teacher_final.ckpt")
    save_checkpoint(student, out_dir / "student_final.ckpt")
    return TrainResult(teacher, student, rows, report, out_dir)
