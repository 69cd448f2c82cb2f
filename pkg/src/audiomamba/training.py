"""Multi-label training loop: BCE-on-logits loss, CutMix, AdamW-style
optimizer with warmup+cosine schedule, manifest handling, and evaluation.

Determinism: the batch schedule, CutMix draws, and drop-path draws are all
derived from (seed, step), never from ambient RNG state, so an interrupted
run resumed from a checkpoint retraces the identical trajectory.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import frontend
from . import metrics
from . import tensor as T
from .backbone import AudioMambaModel
from .config import TrainConfig
from .metrics import EvalReport
from .tensor import Tensor


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    path: str
    labels: list[int]


@dataclass
class Manifest:
    rows: list[ManifestRow]
    n_classes: int
    split: str = "train"

    def __len__(self):
        return len(self.rows)

    def targets(self) -> np.ndarray:
        out = np.zeros((len(self.rows), self.n_classes), dtype=np.float32)
        for i, row in enumerate(self.rows):
            out[i, row.labels] = 1.0
        return out


def load_manifest(path, n_classes: int, split: str = "train") -> Manifest:
    """CSV with header `path,labels`; labels are semicolon-separated ids."""
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "labels"]:
            raise DataError(f"{path}: expected header 'path,labels', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) < 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(rec)}")
            p = rec[0].strip()
            if p in seen:
                raise DataError(f"{path}:{lineno}: duplicate path '{p}'")
            seen.add(p)
            labels = []
            for tok in rec[1].split(";"):
                tok = tok.strip()
                if not tok:
                    continue
                try:
                    lab = int(tok)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer label '{tok}'") from None
                if not 0 <= lab < n_classes:
                    raise DataError(f"{path}:{lineno}: label {lab} outside [0, {n_classes})")
                labels.append(lab)
            rows.append(ManifestRow(path=p, labels=labels))
    return Manifest(rows=rows, n_classes=n_classes, split=split)


# ---------------------------------------------------------------------------
# loss & augmentation
# ---------------------------------------------------------------------------

def bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, log-sum-exp stable; targets may
    be soft (CutMix mixing)."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    if np.any(targets < 0) or np.any(targets > 1):
        raise DataError("targets must lie in [0, 1]")
    # -[t log s(z) + (1-t) log(1-s(z))] == softplus(z) - z*t
    per = T.sub(T.softplus(logits), T.mul(logits, Tensor(targets)))
    return T.tmean(per)


def cutmix(batch: np.ndarray, targets: np.ndarray, alpha: float,
           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Paste a rectangle from a shuffled partner into each sample and mix
    labels by the exact integer pasted-area fraction."""
    B = batch.shape[0]
    if B < 2:
        raise DataError("cutmix needs a batch of at least 2")
    H, W = batch.shape[-2], batch.shape[-1]
    lam_draw = float(rng.beta(alpha, alpha))
    partner = rng.permutation(B)
    cut_h = int(round(H * math.sqrt(1.0 - lam_draw)))
    cut_w = int(round(W * math.sqrt(1.0 - lam_draw)))
    mixed = batch.copy()
    if cut_h == 0 or cut_w == 0:
        return mixed, targets.copy(), 1.0
    cy = int(rng.integers(0, H))
    cx = int(rng.integers(0, W))
    y0, y1 = max(0, cy - cut_h // 2), min(H, cy - cut_h // 2 + cut_h)
    x0, x1 = max(0, cx - cut_w // 2), min(W, cx - cut_w // 2 + cut_w)
    area = (y1 - y0) * (x1 - x0)
    lam = 1.0 - area / (H * W)
    mixed[..., y0:y1, x0:x1] = batch[partner][..., y0:y1, x0:x1]
    mixed_targets = lam * targets + (1.0 - lam) * targets[partner]
    return mixed, mixed_targets.astype(targets.dtype), lam


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.05):
        self.named_params = named_params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in self.named_params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data -= (lr * (mhat / (np.sqrt(vhat) + self.eps)
                             + self.weight_decay * p.data)).astype(p.dtype)

    def zero_grad(self):
        for p in self.named_params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array([self.step_count], dtype=np.float32)}
        for k in self.named_params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.step_count = int(tensors["step_count"][0])
        for k in self.named_params:
            self.m[k] = tensors[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"v.{k}"].astype(self.v[k].dtype)


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return norm


# ---------------------------------------------------------------------------
# training step & loop
# ---------------------------------------------------------------------------

def batch_indices(seed: int, step: int, n_items: int, batch_size: int) -> np.ndarray:
    """Stateless epoch shuffling with drop-last: resuming at step k yields
    the same batch an uninterrupted run would see."""
    per_epoch = max(1, n_items // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng((seed, epoch)).permutation(n_items)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def train_step(model: AudioMambaModel, grids: np.ndarray, targets: np.ndarray,
               optimizer: AdamW, config: TrainConfig, step: int) -> tuple[float, float]:
    """One optimization step over a prepared batch of [B,1,H,W] grids.

    Returns (loss, pre-clip gradient norm)."""
    rng = np.random.default_rng((config.seed, step, 1))
    logits = T.stack([model.forward_grid(g, training=True, rng=rng) for g in grids])
    loss = bce_loss(logits, targets)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        T.get_tape().clear()
        raise FloatingPointError(f"non-finite loss {loss_val} at step {step}; "
                                 f"batch targets sum {targets.sum()}")
    optimizer.zero_grad()
    T.backward(loss)
    grad_norm = clip_global_norm(list(model.parameters()), config.grad_clip)
    lr = lr_schedule(step, config.learning_rate, config.warmup_steps, config.total_steps)
    optimizer.step(lr=lr)
    optimizer.zero_grad()
    return loss_val, grad_norm


def default_feature_loader(model_config, resample_method="linear"):
    """Path -> [1,H,W] grid through the WAV / mel / window pipeline."""

    def load(path):
        clip = frontend.load_wav(path)
        clip = frontend.resample(clip, frontend.SAMPLE_RATE, method=resample_method)
        mel = frontend.log_mel(clip, n_mels=model_config.n_mels, allow_short=True)
        mel = frontend.pad_frames(mel, model_config.input_frames, allow_truncate=True)
        return frontend.mel_to_grid(mel, model_config.n_windows)

    return load


def evaluate(model: AudioMambaModel, manifest: Manifest, mode: str = "multilabel",
             feature_loader: Optional[Callable] = None,
             skip_unreadable: bool = False) -> EvalReport:
    """Run the model over every clip in an eval manifest and fill a report."""
    if manifest.split != "eval":
        raise DataError(f"evaluate requires an eval split, got '{manifest.split}'")
    if mode not in ("multilabel", "singlelabel"):
        raise ValueError(f"mode must be multilabel|singlelabel, got '{mode}'")
    loader = feature_loader or default_feature_loader(model.config)
    scores, labels, kept = [], [], []
    for i, row in enumerate(manifest.rows):
        try:
            grid = loader(row.path)
        except (OSError, ValueError) as e:
            if skip_unreadable:
                continue
            raise DataError(f"row {i} ('{row.path}'): {e}") from e
        with T.no_grad():
            logits = model.forward_grid(grid)
        scores.append(logits.data.astype(np.float64))
        kept.append(i)
    scores = np.asarray(scores)
    targets = manifest.targets()[kept]
    if mode == "singlelabel":
        true = [manifest.rows[i].labels[0] for i in kept]
        return metrics.singlelabel_report(scores, true, manifest.n_classes)
    sig = 1.0 / (1.0 + np.exp(-scores))
    return metrics.multilabel_report(sig, targets.astype(np.int64))


@dataclass
class TrainResult:
    steps_run: int
    losses: list[float] = field(default_factory=list)
    best_map: float = float("nan")
    best_checkpoint: Optional[str] = None


def train_loop(model: AudioMambaModel, train_manifest: Manifest, config: TrainConfig,
               out_dir: str, eval_manifest: Optional[Manifest] = None,
               feature_loader: Optional[Callable] = None,
               log_fn: Optional[Callable[[str], None]] = None,
               start_step: int = 0,
               optimizer: Optional[AdamW] = None) -> TrainResult:
    """Full loop with periodic eval, best-by-mAP checkpointing, and a
    `step,loss,grad_norm,lr` log."""
    os.makedirs(out_dir, exist_ok=True)
    loader = feature_loader or default_feature_loader(model.config)
    grids = {}

    def grid_for(idx):
        if idx not in grids:
            grids[idx] = loader(train_manifest.rows[idx].path)
        return grids[idx]

    optimizer = optimizer or AdamW(model.named_parameters(), lr=config.learning_rate,
                                   weight_decay=config.weight_decay)
    targets_all = train_manifest.targets()
    result = TrainResult(steps_run=0)
    log_path = os.path.join(out_dir, "train_log.csv")
    log_file = open(log_path, "a", encoding="utf-8")
    if log_file.tell() == 0:
        log_file.write("step,loss,grad_norm,lr\n")
    try:
        for step in range(start_step, config.total_steps):
            idx = batch_indices(config.seed, step, len(train_manifest), config.batch_size)
            batch = np.stack([grid_for(i) for i in idx])
            targets = targets_all[idx]
            aug_rng = np.random.default_rng((config.seed, step, 2))
            if config.cutmix_prob > 0 and len(idx) >= 2 \
                    and aug_rng.random() < config.cutmix_prob:
                batch, targets, _ = cutmix(batch, targets, config.cutmix_alpha, aug_rng)
            loss, grad_norm = train_step(model, batch, targets, optimizer, config, step)
            lr = lr_schedule(step, config.learning_rate, config.warmup_steps,
                             config.total_steps)
            line = f"{step},{loss:.6f},{grad_norm:.6f},{lr:.8f}"
            log_file.write(line + "\n")
            log_file.flush()
            if log_fn:
                log_fn(line)
            result.losses.append(loss)
            result.steps_run = step + 1
            last = step == config.total_steps - 1
            if config.checkpoint_every and ((step + 1) % config.checkpoint_every == 0 or last):
                save_training_state(model, optimizer, step + 1,
                                    os.path.join(out_dir, "last.amba"))
            if eval_manifest is not None and config.eval_every \
                    and ((step + 1) % config.eval_every == 0 or last):
                rep = evaluate(model, eval_manifest, feature_loader=feature_loader)
                if not (result.best_map >= rep.mAP):  # NaN-safe
                    result.best_map = rep.mAP
                    best = os.path.join(out_dir, "best.amba")
                    model.save_checkpoint(best)
                    result.best_checkpoint = best
    finally:
        log_file.close()
    return result


def save_training_state(model: AudioMambaModel, optimizer: AdamW, step: int, path) -> None:
    model.save_checkpoint(path)
    opt = optimizer.state_tensors()
    opt["resume_step"] = np.array([step], dtype=np.float32)
    ckpt.save_tensors(str(path) + ".opt", opt)


def load_training_state(model: AudioMambaModel, optimizer: AdamW, path) -> int:
    """Restores model + optimizer; returns the step to resume from."""
    model.load_checkpoint(path, "strict")
    opt = ckpt.load_tensors(str(path) + ".opt")
    step = int(opt.pop("resume_step")[0])
    optimizer.load_state_tensors(opt)
    return step
