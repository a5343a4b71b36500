"""Denoising representation distillation.

A frozen teacher encodes the clean target; a trainable student encodes the
noisy mixture and is pulled toward the teacher's features (KD), optionally
alongside a masked pseudo-label prediction loss (SSL).
"""

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import (DEFAULT_MASK_RATIO, DEFAULT_MASK_SPAN, MaskSpec, SpeechEncoder,
                      build_encoder, make_mask)
from .errors import ConfigError, DataError, NumericError
from .probes import Codebook, kmeans_fit

logger = logging.getLogger(__name__)

OBJECTIVES = ("KD", "SSL", "SSL_KD")

# desk-scale settings: 1 s clips, 50 steps, higher peak lr than the full recipe
TOY_DRD = dict(total_steps=50, batch_size=4, lr_max=1e-3, warmup_fraction=0.1)


@dataclass
class DrdConfig:
    student_layer: Optional[int] = None  # None -> final layer
    teacher_layer: Optional[int] = None
    objective: str = "KD"
    total_steps: int = 100_000
    batch_size: int = 4
    lr_max: float = 1e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: Sequence[float] = (0.9, 0.999)
    grad_clip: float = 5.0
    mask_ratio: float = DEFAULT_MASK_RATIO
    mask_span: int = DEFAULT_MASK_SPAN
    train_cnn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        self.betas = tuple(self.betas)


@dataclass
class LossBreakdown:
    kd: Optional[float]
    ssl: Optional[float]
    total: float


def kd_loss(student_feat: torch.Tensor, teacher_feat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if student_feat.shape != teacher_feat.shape:
        raise DataError(f"kd shapes differ: {tuple(student_feat.shape)} vs {tuple(teacher_feat.shape)}")
    return F.mse_loss(student_feat, teacher_feat)


def ssl_loss(logits: torch.Tensor, labels, mask) -> torch.Tensor:
    """Cross-entropy of pseudo labels, averaged over masked frames only.

    ``logits`` is [T, K] or [B, T, K]; ``labels`` matches its leading dims;
    ``mask`` is a boolean array of the same leading shape or a ``MaskSpec``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if isinstance(mask, MaskSpec):
        mask = mask.to_bool(logits.shape[-2])
    mask = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask,
                           dtype=torch.bool, device=logits.device)
    if labels.shape != logits.shape[:-1] or mask.shape != logits.shape[:-1]:
        raise DataError("logits, labels and mask disagree on frame layout")
    if not bool(mask.any()):
        raise DataError("ssl_loss needs at least one masked frame")
    return F.cross_entropy(logits[mask], labels[mask])


def combine_losses(kd=None, ssl=None) -> LossBreakdown:
    if kd is None and ssl is None:
        raise ConfigError("at least one loss component is required")
    total = (kd if kd is not None else 0.0) + (ssl if ssl is not None else 0.0)
    as_float = lambda v: None if v is None else float(v.detach() if torch.is_tensor(v) else v)
    return LossBreakdown(as_float(kd), as_float(ssl), as_float(total))


def lr_at(step: int, cfg) -> float:
    """Linear warm-up to ``lr_max`` then cosine decay to zero at ``total_steps``."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    w = cfg.warmup_fraction * total
    if step < w:
        return cfg.lr_max * step / w
    if total == w:
        return cfg.lr_max
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def init_student(teacher: SpeechEncoder, scratch: bool = False, seed: int = 0) -> SpeechEncoder:
    """Copy of the teacher, or a freshly initialised model of the same shape (FS ablation)."""
    if scratch:
        return build_encoder(teacher.cfg, seed)
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.requires_grad_(True)
    return student.train()


class PseudoLabeler:
    """Frame labels from k-means units of one layer of a (frozen) label encoder."""

    def __init__(self, encoder: SpeechEncoder, layer: int, codebook: Codebook):
        self.encoder = freeze(encoder)
        self.layer = layer
        self.codebook = codebook

    @property
    def k(self) -> int:
        return self.codebook.k

    @torch.no_grad()
    def __call__(self, wav: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(wav, upto=self.layer).layers[self.layer]
        labels = [self.codebook.assign(f) for f in feats]
        return torch.as_tensor(np.stack(labels), dtype=torch.long)


def fit_pseudo_labels(features, k: int, rng: Optional[np.random.Generator] = None,
                      max_iters: int = 100):
    """k-means codebook on a collection of [T, D] matrices plus per-utterance labels."""
    features = [f.detach().cpu().numpy() if torch.is_tensor(f) else np.asarray(f) for f in features]
    features = [f[0] if f.ndim == 3 else f for f in features]
    if k < 2:
        raise DataError("k must be >= 2")
    if sum(len(f) for f in features) < k:
        raise DataError(f"fewer frames than k={k}")
    codebook = kmeans_fit(features, k, rng, max_iters=max_iters)
    return codebook, [codebook.assign(f) for f in features]


def batch_indices(data, step: int, batch_size: int, seed: int) -> List[int]:
    """Dataset indices for ``step``; a pure function of (seed, step)."""
    if hasattr(data, "__len__"):
        rng = np.random.default_rng([seed, step, 1])
        n = len(data)
        return rng.choice(n, size=batch_size, replace=n < batch_size).tolist()
    return list(range(step * batch_size, (step + 1) * batch_size))


def collate(samples) -> tuple:
    noisy = torch.as_tensor(np.stack([s.noisy for s in samples]), dtype=torch.float32)
    target = torch.as_tensor(np.stack([s.target for s in samples]), dtype=torch.float32)
    return noisy, target


def _finite_or_raise(name, value, step, extra):
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name} loss ({value}) at step {step}; {extra}")


class DrdTrainer:
    """Owns the student, optimizer and step counter; resumable via checkpoints."""

    def __init__(self, student: SpeechEncoder, teacher: SpeechEncoder, cfg: DrdConfig,
                 labeler: Optional[PseudoLabeler] = None):
        if cfg.objective != "KD" and labeler is None:
            raise ConfigError(f"objective {cfg.objective} needs a pseudo labeler")
        n = teacher.cfg.n_layers
        self.student_layer = cfg.student_layer or student.cfg.n_layers
        self.teacher_layer = cfg.teacher_layer or n
        if not 1 <= self.teacher_layer <= n or not 1 <= self.student_layer <= student.cfg.n_layers:
            raise ConfigError("distillation layer index out of range")
        self.cfg = cfg
        self.student = student.train()
        self.teacher = freeze(teacher)
        self.labeler = labeler
        self.head = None
        if labeler is not None and cfg.objective != "KD":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                self.head = nn.Linear(student.cfg.model_dim, labeler.k)
        for p in student.feature_extractor.parameters():
            p.requires_grad_(cfg.train_cnn)
        params = [p for p in student.parameters() if p.requires_grad]
        if self.head is not None:
            params += list(self.head.parameters())
        self.params = params
        self.optimizer = torch.optim.AdamW(params, lr=0.0, betas=cfg.betas,
                                           weight_decay=cfg.weight_decay)
        self.step = 0

    def losses(self, noisy: torch.Tensor, target: torch.Tensor, step: int):
        cfg = self.cfg
        with torch.no_grad():
            teacher_feat = self.teacher(target, upto=self.teacher_layer).layers[self.teacher_layer]
        mask = None
        if cfg.objective != "KD":
            t = teacher_feat.shape[1]
            rng = np.random.default_rng([cfg.seed, step, 2])
            mask = np.stack([make_mask(t, cfg.mask_ratio, cfg.mask_span, rng).to_bool(t)
                             for _ in range(noisy.shape[0])])
        student_feat = self.student(noisy, mask=mask, upto=self.student_layer).layers[self.student_layer]
        kd = ssl = None
        if cfg.objective in ("KD", "SSL_KD"):
            kd = kd_loss(student_feat, teacher_feat)
        if cfg.objective in ("SSL", "SSL_KD"):
            labels = self.labeler(target)
            ssl = ssl_loss(self.head(student_feat), labels, mask)
        total = (kd if kd is not None else 0.0) + (ssl if ssl is not None else 0.0)
        return total, combine_losses(kd, ssl)

    def train_step(self, noisy, target) -> dict:
        lr = lr_at(self.step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total, parts = self.losses(noisy, target, self.step)
        _finite_or_raise("total", parts.total, self.step, f"components={asdict(parts)} lr={lr}")
        total.backward()
        grad_norm = nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        record = {"step": self.step, "kd": parts.kd, "ssl": parts.ssl, "total": parts.total,
                  "lr": lr, "grad_norm": float(grad_norm)}
        self.step += 1
        return record

    def state_dict(self) -> dict:
        return {
            "format": "speechprior.drd/1",
            "step": self.step,
            "config": asdict(self.cfg),
            "encoder": {"config": self.student.cfg.to_dict(), "state_dict": self.student.state_dict()},
            "head": None if self.head is None else self.head.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.student.load_state_dict(state["encoder"]["state_dict"])
        if self.head is not None and state.get("head") is not None:
            self.head.load_state_dict(state["head"])
        self.optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        self.step = int(state["step"])

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp = path + ".tmp"
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)


def train_drd(student: SpeechEncoder, teacher: SpeechEncoder, data, cfg: DrdConfig,
              labeler: Optional[PseudoLabeler] = None, max_steps: Optional[int] = None,
              checkpoint_dir: Optional[str] = None, checkpoint_every: int = 0,
              resume_from: Optional[str] = None, log_path: Optional[str] = None,
              on_step: Optional[Callable[[dict], None]] = None):
    """Run distillation; returns ``(student, step_log)``.

    ``data`` is an indexable collection of ``MixtureSample``. ``max_steps``
    stops early (the schedule still spans ``cfg.total_steps``).
    """
    trainer = DrdTrainer(student, teacher, cfg, labeler)
    if resume_from:
        trainer.load_state_dict(torch.load(resume_from, map_location="cpu", weights_only=False))
    stop = min(cfg.total_steps, max_steps if max_steps is not None else cfg.total_steps)
    log = []
    log_file = open(log_path, "a") if log_path else None
    try:
        while trainer.step < stop:
            idx = batch_indices(data, trainer.step, cfg.batch_size, cfg.seed)
            noisy, target = collate([data[i] for i in idx])
            record = trainer.train_step(noisy, target)
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_step:
                on_step(record)
            if checkpoint_dir and checkpoint_every and trainer.step % checkpoint_every == 0:
                trainer.save(os.path.join(checkpoint_dir, f"drd_step{trainer.step:07d}.pt"))
        if checkpoint_dir:
            trainer.save(os.path.join(checkpoint_dir, "drd_last.pt"))
    finally:
        if log_file:
            log_file.close()
    return trainer.student, log


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average used to judge loss trends."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.r_[0.0, v])
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
