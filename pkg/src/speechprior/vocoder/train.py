"""Adversarial vocoder training on top of a frozen encoder."""

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn

from ..drd import batch_indices, collate, freeze, lr_at
from ..encoder import SpeechEncoder
from ..errors import ConfigError, NumericError
from ..fusion import Fusion, FusionConfig
from .discriminators import Discriminators
from .generator import Vocoder, VocoderConfig
from .losses import (LOSS_WEIGHTS, discriminator_loss, feature_matching_loss,
                     generator_adversarial_loss, generator_total, reconstruction_loss)


@dataclass
class VocoderTrainConfig:
    total_steps: int = 200_000
    batch_size: int = 12
    lr_max: float = 2e-4
    disc_lr_max: Optional[float] = None  # None -> same as generator
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: Sequence[float] = (0.9, 0.999)
    grad_clip: float = 5.0
    loss_weights: Sequence[float] = LOSS_WEIGHTS
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs (reconstruction, adversarial, feature_matching)")
        self.betas = tuple(self.betas)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def adversarial(self) -> bool:
        return self.loss_weights[1] != 0 or self.loss_weights[2] != 0


TOY_VOCODER_TRAIN = dict(total_steps=100, batch_size=4, lr_max=2e-3, warmup_fraction=0.1)


class EnhancementModel(nn.Module):
    """Encoder -> dual-stream fusion -> vocoder, the full inference path."""

    def __init__(self, encoder: SpeechEncoder, fusion: Fusion, vocoder: Vocoder):
        super().__init__()
        if encoder.hop != vocoder.cfg.input_hop:
            raise ConfigError(
                f"encoder hop {encoder.hop} != vocoder hop x frame_repeat {vocoder.cfg.input_hop}")
        if fusion.out_dim != vocoder.cfg.in_dim:
            raise ConfigError(f"fusion output {fusion.out_dim} != vocoder input {vocoder.cfg.in_dim}")
        self.encoder, self.fusion, self.vocoder = encoder, fusion, vocoder

    def streams(self, noisy: torch.Tensor):
        acts = self.encoder(noisy)
        return acts.layers[self.encoder.cfg.n_layers], acts.layers[1]

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            phonetic, acoustic = self.streams(noisy)
        return self.vocoder(self.fusion(phonetic, acoustic))


def match_length(target: torch.Tensor, length: int) -> torch.Tensor:
    if target.shape[-1] >= length:
        return target[..., :length]
    return torch.nn.functional.pad(target, (0, length - target.shape[-1]))


class VocoderTrainer:
    def __init__(self, encoder: SpeechEncoder, fusion: Fusion, vocoder: Vocoder,
                 discriminators: Discriminators, cfg: VocoderTrainConfig):
        self.model = EnhancementModel(freeze(encoder), fusion, vocoder)
        self.discriminators = discriminators
        self.cfg = cfg
        self.gen_params = list(fusion.parameters()) + list(vocoder.parameters())
        self.opt_g = torch.optim.AdamW(self.gen_params, lr=0.0, betas=cfg.betas,
                                       weight_decay=cfg.weight_decay)
        self.opt_d = torch.optim.AdamW(discriminators.parameters(), lr=0.0, betas=cfg.betas,
                                       weight_decay=cfg.weight_decay)
        self.step = 0

    def _set_lr(self):
        lr = lr_at(self.step, self.cfg)
        scale = (self.cfg.disc_lr_max / self.cfg.lr_max) if self.cfg.disc_lr_max else 1.0
        for g in self.opt_g.param_groups:
            g["lr"] = lr
        for g in self.opt_d.param_groups:
            g["lr"] = lr * scale
        return lr

    def train_step(self, noisy: torch.Tensor, target: torch.Tensor) -> dict:
        cfg = self.cfg
        lr = self._set_lr()
        self.model.fusion.train()
        self.model.vocoder.train()
        pred = self.model(noisy)
        target = match_length(target, pred.shape[-1])

        disc_loss = None
        self.opt_d.zero_grad(set_to_none=True)
        if cfg.adversarial:
            real_logits, _ = self.discriminators(target)
            fake_logits, _ = self.discriminators(pred.detach())
            d_loss = discriminator_loss(real_logits, fake_logits)
            disc_loss = float(d_loss.detach())
            if not math.isfinite(disc_loss):
                raise NumericError(f"non-finite discriminator loss at step {self.step}")
            d_loss.backward()
            nn.utils.clip_grad_norm_(self.discriminators.parameters(), cfg.grad_clip)
            self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        rec = reconstruction_loss(pred, target)
        if cfg.adversarial:
            fake_logits, fake_maps = self.discriminators(pred)
            with torch.no_grad():
                _, real_maps = self.discriminators(target)
            adv = generator_adversarial_loss(fake_logits)
            fm = feature_matching_loss(real_maps, fake_maps)
        else:
            adv = fm = torch.zeros((), dtype=rec.dtype)
        total, parts = generator_total(rec, adv, fm, cfg.loss_weights)
        if not math.isfinite(parts.total):
            raise NumericError(f"non-finite generator loss at step {self.step}: {asdict(parts)}")
        total.backward()
        # generator backward also reaches discriminator weights; those grads are discarded
        self.opt_d.zero_grad(set_to_none=True)
        nn.utils.clip_grad_norm_(self.gen_params, cfg.grad_clip)
        self.opt_g.step()

        record = {"step": self.step, "lr": lr, "disc": disc_loss, **asdict(parts)}
        self.step += 1
        return record

    def state_dict(self) -> dict:
        enc = self.model.encoder
        return {
            "format": "speechprior.vocoder/1",
            "step": self.step,
            "config": {"train": asdict(self.cfg), "vocoder": self.model.vocoder.cfg.to_dict(),
                       "fusion": self.model.fusion.cfg.to_dict(),
                       "encoder": enc.cfg.to_dict()},
            "vocoder": self.model.vocoder.state_dict(),
            "fusion": self.model.fusion.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.vocoder.load_state_dict(state["vocoder"])
        self.model.fusion.load_state_dict(state["fusion"])
        self.discriminators.load_state_dict(state["discriminators"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["torch_rng"])
        self.step = int(state["step"])

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(self.state_dict(), path + ".tmp")
        os.replace(path + ".tmp", path)


def train_vocoder(vocoder: Vocoder, fusion: Fusion, encoder: SpeechEncoder, data,
                  cfg: VocoderTrainConfig, discriminators: Optional[Discriminators] = None,
                  max_steps: Optional[int] = None, checkpoint_dir: Optional[str] = None,
                  checkpoint_every: int = 0, resume_from: Optional[str] = None,
                  log_path: Optional[str] = None,
                  on_step: Optional[Callable[[dict], None]] = None):
    """Alternating discriminator/generator updates; returns ``(trainer, step_log)``."""
    discriminators = discriminators if discriminators is not None else Discriminators()
    trainer = VocoderTrainer(encoder, fusion, vocoder, discriminators, cfg)
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
                trainer.save(os.path.join(checkpoint_dir, f"vocoder_step{trainer.step:07d}.pt"))
        if checkpoint_dir:
            trainer.save(os.path.join(checkpoint_dir, "vocoder_last.pt"))
    finally:
        if log_file:
            log_file.close()
    return trainer, log


def load_vocoder_checkpoint(path: str):
    """Returns ``(fusion, vocoder, state)`` in eval mode."""
    from ..errors import CheckpointError
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable vocoder checkpoint {path!r}: {e}") from e
    if not isinstance(state, dict) or state.get("format") != "speechprior.vocoder/1":
        raise CheckpointError(f"{path!r} is not a vocoder checkpoint")
    fusion = Fusion(FusionConfig(**state["config"]["fusion"]))
    vocoder = Vocoder(VocoderConfig(**state["config"]["vocoder"]))
    fusion.load_state_dict(state["fusion"])
    vocoder.load_state_dict(state["vocoder"])
    return fusion.eval(), vocoder.eval(), state
