"""Masked denoising objective, prompt dropping, freeze policies and the train loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import (ModelBundle, denoise_step, encode_references, images_to_tensor,
                    save_checkpoint)
from .sampling import NoiseSchedule
from .synthesis import TrainingSample

log = logging.getLogger(__name__)


class FreezePolicy(str, Enum):
    TRAIN_BOTH = "train_both"
    LOCK_DECODER = "lock_decoder"
    LOCK_BOTH = "lock_both"


@dataclass
class TrainConfig:
    p_drop: float = 0.5
    lambda_face: float = 1.0
    lr: float = 1e-4
    batch_size: int = 1
    steps: int = 1000
    seed: int = 0
    freeze_policy: str = "train_both"
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.lambda_face < 0:
            raise ValueError("lambda_face must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError("lr, batch_size and steps must be positive")
        FreezePolicy(self.freeze_policy)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Named after the checkpoints of the reported ablations; toy runs override steps.
TRAIN_PRESETS = {
    "9k": dict(steps=9000),
    "45k": dict(steps=45000),
    "9k-pdrop0.25": dict(steps=9000, p_drop=0.25),
    "9k-pdrop0.75": dict(steps=9000, p_drop=0.75),
    "9k-lockDecoder": dict(steps=9000, freeze_policy="lock_decoder"),
    "9k-lockBoth": dict(steps=9000, freeze_policy="lock_both"),
}


class NonFiniteLoss(RuntimeError):
    pass


def _spatial(x: torch.Tensor):
    return tuple(x.shape[-2:])


def _as_mask(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    m = m.to(like.dtype)
    while m.dim() < like.dim():
        m = m.unsqueeze(-3)
    return m


def masked_loss(eps, eps_pred, m_tgt, m_face, lambda_face: float = 1.0) -> torch.Tensor:
    """``mse(eps*m_tgt, pred*m_tgt) + lambda_face * mse(eps*m_face, pred*m_face)``.

    Masks are binary, broadcast over channels; each mse averages over every
    element of the broadcast product.
    """
    if eps.shape != eps_pred.shape:
        raise ValueError(f"eps {tuple(eps.shape)} vs prediction {tuple(eps_pred.shape)}")
    for name, m in (("m_tgt", m_tgt), ("m_face", m_face)):
        if _spatial(m) != _spatial(eps):
            raise ValueError(f"{name} spatial shape {_spatial(m)} != {_spatial(eps)}")
    mt, mf = _as_mask(m_tgt, eps), _as_mask(m_face, eps)
    loss = F.mse_loss(eps * mt, eps_pred * mt)
    if lambda_face:
        loss = loss + lambda_face * F.mse_loss(eps * mf, eps_pred * mf)
    return loss


def latent_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Pixel mask (B, H, W) -> latent mask (B, 1, H/f, W/f): area pool, threshold 0.5."""
    m = mask.float().unsqueeze(1)
    if factor > 1:
        m = F.avg_pool2d(m, factor)
    return (m >= 0.5).float()


def drop_prompt(tags, p_drop: float, rng) -> list:
    """Return ``[]`` (the empty prompt) with probability ``p_drop``, else ``tags``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    return [] if rng.random() < p_drop else list(tags)


def apply_freeze_policy(bundle: ModelBundle, policy) -> ModelBundle:
    return bundle.set_freeze_policy(FreezePolicy(policy).value)


def collate(samples: list[TrainingSample]) -> dict:
    return {
        "target": images_to_tensor([s.target for s in samples]),
        "refs": torch.stack([images_to_tensor([p.image for p in s.references]) for s in samples]),
        "concepts": [s.concept_texts for s in samples],
        "m_tgt": torch.from_numpy(np.stack([s.m_tgt for s in samples])),
        "m_face": torch.from_numpy(np.stack([s.m_face for s in samples])),
        "tags": [s.prompt_tags for s in samples],
        "ids": [s.target_id for s in samples],
    }


def draw_step_noise(batch: dict, bundle: ModelBundle, config: TrainConfig, rng):
    """Draw (t, noise, prompts) for one step from the numpy generator ``rng``."""
    cfg = bundle.cfg
    b = batch["target"].shape[0]
    t = torch.from_numpy(rng.integers(0, cfg.num_timesteps, size=b)).long()
    g = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    noise = torch.randn(b, cfg.latent_channels, cfg.spatial, cfg.spatial, generator=g)
    prompts = [drop_prompt(tags, config.p_drop, rng) for tags in batch["tags"]]
    return t, noise, prompts


def step_loss(bundle: ModelBundle, batch: dict, t, noise, prompts, lambda_face: float,
              use_refs: bool = True) -> torch.Tensor:
    cfg = bundle.cfg
    schedule = NoiseSchedule.for_config(cfg)
    with torch.no_grad():
        x0 = bundle.encode_images(batch["target"])
    x_t = schedule.add_noise(x0, noise, t)
    cond = bundle.encode_text(prompts)
    feats = encode_references(batch["refs"], batch["concepts"], t, bundle) if use_refs else None
    # injection runs at unit scale during training; control_weight scales it at inference
    pred = denoise_step(x_t, t, cond, feats, bundle, control_weight=1.0 if use_refs else 0.0)
    m_tgt = latent_mask(batch["m_tgt"], cfg.vae_factor)
    m_face = latent_mask(batch["m_face"], cfg.vae_factor)
    return masked_loss(noise, pred, m_tgt, m_face, lambda_face)


def make_optimizer(bundle: ModelBundle, config: TrainConfig):
    return torch.optim.Adam(bundle.trainable_parameters(), lr=config.lr)


def train_step(bundle: ModelBundle, samples, config: TrainConfig, rng, optimizer,
               dump_dir=None) -> tuple[float, ModelBundle]:
    """One gradient update on ``samples``; frozen parameters are untouched."""
    if isinstance(samples, TrainingSample):
        samples = [samples]
    batch = collate(samples)
    t, noise, prompts = draw_step_noise(batch, bundle, config, rng)
    loss = step_loss(bundle, batch, t, noise, prompts, config.lambda_face)
    if not torch.isfinite(loss):
        dump = Path(dump_dir or ".") / "nonfinite_step.pt"
        torch.save({"t": t, "noise": noise, "prompts": prompts, "target_ids": batch["ids"]}, dump)
        raise NonFiniteLoss(f"non-finite loss {loss.item()} (t={t.tolist()}, "
                            f"targets={batch['ids']}); inputs dumped to {dump}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item(), bundle


class Trainer:
    def __init__(self, bundle: ModelBundle, config: TrainConfig, out_dir=None):
        self.bundle = apply_freeze_policy(bundle, config.freeze_policy)
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = make_optimizer(bundle, config)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step_count = 0
        self.losses: list[float] = []

    def step(self, samples) -> float:
        loss, _ = train_step(self.bundle, samples, self.config, self.rng, self.optimizer, self.out_dir)
        self.step_count += 1
        self.losses.append(loss)
        return loss

    def fit(self, pool: list[TrainingSample], steps: int | None = None) -> list[float]:
        """Train on batches drawn uniformly from ``pool``."""
        if not pool:
            raise ValueError("empty training pool")
        steps = steps or self.config.steps
        every = self.config.checkpoint_every
        for _ in range(steps):
            idx = self.rng.integers(0, len(pool), size=self.config.batch_size)
            loss = self.step([pool[i] for i in idx])
            if self.step_count % 50 == 0:
                log.info("step %d loss %.4f", self.step_count, loss)
            if self.out_dir is not None and every and self.step_count % every == 0:
                self.save(f"ckpt_step{self.step_count:06d}.pt")
        return self.losses

    def save(self, name: str = "ckpt_final.pt") -> Path:
        assert self.out_dir is not None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        save_checkpoint(self.bundle, path, self.step_count)
        return path
