"""Noise schedule and the DDIM-style sampling loop (eta=0 deterministic, eta=1 ancestral)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import (ModelBundle, denoise_step, encode_references, images_to_tensor,
                    tensor_to_images)


class NoiseSchedule:
    def __init__(self, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.num_timesteps = num_timesteps
        betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    @classmethod
    def for_config(cls, cfg) -> "NoiseSchedule":
        return cls(cfg.num_timesteps, cfg.beta_start, cfg.beta_end)

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = self.alphas_cumprod[t].to(x0.dtype).view(-1, *([1] * (x0.dim() - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def timesteps(self, steps: int) -> list[int]:
        if steps < 1:
            raise ValueError("steps must be >= 1")
        ts = np.linspace(0, self.num_timesteps - 1, steps).round().astype(int)
        return sorted(set(ts.tolist()), reverse=True)


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # ddim | ancestral
    num_samples: int = 4
    guidance_scale: float = 1.0
    control_weight: float | None = None  # None: the bundle's configured weight


@torch.no_grad()
def generate(refs, prompt, seed: int, steps: int, bundle: ModelBundle,
             sampler_config: SamplerConfig | None = None, concept_texts=None) -> list[np.ndarray]:
    """Sample ``num_samples`` images for one (references, prompt) conditioning.

    ``refs`` are exactly four images (arrays or concept parts); ``prompt`` is a
    tag string or list, possibly empty. Fixed ``seed`` gives fixed outputs.
    """
    sc = sampler_config or SamplerConfig()
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(refs) != 4:
        raise ValueError(f"expected exactly 4 references, got {len(refs)}")
    if sc.kind not in ("ddim", "ancestral"):
        raise ValueError(f"unknown sampler {sc.kind!r}")
    cfg = bundle.cfg
    weight = cfg.control_weight if sc.control_weight is None else sc.control_weight
    if concept_texts is None:
        concept_texts = [getattr(r, "kind", "figure") for r in refs]
    n = sc.num_samples
    schedule = NoiseSchedule.for_config(cfg)
    eta = 0.0 if sc.kind == "ddim" else 1.0

    ref_tensor = images_to_tensor([getattr(r, "image", r) for r in refs]).unsqueeze(0).expand(n, -1, -1, -1, -1)
    cond = bundle.encode_text([prompt]).expand(n, -1, -1)
    uncond = bundle.encode_text([""]).expand(n, -1, -1) if sc.guidance_scale != 1.0 else None

    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn(n, cfg.latent_channels, cfg.spatial, cfg.spatial, generator=g)
    ts = schedule.timesteps(steps)
    for k, t in enumerate(ts):
        tt = torch.full((n,), t, dtype=torch.long)
        feats = encode_references(ref_tensor, [concept_texts] * n, tt, bundle) if weight != 0 else None
        eps = denoise_step(x, tt, cond, feats, bundle, weight)
        if uncond is not None:
            eps_u = denoise_step(x, tt, uncond, feats, bundle, weight)
            eps = eps_u + sc.guidance_scale * (eps - eps_u)
        ab = schedule.alphas_cumprod[t].float()
        ab_prev = schedule.alphas_cumprod[ts[k + 1]].float() if k + 1 < len(ts) else torch.tensor(1.0)
        x0 = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
        sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).clamp_min(0).sqrt()
        x = ab_prev.sqrt() * x0 + (1 - ab_prev - sigma ** 2).clamp_min(0).sqrt() * eps
        if eta > 0 and k + 1 < len(ts):
            x = x + sigma * torch.randn(x.shape, generator=g)
    return tensor_to_images(bundle.decode_latents(x))


def generate_base(prompt, seed: int, steps: int, bundle: ModelBundle,
                  sampler_config: SamplerConfig | None = None) -> list[np.ndarray]:
    """Unconditioned base sampling: same loop with injection disabled."""
    sc = sampler_config or SamplerConfig()
    sc = SamplerConfig(sc.kind, sc.num_samples, sc.guidance_scale, 0.0)
    cfg = bundle.cfg
    dummy = [np.zeros((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)] * 4
    return generate(dummy, prompt, seed, steps, bundle, sc)
