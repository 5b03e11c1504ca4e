"""Toy latent U-Net with a retrieval encoder and a conjunction network.

Layout (L = len(block_widths) resolution levels)::

    reference image -> vae_stem -> retrieval encoder (copy of base encoder)
                                         | per-level outputs, 4 refs
                                         v
    noisy latent -> base encoder -> middle -> decoder level L-1 .. 0 -> noise
                        |  skips ---------------^  each level: concat skip,
                                                   conjunction_inject, res, attn

Base encoder, middle block, time embedder, text encoder and the toy VAE are
frozen. Every conjunction layer ends in a zero-initialised 1x1 convolution, so
a freshly initialised bundle reproduces the base model exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backends import stable_hash

FREEZE_MODES = ("train_both", "lock_decoder", "lock_both")
ALWAYS_FROZEN = ("base.time_embed", "base.text_encoder", "base.vae_stem",
                 "base.vae_decoder", "base.encoder", "base.middle")
TRAINABLE = {
    "train_both": ("base.decoder", "retrieval", "conjunction"),
    "lock_decoder": ("retrieval", "conjunction"),
    "lock_both": ("conjunction",),
}
CONCEPTS = ("figure", "face", "body")
CKPT_FORMAT = "refgen-ckpt"


@dataclass
class ModelConfig:
    latent_channels: int = 4
    spatial: int = 32
    block_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    attention_heads: int = 4
    text_embed_dim: int = 64
    time_embed_dim: int = 128
    control_weight: float = 1.5
    vae_factor: int = 4
    text_vocab: int = 4096
    max_text_tokens: int = 48
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.block_widths = list(self.block_widths)
        if not self.block_widths:
            raise ValueError("block_widths must be non-empty")
        if self.control_weight < 0:
            raise ValueError("control_weight must be >= 0")
        if self.spatial % (2 ** (len(self.block_widths) - 1)):
            raise ValueError(f"spatial {self.spatial} not divisible by 2^{len(self.block_widths) - 1}")
        if self.vae_factor < 1 or self.vae_factor & (self.vae_factor - 1):
            raise ValueError("vae_factor must be a power of two")
        for ch in self.query_channels() + self.block_widths:
            if ch % self.attention_heads:
                raise ValueError(f"{ch} channels not divisible by {self.attention_heads} heads")

    @property
    def levels(self) -> int:
        return len(self.block_widths)

    @property
    def image_size(self) -> int:
        return self.spatial * self.vae_factor

    def level_spatial(self, i: int) -> int:
        return self.spatial // 2 ** i

    def decoder_in_channels(self, i: int) -> int:
        w = self.block_widths
        prev = w[-1] if i == len(w) - 1 else w[i + 1]
        return prev + w[i]

    def query_channels(self) -> list[int]:
        return [self.decoder_in_channels(i) for i in range(len(self.block_widths))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class GroupNorm(nn.GroupNorm):
    # torch's CPU backward crashes on channels-last inputs that need no grad
    # (frozen-path activations feeding a trainable norm); normalize layout first.
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.contiguous())


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.dim))


class HashTextEncoder(nn.Module):
    """Tag-level text encoder: each comma-separated tag hashes to one token.

    Sequences are fixed-length (``max_tokens``): a begin token, the tags, then
    padding. The empty prompt is the begin token followed by padding.
    """

    PAD, BOS = 0, 1

    def __init__(self, vocab: int, dim: int, max_tokens: int):
        super().__init__()
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.token = nn.Embedding(vocab, dim)
        self.position = nn.Parameter(torch.randn(max_tokens, dim) * 0.1)
        self.norm = nn.LayerNorm(dim)

    def token_ids(self, prompt) -> list[int]:
        if isinstance(prompt, str):
            tags = [t.strip() for t in prompt.split(",")]
        else:
            tags = [str(t).strip() for t in prompt]
        ids = [self.BOS] + [2 + stable_hash(t, "text") % (self.vocab - 2) for t in tags if t]
        ids = ids[: self.max_tokens]
        return ids + [self.PAD] * (self.max_tokens - len(ids))

    def forward(self, prompts) -> torch.Tensor:
        ids = torch.tensor([self.token_ids(p) for p in prompts], dtype=torch.long)
        return self.norm(self.token(ids) + self.position)


class VaeStem(nn.Module):
    """Fixed strided conv stack mapping images in [-1, 1] to latents."""

    def __init__(self, latent_channels: int, factor: int, width: int = 32):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(factor))):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(width, latent_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.register_buffer("scale", torch.ones(()))

    def forward(self, x):
        return self.net(x) * self.scale

    @torch.no_grad()
    def calibrate(self, size: int, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(8, 3, size, size, generator=g) * 2 - 1
        self.scale.fill_(1.0)
        self.scale.fill_(1.0 / self.net(x).std().clamp_min(1e-6))


class ToyDecoder(nn.Module):
    def __init__(self, latent_channels: int, factor: int, width: int = 32):
        super().__init__()
        layers = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(factor))):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(width, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.tanh(self.net(z))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x, context):
        b, n, c = x.shape
        m = context.shape[1]
        if context.shape[0] != b:
            raise ValueError(f"batch mismatch: queries {b}, context {context.shape[0]}")
        h = self.heads
        q = self.to_q(x).view(b, n, h, c // h).transpose(1, 2)
        k = self.to_k(context).view(b, m, h, c // h).transpose(1, 2)
        v = self.to_v(context).view(b, m, h, c // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(b, n, c))


class SpatialCrossAttention(nn.Module):
    """Residual text cross-attention over a feature map."""

    def __init__(self, ch: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = GroupNorm(_groups(ch), ch)
        self.attn = CrossAttention(ch, context_dim, heads)

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(tokens, context).transpose(1, 2).reshape(b, c, hh, ww)
        return x + out


class EncoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: ModelConfig, downsample: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_embed_dim)
        self.attn = SpatialCrossAttention(out_ch, cfg.text_embed_dim, cfg.attention_heads)
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None

    def forward(self, x, temb, context):
        h = self.attn(self.res(x, temb), context)
        return h, (self.down(h) if self.down is not None else h)


class UNetEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.block_widths
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        self.levels = nn.ModuleList(
            EncoderLevel(w[max(i - 1, 0)], w[i], cfg, downsample=i < len(w) - 1) for i in range(len(w)))

    def forward(self, x, temb, context):
        """Return the per-level outputs (before downsampling)."""
        h = self.conv_in(x)
        outs = []
        for level in self.levels:
            out, h = level(h, temb, context)
            outs.append(out)
        return outs


class MiddleBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.block_widths[-1]
        self.res1 = ResBlock(ch, ch, cfg.time_embed_dim)
        self.attn = SpatialCrossAttention(ch, cfg.text_embed_dim, cfg.attention_heads)
        self.res2 = ResBlock(ch, ch, cfg.time_embed_dim)

    def forward(self, x, temb, context):
        return self.res2(self.attn(self.res1(x, temb), context), temb)


class DecoderLevel(nn.Module):
    def __init__(self, i: int, cfg: ModelConfig):
        super().__init__()
        ch = cfg.block_widths[i]
        self.res = ResBlock(cfg.decoder_in_channels(i), ch, cfg.time_embed_dim)
        self.attn = SpatialCrossAttention(ch, cfg.text_embed_dim, cfg.attention_heads)
        self.up = nn.Conv2d(ch, ch, 3, padding=1) if i > 0 else None

    def forward(self, x, temb, context):
        h = self.attn(self.res(x, temb), context)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class UNetDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        # levels[i] works at resolution level i; they run from L-1 down to 0
        self.levels = nn.ModuleList(DecoderLevel(i, cfg) for i in range(cfg.levels))
        w0 = cfg.block_widths[0]
        self.norm_out = GroupNorm(_groups(w0), w0)
        self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)


class ConjunctionLayer(nn.Module):
    """Cross-attention from decoder tokens to reference tokens, then a zero conv."""

    def __init__(self, query_ch: int, ref_ch: int, heads: int):
        super().__init__()
        self.norm = GroupNorm(_groups(query_ch), query_ch)
        self.attn = CrossAttention(query_ch, ref_ch, heads)
        self.zero_conv = zero_module(nn.Conv2d(query_ch, query_ch, 1))

    def forward(self, hidden, ref_tokens, control_weight: float):
        return conjunction_inject(hidden, ref_tokens, control_weight, self)


def conjunction_inject(decoder_hidden, level_features, control_weight, layer: ConjunctionLayer):
    """Residually add ``control_weight * zero_conv(attn(decoder, refs))``."""
    if control_weight == 0:
        return decoder_hidden
    b, c, h, w = decoder_hidden.shape
    if level_features.dim() != 3 or level_features.shape[0] != b:
        raise ValueError(f"reference tokens {tuple(level_features.shape)} incompatible with batch {b}")
    if level_features.shape[-1] != layer.attn.to_k.in_features:
        raise ValueError(f"reference channels {level_features.shape[-1]} != "
                         f"{layer.attn.to_k.in_features} expected at this level")
    if c != layer.attn.to_q.in_features:
        raise ValueError(f"decoder channels {c} != {layer.attn.to_q.in_features}")
    q = layer.norm(decoder_hidden).flatten(2).transpose(1, 2)
    attn = layer.attn(q, level_features).transpose(1, 2).reshape(b, c, h, w)
    return decoder_hidden + control_weight * layer.zero_conv(attn)


class BaseModel(nn.Module):
    """The frozen-backbone "base": toy VAE, text and time encoders, U-Net."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedder(cfg.time_embed_dim)
        self.text_encoder = HashTextEncoder(cfg.text_vocab, cfg.text_embed_dim, cfg.max_text_tokens)
        self.vae_stem = VaeStem(cfg.latent_channels, cfg.vae_factor)
        self.vae_decoder = ToyDecoder(cfg.latent_channels, cfg.vae_factor)
        self.encoder = UNetEncoder(cfg)
        self.middle = MiddleBlock(cfg)
        self.decoder = UNetDecoder(cfg)


def make_base_model(cfg: ModelConfig, seed: int = 0) -> BaseModel:
    """Randomly initialised reference base model, reproducible from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        base = BaseModel(cfg)
    base.vae_stem.calibrate(cfg.image_size, seed)
    return base


@dataclass
class ReferenceFeatures:
    levels: list[torch.Tensor]  # per level: (B, n_refs * tokens, C)
    concept_embeddings: torch.Tensor  # (B, n_refs, T, D)
    n_refs: int

    def block(self, level: int, ref: int) -> torch.Tensor:
        x = self.levels[level]
        per = x.shape[1] // self.n_refs
        return x[:, ref * per:(ref + 1) * per]


class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.base = BaseModel(cfg)
        self.retrieval = UNetEncoder(cfg)
        self.conjunction = nn.ModuleList(
            ConjunctionLayer(cfg.decoder_in_channels(i), cfg.block_widths[i], cfg.attention_heads)
            for i in range(cfg.levels))
        self.freeze_policy = "train_both"

    # parameter groups ------------------------------------------------------
    def group_parameters(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in ALWAYS_FROZEN + ("base.decoder", "retrieval", "conjunction")}
        for name, p in self.named_parameters():
            for g in groups:
                if name.startswith(g + "."):
                    groups[g].append((name, p))
                    break
            else:
                raise RuntimeError(f"parameter {name} belongs to no group")
        return groups

    def set_freeze_policy(self, mode: str) -> "ModelBundle":
        if mode not in FREEZE_MODES:
            raise ValueError(f"unknown freeze policy {mode!r}; expected one of {FREEZE_MODES}")
        trainable = TRAINABLE[mode]
        for g, params in self.group_parameters().items():
            for _, p in params:
                p.requires_grad_(g in trainable)
        self.freeze_policy = mode
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # encoders --------------------------------------------------------------
    def encode_text(self, prompts) -> torch.Tensor:
        return self.base.text_encoder(prompts)

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) in [-1, 1] -> latents."""
        return self.base.vae_stem(images)

    def decode_latents(self, latents: torch.Tensor) -> torch.Tensor:
        return self.base.vae_decoder(latents / self.base.vae_stem.scale)


def _check_shapes(module: nn.Module, weights: dict, prefix: str = ""):
    own = module.state_dict()
    missing = [k for k in own if k not in weights]
    unexpected = [k for k in weights if k not in own]
    bad = [(k, tuple(weights[k].shape), tuple(own[k].shape))
           for k in own if k in weights and tuple(weights[k].shape) != tuple(own[k].shape)]
    if missing or unexpected or bad:
        parts = []
        if bad:
            parts.append("shape mismatch in " + ", ".join(
                f"{prefix}{k} (got {g}, expected {e})" for k, g, e in bad))
        if missing:
            parts.append("missing " + ", ".join(prefix + k for k in missing))
        if unexpected:
            parts.append("unexpected " + ", ".join(prefix + k for k in unexpected))
        raise ValueError("; ".join(parts))


def init_from_base(base_weights, cfg: ModelConfig, seed: int = 0) -> ModelBundle:
    """Build a bundle around ``base_weights`` (a BaseModel or its state dict).

    The retrieval encoder starts as an exact copy of the base encoder and all
    zero convolutions are zero; the default ``train_both`` policy is applied.
    """
    if isinstance(base_weights, nn.Module):
        base_weights = base_weights.state_dict()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle = ModelBundle(cfg)
    _check_shapes(bundle.base, base_weights, "base.")
    bundle.base.load_state_dict(base_weights)
    bundle.retrieval.load_state_dict(copy.deepcopy(bundle.base.encoder.state_dict()))
    for layer in bundle.conjunction:
        zero_module(layer.zero_conv)
    return bundle.set_freeze_policy("train_both")


def images_to_tensor(images) -> torch.Tensor:
    """uint8 (N, H, W, 3) arrays -> float (N, 3, H, W) in [-1, 1]."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2) / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> list[np.ndarray]:
    arr = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    return [a.copy() for a in arr]


def _as_timesteps(t, batch: int, cfg: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ValueError(f"timesteps shape {tuple(t.shape)} != ({batch},)")
    if (t < 0).any() or (t >= cfg.num_timesteps).any():
        raise ValueError(f"timestep outside [0, {cfg.num_timesteps})")
    return t


def encode_references(refs, concept_texts, t, bundle: ModelBundle) -> ReferenceFeatures:
    """Run each reference through vae_stem and the retrieval encoder.

    ``refs`` is (B, R, 3, H, W) in [-1, 1], or a list of R images / concept
    parts for a single sample. ``concept_texts`` is a list of R labels, or B
    such lists. References are processed independently and their tokens are
    concatenated per level in reference order.
    """
    if not isinstance(refs, torch.Tensor):
        arrays = [getattr(r, "image", r) for r in refs]
        refs = images_to_tensor(arrays).unsqueeze(0)
    if refs.dim() != 5:
        raise ValueError("refs must be (B, R, 3, H, W)")
    b, r, _, h, w = refs.shape
    if h != w:
        raise ValueError(f"references must be square, got {h}x{w}")
    if concept_texts and isinstance(concept_texts[0], str):
        concept_texts = [list(concept_texts)] * b
    if len(concept_texts) != b or any(len(c) != r for c in concept_texts):
        raise ValueError(f"need {r} concept texts per sample")
    cfg = bundle.cfg
    t = _as_timesteps(t, b, cfg)

    flat_texts = [c for per in concept_texts for c in per]
    ctx = bundle.encode_text([[c] for c in flat_texts])
    latents = bundle.encode_images(refs.reshape(b * r, *refs.shape[2:]))
    temb = bundle.base.time_embed(t.repeat_interleave(r))
    outs = bundle.retrieval(latents, temb, ctx)
    levels = [o.reshape(b, r, o.shape[1], -1).permute(0, 1, 3, 2).reshape(b, -1, o.shape[1]) for o in outs]
    return ReferenceFeatures(levels, ctx.reshape(b, r, *ctx.shape[1:]), r)


def denoise_step(noisy_latent, t, prompt_embedding, ref_features: ReferenceFeatures | None,
                 bundle: ModelBundle, control_weight: float | None = None) -> torch.Tensor:
    """Predict the noise in ``noisy_latent``.

    With ``ref_features`` None or ``control_weight`` 0 this is the plain base
    U-Net (using the bundle's current decoder weights).
    """
    cfg = bundle.cfg
    b = noisy_latent.shape[0]
    t = _as_timesteps(t, b, cfg)
    if control_weight is None:
        control_weight = cfg.control_weight
    if prompt_embedding.shape[0] != b:
        prompt_embedding = prompt_embedding.expand(b, *prompt_embedding.shape[1:])
    base = bundle.base
    temb = base.time_embed(t)
    skips = base.encoder(noisy_latent, temb, prompt_embedding)
    h = base.middle(skips[-1], temb, prompt_embedding)
    use_refs = ref_features is not None and control_weight != 0
    for i in reversed(range(cfg.levels)):
        h = torch.cat([h, skips[i]], dim=1)
        if use_refs:
            h = conjunction_inject(h, ref_features.levels[i], control_weight, bundle.conjunction[i])
        h = base.decoder.levels[i](h, temb, prompt_embedding)
    dec = base.decoder
    return dec.conv_out(F.silu(dec.norm_out(h)))


def base_denoise(noisy_latent, t, prompt_embedding, bundle: ModelBundle) -> torch.Tensor:
    return denoise_step(noisy_latent, t, prompt_embedding, None, bundle, 0.0)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(bundle: ModelBundle, path, step: int | None = None) -> None:
    torch.save({
        "format": CKPT_FORMAT,
        "config": bundle.cfg.to_dict(),
        "freeze_policy": bundle.freeze_policy,
        "step": step,
        "state_dict": {k: v.detach().clone() for k, v in bundle.state_dict().items()},
    }, path)


def load_checkpoint(path) -> ModelBundle:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a refgen checkpoint")
    cfg = ModelConfig.from_dict(blob["config"])
    bundle = ModelBundle(cfg)
    _check_shapes(bundle, blob["state_dict"])
    bundle.load_state_dict(blob["state_dict"])
    bundle.set_freeze_policy(blob["freeze_policy"])
    bundle.checkpoint_step = blob.get("step")
    return bundle
