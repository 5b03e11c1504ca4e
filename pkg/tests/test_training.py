from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MemoryStore, solid_figure, tiny_config
from refgen.dataset import IdentityCluster
from refgen.model import init_from_base, make_base_model
from refgen.synthesis import SynthesisConfig, Synthesizer
from refgen.training import (NonFiniteLoss, TrainConfig, Trainer, apply_freeze_policy, collate, draw_step_noise,
                             drop_prompt, latent_mask, make_optimizer, masked_loss, step_loss, train_step)

TRAINABLE = {
    "train_both": {"base.decoder", "retrieval", "conjunction"},
    "lock_decoder": {"retrieval", "conjunction"},
    "lock_both": {"conjunction"},
}


def loop_loss(eps, pred, m_tgt, m_face, lam):
    """Elementwise reference: two per-element mean squared errors over broadcast masks."""
    e, p = eps.tolist(), pred.tolist()
    mt, mf = m_tgt.tolist(), m_face.tolist()
    s1 = s2 = 0.0
    n = 0
    for b in range(len(e)):
        for c in range(len(e[b])):
            for i in range(len(e[b][c])):
                for j in range(len(e[b][c][i])):
                    d = e[b][c][i][j] - p[b][c][i][j]
                    s1 += (d * mt[b][i][j]) ** 2
                    s2 += (d * mf[b][i][j]) ** 2
                    n += 1
    return s1 / n + lam * s2 / n


def random_case(seed, shape=(1, 4, 8, 8), dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    b, c, h, w = shape
    eps = torch.randn(shape, generator=g, dtype=dtype)
    pred = torch.randn(shape, generator=g, dtype=dtype)
    m_tgt = (torch.rand(b, h, w, generator=g) < 0.5).to(dtype)
    m_face = m_tgt * (torch.rand(b, h, w, generator=g) < 0.5).to(dtype)
    return eps, pred, m_tgt, m_face


# ---------------------------------------------------------------- masked loss

def test_reduces_to_plain_mse():
    eps, pred, _, m_face = random_case(0)
    ones = torch.ones(1, 8, 8)
    assert abs(masked_loss(eps, pred, ones, m_face, 0.0) - F.mse_loss(eps, pred)) < 1e-7


def test_zero_face_mask_ignores_lambda():
    eps, pred, m_tgt, _ = random_case(1)
    zero = torch.zeros(1, 8, 8)
    assert masked_loss(eps, pred, m_tgt, zero, 0.0) == masked_loss(eps, pred, m_tgt, zero, 5.0)


def test_same_masks_double_the_loss():
    eps, pred, m_tgt, _ = random_case(2)
    single = masked_loss(eps, pred, m_tgt, torch.zeros_like(m_tgt), 0.0)
    assert abs(masked_loss(eps, pred, m_tgt, m_tgt, 1.0) - 2 * single) < 1e-7


def test_matches_scalar_loop_oracle():
    eps, pred, _, _ = random_case(3, dtype=torch.float64)
    half = torch.zeros(1, 8, 8, dtype=torch.float64)
    half[:, :, :4] = 1
    face = torch.zeros_like(half)
    face[:, 2:5, 1:3] = 1
    got = masked_loss(eps, pred, half, face, 1.0).item()
    assert got == pytest.approx(loop_loss(eps, pred, half, face, 1.0), rel=1e-12)


def test_finite_difference_gradients():
    h = 1e-4
    for k in range(10):
        rng = np.random.default_rng(k)
        lam = float(rng.uniform(0, 3))
        eps, pred, m_tgt, m_face = random_case(100 + k, shape=(1, 4, 4, 4), dtype=torch.float64)
        pred.requires_grad_(True)
        masked_loss(eps, pred, m_tgt, m_face, lam).backward()
        analytic = pred.grad.clone()
        numeric = torch.zeros_like(analytic)
        flat = pred.detach().clone().view(-1)
        for i in range(flat.numel()):
            up, dn = flat.clone(), flat.clone()
            up[i] += h
            dn[i] -= h
            numeric.view(-1)[i] = (masked_loss(eps, up.view_as(pred), m_tgt, m_face, lam)
                                   - masked_loss(eps, dn.view_as(pred), m_tgt, m_face, lam)) / (2 * h)
        rel = (analytic - numeric).norm() / max(numeric.norm(), 1e-12)
        assert rel < 1e-4, (k, rel)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0, 4))
def test_non_negative_and_zero_on_support(seed, lam):
    eps, pred, m_tgt, m_face = random_case(seed)
    assert masked_loss(eps, pred, m_tgt, m_face, lam) >= 0
    support = ((m_tgt + m_face) > 0).unsqueeze(1).expand_as(eps)
    matched = torch.where(support, eps, pred)
    assert masked_loss(eps, matched, m_tgt, m_face, lam) == 0
    if support.any():
        off = matched.clone()
        off[support] += 0.5
        assert masked_loss(eps, off, m_tgt, m_face, lam) > 0


def test_shape_mismatch():
    eps, pred, m_tgt, m_face = random_case(0)
    with pytest.raises(ValueError):
        masked_loss(eps, pred[:, :2], m_tgt, m_face)
    with pytest.raises(ValueError):
        masked_loss(eps, pred, m_tgt[:, :4], m_face)


def test_latent_mask_area_pool_threshold():
    m = torch.zeros(1, 4, 4)
    m[0, :2, :2] = 1      # full cell
    m[0, 2, 2:] = 1       # half cell -> kept (>= 0.5)
    m[0, 0, 2] = 1        # quarter cell -> dropped
    out = latent_mask(m, 2)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[1.0, 0.0], [0.0, 1.0]]


# ---------------------------------------------------------------- prompt drop

def test_drop_prompt_extremes():
    rng = np.random.default_rng(0)
    tags = ["a", "b"]
    assert all(drop_prompt(tags, 0.0, rng) == tags for _ in range(200))
    assert all(drop_prompt(tags, 1.0, rng) == [] for _ in range(200))
    with pytest.raises(ValueError):
        drop_prompt(tags, 1.5, rng)


def test_drop_prompt_rate():
    rng = np.random.default_rng(1)
    drops = sum(drop_prompt(["x"], 0.25, rng) == [] for _ in range(10_000))
    assert 0.237 <= drops / 10_000 <= 0.263


def test_empty_prompt_is_empty_string_embedding(tiny_cfg):
    bundle = init_from_base(make_base_model(tiny_cfg), tiny_cfg)
    assert torch.equal(bundle.encode_text([[]]), bundle.encode_text([""]))


# ---------------------------------------------------------------- loop

def sample_pool(n=6, res=16, seed=0):
    store = MemoryStore()
    recs = []
    rng = np.random.default_rng(seed)
    for i in range(n):
        y1 = int(rng.integers(4, 8))
        img, m = solid_figure(res, res, (4, y1 - 3, 12, y1), color=tuple(int(v) for v in rng.integers(0, 256, 3)))
        recs.append(store.add(f"r{i}", img, m, (4, y1 - 3, 12, y1)))
    synth = Synthesizer(recs, SynthesisConfig(resolution=res), store.load, store.load_mask)
    cluster = IdentityCluster("alice", "bob", 0, [r.id for r in recs])
    tasks = ["recon", "compose"]
    return [synth.make_sample(tasks[i % 2], cluster, f"r{i}", np.random.default_rng(i)) for i in range(n)]


@pytest.fixture(scope="module")
def pool():
    return sample_pool()


def fresh_bundle(cfg=None):
    cfg = cfg or tiny_config()
    return init_from_base(make_base_model(cfg, 0), cfg, 1)


def snapshot(bundle):
    return {k: v.detach().clone() for k, v in bundle.named_parameters()}


def group_of(name):
    for g in ("base.decoder", "retrieval", "conjunction"):
        if name.startswith(g + "."):
            return g
    return "frozen"


@pytest.mark.parametrize("policy", ["train_both", "lock_decoder", "lock_both"])
def test_freeze_policy_trainability(policy):
    bundle = apply_freeze_policy(fresh_bundle(), policy)
    for name, p in bundle.named_parameters():
        assert p.requires_grad == (group_of(name) in TRAINABLE[policy]), name


@pytest.mark.parametrize("policy", ["train_both", "lock_decoder", "lock_both"])
def test_freeze_policy_twenty_steps(policy, pool):
    bundle = fresh_bundle()
    trainer = Trainer(bundle, TrainConfig(lr=1e-3, batch_size=2, freeze_policy=policy, seed=0))
    before = snapshot(bundle)
    trainer.fit(pool, 20)
    changed_groups = set()
    for name, p in bundle.named_parameters():
        g = group_of(name)
        if g in TRAINABLE[policy]:
            if not torch.equal(p, before[name]):
                changed_groups.add(g)
        else:
            assert torch.equal(p, before[name]), name
    assert changed_groups == TRAINABLE[policy]


def test_lock_decoder_keeps_decoder_after_one_step(pool):
    bundle = fresh_bundle()
    trainer = Trainer(bundle, TrainConfig(freeze_policy="lock_decoder"))
    before = snapshot(bundle)
    trainer.step(pool[:1])
    for name, p in bundle.named_parameters():
        if name.startswith("base.decoder."):
            assert torch.equal(p, before[name])


def test_gradient_flow_after_first_update(pool):
    bundle = fresh_bundle()
    config = TrainConfig(lr=1e-3, batch_size=2, p_drop=0.0)
    rng = np.random.default_rng(0)
    opt = make_optimizer(bundle, config)
    train_step(bundle, pool[:2], config, rng, opt)  # zero convs become nonzero
    batch = collate(pool[2:4])
    t, noise, prompts = draw_step_noise(batch, bundle, config, rng)
    opt.zero_grad(set_to_none=True)
    step_loss(bundle, batch, t, noise, prompts, 1.0).backward()
    for name, p in bundle.named_parameters():
        g = group_of(name)
        if g in ("retrieval", "conjunction"):
            assert p.grad is not None and p.grad.abs().sum() > 0, name
        elif g == "frozen":
            assert p.grad is None, name


def test_training_deterministic(pool):
    runs = []
    for _ in range(2):
        trainer = Trainer(fresh_bundle(), TrainConfig(seed=4, batch_size=2))
        runs.append(trainer.fit(pool, 10))
    assert runs[0] == runs[1]


def test_first_step_matches_base_loss(pool):
    bundle = fresh_bundle()
    config = TrainConfig(seed=2, batch_size=2)
    batch = collate(pool[:2])
    t, noise, prompts = draw_step_noise(batch, bundle, config, np.random.default_rng(2))
    with torch.no_grad():
        base = step_loss(bundle, batch, t, noise, prompts, 1.0, use_refs=False)
    trainer = Trainer(bundle, config)
    first = trainer.step(pool[:2])
    assert abs(first - base.item()) < 1e-4


def test_non_finite_loss_dumps_inputs(pool, tmp_path):
    bundle = fresh_bundle()
    with torch.no_grad():
        bundle.base.decoder.conv_out.bias.fill_(float("nan"))
    trainer = Trainer(bundle, TrainConfig(), tmp_path)
    with pytest.raises(NonFiniteLoss, match="non-finite"):
        trainer.step(pool[:1])
    dump = torch.load(tmp_path / "nonfinite_step.pt", weights_only=True)
    assert dump["target_ids"] == [pool[0].target_id]


def test_periodic_checkpoints(pool, tmp_path):
    trainer = Trainer(fresh_bundle(), TrainConfig(checkpoint_every=2), tmp_path)
    trainer.fit(pool, 4)
    trainer.save()
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt_final.pt", "ckpt_step000002.pt", "ckpt_step000004.pt"]


def test_train_config_validation():
    assert TrainConfig().p_drop == 0.5 and TrainConfig().lambda_face == 1.0
    for bad in (dict(p_drop=1.2), dict(lambda_face=-1), dict(lr=0), dict(freeze_policy="nope")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
