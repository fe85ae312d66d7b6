import numpy as np
import pytest
import torch

from dfgan.config import ModelConfig
from dfgan.network import (PatchDiscriminator, ProgressiveGenerator, attention_from_sigma,
                           discriminator_forward, freeze_stages_below, set_dropout, stage_checksums,
                           stage_forward, trainable_parameters)
from dfgan.utils import torch_seed

SMALL = ModelConfig(n_stages=3, base_width=8, levels=3, dropout_rate=0.1, disc_width=8)


@pytest.fixture
def gen():
    torch.manual_seed(0)
    return ProgressiveGenerator(SMALL)


def test_outputs_bounded_and_shaped(gen):
    x = torch.rand(2, 1, 20, 28)
    for out in gen(x):
        assert out.pred.shape == out.alpha.shape == out.beta.shape == x.shape
        assert out.pred.min() >= 0 and out.pred.max() <= 1
        assert out.alpha.min() > 0
        assert out.beta.min() >= SMALL.beta_min and out.beta.max() <= SMALL.beta_max


def test_odd_sizes_supported(gen):
    out = gen(torch.rand(1, 1, 17, 23))[-1]
    assert out.pred.shape == (1, 1, 17, 23)


def test_initial_heads():
    torch.manual_seed(0)
    g = ProgressiveGenerator(ModelConfig(base_width=8, levels=3, dropout_rate=0.0))
    outs = g(torch.rand(4, 1, 32, 32))
    assert outs[0].alpha.mean().item() == pytest.approx(0.1, rel=0.3)
    assert outs[0].beta.mean().item() == pytest.approx(2.0, rel=0.2)
    # refinement stages start as exact copies of the previous outputs (up to clamping and rounding)
    for prev, cur in zip(outs, outs[1:]):
        torch.testing.assert_close(cur.pred, prev.pred, atol=1e-5, rtol=0)
        torch.testing.assert_close(cur.alpha, prev.alpha, atol=1e-6, rtol=1e-5)
        torch.testing.assert_close(cur.beta, prev.beta, atol=1e-5, rtol=0)


def test_deterministic_without_dropout(gen):
    set_dropout(gen, 0.0)
    x = torch.rand(1, 1, 16, 16)
    a, b = gen(x)[-1], gen(x)[-1]
    assert torch.equal(a.pred, b.pred) and torch.equal(a.alpha, b.alpha)


def test_dropout_active_in_eval_mode(gen):
    gen.eval()
    x = torch.rand(1, 1, 16, 16)
    preds = torch.stack([gen(x)[-1].pred for _ in range(5)])
    assert preds.var(dim=0).max() > 0


def test_seeded_passes_reproducible(gen):
    x = torch.rand(1, 1, 16, 16)
    with torch_seed(5):
        a = gen(x)[-1].pred
    with torch_seed(5):
        b = gen(x)[-1].pred
    assert torch.equal(a, b)


def test_stage_forward_shape_checks(gen):
    img = np.random.default_rng(0).random((16, 16))
    out = stage_forward(gen, 1, img)
    assert out.pred.shape == (1, 1, 16, 16)
    sigma = out.sigma[0, 0].detach()
    out2 = stage_forward(gen, 2, img, attention=attention_from_sigma(sigma), prev_pred=out.pred.detach())
    assert out2.pred.shape == (1, 1, 16, 16)
    with pytest.raises(ValueError):
        stage_forward(gen, 2, img, attention=np.zeros((8, 16)), prev_pred=out.pred.detach())
    with pytest.raises(ValueError):
        stage_forward(gen, 2, img)
    with pytest.raises(ValueError):
        gen(torch.rand(1, 1, 16, 16), upto=4)


def test_attention_from_sigma():
    assert torch.all(attention_from_sigma(torch.full((4, 4), 0.3)) == 0.5)
    out = attention_from_sigma(torch.tensor([[1.0, 2.0, 3.0]]))
    torch.testing.assert_close(out, torch.tensor([[0.0, 0.5, 1.0]]))
    batch = torch.rand(3, 1, 8, 8) * 5 + 0.1
    out = attention_from_sigma(batch)
    assert out.min() >= 0 and out.max() <= 1
    for i in range(3):   # per-image normalisation
        assert out[i].min() == 0 and out[i].max() == 1


def test_freeze_stages_below(gen):
    freeze_stages_below(gen, 1)
    assert len(trainable_parameters(gen)) == len(list(gen.parameters()))
    freeze_stages_below(gen, 3)
    once = [p.requires_grad for p in gen.parameters()]
    freeze_stages_below(gen, 3)
    assert once == [p.requires_grad for p in gen.parameters()]
    assert not any(p.requires_grad for s in gen.stages[:2] for p in s.parameters())
    assert all(p.requires_grad for p in gen.stages[2].parameters())
    for bad in (0, 4):
        with pytest.raises(ValueError):
            freeze_stages_below(gen, bad)


def test_frozen_checksums_survive_optimisation(gen):
    freeze_stages_below(gen, 3)
    before = stage_checksums(gen)
    opt = torch.optim.Adam(trainable_parameters(gen), lr=1e-2)
    x = torch.rand(2, 1, 16, 16)
    for _ in range(3):
        opt.zero_grad()
        out = gen(x)[-1]
        (out.pred.mean() + out.alpha.mean()).backward()
        opt.step()
    after = stage_checksums(gen)
    assert after[:2] == before[:2]
    assert after[2] != before[2]
    assert all(id(p) not in {id(q) for q in trainable_parameters(gen)} for p in gen.stages[0].parameters())


def test_discriminator_grid_and_batch_independence():
    torch.manual_seed(0)
    d = PatchDiscriminator(width=8, downsamplings=3)
    cand, cond = torch.rand(3, 1, 64, 64), torch.rand(3, 1, 64, 64)
    out = discriminator_forward(d, cand, cond)
    assert out.shape == (3, 1, 8, 8)
    assert torch.isfinite(out).all()
    perm = torch.tensor([2, 0, 1])
    torch.testing.assert_close(discriminator_forward(d, cand[perm], cond[perm]), out[perm])
    with pytest.raises(ValueError):
        discriminator_forward(d, cand, cond[:, :, :32])
