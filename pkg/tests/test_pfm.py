import math

import pytest
import torch

from pfmce.numeric import NEG_INF, causal_mask, grad_check, sinusoidal_encoding
from pfmce.pfm import PFM, PatchBatch, PfmConfig, ResidualBlock, denormalize, normalize, patchify, preprocess


def small(**kw) -> PFM:
    torch.manual_seed(kw.pop("seed", 0))
    cfg = PfmConfig(**{"n_layers": 2, "d_model": 32, "n_heads": 4, "patch_len": 8, **kw})
    return PFM(cfg).double()


def test_config_defaults():
    cfg = PfmConfig()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.patch_len) == (2, 1280, 16, 32)
    assert cfg.context_len == cfg.horizon == 14
    assert cfg.ffn_hidden == 4 * 1280
    with pytest.raises(ValueError):
        PfmConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        PfmConfig(patch_len=0)


def test_preprocess_pads_to_one_patch():
    z = torch.randn(5, 14, dtype=torch.float64)
    batch, stats = preprocess(z, 32)
    assert batch.patches.shape == (5, 1, 32)
    assert batch.pad == 18
    assert torch.all(batch.patches[..., :18] == 0)
    zn = (z - z.mean(-1, keepdim=True)) / z.std(-1, unbiased=False, keepdim=True)
    assert torch.allclose(batch.patches[..., 0, 18:], zn, atol=1e-12)
    assert torch.all(stats.std >= 1e-3)


def test_constant_sequence_normalizes_to_zero():
    zn, stats = normalize(torch.full((2, 14), 4.0, dtype=torch.float64))
    assert torch.equal(zn, torch.zeros(2, 14, dtype=torch.float64))
    assert torch.all(stats.std == 1e-3)


def test_two_patches_hand_sliced():
    z = torch.randn(3, 64, dtype=torch.float64)
    batch = patchify(z, 32)
    assert batch.patches.shape == (3, 2, 32) and batch.pad == 0
    assert torch.equal(batch.patches[:, 0], z[:, :32]) and torch.equal(batch.patches[:, 1], z[:, 32:])


def test_normalization_round_trip():
    z = torch.randn(7, 14, dtype=torch.float64) * 3 + 2
    zn, stats = normalize(z)
    assert torch.max(torch.abs(denormalize(zn, stats) - z)) < 1e-12


def test_input_projection_zero_block_gives_encoding():
    m = small()
    m.in_res.zero_()
    batch = PatchBatch(torch.zeros(4, 3, 8, dtype=torch.float64), torch.arange(3), 0)
    e = m.input_project(batch)
    assert torch.equal(e, sinusoidal_encoding(3, 32, dtype=torch.float64).expand(4, 3, 32))


def test_positional_encoding_values():
    pe = sinusoidal_encoding(5, 16, dtype=torch.float64)
    assert torch.equal(pe[0, 0::2], torch.zeros(8, dtype=torch.float64))
    assert torch.equal(pe[0, 1::2], torch.ones(8, dtype=torch.float64))
    for pos in range(5):
        for i in range(8):
            angle = pos / 10000 ** (2 * i / 16)
            assert abs(pe[pos, 2 * i].item() - math.sin(angle)) < 1e-12
            assert abs(pe[pos, 2 * i + 1].item() - math.cos(angle)) < 1e-12


def test_causal_mask_three_patches():
    m = causal_mask(3, dtype=torch.float64)
    expected = torch.tensor([[0, NEG_INF, NEG_INF], [0, 0, NEG_INF], [0, 0, 0]], dtype=torch.float64)
    assert torch.equal(m, expected)


@pytest.mark.parametrize("n_layers", [1, 2, 3])
def test_backbone_causality(n_layers):
    m = small(n_layers=n_layers)
    e = torch.randn(2, 4, 32, dtype=torch.float64)
    base = m.backbone(e)
    for j in range(3):
        pert = e.clone()
        pert[:, j + 1 :] += torch.randn_like(pert[:, j + 1 :]) * 5
        out = m.backbone(pert)
        assert torch.equal(out[:, : j + 1], base[:, : j + 1])


def test_single_patch_attention_is_mask_free():
    m = small()
    e = torch.randn(6, 1, 32, dtype=torch.float64)
    assert torch.max(torch.abs(m.backbone(e, causal=True) - m.backbone(e, causal=False))) < 1e-12


def test_zero_output_block_predicts_sequence_mean():
    m = small()
    m.out_res.zero_()
    z = torch.randn(9, 14, dtype=torch.float64)
    pred, _ = m(z)
    assert torch.allclose(pred, z.mean(-1, keepdim=True).expand(9, 14), atol=1e-14)


def test_paper_scale_shapes():
    torch.manual_seed(0)
    m = PFM(PfmConfig())
    q = 2 * 4 * 24
    pred, u = m(torch.randn(q, 14))
    assert pred.shape == (q, 14) and u.shape == (q, 1280)


def test_scale_equivariance():
    m = small()
    z = torch.randn(6, 14, dtype=torch.float64)
    alpha = torch.tensor([[0.5], [2.0], [3.0], [0.1], [7.0], [1.0]], dtype=torch.float64)
    beta = torch.randn(6, 1, dtype=torch.float64)
    a, _ = m(alpha * z + beta)
    b, _ = m(z)
    assert torch.max(torch.abs(a - (alpha * b + beta))) < 1e-8


def test_sequence_permutation_equivariance():
    m = small()
    z = torch.randn(10, 14, dtype=torch.float64)
    perm = torch.randperm(10)
    a, ua = m(z[perm])
    b, ub = m(z)
    assert torch.equal(a, b[perm]) and torch.equal(ua, ub[perm])


def test_output_depends_on_last_patch_state_only():
    m = small(patch_len=4)
    z = torch.randn(3, 14, dtype=torch.float64)
    u, stats = m.hidden(z)
    assert u.shape[-2] == 4
    u_zeroed = u.clone()
    u_zeroed[..., :-1, :] = 0
    a = denormalize(m.out_res(u[..., -1, :]), stats)
    b = denormalize(m.out_res(u_zeroed[..., -1, :]), stats)
    assert torch.equal(a, b)
    assert torch.equal(m(z)[0], a)
    assert torch.equal(m(z)[1], u[..., -1, :])


def test_residual_block_skip():
    blk = ResidualBlock(5, 8, 5).double()
    assert blk.skip is None
    blk.zero_()
    x = torch.randn(2, 5, dtype=torch.float64)
    assert torch.equal(blk(x), x)
    wide = ResidualBlock(5, 8, 3).double().zero_()
    assert torch.equal(wide(x), torch.zeros(2, 3, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(20))
def test_full_model_grad_check(seed):
    m = small(seed=seed, patch_len=4)
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(3, 14, generator=g, dtype=torch.float64)
    target = torch.randn(3, 14, generator=g, dtype=torch.float64)
    params = list(m.parameters())

    def loss():
        pred, u = m(z)
        return ((pred - target) ** 2).mean() + 0.1 * (u**2).mean()

    assert grad_check(loss, params, max_entries=6, seed=seed) < 1e-4
