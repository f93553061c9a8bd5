import json

import numpy as np
import pytest
import torch
from scipy.special import erf

from stella.decode_fusion import ComponentHead, GatedFusion, gate_export
from stella.numerics import grad_check_module


def _perturbed(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def _comps(rng, b=2, h=12, c=3):
    return [torch.from_numpy(rng.normal(size=(b, h, c))) for _ in range(3)]


def test_fresh_fusion_is_plain_sum(rng):
    fusion = GatedFusion(12).double()
    yt, ys, yr = _comps(rng)
    y, g = fusion(yt, ys, yr)
    assert (g == 1).all()
    assert torch.equal(y, yt + ys + yr)


def test_trend_only_gate(rng):
    fusion = GatedFusion(12).double()
    with torch.no_grad():
        fusion.w_base.copy_(torch.tensor([1.0, 0.0, 0.0]))
    yt, ys, yr = _comps(rng)
    y, _ = fusion(yt, ys, yr)
    assert torch.equal(y, yt)


def test_gates_match_offline_recompute(rng):
    fusion = _perturbed(GatedFusion(12).double())
    yt, ys, yr = _comps(rng)
    y, g = fusion(yt, ys, yr)
    w1, b1 = fusion.fc1.weight.detach().numpy(), fusion.fc1.bias.detach().numpy()
    w2, b2 = fusion.fc2.weight.detach().numpy(), fusion.fc2.bias.detach().numpy()
    wb = fusion.w_base.detach().numpy()
    comps = [t.numpy() for t in (yt, ys, yr)]
    for b in range(2):
        for c in range(3):
            f = sum(t[b, :, c] for t in comps)
            u = w1 @ f + b1
            u = 0.5 * u * (1 + erf(u / np.sqrt(2)))
            gate = wb + (w2 @ u + b2).reshape(12, 3)
            np.testing.assert_allclose(g[b, :, c].detach().numpy(), gate, rtol=0, atol=1e-12)
            yc = sum(gate[:, k] * comps[k][b, :, c] for k in range(3))
            np.testing.assert_allclose(y[b, :, c].detach().numpy(), yc, rtol=0, atol=1e-12)


def test_gate_network_shared_across_channels(rng):
    fusion = _perturbed(GatedFusion(12).double())
    comps = _comps(rng)
    perm = torch.tensor([2, 0, 1])
    y, g = fusion(*comps)
    yp, gp = fusion(*(t[..., perm] for t in comps))
    assert torch.allclose(yp, y[..., perm], atol=1e-14)
    assert torch.allclose(gp, g[:, :, perm], atol=1e-14)


def test_shape_mismatch_rejected():
    fusion = GatedFusion(4)
    with pytest.raises(ValueError):
        fusion(torch.zeros(1, 4, 2), torch.zeros(1, 4, 2), torch.zeros(1, 4, 3))


def test_gate_export_round_trip(rng):
    fusion = _perturbed(GatedFusion(4).double())
    comps = _comps(rng, b=1, h=4, c=2)
    _, g = fusion(*comps)
    doc = json.loads(gate_export(g, dict(zip(("trend", "seasonal", "residual"), comps))))
    assert doc["order"] == ["trend", "seasonal", "residual"]
    assert np.array_equal(np.array(doc["gates"]), g.detach().numpy())


@pytest.mark.parametrize("h", [96, 192, 336, 720])
def test_head_shapes(h):
    head = ComponentHead(6, 16, h).double().eval()
    out = head(torch.randn(2 * 7, 6, 16, dtype=torch.float64), 7)
    assert out.shape == (2, h, 7)


def test_head_matches_formula(rng):
    head = _perturbed(ComponentHead(3, 4, 5, lora_dropout=0.0).double().eval())
    z = torch.from_numpy(rng.normal(size=(2, 3, 4)))
    out = head(z, 1)

    def lin(m, x):
        w = m.weight + m.scale * m.lora_B @ m.lora_A
        return x @ w.T + m.bias

    h = head.norm(z)
    mid = z + lin(head.fc2, torch.nn.functional.gelu(lin(head.fc1, h)))
    ref = lin(head.proj, mid.reshape(2, -1))
    assert torch.allclose(out[:, :, 0], ref, atol=1e-12)


def test_head_direct_forecasting(rng):
    """Each step reads the whole token sequence; no step depends on another step's output."""
    head = _perturbed(ComponentHead(3, 4, 6, lora_dropout=0.0).double().eval())
    z = torch.from_numpy(rng.normal(size=(1, 3, 4))).requires_grad_(True)
    out = head(z, 1)
    for step in range(6):
        (g,) = torch.autograd.grad(out[0, step, 0], z, retain_graph=True)
        assert (g.abs().sum(-1) > 0).all()


def test_head_channel_split():
    head = ComponentHead(2, 4, 3)
    with pytest.raises(ValueError):
        head(torch.randn(5, 2, 4), 2)


@pytest.mark.parametrize("seed", range(10))
def test_head_gradients(seed):
    head = _perturbed(ComponentHead(3, 4, 5, lora_r=2, lora_alpha=4.0, lora_dropout=0.0)
                      .double().eval(), seed)
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    w = torch.randn(1, 5, 2, generator=g, dtype=torch.float64)
    rep = grad_check_module(head, lambda: (head(z, 2) * w).sum(), eps=1e-5, max_entries=12,
                            generator=np.random.default_rng(seed))
    assert all(r.passed for r in rep.values()), rep


@pytest.mark.parametrize("seed", range(10))
def test_fusion_gradients(seed):
    fusion = _perturbed(GatedFusion(8, hidden=5).double(), seed)
    comps = _comps(np.random.default_rng(seed), b=2, h=8, c=2)
    rep = grad_check_module(fusion, lambda: fusion(*comps)[0].pow(2).sum(), eps=1e-5,
                            max_entries=12, generator=np.random.default_rng(seed))
    assert all(r.passed for r in rep.values()), rep
