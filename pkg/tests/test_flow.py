import math

import numpy as np
import pytest
import torch
from scipy import stats

from varspeech.distributions import DiagGaussian, log_prob
from varspeech.flow import CouplingBlock, FlowNumericError, FlowStack, flow_log_prob, flow_sample


def randomize(module, seed, scale=0.4):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def make_flow(d=4, d_ctx=6, seed=0, dtype=torch.float64, n_blocks=4, out_scale=0.3):
    """Default-initialised conditioners with random (non-zero) output layers."""
    torch.manual_seed(seed)
    fs = FlowStack(d, d_ctx, n_blocks, hidden=16).to(dtype)
    for i, blk in enumerate(fs.blocks):
        randomize(blk.out, seed * 31 + i, out_scale)
    return fs


def test_fresh_flow_is_identity():
    fs = FlowStack(4, 8)
    z, ctx = torch.randn(5, 4), torch.randn(5, 8)
    u, ld = fs(z, ctx)
    assert torch.equal(u, z) and torch.equal(ld, torch.zeros(5))
    base = DiagGaussian(torch.randn(5, 4), torch.randn(5, 4) * 0.1)
    assert torch.allclose(flow_log_prob(fs, z, base, ctx), log_prob(base, z))


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
@pytest.mark.parametrize("d", [2, 3, 4, 5])
def test_round_trip(dtype, tol, d):
    fs = make_flow(d=d, dtype=dtype, seed=d)
    z = torch.randn(64, d, dtype=dtype)
    ctx = torch.randn(64, 6, dtype=dtype)
    u, ld = fs(z, ctx)
    back, ld_inv = fs.inverse(u, ctx, return_log_det=True)
    assert (back - z).abs().max() < tol
    assert torch.allclose(ld, -ld_inv, atol=tol)
    assert ld.abs().max() > 1e-3  # the randomized flow is not trivial


def fd_jacobian(f, z, eps=1e-6):
    cols = []
    for i in range(z.numel()):
        e = torch.zeros_like(z)
        e[i] = eps
        cols.append((f(z + e) - f(z - e)) / (2 * eps))
    return torch.stack(cols, dim=1)


def test_log_det_matches_finite_difference_jacobian():
    for trial in range(10):
        fs = make_flow(seed=100 + trial)
        ctx = torch.randn(6, dtype=torch.float64)
        z = torch.randn(4, dtype=torch.float64)
        with torch.no_grad():
            J = fd_jacobian(lambda v: fs(v[None], ctx[None])[0][0], z)
        with torch.no_grad():
            _, ld = fs(z[None], ctx[None])
        ref = torch.linalg.slogdet(J)[1]
        assert abs(float(ld) - float(ref)) <= 1e-4 * max(abs(float(ref)), 1e-2)


def test_block_swaps_alternate_and_leave_half_unchanged():
    fs = make_flow()
    z, ctx = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 6, dtype=torch.float64)
    u0, _ = fs.blocks[0](z, ctx)
    u1, _ = fs.blocks[1](z, ctx)
    assert torch.equal(u0[:, :2], z[:, :2]) and not torch.allclose(u0[:, 2:], z[:, 2:])
    assert torch.equal(u1[:, 2:], z[:, 2:]) and not torch.allclose(u1[:, :2], z[:, :2])


def test_log_scale_is_bounded():
    blk = randomize(CouplingBlock(4, 3, hidden=8, s_max=3.0).double(), 0, scale=50.0)
    z = torch.randn(200, 4, dtype=torch.float64) * 10
    _, ld = blk(z, torch.randn(200, 3, dtype=torch.float64) * 10)
    assert ld.abs().max() <= 2 * 3.0 + 1e-9


def test_density_integrates_to_one_on_grid():
    fs = make_flow(d=2, seed=7)
    ctx = torch.randn(1, 6, dtype=torch.float64).expand(1, 6)
    base = DiagGaussian(torch.tensor([0.2, -0.1], dtype=torch.float64), torch.tensor([-0.3, 0.1], dtype=torch.float64))
    g = torch.linspace(-12, 12, 801, dtype=torch.float64)
    zz = torch.cartesian_prod(g, g)
    logp = flow_log_prob(fs, zz, DiagGaussian(base.mean.expand(len(zz), 2), base.log_std.expand(len(zz), 2)),
                         ctx.expand(len(zz), 6))
    mass = float(logp.detach().exp().sum()) * float(g[1] - g[0]) ** 2
    assert abs(mass - 1.0) < 0.01


def test_samples_match_density_histogram():
    fs = make_flow(d=2, seed=8)
    n = 200_000
    ctx = torch.randn(1, 6, dtype=torch.float64).expand(n, 6)
    base = DiagGaussian(torch.zeros(n, 2, dtype=torch.float64), torch.zeros(n, 2, dtype=torch.float64))
    with torch.no_grad():
        z = flow_sample(fs, base, ctx, 1.0, torch.Generator().manual_seed(0))
    edges = np.linspace(-5, 5, 41)
    hist, _, _ = np.histogram2d(z[:, 0].numpy(), z[:, 1].numpy(), bins=[edges, edges])
    p_hat = hist / n
    # cell probabilities from the density, midpoint rule on a 5x finer grid
    fine = np.linspace(-5, 5, 201)
    mids = torch.tensor((fine[:-1] + fine[1:]) / 2)
    zz = torch.cartesian_prod(mids, mids)
    m = len(zz)
    with torch.no_grad():
        logp = flow_log_prob(fs, zz, DiagGaussian(torch.zeros(m, 2, dtype=torch.float64), torch.zeros(m, 2, dtype=torch.float64)),
                             ctx[:1].expand(m, 6))
    dens = logp.exp().numpy().reshape(200, 200) * (fine[1] - fine[0]) ** 2
    p = dens.reshape(40, 5, 40, 5).sum(axis=(1, 3))
    mask = p_hat > 0
    kl = float(np.sum(p_hat[mask] * np.log(p_hat[mask] / np.maximum(p[mask], 1e-300))))
    assert kl < 0.05


def test_identity_flow_sample_matches_base_ks():
    fs = FlowStack(2, 4).double()
    n = 10_000
    base = DiagGaussian(torch.full((n, 2), 0.5, dtype=torch.float64), torch.full((n, 2), -0.2, dtype=torch.float64))
    with torch.no_grad():
        z = flow_sample(fs, base, torch.zeros(n, 4, dtype=torch.float64), 1.0, torch.Generator().manual_seed(3))
    for i in range(2):
        res = stats.kstest(z[:, i].numpy(), "norm", args=(0.5, math.exp(-0.2)))
        assert res.pvalue > 0.01


def test_tiny_temperature_returns_inverse_of_mean():
    fs = make_flow(seed=9)
    base = DiagGaussian(torch.randn(3, 4, dtype=torch.float64), torch.zeros(3, 4, dtype=torch.float64))
    ctx = torch.randn(3, 6, dtype=torch.float64)
    target = fs.inverse(base.mean, ctx)
    # log_std is clamped at -7, so shrink tau only as far as the clamp allows
    errs = [float((flow_sample(fs, base, ctx, tau, torch.Generator().manual_seed(0)) - target).abs().max())
            for tau in (1e-1, 1e-2, 1e-3)]
    assert errs[2] < 1e-2 and errs[2] < errs[1] < errs[0]
    with pytest.raises(ValueError):
        flow_sample(fs, base, ctx, 0.0)


def test_seeded_sampling():
    fs = make_flow(seed=10)
    base = DiagGaussian(torch.zeros(3, 4, dtype=torch.float64), torch.zeros(3, 4, dtype=torch.float64))
    ctx = torch.randn(3, 6, dtype=torch.float64)
    a = flow_sample(fs, base, ctx, 0.85, torch.Generator().manual_seed(5))
    b = flow_sample(fs, base, ctx, 0.85, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_gradients_match_finite_differences():
    fs = make_flow(d=4, seed=11, n_blocks=2)
    ctx = torch.randn(2, 6, dtype=torch.float64)
    z = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    mean = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    log_std = (torch.randn(2, 4, dtype=torch.float64) * 0.2).requires_grad_()
    w = fs.blocks[0].inp.weight

    def f(z, mean, log_std, w_):
        with torch.no_grad():
            w.copy_(w_)
        return flow_log_prob(fs, z, DiagGaussian(mean, log_std), ctx)

    assert torch.autograd.gradcheck(lambda z, m, s: flow_log_prob(fs, z, DiagGaussian(m, s), ctx),
                                    (z, mean, log_std), eps=1e-6, atol=1e-8, rtol=1e-5)
    # conditioner weights: compare autograd against central differences directly
    loss = flow_log_prob(fs, z.detach(), DiagGaussian(mean.detach(), log_std.detach()), ctx).sum()
    grad = torch.autograd.grad(loss, w)[0]
    eps = 1e-6
    for idx in [(0, 0), (3, 1), (7, 0)]:
        with torch.no_grad():
            orig = w[idx].item()
            w[idx] = orig + eps
            up = flow_log_prob(fs, z.detach(), DiagGaussian(mean.detach(), log_std.detach()), ctx).sum().item()
            w[idx] = orig - eps
            down = flow_log_prob(fs, z.detach(), DiagGaussian(mean.detach(), log_std.detach()), ctx).sum().item()
            w[idx] = orig
        fd = (up - down) / (2 * eps)
        assert abs(fd - grad[idx].item()) <= 1e-5 * max(abs(fd), 1e-3)


def test_errors():
    fs = make_flow()
    with pytest.raises(ValueError):
        fs(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 6, dtype=torch.float64))
    with pytest.raises(ValueError):
        fs(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 5, dtype=torch.float64))
    z = torch.zeros(2, 4, dtype=torch.float64)
    z[0, 3] = float("nan")
    with pytest.raises(FlowNumericError, match="block 0"):
        fs(z, torch.zeros(2, 6, dtype=torch.float64))
    with pytest.raises(ValueError):
        CouplingBlock(1, 4)


def test_none_or_empty_flow_is_identity():
    base = DiagGaussian(torch.zeros(2, 3), torch.zeros(2, 3))
    z = torch.randn(2, 3)
    assert torch.equal(flow_log_prob(None, z, base, None), log_prob(base, z))
    assert torch.equal(flow_log_prob(FlowStack(3, 2, n_blocks=0), z, base, torch.zeros(2, 2)), log_prob(base, z))
