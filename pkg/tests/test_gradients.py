"""Finite-difference checks of every differentiable loss on tiny inputs."""

import torch
import torch.nn.functional as F

from seda import losses

torch.set_num_threads(1)

H_STEP = 1e-6
TOL = 1e-3


def fd_grad(fn, x, h=H_STEP):
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = fn(x).item()
        flat[i] = orig - h
        fm = fn(x).item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def assert_grad_matches(fn, x, tol=TOL):
    xg = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(xg), xg)
    numeric = fd_grad(fn, x)
    err = (analytic - numeric).abs() / numeric.abs().clamp_min(1e-3)
    worst = err.max().item()
    assert worst <= tol, f"relative gradient error {worst:.2e}"


def rand(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


def onehot_labels(shape, c, seed):
    g = torch.Generator().manual_seed(seed)
    lab = torch.randint(0, c, shape, generator=g)
    return lab, F.one_hot(lab, c).permute(0, 3, 1, 2).double()


def test_grad_cross_entropy():
    logits = rand((1, 3, 4, 4), seed=1)
    _, y = onehot_labels((1, 4, 4), 3, seed=2)
    assert_grad_matches(lambda lg: losses.cross_entropy_seg(losses.softmax_prob(lg), y), logits)


def test_grad_lovasz():
    logits = rand((1, 3, 4, 4), seed=3)
    lab, _ = onehot_labels((1, 4, 4), 3, seed=4)
    assert_grad_matches(lambda lg: losses.lovasz_softmax(losses.softmax_prob(lg), lab), logits)


def test_grad_self_information():
    logits = rand((1, 3, 3, 3), seed=5)
    assert_grad_matches(lambda lg: losses.self_information(losses.softmax_prob(lg)).sum(), logits)


def test_grad_entropy():
    logits = rand((1, 4, 3, 3), seed=6)
    assert_grad_matches(lambda lg: losses.entropy(losses.softmax_prob(lg)).image_mean.sum(),
                        logits)


def test_grad_adv_sem_disc_source():
    s_tgt = rand((1, 1, 4, 4), seed=7)
    assert_grad_matches(lambda s: losses.adv_sem(s, s_tgt, 0.4, 10.0, "disc"),
                        rand((1, 1, 4, 4), seed=8))


def test_grad_adv_sem_disc_target():
    s_src = rand((1, 1, 4, 4), seed=9)
    assert_grad_matches(lambda s: losses.adv_sem(s_src, s, 0.4, 10.0, "disc"),
                        rand((1, 1, 4, 4), seed=10))


def test_grad_adv_sem_gen():
    assert_grad_matches(lambda s: losses.adv_sem(None, s, 0.4, 10.0, "gen"),
                        rand((1, 1, 4, 4), seed=11))


def test_grad_adv_edge():
    s_src = rand((1, 1, 4, 4), seed=12)
    assert_grad_matches(lambda s: losses.adv_edge(s_src, s, "disc"), rand((1, 1, 4, 4), seed=13))
    assert_grad_matches(lambda s: losses.adv_edge(None, s, "gen"), rand((1, 1, 4, 4), seed=14))


def test_grad_edge_bce():
    g = torch.Generator().manual_seed(15)
    gt = (torch.rand(1, 1, 4, 4, generator=g) > 0.6).double()
    pred = 0.2 + 0.6 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)
    assert_grad_matches(lambda p: losses.edge_bce(p, gt), pred)


def test_grad_uasl():
    logits = rand((1, 3, 4, 4), seed=16)
    _, y = onehot_labels((1, 4, 4), 3, seed=17)
    g = torch.Generator().manual_seed(18)
    e = torch.rand(1, 4, 4, generator=g, dtype=torch.float64)
    assert_grad_matches(lambda lg: losses.uasl(losses.softmax_prob(lg), y, e), logits)


def test_grad_boundary_soft_path():
    logits = rand((1, 3, 4, 4), seed=19)

    def fn(lg):
        g = torch.Generator().manual_seed(99)
        return losses.pred_to_boundary(lg, tau=1.0, sigma=1.0, generator=g, hard=False).mean()

    assert_grad_matches(fn, logits)


def test_grad_boundary_straight_through_flows():
    # the hard forward is locally constant in the logits (the straight-through
    # residual is numerically zero), so FD on it is useless; what matters is
    # that the backward pass still carries finite, nonzero gradients
    logits = rand((1, 3, 4, 4), seed=20)
    xg = logits.detach().clone().requires_grad_(True)
    g = torch.Generator().manual_seed(101)
    out = losses.pred_to_boundary(xg, tau=1.0, sigma=1.0, generator=g, hard=True).mean()
    (grad,) = torch.autograd.grad(out, xg)
    assert torch.isfinite(grad).all()
    assert grad.abs().sum() > 0


def test_grad_edge_consistency():
    # values held clear of the 0.5 threshold so the active set is stable
    g = torch.Generator().manual_seed(21)
    base = (torch.rand(1, 1, 4, 4, generator=g) > 0.5).double()
    p = base * 0.85 + 0.1 + 0.02 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)
    b = base * 0.8 + 0.05 + 0.02 * torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)
    assert_grad_matches(lambda x: losses.edge_consistency(x, b, theta=0.5), p)
