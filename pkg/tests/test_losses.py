"""Loss values and gradients against an independent numpy forward pass.

Gradient oracle: every loss is re-expressed as a numpy function of *live*
parameters (perturbed by central differences) and *stopped* parameters (held at
their base value), which is exactly the function whose gradient autograd
computes when a pass is detached.
"""

import math

import numpy as np
import pytest
import torch

from ider.errors import ConfigError, ShapeError, TermDisabled
from ider.losses import (LossConfig, choose_second_input, distance, ider_terms, l_bfp, l_ice,
                         l_ide, l_ide_naive, l_rep_ice, make_projection)
from ider.model import ModelConfig, build_net, empty_signal, snapshot

D, H, C, N = 4, 6, 3, 5
REL_TOL = 1e-4
FD_STEP = 1e-6


# numpy reference model

def lrelu(a):
    return np.where(a > 0, a, 0.01 * a)


def np_features(p, x, y2):
    return lrelu(x @ p["part1.0.weight"].T + p["part1.0.bias"]) + \
        lrelu(y2 @ p["label_embed.0.weight"].T + p["label_embed.0.bias"])


def np_forward(p, x, y2):
    return np_features(p, x, y2) @ p["part2.weight"].T + p["part2.bias"]


def np_softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_ce(logits, y):
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def np_mse(a, b):
    return ((a - b) ** 2).mean()


def np_kl(y0, y1):
    p1 = np_softmax(y1)
    return (p1 * (np.log(p1) - np.log(np_softmax(y0)))).sum(-1).mean()


# helpers

def random_params(seed):
    rng = np.random.default_rng(seed)
    shapes = {"part1.0.weight": (H, D), "part1.0.bias": (H,), "label_embed.0.weight": (H, C),
              "label_embed.0.bias": (H,), "part2.weight": (C, H), "part2.bias": (C,)}
    return {k: rng.normal(scale=0.8, size=s) for k, s in shapes.items()}


def torch_net(params):
    torch.manual_seed(0)
    net = build_net(ModelConfig(arch="mlp", width=H), C, (D,)).double()
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.from_numpy(params[name]))
    assert sum(p.numel() for p in net.parameters()) <= 500
    return net


def data(seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N, D)), rng.integers(0, C, N)


def fd_grad(fn, params, name):
    """Central differences of ``fn(live)`` with respect to ``live[name]``."""
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name][idx] += FD_STEP
        minus[name][idx] -= FD_STEP
        grad[idx] = (fn(plus) - fn(minus)) / (2 * FD_STEP)
    return grad


def max_rel_err(analytic, numeric):
    # the floor keeps entries whose true gradient is ~0 from dividing FD noise by ~0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float((np.abs(analytic - numeric) / denom).max())


def check_grads(net, loss, fn, params):
    net.zero_grad()
    loss.backward()
    worst = 0.0
    for name, p in net.named_parameters():
        analytic = np.zeros(tuple(p.shape)) if p.grad is None else p.grad.numpy()
        worst = max(worst, max_rel_err(analytic, fd_grad(fn, params, name)))
    return worst


def val(t):
    return float(t.detach())


def second_inputs(y, p_empty, seed):
    g = torch.Generator().manual_seed(seed)
    return choose_second_input(torch.from_numpy(y), C, p_empty, g, torch.float64).numpy()


# values

def test_ice_uniform_logits_value():
    net = torch_net({k: np.zeros_like(v) for k, v in random_params(0).items()})
    x, y = data()
    two_class = build_net(ModelConfig(arch="mlp", width=H), 2, (D,)).double()
    for p in two_class.parameters():
        torch.nn.init.zeros_(p)
    y2 = torch.from_numpy(y % 2)
    assert val(l_ice(two_class, torch.from_numpy(x), y2, 0.9)) == pytest.approx(2 * math.log(2))
    assert val(l_ice(net, torch.from_numpy(x), torch.from_numpy(y), 0.5)) == \
        pytest.approx(2 * math.log(C))


def test_ide_constant_logits_value():
    live = build_net(ModelConfig(arch="mlp", width=H), 2, (D,)).double()
    old = build_net(ModelConfig(arch="mlp", width=H), 2, (D,)).double()
    for net, bias in ((live, [0.5, 0.0]), (old, [0.0, -0.5])):
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            net.part2.bias.copy_(torch.tensor(bias))
    x = torch.randn(7, D, dtype=torch.float64)
    assert val(l_ide(live, snapshot(old), x)) == pytest.approx(0.25)


def test_rep_ice_empty_batch_is_zero():
    net = torch_net(random_params(0))
    z = l_rep_ice(net, torch.zeros(0, D, dtype=torch.float64), torch.zeros(0, dtype=torch.long), 0.9)
    assert float(z) == 0.0


def test_ide_needs_checkpoint():
    net = torch_net(random_params(0))
    with pytest.raises(TermDisabled):
        l_ide(net, None, torch.zeros(2, D, dtype=torch.float64))


def test_ice_rejects_bad_labels():
    net = torch_net(random_params(0))
    with pytest.raises(ShapeError):
        l_ice(net, torch.zeros(2, D, dtype=torch.float64), torch.tensor([0, C]), 0.9)


def test_second_input_rate_and_content():
    y = torch.randint(0, C, (100_000,))
    z = choose_second_input(y, C, 0.9, torch.Generator().manual_seed(0))
    empty = torch.isclose(z, empty_signal(C, len(y))).all(-1)
    assert abs(float(empty.float().mean()) - 0.9) <= 0.01
    hot = z[~empty]
    assert torch.equal(hot.argmax(-1), y[~empty]) and torch.all(hot.sum(-1) == 1)


def test_second_input_extremes():
    y = torch.arange(C)
    assert torch.allclose(choose_second_input(y, C, 1.0), empty_signal(C, C))
    assert torch.equal(choose_second_input(y, C, 0.0), torch.eye(C))


def test_distance_kinds():
    a, b = torch.randn(4, C), torch.randn(4, C)
    assert float(distance(a, a)) == 0.0 and float(distance(a, a, "kl")) == pytest.approx(0, abs=1e-7)
    assert float(distance(a, b, "kl")) >= 0
    with pytest.raises(ConfigError):
        distance(a, b, "l1")


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossConfig(p_empty=1.5)
    with pytest.raises(ConfigError):
        LossConfig(distance="cos")


def test_terms_schedule():
    net = torch_net(random_params(0))
    x, y = (torch.from_numpy(v) for v in data())
    first = ider_terms(net, None, x, y, rep_batch=(x, y))
    assert set(first) == {"ice", "rep_ice", "total"}
    ck = snapshot(net)
    later = ider_terms(net, ck, x, y, ide_batch=(x, y), rep_batch=(x, y),
                       projection=make_projection(H).double())
    assert set(later) == {"ice", "ide", "rep_ice", "bfp", "total"}
    cfg = LossConfig()
    expected = later["ice"] + cfg.alpha * later["ide"] + cfg.beta * later["rep_ice"] + \
        cfg.gamma * later["bfp"]
    assert val(later["total"]) == pytest.approx(val(expected))


# gradients: each case returns the worst relative error over all parameters

def grad_case_ice(p_empty, stop_grad=True, seed=1):
    params = random_params(seed)
    net = torch_net(params)
    x, y = data(seed)
    ystar = second_inputs(y, p_empty, 7)
    loss = l_ice(net, torch.from_numpy(x), torch.from_numpy(y), p_empty,
                 torch.Generator().manual_seed(7), stop_grad=stop_grad)

    def fn(live):
        first = np_forward(live, x, ystar)
        inner = np_forward(params, x, ystar) if stop_grad else first
        return np_ce(first, y) + np_ce(np_forward(live, x, np_softmax(inner)), y)

    assert val(loss) == pytest.approx(fn(params), rel=1e-12)
    return check_grads(net, loss, fn, params)


def grad_case_rep_ice():
    params = random_params(3)
    net = torch_net(params)
    x, y = data(3)
    ystar = second_inputs(y, 0.9, 11)
    loss = l_rep_ice(net, torch.from_numpy(x), torch.from_numpy(y), 0.9,
                     torch.Generator().manual_seed(11))

    def fn(live):
        inner = np_forward(params, x, ystar)
        return np_ce(np_forward(live, x, ystar), y) + \
            np_ce(np_forward(live, x, np_softmax(inner)), y)

    return check_grads(net, loss, fn, params)


def grad_case_ide(kind, target_grad):
    params, old = random_params(4), random_params(5)
    net, ck = torch_net(params), snapshot(torch_net(old))
    x, _ = data(4)
    u = np.full((N, C), 1 / C)
    loss = l_ide(net, ck, torch.from_numpy(x), kind, target_grad)
    dist = np_mse if kind == "mse" else np_kl

    def fn(live):
        y0 = np_forward(live, x, u)
        source = live if target_grad else params
        y1 = np_forward(old, x, np_softmax(np_forward(source, x, u)))
        return dist(y0, y1)

    assert val(loss) == pytest.approx(fn(params), rel=1e-10)
    return check_grads(net, loss, fn, params)


def grad_case_ide_naive():
    params = random_params(6)
    net = torch_net(params)
    x, _ = data(6)
    u = np.full((N, C), 1 / C)
    loss = l_ide_naive(net, torch.from_numpy(x))

    def fn(live):
        y1 = np_forward(params, x, np_softmax(np_forward(params, x, u)))
        return np_mse(np_forward(live, x, u), y1)

    return check_grads(net, loss, fn, params)


def grad_case_bfp():
    params, old = random_params(7), random_params(8)
    net, ck = torch_net(params), snapshot(torch_net(old))
    proj = make_projection(H).double()
    rng = np.random.default_rng(9)
    with torch.no_grad():
        proj.weight.add_(torch.from_numpy(rng.normal(scale=0.3, size=(H, H))))
    x, _ = data(7)
    u = np.full((N, C), 1 / C)
    xt = torch.from_numpy(x)
    loss = l_bfp(proj, net.features(xt), ck.features(xt))
    holder = {"A": proj.weight.detach().numpy().copy()}

    def fn_live(live):
        diff = np_features(live, x, u) @ holder["A"].T - np_features(old, x, u)
        return np.linalg.norm(diff, axis=1).mean()

    def fn_proj(h):
        diff = np_features(params, x, u) @ h["A"].T - np_features(old, x, u)
        return np.linalg.norm(diff, axis=1).mean()

    proj.zero_grad()
    worst = check_grads(net, loss, fn_live, params)
    return max(worst, max_rel_err(proj.weight.grad.numpy(), fd_grad(fn_proj, holder, "A")))


GRAD_CASES = {
    "ice p=0": lambda: grad_case_ice(0.0),
    "ice p=0.5": lambda: grad_case_ice(0.5),
    "ice p=1": lambda: grad_case_ice(1.0),
    "ice no stop": lambda: grad_case_ice(0.5, stop_grad=False, seed=2),
    "rep_ice": grad_case_rep_ice,
    "ide mse": lambda: grad_case_ide("mse", False),
    "ide mse target-grad": lambda: grad_case_ide("mse", True),
    "ide kl": lambda: grad_case_ide("kl", False),
    "ide kl target-grad": lambda: grad_case_ide("kl", True),
    "ide naive": grad_case_ide_naive,
    "bfp": grad_case_bfp,
}


@pytest.mark.parametrize("case", GRAD_CASES)
def test_gradient(case):
    assert GRAD_CASES[case]() < REL_TOL


def test_bfp_identity_on_equal_features():
    feats = torch.randn(3, H, 2, 2)
    assert val(l_bfp(make_projection(H), feats, feats.clone())) == 0.0
    with pytest.raises(ShapeError):
        l_bfp(make_projection(H), feats, torch.randn(3, H + 1, 2, 2))


# frozen checkpoint (acceptance criterion 3)

@pytest.mark.parametrize("target_grad", [False, True])
def test_checkpoint_receives_no_gradient(target_grad):
    net, ck = torch_net(random_params(0)), snapshot(torch_net(random_params(1)))
    l_ide(net, ck, torch.randn(4, D, dtype=torch.float64), target_grad=target_grad).backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in ck.parameters())
    assert all(not p.requires_grad for p in ck.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.parameters())
