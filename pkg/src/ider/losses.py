"""Training objectives for idempotent experience replay.

Reduction convention: every loss is a mean over the batch; the MSE distance is
additionally averaged over the class dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, TermDisabled
from .model import empty_signal, one_hot

DISTANCES = ("mse", "kl")


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    p_empty: float = 0.9
    distance: str = "mse"
    # stop-gradient placement; the non-default settings exist for comparison runs
    ice_stop_grad: bool = True
    ide_target_grad: bool = False
    # one forward over current + replay samples, so batch-norm sees a mixed batch
    joint_forward: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta and gamma must be non-negative")
        if not 0.0 <= self.p_empty <= 1.0:
            raise ConfigError("p_empty must lie in [0, 1]")
        if self.distance not in DISTANCES:
            raise ConfigError(f"distance must be one of {DISTANCES}")


def choose_second_input(y: torch.Tensor, n_classes: int, p_empty: float,
                        generator: torch.Generator | None = None,
                        dtype=torch.float32) -> torch.Tensor:
    """Per sample: the empty signal with probability ``p_empty``, else ``one_hot(y)``.

    One uniform draw is consumed per sample regardless of ``p_empty``.
    """
    y = torch.as_tensor(y)
    scalar = y.dim() == 0
    y = y.reshape(-1)
    hot = one_hot(y, n_classes, dtype)
    use_empty = torch.rand(len(y), generator=generator) < p_empty
    out = torch.where(use_empty[:, None], empty_signal(n_classes, len(y), dtype), hot)
    return out[0] if scalar else out


def _check_labels(y: torch.Tensor, n_classes: int):
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")


def l_ice(net: nn.Module, x: torch.Tensor, y: torch.Tensor, p_empty: float,
          generator: torch.Generator | None = None, stop_grad: bool = True) -> torch.Tensor:
    """Cross-entropy on ``f(x, y*)`` plus cross-entropy on ``f(x, softmax(f(x, y*)))``."""
    if len(y) == 0:
        raise ShapeError("l_ice needs a nonempty batch")
    _check_labels(y, net.n_classes)
    y_star = choose_second_input(y, net.n_classes, p_empty, generator, x.dtype)
    first = net(x, y_star)
    inner = first.detach() if stop_grad else first
    second = net(x, torch.softmax(inner, dim=-1))
    return F.cross_entropy(first, y) + F.cross_entropy(second, y)


def _ice_joint(net, x, y, bx, by, p_empty, generator=None, stop_grad=True):
    """``(l_ice(x, y), l_ice(bx, by))`` computed from shared two-pass forwards."""
    n = len(y)
    xs, ys = torch.cat([x, bx]), torch.cat([y, by])
    _check_labels(ys, net.n_classes)
    y_star = choose_second_input(ys, net.n_classes, p_empty, generator, x.dtype)
    first = net(xs, y_star)
    inner = first.detach() if stop_grad else first
    second = net(xs, torch.softmax(inner, dim=-1))
    ce = F.cross_entropy(first, ys, reduction="none") + F.cross_entropy(second, ys, reduction="none")
    return ce[:n].mean(), ce[n:].mean()


def l_rep_ice(net: nn.Module, x: torch.Tensor, y: torch.Tensor, p_empty: float,
              generator: torch.Generator | None = None, stop_grad: bool = True) -> torch.Tensor:
    """``l_ice`` over a replay batch; zero when the batch is empty."""
    if len(y) == 0:
        return torch.zeros((), dtype=x.dtype)
    return l_ice(net, x, y, p_empty, generator, stop_grad)


def distance(y0: torch.Tensor, y1: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    """MSE on raw logits, or ``KL(softmax(y1) || softmax(y0))``."""
    if kind == "mse":
        return (y0 - y1).pow(2).mean()
    if kind == "kl":
        return F.kl_div(F.log_softmax(y0, -1), F.log_softmax(y1, -1),
                        log_target=True, reduction="batchmean")
    raise ConfigError(f"unknown distance {kind!r}")


def l_ide(net: nn.Module, checkpoint, x: torch.Tensor, kind: str = "mse",
          target_grad: bool = False) -> torch.Tensor:
    """Distance between ``y0 = f_t(x, 0)`` and ``y1 = f_{t-1}(x, softmax(y0))``.

    By default ``y1`` is a constant target. With ``target_grad`` the gradient
    also flows through the checkpoint's second input back into ``y0`` (the
    checkpoint's own parameters stay frozen either way).
    """
    if checkpoint is None:
        raise TermDisabled("first task: no checkpoint, idempotence distillation disabled")
    y0 = net(x, None)
    if target_grad:
        y1 = checkpoint(x, torch.softmax(y0, dim=-1))
    else:
        with torch.no_grad():
            y1 = checkpoint(x, torch.softmax(y0.detach(), dim=-1))
    return distance(y0, y1, kind)


def l_ide_naive(net: nn.Module, x: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    """Ablation: both passes through the live net, second pass gradient-stopped."""
    y0 = net(x, None)
    with torch.no_grad():
        y1 = net(x, torch.softmax(y0.detach(), dim=-1))
    return distance(y0, y1, kind)


def l_bfp(projection: nn.Module, feats_t: torch.Tensor, feats_prev: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``||A h_t - h_{t-1}||_2``; ``A`` acts on the channel axis."""
    c = projection.weight.shape[1]
    if feats_t.shape != feats_prev.shape or feats_t.shape[1] != c:
        raise ShapeError(f"feature shapes {tuple(feats_t.shape)} / {tuple(feats_prev.shape)} "
                         f"incompatible with a {c}x{c} projection")
    moved = torch.movedim(feats_t, 1, -1)
    projected = torch.movedim(projection(moved), -1, 1)
    return (projected - feats_prev).flatten(1).norm(dim=1).mean()


def make_projection(channels: int) -> nn.Linear:
    proj = nn.Linear(channels, channels, bias=False)
    with torch.no_grad():
        proj.weight.copy_(torch.eye(channels))
    return proj


def ider_terms(net: nn.Module, checkpoint, x, y, ide_batch=None, rep_batch=None,
               config: LossConfig | None = None, generator: torch.Generator | None = None,
               projection: nn.Module | None = None, naive: bool = False) -> dict[str, torch.Tensor]:
    """All terms of the weighted objective plus their ``total``.

    ``ide_batch`` / ``rep_batch`` are ``(x, y)`` replay batches (either may be
    None or empty). The distillation term runs on the current batch concatenated
    with ``ide_batch``; it and the BFP term are skipped without a checkpoint.
    ``naive`` swaps in the single-model distillation term on the same schedule.
    Terms with zero weight are not evaluated.
    """
    config = config or LossConfig()
    replay = config.beta > 0 and rep_batch is not None and len(rep_batch[1]) > 0
    if replay and config.joint_forward:
        terms = dict(zip(("ice", "rep_ice"), _ice_joint(
            net, x, y, rep_batch[0], rep_batch[1], config.p_empty, generator,
            config.ice_stop_grad)))
    else:
        terms = {"ice": l_ice(net, x, y, config.p_empty, generator, config.ice_stop_grad)}
    total = terms["ice"]
    if config.alpha > 0 and checkpoint is not None:
        union = x
        if ide_batch is not None and len(ide_batch[1]):
            union = torch.cat([x, ide_batch[0]])
        if naive:
            terms["ide"] = l_ide_naive(net, union, config.distance)
        else:
            terms["ide"] = l_ide(net, checkpoint, union, config.distance, config.ide_target_grad)
        total = total + config.alpha * terms["ide"]
    if replay:
        if "rep_ice" not in terms:
            terms["rep_ice"] = l_rep_ice(net, rep_batch[0], rep_batch[1], config.p_empty,
                                         generator, config.ice_stop_grad)
        total = total + config.beta * terms["rep_ice"]
    if projection is not None and config.gamma > 0 and checkpoint is not None:
        union = x
        if ide_batch is not None and len(ide_batch[1]):
            union = torch.cat([x, ide_batch[0]])
        with torch.no_grad():
            prev = checkpoint.features(union, None)
        terms["bfp"] = l_bfp(projection, net.features(union, None), prev)
        total = total + config.gamma * terms["bfp"]
    terms["total"] = total
    return terms


def l_ider(net, checkpoint, x, y, ide_batch=None, rep_batch=None, config=None,
           generator=None, projection=None) -> torch.Tensor:
    """``l_ice + alpha * l_ide + beta * l_rep_ice`` (``+ gamma * l_bfp`` with a projection)."""
    return ider_terms(net, checkpoint, x, y, ide_batch, rep_batch, config, generator,
                      projection)["total"]
