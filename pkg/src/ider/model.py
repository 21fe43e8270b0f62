"""Two-input label-conditioned network.

The backbone is cut into ``part1`` (image -> feature map) and ``part2``
(feature map -> logits). The second input, a probability vector over all
classes, goes through ``Linear -> LeakyReLU`` and is added to the output of
``part1`` (broadcast over spatial positions for conv features).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.01


def empty_signal(n_classes: int, batch: int | None = None, dtype=torch.float32,
                 device=None) -> torch.Tensor:
    """Uniform distribution over all classes, the uninformative second input."""
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    shape = (n_classes,) if batch is None else (batch, n_classes)
    return torch.full(shape, 1.0 / n_classes, dtype=dtype, device=device)


def one_hot(y: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    return F.one_hot(y.long(), n_classes).to(dtype)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


@dataclass
class ModelConfig:
    """Architecture description; also stored alongside serialized checkpoints.

    ``partition_point`` counts residual blocks placed in ``part1`` (after the
    stem). For ``resnet18`` block k ends at weight layer ``1 + 2k``, so the
    default midpoint of 4 blocks splits after the 9th layer. For ``mlp`` the
    split is always after the hidden layer.
    """

    arch: str = "resnet_small"
    width: int = 16
    partition_point: int | None = None
    conditioned: bool = True
    zero_label_embed: bool = False


_STAGES = {
    # (channel multiplier, stride) per block
    "resnet_small": [(1, 1), (1, 1), (2, 2), (2, 1)],
    "resnet18": [(1, 1), (1, 1), (2, 2), (2, 1), (4, 2), (4, 1), (8, 2), (8, 1)],
}


class LabelConditionedNet(nn.Module):
    def __init__(self, part1: nn.Module, part2: nn.Module, feat_channels: int,
                 n_classes: int, input_shape: tuple[int, ...], conditioned: bool = True):
        super().__init__()
        self.part1 = part1
        self.part2 = part2
        self.n_classes = n_classes
        self.input_shape = tuple(input_shape)
        self.feat_channels = feat_channels
        self.conditioned = conditioned
        if conditioned:
            self.label_embed = nn.Sequential(nn.Linear(n_classes, feat_channels),
                                             nn.LeakyReLU(LEAKY_SLOPE))

    def _check(self, x: torch.Tensor, y2: torch.Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} != expected {self.input_shape}")
        if y2.shape[-1] != self.n_classes:
            raise ShapeError(f"second input has length {y2.shape[-1]}, expected {self.n_classes}")

    def features(self, x: torch.Tensor, y2: torch.Tensor | None = None) -> torch.Tensor:
        """Intermediate map ``part1(x) + label_embed(y2)`` fed into ``part2``."""
        if y2 is None:
            y2 = empty_signal(self.n_classes, len(x), x.dtype, x.device)
        self._check(x, y2)
        h = self.part1(x)
        if not self.conditioned:
            return h
        e = self.label_embed(y2.to(h.dtype))
        if e.dim() == 1:
            e = e.expand(len(h), -1)
        return h + e.reshape(e.shape + (1,) * (h.dim() - 2))

    def forward(self, x: torch.Tensor, y2: torch.Tensor | None = None) -> torch.Tensor:
        return self.part2(self.features(x, y2))


def _resnet_parts(stages, in_ch: int, width: int, n_classes: int, split: int):
    blocks, c = [], width
    for mult, stride in stages:
        blocks.append(BasicBlock(c, width * mult, stride))
        c = width * mult
    stem = nn.Sequential(nn.Conv2d(in_ch, width, 3, 1, 1, bias=False),
                         nn.BatchNorm2d(width), nn.ReLU())
    part1 = nn.Sequential(stem, *blocks[:split])
    part2 = nn.Sequential(*blocks[split:], nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                          nn.Linear(c, n_classes))
    feat = width * stages[split - 1][0] if split > 0 else width
    return part1, part2, feat


def build_net(config: ModelConfig, n_classes: int, input_shape: tuple[int, ...]) -> LabelConditionedNet:
    """Construct a net. Backbone weights are created before ``label_embed`` so a
    conditioned and a plain net built under the same torch seed share them."""
    if config.arch == "mlp":
        if len(input_shape) != 1:
            raise ConfigError("mlp expects flat inputs")
        part1 = nn.Sequential(nn.Linear(input_shape[0], config.width), nn.LeakyReLU(LEAKY_SLOPE))
        part2 = nn.Linear(config.width, n_classes)
        feat = config.width
    elif config.arch in _STAGES:
        if len(input_shape) != 3:
            raise ConfigError(f"{config.arch} expects (C, H, W) inputs")
        stages = _STAGES[config.arch]
        split = len(stages) // 2 if config.partition_point is None else config.partition_point
        if not 0 <= split <= len(stages):
            raise ConfigError(f"partition_point must be in [0, {len(stages)}]")
        part1, part2, feat = _resnet_parts(stages, input_shape[0], config.width, n_classes, split)
    else:
        raise ConfigError(f"unknown arch {config.arch!r}")
    net = LabelConditionedNet(part1, part2, feat, n_classes, input_shape, config.conditioned)
    if config.conditioned and config.zero_label_embed:
        for p in net.label_embed.parameters():
            nn.init.zeros_(p)
            p.requires_grad_(False)
    net.config = config
    return net


def recurse(net: nn.Module, x: torch.Tensor, z: torch.Tensor | None = None):
    """``(f(x, z), f(x, softmax(f(x, z))))`` with ``z`` defaulting to the empty signal."""
    logits0 = net(x, z)
    logits1 = net(x, torch.softmax(logits0, dim=-1))
    return logits0, logits1


class FrozenCheckpoint:
    """Read-only copy of a net taken at a task boundary.

    Parameters never require grad and the copy stays in eval mode, so calling it
    inside a loss never produces parameter gradients (gradients may still flow
    back to the *inputs* when they require grad).
    """

    def __init__(self, net: LabelConditionedNet, task_id: int):
        self._net = copy.deepcopy(net)
        for p in self._net.parameters():
            p.requires_grad_(False)
        self._net.eval()
        self.task_id = task_id

    def __call__(self, x, y2=None):
        return self._net(x, y2)

    def features(self, x, y2=None):
        return self._net.features(x, y2)

    @property
    def net(self) -> LabelConditionedNet:
        return self._net

    def parameters(self):
        return self._net.parameters()

    @property
    def n_classes(self):
        return self._net.n_classes


def snapshot(net: LabelConditionedNet, task_id: int = -1) -> FrozenCheckpoint:
    return FrozenCheckpoint(net, task_id)


def save_checkpoint(path, net: LabelConditionedNet, **extra):
    """Store ``{name: flat tensor}``, shapes and the architecture config."""
    state = net.state_dict()
    payload = {
        "arch": asdict(net.config),
        "n_classes": net.n_classes,
        "input_shape": list(net.input_shape),
        "params": {k: v.detach().cpu().reshape(-1).clone() for k, v in state.items()},
        "shapes": {k: list(v.shape) for k, v in state.items()},
        **extra,
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> tuple[LabelConditionedNet, dict]:
    payload = torch.load(Path(path), weights_only=False)
    net = build_net(ModelConfig(**payload["arch"]), payload["n_classes"],
                    tuple(payload["input_shape"]))
    net.load_state_dict({k: v.reshape(payload["shapes"][k]) for k, v in payload["params"].items()})
    return net, payload
