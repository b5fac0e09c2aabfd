"""Encoder-decoder residual segmentation network with deep-supervision heads."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = Field(2, ge=1)
    out_channels: int = Field(2, ge=1)
    init_filters: int = Field(32, gt=0)
    blocks_down: tuple[int, ...] = (2, 4, 4, 4, 4)
    blocks_up: tuple[int, ...] = (1, 1, 1, 1)
    ds_heads: int = Field(3, ge=0)
    kernel: tuple[int, int, int] = (3, 3, 3)
    norm: Literal["instance"] = "instance"
    activation: Literal["relu", "leaky_relu"] = "relu"

    @model_validator(mode="after")
    def _check(self):
        if not self.blocks_down or any(b < 1 for b in self.blocks_down):
            raise ValueError("blocks_down must be a non-empty list of positive counts")
        if len(self.blocks_up) != len(self.blocks_down) - 1:
            raise ValueError("len(blocks_up) must equal len(blocks_down) - 1")
        if any(b < 1 for b in self.blocks_up):
            raise ValueError("blocks_up counts must be positive")
        if self.ds_heads > len(self.blocks_up):
            raise ValueError("ds_heads cannot exceed the number of decoder levels")
        if tuple(self.kernel) != (3, 3, 3):
            raise ValueError("only 3x3x3 kernels are supported")
        return self

    @property
    def levels(self) -> int:
        return len(self.blocks_down)

    @property
    def widths(self) -> list[int]:
        return [self.init_filters * 2**s for s in range(self.levels)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


class WeightsError(RuntimeError):
    pass


def _act(kind: str) -> nn.Module:
    return nn.ReLU(inplace=True) if kind == "relu" else nn.LeakyReLU(0.01, inplace=True)


def conv3(cin: int, cout: int, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1(cin: int, cout: int, bias: bool = False) -> nn.Conv3d:
    return nn.Conv3d(cin, cout, kernel_size=1, bias=bias)


class Head(nn.Module):
    """norm -> act -> 1x1x1 projection to class logits."""

    def __init__(self, cin: int, classes: int, act: str = "relu"):
        super().__init__()
        self.norm = nn.InstanceNorm3d(cin, affine=True)
        self.act = _act(act)
        self.conv = conv1(cin, classes, bias=True)

    def forward(self, x):
        return self.conv(self.act(self.norm(x)))


class ResBlock(nn.Module):
    """Pre-activation block: (norm -> act -> conv) x 2 plus identity."""

    def __init__(self, channels: int, act: str = "relu"):
        super().__init__()
        self.norm1 = nn.InstanceNorm3d(channels, affine=True)
        self.act1 = _act(act)
        self.conv1 = conv3(channels, channels)
        self.norm2 = nn.InstanceNorm3d(channels, affine=True)
        self.act2 = _act(act)
        self.conv2 = conv3(channels, channels)

    def forward(self, x):
        y = self.conv1(self.act1(self.norm1(x)))
        y = self.conv2(self.act2(self.norm2(y)))
        return x + y


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int, downsample: bool, act: str):
        super().__init__()
        self.down = conv3(cin, cout, stride=2) if downsample else nn.Identity()
        self.blocks = nn.Sequential(*[ResBlock(cout, act) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.down(x))


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int, act: str):
        super().__init__()
        self.reduce = conv1(cin, cout)
        self.blocks = nn.Sequential(*[ResBlock(cout, act) for _ in range(blocks)])

    def forward(self, x, skip):
        x = F.interpolate(self.reduce(x), scale_factor=2, mode="trilinear", align_corners=False)
        return self.blocks(x + skip)


class SegResNetDS(nn.Module):
    """Returns a list of logit maps; entry ``i`` is at spatial scale ``1 / 2**i``."""

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        w = cfg.widths
        self.conv_init = conv3(cfg.in_channels, w[0])
        self.encoder = nn.ModuleList(
            EncoderStage(w[max(s - 1, 0)], w[s], cfg.blocks_down[s], s > 0, cfg.activation)
            for s in range(cfg.levels)
        )
        # decoder[j] produces the features at level L-2-j (coarse to fine)
        self.decoder = nn.ModuleList(
            DecoderStage(w[s + 1], w[s], cfg.blocks_up[s], cfg.activation) for s in reversed(range(cfg.levels - 1))
        )
        # heads[i] projects decoder output at scale 1/2**i
        self.heads = nn.ModuleList(Head(w[i], cfg.out_channels, cfg.activation) for i in range(cfg.ds_heads + 1))
        if cfg.levels == 1 and cfg.ds_heads:
            raise ValueError("a single-level network has no decoder levels for deep supervision")
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.InstanceNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected input (N, C, X, Y, Z), got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        d = self.cfg.divisor
        for axis, n in zip("XYZ", x.shape[2:]):
            if n % d:
                raise ValueError(f"spatial axis {axis} has size {n}, not divisible by {d}")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(x)
        x = self.conv_init(x)
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        n_levels = self.cfg.levels
        feats = {n_levels - 1: x}
        for j, stage in enumerate(self.decoder):
            level = n_levels - 2 - j
            x = stage(x, skips[level])
            feats[level] = x
        return [self.heads[i](feats[i]) for i in range(len(self.heads))]


def build(cfg: NetworkConfig | None = None) -> SegResNetDS:
    return SegResNetDS(cfg or NetworkConfig())


def parameter_inventory(net: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in net.named_parameters()]


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# --------------------------------------------------------------------------
# weights archive


def weights_archive(net: SegResNetDS) -> dict:
    state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
    return {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": net.cfg.model_dump(mode="json"),
        "manifest": [[k, list(v.shape), str(v.dtype)] for k, v in state.items()],
        "state_dict": state,
    }


def save_weights(net: SegResNetDS, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(weights_archive(net), path)


def read_archive(path: str | Path) -> dict:
    """Load a weights archive, or the ``weights`` entry of a training checkpoint."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weights file not found: {path}")
    try:
        doc = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsError(f"cannot read weights archive {path}: {exc}") from exc
    if isinstance(doc, dict) and "weights" in doc and "state_dict" not in doc:
        doc = doc["weights"]
    if not isinstance(doc, dict) or "state_dict" not in doc or "format_version" not in doc:
        raise WeightsError(f"{path} is not a versioned weights archive")
    if doc["format_version"] != WEIGHTS_FORMAT_VERSION:
        raise WeightsError(f"{path}: unsupported weights format version {doc['format_version']}")
    return doc


def load_state(net: SegResNetDS, archive: dict, strict: bool = True) -> list[str]:
    """Copy archive tensors into ``net``; returns names skipped in lenient mode."""
    own = net.state_dict()
    src = archive["state_dict"]
    problems, skipped = [], []
    for name, tensor in own.items():
        if name not in src:
            problems.append(f"{name}: missing from archive")
        elif tuple(src[name].shape) != tuple(tensor.shape):
            problems.append(f"{name}: shape {tuple(src[name].shape)} != expected {tuple(tensor.shape)}")
    unexpected = [k for k in src if k not in own]
    problems += [f"{k}: unexpected in archive" for k in unexpected]
    if strict and problems:
        raise WeightsError("weights do not match network:\n  " + "\n  ".join(problems))
    with torch.no_grad():
        for name, tensor in own.items():
            if name in src and tuple(src[name].shape) == tuple(tensor.shape):
                tensor.copy_(src[name])
            else:
                skipped.append(name)
    if skipped:
        log.info("skipped %d parameters with mismatched names/shapes: %s", len(skipped), skipped)
    return skipped


def load_weights(
    path: str | Path, cfg: NetworkConfig | None = None, strict: bool = True
) -> tuple[SegResNetDS, list[str]]:
    """Build a network for ``cfg`` (default: the archived config) and load weights.

    Lenient mode keeps fresh initialization for any parameter whose name or
    shape differs, e.g. the first convolution when ``in_channels`` changes.
    """
    archive = read_archive(path)
    if cfg is None:
        cfg = NetworkConfig.model_validate(archive["config"])
    net = build(cfg)
    skipped = load_state(net, archive, strict=strict)
    return net, skipped

