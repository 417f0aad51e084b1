"""Toy multi-resolution backbone, FSIA fusion chain, shared counting head.

Three fusion modes share the backbone and head:

* ``steerer``     FSIA blocks fuse from the coarsest level upward; every
                  level gets a prediction from the shared head.
* ``bl1_concat``  upsample every level to the finest and concatenate.
* ``bl2_fpn``     additive top-down FPN fusion.

The baselines only predict at level 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from steerer import ops
from steerer.ops import RunningStats, ShapeError
from steerer.tensor import Parameter, Tensor

FUSION_MODES = ("steerer", "bl1_concat", "bl2_fpn")


def _children(obj, prefix: str):
    """Yield ``(path, value)`` for attributes, descending into (nested) lists."""
    for key, val in vars(obj).items():
        yield from _expand(val, f"{prefix}{key}")


def _expand(val, path: str):
    if isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _expand(item, f"{path}.{i}")
    else:
        yield path, val


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for path, val in _children(self, prefix):
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, val in _children(self, prefix):
            if isinstance(val, RunningStats):
                yield path + ".mean", val.mean
                yield path + ".var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in _children(self, ""):
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv(Module):
    """Conv2d with Kaiming fan-in init and zero bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dtype=np.float64):
        fan_in = c_in * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)), dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), dtype=dtype)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor, detach: bool = False) -> Tensor:
        w, b = self.weight, self.bias
        if detach:
            w, b = w.detach(), b.detach()
        return ops.conv2d(x, w, b, stride=self.stride, pad=self.pad)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, dtype=np.float64):
        self.conv = Conv(c_in, c_out, 3, rng, stride=stride, dtype=dtype)
        self.gamma = Parameter(np.ones(c_out), dtype=dtype)
        self.beta = Parameter(np.zeros(c_out), dtype=dtype)
        self.stats = RunningStats(c_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        y = ops.batch_norm(y, self.gamma, self.beta, self.stats, training=self.training)
        return ops.relu(y)


@dataclass
class BackboneConfig:
    levels: int = 3
    channels: int = 32
    in_channels: int = 1
    stem_layers: int = 2
    stage_layers: int = 1

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.channels < 2:
            raise ValueError(f"channels must be >= 2, got {self.channels}")
        if self.stem_layers < 2 or self.stage_layers < 1:
            raise ValueError("the stem needs >= 2 layers (stride 4) and each stage >= 1")


class Backbone(Module):
    """Stride-4 stem, then one stride-2 stage per coarser level."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.levels = cfg.levels
        c = cfg.channels
        stem = [ConvBNReLU(cfg.in_channels, c, rng, stride=2, dtype=dtype),
                ConvBNReLU(c, c, rng, stride=2, dtype=dtype)]
        stem += [ConvBNReLU(c, c, rng, dtype=dtype) for _ in range(cfg.stem_layers - 2)]
        self.stem = stem
        self.stages = [
            [ConvBNReLU(c, c, rng, stride=2, dtype=dtype)]
            + [ConvBNReLU(c, c, rng, dtype=dtype) for _ in range(cfg.stage_layers - 1)]
            for _ in range(cfg.levels)
        ]

    def __call__(self, image: Tensor) -> list[Tensor]:
        div = 2 ** (self.levels + 2)
        if image.ndim != 4 or image.shape[2] % div or image.shape[3] % div:
            raise ShapeError(f"image shape {image.shape} must be (N, C, H, W) with H, W divisible by {div}")
        x = image
        for layer in self.stem:
            x = layer(x)
        feats = [x]
        for stage in self.stages:
            for layer in stage:
                x = layer(x)
            feats.append(x)
        return feats


class FsiaBlock(Module):
    """Feature selection and inheritance adaptor fusing level ``j`` into ``j-1``.

    ``cfn`` forwards scale-customized features, ``ufn`` the rest, and ``smg``
    emits a two-channel softmax mask splitting them. The block feeding level 0
    has no ``ufn``: nothing is passed further up from there.
    """

    def __init__(self, channels: int, level: int, rng: np.random.Generator, dtype=np.float64):
        c = channels
        self.level = level
        self.cfn = [ConvBNReLU(c, c, rng, dtype=dtype), ConvBNReLU(c, c, rng, dtype=dtype)]
        self.ufn = ([ConvBNReLU(c, c, rng, dtype=dtype), ConvBNReLU(c, c, rng, dtype=dtype)]
                    if level > 0 else [])
        self.smg = [Conv(c, c, 3, rng, dtype=dtype), Conv(c, c, 3, rng, dtype=dtype), Conv(c, 2, 1, rng, dtype=dtype)]
        self.proj = Conv(2 * c, c, 1, rng, dtype=dtype)

    def attention(self, r_bar: Tensor) -> Tensor:
        a = ops.relu(self.smg[0](r_bar))
        a = ops.relu(self.smg[1](a))
        return ops.upsample_bilinear(ops.channel_softmax(self.smg[2](a)), 2)

    def __call__(self, r_prev: Tensor, r_bar: Tensor) -> tuple[Tensor, Optional[Tensor], Tensor]:
        if (r_prev.ndim != 4 or r_bar.ndim != 4 or r_prev.shape[:2] != r_bar.shape[:2]
                or r_prev.shape[2] != 2 * r_bar.shape[2] or r_prev.shape[3] != 2 * r_bar.shape[3]):
            raise ShapeError(f"FSIA needs r_bar at exactly half the resolution of r_prev with equal "
                             f"N and C, got {r_prev.shape} and {r_bar.shape}")
        attn = self.attention(r_bar)
        a_c = ops.channel_slice(attn, 0, 1)
        a_u = ops.channel_slice(attn, 1, 2)
        c = r_bar
        for layer in self.cfn:
            c = layer(c)
        custom = ops.hadamard(ops.upsample_bilinear(c, 2), a_c)
        o_prev = self.proj(ops.concat_channels(r_prev, custom))
        if not self.ufn:
            return o_prev, None, attn
        u = r_bar
        for layer in self.ufn:
            u = layer(u)
        passed = ops.add(ops.hadamard(ops.upsample_bilinear(u, 2), a_u), custom)
        r_bar_prev = self.proj(ops.concat_channels(r_prev, passed))
        return o_prev, r_bar_prev, attn


def fsia_fuse(r_prev: Tensor, r_bar: Tensor, block: FsiaBlock):
    return block(r_prev, r_bar)


class CountingHead(Module):
    """C channels -> one non-negative density channel, shared by all levels."""

    # Density targets are ~0.1 per cell. A full-scale Kaiming output layer starts
    # with activations ~1 and the closing ReLU tends to die before it recovers.
    OUT_INIT_SCALE = 0.01

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        hidden = max(channels // 2, 1)
        self.conv1 = Conv(channels, hidden, 3, rng, dtype=dtype)
        self.conv2 = Conv(hidden, 1, 1, rng, dtype=dtype)
        self.conv2.weight.data *= self.OUT_INIT_SCALE
        self.channels = channels

    def __call__(self, o: Tensor, final_branch: bool = True) -> Tensor:
        """With ``final_branch`` false the head's own parameters are detached:
        the output is identical, gradient still reaches ``o``, none reaches the head."""
        if o.ndim != 4 or o.shape[1] != self.channels:
            raise ShapeError(f"counting head expects {self.channels} channels, got shape {o.shape}")
        detach = not final_branch
        h = ops.relu(self.conv1(o, detach=detach))
        return ops.relu(self.conv2(h, detach=detach))


def head_forward(head: CountingHead, o: Tensor, final_branch: bool) -> Tensor:
    return head(o, final_branch)


@dataclass
class ModelOutput:
    preds: list[Tensor]          # indexed by level; baselines fill only level 0
    attn: list[Optional[Tensor]]  # FSIA attention feeding level j (None at level N)

    @property
    def final(self) -> Tensor:
        return self.preds[0]


class SteererModel(Module):
    def __init__(self, cfg: BackboneConfig, fusion_mode: str = "steerer", seed: int = 0,
                 dtype=np.float64):
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion_mode!r}; expected one of {FUSION_MODES}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.fusion_mode = fusion_mode
        self.levels = cfg.levels
        c = cfg.channels
        self.backbone = Backbone(cfg, rng, dtype=dtype)
        if fusion_mode == "steerer":
            # blocks[j] fuses level j+1 into level j
            self.blocks = [FsiaBlock(c, j, rng, dtype=dtype) for j in range(cfg.levels)]
        elif fusion_mode == "bl1_concat":
            self.fuse = Conv((cfg.levels + 1) * c, c, 1, rng, dtype=dtype)
        else:
            self.lateral = [Conv(c, c, 1, rng, dtype=dtype) for _ in range(cfg.levels + 1)]
            self.smooth = ConvBNReLU(c, c, rng, dtype=dtype)
        self.head = CountingHead(c, rng, dtype=dtype)

    def __call__(self, image: Tensor) -> ModelOutput:
        feats = self.backbone(image)
        if self.fusion_mode == "steerer":
            return self._steerer(feats)
        if self.fusion_mode == "bl1_concat":
            x = feats[0]
            for j in range(1, self.levels + 1):
                up = feats[j]
                for _ in range(j):
                    up = ops.upsample_bilinear(up, 2)
                x = ops.concat_channels(x, up)
            fused = self.fuse(x)
        else:
            p = self.lateral[self.levels](feats[self.levels])
            for j in range(self.levels - 1, -1, -1):
                p = ops.add(self.lateral[j](feats[j]), ops.upsample_bilinear(p, 2))
            fused = self.smooth(p)
        preds: list[Optional[Tensor]] = [None] * (self.levels + 1)
        preds[0] = self.head(fused, final_branch=True)
        return ModelOutput(preds, [None] * (self.levels + 1))

    def _steerer(self, feats: list[Tensor]) -> ModelOutput:
        n = self.levels
        preds: list[Optional[Tensor]] = [None] * (n + 1)
        attn: list[Optional[Tensor]] = [None] * (n + 1)
        r_bar = feats[n]
        preds[n] = self.head(r_bar, final_branch=False)
        for j in range(n, 0, -1):
            o, r_bar, attn[j - 1] = self.blocks[j - 1](feats[j - 1], r_bar)
            preds[j - 1] = self.head(o, final_branch=(j - 1 == 0))
        return ModelOutput(preds, attn)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": p.data for k, p in self.named_parameters()}
        state.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            arr = state[f"param/{k}"]
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr
        for k, b in self.named_buffers():
            b[...] = state[f"buffer/{k}"]


def model_forward(model: SteererModel, image: Tensor) -> ModelOutput:
    return model(image)
