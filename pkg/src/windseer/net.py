"""Fully-convolutional 3D encoder-decoder for sparse-to-dense wind fields.

Shape contract: any input whose spatial dims are multiples of 2**depth maps
to an output of identical dims, so weights trained on small windows run on
arbitrarily large grids. Odd kernels keep size with symmetric reflection
padding; the even (k=4) decoder kernels use an asymmetric (1, 2) reflection
split, fixed forever so checkpoints stay portable.

Layer recipe, D levels, base width F:
  stem  conv3 in->F
  enc i conv3 F*2^max(i-1,0) -> F*2^i, then pool k2 s2 (i = 0..D-1)
  bneck conv3 F*2^(D-1) -> F*2^D
  dec i nearest x2 upsample, concat skip, conv4 3F*2^i -> F*2^i, conv4 same
  head  conv3 F->F, conv4 F->out, the last convolution linear

All other convolutions are followed by leaky ReLU. The analytic receptive
field of this recipe is 11 * 2^D - 1 cells per axis: 175 at depth 4 and
703 at depth 6.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .gridcore import FormatError, GridError

_MAGIC = b"WSNN"
_VERSION = 1


class Pooling(enum.Enum):
    MAX = "max"
    AVG = "avg"
    STRIDED = "strided"


class InputDimsError(GridError):
    """Input spatial dims are not multiples of 2**depth."""


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 4
    base_width: int = 8
    pooling: Pooling = Pooling.MAX
    in_channels: int = 4
    out_channels: int = 4
    negative_slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise GridError("depth must be >= 1 (4 and 6 are the studied settings)")
        if self.base_width < 1:
            raise GridError("base_width must be >= 1")
        if self.in_channels not in (4, 5):
            raise GridError("in_channels is 4, or 5 with the vertical-wind input")
        if self.out_channels != 4:
            raise GridError("out_channels is fixed at 4")


def _conv3(cin: int, cout: int, slope: float) -> nn.Sequential:
    return nn.Sequential(nn.ReflectionPad3d(1),
                         nn.Conv3d(cin, cout, 3),
                         nn.LeakyReLU(slope))


def _conv4(cin: int, cout: int, slope: float | None) -> nn.Sequential:
    layers: list[nn.Module] = [nn.ReflectionPad3d((1, 2, 1, 2, 1, 2)),
                               nn.Conv3d(cin, cout, 4)]
    if slope is not None:
        layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


def _pool(kind: Pooling, width: int, slope: float) -> nn.Module:
    if kind is Pooling.MAX:
        return nn.MaxPool3d(2)
    if kind is Pooling.AVG:
        return nn.AvgPool3d(2)
    # learned downsampling replaces the pool: k3 s2, size n -> n/2 for even n
    return nn.Sequential(nn.ReflectionPad3d(1),
                         nn.Conv3d(width, width, 3, stride=2),
                         nn.LeakyReLU(slope))


class WindNet(nn.Module):
    """Build with `build_model`, which also applies the seeded init."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        D, F, s = spec.depth, spec.base_width, spec.negative_slope
        self.stem = _conv3(spec.in_channels, F, s)
        self.enc = nn.ModuleList(
            _conv3(F * 2 ** max(i - 1, 0), F * 2 ** i, s) for i in range(D))
        self.pools = nn.ModuleList(
            _pool(spec.pooling, F * 2 ** i, s) for i in range(D))
        self.bneck = _conv3(F * 2 ** (D - 1), F * 2 ** D, s)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec = nn.ModuleList(
            nn.Sequential(_conv4(3 * F * 2 ** i, F * 2 ** i, s),
                          _conv4(F * 2 ** i, F * 2 ** i, s))
            for i in reversed(range(D)))
        self.head = nn.Sequential(_conv3(F, F, s),
                                  _conv4(F, spec.out_channels, None))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5:
            raise GridError(f"expected [batch, C, nz, ny, nx], got {tuple(x.shape)}")
        m = 2 ** self.spec.depth
        if any(n % m for n in x.shape[2:]):
            raise InputDimsError(
                f"spatial dims {tuple(x.shape[2:])} must be multiples of {m} "
                f"for depth {self.spec.depth}")
        if any(n < 2 * m for n in x.shape[2:]):
            # reflection padding needs >= 2 cells per axis at the bottleneck
            raise InputDimsError(
                f"spatial dims {tuple(x.shape[2:])} must be at least {2 * m} "
                f"for depth {self.spec.depth}")
        if not torch.isfinite(x).all():
            raise GridError("non-finite values in network input")
        x = self.stem(x)
        skips = []
        for conv, pool in zip(self.enc, self.pools):
            x = conv(x)
            skips.append(x)
            x = pool(x)
        x = self.bneck(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = block(torch.cat([skip, self.up(x)], dim=1))
        return self.head(x)


def build_model(spec: ModelSpec) -> WindNet:
    """Construct and initialize: fan-in variance scaling matched to the leaky
    slope, zero biases, deterministic under spec.seed."""
    torch.manual_seed(spec.seed)
    model = WindNet(spec)
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, a=spec.negative_slope,
                                    mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)
    return model


# --- analytic receptive field ---------------------------------------------------

def rf_of_layers(layers) -> int:
    """Receptive field of a (kernel, stride) chain; stride 0.5 marks a x2
    nearest upsample."""
    rf, jump = 1.0, 1.0
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return int(round(rf))


def _layer_chain(spec: ModelSpec):
    pool_k = 3 if spec.pooling is Pooling.STRIDED else 2
    layers = [(3, 1)]                      # stem
    for _ in range(spec.depth):
        layers += [(3, 1), (pool_k, 2)]    # encoder conv + downsample
    layers += [(3, 1)]                     # bottleneck
    for _ in range(spec.depth):
        layers += [(1, 0.5), (4, 1), (4, 1)]   # upsample + decoder convs
    layers += [(3, 1), (4, 1)]             # head
    return layers


def receptive_field(spec: ModelSpec) -> int:
    """Cells along one axis that can influence one output cell."""
    return rf_of_layers(_layer_chain(spec))


# --- checkpoint IO ---------------------------------------------------------------

_POOL_NAMES = {p.value: p for p in Pooling}


@dataclass(frozen=True)
class Checkpoint:
    spec: ModelSpec
    state: dict                 # name -> np.ndarray float32, insertion-ordered
    epoch: int = 0
    loss_digest: str = ""

    def build(self) -> WindNet:
        model = build_model(self.spec)
        expect = list(model.state_dict().items())
        got = list(self.state.items())
        if [n for n, _ in expect] != [n for n, _ in got]:
            missing = set(n for n, _ in expect) ^ set(n for n, _ in got)
            raise FormatError(f"tensor names do not match the model spec: "
                              f"{sorted(missing)[:4]}")
        with torch.no_grad():
            for (name, ref), (_, arr) in zip(expect, got):
                if tuple(ref.shape) != arr.shape:
                    raise FormatError(
                        f"tensor {name!r} has shape {arr.shape}, "
                        f"spec implies {tuple(ref.shape)}")
            model.load_state_dict(
                {n: torch.from_numpy(a.copy()) for n, a in got})
        return model


def _spec_text(spec: ModelSpec, epoch: int, digest: str) -> str:
    parts = [f"depth={spec.depth}", f"base_width={spec.base_width}",
             f"pooling={spec.pooling.value}", f"in_channels={spec.in_channels}",
             f"out_channels={spec.out_channels}",
             f"negative_slope={spec.negative_slope!r}", f"seed={spec.seed}",
             f"epoch={epoch}"]
    if digest:
        parts.append(f"loss_digest={digest}")
    return " ".join(parts)


def _parse_spec_text(text: str) -> tuple[ModelSpec, int, str]:
    kv = {}
    for tok in text.split():
        if "=" not in tok:
            raise FormatError(f"bad spec token {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = v
    try:
        spec = ModelSpec(depth=int(kv["depth"]), base_width=int(kv["base_width"]),
                         pooling=_POOL_NAMES[kv["pooling"]],
                         in_channels=int(kv["in_channels"]),
                         out_channels=int(kv["out_channels"]),
                         negative_slope=float(kv["negative_slope"]),
                         seed=int(kv["seed"]))
    except KeyError as e:
        raise FormatError(f"spec text is missing {e}") from None
    return spec, int(kv.get("epoch", 0)), kv.get("loss_digest", "")


def save_checkpoint(path, model: WindNet, *, epoch: int = 0,
                    loss_digest: str = "") -> None:
    buf = io.BytesIO()
    text = _spec_text(model.spec, epoch, loss_digest).encode()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        nb = name.encode()
        if len(nb) > 255:
            raise FormatError(f"tensor name too long: {name!r}")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<B", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != _MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (tlen,) = struct.unpack("<I", take(4, "spec length"))
    spec, epoch, digest = _parse_spec_text(bytes(take(tlen, "spec text")).decode())
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<B", take(1, "name length"))
        name = bytes(take(nlen, "tensor name")).decode()
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4")
        if name in state:
            raise FormatError(f"duplicate tensor {name!r}")
        state[name] = data.reshape(dims).copy()
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last tensor")
    return Checkpoint(spec, state, epoch, digest)


def load_model(path) -> tuple[WindNet, Checkpoint]:
    ck = load_checkpoint(path)
    return ck.build(), ck


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    return replace(spec, seed=seed)
