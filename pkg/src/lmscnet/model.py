"""Mixed 2D/3D multiscale completion network.

The height axis of the input grid is folded into channels and processed by
a 4-level 2D UNet. Decoder level ``l`` emits exactly ``nz / 2**l`` feature
maps, which are re-read as a one-channel depth volume by a small 3D head
producing class logits at scale ``1 / 2**l``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import concat, conv2d, conv3d, conv_transpose2d, maxpool2d, nearest_upsample2d, relu
from .optim import Parameter
from .tensor import Tensor, get_default_dtype, no_grad

LEVELS = 4
ALL_SCALES = (0, 1, 2, 3)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 19  # semantic classes, free excluded
    nx: int = 256
    ny: int = 256
    nz: int = 32
    channels: tuple[int, ...] = (32, 48, 64, 80)
    head_width: int = 12
    aspp_dilations: tuple[int, ...] = (1, 2, 3)
    decoder_mode: str = "multiscale"
    upsample_mode: str = "deconv"
    head_aspp: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "aspp_dilations", tuple(int(d) for d in self.aspp_dilations))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.channels) != LEVELS:
            raise ConfigError(f"channel schedule needs {LEVELS} levels, got {self.channels}")
        if self.channels[0] != self.nz:
            raise ConfigError(f"level-0 channels ({self.channels[0]}) must equal nz ({self.nz})")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel schedule must be strictly increasing, got {self.channels}")
        for name, n in (("nx", self.nx), ("ny", self.ny), ("nz", self.nz)):
            if n <= 0 or n % 2 ** (LEVELS - 1):
                raise ConfigError(f"{name}={n} must be a positive multiple of {2 ** (LEVELS - 1)}")
        if self.head_width < 1:
            raise ConfigError("head_width must be >= 1")
        if self.decoder_mode not in ("multiscale", "vanilla"):
            raise ConfigError(f"decoder_mode must be 'multiscale' or 'vanilla', got {self.decoder_mode!r}")
        if self.upsample_mode not in ("deconv", "nearest"):
            raise ConfigError(f"upsample_mode must be 'deconv' or 'nearest', got {self.upsample_mode!r}")
        if self.head_aspp and (not self.aspp_dilations or min(self.aspp_dilations) < 1):
            raise ConfigError(f"aspp_dilations must be positive, got {self.aspp_dilations}")

    @property
    def n_logits(self) -> int:
        return self.num_classes + 1

    def level_dims(self, level: int) -> tuple[int, int, int]:
        f = 2**level
        return (self.nx // f, self.ny // f, self.nz // f)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["aspp_dilations"] = list(self.aspp_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv2d | conv3d | deconv2d
    cin: int
    cout: int
    kernel: int
    level: int  # resolution level of the layer's input
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    relu: bool = True
    block: str = ""

    @property
    def nd(self) -> int:
        return 3 if self.kind == "conv3d" else 2

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = (self.kernel,) * self.nd
        if self.kind == "deconv2d":
            return (self.cin, self.cout) + k
        return (self.cout, self.cin) + k

    @property
    def fan_in(self) -> int:
        kvol = self.kernel**self.nd
        if self.kind == "deconv2d":
            return max(1, self.cin * kvol // self.stride**self.nd)
        return self.cin * kvol


def layer_param_count(spec: LayerSpec) -> int:
    return int(np.prod(spec.weight_shape)) + spec.cout


def layer_flops(spec: LayerSpec, in_spatial: tuple[int, ...], batch: int = 1) -> int:
    """Multiply-adds counted as 2 FLOPs, plus one add per output for the bias.

    A trailing ReLU adds one FLOP per output element.
    """
    kvol = spec.kernel**spec.nd
    if spec.kind == "deconv2d":
        out_sp = tuple((n - 1) * spec.stride + spec.kernel for n in in_spatial)
        out_elems = batch * spec.cout * math.prod(out_sp)
        macs = batch * spec.cin * math.prod(in_spatial) * spec.cout * kvol
    else:
        out_sp = tuple(
            (n + 2 * spec.padding - spec.dilation * (spec.kernel - 1) - 1) // spec.stride + 1 for n in in_spatial
        )
        out_elems = batch * spec.cout * math.prod(out_sp)
        macs = out_elems * spec.cin * kvol
    return 2 * macs + out_elems + (out_elems if spec.relu else 0)


def parse_scales(scales: Iterable[int] | int | str) -> tuple[int, ...]:
    if isinstance(scales, str):
        scales = [int(s) for s in scales.split(",") if s.strip()]
    elif isinstance(scales, int):
        scales = [scales]
    out = tuple(sorted(set(int(s) for s in scales)))
    if not out:
        raise ConfigError("scale selection must not be empty")
    if any(s not in ALL_SCALES for s in out):
        raise ConfigError(f"scales must be within {ALL_SCALES}, got {out}")
    return out


def lift_to_volume(features: Tensor, depth: int | None = None) -> Tensor:
    """(B, C, H, W) -> (B, 1, C, H, W): channels become the depth axis."""
    if features.ndim != 4:
        raise DimensionError(f"lift_to_volume expects (B, C, H, W), got {features.shape}")
    b, c, h, w = features.shape
    if depth is not None and c != depth:
        raise DimensionError(f"lift_to_volume: axis C has {c} channels, expected depth {depth}")
    return features.reshape(b, 1, c, h, w)


def _sources(config: ModelConfig, level: int) -> list[int]:
    if level == LEVELS - 1:
        return []
    if config.decoder_mode == "vanilla":
        return [level + 1]
    return list(range(level + 1, LEVELS))


def _layer_specs(config: ModelConfig) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    ch = config.channels
    for l in range(LEVELS):
        cin = config.nz if l == 0 else ch[l - 1]
        for i in range(2):
            specs.append(LayerSpec(f"enc.l{l}.conv{i}", "conv2d", cin if i == 0 else ch[l], ch[l], 3, l, padding=1, block="enc"))
    for l in reversed(range(LEVELS)):
        width = config.nz // 2**l
        cin = ch[l]
        for src in _sources(config, l):
            src_width = config.nz // 2**src
            cin += src_width
            if config.upsample_mode == "deconv":
                f = 2 ** (src - l)
                specs.append(LayerSpec(f"up.l{src}_l{l}", "deconv2d", src_width, src_width, f, src, stride=f,
                                       relu=False, block=f"dec{l}"))
        specs.append(LayerSpec(f"dec.l{l}.conv", "conv2d", cin, width, 3, l, padding=1, block=f"dec{l}"))
    h = config.head_width
    for l in range(LEVELS):
        blk = f"head{l}"
        specs.append(LayerSpec(f"head.l{l}.conv0", "conv3d", 1, h, 3, l, padding=1, block=blk))
        specs.append(LayerSpec(f"head.l{l}.conv1", "conv3d", h, h, 3, l, padding=1, block=blk))
        if config.head_aspp:
            n_branch = len(config.aspp_dilations)
            for j, d in enumerate(config.aspp_dilations):
                # branches are summed and the ReLU follows the sum
                specs.append(LayerSpec(f"head.l{l}.aspp.d{d}", "conv3d", h, h, 3, l, padding=d, dilation=d,
                                       relu=(j == n_branch - 1), block=blk))
        specs.append(LayerSpec(f"head.l{l}.cls", "conv3d", h, config.n_logits, 1, l, relu=False, block=blk))
    return specs


def _needed_blocks(config: ModelConfig, scales: tuple[int, ...]) -> set[str]:
    lowest = min(scales)
    blocks = {"enc"} | {f"dec{l}" for l in range(lowest, LEVELS)}
    return blocks | {f"head{l}" for l in scales}


class LMSCNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.layers = {s.name: s for s in _layer_specs(config)}
        if params is None:
            params = _init_params(config, self.layers.values())
        expected = [n for s in self.layers.values() for n in (f"{s.name}.weight", f"{s.name}.bias")]
        if list(params) != expected:
            raise ConfigError("parameter set does not match the configured architecture")
        for s in self.layers.values():
            for suffix, shape in (("weight", s.weight_shape), ("bias", (s.cout,))):
                if params[f"{s.name}.{suffix}"].shape != shape:
                    raise DimensionError(f"{s.name}.{suffix} has shape {params[f'{s.name}.{suffix}'].shape}, expected {shape}")
        self.params = params

    # --- parameter views -------------------------------------------------------
    def parameters(self, scales: Iterable[int] | None = None) -> list[Parameter]:
        blocks = None if scales is None else _needed_blocks(self.config, parse_scales(scales))
        return [
            Parameter(name, t)
            for name, t in self.params.items()
            if blocks is None or self.layers[name.rsplit(".", 1)[0]].block in blocks
        ]

    def layer_specs(self, scales: Iterable[int] | None = None) -> list[LayerSpec]:
        blocks = None if scales is None else _needed_blocks(self.config, parse_scales(scales))
        return [s for s in self.layers.values() if blocks is None or s.block in blocks]

    def _w(self, name: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def _apply(self, name: str, x: Tensor) -> Tensor:
        s = self.layers[name]
        w, b = self._w(name)
        if s.kind == "conv2d":
            y = conv2d(x, w, b, stride=s.stride, padding=s.padding, dilation=s.dilation)
        elif s.kind == "conv3d":
            y = conv3d(x, w, b, stride=s.stride, padding=s.padding, dilation=s.dilation)
        else:
            y = conv_transpose2d(x, w, b, stride=s.stride)
        return relu(y) if s.relu else y

    # --- forward ------------------------------------------------------------------
    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for l in range(LEVELS):
            if l > 0:
                h = maxpool2d(h, 2, 2)
            h = self._apply(f"enc.l{l}.conv0", h)
            h = self._apply(f"enc.l{l}.conv1", h)
            feats.append(h)
        return feats

    def decode(self, feats: list[Tensor], lowest: int) -> dict[int, Tensor]:
        dec: dict[int, Tensor] = {}
        for l in reversed(range(lowest, LEVELS)):
            parts = []
            for src in _sources(self.config, l):
                if self.config.upsample_mode == "deconv":
                    parts.append(self._apply(f"up.l{src}_l{l}", dec[src]))
                else:
                    parts.append(nearest_upsample2d(dec[src], 2 ** (src - l)))
            parts.append(feats[l])
            dec[l] = self._apply(f"dec.l{l}.conv", concat(parts, axis=1))
        return dec

    def head(self, level: int, features: Tensor) -> Tensor:
        """Class logits (B, N+1, X, Y, Z) from decoder features (B, Z, X, Y)."""
        v = lift_to_volume(features, self.config.nz // 2**level)
        v = self._apply(f"head.l{level}.conv0", v)
        v = self._apply(f"head.l{level}.conv1", v)
        if self.config.head_aspp:
            branches = []
            for d in self.config.aspp_dilations:
                s = self.layers[f"head.l{level}.aspp.d{d}"]
                w, b = self._w(s.name)
                branches.append(conv3d(v, w, b, padding=s.padding, dilation=s.dilation))
            total = branches[0]
            for t in branches[1:]:
                total = total + t
            v = relu(total)
        logits = self._apply(f"head.l{level}.cls", v)
        return logits.permute(0, 1, 3, 4, 2)

    def forward(self, x, scales: Iterable[int] = ALL_SCALES) -> dict[int, Tensor]:
        """Logits per requested level; only the subgraph those levels need runs."""
        scales = parse_scales(scales)
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.nz, cfg.nx, cfg.ny):
            raise DimensionError(f"input must be (B, {cfg.nz}, {cfg.nx}, {cfg.ny}), got {x.shape}")
        dec = self.decode(self.encode(x), min(scales))
        return {l: self.head(l, dec[l]) for l in scales}

    __call__ = forward

    def predict(self, x, scales: Iterable[int] = ALL_SCALES) -> dict[int, np.ndarray]:
        """Argmax labels (B, X, Y, Z) per level; ties resolve to the smallest id."""
        with no_grad():
            out = self.forward(x, scales)
        return {l: np.argmax(t.data, axis=1).astype(np.uint16) for l, t in out.items()}


def _init_params(config: ModelConfig, specs: Iterable[LayerSpec]) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    dtype = get_default_dtype()
    params: dict[str, Tensor] = {}
    for s in specs:
        bound = math.sqrt(6.0 / s.fan_in)
        params[f"{s.name}.weight"] = Tensor(rng.uniform(-bound, bound, size=s.weight_shape), requires_grad=True, dtype=dtype)
        params[f"{s.name}.bias"] = Tensor(np.zeros(s.cout), requires_grad=True, dtype=dtype)
    return params


def build(config: ModelConfig | None = None) -> LMSCNet:
    return LMSCNet(config or ModelConfig())


def count_params(model: LMSCNet, scales: Iterable[int] | None = None) -> int:
    """Trainable scalars; with ``scales``, only those the pruned network uses."""
    return sum(p.value.size for p in model.parameters(scales))


def count_flops(model: LMSCNet, scales: Iterable[int] = ALL_SCALES, batch: int = 1) -> int:
    """Analytic FLOPs of one pruned forward pass.

    Convolutions follow ``layer_flops``; max pooling costs one FLOP per input
    element; summing ASPP branches costs one add per element per extra branch.
    Reshapes, concatenation and nearest upsampling are free.
    """
    scales = parse_scales(scales)
    cfg = model.config
    total = 0
    for s in model.layer_specs(scales):
        nx, ny, nz = cfg.level_dims(s.level)
        spatial = (nz, nx, ny) if s.nd == 3 else (nx, ny)
        total += layer_flops(s, spatial, batch)
    for l in range(1, LEVELS):
        nx, ny, _ = cfg.level_dims(l - 1)
        total += batch * cfg.channels[l - 1] * nx * ny
    if cfg.head_aspp:
        for l in scales:
            nx, ny, nz = cfg.level_dims(l)
            total += batch * (len(cfg.aspp_dilations) - 1) * cfg.head_width * nx * ny * nz
    return total
