"""Assembly of the encoder-decoder network, its variants, and weight checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .capsule import GraphCapsuleConv
from .fusion import BGA, MSGF, MSGF_MODES, SGAF
from .nn import Conv2d, ConvBlock, Module
from .tensor import ConfigurationError, ShapeError, Tensor, as_tensor, concat, no_grad

VARIANTS = ("local_only", "global_vanilla", "global_gc", "fusion")
FUSION_MODES = ("serial", "parallel")

CHECKPOINT_MAGIC = b"GCCW"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    capsule_channels: int = 2
    capsules: int = 4
    atoms: int = 4
    kernel: int = 3
    routing_iterations: int = 3
    fusion_mode: str = "serial"
    variant: str = "fusion"
    use_bga: bool = True
    use_msgf: bool = True
    msgf_mode: str = "shared"
    bga_threshold: float = 0.4
    spatial_max_nodes: int = 256
    spatial_k: int = 8
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.msgf_mode not in MSGF_MODES:
            raise ConfigurationError(f"msgf_mode must be one of {MSGF_MODES}, got {self.msgf_mode!r}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.use_msgf and self.depth < 3:
            raise ConfigurationError("MSGF fuses three decoder stages and needs depth >= 3")
        positive = ("base_channels", "in_channels", "capsule_channels", "capsules", "atoms",
                    "routing_iterations", "spatial_max_nodes", "spatial_k")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("capsule kernel must be odd")
        if not 0.0 < self.bga_threshold < 1.0:
            raise ConfigurationError("bga_threshold must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {unknown}")
        return cls(**d).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class EncoderStage(Module):
    """One resolution level of the encoder for a given variant."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng: np.random.Generator):
        self.variant = cfg.variant
        self.fusion_mode = cfg.fusion_mode
        self.stem = Conv2d(cin, cout, 3, rng)
        if cfg.variant in ("local_only", "fusion"):
            self.local_fe = Conv2d(cout, cout, 3, rng)
        if cfg.variant != "local_only":
            self.global_fe = GraphCapsuleConv(
                cout, cout, rng, capsule_channels=cfg.capsule_channels, capsules=cfg.capsules,
                atoms=cfg.atoms, kernel=cfg.kernel, iterations=cfg.routing_iterations,
                use_graph=cfg.variant != "global_vanilla")
        if cfg.variant == "fusion":
            self.sgaf = SGAF(cout, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        """Returns (stage output, global features passed to the decoder)."""
        h = self.stem(x)
        if self.variant == "local_only":
            return self.local_fe(h), None
        if self.variant != "fusion":
            g = self.global_fe(h)
            return g, None
        local = self.local_fe(h)
        g = self.global_fe(local if self.fusion_mode == "serial" else h)
        return self.sgaf(local, g), g


class DecoderStage(Module):
    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng: np.random.Generator):
        self.variant = cfg.variant
        self.up = Conv2d(cin, cout, 3, rng)
        self.local_fe = ConvBlock(2 * cout, cout, rng)
        if cfg.variant == "fusion":
            self.sgaf = SGAF(cout, rng)

    def forward(self, x: Tensor, skip: Tensor, passed: Optional[Tensor]) -> Tensor:
        up = self.up(ops.upsample_nearest(x, 2))
        local = self.local_fe(concat([up, skip], axis=1))
        if passed is None:
            return local
        return self.sgaf(local, passed)


class GCCUNet(Module):
    """Encoder-decoder segmenter producing two-class logits per pixel."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = [cfg.base_channels * 2 ** s for s in range(cfg.depth)]
        self.widths = widths
        self.encoder = []
        cin = cfg.in_channels
        for w in widths:
            self.encoder.append(EncoderStage(cin, w, cfg, rng))
            cin = w
        bottleneck = 2 * widths[-1]
        self.bottleneck = ConvBlock(widths[-1], bottleneck, rng)
        if cfg.use_bga:
            self.bga = BGA(bottleneck, rng, threshold=cfg.bga_threshold,
                           max_nodes=cfg.spatial_max_nodes, k=cfg.spatial_k, seed=cfg.seed)
        self.decoder = []
        cin = bottleneck
        for w in reversed(widths):
            self.decoder.append(DecoderStage(cin, w, cfg, rng))
            cin = w
        if cfg.use_msgf:
            self.msgf = MSGF((widths[0], widths[1], widths[2]), rng, mode=cfg.msgf_mode)
        self.head = Conv2d(widths[0], 2, 1, rng, activation="linear")

    def check_input(self, image: Tensor) -> None:
        if image.ndim != 4:
            raise ShapeError(f"expected an image batch [B,C,H,W], got {image.shape}")
        if image.shape[1] != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} input channels, got {image.shape[1]}")
        f = 2 ** self.config.depth
        H, W = image.shape[2:]
        if H % f or W % f:
            ph, pw = (-H) % f, (-W) % f
            raise ShapeError(
                f"image extents {H}x{W} must be divisible by {f}; pad by {ph} rows and {pw} columns")

    def forward(self, image: Tensor) -> Tensor:
        x = as_tensor(image)
        self.check_input(x)
        skips, passed = [], []
        for stage in self.encoder:
            x, g = stage(x)
            skips.append(x)
            passed.append(g)
            x = ops.max_pool2d(x, 2)
        x = self.bottleneck(x)
        if self.config.use_bga:
            x = self.bga(x)
        decoded = []
        for stage, skip, g in zip(self.decoder, reversed(skips), reversed(passed)):
            x = stage(x, skip, g)
            decoded.append(x)
        if self.config.use_msgf:
            x = self.msgf(decoded[-1], decoded[-2], decoded[-3])
        return self.head(x)


Model = GCCUNet


def build_model(cfg: ModelConfig) -> GCCUNet:
    return GCCUNet(cfg)


def forward(model: GCCUNet, image) -> Tensor:
    return model(image)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def param_breakdown(model: Module) -> "OrderedDict[str, int]":
    """Parameter counts grouped by top-level submodule name."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        key = name.split(".")[0]
        out[key] = out.get(key, 0) + p.size
    return out


def graph_capsule_parameters(model: Module) -> list[str]:
    """Names of parameters that belong to capsule or graph layers."""
    from .capsule import GraphCapsuleConv as _GC
    from .graph import GraphConvLayer

    names = []
    for mname, mod in model.named_modules():
        if isinstance(mod, (_GC, GraphConvLayer)):
            names.extend(f"{mname}.{n}" if mname else n for n, _ in mod.named_parameters())
    return names


def estimate_flops(model: GCCUNet, height: int, width: int) -> int:
    """Multiply-accumulates of one forward pass on a single image."""
    x = np.zeros((1, model.config.in_channels, height, width))
    with no_grad(), ops.count_flops() as counter:
        model(x)
    return counter[0]


def save_weights(model: GCCUNet, path) -> None:
    """Write the config and all named float64 parameters to a binary checkpoint."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a weight checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = json.loads(buf[pos:pos + clen].decode())
    pos += clen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ConfigurationError(f"{path}: trailing bytes in checkpoint")
    return cfg, state


def load_weights(model: GCCUNet, path) -> GCCUNet:
    cfg, state = read_checkpoint(path)
    if ModelConfig.from_dict(cfg) != model.config:
        raise ConfigurationError(f"{path}: checkpoint config does not match the model")
    model.load_state_dict(state)
    return model


def load_model(path) -> GCCUNet:
    cfg, state = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(cfg))
    model.load_state_dict(state)
    return model
