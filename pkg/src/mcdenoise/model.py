"""Builders for the lightweight pyramid denoiser and the 3D UNet baseline.

Both networks are expressed as a flat layer list with explicit wiring:
each layer names the layers it consumes (index -1 is the network input),
so the same graph drives the forward pass, parameter iteration,
checkpointing, and the analytic complexity counters.

Lightweight net: voxel unshuffle, then ``num_down`` downsampling modules
of [axial conv (3,3,1) stride (2,2,1) + norm + relu, slice conv (1,1,3)
stride (1,1,2) + norm + relu]. A feature pyramid walks back up: at each
level the running feature is upsampled 2x, passed through a stride-1
axial+slice conv pair (each with norm + relu), and concatenated with the
same-resolution backbone feature. The head is a plain axial+slice conv
pair producing 8 channels, restored to one full-resolution channel by the
voxel shuffle.

UNet baseline: ``num_down`` modules of [3x3x3 conv stride 2 + norm +
relu], then a mirrored decoder of [upsample 2x, 3x3x3 stride-1 conv +
norm + relu, concat with skip] and a final upsample plus 3x3x3 conv to
one channel.

Feature counts start at ``base_features``, double per downsampling module
and cap at 8x the base (64 -> 512 at the reference configuration); the
decoder/pyramid convs emit the channel count of the skip they join.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .kernels import (
    ConvSpec,
    conv3d,
    instance_norm,
    make_conv_spec,
    upsample_trilinear,
    voxel_shuffle,
    voxel_unshuffle,
)
from .tensor import Tensor, concat

PROPOSED = "proposed"
UNET_BASELINE = "unet-baseline"

_FEATURE_CAP_FACTOR = 8  # doubling stops at 8x base (512 for base 64)

CHECKPOINT_MAGIC = b"DDPK"
CHECKPOINT_VERSION = 1
_NAME_TAGS = {PROPOSED: 1, UNET_BASELINE: 2}
_TAG_NAMES = {v: k for k, v in _NAME_TAGS.items()}


@dataclass(frozen=True)
class ScaledConfig:
    """Geometry knob: reference setting is (64, 5|6, 256x256x64)."""

    base_features: int = 64
    num_down: int = 5
    input_extents: tuple[int, int, int] = (256, 256, 64)

    def __post_init__(self):
        if self.base_features < 1 or self.num_down < 1:
            raise ConfigError("base_features and num_down must be >= 1")
        if len(self.input_extents) != 3 or any(e < 1 for e in self.input_extents):
            raise ConfigError(f"bad input extents {self.input_extents}")


PAPER_PROPOSED_CONFIG = ScaledConfig(64, 5, (256, 256, 64))
PAPER_UNET_CONFIG = ScaledConfig(64, 6, (256, 256, 64))


@dataclass
class Layer:
    kind: str  # unshuffle | conv | inorm | relu | upsample | concat | shuffle
    inputs: tuple[int, ...]  # producer layer ids; -1 is the network input
    spec: ConvSpec | None = None
    scale: Tensor | None = None
    shift: Tensor | None = None
    stage: str = ""  # input | backbone | pyramid | head

    def params(self) -> list[tuple[str, Tensor]]:
        if self.kind == "conv":
            return [("weights", self.spec.weights), ("bias", self.spec.bias)]
        if self.kind == "inorm":
            return [("scale", self.scale), ("shift", self.shift)]
        return []


@dataclass
class NetworkGraph:
    name: str
    cfg: ScaledConfig
    seed: int
    layers: list[Layer] = field(default_factory=list)

    def parameters(self):
        for layer_id, layer in enumerate(self.layers):
            for pname, tensor in layer.params():
                yield layer_id, pname, tensor

    def param_tensors(self) -> list[Tensor]:
        return [t for _, _, t in self.parameters()]

    @property
    def divisor(self) -> int:
        extra = 1 if self.name == PROPOSED else 0
        return 2 ** (self.cfg.num_down + extra)

    def check_extents(self, extents):
        if any(e % self.divisor or e < self.divisor for e in extents):
            raise ShapeError(
                f"{self.name} with num_down={self.cfg.num_down} needs extents "
                f"divisible by {self.divisor}, got {tuple(extents)}"
            )


def _feature_plan(base: int, num_down: int) -> list[int]:
    return [min(base * 2**m, base * _FEATURE_CAP_FACTOR) for m in range(num_down)]


class _GraphBuilder:
    def __init__(self, name, cfg, seed):
        self.net = NetworkGraph(name, cfg, int(seed))
        self.rng = np.random.default_rng(int(seed))

    def add(self, kind, inputs, stage, **kw) -> int:
        inputs = tuple(inputs) if isinstance(inputs, (tuple, list)) else (inputs,)
        self.net.layers.append(Layer(kind, inputs, stage=stage, **kw))
        return len(self.net.layers) - 1

    def conv(self, src, c_in, c_out, kernel, stride, stage) -> int:
        spec = make_conv_spec(c_in, c_out, kernel, stride, self.rng)
        return self.add("conv", src, stage, spec=spec)

    def norm_relu(self, src, channels, stage) -> int:
        scale = Tensor(np.ones(channels), requires_grad=True)
        shift = Tensor(np.zeros(channels), requires_grad=True)
        n = self.add("inorm", src, stage, scale=scale, shift=shift)
        return self.add("relu", n, stage)


def _check_divisibility(name, cfg):
    extra = 1 if name == PROPOSED else 0
    div = 2 ** (cfg.num_down + extra)
    if any(e % div or e < div for e in cfg.input_extents):
        raise ConfigError(
            f"{name} with num_down={cfg.num_down} needs input extents divisible "
            f"by {div}, got {cfg.input_extents}"
        )


def build_proposed(cfg: ScaledConfig, seed: int = 0) -> NetworkGraph:
    """Unshuffle front end, decoupled-conv backbone, feature pyramid, shuffle head."""
    _check_divisibility(PROPOSED, cfg)
    b = _GraphBuilder(PROPOSED, cfg, seed)
    feats = _feature_plan(cfg.base_features, cfg.num_down)

    prev = b.add("unshuffle", -1, "input")
    skips = [prev]  # same-resolution features consumed by the pyramid
    skip_channels = [8]
    c = 8
    for f in feats:
        conv = b.conv(prev, c, f, (3, 3, 1), (2, 2, 1), "backbone")
        prev = b.norm_relu(conv, f, "backbone")
        conv = b.conv(prev, f, f, (1, 1, 3), (1, 1, 2), "backbone")
        prev = b.norm_relu(conv, f, "backbone")
        skips.append(prev)
        skip_channels.append(f)
        c = f

    p, pc = skips[-1], skip_channels[-1]
    for level in range(cfg.num_down - 1, -1, -1):
        q = skip_channels[level]
        up = b.add("upsample", p, "pyramid")
        conv = b.conv(up, pc, q, (3, 3, 1), (1, 1, 1), "pyramid")
        mid = b.norm_relu(conv, q, "pyramid")
        conv = b.conv(mid, q, q, (1, 1, 3), (1, 1, 1), "pyramid")
        mid = b.norm_relu(conv, q, "pyramid")
        p = b.add("concat", (mid, skips[level]), "pyramid")
        pc = 2 * q

    h = b.conv(p, pc, 8, (3, 3, 1), (1, 1, 1), "head")
    h = b.conv(h, 8, 8, (1, 1, 3), (1, 1, 1), "head")
    b.add("shuffle", h, "head")
    return b.net


def build_unet_baseline(cfg: ScaledConfig, seed: int = 0) -> NetworkGraph:
    """Classic encoder-decoder with 3x3x3 convs and concatenation skips."""
    _check_divisibility(UNET_BASELINE, cfg)
    b = _GraphBuilder(UNET_BASELINE, cfg, seed)
    feats = _feature_plan(cfg.base_features, cfg.num_down)

    prev = -1
    skips = []
    c = 1
    for f in feats:
        conv = b.conv(prev, c, f, (3, 3, 3), (2, 2, 2), "backbone")
        prev = b.norm_relu(conv, f, "backbone")
        skips.append(prev)
        c = f

    p, pc = skips[-1], feats[-1]
    for level in range(cfg.num_down - 2, -1, -1):
        q = feats[level]
        up = b.add("upsample", p, "pyramid")
        conv = b.conv(up, pc, q, (3, 3, 3), (1, 1, 1), "pyramid")
        mid = b.norm_relu(conv, q, "pyramid")
        p = b.add("concat", (mid, skips[level]), "pyramid")
        pc = 2 * q

    up = b.add("upsample", p, "head")
    b.conv(up, pc, 1, (3, 3, 3), (1, 1, 1), "head")
    return b.net


def build_network(name: str, cfg: ScaledConfig, seed: int = 0) -> NetworkGraph:
    if name == PROPOSED:
        return build_proposed(cfg, seed)
    if name == UNET_BASELINE:
        return build_unet_baseline(cfg, seed)
    raise ConfigError(f"unknown network name {name!r}")


# -- forward -------------------------------------------------------------------


def forward(net: NetworkGraph, x: Tensor) -> Tensor:
    """Run the denoiser; output shape equals input shape."""
    if len(x.shape) != 5 or x.shape[0] != 1 or x.shape[1] != 1:
        raise ContractError(f"forward expects a [1, 1, H, W, D] tensor, got {x.shape}")
    net.check_extents(x.shape[2:])

    outputs: list[Tensor | None] = [None] * len(net.layers)

    def fetch(i):
        return x if i == -1 else outputs[i]

    for idx, layer in enumerate(net.layers):
        a = fetch(layer.inputs[0])
        if layer.kind == "unshuffle":
            out = voxel_unshuffle(a)
        elif layer.kind == "shuffle":
            out = voxel_shuffle(a)
        elif layer.kind == "conv":
            out = conv3d(a, layer.spec)
        elif layer.kind == "inorm":
            out = instance_norm(a, layer.scale, layer.shift)
        elif layer.kind == "relu":
            out = a.relu()
        elif layer.kind == "upsample":
            out = upsample_trilinear(a)
        elif layer.kind == "concat":
            out = concat([fetch(i) for i in layer.inputs])
        else:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
        if not np.all(np.isfinite(out.data)):
            raise NumericError(f"non-finite values after layer {idx} ({layer.kind})")
        outputs[idx] = out
    return outputs[-1]


# -- checkpoint I/O --------------------------------------------------------------


def _layer_blob(layer: Layer) -> np.ndarray:
    return np.concatenate([t.data.ravel() for _, t in layer.params()])


def save_checkpoint(net: NetworkGraph, path):
    """Write the DDPK binary: header, config block, then per-layer weights."""
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", net.seed),
        struct.pack("<III", _NAME_TAGS[net.name], net.cfg.base_features, net.cfg.num_down),
    ]
    for layer_id, layer in enumerate(net.layers):
        if not layer.params():
            continue
        blob = _layer_blob(layer)
        chunks.append(struct.pack("<IQ", layer_id, blob.size))
        chunks.append(blob.astype("<f8").tobytes())
    data = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(data)


def checkpoint_nbytes(net: NetworkGraph) -> int:
    """Exact on-disk size: 28-byte header plus 12 bytes and 8 per value per layer."""
    total = 28
    for layer in net.layers:
        params = layer.params()
        if params:
            total += 12 + 8 * sum(t.size for _, t in params)
    return total


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> NetworkGraph:
    """Rebuild the graph named in the header and load its weights."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (seed,) = struct.unpack("<Q", _read_exact(fh, 8, "seed"))
        tag, base_features, num_down = struct.unpack("<III", _read_exact(fh, 12, "config"))
        if tag not in _TAG_NAMES:
            raise FormatError(f"unknown network tag {tag}")
        name = _TAG_NAMES[tag]
        extra = 1 if name == PROPOSED else 0
        nominal = 2 ** (num_down + extra)
        cfg = ScaledConfig(base_features, num_down, (nominal, nominal, nominal))
        net = build_network(name, cfg, seed=seed)

        for layer_id, layer in enumerate(net.layers):
            params = layer.params()
            if not params:
                continue
            rid, count = struct.unpack("<IQ", _read_exact(fh, 12, "layer header"))
            expected = sum(t.size for _, t in params)
            if rid != layer_id or count != expected:
                raise FormatError(
                    f"layer record mismatch: got id {rid} count {count}, "
                    f"expected id {layer_id} count {expected}"
                )
            blob = np.frombuffer(_read_exact(fh, 8 * count, "layer data"), dtype="<f8")
            offset = 0
            for _, t in params:
                t.data[...] = blob[offset : offset + t.size].reshape(t.shape)
                offset += t.size
        if fh.read(1):
            raise FormatError("trailing bytes after final layer record")
    return net
