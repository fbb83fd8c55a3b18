"""Analytic FLOPs/parameter counting and the decoupled-vs-regular benchmark.

FLOPs follow the multiply-accumulate convention for convolutions,
2 * C_in * k_h * k_w * k_d * C_out * H_out * W_out * D_out, counting the
convolutions only: normalization, ReLU, shuffles and upsampling are free.
Counting works on symbolic shapes, so profiling the reference geometry
allocates no tensors.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kernels import conv3d, instance_norm, make_conv_spec
from .model import NetworkGraph
from .tensor import Tensor, relu

try:  # BLAS thread pinning for stable timings, when available
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def conv_flops(c_in, kernel, c_out, out_extents) -> int:
    kh, kw, kd = kernel
    oh, ow, od = out_extents
    return 2 * c_in * kh * kw * kd * c_out * oh * ow * od


@dataclass
class LayerCost:
    layer_id: int
    kind: str
    stage: str
    input_shape: tuple
    output_shape: tuple
    flops: int
    params: int


@dataclass
class FlopsReport:
    network: str
    input_extents: tuple[int, int, int]
    rows: list[LayerCost]

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_gflops(self) -> float:
        return self.total_flops / 1e9

    def csv_lines(self) -> list[str]:
        lines = ["layer_id,kind,stage,input_shape,output_shape,flops,params"]
        for r in self.rows:
            in_s = "x".join(str(v) for v in r.input_shape)
            out_s = "x".join(str(v) for v in r.output_shape)
            lines.append(f"{r.layer_id},{r.kind},{r.stage},{in_s},{out_s},{r.flops},{r.params}")
        lines.append(f"total,,,,,{self.total_flops},{self.total_params}")
        return lines

    def table(self) -> str:
        header = ["id", "kind", "stage", "input", "output", "flops", "params"]
        body = []
        for r in self.rows:
            body.append(
                [
                    str(r.layer_id),
                    r.kind,
                    r.stage,
                    "x".join(str(v) for v in r.input_shape),
                    "x".join(str(v) for v in r.output_shape),
                    f"{r.flops:,}",
                    f"{r.params:,}",
                ]
            )
        body.append(["total", "", "", "", "", f"{self.total_flops:,}", f"{self.total_params:,}"])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header)] + [fmt.format(*row) for row in body]
        lines.append(
            f"\n{self.network} at {'x'.join(str(e) for e in self.input_extents)}: "
            f"{self.total_gflops:.2f} GFLOPs, {self.total_params / 1e6:.2f}M params"
        )
        return "\n".join(lines) + "\n"


def _conv_out_extents(extents, spec):
    out = []
    for n, k, s in zip(extents, spec.kernel, spec.stride):
        p = (k - 1) // 2
        span = n + 2 * p - k
        if span < 0:
            raise ContractError(f"extent {n} too small for kernel {spec.kernel}")
        out.append(span // s + 1)
    return tuple(out)


def count_flops(net: NetworkGraph, input_extents) -> FlopsReport:
    """Propagate shapes through the graph and cost each convolution."""
    input_extents = tuple(int(e) for e in input_extents)
    try:
        net.check_extents(input_extents)
    except Exception as exc:
        raise ContractError(str(exc)) from exc

    shapes: list[tuple] = [None] * len(net.layers)

    def fetch(i):
        return (1, 1) + input_extents if i == -1 else shapes[i]

    rows = []
    for layer_id, layer in enumerate(net.layers):
        src = fetch(layer.inputs[0])
        b, c = src[0], src[1]
        extents = src[2:]
        flops = 0
        params = 0
        if layer.kind == "unshuffle":
            out = (b, 8 * c) + tuple(e // 2 for e in extents)
        elif layer.kind == "shuffle":
            out = (b, c // 8) + tuple(2 * e for e in extents)
        elif layer.kind == "conv":
            spec = layer.spec
            if spec.c_in != c:
                raise ContractError(f"layer {layer_id}: channel mismatch {c} vs {spec.c_in}")
            out_extents = _conv_out_extents(extents, spec)
            out = (b, spec.c_out) + out_extents
            flops = conv_flops(spec.c_in, spec.kernel, spec.c_out, out_extents)
            params = spec.n_params
        elif layer.kind == "inorm":
            out = src
            params = 2 * c
        elif layer.kind in ("relu",):
            out = src
        elif layer.kind == "upsample":
            out = (b, c) + tuple(2 * e for e in extents)
        elif layer.kind == "concat":
            others = [fetch(i) for i in layer.inputs[1:]]
            out = (b, c + sum(s[1] for s in others)) + extents
        else:
            raise ContractError(f"unknown layer kind {layer.kind!r}")
        rows.append(LayerCost(layer_id, layer.kind, layer.stage, src, out, flops, params))
        shapes[layer_id] = out
    return FlopsReport(net.name, input_extents, rows)


def count_params(net: NetworkGraph) -> int:
    """Trainable value count: conv weights and biases plus norm scales and shifts."""
    return sum(t.size for _, _, t in net.parameters())


def decoupling_flops_ratio(k: int = 3) -> float:
    """Per-output-voxel cost of an axial+slice pair relative to one k^3 conv."""
    return (k * k + k) / (k * k * k)


# -- wall-clock micro-benchmark ----------------------------------------------------


@dataclass
class BenchRow:
    module: str
    median_ms: float
    iqr_ms: float
    repeats: int
    workers: int

    def csv(self) -> str:
        return f"{self.module},{self.median_ms:.6f},{self.iqr_ms:.6f},{self.repeats},{self.workers}"


BENCH_CSV_HEADER = "module,median_ms,iqr_ms,repeats,workers"


def _time_forward(fn, x, repeats, warmup=3):
    for _ in range(warmup):
        fn(x)
    samples = np.empty(repeats)
    for i in range(repeats):
        start = time.perf_counter()
        fn(x)
        samples[i] = (time.perf_counter() - start) * 1e3
    return samples


def bench_modules(
    extents=(32, 32, 16), channels: int = 64, repeats: int = 100, seed: int = 0, workers: int = 1
) -> list[BenchRow]:
    """Median/IQR forward time of one regular downsampling module against one
    decoupled axial+slice module at identical input and output shapes."""
    if repeats < 10:
        raise ContractError("bench_modules needs at least 10 repeats")
    extents = tuple(int(e) for e in extents)
    if any(e % 2 for e in extents):
        raise ContractError(f"extents must be even, got {extents}")
    rng = np.random.default_rng(seed)
    c = channels
    regular = make_conv_spec(c, c, (3, 3, 3), (2, 2, 2), rng)
    axial = make_conv_spec(c, c, (3, 3, 1), (2, 2, 1), rng)
    slicec = make_conv_spec(c, c, (1, 1, 3), (1, 1, 2), rng)
    norms = [
        (Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True))
        for _ in range(3)
    ]

    def regular_module(x):
        return relu(instance_norm(conv3d(x, regular), *norms[0]))

    def decoupled_module(x):
        h = relu(instance_norm(conv3d(x, axial), *norms[1]))
        return relu(instance_norm(conv3d(h, slicec), *norms[2]))

    x = Tensor(rng.standard_normal((1, c) + extents))

    def run():
        t_reg = _time_forward(regular_module, x, repeats)
        t_dec = _time_forward(decoupled_module, x, repeats)
        return [
            _row("regular3d", t_reg, repeats, workers),
            _row("decoupled", t_dec, repeats, workers),
        ]

    if threadpool_limits is not None:
        with threadpool_limits(limits=workers):
            return run()
    return run()


def _row(name, samples, repeats, workers):
    q25, q50, q75 = np.percentile(samples, [25, 50, 75])
    return BenchRow(name, float(q50), float(q75 - q25), repeats, workers)
