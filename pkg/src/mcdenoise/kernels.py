"""Structural operators for the volumetric denoising networks.

All kernels take and return 5-D tensors laid out (B, C, H, W, D) and
record backward rules on the tape. Convolutions use cross-correlation
semantics (no kernel flip) with weights stored output-major as
[c_out, c_in, k_h, k_w, k_d]. Unless explicit padding is given, a conv
pads (k - 1) // 2 zeros per dimension so stride-1 convs preserve extents
and stride-2 convs halve them.

The voxel unshuffle rearranges a C-channel volume into 8C channels at
half resolution: output channel ``c * 8 + 4k + 2j + i`` holds the
sub-volume ``x[i::2, j::2, k::2]`` for i, j, k in {0, 1}. The voxel
shuffle is its exact inverse; both are pure permutations.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor, _accumulate, _result

INSTANCE_NORM_EPS = 1e-5


# -- voxel shuffle / unshuffle ------------------------------------------------


def _unshuffle_data(a: np.ndarray) -> np.ndarray:
    b, c, h, w, d = a.shape
    # split each spatial axis into (coarse, offset); offsets become channels
    v = a.reshape(b, c, h // 2, 2, w // 2, 2, d // 2, 2)
    return v.transpose(0, 1, 7, 5, 3, 2, 4, 6).reshape(b, c * 8, h // 2, w // 2, d // 2)


def _shuffle_data(a: np.ndarray) -> np.ndarray:
    b, c8, h, w, d = a.shape
    v = a.reshape(b, c8 // 8, 2, 2, 2, h, w, d)
    return v.transpose(0, 1, 5, 4, 6, 3, 7, 2).reshape(b, c8 // 8, 2 * h, 2 * w, 2 * d)


def voxel_unshuffle(x: Tensor) -> Tensor:
    """[B, C, H, W, D] -> [B, 8C, H/2, W/2, D/2], losslessly."""
    if len(x.shape) != 5:
        raise ShapeError(f"voxel_unshuffle needs a 5-D tensor, got {x.shape}")
    _, _, h, w, d = x.shape
    if h % 2 or w % 2 or d % 2:
        raise ShapeError(f"voxel_unshuffle needs even spatial extents, got {(h, w, d)}")

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, _shuffle_data(g))

    return _result(_unshuffle_data(x.data), (x,), _bw)


def voxel_shuffle(x: Tensor) -> Tensor:
    """[B, 8C, H, W, D] -> [B, C, 2H, 2W, 2D], inverse of voxel_unshuffle."""
    if len(x.shape) != 5:
        raise ShapeError(f"voxel_shuffle needs a 5-D tensor, got {x.shape}")
    if x.shape[1] % 8:
        raise ShapeError(f"voxel_shuffle needs channels divisible by 8, got {x.shape[1]}")

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, _unshuffle_data(g))

    return _result(_shuffle_data(x.data), (x,), _bw)


# -- convolution --------------------------------------------------------------


@dataclass
class ConvSpec:
    """Weights, bias and geometry of one convolution layer."""

    c_in: int
    c_out: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.kernel) != 3 or len(self.stride) != 3:
            raise ContractError("kernel and stride must be 3-tuples")
        if any(k > 1 and k % 2 == 0 for k in self.kernel):
            raise ContractError(f"kernel extents above 1 must be odd, got {self.kernel}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ContractError("kernel and stride extents must be >= 1")
        expected = (self.c_out, self.c_in) + self.kernel
        if self.weights.shape != expected:
            raise ContractError(
                f"weight shape {self.weights.shape} does not match {expected}"
            )
        if self.bias.shape != (self.c_out,):
            raise ContractError(f"bias shape {self.bias.shape} != ({self.c_out},)")

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def make_conv_spec(c_in, c_out, kernel, stride, rng: np.random.Generator) -> ConvSpec:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero bias."""
    kernel = tuple(kernel)
    taps = int(np.prod(kernel))
    bound = np.sqrt(6.0 / (c_in * taps + c_out * taps))
    w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in) + kernel), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return ConvSpec(c_in, c_out, kernel, tuple(stride), w, b)


def conv_output_extents(extents, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for n, k, s, p in zip(extents, kernel, stride, padding):
        span = n + 2 * p - k
        if span < 0:
            raise ContractError(f"kernel {kernel} larger than padded extent {n + 2 * p}")
        out.append(span // s + 1)
    return tuple(out)


def conv3d(x: Tensor, spec: ConvSpec, padding=None) -> Tensor:
    """Direct strided cross-correlation over (H, W, D).

    The inner loop runs over kernel taps; each tap is one channel-mixing
    contraction over a strided view of the padded input, so the work is
    vectorized over every output voxel.
    """
    if len(x.shape) != 5:
        raise ShapeError(f"conv3d needs a 5-D tensor, got {x.shape}")
    if x.shape[1] != spec.c_in:
        raise ContractError(f"conv3d: input has {x.shape[1]} channels, spec wants {spec.c_in}")
    kh, kw, kd = spec.kernel
    sh, sw, sd = spec.stride
    if padding is None:
        padding = ((kh - 1) // 2, (kw - 1) // 2, (kd - 1) // 2)
    ph, pw, pd = (int(p) for p in padding)
    batch = x.shape[0]
    extents = x.shape[2:]
    oh, ow, od = conv_output_extents(extents, spec.kernel, spec.stride, (ph, pw, pd))

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd)))
    w = spec.weights.data

    def tap_view(arr, i, j, k):
        return arr[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw, k : k + od * sd : sd]

    acc = np.zeros((spec.c_out, batch, oh, ow, od))
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                acc += np.tensordot(w[:, :, i, j, k], tap_view(xp, i, j, k), axes=(1, 1))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    out += spec.bias.data.reshape(1, -1, 1, 1, 1)

    def _bw(g):
        if spec.bias.requires_grad:
            _accumulate(spec.bias, g.sum(axis=(0, 2, 3, 4)))
        gm = np.moveaxis(g, 1, 0)  # [c_out, B, oh, ow, od]
        if spec.weights.requires_grad:
            dw = np.zeros(w.shape)
            for i in range(kh):
                for j in range(kw):
                    for k in range(kd):
                        dw[:, :, i, j, k] = np.tensordot(
                            gm, tap_view(xp, i, j, k), axes=([1, 2, 3, 4], [0, 2, 3, 4])
                        )
            _accumulate(spec.weights, dw)
        if x.requires_grad:
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    for k in range(kd):
                        tap_view(dxp, i, j, k)[...] += np.moveaxis(
                            np.tensordot(w[:, :, i, j, k], gm, axes=(0, 0)), 0, 1
                        )
            h, wd, dd = extents
            _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + wd, pd : pd + dd])

    return _result(out, (x, spec.weights, spec.bias), _bw)


def conv_axial(x: Tensor, spec: ConvSpec, padding=None) -> Tensor:
    """2-D in-plane convolution: kernel (k, k, 1)."""
    kh, kw, kd = spec.kernel
    if kd != 1 or kh != kw:
        raise ContractError(f"axial conv needs a (k, k, 1) kernel, got {spec.kernel}")
    return conv3d(x, spec, padding)


def conv_slice(x: Tensor, spec: ConvSpec, padding=None) -> Tensor:
    """1-D through-plane convolution: kernel (1, 1, k)."""
    kh, kw, _ = spec.kernel
    if kh != 1 or kw != 1:
        raise ContractError(f"slice conv needs a (1, 1, k) kernel, got {spec.kernel}")
    return conv3d(x, spec, padding)


# -- instance normalization ----------------------------------------------------


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Standardize each (batch, channel) slab over its spatial extent."""
    if len(x.shape) != 5:
        raise ShapeError(f"instance_norm needs a 5-D tensor, got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ContractError(
            f"instance_norm: scale/shift must have shape ({channels},), "
            f"got {scale.shape} and {shift.shape}"
        )
    n_spatial = x.shape[2] * x.shape[3] * x.shape[4]
    if eps <= 0.0 and n_spatial == 1:
        raise NumericError("instance_norm over a single voxel needs eps > 0")

    mu = x.data.mean(axis=(2, 3, 4), keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gamma = scale.data.reshape(1, -1, 1, 1, 1)
    out = xhat * gamma + shift.data.reshape(1, -1, 1, 1, 1)

    def _bw(g):
        if shift.requires_grad:
            _accumulate(shift, g.sum(axis=(0, 2, 3, 4)))
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            g_mean = g.mean(axis=(2, 3, 4), keepdims=True)
            gx_mean = (g * xhat).mean(axis=(2, 3, 4), keepdims=True)
            _accumulate(x, gamma * inv_std * (g - g_mean - xhat * gx_mean))

    return _result(out, (x, scale, shift), _bw)


# -- trilinear upsampling -------------------------------------------------------


def _lerp_indices(n: int):
    """Half-pixel-centre source coordinates for doubling an axis of extent n."""
    coords = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    lo = np.clip(base, 0, n - 1)
    hi = np.clip(base + 1, 0, n - 1)
    return lo, hi, frac


def _lerp_axis(a: np.ndarray, axis: int) -> np.ndarray:
    lo, hi, frac = _lerp_indices(a.shape[axis])
    shape = [1] * a.ndim
    shape[axis] = frac.size
    f = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - f) + np.take(a, hi, axis=axis) * f


def _lerp_axis_adjoint(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    lo, hi, frac = _lerp_indices(n_in)
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((n_in,) + gm.shape[1:])
    fcol = frac.reshape((-1,) + (1,) * (gm.ndim - 1))
    np.add.at(out, lo, gm * (1.0 - fcol))
    np.add.at(out, hi, gm * fcol)
    return np.moveaxis(out, 0, axis)


def upsample_trilinear(x: Tensor) -> Tensor:
    """Double every spatial extent by trilinear interpolation.

    Uses the half-pixel-centre (align-corners false) convention with edge
    replication, applied separably along H, W, then D.
    """
    if len(x.shape) != 5:
        raise ShapeError(f"upsample_trilinear needs a 5-D tensor, got {x.shape}")
    in_extents = x.shape[2:]
    out = x.data
    for axis in (2, 3, 4):
        out = _lerp_axis(out, axis)

    def _bw(g):
        if x.requires_grad:
            dx = g
            for axis in (4, 3, 2):
                dx = _lerp_axis_adjoint(dx, axis, in_extents[axis - 2])
            _accumulate(x, dx)

    return _result(out, (x,), _bw)
