"""Invertible layers and their composition into a probability flow.

Every layer maps a batched (B, C, H, W) tensor to a same-sized tensor and
reports the per-sample log |det Jacobian| of the direction it just applied,
so stack_forward and stack_inverse always satisfy ld_fwd + ld_inv = 0 at
corresponding points.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, SingularLayerError, TzkError
from .tensor import Tensor, factorize, logabsdet_lu, solve_lu


def orthogonal_init(n: int, rng: np.random.Generator, dtype) -> np.ndarray:
    """Random orthogonal matrix: |det| = 1, so the layer starts volume-preserving."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q.astype(dtype)


def _check_invertible(factorization, what: str) -> None:
    # Scale-invariant near-singularity test on the LU pivots; a literal
    # |det| threshold misfires on benign uniform scaling in high dimension.
    d = np.abs(np.diag(factorization[0]))
    if not np.all(np.isfinite(d)) or d.min() == 0.0 or d.min() / d.max() < 1e-12:
        raise SingularLayerError(f"{what}: weight matrix is numerically singular")


def _zero_ld(x: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=x.dtype))


class ChannelConv:
    """Shared invertible C x C matrix applied at every spatial position."""

    kind = "channel_conv"

    def __init__(self, in_shape, rng, dtype=np.float32, name="channel_conv"):
        self.in_shape = self.out_shape = tuple(in_shape)
        c = in_shape[0]
        self.weight = Tensor(orthogonal_init(c, rng, dtype), requires_grad=True, name=f"{name}/W")
        self.name = name

    def named_params(self):
        return [(self.weight.name, self.weight)]

    def forward(self, x: Tensor):
        b = x.shape[0]
        c, h, w = self.in_shape
        fac = factorize(self.weight.data)
        _check_invertible(fac, self.name)
        cols = x.permute(0, 2, 3, 1).reshape(-1, c)
        y = cols.matmul(self.weight.permute(1, 0))
        y = y.reshape(b, h, w, c).permute(0, 3, 1, 2)
        ld = logabsdet_lu(self.weight, fac) * float(h * w)
        return y, ld

    def inverse(self, y: Tensor):
        b = y.shape[0]
        c, h, w = self.in_shape
        fac = factorize(self.weight.data)
        _check_invertible(fac, self.name)
        cols = y.permute(1, 0, 2, 3).reshape(c, -1)
        x = solve_lu(self.weight, cols, fac)
        x = x.reshape(c, b, h, w).permute(1, 0, 2, 3)
        ld = logabsdet_lu(self.weight, fac) * float(-h * w)
        return x, ld


class TiledConv:
    """One shared invertible matrix applied to each non-overlapping tile.

    A tile of t x t spatial cells with C channels is flattened channel-major
    (channel, then row offset, then column offset) to a vector of length
    C*t*t; the log-determinant accumulates once per tile.
    """

    kind = "tiled_conv"

    def __init__(self, in_shape, tile, rng, dtype=np.float32, name="tiled_conv"):
        c, h, w = in_shape
        if h % tile or w % tile:
            raise ContractViolation(f"tile {tile} does not divide spatial extents {(h, w)}")
        self.in_shape = self.out_shape = tuple(in_shape)
        self.tile = tile
        self.n = c * tile * tile
        self.weight = Tensor(orthogonal_init(self.n, rng, dtype), requires_grad=True, name=f"{name}/W")
        self.name = name

    def named_params(self):
        return [(self.weight.name, self.weight)]

    def _to_patches(self, x: Tensor, b: int):
        c, h, w = self.in_shape
        t = self.tile
        nh, nw = h // t, w // t
        p = x.reshape(b, c, nh, t, nw, t).permute(0, 2, 4, 1, 3, 5)
        return p.reshape(b * nh * nw, self.n), nh, nw

    def _from_patches(self, p: Tensor, b: int):
        c, h, w = self.in_shape
        t = self.tile
        nh, nw = h // t, w // t
        x = p.reshape(b, nh, nw, c, t, t).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, h, w)

    def forward(self, x: Tensor):
        b = x.shape[0]
        fac = factorize(self.weight.data)
        _check_invertible(fac, self.name)
        patches, nh, nw = self._to_patches(x, b)
        y = patches.matmul(self.weight.permute(1, 0))
        ld = logabsdet_lu(self.weight, fac) * float(nh * nw)
        return self._from_patches(y, b), ld

    def inverse(self, y: Tensor):
        b = y.shape[0]
        fac = factorize(self.weight.data)
        _check_invertible(fac, self.name)
        patches, nh, nw = self._to_patches(y, b)
        x = solve_lu(self.weight, patches.permute(1, 0), fac).permute(1, 0)
        ld = logabsdet_lu(self.weight, fac) * float(-nh * nw)
        return self._from_patches(x, b), ld


class ElementwiseAffine:
    """y = exp(a) * x + b with per-element parameters; always invertible."""

    kind = "elementwise_affine"

    def __init__(self, in_shape, dtype=np.float32, name="affine"):
        self.in_shape = self.out_shape = tuple(in_shape)
        self.log_scale = Tensor(np.zeros(in_shape, dtype=dtype), requires_grad=True, name=f"{name}/log_scale")
        self.bias = Tensor(np.zeros(in_shape, dtype=dtype), requires_grad=True, name=f"{name}/bias")
        self.name = name

    def named_params(self):
        return [(self.log_scale.name, self.log_scale), (self.bias.name, self.bias)]

    def forward(self, x: Tensor):
        y = x * self.log_scale.exp() + self.bias
        return y, self.log_scale.sum()

    def inverse(self, y: Tensor):
        x = (y - self.bias) * (-self.log_scale).exp()
        return x, -self.log_scale.sum()


class SymLog:
    """Invertible activation y = log(|x| + 1) * sign(x); smooth at 0."""

    kind = "symlog"

    def __init__(self, in_shape):
        self.in_shape = self.out_shape = tuple(in_shape)

    def named_params(self):
        return []

    def forward(self, x: Tensor):
        compressed = (x.abs() + 1.0).log()
        y = compressed * x.sign()
        axes = tuple(range(1, x.ndim))
        return y, -compressed.sum(axis=axes)

    def inverse(self, y: Tensor):
        mag = y.abs()
        x = (mag.exp() - 1.0) * y.sign()
        axes = tuple(range(1, y.ndim))
        return x, mag.sum(axis=axes)


class Squeeze:
    """Space-to-depth: each 2x2 spatial block becomes 4 channels.

    Output channel index is c*4 + 2*row_offset + col_offset (channel-major
    block scan); a pure permutation, so the log-determinant is 0.
    """

    kind = "squeeze"

    def __init__(self, in_shape, factor=2):
        c, h, w = in_shape
        if h % factor or w % factor:
            raise ContractViolation(f"squeeze factor {factor} does not divide extents {(h, w)}")
        self.factor = factor
        self.in_shape = tuple(in_shape)
        self.out_shape = (c * factor * factor, h // factor, w // factor)

    def named_params(self):
        return []

    def forward(self, x: Tensor):
        b = x.shape[0]
        c, h, w = self.in_shape
        f = self.factor
        y = x.reshape(b, c, h // f, f, w // f, f).permute(0, 1, 3, 5, 2, 4)
        return y.reshape(b, c * f * f, h // f, w // f), _zero_ld(x)

    def inverse(self, y: Tensor):
        b = y.shape[0]
        c, h, w = self.in_shape
        f = self.factor
        x = y.reshape(b, c, f, f, h // f, w // f).permute(0, 1, 4, 2, 5, 3)
        return x.reshape(b, c, h, w), _zero_ld(y)


class Unsqueeze:
    """Depth-to-space; the exact inverse permutation of Squeeze."""

    kind = "unsqueeze"

    def __init__(self, in_shape, factor=2):
        c, h, w = in_shape
        if c % (factor * factor):
            raise ContractViolation(f"unsqueeze factor {factor} does not divide channel extent {c}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (c // (factor * factor), h * factor, w * factor)
        self._mirror = Squeeze(self.out_shape, factor)

    def named_params(self):
        return []

    def forward(self, x: Tensor):
        return self._mirror.inverse(x)

    def inverse(self, y: Tensor):
        return self._mirror.forward(y)


class Flip:
    """Mount an invertible layer in the opposite direction.

    Used for activations in the shared flow: the data-to-latent pass (the
    training hot path) must apply the log-compression, otherwise inverting a
    deep stack composes exponentials and overflows at initialization.
    """

    def __init__(self, inner):
        self.inner = inner
        self.kind = inner.kind
        self.in_shape = inner.out_shape
        self.out_shape = inner.in_shape

    def named_params(self):
        return self.inner.named_params()

    def forward(self, x: Tensor):
        return self.inner.inverse(x)

    def inverse(self, y: Tensor):
        return self.inner.forward(y)


class FlowStack:
    """Ordered invertible layers with summed log-determinants."""

    def __init__(self, layers):
        self.layers = list(layers)
        for i in range(1, len(self.layers)):
            if self.layers[i].in_shape != self.layers[i - 1].out_shape:
                raise ContractViolation(
                    f"layer {i} input shape {self.layers[i].in_shape} does not chain "
                    f"from {self.layers[i - 1].out_shape}")
        self.in_shape = self.layers[0].in_shape if self.layers else None
        self.out_shape = self.layers[-1].out_shape if self.layers else None

    def __len__(self):
        return len(self.layers)

    def named_params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.named_params())
        return out

    def _shape_check(self, x: Tensor, shape, direction):
        if shape is not None and tuple(x.shape[1:]) != tuple(shape):
            raise ContractViolation(f"{direction} input shape {tuple(x.shape[1:])} != stack shape {tuple(shape)}")

    def forward(self, z: Tensor):
        self._shape_check(z, self.in_shape, "stack_forward")
        total = Tensor(np.zeros((), dtype=z.dtype))
        x = z
        for i, layer in enumerate(self.layers):
            try:
                x, ld = layer.forward(x)
            except TzkError as e:
                raise type(e)(f"layer {i} ({layer.kind}): {e}") from e
            total = total + ld
        return x, total

    def inverse(self, t: Tensor):
        self._shape_check(t, self.out_shape, "stack_inverse")
        total = Tensor(np.zeros((), dtype=t.dtype))
        x = t
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            try:
                x, ld = layer.inverse(x)
            except TzkError as e:
                raise type(e)(f"layer {i} ({layer.kind}): {e}") from e
            total = total + ld
        return x, total


def image_flow(in_shape, steps, tile, rng, dtype=np.float32, prefix="flow") -> FlowStack:
    """Alternating flow steps over an image.

    Even steps work at squeezed resolution with a channel convolution;
    odd steps apply a tiled convolution at full resolution so the dense
    matrix stays at tile size instead of the whole image.
    """
    c, h, w = in_shape
    layers = []
    for s in range(steps):
        p = f"{prefix}/step{s}"
        if s % 2 == 0:
            sq = Squeeze(in_shape)
            layers.append(sq)
            cs = sq.out_shape
            layers.append(ChannelConv(cs, rng, dtype, name=f"{p}/channel_conv"))
            layers.append(ElementwiseAffine(cs, dtype, name=f"{p}/affine"))
            layers.append(Flip(SymLog(cs)))
            layers.append(Unsqueeze(cs))
        else:
            layers.append(TiledConv(in_shape, tile, rng, dtype, name=f"{p}/tiled_conv"))
            layers.append(ElementwiseAffine(in_shape, dtype, name=f"{p}/affine"))
            layers.append(Flip(SymLog(in_shape)))
    return FlowStack(layers)


def vector_flow(dim, steps, rng, dtype=np.float32, prefix="flow") -> FlowStack:
    """Dense flow over a flat vector, shaped as (dim, 1, 1) images."""
    shape = (dim, 1, 1)
    layers = []
    for s in range(steps):
        p = f"{prefix}/step{s}"
        layers.append(ChannelConv(shape, rng, dtype, name=f"{p}/channel_conv"))
        layers.append(ElementwiseAffine(shape, dtype, name=f"{p}/affine"))
        layers.append(Flip(SymLog(shape)))
    return FlowStack(layers)


def elementwise_flow(in_shape, layers_count, dtype=np.float32, prefix="private") -> FlowStack:
    """Shape-preserving affine/symlog pairs; used for per-knowledge private flows."""
    layers = []
    for i in range(layers_count):
        if i % 2 == 0:
            layers.append(ElementwiseAffine(in_shape, dtype, name=f"{prefix}/affine{i // 2}"))
        else:
            layers.append(SymLog(in_shape))
    return FlowStack(layers)
