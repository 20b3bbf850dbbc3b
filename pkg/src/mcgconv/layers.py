"""Convolution layer families built from fixed filter banks.

Every layer synthesizes its dense kernels as a weighted sum of bank
rasters evaluated at frozen, pre-sampled transforms; only the mixing
weights train.  With the one-hot (Dirac) bank and identity transforms the
synthesis is exact and each family degenerates to a plain convolution.

Filter-wise layers (``wmcg_forward``) attach one input transform per
(out-channel, in-channel) pair and, by default, the identity transform to
every output channel, which reduces the relative transform to the input
transform alone.  Group layers (``gcnn_forward`` / ``mcg_forward``) carry
an explicit transform axis: the input axis indexes input transforms and
each output slice corresponds to one output transform, either on an even
grid or on Monte Carlo draws.

The kernel for an (output transform ``a``, input transform ``b``) pair is

    K_j(p) = bank_j(polar(inv(M(b - a)) @ M(-a) @ p / rho)) * 2**(-2 alpha_b)

i.e. the raster of the bank member at the relative transform, scaled by
its Jacobian, times the per-kernel scale coefficient of the output
transform.  With ``a = 0`` this is exactly ``rasterize(bank, j, b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine import (
    SampleRanges,
    TransformParams,
    sample_transform_array,
    transform_matrix,
)
from .basis import FilterBasis, dirac_basis
from .conv import as_tensor4, conv2d_backward, conv2d_forward, out_size


def subseed(seed: int, *tags: int) -> int:
    """Stable derived seed for an independent stream."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def init_weights(shape, fan_in: int, seed: int) -> np.ndarray:
    """Zero-mean draws with variance 2 / fan_in (scaled standard normals)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def identity_transform_array(*lead_shape: int) -> np.ndarray:
    return np.zeros(tuple(lead_shape) + (3,), dtype=np.float64)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def pair_raster_stack(bank: FilterBasis, a_vec, b_vec) -> np.ndarray:
    """(K, k, k) rasters for one (output, input) transform pair."""
    a = np.asarray(a_vec, dtype=np.float64)
    b = np.asarray(b_vec, dtype=np.float64)
    rel = TransformParams.from_array(b - a)
    m_neg_a = transform_matrix(TransformParams.from_array(-a))
    warp = np.linalg.inv(transform_matrix(rel)) @ m_neg_a
    jac = 2.0 ** (-2.0 * float(b[0]))
    return np.stack(
        [bank.raster_with_matrix(j, warp) * jac for j in range(bank.num_basis)]
    )


@dataclass
class LayerParams:
    """Trainable mixing weights plus frozen transforms and cached rasters.

    ``weights`` has shape (c_out, c_in, K); ``in_transforms`` (c_out, c_in, 3)
    and ``out_transforms`` (c_out, 3) are read-only once built, as is the
    raster cache (c_out, c_in, K, k, k).
    """

    bank: FilterBasis
    weights: np.ndarray
    in_transforms: np.ndarray
    out_transforms: np.ndarray
    rasters: np.ndarray
    stride: int = 1
    padding: int = 0
    pad_mode: str = "zero"
    groups: int = 1

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.bank.kernel_size


def _group_mask(c_out: int, c_in: int, groups: int) -> np.ndarray:
    if groups < 1 or c_out % groups or c_in % groups:
        raise ValueError(
            f"groups={groups} must divide both c_out={c_out} and c_in={c_in}"
        )
    mask = np.zeros((c_out, c_in))
    go, gi = c_out // groups, c_in // groups
    for g in range(groups):
        mask[g * go:(g + 1) * go, g * gi:(g + 1) * gi] = 1.0
    return mask


def make_layer_params(
    bank: FilterBasis,
    c_in: int,
    c_out: int,
    *,
    ranges: SampleRanges | None = None,
    seed: int = 0,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zero",
    groups: int = 1,
    sample_out: bool = False,
    weights: np.ndarray | None = None,
) -> LayerParams:
    """Sample frozen transforms, initialize weights, cache the raster stack.

    Derived seed streams: 0 weights, 1 input transforms, 2 output
    transforms.  ``ranges=None`` pins every transform to the identity.
    """
    kk = bank.num_basis
    if weights is None:
        fan_in = (c_in // groups) * kk
        weights = init_weights((c_out, c_in, kk), fan_in, subseed(seed, 0))
    else:
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (c_out, c_in, kk):
            raise ValueError(
                f"weights shape {weights.shape} != {(c_out, c_in, kk)}"
            )
    if ranges is None:
        in_tr = identity_transform_array(c_out, c_in)
    else:
        in_tr = sample_transform_array(
            ranges, c_out * c_in, subseed(seed, 1)
        ).reshape(c_out, c_in, 3)
    if sample_out:
        if ranges is None:
            raise ValueError("sample_out requires sampling ranges")
        out_tr = sample_transform_array(ranges, c_out, subseed(seed, 2))
    else:
        out_tr = identity_transform_array(c_out)

    mask = _group_mask(c_out, c_in, groups)
    rasters = np.empty((c_out, c_in, kk, bank.kernel_size, bank.kernel_size))
    for co in range(c_out):
        for ci in range(c_in):
            if mask[co, ci] == 0.0:
                rasters[co, ci] = 0.0
            else:
                rasters[co, ci] = pair_raster_stack(bank, out_tr[co], in_tr[co, ci])
    return LayerParams(
        bank=bank,
        weights=weights,
        in_transforms=_freeze(in_tr),
        out_transforms=_freeze(out_tr),
        rasters=_freeze(rasters),
        stride=stride,
        padding=padding,
        pad_mode=pad_mode,
        groups=groups,
    )


def make_standard_conv(c_in: int, c_out: int, kernel_size: int, **kw) -> LayerParams:
    """Plain convolution: one-hot bank, identity transforms."""
    kw.pop("ranges", None)
    return make_layer_params(dirac_basis(kernel_size), c_in, c_out, ranges=None, **kw)


def synthesize_kernels(params: LayerParams) -> np.ndarray:
    """Dense (c_out, c_in, k, k) kernels from weights and cached rasters."""
    return np.einsum("oik,oikyx->oiyx", params.weights, params.rasters)


def wmcg_forward(x, params: LayerParams) -> np.ndarray:
    """Filter-wise layer forward: plain convolution with synthesized kernels."""
    return conv2d_forward(
        x, synthesize_kernels(params), params.stride, params.padding, params.pad_mode
    )


def wmcg_backward(x, params: LayerParams, grad_out):
    """Gradients w.r.t. input and mixing weights (transforms are frozen)."""
    kernels = synthesize_kernels(params)
    gx, gk = conv2d_backward(
        grad_out, x, kernels, params.stride, params.padding, params.pad_mode
    )
    gw = np.einsum("oiyx,oikyx->oik", gk, params.rasters)
    return gx, gw


# -- group-axis layers -------------------------------------------------------


def transform_grid(ranges: SampleRanges, counts) -> list[TransformParams]:
    """Evenly spaced transform grid (inclusive endpoints) over the ranges.

    ``counts`` gives the number of points per axis (alpha, theta, shear
    angle); axes with count 1 sit at the range midpoint.  The shear axis is
    spaced evenly in angle and mapped through tan, like the sampler.
    """
    ca, ct, cs = counts

    def axis(lo, hi, count):
        if count < 1:
            raise ValueError("grid counts must be >= 1")
        if count == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(lo, hi, count)

    alphas = axis(ranges.alpha_lo, ranges.alpha_hi, ca)
    thetas = axis(-ranges.theta_max, ranges.theta_max, ct)
    shears = np.tan(axis(-ranges.shear_max, ranges.shear_max, cs))
    grid = []
    for a in alphas:
        for t in thetas:
            for s in shears:
                grid.append(TransformParams(float(a), float(t), float(s)))
    return grid


def _as_group_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 5:
        raise ValueError(f"group tensor must be (n, c, t, h, w), got {arr.shape}")
    if arr.shape[2] < 1:
        raise ValueError("transform axis must have length >= 1")
    return arr


def _group_pair_stacks(params: LayerParams, out_list, in_list) -> np.ndarray:
    k = params.kernel_size
    kk = params.bank.num_basis
    stacks = np.empty((len(out_list), len(in_list), kk, k, k))
    for i, a in enumerate(out_list):
        for j, b in enumerate(in_list):
            stacks[i, j] = pair_raster_stack(params.bank, a.as_array(), b.as_array())
    return stacks


def _group_forward(x, params: LayerParams, in_list, out_list):
    x = _as_group_tensor(x)
    t_in = x.shape[2]
    if t_in == 1:
        # lifting path: a plain image enters at the identity transform
        in_list = [TransformParams()]
    elif t_in != len(in_list):
        raise ValueError(
            f"input transform axis {t_in} does not match {len(in_list)} transforms"
        )
    if not out_list:
        raise ValueError("need at least one output transform")
    stacks = _group_pair_stacks(params, out_list, in_list)
    n = x.shape[0]
    ho = out_size(x.shape[3], params.kernel_size, params.stride, params.padding)
    wo = out_size(x.shape[4], params.kernel_size, params.stride, params.padding)
    out = np.zeros((n, params.c_out, len(out_list), ho, wo))
    for i in range(len(out_list)):
        for j in range(len(in_list)):
            kern = np.einsum("oik,kyx->oiyx", params.weights, stacks[i, j])
            out[:, :, i] += conv2d_forward(
                x[:, :, j], kern, params.stride, params.padding, params.pad_mode
            )
    return out, stacks


def _group_backward(x, params: LayerParams, in_list, out_list, stacks, grad_out):
    x = _as_group_tensor(x)
    g = np.asarray(grad_out, dtype=np.float64)
    gx = np.zeros_like(x)
    gw = np.zeros_like(params.weights)
    n_in = x.shape[2]
    for i in range(len(out_list)):
        for j in range(n_in):
            kern = np.einsum("oik,kyx->oiyx", params.weights, stacks[i, j])
            gxi, gk = conv2d_backward(
                g[:, :, i], x[:, :, j], kern,
                params.stride, params.padding, params.pad_mode,
            )
            gx[:, :, j] += gxi
            gw += np.einsum("oiyx,kyx->oik", gk, stacks[i, j])
    return gx, gw


def gcnn_forward(x, params: LayerParams, grid: list[TransformParams]) -> np.ndarray:
    """Grid-sampled group layer: one output slice per grid transform.

    The input transform axis must match the grid (or be 1, which lifts a
    plain image from the identity transform).
    """
    if not grid:
        raise ValueError("empty transform grid")
    out, _ = _group_forward(x, params, list(grid), list(grid))
    return out


def mcg_forward(
    x,
    params: LayerParams,
    samples: list[TransformParams],
    out_samples: list[TransformParams] | None = None,
) -> np.ndarray:
    """Monte-Carlo group layer: transforms are i.i.d. draws.

    ``samples`` indexes the input transform axis; output transforms default
    to the same draws but are normally drawn independently by the caller.
    """
    if not samples:
        raise ValueError("empty transform sample list")
    outs = list(out_samples) if out_samples is not None else list(samples)
    out, _ = _group_forward(x, params, list(samples), outs)
    return out


# -- layer objects for model assembly ----------------------------------------


class ConvLayer:
    """Trainable filter-bank convolution (covers plain conv via the one-hot bank)."""

    def __init__(self, params: LayerParams, name: str = "conv"):
        self.params = params
        self.name = name

    def forward(self, x):
        x = as_tensor4(x)
        return wmcg_forward(x, self.params), x

    def backward(self, cache, grad_out):
        gx, gw = wmcg_backward(cache, self.params, grad_out)
        return gx, {"weights": gw}

    def trainable(self):
        return {"weights": self.params.weights}

    def state_arrays(self):
        return {
            "weights": self.params.weights,
            "in_transforms": self.params.in_transforms,
            "out_transforms": self.params.out_transforms,
        }

    def load_state(self, arrays):
        self.params.weights = np.array(arrays["weights"], dtype=np.float64)


class GroupConvLayer:
    """Group-axis convolution with fixed transform lists (grid or MC draws)."""

    def __init__(self, params: LayerParams, in_transforms, out_transforms,
                 name: str = "gconv"):
        self.params = params
        self.in_transforms = list(in_transforms)
        self.out_transforms = list(out_transforms)
        self.name = name

    def forward(self, x):
        out, stacks = _group_forward(
            x, self.params, self.in_transforms, self.out_transforms
        )
        return out, (np.asarray(x, dtype=np.float64), stacks)

    def backward(self, cache, grad_out):
        x, stacks = cache
        gx, gw = _group_backward(
            x, self.params, self.in_transforms, self.out_transforms,
            stacks, grad_out,
        )
        return gx, {"weights": gw}

    def trainable(self):
        return {"weights": self.params.weights}

    def state_arrays(self):
        return {"weights": self.params.weights}

    def load_state(self, arrays):
        self.params.weights = np.array(arrays["weights"], dtype=np.float64)


class LiftLayer:
    """Insert a singleton transform axis: (n, c, h, w) -> (n, c, 1, h, w)."""

    def __init__(self, name: str = "lift"):
        self.name = name

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)[:, :, None], None

    def backward(self, cache, grad_out):
        return np.asarray(grad_out)[:, :, 0], {}

    def trainable(self):
        return {}

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        pass


class TransformMeanLayer:
    """Average over the transform axis: (n, c, t, h, w) -> (n, c, h, w)."""

    def __init__(self, name: str = "tmean"):
        self.name = name

    def forward(self, x):
        x = _as_group_tensor(x)
        return x.mean(axis=2), x.shape[2]

    def backward(self, cache, grad_out):
        t = cache
        g = np.asarray(grad_out, dtype=np.float64) / t
        return np.repeat(g[:, :, None], t, axis=2), {}

    def trainable(self):
        return {}

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        pass


class ReluLayer:
    def __init__(self, name: str = "relu"):
        self.name = name

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        mask = x > 0.0
        return x * mask, mask

    def backward(self, cache, grad_out):
        return np.asarray(grad_out) * cache, {}

    def trainable(self):
        return {}

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        pass


class AvgPoolLayer:
    """2x2 average pooling, stride 2; spatial dims must be even."""

    def __init__(self, name: str = "pool"):
        self.name = name

    def forward(self, x):
        x = as_tensor4(x)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, cache, grad_out):
        n, c, h, w = cache
        g = np.asarray(grad_out, dtype=np.float64) / 4.0
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return gx, {}

    def trainable(self):
        return {}

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        pass


class GlobalAvgPoolLayer:
    """(n, c, h, w) -> (n, c)."""

    def __init__(self, name: str = "gap"):
        self.name = name

    def forward(self, x):
        x = as_tensor4(x)
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, grad_out):
        n, c, h, w = cache
        g = np.asarray(grad_out, dtype=np.float64) / (h * w)
        return np.broadcast_to(g[:, :, None, None], cache).copy(), {}

    def trainable(self):
        return {}

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        pass


class DenseLayer:
    """Fully connected (n, d) -> (n, out); no bias."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0, name: str = "dense"):
        self.name = name
        self.weights = init_weights((d_out, d_in), d_in, subseed(seed, 0))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.weights.T, x

    def backward(self, cache, grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        return g @ self.weights, {"weights": g.T @ cache}

    def trainable(self):
        return {"weights": self.weights}

    def state_arrays(self):
        return {"weights": self.weights}

    def load_state(self, arrays):
        self.weights = np.array(arrays["weights"], dtype=np.float64)


@dataclass
class BottleneckBlock:
    """Pointwise reduce -> (grouped) bank conv -> pointwise expand.

    ``activation`` is a hook between stages (``"identity"`` or ``"relu"``);
    the residual sum is applied only when shapes already match.
    """

    pre: LayerParams
    core: LayerParams
    post: LayerParams
    residual: bool = True
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown activation hook {self.activation!r}")
        if self.pre.c_out != self.core.c_in or self.core.c_out != self.post.c_in:
            raise ValueError(
                "channel chain broken: "
                f"{self.pre.c_out}->{self.core.c_in}, {self.core.c_out}->{self.post.c_in}"
            )


def make_bottleneck(
    bank: FilterBasis,
    channels: int,
    mid_channels: int,
    *,
    ranges: SampleRanges | None = None,
    seed: int = 0,
    padding: int | None = None,
    pad_mode: str = "zero",
    groups: int = 1,
    residual: bool = True,
    activation: str = "relu",
    sample_out: bool = False,
) -> BottleneckBlock:
    if padding is None:
        padding = (bank.kernel_size - 1) // 2
    pre = make_layer_params(
        dirac_basis(1), channels, mid_channels, seed=subseed(seed, 10)
    )
    core = make_layer_params(
        bank, mid_channels, mid_channels,
        ranges=ranges, seed=subseed(seed, 11), padding=padding,
        pad_mode=pad_mode, groups=groups, sample_out=sample_out,
    )
    post = make_layer_params(
        dirac_basis(1), mid_channels, channels, seed=subseed(seed, 12)
    )
    return BottleneckBlock(pre, core, post, residual=residual, activation=activation)


def _act_forward(kind, x):
    if kind == "relu":
        mask = x > 0.0
        return x * mask, mask
    return x, None


def _act_backward(kind, cache, g):
    if kind == "relu":
        return g * cache
    return g


def bottleneck_forward(x, block: BottleneckBlock) -> np.ndarray:
    out, _ = _bottleneck_forward_cached(x, block)
    return out


def _bottleneck_forward_cached(x, block: BottleneckBlock):
    x = as_tensor4(x)
    y1 = wmcg_forward(x, block.pre)
    a1, m1 = _act_forward(block.activation, y1)
    y2 = wmcg_forward(a1, block.core)
    a2, m2 = _act_forward(block.activation, y2)
    y3 = wmcg_forward(a2, block.post)
    if block.residual:
        if y3.shape != x.shape:
            raise ValueError(
                f"residual shapes differ: {y3.shape} vs {x.shape}"
            )
        y3 = y3 + x
    return y3, (x, a1, m1, a2, m2)


def _bottleneck_backward(block: BottleneckBlock, cache, grad_out):
    x, a1, m1, a2, m2 = cache
    g = np.asarray(grad_out, dtype=np.float64)
    g3, gw_post = wmcg_backward(a2, block.post, g)
    g3 = _act_backward(block.activation, m2, g3)
    g2, gw_core = wmcg_backward(a1, block.core, g3)
    g2 = _act_backward(block.activation, m1, g2)
    g1, gw_pre = wmcg_backward(x, block.pre, g2)
    if block.residual:
        g1 = g1 + g
    return g1, {"pre.weights": gw_pre, "core.weights": gw_core,
                "post.weights": gw_post}


class BottleneckLayer:
    def __init__(self, block: BottleneckBlock, name: str = "bottleneck"):
        self.block = block
        self.name = name

    def forward(self, x):
        return _bottleneck_forward_cached(x, self.block)

    def backward(self, cache, grad_out):
        return _bottleneck_backward(self.block, cache, grad_out)

    def trainable(self):
        return {
            "pre.weights": self.block.pre.weights,
            "core.weights": self.block.core.weights,
            "post.weights": self.block.post.weights,
        }

    def state_arrays(self):
        out = {}
        for tag, p in (("pre", self.block.pre), ("core", self.block.core),
                       ("post", self.block.post)):
            out[f"{tag}.weights"] = p.weights
            out[f"{tag}.in_transforms"] = p.in_transforms
            out[f"{tag}.out_transforms"] = p.out_transforms
        return out

    def load_state(self, arrays):
        self.block.pre.weights = np.array(arrays["pre.weights"], dtype=np.float64)
        self.block.core.weights = np.array(arrays["core.weights"], dtype=np.float64)
        self.block.post.weights = np.array(arrays["post.weights"], dtype=np.float64)


class Sequential:
    """Minimal layer stack with explicit forward caches and named parameters."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique, got {names}")

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def predict(self, x):
        return self.forward(x)[0]

    def backward(self, caches, grad_out):
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, layer_grads = layer.backward(cache, g)
            for key, val in layer_grads.items():
                grads[f"{layer.name}.{key}"] = val
        return g, grads

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for key, arr in layer.trainable().items():
                out[f"{layer.name}.{key}"] = arr
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for key, arr in layer.state_arrays().items():
                out[f"{layer.name}.{key}"] = arr
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        for layer in self.layers:
            prefix = f"{layer.name}."
            sub = {
                key[len(prefix):]: val
                for key, val in arrays.items()
                if key.startswith(prefix)
            }
            if sub:
                layer.load_state(sub)
