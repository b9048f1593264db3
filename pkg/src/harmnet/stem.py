"""Steerable convolution stem over rotation-order streams.

Features are carried as one complex map per rotation order m in {-1, 0, +1}.
Rotating the input image by alpha rotates each stream spatially and shifts
its phase by m*alpha.  Every layer here preserves that law: convolution
kernels are synthesized circular harmonics R(r)e^{i(m theta + beta)}, and all
pointwise nonlinearities act on magnitudes only, leaving phases untouched.

Kernel grid convention: kernel[y][x] with offsets (dy, dx) from the center
pixel, theta = atan2(dy, dx), r = hypot(dy, dx).  Under numpy's rot90 a
synthesized order-m kernel picks up exactly the factor e^{i m pi/2}.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import ctensor as ct
from .constants import EPS
from .errors import ConfigError, ShapeError

ORDERS = (-1, 0, 1)


class StreamedFeatureMap:
    """Ordered map rotation order -> complex feature tensor.

    Streams are stored batched as (B, C, H, W); the per-sample unit is a
    (C, H, W) map.  All present streams share channel count and spatial size.
    """

    def __init__(self, streams: dict):
        orders = tuple(sorted(streams))
        shapes = {streams[m].shape for m in orders}
        if len(shapes) != 1:
            raise ShapeError(f"stream shapes differ: {sorted(shapes)}")
        for m in orders:
            if m not in ORDERS:
                raise ConfigError(f"rotation order {m} outside {ORDERS}")
        self.orders = orders
        self.streams = {m: streams[m] for m in orders}

    @property
    def shape(self):
        return self.streams[self.orders[0]].shape

    def map(self, fn) -> "StreamedFeatureMap":
        return StreamedFeatureMap({m: fn(s) for m, s in self.streams.items()})


def lift_image(img: ct.CTensor) -> StreamedFeatureMap:
    """Wrap a real image batch (B, C, H, W) as a pure order-0 stream."""
    return StreamedFeatureMap({0: ct.as_complex(img)})


# ---------------------------------------------------------------------------
# harmonic kernel synthesis
# ---------------------------------------------------------------------------

def n_radii(k: int) -> int:
    return k // 2 + 1


@lru_cache(maxsize=None)
def _grid_geometry(k: int):
    c = k // 2
    dy, dx = np.mgrid[-c:c + 1, -c:c + 1].astype(np.float64)
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    return r.ravel(), theta.ravel()


@lru_cache(maxsize=None)
def _radial_basis(k: int) -> np.ndarray:
    """(k*k, n_radii) linear-interpolation weights; zero beyond radius k//2."""
    r, _ = _grid_geometry(k)
    nr = n_radii(k)
    a = np.zeros((k * k, nr))
    for i, ri in enumerate(r):
        if ri > nr - 1:
            continue
        f = int(np.floor(ri))
        t = ri - f
        a[i, f] += 1.0 - t
        if t > 0:
            a[i, f + 1] += t
    return a


@lru_cache(maxsize=None)
def _angular_map(k: int, m: int) -> np.ndarray:
    """(k*k,) complex e^{i m theta}; center forced to exactly 0 for m != 0."""
    r, theta = _grid_geometry(k)
    e = np.exp(1j * m * theta)
    if m != 0:
        e[r == 0] = 0.0
    return e


def synthesize_kernel(profile, beta, m: int, k: int) -> ct.CTensor:
    """Single k x k harmonic kernel R(r)e^{i(m theta + beta)}.

    `profile` holds values of R at integer radii 0..k//2 (linear interpolation
    in between, zero beyond); `beta` is a real scalar phase offset.
    """
    profile = profile if isinstance(profile, ct.CTensor) else ct.CTensor(np.asarray(profile, dtype=np.float64))
    beta = beta if isinstance(beta, ct.CTensor) else ct.CTensor(np.asarray(beta, dtype=np.float64))
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if profile.shape != (n_radii(k),):
        raise ConfigError(f"radial profile must have length {n_radii(k)} for k={k}")
    kern = synthesize_block(ct.reshape(profile, (1, 1, n_radii(k))), ct.reshape(beta, (1, 1)), m, k)
    return ct.reshape(kern, (k, k))


def synthesize_block(radial: ct.CTensor, phase: ct.CTensor, m: int, k: int) -> ct.CTensor:
    """Batched synthesis: radial (Co,Ci,nr), phase (Co,Ci) -> (Co,Ci,k,k)."""
    co, ci, nr = radial.shape
    basis = ct.CTensor(np.ascontiguousarray(_radial_basis(k).T))      # (nr, k2)
    ring = ct.complex_matmul(radial, basis)                           # (Co,Ci,k2) real
    ang = ct.mul(ring, ct.CTensor(_angular_map(k, m)))                # complex
    unit = ct.reshape(ct.polar_unit(phase), (co, ci, 1))
    return ct.reshape(ct.mul(ang, unit), (co, ci, k, k))


# ---------------------------------------------------------------------------
# filter bank and harmonic convolution
# ---------------------------------------------------------------------------

ALL_FILTER_ORDERS = (-2, -1, 0, 1, 2)


class HarmonicFilterBank:
    """Learnable radial profiles + phase offsets per (m_in, m_filter) pair.

    Connections are derived from the (in_orders, out_orders) sets: each pair
    gets the filter order m_filter = m_out - m_in, so every output stays in
    the configured order range by construction.  The first conv applied to a
    raw image (in_orders == (0,)) is the lifting convolution.  Restricting
    filter_orders drops connections; the corresponding kernel blocks are
    structural zeros (no parameters), as used by the 1x1 residual projection
    which keeps only m_filter = 0.
    """

    def __init__(self, name: str, in_orders, out_orders, c_in: int, c_out: int,
                 kernel_size: int, rng: np.random.Generator,
                 filter_orders=ALL_FILTER_ORDERS):
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        for m in tuple(in_orders) + tuple(out_orders):
            if m not in ORDERS:
                raise ConfigError(f"rotation order {m} outside {ORDERS}")
        self.name = name
        self.in_orders = tuple(in_orders)
        self.out_orders = tuple(out_orders)
        self.c_in = c_in
        self.c_out = c_out
        self.k = kernel_size
        self.filter_orders = tuple(filter_orders)
        self.connections = [(m_in, m_out - m_in) for m_out in self.out_orders
                            for m_in in self.in_orders
                            if m_out - m_in in self.filter_orders]
        if not self.connections:
            raise ConfigError(f"filter bank {name} has no connections")
        nr = n_radii(kernel_size)
        taps = int(np.count_nonzero(_radial_basis(kernel_size).sum(axis=1)))
        scale = np.sqrt(2.0 / (c_in * len(self.in_orders) * taps * nr))
        self.params = {}
        for m_in, m_f in self.connections:
            base = f"{name}.f{m_in:+d}{m_f:+d}"
            self.params[f"{base}.radial"] = rng.uniform(-scale, scale, size=(c_out, c_in, nr))
            self.params[f"{base}.phase"] = rng.uniform(-np.pi, np.pi, size=(c_out, c_in))

    def kernel_block(self, leaves: dict) -> ct.CTensor:
        """Assemble the block-structured kernel for one fused conv2d call."""
        first = self.connections[0]
        ref = leaves[f"{self.name}.f{first[0]:+d}{first[1]:+d}.radial"]
        zdt = np.result_type(ref.data.dtype, np.complex64)
        rows = []
        for m_out in self.out_orders:
            blocks = []
            for m_in in self.in_orders:
                m_f = m_out - m_in
                if m_f in self.filter_orders:
                    base = f"{self.name}.f{m_in:+d}{m_f:+d}"
                    blocks.append(synthesize_block(leaves[f"{base}.radial"],
                                                   leaves[f"{base}.phase"], m_f, self.k))
                else:
                    blocks.append(ct.CTensor(np.zeros(
                        (self.c_out, self.c_in, self.k, self.k), dtype=zdt)))
            rows.append(ct.concat(blocks, axis=1))
        return ct.concat(rows, axis=0)


def harmonic_conv(x: StreamedFeatureMap, bank: HarmonicFilterBank, leaves: dict,
                  stride: int = 1, padding: int | None = None) -> StreamedFeatureMap:
    """Order-mixing convolution: out_m = sum over m1+m2=m of in_{m1} * W_{m2}.

    Streams are concatenated channelwise and convolved once with the
    block-structured kernel, then split back per output order.  Convolution
    convention is cross-correlation (no kernel flip).
    """
    if stride != 1:
        raise ConfigError("strided harmonic convolution is not supported")
    if x.orders != bank.in_orders:
        raise ShapeError(f"input orders {x.orders} != bank orders {bank.in_orders}")
    if x.shape[1] != bank.c_in:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, bank {bank.c_in}")
    pad = bank.k // 2 if padding is None else padding
    xin = ct.concat([x.streams[m] for m in bank.in_orders], axis=1)
    y = ct.conv2d(xin, bank.kernel_block(leaves), pad=pad)
    out = {}
    for i, m_out in enumerate(bank.out_orders):
        out[m_out] = ct.narrow(y, 1, i * bank.c_out, bank.c_out)
    return StreamedFeatureMap(out)


# ---------------------------------------------------------------------------
# magnitude batch norm + C-ReLU (fused), and the legacy variants
# ---------------------------------------------------------------------------

class HBatchNormState:
    """Running magnitude statistics per (stream, channel) + learnable a, b.

    The scale/shift pair is shared across streams; running mean/variance are
    tracked per stream so streams stay statistically independent.
    """

    def __init__(self, name: str, channels: int, orders=ORDERS, momentum: float = 0.1):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0,1), got {momentum}")
        self.name = name
        self.channels = channels
        self.orders = tuple(orders)
        self.momentum = momentum
        self.params = {f"{name}.a": np.ones(channels), f"{name}.b": np.zeros(channels)}
        self.buffers = {}
        for m in self.orders:
            self.buffers[f"{name}.mean{m:+d}"] = np.zeros(channels)
            self.buffers[f"{name}.var{m:+d}"] = np.ones(channels)


def _batch_stats(mag: ct.CTensor):
    mu = ct.mean(mag, axis=(0, 2, 3), keepdims=True)
    d = ct.sub(mag, mu)
    var = ct.mean(ct.mul(d, d), axis=(0, 2, 3), keepdims=True)
    return mu, var


def hbn_crelu(x: StreamedFeatureMap, state: HBatchNormState, leaves: dict,
              train: bool) -> StreamedFeatureMap:
    """ReLU(a * (|X| - mu)/sqrt(var + eps) + b) e^{i theta}, phase untouched.

    Train mode normalizes by batch statistics of magnitudes (per channel per
    stream, pooled over batch and space) and updates running buffers; eval
    mode uses the stored running statistics.  Codomain of the magnitude path
    is non-negative, which is what keeps the layer equivariant.
    """
    if x.shape[1] != state.channels:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, norm {state.channels}")
    a = ct.reshape(leaves[f"{state.name}.a"], (1, state.channels, 1, 1))
    b = ct.reshape(leaves[f"{state.name}.b"], (1, state.channels, 1, 1))
    out = {}
    for m, s in x.streams.items():
        mag, unit = ct.magnitude_phase_split(s)
        if train:
            mu, var = _batch_stats(mag)
            mom = state.momentum
            state.buffers[f"{state.name}.mean{m:+d}"][:] = (
                (1 - mom) * state.buffers[f"{state.name}.mean{m:+d}"] + mom * mu.data.reshape(-1))
            state.buffers[f"{state.name}.var{m:+d}"][:] = (
                (1 - mom) * state.buffers[f"{state.name}.var{m:+d}"] + mom * var.data.reshape(-1))
        else:
            mu = ct.CTensor(state.buffers[f"{state.name}.mean{m:+d}"].reshape(1, -1, 1, 1))
            var = ct.CTensor(state.buffers[f"{state.name}.var{m:+d}"].reshape(1, -1, 1, 1))
        norm = ct.div(ct.sub(mag, mu), ct.sqrt(ct.add(var, ct.CTensor(np.float64(EPS)))))
        out_mag = ct.relu(ct.add(ct.mul(a, norm), b))
        out[m] = ct.mul(ct.as_complex(out_mag), unit)
    return StreamedFeatureMap(out)


def legacy_cbn(x: StreamedFeatureMap, state: HBatchNormState, leaves: dict,
               train: bool) -> StreamedFeatureMap:
    """Original complex batch norm: gamma*(|X|-mu)/sqrt(var+eps) + beta, no ReLU.

    With gamma < 0 the magnitude path goes negative, flipping phases; kept
    exactly so the normalization ablation can exhibit the equivariance break.
    """
    a = ct.reshape(leaves[f"{state.name}.a"], (1, state.channels, 1, 1))
    b = ct.reshape(leaves[f"{state.name}.b"], (1, state.channels, 1, 1))
    out = {}
    for m, s in x.streams.items():
        mag, unit = ct.magnitude_phase_split(s)
        if train:
            mu, var = _batch_stats(mag)
        else:
            mu = ct.CTensor(state.buffers[f"{state.name}.mean{m:+d}"].reshape(1, -1, 1, 1))
            var = ct.CTensor(state.buffers[f"{state.name}.var{m:+d}"].reshape(1, -1, 1, 1))
        norm = ct.div(ct.sub(mag, mu), ct.sqrt(ct.add(var, ct.CTensor(np.float64(EPS)))))
        out[m] = ct.mul(ct.as_complex(ct.add(ct.mul(a, norm), b)), unit)
    return StreamedFeatureMap(out)


def layer_norm_streams(x: StreamedFeatureMap, eps: float = EPS) -> StreamedFeatureMap:
    """Encoder-style layer norm on spatial feature maps: per (sample, channel,
    stream), subtract the complex mean over space and divide by the standard
    deviation of the centered magnitudes.  No learnable affine."""
    out = {}
    for m, s in x.streams.items():
        mu = ct.mean(s, axis=(2, 3), keepdims=True)
        c = ct.sub(s, mu)
        mag = ct.magnitude(c)
        dev = ct.sub(mag, ct.mean(mag, axis=(2, 3), keepdims=True))
        var = ct.mean(ct.mul(dev, dev), axis=(2, 3), keepdims=True)
        out[m] = ct.div(c, ct.add(ct.sqrt(var), ct.CTensor(np.asarray(eps))))
    return StreamedFeatureMap(out)


def legacy_crelu(x: StreamedFeatureMap, bias: ct.CTensor) -> StreamedFeatureMap:
    """Original C-ReLU: ReLU(|X| + b) e^{i theta} with a per-channel bias."""
    c = x.shape[1]
    b = ct.reshape(bias, (1, c, 1, 1))
    out = {}
    for m, s in x.streams.items():
        mag, unit = ct.magnitude_phase_split(s)
        out[m] = ct.mul(ct.as_complex(ct.relu(ct.add(mag, b))), unit)
    return StreamedFeatureMap(out)


# ---------------------------------------------------------------------------
# residuals, pooling, dropout
# ---------------------------------------------------------------------------

def residual_add(a: StreamedFeatureMap, b: StreamedFeatureMap) -> StreamedFeatureMap:
    if a.orders != b.orders:
        raise ShapeError(f"order sets differ: {a.orders} vs {b.orders}")
    if a.shape != b.shape:
        raise ShapeError(f"stream shapes differ: {a.shape} vs {b.shape}")
    return StreamedFeatureMap({m: ct.add(a.streams[m], b.streams[m]) for m in a.orders})


def avg_pool_streams(x: StreamedFeatureMap) -> StreamedFeatureMap:
    return x.map(ct.avg_pool2)


def channel_dropout(x: StreamedFeatureMap, p: float, rng: np.random.Generator,
                    train: bool) -> StreamedFeatureMap:
    """Zero whole channels (same mask for every stream), scaled by 1/(1-p)."""
    if not train or p == 0.0:
        return x
    b, c = x.shape[:2]
    mask = (rng.random((b, c, 1, 1)) >= p).astype(np.float64) / (1.0 - p)
    keep = ct.CTensor(mask)
    return x.map(lambda s: ct.mul(s, keep))


# ---------------------------------------------------------------------------
# the full stem
# ---------------------------------------------------------------------------

class Stem:
    """r blocks of (harmonic_conv -> fused norm) x convs_per_block, with a
    block-level residual (1x1 order-0 projection when widths differ),
    average pooling, and per-block channel dropout."""

    def __init__(self, name: str, in_channels: int, channels: list, convs_per_block: int,
                 kernel_size: int, dropout: list, rng: np.random.Generator,
                 norm: str = "fused"):
        if len(dropout) != len(channels):
            raise ConfigError("dropout list length must match channels list")
        if norm not in ("fused", "legacy", "layernorm"):
            raise ConfigError(f"unknown stem norm {norm!r}")
        self.name = name
        self.norm = norm
        self.blocks = []
        self.params = {}
        self.kernel_size = kernel_size
        c_prev, orders_prev = in_channels, (0,)
        for i, c in enumerate(channels):
            convs = []
            c_in, in_ord = c_prev, orders_prev
            for j in range(convs_per_block):
                bank = HarmonicFilterBank(f"{name}.b{i}.conv{j}", in_ord, ORDERS,
                                          c_in, c, kernel_size, rng)
                bn = None
                if norm != "layernorm":
                    bn = HBatchNormState(f"{name}.b{i}.norm{j}", c)
                    self.params.update(bn.params)
                convs.append((bank, bn))
                self.params.update(bank.params)
                if norm in ("legacy", "layernorm"):
                    self.params[f"{name}.b{i}.act{j}.bias"] = np.zeros(c)
                c_in, in_ord = c, ORDERS
            proj = None
            if c_prev != c or orders_prev != ORDERS:
                # skip-path projection: order-0 (m_filter = 0) 1x1 kernels only,
                # absent streams enter as structural zeros
                proj = HarmonicFilterBank(f"{name}.b{i}.proj", orders_prev, ORDERS,
                                          c_prev, c, 1, rng, filter_orders=(0,))
                self.params.update(proj.params)
            self.blocks.append({"convs": convs, "proj": proj, "dropout": dropout[i]})
            c_prev, orders_prev = c, ORDERS
        self.out_channels = c_prev

    def buffers(self) -> dict:
        out = {}
        for blk in self.blocks:
            for _, bn in blk["convs"]:
                if bn is not None:
                    out.update(bn.buffers)
        return out

    def forward(self, img: ct.CTensor, leaves: dict, train: bool = False,
                rng: np.random.Generator | None = None) -> StreamedFeatureMap:
        x = lift_image(img)
        for i, blk in enumerate(self.blocks):
            inp = x
            for j, (bank, bn) in enumerate(blk["convs"]):
                x = harmonic_conv(x, bank, leaves)
                if self.norm == "fused":
                    x = hbn_crelu(x, bn, leaves, train)
                elif self.norm == "legacy":
                    x = legacy_cbn(x, bn, leaves, train)
                    x = legacy_crelu(x, leaves[f"{self.name}.b{i}.act{j}.bias"])
                else:
                    x = layer_norm_streams(x)
                    x = legacy_crelu(x, leaves[f"{self.name}.b{i}.act{j}.bias"])
            skip = inp if blk["proj"] is None else harmonic_conv(inp, blk["proj"], leaves, padding=0)
            x = residual_add(x, skip)
            x = avg_pool_streams(x)
            if blk["dropout"] > 0.0 and train:
                if rng is None:
                    raise ConfigError("dropout requires an rng in train mode")
                x = channel_dropout(x, blk["dropout"], rng, train)
        return x
