"""Equivariant transformer encoder over rotation-order patch stacks.

The stem output is reshaped into three (n x d) complex matrices, one per
rotation order.  Rotating the source image by 90 degrees acts on each matrix
as a fixed row permutation times the phase e^{i m alpha}; every layer here
commutes with that action.  The attention order laws: a dot product of
orders (m1, m2) produces order m1 - m2, a matmul sums orders, so strategies
only ever combine triples whose output order lands back in {-1, 0, +1}.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import ctensor as ct
from .constants import EPS
from .errors import ConfigError, ShapeError
from .stem import ORDERS, StreamedFeatureMap

STRATEGIES = ("harmformer_default", "mixing_all", "cross_values")


class PatchStack:
    """Per rotation order a complex (B, n, d) patch matrix, n = h*w patches.

    The grid shape is recorded so position-dependent layers (RPE) and grid
    rotations know the spatial layout the rows came from.
    """

    def __init__(self, streams: dict, grid_shape: tuple):
        orders = tuple(sorted(streams))
        shapes = {streams[m].shape for m in orders}
        if len(shapes) != 1:
            raise ShapeError(f"patch matrix shapes differ: {sorted(shapes)}")
        h, w = grid_shape
        shape = next(iter(shapes))
        if len(shape) != 3 or shape[1] != h * w:
            raise ShapeError(f"expected (B, {h * w}, d) matrices for grid {grid_shape}, got {shape}")
        self.orders = orders
        self.streams = {m: streams[m] for m in orders}
        self.grid_shape = (h, w)

    @property
    def n(self):
        return self.shape[1]

    @property
    def d(self):
        return self.shape[2]

    @property
    def shape(self):
        return self.streams[self.orders[0]].shape

    def map(self, fn) -> "PatchStack":
        return PatchStack({m: fn(s) for m, s in self.streams.items()}, self.grid_shape)


def patchify(x: StreamedFeatureMap) -> PatchStack:
    """(B, C, H, W) streams -> (B, H*W, C) matrices, rows in row-major order."""
    b, c, h, w = x.shape
    out = {}
    for m, s in x.streams.items():
        out[m] = ct.reshape(ct.transpose(s, (0, 2, 3, 1)), (b, h * w, c))
    return PatchStack(out, (h, w))


def unpatchify(p: PatchStack) -> StreamedFeatureMap:
    h, w = p.grid_shape
    b, n, d = p.shape
    out = {}
    for m, s in p.streams.items():
        out[m] = ct.transpose(ct.reshape(s, (b, h, w, d)), (0, 3, 1, 2))
    return StreamedFeatureMap(out)


def stack_add(a: PatchStack, b: PatchStack) -> PatchStack:
    if a.orders != b.orders or a.shape != b.shape:
        raise ShapeError("patch stacks are not aligned")
    return PatchStack({m: ct.add(a.streams[m], b.streams[m]) for m in a.orders}, a.grid_shape)


def equi_linear(p: PatchStack, w: ct.CTensor) -> PatchStack:
    """One shared weight matrix applied independently to every order stream.

    No additive bias: a constant bias on a nonzero-order stream would break
    the phase law (biases live in the magnitude activations instead).
    """
    if w.shape[0] != p.d:
        raise ShapeError(f"weight rows {w.shape[0]} != patch dim {p.d}")
    return p.map(lambda s: ct.complex_matmul(s, w))


def he_layer_norm(p: PatchStack, eps: float = EPS, mode: str = "std") -> PatchStack:
    """Per order, per channel: subtract the complex mean over patches, then
    divide by sigma + eps.

    mode "std" (default): sigma is the standard deviation over patches of the
    magnitudes of the centered values.  mode "rms": sigma is the root mean
    square of those magnitudes.  No learnable affine.
    """
    if p.n < 2:
        raise ShapeError("layer norm needs at least 2 patches")
    if mode not in ("std", "rms"):
        raise ConfigError(f"unknown layer-norm mode {mode!r}")
    out = {}
    for m, s in p.streams.items():
        mu = ct.mean(s, axis=1, keepdims=True)
        c = ct.sub(s, mu)
        mag = ct.magnitude(c)
        if mode == "std":
            dev = ct.sub(mag, ct.mean(mag, axis=1, keepdims=True))
            var = ct.mean(ct.mul(dev, dev), axis=1, keepdims=True)
        else:
            var = ct.mean(ct.mul(mag, mag), axis=1, keepdims=True)
        sigma = ct.sqrt(var)
        out[m] = ct.div(c, ct.add(sigma, ct.CTensor(np.asarray(eps))))
    return PatchStack(out, p.grid_shape)


def order_dot(q: ct.CTensor, k: ct.CTensor) -> ct.CTensor:
    """Q conj(K)^T / sqrt(d_h); orders subtract: (m1, m2) -> m1 - m2."""
    if q.shape != k.shape:
        raise ShapeError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    d_h = q.shape[-1]
    return ct.mul(ct.complex_matmul(q, ct.conj_transpose(k)), ct.CTensor(np.asarray(1.0 / np.sqrt(d_h))))


def magnitude_softmax(s: ct.CTensor, rpe_bias: ct.CTensor | None = None,
                      keep_phase: bool = True) -> ct.CTensor:
    """Row softmax over |s| + bias; phases pass through untouched (or are
    dropped when keep_phase is false).  Row magnitude sums are exactly 1."""
    mag, unit = ct.magnitude_phase_split(s)
    if rpe_bias is not None:
        if rpe_bias.shape != s.shape[-2:]:
            raise ShapeError(f"rpe bias shape {rpe_bias.shape} != attention {s.shape[-2:]}")
        mag = ct.add(mag, rpe_bias)
    w = ct.softmax(mag, axis=-1)
    wc = ct.as_complex(w)
    return ct.mul(wc, unit) if keep_phase else wc


# ---------------------------------------------------------------------------
# relative position encoding
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bucket_map(h: int, w: int, num_buckets: int) -> np.ndarray:
    """Quantized Euclidean distance between patch grid positions.

    bucket(i, j) = min(ceil(dist), num_buckets - 1) depends on distance only,
    so it is invariant under any rotation applied to both positions.
    """
    ys, xs = np.divmod(np.arange(h * w), w)
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    dist = np.hypot(dy, dx)
    return np.minimum(np.ceil(dist), num_buckets - 1).astype(np.int64)


class RpeTable:
    """Learnable real attention bias per (head, distance bucket)."""

    def __init__(self, name: str, grid_shape: tuple, heads: int, num_buckets: int = 16):
        self.name = name
        self.heads = heads
        self.num_buckets = num_buckets
        self.bucket_of = _bucket_map(grid_shape[0], grid_shape[1], num_buckets)
        self.params = {f"{name}.bias": np.zeros((heads, num_buckets))}

    def bias_matrix(self, leaves: dict, head: int) -> ct.CTensor:
        table = leaves[f"{self.name}.bias"]
        row = ct.reshape(ct.narrow(table, 0, head, 1), (self.num_buckets,))
        return ct.take(row, self.bucket_of)


# ---------------------------------------------------------------------------
# multi-head self-attention with order mixing
# ---------------------------------------------------------------------------

def _mix_heads(qh: dict, kh: dict, vh: dict, strategy: str, bias, keep_phase: bool) -> dict:
    orders = sorted(qh)
    if strategy == "harmformer_default":
        # matched-order dot products summed into a single order-0 matrix
        s = None
        for m in orders:
            t = order_dot(qh[m], kh[m])
            s = t if s is None else ct.add(s, t)
        a = magnitude_softmax(s, bias, keep_phase)
        return {m: ct.complex_matmul(a, vh[m]) for m in orders}
    if strategy == "cross_values":
        # queries/keys from the order-0 stream only; all value orders attended
        a = magnitude_softmax(order_dot(qh[0], kh[0]), bias, keep_phase)
        return {m: ct.complex_matmul(a, vh[m]) for m in orders}
    if strategy == "mixing_all":
        # every (m_q, m_k, m_v) triple whose output order stays in range;
        # dot products grouped by their order m_q - m_k before the softmax
        # (the default strategy is exactly the m_dot = 0 group).  Nonzero
        # groups always keep phase — their order lives in it.
        groups: dict = {}
        for mq in orders:
            for mk in orders:
                t = order_dot(qh[mq], kh[mk])
                md = mq - mk
                groups[md] = t if md not in groups else ct.add(groups[md], t)
        amats = {md: magnitude_softmax(s, bias, keep_phase if md == 0 else True)
                 for md, s in groups.items()}
        out = {m: None for m in orders}
        for md, a in amats.items():
            for mv in orders:
                mo = md + mv
                if mo not in out:
                    continue
                t = ct.complex_matmul(a, vh[mv])
                out[mo] = t if out[mo] is None else ct.add(out[mo], t)
        return out
    raise ConfigError(f"unknown mixing strategy {strategy!r}; valid: {STRATEGIES}")


def msa_forward(p: PatchStack, leaves: dict, name: str, heads: int,
                strategy: str = "harmformer_default", rpe: RpeTable | None = None,
                keep_phase: bool = True, head_dim: int | None = None) -> PatchStack:
    """Self-attention per head with order-aware stream mixing, heads
    concatenated then linearly projected.

    Each head projects to head_dim channels (Q, K, V weights are
    (d, heads*head_dim)); the output projection maps heads*head_dim back to
    d, so the per-head width is independent of the model width."""
    if head_dim is None:
        if p.d % heads:
            raise ConfigError(f"patch dim {p.d} not divisible by {heads} heads")
        head_dim = p.d // heads
    d_h = head_dim
    q = equi_linear(p, leaves[f"{name}.wq"])
    k = equi_linear(p, leaves[f"{name}.wk"])
    v = equi_linear(p, leaves[f"{name}.wv"])
    per_head = []
    for h in range(heads):
        qh = {m: ct.narrow(q.streams[m], 2, h * d_h, d_h) for m in p.orders}
        kh = {m: ct.narrow(k.streams[m], 2, h * d_h, d_h) for m in p.orders}
        vh = {m: ct.narrow(v.streams[m], 2, h * d_h, d_h) for m in p.orders}
        bias = rpe.bias_matrix(leaves, h) if rpe is not None else None
        per_head.append(_mix_heads(qh, kh, vh, strategy, bias, keep_phase))
    merged = {m: ct.concat([ho[m] for ho in per_head], axis=2) for m in p.orders}
    return equi_linear(PatchStack(merged, p.grid_shape), leaves[f"{name}.wo"])


# ---------------------------------------------------------------------------
# pointwise magnitude activation and dropout (patch domain)
# ---------------------------------------------------------------------------

def crelu_ab(p: PatchStack, a: ct.CTensor, b: ct.CTensor) -> PatchStack:
    """ReLU(a|z| + b) e^{i theta} with learnable per-channel a, b."""
    out = {}
    for m, s in p.streams.items():
        mag, unit = ct.magnitude_phase_split(s)
        out[m] = ct.mul(ct.as_complex(ct.relu(ct.add(ct.mul(mag, a), b))), unit)
    return PatchStack(out, p.grid_shape)


def magnitude_dropout(p: PatchStack, rate: float, rng: np.random.Generator,
                      train: bool) -> PatchStack:
    """Elementwise dropout on magnitudes; one mask shared by all streams."""
    if not train or rate == 0.0:
        return p
    mask = (rng.random(p.shape) >= rate).astype(np.float64) / (1.0 - rate)
    keep = ct.CTensor(mask)
    return p.map(lambda s: ct.mul(s, keep))


# ---------------------------------------------------------------------------
# encoder blocks
# ---------------------------------------------------------------------------

def _complex_init(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    # per-component sigma 1/sqrt(2 d_in) so E|w|^2 = 1/d_in
    s = 1.0 / np.sqrt(2.0 * d_in)
    return (rng.standard_normal((d_in, d_out)) + 1j * rng.standard_normal((d_in, d_out))) * s


class EncoderBlock:
    """Pre-norm transformer block: p + MSA(LN(p)), then + MLP(LN(.)).

    The MLP is equi_linear -> C-ReLU(a, b) on magnitudes -> equi_linear.
    Dropout acts on sublayer outputs (magnitude masks) in train mode.
    """

    def __init__(self, name: str, d: int, heads: int, grid_shape: tuple,
                 rng: np.random.Generator, strategy: str = "harmformer_default",
                 rpe_on: bool = True, keep_phase: bool = True, mlp_ratio: int = 2,
                 num_buckets: int = 16, dropout: float = 0.0, norm_mode: str = "std",
                 head_dim: int | None = None):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown mixing strategy {strategy!r}; valid: {STRATEGIES}")
        if head_dim is None:
            if d % heads:
                raise ConfigError(f"patch dim {d} not divisible by {heads} heads")
            head_dim = d // heads
        self.name = name
        self.d = d
        self.heads = heads
        self.head_dim = head_dim
        self.strategy = strategy
        self.keep_phase = keep_phase
        self.dropout = dropout
        self.norm_mode = norm_mode
        hidden = mlp_ratio * d
        proj = heads * head_dim
        self.params = {
            f"{name}.wq": _complex_init(rng, d, proj),
            f"{name}.wk": _complex_init(rng, d, proj),
            f"{name}.wv": _complex_init(rng, d, proj),
            f"{name}.wo": _complex_init(rng, proj, d),
            f"{name}.mlp.w1": _complex_init(rng, d, hidden),
            f"{name}.mlp.w2": _complex_init(rng, hidden, d),
            f"{name}.mlp.a": np.ones(hidden),
            f"{name}.mlp.b": np.zeros(hidden),
        }
        self.rpe = RpeTable(f"{name}.rpe", grid_shape, heads, num_buckets) if rpe_on else None
        if self.rpe is not None:
            self.params.update(self.rpe.params)

    def forward(self, p: PatchStack, leaves: dict, train: bool = False,
                rng: np.random.Generator | None = None) -> PatchStack:
        attn = msa_forward(he_layer_norm(p, mode=self.norm_mode), leaves, self.name,
                           self.heads, self.strategy, self.rpe, self.keep_phase,
                           self.head_dim)
        if self.dropout > 0.0:
            if rng is None and train:
                raise ConfigError("dropout requires an rng in train mode")
            attn = magnitude_dropout(attn, self.dropout, rng, train)
        x = stack_add(p, attn)
        h = he_layer_norm(x, mode=self.norm_mode)
        h = equi_linear(h, leaves[f"{self.name}.mlp.w1"])
        h = crelu_ab(h, leaves[f"{self.name}.mlp.a"], leaves[f"{self.name}.mlp.b"])
        h = equi_linear(h, leaves[f"{self.name}.mlp.w2"])
        if self.dropout > 0.0:
            h = magnitude_dropout(h, self.dropout, rng, train)
        return stack_add(x, h)


class Encoder:
    """Stack of encoder blocks sharing one grid shape."""

    def __init__(self, name: str, blocks: int, d: int, heads: int, grid_shape: tuple,
                 rng: np.random.Generator, **block_kw):
        self.blocks = [EncoderBlock(f"{name}.blk{i}", d, heads, grid_shape, rng, **block_kw)
                       for i in range(blocks)]
        self.params = {}
        for b in self.blocks:
            self.params.update(b.params)

    def forward(self, p: PatchStack, leaves: dict, train: bool = False,
                rng: np.random.Generator | None = None) -> PatchStack:
        for b in self.blocks:
            p = b.forward(p, leaves, train, rng)
        return p
