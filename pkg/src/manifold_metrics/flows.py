"""Normalizing-flow building blocks.

A :class:`FlowModel` is a stack of invertible layers mapping data ``x`` to
latents ``z`` (the encoder ``f``) with the decoder ``g = f^{-1}`` obtained by
running the stack backwards.  Every layer reports the analytic
``log|det d(out)/d(in)|`` of its forward direction.

Layers are built so that a freshly constructed model is exactly the identity:
conditioner output layers start at zero (uniform bins, unit knot slopes) and
Householder vectors are initialised in identical pairs.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DimensionError, EvaluationError, FormatError

DTYPE = torch.float64

DEFAULT_BINS = 4
DEFAULT_TAIL_BOUND = 4.0
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3

# softplus(_UNIT_SLOPE_OFFSET) + MIN_DERIVATIVE == 1, so zero raw slopes give the identity
_UNIT_SLOPE_OFFSET = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


# ---------------------------------------------------------------------------
# Rational-quadratic spline
# ---------------------------------------------------------------------------

@dataclass
class RqsSpline:
    """Unnormalized parameters of monotone rational-quadratic splines.

    Leading dimensions of the three arrays are batch dimensions (one spline
    per transformed coordinate).  ``derivatives`` holds the ``bins - 1``
    interior knots; the boundary knots are fixed at slope 1 so the spline
    joins the identity tails continuously.
    """

    widths: torch.Tensor
    heights: torch.Tensor
    derivatives: torch.Tensor
    tail_bound: float = DEFAULT_TAIL_BOUND

    def __post_init__(self):
        self.widths = torch.as_tensor(self.widths, dtype=DTYPE)
        self.heights = torch.as_tensor(self.heights, dtype=DTYPE)
        self.derivatives = torch.as_tensor(self.derivatives, dtype=DTYPE)
        k = self.widths.shape[-1]
        if self.heights.shape[-1] != k or self.derivatives.shape[-1] != k - 1:
            raise DimensionError("spline needs K widths, K heights and K-1 derivatives")
        if MIN_BIN_WIDTH * k > 1.0 or MIN_BIN_HEIGHT * k > 1.0:
            raise DimensionError("too many bins for the minimum bin size")

    @property
    def bins(self) -> int:
        return self.widths.shape[-1]

    @classmethod
    def identity(cls, bins=DEFAULT_BINS, tail_bound=DEFAULT_TAIL_BOUND, batch=()):
        shape = tuple(batch)
        return cls(torch.zeros(shape + (bins,), dtype=DTYPE), torch.zeros(shape + (bins,), dtype=DTYPE),
                   torch.zeros(shape + (bins - 1,), dtype=DTYPE), tail_bound)

    @classmethod
    def random(cls, bins=DEFAULT_BINS, tail_bound=DEFAULT_TAIL_BOUND, batch=(), scale=1.0, seed=0):
        g = torch.Generator().manual_seed(seed)
        shape = tuple(batch)
        return cls(scale * torch.randn(shape + (bins,), generator=g, dtype=DTYPE),
                   scale * torch.randn(shape + (bins,), generator=g, dtype=DTYPE),
                   scale * torch.randn(shape + (bins - 1,), generator=g, dtype=DTYPE), tail_bound)


def _knots(unnormalized, min_size, bound):
    k = unnormalized.shape[-1]
    sizes = torch.softmax(unnormalized, dim=-1)
    sizes = min_size + (1.0 - min_size * k) * sizes
    cum = torch.cumsum(sizes, dim=-1)
    cum = F.pad(cum, (1, 0), value=0.0)
    cum = 2.0 * bound * cum - bound
    # pin the ends exactly to avoid rounding drift at the interval boundary
    cum = torch.cat([torch.full_like(cum[..., :1], -bound), cum[..., 1:-1],
                     torch.full_like(cum[..., :1], bound)], dim=-1)
    return cum, cum[..., 1:] - cum[..., :-1]


def _spline_tables(spline: RqsSpline):
    b = spline.tail_bound
    cumw, widths = _knots(spline.widths, MIN_BIN_WIDTH, b)
    cumh, heights = _knots(spline.heights, MIN_BIN_HEIGHT, b)
    inner = MIN_DERIVATIVE + F.softplus(spline.derivatives + _UNIT_SLOPE_OFFSET)
    one = torch.ones_like(inner[..., :1])
    derivs = torch.cat([one, inner, one], dim=-1)
    return cumw, widths, cumh, heights, derivs


def _gather(table, idx):
    return torch.gather(table, -1, idx).squeeze(-1)


def _check_finite_params(spline: RqsSpline):
    for t in (spline.widths, spline.heights, spline.derivatives):
        if not torch.all(torch.isfinite(t)):
            raise EvaluationError("non-finite spline parameters")


def rqs_forward(x, spline: RqsSpline):
    """Evaluate the spline: returns ``(y, log dy/dx)`` elementwise.

    Outside ``[-B, B]`` the map is the identity with zero log-derivative.
    """
    _check_finite_params(spline)
    x = torch.as_tensor(x, dtype=DTYPE)
    b = spline.tail_bound
    cumw, widths, cumh, heights, derivs = _spline_tables(spline)
    x, cumw = torch.broadcast_tensors(x.unsqueeze(-1), cumw)
    x = x[..., 0]
    inside = (x >= -b) & (x <= b)
    xc = torch.clamp(x, -b, b)

    idx = torch.searchsorted(cumw[..., 1:-1].detach().contiguous(), xc.detach().unsqueeze(-1), right=True)
    widths, cumh, heights, derivs = (torch.broadcast_to(t, cumw.shape[:-1] + t.shape[-1:])
                                     for t in (widths, cumh, heights, derivs))
    x_k = _gather(cumw, idx)
    w_k = _gather(widths, idx)
    y_k = _gather(cumh, idx)
    h_k = _gather(heights, idx)
    d_k = _gather(derivs, idx)
    d_k1 = _gather(derivs, idx + 1)
    s_k = h_k / w_k

    theta = (xc - x_k) / w_k
    t1mt = theta * (1.0 - theta)
    numer = h_k * (s_k * theta.pow(2) + d_k * t1mt)
    denom = s_k + (d_k1 + d_k - 2.0 * s_k) * t1mt
    y_in = y_k + numer / denom
    dnum = s_k.pow(2) * (d_k1 * theta.pow(2) + 2.0 * s_k * t1mt + d_k * (1.0 - theta).pow(2))
    logd_in = torch.log(dnum) - 2.0 * torch.log(denom)

    y = torch.where(inside, y_in, x)
    logd = torch.where(inside, logd_in, torch.zeros_like(logd_in))
    return y, logd


def rqs_inverse(y, spline: RqsSpline):
    """Exact inverse of :func:`rqs_forward`: returns ``(x, log dx/dy)``."""
    _check_finite_params(spline)
    y = torch.as_tensor(y, dtype=DTYPE)
    b = spline.tail_bound
    cumw, widths, cumh, heights, derivs = _spline_tables(spline)
    y, cumh = torch.broadcast_tensors(y.unsqueeze(-1), cumh)
    y = y[..., 0]
    inside = (y >= -b) & (y <= b)
    yc = torch.clamp(y, -b, b)

    idx = torch.searchsorted(cumh[..., 1:-1].detach().contiguous(), yc.detach().unsqueeze(-1), right=True)
    cumw, widths, heights, derivs = (torch.broadcast_to(t, cumh.shape[:-1] + t.shape[-1:])
                                     for t in (cumw, widths, heights, derivs))
    x_k = _gather(cumw, idx)
    w_k = _gather(widths, idx)
    y_k = _gather(cumh, idx)
    h_k = _gather(heights, idx)
    d_k = _gather(derivs, idx)
    d_k1 = _gather(derivs, idx + 1)
    s_k = h_k / w_k

    dy = yc - y_k
    slope_sum = d_k1 + d_k - 2.0 * s_k
    a = h_k * (s_k - d_k) + dy * slope_sum
    bq = h_k * d_k - dy * slope_sum
    c = -s_k * dy
    disc = torch.clamp(bq.pow(2) - 4.0 * a * c, min=0.0)
    theta = (2.0 * c) / (-bq - torch.sqrt(disc))
    x_in = theta * w_k + x_k

    t1mt = theta * (1.0 - theta)
    denom = s_k + slope_sum * t1mt
    dnum = s_k.pow(2) * (d_k1 * theta.pow(2) + 2.0 * s_k * t1mt + d_k * (1.0 - theta).pow(2))
    logd_in = -(torch.log(dnum) - 2.0 * torch.log(denom))

    x = torch.where(inside, x_in, y)
    logd = torch.where(inside, logd_in, torch.zeros_like(logd_in))
    return x, logd


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": torch.tanh, "silu": F.silu, "softplus": F.softplus, "elu": F.elu}


class MLP(nn.Module):
    """Fully connected subnet; the output layer starts at zero."""

    def __init__(self, widths, activation="tanh", zero_last=True, generator=None):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.linears = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        with torch.no_grad():
            for lin in self.linears:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            if zero_last:
                self.linears[-1].weight.zero_()
                self.linears[-1].bias.zero_()

    def forward(self, h):
        act = _ACTIVATIONS[self.activation]
        for lin in self.linears[:-1]:
            h = act(lin(h))
        return self.linears[-1](h)


class FlowLayer(nn.Module):
    """Interface: ``forward(x) -> (y, logdet)``, ``inverse(y) -> (x, logdet)``.

    ``logdet`` is per-row ``log|det|`` of the direction being evaluated.
    """

    kind = "abstract"

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class CouplingLayer(FlowLayer):
    """RQS coupling: coordinates in ``transform_idx`` are splined, conditioned on ``condition_idx``."""

    kind = "rqs_coupling"

    def __init__(self, dim, condition_idx, transform_idx, bins=DEFAULT_BINS, tail_bound=DEFAULT_TAIL_BOUND,
                 hidden=(64, 64), activation="tanh", generator=None):
        super().__init__()
        self.dim = dim
        self.condition_idx = list(condition_idx)
        self.transform_idx = list(transform_idx)
        if sorted(self.condition_idx + self.transform_idx) != list(range(dim)):
            raise DimensionError("coupling split must partition the coordinates")
        self.bins = bins
        self.tail_bound = float(tail_bound)
        self.hidden = list(hidden)
        n_out = len(self.transform_idx) * (3 * bins - 1)
        self.subnet = MLP([len(self.condition_idx)] + self.hidden + [n_out], activation, generator=generator)
        self.register_buffer("_cond", torch.as_tensor(self.condition_idx, dtype=torch.long), persistent=False)
        self.register_buffer("_trans", torch.as_tensor(self.transform_idx, dtype=torch.long), persistent=False)
        inv = torch.empty(dim, dtype=torch.long)
        inv[torch.as_tensor(self.condition_idx + self.transform_idx)] = torch.arange(dim)
        self.register_buffer("_unsplit", inv, persistent=False)

    def descriptor(self):
        return {"kind": self.kind, "condition": self.condition_idx, "transform": self.transform_idx,
                "bins": self.bins, "tail_bound": self.tail_bound, "hidden": self.hidden,
                "activation": self.subnet.activation}

    def _spline(self, cond):
        k = self.bins
        raw = self.subnet(cond).reshape(cond.shape[0], len(self.transform_idx), 3 * k - 1)
        return RqsSpline(raw[..., :k], raw[..., k:2 * k], raw[..., 2 * k:], self.tail_bound)

    def _apply(self, x, inverse):
        cond = x.index_select(1, self._cond)
        moving = x.index_select(1, self._trans)
        spline = self._spline(cond)
        out, logd = (rqs_inverse if inverse else rqs_forward)(moving, spline)
        y = torch.cat([cond, out], dim=1).index_select(1, self._unsplit)
        return y, logd.sum(dim=1)

    def forward(self, x):
        return self._apply(x, inverse=False)

    def inverse(self, y):
        return self._apply(y, inverse=True)


class OrthogonalLayer(FlowLayer):
    """Rotation ``y = Q x`` with ``Q`` a product of Householder reflections.

    An even number of reflections is used so ``det Q = +1``; vectors start
    in identical pairs which makes the initial ``Q`` the identity.
    """

    kind = "householder"

    def __init__(self, dim, n_reflections=None, generator=None):
        super().__init__()
        self.dim = dim
        n = n_reflections if n_reflections is not None else dim + (dim % 2)
        if n % 2:
            raise DimensionError("use an even number of reflections")
        base = torch.randn(n // 2, dim, generator=generator, dtype=DTYPE)
        self.vectors = nn.Parameter(base.repeat_interleave(2, dim=0))

    def descriptor(self):
        return {"kind": self.kind, "n_reflections": int(self.vectors.shape[0])}

    def matrix(self) -> torch.Tensor:
        q = torch.eye(self.dim, dtype=DTYPE)
        for v in self.vectors:
            u = v / torch.linalg.vector_norm(v)
            q = q - 2.0 * torch.outer(u, u @ q)
        return q

    def forward(self, x):
        return x @ self.matrix().T, x.new_zeros(x.shape[0])

    def inverse(self, y):
        return y @ self.matrix(), y.new_zeros(y.shape[0])


class PermutationLayer(FlowLayer):
    kind = "permutation"

    def __init__(self, perm):
        super().__init__()
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(len(perm))):
            raise DimensionError("not a permutation")
        self.perm = perm
        self.register_buffer("_perm", torch.as_tensor(perm, dtype=torch.long), persistent=False)
        self.register_buffer("_inv", torch.argsort(self._perm), persistent=False)

    def descriptor(self):
        return {"kind": self.kind, "perm": self.perm}

    def forward(self, x):
        return x.index_select(1, self._perm), x.new_zeros(x.shape[0])

    def inverse(self, y):
        return y.index_select(1, self._inv), y.new_zeros(y.shape[0])


class StandardizeLayer(FlowLayer):
    """Frozen affine ``(x - shift) / scale`` with one scalar scale.

    A single scale keeps the data-space Gram structure intact, so every
    manifold metric is unchanged up to a known additive constant.
    """

    kind = "standardize"

    def __init__(self, dim, shift=None, scale=1.0):
        super().__init__()
        shift = torch.zeros(dim, dtype=DTYPE) if shift is None else torch.as_tensor(shift, dtype=DTYPE)
        self.register_buffer("shift", shift.clone())
        self.register_buffer("scale", torch.tensor(float(scale), dtype=DTYPE))

    def forward(self, x):
        y = (x - self.shift) / self.scale
        return y, x.new_full((x.shape[0],), -x.shape[1] * float(torch.log(self.scale)))

    def inverse(self, y):
        x = y * self.scale + self.shift
        return x, y.new_full((y.shape[0],), y.shape[1] * float(torch.log(self.scale)))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class FlowModel(nn.Module):
    """Ordered stack of invertible layers; ``encode`` runs it forwards."""

    def __init__(self, dim, layers):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(layers)

    @classmethod
    def build(cls, dim, blocks=8, bins=DEFAULT_BINS, tail_bound=DEFAULT_TAIL_BOUND, hidden=(64, 64),
              activation="tanh", shift=None, scale=1.0, seed=0, final_rotation=True):
        """Standard architecture: standardize, ``blocks`` RQS couplings, rotation.

        Each coupling splits a freshly permuted coordinate order into halves.
        Applying the permutation through the split indices instead of a
        separate layer keeps the untrained model exactly the identity.
        """
        if dim < 2:
            raise DimensionError("flows need at least two dimensions")
        g = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        half = dim // 2
        layers: list[FlowLayer] = [StandardizeLayer(dim, shift, scale)]
        order = list(range(dim))
        for _ in range(blocks):
            layers.append(CouplingLayer(dim, order[:half], order[half:], bins, tail_bound, hidden,
                                        activation, generator=g))
            if dim == 2:
                order = order[::-1]
            else:
                order = [order[i] for i in rng.permutation(dim)]
        if final_rotation:
            layers.append(OrthogonalLayer(dim, generator=g))
        return cls(dim, layers)

    def descriptor(self):
        return {"dim": self.dim, "layers": [layer.descriptor() for layer in self.layers]}

    def _check(self, t, where):
        if not torch.all(torch.isfinite(t)):
            raise EvaluationError(f"non-finite values after layer {where}")

    def encode(self, x):
        """Data to latent: returns ``(z, log|det df/dx|)`` per row."""
        x = torch.as_tensor(x, dtype=DTYPE)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.dim:
            raise DimensionError(f"expected {self.dim} columns, got {x.shape[1]}")
        logdet = x.new_zeros(x.shape[0])
        for i, layer in enumerate(self.layers):
            x, ld = layer(x)
            logdet = logdet + ld
            self._check(x, f"{i} ({layer.kind})")
        return (x[0], logdet[0]) if squeeze else (x, logdet)

    def decode_with_logdet(self, z):
        """Latent to data: returns ``(x, log|det dg/dz|)`` per row."""
        z = torch.as_tensor(z, dtype=DTYPE)
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[1] != self.dim:
            raise DimensionError(f"expected {self.dim} columns, got {z.shape[1]}")
        logdet = z.new_zeros(z.shape[0])
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z, ld = layer.inverse(z)
            logdet = logdet + ld
            self._check(z, f"{i} ({layer.kind})")
        return (z[0], logdet[0]) if squeeze else (z, logdet)

    def decode(self, z):
        return self.decode_with_logdet(z)[0]

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def set_parameter_vector(self, vec):
        vec = torch.as_tensor(vec, dtype=DTYPE)
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(vec[offset:offset + n].reshape(p.shape))
                offset += n
        if offset != vec.numel():
            raise DimensionError("parameter vector length mismatch")


def flow_encode(model: FlowModel, x):
    return model.encode(x)


def flow_decode(model: FlowModel, z):
    return model.decode(z)


def _layer_from_descriptor(dim, d):
    kind = d.get("kind")
    if kind == "rqs_coupling":
        return CouplingLayer(dim, d["condition"], d["transform"], d["bins"], d["tail_bound"], d["hidden"],
                             d["activation"])
    if kind == "householder":
        return OrthogonalLayer(dim, d["n_reflections"])
    if kind == "permutation":
        return PermutationLayer(d["perm"])
    if kind == "standardize":
        return StandardizeLayer(dim)
    raise FormatError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

FLOW_MAGIC = b"MMFLOW\x00\x01"
FLOW_FORMAT_VERSION = 1


def _tensor_blocks(model):
    return list(model.state_dict().items())


def save_model(model: FlowModel, path) -> None:
    """Write a versioned checkpoint.

    Layout: magic (8 bytes), format version (u32 LE), header length (u32 LE),
    UTF-8 JSON header ``{"dim", "layers", "blocks": [[name, shape], ...]}``,
    then each block as little-endian float64 in header order.
    """
    blocks = _tensor_blocks(model)
    header = model.descriptor()
    header["blocks"] = [[name, list(t.shape)] for name, t in blocks]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(FLOW_MAGIC)
    buf.write(struct.pack("<II", FLOW_FORMAT_VERSION, len(raw)))
    buf.write(raw)
    for _, t in blocks:
        buf.write(t.detach().numpy().astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> FlowModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != FLOW_MAGIC:
        raise FormatError(f"{path}: not a flow checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FLOW_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(data) < 16 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    dim = int(header["dim"])
    model = FlowModel(dim, [_layer_from_descriptor(dim, d) for d in header["layers"]])
    expected = _tensor_blocks(model)
    declared = header["blocks"]
    if [n for n, _ in expected] != [n for n, _ in declared] or \
            any(list(t.shape) != list(s) for (_, t), (_, s) in zip(expected, declared)):
        raise FormatError(f"{path}: parameter blocks inconsistent with layer descriptors (dim {dim})")
    offset = 16 + hlen
    state = {}
    for name, shape in declared:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"{path}: truncated parameter block {name}")
        state[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
        offset += 8 * n
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    model.load_state_dict(state)
    return model
