"""Deterministic decoders ``z -> x`` with column-sliceable Jacobians.

Index sets are 0-based inside the library.  User-facing text (CLI flags,
CSV files) is 1-based; convert at the boundary with :func:`parse_index_set`
and :func:`format_index_set`.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numerics
from .errors import CapabilityError, DimensionError, EvaluationError, FormatError, UsageError
from .flows import DTYPE, FlowModel, load_model

JACOBIAN_MODES = ("analytic", "forward", "reverse", "finite_difference")
FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# Index sets
# ---------------------------------------------------------------------------

def index_set(indices, dim: int) -> tuple[int, ...]:
    """Validate a 0-based index set: sorted, distinct, within ``range(dim)``."""
    s = tuple(int(i) for i in indices)
    if not s:
        raise UsageError("index set must be nonempty")
    if len(set(s)) != len(s):
        raise UsageError(f"index set {s} has duplicates")
    if min(s) < 0 or max(s) >= dim:
        raise UsageError(f"index set {s} out of range for dimension {dim}")
    return tuple(sorted(s))


def partition(sets, dim: int) -> list[tuple[int, ...]]:
    """Validate a partition of ``range(dim)`` into disjoint nonempty index sets."""
    parts = [index_set(s, dim) for s in sets]
    flat = sorted(i for s in parts for i in s)
    if flat != list(range(dim)):
        raise UsageError(f"sets {parts} do not partition range({dim})")
    return parts


def singletons(dim: int) -> list[tuple[int, ...]]:
    return [(i,) for i in range(dim)]


def parse_index_set(text: str, dim: int) -> tuple[int, ...]:
    """Parse a 1-based set such as ``"1,3-5"`` into a 0-based index set."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return index_set([i - 1 for i in out], dim)


def format_index_set(s: Sequence[int]) -> str:
    return ",".join(str(i + 1) for i in s)


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------

class Decoder:
    """Base decoder.

    Subclasses implement ``torch_decode`` (differentiable, enables forward and
    reverse mode) and optionally ``analytic_jacobian`` and ``encode``.
    """

    name = "decoder"
    has_analytic_jacobian = False
    has_encoder = False
    supports_autodiff = True

    def __init__(self, latent_dim: int, data_dim: int):
        if data_dim < latent_dim:
            raise DimensionError("decoders must satisfy data_dim >= latent_dim")
        self.latent_dim = latent_dim
        self.data_dim = data_dim

    # -- evaluation ---------------------------------------------------------
    def torch_decode(self, z: torch.Tensor) -> torch.Tensor:
        raise CapabilityError(f"{self.name} has no differentiable implementation")

    def _check_z(self, z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = z[None, :] if single else z
        if z2.ndim != 2 or z2.shape[1] != self.latent_dim:
            raise DimensionError(f"{self.name}: expected latent dimension {self.latent_dim}, got shape {z.shape}")
        if not np.all(np.isfinite(z2)):
            raise EvaluationError(f"{self.name}: non-finite latent input")
        return z2, single

    def decode(self, z) -> np.ndarray:
        z2, single = self._check_z(z)
        with torch.no_grad():
            x = self.torch_decode(torch.from_numpy(z2)).numpy()
        return self._finish(x, single)

    def _finish(self, x, single):
        if not np.all(np.isfinite(x)):
            raise EvaluationError(f"{self.name}: non-finite decoder output")
        return x[0] if single else x

    def encode(self, x) -> np.ndarray:
        raise CapabilityError(f"{self.name} has no encoder")

    def analytic_jacobian(self, z: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{self.name} has no analytic Jacobian")

    # -- Jacobians ----------------------------------------------------------
    def default_mode(self) -> str:
        if self.has_analytic_jacobian:
            return "analytic"
        if self.supports_autodiff:
            return "forward"
        return "finite_difference"

    def jacobian(self, z, mode: str | None = None, columns=None) -> np.ndarray:
        """Jacobian columns at each row of ``z``: shape ``(B, Dx, |columns|)``."""
        z2, single = self._check_z(z)
        mode = mode or self.default_mode()
        cols = list(range(self.latent_dim)) if columns is None else list(index_set(columns, self.latent_dim))
        if mode == "analytic":
            jac = self.analytic_jacobian(z2)[:, :, cols]
        elif mode == "forward":
            self._require_autodiff(mode)
            jac = numerics.batch_jacobian_forward(self.torch_decode, torch.from_numpy(z2), cols).detach().numpy()
        elif mode == "reverse":
            self._require_autodiff(mode)
            jac = numerics.batch_jacobian_reverse(self.torch_decode, torch.from_numpy(z2)).detach().numpy()
            jac = jac[:, :, cols]
        elif mode == "finite_difference":
            jac = self._fd_jacobian(z2, cols)
        else:
            raise UsageError(f"unknown Jacobian mode {mode!r}; choose from {JACOBIAN_MODES}")
        if not np.all(np.isfinite(jac)):
            raise EvaluationError(f"{self.name}: non-finite Jacobian")
        return jac[0] if single else jac

    def jacobian_columns(self, z, s, mode: str | None = None) -> np.ndarray:
        return self.jacobian(z, mode, columns=s)

    def _require_autodiff(self, mode):
        if not self.supports_autodiff:
            raise CapabilityError(f"{self.name} does not support {mode}-mode differentiation")

    def _fd_jacobian(self, z2, cols, step=FD_STEP):
        b = z2.shape[0]
        out = np.empty((b, self.data_dim, len(cols)))
        for k, j in enumerate(cols):
            dz = np.zeros_like(z2)
            dz[:, j] = step
            out[:, :, k] = (self.decode(z2 + dz) - self.decode(z2 - dz)) / (2 * step)
        return out


# ---------------------------------------------------------------------------
# Concrete decoders
# ---------------------------------------------------------------------------

class AffineDecoder(Decoder):
    """``g(z) = A z + b`` with constant Jacobian ``A``."""

    name = "affine"
    has_analytic_jacobian = True

    def __init__(self, matrix, offset=None):
        a = np.array(matrix, dtype=np.float64, ndmin=2)
        super().__init__(a.shape[1], a.shape[0])
        self.matrix = a
        self.offset = np.zeros(a.shape[0]) if offset is None else np.asarray(offset, dtype=np.float64)
        if self.offset.shape != (a.shape[0],):
            raise DimensionError("offset must have one entry per data dimension")
        self.has_encoder = a.shape[0] == a.shape[1]
        self._a_t = torch.from_numpy(a)
        self._b_t = torch.from_numpy(self.offset)

    def torch_decode(self, z):
        return z @ self._a_t.T + self._b_t

    def decode(self, z):
        z2, single = self._check_z(z)
        return self._finish(z2 @ self.matrix.T + self.offset, single)

    def analytic_jacobian(self, z):
        return np.broadcast_to(self.matrix, (z.shape[0],) + self.matrix.shape).copy()

    def encode(self, x):
        if not self.has_encoder:
            raise CapabilityError("rectangular affine decoder has no encoder")
        x = np.asarray(x, dtype=np.float64)
        return np.linalg.solve(self.matrix, (x - self.offset).T).T

    def log_det(self):
        return numerics.log_abs_det(self.matrix)


def identity_decoder(dim: int) -> AffineDecoder:
    dec = AffineDecoder(np.eye(dim))
    dec.name = f"identity:{dim}"
    return dec


class TorusDecoder(Decoder):
    """Embedded 10-D torus: polar reparameterization, Cartesian map, rotation, normalization.

    ``phi_j = sigma_phi[j] z_j``, ``r_j = 1 + sigma_r[j] z_{n+j}``,
    ``y_{2j} = r_j cos(phi_j)``, ``y_{2j+1} = r_j sin(phi_j)``,
    then ``x = (R y - shift) / scale``.
    """

    name = "torus"
    has_analytic_jacobian = True

    def __init__(self, sigma_phi, sigma_r, rotation=None, shift=None, scale=1.0):
        self.sigma_phi = np.asarray(sigma_phi, dtype=np.float64)
        self.sigma_r = np.asarray(sigma_r, dtype=np.float64)
        n = self.sigma_phi.size
        if self.sigma_r.size != n:
            raise DimensionError("sigma_phi and sigma_r must have equal length")
        super().__init__(2 * n, 2 * n)
        self.n_pairs = n
        self.rotation = np.eye(2 * n) if rotation is None else np.asarray(rotation, dtype=np.float64)
        self.shift = np.zeros(2 * n) if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = float(scale)
        self._rot_t = torch.from_numpy(self.rotation)
        self._shift_t = torch.from_numpy(self.shift)

    def polar(self, z):
        n = self.n_pairs
        return self.sigma_phi * z[:, :n], 1.0 + self.sigma_r * z[:, n:]

    def cartesian(self, z) -> np.ndarray:
        """Torus embedding before rotation and normalization."""
        z2, _ = self._check_z(z)
        phi, r = self.polar(z2)
        y = np.empty((z2.shape[0], 2 * self.n_pairs))
        y[:, 0::2] = r * np.cos(phi)
        y[:, 1::2] = r * np.sin(phi)
        return y

    def decode(self, z):
        z2, single = self._check_z(z)
        y = self.cartesian(z2)
        return self._finish((y @ self.rotation.T - self.shift) / self.scale, single)

    def torch_decode(self, z):
        n = self.n_pairs
        sp = torch.from_numpy(self.sigma_phi)
        sr = torch.from_numpy(self.sigma_r)
        phi = sp * z[:, :n]
        r = 1.0 + sr * z[:, n:]
        y = torch.stack([r * torch.cos(phi), r * torch.sin(phi)], dim=2).reshape(z.shape[0], 2 * n)
        return (y @ self._rot_t.T - self._shift_t) / self.scale

    def cartesian_jacobian(self, z2) -> np.ndarray:
        """Jacobian of the Cartesian embedding (before rotation/normalization)."""
        n = self.n_pairs
        phi, r = self.polar(z2)
        b = z2.shape[0]
        jac = np.zeros((b, 2 * n, 2 * n))
        j = np.arange(n)
        jac[:, 2 * j, j] = -self.sigma_phi * r * np.sin(phi)
        jac[:, 2 * j + 1, j] = self.sigma_phi * r * np.cos(phi)
        jac[:, 2 * j, n + j] = self.sigma_r * np.cos(phi)
        jac[:, 2 * j + 1, n + j] = self.sigma_r * np.sin(phi)
        return jac

    def analytic_jacobian(self, z):
        return np.einsum("ij,bjk->bik", self.rotation, self.cartesian_jacobian(z)) / self.scale

    def encode(self, x):
        """Exact inverse on the torus image (valid for |phi| < pi and r > 0)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = (x * self.scale + self.shift) @ self.rotation
        a, c = y[:, 0::2], y[:, 1::2]
        phi = np.arctan2(c, a)
        r = np.hypot(a, c)
        return np.concatenate([phi / self.sigma_phi, (r - 1.0) / self.sigma_r], axis=1)

    @property
    def core(self) -> tuple[int, ...]:
        return tuple(range(self.n_pairs))


class FlowDecoder(Decoder):
    """Decoder backed by a :class:`FlowModel` (``g = f^{-1}``)."""

    name = "flow"
    has_encoder = True

    def __init__(self, model: FlowModel, name: str | None = None):
        super().__init__(model.dim, model.dim)
        self.model = model
        if name:
            self.name = name

    def torch_decode(self, z):
        return self.model.decode(z)

    def encode(self, x):
        with torch.no_grad():
            z, _ = self.model.encode(torch.as_tensor(np.atleast_2d(x), dtype=DTYPE))
        return z.numpy()

    def encode_with_logdet(self, x):
        with torch.no_grad():
            z, ld = self.model.encode(torch.as_tensor(np.atleast_2d(x), dtype=DTYPE))
        return z.numpy(), ld.numpy()


_MLP_ACTIVATIONS = {
    "linear": lambda h: h,
    "tanh": torch.tanh,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "softplus": torch.nn.functional.softplus,
    "silu": torch.nn.functional.silu,
    "elu": torch.nn.functional.elu,
}


class MlpDecoder(Decoder):
    """Plain MLP decoder; ``activation`` applies to hidden layers only."""

    name = "mlp"

    def __init__(self, weights, biases, activation="tanh", output_activation="linear"):
        for tag in (activation, output_activation):
            if tag not in _MLP_ACTIVATIONS:
                raise FormatError(f"unknown activation {tag!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise FormatError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise FormatError(f"layer {i}: bias shape {b.shape} does not match weight shape {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise FormatError(f"layer {i}: input width {w.shape[1]} != previous output "
                                  f"{self.weights[i - 1].shape[0]}")
        super().__init__(self.weights[0].shape[1], self.weights[-1].shape[0])
        self.activation = activation
        self.output_activation = output_activation
        self._w_t = [torch.from_numpy(w) for w in self.weights]
        self._b_t = [torch.from_numpy(b) for b in self.biases]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def random(cls, widths, activation="tanh", output_activation="linear", seed=0, gain=1.0):
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            ws.append(gain * rng.standard_normal((b, a)) / math.sqrt(a))
            bs.append(0.1 * rng.standard_normal(b))
        return cls(ws, bs, activation, output_activation)

    def torch_decode(self, z):
        h = z
        act = _MLP_ACTIVATIONS[self.activation]
        for w, b in zip(self._w_t[:-1], self._b_t[:-1]):
            h = act(h @ w.T + b)
        return _MLP_ACTIVATIONS[self.output_activation](h @ self._w_t[-1].T + self._b_t[-1])


MLP_MAGIC = b"MMMLP\x00\x00\x01"
MLP_FORMAT_VERSION = 1


def _pack_tag(tag: str) -> bytes:
    raw = tag.encode("ascii")
    return struct.pack("<I", len(raw)) + raw


def save_mlp_decoder(decoder: MlpDecoder, path) -> None:
    """Binary layout (all little endian).

    magic (8 bytes) | version u32 | n_widths u32 | widths u32 x n |
    activation tag (u32 length + ASCII) | output tag (same) |
    per layer: weight (out x in, row-major f64) then bias (out f64).
    """
    buf = io.BytesIO()
    widths = decoder.widths
    buf.write(MLP_MAGIC)
    buf.write(struct.pack("<II", MLP_FORMAT_VERSION, len(widths)))
    buf.write(struct.pack(f"<{len(widths)}I", *widths))
    buf.write(_pack_tag(decoder.activation))
    buf.write(_pack_tag(decoder.output_activation))
    for w, b in zip(decoder.weights, decoder.biases):
        buf.write(w.astype("<f8").tobytes(order="C"))
        buf.write(b.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_mlp_decoder(path) -> MlpDecoder:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MLP_MAGIC:
        raise FormatError(f"{path}: not an MLP decoder file (bad magic)")
    version, n = struct.unpack("<II", take(8))
    if version != MLP_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if n < 2:
        raise FormatError(f"{path}: need at least two widths")
    widths = struct.unpack(f"<{n}I", take(4 * n))
    tags = []
    for _ in range(2):
        (length,) = struct.unpack("<I", take(4))
        tags.append(take(length).decode("ascii", errors="replace"))
    ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        ws.append(np.frombuffer(take(8 * a * b), dtype="<f8").reshape(b, a).astype(np.float64))
        bs.append(np.frombuffer(take(8 * b), dtype="<f8").astype(np.float64))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes (shape mismatch?)")
    return MlpDecoder(ws, bs, tags[0], tags[1])


class ExternalDecoder(Decoder):
    """Wraps an opaque numpy callable; Jacobians by central differences only."""

    name = "external"
    supports_autodiff = False

    def __init__(self, fn, latent_dim, data_dim, name="external", step=FD_STEP):
        super().__init__(latent_dim, data_dim)
        self.fn = fn
        self.name = name
        self.step = step

    def decode(self, z):
        z2, single = self._check_z(z)
        return self._finish(np.asarray(self.fn(z2), dtype=np.float64), single)

    def _fd_jacobian(self, z2, cols, step=None):
        return super()._fd_jacobian(z2, cols, self.step if step is None else step)


class RotatedDecoder(Decoder):
    """``Q g(z)`` for a fixed orthogonal ``Q`` acting in data space."""

    def __init__(self, base: Decoder, q):
        super().__init__(base.latent_dim, base.data_dim)
        self.base = base
        self.q = np.asarray(q, dtype=np.float64)
        self._q_t = torch.from_numpy(self.q)
        self.name = f"rotated({base.name})"
        self.has_analytic_jacobian = base.has_analytic_jacobian
        self.supports_autodiff = base.supports_autodiff

    def torch_decode(self, z):
        return self.base.torch_decode(z) @ self._q_t.T

    def decode(self, z):
        z2, single = self._check_z(z)
        return self._finish(self.base.decode(z2) @ self.q.T, single)

    def analytic_jacobian(self, z):
        return np.einsum("ij,bjk->bik", self.q, self.base.analytic_jacobian(z))


class LatentPermutedDecoder(Decoder):
    """``g(P z)``: latent coordinate ``k`` of this decoder feeds coordinate ``perm[k]`` of the base.

    Column ``k`` of the Jacobian equals column ``perm[k]`` of the base Jacobian.
    """

    def __init__(self, base: Decoder, perm):
        super().__init__(base.latent_dim, base.data_dim)
        self.base = base
        self.perm = np.asarray(perm, dtype=int)
        if sorted(self.perm.tolist()) != list(range(base.latent_dim)):
            raise DimensionError("not a permutation of the latent coordinates")
        self._inv = np.argsort(self.perm)
        self.name = f"permuted({base.name})"
        self.has_analytic_jacobian = base.has_analytic_jacobian
        self.supports_autodiff = base.supports_autodiff
        self.has_encoder = base.has_encoder

    def _to_base(self, z):
        # base input coordinate perm[k] receives our coordinate k
        return z[:, self._inv]

    def torch_decode(self, z):
        return self.base.torch_decode(z[:, torch.as_tensor(self._inv)])

    def decode(self, z):
        z2, single = self._check_z(z)
        return self._finish(self.base.decode(self._to_base(z2)), single)

    def analytic_jacobian(self, z):
        return self.base.analytic_jacobian(self._to_base(z))[:, :, self.perm]

    def encode(self, x):
        return self.base.encode(x)[:, self.perm]


# ---------------------------------------------------------------------------
# Batched Jacobians
# ---------------------------------------------------------------------------

class JacobianBatch:
    """Per-sample Jacobians ``(B, Dx, Dz)`` with Gram log-volume queries."""

    def __init__(self, jac, z=None, decoder_name="decoder", mode="analytic"):
        jac = np.asarray(jac, dtype=np.float64)
        if jac.ndim != 3:
            raise DimensionError("JacobianBatch needs a (B, Dx, Dz) array")
        self.jac = jac
        self.z = None if z is None else np.asarray(z, dtype=np.float64)
        self.decoder_name = decoder_name
        self.mode = mode
        self._cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def size(self) -> int:
        return self.jac.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.jac.shape[2]

    @property
    def data_dim(self) -> int:
        return self.jac.shape[1]

    def columns(self, s) -> np.ndarray:
        return self.jac[:, :, list(s)]

    def log_volume(self, s=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample ``log|J_S|`` and degenerate flags (``nan`` where degenerate)."""
        s = tuple(range(self.latent_dim)) if s is None else index_set(s, self.latent_dim)
        if s not in self._cache:
            self._cache[s] = numerics.gram_log_volumes(self.columns(s))
        return self._cache[s]

    def column_log_norms(self) -> np.ndarray:
        """``log|J_i|`` for every column, shape ``(B, Dz)``; ``nan`` for zero columns."""
        norms = np.linalg.norm(self.jac, axis=1)
        with np.errstate(divide="ignore"):
            out = np.log(norms)
        return np.where(norms > 0, out, np.nan)


def jacobian_batch(decoder: Decoder, z_batch, mode: str | None = None, chunk: int = 256,
                   workers: int = 1) -> JacobianBatch:
    """Jacobians for a batch of latent points.

    The batch is split into fixed-size chunks so results do not depend on
    ``workers``; chunks are reassembled in their original order.
    """
    z = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if z.shape[0] == 0:
        raise UsageError("empty batch")
    mode = mode or decoder.default_mode()
    starts = list(range(0, z.shape[0], chunk))

    def run(start):
        return decoder.jacobian(z[start:start + chunk], mode)

    if workers > 1 and len(starts) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return JacobianBatch(np.concatenate(parts, axis=0), z, decoder.name, mode)


def sample_prior(dim: int, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, dim))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca_fit(data) -> AffineDecoder:
    """Affine decoder ``A = U diag(lambda)^(1/2)``, ``b = mean`` from sample covariance.

    Eigenvalues are sorted descending; each eigenvector's largest-magnitude
    entry is made positive so the fit is deterministic.
    """
    x = np.asarray(data, dtype=np.float64)
    n, d = x.shape
    if n <= d:
        raise UsageError(f"PCA needs more samples than dimensions (N={n}, D={d})")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(d, d)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    if evals[-1] <= 1e-12 * max(evals[0], 1e-300):
        raise UsageError("covariance is rank deficient; PCA decoder would be degenerate")
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(d)])
    evecs = evecs * signs
    dec = AffineDecoder(evecs * np.sqrt(evals), mean)
    dec.name = "pca"
    dec.eigenvalues = evals
    return dec


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def builtin_decoder(spec: str) -> Decoder:
    """Resolve a builtin decoder name.

    ``identity:D`` | ``affine:diag:a,b,...`` | ``affine:matrix:a,b;c,d`` |
    ``torus`` (ground truth of the default torus dataset) | ``torus:raw`` |
    ``mlp:PATH`` | ``flow:PATH`` | a path to a flow checkpoint.
    """
    kind, _, rest = spec.partition(":")
    if kind == "identity":
        return identity_decoder(int(rest or 2))
    if kind == "affine":
        form, _, values = rest.partition(":")
        if form == "diag":
            dec = AffineDecoder(np.diag(_floats(values)))
        elif form == "matrix":
            dec = AffineDecoder(np.array([_floats(row) for row in values.split(";")]))
        else:
            raise UsageError(f"unknown affine form {form!r} (use diag or matrix)")
        dec.name = spec
        return dec
    if kind == "torus":
        from .dgp import TorusDatasetConfig, torus_decoder
        if rest == "raw":
            cfg = TorusDatasetConfig()
            dec = TorusDecoder(cfg.sigma_phi(), cfg.sigma_r())
            dec.name = "torus:raw"
            return dec
        dec = torus_decoder(TorusDatasetConfig())
        dec.name = "torus"
        return dec
    if kind == "mlp":
        dec = load_mlp_decoder(rest)
        dec.name = f"mlp:{Path(rest).name}"
        return dec
    if kind == "flow":
        return FlowDecoder(load_model(rest), name=f"flow:{Path(rest).name}")
    path = Path(spec)
    if path.exists():
        return FlowDecoder(load_model(path), name=path.name)
    raise UsageError(f"unknown decoder {spec!r}")


def torus_ground_truth_metrics(decoder: TorusDecoder, samples: int = 1000, seed: int = 0) -> dict:
    """Analytic-Jacobian Monte Carlo metrics of a torus decoder.

    Returns per-dimension manifold entropies, total entropy and total
    correlation (all :class:`~manifold_metrics.metrics.Estimate`).
    """
    from . import metrics

    if not decoder.has_analytic_jacobian:
        raise CapabilityError("torus ground truth needs the analytic Jacobian")
    report = metrics.evaluate(decoder, samples, seed, pairs=False, mode="analytic")
    return {"entropies": report.entropies, "total_entropy": report.total_entropy,
            "total_correlation": report.total_correlation}
