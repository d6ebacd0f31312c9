"""Maximum-likelihood flow training with total-correlation or reconstruction regularizers.

Loss modes:

* ``ml``      ``L = 1/2 |f(x)|^2 - log|df/dx|``
* ``ml+mtc``  ``L + lam * (sum_S log|J_S(f(x))| + log|df/dx|)``
* ``ml+rec``  ``L + lam * 1/2 |x - g([f_C(x), 0])|^2``

The total-correlation term builds decoder Jacobian rows with one reverse
pass over a row-replicated batch and keeps that graph, so a second reverse
pass carries its gradient back to the parameters.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .decoders import index_set, partition, singletons
from .errors import DivergenceError, TrainingError, UsageError
from .flows import DTYPE, FlowModel, save_model

LOSS_MODES = ("ml", "ml+mtc", "ml+rec")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3
# a column counts as degenerate during training when its norm falls below this
TRAIN_COLUMN_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _as_batch(x):
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() != 2 or x.shape[0] == 0:
        raise UsageError("expected a nonempty (B, D) batch")
    return x


def _finite(loss, what, batch_index=None):
    if not torch.isfinite(loss):
        where = "" if batch_index is None else f" at batch {batch_index}"
        raise TrainingError(f"non-finite {what}{where}")
    return loss


def _nll(z, logdet, batch_index=None):
    return _finite((0.5 * z.pow(2).sum(dim=1) - logdet).mean(), "NLL", batch_index)


def nll_loss(model: FlowModel, x_batch, batch_index=None) -> torch.Tensor:
    """Batch mean of ``1/2 |f(x)|^2 - log|df/dx|`` (the ``D/2 log 2pi`` constant is omitted)."""
    return _nll(*model.encode(_as_batch(x_batch)), batch_index)


def decoder_columns(model: FlowModel, z: torch.Tensor, columns=None) -> torch.Tensor:
    """Decoder Jacobian columns at ``z`` as ``(B, D, |columns|)``, differentiable wrt parameters and ``z``.

    The batch is replicated once per output coordinate and a single reverse
    pass returns every Jacobian row; the graph is kept for double backward.
    """
    b, d = z.shape
    with torch.enable_grad():
        if not z.requires_grad:
            z = z.detach().requires_grad_(True)
        z_rep = z.repeat(d, 1)
        x = model.decode(z_rep)
        pick = torch.eye(d, dtype=z.dtype).repeat_interleave(b, dim=0)
        (rows,) = torch.autograd.grad((x * pick).sum(), z_rep, create_graph=True)
    # rows[k * B + n, j] = dg_k/dz_j at sample n
    jac = rows.reshape(d, b, d).permute(1, 0, 2)
    return jac if columns is None else jac[:, :, list(columns)]


def mtc_integrand(model: FlowModel, x_batch, parts=None, encoded=None):
    """Per-sample ``sum_S log|J_S(f(x))| - log|J(f(x))|`` and a degenerate-sample mask.

    ``encoded`` may carry an already computed ``(z, log|df/dx|)`` for ``x_batch``.
    """
    x = _as_batch(x_batch)
    parts = singletons(model.dim) if parts is None else partition(parts, model.dim)
    z, logdet_f = model.encode(x) if encoded is None else encoded
    jac = decoder_columns(model, z)
    total = torch.zeros_like(logdet_f)
    bad = torch.zeros(x.shape[0], dtype=torch.bool)
    for s in parts:
        block = jac[:, :, list(s)]
        if len(s) == 1:
            norm = torch.linalg.vector_norm(block[:, :, 0], dim=1)
            bad = bad | (norm <= TRAIN_COLUMN_FLOOR)
            total = total + torch.log(torch.clamp(norm, min=TRAIN_COLUMN_FLOOR))
        else:
            r = torch.linalg.qr(block, mode="r")[1]
            diag = torch.diagonal(r, dim1=-2, dim2=-1).abs()
            bad = bad | (diag <= TRAIN_COLUMN_FLOOR).any(dim=1)
            total = total + torch.log(torch.clamp(diag, min=TRAIN_COLUMN_FLOOR)).sum(dim=1)
    # -log|J_g(z)| = log|J_f(x)|, taken from the analytic flow log-determinant
    return total + logdet_f, bad


def mtc_regularizer(model: FlowModel, x_batch, parts=None, batch_index=None, return_skipped=False, encoded=None):
    """Batch mean of the per-sample total-correlation integrand at ``z = f(x)``.

    Samples with a degenerate column are skipped; their count is returned
    when ``return_skipped`` is set.
    """
    values, bad = mtc_integrand(model, x_batch, parts, encoded)
    keep = ~bad
    if not bool(keep.any()):
        raise TrainingError("every sample in the batch has a degenerate Jacobian column")
    reg = _finite(values[keep].mean(), "total-correlation regularizer", batch_index)
    return (reg, int(bad.sum())) if return_skipped else reg


def reconstruction_loss(model: FlowModel, x_batch, core, batch_index=None, encoded=None) -> torch.Tensor:
    """Batch mean of ``1/2 |x - g(z_C, 0)|^2`` with ``z = f(x)``; ``core`` is 0-based."""
    x = _as_batch(x_batch)
    core = index_set(core, model.dim)
    if len(core) == model.dim:
        raise UsageError("core set must be a proper subset")
    mask = torch.zeros(model.dim, dtype=DTYPE)
    mask[list(core)] = 1.0
    z = model.encode(x)[0] if encoded is None else encoded[0]
    x_rec = model.decode(z * mask)
    return _finite((0.5 * (x - x_rec).pow(2).sum(dim=1)).mean(), "reconstruction loss", batch_index)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    rejected: int = 0


def adam_step(params, grads, state: AdamState, hyper: AdamHyper, lr: float | None = None) -> bool:
    """Bias-corrected Adam update applied in place.

    A step whose gradients are not all finite is rejected (parameters and
    moments untouched) and counted in ``state.rejected``.  Returns whether
    the step was applied.
    """
    params = list(params)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if not all(bool(torch.all(torch.isfinite(g))) for g in grads):
        state.rejected += 1
        return False
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    lr = hyper.lr if lr is None else lr
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps))
    return True


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads if g is not None))
    if max_norm > 0 and norm > max_norm and math.isfinite(norm):
        for g in grads:
            if g is not None:
                g.mul_(max_norm / norm)
    return norm


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Architecture, objective and optimizer settings.

    ``core`` is a 0-based index set used by ``ml+rec``; ``parts`` (0-based
    partition, default singletons) by ``ml+mtc``.  ``mtc_batch`` > 0
    evaluates the total-correlation term on only the first that many rows
    of each (already shuffled) batch; 0 uses the whole batch.
    """

    mode: str = "ml"
    lam: float = 0.0
    core: list | None = None
    parts: list | None = None
    blocks: int = 8
    bins: int = 4
    tail_bound: float = 4.0
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    mtc_batch: int = 0
    iterations: int = 3000
    clip_norm: float = 10.0
    seed: int = 0
    checkpoint_every: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise UsageError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")
        if self.lam < 0:
            raise UsageError("regularizer weight must be >= 0")
        if self.mode == "ml+rec" and not self.core:
            raise UsageError("ml+rec needs a core index set")
        if self.batch_size < 1 or self.iterations < 1:
            raise UsageError("batch_size and iterations must be positive")
        if self.mtc_batch < 0:
            raise UsageError("mtc_batch must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    reg: list = field(default_factory=list)
    total: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    rejected_steps: int = 0
    skipped_samples: int = 0

    def append(self, epoch, nll, reg, total, grad_norm, seconds):
        for name, v in zip(("epoch", "nll", "reg", "total", "grad_norm", "seconds"),
                           (epoch, nll, reg, total, grad_norm, seconds)):
            getattr(self, name).append(v)

    def to_csv(self, wall_time: bool = True) -> str:
        """Columns ``epoch, nll, reg, total, grad_norm[, seconds]``.

        ``wall_time=False`` drops the timing column so the file is a pure
        function of the configuration.
        """
        from .metrics import format_float

        names = ["epoch", "nll", "reg", "total", "grad_norm"] + (["seconds"] if wall_time else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(getattr(self, k) for k in names)):
            w.writerow([row[0]] + [format_float(v) for v in row[1:]])
        return buf.getvalue()


def build_model(config: TrainConfig, data: np.ndarray) -> FlowModel:
    """Fresh identity-initialized flow with standardization frozen from ``data``.

    Standardization centres each coordinate and divides by one global scale
    so Gram-volume structure is preserved.
    """
    dim = data.shape[1]
    shift, scale = None, 1.0
    if config.standardize:
        shift = data.mean(axis=0)
        scale = float(np.sqrt(np.mean(data.var(axis=0))))
    return FlowModel.build(dim, config.blocks, config.bins, config.tail_bound, config.hidden, config.activation,
                           shift=shift, scale=scale, seed=config.seed)


def batch_loss(model, x, config: TrainConfig, batch_index=None):
    """Returns ``(total, nll, reg, skipped)``."""
    x = _as_batch(x)
    z, logdet = model.encode(x)
    nll = _nll(z, logdet, batch_index)
    skipped = 0
    if config.mode == "ml+mtc":
        k = config.mtc_batch or x.shape[0]
        reg, skipped = mtc_regularizer(model, x[:k], config.parts, batch_index, return_skipped=True,
                                       encoded=(z[:k], logdet[:k]))
    elif config.mode == "ml+rec":
        reg = reconstruction_loss(model, x, config.core, batch_index, encoded=(z, logdet))
    else:
        reg = torch.zeros((), dtype=DTYPE)
    return nll + config.lam * reg, nll, reg, skipped


def train(config: TrainConfig, data, out_dir=None, progress: Callable | None = None,
          model: FlowModel | None = None) -> tuple[FlowModel, TrainHistory]:
    """Train a flow on ``data`` (N x D).

    One epoch is a pass over a fresh seeded permutation of the data (the
    final partial batch is dropped when N exceeds the batch size).  Training
    stops after ``config.iterations`` optimizer steps.  If the epoch-mean NLL
    exceeds ``initial + 9 * max(|initial|, 1)`` for three consecutive
    epochs, :class:`DivergenceError` is raised with the history so far.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise UsageError("training data must be an (N, D) array with N >= 2")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(config, data) if model is None else model
    params = [p for p in model.parameters() if p.requires_grad]
    hyper = AdamHyper(config.lr, config.beta1, config.beta2, config.eps)
    state = AdamState()
    history = TrainHistory()
    x_all = torch.from_numpy(data)
    n = data.shape[0]
    bs = min(config.batch_size, n)
    per_epoch = max(n // bs, 1)

    with torch.no_grad():
        initial = float(nll_loss(model, x_all[: min(n, 4096)]))
    threshold = initial + (DIVERGENCE_FACTOR - 1.0) * max(abs(initial), 1.0)
    above = 0
    step = 0
    epoch = 0
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    while step < config.iterations:
        epoch += 1
        perm = rng.permutation(n)
        sums = np.zeros(4)
        count = 0
        for b in range(per_epoch):
            if step >= config.iterations:
                break
            idx = torch.from_numpy(perm[b * bs:(b + 1) * bs])
            x = x_all.index_select(0, idx)
            total, nll, reg, skipped = batch_loss(model, x, config, batch_index=step)
            grads = torch.autograd.grad(total, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            gnorm = clip_global_norm(grads, config.clip_norm)
            adam_step(params, grads, state, hyper, cosine_lr(config.lr, step, config.iterations))
            history.skipped_samples += skipped
            step += 1
            sums += (float(nll.detach()), float(reg.detach()), float(total.detach()), gnorm)
            count += 1
        means = sums / max(count, 1)
        history.append(epoch, means[0], means[1], means[2], means[3], time.perf_counter() - start)
        history.rejected_steps = state.rejected
        if progress is not None:
            progress(epoch, step, means)
        above = above + 1 if means[0] > threshold else 0
        if above >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"NLL {means[0]:.4g} above divergence threshold {threshold:.4g} for "
                f"{DIVERGENCE_PATIENCE} consecutive epochs (epoch {epoch})", history)
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            save_model(model, out / f"checkpoint_epoch{epoch:05d}.flow")
    return model, history
