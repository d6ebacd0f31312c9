"""Manifold entropic metrics estimated by Monte Carlo over decoder Jacobians.

All quantities are in nats.  With ``c = (1 + log 2pi) / 2``:

* manifold entropy      ``H(q_S) = |S| c + E_z[ log|J_S(z)| ]``
* total entropy         ``H(q)   = D c + E_z[ log|J(z)| ]``
* total correlation     ``I_P    = E_z[ sum_S log|J_S| - log|J| ]``
* pairwise MI           ``I_ij   = E_z[ log|J_i| + log|J_j| - log|J_ij| ]``
* cross-model pairwise  ``I^ab_ij`` with ``J_i`` from decoder ``a`` and ``J_j`` from ``b``

where ``log|M|`` is the Gram log-volume and ``z`` is drawn from the standard
normal prior (or pushed through an encoder, see ``source``).  Every
integrand is evaluated per sample on one shared batch, so additive
identities between estimates hold to rounding error.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .decoders import Decoder, JacobianBatch, index_set, jacobian_batch, partition, singletons
from .errors import CapabilityError, EstimationError, UsageError

GAUSS_ENTROPY = 0.5 * (1.0 + math.log(2.0 * math.pi))
LOG_2PI = math.log(2.0 * math.pi)
MAX_EXCLUDED_FRACTION = 0.01
# a column pair counts as collinear when 1 - cos^2 < COLLINEAR_TOL
COLLINEAR_TOL = 1e-12
DEFAULT_SAMPLES = 1000
SAMPLE_SOURCES = ("prior", "encoder")


@dataclass
class Estimate:
    """Monte Carlo mean with standard error ``std / sqrt(n)``."""

    value: float
    stderr: float
    n: int
    excluded: int = 0

    def to_dict(self):
        return {"value": _json_float(self.value), "stderr": _json_float(self.stderr),
                "n": self.n, "excluded": self.excluded}


def _mean_estimate(values: np.ndarray, offset: float = 0.0, what: str = "estimate") -> Estimate:
    values = np.asarray(values, dtype=np.float64)
    bad = np.isnan(values)
    n_bad = int(bad.sum())
    total = values.size
    if n_bad == total:
        raise EstimationError(f"{what}: all {total} samples are degenerate")
    if n_bad > MAX_EXCLUDED_FRACTION * total:
        raise EstimationError(f"{what}: {n_bad} of {total} samples degenerate (limit 1%)")
    good = values[~bad]
    n = good.size
    if np.all(good == good[0]):
        # constant integrand (e.g. affine decoders): exact, no rounding noise in the mean
        return Estimate(float(good[0]) + offset, 0.0, n, n_bad)
    std = float(np.std(good, ddof=1))
    return Estimate(float(np.mean(good)) + offset, std / math.sqrt(n), n, n_bad)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_latents(decoder: Decoder, samples: int, seed: int, source: str = "prior", data=None) -> np.ndarray:
    """Latent evaluation points.

    ``prior`` draws ``z ~ N(0, I)``; ``encoder`` encodes ``samples`` rows of
    ``data`` chosen with the seed (the cross-entropy variant).
    """
    if samples < 2:
        raise UsageError("need at least two samples")
    rng = np.random.default_rng(seed)
    if source == "prior":
        return rng.standard_normal((samples, decoder.latent_dim))
    if source == "encoder":
        if not decoder.has_encoder:
            raise CapabilityError(f"{decoder.name} has no encoder for encoder-pushed sampling")
        if data is None:
            raise UsageError("encoder-pushed sampling needs data")
        data = np.asarray(data, dtype=np.float64)
        idx = rng.choice(data.shape[0], size=samples, replace=samples > data.shape[0])
        return decoder.encode(data[np.sort(idx)])
    raise UsageError(f"unknown sample source {source!r}; choose from {SAMPLE_SOURCES}")


def _jac(decoder, samples, seed, jac=None, mode=None, source="prior", data=None, workers=1) -> JacobianBatch:
    if jac is not None:
        return jac
    z = sample_latents(decoder, samples, seed, source, data)
    return jacobian_batch(decoder, z, mode=mode, workers=workers)


# ---------------------------------------------------------------------------
# Per-sample integrands
# ---------------------------------------------------------------------------

def volume_integrand(jac: JacobianBatch, s=None) -> np.ndarray:
    """Per-sample ``log|J_S|`` (``nan`` when degenerate)."""
    return jac.log_volume(s)[0]


def total_correlation_integrand(jac: JacobianBatch, parts=None) -> np.ndarray:
    parts = singletons(jac.latent_dim) if parts is None else partition(parts, jac.latent_dim)
    total = np.zeros(jac.size)
    for s in parts:
        total = total + volume_integrand(jac, s)
    return total - volume_integrand(jac)


def mutual_information_integrand(jac: JacobianBatch, s, t) -> np.ndarray:
    s, t = index_set(s, jac.latent_dim), index_set(t, jac.latent_dim)
    if set(s) & set(t):
        raise UsageError(f"index sets {s} and {t} overlap")
    return volume_integrand(jac, s) + volume_integrand(jac, t) - volume_integrand(jac, tuple(sorted(s + t)))


def _unit_columns(m: np.ndarray):
    norms = np.linalg.norm(m, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return m / norms[:, None, :], norms


def pair_integrands(ja: np.ndarray, jb: np.ndarray):
    """Pairwise MI integrands between every column of ``ja`` and every column of ``jb``.

    For unit columns ``a``, ``b`` the two-column Gram volume is
    ``|a| |b| |b_hat - (a_hat . b_hat) a_hat|``, so the integrand reduces to
    ``-log|b_hat - (a_hat . b_hat) a_hat| = -1/2 log(1 - cos^2)``.

    Returns ``(values, collinear)`` of shape ``(B, Da, Db)``.  Zero columns
    give ``nan``; collinear pairs give ``inf``.
    """
    ua, na = _unit_columns(ja)
    ub, nb = _unit_columns(jb)
    b, _, da = ja.shape
    db = jb.shape[2]
    out = np.empty((b, da, db))
    for i in range(da):
        a = ua[:, :, i:i + 1]
        cos = np.einsum("bx,bxj->bj", ua[:, :, i], ub)
        perp = ub - a * cos[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            out[:, i, :] = -np.log(np.linalg.norm(perp, axis=1))
    zero = (na == 0)[:, :, None] | (nb == 0)[:, None, :]
    collinear = ~zero & (out > -0.5 * math.log(COLLINEAR_TOL))
    out = np.where(zero, np.nan, np.where(collinear, np.inf, out))
    return out, collinear


@dataclass
class PairMatrix:
    """Pairwise-MI matrix with per-entry standard errors and exclusion counts.

    ``inf`` marks entries whose column pairs are collinear on more than 1% of
    samples; ``nan`` marks undefined entries (the MPMI diagonal).
    """

    value: np.ndarray
    stderr: np.ndarray
    excluded: np.ndarray
    n: int

    def to_dict(self):
        return {"value": _json_matrix(self.value), "stderr": _json_matrix(self.stderr),
                "excluded": self.excluded.tolist(), "n": self.n}


def _reduce_pairs(values: np.ndarray, collinear: np.ndarray, undefined_diagonal: bool) -> PairMatrix:
    b, da, db = values.shape
    value = np.empty((da, db))
    stderr = np.empty((da, db))
    excluded = np.zeros((da, db), dtype=int)
    for i in range(da):
        for j in range(db):
            if undefined_diagonal and i == j:
                value[i, j] = stderr[i, j] = np.nan
                continue
            col = values[:, i, j]
            n_col = int(collinear[:, i, j].sum())
            if n_col > MAX_EXCLUDED_FRACTION * b:
                value[i, j], stderr[i, j] = np.inf, np.nan
                excluded[i, j] = n_col
                continue
            est = _mean_estimate(np.where(np.isinf(col), np.nan, col), what=f"pair ({i + 1},{j + 1})")
            value[i, j], stderr[i, j], excluded[i, j] = est.value, est.stderr, est.excluded
    return PairMatrix(value, stderr, excluded, b)


# ---------------------------------------------------------------------------
# Public estimators
# ---------------------------------------------------------------------------

def total_entropy(decoder: Decoder | None = None, samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
                  jac: JacobianBatch | None = None, mode=None, source="prior", data=None, workers=1) -> Estimate:
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    return _mean_estimate(volume_integrand(jac), jac.latent_dim * GAUSS_ENTROPY, "total entropy")


def manifold_entropy(decoder: Decoder | None = None, s=(0,), samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
                     jac: JacobianBatch | None = None, mode=None, source="prior", data=None,
                     workers=1) -> Estimate:
    """``H(q_S)`` with the expectation over the full latent ``z``."""
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    s = index_set(s, jac.latent_dim)
    return _mean_estimate(volume_integrand(jac, s), len(s) * GAUSS_ENTROPY, f"manifold entropy {s}")


def me_order(entropies) -> np.ndarray:
    """Indices sorted by descending entropy; ties keep their original order."""
    return np.argsort(-np.asarray(entropies, dtype=np.float64), kind="stable")


def manifold_entropy_spectrum(decoder: Decoder | None = None, samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
                              jac=None, mode=None, source="prior", data=None,
                              workers=1) -> list[tuple[int, Estimate]]:
    """Singleton manifold entropies as ``(dimension, estimate)`` sorted descending (0-based dims)."""
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    ests = [manifold_entropy(s=(i,), jac=jac) for i in range(jac.latent_dim)]
    return [(int(i), ests[i]) for i in me_order([e.value for e in ests])]


def manifold_total_correlation(decoder: Decoder | None = None, parts=None, samples: int = DEFAULT_SAMPLES,
                               seed: int = 0, *, jac=None, mode=None, source="prior", data=None,
                               workers=1) -> Estimate:
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    return _mean_estimate(total_correlation_integrand(jac, parts), what="total correlation")


def manifold_mutual_information(decoder: Decoder | None = None, s=(0,), t=(1,), samples: int = DEFAULT_SAMPLES,
                                seed: int = 0, *, jac=None, mode=None, source="prior", data=None,
                                workers=1) -> Estimate:
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    return _mean_estimate(mutual_information_integrand(jac, s, t), what="mutual information")


def mpmi_matrix(decoder: Decoder | None = None, samples: int = DEFAULT_SAMPLES, seed: int = 0, *, jac=None,
                mode=None, source="prior", data=None, workers=1) -> PairMatrix:
    """Pairwise manifold MI within one model; the diagonal is undefined (``nan``)."""
    jac = _jac(decoder, samples, seed, jac, mode, source, data, workers)
    if jac.latent_dim < 2:
        raise UsageError("pairwise MI needs at least two latent dimensions")
    values, collinear = pair_integrands(jac.jac, jac.jac)
    return _reduce_pairs(values, collinear, undefined_diagonal=True)


def mcpmi_matrix(decoder_a: Decoder, decoder_b: Decoder, samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
                 mode_a=None, mode_b=None, z=None, workers=1) -> PairMatrix:
    """Cross-model pairwise MI; row ``i`` is column ``i`` of ``a``, column ``j`` is column ``j`` of ``b``.

    Both decoders are evaluated at the same prior samples.
    """
    if decoder_a.latent_dim != decoder_b.latent_dim:
        raise UsageError(f"latent dimensions differ: {decoder_a.latent_dim} vs {decoder_b.latent_dim}")
    if decoder_a.data_dim != decoder_b.data_dim:
        raise UsageError(f"data dimensions differ: {decoder_a.data_dim} vs {decoder_b.data_dim}")
    if z is None:
        z = sample_latents(decoder_a, samples, seed)
    ja = jacobian_batch(decoder_a, z, mode=mode_a, workers=workers)
    jb = jacobian_batch(decoder_b, z, mode=mode_b, workers=workers)
    values, collinear = pair_integrands(ja.jac, jb.jac)
    return _reduce_pairs(values, collinear, undefined_diagonal=False)


def manifold_log_density(decoder: Decoder, x, s=None, mode=None) -> np.ndarray:
    """``log p_S(z_S) - log|J_S(z)|`` at ``z = encode(x)``, one value per row of ``x``."""
    if not decoder.has_encoder:
        raise CapabilityError(f"{decoder.name} has no encoder; manifold density needs an invertible decoder")
    z = np.atleast_2d(decoder.encode(x))
    s = tuple(range(decoder.latent_dim)) if s is None else index_set(s, decoder.latent_dim)
    log_prior = -0.5 * np.sum(z[:, list(s)] ** 2, axis=1) - 0.5 * len(s) * LOG_2PI
    jac = jacobian_batch(decoder, z, mode=mode)
    return log_prior - volume_integrand(jac, s)


def pearson_cross_correlation(z_gt, z_pred, order=None, normalized: bool = True) -> np.ndarray:
    """Squared correlation ``R2[i, j]`` between ``z_gt[:, i]`` and ``z_pred[:, order[j]]``.

    ``normalized=True`` uses the full Pearson coefficient (centred, unit
    variance); ``False`` uses the raw second moment ``E[z_gt_i z_pred_j]``,
    which coincides with it for standardized latents.  Zero-variance
    predicted dimensions yield ``nan`` columns.
    """
    a = np.asarray(z_gt, dtype=np.float64)
    b = np.asarray(z_pred, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise UsageError("rows of ground-truth and predicted latents must be aligned")
    if order is not None:
        b = b[:, np.asarray(order)]
    if normalized:
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        sa = a.std(axis=0)
        sb = b.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (a.T @ b) / a.shape[0] / np.outer(sa, sb)
        r = np.where(np.outer(sa > 0, sb > 0), r, np.nan)
    else:
        r = (a.T @ b) / a.shape[0]
        r = np.where((b.std(axis=0) > 0)[None, :], r, np.nan)
    return r ** 2


def mean_jacobian_column(decoder: Decoder, i: int, samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
                         jac=None, mode=None) -> np.ndarray:
    jac = _jac(decoder, samples, seed, jac, mode)
    index_set((i,), jac.latent_dim)
    return jac.jac[:, :, i].mean(axis=0)


def latent_variance_spectrum(encoder, data) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension std of ``encoder(data)``; returns ``(order, std[order])`` descending."""
    z = np.asarray(encoder(np.asarray(data, dtype=np.float64)))
    std = z.std(axis=0, ddof=1)
    order = np.argsort(-std, kind="stable")
    return order, std[order]


def spectrum_rank_correlation(a, b) -> float:
    """Spearman rank correlation between two per-dimension spectra (same dimension order)."""
    return float(stats.spearmanr(a, b).statistic)


def diagonal_dominance(matrix) -> float:
    """Mean diagonal entry over mean off-diagonal entry (finite entries only on the off-diagonal)."""
    m = np.asarray(matrix, dtype=np.float64)
    diag = np.diagonal(m)
    off = m[~np.eye(m.shape[0], dtype=bool)]
    off = off[np.isfinite(off)]
    d = float(np.nanmean(diag))
    o = float(np.mean(off)) if off.size else 0.0
    if o <= 0:
        return math.inf if d > 0 else math.nan
    return d / o


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

METRIC_KINDS = ("entropy", "total_entropy", "total_correlation")


def _metric_value(decoder, kind, samples, seed, dim=0, mode=None):
    if kind == "entropy":
        return manifold_entropy(decoder, (dim,), samples, seed, mode=mode).value
    if kind == "total_entropy":
        return total_entropy(decoder, samples, seed, mode=mode).value
    if kind == "total_correlation":
        return manifold_total_correlation(decoder, None, samples, seed, mode=mode).value
    raise UsageError(f"unknown metric {kind!r}; choose from {METRIC_KINDS}")


def convergence_diagnostic(decoder: Decoder, kind: str = "entropy", sizes=(100, 1000), repeats: int = 10,
                           seed: int = 0, dim: int = 0, mode=None) -> list[dict]:
    """Mean and spread over ``repeats`` independent estimates at each sample size.

    Repeat ``r`` at size ``N`` uses the seed sequence ``(seed, N, r)``.
    """
    if repeats < 2:
        raise UsageError("convergence diagnostic needs at least two repeats")
    rows = []
    for n in sizes:
        vals = np.array([
            _metric_value(decoder, kind, int(n), np.random.SeedSequence([seed, int(n), r]).generate_state(1)[0],
                          dim, mode)
            for r in range(repeats)
        ])
        rows.append({"n": int(n), "mean": float(vals.mean()), "std": float(vals.std(ddof=1)),
                     "repeats": repeats})
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def format_float(v) -> str:
    """17 significant digits; ``inf``/``-inf``/``nan`` spelled out."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else format_float(v)


def _json_matrix(m):
    return [[_json_float(v) for v in row] for row in np.asarray(m)]


def matrix_csv(m, labels=None) -> str:
    """Dense matrix CSV with a header row of (1-based) column labels and a label column."""
    m = np.asarray(m, dtype=np.float64)
    rows_l = labels[0] if labels else [str(i + 1) for i in range(m.shape[0])]
    cols_l = labels[1] if labels else [str(j + 1) for j in range(m.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dim"] + list(cols_l))
    for lab, row in zip(rows_l, m):
        w.writerow([lab] + [format_float(v) for v in row])
    return buf.getvalue()


@dataclass
class MetricsReport:
    decoder: str
    samples: int
    seed: int
    source: str
    total_entropy: Estimate
    entropies: list[Estimate]
    total_correlation: Estimate
    mpmi: PairMatrix | None = None
    excluded: int = 0
    mode: str = ""

    @property
    def dim(self) -> int:
        return len(self.entropies)

    def order(self) -> np.ndarray:
        return me_order([e.value for e in self.entropies])

    def spectrum_csv(self) -> str:
        """Columns ``rank, dim, H, stderr``; ``dim`` is 1-based, rows sorted by descending ``H``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "dim", "H", "stderr"])
        for rank, i in enumerate(self.order(), start=1):
            e = self.entropies[i]
            w.writerow([rank, i + 1, format_float(e.value), format_float(e.stderr)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        """Columns ``metric, value, stderr, n, excluded``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "stderr", "n", "excluded"])
        for name, e in (("total_entropy", self.total_entropy), ("total_correlation", self.total_correlation)):
            w.writerow([name, format_float(e.value), format_float(e.stderr), e.n, e.excluded])
        tc = self.total_correlation.value / self.dim
        w.writerow(["total_correlation_per_dim", format_float(tc),
                    format_float(self.total_correlation.stderr / self.dim), self.total_correlation.n,
                    self.total_correlation.excluded])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "decoder": self.decoder, "samples": self.samples, "seed": self.seed, "source": self.source,
            "mode": self.mode, "dim": self.dim, "excluded": self.excluded,
            "total_entropy": self.total_entropy.to_dict(),
            "entropies": [e.to_dict() for e in self.entropies],
            "me_order": [int(i) + 1 for i in self.order()],
            "total_correlation": self.total_correlation.to_dict(),
            "total_correlation_per_dim": _json_float(self.total_correlation.value / self.dim),
            "mpmi": None if self.mpmi is None else self.mpmi.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class CrossReport:
    model_a: str
    model_b: str
    mcpmi: PairMatrix
    order_a: np.ndarray
    order_b: np.ndarray
    pearson: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def sorted_mcpmi(self) -> np.ndarray:
        return self.mcpmi.value[np.ix_(self.order_a, self.order_b)]

    def labels(self):
        return [str(i + 1) for i in self.order_a], [str(j + 1) for j in self.order_b]

    def to_dict(self) -> dict:
        out = {
            "model_a": self.model_a, "model_b": self.model_b,
            "order_a": [int(i) + 1 for i in self.order_a], "order_b": [int(i) + 1 for i in self.order_b],
            "mcpmi": self.mcpmi.to_dict(),
            "mcpmi_sorted": _json_matrix(self.sorted_mcpmi()),
            "mcpmi_diagonal_dominance": _json_float(diagonal_dominance(self.sorted_mcpmi())),
        }
        if self.pearson is not None:
            out["pearson_r2"] = _json_matrix(self.pearson)
            out["pearson_diagonal_dominance"] = _json_float(diagonal_dominance(self.pearson))
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(decoder: Decoder, samples: int = DEFAULT_SAMPLES, seed: int = 0, *, pairs: bool = True,
             parts=None, mode=None, source="prior", data=None, workers=1) -> MetricsReport:
    """All single-model metrics from one shared Jacobian batch.

    Samples degenerate for any of the involved index sets are excluded from
    every estimate, so ``sum_i H(q_i) - H(q) = I`` holds on the reported
    numbers up to rounding.
    """
    jac = _jac(decoder, samples, seed, None, mode, source, data, workers)
    d = jac.latent_dim
    parts = singletons(d) if parts is None else partition(parts, d)
    full = volume_integrand(jac)
    cols = np.stack([volume_integrand(jac, (i,)) for i in range(d)], axis=1)
    part_vals = [volume_integrand(jac, s) for s in parts]
    bad = np.isnan(full) | np.isnan(cols).any(axis=1) | np.any([np.isnan(p) for p in part_vals], axis=0)
    mask = np.where(bad, np.nan, 0.0)
    tot = _mean_estimate(full + mask, d * GAUSS_ENTROPY, "total entropy")
    ents = [_mean_estimate(cols[:, i] + mask, GAUSS_ENTROPY, f"manifold entropy ({i + 1})") for i in range(d)]
    tc = _mean_estimate(np.sum(part_vals, axis=0) - full + mask, what="total correlation")
    mp = mpmi_matrix(jac=jac) if pairs and d >= 2 else None
    return MetricsReport(decoder.name, jac.size, seed, source, tot, ents, tc, mp, int(bad.sum()), jac.mode)


def compare(decoder_a: Decoder, decoder_b: Decoder, samples: int = DEFAULT_SAMPLES, seed: int = 0, *,
            z_gt=None, x=None, workers=1) -> CrossReport:
    """Cross-model report with both models' dimensions ME-sorted.

    If aligned ground-truth latents ``z_gt`` and data ``x`` are given and
    ``decoder_b`` has an encoder, the squared Pearson matrix between
    ``z_gt`` (sorted by ``a``'s ME) and ``encode_b(x)`` (sorted by ``b``'s ME)
    is included.
    """
    z = sample_latents(decoder_a, samples, seed)
    ja = jacobian_batch(decoder_a, z, workers=workers)
    jb = jacobian_batch(decoder_b, z, workers=workers)
    ha = [manifold_entropy(s=(i,), jac=ja).value for i in range(ja.latent_dim)]
    hb = [manifold_entropy(s=(i,), jac=jb).value for i in range(jb.latent_dim)]
    values, collinear = pair_integrands(ja.jac, jb.jac)
    pm = _reduce_pairs(values, collinear, undefined_diagonal=False)
    oa, ob = me_order(ha), me_order(hb)
    pearson = None
    if z_gt is not None and x is not None and decoder_b.has_encoder:
        pearson = pearson_cross_correlation(np.asarray(z_gt)[:, oa], decoder_b.encode(x), ob)
    extra = {"entropies_a": [_json_float(v) for v in ha], "entropies_b": [_json_float(v) for v in hb]}
    return CrossReport(decoder_a.name, decoder_b.name, pm, oa, ob, pearson, extra)
