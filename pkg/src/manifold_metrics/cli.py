"""Command-line entry point: ``manifold-metrics {generate|train|eval|compare|convergence}``.

Runs are described by a JSON manifest; flags override individual fields.
Every run writes ``resolved_manifest.json`` beside its outputs, which
reproduces the run when passed back via ``--manifest``.

Exit codes: 0 success, 1 usage error, 2 numerical/degenerate failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, svg
from .decoders import FlowDecoder, builtin_decoder
from .dgp import TorusDatasetConfig, TwoMoonsConfig, sample_torus, sample_two_moons, two_moons_arc_distance
from .errors import (CapabilityError, DegenerateJacobianError, DivergenceError, EstimationError,
                     EvaluationError, FormatError, ManifoldMetricsError, TrainingError, UsageError)
from .flows import load_model, save_model
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "MANIFOLD_METRICS_OUT"
COMMANDS = ("generate", "train", "eval", "compare", "convergence")

TOP_KEYS = {"command", "dataset", "train", "model", "model_a", "model_b", "metrics", "convergence", "out", "seed",
            "svg"}
DATASET_KEYS = {"two_moons": {"kind", "n_samples", "noise", "seed"},
                "torus": {"kind", "n_samples", "seed", "rotation_seed", "sigma_phi", "sigma_r", "normalize"}}
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
METRIC_KEYS = {"samples", "seed", "pairs", "mode", "source", "workers", "parts"}
CONVERGENCE_KEYS = {"metric", "dim", "sizes", "repeats"}

DEFAULT_METRICS = {"samples": metrics.DEFAULT_SAMPLES, "pairs": True, "mode": None, "source": "prior",
                   "workers": 1, "parts": None}
DEFAULT_CONVERGENCE = {"metric": "entropy", "dim": 1, "sizes": [100, 1000], "repeats": 10}


# ---------------------------------------------------------------------------
# Manifest handling
# ---------------------------------------------------------------------------

def _check_keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise UsageError(f"{where} must be a mapping")
    for key in section:
        if key not in allowed:
            raise UsageError(f"unknown key {key!r} in {where}")


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    _check_keys(manifest, TOP_KEYS, "manifest")
    manifest["_base"] = str(path.resolve().parent)
    return manifest


def _resolve_path(manifest, value):
    p = Path(value)
    if not p.is_absolute() and "_base" in manifest and not p.exists():
        cand = Path(manifest["_base"]) / p
        if cand.exists():
            return str(cand)
    return str(p)


def dataset_from_manifest(manifest):
    """Build ``(x, z_gt or None, ground-truth decoder or None, config)`` from the dataset section."""
    ds = manifest.get("dataset")
    if ds is None:
        raise UsageError("manifest has no dataset section")
    kind = ds.get("kind")
    if kind not in DATASET_KEYS:
        raise UsageError(f"unknown dataset kind {kind!r}; choose from {sorted(DATASET_KEYS)}")
    _check_keys(ds, DATASET_KEYS[kind], "dataset")
    if kind == "two_moons":
        cfg = TwoMoonsConfig(int(ds.get("n_samples", 10_000)), float(ds.get("noise", 0.1)), int(ds.get("seed", 0)))
        return sample_two_moons(cfg), None, None, cfg
    cfg = TorusDatasetConfig(int(ds.get("n_samples", 10_000)), int(ds.get("seed", 0)),
                             int(ds.get("rotation_seed", 1234)),
                             sigma_phi_override=ds.get("sigma_phi"), sigma_r_override=ds.get("sigma_r"),
                             normalize=bool(ds.get("normalize", True)))
    x, z, dec = sample_torus(cfg)
    dec.name = "ground-truth"
    return x, z, dec, cfg


def _metric_settings(manifest, args):
    m = dict(DEFAULT_METRICS)
    sec = manifest.get("metrics", {})
    _check_keys(sec, METRIC_KEYS, "metrics")
    m.update(sec)
    m["seed"] = sec.get("seed", manifest.get("seed", 0))
    if args.samples is not None:
        m["samples"] = args.samples
    if args.seed is not None:
        m["seed"] = args.seed
    if args.workers is not None:
        m["workers"] = args.workers
    return m


def _spec_path(manifest, spec):
    """Manifest-relative checkpoint paths become absolute so resolved manifests stay valid."""
    kind, sep, rest = spec.partition(":")
    if sep and kind in ("flow", "mlp"):
        return f"{kind}:{Path(_resolve_path(manifest, rest)).resolve()}"
    resolved = Path(_resolve_path(manifest, spec))
    return str(resolved.resolve()) if resolved.exists() else spec


def _decoder(manifest, spec, dataset_cache):
    if spec in ("ground-truth", "gt"):
        if dataset_cache.get("gt") is None:
            x, z, gt, _ = dataset_from_manifest(manifest)
            if gt is None:
                raise UsageError("ground-truth decoder is only available for the torus dataset")
            dataset_cache.update(x=x, z=z, gt=gt)
        return dataset_cache["gt"]
    spec = _spec_path(manifest, spec)
    if Path(spec).exists():
        return FlowDecoder(load_model(spec), name=Path(spec).name)
    return builtin_decoder(spec)


def _parts(spec, dim):
    if spec is None:
        return None
    return [[i - 1 for i in s] for s in spec]


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _out_dir(manifest, args, command) -> Path:
    if args.out:
        out = Path(args.out)
    elif manifest.get("out"):
        out = Path(manifest["out"])
        if not out.is_absolute() and "_base" in manifest:
            out = Path(os.getcwd()) / out
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")


def _write_resolved(out: Path, manifest: dict, command: str):
    resolved = {k: v for k, v in manifest.items() if not k.startswith("_")}
    resolved["command"] = command
    resolved["out"] = str(out)
    _write(out / "resolved_manifest.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([metrics.format_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _say(args, text):
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(manifest, args) -> int:
    x, z, gt, cfg = dataset_from_manifest(manifest)
    out = _out_dir(manifest, args, "generate")
    summary = {"kind": manifest["dataset"]["kind"], "n_samples": int(x.shape[0]), "dims": int(x.shape[1]),
               "mean": x.mean(axis=0).tolist(), "std": x.std(axis=0, ddof=1).tolist()}
    if gt is not None:
        summary.update(sigma_phi=gt.sigma_phi.tolist(), sigma_r=gt.sigma_r.tolist(),
                       rotation=gt.rotation.tolist(), shift=gt.shift.tolist(), scale=gt.scale,
                       latent_mean=z.mean(axis=0).tolist(), latent_std=z.std(axis=0, ddof=1).tolist())
    else:
        resid = two_moons_arc_distance(x)
        summary.update(noise=cfg.noise, arc_residual_std=float(np.sqrt(np.mean(resid ** 2))))
    _write(out / "dataset_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, manifest, "generate")
    _say(args, f"wrote {out / 'dataset_summary.json'}")
    return EXIT_OK


def _train_config(manifest, args) -> TrainConfig:
    sec = dict(manifest.get("train", {}))
    _check_keys(sec, TRAIN_KEYS, "train")
    sec.setdefault("seed", manifest.get("seed", 0))
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.iterations is not None:
        sec["iterations"] = args.iterations
    if sec.get("core") is not None:
        sec["core"] = [i - 1 for i in sec["core"]]
    if sec.get("parts") is not None:
        sec["parts"] = _parts(sec["parts"], None)
    try:
        return TrainConfig(**sec)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _write_history(out: Path, history):
    # wall time lives outside the CSV so every CSV is reproducible byte for byte
    _write(out / "history.csv", history.to_csv(wall_time=False))
    timing = {"epoch": history.epoch, "seconds": history.seconds, "rejected_steps": history.rejected_steps,
              "skipped_samples": history.skipped_samples}
    _write(out / "timing.json", json.dumps(timing, indent=2) + "\n")


def cmd_train(manifest, args) -> int:
    x, _, _, _ = dataset_from_manifest(manifest)
    config = _train_config(manifest, args)
    out = _out_dir(manifest, args, "train")
    resolved = copy.deepcopy(manifest)
    train_sec = config.to_dict()
    if train_sec["core"] is not None:
        train_sec["core"] = [i + 1 for i in train_sec["core"]]
    if train_sec["parts"] is not None:
        train_sec["parts"] = [[i + 1 for i in s] for s in train_sec["parts"]]
    resolved["train"] = train_sec
    _write_resolved(out, resolved, "train")

    def progress(epoch, step, means):
        if args.verbose:
            print(f"epoch {epoch} step {step} nll {means[0]:.5f} reg {means[1]:.5f}", file=sys.stderr)

    try:
        model, history = train(config, x, out_dir=out, progress=progress)
    except DivergenceError as exc:
        if exc.history is not None:
            _write_history(out, exc.history)
        raise
    save_model(model, out / "model.flow")
    _write_history(out, history)
    report = metrics.evaluate(FlowDecoder(model, "model.flow"), metrics.DEFAULT_SAMPLES, config.seed, pairs=False)
    _write(out / "summary.csv", report.summary_csv())
    _write(out / "spectrum.csv", report.spectrum_csv())
    _say(args, f"wrote {out / 'model.flow'}; total correlation {report.total_correlation.value / report.dim:.4f} "
               "nats/dim")
    return EXIT_OK


def cmd_eval(manifest, args) -> int:
    spec = args.decoder or manifest.get("model")
    if spec:
        spec = _spec_path(manifest, spec)
    if not spec:
        raise UsageError("eval needs a decoder (--decoder or manifest 'model')")
    m = _metric_settings(manifest, args)
    cache: dict = {}
    dec = _decoder(manifest, spec, cache)
    data = None
    if m["source"] == "encoder":
        data = cache.get("x")
        if data is None:
            data = dataset_from_manifest(manifest)[0]
    report = metrics.evaluate(dec, int(m["samples"]), int(m["seed"]), pairs=bool(m["pairs"]),
                              parts=_parts(m["parts"], dec.latent_dim), mode=m["mode"], source=m["source"],
                              data=data, workers=int(m["workers"]))
    out = _out_dir(manifest, args, "eval")
    resolved = dict(manifest, model=spec, metrics=m)
    _write_resolved(out, resolved, "eval")
    _write(out / "summary.csv", report.summary_csv())
    _write(out / "spectrum.csv", report.spectrum_csv())
    _write(out / "report.json", report.to_json())
    if report.mpmi is not None:
        _write(out / "mpmi.csv", metrics.matrix_csv(report.mpmi.value))
    if args.svg or manifest.get("svg"):
        order = report.order()
        svg.spectrum_svg({dec.name: [report.entropies[i].value for i in order]}, out / "spectrum.svg",
                         title=f"manifold entropy spectrum: {dec.name}")
        if report.mpmi is not None:
            labels = [str(i + 1) for i in order]
            svg.heatmap_svg(report.mpmi.value[np.ix_(order, order)], out / "mpmi.svg", "pairwise manifold MI",
                            labels, labels)
    _say(args, f"H = {report.total_entropy.value:.6f} +- {report.total_entropy.stderr:.2g}; "
               f"total correlation = {report.total_correlation.value:.6f} +- {report.total_correlation.stderr:.2g}")
    return EXIT_OK


def cmd_compare(manifest, args) -> int:
    spec_a = args.model_a or manifest.get("model_a")
    spec_b = args.model_b or manifest.get("model_b")
    if not spec_a or not spec_b:
        raise UsageError("compare needs model_a and model_b")
    spec_a, spec_b = _spec_path(manifest, spec_a), _spec_path(manifest, spec_b)
    m = _metric_settings(manifest, args)
    cache: dict = {}
    dec_a = _decoder(manifest, spec_a, cache)
    dec_b = _decoder(manifest, spec_b, cache)
    if dec_a.latent_dim != dec_b.latent_dim:
        raise UsageError(f"latent dimensions differ: {dec_a.latent_dim} vs {dec_b.latent_dim}")
    z_gt = x = None
    if "gt" in cache and dec_a is cache["gt"] and dec_b.has_encoder:
        x, z_gt = cache["x"], cache["z"]
    report = metrics.compare(dec_a, dec_b, int(m["samples"]), int(m["seed"]), z_gt=z_gt, x=x,
                             workers=int(m["workers"]))
    out = _out_dir(manifest, args, "compare")
    _write_resolved(out, dict(manifest, model_a=spec_a, model_b=spec_b, metrics=m), "compare")
    labels = report.labels()
    _write(out / "mcpmi.csv", metrics.matrix_csv(report.sorted_mcpmi(), labels))
    _write(out / "report.json", report.to_json())
    if report.pearson is not None:
        _write(out / "pearson.csv", metrics.matrix_csv(report.pearson, labels))
    if args.svg or manifest.get("svg"):
        svg.heatmap_svg(report.sorted_mcpmi(), out / "mcpmi.svg", f"cross-model MI: {dec_a.name} vs {dec_b.name}",
                        *labels)
        if report.pearson is not None:
            svg.heatmap_svg(report.pearson, out / "pearson.svg", "squared Pearson correlation", *labels)
    dom = metrics.diagonal_dominance(report.sorted_mcpmi())
    _say(args, f"MCPMI diagonal dominance {dom:.3f}")
    return EXIT_OK


def cmd_convergence(manifest, args) -> int:
    spec = args.decoder or manifest.get("model")
    if spec:
        spec = _spec_path(manifest, spec)
    if not spec:
        raise UsageError("convergence needs a decoder (--decoder or manifest 'model')")
    sec = dict(DEFAULT_CONVERGENCE)
    user = manifest.get("convergence", {})
    _check_keys(user, CONVERGENCE_KEYS, "convergence")
    sec.update(user)
    seed = args.seed if args.seed is not None else manifest.get("seed", 0)
    dec = _decoder(manifest, spec, {})
    rows = metrics.convergence_diagnostic(dec, sec["metric"], [int(n) for n in sec["sizes"]], int(sec["repeats"]),
                                          int(seed), int(sec["dim"]) - 1)
    out = _out_dir(manifest, args, "convergence")
    _write_resolved(out, dict(manifest, model=spec, convergence=sec, seed=seed), "convergence")
    _write(out / "convergence.csv", _table_csv(["n", "mean", "std", "repeats"],
                                               [(r["n"], r["mean"], r["std"], r["repeats"]) for r in rows]))
    if args.svg or manifest.get("svg"):
        svg.convergence_svg(rows, out / "convergence.svg", f"{sec['metric']} convergence: {dec.name}")
    for r in rows:
        _say(args, f"N={r['n']}: mean {r['mean']:.6f} std {r['std']:.3g}")
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "convergence": cmd_convergence}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manifold-metrics", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--manifest", help="JSON run manifest")
    p.add_argument("--samples", type=int, help="Monte Carlo sample count B")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    p.add_argument("--svg", action="store_true", help="also emit SVG plots")
    p.add_argument("--decoder", help="decoder for eval/convergence: builtin name or checkpoint path")
    p.add_argument("--model-a", dest="model_a")
    p.add_argument("--model-b", dest="model_b")
    p.add_argument("--workers", type=int, help="threads for Jacobian evaluation (results do not depend on it)")
    p.add_argument("--iterations", type=int, help="override training iterations")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    torch.set_num_threads(1)
    try:
        manifest = load_manifest(args.manifest) if args.manifest else {}
        return HANDLERS[args.command](manifest, args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, FormatError, CapabilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateJacobianError, EstimationError, EvaluationError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ManifoldMetricsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
