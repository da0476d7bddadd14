"""Multi-run studies: parameter sweeps and data-fraction comparisons."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .config import TrainConfig, apply_overrides, save
from .data import DatasetManifest
from .pseudo import ComparisonReport, compare_base_vs_enhanced
from .training import TrainResult, train


@dataclass
class RunSummary:
    label: str
    seed: int
    baseline: bool
    n_train: int
    steps: int
    final_loss: float
    report: ComparisonReport

    @property
    def miou(self) -> float:
        """Score of the map a method actually produces: base CAM or enhanced CAM."""
        return self.report.base_miou if self.baseline else self.report.enhanced_miou


def run_once(manifest: DatasetManifest, config: TrainConfig, run_dir=None, baseline: bool = False,
             eval_manifest: DatasetManifest | None = None, write_maps: bool = True,
             label: str = "") -> tuple[TrainResult, RunSummary]:
    """Train, save the run directory and score pseudo-masks on ``eval_manifest``."""
    result = train(manifest, config, baseline=baseline)
    out = None
    if run_dir is not None:
        out = Path(run_dir)
        result.save(out)
        save(config, out / "config.txt")
    report = compare_base_vs_enhanced(result.state.params, result.state.backbone,
                                      eval_manifest or manifest, config,
                                      out_dir=out if write_maps else None)
    if out is not None:
        (out / "miou_base.csv").write_text(report.base.to_csv(manifest.class_names), encoding="utf-8")
        (out / "miou_enhanced.csv").write_text(report.enhanced.to_csv(manifest.class_names),
                                               encoding="utf-8")
    final = result.metrics[-1].L if result.metrics else float("nan")
    return result, RunSummary(label, config.seed, baseline, len(result.manifest),
                              len(result.metrics), final, report)


def parse_sweep(spec: str) -> tuple[str, list[str]]:
    """``"beta=0.1,0.3"`` -> ``("beta", ["0.1", "0.3"])``; commas inside brackets stay with their list."""
    key, sep, values = spec.partition("=")
    if not sep or not values.strip():
        raise ValueError(f"sweep {spec!r} is not key=v1,v2,...")
    parts, depth, cur = [], 0, ""
    for ch in values:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    parts.append(cur.strip())
    if any(not p for p in parts):
        raise ValueError(f"sweep {spec!r} has an empty value")
    return key.strip(), parts


SWEEP_FIELDS = ("key", "value", "seed", "n_train", "steps", "final_loss",
                "base_miou", "enhanced_miou", "delta")


def sweep(manifest: DatasetManifest, config: TrainConfig, key: str, values, seeds,
          out_dir, write_maps: bool = False, progress=None) -> list[dict]:
    """One RPNet run per (value, seed); rows follow ``SWEEP_FIELDS``."""
    out_dir = Path(out_dir)
    rows = []
    for value in values:
        cfg = apply_overrides(config, [(key, value)])
        cfg.validate()
        for seed in seeds:
            run_cfg = cfg.updated(seed=seed)
            name = f"{key}={value}".replace("/", "_").replace(" ", "")
            _, s = run_once(manifest, run_cfg, out_dir / "runs" / f"{name}_seed{seed}",
                            write_maps=write_maps, label=str(value))
            row = {"key": key, "value": str(value), "seed": seed, "n_train": s.n_train,
                   "steps": s.steps, "final_loss": s.final_loss, "base_miou": s.report.base_miou,
                   "enhanced_miou": s.report.enhanced_miou, "delta": s.report.delta}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


FRACTION_FIELDS = ("fraction", "method", "seed", "n_train", "steps", "base_miou",
                   "enhanced_miou", "miou", "drop")


def fraction_label(f: float) -> str:
    return str(Fraction(f).limit_denominator(64))


def fraction_study(manifest: DatasetManifest, config: TrainConfig, fractions, seeds,
                   out_dir=None, write_maps: bool = False, progress=None) -> list[dict]:
    """Baseline and RPNet runs per fraction and seed, scored on the full manifest.

    ``miou`` is the base CAM score for the baseline and the enhanced score for
    RPNet.  ``drop`` is the loss against the same method and seed at the
    largest fraction.
    """
    fractions = sorted({float(f) for f in fractions}, reverse=True)
    rows = []
    for f in fractions:
        for method in ("baseline", "rpnet"):
            for seed in seeds:
                cfg = config.updated(fraction=f, seed=seed)
                cfg.validate()
                run_dir = None
                if out_dir is not None:
                    run_dir = Path(out_dir) / "runs" / f"{method}_f{fraction_label(f).replace('/', '_')}_seed{seed}"
                _, s = run_once(manifest, cfg, run_dir, baseline=method == "baseline",
                                eval_manifest=manifest, write_maps=write_maps)
                row = {"fraction": fraction_label(f), "method": method, "seed": seed,
                       "n_train": s.n_train, "steps": s.steps, "base_miou": s.report.base_miou,
                       "enhanced_miou": s.report.enhanced_miou, "miou": s.miou}
                rows.append(row)
                if progress is not None:
                    progress(row)
    top = fraction_label(fractions[0])
    ref = {(r["method"], r["seed"]): r["miou"] for r in rows if r["fraction"] == top}
    for r in rows:
        r["drop"] = ref[(r["method"], r["seed"])] - r["miou"]
    return rows


def median_by(rows, field: str, **match) -> float:
    vals = [r[field] for r in rows if all(r[k] == v for k, v in match.items())]
    if not vals:
        raise KeyError(f"no rows match {match}")
    return statistics.median(vals)


SUMMARY_FIELDS = ("fraction", "method", "median_miou", "drop", "median_paired_drop")


def fraction_summary(rows) -> list[dict]:
    """Per (fraction, method): median mIoU over seeds, its drop from the
    largest fraction's median, and the median of the per-seed drops."""
    keys = list(dict.fromkeys((r["fraction"], r["method"]) for r in rows))
    top = keys[0][0] if keys else None
    out = []
    for frac, method in keys:
        med = median_by(rows, "miou", fraction=frac, method=method)
        out.append({"fraction": frac, "method": method, "median_miou": med,
                    "drop": median_by(rows, "miou", fraction=top, method=method) - med,
                    "median_paired_drop": median_by(rows, "drop", fraction=frac, method=method)})
    return out


def to_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
