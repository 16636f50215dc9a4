"""Desiderata metrics for counterfactual runs and the debias gain loop.

Conventions: percentages in [0, 100]; NAFR counts flips of an independent
smoothed classifier over all samples; the NA rate conditions on samples
whose black-box prediction flipped, so the two denominators differ whenever
some sample fails to flip. Raw per-sample diversity lives in [0, 2]
(1 - cosine); the headline aggregate clamps per-sample values into [0, 1]
before averaging and the unclamped mean is reported alongside.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .classifiers import ConvClassifier, accuracy
from .dataset import LabeledDataset
from .errors import ConfigurationError, DomainError, TrainingError, ValidationError
from .seeding import derive_seed, torch_generator
from .torchutils import as_tensor, shuffled_batches


@dataclass(frozen=True)
class EmbeddingFn:
    """Encoding used for edit vectors: raw pixels or the codec latent."""

    kind: str = "flat_pixels"
    codec: object | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "flat_pixels":
            return np.asarray(x, dtype=np.float64).reshape(-1)
        if self.kind == "codec_latent":
            if self.codec is None:
                raise ConfigurationError("codec_latent embedding needs a codec")
            with torch.no_grad():
                z = self.codec.encode(as_tensor(x)[None])
            return z[0].numpy().reshape(-1)
        raise ConfigurationError(f"unknown embedding kind {self.kind!r}")


def sparsity(x: np.ndarray, x_cf: np.ndarray, e: EmbeddingFn) -> float:
    """1 - mean(|delta|) / max(|delta|) of the embedding edit vector.

    A zero edit is defined as maximally sparse (1.0).
    """
    delta = np.abs(e(x) - e(x_cf))
    peak = delta.max()
    if peak == 0.0:
        return 1.0
    return float(1.0 - delta.mean() / peak)


def diversity(x: np.ndarray, cf1: np.ndarray, cf2: np.ndarray, e: EmbeddingFn) -> float | None:
    """1 - cosine similarity of the two edit vectors; None if either edit is zero."""
    d1 = e(x) - e(cf1)
    d2 = e(x) - e(cf2)
    n1, n2 = np.linalg.norm(d1), np.linalg.norm(d2)
    if n1 == 0.0 or n2 == 0.0:
        return None
    return float(1.0 - float(d1 @ d2) / (n1 * n2))


def _flips(clf: ConvClassifier, xs: np.ndarray, cfs: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        before = clf(as_tensor(xs)).argmax(1)
        after = clf(as_tensor(cfs)).argmax(1)
    return (before != after).numpy()


def nafr(xs: np.ndarray, cfs: np.ndarray, f_hat: ConvClassifier) -> float:
    """Flip rate (%) as judged by the independent smoothed classifier."""
    if len(xs) == 0:
        raise DomainError("nafr needs at least one sample")
    return float(_flips(f_hat, xs, cfs).mean() * 100.0)


def na_rate(xs: np.ndarray, cfs: np.ndarray, f: ConvClassifier, f_hat: ConvClassifier) -> float | None:
    """Among samples whose f prediction flipped, the % whose f_hat prediction
    also flipped. None (undefined) when nothing flipped f."""
    if len(xs) == 0:
        raise DomainError("na_rate needs at least one sample")
    f_flip = _flips(f, xs, cfs)
    if not f_flip.any():
        return None
    fhat_flip = _flips(f_hat, xs, cfs)
    return float(fhat_flip[f_flip].mean() * 100.0)


@dataclass(frozen=True)
class DebiasConfig:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 3e-4
    seed: int = 0
    cf_repeat: int = 4

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class GainReport:
    acc_before: float
    acc_after: float
    err_before: float
    gain: float | None
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "acc_before": self.acc_before,
            "acc_after": self.acc_after,
            "err_before": self.err_before,
            "gain": self.gain,
            "note": self.note,
        }


def debias_and_gain(
    f: ConvClassifier,
    train_ds: LabeledDataset,
    cf_images: np.ndarray,
    cf_labels: np.ndarray,
    test_ds: LabeledDataset,
    config: DebiasConfig,
) -> tuple[ConvClassifier, GainReport]:
    """Fine-tune a copy of f on training data augmented with labeled
    counterfactuals and report Gain = (acc_after - acc_before) / err_before.

    The counterfactuals carry the factual's true class (the edits target the
    confound), are repeated ``cf_repeat`` times to offset the size imbalance,
    and the test split must be unpoisoned for the gain to mean anything.
    """
    if len(cf_images) == 0:
        raise ConfigurationError("debias needs at least one counterfactual")
    if len(cf_images) != len(cf_labels):
        raise ConfigurationError(f"{len(cf_images)} counterfactuals but {len(cf_labels)} labels")
    acc_before = accuracy(f, test_ds)
    err_before = 1.0 - acc_before

    f_after = copy.deepcopy(f)
    x_aug = np.concatenate([train_ds.images] + [cf_images] * config.cf_repeat)
    y_aug = np.concatenate([train_ds.labels] + [np.asarray(cf_labels, dtype=np.int64)] * config.cf_repeat)
    x_t = as_tensor(x_aug)
    y_t = torch.from_numpy(y_aug)
    opt = torch.optim.Adam(f_after.parameters(), lr=config.lr)
    gen = torch_generator(config.seed, "debias")
    step = 0
    for _ in range(config.epochs):
        for idx in shuffled_batches(len(x_aug), config.batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(f_after(x_t[idx]), y_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError("debias fine-tune loss is not finite", step=step)
            loss.backward()
            opt.step()
            step += 1

    acc_after = accuracy(f_after, test_ds)
    if err_before == 0.0:
        report = GainReport(acc_before, acc_after, err_before, None, note="gain undefined: err_before=0")
    else:
        report = GainReport(acc_before, acc_after, err_before, (acc_after - acc_before) / err_before * 100.0)
    return f_after, report


@dataclass
class MetricsReport:
    nafr: float
    na_rate: float | None
    sparsity: float
    diversity: float | None
    diversity_unclamped: float | None
    gain: float | None
    n_samples: int
    n_flipped: int
    rows: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "nafr": self.nafr,
            "na_rate": self.na_rate,
            "sparsity": self.sparsity,
            "diversity": self.diversity,
            "diversity_unclamped": self.diversity_unclamped,
            "gain": self.gain,
            "n_samples": self.n_samples,
            "n_flipped": self.n_flipped,
            "notes": self.notes,
            "rows": self.rows,
        }


def evaluate_run(runs: list, f: ConvClassifier, f_hat: ConvClassifier, e: EmbeddingFn, gain: float | None = None) -> MetricsReport:
    """Aggregate the metric suite over completed runs (one run per sample).

    NAFR/NA/sparsity use each run's first counterfactual; diversity uses the
    first two when available. Runs with mixed configurations are rejected.
    """
    if not runs:
        raise ValidationError("evaluate_run needs at least one completed run")
    ref_cfg = runs[0].config.to_dict()
    ref_src = runs[0].gradient_source
    mismatches = set()
    for run in runs[1:]:
        cfg = run.config.to_dict()
        mismatches |= {k for k in ref_cfg if cfg.get(k) != ref_cfg[k]}
        if run.gradient_source != ref_src:
            mismatches.add("gradient_source")
    if mismatches:
        raise ValidationError(f"runs have mixed configurations; mismatched keys: {sorted(mismatches)}")

    xs = np.stack([r.x_factual for r in runs])
    cf1 = np.stack([r.results[0].x_cf for r in runs])
    f_flip = _flips(f, xs, cf1)
    fhat_flip = _flips(f_hat, xs, cf1)

    rows = []
    diversities: list[float] = []
    for i, run in enumerate(runs):
        div = None
        if len(run.results) >= 2:
            div = diversity(run.x_factual, run.results[0].x_cf, run.results[1].x_cf, e)
            if div is not None:
                diversities.append(div)
        rows.append(
            {
                "sample": i,
                "target_class": run.target_class,
                "flipped_f": bool(f_flip[i]),
                "flipped_fhat": bool(fhat_flip[i]),
                "sparsity": sparsity(run.x_factual, run.results[0].x_cf, e),
                "diversity_raw": div,
            }
        )

    notes = {}
    n_flipped = int(f_flip.sum())
    na = None
    if n_flipped == 0:
        notes["na_rate"] = "undefined: no sample flipped the base classifier"
    else:
        na = float(fhat_flip[f_flip].mean() * 100.0)
    div_clamped = div_raw = None
    if not diversities:
        notes["diversity"] = "undefined: needs >= 2 counterfactuals per sample with nonzero edits"
    else:
        div_clamped = float(np.mean([min(max(d, 0.0), 1.0) for d in diversities]) * 100.0)
        div_raw = float(np.mean(diversities) * 100.0)

    return MetricsReport(
        nafr=float(fhat_flip.mean() * 100.0),
        na_rate=na,
        sparsity=float(np.mean([row["sparsity"] for row in rows]) * 100.0),
        diversity=div_clamped,
        diversity_unclamped=div_raw,
        gain=gain,
        n_samples=len(runs),
        n_flipped=n_flipped,
        rows=rows,
        notes=notes,
    )


def write_report(report: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Serialize metrics.csv (per-sample rows plus a summary row) and report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    json_path = out_dir / "report.json"

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "target_class", "flipped_f", "flipped_fhat", "sparsity", "diversity_raw"])
        for row in report.rows:
            writer.writerow([fmt(row[k]) for k in ("sample", "target_class", "flipped_f", "flipped_fhat", "sparsity", "diversity_raw")])
        writer.writerow([])
        writer.writerow(["summary", "", "", "", "", ""])
        for key in ("nafr", "na_rate", "sparsity", "diversity", "diversity_unclamped", "gain", "n_samples", "n_flipped"):
            writer.writerow([key, fmt(getattr(report, key)), "", "", "", ""])

    json_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    return csv_path, json_path
