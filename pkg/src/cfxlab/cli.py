"""Command-line orchestration: synth | train | explain | evaluate | ablate | debias | report.

Exit codes: 0 success, 2 configuration/validation problems, 3 runtime or
training failures. All outputs land under the configured output directory
(--out > config out_dir > $CFX_OUT > ./cfx-out) and every run directory
contains the exact config snapshot that produced it.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import cfsearch, dataset, metrics
from .classifiers import (
    distill_surrogate,
    load_classifier,
    make_gradient_source,
    save_classifier,
    train_base,
)
from .codec import IdentityCodec, fit_autoencoder, load_codec, save_codec
from .config import GRADIENT_SOURCE_NAMES, ExperimentConfig, default_config_dict, load_config
from .errors import CfxError, ConfigurationError, DataFormatError, DomainError, NumericError, ShapeError, TrainingError, ValidationError
from .generator import load_generator, save_generator, train_generator
from .metrics import EmbeddingFn, debias_and_gain, evaluate_run, write_report
from .seeding import derive_seed
from .torchutils import as_tensor

_CONFIG_ERRORS = (ConfigurationError, ValidationError, DomainError, ShapeError, DataFormatError)
_RUNTIME_ERRORS = (TrainingError, NumericError)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CONFIG_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except _RUNTIME_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(), help="Experiment config JSON.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the master seed.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None, help="Override the output directory.")(fn)
    return fn


def _resolve(config_path, seed, out_dir) -> ExperimentConfig:
    out = out_dir or os.environ.get("CFX_OUT")
    return load_config(config_path, seed_override=seed, out_override=out)


class _Paths:
    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.out_dir)
        self.datasets = self.root / "datasets"
        self.checkpoints = self.root / "checkpoints"
        self.runs = self.root / "runs"
        self.metrics = self.root / "metrics"

    def dataset(self, split: str) -> Path:
        return self.datasets / f"{split}.cfxds"

    def checkpoint(self, name: str) -> Path:
        ext = {"codec": "cfxae", "generator": "cfxgen"}.get(name.split("_")[0], "cfxclf")
        return self.checkpoints / f"{name}.{ext}"


def _write_config_snapshot(cfg: ExperimentConfig, paths: _Paths) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    (paths.root / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


def _load_split(cfg: ExperimentConfig, paths: _Paths, split: str) -> dataset.LabeledDataset:
    path = paths.dataset(split)
    if not path.exists():
        raise ConfigurationError(f"missing dataset file {path}; run `cfxlab synth` first")
    return dataset.load_dataset(path)


def _load_codec_or_die(cfg, paths):
    path = paths.checkpoint("codec")
    if not path.exists():
        raise ConfigurationError(f"missing codec checkpoint {path}; run `cfxlab train codec` first")
    return load_codec(path)


def _write_loss_csv(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])


@click.group()
def main():
    """Counterfactual-explanation laboratory on synthetic confounded image tasks."""


@main.command("init-config")
@click.option("--out", "path", type=click.Path(), default="config.json", show_default=True)
@_guarded
def init_config(path):
    """Write a default experiment config to start from."""
    Path(path).write_text(json.dumps(default_config_dict(), sort_keys=True, indent=2) + "\n")
    click.echo(f"wrote {path}")


@main.command()
@_common_options
@_guarded
def synth(config_path, seed, out_dir):
    """Synthesize, split, and persist the confounded dataset."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    paths.datasets.mkdir(parents=True, exist_ok=True)
    _write_config_snapshot(cfg, paths)

    ds = dataset.synthesize(cfg.dataset)
    train, val, test = dataset.split(ds, cfg.fractions)
    dataset.save_dataset(ds, paths.dataset("full"))
    for part in (train, val, test):
        dataset.save_dataset(part, paths.dataset(part.split))
    dataset.export_images(ds, paths.datasets / "preview", limit=8)

    balance = float(np.mean(ds.labels))
    click.echo(f"dataset: {paths.dataset('full')}")
    click.echo(
        f"n={len(ds)} correlation={cfg.dataset.correlation} class_balance={balance:.3f} "
        f"splits={len(train)}/{len(val)}/{len(test)} confound_agree={float(np.mean(ds.confound_flags)):.3f}"
    )


@main.command()
@click.argument("component", type=click.Choice(["codec", "generator", "classifier", "surrogate"]))
@click.option("--eval", "eval_role", is_flag=True, help="For surrogate: train the independent evaluation surrogate.")
@_common_options
@_guarded
def train(component, eval_role, config_path, seed, out_dir):
    """Train one component and write its checkpoint plus a loss-curve CSV."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    _write_config_snapshot(cfg, paths)
    train_ds = _load_split(cfg, paths, "train")
    val_ds = _load_split(cfg, paths, "val")

    if component == "codec":
        if cfg.codec_kind == "identity":
            codec = IdentityCodec(train_ds.images.shape[1:])
            losses = []
        else:
            codec = fit_autoencoder(train_ds, cfg.autoencoder, val_ds)
            losses = codec.loss_history
        save_codec(codec, paths.checkpoint("codec"))
        _write_loss_csv(paths.checkpoints / "codec_loss.csv", losses)
        click.echo(f"codec: {paths.checkpoint('codec')} (kind={cfg.codec_kind}, tolerance={codec.tolerance!r})")
        return

    if component == "generator":
        codec = _load_codec_or_die(cfg, paths)
        import torch

        with torch.no_grad():
            latents = codec.encode(as_tensor(train_ds.images))
        model = train_generator(latents, cfg.schedule, cfg.generator)
        save_generator(model, cfg.schedule, paths.checkpoint("generator"), cfg.generator)
        _write_loss_csv(paths.checkpoints / "generator_loss.csv", model.loss_history)
        click.echo(
            f"generator: {paths.checkpoint('generator')} "
            f"(first loss {model.loss_history[0]:.4f}, last {model.loss_history[-1]:.4f})"
        )
        return

    if component == "classifier":
        clf = train_base(train_ds, cfg.classifier, val_ds)
        save_classifier(clf, paths.checkpoint("classifier"), role="base")
        _write_loss_csv(paths.checkpoints / "classifier_loss.csv", clf.history["loss"])
        click.echo(
            f"classifier: {paths.checkpoint('classifier')} "
            f"(val accuracy {clf.history['val_accuracy'][-1]:.3f})"
        )
        return

    # surrogate
    base_path = paths.checkpoint("classifier")
    if not base_path.exists():
        raise ConfigurationError(f"missing dependency: base classifier checkpoint {base_path}; run `cfxlab train classifier` first")
    f = load_classifier(base_path)
    train_cfg = cfg.surrogate_train
    name = "surrogate"
    if eval_role:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=derive_seed(cfg.seed, "surrogate", "eval"))
        name = "surrogate_eval"
    f_hat = distill_surrogate(f, train_ds, cfg.surrogate_spec, train_cfg, val_ds)
    save_classifier(f_hat, paths.checkpoint(name), role=name)
    _write_loss_csv(paths.checkpoints / f"{name}_loss.csv", f_hat.history["total"])
    agree = f_hat.history.get("val_agreement", [float("nan")])[0]
    click.echo(f"{name}: {paths.checkpoint(name)} (val agreement {agree:.3f})")


def _load_pipeline(cfg: ExperimentConfig, paths: _Paths, source_kind: str):
    codec = _load_codec_or_die(cfg, paths)
    gen_path = paths.checkpoint("generator")
    clf_path = paths.checkpoint("classifier")
    for p, hint in ((gen_path, "train generator"), (clf_path, "train classifier")):
        if not p.exists():
            raise ConfigurationError(f"missing checkpoint {p}; run `cfxlab {hint}` first")
    model, sched = load_generator(gen_path)
    f = load_classifier(clf_path)
    f_hat = None
    sur_path = paths.checkpoint("surrogate")
    if sur_path.exists():
        f_hat = load_classifier(sur_path)
    if source_kind == "surrogate" and f_hat is None:
        raise ConfigurationError(f"missing checkpoint {sur_path}; run `cfxlab train surrogate` first")
    params = {k: v for k, v in cfg.gradient_source.items() if k != "kind"}
    src = make_gradient_source(source_kind, f, f_hat, **params)
    return codec, model, sched, f, f_hat, src


def _explain_samples(cfg, paths, source_kind, n_samples, target, k, jobs, run_root: Path):
    test_ds = _load_split(cfg, paths, "test")
    codec, model, sched, f, f_hat, src = _load_pipeline(cfg, paths, source_kind)
    if target is not None and not 0 <= target < test_ds.n_classes:
        raise ConfigurationError(f"invalid target class {target}; dataset has {test_ds.n_classes} classes")
    n_samples = min(n_samples, len(test_ds))
    gcfg = cfg.guidance

    def one(i: int) -> Path:
        x0 = test_ds.images[i]
        pred = int(f.predict(as_tensor(x0)[None])[0])
        tgt = target if target is not None else 1 - pred
        run = cfsearch.generate_diverse_set(
            x0, tgt, model, sched, codec, src, gcfg, f,
            seed=derive_seed(cfg.seed, "explain", i), f_hat=f_hat, n_counterfactuals=k,
        )
        run_dir = run_root / f"sample_{i:04d}"
        snapshot = cfg.to_dict()
        snapshot["gradient_source"] = run.gradient_source
        cfsearch.save_run(run, run_dir, experiment_config=snapshot)
        result = json.loads((run_dir / "result.json").read_text())
        result["sample_index"] = i
        result["true_label"] = int(test_ds.labels[i])
        (run_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
        _write_grid(run, run_dir / "grid.png")
        return run_dir

    run_root.mkdir(parents=True, exist_ok=True)
    indices = list(range(n_samples))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            dirs = list(pool.map(one, indices))
    else:
        dirs = [one(i) for i in indices]
    return dirs


def _write_grid(run: cfsearch.CounterfactualRun, path: Path) -> None:
    from PIL import Image

    def to_gray(img: np.ndarray) -> np.ndarray:
        return np.round(np.clip(img.mean(axis=0), 0.0, 1.0) * 255.0).astype(np.uint8)

    panels = [to_gray(run.x_factual)]
    for res in run.results:
        panels.append(to_gray(res.x_cf))
    for res in run.results:
        diff = np.abs(res.x_cf - run.x_factual).mean(axis=0)
        top = diff.max()
        panels.append(np.round((diff / top if top > 0 else diff) * 255.0).astype(np.uint8))
    sep = np.full((panels[0].shape[0], 2), 255, dtype=np.uint8)
    row = panels[0]
    for p in panels[1:]:
        row = np.concatenate([row, sep, p], axis=1)
    Image.fromarray(row).save(path)


@main.command()
@click.option("--samples", type=int, default=10, show_default=True, help="Number of test samples to explain.")
@click.option("--k", type=int, default=None, help="Counterfactuals per sample (default: guidance.max_counterfactuals).")
@click.option("--target", type=int, default=None, help="Target class (default: flip the prediction).")
@click.option("--gradient-source", "source_kind", type=click.Choice(GRADIENT_SOURCE_NAMES), default=None)
@click.option("--name", default="explain", show_default=True, help="Run-set name under runs/.")
@click.option("--jobs", type=int, default=1, show_default=True)
@_common_options
@_guarded
def explain(samples, k, target, source_kind, name, jobs, config_path, seed, out_dir):
    """Generate counterfactual run directories for test samples."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    _write_config_snapshot(cfg, paths)
    source_kind = source_kind or cfg.gradient_source["kind"]
    dirs = _explain_samples(cfg, paths, source_kind, samples, target, k, jobs, paths.runs / name)
    flips = 0
    for d in dirs:
        result = json.loads((d / "result.json").read_text())
        flips += int(result["counterfactuals"][0]["flipped"])
    click.echo(f"explained {len(dirs)} samples -> {paths.runs / name} (k=1 flip rate {flips}/{len(dirs)})")


def _load_runs(run_root: Path) -> list[cfsearch.CounterfactualRun]:
    if not run_root.exists():
        raise ValidationError(f"run directory {run_root} does not exist")
    sample_dirs = sorted(p for p in run_root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    runs = []
    for d in sample_dirs:
        config, result, arrays = cfsearch.load_run_arrays(d)
        results = []
        for entry in result["counterfactuals"]:
            kk = entry["k"]
            results.append(
                cfsearch.CounterfactualResult(
                    x_factual=arrays["factual"],
                    x_cf=arrays[f"cf_{kk}"],
                    target_class=result["target_class"],
                    flipped=entry["flipped"],
                    hit_target=entry["hit_target"],
                    pred_f_factual=entry["pred_f_factual"],
                    pred_f_cf=entry["pred_f_cf"],
                    pred_fhat_factual=entry["pred_fhat_factual"],
                    pred_fhat_cf=entry["pred_fhat_cf"],
                    trace=[],
                    masks=cfsearch.MaskStack(exclusion=arrays[f"exclusion_{kk}"]),
                    seed=entry["seed"],
                )
            )
        runs.append(
            cfsearch.CounterfactualRun(
                x_factual=arrays["factual"],
                target_class=result["target_class"],
                results=results,
                config=cfsearch.GuidanceConfig.from_dict(config["guidance"]),
                gradient_source=config["gradient_source"],
                seed=result["seed"],
            )
        )
    if not runs:
        raise ValidationError(f"no run directories found under {run_root}")
    return runs


def _evaluation_pieces(cfg: ExperimentConfig, paths: _Paths):
    f_path = paths.checkpoint("classifier")
    eval_path = paths.checkpoint("surrogate_eval")
    for p, hint in ((f_path, "train classifier"), (eval_path, "train surrogate --eval")):
        if not p.exists():
            raise ConfigurationError(f"missing checkpoint {p}; run `cfxlab {hint}` first")
    f = load_classifier(f_path)
    f_hat_eval = load_classifier(eval_path)
    codec = _load_codec_or_die(cfg, paths) if cfg.embedding == "codec_latent" else None
    e = EmbeddingFn(kind=cfg.embedding, codec=codec)
    return f, f_hat_eval, e


@main.command()
@click.option("--runs", "runs_name", default="explain", show_default=True, help="Run-set name under runs/.")
@_common_options
@_guarded
def evaluate(runs_name, config_path, seed, out_dir):
    """Score a run set with the desiderata metrics."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    runs = _load_runs(paths.runs / runs_name)
    f, f_hat_eval, e = _evaluation_pieces(cfg, paths)
    report = evaluate_run(runs, f, f_hat_eval, e)
    csv_path, json_path = write_report(report, paths.metrics / runs_name)
    click.echo(f"report: {json_path}")
    click.echo(
        f"nafr={report.nafr:.1f} na={'-' if report.na_rate is None else f'{report.na_rate:.1f}'} "
        f"sparsity={report.sparsity:.1f} diversity={'-' if report.diversity is None else f'{report.diversity:.1f}'} "
        f"({report.n_flipped}/{report.n_samples} flips)"
    )


@main.command()
@click.option("--sources", default="vanilla,smoothgrad,integrated_gradients,surrogate", show_default=True)
@click.option("--samples", type=int, default=10, show_default=True)
@click.option("--k", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@_common_options
@_guarded
def ablate(sources, samples, k, jobs, config_path, seed, out_dir):
    """Explain + evaluate per gradient source; emit a comparison CSV."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    _write_config_snapshot(cfg, paths)
    source_list = [s.strip() for s in sources.split(",") if s.strip()]
    for s in source_list:
        if s not in GRADIENT_SOURCE_NAMES:
            raise ConfigurationError(f"unknown gradient source {s!r}; expected one of {GRADIENT_SOURCE_NAMES}")
    f, f_hat_eval, e = _evaluation_pieces(cfg, paths)

    rows = []
    for s in source_list:
        run_root = paths.runs / f"ablate_{s}"
        _explain_samples(cfg, paths, s, samples, None, k, jobs, run_root)
        report = evaluate_run(_load_runs(run_root), f, f_hat_eval, e)
        write_report(report, paths.metrics / f"ablate_{s}")
        rows.append((s, report))
        click.echo(f"{s}: nafr={report.nafr:.1f} na={report.na_rate if report.na_rate is not None else '-'}")

    paths.metrics.mkdir(parents=True, exist_ok=True)
    table = paths.metrics / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "nafr", "na", "sparsity", "diversity"])
        for s, rep in rows:
            writer.writerow(
                [
                    s,
                    repr(rep.nafr),
                    "" if rep.na_rate is None else repr(rep.na_rate),
                    repr(rep.sparsity),
                    "" if rep.diversity is None else repr(rep.diversity),
                ]
            )
    click.echo(f"ablation table: {table}")


@main.command()
@click.option("--runs", "runs_name", default="explain", show_default=True)
@_common_options
@_guarded
def debias(runs_name, config_path, seed, out_dir):
    """Fine-tune the classifier on labeled counterfactuals and report the gain."""
    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    runs_root = paths.runs / runs_name
    if not runs_root.exists():
        raise ConfigurationError(f"run directory {runs_root} does not exist; run `cfxlab explain` first")
    f_path = paths.checkpoint("classifier")
    if not f_path.exists():
        raise ConfigurationError(f"missing checkpoint {f_path}; run `cfxlab train classifier` first")
    f = load_classifier(f_path)
    train_ds = _load_split(cfg, paths, "train")

    cf_images, cf_labels = [], []
    for d in sorted(p for p in runs_root.iterdir() if p.is_dir() and p.name.startswith("sample_")):
        _, result, arrays = cfsearch.load_run_arrays(d)
        if "true_label" not in result:
            raise ConfigurationError(f"{d}/result.json carries no counterfactual labels (true_label missing)")
        for entry in result["counterfactuals"]:
            if entry["flipped"]:
                cf_images.append(arrays[f"cf_{entry['k']}"])
                cf_labels.append(result["true_label"])
    if not cf_images:
        raise ConfigurationError(f"no flipped counterfactuals under {runs_root}; nothing to debias with")

    from dataclasses import replace

    eval_spec = replace(
        cfg.dataset,
        correlation=cfg.debias_eval_correlation,
        n_samples=cfg.debias_eval_n_samples,
        seed=derive_seed(cfg.seed, "debias-eval"),
    )
    eval_ds = dataset.synthesize(eval_spec)
    f_after, gain_report = debias_and_gain(
        f, train_ds, np.stack(cf_images), np.asarray(cf_labels), eval_ds, cfg.debias
    )
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    save_classifier(f_after, paths.checkpoint("classifier_debiased"), role="debiased")
    paths.metrics.mkdir(parents=True, exist_ok=True)
    out = paths.metrics / "gain.json"
    out.write_text(json.dumps(gain_report.to_dict(), sort_keys=True, indent=2) + "\n")
    click.echo(f"gain report: {out}")
    gain_str = "-" if gain_report.gain is None else f"{gain_report.gain:.1f}%"
    click.echo(
        f"acc_before={gain_report.acc_before:.3f} acc_after={gain_report.acc_after:.3f} "
        f"err_before={gain_report.err_before:.3f} gain={gain_str} (n_cf={len(cf_images)})"
    )


@main.command()
@click.option("--runs", "runs_name", default="explain", show_default=True)
@_common_options
@_guarded
def report(runs_name, config_path, seed, out_dir):
    """Print a per-sample summary of a run set and write a combined image grid."""
    from PIL import Image

    cfg = _resolve(config_path, seed, out_dir)
    paths = _Paths(cfg)
    runs_root = paths.runs / runs_name
    runs = _load_runs(runs_root)
    click.echo(f"{'sample':>8} {'target':>6} {'flipped':>8} {'hit':>4}")
    grid_rows = []
    for i, run in enumerate(runs):
        r1 = run.results[0]
        click.echo(f"{i:>8} {run.target_class:>6} {str(r1.flipped):>8} {str(r1.hit_target):>4}")
        grid_path = runs_root / f"sample_{i:04d}" / "grid.png"
        if grid_path.exists():
            grid_rows.append(np.asarray(Image.open(grid_path)))
    if grid_rows:
        width = max(r.shape[1] for r in grid_rows)
        padded = [np.pad(r, ((0, 0), (0, width - r.shape[1]))) for r in grid_rows]
        sep = np.full((2, width), 255, dtype=np.uint8)
        stack = padded[0]
        for r in padded[1:]:
            stack = np.concatenate([stack, sep, r], axis=0)
        paths.metrics.mkdir(parents=True, exist_ok=True)
        overview = paths.metrics / f"{runs_name}_overview.png"
        Image.fromarray(stack).save(overview)
        click.echo(f"overview grid: {overview}")


if __name__ == "__main__":
    main()
