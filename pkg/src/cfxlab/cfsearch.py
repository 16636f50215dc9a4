"""Guided counterfactual search in the generative latent space.

Each reverse step runs: transport step, one-step denoised estimate,
guidance + proximity gradient, latent update, then mask inpainting. Two
masks control where edits may survive:

* Phase I (adaptive, per step): pixels whose smoothed residual against the
  factual image stays below ``tau_inpaint`` are restored to the factual
  latent, keeping edits spatially sparse.
* Phase II (fixed, per counterfactual k): pixels already edited by earlier
  counterfactuals (cumulative residual >= ``tau_inpaint``) are blocked —
  they are restored to the factual latent at every step — forcing later
  counterfactuals onto different regions. ``fixed_mask`` is an allow-mask:
  True marks editable pixels.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .classifiers import GradientSource, guidance_gradient, target_loss
from .errors import ConfigurationError, NumericError, ShapeError
from .generator import DDPM, TrajectorySchedule, denoise_estimate, interpolate, reverse_step
from .io import load_container, save_container
from .seeding import derive_seed, torch_generator
from .torchutils import DTYPE, as_tensor, to_numpy

RUN_MAGIC = "CFXRUN1"


@dataclass(frozen=True)
class GuidanceConfig:
    beta: float = 40.0
    lambda_l1: float = 0.05
    lambda_l2: float = 0.05
    eta: float = 0.05
    T: int = 24
    start_time: float = 0.5
    tau_inpaint: float = 0.03
    psi_kernel_sigma: float = 1.0
    max_counterfactuals: int = 2
    phase1_enabled: bool = True

    def validate(self) -> None:
        if self.beta < 0 or self.lambda_l1 < 0 or self.lambda_l2 < 0:
            raise ConfigurationError("guidance weights must be >= 0")
        if self.eta <= 0:
            raise ConfigurationError(f"learning rate eta must be > 0, got {self.eta}")
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.start_time <= 1.0:
            raise ConfigurationError(f"start_time must lie in (0, 1], got {self.start_time}")
        if self.tau_inpaint <= 0:
            raise ConfigurationError(f"tau_inpaint must be > 0, got {self.tau_inpaint}")
        if self.psi_kernel_sigma <= 0:
            raise ConfigurationError(f"psi_kernel_sigma must be > 0, got {self.psi_kernel_sigma}")
        if self.max_counterfactuals < 1:
            raise ConfigurationError(f"max_counterfactuals must be >= 1, got {self.max_counterfactuals}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown GuidanceConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class MaskStack:
    phase1: list[np.ndarray] = field(default_factory=list)  # per-step (H, W) bool, True = restored
    restore_latent: list[np.ndarray] = field(default_factory=list)  # per-step latent-res bool
    exclusion: np.ndarray | None = None  # (H, W) bool allow-mask, True = editable
    cumulative: np.ndarray | None = None  # (H, W) float, sum of prior residuals


@dataclass
class CounterfactualResult:
    x_factual: np.ndarray
    x_cf: np.ndarray
    target_class: int
    flipped: bool
    hit_target: bool
    pred_f_factual: int
    pred_f_cf: int
    pred_fhat_factual: int | None
    pred_fhat_cf: int | None
    trace: list[dict]
    masks: MaskStack
    seed: int


@dataclass
class CounterfactualRun:
    x_factual: np.ndarray
    target_class: int
    results: list[CounterfactualResult]
    config: GuidanceConfig
    gradient_source: dict
    seed: int

    @property
    def counterfactuals(self) -> list[np.ndarray]:
        return [r.x_cf for r in self.results]


def proximity_gradient(z_t: torch.Tensor, z_0: torch.Tensor, lambda_l1: float, lambda_l2: float) -> torch.Tensor:
    """Gradient of lambda_l1 ||d||_1 + lambda_l2 ||d||_2 at d = z_t - z_0.

    Elementwise lambda_l1 * sign(d) + lambda_l2 * d / ||d||_2, with the
    subgradient fixed to 0 at exact zeros.
    """
    if z_t.shape != z_0.shape:
        raise ShapeError("proximity_gradient shapes differ", expected=tuple(z_0.shape), got=tuple(z_t.shape))
    d = z_t - z_0
    g = lambda_l1 * torch.sign(d)
    if lambda_l2 != 0:
        if d.ndim == 4:
            norms = d.flatten(1).norm(dim=1)
            unit = torch.where(norms[:, None, None, None] > 0, d / norms.clamp_min(1e-300)[:, None, None, None], torch.zeros_like(d))
        else:
            norm = d.norm()
            unit = d / norm if float(norm) > 0 else torch.zeros_like(d)
        g = g + lambda_l2 * unit
    return g


def _loss_classifier(src: GradientSource):
    return src.classifier if src.kind != "product" else src.factors[0].classifier


def total_gradient(
    src: GradientSource,
    codec,
    z_t: torch.Tensor,
    z_0: torch.Tensor,
    t,
    model,
    sched: TrajectorySchedule,
    cfg: GuidanceConfig,
    target_class: int,
    generator: torch.Generator | None = None,
    z_hat: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Combined update gradient: beta * guidance at the denoised estimate plus
    the proximity gradient at z_t itself.

    Returns the gradient and the per-term objective values
    (guidance_loss, l1, l2, total) used for the step trace.
    """
    if z_hat is None:
        with torch.no_grad():
            z_hat = denoise_estimate(model, z_t, t, sched)
    if cfg.beta != 0:
        g_smooth = guidance_gradient(src, codec, z_hat, target_class, generator)
        if not torch.isfinite(g_smooth).all():
            raise NumericError("total gradient is not finite", term="guidance")
    else:
        g_smooth = torch.zeros_like(z_t)
    g_prox = proximity_gradient(z_t, z_0, cfg.lambda_l1, cfg.lambda_l2)
    if not torch.isfinite(g_prox).all():
        d = z_t - z_0
        term = "l1" if not torch.isfinite(torch.sign(d)).all() else "l2"
        raise NumericError("total gradient is not finite", term=term)
    g = cfg.beta * g_smooth + g_prox

    with torch.no_grad():
        d = (z_t - z_0).flatten(1) if z_t.ndim == 4 else (z_t - z_0).flatten()[None]
        guidance_val = cfg.beta * float(target_loss(_loss_classifier(src), codec, z_hat, torch.as_tensor(target_class).expand(z_t.shape[0]).long()).sum()) if cfg.beta != 0 else 0.0
        l1_val = cfg.lambda_l1 * float(d.abs().sum())
        l2_val = cfg.lambda_l2 * float(d.norm(dim=1).sum())
    terms = {"guidance_loss": guidance_val, "l1": l1_val, "l2": l2_val}
    terms["total"] = guidance_val + l1_val + l2_val
    return g, terms


def phase1_mask(x_0: np.ndarray, x_hat: np.ndarray, tau: float, sigma: float) -> np.ndarray:
    """Binary keep-factual mask: True where the smoothed residual stays below tau."""
    return kernels.residual_map(x_0, x_hat, sigma) < tau


def cumulative_residual(previous_cfs: list[np.ndarray], x_0: np.ndarray, sigma: float) -> np.ndarray:
    cmap = np.zeros(x_0.shape[1:], dtype=np.float64)
    for cf in previous_cfs:
        cmap += kernels.residual_map(cf, x_0, sigma)
    return cmap


def exclusion_mask(previous_cfs: list[np.ndarray], x_0: np.ndarray, tau: float, sigma: float) -> np.ndarray:
    """Fixed allow-mask for the next counterfactual: False exactly where the
    cumulative residual of earlier counterfactuals reached tau."""
    return cumulative_residual(previous_cfs, x_0, sigma) < tau


def inpaint_latent(z_t: torch.Tensor, z_0: torch.Tensor, mask: np.ndarray, codec) -> torch.Tensor:
    """Restore z_0 wherever the pixel-space mask is True, after pooling the
    mask down to the latent resolution (average-pool, threshold 0.5)."""
    if z_t.shape != z_0.shape:
        raise ShapeError("inpaint latents differ in shape", expected=tuple(z_0.shape), got=tuple(z_t.shape))
    mask = np.asarray(mask, dtype=bool)
    factor = codec.downsample_factor
    latent_hw = tuple(z_t.shape[-2:])
    if (mask.shape[0] // factor, mask.shape[1] // factor) != latent_hw or mask.shape[0] % factor or mask.shape[1] % factor:
        raise ShapeError(
            f"pixel mask {mask.shape} does not pool to the latent grid by factor {factor}",
            expected=latent_hw,
            got=(mask.shape[0] // factor, mask.shape[1] // factor),
        )
    m_lat = kernels.downsample_mask(mask, factor)
    batched = z_t.ndim == 4
    z_np = to_numpy(z_t if batched else z_t[None])
    z0_np = to_numpy(z_0 if batched else z_0[None])
    out = np.stack([kernels.blend_masked(z_np[b], z0_np[b], m_lat) for b in range(z_np.shape[0])])
    res = torch.from_numpy(out)
    return res if batched else res[0]


def generate_counterfactual(
    x_0: np.ndarray,
    target_class: int,
    model,
    sched: TrajectorySchedule,
    codec,
    src: GradientSource,
    cfg: GuidanceConfig,
    f,
    fixed_mask: np.ndarray | None = None,
    seed: int = 0,
    f_hat=None,
) -> CounterfactualResult:
    """Run the guided reverse loop for one counterfactual.

    A non-flip after T steps is not an error; the result carries
    ``flipped=False``. The run is bit-reproducible for fixed inputs and seed.
    """
    cfg.validate()
    src.validate()
    x_0 = np.ascontiguousarray(x_0, dtype=np.float64)
    if x_0.ndim != 3:
        raise ShapeError("generate_counterfactual expects a single (C, H, W) image", expected=("C", "H", "W"), got=x_0.shape)
    pixel_hw = x_0.shape[1:]
    if fixed_mask is None:
        fixed_allow = np.ones(pixel_hw, dtype=bool)
    else:
        fixed_allow = np.asarray(fixed_mask, dtype=bool)
        if fixed_allow.shape != pixel_hw:
            raise ShapeError("fixed_mask resolution mismatch", expected=pixel_hw, got=fixed_allow.shape)

    times = _time_grid(sched, cfg)
    gen = torch_generator(seed, "cfsearch")
    x0_t = as_tensor(x_0)[None]
    with torch.no_grad():
        z_0 = codec.encode(x0_t)
        pred_f_factual = int(f.predict(codec.decode(z_0))[0])
    if pred_f_factual == target_class:
        warnings.warn(
            f"target class {target_class} equals the current prediction; the search will not flip anything"
        )

    eps = torch.randn(z_0.shape, generator=gen, dtype=DTYPE)
    z = interpolate(z_0, eps, times[0], sched)

    masks = MaskStack(exclusion=fixed_allow.copy())
    trace: list[dict] = []
    blocked = ~fixed_allow
    for step in range(cfg.T):
        t_from, t_to = times[step], times[step + 1]
        with torch.no_grad():
            z = reverse_step(model, z, t_from, t_to, sched, gen)
            z_hat = denoise_estimate(model, z, t_to, sched)
        try:
            g, terms = total_gradient(src, codec, z, z_0, t_to, model, sched, cfg, target_class, gen, z_hat=z_hat)
        except NumericError as exc:
            raise NumericError(str(exc), step=step) from exc
        z = z - cfg.eta * g

        if cfg.phase1_enabled:
            with torch.no_grad():
                x_hat = to_numpy(codec.decode(z_hat)[0])
            m1 = phase1_mask(x_0, x_hat, cfg.tau_inpaint, cfg.psi_kernel_sigma)
        else:
            m1 = np.zeros(pixel_hw, dtype=bool)
        restore = m1 | blocked
        z = inpaint_latent(z, z_0, restore, codec)
        masks.phase1.append(m1)
        masks.restore_latent.append(kernels.downsample_mask(restore, codec.downsample_factor))
        trace.append({"step": step, **terms})

    with torch.no_grad():
        x_cf = to_numpy(codec.decode(z)[0])
        pred_f_cf = int(f.predict(as_tensor(x_cf)[None])[0])
        pred_fhat_factual = int(f_hat.predict(codec.decode(z_0))[0]) if f_hat is not None else None
        pred_fhat_cf = int(f_hat.predict(as_tensor(x_cf)[None])[0]) if f_hat is not None else None

    return CounterfactualResult(
        x_factual=x_0,
        x_cf=x_cf,
        target_class=int(target_class),
        flipped=pred_f_cf != pred_f_factual,
        hit_target=pred_f_cf == int(target_class),
        pred_f_factual=pred_f_factual,
        pred_f_cf=pred_f_cf,
        pred_fhat_factual=pred_fhat_factual,
        pred_fhat_cf=pred_fhat_cf,
        trace=trace,
        masks=masks,
        seed=seed,
    )


def _time_grid(sched: TrajectorySchedule, cfg: GuidanceConfig) -> list[float]:
    if sched.kind == DDPM:
        k_start = sched.index_of(cfg.start_time)
        if k_start != cfg.T:
            raise ConfigurationError(
                f"for ddpm schedules the guided loop runs one step per index: "
                f"round(start_time * {sched.T}) = {k_start} must equal cfg.T = {cfg.T}"
            )
        return [k / sched.T for k in range(k_start, -1, -1)]
    return [cfg.start_time * (cfg.T - i) / cfg.T for i in range(cfg.T + 1)]


def generate_diverse_set(
    x_0: np.ndarray,
    target_class: int,
    model,
    sched: TrajectorySchedule,
    codec,
    src: GradientSource,
    cfg: GuidanceConfig,
    f,
    seed: int = 0,
    f_hat=None,
    n_counterfactuals: int | None = None,
) -> CounterfactualRun:
    """Produce K counterfactuals, blocking previously edited regions each round."""
    k_total = cfg.max_counterfactuals if n_counterfactuals is None else n_counterfactuals
    if k_total < 1:
        raise ConfigurationError(f"need at least one counterfactual, got {k_total}")
    x_0 = np.ascontiguousarray(x_0, dtype=np.float64)
    results: list[CounterfactualResult] = []
    for k in range(1, k_total + 1):
        prev = [r.x_cf for r in results]
        cmap = cumulative_residual(prev, x_0, cfg.psi_kernel_sigma)
        allow = cmap < cfg.tau_inpaint
        k_seed = seed if k == 1 else derive_seed(seed, "cf", k)
        res = generate_counterfactual(
            x_0, target_class, model, sched, codec, src, cfg, f,
            fixed_mask=allow, seed=k_seed, f_hat=f_hat,
        )
        res.masks.cumulative = cmap
        results.append(res)
    return CounterfactualRun(
        x_factual=x_0,
        target_class=int(target_class),
        results=results,
        config=cfg,
        gradient_source=src.describe(),
        seed=seed,
    )


# --- run directory persistence -------------------------------------------------

def save_run(run: CounterfactualRun, run_dir: str | Path, experiment_config: dict | None = None) -> Path:
    """Write the run directory: config snapshot, per-step trace CSV, PNGs for
    the factual/counterfactual images and per-k exclusion masks, result.json,
    and a lossless array container for exact re-evaluation."""
    from PIL import Image

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    config_snapshot = {
        "guidance": run.config.to_dict(),
        "gradient_source": run.gradient_source,
        "seed": run.seed,
        "target_class": run.target_class,
    }
    if experiment_config is not None:
        config_snapshot["experiment"] = experiment_config
    (run_dir / "config.json").write_text(json.dumps(config_snapshot, sort_keys=True, indent=2) + "\n")

    with open(run_dir / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "step", "guidance_loss", "l1", "l2", "total"])
        for k, res in enumerate(run.results, start=1):
            for row in res.trace:
                writer.writerow([k, row["step"], repr(row["guidance_loss"]), repr(row["l1"]), repr(row["l2"]), repr(row["total"])])

    _save_png(run.x_factual, run_dir / "factual.png")
    arrays = {"factual": run.x_factual}
    result = {
        "target_class": run.target_class,
        "seed": run.seed,
        "n_counterfactuals": len(run.results),
        "counterfactuals": [],
    }
    for k, res in enumerate(run.results, start=1):
        _save_png(res.x_cf, run_dir / f"cf_{k}.png")
        _save_png(res.masks.exclusion.astype(np.float64), run_dir / f"mask_{k}.png")
        arrays[f"cf_{k}"] = res.x_cf
        arrays[f"exclusion_{k}"] = res.masks.exclusion
        result["counterfactuals"].append(
            {
                "k": k,
                "flipped": res.flipped,
                "hit_target": res.hit_target,
                "pred_f_factual": res.pred_f_factual,
                "pred_f_cf": res.pred_f_cf,
                "pred_fhat_factual": res.pred_fhat_factual,
                "pred_fhat_cf": res.pred_fhat_cf,
                "seed": res.seed,
            }
        )
    (run_dir / "result.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    save_container(run_dir / "arrays.cfxrun", RUN_MAGIC, {"config": config_snapshot}, arrays)
    return run_dir


def load_run_arrays(run_dir: str | Path) -> tuple[dict, dict, dict]:
    """Load (config, result, arrays) back from a run directory."""
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    result = json.loads((run_dir / "result.json").read_text())
    _, arrays = load_container(run_dir / "arrays.cfxrun", RUN_MAGIC)
    return config, result, arrays


def _save_png(img: np.ndarray, path: Path) -> None:
    from PIL import Image

    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr).save(path)
    elif arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0)).save(path)
