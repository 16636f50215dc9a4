"""Black-box classifier, smoothed surrogate distillation, and gradient sources.

The surrogate mirrors the base classifier's architecture but swaps in a
smooth activation family and is trained to match the base model's soft
predictions under mixup, label smoothing, and adversarial regularization,
so its input gradients vary less between nearby points. Gradient sources
wrap the different ways of turning a classifier into a guidance direction
for the latent search: raw gradients, SmoothGrad, integrated gradients,
the distilled surrogate, and elementwise products of two sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .dataset import LabeledDataset
from .errors import ConfigurationError, DomainError, NumericError, ShapeError, TrainingError
from .io import load_container, save_container
from .seeding import derive_seed, np_rng, torch_generator
from .torchutils import DTYPE, as_tensor, onehot, shuffled_batches

CLASSIFIER_MAGIC = "CFXCLF1"

ACTIVATION_FAMILIES = ("standard", "smooth")
GRADIENT_KINDS = ("vanilla", "smoothgrad", "integrated_gradients", "surrogate", "product")
IG_BASELINES = ("zeros", "blurred_input")

_IG_BLUR_SIGMA = 2.0  # fixed width of the blurred_input baseline


class ConvClassifier(nn.Module):
    """Small convolutional logit model; `smooth` family uses Softplus throughout."""

    def __init__(self, in_channels: int, image_size: int, n_classes: int = 2, width: int = 16, activation_family: str = "standard"):
        super().__init__()
        if activation_family not in ACTIVATION_FAMILIES:
            raise ConfigurationError(f"unknown activation family {activation_family!r}")
        if image_size % 4:
            raise ConfigurationError(f"classifier expects image_size divisible by 4, got {image_size}")
        act = nn.ReLU if activation_family == "standard" else nn.Softplus
        self.in_channels = in_channels
        self.image_size = image_size
        self.n_classes = n_classes
        self.width = width
        self.activation_family = activation_family
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            act(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            act(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            act(),
        )
        self.head = nn.Linear(2 * width * (image_size // 4) ** 2, n_classes)
        self.history: dict[str, list[float]] = {}
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.flatten(1))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x).argmax(dim=1)

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return F.softmax(self.forward(x), dim=1)

    def arch_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "n_classes": self.n_classes,
            "width": self.width,
            "activation_family": self.activation_family,
        }


def accuracy(clf: ConvClassifier, ds: LabeledDataset, batch_size: int = 256) -> float:
    x = as_tensor(ds.images)
    y = torch.from_numpy(ds.labels)
    hits = 0
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            hits += int((clf(x[start : start + batch_size]).argmax(1) == y[start : start + batch_size]).sum())
    return hits / len(ds)


@dataclass(frozen=True)
class ClassifierTrainConfig:
    width: int = 16
    epochs: int = 6
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    activation_family: str = "standard"

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def train_base(train_ds: LabeledDataset, config: ClassifierTrainConfig, val_ds: LabeledDataset | None = None) -> ConvClassifier:
    """Cross-entropy training of the base classifier; accuracy history recorded."""
    if len(train_ds) == 0:
        raise ConfigurationError("train_base requires a non-empty train split")
    torch.manual_seed(derive_seed(config.seed, "clf-init"))
    clf = ConvClassifier(
        train_ds.images.shape[1],
        train_ds.images.shape[2],
        n_classes=train_ds.n_classes,
        width=config.width,
        activation_family=config.activation_family,
    )
    opt = torch.optim.Adam(clf.parameters(), lr=config.lr)
    gen = torch_generator(config.seed, "clf-batches")
    x = as_tensor(train_ds.images)
    y = torch.from_numpy(train_ds.labels)
    history: dict[str, list[float]] = {"loss": [], "train_accuracy": [], "val_accuracy": []}
    step = 0
    for _ in range(config.epochs):
        for idx in shuffled_batches(len(train_ds), config.batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(clf(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss is not finite", step=step)
            loss.backward()
            opt.step()
            history["loss"].append(float(loss))
            step += 1
        history["train_accuracy"].append(accuracy(clf, train_ds))
        if val_ds is not None and len(val_ds):
            history["val_accuracy"].append(accuracy(clf, val_ds))
    clf.history = history
    return clf


@dataclass(frozen=True)
class SurrogateSpec:
    lambda_mixup: float = 1.0
    lambda_ls: float = 1.0
    lambda_adv: float = 0.5
    mixup_beta: float = 1.0
    ls_epsilon: float = 0.1
    adv_epsilon: float = 0.03
    adv_norm: str = "linf"
    adv_steps: int = 3
    distill_temperature: float = 2.0

    def validate(self) -> None:
        for name in ("lambda_mixup", "lambda_ls", "lambda_adv", "adv_epsilon"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        if self.mixup_beta <= 0:
            raise ConfigurationError(f"mixup_beta must be > 0, got {self.mixup_beta}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise ConfigurationError(f"ls_epsilon must lie in [0, 1), got {self.ls_epsilon}")
        if self.adv_norm not in ("l2", "linf"):
            raise ConfigurationError(f"adv_norm must be 'l2' or 'linf', got {self.adv_norm!r}")
        if self.adv_steps < 1:
            raise ConfigurationError(f"adv_steps must be >= 1, got {self.adv_steps}")
        if self.distill_temperature <= 0:
            raise ConfigurationError(f"distill_temperature must be > 0, got {self.distill_temperature}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def mixup_batch(x_i: torch.Tensor, y_i: torch.Tensor, x_j: torch.Tensor, y_j: torch.Tensor, alpha: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Convex combination of two example batches with the same mixing weight."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"mixup alpha must lie in [0, 1], got {alpha}")
    if x_i.shape != x_j.shape:
        raise ShapeError("mixup inputs differ in shape", expected=tuple(x_i.shape), got=tuple(x_j.shape))
    if y_i.shape != y_j.shape:
        raise ShapeError("mixup labels differ in shape", expected=tuple(y_i.shape), got=tuple(y_j.shape))
    return alpha * x_i + (1.0 - alpha) * x_j, alpha * y_i + (1.0 - alpha) * y_j


def sample_mixup_alpha(mixup_beta: float, rng: np.random.Generator) -> float:
    return float(rng.beta(mixup_beta, mixup_beta))


def smooth_labels(y: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Soften one-hot targets: (1 - eps) * y + eps / C."""
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"label-smoothing epsilon must lie in [0, 1), got {epsilon}")
    n_classes = y.shape[-1]
    return (1.0 - epsilon) * y + epsilon / n_classes


def _ce_per_sample(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, y, reduction="none")


def _soft_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def adversarial_perturb(clf: ConvClassifier, x: torch.Tensor, y: torch.Tensor, spec: SurrogateSpec) -> torch.Tensor:
    """Projected gradient ascent on the cross-entropy inside the perturbation ball.

    Each ascent step is accepted per-sample only if it does not decrease the
    loss (checked before projection, tolerance 1e-6), then the iterate is
    projected back onto the ball around x.
    """
    spec.validate()
    if spec.adv_epsilon == 0:
        return x.detach().clone()
    step_size = spec.adv_epsilon / spec.adv_steps
    cur = x.detach().clone()
    with torch.no_grad():
        loss_cur = _ce_per_sample(clf(cur), y)
    for _ in range(spec.adv_steps):
        leaf = cur.detach().clone().requires_grad_(True)
        loss = _ce_per_sample(clf(leaf), y).sum()
        (g,) = torch.autograd.grad(loss, leaf)
        if not torch.isfinite(g).all():
            raise NumericError("adversarial gradient is not finite")
        if spec.adv_norm == "linf":
            direction = torch.sign(g)
        else:
            norms = g.flatten(1).norm(dim=1).clamp_min(1e-12)
            direction = g / norms[:, None, None, None]
        cand = cur + step_size * direction
        with torch.no_grad():
            loss_cand = _ce_per_sample(clf(cand), y)
        accept = (loss_cand >= loss_cur - 1e-6)[:, None, None, None]
        cur = torch.where(accept, cand, cur)
        delta = cur - x
        if spec.adv_norm == "linf":
            delta = delta.clamp(-spec.adv_epsilon, spec.adv_epsilon)
        else:
            norms = delta.flatten(1).norm(dim=1).clamp_min(1e-12)
            scale = (spec.adv_epsilon / norms).clamp(max=1.0)
            delta = delta * scale[:, None, None, None]
        cur = (x + delta).detach()
        with torch.no_grad():
            loss_cur = _ce_per_sample(clf(cur), y)
    return cur


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 6
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 100

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def distill_surrogate(
    f: ConvClassifier,
    train_ds: LabeledDataset,
    spec: SurrogateSpec,
    config: DistillConfig,
    val_ds: LabeledDataset | None = None,
) -> ConvClassifier:
    """Distill a smooth-activation surrogate of f.

    Objective per batch: temperature KL of the surrogate against f's soft
    predictions (scaled by T^2) plus weighted mixup, label-smoothing, and
    adversarial cross-entropy terms. Per-term loss curves are recorded, and
    the argmax agreement with f on the validation split is reported.
    """
    spec.validate()
    if len(train_ds) == 0:
        raise ConfigurationError("distillation requires a non-empty train split")
    torch.manual_seed(derive_seed(config.seed, "surrogate-init"))
    surrogate = ConvClassifier(
        f.in_channels, f.image_size, n_classes=f.n_classes, width=f.width, activation_family="smooth"
    )
    opt = torch.optim.Adam(surrogate.parameters(), lr=config.lr)
    gen = torch_generator(config.seed, "surrogate-batches")
    alpha_rng = np_rng(config.seed, "surrogate-mixup")
    x = as_tensor(train_ds.images)
    y = torch.from_numpy(train_ds.labels)
    y1h = onehot(y, f.n_classes)
    temp = spec.distill_temperature

    history: dict[str, list[float]] = {"total": [], "kl": [], "mixup": [], "ls": [], "adv": []}
    step = 0
    for _ in range(config.epochs):
        for idx in shuffled_batches(len(train_ds), config.batch_size, gen):
            xb, yb, yb1h = x[idx], y[idx], y1h[idx]
            with torch.no_grad():
                teacher_logp = F.log_softmax(f(xb) / temp, dim=1)
            opt.zero_grad()
            student_logp = F.log_softmax(surrogate(xb) / temp, dim=1)
            q = student_logp.exp()
            kl = (q * (student_logp - teacher_logp)).sum(dim=1).mean() * temp**2

            if spec.lambda_mixup > 0:
                alpha = sample_mixup_alpha(spec.mixup_beta, alpha_rng)
                perm = torch.randperm(xb.shape[0], generator=gen)
                x_mix, y_mix = mixup_batch(xb, yb1h, xb[perm], yb1h[perm], alpha)
                l_mixup = _soft_ce(surrogate(x_mix), y_mix)
            else:
                l_mixup = torch.zeros((), dtype=DTYPE)
            if spec.lambda_ls > 0:
                l_ls = _soft_ce(surrogate(xb), smooth_labels(yb1h, spec.ls_epsilon))
            else:
                l_ls = torch.zeros((), dtype=DTYPE)
            if spec.lambda_adv > 0 and spec.adv_epsilon > 0:
                x_adv = adversarial_perturb(surrogate, xb, yb, spec)
                l_adv = F.cross_entropy(surrogate(x_adv), yb)
            else:
                l_adv = torch.zeros((), dtype=DTYPE)

            total = kl + spec.lambda_mixup * l_mixup + spec.lambda_ls * l_ls + spec.lambda_adv * l_adv
            if not torch.isfinite(total):
                raise TrainingError("distillation loss is not finite", step=step)
            total.backward()
            opt.step()
            for key, val in (("total", total), ("kl", kl), ("mixup", l_mixup), ("ls", l_ls), ("adv", l_adv)):
                history[key].append(float(val))
            step += 1

    surrogate.history = history
    if val_ds is not None and len(val_ds):
        xv = as_tensor(val_ds.images)
        with torch.no_grad():
            agree = float((surrogate(xv).argmax(1) == f(xv).argmax(1)).double().mean())
        surrogate.history["val_agreement"] = [agree]
    return surrogate


@dataclass(frozen=True)
class GradientSource:
    """Descriptor of how classifier gradients are produced for guidance."""

    kind: str
    classifier: ConvClassifier | None = None
    smoothgrad_sigma: float = 0.1
    smoothgrad_samples: int = 8
    ig_steps: int = 32
    ig_baseline: str = "zeros"
    factors: tuple["GradientSource", "GradientSource"] | None = None

    def validate(self) -> None:
        if self.kind not in GRADIENT_KINDS:
            raise ConfigurationError(f"unknown gradient source kind {self.kind!r}; expected one of {GRADIENT_KINDS}")
        if self.kind == "product":
            if self.factors is None or len(self.factors) != 2:
                raise ConfigurationError("product gradient source needs exactly two factors")
            for f_src in self.factors:
                f_src.validate()
            return
        if self.classifier is None:
            raise ConfigurationError(f"gradient source {self.kind!r} needs a classifier")
        if self.smoothgrad_samples < 1 or self.ig_steps < 1:
            raise ConfigurationError("smoothgrad_samples and ig_steps must be >= 1")
        if self.ig_baseline not in IG_BASELINES:
            raise ConfigurationError(f"ig_baseline must be one of {IG_BASELINES}, got {self.ig_baseline!r}")

    def describe(self) -> dict:
        if self.kind == "product":
            return {"kind": "product", "factors": [f.describe() for f in self.factors]}
        d = {"kind": self.kind}
        if self.kind == "smoothgrad":
            d.update(smoothgrad_sigma=self.smoothgrad_sigma, smoothgrad_samples=self.smoothgrad_samples)
        if self.kind == "integrated_gradients":
            d.update(ig_steps=self.ig_steps, ig_baseline=self.ig_baseline)
        return d


def make_gradient_source(kind: str, f: ConvClassifier, f_hat: ConvClassifier | None = None, **params) -> GradientSource:
    """Build a source by name; `surrogate` runs on f_hat, everything else on f."""
    if kind == "smoothgrad_x_ig":
        return GradientSource(
            kind="product",
            factors=(
                make_gradient_source("smoothgrad", f, f_hat, **params),
                make_gradient_source("integrated_gradients", f, f_hat, **params),
            ),
        )
    if kind == "surrogate":
        if f_hat is None:
            raise ConfigurationError("surrogate gradient source needs the distilled surrogate")
        src = GradientSource(kind=kind, classifier=f_hat, **params)
    else:
        src = GradientSource(kind=kind, classifier=f, **params)
    src.validate()
    return src


def _raw_gradient(clf: ConvClassifier, codec, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    leaf = z.detach().clone().requires_grad_(True)
    loss = _ce_per_sample(clf(codec.decode(leaf)), target).sum()
    (g,) = torch.autograd.grad(loss, leaf)
    return g


def target_loss(clf: ConvClassifier, codec, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy toward the target class, no gradient."""
    with torch.no_grad():
        return _ce_per_sample(clf(codec.decode(z)), target)


def guidance_gradient(
    src: GradientSource,
    codec,
    z: torch.Tensor,
    target_class,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Latent-shaped gradient of the target-class loss at z, per the source kind."""
    src.validate()
    if z.ndim != 4:
        raise ShapeError("guidance_gradient expects a batched latent", expected=("B", "C", "H", "W"), got=z.shape)
    target = torch.as_tensor(target_class)
    if target.ndim == 0:
        target = target.expand(z.shape[0])
    target = target.long()

    if src.kind == "product":
        g = guidance_gradient(src.factors[0], codec, z, target, generator) * guidance_gradient(
            src.factors[1], codec, z, target, generator
        )
    elif src.kind in ("vanilla", "surrogate"):
        g = _raw_gradient(src.classifier, codec, z, target)
    elif src.kind == "smoothgrad":
        if src.smoothgrad_sigma == 0.0:
            g = _raw_gradient(src.classifier, codec, z, target)
        else:
            if generator is None:
                generator = torch_generator(0, "smoothgrad")
            acc = torch.zeros_like(z)
            for _ in range(src.smoothgrad_samples):
                noise = torch.randn(z.shape, generator=generator, dtype=DTYPE) * src.smoothgrad_sigma
                acc += _raw_gradient(src.classifier, codec, z + noise, target)
            g = acc / src.smoothgrad_samples
    elif src.kind == "integrated_gradients":
        baseline = _ig_baseline(src, z)
        acc = torch.zeros_like(z)
        for k in range(src.ig_steps):
            point = baseline + (k + 0.5) / src.ig_steps * (z - baseline)
            acc += _raw_gradient(src.classifier, codec, point, target)
        g = (z - baseline) * acc / src.ig_steps
    else:  # pragma: no cover - validate() rejects unknown kinds
        raise ConfigurationError(f"unknown gradient source kind {src.kind!r}")

    if not torch.isfinite(g).all():
        raise NumericError("guidance gradient is not finite", term=src.kind)
    return g


def _ig_baseline(src: GradientSource, z: torch.Tensor) -> torch.Tensor:
    if src.ig_baseline == "zeros":
        return torch.zeros_like(z)
    z_np = z.detach().numpy()
    out = np.empty_like(z_np)
    for b in range(z_np.shape[0]):
        for c in range(z_np.shape[1]):
            out[b, c] = kernels.blur2d(z_np[b, c], _IG_BLUR_SIGMA)
    return torch.from_numpy(out)


def save_classifier(clf: ConvClassifier, path: str | Path, role: str = "base") -> None:
    meta = {"arch": clf.arch_dict(), "role": role}
    arrays = {f"param/{k}": v.detach().numpy() for k, v in clf.state_dict().items()}
    save_container(path, CLASSIFIER_MAGIC, meta, arrays)


def load_classifier(path: str | Path) -> ConvClassifier:
    meta, arrays = load_container(path, CLASSIFIER_MAGIC)
    clf = ConvClassifier(**meta["arch"])
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    clf.load_state_dict(state)
    return clf
