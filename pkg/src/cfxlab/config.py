"""Strict experiment configuration.

A single versioned JSON document drives every subcommand. Unknown keys are
errors (silent-default drift is the main reproducibility hazard in a
multi-stage pipeline), and every component seed is derived from the master
seed so a run is fully identified by the file plus one integer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .cfsearch import GuidanceConfig
from .classifiers import ClassifierTrainConfig, DistillConfig, SurrogateSpec
from .codec import AutoencoderConfig
from .dataset import DatasetSpec
from .errors import ConfigurationError
from .generator import GeneratorTrainConfig, TrajectorySchedule
from .metrics import DebiasConfig
from .seeding import derive_seed

CONFIG_VERSION = 1

GRADIENT_SOURCE_KEYS = {"kind", "smoothgrad_sigma", "smoothgrad_samples", "ig_steps", "ig_baseline"}
GRADIENT_SOURCE_NAMES = ("vanilla", "smoothgrad", "integrated_gradients", "surrogate", "smoothgrad_x_ig")


def _take(section: dict, allowed: set[str], where: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(section)


def _require(doc: dict, key: str):
    if key not in doc:
        raise ConfigurationError(f"missing required field: {key}")
    return doc[key]


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset: DatasetSpec
    fractions: tuple[float, float, float]
    codec_kind: str
    autoencoder: AutoencoderConfig
    schedule: TrajectorySchedule
    generator: GeneratorTrainConfig
    classifier: ClassifierTrainConfig
    surrogate_spec: SurrogateSpec
    surrogate_train: DistillConfig
    guidance: GuidanceConfig
    gradient_source: dict
    embedding: str
    debias: DebiasConfig
    debias_eval_correlation: float
    debias_eval_n_samples: int
    raw: dict

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw, sort_keys=True))


def default_config_dict(seed: int = 0, out_dir: str = "cfx-out") -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": seed,
        "out_dir": out_dir,
        "dataset": {
            "image_size": 24,
            "channels": 1,
            "n_samples": 3000,
            "true_feature": "shape",
            "confound_feature": "corner-patch",
            "correlation": 0.95,
            "noise_std": 0.02,
            "fractions": [0.8, 0.1, 0.1],
        },
        "codec": {"kind": "identity"},
        "schedule": {"kind": "rectified_flow", "T": 24},
        "generator": {"hidden": 32, "depth": 2, "time_dim": 32, "steps": 1200, "batch_size": 64, "lr": 2e-3},
        "classifier": {"width": 16, "epochs": 6, "batch_size": 64, "lr": 2e-3},
        "surrogate": {
            "spec": SurrogateSpec().to_dict(),
            "train": {"epochs": 6, "batch_size": 64, "lr": 2e-3},
        },
        "guidance": {k: v for k, v in GuidanceConfig().to_dict().items()},
        "gradient_source": {"kind": "surrogate"},
        "metrics": {"embedding": "flat_pixels"},
        "debias": {"epochs": 2, "batch_size": 64, "lr": 3e-4, "cf_repeat": 4, "eval_correlation": 0.5, "eval_n_samples": 600},
    }


def parse_config(doc: dict, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a JSON object")
    allowed_top = {
        "version", "seed", "out_dir", "dataset", "codec", "schedule", "generator",
        "classifier", "surrogate", "guidance", "gradient_source", "metrics", "debias",
    }
    doc = _take(doc, allowed_top, "config")
    version = _require(doc, "version")
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    seed = int(_require(doc, "seed")) if seed_override is None else int(seed_override)
    out_dir = out_override or doc.get("out_dir") or "cfx-out"

    ds_sec = _take(_require(doc, "dataset"), set(DatasetSpec.__dataclass_fields__) - {"seed"} | {"fractions"}, "dataset")
    fractions = tuple(ds_sec.pop("fractions", [0.8, 0.1, 0.1]))
    dataset = DatasetSpec(seed=derive_seed(seed, "dataset"), **ds_sec)
    dataset.validate()

    codec_sec = _take(doc.get("codec", {"kind": "identity"}), {"kind"} | set(AutoencoderConfig.__dataclass_fields__) - {"seed"}, "codec")
    codec_kind = codec_sec.pop("kind", "identity")
    if codec_kind not in ("identity", "autoencoder"):
        raise ConfigurationError(f"codec.kind must be 'identity' or 'autoencoder', got {codec_kind!r}")
    autoencoder = AutoencoderConfig(seed=derive_seed(seed, "codec"), **codec_sec)

    sched_sec = _take(doc.get("schedule", {"kind": "rectified_flow", "T": 24}), {"kind", "T", "beta_start", "beta_end"}, "schedule")
    kind = sched_sec.get("kind", "rectified_flow")
    T = int(sched_sec.get("T", 24))
    if kind == "ddpm":
        schedule = TrajectorySchedule.ddpm(T, sched_sec.get("beta_start", 1e-4), sched_sec.get("beta_end", 2e-2))
    elif kind == "rectified_flow":
        schedule = TrajectorySchedule.rectified_flow(T)
    else:
        raise ConfigurationError(f"schedule.kind must be 'rectified_flow' or 'ddpm', got {kind!r}")

    gen_sec = _take(doc.get("generator", {}), set(GeneratorTrainConfig.__dataclass_fields__) - {"seed"}, "generator")
    generator = GeneratorTrainConfig(seed=derive_seed(seed, "generator"), **gen_sec)

    clf_sec = _take(doc.get("classifier", {}), set(ClassifierTrainConfig.__dataclass_fields__) - {"seed"}, "classifier")
    classifier = ClassifierTrainConfig(seed=derive_seed(seed, "classifier"), **clf_sec)

    sur_sec = _take(doc.get("surrogate", {}), {"spec", "train"}, "surrogate")
    spec_sec = _take(sur_sec.get("spec", {}), set(SurrogateSpec.__dataclass_fields__), "surrogate.spec")
    surrogate_spec = SurrogateSpec(**spec_sec)
    surrogate_spec.validate()
    train_sec = _take(sur_sec.get("train", {}), set(DistillConfig.__dataclass_fields__) - {"seed"}, "surrogate.train")
    surrogate_train = DistillConfig(seed=derive_seed(seed, "surrogate", "gen"), **train_sec)

    guid_sec = _take(doc.get("guidance", {}), set(GuidanceConfig.__dataclass_fields__), "guidance")
    guidance = GuidanceConfig(**guid_sec)
    guidance.validate()

    src_sec = _take(doc.get("gradient_source", {"kind": "surrogate"}), GRADIENT_SOURCE_KEYS, "gradient_source")
    if src_sec.get("kind", "surrogate") not in GRADIENT_SOURCE_NAMES:
        raise ConfigurationError(
            f"gradient_source.kind must be one of {GRADIENT_SOURCE_NAMES}, got {src_sec.get('kind')!r}"
        )

    met_sec = _take(doc.get("metrics", {}), {"embedding"}, "metrics")
    embedding = met_sec.get("embedding", "flat_pixels")
    if embedding not in ("flat_pixels", "codec_latent"):
        raise ConfigurationError(f"metrics.embedding must be 'flat_pixels' or 'codec_latent', got {embedding!r}")

    deb_sec = _take(
        doc.get("debias", {}),
        set(DebiasConfig.__dataclass_fields__) - {"seed"} | {"eval_correlation", "eval_n_samples"},
        "debias",
    )
    eval_corr = float(deb_sec.pop("eval_correlation", 0.5))
    eval_n = int(deb_sec.pop("eval_n_samples", 600))
    debias = DebiasConfig(seed=derive_seed(seed, "debias"), **deb_sec)

    raw = dict(doc)
    raw["seed"] = seed
    raw["out_dir"] = out_dir
    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        dataset=dataset,
        fractions=fractions,
        codec_kind=codec_kind,
        autoencoder=autoencoder,
        schedule=schedule,
        generator=generator,
        classifier=classifier,
        surrogate_spec=surrogate_spec,
        surrogate_train=surrogate_train,
        guidance=guidance,
        gradient_source={"kind": "surrogate", **src_sec},
        embedding=embedding,
        debias=debias,
        debias_eval_correlation=eval_corr,
        debias_eval_n_samples=eval_n,
        raw=raw,
    )


def load_config(path: str | Path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, seed_override, out_override)
