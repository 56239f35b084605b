"""Experiment configuration, desk/paper profiles and the flat key/value config format.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Top-level keys mirror :class:`ExperimentConfig`; nested fields use dotted
keys (``gan.total_steps = 400``, ``unet.epochs = 70``,
``synthetic.slices_per_patient = 8``).
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import ShapesSpec
from .gan.networks import GanConfig
from .segmentation import DATASET_EPOCHS, UNetConfig

GENERATED_COUNTS = (20, 50, 100, 200, 400, 500)
METHODS = ("BL", "BSG", "MCSG")
METHOD_DISPLAY = {"BL": "BL", "BSG": "B-SG", "MCSG": "MC-SG"}


@dataclass
class SyntheticConfig:
    patients: int = 20
    modalities: int = 1
    num_classes: int = 3
    slices_per_patient: int = 8
    noise_sigma: float = 0.1

    def shapes_spec(self, resolution: int) -> ShapesSpec:
        return ShapesSpec(
            resolution=resolution,
            modalities=self.modalities,
            num_classes=self.num_classes,
            slices_per_patient=self.slices_per_patient,
            noise_sigma=self.noise_sigma,
        )


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"  # "synthetic" or a dataset directory
    dataset_name: str = "synthetic"  # selects augmentation toggles / epoch defaults
    patients: int = 20  # the "#patients case"
    method: str = "BL"
    augmentation: bool = False
    generated_count: int = 0
    seed: int = 0
    out: str = "out"
    profile: str = "desk"
    resolution: int = 64
    normalization: str = "zscore"
    keep_empty_gan: bool = False
    slices_per_generated_patient: int | None = None  # None: median of the real training set
    fid_dim: int = 64
    truncation_psi: float = 1.0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    # per-method U-Net overrides keyed by method label, e.g. {"BL + w.o.": {"lr": 0.0}}
    unet_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "BL" and self.generated_count != 0:
            raise ValueError("BL uses no generated samples; generated_count must be 0")
        if self.method != "BL" and self.generated_count not in GENERATED_COUNTS:
            raise ValueError(f"generated_count must be one of {GENERATED_COUNTS} for {self.method}")
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.normalization not in ("zscore", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def case_id(self) -> str:
        return f"{Path(self.dataset_name).name.upper()}-{self.patients}"

    @property
    def label(self) -> str:
        return method_label(self.method, self.augmentation, self.generated_count)

    def with_method(self, method: str, augmentation: bool, count: int) -> ExperimentConfig:
        return dataclasses.replace(self, method=method, augmentation=augmentation, generated_count=count)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gan"] = self.gan.to_dict()
        return d

    def config_hash(self) -> str:
        """Identity of a grid point: everything except where outputs are written."""
        d = self.to_dict()
        d.pop("out")
        if self.method == "BL":
            # generators play no part in a baseline run
            d.pop("gan")
            d.pop("truncation_psi")
        d["unet_overrides"] = self.unet_overrides.get(self.label, {})
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def method_label(method: str, augmentation: bool, count: int) -> str:
    aug = "w." if augmentation else "w.o."
    if method == "BL":
        return f"BL + {aug}"
    return f"{METHOD_DISPLAY[method]} + {aug} + {count}"


def grid_points() -> list[tuple[str, bool, int]]:
    """The 26 (method, augmentation, count) points, without-augmentation block first."""
    points = []
    for aug in (False, True):
        points.append(("BL", aug, 0))
        for method in ("BSG", "MCSG"):
            points.extend((method, aug, c) for c in GENERATED_COUNTS)
    return points


def grid_labels() -> list[str]:
    return [method_label(*p) for p in grid_points()]


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def desk_profile(**overrides) -> ExperimentConfig:
    """Workstation-sized defaults: 64 px synthetic phantoms, small networks, short schedules."""
    cfg = ExperimentConfig(
        profile="desk",
        resolution=64,
        gan=GanConfig(
            resolution=64, latent_dim=64, mapping_layers=2, channel_base=256, channel_max=32,
            batch_size=8, total_steps=1500, r1_gamma=1.0, r1_interval=16, lr_g=2e-3, lr_d=2e-3,
        ),
        unet=UNetConfig(base_width=8, depth=3, lr=3e-3, batch_size=8, epochs=70, steps_per_epoch=4),
    )
    return apply_overrides(cfg, overrides)


def paper_profile(dataset_name: str = "brats", **overrides) -> ExperimentConfig:
    """Full-size settings for clinical data (segmentation values as published)."""
    epochs = DATASET_EPOCHS.get(dataset_name.lower(), 70)
    cfg = ExperimentConfig(
        profile="paper",
        dataset_name=dataset_name,
        resolution=256,
        gan=GanConfig(
            resolution=256, latent_dim=512, mapping_layers=8, channel_base=16384, channel_max=512,
            batch_size=16, total_steps=100_000, r1_gamma=1.0,
        ),
        unet=UNetConfig(base_width=32, depth=4, lr=1e-4, batch_size=64, epochs=epochs, steps_per_epoch=None),
    )
    return apply_overrides(cfg, overrides)


def profile_config(profile: str, dataset_name: str = "synthetic") -> ExperimentConfig:
    if profile == "desk":
        return desk_profile()
    if profile == "paper":
        return paper_profile(dataset_name)
    raise ValueError(f"unknown profile {profile!r}")


# -- flat key/value files ----------------------------------------------------


def _parse_value(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    return values


def apply_overrides(cfg: ExperimentConfig, values: dict) -> ExperimentConfig:
    top, nested = {}, {"gan": {}, "unet": {}, "synthetic": {}}
    for key, value in values.items():
        if "." in key:
            group, name = key.split(".", 1)
            if group not in nested:
                raise KeyError(f"unknown config group {group!r}")
            nested[group][name] = value
        else:
            if key not in {f.name for f in dataclasses.fields(ExperimentConfig)}:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = value
    gan_kw = {**nested["gan"]}
    if "resolution" in top:
        gan_kw.setdefault("resolution", top["resolution"])
    out = dataclasses.replace(
        cfg,
        **top,
        gan=dataclasses.replace(cfg.gan, **gan_kw) if gan_kw else cfg.gan,
        unet=dataclasses.replace(cfg.unet, **nested["unet"]) if nested["unet"] else cfg.unet,
        synthetic=dataclasses.replace(cfg.synthetic, **nested["synthetic"]) if nested["synthetic"] else cfg.synthetic,
    )
    return out


def load_config(path: str | Path | None = None, profile: str | None = None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    profile = values.pop("profile", None) or profile or "desk"
    base = profile_config(profile, values.get("dataset_name", "synthetic"))
    return apply_overrides(base, values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    d = cfg.to_dict()
    for key, value in d.items():
        if key in ("gan", "unet", "synthetic"):
            for sub, v in value.items():
                lines.append(f"{key}.{sub} = {v!r}")
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"
