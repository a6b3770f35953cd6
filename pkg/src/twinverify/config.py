"""JSON configuration: schema, validation, and the two shipped profiles.

``desk`` is the small profile every numeric check runs on; ``paper`` is the
full-scale reference configuration.  Region masks are stored as half-open
rectangles over the patch grid and expanded to index sets at load time.
Unknown keys anywhere in the file are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .distraction import DistractionConfig
from .region_attention import REGION_NAMES, RegionSpec, default_regions


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    channels: int
    patch_size: int
    dim: int
    heads: int
    depth: int
    scales: tuple[int, ...]
    regions: tuple[RegionSpec, ...]
    distraction: DistractionConfig
    ff_ratio: int = 4

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def embed_dim(self) -> int:
        # global (d) + four region features (4d) + asymmetry signature (d)
        return 6 * self.dim

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"model.image_size: {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}"
            )
        rows, cols = self.grid
        if cols % 2:
            raise ConfigError(
                f"model.patch_size: grid width {cols} is odd, but the asymmetry "
                "stream needs an even number of patch columns to split halves"
            )
        if self.dim % self.heads:
            raise ConfigError(
                f"model.heads: width {self.dim} is not divisible by {self.heads}"
            )
        lo, hi = self.distraction.layer_range
        if hi > self.depth:
            raise ConfigError(
                f"model.distraction.layer_range: upper end {hi} exceeds depth "
                f"{self.depth}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"model.channels: must be 1 or 3, got {self.channels}")
        if len(set(self.scales)) != len(self.scales) or any(s < 1 for s in self.scales):
            raise ConfigError(f"model.scales: need distinct positive scales, got {self.scales}")
        names = tuple(r.name for r in self.regions)
        if names != REGION_NAMES:
            raise ConfigError(f"model.regions: need exactly {REGION_NAMES}, got {names}")
        for r in self.regions:
            try:
                r.validate(self.n_patches)
            except IndexError as e:
                raise ConfigError(f"model.regions.{r.name}: {e}") from e


@dataclass(frozen=True)
class LossConfig:
    lambda_triplet: float = 0.1
    triplet_margin: float = 0.5
    arc_margin: float = 0.5
    arc_scale: float = 64.0
    oversample_ratio: float = 3.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    weight_decay: float
    batch_size: int
    accum_steps: int
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(
                f"train.batch_size: must be even and >= 2, got {self.batch_size}"
            )
        if self.accum_steps < 1 or self.total_steps < 1:
            raise ConfigError("train.accum_steps and train.total_steps must be >= 1")


@dataclass(frozen=True)
class SynthConfig:
    n_families: int
    images_per_identity: int
    image_size: int
    base_seed: int = 0
    twin_divergence: float = 1.0
    noise_std: float = 0.03
    test_images_per_identity: int = 2

    def validate(self) -> None:
        if self.image_size < 2:
            raise ConfigError(f"synth.image_size: must be >= 2, got {self.image_size}")
        if self.n_families < 1 or self.images_per_identity < 1:
            raise ConfigError("synth: counts must be positive")
        if self.twin_divergence < 0 or self.noise_std < 0:
            raise ConfigError("synth: twin_divergence and noise_std must be >= 0")
        if self.test_images_per_identity >= self.images_per_identity:
            raise ConfigError(
                "synth.test_images_per_identity must leave at least one "
                "training image per identity"
            )


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    synth: SynthConfig


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _take(section: str, d: dict, known: dict) -> dict:
    """Pull known keys with defaults, rejecting anything unrecognized."""
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    missing = [k for k, v in known.items() if v is _REQUIRED and k not in d]
    if missing:
        raise ConfigError(f"{section}: missing required key(s) {missing}")
    return {k: d.get(k, v) for k, v in known.items()}


_REQUIRED = object()


def _parse_regions(raw: dict, grid: tuple[int, int]) -> tuple[RegionSpec, ...]:
    rows, cols = grid
    unknown = set(raw) - set(REGION_NAMES)
    if unknown:
        raise ConfigError(f"model.regions: unknown region name(s) {sorted(unknown)}")
    specs = []
    for name in REGION_NAMES:
        if name not in raw:
            raise ConfigError(f"model.regions: missing region {name!r}")
        indices: set[int] = set()
        for rect in raw[name]:
            r = _take(f"model.regions.{name}", rect, {"rows": _REQUIRED, "cols": _REQUIRED})
            (r0, r1), (c0, c1) = r["rows"], r["cols"]
            if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
                raise ConfigError(
                    f"model.regions.{name}: rectangle rows={r['rows']} "
                    f"cols={r['cols']} outside the {rows}x{cols} grid"
                )
            indices.update(rr * cols + cc for rr in range(r0, r1) for cc in range(c0, c1))
        specs.append(RegionSpec(name, tuple(sorted(indices))))
    return tuple(specs)


def _parse_model(raw: dict) -> ModelConfig:
    fields = _take(
        "model",
        raw,
        {
            "image_size": _REQUIRED,
            "channels": _REQUIRED,
            "patch_size": _REQUIRED,
            "dim": _REQUIRED,
            "heads": _REQUIRED,
            "depth": _REQUIRED,
            "scales": _REQUIRED,
            "regions": None,
            "distraction": _REQUIRED,
            "ff_ratio": 4,
        },
    )
    d = _take(
        "model.distraction",
        fields["distraction"],
        {"probability": _REQUIRED, "layer_range": _REQUIRED, "rng_seed": 0},
    )
    try:
        distraction = DistractionConfig(
            probability=float(d["probability"]),
            layer_range=tuple(int(v) for v in d["layer_range"]),
            rng_seed=int(d["rng_seed"]),
        )
    except ValueError as e:
        raise ConfigError(f"model.distraction: {e}") from e
    grid_side = fields["image_size"] // fields["patch_size"]
    grid = (grid_side, grid_side)
    if fields["regions"] is None:
        regions = tuple(default_regions(*grid))
    else:
        regions = _parse_regions(fields["regions"], grid)
    cfg = ModelConfig(
        image_size=int(fields["image_size"]),
        channels=int(fields["channels"]),
        patch_size=int(fields["patch_size"]),
        dim=int(fields["dim"]),
        heads=int(fields["heads"]),
        depth=int(fields["depth"]),
        scales=tuple(int(s) for s in fields["scales"]),
        regions=regions,
        distraction=distraction,
        ff_ratio=int(fields["ff_ratio"]),
    )
    cfg.validate()
    return cfg


def parse_config(raw: dict) -> RunConfig:
    top = _take(
        "config",
        raw,
        {"model": _REQUIRED, "loss": {}, "train": _REQUIRED, "synth": _REQUIRED},
    )
    model = _parse_model(top["model"])
    loss = LossConfig(
        **_take(
            "loss",
            top["loss"],
            {
                "lambda_triplet": 0.1,
                "triplet_margin": 0.5,
                "arc_margin": 0.5,
                "arc_scale": 64.0,
                "oversample_ratio": 3.0,
            },
        )
    )
    train = TrainConfig(
        **_take(
            "train",
            top["train"],
            {
                "lr": _REQUIRED,
                "weight_decay": _REQUIRED,
                "batch_size": _REQUIRED,
                "accum_steps": 1,
                "total_steps": _REQUIRED,
                "beta1": 0.9,
                "beta2": 0.999,
                "eps": 1e-8,
            },
        )
    )
    train.validate()
    synth = SynthConfig(
        **_take(
            "synth",
            top["synth"],
            {
                "n_families": _REQUIRED,
                "images_per_identity": _REQUIRED,
                "image_size": _REQUIRED,
                "base_seed": 0,
                "twin_divergence": 1.0,
                "noise_std": 0.03,
                "test_images_per_identity": 2,
            },
        )
    )
    synth.validate()
    return RunConfig(model=model, loss=loss, train=train, synth=synth)


def load_config(path_or_profile: str | Path) -> RunConfig:
    """Load a config from a JSON file path or a shipped profile name."""
    p = Path(path_or_profile)
    if p.suffix == ".json" or p.exists():
        text = p.read_text()
    else:
        res = resources.files("twinverify").joinpath(f"profiles/{path_or_profile}.json")
        if not res.is_file():
            raise ConfigError(
                f"{path_or_profile!r} is neither a config file nor a shipped "
                f"profile (have: {', '.join(sorted(available_profiles()))})"
            )
        text = res.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(raw)


def available_profiles() -> list[str]:
    root = resources.files("twinverify").joinpath("profiles")
    return [f.name[: -len(".json")] for f in root.iterdir() if f.name.endswith(".json")]


def model_config_digest(cfg: ModelConfig) -> str:
    """Stable hash of the model section, stored in checkpoints."""
    blob = {
        "image_size": cfg.image_size,
        "channels": cfg.channels,
        "patch_size": cfg.patch_size,
        "dim": cfg.dim,
        "heads": cfg.heads,
        "depth": cfg.depth,
        "ff_ratio": cfg.ff_ratio,
        "scales": list(cfg.scales),
        "regions": {r.name: list(r.patch_indices) for r in cfg.regions},
        "distraction": {
            "probability": cfg.distraction.probability,
            "layer_range": list(cfg.distraction.layer_range),
            "rng_seed": cfg.distraction.rng_seed,
        },
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()
