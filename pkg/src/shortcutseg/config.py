"""INI experiment configuration: schema, parsing and whole-file validation.

Every key has a type and a default; unknown sections or keys are errors.
Validation collects *all* problems and raises one :class:`ConfigError`
before any file or model is created.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .phantom import MarkerSpec, Placement, SceneSpec
from .segnet import PaddingMode, TrainSchedule, UNetConfig

KINDS = ("padding_shortcut", "marker_shortcut", "audit")

# seed offsets per random stream, added to the global seed
SEED_DATASET = 1
SEED_INIT = 2
SEED_SHUFFLE = 3
SEED_AUGMENT = 4
SEED_MARKERS = 5

# scene seeds: (global + 1) * SPLIT_STRIDE * 4 + split_index * SPLIT_STRIDE + i
SPLIT_STRIDE = 100_000


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "kind": (_str, "padding_shortcut"),
        "seed": (int, 0),
        "out_dir": (_str, "out"),
    },
    "data": {
        "ingest_path": (_str, ""),
        "target_size": (int, 64),
        "size": (int, 64),
        "channels": (int, 1),
        "n_train": (int, 512),
        "n_val": (int, 64),
        "n_test": (int, 128),
        "placement": (_str, "centered"),
        "sigma_frac": (float, 0.05),
        "axis_range": (_floats, (0.1, 0.3)),
        "contrast_range": (_floats, (0.3, 0.6)),
        "base_range": (_floats, (0.2, 0.5)),
        "noise_amplitude": (float, 0.1),
        "noise_cell": (int, 8),
    },
    "markers": {
        "rho": (float, 1.0),
        "arm": (int, 4),
        "thickness": (int, 1),
        "color": (_floats, (1.0, 0.85, 0.1)),
        "tolerance": (float, 0.15),
        "n_sequences": (int, 16),
        "sequence_length": (int, 8),
    },
    "model": {
        "depth": (int, 3),
        "base_channels": (int, 8),
        "padding_mode": (_str, "zeros"),
    },
    "schedule": {
        "learning_rate": (float, 1e-3),
        "epochs": (int, 30),
        "batch_size": (int, 16),
        "optimizer": (_str, "adam"),
        "weight_decay": (float, 0.0),
        "lr_schedule": (_str, "constant"),
        "augmentation": (_str, "random_crop"),
        "crop_scale": (_floats, (0.5, 1.0)),
    },
    "probes": {
        "n_bands": (int, 5),
        "sweep_steps": (int, 9),
        "sweep_angle": (float, 0.0),
        "sweep_seed": (int, 0),
        "centroid_bins": (int, 32),
        "saliency_images": (int, 32),
        "saliency_method": (_str, "gradient"),
        "valid_control": (_bool, False),
        "valid_depth": (int, 1),
        "predictions_path": (_str, ""),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["experiment"]["out_dir"])

    def stream(self, offset: int) -> int:
        return self.seed + offset

    def scene_seed(self, split_index: int, i: int) -> int:
        return (self.seed + SEED_DATASET) * SPLIT_STRIDE * 4 + split_index * SPLIT_STRIDE + i

    def scene_spec(self, placement: str | None = None) -> SceneSpec:
        d = self.values["data"]
        return SceneSpec(size=d["size"], channels=d["channels"], axis_range=d["axis_range"],
                         contrast_range=d["contrast_range"], base_range=d["base_range"],
                         noise_amplitude=d["noise_amplitude"], noise_cell=d["noise_cell"],
                         placement=placement or d["placement"], sigma_frac=d["sigma_frac"])

    def marker_spec(self) -> MarkerSpec:
        m = self.values["markers"]
        return MarkerSpec(rho=m["rho"], arm=m["arm"], thickness=m["thickness"], color_rgb=tuple(m["color"]))

    def unet_config(self, in_channels: int, depth: int | None = None, padding: str | None = None) -> UNetConfig:
        m = self.values["model"]
        return UNetConfig(in_channels=in_channels, depth=m["depth"] if depth is None else depth,
                          base_channels=m["base_channels"],
                          padding_mode=PaddingMode.parse(padding or m["padding_mode"]))

    def schedule(self, augmentation: str = "none") -> TrainSchedule:
        s = self.values["schedule"]
        return TrainSchedule(learning_rate=s["learning_rate"], epochs=s["epochs"], batch_size=s["batch_size"],
                             seed=self.stream(SEED_SHUFFLE), augmentation=augmentation,
                             crop_scale=tuple(s["crop_scale"]), augment_seed=self.stream(SEED_AUGMENT),
                             optimizer=s["optimizer"], weight_decay=s["weight_decay"],
                             lr_schedule=s["lr_schedule"])

    def with_overrides(self, seed: int | None = None, out_dir=None) -> "ExperimentConfig":
        values = {k: dict(v) for k, v in self.values.items()}
        if seed is not None:
            values["experiment"]["seed"] = int(seed)
        if out_dir is not None:
            values["experiment"]["out_dir"] = str(out_dir)
        cfg = ExperimentConfig(values, self.source)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}

    def to_ini(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for k, v in kv.items():
                if isinstance(v, tuple):
                    v = ", ".join(repr(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        text = "\n".join(f"[{s}]\n" + "\n".join(
            f"{k} = {', '.join(map(str, v)) if isinstance(v, (list, tuple)) else v}" for k, v in kv.items())
            for s, kv in d.items())
        return parse_config(text)

    # ------------------------------------------------------------------
    def problems(self) -> list[str]:
        v, out = self.values, []
        e, d, mk, m, s, p = (v[k] for k in ("experiment", "data", "markers", "model", "schedule", "probes"))
        if e["kind"] not in KINDS:
            out.append(f"experiment.kind must be one of {', '.join(KINDS)}, got {e['kind']!r}")
        if e["seed"] < 0:
            out.append("experiment.seed must be >= 0")
        if not e["out_dir"]:
            out.append("experiment.out_dir must not be empty")
        for key in ("n_train", "n_val", "n_test"):
            if not 0 <= d[key] < SPLIT_STRIDE:
                out.append(f"data.{key} must be in [0, {SPLIT_STRIDE})")
        if d["n_train"] < 1 and not d["ingest_path"] and e["kind"] != "audit":
            out.append("data.n_train must be >= 1")
        if d["size"] < 4 or d["size"] % 2:
            out.append("data.size must be even and >= 4")
        if d["channels"] not in (1, 3):
            out.append("data.channels must be 1 or 3")
        if d["placement"] not in [pl.value for pl in Placement]:
            out.append(f"data.placement must be one of centered, uniform, quarter_crop, got {d['placement']!r}")
        if d["sigma_frac"] < 0:
            out.append("data.sigma_frac must be >= 0")
        for key in ("axis_range", "contrast_range", "base_range"):
            r = d[key]
            if len(r) != 2 or r[1] < r[0]:
                out.append(f"data.{key} must be two numbers lo, hi with lo <= hi")
        if d["noise_cell"] < 1:
            out.append("data.noise_cell must be >= 1")
        if d["target_size"] < 4:
            out.append("data.target_size must be >= 4")
        if not 0 <= mk["rho"] <= 1:
            out.append("markers.rho must be in [0, 1]")
        if mk["arm"] < 1 or mk["thickness"] < 1:
            out.append("markers.arm and markers.thickness must be >= 1")
        if len(mk["color"]) != 3 or not all(0 <= c <= 1 for c in mk["color"]):
            out.append("markers.color must be three numbers in [0, 1]")
        if not 0 <= mk["tolerance"] < 0.5:
            out.append("markers.tolerance must be in [0, 0.5)")
        if mk["n_sequences"] < 0:
            out.append("markers.n_sequences must be >= 0")
        if mk["sequence_length"] < 2:
            out.append("markers.sequence_length must be >= 2")
        if m["depth"] < 1:
            out.append("model.depth must be >= 1")
        if m["base_channels"] < 1:
            out.append("model.base_channels must be >= 1")
        try:
            PaddingMode.parse(m["padding_mode"])
        except ValueError:
            out.append(f"model.padding_mode must be zeros, reflect, replicate or valid, got {m['padding_mode']!r}")
        size = d["target_size"] if d["ingest_path"] else d["size"]
        if m["depth"] >= 1 and size % (2 ** m["depth"]):
            out.append(f"image size {size} must be divisible by 2**model.depth = {2 ** m['depth']}")
        if not out:
            out += _geometry_problems(self, size)
        if s["learning_rate"] <= 0:
            out.append("schedule.learning_rate must be > 0")
        if s["epochs"] < 0:
            out.append("schedule.epochs must be >= 0")
        if s["batch_size"] < 1:
            out.append("schedule.batch_size must be >= 1")
        if s["optimizer"] not in ("adam", "adamw"):
            out.append("schedule.optimizer must be adam or adamw")
        if s["weight_decay"] < 0:
            out.append("schedule.weight_decay must be >= 0")
        if s["lr_schedule"] not in ("constant", "cosine"):
            out.append("schedule.lr_schedule must be constant or cosine")
        if s["augmentation"] not in ("none", "random_crop", "quarter_crop"):
            out.append("schedule.augmentation must be none, random_crop or quarter_crop")
        cs = s["crop_scale"]
        if len(cs) != 2 or not 0 < cs[0] <= cs[1] <= 1:
            out.append("schedule.crop_scale must be two numbers with 0 < min <= max <= 1")
        if p["n_bands"] < 1:
            out.append("probes.n_bands must be >= 1")
        if p["sweep_steps"] < 2:
            out.append("probes.sweep_steps must be >= 2")
        if p["centroid_bins"] < 1:
            out.append("probes.centroid_bins must be >= 1")
        if p["saliency_images"] < 0:
            out.append("probes.saliency_images must be >= 0")
        if p["saliency_method"] not in ("gradient", "gradcam"):
            out.append("probes.saliency_method must be gradient or gradcam")
        if p["valid_depth"] < 1:
            out.append("probes.valid_depth must be >= 1")
        if e["kind"] == "audit":
            if not d["ingest_path"]:
                out.append("audit experiments need data.ingest_path")
        if e["kind"] == "marker_shortcut" and d["ingest_path"]:
            out.append("marker_shortcut experiments need generated data (data.ingest_path must be empty)")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


def _geometry_problems(cfg: ExperimentConfig, size: int) -> list[str]:
    from .segnet import output_geometry

    checks = [("model", cfg.unet_config(1))]
    if cfg["probes"]["valid_control"] and cfg.kind == "padding_shortcut":
        checks.append(("valid control", cfg.unet_config(1, depth=cfg["probes"]["valid_depth"], padding="valid")))
    out = []
    for label, ucfg in checks:
        try:
            output_geometry(ucfg, size, size)
        except ValueError as exc:
            out.append(f"{label}: {exc}")
    return out


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    """Parse INI text; every problem (syntax, unknown key, bad value) is reported at once."""
    cp = configparser.ConfigParser(interpolation=None)
    where = source or "<config>"
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    problems = []
    kind = cp.get("experiment", "kind", fallback="padding_shortcut").strip()
    values = _defaults(kind)
    for section in cp.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                problems.append(f"{section}.{key}: cannot parse {raw!r} ({exc})")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(values, source).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    return parse_config(text, str(path))


def default_config(kind: str = "padding_shortcut", **overrides) -> ExperimentConfig:
    """Defaults for ``kind``; ``overrides`` are ``section__key=value`` pairs."""
    values = _defaults(kind)
    for name, v in overrides.items():
        section, key = name.split("__", 1)
        if section not in values or key not in values[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        values[section][key] = tuple(v) if isinstance(v, list) else v
    return ExperimentConfig(values).validate()


def _defaults(kind: str) -> dict[str, dict[str, object]]:
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    values["experiment"]["kind"] = kind
    if kind == "marker_shortcut":
        values["data"].update(MARKER_DATA_DEFAULTS)
    return values


# RGB scenes with faint lesions, so the burned-in calipers are a useful cue
MARKER_DATA_DEFAULTS = {"channels": 3, "placement": "uniform", "contrast_range": (0.03, 0.08),
                        "noise_amplitude": 0.1, "noise_cell": 4}
