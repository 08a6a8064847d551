"""Declarative pipeline configuration: JSON file, schema-validated, flag-overridable."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .dataset import BuildConfig
from .errors import ConfigError
from .slicing import PLANES
from .tools import DEFAULT_GM_PATTERN, DEFAULT_WM_PATTERN
from .trainer import TrainConfig
from .volume import ToolConfig

_TOOL_SCHEMA = {
    "type": "object",
    "properties": {
        "executable": {"type": "string"},
        "extra_args": {"type": "array", "items": {"type": "string"}},
        "timeout_s": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "paths": {
            "type": "object",
            "properties": {
                "raw_dir": {"type": "string"},
                "work_dir": {"type": "string"},
                "out_dir": {"type": "string"},
            },
            "required": ["raw_dir", "work_dir", "out_dir"],
            "additionalProperties": False,
        },
        "tools": {
            "type": "object",
            "properties": {
                "bet": _TOOL_SCHEMA,
                "fast": _TOOL_SCHEMA,
                "gm_pattern": {"type": "string"},
                "wm_pattern": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "build": {
            "type": "object",
            "properties": {
                "target_resolution": {"type": "integer", "minimum": 16},
                "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "min_tissue_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "planes": {
                    "type": "array",
                    "items": {"enum": list(PLANES)},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "fractions": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0},
                    "minItems": 3,
                    "maxItems": 3,
                },
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "class_weights": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0},
                    "minItems": 3,
                    "maxItems": 3,
                },
                "weight_decay": {"type": "number", "minimum": 0},
                "early_stop_patience": {"type": "integer", "minimum": 1},
                "prompt_mode": {"enum": ["full_box", "tissue_box"]},
                "pretrained_checkpoint": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "sample_n": {"type": "integer", "minimum": 1},
                "aggregation": {"enum": ["macro_foreground", "macro_all", "micro"]},
                "exclude_empty": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "tiny_cap": {"type": "integer", "minimum": 1},
    },
    "required": ["paths"],
    "additionalProperties": False,
}


@dataclass
class PipelineConfig:
    raw_dir: Path
    work_dir: Path
    out_dir: Path
    seed: int = 0
    bet: ToolConfig = field(default_factory=lambda: ToolConfig("bet"))
    fast: ToolConfig = field(default_factory=lambda: ToolConfig("fast", extra_args=["-t", "1", "-n", "3"]))
    gm_pattern: str = DEFAULT_GM_PATTERN
    wm_pattern: str = DEFAULT_WM_PATTERN
    build: BuildConfig = field(default_factory=BuildConfig)
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrained_checkpoint: Path | None = None
    eval_sample_n: int = 1000
    eval_aggregation: str = "macro_foreground"
    eval_exclude_empty: bool = False
    tiny_cap: int = 64

    @property
    def dataset_root(self) -> Path:
        return self.work_dir / "dataset"


def load_pipeline_config(path, seed_override: int | None = None) -> PipelineConfig:
    """Read and validate a config file; `seed_override` wins over the file value."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no config file at {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config failed schema validation: {e.message}")

    paths = raw["paths"]
    base = path.parent
    tools = raw.get("tools", {})
    build = raw.get("build", {})
    train = dict(raw.get("train", {}))
    pretrained = train.pop("pretrained_checkpoint", None)
    ev = raw.get("eval", {})

    def tool_cfg(name: str, default_exe: str, default_args: list[str]) -> ToolConfig:
        t = tools.get(name, {})
        return ToolConfig(
            executable_path=t.get("executable", default_exe),
            extra_args=list(t.get("extra_args", default_args)),
            timeout_s=float(t.get("timeout_s", 3600.0)),
        )

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    fractions = tuple(build.get("fractions", (0.70, 0.15, 0.15)))
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    try:
        cfg = PipelineConfig(
            raw_dir=(base / paths["raw_dir"]).resolve(),
            work_dir=(base / paths["work_dir"]).resolve(),
            out_dir=(base / paths["out_dir"]).resolve(),
            seed=seed,
            bet=tool_cfg("bet", "bet", []),
            fast=tool_cfg("fast", "fast", ["-t", "1", "-n", "3"]),
            gm_pattern=tools.get("gm_pattern", DEFAULT_GM_PATTERN),
            wm_pattern=tools.get("wm_pattern", DEFAULT_WM_PATTERN),
            build=BuildConfig(
                target_resolution=build.get("target_resolution", 256),
                threshold=build.get("threshold", 0.5),
                min_tissue_fraction=build.get("min_tissue_fraction", 0.01),
                planes=tuple(build.get("planes", PLANES)),
            ),
            fractions=fractions,
            train=TrainConfig(seed=seed, **train),
            pretrained_checkpoint=(base / pretrained).resolve() if pretrained else None,
            eval_sample_n=ev.get("sample_n", 1000),
            eval_aggregation=ev.get("aggregation", "macro_foreground"),
            eval_exclude_empty=ev.get("exclude_empty", False),
            tiny_cap=raw.get("tiny_cap", 64),
        )
    except ValueError as e:
        raise ConfigError(str(e))
    return cfg
