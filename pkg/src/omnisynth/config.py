"""Run configuration: every pipeline knob in one JSON-serializable document.

Defaults correspond to the full-scale setup (1024x512 panoramas, 100 grid
candidates, 200k iterations, 4 selected completions with hop probability
0.25 updated every 500 iterations); desk-scale runs override via JSON or
CLI flags.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .completion import CompletionTrainConfig
from .radiance import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config"]


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    out_dir: str = "runs/out"
    seed: int = 0

    # input: either a scene JSON (input synthesized at the origin) or a
    # panorama prefix pointing at <prefix>.rgb.png/.depth.png/.mask.png
    scene: str | None = None
    input_prefix: str | None = None
    depth_scale: float = 1000.0
    width: int = 1024
    height: int = 512

    # reprojection grid and selection
    grid_count_per_axis: int = 50
    num_selected: int = 4
    epsilon: float = 0.25
    update_period: int = 500
    median_window: int = 3
    no_selection: bool = False

    # completion
    completer: str = "neural"  # neural | baseline | oracle
    completion: CompletionTrainConfig = field(default_factory=CompletionTrainConfig)
    train_discriminator: bool = True
    completion_corpus: int = 0  # extra synthetic rooms in the training set

    # radiance field
    train: TrainConfig = field(default_factory=TrainConfig)
    field_hidden: int = 256
    field_depth: int = 8
    l_pos: int = 10
    l_dir: int = 4
    near: float = 0.02
    far_scale: float = 1.2

    # evaluation
    extractor: str = "baseline"
    nllf_views: int = 512
    nllf_crop: int = 64
    nllf_fit_crops: int = 128
    eval_render_scale: float = 1.0  # eval-view render resolution relative to input

    def validate(self) -> None:
        if self.scene is None and self.input_prefix is None:
            raise ConfigError("config needs either a scene or an input panorama prefix")
        if self.scene is not None and not Path(self.scene).exists():
            raise ConfigError(f"scene file not found: {self.scene}")
        if self.input_prefix is not None:
            rgb = Path(self.input_prefix).with_suffix(".rgb.png")
            if not rgb.exists():
                raise ConfigError(f"input panorama not found: {rgb}")
        if self.width != 2 * self.height:
            raise ConfigError(f"width {self.width} must be 2 * height {self.height}")
        if self.completer not in ("neural", "baseline", "oracle"):
            raise ConfigError(f"unknown completer {self.completer!r}")
        if self.completer == "oracle" and self.scene is None:
            raise ConfigError("oracle completion requires a scene")
        if self.extractor != "baseline":
            raise ConfigError(f"unknown extractor {self.extractor!r}")
        if self.num_selected > 2 * self.grid_count_per_axis:
            raise ConfigError("num_selected exceeds the grid size")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigError("epsilon must lie in [0, 0.5]")
        if self.update_period < 1 or self.grid_count_per_axis < 2:
            raise ConfigError("update_period and grid count must be positive")


def _to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    return doc


def _merge_dataclass(cls, defaults, doc: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            kwargs[f.name] = doc[f.name]
        else:
            kwargs[f.name] = getattr(defaults, f.name)
    return cls(**kwargs)


def load_config(path_or_doc) -> RunConfig:
    """Build a RunConfig from a JSON file path or a parsed dict."""
    if isinstance(path_or_doc, (str, Path)):
        try:
            doc = json.loads(Path(path_or_doc).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path_or_doc}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    else:
        doc = dict(path_or_doc)
    base = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        train = _merge_dataclass(TrainConfig, base.train, doc.pop("train", {}))
        completion = _merge_dataclass(CompletionTrainConfig, base.completion, doc.pop("completion", {}))
        cfg = _merge_dataclass(RunConfig, base, doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config value: {e}") from e
    cfg.train = train
    cfg.completion = completion
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(_to_dict(cfg), indent=2, sort_keys=True))
