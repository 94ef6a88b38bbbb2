"""Experiment configuration: a flat, sectioned key-value format.

Example::

    [module.language]
    tensor_model_parallel_size = 2
    context_parallel_size = 1
    pipeline_model_parallel_size = 2
    data_parallel_size = 1
    rank_offset = 0

    [module.images]
    tensor_model_parallel_size = 1
    data_parallel_size = 4
    rank_offset = 4

    [model]
    d_h = 8
    tanh = 1            # 0 selects the identity activation

    [run]
    steps = 1
    num_microbatches = 2
    global_batch = 8
    trainable.images.encoder = 0

Values are integers or decimals. The module named ``language`` is the LLM;
every other module is an encoder feeding it, in declaration order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

from hetpar.bridge import plan_bridge
from hetpar.grid import BoundaryEdge, GridError, ModuleLayout, Placement, placement_of_edge
from hetpar.oracle import DEFAULT_TOLERANCE
from hetpar.tinymodel.model import ModelError, TinyModelSpec, check_layouts

LLM_NAME = "language"

LAYOUT_KEYS = {
    "tensor_model_parallel_size": "tp",
    "context_parallel_size": "cp",
    "pipeline_model_parallel_size": "pp",
    "data_parallel_size": "dp",
    "rank_offset": "rank_offset",
}
MODEL_KEYS = ("d_in", "d_enc", "d_h", "tokens_per_sample", "vision_tokens_per_sample", "llm_layers", "learning_rate")
RUN_KEYS = ("steps", "num_microbatches", "global_batch", "seed", "tolerance")

_NUMBER = re.compile(r"^[-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?$")
_INT = re.compile(r"^[-+]?\d+$")
_SECTION = re.compile(r"^\[([A-Za-z0-9_.\-]+)\]$")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class ConfigError(ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ConfigError):
    pass


@dataclass(frozen=True)
class RunConfig:
    steps: int = 1
    num_microbatches: int = 1
    global_batch: int = 8
    seed: int = 0
    tolerance: float = DEFAULT_TOLERANCE
    trainable: dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    layouts: dict[str, ModuleLayout]
    model: TinyModelSpec
    run: RunConfig

    @property
    def encoders(self) -> tuple[str, ...]:
        return self.model.encoders

    @property
    def world_size(self) -> int:
        return max(lay.rank_offset + lay.world_size for lay in self.layouts.values())

    def placements(self) -> dict[str, Placement]:
        llm = self.layouts[LLM_NAME]
        return {
            f"{e}->{LLM_NAME}": placement_of_edge(BoundaryEdge(self.layouts[e], llm, 1, 1)) for e in self.encoders
        }


def _number(text: str, lineno: int, integer: bool) -> int | float:
    if not _NUMBER.match(text):
        raise ParseError(lineno, f"expected a number, got {text!r}")
    if integer:
        if not _INT.match(text):
            raise ParseError(lineno, f"expected an integer, got {text!r}")
        return int(text)
    return float(text)


def parse_config(text: str) -> ExperimentConfig:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    order: list[str] = []
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if current in sections:
                raise ParseError(lineno, f"duplicate section [{current}]")
            if current not in ("model", "run") and not current.startswith("module."):
                raise ParseError(lineno, f"unknown section [{current}]")
            sections[current] = {}
            order.append(current)
            continue
        if "=" not in line:
            raise ParseError(lineno, f"expected 'key = value' or '[section]', got {line!r}")
        if current is None:
            raise ParseError(lineno, "key outside of any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY.match(key):
            raise ParseError(lineno, f"invalid key {key!r}")
        if key in sections[current]:
            raise ParseError(lineno, f"duplicate key {key!r} in [{current}]")
        if not _NUMBER.match(value):
            raise ParseError(lineno, f"expected a number for {key!r}, got {value!r}")
        sections[current][key] = (value, lineno)

    layouts: dict[str, ModuleLayout] = {}
    for sec in order:
        if not sec.startswith("module."):
            continue
        name = sec[len("module.") :]
        if not name:
            raise ValidationError("module section needs a name")
        kwargs = {}
        for key, (value, lineno) in sections[sec].items():
            if key not in LAYOUT_KEYS:
                raise ParseError(lineno, f"unknown layout key {key!r} in [{sec}]")
            kwargs[LAYOUT_KEYS[key]] = _number(value, lineno, integer=True)
        try:
            layouts[name] = ModuleLayout(name, **kwargs)
        except GridError as exc:
            raise ValidationError(f"module {name}: {type(exc).__name__}: {exc}") from None

    model_kwargs: dict = {}
    for key, (value, lineno) in sections.get("model", {}).items():
        if key == "tanh":
            flag = _number(value, lineno, integer=True)
            if flag not in (0, 1):
                raise ParseError(lineno, "tanh must be 0 or 1")
            model_kwargs["activation"] = "tanh" if flag else "identity"
        elif key in MODEL_KEYS:
            model_kwargs[key] = _number(value, lineno, integer=key != "learning_rate")
        else:
            raise ParseError(lineno, f"unknown model key {key!r}")

    run_kwargs: dict = {}
    trainable: dict[str, bool] = {}
    for key, (value, lineno) in sections.get("run", {}).items():
        if key.startswith("trainable."):
            flag = _number(value, lineno, integer=True)
            if flag not in (0, 1):
                raise ParseError(lineno, f"{key} must be 0 or 1")
            trainable[key[len("trainable.") :]] = bool(flag)
        elif key in RUN_KEYS:
            run_kwargs[key] = _number(value, lineno, integer=key != "tolerance")
        else:
            raise ParseError(lineno, f"unknown run key {key!r}")

    if LLM_NAME not in layouts:
        raise ValidationError(f"exactly one [module.{LLM_NAME}] section is required")
    encoders = tuple(n for n in layouts if n != LLM_NAME)
    if not encoders:
        raise ValidationError("at least one encoder module is required")
    try:
        model = TinyModelSpec(encoders=encoders, llm=LLM_NAME, **model_kwargs)
    except ModelError as exc:
        raise ValidationError(f"model: {exc}") from None
    cfg = ExperimentConfig(layouts, model, RunConfig(trainable=trainable, **run_kwargs))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Raise ValidationError naming the first violated invariant."""
    run = cfg.run
    for key in ("steps", "num_microbatches", "global_batch"):
        if getattr(run, key) < 1:
            raise ValidationError(f"run.{key} must be >= 1")
    if run.tolerance < 0:
        raise ValidationError("run.tolerance must be non-negative")
    for prefix in run.trainable:
        if prefix.split(".")[0] not in cfg.layouts:
            raise ValidationError(f"trainable flag for unknown module {prefix!r}")
    if run.global_batch % run.num_microbatches:
        raise ValidationError(
            f"IndivisibleBatch: global_batch={run.global_batch} not divisible by "
            f"num_microbatches={run.num_microbatches}"
        )
    mb = run.global_batch // run.num_microbatches
    try:
        check_layouts(cfg.model, cfg.layouts)
        llm = cfg.layouts[LLM_NAME]
        for e in cfg.encoders:
            plan_bridge(BoundaryEdge(cfg.layouts[e], llm, mb, cfg.model.vision_width))
    except (GridError, ModelError) as exc:
        raise ValidationError(f"{type(exc).__name__}: {exc}") from None
    kinds = set(cfg.placements().values())
    if len(kinds) > 1:
        raise ValidationError("all encoder edges must share one placement (all colocated or all non-colocated)")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    return repr(value) if isinstance(value, float) else str(value)


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in (LLM_NAME, *cfg.encoders):
        lay = cfg.layouts[name]
        lines.append(f"[module.{name}]")
        for key, attr in LAYOUT_KEYS.items():
            lines.append(f"{key} = {getattr(lay, attr)}")
        lines.append("")
    lines.append("[model]")
    for key in MODEL_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.model, key))}")
    lines.append(f"tanh = {int(cfg.model.activation == 'tanh')}")
    lines.append("")
    lines.append("[run]")
    for f in fields(RunConfig):
        if f.name != "trainable":
            lines.append(f"{f.name} = {_fmt(getattr(cfg.run, f.name))}")
    for prefix, flag in sorted(cfg.run.trainable.items()):
        lines.append(f"trainable.{prefix} = {int(flag)}")
    return "\n".join(lines) + "\n"
