"""Tiny exact multimodal model: encoders -> projectors -> token insertion -> MLP "LLM".

Every encoder maps one ``d_in`` vector per sample to ``S_v`` projected tokens of
width ``d_h``::

    tokens = act(x @ W_enc) @ W_proj          # (S_v * d_h,) reshaped to (S_v, d_h)

Encoder ``e`` (in declared order) fills token positions ``[e*S_v, (e+1)*S_v)``
and text tokens fill the rest of the ``S`` positions. The LLM is a stack of
token-wise layers ``y = act(x @ fc1) @ fc2`` with no cross-token operator, so
sharding the token axis (CP) is exact. Loss is the mean squared error over
all samples, tokens and features of the step.

Under tensor parallelism ``W_enc``/``fc1`` are column-parallel (output
features split) and ``W_proj``/``fc2`` row-parallel (input features split), so
each layer pair needs one all-reduce of its output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from hetpar.grid import ModuleLayout


class ModelError(ValueError):
    pass


class DivisibilityViolation(ModelError):
    pass


@dataclass(frozen=True)
class TinyModelSpec:
    d_in: int = 4
    d_enc: int = 8
    d_h: int = 8
    tokens_per_sample: int = 8
    vision_tokens_per_sample: int = 2
    llm_layers: int = 4
    activation: str = "tanh"
    learning_rate: float = 0.05
    encoders: tuple[str, ...] = ("images",)
    llm: str = "language"

    def __post_init__(self) -> None:
        if self.activation not in ("tanh", "identity"):
            raise ModelError(f"unknown activation {self.activation!r}")
        for name in ("d_in", "d_enc", "d_h", "tokens_per_sample", "vision_tokens_per_sample", "llm_layers"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ModelError("learning_rate must be non-negative")
        if not self.encoders:
            raise ModelError("at least one encoder is required")
        if self.text_tokens < 0:
            raise ModelError(
                f"{len(self.encoders)} encoders x {self.vision_tokens_per_sample} vision tokens "
                f"exceed tokens_per_sample={self.tokens_per_sample}"
            )

    @property
    def vision_width(self) -> int:
        """Elements per sample crossing an encoder -> LLM boundary."""
        return self.vision_tokens_per_sample * self.d_h

    @property
    def text_tokens(self) -> int:
        return self.tokens_per_sample - len(self.encoders) * self.vision_tokens_per_sample

    def vision_positions(self, encoder: str) -> range:
        e = self.encoders.index(encoder)
        sv = self.vision_tokens_per_sample
        return range(e * sv, (e + 1) * sv)


@dataclass(frozen=True)
class ParamInfo:
    name: str
    module: str
    shape: tuple[int, int]
    tp_axis: int  # 1: column-parallel, 0: row-parallel
    layer: int  # position in the module's layer list, used for stage assignment


def param_infos(spec: TinyModelSpec) -> list[ParamInfo]:
    """All parameters in canonical order (the order of the init stream)."""
    infos = []
    for enc in spec.encoders:
        infos.append(ParamInfo(f"{enc}.encoder", enc, (spec.d_in, spec.d_enc), 1, 0))
        infos.append(ParamInfo(f"{enc}.projector", enc, (spec.d_enc, spec.vision_width), 0, 1))
    for layer in range(spec.llm_layers):
        infos.append(ParamInfo(f"{spec.llm}.layer{layer}.fc1", spec.llm, (spec.d_h, spec.d_h), 1, layer))
        infos.append(ParamInfo(f"{spec.llm}.layer{layer}.fc2", spec.llm, (spec.d_h, spec.d_h), 0, layer))
    return infos


def llm_stage_layers(spec: TinyModelSpec, pp: int) -> list[range]:
    """Contiguous layer ranges per LLM stage; earlier stages take the remainder."""
    if pp > spec.llm_layers:
        raise DivisibilityViolation(f"LLM pp={pp} exceeds llm_layers={spec.llm_layers}")
    base, extra = divmod(spec.llm_layers, pp)
    out, start = [], 0
    for s in range(pp):
        n = base + (1 if s < extra else 0)
        out.append(range(start, start + n))
        start += n
    return out


def stage_of(spec: TinyModelSpec, info: ParamInfo, pp: int) -> int:
    if info.module == spec.llm:
        for s, layers in enumerate(llm_stage_layers(spec, pp)):
            if info.layer in layers:
                return s
        raise AssertionError(info)
    if pp > 2:
        raise DivisibilityViolation(f"encoder {info.module} has two layers and cannot use pp={pp}")
    return info.layer if pp == 2 else 0


def check_layouts(spec: TinyModelSpec, layouts: Mapping[str, ModuleLayout]) -> None:
    """Raise DivisibilityViolation if any layout cannot shard the model exactly."""
    for name in (*spec.encoders, spec.llm):
        if name not in layouts:
            raise DivisibilityViolation(f"no layout for module {name!r}")
    for enc in spec.encoders:
        lay = layouts[enc]
        if lay.cp != 1:
            raise DivisibilityViolation(f"encoder {enc} must use cp=1, got {lay.cp}")
        if spec.d_enc % lay.tp:
            raise DivisibilityViolation(f"d_enc={spec.d_enc} not divisible by {enc} tp={lay.tp}")
        if lay.pp > 2:
            raise DivisibilityViolation(f"encoder {enc} has two layers and cannot use pp={lay.pp}")
    llm = layouts[spec.llm]
    if spec.d_h % llm.tp:
        raise DivisibilityViolation(f"d_h={spec.d_h} not divisible by {spec.llm} tp={llm.tp}")
    if spec.tokens_per_sample % llm.cp:
        raise DivisibilityViolation(
            f"tokens_per_sample={spec.tokens_per_sample} not divisible by {spec.llm} cp={llm.cp}"
        )
    llm_stage_layers(spec, llm.pp)


def init_params(spec: TinyModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Full parameters from one canonical stream, independent of any layout."""
    rng = np.random.default_rng(seed)
    params = {}
    for info in param_infos(spec):
        fan_in = info.shape[0]
        params[info.name] = rng.standard_normal(info.shape) / np.sqrt(fan_in)
    return params


def tp_slice(info: ParamInfo, tp: int, tp_idx: int) -> tuple[slice, slice]:
    size = info.shape[info.tp_axis]
    if size % tp:
        raise DivisibilityViolation(f"{info.name}: axis of size {size} not divisible by tp={tp}")
    chunk = size // tp
    part = slice(tp_idx * chunk, (tp_idx + 1) * chunk)
    return (slice(None), part) if info.tp_axis == 1 else (part, slice(None))


@dataclass
class ParamShard:
    name: str
    tp: int
    tp_idx: int
    rows: slice
    cols: slice
    values: np.ndarray


def shard_param(info: ParamInfo, full: np.ndarray, tp: int, tp_idx: int) -> ParamShard:
    rows, cols = tp_slice(info, tp, tp_idx)
    return ParamShard(info.name, tp, tp_idx, rows, cols, full[rows, cols].copy())


def assemble_param(info: ParamInfo, shards: list[ParamShard]) -> np.ndarray:
    ordered = sorted(shards, key=lambda s: s.tp_idx)
    if [s.tp_idx for s in ordered] != list(range(len(ordered))):
        raise ModelError(f"{info.name}: incomplete TP shard set {[s.tp_idx for s in ordered]}")
    return np.concatenate([s.values for s in ordered], axis=info.tp_axis)


@dataclass
class TrainBatch:
    encoder_inputs: dict[str, np.ndarray]  # name -> (B, d_in)
    text: np.ndarray  # (B, text_tokens, d_h)
    target: np.ndarray  # (B, S, d_h)

    @property
    def size(self) -> int:
        return self.target.shape[0]


def make_batch(spec: TinyModelSpec, batch: int, seed: int) -> TrainBatch:
    rng = np.random.default_rng([seed, 1])
    enc = {e: rng.standard_normal((batch, spec.d_in)) for e in spec.encoders}
    text = rng.standard_normal((batch, spec.text_tokens, spec.d_h))
    target = 0.5 * rng.standard_normal((batch, spec.tokens_per_sample, spec.d_h))
    return TrainBatch(enc, text, target)


def is_trainable(name: str, trainable: Mapping[str, bool]) -> bool:
    """Most specific dotted prefix of ``name`` found in ``trainable`` wins; default True."""
    parts = name.split(".")
    for n in range(len(parts), 0, -1):
        key = ".".join(parts[:n])
        if key in trainable:
            return bool(trainable[key])
    return True


# -- shard-wise kernels ------------------------------------------------------


def activate(u: np.ndarray, act: str) -> np.ndarray:
    return np.tanh(u) if act == "tanh" else u


def activate_grad(z: np.ndarray, act: str) -> np.ndarray:
    """Derivative of the activation expressed through its output."""
    return 1.0 - z * z if act == "tanh" else np.ones_like(z)


def column_forward(x: np.ndarray, w: np.ndarray, act: str) -> tuple[np.ndarray, np.ndarray]:
    u = x @ w
    return u, activate(u, act)


def column_backward(
    x: np.ndarray, z: np.ndarray, dz: np.ndarray, w: np.ndarray, act: str, need_dx: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Weight gradient and this shard's partial input gradient (sum over TP for the full one)."""
    du = dz * activate_grad(z, act)
    return x.T @ du, (du @ w.T if need_dx else None)


def row_forward(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """This shard's partial output; the layer output is the TP sum of partials."""
    return z @ w


def row_backward(z: np.ndarray, dy: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return z.T @ dy, dy @ w.T


def _tp_sum(parts: list[np.ndarray]) -> np.ndarray:
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total


def encoder_forward(
    spec: TinyModelSpec, w_enc: list[np.ndarray], w_proj: list[np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Projected vision tokens ``(n, S_v * d_h)`` from per-TP-rank weight shards.

    The row-parallel partials are summed in ascending TP order, as the all-reduce
    does. Returns the output and per-rank saved ``(u, z)`` activations.
    """
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ModelError(f"encoder input shape {x.shape} != (n, {spec.d_in})")
    saved, parts = [], []
    for w1, w2 in zip(w_enc, w_proj):
        u, z = column_forward(x, w1, spec.activation)
        saved.append((u, z))
        parts.append(row_forward(z, w2))
    return _tp_sum(parts), saved


def llm_stage_forward(
    spec: TinyModelSpec, layers: list[tuple[list[np.ndarray], list[np.ndarray]]], x: np.ndarray
) -> np.ndarray:
    """Apply LLM layers, each given as (fc1 shards, fc2 shards), to tokens ``(..., d_h)``."""
    if x.shape[-1] != spec.d_h:
        raise ModelError(f"token width {x.shape[-1]} != d_h={spec.d_h}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.d_h)
    for fc1, fc2 in layers:
        parts = []
        for w1, w2 in zip(fc1, fc2):
            _, z = column_forward(h, w1, spec.activation)
            parts.append(row_forward(z, w2))
        h = _tp_sum(parts)
    return h.reshape(*lead, spec.d_h)


def loss_and_grad(out: np.ndarray, target: np.ndarray, scale: float) -> tuple[float, np.ndarray]:
    """``scale * sum((out - target)**2)`` and its gradient w.r.t. ``out``."""
    if out.shape != target.shape:
        raise ModelError(f"output shape {out.shape} != target shape {target.shape}")
    err = out - target
    return float(scale * np.sum(err * err)), (2.0 * scale) * err


def token_slice(spec: TinyModelSpec, cp: int, cp_idx: int) -> range:
    n = spec.tokens_per_sample // cp
    return range(cp_idx * n, (cp_idx + 1) * n)


def assemble_tokens(
    spec: TinyModelSpec, vision: Mapping[str, np.ndarray], text: np.ndarray, cp: int = 1, cp_idx: int = 0
) -> np.ndarray:
    """Insert vision tokens among text tokens and keep this CP rank's token positions.

    ``vision[e]`` is ``(n, S_v * d_h)`` and ``text`` is ``(n, text_tokens, d_h)``.
    """
    n = text.shape[0]
    parts = [vision[e].reshape(n, spec.vision_tokens_per_sample, spec.d_h) for e in spec.encoders]
    full = np.concatenate(parts + [text], axis=1)
    span = token_slice(spec, cp, cp_idx)
    return full[:, span.start : span.stop]


def split_vision_grad(spec: TinyModelSpec, dx: np.ndarray, cp: int = 1, cp_idx: int = 0) -> dict[str, np.ndarray]:
    """Gradient of each encoder's vision tokens from this CP rank's input gradient.

    Positions outside the rank's token slice get zeros, so summing over CP
    ranks yields the full gradient.
    """
    n = dx.shape[0]
    span = token_slice(spec, cp, cp_idx)
    out = {}
    for e in spec.encoders:
        g = np.zeros((n, spec.vision_tokens_per_sample, spec.d_h))
        for k, pos in enumerate(spec.vision_positions(e)):
            if pos in span:
                g[:, k] = dx[:, pos - span.start]
        out[e] = g.reshape(n, spec.vision_width)
    return out


# -- checkpoint text ---------------------------------------------------------


def dump_params(params: Mapping[str, np.ndarray]) -> str:
    """Full parameters as diffable text: a ``param NAME ROWS COLS`` header, then one line per row.

    Values use the shortest round-trip repr, so a dump reloads bit-exactly.
    """
    lines = []
    for name in sorted(params):
        w = np.asarray(params[name], dtype=float)
        lines.append(f"param {name} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in w)
    return "\n".join(lines) + "\n"


def load_params(text: str) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    lines = iter(text.splitlines())
    for header in lines:
        kind, name, rows, cols = header.split()
        if kind != "param":
            raise ModelError(f"expected a param header, got {header!r}")
        values = [[float(v) for v in next(lines).split()] for _ in range(int(rows))]
        w = np.array(values, dtype=float).reshape(int(rows), int(cols))
        params[name] = w
    return params
