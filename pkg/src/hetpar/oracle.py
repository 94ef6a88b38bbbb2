"""Single-rank dense reference training and parity comparison.

The dense path deliberately shares no kernels with the sharded engine: it is
written directly against full matrices so that a routing or sharding bug in
the distributed path cannot be mirrored here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from hetpar.grid import BatchInterval, IndivisibleBatch
from hetpar.tinymodel.model import TinyModelSpec, TrainBatch, init_params, is_trainable

DEFAULT_TOLERANCE = 1e-10


class StructureMismatch(ValueError):
    pass


@dataclass
class OracleState:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    loss: float


class _State(Protocol):
    params: Mapping[str, np.ndarray]
    grads: Mapping[str, np.ndarray]
    loss: float


def _act(u: np.ndarray, name: str) -> np.ndarray:
    return np.tanh(u) if name == "tanh" else u


def _act_grad(u: np.ndarray, name: str) -> np.ndarray:
    return 1.0 / np.cosh(u) ** 2 if name == "tanh" else np.ones_like(u)


def dense_loss_and_grads(
    spec: TinyModelSpec, params: Mapping[str, np.ndarray], batch: TrainBatch, rows: slice, scale: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of ``batch[rows]`` times ``scale`` and the gradient of every parameter."""
    act = spec.activation
    n = batch.target[rows].shape[0]
    sv = spec.vision_tokens_per_sample
    cache = {}
    tokens = []
    for e in spec.encoders:
        x = batch.encoder_inputs[e][rows]
        u = x @ params[f"{e}.encoder"]
        z = _act(u, act)
        cache[e] = (x, u, z)
        tokens.append((z @ params[f"{e}.projector"]).reshape(n, sv, spec.d_h))
    h = np.concatenate(tokens + [batch.text[rows]], axis=1).reshape(n * spec.tokens_per_sample, spec.d_h)
    layers = []
    for layer in range(spec.llm_layers):
        u = h @ params[f"{spec.llm}.layer{layer}.fc1"]
        z = _act(u, act)
        layers.append((h, u, z))
        h = z @ params[f"{spec.llm}.layer{layer}.fc2"]
    err = h - batch.target[rows].reshape(h.shape)
    loss = scale * float(np.sum(err**2))

    grads: dict[str, np.ndarray] = {}
    d = 2.0 * scale * err
    for layer in reversed(range(spec.llm_layers)):
        hin, u, z = layers[layer]
        w1, w2 = params[f"{spec.llm}.layer{layer}.fc1"], params[f"{spec.llm}.layer{layer}.fc2"]
        grads[f"{spec.llm}.layer{layer}.fc2"] = z.T @ d
        du = (d @ w2.T) * _act_grad(u, act)
        grads[f"{spec.llm}.layer{layer}.fc1"] = hin.T @ du
        d = du @ w1.T
    d = d.reshape(n, spec.tokens_per_sample, spec.d_h)
    for k, e in enumerate(spec.encoders):
        x, u, z = cache[e]
        dv = d[:, k * sv : (k + 1) * sv].reshape(n, sv * spec.d_h)
        grads[f"{e}.projector"] = z.T @ dv
        du = (dv @ params[f"{e}.projector"].T) * _act_grad(u, act)
        grads[f"{e}.encoder"] = x.T @ du
    return loss, grads


def dense_loss(spec: TinyModelSpec, params: Mapping[str, np.ndarray], batch: TrainBatch) -> float:
    scale = 1.0 / (batch.size * spec.tokens_per_sample * spec.d_h)
    return dense_loss_and_grads(spec, params, batch, slice(None), scale)[0]


def oracle_step(
    spec: TinyModelSpec,
    params: Mapping[str, np.ndarray] | int,
    batch: TrainBatch,
    nmb: int = 1,
    trainable: Mapping[str, bool] | None = None,
) -> OracleState:
    """One dense SGD step with ``nmb``-way gradient accumulation.

    ``params`` may be a seed, in which case the canonical initialization is
    used. Returns post-step parameters with the gradients and loss of the step.
    """
    if isinstance(params, (int, np.integer)):
        params = init_params(spec, int(params))
    trainable = trainable or {}
    b = batch.size // nmb
    scale = 1.0 / (batch.size * spec.tokens_per_sample * spec.d_h)
    loss = 0.0
    total: dict[str, np.ndarray] = {}
    for m in range(nmb):
        part, grads = dense_loss_and_grads(spec, params, batch, slice(m * b, (m + 1) * b), scale)
        loss += part
        for name, g in grads.items():
            total[name] = total[name] + g if name in total else g
    new = {}
    kept = {}
    for name, w in params.items():
        if is_trainable(name, trainable):
            kept[name] = total[name]
            new[name] = w - spec.learning_rate * total[name]
        else:
            new[name] = w.copy()
    return OracleState(new, kept, loss)


def oracle_run(
    spec: TinyModelSpec,
    seed: int,
    batch: TrainBatch,
    nmb: int = 1,
    steps: int = 1,
    trainable: Mapping[str, bool] | None = None,
) -> list[OracleState]:
    states = []
    params: Mapping[str, np.ndarray] = init_params(spec, seed)
    for _ in range(steps):
        state = oracle_step(spec, params, batch, nmb, trainable)
        states.append(state)
        params = state.params
    return states


# -- parity ----------------------------------------------------------------------


def relative_deviation(a: np.ndarray | float, b: np.ndarray | float) -> float:
    """max |a - b| / max(1, |b|) elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


@dataclass
class ParityReport:
    tolerance: float
    loss_deviation: float
    deviations: dict[tuple[str, str], float] = field(default_factory=dict)  # (kind, name) -> deviation

    @property
    def passed(self) -> bool:
        return self.loss_deviation <= self.tolerance and all(d <= self.tolerance for d in self.deviations.values())

    @property
    def max_deviation(self) -> float:
        return max([self.loss_deviation, *self.deviations.values()])

    def worst(self, n: int = 3) -> list[tuple[str, str, float]]:
        ranked = sorted(self.deviations.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(kind, name, dev) for (kind, name), dev in ranked[:n]]

    def failures(self) -> list[tuple[str, str, float]]:
        return [(k, n, d) for (k, n), d in sorted(self.deviations.items()) if d > self.tolerance]

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"parity {status}: max deviation {self.max_deviation:.3e} (tolerance {self.tolerance:.1e})",
            f"  loss deviation {self.loss_deviation:.3e}",
        ]
        for kind, name, dev in self.worst():
            lines.append(f"  worst {kind} {name}: {dev:.3e}")
        for kind, name, dev in self.failures():
            lines.append(f"  over tolerance: {kind} {name} ({dev:.3e})")
        return "\n".join(lines) + "\n"

    def structured(self) -> str:
        """One ``key=value`` line per compared tensor, for machine consumption."""
        lines = [f"kind=loss name=loss deviation={self.loss_deviation:.6e} ok={int(self.loss_deviation <= self.tolerance)}"]
        for (kind, name), dev in sorted(self.deviations.items()):
            lines.append(f"kind={kind} name={name} deviation={dev:.6e} ok={int(dev <= self.tolerance)}")
        lines.append(f"kind=summary passed={int(self.passed)} max_deviation={self.max_deviation:.6e}")
        return "\n".join(lines) + "\n"


def parity_compare(dist: _State, oracle: _State, tol: float = DEFAULT_TOLERANCE) -> ParityReport:
    """Compare assembled distributed state with the oracle state tensor by tensor.

    Under plain SGD the optimizer holds no state beyond the parameters, so
    parameters and gradients cover the whole training state.
    """
    report = ParityReport(tol, relative_deviation(dist.loss, oracle.loss))
    for kind in ("param", "grad"):
        a = dist.params if kind == "param" else dist.grads
        b = oracle.params if kind == "param" else oracle.grads
        if set(a) != set(b):
            raise StructureMismatch(f"{kind} sets differ: {sorted(set(a) ^ set(b))}")
        for name in b:
            if np.shape(a[name]) != np.shape(b[name]):
                raise StructureMismatch(f"{kind} {name}: shape {np.shape(a[name])} != {np.shape(b[name])}")
            report.deviations[(kind, name)] = relative_deviation(a[name], b[name])
    return report


# -- interval oracle ---------------------------------------------------------------


def interval_oracle(batch: int, dp_src: int, dp_dst: int) -> dict[int, list[tuple[int, BatchInterval]]]:
    """Per destination shard, the ordered (source shard, interval) pieces, by brute force."""
    for dp in (dp_src, dp_dst):
        if dp < 1 or batch % dp:
            raise IndivisibleBatch(f"batch {batch} not divisible by dp={dp}")
    runs: dict[int, list[list[int]]] = {}
    for j in range(batch):
        s, d = j * dp_src // batch, j * dp_dst // batch
        pieces = runs.setdefault(d, [])
        if pieces and pieces[-1][0] == s and pieces[-1][1] + pieces[-1][2] == j:
            pieces[-1][2] += 1
        else:
            pieces.append([s, j, 1])
    return {d: [(s, BatchInterval(start, n)) for s, start, n in pieces] for d, pieces in sorted(runs.items())}
