"""Parameter storage, Adam, finite-difference gradient checks and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"BPLCKPT\x00"
CHECKPOINT_VERSION = 1


class NonFiniteError(ArithmeticError):
    pass


@dataclass(eq=False)
class ParameterBlock:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        elif self.grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: gradient shape {self.grad.shape} != {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.name, self.values.copy())


@dataclass(eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_block(cls, block: ParameterBlock, **hyper) -> "AdamState":
        return cls(np.zeros_like(block.values), np.zeros_like(block.values), **hyper)


def adam_step(param: ParameterBlock, state: AdamState) -> None:
    """One Adam update with bias correction and decoupled weight decay, in place.

    The gradient is cleared afterwards.
    """
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient in parameter block {param.name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * g
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * g * g
    m_hat = state.first_moment / (1.0 - b1**t)
    v_hat = state.second_moment / (1.0 - b2**t)
    if state.weight_decay:
        param.values *= 1.0 - state.learning_rate * state.weight_decay
    param.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.zero_grad()


class Adam:
    """Adam over a fixed list of blocks sharing hyperparameters."""

    def __init__(self, blocks: Sequence[ParameterBlock], lr: float, weight_decay: float = 0.0, **hyper):
        self.blocks = list(blocks)
        self.states = [AdamState.for_block(b, learning_rate=lr, weight_decay=weight_decay, **hyper) for b in self.blocks]

    def zero_grad(self) -> None:
        for b in self.blocks:
            b.zero_grad()

    def step(self) -> None:
        for b, s in zip(self.blocks, self.states):
            adam_step(b, s)


# ---------------------------------------------------------------------------
# Finite differences


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    loss_evaluator: Callable[[], float],
    params: Iterable[ParameterBlock],
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare accumulated analytic gradients against central differences.

    ``loss_evaluator`` returns the loss for the current block values and
    accumulates its analytic gradient into the blocks' ``grad``. Gradients
    are zeroed before the analytic pass and hold the analytic values on
    return.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    f0 = loss_evaluator()
    if not np.isfinite(f0):
        raise NonFiniteError("loss is not finite")
    analytic = [p.grad.copy() for p in params]

    errors: dict[str, float] = {}
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = loss_evaluator()
            flat[k] = orig - h
            f_minus = loss_evaluator()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"loss not finite while perturbing {p.name}[{k}]")
            num_flat[k] = (f_plus - f_minus) / (2.0 * h)
        errors[p.name] = float(relative_error(a, numeric).max(initial=0.0))
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, blocks: Iterable[ParameterBlock]) -> None:
    blocks = list(blocks)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<BI", CHECKPOINT_VERSION, len(blocks))
    for b in blocks:
        name = b.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", b.values.ndim)
        out += struct.pack(f"<{b.values.ndim}Q", *b.values.shape)
        out += np.ascontiguousarray(b.values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<BI", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 5
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def export_tsv(path: str | Path, blocks: Iterable[ParameterBlock]) -> None:
    """One line per block: name, shape as ``AxB``, then row-major values."""
    lines = []
    for b in blocks:
        shape = "x".join(str(s) for s in b.values.shape)
        lines.append("\t".join([b.name, shape] + [repr(float(v)) for v in b.values.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
