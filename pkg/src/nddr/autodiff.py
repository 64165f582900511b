"""4-D tensors plus a recording tape for reverse-mode differentiation.

Values are dense NHWC numpy arrays (float32 for training, float64 for
gradient checking). Operations in :mod:`nddr.ops` compute their forward
value eagerly and, when a :class:`Tape` is active and some input wants a
gradient, append a node whose closure scatters the output gradient back
into the input tensors. ``Tape.backward`` walks the nodes in reverse
recording order, which is a valid topological order by construction.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "ShapeError",
    "GraphConsumedError",
    "NonFiniteError",
    "active_tape",
    "backward",
    "set_check_finite",
    "check_finite_enabled",
    "finite_difference_check",
    "scalar",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_TAPE_STACK: list["Tape"] = []
_CHECK_FINITE = False


class ShapeError(ValueError):
    """An operation received tensors whose shapes or dtypes do not fit."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared while finite checking is enabled."""


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    """A 4-D NHWC value with an optional gradient buffer.

    Non-spatial data reuses the layout with singleton axes: scalars are
    (1,1,1,1), per-channel vectors (1,1,1,C), matrices (1,1,M,K), conv
    filterbanks (F,kh,kw,Cin).
    """

    __slots__ = ("data", "grad", "requires_grad", "_grad_wanted", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D NHWC, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._grad_wanted = self.requires_grad
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flags})"


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


class Node:
    """One recorded op: its output tensor and the gradient scatter closure."""

    __slots__ = ("name", "out", "bwd")

    def __init__(self, name: str, out: Tensor, bwd: Callable[[np.ndarray], None]):
        self.name = name
        self.out = out
        self.bwd = bwd


class Tape:
    """Records ops while active (as a context manager) and replays them backward."""

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unnest in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients into inputs.

        The tape is single-use; a second call raises GraphConsumedError.
        """
        if self._consumed:
            raise GraphConsumedError("this tape has already been walked backward")
        if loss.data.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            node.bwd(g)
            if _CHECK_FINITE:
                _assert_finite_grads(node)


def _assert_finite_grads(node: Node) -> None:
    g = node.out.grad
    if g is not None and not np.isfinite(g).all():
        raise NonFiniteError(f"non-finite gradient flowing out of op '{node.name}'")


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Walk the tape that recorded ``loss`` backward from it."""
    if loss._tape is None:
        raise GraphConsumedError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def accumulate_grad(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad`` if the tensor participates in the graph.

    ``own=True`` promises ``g`` is a fresh array the caller will not reuse,
    letting the first accumulation skip a copy.
    """
    if not t._grad_wanted:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def emit(name: str, data: np.ndarray, inputs: tuple, bwd: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording ``bwd`` when a tape is active."""
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by op '{name}'")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t._grad_wanted for t in inputs):
        out._grad_wanted = True
        out._tape = tape
        tape._nodes.append(Node(name, out, bwd))
    return out


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare tape gradients of scalar ``f(x)`` against central differences.

    Returns max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. Coordinates
    default to all of ``x``; ``max_coords`` subsamples for big tensors.
    Any NaN encountered reports as ``inf`` so callers fail loudly.
    """
    if not x.requires_grad:
        raise ValueError("finite_difference_check needs x.requires_grad=True")
    x.grad = None
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    if not np.isfinite(analytic).all():
        return float("inf")

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    ana_flat = analytic.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = f(x).item()
        flat[idx] = orig - eps
        f_minus = f(x).item()
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        if not np.isfinite(numeric):
            return float("inf")
        denom = max(1.0, abs(float(ana_flat[idx])), abs(numeric))
        worst = max(worst, abs(float(ana_flat[idx]) - numeric) / denom)
    return worst
