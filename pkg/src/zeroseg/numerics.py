"""Minimal reverse-mode autodiff core for dense float64 tensors.

Operations are recorded on a Tape in execution order, which is already a
topological order of the compute graph, so a single reverse sweep over the
records produces every gradient.  Only the ops the segmentation trainer
actually needs are provided, each with an explicit backward rule, plus an
SGD-with-momentum update, a polynomial learning-rate schedule, and a
central finite-difference gradient checker.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "ParamSet",
    "backward",
    "grad_check",
    "add",
    "scale",
    "mul",
    "relu",
    "conv2d",
    "inner_last",
    "softmax_last",
    "gather_last",
    "channel_mass",
    "clamp_min",
    "log",
    "mean_all",
    "masked_mean",
    "sgd_momentum_step",
    "poly_lr",
]


class ShapeError(ValueError):
    """Input shapes are inconsistent with an operation's contract."""


class Tensor:
    """A dense float64 array plus the tape that produced it (if any).

    Tensors created without a tape are constants: gradients never flow
    into them.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.data.shape}, {tag})"


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out: Tensor, fn: Callable[[np.ndarray], None]):
        self.out = out
        self.fn = fn


class Tape:
    """Append-only record of operations plus the named leaf parameters."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, data) -> Tensor:
        """Register a named leaf tensor whose gradient backward() reports."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        t = Tensor(data, tape=self)
        self._params[name] = t
        return t

    def _record(self, out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append(_Node(out, fn))

    def __len__(self) -> int:
        return len(self._nodes)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands come from different tapes")
    return tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.tape is None:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by name.

    Parameters that do not feed the loss get exact zero gradients.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    for node in tape._nodes:
        node.out.grad = None
    for p in tape._params.values():
        p.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape._nodes):
        if node.out.grad is not None:
            node.fn(node.out.grad)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in tape._params.items()
    }


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    tape = _result_tape(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def _bw(g):
            _accum(a, g)
            _accum(b, g)
        tape._record(out, _bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    tape = _result_tape(a)
    out = Tensor(a.data * s, tape)
    if tape is not None:
        def _bw(g):
            _accum(a, g * s)
        tape._record(out, _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    tape = _result_tape(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        def _bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        tape._record(out, _bw)
    return out


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    tape = _result_tape(a)
    out = Tensor(np.maximum(a.data, 0.0), tape)
    if tape is not None:
        mask = a.data > 0.0
        def _bw(g):
            _accum(a, g * mask)
        tape._record(out, _bw)
    return out


def _pad_hw(x4: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x4, ((0, 0), (p, p), (p, p), (0, 0)))


def _shift_conv(x4: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 convolution of a (B, H, W, Cin) stack.

    One GEMM per kernel offset; no patch matrix is materialized.
    """
    k = kernel.shape[0]
    cin, cout = kernel.shape[2], kernel.shape[3]
    b, h, w = x4.shape[0], x4.shape[1], x4.shape[2]
    if k == 1:
        return (x4.reshape(-1, cin) @ kernel.reshape(cin, cout)).reshape(b, h, w, cout)
    xp = _pad_hw(x4, (k - 1) // 2)
    out: np.ndarray | None = None
    for a in range(k):
        for bb in range(k):
            sl = np.ascontiguousarray(xp[:, a:a + h, bb:bb + w, :]).reshape(-1, cin)
            term = sl @ kernel[a, bb]
            if out is None:
                out = term
            else:
                out += term
    return out.reshape(b, h, w, cout)


def _shift_kernel_grad(x4: np.ndarray, g2: np.ndarray, k: int, cout: int) -> np.ndarray:
    cin = x4.shape[3]
    b, h, w = x4.shape[0], x4.shape[1], x4.shape[2]
    if k == 1:
        return (x4.reshape(-1, cin).T @ g2).reshape(1, 1, cin, cout)
    xp = _pad_hw(x4, (k - 1) // 2)
    kg = np.empty((k, k, cin, cout))
    for a in range(k):
        for bb in range(k):
            sl = np.ascontiguousarray(xp[:, a:a + h, bb:bb + w, :]).reshape(-1, cin)
            kg[a, bb] = sl.T @ g2
    return kg


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded convolution that preserves resolution.

    x: (H, W, Cin) or a batched (B, H, W, Cin) stack;
    kernel: (k, k, Cin, Cout) with k odd; bias: (Cout,).
    """
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (H, W, C) or (B, H, W, C), got {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise ShapeError(f"conv2d kernel must be k x k x Cin x Cout, got {kernel.data.shape}")
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    cin = x.data.shape[-1]
    if kernel.data.shape[2] != cin:
        raise ShapeError(
            f"input has {cin} channels but kernel expects {kernel.data.shape[2]}"
        )
    cout = kernel.data.shape[3]
    if bias.data.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")

    batched = x.data.ndim == 4
    x4 = x.data if batched else x.data[None]
    tape = _result_tape(x, kernel, bias)
    out_data = _shift_conv(x4, kernel.data) + bias.data
    out = Tensor(out_data if batched else out_data[0], tape)
    if tape is not None:
        def _bw(g):
            g4 = g if batched else g[None]
            g2 = g4.reshape(-1, cout)
            if kernel.tape is not None:
                _accum(kernel, _shift_kernel_grad(x4, g2, k, cout))
            if bias.tape is not None:
                _accum(bias, g2.sum(axis=0))
            if x.tape is not None:
                flipped = np.ascontiguousarray(kernel.data[::-1, ::-1].transpose(0, 1, 3, 2))
                xg = _shift_conv(g4, flipped)
                _accum(x, xg if batched else xg[0])
        tape._record(out, _bw)
    return out


def inner_last(x: Tensor, mat: np.ndarray) -> Tensor:
    """out[..., n] = <x[..., :], mat[n, :]> for a constant matrix."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or x.data.shape[-1] != mat.shape[1]:
        raise ShapeError(
            f"inner_last: last axis {x.data.shape[-1]} vs matrix {mat.shape}"
        )
    tape = _result_tape(x)
    out = Tensor(x.data @ mat.T, tape)
    if tape is not None:
        def _bw(g):
            _accum(x, g @ mat)
        tape._record(out, _bw)
    return out


def softmax_last(x: Tensor) -> Tensor:
    """Stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    tape = _result_tape(x)
    out = Tensor(p, tape)
    if tape is not None:
        def _bw(g):
            _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
        tape._record(out, _bw)
    return out


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i, j] = x[i, j, idx[i, j]] for an integer index field."""
    idx = np.asarray(idx)
    if idx.shape != x.data.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} vs tensor {x.data.shape}")
    c = x.data.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ValueError(f"gather indices must lie in [0, {c})")
    tape = _result_tape(x)
    out = Tensor(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0], tape)
    if tape is not None:
        def _bw(g):
            z = np.zeros_like(x.data)
            np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
            _accum(x, z)
        tape._record(out, _bw)
    return out


def channel_mass(x: Tensor, channels: Sequence[int]) -> Tensor:
    """Sum of the selected last-axis channels: out[i, j] = sum_c x[i, j, c]."""
    chans = tuple(int(c) for c in channels)
    if not chans:
        raise ValueError("channel_mass needs at least one channel")
    c = x.data.shape[-1]
    if min(chans) < 0 or max(chans) >= c:
        raise ValueError(f"channels must lie in [0, {c})")
    sel = list(chans)
    tape = _result_tape(x)
    out = Tensor(x.data[..., sel].sum(axis=-1), tape)
    if tape is not None:
        def _bw(g):
            z = np.zeros_like(x.data)
            z[..., sel] = g[..., None]
            _accum(x, z)
        tape._record(out, _bw)
    return out


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient is blocked where the clamp is active."""
    lo = float(lo)
    tape = _result_tape(x)
    out = Tensor(np.maximum(x.data, lo), tape)
    if tape is not None:
        mask = x.data > lo
        def _bw(g):
            _accum(x, g * mask)
        tape._record(out, _bw)
    return out


def log(x: Tensor) -> Tensor:
    tape = _result_tape(x)
    out = Tensor(np.log(x.data), tape)
    if tape is not None:
        def _bw(g):
            _accum(x, g / x.data)
        tape._record(out, _bw)
    return out


def mean_all(x: Tensor) -> Tensor:
    tape = _result_tape(x)
    out = Tensor(x.data.mean(), tape)
    if tape is not None:
        n = x.data.size
        def _bw(g):
            _accum(x, np.full_like(x.data, float(g) / n))
        tape._record(out, _bw)
    return out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the True positions of mask; 0.0 when mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ShapeError(f"mask shape {mask.shape} vs tensor {x.data.shape}")
    n = int(mask.sum())
    tape = _result_tape(x)
    out = Tensor(x.data[mask].sum() / n if n else 0.0, tape)
    if tape is not None and n:
        def _bw(g):
            z = np.zeros_like(x.data)
            z[mask] = float(g) / n
            _accum(x, z)
        tape._record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Named float64 parameter arrays plus matching momentum buffers.

    Momentum buffers are zero-initialized and always shape-match their
    parameters.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.tensors: dict[str, np.ndarray] = {
            name: np.array(arr, dtype=np.float64) for name, arr in tensors.items()
        }
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(arr) for name, arr in self.tensors.items()
        }

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter on a tape; values are shared, not copied."""
        return {name: tape.parameter(name, arr) for name, arr in self.tensors.items()}

    def copy(self) -> "ParamSet":
        dup = ParamSet(self.tensors)
        dup.velocity = {name: v.copy() for name, v in self.velocity.items()}
        return dup

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)


def sgd_momentum_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
) -> ParamSet:
    """In-place update: v <- momentum * v + g; theta <- theta - lr * v."""
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    missing = sorted(set(params.tensors) - set(grads))
    if missing:
        raise ValueError(f"missing gradients for: {', '.join(missing)}")
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {theta.shape}")
        v = params.velocity[name]
        v *= momentum
        v += g
        theta -= lr * v
    return params


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    """Polynomial decay: base_lr * (1 - step/total_steps) ** power."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    if base_lr <= 0.0:
        raise ValueError(f"base_lr must be positive, got {base_lr}")
    if power <= 0.0:
        raise ValueError(f"power must be positive, got {power}")
    return base_lr * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------------------
# verification


def _eval_objective(objective, params: ParamSet) -> float:
    tape = Tape()
    value = objective(params.bind(tape))
    out = float(value.data)
    if not np.isfinite(out):
        raise ValueError(f"objective is non-finite: {out}")
    return out


def grad_check(
    objective: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    The objective must be deterministic for fixed inputs.
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    tape = Tape()
    loss = objective(params.bind(tape))
    if not np.isfinite(loss.data):
        raise ValueError("objective is non-finite at the base point")
    grads = backward(loss, tape)
    worst = 0.0
    for name, theta in params.tensors.items():
        flat = theta.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _eval_objective(objective, params)
            flat[i] = orig - step
            lo = _eval_objective(objective, params)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
