"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every op is a ``Function`` subclass. ``Function.apply`` records the parents on
a context object, runs ``forward`` on raw arrays and wraps the result in a
``Tensor`` that points back at the context. ``Tensor.backward`` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

ArrayLike = Any


class Tensor:
    __slots__ = ("data", "grad", "ctx", "requires_grad")

    def __init__(self, data: ArrayLike, ctx: Optional["Function"] = None, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.ctx = ctx
        self.requires_grad = requires_grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def __add__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __mul__(self, other: "Tensor | ArrayLike") -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, as_tensor(other))

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if node.ctx is not None:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node.ctx is None or node.grad is None:
                continue
            for parent, parent_grad in zip(node.ctx.parents, node.ctx.backward(node.grad)):
                if parent_grad is None:
                    continue
                parent.grad = parent_grad if parent.grad is None else parent.grad + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for parent in node.ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    def __init__(self, *parents: Tensor) -> None:
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **constants: Any) -> Tensor:
        ctx = cls(*parents)
        out = ctx.forward(*[parent.data for parent in parents], **constants)
        return Tensor(out, ctx=ctx, requires_grad=any(parent.requires_grad for parent in parents))

    def forward(self, *args: Any, **constants: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


class Add(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x * y

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class MatMul(Function):
    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return grad @ self.y.T, self.x.T @ grad


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.broadcast_to(grad, self.shape).copy(),)


class SparseMatMul(Function):
    """``operator @ x`` with a constant scipy sparse ``operator``."""

    def forward(self, x: np.ndarray, operator: sp.spmatrix) -> np.ndarray:
        self.operator = operator
        return np.asarray(operator @ x)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.asarray(self.operator.T @ grad),)


class WeightedCrossEntropy(Function):
    """``sum_i w[y_i] * nll_i / sum_i w[y_i]`` over softmax logits."""

    def forward(self, logits: np.ndarray, targets: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        rows = np.arange(targets.shape[0])
        weights = class_weights[targets]
        self.total = weights.sum()
        self.probabilities = np.exp(log_probs)
        self.targets, self.weights = targets, weights
        return np.asarray(-(weights * log_probs[rows, targets]).sum() / self.total)

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray]:
        delta = self.probabilities.copy()
        delta[np.arange(self.targets.shape[0]), self.targets] -= 1.0
        return (grad * delta * (self.weights / self.total)[:, None],)


def spmm(operator: sp.spmatrix, x: Tensor) -> Tensor:
    return SparseMatMul.apply(x, operator=operator)


def cross_entropy(logits: Tensor, targets: Sequence[int], class_weights: Optional[np.ndarray] = None) -> Tensor:
    y = np.asarray(targets, dtype=np.int64)
    weights = np.ones(logits.shape[1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    return WeightedCrossEntropy.apply(logits, targets=y, class_weights=weights)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(
        self,
        parameters: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.parameters = list(parameters)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(param.data) for param in self.parameters]
        self.v = [np.zeros_like(param.data) for param in self.parameters]

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for index, param in enumerate(self.parameters):
            if param.grad is None:
                continue
            self.m[index] = self.beta1 * self.m[index] + (1.0 - self.beta1) * param.grad
            self.v[index] = self.beta2 * self.v[index] + (1.0 - self.beta2) * param.grad**2
            m_hat = self.m[index] / correction1
            v_hat = self.v[index] / correction2
            param.data = param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
