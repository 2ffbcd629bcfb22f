"""Composable covariance functions on scalar inputs.

Leaves are RBF, periodic and linear kernels, each carrying its own output
scale ``variance``. Internal nodes are sums and products. Hyperparameters
are positive, bounded, optionally fixed, and are optimized in log space.

Kernels can be written as expressions, e.g.::

    sum(periodic(p=fixed(6.2831853)), rbf())
    periodic(period=bounded(12, 11.9, 12.1)) + rbf(lengthscale=20)
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractViolation

DEFAULT_BOUNDS = (1e-4, 1e4)


@dataclass(frozen=True)
class Param:
    value: float
    lower: float = DEFAULT_BOUNDS[0]
    upper: float = DEFAULT_BOUNDS[1]
    fixed: bool = False

    def __post_init__(self):
        if not (self.lower > 0 and self.lower <= self.upper):
            raise ContractViolation(f"invalid bounds [{self.lower}, {self.upper}]")
        if not (self.lower <= self.value <= self.upper):
            raise ContractViolation(
                f"hyperparameter value {self.value} outside bounds [{self.lower}, {self.upper}]"
            )

    @classmethod
    def make(cls, value: float, fixed: bool = False) -> "Param":
        if fixed:
            return cls(value, value, value, True)
        lo, hi = DEFAULT_BOUNDS
        return cls(value, min(lo, value), max(hi, value), False)

    def with_value(self, value: float) -> "Param":
        return replace(self, value=float(min(max(value, self.lower), self.upper)))

    def to_expr(self) -> str:
        if self.fixed:
            return f"fixed({self.value!r})"
        if (self.lower, self.upper) == DEFAULT_BOUNDS:
            return repr(self.value)
        return f"bounded({self.value!r}, {self.lower!r}, {self.upper!r})"


class Kernel:
    """Base class. Subclasses are frozen dataclasses."""

    def __call__(self, x, x2=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        x2 = x if x2 is None else np.asarray(x2, dtype=float).reshape(-1)
        return self._k(x, x2)

    def __add__(self, other: "Kernel") -> "Kernel":
        return combine("sum", self, other)

    def __mul__(self, other: "Kernel") -> "Kernel":
        return combine("product", self, other)

    def params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        raise NotImplementedError

    def free_params(self) -> list[tuple[str, Param]]:
        return [(n, p) for n, p in self.params() if not p.fixed]

    def with_params(self, values: dict[str, Param], prefix: str = "") -> "Kernel":
        raise NotImplementedError

    def gram_and_grads(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gram matrix and its derivatives w.r.t. each free log-hyperparameter."""
        x = np.asarray(x, dtype=float).reshape(-1)
        return self._kg(x, x)

    def _k(self, x, x2):
        raise NotImplementedError

    def _kg(self, x, x2):
        raise NotImplementedError

    def to_expr(self) -> str:
        raise NotImplementedError

    def __str__(self):
        return self.to_expr()


class _Leaf(Kernel):
    name = ""
    _fields: tuple[str, ...] = ()

    def params(self, prefix=""):
        for f in self._fields:
            yield f"{prefix}{self.name}.{f}", getattr(self, f)

    def with_params(self, values, prefix=""):
        kw = {}
        for f in self._fields:
            key = f"{prefix}{self.name}.{f}"
            if key in values:
                kw[f] = values[key]
        return replace(self, **kw) if kw else self

    def to_expr(self):
        args = ", ".join(f"{f}={getattr(self, f).to_expr()}" for f in self._fields)
        return f"{self.name}({args})"


@dataclass(frozen=True)
class RBF(_Leaf):
    variance: Param = field(default_factory=lambda: Param.make(1.0))
    lengthscale: Param = field(default_factory=lambda: Param.make(1.0))

    name = "rbf"
    _fields = ("variance", "lengthscale")

    def _k(self, x, x2):
        r = x[:, None] - x2[None, :]
        return self.variance.value * np.exp(-0.5 * r * r / self.lengthscale.value ** 2)

    def _kg(self, x, x2):
        r2 = (x[:, None] - x2[None, :]) ** 2
        ell2 = self.lengthscale.value ** 2
        k = self.variance.value * np.exp(-0.5 * r2 / ell2)
        grads = []
        if not self.variance.fixed:
            grads.append(k)
        if not self.lengthscale.fixed:
            grads.append(k * r2 / ell2)
        return k, grads


@dataclass(frozen=True)
class Periodic(_Leaf):
    """``variance * exp(-2 sin^2(pi |x - x2| / period) / lengthscale^2)``."""

    variance: Param = field(default_factory=lambda: Param.make(1.0))
    lengthscale: Param = field(default_factory=lambda: Param.make(1.0))
    period: Param = field(default_factory=lambda: Param.make(1.0))

    name = "periodic"
    _fields = ("variance", "lengthscale", "period")

    def _k(self, x, x2):
        arg = np.pi * np.abs(x[:, None] - x2[None, :]) / self.period.value
        s = np.sin(arg)
        return self.variance.value * np.exp(-2.0 * s * s / self.lengthscale.value ** 2)

    def _kg(self, x, x2):
        arg = np.pi * np.abs(x[:, None] - x2[None, :]) / self.period.value
        s = np.sin(arg)
        ell2 = self.lengthscale.value ** 2
        k = self.variance.value * np.exp(-2.0 * s * s / ell2)
        grads = []
        if not self.variance.fixed:
            grads.append(k)
        if not self.lengthscale.fixed:
            grads.append(k * 4.0 * s * s / ell2)
        if not self.period.fixed:
            grads.append(k * 4.0 * arg * s * np.cos(arg) / ell2)
        return k, grads


@dataclass(frozen=True)
class Linear(_Leaf):
    """``variance * x * x2``; not stationary."""

    variance: Param = field(default_factory=lambda: Param.make(1.0))

    name = "linear"
    _fields = ("variance",)

    def _k(self, x, x2):
        return self.variance.value * np.outer(x, x2)

    def _kg(self, x, x2):
        k = self._k(x, x2)
        return k, ([] if self.variance.fixed else [k])


@dataclass(frozen=True)
class _Binary(Kernel):
    left: Kernel
    right: Kernel

    op = ""

    def params(self, prefix=""):
        yield from self.left.params(f"{prefix}0.")
        yield from self.right.params(f"{prefix}1.")

    def with_params(self, values, prefix=""):
        return replace(
            self,
            left=self.left.with_params(values, f"{prefix}0."),
            right=self.right.with_params(values, f"{prefix}1."),
        )

    def to_expr(self):
        return f"{self.op}({self.left.to_expr()}, {self.right.to_expr()})"


@dataclass(frozen=True)
class Sum(_Binary):
    op = "sum"

    def _k(self, x, x2):
        return self.left._k(x, x2) + self.right._k(x, x2)

    def _kg(self, x, x2):
        kl, gl = self.left._kg(x, x2)
        kr, gr = self.right._kg(x, x2)
        return kl + kr, gl + gr


@dataclass(frozen=True)
class Product(_Binary):
    op = "product"

    def _k(self, x, x2):
        return self.left._k(x, x2) * self.right._k(x, x2)

    def _kg(self, x, x2):
        kl, gl = self.left._kg(x, x2)
        kr, gr = self.right._kg(x, x2)
        return kl * kr, [g * kr for g in gl] + [kl * g for g in gr]


def combine(op: str, left: Kernel, right: Kernel) -> Kernel:
    if op == "sum":
        return Sum(left, right)
    if op == "product":
        return Product(left, right)
    raise ContractViolation(f"unknown kernel combination {op!r}")


def eval(k: Kernel, x: float, x2: float) -> float:  # noqa: A001 - mirrors the kernel operation name
    return float(k._k(np.array([float(x)]), np.array([float(x2)]))[0, 0])


def gram(k: Kernel, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if xs.size == 0:
        raise ContractViolation("gram needs at least one input")
    G = k._k(xs, xs)
    return 0.5 * (G + G.T)


# -- hyperparameter vector -------------------------------------------------

def pack(k: Kernel) -> tuple[list[str], np.ndarray]:
    """Names and log-values of the free hyperparameters, in tree order."""
    free = k.free_params()
    return [n for n, _ in free], np.array([math.log(p.value) for _, p in free])


def unpack(k: Kernel, log_values) -> Kernel:
    """Inverse of :func:`pack`; coordinates equal to the packed value keep the exact original."""
    free = k.free_params()
    log_values = np.asarray(log_values, dtype=float).reshape(-1)
    if log_values.size != len(free):
        raise ContractViolation(f"expected {len(free)} log-values, got {log_values.size}")
    updates = {}
    for (name, p), lv in zip(free, log_values):
        if lv != math.log(p.value):
            updates[name] = p.with_value(math.exp(lv))
    return k.with_params(updates) if updates else k


def log_bounds(k: Kernel) -> list[tuple[float, float]]:
    return [(math.log(p.lower), math.log(p.upper)) for _, p in k.free_params()]


# -- expression grammar ----------------------------------------------------

_LEAVES = {"rbf": RBF, "periodic": Periodic, "linear": Linear}
_ALIASES = {
    "variance": "variance", "var": "variance", "s2": "variance", "sigma2": "variance",
    "lengthscale": "lengthscale", "ell": "lengthscale", "l": "lengthscale",
    "period": "period", "p": "period",
}


def _number(node) -> float:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    raise ConfigError(f"expected a number, got {ast.unparse(node)!r}")


def _param(node) -> Param:
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        args = [_number(a) for a in node.args]
        if node.func.id == "fixed" and len(args) == 1:
            return Param.make(args[0], fixed=True)
        if node.func.id == "bounded" and len(args) == 3:
            return Param(args[0], args[1], args[2])
        raise ConfigError(f"bad hyperparameter spec {ast.unparse(node)!r}")
    return Param.make(_number(node))


def _build(node) -> Kernel:
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Mult)):
        op = "sum" if isinstance(node.op, ast.Add) else "product"
        return combine(op, _build(node.left), _build(node.right))
    if not (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)):
        raise ConfigError(f"expected a kernel call, got {ast.unparse(node)!r}")
    name = node.func.id.lower()
    if name in ("sum", "product"):
        if len(node.args) < 2 or node.keywords:
            raise ConfigError(f"{name}() takes two or more kernel arguments")
        out = _build(node.args[0])
        for a in node.args[1:]:
            out = combine(name, out, _build(a))
        return out
    if name not in _LEAVES:
        raise ConfigError(f"unknown kernel {name!r}")
    if node.args:
        raise ConfigError(f"{name}() takes keyword arguments only")
    cls = _LEAVES[name]
    kw = {}
    for k in node.keywords:
        field_name = _ALIASES.get(k.arg or "")
        if field_name not in cls._fields:
            raise ConfigError(f"{name}() has no hyperparameter {k.arg!r}")
        kw[field_name] = _param(k.value)
    try:
        return cls(**kw)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


def parse_kernel(expr: str) -> Kernel:
    try:
        tree = ast.parse(expr.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse kernel expression {expr!r}: {exc.msg}") from exc
    return _build(tree.body)
