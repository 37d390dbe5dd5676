"""Scalar kernels over real inputs plus a small textual spec grammar.

Kernel specs are immutable trees: five stationary base families
(``eq``, ``matern12``, ``matern32``, ``matern52``, ``periodic``) combined by
``sum``, ``product`` and ``scaled``.  Every strictly positive parameter is
validated at construction; learning happens in log space elsewhere, so
positivity is preserved by construction there as well.

The grammar used in configs mirrors the constructors::

    matern52(lengthscale=1.0, variance=2.0)
    sum(eq(lengthscale=1, variance=1), periodic(lengthscale=1, variance=1, period=12))
    scaled(0.5, matern12(lengthscale=2, variance=1))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._linalg import chol_with_jitter
from .errors import GrammarError, ParameterError

__all__ = [
    "KernelSpec",
    "ExponentiatedQuadratic",
    "Matern12",
    "Matern32",
    "Matern52",
    "Periodic",
    "Sum",
    "Product",
    "Scaled",
    "KernelMatrix",
    "eval_kernel",
    "kernel_values",
    "build_kernel_matrix",
    "parse_kernel_spec",
    "render_kernel_spec",
    "stationary_variance",
    "normalize_unit_variance",
]


def _check_positive(name, value):
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ParameterError(f"{name} must be a positive finite real, got {value!r}")
    return value


class KernelSpec:
    """Base class for kernel specification nodes."""

    __slots__ = ()

    def __call__(self, t, t2):
        return eval_kernel(self, t, t2)


@dataclass(frozen=True)
class ExponentiatedQuadratic(KernelSpec):
    """k(r) = variance * exp(-r^2 / (2 lengthscale^2))."""

    lengthscale: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _check_positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "variance", _check_positive("variance", self.variance))


@dataclass(frozen=True)
class Matern12(KernelSpec):
    """k(r) = variance * exp(-r / lengthscale) (Ornstein-Uhlenbeck)."""

    lengthscale: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _check_positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "variance", _check_positive("variance", self.variance))


@dataclass(frozen=True)
class Matern32(KernelSpec):
    """k(r) = variance * (1 + a) * exp(-a), a = sqrt(3) r / lengthscale."""

    lengthscale: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _check_positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "variance", _check_positive("variance", self.variance))


@dataclass(frozen=True)
class Matern52(KernelSpec):
    """k(r) = variance * (1 + a + a^2/3) * exp(-a), a = sqrt(5) r / lengthscale."""

    lengthscale: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _check_positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "variance", _check_positive("variance", self.variance))


@dataclass(frozen=True)
class Periodic(KernelSpec):
    """Exponentiated-sine-squared kernel.

    k(r) = variance * exp(-2 sin^2(pi r / period) / lengthscale^2)
    """

    lengthscale: float
    variance: float
    period: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscale", _check_positive("lengthscale", self.lengthscale))
        object.__setattr__(self, "variance", _check_positive("variance", self.variance))
        object.__setattr__(self, "period", _check_positive("period", self.period))


@dataclass(frozen=True)
class Sum(KernelSpec):
    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        if len(terms) < 2:
            raise ParameterError("sum needs at least two terms")
        object.__setattr__(self, "terms", terms)


@dataclass(frozen=True)
class Product(KernelSpec):
    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        if len(terms) < 2:
            raise ParameterError("product needs at least two terms")
        object.__setattr__(self, "terms", terms)


@dataclass(frozen=True)
class Scaled(KernelSpec):
    weight: float
    term: KernelSpec

    def __post_init__(self):
        object.__setattr__(self, "weight", _check_positive("weight", self.weight))


@dataclass(frozen=True)
class KernelMatrix:
    """Raw kernel matrix entries plus the diagonal jitter needed for a
    successful Cholesky factorization (0.0 when none)."""

    entries: np.ndarray
    jitter_applied: float

    def stabilized(self):
        """Entries with the recorded jitter added to the diagonal."""
        return self.entries + self.jitter_applied * np.eye(self.entries.shape[0])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _values_from_r(spec, r):
    """Evaluate a spec on a (broadcastable) array of absolute lags ``r``."""
    if isinstance(spec, ExponentiatedQuadratic):
        return spec.variance * np.exp(-0.5 * (r / spec.lengthscale) ** 2)
    if isinstance(spec, Matern12):
        return spec.variance * np.exp(-r / spec.lengthscale)
    if isinstance(spec, Matern32):
        a = (math.sqrt(3.0) / spec.lengthscale) * r
        return spec.variance * (1.0 + a) * np.exp(-a)
    if isinstance(spec, Matern52):
        a = (math.sqrt(5.0) / spec.lengthscale) * r
        return spec.variance * (1.0 + a + a * a / 3.0) * np.exp(-a)
    if isinstance(spec, Periodic):
        s = np.sin((math.pi / spec.period) * r)
        return spec.variance * np.exp(-2.0 * (s / spec.lengthscale) ** 2)
    if isinstance(spec, Sum):
        return sum(_values_from_r(t, r) for t in spec.terms)
    if isinstance(spec, Product):
        out = _values_from_r(spec.terms[0], r)
        for t in spec.terms[1:]:
            out = out * _values_from_r(t, r)
        return out
    if isinstance(spec, Scaled):
        return spec.weight * _values_from_r(spec.term, r)
    raise TypeError(f"not a kernel spec: {spec!r}")


def eval_kernel(spec, t, t2):
    """Evaluate ``k(t, t2)`` for a scalar pair of inputs."""
    return float(_values_from_r(spec, abs(float(t) - float(t2))))


def kernel_values(spec, times, times2=None):
    """Cross-covariance matrix ``k(times[i], times2[j])`` (no jitter)."""
    times = np.asarray(times, dtype=float)
    times2 = times if times2 is None else np.asarray(times2, dtype=float)
    r = np.abs(times[:, None] - times2[None, :])
    return _values_from_r(spec, r)


def build_kernel_matrix(spec, times):
    """Kernel matrix over ``times`` with the jitter needed for Cholesky.

    The returned entries are the raw kernel values; ``jitter_applied``
    records the diagonal shift (relative escalation policy, see
    :func:`orthogp._linalg.chol_with_jitter`) that makes the factorization
    succeed.

    Raises
    ------
    ConditioningError
        If the matrix cannot be factorized at the maximum jitter.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise ParameterError("times must be a 1-d vector")
    if times.size and not np.all(np.isfinite(times)):
        raise ParameterError("times must be finite")
    K = kernel_values(spec, times)
    _, jitter = chol_with_jitter(K)
    return KernelMatrix(entries=K, jitter_applied=jitter)


# ---------------------------------------------------------------------------
# Stationary variance and unit-variance normalization
# ---------------------------------------------------------------------------


def stationary_variance(spec):
    """Value of ``k(t, t)``, constant for every spec in this grammar."""
    if isinstance(spec, (ExponentiatedQuadratic, Matern12, Matern32, Matern52, Periodic)):
        return spec.variance
    if isinstance(spec, Sum):
        return sum(stationary_variance(t) for t in spec.terms)
    if isinstance(spec, Product):
        out = 1.0
        for t in spec.terms:
            out *= stationary_variance(t)
        return out
    if isinstance(spec, Scaled):
        return spec.weight * stationary_variance(spec.term)
    raise TypeError(f"not a kernel spec: {spec!r}")


def normalize_unit_variance(spec):
    """Rescale a spec so that ``k(t, t) == 1``.

    Base families get their variance replaced; ``scaled`` nodes get their
    weight adjusted; other combinators are wrapped in a ``scaled`` node.
    Idempotent up to floating-point roundoff.
    """
    v = stationary_variance(spec)
    if isinstance(spec, (ExponentiatedQuadratic, Matern12, Matern32, Matern52, Periodic)):
        return replace(spec, variance=spec.variance / v)
    if isinstance(spec, Scaled):
        return replace(spec, weight=spec.weight / v)
    return Scaled(weight=1.0 / v, term=spec)


# ---------------------------------------------------------------------------
# Learnable-parameter plumbing (used by the learn module)
# ---------------------------------------------------------------------------

_BASE_PARAM_NAMES = {
    ExponentiatedQuadratic: ("lengthscale", "variance"),
    Matern12: ("lengthscale", "variance"),
    Matern32: ("lengthscale", "variance"),
    Matern52: ("lengthscale", "variance"),
    Periodic: ("lengthscale", "variance", "period"),
}


def free_parameters(spec, skip_top_scale=False):
    """Flat list of the spec's positive parameters, in canonical order.

    With ``skip_top_scale`` the top-level scale slot (a base family's
    ``variance`` or a ``scaled`` node's ``weight``) is omitted; that slot is
    pinned by unit-variance normalization for latent kernels.
    """
    names = _BASE_PARAM_NAMES.get(type(spec))
    if names is not None:
        skip = {"variance"} if skip_top_scale else set()
        return [getattr(spec, n) for n in names if n not in skip]
    if isinstance(spec, (Sum, Product)):
        out = []
        for t in spec.terms:
            out.extend(free_parameters(t))
        return out
    if isinstance(spec, Scaled):
        head = [] if skip_top_scale else [spec.weight]
        return head + free_parameters(spec.term)
    raise TypeError(f"not a kernel spec: {spec!r}")


def with_parameters(spec, values, skip_top_scale=False):
    """Rebuild ``spec`` with parameters taken from ``values`` (same order as
    :func:`free_parameters`).  Skipped scale slots are left at 1.0 and are
    expected to be restored by normalization."""
    values = list(values)

    def build(node, skip_scale):
        names = _BASE_PARAM_NAMES.get(type(node))
        if names is not None:
            kwargs = {}
            for n in names:
                if skip_scale and n == "variance":
                    kwargs[n] = 1.0
                else:
                    kwargs[n] = values.pop(0)
            return type(node)(**kwargs)
        if isinstance(node, (Sum, Product)):
            return type(node)(tuple(build(t, False) for t in node.terms))
        if isinstance(node, Scaled):
            w = 1.0 if skip_scale else values.pop(0)
            return Scaled(weight=w, term=build(node.term, False))
        raise TypeError(f"not a kernel spec: {node!r}")

    out = build(spec, skip_top_scale)
    if values:
        raise ParameterError(f"{len(values)} unused kernel parameter values")
    return out


def kernel_values_with_grads(spec, times, times2=None, skip_top_scale=False):
    """Kernel matrix plus derivatives w.r.t. the log of each free parameter.

    Returns ``(K, grads)`` where ``grads[j]`` is ``dK / d log(theta_j)`` in
    the order of :func:`free_parameters`.
    """
    times = np.asarray(times, dtype=float)
    times2 = times if times2 is None else np.asarray(times2, dtype=float)
    r = np.abs(times[:, None] - times2[None, :])

    def rec(node, skip_scale):
        K = _values_from_r(node, r)
        grads = []
        names = _BASE_PARAM_NAMES.get(type(node))
        if names is not None:
            ell = node.lengthscale
            if isinstance(node, ExponentiatedQuadratic):
                dlen = K * (r / ell) ** 2
            elif isinstance(node, Matern12):
                dlen = K * (r / ell)
            elif isinstance(node, Matern32):
                a = (math.sqrt(3.0) / ell) * r
                dlen = node.variance * a * a * np.exp(-a)
            elif isinstance(node, Matern52):
                a = (math.sqrt(5.0) / ell) * r
                dlen = node.variance * (a * a * (1.0 + a) / 3.0) * np.exp(-a)
            else:  # Periodic
                u = (math.pi / node.period) * r
                dlen = K * 4.0 * np.sin(u) ** 2 / ell**2
                dper = K * (2.0 * math.pi / (ell**2 * node.period)) * r * np.sin(2.0 * u)
            for n in names:
                if n == "lengthscale":
                    grads.append(dlen)
                elif n == "variance":
                    if not skip_scale:
                        grads.append(K.copy())
                else:  # period
                    grads.append(dper)
            return K, grads
        if isinstance(node, Sum):
            for t in node.terms:
                _, g = rec(t, False)
                grads.extend(g)
            return K, grads
        if isinstance(node, Product):
            parts = [rec(t, False) for t in node.terms]
            for i, (_, g_i) in enumerate(parts):
                rest = np.ones_like(r)
                for j, (K_j, _) in enumerate(parts):
                    if j != i:
                        rest = rest * K_j
                grads.extend(g * rest for g in g_i)
            return K, grads
        if isinstance(node, Scaled):
            K_in, g_in = rec(node.term, False)
            if not skip_scale:
                grads.append(node.weight * K_in)
            grads.extend(node.weight * g for g in g_in)
            return K, grads
        raise TypeError(f"not a kernel spec: {node!r}")

    return rec(spec, skip_top_scale)


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------

_FAMILIES = {
    "eq": ExponentiatedQuadratic,
    "matern12": Matern12,
    "matern32": Matern32,
    "matern52": Matern52,
    "periodic": Periodic,
}
_FAMILY_NAMES = {v: k for k, v in _FAMILIES.items()}


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def error(self, message):
        raise GrammarError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def ident(self):
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isalnum() or self.text[self.pos] == "_"):
            self.pos += 1
        if self.pos == start:
            self.error("expected a name")
        return self.text[start : self.pos]

    def number(self):
        self.skip_ws()
        start = self.pos
        allowed = set("0123456789+-.eE")
        while self.pos < len(self.text) and self.text[self.pos] in allowed:
            # stop a trailing sign that is not an exponent sign
            if self.text[self.pos] in "+-" and self.pos > start and self.text[self.pos - 1] not in "eE":
                break
            self.pos += 1
        token = self.text[start : self.pos]
        try:
            return float(token)
        except ValueError:
            self.pos = start
            self.error(f"expected a number, got {token!r}")

    def spec(self):
        name = self.ident()
        self.expect("(")
        try:
            if name in _FAMILIES:
                node = self._family(_FAMILIES[name])
            elif name in ("sum", "product"):
                terms = [self.spec()]
                while self.peek() == ",":
                    self.expect(",")
                    terms.append(self.spec())
                node = (Sum if name == "sum" else Product)(tuple(terms))
            elif name == "scaled":
                weight = self.number()
                self.expect(",")
                term = self.spec()
                node = Scaled(weight=weight, term=term)
            else:
                self.pos -= len(name) + 1
                self.error(f"unknown kernel family {name!r}")
        except ParameterError as exc:
            raise GrammarError(str(exc), self.pos) from exc
        self.expect(")")
        return node

    def _family(self, cls):
        kwargs = {}
        while True:
            key = self.ident()
            if key in kwargs:
                self.error(f"duplicate parameter {key!r}")
            self.expect("=")
            kwargs[key] = self.number()
            if self.peek() != ",":
                break
            self.expect(",")
        names = _BASE_PARAM_NAMES[cls]
        unknown = set(kwargs) - set(names)
        if unknown:
            self.error(f"unknown parameter {sorted(unknown)[0]!r}")
        missing = set(names) - set(kwargs)
        if missing:
            self.error(f"missing parameter {sorted(missing)[0]!r}")
        return cls(**kwargs)


def parse_kernel_spec(text):
    """Parse grammar text into a :class:`KernelSpec`.

    Raises :class:`GrammarError` (with a byte offset) on malformed input and
    surfaces parameter-domain violations from the node constructors.
    """
    parser = _Parser(text)
    node = parser.spec()
    parser.skip_ws()
    if parser.pos != len(text):
        parser.error("unexpected trailing text")
    return node


def _fmt(x):
    return f"{float(x):.17g}"


def render_kernel_spec(spec):
    """Canonical grammar text for a spec; parses back to an equal spec."""
    cls = type(spec)
    if cls in _FAMILY_NAMES:
        parts = ", ".join(f"{n}={_fmt(getattr(spec, n))}" for n in _BASE_PARAM_NAMES[cls])
        return f"{_FAMILY_NAMES[cls]}({parts})"
    if isinstance(spec, Sum):
        return "sum(" + ", ".join(render_kernel_spec(t) for t in spec.terms) + ")"
    if isinstance(spec, Product):
        return "product(" + ", ".join(render_kernel_spec(t) for t in spec.terms) + ")"
    if isinstance(spec, Scaled):
        return f"scaled({_fmt(spec.weight)}, {render_kernel_spec(spec.term)})"
    raise TypeError(f"not a kernel spec: {spec!r}")
