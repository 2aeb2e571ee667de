"""Two-level diabatic potentials.

A :class:`DiabaticModel` bundles the two diabatic surfaces, their analytic
derivatives, the constant off-diagonal coupling ``delta`` and the
semiclassical parameter ``eps``.  All evaluators are vectorized over a
leading batch axis: positions have shape ``(..., d)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DiabaticModel",
    "SpinBosonParams",
    "InvalidParameterError",
    "make_spin_boson",
    "make_cubic_perturbed",
    "adiabatic_gap",
    "diabatic_matrix",
    "finite_difference_gradient",
    "finite_difference_hessian",
    "register_model",
    "get_model",
    "list_models",
    "model_factory",
]


class InvalidParameterError(ValueError):
    """Raised for non-physical model parameters."""


def finite_difference_gradient(f: Callable, x: np.ndarray) -> np.ndarray:
    """Centered-difference gradient with step ``1e-5 * max(1, |x|)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = 1e-5 * np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    grad = np.empty_like(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        grad[..., i] = (f(x + h * e) - f(x - h * e)) / (2.0 * h[..., 0])
    return grad


def finite_difference_hessian(grad: Callable, x: np.ndarray) -> np.ndarray:
    """Centered differences of a gradient evaluator, symmetrized."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    h = 1e-5 * np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    hess = np.empty(x.shape + (d,))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        hess[..., i, :] = (grad(x + h * e) - grad(x - h * e)) / (2.0 * h)
    return 0.5 * (hess + np.swapaxes(hess, -1, -2))


@dataclass(frozen=True)
class DiabaticModel:
    """Diabatic two-level model ``[[V0, delta], [delta, V1]]``.

    ``potentials`` holds ``(V0, V1)``; each maps ``(..., d) -> (...)``.
    Gradients and Hessians default to finite differences when omitted,
    which is meant for prototyping only.
    """

    dim: int
    eps: float
    delta: float
    potentials: tuple
    gradients: Optional[tuple] = None
    hessians: Optional[tuple] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidParameterError(f"dimension must be >= 1, got {self.dim}")
        if not self.eps > 0:
            raise InvalidParameterError(f"eps must be positive, got {self.eps}")
        if not self.delta > 0:
            raise InvalidParameterError(f"delta must be positive, got {self.delta}")
        if len(self.potentials) != 2:
            raise InvalidParameterError("exactly two diabatic surfaces are required")

    # -- surface evaluators -------------------------------------------------
    def V(self, surface: int, x) -> np.ndarray:
        return self.potentials[surface](np.asarray(x, dtype=float))

    def grad(self, surface: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.gradients is None:
            return finite_difference_gradient(self.potentials[surface], x)
        return self.gradients[surface](x)

    def hess(self, surface: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hessians is None:
            return finite_difference_hessian(lambda y: self.grad(surface, y), x)
        return self.hessians[surface](x)

    def mean_potential(self, x) -> np.ndarray:
        return 0.5 * (self.V(0, x) + self.V(1, x))

    def with_delta(self, delta: float) -> "DiabaticModel":
        return dataclasses.replace(self, delta=float(delta))

    def with_eps(self, eps: float) -> "DiabaticModel":
        return dataclasses.replace(self, eps=float(eps))


@dataclass(frozen=True)
class SpinBosonParams:
    omega: float
    c: np.ndarray

    def __post_init__(self):
        if not self.omega > 0:
            raise InvalidParameterError(f"omega must be positive, got {self.omega}")
        if not np.linalg.norm(self.c) > 0:
            raise InvalidParameterError("coupling vector c must be nonzero")


# Module-level surface classes keep spin-boson models picklable for workers.
class _Harmonic:
    def __init__(self, omega, c, sign):
        self.omega2 = float(omega) ** 2
        self.c = np.asarray(c, dtype=float)
        self.sign = sign

    def value(self, x):
        return 0.5 * self.omega2 * np.sum(x * x, axis=-1) + self.sign * (x @ self.c)

    def gradient(self, x):
        return self.omega2 * x + self.sign * self.c

    def hessian(self, x):
        d = x.shape[-1]
        return np.broadcast_to(self.omega2 * np.eye(d), x.shape + (d,)).copy()


class _CubicPerturbed(_Harmonic):
    def __init__(self, omega, c, sign, cubic):
        super().__init__(omega, c, sign)
        self.cubic = float(cubic)

    def value(self, x):
        return super().value(x) + self.cubic * np.sum(x ** 3, axis=-1)

    def gradient(self, x):
        return super().gradient(x) + 3.0 * self.cubic * x ** 2

    def hessian(self, x):
        h = super().hessian(x)
        idx = np.arange(x.shape[-1])
        h[..., idx, idx] += 6.0 * self.cubic * x
        return h


def make_spin_boson(omega: float, c, delta: float, eps: float, d: Optional[int] = None) -> DiabaticModel:
    """Spin-boson surfaces ``V0,1 = omega^2 |x|^2 / 2 +- c.x``.

    ``c`` may be a scalar (broadcast over ``d`` dimensions) or a vector.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if d is None:
        d = c.size
    if c.size == 1 and d > 1:
        c = np.full(d, c[0])
    if c.size != d:
        raise InvalidParameterError(f"c has {c.size} entries for dimension {d}")
    params = SpinBosonParams(float(omega), c)
    s0, s1 = _Harmonic(omega, c, +1.0), _Harmonic(omega, c, -1.0)
    return DiabaticModel(
        dim=int(d),
        eps=float(eps),
        delta=float(delta),
        potentials=(s0.value, s1.value),
        gradients=(s0.gradient, s1.gradient),
        hessians=(s0.hessian, s1.hessian),
        name="spin_boson",
        params={"omega": params.omega, "c": params.c.tolist()},
    )


def make_cubic_perturbed(omega: float = 1.0, c=1.0, cubic: float = 0.1,
                         delta: float = 1e-3, eps: float = 0.05) -> DiabaticModel:
    """One-dimensional spin-boson with ``cubic * x^3`` added to surface 0."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    s0 = _CubicPerturbed(omega, c, +1.0, cubic)
    s1 = _Harmonic(omega, c, -1.0)
    return DiabaticModel(
        dim=c.size,
        eps=float(eps),
        delta=float(delta),
        potentials=(s0.value, s1.value),
        gradients=(s0.gradient, s1.gradient),
        hessians=(s0.hessian, s1.hessian),
        name="cubic_perturbed",
        params={"omega": float(omega), "c": c.tolist(), "cubic": float(cubic)},
    )


def diabatic_matrix(model: DiabaticModel, x) -> np.ndarray:
    """The real symmetric 2x2 potential matrix at ``x`` (shape ``(..., 2, 2)``)."""
    x = np.asarray(x, dtype=float)
    v0, v1 = model.V(0, x), model.V(1, x)
    out = np.empty(np.shape(v0) + (2, 2))
    out[..., 0, 0] = v0
    out[..., 1, 1] = v1
    out[..., 0, 1] = model.delta
    out[..., 1, 0] = model.delta
    return out


def adiabatic_gap(model: DiabaticModel, x) -> np.ndarray:
    """Difference of the adiabatic surfaces, ``sqrt((V0 - V1)^2 + 4 delta^2)``."""
    x = np.asarray(x, dtype=float)
    diff = model.V(0, x) - model.V(1, x)
    return np.sqrt(diff * diff + 4.0 * model.delta ** 2)


# -- registry ----------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., DiabaticModel]] = {}


def register_model(name: str, factory: Callable[..., DiabaticModel]) -> None:
    """Make ``factory(**params)`` available to the CLI under ``name``."""
    _REGISTRY[name] = factory


def get_model(name: str, **params) -> DiabaticModel:
    return model_factory(name)(**params)


def model_factory(name: str) -> Callable[..., DiabaticModel]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None


def list_models() -> list[str]:
    return sorted(_REGISTRY)


register_model("spin_boson", make_spin_boson)
register_model("cubic_perturbed", make_cubic_perturbed)
