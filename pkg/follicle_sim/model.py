"""Model parameters, closures and the unit-square reformulation.

All closures are vectorized over numpy arrays and are pure functions of their
arguments and the parameter set. Scalars in give floats out.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from typing import Any, Dict, Mapping, Tuple

import numpy as np
from scipy.special import expit

from .errors import AssumptionViolated, ConfigError, OutOfDomain

DOMAIN_TOL = 1e-12


class Phase(IntEnum):
    EARLY_PROLIFERATION = 1
    LATE_PROLIFERATION = 2
    DIFFERENTIATION = 3


COMPONENT_TAGS = {Phase.EARLY_PROLIFERATION: "bar", Phase.LATE_PROLIFERATION: "hat", Phase.DIFFERENTIATION: "tilde"}
TAG_PHASES = {tag: phase for phase, tag in COMPONENT_TAGS.items()}


def _out(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True)
class ModelParams:
    """Scalar constants of the multiscale follicle model.

    ``tau_g`` and ``tau_h`` hold one entry per follicle. ``N`` is the number of
    cell cycles, ``n`` the number of follicles and ``T`` the horizon.
    """

    a1: float
    a2: float
    gamma_s: float
    gamma_m: float
    tau_g: Tuple[float, ...]
    tau_h: Tuple[float, ...]
    g1: float
    c1: float
    c2: float
    u_bar: float
    K_lambda: float
    gamma_bar: float
    U0: float
    Us: float
    c: float
    m: float
    b1: float
    b2: float
    b3: float
    N: int
    n: int
    T: float
    _tau_g: np.ndarray = field(init=False, repr=False, compare=False)
    _tau_h: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tau_g", tuple(float(v) for v in self.tau_g))
        object.__setattr__(self, "tau_h", tuple(float(v) for v in self.tau_h))
        problems = []
        if not self.a2 > self.a1 > 0:
            problems.append("a2 > a1 > 0")
        if not self.gamma_m > self.gamma_s > 0:
            problems.append("gamma_m > gamma_s > 0")
        if int(self.N) != self.N or self.N < 1:
            problems.append("N >= 1 (integer)")
        if int(self.n) != self.n or self.n < 1:
            problems.append("n >= 1 (integer)")
        if len(self.tau_g) != self.n or len(self.tau_h) != self.n:
            problems.append("tau_g and tau_h must have n entries")
        if any(v <= 0 for v in self.tau_g + self.tau_h):
            problems.append("tau_g, tau_h > 0")
        for name in ("g1", "c1", "c2", "u_bar", "K_lambda", "gamma_bar", "b3", "T"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} > 0")
        if self.U0 < 0 or not 0 <= self.Us <= 1 or self.c < 0 or self.b2 < 0:
            problems.append("U0 >= 0, 0 <= Us <= 1, c >= 0, b2 >= 0")
        if problems:
            raise ConfigError("invalid model parameters: " + "; ".join(problems))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "_tau_g", np.asarray(self.tau_g))
        object.__setattr__(self, "_tau_h", np.asarray(self.tau_h))

    @property
    def gamma_0(self) -> float:
        return self.gamma_m - self.gamma_s

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.init)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ModelParams":
        """Strictly build parameters from a mapping (unknown or missing keys are errors)."""
        expected = set(cls.field_names())
        unknown = sorted(set(data) - expected)
        missing = sorted(expected - set(data))
        if unknown or missing:
            raise ConfigError("parameter keys do not match ModelParams", unknown=unknown, missing=missing)
        values = {}
        for name in cls.field_names():
            value = data[name]
            if name in ("tau_g", "tau_h"):
                if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                    raise ConfigError(f"{name} must be an array of numbers")
            elif name in ("N", "n"):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"{name} must be an integer")
            elif not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name} must be a number")
            values[name] = value
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("_tau_g")
        data.pop("_tau_h")
        data["tau_g"] = list(self.tau_g)
        data["tau_h"] = list(self.tau_h)
        return data

    def with_changes(self, **changes) -> "ModelParams":
        return replace(self, **changes)


# --- controls -------------------------------------------------------------


def global_control_U(M, t, p: ModelParams):
    """Ovarian-scale control U = U0 + Us + (1 - Us) / (1 + exp(c (M - m)))."""
    M = np.asarray(M, dtype=float)
    return _out(p.U0 + p.Us + (1.0 - p.Us) * expit(-p.c * (M - p.m)))


def dU_dM(M, p: ModelParams):
    s = expit(-p.c * (np.asarray(M, dtype=float) - p.m))
    return _out(-(1.0 - p.Us) * p.c * s * (1.0 - s))


def local_gain(M_f, p: ModelParams):
    """Follicular gain b(M_f) = min(b1 + exp(b2 M_f) / b3, 1)."""
    return _out(np.minimum(p.b1 + np.exp(p.b2 * np.asarray(M_f, dtype=float)) / p.b3, 1.0))


def dgain_dMf(M_f, p: ModelParams):
    raw = p.b1 + np.exp(p.b2 * np.asarray(M_f, dtype=float)) / p.b3
    return _out(np.where(raw < 1.0, p.b2 * (raw - p.b1), 0.0))


def local_control_u(M_f, M, t, f: int, p: ModelParams):
    return _out(np.asarray(local_gain(M_f, p)) * np.asarray(global_control_U(M, t, p)))


# --- closures in original coordinates ---------------------------------------


def _saturation(u, p: ModelParams):
    return -np.expm1(-np.asarray(u, dtype=float) / p.u_bar)


def h_rate(gamma, u, f: int, p: ModelParams):
    gamma = np.asarray(gamma, dtype=float)
    return _out(p._tau_h[f] * (-gamma**2 + (p.c1 * gamma + p.c2) * _saturation(u, p)))


def dh_dgamma(gamma, u, f: int, p: ModelParams):
    return _out(p._tau_h[f] * (-2.0 * np.asarray(gamma, dtype=float) + p.c1 * _saturation(u, p)))


def dh_du(gamma, u, f: int, p: ModelParams):
    gamma = np.asarray(gamma, dtype=float)
    return _out(p._tau_h[f] * (p.c1 * gamma + p.c2) * np.exp(-np.asarray(u, dtype=float) / p.u_bar) / p.u_bar)


def gamma_plus(u, p: ModelParams):
    """Positive root of h_f(., u); h_f = tau_h (gamma_+ - gamma)(gamma - gamma_-)."""
    e = _saturation(u, p)
    return _out((p.c1 * e + np.sqrt(p.c1**2 * e**2 + 4.0 * p.c2 * e)) / 2.0)


def gamma_minus(u, p: ModelParams):
    e = _saturation(u, p)
    return _out((p.c1 * e - np.sqrt(p.c1**2 * e**2 + 4.0 * p.c2 * e)) / 2.0)


def loss_rate(gamma, U, p: ModelParams):
    gamma = np.asarray(gamma, dtype=float)
    return _out(p.K_lambda * np.exp(-(((gamma - p.gamma_s) / p.gamma_bar) ** 2)) * (1.0 - np.asarray(U, dtype=float)))


def dloss_dgamma(gamma, U, p: ModelParams):
    gamma = np.asarray(gamma, dtype=float)
    z = (gamma - p.gamma_s) / p.gamma_bar
    return _out(-2.0 * z / p.gamma_bar * p.K_lambda * np.exp(-(z**2)) * (1.0 - np.asarray(U, dtype=float)))


def dloss_dU(gamma, U, p: ModelParams):
    gamma = np.asarray(gamma, dtype=float)
    return _out(-p.K_lambda * np.exp(-(((gamma - p.gamma_s) / p.gamma_bar) ** 2)) * np.ones_like(np.asarray(U, dtype=float)))


# --- normalized velocities and losses ---------------------------------------


def velocity_gbar(u, f: int, p: ModelParams):
    return _out(p._tau_g[f] * (1.0 - p.g1 * (1.0 - np.asarray(u, dtype=float))) / p.a1)


def dgbar_du(u, f: int, p: ModelParams):
    return _out(p._tau_g[f] * p.g1 / p.a1 * np.ones_like(np.asarray(u, dtype=float)))


def velocity_ghat(f: int, p: ModelParams) -> float:
    return p.tau_g[f] / (p.a2 - p.a1)


def velocity_gtilde(f: int, p: ModelParams) -> float:
    return p.tau_g[f] / p.a2


def velocity_hbar(y, u, f: int, p: ModelParams, validate: bool = False):
    if validate:
        check_sign_hypotheses(u, f, p)
    return _out(np.asarray(h_rate(p.gamma_s * np.asarray(y, dtype=float), u, f, p)) / p.gamma_s)


def dhbar_dy(y, u, f: int, p: ModelParams):
    return dh_dgamma(p.gamma_s * np.asarray(y, dtype=float), u, f, p)


def dhbar_du(y, u, f: int, p: ModelParams):
    return _out(np.asarray(dh_du(p.gamma_s * np.asarray(y, dtype=float), u, f, p)) / p.gamma_s)


def velocity_htilde(y, u, f: int, p: ModelParams, validate: bool = False):
    if validate:
        check_sign_hypotheses(u, f, p)
    gamma = p.gamma_0 * np.asarray(y, dtype=float) + p.gamma_s
    return _out(np.asarray(h_rate(gamma, u, f, p)) / p.gamma_0)


def dhtilde_dy(y, u, f: int, p: ModelParams):
    return dh_dgamma(p.gamma_0 * np.asarray(y, dtype=float) + p.gamma_s, u, f, p)


def dhtilde_du(y, u, f: int, p: ModelParams):
    gamma = p.gamma_0 * np.asarray(y, dtype=float) + p.gamma_s
    return _out(np.asarray(dh_du(gamma, u, f, p)) / p.gamma_0)


def loss_lbar(y, U, p: ModelParams):
    return loss_rate(p.gamma_s * np.asarray(y, dtype=float), U, p)


def loss_ltilde(y, U, p: ModelParams):
    return loss_rate(p.gamma_0 * np.asarray(y, dtype=float) + p.gamma_s, U, p)


def check_sign_hypotheses(u, f: int, p: ModelParams, t=None) -> None:
    """Raise ``AssumptionViolated`` unless the well-posedness signs hold at every u.

    Requires gbar(u) > 0, hbar(., u) > 0 on [0, 1], htilde(0, u) > 0 and
    htilde(1, u) < 0, i.e. u > 0 and gamma_s < gamma_+(u) < gamma_m.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    times = None if t is None else np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=float)), u.shape)
    checks = (
        ("gbar(u) > 0", np.asarray(velocity_gbar(u, f, p)) > 0),
        ("hbar(0, u) > 0", np.asarray(velocity_hbar(0.0, u, f, p)) > 0),
        ("hbar(1, u) > 0", np.asarray(velocity_hbar(1.0, u, f, p)) > 0),
        ("htilde(0, u) > 0", np.asarray(velocity_htilde(0.0, u, f, p)) > 0),
        ("htilde(1, u) < 0", np.asarray(velocity_htilde(1.0, u, f, p)) < 0),
    )
    for label, ok in checks:
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise AssumptionViolated(
                f"sign hypothesis {label} fails",
                follicle=f,
                u=float(u[bad]),
                gamma_plus=float(gamma_plus(u[bad], p)),
                t=None if times is None else float(times[bad]),
            )


# --- unit-square reformulation ----------------------------------------------


def _phase_box(phase: int, k: int, p: ModelParams):
    offset = (k - 1) * p.a2
    if phase == Phase.EARLY_PROLIFERATION:
        return offset, p.a1, 0.0, p.gamma_s
    if phase == Phase.LATE_PROLIFERATION:
        return offset + p.a1, p.a2 - p.a1, 0.0, p.gamma_s
    if phase == Phase.DIFFERENTIATION:
        return offset, p.a2, p.gamma_s, p.gamma_0
    raise ValueError(f"unknown phase {phase}")


def _check_cycle(k: int, p: ModelParams) -> None:
    if not 1 <= k <= p.N:
        raise OutOfDomain("cycle index out of range", k=k, N=p.N)


def rescale_to_unit(a, gamma, phase: int, k: int, p: ModelParams):
    """Map (age, maturity) in the phase/cycle box to (x, y) in the unit square."""
    _check_cycle(k, p)
    a0, da, g0, dg = _phase_box(phase, k, p)
    x = (np.asarray(a, dtype=float) - a0) / da
    y = (np.asarray(gamma, dtype=float) - g0) / dg
    if np.any((x < -DOMAIN_TOL) | (x > 1 + DOMAIN_TOL) | (y < -DOMAIN_TOL) | (y > 1 + DOMAIN_TOL)):
        raise OutOfDomain("point outside the phase box", phase=int(phase), k=k)
    return _out(x), _out(y)


def rescale_from_unit(x, y, phase: int, k: int, p: ModelParams):
    _check_cycle(k, p)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x < -DOMAIN_TOL) | (x > 1 + DOMAIN_TOL) | (y < -DOMAIN_TOL) | (y > 1 + DOMAIN_TOL)):
        raise OutOfDomain("point outside the unit square", phase=int(phase), k=k)
    a0, da, g0, dg = _phase_box(phase, k, p)
    return _out(a0 + da * x), _out(g0 + dg * y)


def mass_weight(phase: int, p: ModelParams) -> float:
    """Area of the original-coordinate box per unit square (physical mass factor)."""
    _, da, _, dg = _phase_box(phase, 1, p)
    return da * dg


def maturity_weight(y, phase: int, p: ModelParams):
    """Integrand weight of the follicular maturity for a unit-square component."""
    y = np.asarray(y, dtype=float)
    if phase == Phase.EARLY_PROLIFERATION:
        return _out(p.a1 * p.gamma_s**2 * y)
    if phase == Phase.LATE_PROLIFERATION:
        return _out((p.a2 - p.a1) * p.gamma_s**2 * y)
    return _out(p.a2 * p.gamma_0 * (p.gamma_0 * y + p.gamma_s))
