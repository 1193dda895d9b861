"""Initial-data families on the unit square.

Closed-form families can be evaluated at arbitrary points, so the
characteristics path never interpolates data. ``GridDensity`` only appears
when a long march re-anchors on a resampled grid.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erf

from .errors import ConfigError
from .model import COMPONENT_TAGS, TAG_PHASES, ModelParams, Phase

logger = logging.getLogger(__name__)

ComponentKey = Tuple[int, int, int]  # (follicle, phase, cycle)


class Density(ABC):
    """Nonnegative scalar field on [0, 1]^2."""

    @abstractmethod
    def __call__(self, x, y) -> np.ndarray:
        pass

    @abstractmethod
    def sup_norm(self) -> float:
        """Upper bound of the L-infinity norm (exact for single families)."""

    @abstractmethod
    def l1_norm(self) -> float:
        pass

    def scaled(self, factor: float) -> "Density":
        return ScaledDensity(self, factor)


class ZeroDensity(Density):
    def __call__(self, x, y):
        return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)

    def sup_norm(self):
        return 0.0

    def l1_norm(self):
        return 0.0


def _clip_interval(lo: float, hi: float) -> Tuple[float, float]:
    return max(lo, 0.0), min(hi, 1.0)


class GaussianDensity(Density):
    def __init__(self, amplitude: float, center, width):
        self.amplitude = float(amplitude)
        self.cx, self.cy = (float(v) for v in center)
        self.sx, self.sy = (float(v) for v in width)
        if self.sx <= 0 or self.sy <= 0:
            raise ConfigError("gaussian widths must be positive")

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.amplitude * np.exp(-0.5 * ((x - self.cx) / self.sx) ** 2 - 0.5 * ((y - self.cy) / self.sy) ** 2)

    def sup_norm(self):
        return float(self(np.clip(self.cx, 0, 1), np.clip(self.cy, 0, 1)))

    @staticmethod
    def _axis_integral(c: float, s: float) -> float:
        scale = s * np.sqrt(2.0)
        return float(s * np.sqrt(np.pi / 2.0) * (erf((1.0 - c) / scale) - erf(-c / scale)))

    def l1_norm(self):
        return self.amplitude * self._axis_integral(self.cx, self.sx) * self._axis_integral(self.cy, self.sy)


def _bump(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, (1.0 - s**2) ** 3, 0.0)


class BumpDensity(Density):
    """Tensor product of compactly supported C^2 bumps (1 - s^2)^3."""

    def __init__(self, amplitude: float, center, radius):
        self.amplitude = float(amplitude)
        self.cx, self.cy = (float(v) for v in center)
        self.rx, self.ry = (float(v) for v in radius)
        if self.rx <= 0 or self.ry <= 0:
            raise ConfigError("bump radii must be positive")

    def __call__(self, x, y):
        return self.amplitude * _bump((np.asarray(x, dtype=float) - self.cx) / self.rx) * _bump((np.asarray(y, dtype=float) - self.cy) / self.ry)

    def sup_norm(self):
        return float(self(np.clip(self.cx, 0, 1), np.clip(self.cy, 0, 1)))

    @staticmethod
    def _axis_integral(c: float, r: float) -> float:
        lo, hi = _clip_interval(c - r, c + r)
        if hi <= lo:
            return 0.0
        nodes, weights = np.polynomial.legendre.leggauss(8)
        s = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        return float(0.5 * (hi - lo) * np.sum(weights * _bump((s - c) / r)))

    def l1_norm(self):
        return self.amplitude * self._axis_integral(self.cx, self.rx) * self._axis_integral(self.cy, self.ry)


class IndicatorDensity(Density):
    def __init__(self, amplitude: float, box):
        self.amplitude = float(amplitude)
        self.x0, self.x1, self.y0, self.y1 = (float(v) for v in box)
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ConfigError("indicator box must have positive extent", box=list(box))

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)
        return np.where(inside, self.amplitude, 0.0)

    def sup_norm(self):
        return self.amplitude if self.l1_norm() > 0 else 0.0

    def l1_norm(self):
        xl, xh = _clip_interval(self.x0, self.x1)
        yl, yh = _clip_interval(self.y0, self.y1)
        return self.amplitude * max(xh - xl, 0.0) * max(yh - yl, 0.0)


class PolynomialDensity(Density):
    """amplitude * px(x) * py(y) on a box, zero outside (coefficients in increasing degree)."""

    def __init__(self, amplitude: float, box, coeffs_x, coeffs_y):
        self.amplitude = float(amplitude)
        self.x0, self.x1, self.y0, self.y1 = (float(v) for v in box)
        self.cx = np.asarray(coeffs_x, dtype=float)
        self.cy = np.asarray(coeffs_y, dtype=float)
        grid_x = np.linspace(self.x0, self.x1, 257)
        grid_y = np.linspace(self.y0, self.y1, 257)
        values = self.amplitude * np.outer(P.polyval(grid_x, self.cx), P.polyval(grid_y, self.cy))
        if np.min(values) < 0:
            raise ConfigError("polynomial initial datum must be nonnegative")
        self._sup = float(np.max(np.abs(values)))

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)
        return np.where(inside, self.amplitude * P.polyval(x, self.cx) * P.polyval(y, self.cy), 0.0)

    def sup_norm(self):
        return self._sup

    def l1_norm(self):
        xl, xh = _clip_interval(self.x0, self.x1)
        yl, yh = _clip_interval(self.y0, self.y1)
        if xh <= xl or yh <= yl:
            return 0.0
        ix = P.polyint(self.cx)
        iy = P.polyint(self.cy)
        return self.amplitude * float((P.polyval(xh, ix) - P.polyval(xl, ix)) * (P.polyval(yh, iy) - P.polyval(yl, iy)))


class ScaledDensity(Density):
    def __init__(self, base: Density, factor: float):
        self.base = base
        self.factor = float(factor)

    def __call__(self, x, y):
        return self.factor * self.base(x, y)

    def sup_norm(self):
        return abs(self.factor) * self.base.sup_norm()

    def l1_norm(self):
        return abs(self.factor) * self.base.l1_norm()


class SumDensity(Density):
    def __init__(self, parts: Iterable[Density]):
        self.parts = list(parts)

    def __call__(self, x, y):
        total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        for part in self.parts:
            total = total + part(x, y)
        return total

    def sup_norm(self):
        return float(sum(part.sup_norm() for part in self.parts))

    def l1_norm(self):
        return float(sum(part.l1_norm() for part in self.parts))


class GridDensity(Density):
    """Cell-center samples with bilinear interpolation (used after re-anchoring)."""

    def __init__(self, values: np.ndarray):
        values = np.maximum(np.asarray(values, dtype=float), 0.0)
        nx, ny = values.shape
        self.values = values
        xc = (np.arange(nx) + 0.5) / nx
        yc = (np.arange(ny) + 0.5) / ny
        self._interp = RegularGridInterpolator((xc, yc), values, method="linear", bounds_error=False, fill_value=None)

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        points = np.stack([x.ravel(), y.ravel()], axis=-1)
        return np.maximum(self._interp(points), 0.0).reshape(x.shape)

    def sup_norm(self):
        return float(np.max(self.values)) if self.values.size else 0.0

    def l1_norm(self):
        return float(np.mean(self.values))


def build_density(spec: Mapping[str, Any]) -> Density:
    family = spec.get("family")
    amplitude = spec.get("amplitude", 1.0)
    if amplitude < 0:
        raise ConfigError("initial data must be nonnegative", amplitude=amplitude)
    try:
        if family == "gaussian":
            return GaussianDensity(amplitude, spec["center"], spec["width"])
        if family == "bump":
            return BumpDensity(amplitude, spec["center"], spec["radius"])
        if family == "indicator":
            return IndicatorDensity(amplitude, spec["box"])
        if family == "polynomial":
            return PolynomialDensity(amplitude, spec["box"], spec["coeffs_x"], spec["coeffs_y"])
    except KeyError as exc:
        raise ConfigError(f"initial-data spec is missing {exc.args[0]!r}", family=family) from exc
    raise ConfigError("unknown initial-data family", family=family)


SPEC_KEYS = {
    "gaussian": {"center", "width"},
    "bump": {"center", "radius"},
    "indicator": {"box"},
    "polynomial": {"box", "coeffs_x", "coeffs_y"},
}


class InitialData:
    """Initial (or re-anchored) densities per (follicle, phase, cycle).

    Follicles are 0-based internally; cycles are 1..N. ``t_anchor`` is the time
    the data is attached to (0 for genuine initial data).
    """

    def __init__(self, params: ModelParams, components: Optional[Dict[ComponentKey, Density]] = None, t_anchor: float = 0.0):
        self.params = params
        self.components: Dict[ComponentKey, Density] = dict(components or {})
        self.t_anchor = float(t_anchor)
        for f, phase, k in self.components:
            if not (0 <= f < params.n and phase in (1, 2, 3) and 1 <= k <= params.N):
                raise ConfigError("initial-data component out of range", follicle=f + 1, phase=phase, cycle=k)

    @classmethod
    def zero(cls, params: ModelParams) -> "InitialData":
        return cls(params)

    @classmethod
    def from_specs(cls, specs: List[Mapping[str, Any]], params: ModelParams) -> "InitialData":
        grouped: Dict[ComponentKey, List[Density]] = {}
        for spec in specs:
            family = spec.get("family")
            allowed = {"follicle", "component", "cycle", "family", "amplitude"} | SPEC_KEYS.get(family, set())
            unknown = sorted(set(spec) - allowed)
            if unknown:
                raise ConfigError("unknown keys in initial-data spec", unknown=unknown)
            tag = spec.get("component")
            if tag not in TAG_PHASES:
                raise ConfigError("component must be one of bar, hat, tilde", component=tag)
            key = (int(spec.get("follicle", 1)) - 1, int(TAG_PHASES[tag]), int(spec.get("cycle", 1)))
            grouped.setdefault(key, []).append(build_density(spec))
        components = {key: parts[0] if len(parts) == 1 else SumDensity(parts) for key, parts in grouped.items()}
        return cls(params, components)

    def component(self, f: int, phase: int, k: int) -> Density:
        return self.components.get((f, int(phase), k), ZeroDensity())

    def keys(self) -> List[ComponentKey]:
        p = self.params
        return [(f, phase, k) for f in range(p.n) for phase in (1, 2, 3) for k in range(1, p.N + 1)]

    @property
    def is_zero(self) -> bool:
        return all(d.sup_norm() == 0.0 for d in self.components.values())

    def l1_norm(self, f: int, phase: int, k: int) -> float:
        return self.component(f, phase, k).l1_norm()

    def sup_norm(self, f: int, phase: int, k: int) -> float:
        return self.component(f, phase, k).sup_norm()

    def combine(self, alpha: float, other: "InitialData", beta: float) -> "InitialData":
        """alpha * self + beta * other, component by component."""
        keys = set(self.components) | set(other.components)
        combined = {key: SumDensity([self.components.get(key, ZeroDensity()).scaled(alpha), other.components.get(key, ZeroDensity()).scaled(beta)]) for key in keys}
        return InitialData(self.params, combined, self.t_anchor)

    def describe(self) -> Dict[str, Dict[str, float]]:
        summary = {}
        for (f, phase, k), density in sorted(self.components.items()):
            name = f"{COMPONENT_TAGS[Phase(phase)]}_{k}@follicle{f + 1}"
            summary[name] = {"l1": density.l1_norm(), "sup": density.sup_norm()}
        return summary
