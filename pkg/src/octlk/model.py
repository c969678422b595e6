"""Domain types shared by the forward model and the layer-by-layer solver.

Units: lengths in micrometres, wavenumbers in 1/um, angles in radians.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateGeometryError, DomainError, RegimeWarning

# Swept-source band of the reference instrument, 1282.86 nm to 1313.76 nm.
_LAMBDA_MIN_UM = 1.28286
_LAMBDA_MAX_UM = 1.31376

MAX_ANGLE = 0.1
REGIME_LIMIT = 0.05


@dataclass(frozen=True)
class SystemParams:
    """Laser and geometry constants of one OCT system."""

    k1: float
    k2: float
    a: float
    r0: float
    rho: float
    theta: float
    theta_omega: float
    delta0: float
    x_omega3: float
    n_samples: int

    def __post_init__(self):
        if not self.k1 < self.k2:
            raise DomainError(f"need k1 < k2, got {self.k1}, {self.k2}")
        if self.k1 <= 0:
            raise DomainError("wavenumbers must be positive")
        if self.a <= 0:
            raise DomainError("beam parameter a must be positive")
        if self.rho <= 0:
            raise DomainError("detector distance rho must be positive")
        if self.n_samples < 2:
            raise DomainError("need at least two spectral samples")
        for name in ("theta", "theta_omega"):
            value = getattr(self, name)
            if not 0.0 <= value <= MAX_ANGLE:
                raise DomainError(f"{name}={value} rad outside [0, {MAX_ANGLE}]")
        if self.psi0 < 0:
            raise DomainError(f"object position gives psi0={self.psi0:.6g} < 0")
        if self.half_bandwidth / self.k_bar > REGIME_LIMIT:
            warnings.warn(
                f"relative bandwidth {self.half_bandwidth / self.k_bar:.3g} exceeds "
                f"{REGIME_LIMIT}",
                RegimeWarning,
                stacklevel=3,
            )

    @classmethod
    def reference_instrument(cls, **overrides) -> SystemParams:
        """Reference instrument: 1498 samples, 15 um beam, 2.08 deg acceptance.

        The reference-arm offset and the object height are not stated directly;
        they are chosen so that the small-ratio table of the instrument
        ``(half_bandwidth * delta0)^-1 = 3.9e-3`` and
        ``k_bar * a / psi0 = 4.6e-3`` is reproduced.
        """
        k1 = 2 * math.pi / _LAMBDA_MAX_UM
        k2 = 2 * math.pi / _LAMBDA_MIN_UM
        half_bw = 0.5 * (k2 - k1)
        values = dict(
            k1=k1,
            k2=k2,
            a=(15.0 / 2) ** 2,
            r0=3800.0,
            rho=63000.0,
            theta=math.radians(2.08),
            theta_omega=math.radians(1.20),
            delta0=1.0 / (3.9e-3 * half_bw),
            x_omega3=3800.0,
            n_samples=1498,
        )
        values.update(overrides)
        return cls(**values)

    def with_(self, **changes) -> SystemParams:
        return replace(self, **changes)

    @property
    def k_bar(self) -> float:
        return 0.5 * (self.k1 + self.k2)

    @property
    def half_bandwidth(self) -> float:
        return 0.5 * (self.k2 - self.k1)

    @property
    def psi0(self) -> float:
        """Focus/object position term; signed."""
        return self.r0 - self.rho - 2 * math.cos(self.theta_omega) ** 2 * (
            self.x_omega3 - self.rho
        )

    @property
    def psi1(self) -> float:
        return math.sin(2 * self.theta_omega) * (self.x_omega3 - self.rho)

    @property
    def gamma(self) -> float:
        return self.a * math.sin(self.theta) ** 2

    @property
    def xi(self) -> float:
        return 0.5 * self.psi0 * math.sin(self.theta) ** 2

    @property
    def beam_width(self) -> float:
        return 2 * math.sqrt(self.a)

    def k_grid(self) -> np.ndarray:
        return np.linspace(self.k1, self.k2, self.n_samples)


def derive_small_quantities(params: SystemParams) -> dict[str, float]:
    """Dimensionless ratios that must stay small for the asymptotic model.

    Emits a :class:`RegimeWarning` for each ratio above 0.05.
    """
    psi0 = abs(params.psi0)
    if psi0 == 0 or params.delta0 == 0:
        raise DegenerateGeometryError("psi0 and delta0 must be nonzero")
    lk = params.half_bandwidth
    table = {
        "lk_sqrt_gamma": lk * math.sqrt(params.gamma),
        "lk_over_kbar": lk / params.k_bar,
        "kbar_a_over_psi0": params.k_bar * params.a / psi0,
        "inv_lk_delta0": 1.0 / (lk * abs(params.delta0)),
        "theta_sq": params.theta**2,
        "theta_omega_sq": params.theta_omega**2,
    }
    for name, value in table.items():
        if value > REGIME_LIMIT:
            warnings.warn(f"{name}={value:.3g} above {REGIME_LIMIT}", RegimeWarning, stacklevel=2)
    return table


@dataclass(frozen=True)
class LayeredSample:
    """Stack of homogeneous layers ``(n_j, d_j)`` embedded in an ambient medium."""

    layers: tuple[tuple[float, float], ...]
    ambient_index: float = 1.0
    check_contrast: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple((float(n), float(d)) for n, d in self.layers)
        object.__setattr__(self, "layers", layers)
        if self.ambient_index < 1:
            raise DomainError("ambient index must be >= 1")
        for j, (n, d) in enumerate(layers, start=1):
            if n < 1:
                raise DomainError(f"layer {j}: index {n} < 1")
            if not d > 0:
                raise DomainError(f"layer {j}: width must be positive, got {d}")
        if self.check_contrast and layers:
            idx = self.indices
            for j in range(1, len(idx)):
                if idx[j] == idx[j - 1]:
                    raise DomainError(f"interface {j} has no index contrast")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_interfaces(self) -> int:
        return len(self.layers) + 1 if self.layers else 0

    @property
    def indices(self) -> tuple[float, ...]:
        """``(n_0, n_1, ..., n_J, n_{J+1})`` with ambient on both ends."""
        inner = tuple(n for n, _ in self.layers)
        return (self.ambient_index, *inner, self.ambient_index)

    @property
    def widths(self) -> tuple[float, ...]:
        return tuple(d for _, d in self.layers)

    def normal_reflections(self) -> np.ndarray:
        idx = np.asarray(self.indices)
        return (idx[:-1] - idx[1:]) / (idx[:-1] + idx[1:])


@dataclass(frozen=True)
class AScanSpectrum:
    """Interferogram samples on a uniform wavenumber grid."""

    k_grid: np.ndarray
    values: np.ndarray
    q0: float | None = None

    def __post_init__(self):
        k = np.asarray(self.k_grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise DomainError("spectrum needs a 1-d grid of at least two samples")
        if v.shape != k.shape:
            raise DomainError(f"values shape {v.shape} does not match grid {k.shape}")
        steps = np.diff(k)
        if np.any(steps <= 0):
            raise DomainError("wavenumber grid must be strictly increasing")
        if np.max(np.abs(steps - steps.mean())) > 1e-12 * np.max(np.abs(k)):
            raise DomainError("wavenumber grid is not uniform")
        if not np.all(np.isfinite(v)):
            raise DomainError("spectrum contains non-finite values")
        if self.q0 is not None and not self.q0 > 0:
            raise DomainError("q0 must be positive")
        object.__setattr__(self, "k_grid", k)
        object.__setattr__(self, "values", v)

    @property
    def dk(self) -> float:
        return (self.k_grid[-1] - self.k_grid[0]) / (self.k_grid.size - 1)

    def __len__(self):
        return self.k_grid.size


@dataclass(frozen=True)
class DepthProfile:
    """Band-limited Fourier transform of a spectrum on an optical-distance grid."""

    z_grid: np.ndarray
    values: np.ndarray
    k_bar: float | None = None
    half_bandwidth: float | None = None

    def __post_init__(self):
        z = np.asarray(self.z_grid, dtype=float)
        v = np.asarray(self.values, dtype=complex)
        if z.shape != v.shape or z.ndim != 1:
            raise DomainError("z grid and values must be matching 1-d arrays")
        if z.size > 1 and np.any(np.diff(z) <= 0):
            raise DomainError("z grid must be strictly increasing")
        object.__setattr__(self, "z_grid", z)
        object.__setattr__(self, "values", v)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def dz(self) -> float:
        return float(self.z_grid[1] - self.z_grid[0])


@dataclass(frozen=True)
class InterfaceRecord:
    """Running quantities of interface ``j`` (1-based)."""

    j: int
    delta: float
    psi0: float
    xi: float
    transmission: float
    n: float | None = None
    d_prev: float | None = None
    window: tuple[float, float] | None = None
    z_points: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class LayerLedger:
    ambient_index: float
    sin2_theta: float
    records: tuple[InterfaceRecord, ...]

    @classmethod
    def start(cls, params: SystemParams, ambient_index: float = 1.0, delta0=None) -> LayerLedger:
        """Ledger holding interface 1, whose values are the system parameters."""
        s2 = math.sin(params.theta) ** 2
        delta = params.delta0 if delta0 is None else float(delta0)
        first = InterfaceRecord(j=1, delta=delta, psi0=params.psi0, xi=0.5 * params.psi0 * s2,
                                transmission=1.0)
        return cls(ambient_index=ambient_index, sin2_theta=s2, records=(first,))

    @property
    def current(self) -> InterfaceRecord:
        return self.records[-1]

    def record(self, j: int) -> InterfaceRecord:
        return self.records[j - 1]

    def __len__(self):
        return len(self.records)

    def indices(self) -> list[float]:
        """``n_0`` followed by every index recovered so far."""
        out = [self.ambient_index]
        out.extend(r.n for r in self.records if r.n is not None)
        return out

    def widths(self) -> list[float]:
        return [r.d_prev for r in self.records[1:]]

    def update_current(self, **changes) -> LayerLedger:
        return replace(self, records=self.records[:-1] + (replace(self.current, **changes),))


def ledger_advance(ledger: LayerLedger, n_j: float, d_j: float) -> LayerLedger:
    """Close interface ``j`` with index ``n_j`` and append interface ``j + 1``.

    ``d_j`` is the width of layer ``j`` lying between the two interfaces.
    """
    if not d_j > 0:
        raise DomainError(f"layer width must be positive, got {d_j}")
    if n_j < 1:
        raise DomainError(f"refractive index must be >= 1, got {n_j}")
    cur = ledger.current
    n_prev = ledger.records[-2].n if len(ledger) > 1 else ledger.ambient_index
    r_j = (n_prev - n_j) / (n_prev + n_j)
    psi0 = cur.psi0 + 2 * d_j * ledger.ambient_index / n_j
    nxt = InterfaceRecord(
        j=cur.j + 1,
        delta=cur.delta + 2 * n_j * d_j,
        psi0=psi0,
        xi=0.5 * psi0 * ledger.sin2_theta,
        transmission=cur.transmission * (1 - r_j**2),
        d_prev=float(d_j),
    )
    closed = replace(cur, n=float(n_j))
    return replace(ledger, records=ledger.records[:-1] + (closed, nxt))


@dataclass
class StepReport:
    """Outcome of one reconstruction step."""

    j: int
    n: float
    d_prev: float | None
    r_dagger: float
    residual: float
    z_peak: float


@dataclass
class ReconstructionResult:
    layers: list[tuple[float, float | None]]
    q0: float
    residuals: list[float]
    signs: list[int]
    ledger: LayerLedger | None = None
    steps: list[StepReport] = field(default_factory=list)
    complete: bool = True
    message: str = ""
    fit_residual: float | None = None

    @property
    def indices(self) -> list[float]:
        return [n for n, _ in self.layers]

    @property
    def widths(self) -> list[float]:
        return [d for _, d in self.layers[1:]]
