"""Layer-by-layer reconstruction of refractive indices and widths.

Step ``j`` compares windowed data ``y_m = |F(C)(z_m)|^2`` with the model
``q0 |Lambda_m + F(I_j)(z_m)|^2`` where ``Lambda`` is the transform of the
interfaces already recovered.  With the reflection coefficient frozen at
normal incidence the model becomes ``q0 |Lambda_m + r Gamma*_m|^2`` and the
misfit is a quartic in ``r``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize, minimize_scalar

from .errors import (
    AccuracyWarning,
    AmbiguousSignError,
    DegenerateWindowError,
    DomainError,
    GridMismatchError,
    NoContrastError,
    NoLayerError,
    NoSignalError,
    OctlkError,
    ReconstructionError,
)
from .forward import (
    AngularQuadrature,
    _chain_cosines,
    _phase_rows,
    fresnel_reflection,
    interface_terms,
    normal_reflection,
    phasor,
    prefactor,
    stack_contribution,
    quadrature_for,
)
from .model import (
    AScanSpectrum,
    DepthProfile,
    LayerLedger,
    ReconstructionResult,
    StepReport,
    SystemParams,
    ledger_advance,
)
from .specfft import (
    band_limited_transform,
    detect_peaks,
    refine_peak,
    select_window,
    transform_matrix,
)


class InterfaceModel:
    """Spectrum of interface ``j`` as a function of the unknowns ``(n_j, d_{j-1})``.

    ``indices`` holds ``n_0 .. n_{j-1}`` and ``widths`` holds ``d_1 .. d_{j-2}``.
    Everything that does not depend on the unknowns is evaluated once.
    """

    def __init__(self, params: SystemParams, indices: Sequence[float], widths: Sequence[float],
                 j: int, quad: AngularQuadrature | None = None, delta0: float | None = None):
        if j < 1 or len(indices) < j or len(widths) < j - 2:
            raise DomainError(f"stack does not reach interface {j}")
        self.params = params
        self.j = j
        self.indices = [float(n) for n in indices[:j]]
        self.widths = [float(d) for d in widths[:max(j - 2, 0)]]
        self.delta0 = params.delta0 if delta0 is None else float(delta0)
        self.quad = quad or quadrature_for(params)
        q = self.quad
        self.k = params.k_grid()
        cosines = _chain_cosines(self.indices, q.cos_incidence, j - 1)
        trans = np.ones(q.size)
        path = np.zeros(q.size)
        for l in range(1, j):
            r_l = fresnel_reflection(self.indices[l - 1], self.indices[l], cosines[l - 1])
            trans = trans * (1 - r_l**2)
        for l in range(1, j - 1):
            path = path + 2 * self.indices[l] * self.widths[l - 1] * cosines[l]
        self.cos_last = cosines[j - 1]
        self.n_last = self.indices[j - 1]
        geom = -0.5 * q.s * params.psi0 + q.kt[:, 0] * params.psi1 + path
        k = self.k
        self._base = np.exp(-np.outer(k**2, q.s) * params.a + 1j * np.outer(k, geom)) * (
            q.weights * trans)
        self._pref = prefactor(k, params)

    def _matrix(self, d):
        if self.j == 1:
            return self._base
        if d is None or not d > 0:
            raise DomainError(f"interface {self.j} needs a positive width, got {d}")
        return self._base * _phase_rows(self.k, 2 * self.n_last * d * self.cos_last)

    def reflection(self, n):
        return fresnel_reflection(self.n_last, n, self.cos_last)

    def _to_spectrum(self, ph, delta0):
        d0 = self.delta0 if delta0 is None else delta0
        rot = np.exp(1j * self.k * d0)
        if ph.ndim == 2:
            rot = rot[:, None]
            return self._pref[:, None] * np.imag(ph * rot)
        return self._pref * np.imag(ph * rot)

    def spectrum(self, d: float | None = None, n: float | None = None,
                 delta0: float | None = None) -> np.ndarray:
        """Full contribution for index ``n``; unit-coefficient contribution if ``n`` is None."""
        mat = self._matrix(d)
        ph = mat.sum(axis=1) if n is None else mat @ self.reflection(n)
        return self._to_spectrum(ph, delta0)

    def spectra(self, d: float | None, ns: Sequence[float]) -> np.ndarray:
        """Full contributions for several indices at once, shape ``(n_k, len(ns))``."""
        mat = self._matrix(d)
        refl = np.stack([self.reflection(n) for n in ns], axis=1)
        return self._to_spectrum(mat @ refl, None)

    def phasor(self, d: float | None = None) -> np.ndarray:
        return self._matrix(d).sum(axis=1)


@dataclass
class StepData:
    """Everything step ``j`` needs at one candidate width ``d``."""

    j: int
    z: np.ndarray
    y: np.ndarray
    Lambda: np.ndarray
    gamma_star: np.ndarray
    ledger: LayerLedger
    d: float | None = None
    q0: float = 1.0
    model: InterfaceModel | None = field(default=None, repr=False)
    transform: np.ndarray | None = field(default=None, repr=False)
    profile: DepthProfile | None = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.z).size
        for name in ("y", "Lambda", "gamma_star"):
            if np.asarray(getattr(self, name)).shape != (m,):
                raise DomainError(f"{name} must have length {m}")
        if np.any(np.asarray(self.y) < 0):
            raise DomainError("data values must be nonnegative")

    @property
    def n_prev(self) -> float:
        return self.ledger.indices()[self.j - 1]

    def r_dagger(self, n: float) -> float:
        return normal_reflection(self.n_prev, n)

    def index_for(self, r: float) -> float:
        return self.n_prev * (1 - r) / (1 + r)


class StepBuilder:
    """Callable ``d -> StepData`` for a fixed window and fixed earlier layers."""

    def __init__(self, model: InterfaceModel, z: np.ndarray, data: np.ndarray,
                 prior_spectrum: np.ndarray | None, ledger: LayerLedger, q0: float = 1.0,
                 profile: DepthProfile | None = None, y: np.ndarray | None = None):
        self.model = model
        self.z = np.asarray(z, dtype=float)
        self.T = transform_matrix(model.k, self.z)
        self.y = np.abs(self.T @ data) ** 2 if y is None else np.asarray(y, dtype=float)
        self.Lambda = (np.zeros(self.z.size, complex) if prior_spectrum is None
                       else self.T @ prior_spectrum)
        self.ledger = ledger
        self.q0 = q0
        self.profile = profile
        self._gamma_cache: dict = {}

    def gamma_star(self, d=None) -> np.ndarray:
        key = None if d is None else float(d)
        g = self._gamma_cache.get(key)
        if g is None:
            if len(self._gamma_cache) > 4096:
                self._gamma_cache.clear()
            g = self._gamma_cache[key] = self.T @ self.model.spectrum(d)
        return g

    def __call__(self, d: float | None = None) -> StepData:
        j = self.model.j
        ledger = self.ledger
        if j > 1:
            ledger = ledger_advance(ledger, self.model.n_last, d)
        ledger = ledger.update_current(window=(float(self.z[0]), float(self.z[-1])),
                                       z_points=self.z)
        return StepData(j=j, z=self.z, y=self.y, Lambda=self.Lambda,
                        gamma_star=self.gamma_star(d), ledger=ledger, d=d, q0=self.q0,
                        model=self.model, transform=self.T, profile=self.profile)


def _check_admissible(step: StepData, n: float, d):
    if n < 1:
        raise DomainError(f"index {n} below 1")
    if n == step.n_prev:
        raise DomainError("index equals the previous layer")
    if step.j > 1 and (d is None or not d > 0):
        raise DomainError(f"width must be positive, got {d}")


def functional_full(step: StepData, n: float, d: float | None = None) -> float:
    """``sum (q0 |Lambda + F(I_j[n, d])|^2 - y)^2`` with direction-dependent reflection."""
    d = step.d if d is None else d
    _check_admissible(step, n, d)
    if step.model is None or step.transform is None:
        raise DomainError("step carries no forward model")
    g = step.transform @ step.model.spectrum(d, n)
    return float(np.sum((step.q0 * np.abs(step.Lambda + g) ** 2 - step.y) ** 2))


def _gamma_at(step: StepData, d):
    if d is None or d == step.d or step.j == 1:
        return step.gamma_star
    if step.model is None or step.transform is None:
        raise DomainError("step was assembled for a different width")
    return step.transform @ step.model.spectrum(d)


def functional_simplified(step: StepData, n: float, d: float | None = None) -> float:
    """``sum (q0 |Lambda + r(n) Gamma*|^2 - y)^2`` with ``r`` the normal-incidence coefficient."""
    d = step.d if d is None else d
    _check_admissible(step, n, d)
    r = step.r_dagger(n)
    g = _gamma_at(step, d)
    return float(np.sum((step.q0 * np.abs(step.Lambda + r * g) ** 2 - step.y) ** 2))


def functional_of_r(step: StepData, r: float, gamma=None) -> float:
    g = step.gamma_star if gamma is None else gamma
    return float(np.sum((step.q0 * np.abs(step.Lambda + r * g) ** 2 - step.y) ** 2))


def quartic_coefficients(step: StepData, gamma=None) -> np.ndarray:
    """Coefficients (highest power first) of the simplified misfit as a polynomial in ``r``."""
    g = step.gamma_star if gamma is None else gamma
    a = step.q0 * np.abs(g) ** 2
    b = 2 * step.q0 * np.real(step.Lambda * np.conj(g))
    c = step.q0 * np.abs(step.Lambda) ** 2 - step.y
    return np.array([
        np.sum(a * a),
        2 * np.sum(a * b),
        np.sum(b * b + 2 * a * c),
        2 * np.sum(b * c),
        np.sum(c * c),
    ])


@dataclass
class WidthSearch:
    d: float
    value: float
    grid: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)


def width_search(step_builder: Callable[[float], StepData], d_range: tuple[float, float],
                 d_resolution: float = 0.1, r_test: float = 0.05,
                 refine: bool = True) -> WidthSearch:
    """Width minimising the simplified misfit at a fixed test coefficient.

    Grid search at ``d_resolution`` (first minimum wins, i.e. ties go to the
    smaller width), then a bounded scalar search inside the winning cell.
    """
    lo, hi = d_range
    if not 0 < lo < hi:
        raise DomainError(f"invalid width range {d_range}")
    grid = np.arange(lo, hi + 0.5 * d_resolution, d_resolution)
    values = np.array([functional_of_r(step_builder(d), r_test) for d in grid])
    span = values.max() - values.min()
    if not span > 1e-12 * max(values.max(), 1e-300):
        raise NoLayerError("width functional is flat over the search range")
    i = int(np.argmin(values))
    best, best_val = float(grid[i]), float(values[i])
    if refine:
        a = max(grid[i] - d_resolution, lo)
        b = min(grid[i] + d_resolution, hi)
        res = minimize_scalar(lambda d: functional_of_r(step_builder(d), r_test),
                              bounds=(a, b), method="bounded",
                              options={"xatol": 1e-3 * d_resolution})
        if res.fun < best_val:
            best, best_val = float(res.x), float(res.fun)
    return WidthSearch(d=best, value=best_val, grid=grid, values=values)


def sign_determination(profile: DepthProfile, Delta_j: float, k_bar: float,
                       z_win: float | None = None, floor: float = 1e-3) -> int:
    """Sign of the normal-incidence reflection coefficient of the peak at ``Delta_j``.

    Averages ``Re{P(z) exp(i k_bar (z - Delta_j))}`` over ``|z - Delta_j| < z_win``
    and returns its sign.  Near the peak the leading term is a positive sinc
    times the coefficient.  The result is only as good as ``Delta_j``: an error
    of ``pi / (2 k_bar)`` already rotates the carrier far enough to flip it, and
    a sample tilt adds a mean path offset that the ledger positions omit.
    """
    if z_win is None:
        lk = profile.half_bandwidth
        z_win = 0.5 * math.pi / lk if lk else 20.0
    z = profile.z_grid
    sel = np.abs(z - Delta_j) < z_win
    if not np.any(sel):
        raise AmbiguousSignError("no profile samples near the peak")
    vals = profile.values[sel]
    avg = float(np.mean(np.real(vals * np.exp(1j * k_bar * (z[sel] - Delta_j)))))
    if abs(avg) <= floor * float(np.max(np.abs(vals))):
        raise AmbiguousSignError("phase test below its noise floor")
    return 1 if avg > 0 else -1


def _top_quartile(g):
    mag = np.abs(g)
    cut = np.quantile(mag, 0.75)
    return mag >= cut


def solve_index_first(step: StepData, q0: float | None = None) -> float:
    """Index below the top surface from the peak height alone.

    ``|r| = sqrt(mean(y / (q0 |Gamma*|^2)))`` over the top quartile of ``|Gamma*|``;
    the negative root is taken since the first layer is denser than the ambient medium.
    """
    q0 = step.q0 if q0 is None else q0
    g = step.gamma_star
    if not np.any(np.abs(g) > 0):
        raise DegenerateWindowError("model vanishes on the whole window")
    if not np.any(step.y > 0):
        raise NoContrastError("no signal at the first interface")
    sel = _top_quartile(g) & (np.abs(g) > 0)
    r = -math.sqrt(float(np.mean(step.y[sel] / (q0 * np.abs(g[sel]) ** 2))))
    if r <= -1:
        raise DomainError("data exceed the model for any admissible index")
    return step.index_for(r)


def calibrate_q0(step: StepData, n1_known: float) -> float:
    """Least-squares intensity scale for a first layer of known index."""
    r = normal_reflection(step.n_prev, n1_known)
    m = np.abs(r * step.gamma_star) ** 2
    denom = float(np.sum(m * m))
    if not denom > 0:
        raise DegenerateWindowError("model has no energy in the window")
    q0 = float(np.sum(step.y * m)) / denom
    if not q0 > 0:
        raise NoContrastError("data carry no energy in the window")
    return q0


@dataclass
class IndexSolution:
    n: float
    r_dagger: float
    value: float
    candidates: list[tuple[float, float]]
    tie: bool = False
    distinct: bool = True


def lambda_ratio_distinct(step: StepData, rtol: float = 1e-9) -> bool:
    """At least two window points with distinct ``Re(Lambda / Gamma*)``."""
    g = step.gamma_star
    ok = np.abs(g) > 1e-300
    if np.count_nonzero(ok) < 2:
        return False
    ratio = np.real(step.Lambda[ok] / g[ok])
    return bool(np.ptp(ratio) > rtol * max(1.0, float(np.max(np.abs(ratio)))))


def _refine_full(step: StepData, n0: float, half: float = 0.05, xatol: float = 1e-6) -> float:
    lo, hi = max(1.0, n0 - half), n0 + half
    eps = 1e-9
    if n0 < step.n_prev:
        hi = min(hi, step.n_prev - eps)
    else:
        lo = max(lo, step.n_prev + eps)
    if not lo < hi:
        return n0
    res = minimize_scalar(lambda n: functional_full(step, n), bounds=(lo, hi),
                          method="bounded", options={"xatol": xatol})
    return float(res.x) if res.fun <= functional_full(step, n0) else n0


def solve_index_deeper(step: StepData, profile: DepthProfile | None = None,
                       tie_tol: float = 1e-3, refine: bool = False) -> IndexSolution:
    """Global minimiser of the quartic misfit in ``r``, mapped to an index.

    Stationary points come from the roots of the cubic derivative.  Roots
    implying an index below 1 are clipped to index 1.  When the two best
    minima tie within ``tie_tol`` (relative) and have opposite signs, the phase
    test on ``profile`` decides.
    """
    coeffs = quartic_coefficients(step)
    if not coeffs[0] > 0:
        raise DegenerateWindowError("model vanishes on the whole window")
    distinct = lambda_ratio_distinct(step)
    if not distinct and step.j > 1 and np.any(np.abs(step.Lambda) > 0):
        warnings.warn("Re(Lambda/Gamma*) is constant over the window; uniqueness not guaranteed",
                      AccuracyWarning, stacklevel=2)
    roots = np.roots(np.polyder(coeffs))
    r_max = (step.n_prev - 1) / (step.n_prev + 1)
    cands = []
    for rt in roots:
        if abs(rt.imag) > 1e-9 * max(1.0, abs(rt.real)):
            continue
        r = float(rt.real)
        if np.polyval(np.polyder(coeffs, 2), r) < 0:
            continue
        r = min(r, r_max)
        if -1 < r < 1 and r != 0:
            cands.append((r, float(np.polyval(coeffs, r))))
    if not cands:
        raise NoContrastError("misfit has no admissible nonzero minimiser")
    cands.sort(key=lambda c: c[1])
    best = cands[0]
    tie = False
    if len(cands) > 1:
        v1, v2 = cands[0][1], cands[1][1]
        scale = max(abs(v1), abs(v2), 1e-300)
        if abs(v2 - v1) / scale < tie_tol and np.sign(cands[0][0]) != np.sign(cands[1][0]):
            tie = True
            if profile is None:
                raise AmbiguousSignError("quartic minima tie and no profile for the phase test")
            sgn = sign_determination(profile, step.ledger.record(step.j).delta,
                                     step.model.params.k_bar if step.model else profile.k_bar)
            best = cands[0] if np.sign(cands[0][0]) == sgn else cands[1]
    r = best[0]
    if r == r_max and step.n_prev > 1:
        n = 1.0
    else:
        n = step.index_for(r)
    value = best[1]
    if refine and step.model is not None:
        n = _refine_full(step, n)
        r = step.r_dagger(n)
        value = functional_full(step, n)
    return IndexSolution(n=n, r_dagger=r, value=value, candidates=cands, tie=tie,
                         distinct=distinct)


def _branch_minima(coeffs, r_max: float) -> dict[int, tuple[float, float]]:
    """Lowest admissible quartic minimum on each sign branch of ``r``."""
    out: dict[int, tuple[float, float]] = {}
    for rt in np.roots(np.polyder(coeffs)):
        if abs(rt.imag) > 1e-9 * max(1.0, abs(rt.real)):
            continue
        r = min(float(rt.real), r_max)
        if not -1 < r < 1 or r == 0:
            continue
        v = float(np.polyval(coeffs, r))
        sgn = 1 if r > 0 else -1
        if sgn not in out or v < out[sgn][1]:
            out[sgn] = (r, v)
    return out


def refine_joint(builder: StepBuilder, sol: IndexSolution, d0: float, d_span: float = 3.0,
                 d_step: float = 0.05) -> tuple[IndexSolution, float]:
    """Minimise over ``(n, d)`` on both sign branches of the reflection coefficient.

    The misfit oscillates in ``d`` with the carrier period, so a local search
    from a biased width gets stuck.  Instead ``d`` is scanned finely and, at
    each width, the quartic gives the best coefficient per sign.  The best
    point of each branch is then polished on the full misfit.
    """
    step0 = builder(d0)
    n_prev = step0.n_prev
    r_max = (n_prev - 1) / (n_prev + 1)
    grid = np.arange(max(d0 - d_span, d_step), d0 + d_span + 0.5 * d_step, d_step)
    best_branch: dict[int, tuple[float, float, float]] = {}
    for d in grid:
        st = builder(float(d))
        for sgn, (r, v) in _branch_minima(quartic_coefficients(st), r_max).items():
            if sgn not in best_branch or v < best_branch[sgn][0]:
                best_branch[sgn] = (v, r, float(d))
    best = None
    for sgn, (_, r, d) in best_branch.items():
        n_c = 1.0 if r >= r_max else step0.index_for(r)
        lo, hi = (1.0, n_prev - 1e-9) if n_c < n_prev else (n_prev + 1e-9, n_c + 0.2)
        lo = max(lo, n_c - 0.2)
        if not lo < hi:
            continue
        st = builder(d)

        def f(x):
            return functional_full(st, x[0], x[1])

        x0 = [min(max(n_c, lo), hi), d]
        scale = max(f(x0), 1e-300)
        res = minimize(lambda x: f(x) / scale, x0, method="Nelder-Mead",
                       bounds=[(lo, hi), (d - d_step, d + d_step)],
                       options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 2000,
                                "initial_simplex": [
                                    x0, [x0[0] + (1e-3 if x0[0] + 1e-3 < hi else -1e-3), d],
                                    [x0[0], d + 0.2 * d_step]]})
        value = float(res.fun) * scale
        if best is None or value < best[0]:
            best = (value, float(res.x[0]), float(res.x[1]))
    if best is None:
        return sol, d0
    value, n, d = best
    return (IndexSolution(n=n, r_dagger=normal_reflection(n_prev, n), value=value,
                          candidates=sol.candidates, tie=sol.tie, distinct=sol.distinct), d)


@dataclass
class ReconstructOptions:
    M: int = 401
    M_width: int = 301
    threshold_ratio: float = 0.05
    min_separation: float = 50.0
    d_resolution: float = 0.1
    d_halfwidth: float | None = None
    pad_factor: int = 64
    r_test_fraction: float = 0.75
    tie_tol: float = 1e-3
    calibrate_n1: float | None = None
    q0: float | None = None
    refine: bool = True
    max_interfaces: int | None = None
    joint_refine: bool = False
    global_refine: bool = True
    global_polish: bool = True
    global_span: float = 1.5
    d_span: float = 3.0
    ambient_index: float = 1.0


def estimate_delta0(model: InterfaceModel, T: np.ndarray, P: np.ndarray, z_peak: float,
                    sign: int = -1, span: float = 15.0, step: float = 0.5) -> float:
    """Reference offset from the complex profile ``P`` of the first peak.

    A shape fit of ``|P|^2`` locates the offset to a fraction of the lobe width;
    the peak of the model sits slightly off the offset because of the second,
    shifted sinc term, which the fit accounts for.  The phase of ``P`` then pins
    the offset to a small fraction of a wavelength, given the ``sign`` of the
    first reflection.
    """
    ph = model.phasor()
    k = model.k
    pref = model._pref
    y = np.abs(P) ** 2

    def gamma(d0):
        return T @ (pref * np.imag(ph * np.exp(1j * k * d0)))

    def shape_misfit(d0):
        g = np.abs(gamma(d0)) ** 2
        s = float(np.sum(y * g)) / max(float(np.sum(g * g)), 1e-300)
        return float(np.sum((s * g - y) ** 2))

    def phase_misfit(d0):
        g = gamma(d0)
        s = float(np.real(np.vdot(g, P))) / max(float(np.vdot(g, g).real), 1e-300)
        if s * sign <= 0:
            return float(np.sum(np.abs(P) ** 2))
        return float(np.sum(np.abs(P - s * g) ** 2))

    grid = z_peak + np.arange(-span, span + 0.5 * step, step)
    rough = _grid_then_bounded(shape_misfit, grid)
    period = 2 * math.pi / model.params.k_bar
    fine = rough + np.linspace(-period, period, 41)
    return _grid_then_bounded(phase_misfit, fine, xatol=1e-7)


def _grid_then_bounded(f, grid, xatol=1e-6):
    vals = np.array([f(x) for x in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    return float(res.x) if res.fun <= vals[i] else float(grid[i])


def _implied_amplitude(builder: StepBuilder, d: float) -> float:
    g = builder.gamma_star(d)
    return math.sqrt(float(np.max(builder.y)) / (builder.q0 * float(np.max(np.abs(g) ** 2))))


@dataclass
class _PassState:
    """Outcome of one layer-by-layer pass."""

    layers: list
    residuals: list
    signs: list
    steps: list
    ledger: LayerLedger
    peaks: list
    q0: float
    delta0: float
    complete: bool = True
    message: str = ""
    exhausted: bool = False


def _layer_pass(C: np.ndarray, params: SystemParams, opts: ReconstructOptions,
                quad: AngularQuadrature, reference: float, q0: float | None) -> _PassState:
    k = params.k_grid()
    n0 = opts.ambient_index
    full = band_limited_transform(AScanSpectrum(k, C), pad_factor=opts.pad_factor)
    peaks = detect_peaks(full, opts.min_separation, opts.threshold_ratio)
    z_prev = refine_peak(full, peaks[0][0])

    z = select_window(full, z_prev, opts.M, [p[0] for p in peaks[1:2]])
    model = InterfaceModel(params, [n0], [], 1, quad)
    builder = StepBuilder(model, z, C, None, LayerLedger.start(params, n0), profile=full)
    delta0 = estimate_delta0(model, builder.T, builder.T @ C, z_prev)
    model.delta0 = delta0
    builder.ledger = LayerLedger.start(params, n0, delta0=delta0)

    step = builder()
    if opts.calibrate_n1 is not None:
        n1 = float(opts.calibrate_n1)
        q0 = calibrate_q0(step, n1)
        step = replace(step, q0=q0)
    else:
        q0 = q0 or 1.0
        step = replace(step, q0=q0)
        n1 = solve_index_first(step)
    ledger = step.ledger
    r1 = normal_reflection(n0, n1)
    value = functional_simplified(step, n1)
    spectra = [model.spectrum(n=n1)]
    indices, widths = [n0, n1], []
    state = _PassState(layers=[(n1, None)], residuals=[value], signs=[int(np.sign(r1))],
                       steps=[StepReport(1, n1, None, r1, value, z_prev)], ledger=ledger,
                       peaks=[z_prev], q0=q0, delta0=delta0)
    sq = math.sqrt(q0)
    j = 1
    while opts.max_interfaces is None or j < opts.max_interfaces:
        j += 1
        model_sum = np.sum(spectra, axis=0)
        prof = band_limited_transform(AScanSpectrum(k, C - sq * model_sum),
                                      pad_factor=opts.pad_factor)
        try:
            found = detect_peaks(prof, opts.min_separation, opts.threshold_ratio,
                                 reference=reference)
        except NoSignalError:
            found = []
        found = [p for p in found if p[0] > z_prev + opts.min_separation]
        if not found:
            state.exhausted = True
            break
        z_j = refine_peak(prof, found[0][0])
        nbrs = [z_prev] + [p[0] for p in found[1:2]]
        try:
            n_prev = indices[-1]
            model = InterfaceModel(params, indices, widths, j, quad, delta0)
            d0 = (z_j - ledger.current.delta) / (2 * n_prev)
            half = opts.d_halfwidth or 0.5 * math.pi / params.half_bandwidth / n_prev
            d_lo, d_hi = max(d0 - half, opts.d_resolution), d0 + half
            if not d_hi > d_lo:
                raise NoLayerError(f"peak at {z_j:.1f} um implies no positive width")
            zw = select_window(prof, z_j, opts.M_width, nbrs)
            wb = StepBuilder(model, zw, C, model_sum, ledger, q0, prof)
            amp = opts.r_test_fraction * _implied_amplitude(wb, max(d0, d_lo))
            searches = [width_search(wb, (d_lo, d_hi), opts.d_resolution, s * amp)
                        for s in (1.0, -1.0)]
            d_best = min(searches, key=lambda s: s.value).d
            zs = select_window(prof, z_j, opts.M, nbrs)
            sb = StepBuilder(model, zs, C, model_sum, ledger, q0, prof)
            step = sb(d_best)
            sol = solve_index_deeper(step, profile=prof, tie_tol=opts.tie_tol,
                                     refine=opts.refine)
            if opts.joint_refine:
                sol, d_best = refine_joint(sb, sol, d_best, opts.d_span)
                step = sb(d_best)
        except OctlkError as exc:
            state.complete = False
            state.message = f"step {j}: {exc}"
            break
        ledger = step.ledger
        indices.append(sol.n)
        widths.append(d_best)
        state.layers.append((sol.n, d_best))
        state.residuals.append(sol.value)
        r_j = normal_reflection(n_prev, sol.n)
        state.signs.append(int(np.sign(r_j)))
        state.steps.append(StepReport(j, sol.n, d_best, r_j, sol.value, z_j))
        spectra.append(model.spectrum(d_best, sol.n))
        state.peaks.append(z_j)
        z_prev = z_j
    state.ledger = ledger
    return state


@dataclass
class GlobalFit:
    indices: list[float]
    widths: list[float]
    delta0: float
    residual: float
    positions: np.ndarray
    coefficients: np.ndarray
    q0: float = 1.0


def _positions(indices, widths, delta0):
    pos = [delta0]
    for n, d in zip(indices[1:], widths):
        pos.append(pos[-1] + 2 * n * d)
    return np.array(pos)


def _stack_from(coeffs, pos, ambient):
    ind = [ambient]
    for r in coeffs:
        ind.append(ind[-1] * (1 - r) / (1 + r))
    wid = [(pos[i + 1] - pos[i]) / (2 * ind[i + 1]) for i in range(len(pos) - 1)]
    return ind, wid


def refine_global(C: np.ndarray, params: SystemParams, indices: Sequence[float],
                  widths: Sequence[float], delta0: float, q0: float = 1.0,
                  quad: AngularQuadrature | None = None, span: float = 1.0,
                  step: float = 0.01, sweeps: int = 3, outer: int = 10,
                  polish: bool = True, positions: Sequence[float] | None = None,
                  fixed_n1: float | None = None, pair_span: float = 3.0,
                  pair_step: float = 0.02, flip_gain: float = 0.01) -> GlobalFit:
    """Fit all interfaces to the whole spectrum at once.

    ``indices`` runs ``n_0 .. n_J``.  For fixed interface positions the
    spectrum is close to linear in the reflection coefficients, so positions are
    scanned one at a time over ``+-span`` while the coefficients follow from a
    linear least-squares solve.  The sign of each coefficient is therefore
    chosen by the data rather than inherited from the peak-by-peak estimate,
    and the sidelobes of every interface are modelled jointly.  Shapes are
    rebuilt from the updated stack until the positions settle (at most
    ``outer`` times).  A settled state is then challenged by moving single
    interfaces, or neighbouring pairs, by half a carrier period with the sign
    flipped, and the fit restarts from any such state that explains the data
    better.  ``polish`` finishes with a
    nonlinear least-squares fit over ``(n, d, delta0)``.  Starting
    ``positions`` (optical depths of the interfaces) override the ones implied
    by the widths.  With ``fixed_n1`` the top index is held at that value
    and the intensity scale ``q0`` is fitted in its place.
    """
    quad = quad or quadrature_for(params)
    k = params.k_grid()
    pref = prefactor(k, params)
    scale = float(np.linalg.norm(C)) or 1.0
    sq = math.sqrt(q0)
    ind = [float(n) for n in indices]
    wid = [float(d) for d in widths]
    J = len(ind) - 1
    if J < 1 or len(wid) != J - 1:
        raise DomainError("need n_0 .. n_J and J - 1 widths")
    pos = _positions(ind, wid, delta0) if positions is None else np.array(positions, float)
    if pos.size != J:
        raise DomainError("one starting position per interface is needed")
    offsets = np.arange(-span, span + 0.5 * step, step)
    pair_offsets = np.arange(-pair_span, pair_span + 0.5 * pair_step, pair_step)
    pshift = np.exp(1j * np.outer(k, pair_offsets))
    near = np.arange(-0.3, 0.3 + 0.5 * step, step)

    def trig(offs):
        # Im(g exp(i k o)) = Re(g) sin(k o) + Im(g) cos(k o)
        ko = np.outer(offs, k)
        sn, cs = np.sin(ko), np.cos(ko)
        return offs, sn, cs, sn * sn, 2 * sn * cs, cs * cs

    wide, close = trig(offsets), trig(near)

    def solve(A):
        c, *_ = np.linalg.lstsq(A, C, rcond=None)
        return c, float(np.linalg.norm(C - A @ c)) / scale

    def columns(shapes, p):
        return np.stack([pref * np.imag(g * np.exp(1j * k * x)) for g, x in zip(shapes, p)], 1)

    def build(ind, wid):
        # shapes carry only what the stack adds beyond the normal-incidence path
        own = _positions(ind, wid, 0.0)
        shapes = []
        for j in range(1, J + 1):
            r_j, trans, psi = interface_terms(ind, wid, j, quad)
            r_norm = normal_reflection(ind[j - 1], ind[j])
            shapes.append(phasor(k, r_j * trans / r_norm, psi, params, quad)
                          * np.exp(-1j * k * own[j - 1]))
        return shapes

    def project(A, drop, *cols):
        others = np.delete(A, drop, axis=1)
        if not others.shape[1]:
            return (C,) + cols
        Q, _ = np.linalg.qr(others)
        return tuple(x - Q @ (Q.T @ x) for x in (C,) + cols)

    def scan_one(A, shapes, pos, j, table=wide):
        offs, sn, cs, ss, sc2, cc = table
        g = pref * shapes[j] * np.exp(1j * k * pos[j])
        a, b = g.real, g.imag
        others = np.delete(A, j, axis=1)
        Q = np.linalg.qr(others)[0] if others.shape[1] else np.empty((k.size, 0))
        c0 = C - Q @ (Q.T @ C)
        # fit gain (t.c0)^2 / |P t|^2 of every trial column t, without forming them
        num = sn @ (a * c0) + cs @ (b * c0)
        norm = ss @ (a * a) + sc2 @ (a * b) + cc @ (b * b)
        for q in Q.T:
            norm -= (sn @ (a * q) + cs @ (b * q)) ** 2
        best = int(np.argmax(num**2 / np.maximum(norm, 1e-300)))
        pos[j] += offs[best]
        A[:, j] = pref * np.imag(shapes[j] * np.exp(1j * k * pos[j]))

    def scan_pair(A, shapes, pos, j):
        ta, tb = (pref[:, None] * np.imag((shapes[i] * np.exp(1j * k * pos[i]))[:, None] * pshift)
                  for i in (j, j + 1))
        c0, ta, tb = project(A, [j, j + 1], ta, tb)
        ua, ub = ta.T @ c0, tb.T @ c0
        gaa, gbb = np.sum(ta * ta, axis=0), np.sum(tb * tb, axis=0)
        gab = ta.T @ tb
        det = np.maximum(gaa[:, None] * gbb[None, :] - gab**2, 1e-300)
        fit = (ua[:, None] ** 2 * gbb[None, :] - 2 * ua[:, None] * ub[None, :] * gab
               + ub[None, :] ** 2 * gaa[:, None]) / det
        ia, ib = np.unravel_index(int(np.argmax(fit)), fit.shape)
        pos[j] += pair_offsets[ia]
        pos[j + 1] += pair_offsets[ib]
        for i in (j, j + 1):
            A[:, i] = pref * np.imag(shapes[i] * np.exp(1j * k * pos[i]))

    def rescale(coef):
        s = sq
        if fixed_n1 is not None:
            s = float(coef[0]) / normal_reflection(ambient, fixed_n1)
            if not s > 0:
                raise NoContrastError("top interface has the wrong sign for the known index")
        return np.clip(coef / s, -0.999, 0.999), s

    def settle(ind, wid, pos):
        # Shapes depend on the stack above them, so the loop can cycle between
        # carrier branches.  Every visited state is scored with shapes rebuilt
        # from its own stack and the best one is returned.
        best, before = None, None
        pos = pos.copy()
        for it in range(outer + 1):
            shapes = build(ind, wid)
            A = columns(shapes, pos)
            coef, res = solve(A)
            if it and (best is None or res < best[0]):
                best = (res, pos.copy(), coef)
            if it == outer or (it and np.max(np.abs(pos - before)) < 0.5 * step):
                break
            before = pos.copy()
            for _ in range(sweeps):
                for j in range(J):
                    scan_one(A, shapes, pos, j)
            # neighbouring interfaces leak into each other, so also move them in pairs
            for j in range(J - 1):
                scan_pair(A, shapes, pos, j)
            for j in range(J):
                scan_one(A, shapes, pos, j)
            ind, wid = _stack_from(rescale(solve(A)[0])[0], pos, ambient)
        return best

    def flipped(state, moves):
        # moving an interface by half a carrier period and flipping its sign
        # leaves the spectrum nearly unchanged, so such states must be compared
        res, pos, coef = state
        pos, coef = pos.copy(), coef.copy()
        for j, m in moves:
            pos[j] += m * half_period
            coef[j] *= (-1) ** m
        ind, wid = _stack_from(rescale(coef)[0], pos, ambient)
        if min(wid, default=1.0) <= 0:
            return None
        shapes = build(ind, wid)
        A = columns(shapes, pos)
        for j, _ in moves:
            scan_one(A, shapes, pos, j, close)
        coef, res = solve(A)
        return (res, pos, coef), ind, wid

    ambient = ind[0]
    half_period = math.pi / float(np.mean(k))
    state = settle(ind, wid, pos)
    steps = (1, -1, 2, -2, 3, -3, 4, -4)
    moves = [((j, m),) for j in range(1, J) for m in steps]
    moves += [((j, m), (j + 1, n)) for j in range(1, J - 1) for m in (1, -1) for n in steps]
    for _ in range(2 * J):
        trials = [c for c in (flipped(state, m) for m in moves) if c is not None]
        if not trials:
            break
        cand, i_new, w_new = min(trials, key=lambda c: c[0][0])
        # small gains only fine-tune positions, which the polish does anyway
        if not cand[0] < (1 - flip_gain) * state[0]:
            break
        again = settle(i_new, w_new, cand[1])
        state = again if again[0] < cand[0] else cand
    res, pos, coef = state
    coef, sq = rescale(coef)
    delta0 = float(pos[0])
    ind, wid = _stack_from(coef, pos, ambient)
    if polish:
        fixed = fixed_n1 is not None
        free = J - 1 if fixed else J
        head = [ind[0], fixed_n1] if fixed else [ind[0]]

        def unpack(x):
            amp = x[-1] if fixed else sq
            x = x[:-1] if fixed else x
            return head + list(x[:free]), list(x[free:free + J - 1]), x[free + J - 1], amp

        def model(x):
            ii, ww, d0, amp = unpack(x)
            return amp * sum(stack_contribution(ii, ww, j, k, params, quad, delta0=d0)
                             for j in range(1, J + 1))

        x0 = np.r_[ind[len(head):], wid, delta0]
        lo = np.r_[[1.0] * free, [1e-3] * (J - 1), -np.inf]
        sc = np.r_[[1e-3] * free, [0.05] * (J - 1), 0.05]
        if fixed:
            x0, lo, sc = np.r_[x0, sq], np.r_[lo, 0.0], np.r_[sc, 1e-3 * sq]
        x0[:free] = np.maximum(x0[:free], 1.0 + 1e-9)
        fit = least_squares(lambda x: (model(x) - C) / scale, x0, bounds=(lo, np.inf),
                            x_scale=sc, xtol=1e-12, ftol=1e-14)
        ind, wid, delta0, sq = unpack(fit.x)
        ind = [float(n) for n in ind]
        wid = [float(d) for d in wid]
        delta0 = float(delta0)
        res = float(np.linalg.norm(fit.fun))
        pos = _positions(ind, wid, delta0)
        coef = np.array([normal_reflection(ind[j - 1], ind[j]) for j in range(1, J + 1)])
    return GlobalFit(indices=ind, widths=wid, delta0=delta0, residual=res, positions=pos,
                     coefficients=coef, q0=float(sq) ** 2)


def reconstruct(spectrum: AScanSpectrum, params: SystemParams,
                options: ReconstructOptions | None = None,
                quad: AngularQuadrature | None = None) -> ReconstructionResult:
    """Recover ``(n_j, d_{j-1})`` interface by interface until no peak is left.

    The peak-by-peak pass gives every layer to within the carrier ambiguity.
    With ``options.global_refine`` the estimate is then fitted to the whole
    spectrum, which settles the sign of each reflection coefficient (see
    :func:`refine_global`).

    Raises :class:`NoSignalError` if the data show no peak at all.  Failures in
    later steps end the run early with ``complete=False`` and a message.
    """
    opts = options or ReconstructOptions()
    k = spectrum.k_grid
    if k.size != params.n_samples or not np.allclose(k, params.k_grid(), rtol=1e-12, atol=0):
        raise GridMismatchError("spectrum grid differs from the system wavenumber grid")
    quad = quad or quadrature_for(params)
    C = spectrum.values
    full = band_limited_transform(spectrum, pad_factor=opts.pad_factor)
    reference = float(np.max(full.magnitude))
    q0 = opts.q0 or spectrum.q0
    state = _layer_pass(C, params, opts, quad, reference, q0)
    layers, signs, ledger = state.layers, state.signs, state.ledger
    residuals = state.residuals
    fit_residual = None
    q0_out = state.q0
    # a whole-spectrum fit is only meaningful once every peak has a model
    if opts.global_refine and state.complete and state.exhausted:
        ind = [opts.ambient_index] + [n for n, _ in layers]
        wid = [d for _, d in layers[1:]]
        try:
            # peak maxima sit a fixed distance behind the interfaces they mark
            lag = state.peaks[0] - state.delta0
            start = np.array(state.peaks) - lag
            start[0] = state.delta0
            fit = refine_global(C, params, ind, wid, state.delta0, state.q0, quad,
                                span=opts.global_span, polish=opts.global_polish,
                                positions=start, fixed_n1=opts.calibrate_n1)
        except OctlkError as exc:
            return ReconstructionResult(layers=layers, q0=state.q0, residuals=residuals,
                                        signs=signs, ledger=ledger, steps=state.steps,
                                        complete=False, message=f"global fit: {exc}")
        layers = [(fit.indices[1], None)] + list(zip(fit.indices[2:], fit.widths))
        signs = [int(np.sign(r)) for r in fit.coefficients]
        fit_residual = fit.residual
        q0_out = fit.q0
        ledger = LayerLedger.start(params, opts.ambient_index, delta0=fit.delta0)
        for n, d in zip(fit.indices[1:-1], fit.widths):
            ledger = ledger_advance(ledger, n, d)
        ledger = ledger.update_current(n=fit.indices[-1])
    return ReconstructionResult(layers=layers, q0=q0_out, residuals=residuals,
                                signs=signs, ledger=ledger, steps=state.steps,
                                complete=state.complete, message=state.message,
                                fit_residual=fit_residual)


def prepare_step(spectrum: AScanSpectrum, params: SystemParams, j: int,
                 options: ReconstructOptions | None = None,
                 quad: AngularQuadrature | None = None,
                 M: int | None = None) -> StepBuilder:
    """Step ``j`` assembled on top of a reconstruction of interfaces ``1 .. j-1``.

    The window is centred on the ``j``-th peak of the full profile.  The
    returned builder maps a width ``d_{j-1}`` to :class:`StepData` (call it with
    no argument for ``j = 1``).
    """
    opts = options or ReconstructOptions()
    quad = quad or quadrature_for(params)
    k = params.k_grid()
    full = band_limited_transform(spectrum, pad_factor=opts.pad_factor)
    peaks = detect_peaks(full, opts.min_separation, opts.threshold_ratio)
    if j < 1 or j > len(peaks):
        raise NoLayerError(f"interface {j} not found; {len(peaks)} peaks detected")
    z_j = refine_peak(full, peaks[j - 1][0])
    nbrs = [p[0] for i, p in enumerate(peaks) if abs(i - (j - 1)) == 1]
    z = select_window(full, z_j, M or opts.M, nbrs)
    n0 = opts.ambient_index
    q0 = opts.q0 or spectrum.q0 or 1.0
    if j == 1:
        ledger = LayerLedger.start(params, n0)
        model = InterfaceModel(params, [n0], [], 1, quad)
        builder = StepBuilder(model, z, spectrum.values, None, ledger, q0, full)
        model.delta0 = estimate_delta0(model, builder.T, builder.T @ spectrum.values, z_j)
        builder.ledger = LayerLedger.start(params, n0, delta0=model.delta0)
        if opts.calibrate_n1 is not None:
            builder.q0 = calibrate_q0(builder(), opts.calibrate_n1)
        return builder
    res = reconstruct(spectrum, params, opts, quad)
    if len(res.layers) < j - 1:
        raise ReconstructionError(f"only {len(res.layers)} interfaces reconstructed",
                                  partial=res)
    ind = [n0] + res.indices[:j - 1]
    wid = res.widths[:j - 2]
    delta0 = res.ledger.records[0].delta
    prior = sum(stack_contribution(ind, wid, l, k, params, quad, delta0=delta0)
                for l in range(1, j))
    ledger = LayerLedger.start(params, n0, delta0=delta0)
    for n, d in zip(ind[1:-1], wid):
        ledger = ledger_advance(ledger, n, d)
    model = InterfaceModel(params, ind, wid, j, quad, delta0)
    return StepBuilder(model, z, spectrum.values, prior,
                       ledger, res.q0, full)


def scan_functionals(builder: StepBuilder, ns: Sequence[float], ds: Sequence[float | None]):
    """Full and simplified misfits on an ``(n, d)`` grid; arrays of shape ``(len(ds), len(ns))``."""
    ns = np.asarray(ns, dtype=float)
    full = np.empty((len(ds), ns.size))
    simp = np.empty_like(full)
    y, lam, q0 = builder.y, builder.Lambda, builder.q0
    n_prev = builder.model.n_last
    r = (n_prev - ns) / (n_prev + ns)
    for i, d in enumerate(ds):
        g_full = builder.T @ builder.model.spectra(d, ns)
        g_star = builder.gamma_star(d)
        full[i] = np.sum((q0 * np.abs(lam[:, None] + g_full) ** 2 - y[:, None]) ** 2, axis=0)
        simp[i] = np.sum((q0 * np.abs(lam[:, None] + np.outer(g_star, r)) ** 2
                          - y[:, None]) ** 2, axis=0)
    return full, simp
