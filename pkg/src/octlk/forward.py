"""Gaussian-beam forward model for A-scans of layered samples.

Every interface ``j`` contributes

    I_j(k) = -k / (16 pi^3 rho) * int_B r_j r_{<=j-1} exp(-|kappa|^2 a)
             * sin(k (-|kappa|^2 psi0 / (2 k^2) + kappa_1 psi1 / k + delta0 + Psi_j))

with the integral taken over the accepted transverse wavevectors ``B``.  The
integrand is written in the k-independent variable ``kappa / k`` so one set of
quadrature nodes serves the whole spectrum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import (
    AccuracyWarning,
    DegenerateGeometryError,
    DomainError,
    QuadratureError,
    TotalInternalReflectionError,
)
from .model import AScanSpectrum, LayeredSample, LayerLedger, SystemParams

DEFAULT_RADIAL = 64
DEFAULT_ANGULAR = 32
QUAD_TOL = 1e-6
_MAX_REFINEMENTS = 4
_CHUNK = 1 << 21


def fresnel_reflection(n_prev, n_next, cos_theta):
    """Amplitude reflection coefficient for incidence from ``n_prev`` onto ``n_next``."""
    n_prev = np.asarray(n_prev, dtype=float)
    cos_theta = np.asarray(cos_theta, dtype=float)
    radicand = n_next**2 - n_prev**2 + n_prev**2 * cos_theta**2
    if np.any(radicand < 0):
        raise TotalInternalReflectionError("negative radicand in Fresnel coefficient")
    root = np.sqrt(radicand)
    out = (n_prev * cos_theta - root) / (n_prev * cos_theta + root)
    return out if out.ndim else float(out)


def normal_reflection(n_prev: float, n_next: float) -> float:
    return (n_prev - n_next) / (n_prev + n_next)


def transmission_product(reflections) -> float | np.ndarray:
    """Two-way transmission ``prod(1 - r_l^2)``; the empty product is 1."""
    out = 1.0
    for r in reflections:
        out = out * (1 - np.asarray(r) ** 2)
    return out


def _incidence_cosine(kappa_over_k, theta_omega: float) -> np.ndarray:
    kt = np.asarray(kappa_over_k, dtype=float)
    if np.any(np.sum(kt**2, axis=-1) >= 1):
        raise DomainError("|kappa/k| must be < 1 for propagating waves")
    k3 = -np.sqrt(1 - np.sum(kt**2, axis=-1))
    # cos(theta_t^0) = -K/|K| . nu with nu = (sin t, 0, cos t)
    return -(kt[..., 0] * math.sin(theta_omega) + k3 * math.cos(theta_omega))


def _chain_cosines(indices: Sequence[float], cos0, upto: int) -> list:
    """Cosines of the transmission angles theta_t^0..theta_t^upto."""
    cos0 = np.asarray(cos0, dtype=float)
    sines = [np.sqrt(np.clip(1 - cos0**2, 0, None))]
    cosines = [cos0]
    for l in range(1, upto + 1):
        s = indices[l - 1] / indices[l] * sines[-1]
        if np.any(s > 1):
            raise TotalInternalReflectionError(f"total internal reflection entering layer {l}")
        sines.append(s)
        cosines.append(np.sqrt(1 - s**2))
    return cosines


def snell_chain(sample: LayeredSample, kappa_over_k, j: int, theta_omega: float = 0.0):
    """Transmission angles ``theta_t^0 .. theta_t^{j-1}`` in radians.

    ``theta_t^l`` is the propagation angle inside layer ``l`` relative to the
    layer normal; ``theta_t^0`` is the angle of incidence in the ambient medium.
    """
    if not 1 <= j <= sample.n_interfaces:
        raise DomainError(f"interface {j} outside 1..{sample.n_interfaces}")
    cos0 = _incidence_cosine(kappa_over_k, theta_omega)
    cosines = _chain_cosines(sample.indices, cos0, j - 1)
    return np.array([np.arccos(np.clip(c, -1, 1)) for c in cosines])


def phase_factor(sample: LayeredSample, kappa_over_k, j: int, theta_omega: float = 0.0):
    """Accumulated two-way optical path ``2 sum_{l<j} n_l d_l cos(theta_t^l)``."""
    if not 1 <= j <= sample.n_interfaces:
        raise DomainError(f"interface {j} outside 1..{sample.n_interfaces}")
    cos0 = _incidence_cosine(kappa_over_k, theta_omega)
    cosines = _chain_cosines(sample.indices, cos0, j - 1)
    psi = np.zeros_like(np.asarray(cos0, dtype=float))
    for l in range(1, j):
        psi = psi + 2 * sample.indices[l] * sample.widths[l - 1] * cosines[l]
    return psi if psi.ndim else float(psi)


@dataclass(frozen=True)
class AcceptanceDisk:
    """Accepted transverse wavevectors, to first order in the sample tilt."""

    center: tuple[float, float]
    radius: float
    k: float
    theta: float
    theta_omega: float

    def contains(self, kappa) -> np.ndarray:
        """Exact membership: the mirrored direction lies within ``theta`` of e_3."""
        kappa = np.asarray(kappa, dtype=float)
        kt = kappa / self.k
        k3 = -np.sqrt(np.clip(1 - np.sum(kt**2, axis=-1), 0, None))
        t2 = 2 * self.theta_omega
        # Phi(K).e3 equals K.Phi(e3), Phi(e3) = (-sin 2t, 0, -cos 2t)
        cosang = -kt[..., 0] * math.sin(t2) - k3 * math.cos(t2)
        return cosang >= math.cos(self.theta) - 1e-15


def acceptance_disk(k: float, params: SystemParams) -> AcceptanceDisk:
    t2 = 2 * params.theta_omega
    return AcceptanceDisk(
        center=(-k * math.sin(t2), 0.0),
        radius=k * math.sin(params.theta),
        k=k,
        theta=params.theta,
        theta_omega=params.theta_omega,
    )


@dataclass(frozen=True, eq=False)
class AngularQuadrature:
    """Nodes and weights over the accepted set, in the variable ``kappa / k``.

    The accepted outgoing directions form a spherical cap of half-angle theta
    around the mirror image of e_3.  The cap is parametrised by
    ``t = sin^2(alpha)`` (Gauss-Legendre) and azimuth ``phi`` (trapezoid); at
    zero tilt the integrand is azimuthally symmetric and one azimuth suffices.
    """

    kt: np.ndarray
    weights: np.ndarray
    s: np.ndarray
    cos_incidence: np.ndarray
    radial: int
    angular: int

    @classmethod
    def build(cls, theta: float, theta_omega: float, radial: int = DEFAULT_RADIAL,
              angular: int = DEFAULT_ANGULAR) -> AngularQuadrature:
        x, w = np.polynomial.legendre.leggauss(radial)
        smax = math.sin(theta) ** 2
        t = 0.5 * (x + 1) * smax
        wt = 0.5 * w * smax
        if theta_omega == 0.0:
            angular = 1
            phi = np.zeros(1)
            wphi = np.full(1, 2 * math.pi)
        else:
            phi = 2 * math.pi * np.arange(angular) / angular
            wphi = np.full(angular, 2 * math.pi / angular)
        sin_a = np.sqrt(t)[:, None]
        cos_a = np.sqrt(1 - t)[:, None]
        c2, s2 = math.cos(2 * theta_omega), math.sin(2 * theta_omega)
        # K/|K| = cos(a) u + sin(a) (cos(phi) p + sin(phi) e2)
        kx = -s2 * cos_a + sin_a * np.cos(phi) * c2
        ky = sin_a * np.sin(phi) * np.ones_like(cos_a)
        kz = -c2 * cos_a - sin_a * np.cos(phi) * s2
        weights = np.abs(kz) / (2 * cos_a) * wt[:, None] * wphi[None, :]
        kt = np.stack([kx.ravel(), ky.ravel()], axis=-1)
        cos_inc = -(kx * math.sin(theta_omega) + kz * math.cos(theta_omega))
        return cls(
            kt=kt,
            weights=weights.ravel(),
            s=np.sum(kt**2, axis=-1),
            cos_incidence=cos_inc.ravel(),
            radial=radial,
            angular=angular,
        )

    @property
    def size(self) -> int:
        return self.weights.size


def _gauss_phase_integral(quad: AngularQuadrature, params: SystemParams, k: np.ndarray):
    ph = -0.5 * quad.s * params.psi0 + quad.kt[:, 0] * params.psi1
    e = np.exp(-np.outer(k**2, quad.s) * params.a + 1j * np.outer(k, ph))
    return e @ quad.weights


@lru_cache(maxsize=64)
def _cached_quadrature(theta, theta_omega, psi0, psi1, a, k1, k2, radial, angular):
    params_like = _ParamView(psi0, psi1, a)
    ks = np.array([k1, 0.5 * (k1 + k2), k2])
    for _ in range(_MAX_REFINEMENTS + 1):
        quad = AngularQuadrature.build(theta, theta_omega, radial, angular)
        finer = AngularQuadrature.build(theta, theta_omega, 2 * radial, 2 * angular)
        coarse_val = _gauss_phase_integral(quad, params_like, ks)
        fine_val = _gauss_phase_integral(finer, params_like, ks)
        scale = max(np.max(np.abs(fine_val)), 1e-300)
        if np.max(np.abs(coarse_val - fine_val)) / scale <= QUAD_TOL:
            return quad
        radial *= 2
        if theta_omega != 0.0:
            angular *= 2
    raise QuadratureError(
        f"angular quadrature did not converge to {QUAD_TOL} relative change "
        f"(last orders {radial // 2} x {angular})"
    )


@dataclass(frozen=True)
class _ParamView:
    psi0: float
    psi1: float
    a: float


def quadrature_for(params: SystemParams, radial: int = DEFAULT_RADIAL,
                   angular: int = DEFAULT_ANGULAR) -> AngularQuadrature:
    """Node set for ``params``, checked against one doubling of both orders.

    The order is doubled (up to four times) until the doubling changes the
    Gaussian phase integral by less than ``QUAD_TOL`` relative.
    """
    tail = math.exp(-params.k1**2 * params.a)
    if tail > 1e-8:
        warnings.warn(f"Gaussian weight outside |kappa|<k is {tail:.2g}", AccuracyWarning,
                      stacklevel=2)
    return _cached_quadrature(params.theta, params.theta_omega, params.psi0, params.psi1,
                              params.a, params.k1, params.k2, radial, angular)


def interface_terms(indices: Sequence[float], widths: Sequence[float], j: int,
                    quad: AngularQuadrature):
    """Per-node ``(r_j, r_{<=j-1}, Psi_j)`` for interface ``j``.

    ``indices`` lists ``n_0 .. n_j`` (at least), ``widths`` lists ``d_1 .. d_{j-1}``.
    """
    if len(indices) < j + 1 or len(widths) < j - 1:
        raise DomainError(f"stack too short for interface {j}")
    cosines = _chain_cosines(indices, quad.cos_incidence, j - 1)
    trans = np.ones(quad.size)
    psi = np.zeros(quad.size)
    for l in range(1, j):
        r_l = fresnel_reflection(indices[l - 1], indices[l], cosines[l - 1])
        trans = trans * (1 - r_l**2)
        psi = psi + 2 * indices[l] * widths[l - 1] * cosines[l]
    r_j = fresnel_reflection(indices[j - 1], indices[j], cosines[j - 1])
    return np.asarray(r_j), trans, psi


def _phase_rows(k: np.ndarray, path: np.ndarray) -> np.ndarray:
    """``exp(i outer(k, path))``; built from a table of powers when ``k`` is evenly spaced."""
    dk = np.diff(k)
    if k.size < 3 or not np.allclose(dk, dk[0], rtol=1e-9, atol=0):
        return np.exp(1j * np.outer(k, path))
    # row m = B*a + b is w^b (w^B)^a with w = exp(i dk path)
    B = _POWER_BLOCK
    rows = -(-k.size // B)
    fine = np.empty((B, path.size), dtype=complex)
    fine[0] = np.exp(1j * k[0] * path)
    fine[1:] = np.exp(1j * dk[0] * path)
    fine = np.cumprod(fine, axis=0)
    coarse = np.empty((rows, path.size), dtype=complex)
    coarse[0] = 1.0
    coarse[1:] = np.exp(1j * (B * dk[0]) * path)
    coarse = np.cumprod(coarse, axis=0)
    out = (coarse[:, None, :] * fine[None, :, :]).reshape(rows * B, path.size)
    return out[:k.size]


_POWER_BLOCK = 32


def phasor(k: np.ndarray, amplitude: np.ndarray, path: np.ndarray, params: SystemParams,
           quad: AngularQuadrature) -> np.ndarray:
    """``sum_nodes w * amplitude * exp(-k^2 a s) * exp(i k (path + geometric phase))``.

    The reference offset ``delta0`` is left out, so a contribution is
    ``prefactor(k) * Im(phasor * exp(i k delta0))``.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    ph = -0.5 * quad.s * params.psi0 + quad.kt[:, 0] * params.psi1 + path
    wa = quad.weights * amplitude
    if k.size * quad.size <= _CHUNK:
        return (_envelope(k, quad, params.a) * _phase_rows(k, ph)) @ wa
    out = np.empty(k.size, dtype=complex)
    step = max(1, _CHUNK // max(quad.size, 1))
    for i in range(0, k.size, step):
        kk = k[i:i + step]
        out[i:i + step] = (np.exp(-np.outer(kk**2, quad.s) * params.a) * _phase_rows(kk, ph)) @ wa
    return out


_ENVELOPES: dict = {}


def _envelope(k: np.ndarray, quad: AngularQuadrature, a: float) -> np.ndarray:
    # the Gaussian beam factor only depends on the grid and the nodes, and the
    # solvers evaluate thousands of phasors on the same pair
    key = (id(quad), float(a), k.size, float(k[0]), float(k[-1]))
    hit = _ENVELOPES.get(key)
    if hit is not None and hit[0] is quad:
        return hit[1]
    if len(_ENVELOPES) > 16:
        _ENVELOPES.clear()
    env = np.exp(-np.outer(k**2, quad.s) * a)
    _ENVELOPES[key] = (quad, env)
    return env


def prefactor(k, params: SystemParams):
    # -k/(16 pi^3 rho) times the Jacobian k^2 of kappa = k * (kappa/k)
    return -np.asarray(k, dtype=float) ** 3 / (16 * math.pi**3 * params.rho)


def contribution_from_phasor(k, ph, params: SystemParams, delta0: float | None = None):
    d0 = params.delta0 if delta0 is None else delta0
    k = np.asarray(k, dtype=float)
    return prefactor(k, params) * np.imag(ph * np.exp(1j * k * d0))


def stack_contribution(indices, widths, j: int, k, params: SystemParams,
                       quad: AngularQuadrature | None = None, *, mode: str = "full",
                       delta0: float | None = None):
    """Contribution of interface ``j`` for a stack given as plain sequences.

    ``mode="full"`` uses the direction-dependent Fresnel coefficient,
    ``mode="unit"`` replaces it by 1 (the simplified operator divided by its
    normal-incidence coefficient).
    """
    quad = quad or quadrature_for(params)
    r_j, trans, psi = interface_terms(indices, widths, j, quad)
    if mode == "full":
        amp = r_j * trans
    elif mode == "unit":
        amp = trans
    else:
        raise ValueError(f"unknown mode {mode!r}")
    ph = phasor(k, amp, psi, params, quad)
    return contribution_from_phasor(k, ph, params, delta0)


def _check_interface(sample: LayeredSample, j: int):
    if not 1 <= j <= sample.n_interfaces:
        raise DomainError(f"interface {j} outside 1..{sample.n_interfaces}")


def interface_contribution(sample: LayeredSample, params: SystemParams, j: int, k,
                           quad: AngularQuadrature | None = None):
    """Contribution of interface ``j`` with direction-dependent reflection."""
    _check_interface(sample, j)
    out = stack_contribution(sample.indices, sample.widths, j, k, params, quad, mode="full")
    return out if np.ndim(k) else float(out[0])


def simplified_interface_contribution(sample: LayeredSample, params: SystemParams, j: int, k,
                                      r_dagger_override: float | None = None,
                                      quad: AngularQuadrature | None = None):
    """Contribution of interface ``j`` with its reflection frozen at normal incidence."""
    _check_interface(sample, j)
    idx = sample.indices
    r = normal_reflection(idx[j - 1], idx[j]) if r_dagger_override is None else r_dagger_override
    out = r * stack_contribution(idx, sample.widths, j, k, params, quad, mode="unit")
    return out if np.ndim(k) else float(out[0])


def simulate_ascan(sample: LayeredSample, params: SystemParams,
                   quad: AngularQuadrature | None = None, order: int = 1) -> AScanSpectrum:
    """Single-scattering A-scan ``C(k) = sum_j I_j(k)`` on the system grid."""
    if order != 1:
        raise NotImplementedError("only single reflections are modelled")
    k = params.k_grid()
    total = np.zeros_like(k)
    if sample.n_interfaces:
        quad = quad or quadrature_for(params)
        for j in range(1, sample.n_interfaces + 1):
            total += stack_contribution(sample.indices, sample.widths, j, k, params, quad)
    return AScanSpectrum(k_grid=k, values=total)


def closed_form_first_interface(params: SystemParams, r_dagger: float, k):
    """Top-surface contribution at zero tilt, integrated over the disk analytically.

    Returns the complex expression; its real part is the A-scan value.
    """
    if params.theta_omega != 0:
        raise DomainError("closed form requires zero sample tilt")
    k = np.asarray(k, dtype=float)
    total = np.zeros(k.shape, dtype=complex)
    for eps in (1, -1):
        denom = 2 * params.a * k + 1j * eps * params.psi0
        if np.any(denom == 0):
            raise DegenerateGeometryError("2ak + i psi0 vanishes")
        total = total + eps * np.exp(1j * eps * k * params.delta0) / denom * (
            1 - np.exp(-k**2 * params.gamma) * np.exp(-1j * eps * k * params.xi)
        )
    return 1j * r_dagger * k**2 / (16 * math.pi**2 * params.rho) * total


def _sinc(x):
    return np.sinc(np.asarray(x) / math.pi)


def sinc_reference(ledger: LayerLedger, params: SystemParams, j: int, z):
    """Leading-order shape of the depth peak of interface ``j``."""
    rec = ledger.record(j)
    lk = params.half_bandwidth
    z = np.asarray(z, dtype=float)
    damp = math.exp(-params.k_bar**2 * params.gamma)
    return -_sinc(lk * (z - rec.delta)) + damp * np.exp(-1j * params.k_bar * rec.xi) * _sinc(
        lk * (z - (rec.delta - rec.xi))
    )


def _normal_coefficient(ledger: LayerLedger, j: int, r_dagger):
    if r_dagger is not None:
        return r_dagger
    rec = ledger.record(j)
    if rec.n is None:
        raise DomainError(f"interface {j} has no index yet; pass r_dagger")
    n_prev = ledger.record(j - 1).n if j > 1 else ledger.ambient_index
    return normal_reflection(n_prev, rec.n)


def asymptotic_magnitude(ledger: LayerLedger, params: SystemParams, j: int, z,
                         r_dagger: float | None = None):
    """Leading-order ``|F(I*_j)(z)|^2`` near the peak of interface ``j``."""
    rec = ledger.record(j)
    r = _normal_coefficient(ledger, j, r_dagger)
    amp = (params.half_bandwidth * params.k_bar**2 * r * rec.transmission
           / (params.rho * rec.psi0))
    return amp**2 / (2**7 * math.pi**5) * np.abs(sinc_reference(ledger, params, j, z)) ** 2


def asymptotic_error_budget(ledger: LayerLedger, params: SystemParams, j: int) -> float:
    """Sum of the neglected relative orders for interface ``j`` (diagnostic only)."""
    rec = ledger.record(j)
    lk, kb = params.half_bandwidth, params.k_bar
    beam = params.a * kb / rec.psi0
    return (1 / (lk * rec.delta) + lk / kb + beam
            + lk * math.sqrt(params.gamma) * (1 + beam))
