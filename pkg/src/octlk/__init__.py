"""Swept-source OCT forward model and layer-by-layer inversion for layered samples."""

from .errors import (
    AccuracyWarning,
    AmbiguousSignError,
    DegenerateGeometryError,
    DegenerateWindowError,
    DomainError,
    GridMismatchError,
    NoContrastError,
    NoLayerError,
    NoSignalError,
    OctlkError,
    QuadratureError,
    ReconstructionError,
    RegimeWarning,
    TotalInternalReflectionError,
    WindowCollisionWarning,
)
from .forward import (
    acceptance_disk,
    closed_form_first_interface,
    fresnel_reflection,
    interface_contribution,
    normal_reflection,
    phase_factor,
    simplified_interface_contribution,
    simulate_ascan,
    snell_chain,
    transmission_product,
)
from .inverse import (
    ReconstructOptions,
    calibrate_q0,
    functional_full,
    functional_simplified,
    prepare_step,
    reconstruct,
    refine_global,
    sign_determination,
    solve_index_deeper,
    solve_index_first,
    width_search,
)
from .model import (
    AScanSpectrum,
    DepthProfile,
    LayeredSample,
    LayerLedger,
    ReconstructionResult,
    SystemParams,
    derive_small_quantities,
    ledger_advance,
)
from .specfft import band_limited_transform, detect_peaks, select_window, subtract_contribution

__all__ = [name for name in dir() if not name.startswith("_")]
