"""Command-line front end: ``octlk simulate|reconstruct|grid|scan``.

Configuration is a YAML file with the sections ``system``, ``sample``,
``solver``, ``grid`` and ``io``.  Angles are given in degrees and lengths in
micrometres; both are converted once when the file is parsed.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DomainError, OctlkError
from .forward import quadrature_for, simulate_ascan
from .inverse import ReconstructOptions, prepare_step, reconstruct, scan_functionals
from .model import AScanSpectrum, LayeredSample, SystemParams
from .specfft import band_limited_transform

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3

_DEFAULTS = SystemParams.reference_instrument()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemConfig(_Strict):
    k1: float = Field(_DEFAULTS.k1, description="lower wavenumber [1/um]")
    k2: float = Field(_DEFAULTS.k2, description="upper wavenumber [1/um]")
    beam_width_um: float = Field(_DEFAULTS.beam_width, gt=0, description="beam width 2 sqrt(a)")
    r0_um: float = Field(_DEFAULTS.r0, description="focus position")
    rho_um: float = Field(_DEFAULTS.rho, gt=0, description="detector distance")
    theta_deg: float = Field(math.degrees(_DEFAULTS.theta), ge=0, description="acceptance angle")
    theta_omega_deg: float = Field(math.degrees(_DEFAULTS.theta_omega), ge=0,
                                   description="sample tilt")
    delta0_um: float = Field(_DEFAULTS.delta0, description="reference-arm offset")
    x_omega3_um: float = Field(_DEFAULTS.x_omega3, description="top-surface height")
    n_samples: int = Field(_DEFAULTS.n_samples, ge=2, description="spectral samples")

    def to_params(self) -> SystemParams:
        return SystemParams(
            k1=self.k1, k2=self.k2, a=(self.beam_width_um / 2) ** 2, r0=self.r0_um,
            rho=self.rho_um, theta=math.radians(self.theta_deg),
            theta_omega=math.radians(self.theta_omega_deg), delta0=self.delta0_um,
            x_omega3=self.x_omega3_um, n_samples=self.n_samples,
        )


class LayerConfig(_Strict):
    n: float = Field(..., ge=1)
    d_um: float = Field(..., gt=0)


class SampleConfig(_Strict):
    ambient_index: float = Field(1.0, ge=1)
    layers: list[LayerConfig] = Field(default_factory=list)

    def to_sample(self) -> LayeredSample:
        return LayeredSample(tuple((l.n, l.d_um) for l in self.layers), self.ambient_index)


class SolverConfig(_Strict):
    M: int = Field(401, ge=1, description="window points for the index solve")
    M_width: int = Field(301, ge=1, description="window points for the width search")
    threshold_ratio: float = Field(0.05, gt=0, lt=1, description="peak threshold")
    min_separation_um: float = Field(50.0, gt=0, description="minimum peak distance")
    d_resolution_um: float = Field(0.1, gt=0, description="width grid step")
    r_test_fraction: float = Field(0.75, gt=0, description="test coefficient scale")
    tie_tol: float = Field(1e-3, gt=0, description="relative tie between quartic minima")
    pad_factor: int = Field(64, ge=1, description="zero padding of the transform")
    max_interfaces: Optional[int] = Field(None, ge=1)
    global_refine: bool = Field(True, description="whole-spectrum fit after the layer pass")
    q0: Optional[float] = Field(None, gt=0, description="known intensity scale")

    def to_options(self, calibrate_n1: float | None = None) -> ReconstructOptions:
        return ReconstructOptions(
            M=self.M, M_width=self.M_width, threshold_ratio=self.threshold_ratio,
            min_separation=self.min_separation_um, d_resolution=self.d_resolution_um,
            r_test_fraction=self.r_test_fraction, tie_tol=self.tie_tol,
            pad_factor=self.pad_factor, max_interfaces=self.max_interfaces,
            global_refine=self.global_refine, q0=self.q0, calibrate_n1=calibrate_n1,
        )


class GridConfig(_Strict):
    layer: int = Field(2, ge=1, description="template layer whose index the map sets")
    size: int = Field(20, ge=1, description="edge length of the built-in map")


class IOConfig(_Strict):
    spectrum: Optional[str] = None
    map: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Strict):
    system: SystemConfig = Field(default_factory=SystemConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    @model_validator(mode="after")
    def _grid_layer_exists(self):
        if self.sample.layers and self.grid.layer > len(self.sample.layers):
            raise ValueError(f"grid.layer={self.grid.layer} but sample has "
                             f"{len(self.sample.layers)} layers")
        return self


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise CliError(f"config {path} is not valid YAML: {exc}", EXIT_CONFIG) from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must be a mapping", EXIT_CONFIG)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise CliError(f"invalid config {path}:\n{exc}", EXIT_CONFIG) from exc


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_spectrum(path, spectrum: AScanSpectrum) -> None:
    with _open_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "value"])
        for k, v in zip(spectrum.k_grid, spectrum.values):
            w.writerow([_fmt(k), _fmt(v)])


def read_spectrum(path, params: SystemParams) -> AScanSpectrum:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(f"cannot read spectrum {path}: {exc}", EXIT_IO) from exc
    if not rows:
        raise CliError(f"{path}:1: empty spectrum file", EXIT_IO)
    if [c.strip() for c in rows[0]] != ["k", "value"]:
        raise CliError(f"{path}:1: expected header 'k,value'", EXIT_IO)
    ks, vs = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise CliError(f"{path}:{line}: expected 2 fields, got {len(row)}", EXIT_IO)
        try:
            ks.append(float(row[0]))
            vs.append(float(row[1]))
        except ValueError as exc:
            raise CliError(f"{path}:{line}: {exc}", EXIT_IO) from exc
    if len(ks) != params.n_samples:
        raise CliError(f"{path}: {len(ks)} samples, system expects {params.n_samples}", EXIT_IO)
    k = np.array(ks)
    if not np.allclose(k, params.k_grid(), rtol=1e-12, atol=0):
        raise CliError(f"{path}: wavenumbers differ from the configured grid", EXIT_IO)
    return AScanSpectrum(params.k_grid(), np.array(vs))


def _open_out(path):
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def add_noise(values: np.ndarray, level: float, rng: np.random.Generator,
              gaussian: bool = False) -> np.ndarray:
    """Multiplicative noise: uniform in ``[-level, level]`` or Gaussian with that spread."""
    if level == 0:
        return values.copy()
    if gaussian:
        factor = rng.normal(0.0, level, values.shape)
    else:
        factor = rng.uniform(-level, level, values.shape)
    return values * (1 + factor)


def shape_map(size: int = 20) -> np.ndarray:
    """Two discs (1.45, 1.40) and an ellipse (1.10) on a 1.37 background."""
    l, m = np.meshgrid(np.arange(1, size + 1), np.arange(1, size + 1), indexing="ij")
    s = size / 20.0
    out = np.full((size, size), 1.37)
    out[(l - 6 * s) ** 2 + (m - 6 * s) ** 2 <= (3.5 * s) ** 2] = 1.45
    out[(l - 14 * s) ** 2 + (m - 14 * s) ** 2 <= (3.0 * s) ** 2] = 1.40
    out[((l - 15 * s) / (4.0 * s)) ** 2 + ((m - 5 * s) / (2.0 * s)) ** 2 <= 1] = 1.10
    return out


def read_map(path) -> np.ndarray:
    """Map file with header ``l,m,n_hat`` and 1-based indices covering a full rectangle."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(f"cannot read map {path}: {exc}", EXIT_IO) from exc
    if not rows or [c.strip() for c in rows[0]] != ["l", "m", "n_hat"]:
        raise CliError(f"{path}:1: expected header 'l,m,n_hat'", EXIT_IO)
    entries = {}
    for line, row in enumerate(rows[1:], start=2):
        try:
            l, m, n = int(row[0]), int(row[1]), float(row[2])
        except (ValueError, IndexError) as exc:
            raise CliError(f"{path}:{line}: {exc}", EXIT_IO) from exc
        entries[(l, m)] = n
    if not entries:
        raise CliError(f"{path}: empty map", EXIT_IO)
    L = max(l for l, _ in entries)
    M = max(m for _, m in entries)
    if len(entries) != L * M or min(min(key) for key in entries) < 1:
        raise CliError(f"{path}: map does not cover a full {L}x{M} grid", EXIT_CONFIG)
    grid = np.empty((L, M))
    for (l, m), n in entries.items():
        grid[l - 1, m - 1] = n
    return grid


def write_map(path, grid: np.ndarray) -> None:
    with _open_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l", "m", "n_hat"])
        for (l, m), n in np.ndenumerate(grid):
            w.writerow([l + 1, m + 1, _fmt(n)])


def _resolve_out(arg: str | None, cfg: RunConfig, default: str) -> str:
    return arg or cfg.io.out or default


def cmd_simulate(cfg: RunConfig, out: str, noise: float = 0.0, seed: int = 0,
                 gaussian: bool = False, profile: str | None = None) -> int:
    params = cfg.system.to_params()
    spec = simulate_ascan(cfg.sample.to_sample(), params)
    if noise:
        spec = AScanSpectrum(spec.k_grid, add_noise(spec.values, noise,
                                                    np.random.default_rng(seed), gaussian))
    write_spectrum(out, spec)
    if profile:
        prof = band_limited_transform(spec, pad_factor=cfg.solver.pad_factor)
        with _open_out(profile) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z", "re", "im", "abs"])
            for z, v in zip(prof.z_grid, prof.values):
                w.writerow([_fmt(z), _fmt(v.real), _fmt(v.imag), _fmt(abs(v))])
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, spectrum_path: str, out: str,
                    calibrate_n1: float | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    params = cfg.system.to_params()
    spec = read_spectrum(spectrum_path, params)
    res = reconstruct(spec, params, cfg.solver.to_options(calibrate_n1))
    with _open_out(out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "n", "d_um", "sign", "residual"])
        for j, ((n, d), sgn, r) in enumerate(zip(res.layers, res.signs, res.residuals), 1):
            w.writerow([j, _fmt(n), "" if d is None else _fmt(d), sgn, _fmt(r)])
    print(f"q0={_fmt(res.q0)}", file=stream)
    if res.fit_residual is not None:
        print(f"relative spectrum residual={res.fit_residual:.3e}", file=stream)
    print(f"interfaces={len(res.layers)} complete={res.complete}", file=stream)
    if not res.complete:
        print(f"stopped: {res.message}", file=stream)
        return EXIT_PARTIAL
    return EXIT_OK


def _grid_pixel(job):
    cfg_dict, l, m, n_hat, noise, seed, gaussian = job
    cfg = RunConfig.model_validate(cfg_dict)
    params = cfg.system.to_params()
    layers = [(x.n, x.d_um) for x in cfg.sample.layers]
    li = cfg.grid.layer - 1
    layers[li] = (n_hat, layers[li][1])
    sample = LayeredSample(tuple(layers), cfg.sample.ambient_index)
    quad = quadrature_for(params)
    spec = simulate_ascan(sample, params, quad)
    rng = np.random.default_rng(np.random.SeedSequence([seed, l, m]))
    values = add_noise(spec.values, noise, rng, gaussian)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            res = reconstruct(AScanSpectrum(spec.k_grid, values), params,
                              cfg.solver.to_options(), quad)
            n_rec = res.layers[li][0] if len(res.layers) > li else float("nan")
        except OctlkError:
            n_rec = float("nan")
    return l, m, n_hat, n_rec


def worker_count() -> int:
    env = os.environ.get("OCTLK_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            raise CliError(f"OCTLK_THREADS={env!r} is not an integer", EXIT_CONFIG)
    return cpus


def run_grid(cfg: RunConfig, grid: np.ndarray, noise: float = 0.0, seed: int = 0,
             gaussian: bool = False, workers: int | None = None):
    """Simulate and reconstruct every pixel; rows come back in ``(l, m)`` order."""
    if not cfg.sample.layers:
        raise CliError("grid mode needs a sample template", EXIT_CONFIG)
    cfg_dict = cfg.model_dump()
    jobs = [(cfg_dict, l + 1, m + 1, float(n), noise, seed, gaussian)
            for (l, m), n in np.ndenumerate(grid)]
    workers = workers or worker_count()
    if workers == 1:
        return [_grid_pixel(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_grid_pixel, jobs, chunksize=1))


def cmd_grid(cfg: RunConfig, map_path: str | None, out: str, noise: float = 0.0,
             seed: int = 0, gaussian: bool = False) -> int:
    grid = read_map(map_path) if map_path else shape_map(cfg.grid.size)
    rows = run_grid(cfg, grid, noise, seed, gaussian)
    failed = 0
    with _open_out(out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l", "m", "n2_hat", "n2_rec", "err"])
        for l, m, n_hat, n_rec in rows:
            failed += not math.isfinite(n_rec)
            w.writerow([l, m, _fmt(n_hat), _fmt(n_rec), _fmt(n_rec - n_hat)])
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_scan(cfg: RunConfig, spectrum_path: str, out: str, step: int,
             n_range: tuple[float, float, int], d_range: tuple[float, float, int] | None,
             calibrate_n1: float | None = None) -> int:
    params = cfg.system.to_params()
    spec = read_spectrum(spectrum_path, params)
    builder = prepare_step(spec, params, step, cfg.solver.to_options(calibrate_n1))
    ns = np.linspace(*n_range[:2], int(n_range[2]))
    if step == 1:
        ds = [None]
    else:
        if d_range is None:
            raise CliError("--d-range is required for step >= 2", EXIT_CONFIG)
        ds = np.linspace(*d_range[:2], int(d_range[2]))
    prev = builder.model.n_last if step > 1 else builder.model.indices[0]
    ns = ns[ns != prev]
    full, simp = scan_functionals(builder, ns, ds)
    with _open_out(out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "d", "J_full", "J_star"])
        for i, d in enumerate(ds):
            for jn, n in enumerate(ns):
                w.writerow([_fmt(n), "" if d is None else _fmt(d), _fmt(full[i, jn]),
                            _fmt(simp[i, jn])])
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["config keys (YAML) and defaults:"]
    for section, model in (("system", SystemConfig), ("solver", SolverConfig),
                           ("grid", GridConfig)):
        for name, f in model.model_fields.items():
            lines.append(f"  {section}.{name} = {f.default!r}"
                         + (f"  ({f.description})" if f.description else ""))
    lines.append("  sample.ambient_index = 1.0; sample.layers = [{n: ..., d_um: ...}, ...]")
    lines.append("  io.spectrum, io.map, io.out: default paths")
    lines.append("exit codes: 0 ok, 1 usage/config, 2 partial result, 3 I/O")
    lines.append("OCTLK_THREADS caps the number of grid workers")
    return "\n".join(lines)


def _calibration(text: str | None) -> float | None:
    if text is None:
        return None
    key, _, value = text.partition("=")
    if key.strip() != "n1" or not value:
        raise CliError("--calibrate expects n1=<value>", EXIT_CONFIG)
    try:
        return float(value)
    except ValueError as exc:
        raise CliError(f"--calibrate: {exc}", EXIT_CONFIG) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octlk", description="Swept-source OCT simulation and "
                     "layer-by-layer reconstruction of layered samples.",
                     epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="output CSV path")

    def noisy(p):
        p.add_argument("--noise", type=float, default=0.0,
                       help="multiplicative noise level p (uniform in [-p, p])")
        p.add_argument("--gaussian", action="store_true", help="Gaussian noise instead")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="write a simulated spectrum k,value")
    common(p)
    noisy(p)
    p.add_argument("--profile", help="also write the depth profile z,re,im,abs")

    p = sub.add_parser("reconstruct", help="recover j,n,d_um,sign,residual")
    common(p)
    p.add_argument("--spectrum", help="input spectrum CSV (default io.spectrum)")
    p.add_argument("--calibrate", metavar="n1=VALUE", help="known top-layer index")

    p = sub.add_parser("grid", help="simulate and reconstruct a lateral index map")
    common(p)
    noisy(p)
    p.add_argument("--map", help="map CSV l,m,n_hat (default: built-in shapes)")

    p = sub.add_parser("scan", help="dump both functionals of one step on an (n, d) grid")
    common(p)
    p.add_argument("--spectrum", help="input spectrum CSV (default io.spectrum)")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--n-range", type=float, nargs=3, required=True,
                   metavar=("LO", "HI", "COUNT"))
    p.add_argument("--d-range", type=float, nargs=3, metavar=("LO", "HI", "COUNT"))
    p.add_argument("--calibrate", metavar="n1=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(cfg, _resolve_out(args.out, cfg, "spectrum.csv"), args.noise,
                                args.seed, args.gaussian, args.profile)
        spectrum = getattr(args, "spectrum", None) or cfg.io.spectrum
        if args.command == "reconstruct":
            if not spectrum:
                raise CliError("no spectrum given (--spectrum or io.spectrum)", EXIT_CONFIG)
            return cmd_reconstruct(cfg, spectrum, _resolve_out(args.out, cfg, "layers.csv"),
                                   _calibration(args.calibrate))
        if args.command == "grid":
            return cmd_grid(cfg, args.map or cfg.io.map, _resolve_out(args.out, cfg, "grid.csv"),
                            args.noise, args.seed, args.gaussian)
        if not spectrum:
            raise CliError("no spectrum given (--spectrum or io.spectrum)", EXIT_CONFIG)
        return cmd_scan(cfg, spectrum, _resolve_out(args.out, cfg, "scan.csv"), args.step,
                        tuple(args.n_range), tuple(args.d_range) if args.d_range else None,
                        _calibration(args.calibrate))
    except CliError as exc:
        print(f"octlk: {exc}", file=sys.stderr)
        return exc.code
    except DomainError as exc:
        print(f"octlk: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OctlkError as exc:
        print(f"octlk: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
