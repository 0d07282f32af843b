"""Command-line front end: config files, subcommands and plot-data emission.

Configs are TOML files with dotted sections (``[grid]``, ``[scheme]``, ...).
Any key can be overridden on the command line with ``--set section.key=value``
where ``value`` uses TOML syntax.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .collision import CollisionKernel, ScatterField
from .errors import ConfigError, EnsembleError, NumericalError
from .grid import StaggeredGrid1D, VelocityQuadrature
from .harness import (
    PAPER_REGIMES,
    SCHEME_KINDS,
    EnsembleConfig,
    Problem,
    make_noise,
    paper_initial_density,
    relative_l2_gap,
    run_ensemble,
    telegraph_energy_curve,
)
from .noise import constant_noise
from .scheme_smm import cfl_dt
from .stability import scan_stability

log = logging.getLogger("stochap")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_ACCEPTANCE = 0, 2, 3, 4


@dataclass
class GridSection:
    num_cells: int = 200
    domain_length: float = 1.0


@dataclass
class SchemeSection:
    kinds: list = field(default_factory=lambda: ["smm", "explicit_kinetic"])
    epsilon: float = 1.0
    dt: float = 0.0  # 0 selects the step from the CFL bounds
    cfl_safety: float = 0.9
    velocity_nodes: int = 16  # 2 selects the two-point (telegraph) velocity set
    anisotropy: float = 0.0
    sigma: float = 1.0
    initial_density: str = "paper"  # paper | constant
    initial_micro: str = "zero"  # zero | well_prepared


@dataclass
class NoiseSection:
    kind: str = "paper"  # paper | constant | none
    num_modes: int = 200
    raw_wavenumbers: bool = False


@dataclass
class EnsembleSection:
    realizations: int = 100
    master_seed: int = 20240501
    output_times: list = field(default_factory=lambda: [0.1, 0.3, 0.6, 1.0])
    workers: int = 1
    chunk_size: int = 10
    coupled: bool = True


@dataclass
class OutputSection:
    directory: str = "stochap_out"


@dataclass
class CompareSection:
    tolerance: float = 5e-2


@dataclass
class StabilitySection:
    dt_min: float = 1e-6
    dt_max: float = 1e-2
    dt_count: int = 41
    dx: list = field(default_factory=lambda: [0.05, 0.01, 0.005])
    epsilon: list = field(default_factory=lambda: [1.0, 0.1, 0.01, 1e-4])
    n_theta: int = 201


@dataclass
class EnergySection:
    realizations: int = 200
    master_seed: int = 7
    epsilon: float = 0.1
    num_cells: int = 100
    horizon: float = 1.0
    max_rate: float = 2.0
    refinement_tolerance: float = 0.2


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    output: OutputSection = field(default_factory=OutputSection)
    compare: CompareSection = field(default_factory=CompareSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    energy: EnergySection = field(default_factory=EnergySection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        g, s, n, e = self.grid, self.scheme, self.noise, self.ensemble
        if g.num_cells < 3:
            raise ConfigError("need at least 3 cells", key="grid.num_cells")
        if not g.domain_length > 0:
            raise ConfigError("must be positive", key="grid.domain_length")
        if not s.kinds:
            raise ConfigError("at least one scheme kind is required", key="scheme.kinds")
        for kind in s.kinds:
            if kind not in SCHEME_KINDS:
                raise ConfigError(f"unknown kind {kind!r}; choose from {list(SCHEME_KINDS)}", key="scheme.kinds")
        if len(set(s.kinds)) != len(s.kinds):
            raise ConfigError("duplicate scheme kinds", key="scheme.kinds")
        if not (s.epsilon > 0 and math.isfinite(s.epsilon)):
            raise ConfigError("epsilon must be positive", key="scheme.epsilon")
        if s.dt < 0:
            raise ConfigError("dt must be nonnegative (0 = automatic)", key="scheme.dt")
        if not 0 < s.cfl_safety <= 1:
            raise ConfigError("must lie in (0, 1]", key="scheme.cfl_safety")
        if s.velocity_nodes < 2 or s.velocity_nodes % 2:
            raise ConfigError("must be an even number >= 2", key="scheme.velocity_nodes")
        if "telegraph" in s.kinds and s.velocity_nodes != 2:
            raise ConfigError("telegraph runs need velocity_nodes = 2", key="scheme.velocity_nodes")
        if not 0 <= s.anisotropy < 1:
            raise ConfigError("must lie in [0, 1)", key="scheme.anisotropy")
        if not s.sigma > 0:
            raise ConfigError("must be positive", key="scheme.sigma")
        if s.initial_density not in ("paper", "constant"):
            raise ConfigError("must be 'paper' or 'constant'", key="scheme.initial_density")
        if s.initial_micro not in ("zero", "well_prepared"):
            raise ConfigError("must be 'zero' or 'well_prepared'", key="scheme.initial_micro")
        if n.kind not in ("paper", "constant", "none"):
            raise ConfigError("must be 'paper', 'constant' or 'none'", key="noise.kind")
        if n.kind == "paper" and n.num_modes != 0 and (n.num_modes < 2 or n.num_modes % 2):
            raise ConfigError("must be 0 or an even number >= 2", key="noise.num_modes")
        if e.realizations < 1:
            raise ConfigError("must be >= 1", key="ensemble.realizations")
        if e.master_seed < 0:
            raise ConfigError("must be nonnegative", key="ensemble.master_seed")
        if any(t < 0 for t in e.output_times) or list(e.output_times) != sorted(e.output_times):
            raise ConfigError("must be sorted and nonnegative", key="ensemble.output_times")
        if e.workers < 1:
            raise ConfigError("must be >= 1", key="ensemble.workers")
        if e.chunk_size < 1:
            raise ConfigError("must be >= 1", key="ensemble.chunk_size")
        if not self.compare.tolerance > 0:
            raise ConfigError("must be positive", key="compare.tolerance")
        st = self.stability
        if not 0 < st.dt_min <= st.dt_max or st.dt_count < 1 or st.n_theta < 2:
            raise ConfigError("need 0 < dt_min <= dt_max, dt_count >= 1, n_theta >= 2", key="stability")
        if not st.dx or not st.epsilon or min(st.dx) <= 0 or min(st.epsilon) <= 0:
            raise ConfigError("dx and epsilon lists must be nonempty and positive", key="stability")
        en = self.energy
        if en.realizations < 1 or en.num_cells < 3 or not en.epsilon > 0 or not en.horizon > 0:
            raise ConfigError("need realizations >= 1, num_cells >= 3, epsilon > 0, horizon > 0", key="energy")
        return self


def _coerce(value, default, key):
    """Check a parsed TOML value against the type of the default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=key)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key=key)
        if default and isinstance(default[0], str):
            if not all(isinstance(v, str) for v in value):
                raise ConfigError("expected a list of strings", key=key)
            return list(value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError("expected a list of numbers", key=key)
        return [float(v) for v in value]
    raise ConfigError(f"unsupported value {value!r}", key=key)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in data.items():
        if section not in cfg.__dataclass_fields__:
            raise ConfigError("unknown section", key=section)
        if not isinstance(values, dict):
            raise ConfigError("expected a table", key=section)
        target = getattr(cfg, section)
        for name, value in values.items():
            key = f"{section}.{name}"
            if name not in target.__dataclass_fields__:
                raise ConfigError("unknown key", key=key)
            setattr(target, name, _coerce(value, getattr(target, name), key))
    return cfg.validate()


def _parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key.count(".") != 1:
        raise ConfigError("override keys must be section.key", key=key)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare words are taken as strings
    return key, value


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a TOML file (or start from defaults) and apply ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for text in overrides:
        key, value = _parse_override(text)
        section, name = key.split(".")
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise ConfigError("expected a table", key=section)
        data[section][name] = value
    return config_from_dict(data)


_TOML_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\t": "\\t", "\n": "\\n", "\f": "\\f", "\r": "\\r"}


def _toml_string(text: str) -> str:
    out = []
    for ch in text:
        if ch in _TOML_ESCAPES:
            out.append(_TOML_ESCAPES[ch])
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".eni") else text + ".0"
    if isinstance(value, str):
        return _toml_string(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def build_problem(cfg: RunConfig) -> Problem:
    s = cfg.scheme
    grid = StaggeredGrid1D(cfg.grid.num_cells, cfg.grid.domain_length)
    quad = VelocityQuadrature.two_point() if s.velocity_nodes == 2 else VelocityQuadrature.gauss_legendre(s.velocity_nodes)
    kernel = CollisionKernel.linear_anisotropic(s.anisotropy)
    rho0 = paper_initial_density(grid) if s.initial_density == "paper" else np.ones(grid.num_cells)
    noise = make_noise(grid, cfg.noise.kind, cfg.noise.num_modes, cfg.noise.raw_wavenumbers)
    return Problem(grid, s.epsilon, rho0, noise, quad, kernel, ScatterField.constant(grid, s.sigma), s.initial_micro)


def build_ensemble(cfg: RunConfig) -> EnsembleConfig:
    e = cfg.ensemble
    return EnsembleConfig(build_problem(cfg), tuple(cfg.scheme.kinds), e.realizations, e.master_seed,
                          tuple(e.output_times), cfg.scheme.dt or None, cfg.scheme.cfl_safety,
                          e.coupled, e.workers, e.chunk_size)


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _csv_name(kind: str, index: int, time: float) -> str:
    return f"{kind}_t{index:02d}.csv"


def emit_csv(stats, directory, config: RunConfig | None = None) -> list:
    """Write one CSV per (scheme, output time), a gnuplot overlay script and a metadata sidecar."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}", key="output.directory") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable", key="output.directory")
    written = []
    for kind, s in stats.schemes.items():
        for j, t in enumerate(stats.times):
            table = np.column_stack([stats.x, s.mean[j], s.variance[j], s.minimum[j], s.maximum[j]])
            path = out / _csv_name(kind, j, t)
            np.savetxt(path, table, fmt="%.17g", delimiter=",", header="x,mean,variance,min,max", comments="")
            written.append(path)
    if stats.times:
        script = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 'x'",
                  "set ylabel 'mean rho'"]
        for j, t in enumerate(stats.times):
            script.append(f"set title 't = {t:.6g}'")
            plots = [f"'{_csv_name(kind, j, t)}' using 1:2 with lines title '{kind}'" for kind in stats.schemes]
            script.append("plot " + ", ".join(plots))
            script.append("pause -1")
        path = out / "overlay.gp"
        path.write_text("\n".join(script) + "\n")
        written.append(path)
    meta = dict(stats.metadata)
    meta["times"] = list(stats.times)
    meta["files"] = {kind: [_csv_name(kind, j, t) for j, t in enumerate(stats.times)] for kind in stats.schemes}
    meta["git_describe"] = git_describe()
    if config is not None:
        meta["config"] = config.to_dict()
    path = out / "metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")
    written.append(path)
    return written


def _gaps(stats) -> dict:
    kinds = list(stats.schemes)
    ref = kinds[0]
    return {other: [relative_l2_gap(stats.schemes[ref].mean[j], stats.schemes[other].mean[j])
                    for j in range(len(stats.times))] for other in kinds[1:]}


def _report_gaps(stats, tolerance) -> bool:
    ok = True
    ref = next(iter(stats.schemes))
    for other, values in _gaps(stats).items():
        for t, gap in zip(stats.times, values):
            flag = gap <= tolerance
            ok &= flag
            print(f"t={t:<10.6g} gap({ref} vs {other}) = {gap:.3e}  {'ok' if flag else 'FAIL'}")
    return ok


def cmd_simulate(cfg: RunConfig, args) -> int:
    stats = run_ensemble(build_ensemble(cfg))
    files = emit_csv(stats, cfg.output.directory, cfg)
    for k, s in stats.schemes.items():
        print(f"{k}: dt={s.dt:.6g} survivors={s.count} failures={len(s.failures)}")
    print(f"wrote {len(files)} files to {cfg.output.directory}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    if len(cfg.scheme.kinds) < 2:
        raise ConfigError("compare needs at least two scheme kinds", key="scheme.kinds")
    stats = run_ensemble(build_ensemble(cfg))
    emit_csv(stats, cfg.output.directory, cfg)
    return EXIT_OK if _report_gaps(stats, cfg.compare.tolerance) else EXIT_ACCEPTANCE


def regime_config(regime: str, cfg: RunConfig) -> RunConfig:
    """Overwrite the physical setup of ``cfg`` with one of the reported regimes."""
    eps, kinds, times = PAPER_REGIMES[regime]
    cfg.scheme.epsilon = eps
    cfg.scheme.kinds = list(kinds)
    cfg.scheme.initial_density = "paper"
    cfg.scheme.initial_micro = "zero"
    cfg.ensemble.output_times = [float(t) for t in times(eps)]
    return cfg.validate()


def cmd_paper_experiment(cfg: RunConfig, args) -> int:
    cfg = regime_config(args.regime, cfg)
    stats = run_ensemble(build_ensemble(cfg))
    stats.metadata["regime"] = args.regime
    emit_csv(stats, cfg.output.directory, cfg)
    return EXIT_OK if _report_gaps(stats, cfg.compare.tolerance) else EXIT_ACCEPTANCE


def cmd_stability_scan(cfg: RunConfig, args) -> int:
    st = cfg.stability
    dts = np.geomspace(st.dt_min, st.dt_max, st.dt_count)
    report = scan_stability(dts, st.dx, st.epsilon, st.n_theta)
    cfl_points = [p for p in report.points if p.cfl_ok]
    bad_q = [p for p in cfl_points if p.q1 < -1e-12]
    print(f"points={len(report)} cfl_ok={len(cfl_points)} violations={len(report.violations)} "
          f"unstable_outside_cfl={len(report.unstable_outside_cfl)} q1_negative={len(bad_q)}")
    for p in report.violations[:10]:
        print(f"  violation dt={p.dt:.3e} dx={p.dx} eps={p.epsilon} max|A|^2={p.max_norm_sq:.15f}")
    return EXIT_OK if not report.violations and not bad_q else EXIT_ACCEPTANCE


def energy_test(cfg: RunConfig):
    """Telegraph energy growth at a CFL-compliant step and at half that step on coupled paths."""
    en = cfg.energy
    grid = StaggeredGrid1D(en.num_cells, 1.0)
    problem = Problem(grid, en.epsilon, 1.0 - np.cos(2.0 * np.pi * grid.primal_nodes), constant_noise(grid),
                      quad=VelocityQuadrature.two_point())
    dt_max = cfg.scheme.cfl_safety * cfl_dt(grid.dx, en.epsilon, 1.0, 1.0, "telegraph")
    n_steps = math.ceil(en.horizon / dt_max)
    dt = en.horizon / n_steps
    coarse = telegraph_energy_curve(problem, dt, en.horizon, en.realizations, en.master_seed, aggregate=2)
    fine = telegraph_energy_curve(problem, dt / 2, en.horizon, en.realizations, en.master_seed, aggregate=1)
    return coarse, fine


def energy_verdict(coarse, fine, max_rate: float, tolerance: float) -> dict:
    L, L_half = coarse.growth_rate, fine.growth_rate
    scale = max(abs(L), abs(L_half))
    drift = abs(L - L_half) / scale if scale > 0 else 0.0
    bound = coarse.bound_holds(L) and fine.bound_holds(L_half)
    return {"rate": L, "rate_half": L_half, "drift": drift, "bound": bound,
            "ok": bound and L <= max_rate and L_half <= max_rate and drift <= tolerance}


def cmd_energy_test(cfg: RunConfig, args) -> int:
    coarse, fine = energy_test(cfg)
    v = energy_verdict(coarse, fine, cfg.energy.max_rate, cfg.energy.refinement_tolerance)
    print(f"dt={coarse.dt:.6g} L={v['rate']:.4f} | dt/2 L={v['rate_half']:.4f} | drift={v['drift']:.2%} "
          f"| bound={'ok' if v['bound'] else 'FAIL'} | slope={coarse.slope:.4f}")
    return EXIT_OK if v["ok"] else EXIT_ACCEPTANCE


COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "paper-experiment": cmd_paper_experiment,
    "stability-scan": cmd_stability_scan,
    "energy-test": cmd_energy_test,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        if name == "paper-experiment":
            p.add_argument("--regime", choices=sorted(PAPER_REGIMES), default="kinetic_eps1")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.dump_config:
            print(serialize_config(cfg), end="")
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, EnsembleError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    sys.exit(main())
