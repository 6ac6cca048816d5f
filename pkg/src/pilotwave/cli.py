"""Command-line entry point: ``pilotwave <scenario> --config PATH``.

Exit codes: 0 success, 2 configuration rejected (nothing written),
3 numerical failure or invalid run, 4 I/O failure. Outputs of a failed run
are renamed with an ``.invalid`` suffix.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCENARIOS, ScenarioConfig, mode_tuple, parse_config
from .errors import ConfigError, NumericalError
from .io import write_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "PILOTWAVE_OUT"
DEFAULT_OUT = "pilotwave-out"


class Outputs:
    """Tracks files written by a run so a failure can mark them invalid."""

    def __init__(self, root: Path, chash: str):
        self.root = root
        self.chash = chash
        self.paths = []

    def csv(self, name, columns, rows, comments=()):
        self.paths.append(write_csv(self.root / name, columns, rows, self.chash, comments))

    def invalidate(self):
        for p in self.paths:
            if p.exists():
                os.replace(p, p.with_name(p.name + ".invalid"))


# ---------------------------------------------------------------- scenarios


def _box_state(dim, length, max_mode, phase_seed):
    from .spectral import BOX, BasisSpec, SpectralState

    basis = BasisSpec(BOX, dim, length)
    if dim == 1:
        modes = [(i,) for i in range(1, max_mode + 1)]
    else:
        modes = [(i, j) for i in range(1, max_mode + 1) for j in range(1, max_mode + 1)]
    return basis, SpectralState.random_phases(basis, modes, seed=phase_seed)


def _fit_summary(series):
    """Exponential-fit figures, or the reason no fit was possible (too few points above the floor)."""
    from .errors import FitDomainError

    try:
        fit = series.fit()
    except FitDomainError as exc:
        return {"fit_error": str(exc)}
    return {"tau": fit.tau, "r2": fit.r2, "fit_rejected": fit.rejected}


def run_relax(cfg: ScenarioConfig, out: Outputs):
    from .ensemble import BornDensity, CoarseGrid, relaxation_series
    from .integrate import StepControl
    from .spectral import SpectralState

    p = cfg.params
    basis, state = _box_state(p.dimension, p.length, p.max_mode, p.phase_seed)
    if p.initial == "born":
        spec = BornDensity(state)
    else:
        spec = BornDensity(SpectralState.eigenstate(basis, mode_tuple(p.initial_mode, p.dimension)))
    grid = CoarseGrid.for_state(state, p.cells)
    times = np.linspace(0.0, p.t_end, p.n_times)
    ctrl = StepControl(rtol=p.rtol, atol=p.atol)
    series = relaxation_series(state, spec, p.N, cfg.seed, grid, times, ctrl, cfg.workers, p.n_boot)
    series.write_csv(out.root / "h_series.csv", out.chash)
    out.paths.append(out.root / "h_series.csv")
    summary = {"H_initial": series.values[0], "H_final": series.values[-1], "noise_floor": series.floor}
    if p.initial == "eigen":
        summary.update(_fit_summary(series))
    return summary


def run_measure(cfg: ScenarioConfig, out: Outputs):
    from .measure import PointerSetup, ensemble_outcomes
    from .integrate import StepControl
    from .spectral import RING, BasisSpec, SpectralState

    p = cfg.params
    n1, n2 = mode_tuple(p.modes, 2)
    basis = BasisSpec(RING, 1, 2 * np.pi)
    system = SpectralState.from_terms(basis, [((n1,), np.sqrt(p.weight)), ((n2,), np.sqrt(1 - p.weight))])
    setup = PointerSetup(a=p.coupling, sigma=p.sigma, T=p.duration)
    stats = ensemble_outcomes(
        system, p.observable, setup, None, p.N, cfg.seed, StepControl(rtol=p.rtol, atol=p.atol), cfg.workers
    )
    out.csv("outcomes.csv", ["i", "x0", "y0", "outcome", "y_T", "separated"], stats.rows())
    out.csv(
        "frequencies.csv",
        ["value", "count", "frequency", "sigma_binomial"],
        list(zip(stats.values, stats.counts, stats.frequencies, stats.sigma)),
    )
    return {"undeclared": stats.undeclared, "trapped": stats.trapped, "frequencies": stats.frequencies.tolist()}


def run_signal(cfg: ScenarioConfig, out: Outputs):
    from .ensemble import BornDensity, ProductDensity, UniformDensity
    from .nonlocality import Switch, entangled_pair, signal_experiment
    from .spectral import BOX, BasisSpec, SpectralState

    p = cfg.params
    state = entangled_pair(switch=Switch(p.switch_time, "field", force=p.force, modes=p.field_modes))
    L = state.basis_a.length
    if p.spec == "equilibrium":
        spec = BornDensity(state.segments()[0][1])
    else:
        # A in the Born marginal of its ground term, B confined to the left half
        spec = ProductDensity([BornDensity(SpectralState.eigenstate(BasisSpec(BOX, 1, L), 1)), UniformDensity([[0, L / 2]])])
    res = signal_experiment(state, spec, p.N, cfg.seed, p.t_probe, p.cells, None, cfg.workers, p.n_null)
    out.csv("marginals.csv", ["cell", "lo", "hi", "p_switch", "p_free"], res.rows())
    return {"l1": res.l1, "sigma": res.sigma, "p_value": res.p_value, "n_used": res.n_used, "trapped": res.trapped}


def run_sterngerlach(cfg: ScenarioConfig, out: Outputs):
    from .measure import sg_equilibrium_start, stern_gerlach

    p = cfg.params
    z0 = sg_equilibrium_start(p.width, p.N, cfg.seed)
    res = stern_gerlach(np.sqrt(p.up_weight), np.sqrt(1 - p.up_weight), p.width, p.kick, p.t_end, z0, workers=cfg.workers)
    out.csv("trajectories.csv", ["i", "z0", "z_T", "outcome"], [(i, z0[i], res.z[i, -1], res.outcome[i]) for i in range(z0.size)])
    return {"up_fraction": res.up_fraction, "separated": res.separated}


def run_bohm(cfg: ScenarioConfig, out: Outputs):
    from .ensemble import BornDensity, bohm_instability
    from .spectral import SpectralState

    p = cfg.params
    basis, state = _box_state(2, np.pi, p.max_mode, p.phase_seed)
    spec = BornDensity(SpectralState.eigenstate(basis, (1, 1)))
    series, _ = bohm_instability(state, spec, p.N, cfg.seed, p.kick, p.periods, p.n_times, workers=cfg.workers)
    out.csv("momentum_gap.csv", ["t", "mean_gap", "median_gap", "sigma_boot", "alive_frac"], series.rows())
    return {"non_decreasing": series.non_decreasing(), "final_mean_gap": series.mean[-1]}


def run_subq(cfg: ScenarioConfig, out: Outputs):
    from .measure import subquantum_measure
    from .spectral import BOX, BasisSpec, SpectralState

    p = cfg.params
    system = SpectralState.from_terms(BasisSpec(BOX, 1), [((1,), np.sqrt(0.5)), ((2,), np.sqrt(0.5))])
    res = subquantum_measure(system, p.sigma, p.width, p.a_dt, 1.0, p.N, cfg.seed, workers=cfg.workers)
    out.csv("estimates.csv", ["i", "x_true", "x_estimate"], [(i, a, b) for i, (a, b) in enumerate(zip(res.x_true, res.x_estimate))])
    return {"mean_abs_error": res.mean_abs_error, "disturbance": res.disturbance, "conditional_fidelity": res.conditional_fidelity}


def run_cosmo(cfg: ScenarioConfig, out: Outputs):
    from .cosmo import Expansion, ModeOscillator, mode_grid, propagate, relaxation_with_power
    from .ensemble import BornDensity

    p = cfg.params
    ex = Expansion(p.expansion, hubble=p.hubble, t0=p.t0, power=p.power, a0=p.a0)
    levels = [(i, j) for i in range(p.superposed) for j in range(p.superposed)]
    mode = ModeOscillator.superposition(p.k, levels, seed=p.phase_seed, n=p.levels, t=p.t_start, expansion=ex)
    history = propagate(mode, ex, p.t_end)
    if p.initial == "born":
        spec = BornDensity(history)
    else:
        ground = ModeOscillator.superposition(p.k, [(0, 0)], n=p.levels, t=p.t_start, mw_ref=mode.mw_ref)
        spec = BornDensity(propagate(ground, ex, p.t_end))
    times = np.linspace(p.t_start, p.t_end, p.n_times)
    res, _ = relaxation_with_power(history, spec, p.N, cfg.seed, mode_grid(history, p.cells), times, workers=cfg.workers)
    out.csv("mode_relaxation.csv", ["t", "H", "sigma_boot", "xi", "xi_sigma", "leakage"], res.rows())
    summary = {"H_initial": res.series.values[0], "H_final": res.series.values[-1], "xi_final": res.xi[-1],
               "hubble_ratio": ex.hubble_ratio(p.k, p.t_start), "leakage": history.leakage}
    if p.initial == "ground":
        summary.update(_fit_summary(res.series))
    return summary


RUNNERS = {
    "relax": run_relax,
    "measure": run_measure,
    "signal": run_signal,
    "sterngerlach": run_sterngerlach,
    "bohm-instability": run_bohm,
    "subq": run_subq,
    "cosmo": run_cosmo,
}


# ---------------------------------------------------------------- driver


def _versions():
    import numba
    import pydantic
    import scipy

    return {
        "pilotwave": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pydantic": pydantic.__version__,
    }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    return x


def load_config(scenario, path, seed=None, workers=None, out=None) -> ScenarioConfig:
    text = "" if path is None else Path(path).read_text()
    cfg = parse_config(text, scenario)
    try:
        return cfg.replace_run(seed=seed, workers=workers, out=out)
    except Exception as exc:  # pydantic rejects bad overrides
        raise ConfigError([(None, f"command-line override rejected: {exc}")]) from None


def build_parser():
    ap = argparse.ArgumentParser(prog="pilotwave", description="Pilot-wave trajectory experiments.")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", type=Path, help="scenario config file (defaults apply when omitted)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", help=f"output directory (else [run] out, ${OUT_ENV}, ./{DEFAULT_OUT})")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.scenario, args.config, args.seed, args.workers, args.out)
    except ConfigError as exc:
        for line, msg in exc.violations:
            print(f"config error: line {line}: {msg}" if line else f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    root = Path(cfg.run.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.ini").write_text(f"# config_hash={cfg.hash}\n" + cfg.canonical())
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    outputs = Outputs(root, cfg.hash)
    outputs.paths.append(root / "config.ini")
    summary = {"scenario": cfg.scenario, "config_hash": cfg.hash, "seed": cfg.seed, "workers": cfg.workers,
               "versions": _versions()}
    start = time.perf_counter()
    code, status = EXIT_OK, "ok"
    try:
        summary["results"] = RUNNERS[cfg.scenario](cfg, outputs)
    except NumericalError as exc:
        code, status = EXIT_NUMERICAL, f"invalid: {type(exc).__name__}: {exc}"
    except OSError as exc:
        code, status = EXIT_IO, f"io error: {exc}"
    summary["status"] = status
    summary["wall_time_s"] = time.perf_counter() - start
    if code != EXIT_OK:
        print(status, file=sys.stderr)
        outputs.invalidate()
    try:
        name = "summary.json" if code == EXIT_OK else "summary.json.invalid"
        (root / name).write_text(json.dumps(_jsonable(summary), indent=2) + "\n")
    except OSError as exc:
        print(f"cannot write summary: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
