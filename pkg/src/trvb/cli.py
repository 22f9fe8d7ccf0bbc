"""Command-line driver: ``trvb {spectrum,ctmrg,ed,quench,tripartite,selftest}``.

Every subcommand reads its parameters from flags or from an INI-style config
file (``--config run.ini``; section named after the subcommand, keys equal to
the long flag names), or from the JSON manifest of an earlier run.  Flags
given explicitly win over the file.  Results
are written as CSV into the output directory (``--out``, else the
``TRVB_OUTPUT_DIR`` environment variable, else ``./trvb-results``) together
with a JSON run manifest.

Exit codes: 0 success, 2 usage error, 3 budget refusal, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cylinder import MemoryBudgetError
from .lattice import BudgetExceeded
from .tensor_core import ConvergenceError

SCHEMA_VERSION = 1
OUTPUT_ENV = "TRVB_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_NUMERICAL = 0, 2, 3, 4

SPECTRUM_MODELS = ("square", "toriccode", "diluted", "interpolation", "restricted", "honeycomb", "triangular")
SPECTRUM_HEADER = ["model", "theta", "z", "alpha", "L", "Q", "n", "re_lambda", "im_lambda"]
ENTROPY_HEADER = ["model", "params", "L", "S_nats"]


class UsageError(ValueError):
    """Invalid command-line or config input (exit code 2)."""


# ---------------------------------------------------------------------------
# formatting and persistence


def fmt(x):
    """Serialize a value for CSV; floats keep 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path: Path, header, rows, schema):
    """CSV with a leading ``# schema=<name>/<version>`` comment line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}/{SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts of strings."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_manifest(path: Path, command, config, timings, outputs, status="ok", error=""):
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items()) if k not in ("func",)},
        "code_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings_s": timings,
        "outputs": [str(p) for p in outputs],
        "status": status,
        "error": error,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def output_dir(arg):
    return Path(arg or os.environ.get(OUTPUT_ENV) or "trvb-results")


# ---------------------------------------------------------------------------
# parsing helpers


def parse_float_list(text):
    """``"0.1,0.2"``, ``"0.2:3.0:0.05"`` (inclusive range) or a single number."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"range {text!r} must be start:stop:step")
        a, b, h = (float(p) for p in parts)
        if h <= 0 or b < a:
            raise UsageError(f"range {text!r} needs step > 0 and stop >= start")
        n = int(math.floor((b - a) / h + 1e-9)) + 1
        return [round(a + i * h, 12) for i in range(n)]
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def parse_int_list(text):
    """``"3,6,9"`` or ``"2..6"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..")
            return list(range(int(a), int(b) + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None


def parse_angle(text):
    """A float, optionally in units of pi (``"0.49pi"``, ``"pi/4"``)."""
    t = str(text).strip().replace(" ", "")
    try:
        if "pi" in t:
            num, _, den = t.partition("/")
            coef = num.replace("*", "").replace("pi", "")
            val = (float(coef) if coef not in ("", "+") else 1.0) * math.pi
            return val / float(den) if den else val
        return float(t)
    except ValueError:
        raise UsageError(f"cannot parse angle {text!r}") from None


# ---------------------------------------------------------------------------
# models


def model_tensor(model, theta=0.0, z=0.0, alpha=1.0):
    """Bulk norm tensor of a named model."""
    from . import tensors as tn

    if model == "square":
        return tn.build_square_trvb_tensor(theta, "double")
    if model == "toriccode":
        return tn.build_toric_code_tensor()
    if model == "diluted":
        return tn.build_diluted_double_tensor(theta, z)
    if model == "interpolation":
        return tn.build_interpolation_tensor(theta, alpha)
    if model == "restricted":
        return tn.build_restricted_trvb_tensor()
    if model == "honeycomb":
        return tn.build_honeycomb_tensor()
    if model == "triangular":
        return tn.triangular_effective_tensor()
    raise UsageError(f"unknown model {model!r}; choose from {', '.join(SPECTRUM_MODELS)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_spectrum(cfg, out: Path):
    from .cylinder import TransferOperator, correlation_length, half_cylinder_entropy, transfer_spectrum

    model = cfg["model"]
    if model not in SPECTRUM_MODELS:
        raise UsageError(f"unknown model {model!r}; choose from {', '.join(SPECTRUM_MODELS)}")
    theta, z, alpha = parse_angle(cfg["theta"]), float(cfg["z"]), float(cfg["alpha"])
    Ls = parse_int_list(cfg["N"] if cfg.get("N") else cfg["L"])
    bulk = model_tensor(model, theta, z, alpha)
    rows, erows, summary = [], [], []
    entropies = {}
    for L in Ls:
        op = TransferOperator(bulk, L, max_dim=int(cfg["max_dim"]))
        spec = transfer_spectrum(op, k_per_sector=int(cfg["k"]))
        for Q in (0, 1, 2):
            for n, lam in enumerate(spec.sector(Q)):
                rows.append([model, theta, z, alpha, L, Q, n, lam.real, lam.imag])
        xi = correlation_length(spec)
        line = {"L": L, "xi": xi, "resolved": bool(op.resolved)}
        if cfg.get("entropy", True) and op.resolved:
            S = half_cylinder_entropy(op)
            entropies[L] = S
            erows.append([model, f"theta={theta};z={z};alpha={alpha}", L, S])
            line["S"] = S
        summary.append(line)
        print(f"L={L} xi={xi:.6g}" + (f" S={line['S']:.6g}" if "S" in line else ""), flush=True)
    for L in Ls:
        if L in entropies and L % 2 == 0 and L // 2 in entropies:
            gamma = entropies[L] - 2 * entropies[L // 2]
            print(f"gamma(L={L}) = S_{L} - 2 S_{L // 2} = {gamma:.6g}")
    paths = [write_csv(out / f"spectrum_{model}.csv", SPECTRUM_HEADER, rows, "spectrum")]
    if erows:
        paths.append(write_csv(out / f"entropy_{model}.csv", ENTROPY_HEADER, erows, "entropy"))
    return paths


def cmd_ctmrg(cfg, out: Path):
    from .ctmrg import CSV_HEADER, locate_extremum, scan

    model = cfg["model"]
    if model not in ("diluted", "interpolation", "square"):
        raise UsageError(f"unknown ctmrg model {model!r}; choose from diluted, interpolation, square")
    chis = parse_int_list(cfg["chi"])
    if chis != sorted(chis) or len(set(chis)) != len(chis):
        raise UsageError(f"chi schedule {chis} must be strictly ascending")
    thetas = [parse_angle(t) for t in str(cfg["theta"]).split(",")]
    params = parse_float_list(cfg["alpha"] if model == "interpolation" else cfg["z"])
    grid = [(t, p) for t in thetas for p in params]

    def progress(p):
        print(f"theta={p.theta:.6g} param={p.param:.6g} n={p.n_link:.10g} xi={p.xi:.6g} deg={p.degeneracy} "
              f"converged={p.converged} {p.error}", flush=True)

    pts = scan(grid, chis, model=model, tol=float(cfg["tol"]), max_sweeps=int(cfg["max_sweeps"]),
               warm_start=bool(cfg.get("warm_start", True)), progress=progress)
    if model == "diluted" and len(params) >= 3:
        for t in thetas:
            sel = [p for p in pts if p.theta == t]
            zc, _ = locate_extremum([p.param for p in sel], [p.n_link for p in sel])
            print(f"theta={t:.6g}: dn/dz extremum at z_c = {zc:.4f}")
    return [write_csv(out / f"ctmrg_{model}.csv", CSV_HEADER, [p.row() for p in pts], "ctmrg")]


def cmd_ed(cfg, out: Path):
    from .ed import ED_CSV_HEADER, build_basis, sweep

    cluster = _cluster(cfg["cluster"])
    mode = _mode(cfg["mode"])
    basis = build_basis(cluster, mode, budget=int(cfg["budget"]))
    print(f"cluster {cfg['cluster']} ({mode}): {basis.dim} states", flush=True)
    ratios = parse_float_list(cfg["sweep"])

    def progress(p):
        print(f"Delta/Omega={p.delta_over_omega:.4g} E={p.energy:.10g} ov={p.overlap_trvb:.4g} "
              f"ovz={p.overlap_diluted:.4g} z*={p.opt_z:.3g} F={p.F:.4g} gamma={p.gamma:.4g}", flush=True)

    pts = sweep(basis, ratios, dlam=float(cfg["dlam"]), richardson=bool(cfg.get("richardson", False)),
                label=str(cfg["cluster"]), progress=progress)
    return [write_csv(out / f"ed_{_file_tag(cfg['cluster'])}_{mode}.csv", ED_CSV_HEADER, [p.row() for p in pts], "ed")]


def cmd_quench(cfg, out: Path):
    from .ed import TRAJECTORY_HEADER, RampProtocol, build_basis, evolve

    cluster = _cluster(cfg["cluster"])
    mode = _mode(cfg["mode"])
    basis = build_basis(cluster, mode, budget=int(cfg["budget"]))
    paths = []
    ratios = parse_float_list(cfg["ratios"]) if cfg.get("ratios") else []
    for T in parse_float_list(cfg["T"]):
        ds = cfg.get("delta_start")
        proto = RampProtocol(T, float(cfg["delta0"]), float(cfg["delta1"]), 1.0,
                             None if ds in (None, "") else float(ds))
        dt = float(cfg["dt"]) if cfg.get("dt") else None
        snaps, _ = evolve(basis, proto, dt=dt, snapshot_ratios=ratios)
        rows = [[s.t, s.delta, s.omega, s.norm, s.gamma, s.overlap] for s in snaps]
        for s in snaps:
            print(f"T={T:g} t={s.t:.4f} Delta/Omega={s.delta / max(s.omega, 1e-300):.4g} gamma={s.gamma:.4g} "
                  f"overlap={s.overlap:.4g}", flush=True)
        paths.append(write_csv(out / f"quench_{_file_tag(cfg['cluster'])}_{mode}_T{T:g}.csv", TRAJECTORY_HEADER, rows,
                               "trajectory"))
    return paths


def cmd_tripartite(cfg, out: Path):
    from .lattice import check_tripartite

    lattice = cfg["lattice"]
    types = [t.strip() for t in str(cfg["types"]).split(",") if t.strip()]
    try:
        coloring = check_tripartite(lattice, types)
    except ValueError as err:
        raise UsageError(str(err)) from None
    verdict = "yes" if coloring is not None else "no"
    print(f"lattice={lattice} types={','.join(types)} tripartite={verdict}")
    rows = [[lattice, "+".join(types), verdict]]
    return [write_csv(out / f"tripartite_{lattice}_{'-'.join(types)}.csv", ["lattice", "types", "tripartite"], rows,
                      "tripartite")]


def cmd_selftest(cfg, out: Path):
    """Fast end-to-end checks of every module; raises on the first failure."""
    from .cylinder import TransferOperator, correlation_length, torus_contract, transfer_spectrum
    from .ed import Cluster, build_basis
    from .lattice import check_tripartite, covering_weight, enumerate_coverings, square_lattice
    from .tensors import build_square_trvb_tensor, build_toric_code_tensor

    results = []

    def check(name, ok, detail=""):
        results.append([name, "pass" if ok else "fail", detail])
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}", flush=True)

    lat = square_lattice(3, 3)
    Z = torus_contract(build_square_trvb_tensor(0.0, "double"), 3, 3)
    ref = sum(covering_weight(lat, c, {"bent": 1.0, "straight": 0.0}) for c in enumerate_coverings(lat))
    check("torus-oracle-3x3", abs(Z - ref) <= 1e-10 * max(1.0, abs(ref)), f"Z={Z.real:.12g} ref={ref:.12g}")
    op = TransferOperator(build_toric_code_tensor(), 3)
    spec = transfer_spectrum(op, k_per_sector=4)
    xi = correlation_length(spec)
    check("toric-code-xi", xi == 0.0, f"xi={xi}")
    b = build_basis(Cluster.rectangle(3, 3))
    check("ed-basis-3x3", b.dim == len(enumerate_coverings(square_lattice(3, 3, ("bent",)), "diluted")), f"dim={b.dim}")
    check("tripartite-honeycomb", check_tripartite("honeycomb", ["bent"]) is None, "not tripartite")
    check("tripartite-triangular", check_tripartite("triangular", ["triangle"]) is not None, "tripartite")
    if any(r[1] == "fail" for r in results):
        write_csv(out / "selftest.csv", ["check", "status", "detail"], results, "selftest")
        raise ConvergenceError("selftest failed", float("nan"))
    return [write_csv(out / "selftest.csv", ["check", "status", "detail"], results, "selftest")]


def _cluster(spec):
    from .ed import Cluster

    try:
        return Cluster.parse(spec)
    except ValueError as err:
        raise UsageError(f"bad cluster {spec!r}: {err}") from None


def _mode(mode):
    if mode not in ("unrestricted", "no-wedge"):
        raise UsageError(f"mode must be 'unrestricted' or 'no-wedge', got {mode!r}")
    return mode


# ---------------------------------------------------------------------------
# argument parsing

DEFAULTS = {
    "spectrum": {"model": "square", "theta": "0", "z": 0.0, "alpha": 1.0, "L": "3,6", "N": "", "k": 4,
                 "max_dim": 2**28, "entropy": True},
    "ctmrg": {"model": "diluted", "theta": "0", "z": "0", "alpha": "0:1:0.1", "chi": "27", "tol": 1e-10,
              "max_sweeps": 2000, "warm_start": True},
    "ed": {"cluster": "3x6", "mode": "unrestricted", "sweep": "0.2:3.0:0.1", "dlam": 1e-3, "richardson": False,
           "budget": 10**8},
    "quench": {"cluster": "4x6", "mode": "no-wedge", "T": "20", "delta0": -1.5, "delta1": 3.0, "delta_start": "",
               "ratios": "1.0:3.0:0.25", "dt": "", "budget": 10**8},
    "tripartite": {"lattice": "square", "types": "bent"},
    "selftest": {},
}

COMMANDS = {"spectrum": cmd_spectrum, "ctmrg": cmd_ctmrg, "ed": cmd_ed, "quench": cmd_quench,
            "tripartite": cmd_tripartite, "selftest": cmd_selftest}

_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="trvb", description="Trimer RVB tensor-network and exact-diagonalization toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file (section [<command>], keys equal to the long flag names) "
                        "or a <command>.manifest.json from an earlier run")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./trvb-results)")
    common.add_argument("--threads", type=int, default=None, help="numba thread count")
    common.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        for key, val in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(val, bool):
                sp.add_argument(flag, dest=key, default=None, type=lambda s: _BOOL[str(s).lower()],
                                metavar="BOOL")
            else:
                sp.add_argument(flag, dest=key, default=None)
    return p


def _apply_manifest(args, cfg):
    """Load the resolved configuration recorded in a run manifest (reruns the same job)."""
    try:
        manifest = json.loads(Path(args.config).read_text())
        recorded = manifest["config"]
        command = manifest["command"]
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise UsageError(f"cannot read manifest {args.config!r}: {err}") from None
    if command != args.command:
        raise UsageError(f"manifest {args.config!r} is for command {command!r}, not {args.command!r}")
    for key, val in recorded.items():
        if key == "seed":
            if args.seed is None:
                args.seed = int(val)
        elif key in cfg:
            cfg[key] = val
        else:
            raise UsageError(f"unknown key {key!r} in manifest {args.config!r}")


def _file_tag(text):
    """Filesystem-safe form of a cluster spec such as ``"3,1;0,3"``."""
    return str(text).replace(";", "_").replace(",", "-").replace(" ", "")


def resolve_config(args):
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config and str(args.config).endswith(".json"):
        _apply_manifest(args, cfg)
    elif args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config!r}")
        if cp.has_section(args.command):
            for key, val in cp.items(args.command):
                key = key.replace("-", "_")
                if key in ("out", "threads"):
                    if getattr(args, key) is None:
                        setattr(args, key, val if key == "out" else int(val))
                    continue
                if key == "seed":
                    if args.seed is None:
                        args.seed = int(val)
                    continue
                if key not in cfg:
                    raise UsageError(f"unknown key {key!r} in [{args.command}] of {args.config}")
                cfg[key] = _BOOL[val.lower()] if isinstance(DEFAULTS[args.command][key], bool) else val
    for key in DEFAULTS[args.command]:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.seed is None:
        args.seed = 0
    cfg["seed"] = args.seed
    return cfg


def main(argv=None):
    t0 = time.time()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads:
        import numba

        numba.set_num_threads(args.threads)
    np.random.seed(args.seed)
    out = output_dir(args.out)
    manifest = out / f"{args.command}.manifest.json"
    try:
        paths = COMMANDS[args.command](cfg, out)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (BudgetExceeded, MemoryBudgetError) as err:
        est = getattr(err, "estimate", getattr(err, "partial_count", None))
        print(f"refused: {err} (estimate: {est})", file=sys.stderr)
        write_manifest(manifest, args.command, cfg, {"total": time.time() - t0}, [], "budget-refusal", str(err))
        return EXIT_BUDGET
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        write_manifest(manifest, args.command, cfg, {"total": time.time() - t0}, [], "numerical-failure", str(err))
        return EXIT_NUMERICAL
    write_manifest(manifest, args.command, cfg, {"total": time.time() - t0}, paths)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
