"""Command-line front end.

Usage: ``stochhomog SUBCOMMAND [--config PATH] [--set key=value ...] [--out DIR]
[--workers N] [--seed S]``. Every run writes into a fresh directory: CSV
tables, VTK fields and ``manifest.json`` (config echo, seed, timings).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import __version__, fem, pipeline
from .homogenize import CellProblem, ConsistencyError, empirical_stats, equivalent_matrix, write_tensor_csv
from .linalg import SolverError
from .microstructure import CoefficientField, PlacementError, cell_block
from .pipeline import ConfigError, RunConfig

SUBCOMMANDS = ("cell", "homogenize", "two-stage", "reference", "direct",
               "study-variance", "study-delta", "study-samples", "compare")

# keys accepted in each config-file section
SECTIONS = {
    "problem": ("test_case", "epsilon", "M", "L", "N", "f", "diagonal_only",
                "custom_value", "fixed_geometry", "cg_tol", "n_fine", "workers"),
    "mesh": ("h", "h0", "h1", "r"),
    "random": ("distribution", "truncation", "master_seed"),
    "study": ("sigma", "M_list", "L_list", "scale_list", "replicates",
              "periodization_replicates"),
}
ALIASES = {"eps": "epsilon", "b": "truncation", "seed": "master_seed"}
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PLACEMENT, EXIT_IO = 0, 2, 3, 4, 5


@dataclass
class CommandSpec:
    subcommand: str
    config_path: str | None = None
    overrides: list = field(default_factory=list)
    output_dir: str | None = None
    workers: int | None = None
    seed: int | None = None
    inputs: dict = field(default_factory=dict)  # compare: run directories


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _convert(key: str, text: str):
    name = key
    default = _FIELDS[name].default
    text = text.strip()
    if name in ("M_list", "L_list"):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if name == "scale_list":
        return tuple(_number(v) for v in text.split(",") if v.strip())
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or name == "h":
        return _number(text)
    return text


def _canonical(key: str) -> str:
    key = key.strip()
    if "." in key:  # section.key form in overrides
        section, key = key.split(".", 1)
        if section not in SECTIONS:
            raise KeyError(section)
    key = ALIASES.get(key, key)
    if key not in _FIELDS:
        raise KeyError(key)
    return key


def _read_config_file(path):
    """Return {key: (value text, 'path:line')} from an INI-like file or a run manifest."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if path.endswith(".json"):
        try:
            cfg = json.loads(text)["config"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from None
        out = {}
        for k, v in cfg.items():
            if k not in _FIELDS:
                raise ConfigError(f"{path}: unknown key {k!r}", k)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            out[k] = (repr(v) if isinstance(v, float) else str(v), f"{path}:{k}")
        return out
    out, section = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        where = f"{path}:{lineno}"
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError(f"{where}: key {key!r} appears before any section", key)
        name = ALIASES.get(key, key)
        if name not in SECTIONS[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]", key)
        out[name] = (value, where)
    return out


def parse_config(path=None, overrides=()) -> RunConfig:
    """Build a validated RunConfig from a config file plus ``key=value`` overrides.

    Missing keys take the defaults of RunConfig. Errors name the key and its line.
    """
    entries = _read_config_file(path) if path else {}
    for i, item in enumerate(overrides, 1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            name = _canonical(key)
        except KeyError:
            raise ConfigError(f"--set #{i}: unknown key {key.strip()!r}", key.strip()) from None
        entries[name] = (value, f"--set #{i}")
    kwargs = {}
    for name, (value, where) in entries.items():
        try:
            kwargs[name] = _convert(name, value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{where}: key {name!r}: malformed value {value!r} ({exc})",
                              name) from None
    try:
        return RunConfig(**kwargs)
    except ConfigError as exc:
        where = entries.get(exc.key, (None, "default value"))[1] if exc.key else None
        prefix = f"{where}: key {exc.key!r}: " if where else ""
        raise ConfigError(prefix + str(exc), exc.key) from None


# ---------------------------------------------------------------- outputs

def _fresh_dir(requested, subcommand) -> str:
    if requested:
        if os.path.exists(requested) and (not os.path.isdir(requested) or os.listdir(requested)):
            raise FileExistsError(f"output directory {requested} exists and is not empty; "
                                  "refusing to modify a previous run")
        os.makedirs(requested, exist_ok=True)
        return requested
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join("runs", f"{subcommand}-{stamp}")
    path, k = base, 1
    while os.path.exists(path):
        k += 1
        path = f"{base}-{k}"
    os.makedirs(path)
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out_dir, subcommand, config: RunConfig, timings, outputs, findings=(),
                   extra=None):
    manifest = {
        "tool": "stochhomog",
        "version": __version__,
        "subcommand": subcommand,
        "config": {k: _jsonable(v) for k, v in dataclasses.asdict(config).items()},
        "seed": config.master_seed,
        "timings_seconds": {k: round(v, 4) for k, v in timings.items()},
        "outputs": sorted(outputs),
        "findings": list(findings),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_stats_csv(path, stats, delta):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "mean", "variance"])
        for (i, j) in ((0, 0), (0, 1), (1, 0), (1, 1)):
            w.writerow([f"a{i + 1}{j + 1}", repr(float(stats.mean[i, j])),
                        repr(float(stats.variance[i, j]))])
        w.writerow(["delta", repr(float(delta)), ""])
        w.writerow(["sample_count", stats.sample_count, ""])


def _write_field(out_dir, stem, field_, outputs):
    field_.write_vtk(os.path.join(out_dir, stem + ".vtk"))
    field_.write_csv(os.path.join(out_dir, stem + ".csv"))
    outputs += [stem + ".vtk", stem + ".csv"]


def _read_field(run_dir, stem, n):
    """Load a field CSV written by a previous run onto a rebuilt unit-square mesh."""
    mesh = pipeline.cell_mesh(1, n)
    path = os.path.join(run_dir, stem + ".csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(v) for v in r] for r in rows])
    if data.shape != (mesh.n_nodes, 3) or np.abs(data[:, :2] - mesh.nodes).max() > 1e-12:
        raise ConfigError(f"{path} does not match a {n} x {n} unit-square mesh")
    return fem.SolutionField(mesh, data[:, 2], stem)


# ---------------------------------------------------------------- commands

def _cmd_cell(cfg, out, timings, outputs, findings, spec):
    t = time.perf_counter()
    real = pipeline.realize(cfg, 0, cell_block((0, 0), cfg.M))
    coeff = CoefficientField(cfg.microstructure(), real, cfg.epsilon)
    problem = CellProblem.build(coeff, pipeline.cell_mesh(cfg.M, cfg.n_cell))
    cells = (problem.solve(0, cfg.cg_tol), problem.solve(1, cfg.cg_tol))
    tensor = equivalent_matrix(cells, problem, block=(0, 0), sample_index=0)
    timings["cell_solve"] = time.perf_counter() - t
    write_tensor_csv(os.path.join(out, "cell_tensor.csv"), [tensor])
    outputs.append("cell_tensor.csv")
    for c in cells:
        stem = f"corrector_e{c.direction + 1}"
        fem.SolutionField(c.mesh, c.nodal_values, stem).write_vtk(os.path.join(out, stem + ".vtk"))
        outputs.append(stem + ".vtk")


def _cmd_homogenize(cfg, out, timings, outputs, findings, spec):
    t = time.perf_counter()
    tensors = pipeline.sample_tensors(cfg)
    timings["cell_problems"] = time.perf_counter() - t
    write_tensor_csv(os.path.join(out, "block_tensors.csv"), tensors)
    outputs.append("block_tensors.csv")
    if len(tensors) >= 2:
        stats = empirical_stats(tensors)
        _write_stats_csv(os.path.join(out, "equivalent_stats.csv"), stats,
                         math.sqrt(stats.variance.max()))
        outputs.append("equivalent_stats.csv")


def _cmd_two_stage(cfg, out, timings, outputs, findings, spec):
    t = time.perf_counter()
    tensors = pipeline.sample_tensors(cfg)
    timings["stage1_cell_problems"] = time.perf_counter() - t
    t = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        u0, stats, decomp = pipeline.algorithm1_two_stage(cfg, tensors)
    findings += [str(w.message) for w in caught]
    timings["stage2_mean_solve"] = time.perf_counter() - t
    write_tensor_csv(os.path.join(out, "block_tensors.csv"), tensors)
    _write_stats_csv(os.path.join(out, "equivalent_stats.csv"), stats, decomp.delta)
    outputs += ["block_tensors.csv", "equivalent_stats.csv"]
    _write_field(out, "u0_field", u0, outputs)


def _cmd_reference(cfg, out, timings, outputs, findings, spec):
    t = time.perf_counter()
    mean, _ = pipeline.algorithm2_reference(cfg)
    timings["reference"] = time.perf_counter() - t
    _write_field(out, "u_ref_field", mean, outputs)


def _cmd_direct(cfg, out, timings, outputs, findings, spec):
    t = time.perf_counter()
    acc = None
    for s in range(cfg.L):
        u = pipeline.direct_sample(cfg, s)
        acc = u.nodal_values.copy() if acc is None else acc + u.nodal_values
    mean = fem.SolutionField(u.mesh, acc / cfg.L, "u_direct_mean")
    timings["direct_solves"] = time.perf_counter() - t
    _write_field(out, "u_direct_field", mean, outputs)


def _study(fn, name):
    def run(cfg, out, timings, outputs, findings, spec):
        t = time.perf_counter()
        result = fn(cfg)
        timings[name] = time.perf_counter() - t
        result.write_csv(os.path.join(out, f"{name}.csv"))
        outputs.append(f"{name}.csv")
        if result.degenerate:
            findings.append(f"{name}: degenerate fit (some observable is zero)")
        else:
            findings.append(f"{name}: log-log slope {result.slope:.6g}")
    return run


def _cmd_compare(cfg, out, timings, outputs, findings, spec):
    two, ref = spec.inputs.get("two_stage"), spec.inputs.get("reference")
    if not two or not ref:
        raise ConfigError("compare needs --two-stage DIR and --reference DIR")
    cfg_two = parse_config(os.path.join(two, "manifest.json"))
    cfg_ref = parse_config(os.path.join(ref, "manifest.json"))
    u0 = _read_field(two, "u0_field", cfg_two.n0)
    uref = _read_field(ref, "u_ref_field", cfg_ref.n1)
    err = pipeline.relative_error(u0, uref)
    with open(os.path.join(out, "relative_error.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["two_stage_run", "reference_run", "relative_error"])
        w.writerow([two, ref, repr(err)])
    outputs.append("relative_error.csv")


COMMANDS = {
    "cell": _cmd_cell,
    "homogenize": _cmd_homogenize,
    "two-stage": _cmd_two_stage,
    "reference": _cmd_reference,
    "direct": _cmd_direct,
    "study-variance": _study(pipeline.variance_decay_study, "study_variance"),
    "study-delta": _study(pipeline.delta_scaling_study, "study_delta"),
    "study-samples": _study(lambda c: pipeline.sample_count_study(c, periodization=True),
                            "study_samples"),
    "compare": _cmd_compare,
}


def _error(category, exc) -> str:
    msg = " ".join(str(exc).split())
    return f"error category={category} message={json.dumps(msg)}"


def run(spec: CommandSpec, stderr=None) -> int:
    """Execute one command; returns the process exit status."""
    stderr = stderr or sys.stderr
    try:
        overrides = list(spec.overrides)
        if spec.workers is not None:
            overrides.append(f"workers={spec.workers}")
        if spec.seed is not None:
            overrides.append(f"master_seed={spec.seed}")
        cfg = parse_config(spec.config_path, overrides)
        out = _fresh_dir(spec.output_dir, spec.subcommand)
        timings, outputs, findings = {}, [], []
        t = time.perf_counter()
        COMMANDS[spec.subcommand](cfg, out, timings, outputs, findings, spec)
        timings["total"] = time.perf_counter() - t
        extra = {"inputs": spec.inputs} if spec.inputs else None
        write_manifest(out, spec.subcommand, cfg, timings, outputs, findings, extra)
        print(out)
        return EXIT_OK
    except ConfigError as exc:
        print(_error("config", exc), file=stderr)
        return EXIT_CONFIG
    except (SolverError, ConsistencyError) as exc:
        print(_error("solver", exc), file=stderr)
        return EXIT_SOLVER
    except PlacementError as exc:
        print(_error("placement", exc), file=stderr)
        return EXIT_PLACEMENT
    except OSError as exc:
        print(_error("io", exc), file=stderr)
        return EXIT_IO


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (INI sections or a manifest.json)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (must be new or empty)")
    common.add_argument("--workers", type=int, metavar="N", help="sample-level worker processes")
    common.add_argument("--seed", type=int, metavar="S", help="master seed")
    parser = argparse.ArgumentParser(prog="stochhomog", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stochhomog {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "compare":
            p.add_argument("--two-stage", dest="two_stage", metavar="DIR", required=True)
            p.add_argument("--reference", metavar="DIR", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    inputs = {}
    if args.subcommand == "compare":
        inputs = {"two_stage": args.two_stage, "reference": args.reference}
    spec = CommandSpec(args.subcommand, args.config, args.overrides, args.out,
                       args.workers, args.seed, inputs)
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
