"""Command line front end: ``sechyp <experiment> --config FILE``.

Configs are INI files (see docs/config.md).  Every run writes its CSV
outputs plus ``manifest.txt`` into the output directory; ``replay``
re-runs a manifest and byte-compares the CSVs.

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 replay mismatch.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import io
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cudisk as cd
from . import ergodic as eg
from . import hyperbolicity as hy
from . import poincare as pc
from . import vectorfield as vf
from .errors import ConfigError, NumericalError
from .flow import IntegratorConfig, flow_map, integrate, write_trajectory_csv
from .parallel import set_threads

EXPERIMENTS = ("simulate", "lyapunov", "splitting", "poincare", "cudisk", "measures",
               "stability", "entropy", "bowen")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4
MANIFEST = "manifest.txt"
MANIFEST_HEAD = "sechyp-manifest 1"

DEFAULTS = {
    "simulate": {"x0": None, "T": 10.0, "out_dt": 0.01},
    "lyapunov": {"x0": None, "T": 200.0, "transient": 10.0},
    "splitting": {"x0": None, "n_samples": 8, "T_push": 5.0, "ds": 1, "transient": 20.0,
                  "spacing": 1.0},
    "poincare": {"x0": None, "n_returns": 50, "a": 0.5, "T1": 0.0, "transient": 20.0},
    "cudisk": {"center": None, "radius": 1e-3, "delta": None, "T1": 0.0, "chain": 1,
               "lambda1": None, "lambda2": None, "a1": None, "a": 0.1, "max_steps": 60,
               "periodic_orbit": True, "warmup_returns": 300},
    "measures": {"n_initials": 50, "T": 500.0, "burn_in": 10.0, "dt": 0.01,
                 "cluster_tol": None, "region": None, "bins": 16},
    "stability": {"n_initials": 2, "T": 500.0, "burn_in": 10.0, "dt": 0.01,
                  "target_param": "rho", "magnitudes": [0.0, 0.1], "region": None},
    "entropy": {"n": 100000, "k_max": 8, "eps": 0.05, "n_cloud": 20000, "n_max": 8,
                "strict": False},
    "bowen": {"n_initials": 10, "T0": 10.0, "ratio": 1.5, "n_checkpoints": 30,
              "observable": 0},
}


# ------------------------------------------------------------ config

def _value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(text):
    """Parse INI text into plain nested dicts with literal values."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config does not parse: {exc}") from None
    return {sec: {k: _value(v) for k, v in cp[sec].items()} for sec in cp.sections()}


def render_config(cfg):
    """Canonical INI text of a parsed config (stable key order)."""
    out = io.StringIO()
    for sec in sorted(cfg):
        out.write(f"[{sec}]\n")
        for k in sorted(cfg[sec]):
            out.write(f"{k} = {cfg[sec][k]!r}\n")
        out.write("\n")
    return out.getvalue()


class Experiment:
    """A validated config: system, integrator, perturbations, settings."""

    def __init__(self, cfg, experiment):
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}; known: {EXPERIMENTS}")
        self.raw = cfg
        run = dict(cfg.get("run", {}))
        named = run.pop("experiment", experiment)
        if named != experiment:
            raise ConfigError(f"config is for {named!r}, not {experiment!r}")
        self.experiment = experiment
        if "seed" not in run:
            raise ConfigError("[run] needs a seed")
        self.seed = int(run.pop("seed"))
        self.output_dir = run.pop("output_dir", None)
        self.threads = run.pop("threads", None)
        if run:
            raise ConfigError(f"unknown [run] keys: {sorted(run)}")
        for sec, body in cfg.items():
            if sec.startswith("register."):
                vf.register_linear(sec.split(".", 1)[1], body["A"])
        sysd = dict(cfg.get("system", {}))
        if "name" not in sysd:
            raise ConfigError("[system] needs a name")
        self.system_name = sysd.pop("name")
        self.spec = vf.get_system(self.system_name, **sysd)
        try:
            self.integrator = IntegratorConfig(**cfg.get("integrator", {}))
        except TypeError as exc:
            raise ConfigError(f"bad [integrator]: {exc}") from None
        self.perturbations = []
        for sec in sorted((s for s in cfg if s.startswith("perturbation.")),
                          key=lambda s: int(s.split(".", 1)[1])):
            try:
                self.perturbations.append(vf.Perturbation(**cfg[sec]))
            except TypeError as exc:
                raise ConfigError(f"bad [{sec}]: {exc}") from None
        opts = dict(DEFAULTS[experiment])
        extra = set(cfg.get(experiment, {})) - set(opts)
        if extra:
            raise ConfigError(f"unknown [{experiment}] keys: {sorted(extra)}")
        opts.update(cfg.get(experiment, {}))
        self.opts = opts
        known = {"run", "system", "integrator", experiment}
        for sec in cfg:
            if sec not in known and not sec.startswith(("perturbation.", "register.")):
                raise ConfigError(f"unknown section [{sec}]")


def load_experiment(path, experiment):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return Experiment(read_config(text), experiment)


# ------------------------------------------------------------ helpers

def _rng(exp):
    return np.random.default_rng(exp.seed)


def _x0(exp):
    x0 = exp.opts.get("x0")
    spec = exp.spec
    if x0 is not None:
        x0 = np.asarray(x0, float)
        if x0.shape != (spec.dim,):
            raise ConfigError(f"x0 must have length {spec.dim}")
        return x0
    if spec.box is not None:
        lo, hi = spec.box
        return lo + (hi - lo) * (0.5 + 0.1 * _rng(exp).uniform(-1, 1, spec.dim))
    return 0.1 + 0.05 * _rng(exp).uniform(-1, 1, spec.dim)


def _flow_only(exp):
    if getattr(exp.spec, "is_suspension", False):
        raise ConfigError(f"{exp.experiment} needs a flow, not a map suspension")


def _region(exp, key="region"):
    r = exp.opts.get(key)
    if r is not None:
        return (np.asarray(r[0], float), np.asarray(r[1], float))
    return eg.dictionary_box(exp.spec)


def _initials(exp, n, region):
    lo, hi = (np.asarray(a, float) for a in region)
    if getattr(exp.spec, "is_suspension", False):
        u = _rng(exp).uniform(lo[0], hi[0], n)
        return np.column_stack([u, np.zeros(n)])
    if exp.spec.name == "double-lorenz" and exp.opts.get("region") is None:
        boxes = vf.double_lorenz_boxes(exp.spec)
        rng = _rng(exp)
        pick = rng.integers(0, 2, n)
        return np.array([boxes[k][0] + (boxes[k][1] - boxes[k][0]) * rng.random(3)
                         for k in pick])
    return lo + (hi - lo) * _rng(exp).random((n, len(lo)))


def _fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def lorenz_oriented_section(spec, cfg):
    """The z = rho - 1 section with its cu axis along the projected E^cu."""
    sec0 = pc.lorenz_section(spec)
    Z = pc.section_splitting_samples(spec, sec0, [1.0, 1.0, 20.0], 40, cfg=cfg)
    rep = hy.estimate_splitting(spec, Z, 1, 5.0, cfg)
    return pc.lorenz_section(spec, rep)


def lorenz_setup(spec, cfg, warmup_returns=300):
    """Oriented z = rho - 1 section and a point on the attractor in it."""
    sec = lorenz_oriented_section(spec, cfg)
    x = flow_map(spec, np.array([1.0, 1.0, 20.0]), 50.0, cfg)
    sid, u, _ = pc.flow_to_sections(spec, [sec], x, 50.0, cfg)
    rs = pc.return_orbit(spec, [sec], sid, u, warmup_returns, 0.0, cfg)
    return [sec], rs[-1].end


# ------------------------------------------------------------ experiments

def run_simulate(exp, out):
    traj = integrate(exp.spec, _x0(exp), float(exp.opts["T"]), exp.integrator,
                     out_dt=float(exp.opts["out_dt"]))
    p = out / "trajectory.csv"
    write_trajectory_csv(p, traj)
    return [p.name]


def run_lyapunov(exp, out):
    _flow_only(exp)
    res = hy.lyapunov_spectrum(exp.spec, _x0(exp), float(exp.opts["T"]), cfg=exp.integrator,
                               transient=float(exp.opts["transient"]))
    _write_rows(out / "lyapunov.csv", ["index", "exponent"],
                [[i + 1, _fmt(v)] for i, v in enumerate(res.exponents)])
    return ["lyapunov.csv"]


def run_splitting(exp, out):
    _flow_only(exp)
    o = exp.opts
    x = flow_map(exp.spec, _x0(exp), float(o["transient"]), exp.integrator)
    n = int(o["n_samples"])
    traj = integrate(exp.spec, x, n * float(o["spacing"]), exp.integrator,
                     out_dt=float(o["spacing"]))
    rep = hy.estimate_splitting(exp.spec, traj.states[:n], int(o["ds"]), float(o["T_push"]),
                                exp.integrator)
    hy.write_splitting_csv(out / "splitting.csv", rep)
    return ["splitting.csv"]


def _sections(exp):
    spec = exp.spec
    if getattr(spec, "is_suspension", False):
        return [pc.SuspensionSection(spec.domain[0], spec.domain[1], 0, a0=1.0)]
    if spec.name == "lorenz":
        return [lorenz_oriented_section(spec, exp.integrator)]
    raise ConfigError(f"no default section for {spec.name}")


def run_poincare(exp, out):
    o = exp.opts
    spec = exp.spec
    secs = _sections(exp)
    n = int(o["n_returns"])
    if getattr(spec, "is_suspension", False):
        u = np.array([_rng(exp).uniform(spec.domain[0], spec.domain[1])])
        sid = 0
    else:
        x = flow_map(spec, _x0(exp), float(o["transient"]), exp.integrator)
        sid, u, _ = pc.flow_to_sections(spec, secs, x, 50.0, exp.integrator)
    rs = pc.return_orbit(spec, secs, sid, u, n, float(o["T1"]), exp.integrator,
                         with_tangent=True)
    pc.write_returns_csv(out / "returns.csv", rs)
    ds = len(np.ravel(rs[0].start)) - 1
    h = pc.return_map_hyperbolicity(rs, float(o["a"]), ds)
    _write_rows(out / "hyperbolicity.csv", ["i", "lambda_s", "lambda_u", "cone_violations"],
                [[i, _fmt(a), _fmt(b), int(c)] for i, (a, b, c) in
                 enumerate(zip(h["lambda_s"], h["lambda_u"], h["per_sample_violations"]))])
    return ["returns.csv", "hyperbolicity.csv"]


def run_cudisk(exp, out):
    o = exp.opts
    spec = exp.spec
    cfg = exp.integrator
    a = float(o["a"])
    if getattr(spec, "is_suspension", False):
        secs = _sections(exp)
        center = 0.1234 if o["center"] is None else o["center"]
        center = np.atleast_1d(np.asarray(center, float))
        delta = 0.3 if o["delta"] is None else float(o["delta"])
    elif spec.name == "lorenz":
        secs, c0 = lorenz_setup(spec, cfg, int(o["warmup_returns"]))
        center = c0 if o["center"] is None else np.asarray(o["center"], float)
        delta = 2.0 if o["delta"] is None else float(o["delta"])
    else:
        raise ConfigError(f"cudisk has no section recipe for {spec.name}")
    if o["lambda1"] is not None:
        lam2 = o["lambda2"]
        a1 = o["a1"]
        if lam2 is None or a1 is None:
            consts = cd.choose_constants(float(o["lambda1"]), a)
        else:
            consts = cd.make_constants(float(o["lambda1"]), float(lam2), float(a1), a)
    else:
        consts = cd.DiskConstants(a=a)
    disk = cd.make_disk(secs[0], center, float(o["radius"]), a=a)
    trace = cd.expand_until_uniform(spec, secs, disk, delta, int(o["max_steps"]),
                                    float(o["T1"]), int(o["chain"]), consts, cfg)
    orbit = cd.locate_periodic_orbit(trace, spec, secs, cfg=cfg) if o["periodic_orbit"] else None
    cd.write_trace_csv(out / "trace.csv", trace, orbit)
    return ["trace.csv"]


def run_measures(exp, out):
    o = exp.opts
    spec = exp.spec
    region = _region(exp)
    D = eg.dictionary_for(spec)
    X0 = _initials(exp, int(o["n_initials"]), region)
    lo, hi = eg.dictionary_box(spec)
    grid = (lo, hi, (int(o["bins"]),) * len(lo))
    init = X0[:, :1] if getattr(spec, "is_suspension", False) else X0
    pm = eg.count_physical_measures(spec, init, D, float(o["T"]), float(o["burn_in"]),
                                    o["cluster_tol"], exp.integrator, float(o["dt"]), grid,
                                    seed=exp.seed, min_initials=1)
    eg.write_clusters_csv(out / "clusters.csv", pm)
    eg.write_averages_csv(out / "averages.csv", pm.averages, D)
    names = ["clusters.csv", "averages.csv"]
    for c, rep in enumerate(pm.representatives):
        if isinstance(rep, eg.EmpiricalMeasure):
            name = "measures.csv" if c == 0 else f"measures_{c + 1}.csv"
            eg.write_measure_csv(out / name, rep)
            names.append(name)
    return names


def run_stability(exp, out):
    _flow_only(exp)
    o = exp.opts
    perts = exp.perturbations or [vf.Perturbation("parameter-shift", float(m),
                                                  o["target_param"])
                                  for m in o["magnitudes"]]
    perts = sorted(perts, key=lambda p: p.magnitude)
    region = _region(exp)
    X0 = _initials(exp, int(o["n_initials"]), region)
    D = eg.dictionary_for(exp.spec)
    curve = eg.statistical_stability_curve(exp.spec, perts, D, float(o["T"]),
                                           initials=X0, burn_in=float(o["burn_in"]),
                                           cfg=exp.integrator, dt=float(o["dt"]),
                                           seed=exp.seed)
    eg.write_stability_csv(out / "stability.csv", curve)
    return ["stability.csv"]


def run_entropy(exp, out):
    o = exp.opts
    spec = exp.spec
    if getattr(spec, "is_suspension", False):
        x0 = _rng(exp).uniform(*spec.domain)
        sym = spec.branch(eg.shift_orbit(spec, x0, int(o["n"]), exp.seed))
        cloud = _rng(exp).uniform(*spec.domain, int(o["n_cloud"]))
        orbits = eg.sample_orbits(spec, cloud[:, None], int(o["n_max"]))
        gc = eg.generator_count(orbits, range(1, int(o["n_max"]) + 1), [float(o["eps"])])
        _write_rows(out / "generators.csv", ["eps", "n", "count"],
                    [[_fmt(e), int(n), int(c)] for e, row in zip(gc.eps_values, gc.counts)
                     for n, c in zip(gc.n_values, row)])
        names = ["entropy.csv", "generators.csv"]
    elif spec.name == "lorenz":
        secs = _sections(exp)
        x = flow_map(spec, _x0(exp), 20.0, exp.integrator)
        sid, u, _ = pc.flow_to_sections(spec, secs, x, 50.0, exp.integrator)
        rs = pc.return_orbit(spec, secs, sid, u, int(o["n"]), 0.0, exp.integrator)
        sym = np.array([int(r.end_ambient[0] > 0) for r in rs])
        names = ["entropy.csv"]
    else:
        raise ConfigError(f"entropy has no partition recipe for {spec.name}")
    pe = eg.partition_entropy(sym, int(o["k_max"]), strict=bool(o["strict"]))
    eg.write_entropy_csv(out / "entropy.csv", pe)
    return names


def bowen_initials(rng, n, lo=0.05, hi=0.9):
    """Uniform points inside the eye with -P in (lo, hi)."""
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1.0, 1.0, 2)
        P = (1 - p[0] ** 2) ** 2 - p[1] ** 2
        if lo < P < hi:
            pts.append(p)
    return np.array(pts)


def run_bowen(exp, out):
    o = exp.opts
    if exp.spec.name != "bowen":
        raise ConfigError("the bowen experiment needs the bowen system")
    X0 = bowen_initials(_rng(exp), int(o["n_initials"]))
    cps = eg.geometric_schedule(float(o["T0"]), float(o["ratio"]), int(o["n_checkpoints"]))
    i = int(o["observable"])
    rows = []
    for j, x0 in enumerate(X0):
        h = eg.historic_behavior_detect(exp.spec, x0, lambda X: X[:, i], cps, exp.integrator)
        rows.append([j, _fmt(x0[0]), _fmt(x0[1]), _fmt(h.liminf_est), _fmt(h.limsup_est),
                     _fmt(h.gap)])
    _write_rows(out / "historic.csv", ["initial_id", "x1", "x2", "liminf", "limsup", "gap"],
                rows)
    return ["historic.csv"]


RUNNERS = {name: globals()[f"run_{name}"] for name in EXPERIMENTS}


# ------------------------------------------------------------ run / replay

def write_manifest(out, exp, outputs, wall, threads):
    lines = [MANIFEST_HEAD, f"experiment = {exp.experiment}", f"version = {__version__}",
             f"threads = {threads}", f"wall_time = {wall:.3f}"]
    lines += [f"output = {name}" for name in outputs]
    lines += ["[config]", render_config(exp.raw)]
    (out / MANIFEST).write_text("\n".join(lines))


def read_manifest(path):
    text = Path(path).read_text()
    head, _, conf = text.partition("\n[config]\n")
    lines = head.splitlines()
    if not lines or lines[0] != MANIFEST_HEAD:
        raise ConfigError("not a sechyp manifest")
    meta, outputs = {}, []
    for ln in lines[1:]:
        k, _, v = ln.partition(" = ")
        if k == "output":
            outputs.append(v)
        else:
            meta[k] = v
    return meta, outputs, read_config(conf)


def execute(exp, out_dir, threads=None):
    """Run ``exp`` into ``out_dir``; returns the output names.

    Files are produced in a scratch directory and moved into place only on
    success, so a failed run leaves nothing behind.
    """
    if threads is not None:
        set_threads(threads)
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".sechyp-", dir=out_dir.parent))
    t0 = time.perf_counter()
    try:
        names = RUNNERS[exp.experiment](exp, scratch)
        write_manifest(scratch, exp, names, time.perf_counter() - t0,
                       threads if threads is not None else "default")
        out_dir.mkdir(exist_ok=True)
        for name in names + [MANIFEST]:
            os.replace(scratch / name, out_dir / name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return names


def _first_difference(a, b):
    la, lb = a.read_text().splitlines(), b.read_text().splitlines()
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            return i + 1
    return min(len(la), len(lb)) + 1


def replay(manifest_path, threads=None):
    """Re-run a manifest in a scratch directory and compare every CSV."""
    path = Path(manifest_path)
    if not path.parent.is_dir():
        raise ConfigError(f"output directory {path.parent} does not exist")
    if not path.is_file():
        raise ConfigError(f"manifest {path} not found")
    meta, outputs, conf = read_manifest(path)
    for name in outputs:
        if not (path.parent / name).is_file():
            raise ConfigError(f"output {name} named in the manifest is missing")
    exp = Experiment(conf, meta["experiment"])
    with tempfile.TemporaryDirectory(prefix="sechyp-replay-") as tmp:
        names = execute(exp, Path(tmp) / "out", threads)
        if sorted(names) != sorted(outputs):
            return EXIT_MISMATCH, f"output set differs: {sorted(names)} vs {sorted(outputs)}"
        for name in outputs:
            new = Path(tmp) / "out" / name
            old = path.parent / name
            if new.read_bytes() != old.read_bytes():
                return EXIT_MISMATCH, f"{name}: first difference at line {_first_difference(old, new)}"
    return EXIT_OK, "all outputs identical"


def _env_threads():
    env = os.environ.get("SECHYP_THREADS")
    if not env:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"SECHYP_THREADS must be an integer, not {env!r}") from None


def list_systems(stream=None):
    stream = stream or sys.stdout
    for name in sorted(vf.REGISTRY):
        params = ", ".join(f"{k}={v!r}" for k, v in vf.DEFAULTS.get(name, {}).items())
        print(f"{name}: {params}" if params else name, file=stream)


def build_parser():
    p = argparse.ArgumentParser(prog="sechyp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True)
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--out", default=None)
    s = sub.add_parser("list", help="list registered systems")
    s.add_argument("--config", default=None)
    s = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    s.add_argument("manifest")
    s.add_argument("--threads", type=int, default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            if args.config:
                cfg = read_config(Path(args.config).read_text())
                for sec, body in cfg.items():
                    if sec.startswith("register."):
                        vf.register_linear(sec.split(".", 1)[1], body["A"])
            list_systems()
            return EXIT_OK
        if args.command == "replay":
            threads = args.threads if args.threads is not None else _env_threads()
            code, msg = replay(args.manifest, threads)
            print(msg, file=sys.stderr if code else sys.stdout)
            return code
        exp = load_experiment(args.config, args.command)
        threads = args.threads if args.threads is not None else exp.threads
        if threads is None:
            threads = _env_threads()
        out = args.out or exp.output_dir or f"sechyp-{exp.experiment}"
        names = execute(exp, out, threads)
        print(f"wrote {', '.join(names)} and {MANIFEST} to {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
