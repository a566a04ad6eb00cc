"""Command-line front end.

Every subcommand takes its parameters from an optional JSON ``--config``
file overridden by flags.  Parsing is strict: unknown keys, missing fields
and ill-typed values are fatal.  Exit codes: 0 on success or PASS, 2 on a
scientific FAIL, 1 on usage, configuration or IO errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coupling, exact, stats
from .criteria import CriterionKind, CriterionSpec, RandomizedThresholds, Thresholds
from .errors import ConfigError, MissingField, TypeMismatch, UnknownKey
from .model import load_model, mixing_model, reference_model
from .parallel import thread_count
from .smc import run_adaptive

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

SUBCOMMANDS = ("validate", "oracle", "run", "couple", "concentrate", "bias", "localfield",
               "clt", "bounds")

# key -> (type tag, default); _REQUIRED marks keys that must be given when a command needs them
_REQUIRED = object()
SCHEMA = {
    "model": ("str", _REQUIRED),
    "criterion": ("str", "cv2"),
    "threshold": ("floats", None),
    "threshold_range": ("floats", None),
    "threshold_seed": ("int", None),
    "times": ("ints", None),
    "n": ("int", _REQUIRED),
    "n_list": ("ints", [64, 256, 1024, 4096]),
    "replicates": ("int", _REQUIRED),
    "seed": ("int", _REQUIRED),
    "blocks": ("int", 3),
    "eps": ("floats", [0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2]),
    "m_list": ("ints", [1, 2, 4]),
    "f": ("floats", None),
    "resampler": ("str", "select"),
    "cap": ("int", 10 ** 6),
    "horizon": ("int", None),
    "level": ("float", None),
    "sigma1": ("float", None),
    "sigma_sq": ("float", None),
    "sigma_tilde_sq": ("float", None),
    "rho": ("float", None),
    "delta": ("float", None),
    "r_over": ("float", None),
    "r_under": ("float", 1.0),
    "mix_m": ("int", 1),
    "out": ("str", _REQUIRED),
}

NEEDS = {
    "validate": ("model",),
    "oracle": ("model", "out"),
    "run": ("model", "n", "seed", "out"),
    "couple": ("model", "replicates", "seed", "out"),
    "concentrate": ("model", "n", "replicates", "seed", "out"),
    "bias": ("model", "n", "replicates", "seed", "out"),
    "localfield": ("model", "n", "replicates", "seed", "out"),
    "clt": ("model", "n", "replicates", "seed", "out"),
    "bounds": ("eps", "n"),
}

CHOICES = {"criterion": ("cv2", "entropy", "fixed"), "resampler": ("select", "multinomial")}


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """Resolved configuration of one invocation."""

    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def digest(self):
        """SHA-256 of the canonical configuration, ignoring the output directory."""
        body = {k: v for k, v in self.values.items() if k != "out"}
        blob = json.dumps({"command": self.command, "config": body}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x):
    return (_is_int(x) or isinstance(x, float)) and not isinstance(x, bool)


def _coerce(key, tag, value):
    if tag == "str":
        if not isinstance(value, str):
            raise TypeMismatch(key, "string")
        return value
    if tag == "int":
        if not _is_int(value):
            raise TypeMismatch(key, "integer")
        return value
    if tag == "float":
        if not _is_number(value) or not math.isfinite(value):
            raise TypeMismatch(key, "number")
        return float(value)
    if tag in ("ints", "floats"):
        if _is_number(value):
            value = [value]
        if not isinstance(value, list) or not value:
            raise TypeMismatch(key, "non-empty list")
        check = _is_int if tag == "ints" else _is_number
        for i, v in enumerate(value):
            if not check(v):
                raise TypeMismatch(f"{key}[{i}]", "integer" if tag == "ints" else "number")
        return [int(v) for v in value] if tag == "ints" else [float(v) for v in value]
    raise AssertionError(tag)


def parse_config(command, file_values=None, flag_values=None):
    """Merge file and flag values (flags win), type-check and fill defaults."""
    if command not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand {command!r}")
    merged = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if key not in SCHEMA:
                raise UnknownKey(key)
            if value is not None:
                merged[key] = value
    values = {}
    for key, (tag, default) in SCHEMA.items():
        if key in merged:
            values[key] = _coerce(key, tag, merged[key])
        elif key in NEEDS[command]:
            if default is _REQUIRED:
                raise MissingField(key)
            values[key] = default
        else:
            values[key] = None if default is _REQUIRED else default
    for key, allowed in CHOICES.items():
        if values[key] not in allowed:
            raise ConfigError(key, f"must be one of {', '.join(allowed)}")
    for key in ("n", "replicates", "cap"):
        if values[key] is not None and values[key] < 1:
            raise ConfigError(key, "must be positive")
    if values["seed"] is not None and values["seed"] < 0:
        raise ConfigError("seed", "must be non-negative")
    if values["threshold_range"] is not None and len(values["threshold_range"]) != 2:
        raise ConfigError("threshold_range", "needs exactly two values lo,hi")
    return ExperimentConfig(command, values)


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise TypeMismatch("<root>", "JSON object")
    return data


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    if x is None:
        return ""
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def atomic_write(path, text):
    """Write ``text`` to a temporary sibling file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows, digest):
    buf = io.StringIO(newline="")
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        values = [row[h] for h in header] if isinstance(row, dict) else row
        writer.writerow([_cell(v) for v in values])
    buf.write(f"# config_sha256={digest}\r\n")
    atomic_write(path, buf.getvalue())


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv`, as dicts of strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, payload, digest):
    body = dict(_jsonable(payload))
    body["config_sha256"] = digest
    atomic_write(path, json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_model(spec, horizon=None):
    """A model file path, or ``builtin:reference[:T]`` / ``builtin:mixing[:T]``."""
    if spec.startswith("builtin:"):
        parts = spec.split(":")
        name = parts[1]
        factories = {"reference": reference_model, "mixing": mixing_model}
        if name not in factories or len(parts) > 3:
            raise ConfigError("model", f"unknown builtin model {spec!r}")
        if len(parts) == 3:
            try:
                horizon = int(parts[2])
            except ValueError:
                raise ConfigError("model", f"bad builtin horizon in {spec!r}") from None
        return factories[name]() if horizon is None else factories[name](horizon)
    return load_model(spec)


def _criterion(cfg):
    kind = CriterionKind(cfg.criterion)
    if kind is CriterionKind.FIXED:
        if cfg.times is None:
            raise MissingField("times")
        return CriterionSpec.fixed(cfg.times)
    if cfg.threshold_range is not None:
        lo, hi = cfg.threshold_range
        seed = cfg.threshold_seed if cfg.threshold_seed is not None else cfg.seed
        if seed is None:
            raise MissingField("threshold_seed")
        return CriterionSpec(kind, RandomizedThresholds(lo, hi, seed))
    if cfg.threshold is None:
        raise MissingField("threshold")
    return CriterionSpec(kind, Thresholds(cfg.threshold))


def _schedule(model, spec):
    if spec.kind is CriterionKind.FIXED:
        return exact.schedule_from_times(model, spec.times)
    return exact.deterministic_times(model, spec.kind, spec.thresholds)


def _test_function(cfg, model):
    k = model.num_states
    if cfg.f is None:
        f = np.zeros(k)
        f[-1] = 1.0
        return f
    if len(cfg.f) != k:
        raise ConfigError("f", f"needs {k} values")
    return np.asarray(cfg.f, dtype=np.float64)


def _blocks(cfg, schedule):
    last = min(cfg.blocks, len(schedule.times) - 1)
    if last < 0:
        raise ConfigError("blocks", "must be non-negative")
    return list(range(last + 1))


def _verdict(passed):
    return "PASS" if passed else "FAIL"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg, out):
    model = resolve_model(cfg.model, cfg.horizon)
    out.write(f"valid model: K={model.num_states} T={model.horizon}\n")
    out.write("potential ratios: " + ", ".join(_cell(x) for x in model.potential_ratios) + "\n")
    return EXIT_OK


def cmd_oracle(cfg, out):
    model = resolve_model(cfg.model, cfg.horizon)
    spec = _criterion(cfg)
    sched = _schedule(model, spec)
    d, outdir = cfg.digest(), Path(cfg.out)
    rows = [[n, t, False] for n, t in enumerate(sched.times)]
    if sched.truncated:
        rows.append([len(sched.times), sched.horizon, True])
    write_csv(outdir / "schedule.csv", ["block", "t_n", "truncated"], rows, d)
    write_csv(outdir / "criterion_curves.csv", ["block", "s", "value"],
              [list(p) for p in sched.curve_points()], d)
    rep = exact.constants(model, sched)
    crows = []
    for n in range(rep.num_blocks):
        for p in range(n + 1):
            crows.append(["pair", p, n, rep.q[p, n], rep.beta[p, n], None, None, None, None])
    for n in range(rep.num_blocks):
        crows.append(["sigma", None, n, None, None, rep.sigma1[n], rep.sigma2[n],
                      rep.sigma_sq[n], rep.sigma_tilde_sq[n]])
    write_csv(outdir / "constants.csv",
              ["kind", "p", "n", "q_pn", "beta_pn", "sigma1", "sigma2", "sigma_sq",
               "sigma_tilde_sq"], crows, d)
    mixing = {"mixing_available": rep.mixing_available, "delta": rep.delta, "r": rep.r}
    if rep.mixing_available:
        ub = rep.uniform_bounds
        mixing.update({
            "q_bound_ok": bool(rep.q_bound_ok.all()), "beta_bound_ok": bool(rep.beta_bound_ok.all()),
            "beta_bound": rep.beta_bound, "uniform": {
                "delta": ub["delta"], "r_over": ub["r_over"], "r_under": ub["r_under"],
                "m": ub["m"], "sigma1_ok": ub["sigma1_ok"], "sigma2_ok": ub["sigma2_ok"],
                "sigma_sq_ok": ub["sigma_sq_ok"],
                "series": {str(a): {"values": v, "bound": b, "ok": ok}
                           for a, (v, b, ok) in ub["series"].items()}}})
    write_json(outdir / "mixing.json", mixing, d)
    if sched.curves:
        eps, (n, s) = exact.epsilon_m(sched)
        text = f"epsilon_m={eps!r}\nblock={n}\ns={s}\n"
    else:
        text = "epsilon_m=nan\n"
    atomic_write(outdir / "epsilon.txt", text + f"# config_sha256={d}\n")
    out.write(f"times={sched.times} truncated={sched.truncated}\n")
    return EXIT_OK


def cmd_run(cfg, out):
    model = resolve_model(cfg.model)
    spec = _criterion(cfg)
    f = _test_function(cfg, model)
    rec = run_adaptive(model, spec, cfg.n, cfg.seed, horizon=cfg.horizon, resampler=cfg.resampler)
    d, outdir = cfg.digest(), Path(cfg.out)
    payload = rec.to_dict()
    payload["block_estimates"] = [rec.block_estimate(n, f) for n in range(len(rec.blocks))]
    write_json(outdir / "run.json", payload, d)
    k = model.num_states
    header = ["time"] + [f"state_{y}" for y in range(k)] + ["f"]
    rows = [[s] + list(rec.estimates[s]) + [float(rec.estimates[s] @ f)]
            for s in range(rec.estimates.shape[0])]
    write_csv(outdir / "estimates.csv", header, rows, d)
    out.write(f"resampling_times={rec.resampling_times} gamma={rec.gamma!r}\n")
    return EXIT_OK


def cmd_couple(cfg, out):
    model = resolve_model(cfg.model, cfg.horizon)
    spec = _criterion(cfg)
    sched = _schedule(model, spec)
    level = cfg.level if cfg.level is not None else 0.95
    rep = coupling.failure_sweep(model, spec, sched, cfg.blocks, cfg.n_list, cfg.replicates,
                                 cfg.seed, cfg.resampler, level)
    d, outdir = cfg.digest(), Path(cfg.out)
    write_csv(outdir / "coupling.csv", ["N", "failures", "R", "freq", "wilson_lo", "wilson_hi"],
              rep.rows, d)
    passed = coupling.sweep_verdict(rep.rows, require_zero_at_largest=False)
    fit = dict(rep.fit, verdict=_verdict(passed),
               zero_at_largest=bool(rep.rows[-1]["failures"] == 0),
               schedule=sched.times)
    write_json(outdir / "coupling_fit.json", fit, d)
    out.write(f"coupling: {_verdict(passed)}\n")
    return EXIT_OK if passed else EXIT_FAIL


def _experiment_setup(cfg):
    model = resolve_model(cfg.model, cfg.horizon)
    sched = _schedule(model, _criterion(cfg))
    return model, sched, _test_function(cfg, model), _blocks(cfg, sched)


def cmd_concentrate(cfg, out):
    model, sched, f, blocks = _experiment_setup(cfg)
    sigma1 = None if cfg.sigma1 is None else {n: cfg.sigma1 for n in blocks}
    level = cfg.level if cfg.level is not None else 0.99
    exp = stats.tail_experiment(model, sched, f, blocks, cfg.eps, cfg.n, cfg.replicates,
                                cfg.seed, sigma1=sigma1, resampler=cfg.resampler, level=level)
    rows = exp.rows()
    d, outdir = cfg.digest(), Path(cfg.out)
    write_csv(outdir / "concentrate.csv", list(rows[0].keys()), rows, d)
    passed = stats.tail_verdict(rows)
    write_json(outdir / "concentrate.json", {"verdict": _verdict(passed), "sigma1": exp.sigma1}, d)
    out.write(f"concentrate: {_verdict(passed)}\n")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_bias(cfg, out):
    model, sched, f, blocks = _experiment_setup(cfg)
    rep = stats.bias_and_lm_experiment(model, sched, f, blocks, cfg.n, cfg.replicates, cfg.seed,
                                       cfg.m_list, cfg.resampler)
    if cfg.sigma1 is not None:
        for r in rep.rows:
            r["sigma1"] = cfg.sigma1
    d, outdir = cfg.digest(), Path(cfg.out)
    write_csv(outdir / "bias.csv", list(rep.rows[0].keys()), rep.rows, d)
    write_csv(outdir / "bias_lm.csv", list(rep.lm_rows[0].keys()), rep.lm_rows, d)
    passed = stats.bias_verdict(rep.rows, rep.lm_rows)
    write_json(outdir / "bias.json", {"verdict": _verdict(passed)}, d)
    out.write(f"bias: {_verdict(passed)}\n")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_localfield(cfg, out):
    model, sched, f, blocks = _experiment_setup(cfg)
    rep = stats.local_field_experiment(model, sched, f, blocks, cfg.n, cfg.replicates, cfg.seed,
                                       cfg.m_list, cfg.resampler)
    d, outdir = cfg.digest(), Path(cfg.out)
    write_csv(outdir / "localfield.csv", list(rep.rows[0].keys()), rep.rows, d)
    write_csv(outdir / "localfield_lm.csv", list(rep.lm_rows[0].keys()), rep.lm_rows, d)
    passed = stats.local_field_verdict(rep.rows, rep.lm_rows)
    write_json(outdir / "localfield.json", {"verdict": _verdict(passed)}, d)
    out.write(f"localfield: {_verdict(passed)}\n")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_clt(cfg, out):
    model, sched, f, blocks = _experiment_setup(cfg)
    rep = stats.clt_experiment(model, sched, f, blocks, cfg.n, cfg.replicates, cfg.seed,
                               cfg.resampler)
    d, outdir = cfg.digest(), Path(cfg.out)
    write_csv(outdir / "clt.csv", list(rep.rows[0].keys()), rep.rows, d)
    passed = stats.clt_verdict(rep.rows)
    write_json(outdir / "clt.json", {"verdict": _verdict(passed)}, d)
    out.write(f"clt: {_verdict(passed)}\n")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_bounds(cfg, out):
    header = ["eps", "N", "main", "improved", "fk743", "alpha", "uniform_quantile"]
    rows = []
    n = cfg.n
    for eps in cfg.eps:
        row = {"eps": eps, "N": n, "main": None, "improved": None, "fk743": None,
               "alpha": None, "uniform_quantile": None}
        if cfg.sigma1 is not None:
            row["main"] = stats.bound_main(eps, n, cfg.sigma1)
        if cfg.sigma1 is not None and cfg.sigma_sq is not None:
            row["alpha"] = stats.alpha_n(eps, cfg.sigma_sq, cfg.sigma1)
            row["improved"] = stats.bound_improved(eps, n, cfg.sigma_sq, cfg.sigma1)
        if cfg.sigma_tilde_sq is not None:
            row["fk743"] = stats.bound_fk743(eps, n, cfg.sigma_tilde_sq)
        if None not in (cfg.rho, cfg.delta, cfg.r_over):
            row["uniform_quantile"] = stats.uniform_quantile(cfg.rho, n, cfg.delta, cfg.r_over,
                                                             cfg.r_under, cfg.mix_m)
        rows.append(row)
    if cfg.out is not None:
        write_csv(Path(cfg.out) / "bounds.csv", header, rows, cfg.digest())
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_cell(r[h]) for h in header])
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate, "oracle": cmd_oracle, "run": cmd_run, "couple": cmd_couple,
    "concentrate": cmd_concentrate, "bias": cmd_bias, "localfield": cmd_localfield,
    "clt": cmd_clt, "bounds": cmd_bounds,
}


def dispatch(cfg, out=None, err=None):
    """Run the configured subcommand and map outcomes to exit codes."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        return COMMANDS[cfg.command](cfg, out)
    except (ValueError, OSError) as exc:
        # SMCError is a ValueError; bad arguments to the experiments land here too
        err.write(f"error: {exc}\n")
        return EXIT_ERROR


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _list_of(conv):
    def parse(text):
        try:
            return [conv(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


FLAGS = {
    "model": (str, "model JSON file or builtin:reference[:T] / builtin:mixing[:T]"),
    "criterion": (str, "cv2, entropy or fixed"),
    "threshold": (_list_of(float), "threshold a_n (comma list; last value repeats)"),
    "threshold_range": (_list_of(float), "lo,hi for uniformly drawn thresholds"),
    "threshold_seed": (int, "seed of the threshold stream"),
    "times": (_list_of(int), "resampling times for the fixed criterion"),
    "n": (int, "number of particles"),
    "n_list": (_list_of(int), "particle counts for the coupling sweep"),
    "replicates": (int, "number of independent replicates"),
    "seed": (int, "base random seed"),
    "blocks": (int, "last block index m"),
    "eps": (_list_of(float), "epsilon grid"),
    "m_list": (_list_of(int), "moment orders"),
    "f": (_list_of(float), "test function values per state"),
    "resampler": (str, "select or multinomial"),
    "cap": (int, "path enumeration cap"),
    "horizon": (int, "run horizon"),
    "level": (float, "confidence level"),
    "sigma1": (float, "override sigma_1"),
    "sigma_sq": (float, "sigma^2"),
    "sigma_tilde_sq": (float, "tilde sigma^2"),
    "rho": (float, "failure probability for the uniform quantile"),
    "delta": (float, "mixing constant delta"),
    "r_over": (float, "upper potential ratio bound"),
    "r_under": (float, "lower potential ratio bound"),
    "mix_m": (int, "mixing order m"),
    "out": (str, "output directory"),
}


def build_parser():
    parser = _Parser(prog="adaptsmc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        for key, (conv, help_) in FLAGS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=conv, default=None,
                           help=help_)
    return parser


def main(argv=None, out=None, err=None):
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        file_values = load_config_file(args.config) if args.config else None
        cfg = parse_config(args.command, file_values, flags)
        thread_count()
    except (UsageError, ValueError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_ERROR
    return dispatch(cfg, out, err)


if __name__ == "__main__":
    sys.exit(main())
