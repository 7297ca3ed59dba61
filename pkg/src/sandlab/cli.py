"""Command-line front end: ``sandlab <subcommand> [options]``.

Every run prints one JSON document (or CSV with ``--format csv``) carrying the
package version, the parsed configuration, the seed and the wall time.  Exit
codes: 0 success, 2 numerical guard failure, 1 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, experiments, gamma, greens, sandpile, spectral
from .greens import ConvergenceError

GAMMA_REFERENCE = 2.868114013  # default for sizing cutoff step grids


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# serialization


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def dumps(obj, indent: int = 1, level: int = 0) -> str:
    """JSON with every float written to 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}{k}." if prefix or k else "")
    elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], (dict, list, tuple)):
        for k, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{k}.")
    else:
        yield prefix.rstrip("."), obj


def to_csv(doc: dict) -> str:
    """Lossy key/value export of a result document."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    for key, value in _flatten(doc):
        if isinstance(value, float):
            value = _format_float(value)
        elif isinstance(value, (list, tuple)):
            value = " ".join(_format_float(v) if isinstance(v, float) else str(v) for v in value)
        writer.writerow([key, value])
    return buf.getvalue()


def _steps(text: str) -> int:
    """Integer that may be written in float notation, e.g. 1e6."""
    value = float(text)
    if value != int(value) or value < 0:
        raise argparse.ArgumentTypeError(f"not a nonnegative integer: {text}")
    return int(value)


def _workers(args) -> int:
    env = os.environ.get("SANDLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"SANDLAB_THREADS must be an integer, got {env!r}") from exc
    return max(1, args.workers)


# ---------------------------------------------------------------------------
# subcommands


def cmd_greens(args) -> dict:
    """Green's function table; ``--out`` receives the binary table and its JSON sidecar."""
    if args.domain == "torus":
        field = greens.greens_torus(args.m).values
        origin = (0, 0)
    else:
        field = greens.greens_z2(args.M, args.tol).values
        origin = (args.M, args.M)
    values = np.asarray(field.values)
    out = {"domain": field.domain.to_json(), "shape": list(values.shape), "dtype": "<f8", "order": "C",
           "origin_index": list(origin),
           "value_at_origin": float(values[origin]),
           "value_at_unit": float(values[(origin[0] + 1) % values.shape[0], origin[1]])}
    if args.out:
        field.save(args.out)
        out["binary"] = args.out
        out["sidecar"] = args.out + ".json"
        args.out = None
    return out


def cmd_greens_report(args) -> dict:
    if args.check == "decay":
        return {f"order_{a}{b}": greens.derivative_decay_report(args.m, a, b)
                for a, b in ((1, 0), (1, 1), (3, 0))}
    if args.check == "lp":
        return {"D1G_p2": greens.lp_membership_report(1, 0, 2.0),
                "D1D2G_p2": greens.lp_membership_report(1, 1, 2.0),
                "D1cubedG_p1": greens.lp_membership_report(3, 0, 1.0)}
    if args.check == "asymptotics":
        table = greens.greens_z2(args.M)
        fit = greens.fit_asymptotics(table)
        return {"fit": fit.__dict__, "log_bound": greens.log_bound_report(table)}
    if args.check == "identity":
        rng = np.random.default_rng(args.seed)
        errs = []
        for _ in range(args.samples):
            v = rng.integers(-5, 6, size=(args.m, args.m)).astype(float)
            v -= v.mean()
            errs.append(greens.check_greens_identity(args.m, v))
        return {"m": args.m, "samples": args.samples, "max_error": max(errs)}
    if args.check == "llt":
        return greens.llt_rate_check()
    raise UsageError(f"unknown check {args.check}")


def _read_pile(path: str) -> sandpile.Sandpile:
    try:
        with open(path) as fh:
            return sandpile.Sandpile.from_json(json.load(fh))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read sandpile from {path}: {exc}") from exc


def cmd_stabilize(args) -> dict:
    if args.input:
        pile = _read_pile(args.input)
        if pile.m != args.m:
            raise UsageError(f"file holds a pile on m = {pile.m}, not {args.m}")
    else:
        pile = sandpile.Sandpile.constant(args.m, args.constant)
    final, odo = sandpile.stabilize(pile, args.order)
    return {"m": args.m, "topplings": odo.topplings, "grains_to_sink": odo.lost,
            "grains_before": pile.total(), "grains_after": final.total(),
            "recurrent": sandpile.is_recurrent(final), "heights": final.heights.tolist()}


def cmd_chain(args) -> dict:
    rng = np.random.default_rng(args.seed)
    out = {"m": args.m, "steps": args.steps}
    if args.m <= 3 and args.stats:
        from scipy.stats import chisquare

        final, counts = sandpile.run_chain(args.m, args.steps, rng, tally=True)
        states = sandpile.recurrent_states(args.m)
        codes = [s.code() for s in states]
        visits = counts[codes]
        off_class = int(counts.sum() - visits.sum())
        test = chisquare(visits)
        out.update({"recurrent_states": len(states), "visits_outside_recurrent": off_class,
                    "chi2": float(test.statistic), "p_value": float(test.pvalue),
                    "min_visits": int(visits.min()), "max_visits": int(visits.max())})
    else:
        final = sandpile.run_chain(args.m, args.steps, rng)
    out["final_recurrent"] = sandpile.is_recurrent(final)
    hist = np.bincount(final.heights.ravel()[1:], minlength=4)
    out["final_height_histogram"] = hist.tolist()
    if args.stats and args.stats != "-":
        with open(args.stats, "w") as fh:
            fh.write(dumps(out) + "\n")
    return out


def cmd_group(args) -> dict:
    out = {"m": args.m, "identity": sandpile.group_identity(args.m).heights.tolist()}
    if args.snf:
        out.update(sandpile.group_structure(args.m).to_json())
    return out


def cmd_gap(args) -> dict:
    if args.exact:
        oracle = spectral.dual_group_oracle(args.m)
        return {"m": args.m, "route": "dual-group", "gap": oracle.gap,
                "scaled_gap": oracle.gap * args.m**2, "group_order": oracle.order}
    res = spectral.gap_search(args.m, args.B, args.R, args.vector_class)
    return res.to_json()


def cmd_dual(args) -> dict:
    oracle = spectral.dual_group_oracle(args.m)
    moduli = np.sort(oracle.moduli)[::-1]
    Ns = list(range(0, args.N_max + 1))
    return {"m": args.m, "order": oracle.order, "gap": oracle.gap,
            "moduli_desc": moduli.tolist(),
            "l2_distance": {"N": Ns, "value": [oracle.l2_distance(N) for N in Ns]}}


def cmd_cutoff(args) -> dict:
    m = args.m
    scale = m * m * math.log(m) / args.gamma
    if args.N_grid == "auto":
        factors = [0.6, 0.8, 1.0, 1.2, 1.4]
    else:
        try:
            factors = [float(x) for x in args.N_grid.split(",")]
        except ValueError as exc:
            raise UsageError(f"malformed --N-grid {args.N_grid!r}") from exc
    N_list = [int(round(f * scale)) for f in factors]
    prof = spectral.cutoff_profile(m, N_list, args.B, args.R)
    out = prof.to_json()
    out["factors"] = factors
    out["gamma_used"] = args.gamma
    return out


def cmd_gamma(args) -> dict:
    res = gamma.compute_gamma(gamma.THRESHOLD, args.precision, audit_path=args.audit)
    out = res.to_json()
    if not args.full_audit:
        out.pop("audit")
    return out


def cmd_iid(args) -> dict:
    try:
        law = experiments.HeightDistribution.parse(args.law)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = experiments.iid_trials(law, args.radius, args.trials, args.seed, args.max_steps, _workers(args))
    if not args.detail:
        out.pop("trials_detail")
    return out


def cmd_invariants(args) -> dict:
    law = None
    if args.law:
        try:
            law = experiments.HeightDistribution.parse(args.law)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = experiments.invariants(args.radius, args.trials, law, args.seed)
    out["tail_scan"] = experiments.xi_tail_scan(range(4, 65)).to_json()
    return out


COMMANDS = {
    "greens": cmd_greens, "greens-report": cmd_greens_report, "stabilize": cmd_stabilize,
    "chain": cmd_chain, "group": cmd_group, "gap": cmd_gap, "dual": cmd_dual,
    "cutoff": cmd_cutoff, "gamma": cmd_gamma, "iid": cmd_iid, "invariants": cmd_invariants,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="JSON output (the default format)")
    common.add_argument("--format", choices=["json", "csv"], default="json")
    common.add_argument("--out", help="also write the document to this file")
    common.add_argument("--seed", type=int, default=0, help="64-bit seed")
    common.add_argument("--workers", type=int, default=1, help="worker count (SANDLAB_THREADS overrides)")
    common.add_argument("--no-timing", action="store_true",
                        help="write wall_time as null so repeated runs are byte-identical")

    p = _Parser(prog="sandlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sandlab {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("greens", parents=[common], help="Green's function tables")
    s.add_argument("--domain", choices=["torus", "z2"], default="torus")
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--M", type=int, default=64, help="half-width of the Z^2 square")
    s.add_argument("--tol", type=float, default=1e-9)

    s = sub.add_parser("greens-report", parents=[common], help="decay, l^p, asymptotic and identity checks")
    s.add_argument("--check", choices=["decay", "lp", "asymptotics", "identity", "llt"], default="decay")
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--M", type=int, default=256)
    s.add_argument("--samples", type=int, default=100)

    s = sub.add_parser("stabilize", parents=[common], help="stabilize a torus pile")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--in", dest="input", help="JSON file {m, heights}")
    s.add_argument("--constant", type=int, default=4, help="constant pile when no file is given")
    s.add_argument("--order", choices=["fifo", "lifo"], default="fifo")

    s = sub.add_parser("chain", parents=[common], help="run the sandpile Markov chain")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--steps", type=_steps, required=True)
    s.add_argument("--stats", help="write visit statistics here ('-' for stdout only)")

    s = sub.add_parser("group", parents=[common], help="sandpile group identity and structure")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--snf", action="store_true", help="invariant factors via Smith normal form")

    s = sub.add_parser("gap", parents=[common], help="spectral gap")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--B", type=int, default=8)
    s.add_argument("--R", type=int, default=4)
    s.add_argument("--class", dest="vector_class", choices=["C1", "C2"])
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exact dual group (m <= 3)")
    mode.add_argument("--search", action="store_true", help="prevector search (default)")

    s = sub.add_parser("dual", parents=[common], help="exact dual group for m <= 3")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--exact", action="store_true")
    s.add_argument("--N-max", dest="N_max", type=int, default=20)

    s = sub.add_parser("cutoff", parents=[common], help="cutoff profile")
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--N-grid", dest="N_grid", default="auto",
                   help="'auto' or comma-separated multiples of m^2 log m / gamma")
    s.add_argument("--gamma", type=float, default=GAMMA_REFERENCE)
    s.add_argument("--B", type=int, default=8)
    s.add_argument("--R", type=int, default=4)

    s = sub.add_parser("gamma", parents=[common], help="the gap constant")
    s.add_argument("--precision", type=float, default=1e-6)
    s.add_argument("--audit", help="write the full step-by-step audit to this file")
    s.add_argument("--full-audit", action="store_true", help="embed the audit in the output")

    s = sub.add_parser("iid", parents=[common], help="i.i.d. stabilization trials")
    s.add_argument("--law", required=True, help="e.g. '2:0.9,4:0.1'")
    s.add_argument("--radius", type=int, default=64)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--max-steps", dest="max_steps", type=_steps)
    s.add_argument("--detail", action="store_true", help="include per-trial records")

    s = sub.add_parser("invariants", parents=[common], help="pairing drift and tail scan")
    s.add_argument("--radius", type=int, default=32)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--law")
    return p


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        config = {k: v for k, v in sorted(vars(args).items())
                  if k not in ("json", "format", "out", "no_timing", "seed", "command")}
        start = time.perf_counter()
        out_path = args.out
        result = COMMANDS[args.command](args)
        wall = None if args.no_timing else time.perf_counter() - start
    except UsageError as exc:
        print(f"sandlab: usage error: {exc}", file=sys.stderr)
        return 1
    except (gamma.PipelineError, ArithmeticError, ConvergenceError, RuntimeError) as exc:
        print(f"sandlab: numerical guard failed: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"sandlab: usage error: {exc}", file=sys.stderr)
        return 1
    config["out"] = out_path
    doc = {"version": __version__, "command": args.command, "config": config, "seed": args.seed,
           "wall_time": wall, "result": result}
    text = to_csv(doc) if args.format == "csv" else dumps(doc) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    stdout.write(text)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
