"""Command-line front end: ``compute``, ``check``, ``sweep`` and ``cost``.

Exit codes: 0 success, 2 model spec error, 3 equivalence failure,
4 resource-cap refusal.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .autodiff import jacobian
from .cost import predict_generic, predict_table, select_method
from .ntk import CONCRETE, Method, ntk
from .program import ModelSpec, SpecError, build, draw_inputs, init_params
from .structure import corrupted_rules

__all__ = ["RunConfig", "main", "cmd_compute", "cmd_check", "cmd_sweep", "cmd_cost", "SWEEP_HEADER"]

EXIT_OK, EXIT_SPEC, EXIT_MISMATCH, EXIT_CAP = 0, 2, 3, 4
CAP_ENV = "NTK_MEM_CAP_BYTES"
ORACLE_CAP_BYTES = 8 * 10**6  # 10⁶ float64 Jacobian entries
COMPUTE_CAP_BYTES = 2**31
TOLERANCE = 1e-9
SWEEP_HEADER = [
    "w", "o", "n", "t", "d", "f", "method",
    "measured_flops", "flops_per_entry", "predicted_flops", "peak_bytes", "error",
]  # fmt: skip


class CapExceeded(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: ModelSpec | None = None
    method: Method = Method.AUTO
    n1: int = 2
    n2: int | None = None
    seed: int = 0
    counting: bool = False
    out: str | None = None
    format: str = "json"
    sequential: bool = True
    include_values: bool = True
    timing: bool = False
    mem_cap: int | None = None

    @property
    def batches(self) -> tuple[int, int]:
        return self.n1, self.n1 if self.n2 is None else self.n2


def _cap(config: RunConfig, default: int) -> int:
    if config.mem_cap is not None:
        return config.mem_cap
    raw = os.environ.get(CAP_ENV)
    if raw is None:
        return default
    try:
        return int(float(raw))
    except ValueError:
        raise SpecError(f"{CAP_ENV} must be a number of bytes, got {raw!r}") from None


def draw(prog, seed: int, n1: int, n2: int):
    """Parameters, then first batch, then second batch, from one seeded generator."""
    rng = np.random.default_rng(seed)
    params = init_params(prog, rng)
    return params, draw_inputs(prog, rng, n1), draw_inputs(prog, rng, n2)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale else 0.0


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# compute


def compute_record(config: RunConfig) -> dict:
    """NTK, predicted costs and (optionally) counted FLOPs for one configuration."""
    prog = build(config.model)
    n1, n2 = config.batches
    o = prog.output_size
    selected = select_method(prog, (n1, n2), o) if config.method is Method.AUTO else config.method
    predicted = predict_generic(prog, selected, (n1, n2), o)
    cap = _cap(config, COMPUTE_CAP_BYTES)
    if predicted.memory_bytes > cap:
        raise CapExceeded(f"predicted {predicted.memory_bytes} bytes exceeds the cap of {cap} bytes")
    params, x1, x2 = draw(prog, config.seed, n1, n2)
    start = time.perf_counter()
    with T.counting() if config.counting else nullcontext() as counter:
        result = ntk(prog, params, x1, x2, selected)
    elapsed = time.perf_counter() - start
    record = {
        "model": config.model.to_dict(),
        "requested_method": config.method.value,
        "method": selected.value,
        "n1": n1,
        "n2": n2,
        "o": o,
        "seed": config.seed,
        "num_params": prog.num_params,
        "predicted": {m.value: predict_generic(prog, m, (n1, n2), o).to_dict() for m in CONCRETE},
        "predicted_flops": predicted.flops,
        "predicted_memory_bytes": predicted.memory_bytes,
    }
    if counter is not None:
        record["measured_flops"] = counter.fused_multiply_adds
        record["flops_by_phase"] = dict(counter.by_phase)
        record["peak_bytes"] = counter.peak_live_bytes
    if config.include_values:
        record["shape"] = list(result.values.shape)
        record["ntk"] = result.matrix.tolist()
    if config.timing:
        record["wall_seconds"] = elapsed
    return record


def cmd_compute(config: RunConfig) -> int:
    record = compute_record(config)
    if config.format == "json":
        text = json.dumps(record, sort_keys=True, indent=2) + "\n"
    else:
        keys = [k for k in ("method", "requested_method", "n1", "n2", "o", "seed", "num_params",
                            "predicted_flops", "predicted_memory_bytes", "measured_flops", "peak_bytes",
                            "wall_seconds") if k in record]  # fmt: skip
        text = _csv_text(keys, [[record[k] for k in keys]])
        if config.include_values:
            text += _csv_text([f"col{j}" for j in range(len(record["ntk"][0]))], record["ntk"])
    _emit(text, config.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# check

DEFAULT_CHECK_GRID = [
    ModelSpec("fcn", t, w, o, input_dim=3) for t in (1, 3) for w in (4, 16) for o in (1, 4)
] + [ModelSpec("cnn", 1, 2, 2, pixels=4, filter=3)]


def check_errors(spec: ModelSpec, n1: int, n2: int, seed: int, cap: int) -> tuple[list[str], np.ndarray]:
    """Pairwise relative Frobenius errors between the three methods and the dense oracle."""
    prog = build(spec)
    o = prog.output_size
    need = 8 * max(n1, n2) * o * prog.num_params
    if need > cap:
        raise CapExceeded(f"dense oracle needs {need} bytes for {spec.to_json()}, over the cap of {cap} bytes")
    params, x1, x2 = draw(prog, seed, n1, n2)
    j1 = jacobian(prog, params, x1).reshape(n1 * o, -1)
    j2 = jacobian(prog, params, x2).reshape(n2 * o, -1)
    results = [j1 @ j2.T] + [ntk(prog, params, x1, x2, m).matrix for m in CONCRETE]
    names = ["dense_oracle"] + [m.value for m in CONCRETE]
    errors = np.array([[relative_error(a, b) for b in results] for a in results])
    return names, errors


def cmd_check(config: RunConfig, *, corrupt: bool = False) -> int:
    specs = [config.model] if config.model is not None else DEFAULT_CHECK_GRID
    n1, n2 = config.batches
    cap = _cap(config, ORACLE_CAP_BYTES)
    worst = 0.0
    lines = []
    with corrupted_rules() if corrupt else nullcontext():
        for spec in specs:
            names, errors = check_errors(spec, n1, n2, config.seed, cap)
            worst = max(worst, float(errors.max()))
            lines.append(spec.to_json())
            lines.append("  " + " " * 24 + "".join(f"{name:>24}" for name in names))
            for name, row in zip(names, errors):
                lines.append("  " + f"{name:>24}" + "".join(f"{v:>24.3e}" for v in row))
    ok = worst <= TOLERANCE
    lines.append(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {TOLERANCE:g})")
    _emit("\n".join(lines) + "\n", config.out)
    return EXIT_OK if ok else EXIT_MISMATCH


# ---------------------------------------------------------------------------
# sweep


def _axis(values, name: str) -> list[int]:
    out = [int(v) for v in values]
    if any(v < 1 for v in out) and name != "t":
        raise SpecError(f"sweep axis {name} must be positive, got {out}")
    if any(v < 0 for v in out):
        raise SpecError(f"sweep axis {name} must be non-negative, got {out}")
    return out


def sweep_rows(base: ModelSpec, axes: dict, methods: list[Method], seed: int, timing: bool = False):
    """One row per grid point; failures are recorded in the error column."""
    keys = ("w", "o", "n", "t", "d", "f")
    for w, o, n, t, d, f in itertools.product(*(axes[k] for k in keys)):
        spec = replace(base, width=w, output_size=o, depth=t)
        if spec.family == "cnn":
            spec = replace(spec, pixels=d, filter=f)
        for method in methods:
            row = {"w": w, "o": o, "n": n, "t": t, "d": d, "f": f, "method": method.value}
            row.update(measured_flops="", flops_per_entry="", predicted_flops="", peak_bytes="", error="")
            try:
                prog = build(spec)
                predicted = predict_generic(prog, method, (n, n), o)
                params, x1, x2 = draw(prog, seed, n, n)
                start = time.perf_counter()
                with T.counting() as counter:
                    ntk(prog, params, x1, x2, method)
                measured = counter.fused_multiply_adds
                row.update(
                    measured_flops=measured,
                    flops_per_entry=repr(measured / (n * n * o * o)),
                    predicted_flops=predicted.flops,
                    peak_bytes=counter.peak_live_bytes,
                )
                if timing:
                    row["wall_seconds"] = repr(time.perf_counter() - start)
            except Exception as exc:  # recorded per point, sweep continues
                row["error"] = f"{type(exc).__name__}: {exc}"
            yield row


def cmd_sweep(config: RunConfig, axes: dict, methods: list[Method]) -> int:
    base = config.model or ModelSpec("fcn", 10, 16, 4, input_dim=3)
    header = SWEEP_HEADER + (["wall_seconds"] if config.timing else [])
    rows = list(sweep_rows(base, axes, methods, config.seed, config.timing))
    if config.format == "json":
        text = json.dumps(rows, sort_keys=True, indent=2) + "\n"
    else:
        text = _csv_text(header, [[row.get(k, "") for k in header] for row in rows])
    _emit(text, config.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cost


def cmd_cost(config: RunConfig) -> int:
    prog = build(config.model)
    n1, n2 = config.batches
    methods = CONCRETE if config.method is Method.AUTO else (config.method,)
    estimates = {m: predict_generic(prog, m, (n1, n2)) for m in methods}
    selected = select_method(prog, (n1, n2))
    if config.format == "json":
        report = {
            "n1": n1,
            "n2": n2,
            "selected_method": selected.value,
            "estimates": [e.to_dict() for e in estimates.values()],
        }
        if n1 == n2:
            report["closed_form"] = [predict_table(config.model, m, n1).to_dict() for m in methods]
        text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    else:
        rows = [[m.value, label, value] for m, e in estimates.items() for label, value in e.breakdown]
        rows += [[m.value, "total", e.flops] for m, e in estimates.items()]
        text = _csv_text(["method", "term", "flops"], rows)
    _emit(text, config.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_model(path: str | None) -> ModelSpec | None:
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return ModelSpec.from_json(fh.read())
    except OSError as exc:
        raise SpecError(f"cannot read model spec {path!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastntk", description="Empirical NTK computation and cost analysis.")
    verbs = parser.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="path to a JSON model spec")
    common.add_argument(
        "--method",
        default="auto",
        choices=[m.value.replace("_", "-") for m in Method],
        help="NTK method (default: auto)",
    )
    common.add_argument("--n1", type=int, default=2, help="first batch size")
    common.add_argument("--n2", type=int, default=None, help="second batch size (default: n1)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--count-flops", action="store_true", help="record counted multiply-adds")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("json", "csv"), default=None, help="json, or csv for sweep")
    common.add_argument("--sequential", action="store_true", help="deterministic sequential execution (default)")
    common.add_argument("--mem-cap", type=int, default=None, help=f"byte cap, overrides ${CAP_ENV}")
    common.add_argument("--timing", action="store_true", help="add informational wall-clock seconds")

    compute = verbs.add_parser("compute", parents=[common], help="compute one NTK")
    compute.add_argument("--no-values", action="store_true", help="omit the NTK values from the output")
    check = verbs.add_parser("check", parents=[common], help="cross-check all methods against a dense oracle")
    check.add_argument("--corrupt-rules", action="store_true", help=argparse.SUPPRESS)
    sweep = verbs.add_parser("sweep", parents=[common], help="counted-FLOP benchmark grid")
    for axis, default in (("w", "16"), ("o", "4"), ("n", "2"), ("t", "10"), ("d", None), ("f", None)):
        sweep.add_argument(f"--{axis}", default=default, help=f"comma-separated {axis} values")
    sweep.add_argument("--methods", default=",".join(m.value for m in CONCRETE), help="comma-separated methods")
    sweep.add_argument("--grid", help="JSON file with axis lists (w, o, n, t, d, f, methods)")
    verbs.add_parser("cost", parents=[common], help="print predicted cost breakdowns")
    return parser


def _sweep_axes(args, base: ModelSpec) -> tuple[dict, list[Method]]:
    raw = {k: getattr(args, k) for k in ("w", "o", "n", "t", "d", "f")}
    raw["d"] = raw["d"] if raw["d"] is not None else str(base.d)
    raw["f"] = raw["f"] if raw["f"] is not None else str(base.f)
    axes = {k: _int_list(v) for k, v in raw.items()}
    methods = [v for v in args.methods.split(",") if v.strip()]
    if args.grid:
        try:
            with open(args.grid, encoding="utf-8") as fh:
                grid = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read sweep grid {args.grid!r}: {exc}") from exc
        unknown = set(grid) - set(axes) - {"methods"}
        if unknown:
            raise SpecError(f"unknown sweep grid keys: {sorted(unknown)}")
        for k, v in grid.items():
            values = v if isinstance(v, list) else [v]
            if k == "methods":
                methods = values
            else:
                axes[k] = values
    return {k: _axis(v, k) for k, v in axes.items()}, [Method.parse(m) for m in methods]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = _load_model(args.model)
        if args.verb in ("compute", "cost") and model is None:
            raise SpecError(f"{args.verb} requires --model")
        for name in ("n1", "n2"):
            value = getattr(args, name)
            if value is not None and value < 1:
                raise SpecError(f"--{name} must be >= 1, got {value}")
        config = RunConfig(
            model=model,
            method=Method.parse(args.method),
            n1=args.n1,
            n2=args.n2,
            seed=args.seed,
            counting=args.count_flops,
            out=args.out,
            format=args.format or ("csv" if args.verb == "sweep" else "json"),
            sequential=True,
            include_values=not getattr(args, "no_values", False),
            timing=args.timing,
            mem_cap=args.mem_cap,
        )
        if args.verb == "compute":
            return cmd_compute(config)
        if args.verb == "check":
            return cmd_check(config, corrupt=args.corrupt_rules)
        if args.verb == "sweep":
            axes, methods = _sweep_axes(args, config.model or ModelSpec("fcn", 10, 16, 4, input_dim=3))
            return cmd_sweep(config, axes, methods)
        return cmd_cost(config)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except CapExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CAP


if __name__ == "__main__":
    sys.exit(main())
