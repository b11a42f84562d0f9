"""Command-line surface.

    memse predict|simulate|power|optimize|lower --config <file> [options]

Every command reads a JSON run configuration, writes a deterministic
report.json plus columnar CSV side files into the output directory, and a
timing.json that is deliberately kept outside the determinism contract.
Exit codes: 0 ok, 2 config error, 3 infeasible, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .crossbar import CrossbarConfig
from .errors import FormatError, InfeasibleError, NumericError
from .moments import mse_poly_coeffs, predict_prepared, prepare_network
from .montecarlo import TrialPlan, estimate
from .netmodel import LinearStage, PoolStage, lower, parse_inputs, parse_network
from .optimizer import GaParams, OptProblem, optimize
from .power import power_from_prediction
from .util import resolve_threads

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("predict", "simulate", "power", "optimize", "lower"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--output", default=None, help="output directory (overrides config)")
        p.add_argument("--no-quant", action="store_true", help="bypass conductance quantization")
        p.add_argument("--agg", choices=("mean", "max"), default=None, help="aggregation over outputs")
        p.add_argument("--agg-inputs", choices=("mean", "max"), default=None, help="aggregation over inputs")
        if name == "predict":
            p.add_argument("--poly", action="store_true", help="emit per-layer MSE(c) coefficients")
        if name == "simulate":
            p.add_argument("--trials", type=int, default=None)
            p.add_argument("--clip", action="store_true", help="clip sampled conductances to [0, G_max]")
            p.add_argument("--mc-mode", choices=("device", "column"), default=None)
            p.add_argument("--freeze-per-trial", action="store_true")
        if name == "optimize":
            p.add_argument("--budget", type=float, default=None)
            p.add_argument("--granularity", choices=("global", "per-layer"), default=None)
    return parser


def _load_config(path: str) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: cannot read config: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return doc


def _resolve_path(base: Path, value, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise FormatError(f"config field {what!r} must be a file path")
    p = Path(value)
    if not p.is_absolute():
        p = (base / p).resolve()
    return str(p)


def _resolve_g_max(raw, stages) -> list[float]:
    w_maxes = [s.w_max for s in stages]
    if raw is None or raw == "auto":
        return list(w_maxes)
    if isinstance(raw, dict):
        if raw.get("mode") != "wmax_scale":
            raise FormatError(f"unsupported g_max spec {raw!r}")
        factor = float(raw.get("value", 1.0))
        if factor <= 0:
            raise FormatError("g_max scale must be > 0")
        return [factor * w for w in w_maxes]
    if isinstance(raw, (int, float)):
        if raw <= 0:
            raise FormatError("g_max must be > 0")
        return [float(raw)] * len(stages)
    if isinstance(raw, list):
        if len(raw) != len(stages):
            raise FormatError(f"g_max list has {len(raw)} entries for {len(stages)} linear stages")
        vals = [float(v) for v in raw]
        if any(v <= 0 for v in vals):
            raise FormatError("g_max entries must be > 0")
        return vals
    raise FormatError(f"unsupported g_max spec {raw!r}")


class RunContext:
    """Config resolved against the lowered network."""

    def __init__(self, args):
        base = Path(args.config).resolve().parent
        doc = _load_config(args.config)
        self.command = args.command
        self.network_path = _resolve_path(base, doc.get("network"), "network")
        self.inputs_path = None
        if doc.get("inputs") is not None:
            self.inputs_path = _resolve_path(base, doc.get("inputs"), "inputs")
        out = args.output if args.output is not None else doc.get("output")
        self.output_dir = None if out is None else Path(out)
        self.seed = int(args.seed if args.seed is not None else doc.get("seed", 0))
        self.threads = args.threads
        self.quantize = not args.no_quant and bool(doc.get("quantize", True))
        self.agg_outputs = args.agg or doc.get("agg", {}).get("outputs", "mean")
        self.agg_inputs = args.agg_inputs or doc.get("agg", {}).get("inputs", "mean")

        xb = doc.get("crossbar")
        if not isinstance(xb, dict):
            raise FormatError("config needs a 'crossbar' object")
        try:
            self.sigma_v = float(xb["sigma_v"])
            self.n_levels = int(xb.get("n_levels", 128))
            self.r = float(xb.get("r", 1.0))
            self.noise_model = str(xb.get("noise_model", "pair"))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed crossbar config: {e}") from e
        self.g_max_raw = xb.get("g_max", "auto")
        self.sigma_table = xb.get("sigma_table")

        self.doc = doc
        self.spec = parse_network(self.network_path)
        self.net = lower(self.spec)
        stages = self.net.linear_stages()
        self.g_max = _resolve_g_max(self.g_max_raw, stages)
        table = None if self.sigma_table is None else np.asarray(self.sigma_table, dtype=np.float64)
        try:
            self.configs = [
                CrossbarConfig(g, self.n_levels, self.sigma_v, self.r, self.noise_model, table)
                for g in self.g_max
            ]
        except ValueError as e:
            raise FormatError(f"invalid crossbar parameters: {e}") from e

        self.inputs = None
        self.labels = None
        if self.inputs_path is not None:
            self.inputs, self.labels = parse_inputs(self.inputs_path)

    def require_inputs(self) -> np.ndarray:
        if self.inputs is None:
            raise FormatError("this command needs an 'inputs' batch in the config")
        return self.inputs

    def require_output(self) -> Path:
        if self.output_dir is None:
            raise FormatError("this command needs an 'output' directory (config or --output)")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir

    def embedded_config(self, command_section: dict) -> dict:
        """The resolved configuration a report embeds; rerunning it (plus an
        output directory) reproduces the report byte for byte."""
        cfg = {
            "network": self.network_path,
            "inputs": self.inputs_path,
            "seed": self.seed,
            "quantize": self.quantize,
            "agg": {"outputs": self.agg_outputs, "inputs": self.agg_inputs},
            "crossbar": {
                "g_max": self.g_max,
                "n_levels": self.n_levels,
                "sigma_v": self.sigma_v,
                "r": self.r,
                "noise_model": self.noise_model,
                "sigma_table": self.sigma_table,
            },
        }
        cfg.update(command_section)
        return cfg


def _write_report(out_dir: Path, report: dict, wall_seconds: float, command: str) -> None:
    report = dict(report)
    report["engine"] = {"name": "memse", "version": __version__, "kernel_backend": _kernels.BACKEND}
    report["timing_file"] = "timing.json"
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8"
    )
    (out_dir / "timing.json").write_text(
        json.dumps({"command": command, "wall_seconds": wall_seconds}, indent=2) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def _aggregate(values: np.ndarray, how: str) -> np.ndarray:
    return values.mean(axis=1) if how == "mean" else values.max(axis=1)


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    ctx = RunContext(args)
    inputs = ctx.require_inputs()
    out_dir = ctx.require_output()
    xs = inputs.reshape(inputs.shape[0], -1)
    prep = prepare_network(ctx.net, ctx.configs, quantize=ctx.quantize)

    results = [None] * xs.shape[0]

    def run(i):
        results[i] = predict_prepared(prep, xs[i])

    _map_indexed(run, xs.shape[0], ctx.threads)

    mse_rows = np.stack([r.final_mse.per_output for r in results])
    refs = np.stack([r.states[-1].ref for r in results])
    per_input = _aggregate(mse_rows, ctx.agg_outputs)
    agg = float(per_input.mean() if ctx.agg_inputs == "mean" else per_input.max())
    clamps = int(sum(r.diagnostics["negative_var_clamped"] for r in results))

    _write_csv(
        out_dir / "mse.csv",
        ["input"] + [f"out{j}" for j in range(mse_rows.shape[1])],
        [[i, *row] for i, row in enumerate(mse_rows)],
    )
    _write_csv(
        out_dir / "reference_outputs.csv",
        ["input"] + [f"out{j}" for j in range(refs.shape[1])],
        [[i, *row] for i, row in enumerate(refs)],
    )
    report = {
        "command": "predict",
        "config": ctx.embedded_config({"predict": {"poly": bool(getattr(args, "poly", False))}}),
        "results": {
            "n_inputs": int(xs.shape[0]),
            "n_outputs": int(mse_rows.shape[1]),
            "per_input_agg": [float(v) for v in per_input],
            "aggregate_mse": agg,
            "mean_mse": float(mse_rows.mean()),
            "max_mse": float(mse_rows.max()),
            "negative_var_clamped": clamps,
        },
        "csv": {"mse": "mse.csv", "reference_outputs": "reference_outputs.csv"},
    }

    if getattr(args, "poly", False):
        rows = []
        result0 = results[0]
        k = 0
        for idx, stage in enumerate(ctx.net.stages):
            if not isinstance(stage, LinearStage):
                continue
            state_in = result0.stage_input(idx)
            kind = _following_activation(ctx.net, idx)
            f1, f2, f3 = mse_poly_coeffs(prep.pairs[k], kind, state_in, bias=stage.bias)
            for j in range(f1.size):
                rows.append([k, j, f1[j], f2[j], f3[j]])
            k += 1
        _write_csv(out_dir / "poly_coeffs.csv", ["layer", "output", "F1", "F2", "F3"], rows)
        report["csv"]["poly_coeffs"] = "poly_coeffs.csv"

    _write_report(out_dir, report, time.perf_counter() - t0, "predict")
    return EXIT_OK


def _following_activation(net, stage_index: int) -> str:
    from .netmodel import ActivationStage

    for stage in net.stages[stage_index + 1 :]:
        if isinstance(stage, ActivationStage):
            return stage.kind
        if isinstance(stage, LinearStage):
            break
    return "identity"


def _map_indexed(fn, n: int, threads) -> None:
    from concurrent.futures import ThreadPoolExecutor

    workers = resolve_threads(threads)
    if workers <= 1 or n <= 1:
        for i in range(n):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, range(n)))


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    ctx = RunContext(args)
    inputs = ctx.require_inputs()
    out_dir = ctx.require_output()
    sim = ctx.doc.get("simulate", {})
    trials = int(args.trials if args.trials is not None else sim.get("trials", 200))
    mode = args.mc_mode or sim.get("mode", "device")
    clip = bool(args.clip or sim.get("clip", False))
    freeze = bool(args.freeze_per_trial or sim.get("freeze_per_trial", False))
    record_moments = bool(sim.get("record_moments", False))
    try:
        plan = TrialPlan(
            trials=trials,
            master_seed=ctx.seed,
            clip_conductances=clip,
            record_moments=record_moments,
            mode=mode,
            freeze_per_trial=freeze,
        )
    except ValueError as e:
        raise FormatError(str(e)) from e

    est = estimate(ctx.net, ctx.configs, inputs, plan, threads=ctx.threads, quantize=ctx.quantize)
    per_input = _aggregate(est.mse, ctx.agg_outputs)
    agg = float(per_input.mean() if ctx.agg_inputs == "mean" else per_input.max())

    _write_csv(
        out_dir / "mse.csv",
        ["input"] + [f"out{j}" for j in range(est.mse.shape[1])],
        [[i, *row] for i, row in enumerate(est.mse)],
    )
    _write_csv(
        out_dir / "mse_stderr.csv",
        ["input"] + [f"out{j}" for j in range(est.se.shape[1])],
        [[i, *row] for i, row in enumerate(est.se)],
    )
    if est.power_mean is not None:
        _write_csv(
            out_dir / "power.csv",
            ["input", "power_mean", "power_stderr"],
            [[i, pm, ps] for i, (pm, ps) in enumerate(zip(est.power_mean, est.power_se))],
        )

    report = {
        "command": "simulate",
        "config": ctx.embedded_config(
            {
                "simulate": {
                    "trials": trials,
                    "mode": mode,
                    "clip": clip,
                    "freeze_per_trial": freeze,
                    "record_moments": record_moments,
                }
            }
        ),
        "results": {
            "n_inputs": int(est.mse.shape[0]),
            "n_outputs": int(est.mse.shape[1]),
            "per_input_agg": [float(v) for v in per_input],
            "aggregate_mse": agg,
            "mean_mse": est.mean_mse,
            "max_mse": est.max_mse,
            "power_mean": None if est.power_mean is None else [float(v) for v in est.power_mean],
        },
        "csv": {"mse": "mse.csv", "mse_stderr": "mse_stderr.csv"},
    }
    if est.power_mean is not None:
        report["csv"]["power"] = "power.csv"
    _write_report(out_dir, report, time.perf_counter() - t0, "simulate")
    return EXIT_OK


def cmd_power(args) -> int:
    t0 = time.perf_counter()
    ctx = RunContext(args)
    inputs = ctx.require_inputs()
    out_dir = ctx.require_output()
    xs = inputs.reshape(inputs.shape[0], -1)
    prep = prepare_network(ctx.net, ctx.configs, quantize=ctx.quantize)

    breakdowns = [None] * xs.shape[0]

    def run(i):
        result = predict_prepared(prep, xs[i])
        breakdowns[i] = power_from_prediction(prep, result)

    _map_indexed(run, xs.shape[0], ctx.threads)

    n_layers = len(breakdowns[0].per_layer)
    mem = np.array([[b.per_layer[k].mem for k in range(n_layers)] for b in breakdowns])
    tp = np.array([[b.per_layer[k].tia_plus for k in range(n_layers)] for b in breakdowns])
    tm = np.array([[b.per_layer[k].tia_minus for k in range(n_layers)] for b in breakdowns])
    totals = np.array([b.total for b in breakdowns])

    _write_csv(
        out_dir / "power_per_layer.csv",
        ["layer", "mem", "tia_plus", "tia_minus", "total"],
        [
            [k, mem[:, k].mean(), tp[:, k].mean(), tm[:, k].mean(), (mem + tp + tm)[:, k].mean()]
            for k in range(n_layers)
        ],
    )
    _write_csv(out_dir / "power_per_input.csv", ["input", "total"], list(enumerate(totals)))

    report = {
        "command": "power",
        "config": ctx.embedded_config({}),
        "results": {
            "n_inputs": int(xs.shape[0]),
            "mean_total": float(totals.mean()),
            "max_total": float(totals.max()),
            "mean_mem": float(mem.sum(axis=1).mean()),
            "mean_tia_plus": float(tp.sum(axis=1).mean()),
            "mean_tia_minus": float(tm.sum(axis=1).mean()),
        },
        "csv": {"per_layer": "power_per_layer.csv", "per_input": "power_per_input.csv"},
    }
    _write_report(out_dir, report, time.perf_counter() - t0, "power")
    return EXIT_OK


def cmd_optimize(args) -> int:
    t0 = time.perf_counter()
    ctx = RunContext(args)
    inputs = ctx.require_inputs()
    out_dir = ctx.require_output()
    opt = ctx.doc.get("optimize", {})
    budget = args.budget if args.budget is not None else opt.get("budget")
    if budget is None:
        raise FormatError("optimize needs a power budget (--budget or config optimize.budget)")
    granularity = (args.granularity or opt.get("granularity", "global")).replace("-", "_")
    sample_size = int(opt.get("sample_size", min(100, inputs.shape[0])))
    bounds = tuple(opt.get("bounds", (1e-3, 1e3)))
    ga = GaParams(
        population=int(opt.get("population", 50)),
        generations=int(opt.get("generations", 100)),
        seed=ctx.seed,
        crossover_rate=float(opt.get("crossover_rate", 0.9)),
        mutation_scale=float(opt.get("mutation_scale", 0.25)),
        tournament_size=int(opt.get("tournament_size", 3)),
    )
    try:
        problem = OptProblem(
            net=ctx.net,
            granularity=granularity,
            power_budget=float(budget),
            input_sample=inputs[:sample_size],
            sigma_v=ctx.sigma_v,
            n_levels=ctx.n_levels,
            r=ctx.r,
            noise_model=ctx.noise_model,
            bounds=(float(bounds[0]), float(bounds[1])),
            ga=ga,
            agg_inputs=ctx.agg_inputs,
            quantize=ctx.quantize,
        )
    except ValueError as e:
        raise FormatError(str(e)) from e

    result = optimize(problem, threads=ctx.threads)

    _write_csv(
        out_dir / "history.csv",
        ["generation", "best_mse", "best_power", "feasible_fraction"],
        [[h["generation"], h["best_mse"], h["best_power"], h["feasible_fraction"]] for h in result.history],
    )
    report = {
        "command": "optimize",
        "config": ctx.embedded_config(
            {
                "optimize": {
                    "budget": float(budget),
                    "granularity": granularity,
                    "sample_size": sample_size,
                    "bounds": [float(bounds[0]), float(bounds[1])],
                    "population": ga.population,
                    "generations": ga.generations,
                    "crossover_rate": ga.crossover_rate,
                    "mutation_scale": ga.mutation_scale,
                    "tournament_size": ga.tournament_size,
                }
            }
        ),
        "results": {
            "g_max": [float(g) for g in result.g_max],
            "max_mse": result.max_mse,
            "power": result.power,
            "evaluations": result.evaluations,
        },
        "csv": {"history": "history.csv"},
    }
    _write_report(out_dir, report, time.perf_counter() - t0, "optimize")
    return EXIT_OK


def cmd_lower(args) -> int:
    t0 = time.perf_counter()
    ctx = RunContext(args)
    stages = []
    for stage in ctx.net.stages:
        if isinstance(stage, LinearStage):
            m, l = stage.shape
            nnz = stage.matrix.nnz if hasattr(stage.matrix, "nnz") else int(np.count_nonzero(stage.matrix))
            stages.append(
                {
                    "kind": "linear",
                    "rows": int(m),
                    "cols": int(l),
                    "nnz": int(nnz),
                    "w_max": stage.w_max,
                    "bias": stage.bias is not None,
                    "out_shape": list(stage.out_shape),
                }
            )
        elif isinstance(stage, PoolStage):
            stages.append({"kind": "avgpool", "window": stage.window, "out_shape": list(stage.out_shape)})
        else:
            stages.append({"kind": "activation", "fn": stage.kind, "out_shape": list(stage.out_shape)})
    summary = {
        "command": "lower",
        "config": ctx.embedded_config({}),
        "input_shape": list(ctx.net.input_shape),
        "stages": stages,
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if ctx.output_dir is not None:
        out_dir = ctx.require_output()
        _write_report(out_dir, summary, time.perf_counter() - t0, "lower")
    sys.stdout.write(text + "\n")
    return EXIT_OK


_COMMANDS = {
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "optimize": cmd_optimize,
    "lower": cmd_lower,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InfeasibleError as e:
        print(f"memse: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"memse: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, OSError) as e:
        print(f"memse: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
