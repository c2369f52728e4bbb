"""Experiment runner and report generator.

Subcommands: `run` (decode campaign -> JSONL traces + JSON summary),
`analyze` (trace directory -> report JSON, CSV tables, optional SVG),
`bench` (wall-time / oracle-call table over decode variants), and
`toy-serve` (host a toy oracle behind the wire protocol). Set DIFT_LOG to
control log verbosity. Configs are versioned JSON; unknown fields are
rejected rather than ignored.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .core import DecodeConfig, TokenSequence
from .guidance import SCALE_WARN_THRESHOLD
from .instrument import (
    DecodeTrace,
    TraceFormatError,
    answer_step,
    pdm_curve,
    read_trace,
    write_trace,
)
from .instrument import _config_from_json as decode_config_from_json
from .oracle import OracleError, OracleTransportError, oracle_from_spec
from .scheduler import DecodeAbortedError, decode
from .serve import serve_oracle

CONFIG_SCHEMA = "dift-config/1"

log = logging.getLogger("dift.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ORACLE = 2


class ConfigError(ValueError):
    """Experiment config file is unreadable or violates the schema."""


@dataclass(frozen=True, slots=True)
class BenchSpec:
    grid: tuple[tuple[int, int], ...]
    hyper_pairs: tuple[tuple[float, float], ...]
    repetitions: int


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    decode: DecodeConfig
    oracle: dict
    repetitions: int
    seeds: tuple[int, ...]
    trace_dir: str | None
    bench: BenchSpec | None


def load_config(path: Path | str) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"config schema must be {CONFIG_SCHEMA!r}, got {raw.get('schema')!r}")
    known = {"schema", "decode", "oracle", "repetitions", "seeds", "trace_dir", "bench"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        decode_cfg = decode_config_from_json(raw["decode"])
    except KeyError:
        raise ConfigError("config is missing the decode section") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid decode section: {exc}") from exc
    oracle_spec = raw.get("oracle")
    if not isinstance(oracle_spec, dict):
        raise ConfigError("config needs an oracle section (object)")
    repetitions = raw.get("repetitions", 1)
    if not isinstance(repetitions, int) or repetitions < 1:
        raise ConfigError("repetitions must be a positive integer")
    seeds_raw = raw.get("seeds")
    if seeds_raw is None:
        seeds = tuple(decode_cfg.seed + r for r in range(repetitions))
    else:
        if not isinstance(seeds_raw, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds_raw
        ):
            raise ConfigError("seeds must be a list of integers")
        if not seeds_raw:
            raise ConfigError("seeds must be non-empty when given")
        seeds = tuple(seeds_raw)
    bench_raw = raw.get("bench")
    bench = None
    if bench_raw is not None:
        bench = _parse_bench(bench_raw, decode_cfg)
    trace_dir = raw.get("trace_dir")
    if trace_dir is not None and not isinstance(trace_dir, str):
        raise ConfigError("trace_dir must be a string")
    # Fail on a broken oracle spec up front, not mid-campaign.
    try:
        probe = oracle_from_spec(oracle_spec, seed=seeds[0], length=decode_cfg.length)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid oracle spec: {exc}") from exc
    oracle_length = getattr(probe, "length", None)
    if oracle_length is not None and oracle_length != decode_cfg.length:
        raise ConfigError(
            f"oracle produces sequences of length {oracle_length}, "
            f"decode is configured for {decode_cfg.length}"
        )
    return ExperimentConfig(
        decode=decode_cfg,
        oracle=dict(oracle_spec),
        repetitions=repetitions,
        seeds=seeds,
        trace_dir=trace_dir,
        bench=bench,
    )


def _parse_bench(raw: dict, decode_cfg: DecodeConfig) -> BenchSpec:
    if not isinstance(raw, dict):
        raise ConfigError("bench section must be an object")
    unknown = set(raw) - {"grid", "hyper_pairs", "repetitions"}
    if unknown:
        raise ConfigError(f"unknown bench fields: {sorted(unknown)}")
    grid_raw = raw.get("grid", [[decode_cfg.length, decode_cfg.steps]])
    try:
        grid = tuple((int(l), int(k)) for l, k in grid_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bench grid must be [[L, K], ...]: {exc}") from exc
    pairs_raw = raw.get("hyper_pairs", [])
    try:
        pairs = tuple((float(g), float(s)) for g, s in pairs_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bench hyper_pairs must be [[gamma, s_vrg], ...]: {exc}") from exc
    reps = raw.get("repetitions", 3)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("bench repetitions must be a positive integer")
    return BenchSpec(grid=grid, hyper_pairs=pairs, repetitions=reps)


def _warn_scale(decode_cfg: DecodeConfig) -> None:
    if decode_cfg.vrg_enabled and decode_cfg.s_vrg > SCALE_WARN_THRESHOLD:
        print(
            f"warning: s_vrg={decode_cfg.s_vrg} is above {SCALE_WARN_THRESHOLD}; "
            "very large guidance scales can drown out the textual condition",
            file=sys.stderr,
        )


def variant_label(config: DecodeConfig) -> str:
    parts = [config.strategy.value]
    if config.psp_enabled:
        parts.append("psp")
    if config.vrg_enabled:
        parts.append("vrg")
    return "+".join(parts)


def cmd_run(config_path: str, trace_dir: str | None = None) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _warn_scale(config.decode)
    out_dir = Path(trace_dir or config.trace_dir or "traces")
    out_dir.mkdir(parents=True, exist_ok=True)

    traces: list[DecodeTrace] = []
    total_calls = 0
    total_wall = 0.0
    label = variant_label(config.decode)
    for index, seed in enumerate(config.seeds):
        decode_cfg = replace(config.decode, seed=seed)
        # Variant in the name lets campaigns share one directory and still
        # be overlaid by `analyze`.
        path = out_dir / f"trace-{label}-{index:04d}.jsonl"
        try:
            oracle = oracle_from_spec(config.oracle, seed=seed, length=decode_cfg.length)
            meta = oracle.metadata()
            prompt = TokenSequence.fully_masked(decode_cfg.length, meta.mask_token_id)
            result = decode(oracle, prompt, decode_cfg)
        except DecodeAbortedError as exc:
            write_trace(exc.partial_trace, path)
            print(f"oracle failure: {exc} (partial trace at {path})", file=sys.stderr)
            return EXIT_ORACLE
        except (OracleTransportError, OracleError) as exc:
            print(f"oracle failure: {exc}", file=sys.stderr)
            return EXIT_ORACLE
        write_trace(result.trace, path)
        traces.append(result.trace)
        total_calls += result.oracle_calls
        total_wall += result.wall_time

    answer_steps = []
    if config.decode.answer_pattern is not None:
        for trace in traces:
            step = answer_step(trace, config.decode.answer_pattern, trace.metadata)
            if step is not None:
                answer_steps.append(step)
    pdm_values = [p.pdm for t in traces for rec in t.steps for p in rec.pdm]
    summary = {
        "schema": "dift-run/1",
        "traces": len(traces),
        "trace_dir": str(out_dir),
        "answer_steps_detected": len(answer_steps),
        "mean_answer_step": (sum(answer_steps) / len(answer_steps)) if answer_steps else None,
        "mean_pdm": (sum(pdm_values) / len(pdm_values)) if pdm_values else None,
        "oracle_calls": total_calls,
        "wall_time_s": total_wall,
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_analyze(
    trace_dir: str, report_path: str, svg_path: str | None = None, buckets: int = 16
) -> int:
    directory = Path(trace_dir)
    if not directory.is_dir():
        print(f"config error: {directory} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    traces: list[DecodeTrace] = []
    for path in sorted(directory.glob("*.jsonl")):
        try:
            traces.append(read_trace(path))
        except TraceFormatError as exc:
            print(f"malformed trace {path.name}: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    by_variant: dict[str, list[DecodeTrace]] = {}
    for trace in traces:
        by_variant.setdefault(variant_label(trace.config), []).append(trace)

    histogram: dict[str, dict[int, int]] = {}
    curves: dict[str, list[tuple[float, float]]] = {}
    for label, group in sorted(by_variant.items()):
        counts: dict[int, int] = {}
        for trace in group:
            pattern = trace.config.answer_pattern
            if pattern is None:
                continue
            step = answer_step(trace, pattern, trace.metadata)
            if step is not None:
                counts[step] = counts.get(step, 0) + 1
        if counts:
            histogram[label] = dict(sorted(counts.items()))
        curve = pdm_curve(group, buckets=buckets)
        if curve:
            curves[label] = curve

    report = {
        "schema": "dift-report/1",
        "traces": len(traces),
        "variants": sorted(by_variant),
        "answer_step_histogram": {
            label: {str(step): count for step, count in counts.items()}
            for label, counts in histogram.items()
        },
        "pdm_curve": {
            label: [[rel, mean] for rel, mean in curve] for label, curve in curves.items()
        },
    }
    report_file = Path(report_path)
    report_file.parent.mkdir(parents=True, exist_ok=True)
    report_file.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")

    stem = report_file.with_suffix("")
    with open(f"{stem}_answer_steps.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "step", "count"])
        for label, counts in histogram.items():
            for step, count in counts.items():
                writer.writerow([label, step, count])
    with open(f"{stem}_pdm_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "relative_step", "mean_pdm"])
        for label, curve in curves.items():
            for rel, mean in curve:
                writer.writerow([label, rel, mean])

    if svg_path is not None:
        Path(svg_path).write_text(_render_svg(histogram, curves), encoding="utf-8")
    return EXIT_OK


def _render_svg(
    histogram: dict[str, dict[int, int]], curves: dict[str, list[tuple[float, float]]]
) -> str:
    """Two stacked panels: answer-step bars on top, PDM curves below."""
    width, panel_h, margin = 640, 220, 40
    palette = ["#3366cc", "#dc3912", "#ff9900", "#109618", "#990099", "#0099c6"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{2 * panel_h + 3 * margin}" font-family="sans-serif" font-size="11">'
    ]

    def color(i: int) -> str:
        return palette[i % len(palette)]

    # Panel 1: answer-step histogram.
    parts.append(f'<text x="{margin}" y="{margin - 12}">answer generation step</text>')
    if histogram:
        max_step = max(s for counts in histogram.values() for s in counts)
        max_count = max(c for counts in histogram.values() for c in counts.values())
        plot_w = width - 2 * margin
        n_variants = len(histogram)
        slot = plot_w / max_step
        bar = slot / (n_variants + 1)
        for vi, (label, counts) in enumerate(sorted(histogram.items())):
            parts.append(
                f'<text x="{margin}" y="{margin + 14 * vi}" fill="{color(vi)}">{label}</text>'
            )
            for step, count in counts.items():
                h = (count / max_count) * (panel_h - 30)
                x = margin + (step - 1) * slot + vi * bar
                y = margin + panel_h - h
                parts.append(
                    f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar:.1f}" height="{h:.1f}" '
                    f'fill="{color(vi)}"/>'
                )
    base = margin + panel_h
    parts.append(
        f'<line x1="{margin}" y1="{base}" x2="{width - margin}" y2="{base}" stroke="#333"/>'
    )

    # Panel 2: PDM curves over relative step.
    top = 2 * margin + panel_h
    parts.append(f'<text x="{margin}" y="{top - 12}">mean PDM by relative step</text>')
    if curves:
        max_pdm = max(m for curve in curves.values() for _, m in curve) or 1.0
        plot_w = width - 2 * margin
        for vi, (label, curve) in enumerate(sorted(curves.items())):
            pts = " ".join(
                f"{margin + rel * plot_w:.1f},{top + panel_h - 30 - (mean / max_pdm) * (panel_h - 40):.1f}"
                for rel, mean in curve
            )
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color(vi)}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{margin}" y="{top + 14 * vi}" fill="{color(vi)}">{label}</text>'
            )
    bottom = top + panel_h
    parts.append(
        f'<line x1="{margin}" y1="{bottom}" x2="{width - margin}" y2="{bottom}" stroke="#333"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts)


_BENCH_VARIANTS = (
    ("baseline", False, False),
    ("psp", True, False),
    ("vrg", False, True),
    ("psp_vrg", True, True),
)


def cmd_bench(config_path: str) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    bench = config.bench or BenchSpec(
        grid=((config.decode.length, config.decode.steps),), hyper_pairs=(), repetitions=3
    )
    rows = []
    try:
        for length, steps in bench.grid:
            base = replace(config.decode, length=length, steps=steps)
            cells: list[tuple[str, DecodeConfig]] = [
                (name, replace(base, psp_enabled=psp, vrg_enabled=vrg))
                for name, psp, vrg in _BENCH_VARIANTS
            ]
            for gamma, s_vrg in bench.hyper_pairs:
                cells.append(
                    (
                        f"psp_vrg[gamma={gamma:g},s_vrg={s_vrg:g}]",
                        replace(
                            base, psp_enabled=True, vrg_enabled=True, gamma=gamma, s_vrg=s_vrg
                        ),
                    )
                )
            for name, decode_cfg in cells:
                _warn_scale(decode_cfg)
                walls = []
                calls = 0
                for rep in range(bench.repetitions):
                    seed = config.seeds[rep % len(config.seeds)]
                    oracle = oracle_from_spec(
                        config.oracle, seed=seed, length=decode_cfg.length
                    )
                    meta = oracle.metadata()
                    prompt = TokenSequence.fully_masked(
                        decode_cfg.length, meta.mask_token_id
                    )
                    result = decode(oracle, prompt, replace(decode_cfg, seed=seed))
                    walls.append(result.wall_time)
                    calls = result.oracle_calls
                rows.append(
                    {
                        "L": length,
                        "K": steps,
                        "variant": name,
                        "gamma": decode_cfg.gamma,
                        "s_vrg": decode_cfg.s_vrg,
                        "mean_wall_s": sum(walls) / len(walls),
                        "oracle_calls": calls,
                    }
                )
    except (DecodeAbortedError, OracleTransportError, OracleError) as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    print(json.dumps({"schema": "dift-bench/1", "rows": rows}))
    return EXIT_OK


def cmd_toy_serve(
    oracle_arg: str,
    port: int,
    host: str = "127.0.0.1",
    length: int = 64,
    seed: int = 0,
    max_top_k: int | None = None,
) -> int:
    try:
        text = oracle_arg
        if not text.lstrip().startswith("{"):
            text = Path(oracle_arg).read_text(encoding="utf-8")
        spec = json.loads(text)
        oracle = oracle_from_spec(spec, seed=seed, length=length)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: invalid oracle spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    server, thread = serve_oracle(oracle, host=host, port=port, max_top_k=max_top_k)
    bound_host, bound_port = server.server_address[:2]
    print(json.dumps({"schema": "dift-serve/1", "address": f"{bound_host}:{bound_port}"}))
    sys.stdout.flush()
    try:
        thread.join()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dift",
        description="Masked-diffusion decode engine: campaigns, analysis, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a decode campaign from a JSON config")
    p_run.add_argument("--config", required=True, help="path to a dift-config/1 JSON file")
    p_run.add_argument("--trace-dir", help="directory for JSONL traces (overrides config)")

    p_an = sub.add_parser("analyze", help="aggregate traces into a report")
    p_an.add_argument("--traces", required=True, help="directory of dift-trace/1 files")
    p_an.add_argument("--report", required=True, help="output report JSON path")
    p_an.add_argument("--svg", help="optional SVG chart path")
    p_an.add_argument("--buckets", type=int, default=16, help="PDM curve buckets")

    p_bench = sub.add_parser("bench", help="time decode variants over an L/K grid")
    p_bench.add_argument("--config", required=True)

    p_serve = sub.add_parser("toy-serve", help="host a toy oracle over the wire protocol")
    p_serve.add_argument("--port", type=int, default=0)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--oracle", required=True, help="oracle spec: inline JSON or a file path")
    p_serve.add_argument("--length", type=int, default=64)
    p_serve.add_argument("--seed", type=int, default=0)
    p_serve.add_argument("--max-top-k", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DIFT_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.trace_dir)
    if args.command == "analyze":
        return cmd_analyze(args.traces, args.report, args.svg, args.buckets)
    if args.command == "bench":
        return cmd_bench(args.config)
    if args.command == "toy-serve":
        return cmd_toy_serve(
            args.oracle, args.port, args.host, args.length, args.seed, args.max_top_k
        )
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
