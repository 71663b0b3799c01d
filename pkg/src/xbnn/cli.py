"""Command-line entry point.

Subcommands: compile (model -> control stream), run (compile + simulate),
oracle (reference forward pass), compare (oracle vs simulator, byte
equality), gen (random model + input fixtures), energy (stats -> report).

Exit codes: 0 success, 1 usage or unreadable/malformed input files,
2 model validation or compile rejection, 3 oracle/simulator mismatch.
All output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import archsim, compiler, energy, model as model_mod, xbf
from .core import forward_ref
from .errors import (
    AddressFault,
    CompileError,
    ConfigMismatch,
    ParseError,
    SchemaError,
    ValidationError,
    XbnnError,
)
from .model import _atomic_write

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_MISMATCH = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this tool reserves 2 for
    # validation/compile rejections
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _memory_config(args) -> compiler.MemoryConfig:
    kw = {}
    if args.bank_a_kbit is not None:
        kw["bank_a_bits"] = args.bank_a_kbit * 1024
    if args.bank_b_kbit is not None:
        kw["bank_b_bits"] = args.bank_b_kbit * 1024
    if args.param_kbit is not None:
        kw["param_buffer_bits"] = args.param_kbit * 1024
    return compiler.MemoryConfig(**kw)


def _add_memory_flags(p) -> None:
    p.add_argument("--bank-a-kbit", type=int, help="source/sink bank A size")
    p.add_argument("--bank-b-kbit", type=int, help="source/sink bank B size")
    p.add_argument("--param-kbit", type=int, help="parameter buffer size")
    p.add_argument(
        "--allow-streaming-input",
        action="store_true",
        help="exempt layer 0's input from the source-bank capacity check, "
        "modeling an input streamed from off chip",
    )
    p.add_argument(
        "--stream-params",
        action="store_true",
        help="lift the per-layer parameter-buffer capacity check, modeling "
        "parameters streamed from external storage",
    )


def _parse_fault(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError("expected LAYER,CHANNEL,ROW,COL")
    return tuple(int(v) for v in parts)  # type: ignore[return-value]


def cmd_compile(args) -> int:
    m = model_mod.load_model(args.model)
    cs = compiler.compile_model(
        m,
        _memory_config(args),
        stream_params=args.stream_params,
        allow_streaming_input=args.allow_streaming_input,
    )
    compiler.emit_control_stream(cs, args.out)
    print(
        f"compiled {len(cs.programs)} layers, parameter image "
        f"{cs.param_image.size} words -> {args.out}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    m = model_mod.load_model(args.model)
    fmap = xbf.load_fmap(args.input)
    cs = compiler.compile_model(
        m,
        _memory_config(args),
        stream_params=args.stream_params,
        allow_streaming_input=args.allow_streaming_input,
    )
    fault = _parse_fault(args.inject_fault) if args.inject_fault else None
    if args.trace:
        with open(args.trace, "w") as tf:
            out, stats = archsim.simulate(cs, fmap, trace=tf, inject_fault=fault)
    else:
        out, stats = archsim.simulate(cs, fmap, inject_fault=fault)
    xbf.save_fmap(out, args.output)
    if args.stats:
        _atomic_write(
            args.stats,
            (json.dumps(stats.as_dict(), indent=1, sort_keys=True) + "\n").encode(),
        )
    print(
        f"simulated {len(cs.programs)} layers in {stats.cycles} cycles -> "
        f"{args.output}"
    )
    return EXIT_OK


def cmd_oracle(args) -> int:
    m = model_mod.load_model(args.model)
    fmap = xbf.load_fmap(args.input)
    out = forward_ref(m, fmap)
    xbf.save_fmap(out, args.output)
    print(f"oracle output {out.h}x{out.w}x{out.c} -> {args.output}")
    return EXIT_OK


def _compare_one(m, fmap, cfg, fault=None, stream_params=False,
                 allow_streaming_input=False) -> tuple[bool, str]:
    """Oracle vs simulator with per-layer attribution of any divergence."""
    ref_out, ref_layers = forward_ref(m, fmap, return_layers=True)
    cs = compiler.compile_model(
        m, cfg,
        stream_params=stream_params,
        allow_streaming_input=allow_streaming_input,
    )
    sim_out, stats, sim_layers = archsim.simulate(
        cs, fmap, inject_fault=fault, return_layers=True
    )
    for i, (a, b) in enumerate(zip(ref_layers, sim_layers)):
        if not a.same_as(b):
            diff = int(np.count_nonzero(a.words != b.words))
            return False, (
                f"first divergence at layer {i}: {diff} of {a.words.size} "
                f"output words differ"
            )
    return True, f"match ({stats.cycles} cycles)"


def cmd_compare(args) -> int:
    cfg = _memory_config(args)
    fault = _parse_fault(args.inject_fault) if args.inject_fault else None
    runs = []
    if args.model:
        if not args.input:
            raise ParseError("--model needs --input (or use --seed)")
        runs.append((model_mod.load_model(args.model), xbf.load_fmap(args.input)))
    else:
        for i in range(args.runs):
            m = model_mod.gen_random_model(args.seed + i, depth=args.depth)
            h, w, c = m.input_shape
            runs.append((m, model_mod.gen_random_fmap([args.seed + i, 1], h, w, c)))
    failures = 0
    for i, (m, fmap) in enumerate(runs):
        ok, msg = _compare_one(
            m, fmap, cfg, fault=fault,
            stream_params=args.stream_params,
            allow_streaming_input=args.allow_streaming_input,
        )
        print(f"run {i} ({m.name}): {'ok, ' + msg if ok else 'MISMATCH, ' + msg}")
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} of {len(runs)} runs diverged")
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.depth < 1:
        raise ParseError(f"--depth must be >= 1, got {args.depth}")
    m = model_mod.gen_random_model(
        args.seed, depth=args.depth, max_hw=args.max_hw, max_c=args.max_c
    )
    model_mod.save_model(m, args.out_model)
    h, w, c = m.input_shape
    fmap = model_mod.gen_random_fmap([args.seed, 1], h, w, c)
    xbf.save_fmap(fmap, args.out_input)
    print(
        f"model {m.name}: {len(m.layers)} layers, input {h}x{w}x{c} -> "
        f"{args.out_model}, {args.out_input}"
    )
    return EXIT_OK


def cmd_energy(args) -> int:
    try:
        with open(args.stats, "rb") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read {args.stats}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{args.stats} is not valid JSON: {e}") from None
    try:
        stats = archsim.Stats.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{args.stats}: bad stats file ({e})") from None
    coeffs = (
        energy.load_coefficients(args.coeffs)
        if args.coeffs
        else energy.default_coefficients()
    )
    report = energy.estimate(stats, coeffs, args.freq_mhz * 1e6)
    if args.report:
        _atomic_write(
            args.report,
            (json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n").encode(),
        )
    sys.stdout.write(report.render_text())
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="xbnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="lower a model to a control stream")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_memory_flags(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("run", help="compile and simulate a model on an input")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stats", help="write the event counters as JSON")
    p.add_argument("--trace", help="write a per-transaction debug trace")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    _add_memory_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="reference forward pass")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="byte-compare simulator against oracle")
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    _add_memory_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen", help="generate a random model and matching input")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-input", required=True)
    p.add_argument("--max-hw", type=int, default=16)
    p.add_argument("--max-c", type=int, default=64)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("energy", help="energy/throughput report from stats")
    p.add_argument("--stats", required=True)
    p.add_argument("--coeffs", help="coefficient JSON (default: packaged set)")
    p.add_argument("--freq-mhz", type=float, required=True)
    p.add_argument("--report", help="write the report as JSON")
    p.set_defaults(func=cmd_energy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, CompileError, ConfigMismatch, AddressFault) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, SchemaError, ValueError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except XbnnError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
