"""Command line: ``run``, ``dump`` and ``validate``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config, parse_config
from .errors import InsituError
from .harness import SimParams, builtin_config, metrics_lines, model_options, run
from .rulegraph import build_rule_graph
from .sdc import summarize
from .sim import TransportConfig


def _options(pairs) -> dict:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--option expects key=value, got {item!r}")
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def _load(spec: str, options: dict):
    """A path, or the name of a shipped configuration (``profile``, ``simple``)."""
    path = Path(spec)
    if path.exists():
        return load_config(path, options)
    return parse_config(builtin_config(spec), options)


def cmd_run(args) -> int:
    params = SimParams(
        servers=args.servers, producers_per_server=args.producers_per_server,
        end_time=args.end_time, pool_size=args.pool_size,
        model_seed=args.model_seed, data_seed=args.data_seed,
        transport=TransportConfig(seed=args.seed),
        checkpoint_at=args.checkpoint_at,
        restore_from=Path(args.restore_from).read_bytes() if args.restore_from else None,
        out_dir=args.out_dir, options=_options(args.option))
    config = _load(args.config, model_options(params))
    result = run(config, params)
    lines = metrics_lines(result)
    if args.metrics_out:
        Path(args.metrics_out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    if result.checkpoint is not None and not args.out_dir:
        print(f"checkpoint at timestep {args.checkpoint_at}: {len(result.checkpoint)} bytes "
              "(pass --out-dir to keep it)", file=sys.stderr)
    return 0


def cmd_dump(args) -> int:
    for i, name in enumerate(args.files):
        if i:
            print()
        print(f"== {name}")
        print(summarize(Path(name).read_bytes()))
    return 0


def cmd_validate(args) -> int:
    config = _load(args.config, _options(args.option))
    graph = build_rule_graph(config)
    print(f"ok: {len(config.data_definitions)} data definitions, {len(config.diagnostics)} "
          f"diagnostics, {len(graph.nodes)} rules, {len(config.writing.files)} files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="insitu-io", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the simulated producers and IO servers")
    r.add_argument("--config", default="profile", help="XML path or shipped config name")
    r.add_argument("--servers", type=int, default=4)
    r.add_argument("--producers-per-server", type=int, default=4)
    r.add_argument("--seed", type=int, default=0, help="transport seed")
    r.add_argument("--model-seed", type=int, default=0)
    r.add_argument("--data-seed", type=int, default=0)
    r.add_argument("--end-time", type=float, default=100.0)
    r.add_argument("--pool-size", type=int, default=16)
    r.add_argument("--checkpoint-at", type=int, default=None, metavar="TIMESTEP")
    r.add_argument("--restore-from", default=None, metavar="CHECKPOINT")
    r.add_argument("--out-dir", default=None)
    r.add_argument("--metrics-out", default=None)
    r.add_argument("--option", action="append", metavar="KEY=VALUE",
                   help="model option for config placeholders")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("dump", help="print SDC headers and variable summaries")
    d.add_argument("files", nargs="+")
    d.set_defaults(func=cmd_dump)

    v = sub.add_parser("validate", help="check a configuration without running")
    v.add_argument("--config", required=True)
    v.add_argument("--option", action="append", metavar="KEY=VALUE")
    v.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InsituError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
