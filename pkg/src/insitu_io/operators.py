"""Operator plug-in contract and the built-in analytics activities.

An operator is any object with a ``name`` and two methods:

``required_fields(args) -> list[str]``
    The identifiers that must be bound before the rule can run, derived only
    from the rule's XML arguments.  Used for dependency analysis.

``execute(args, io_config, source, inputs) -> value``
    Run the rule.  ``io_config`` is an :class:`IoContext`, ``source`` the
    producer rank for per-source rules (``None`` once values have been
    combined on the server) and ``inputs`` maps each required identifier to
    its value.  Must be deterministic.

Register new operators with :func:`register_operator`; rule names are
checked against the registry when a configuration is loaded.

Communications (``reduction``, ``broadcast``) are handled by the
diagnostics federator itself, but expose the same ``required_fields`` hook
so the dependency analysis treats both kinds uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigError, ExpressionError, PipelineError
from .expr import eval_arithmetic, parse_expression, symbols

REDUCE_OPS = ("sum", "min", "max")


@dataclass(frozen=True)
class IoContext:
    """What an operator may know about the server running it."""

    options: dict = field(default_factory=dict)
    field_dims: dict = field(default_factory=dict)
    server_rank: int = 0
    num_servers: int = 1


class Operator(Protocol):
    name: str

    def required_fields(self, args: dict) -> list[str]: ...

    def execute(self, args: dict, io_config: IoContext, source, inputs: dict): ...


def _require(args, key, rule):
    try:
        return args[key]
    except KeyError:
        raise ConfigError(f"{rule}: missing argument {key!r}") from None


def exec_localreduce(values, op: str):
    """Combine every element of ``values`` into one scalar, in index order."""
    flat = np.asarray(values).ravel()
    if flat.size == 0:
        raise PipelineError("localreduce of an empty array")
    if op == "sum":
        # accumulate is strictly left-to-right; ndarray.sum is pairwise
        return np.add.accumulate(flat)[-1]
    if op == "min":
        return flat.min()
    if op == "max":
        return flat.max()
    raise PipelineError(f"unknown reduction operator {op!r}")


class LocalReduce:
    name = "localreduce"

    def required_fields(self, args):
        op = _require(args, "operator", self.name)
        if op not in REDUCE_OPS:
            raise ConfigError(f"localreduce: operator must be one of {REDUCE_OPS}, got {op!r}")
        return [_require(args, "field", self.name)]

    def execute(self, args, io_config, source, inputs):
        return exec_localreduce(inputs[args["field"]], args["operator"])


class Arithmetic:
    name = "arithmetic"

    def required_fields(self, args):
        eq = _require(args, "equation", self.name)
        try:
            return symbols(eq)
        except ExpressionError as exc:
            raise ConfigError(f"arithmetic: {exc}") from None

    def execute(self, args, io_config, source, inputs):
        return np.float64(eval_arithmetic(args["equation"], inputs))


def _axis_of(args, io_config, rule):
    if "axis" in args:
        return int(args["axis"])
    dim = _require(args, "dimension", rule)
    dims = io_config.field_dims.get(args["field"])
    if not dims or dim not in dims:
        raise PipelineError(f"{rule}: cannot locate dimension {dim!r} of {args['field']!r}")
    return list(dims).index(dim)


class Slice:
    """Extract one index along a dimension (``dimension`` name or ``axis``)."""

    name = "slice"

    def required_fields(self, args):
        _require(args, "index", self.name)
        if "axis" not in args and "dimension" not in args:
            raise ConfigError("slice: needs 'dimension' or 'axis'")
        return [_require(args, "field", self.name)]

    def execute(self, args, io_config, source, inputs):
        arr = np.asarray(inputs[args["field"]])
        axis = _axis_of(args, io_config, self.name)
        return np.require(np.take(arr, int(args["index"]), axis=axis), requirements="C")


class Coarsen:
    """Stride subsampling, on one dimension or (by default) all of them."""

    name = "coarsen"

    def required_fields(self, args):
        if int(_require(args, "stride", self.name)) < 1:
            raise ConfigError("coarsen: stride must be >= 1")
        return [_require(args, "field", self.name)]

    def execute(self, args, io_config, source, inputs):
        arr = np.asarray(inputs[args["field"]])
        stride = int(args["stride"])
        if "axis" in args or "dimension" in args:
            idx = [slice(None)] * arr.ndim
            idx[_axis_of(args, io_config, self.name)] = slice(None, None, stride)
        else:
            idx = [slice(None, None, stride)] * arr.ndim
        return np.ascontiguousarray(arr[tuple(idx)])


class _Communication:
    def __init__(self, name, needs_op):
        self.name = name
        self.needs_op = needs_op

    def required_fields(self, args):
        if self.needs_op:
            op = _require(args, "operator", self.name)
            if op not in REDUCE_OPS:
                raise ConfigError(f"{self.name}: operator must be one of {REDUCE_OPS}")
        root = args.get("root", "auto")
        if root != "auto" and not root.isdigit():
            raise ConfigError(f"{self.name}: root must be 'auto' or a rank, got {root!r}")
        return [_require(args, "field", self.name)]


OPERATORS: dict[str, Operator] = {}
COMMUNICATIONS = {
    "reduction": _Communication("reduction", needs_op=True),
    "broadcast": _Communication("broadcast", needs_op=False),
}


def register_operator(op: Operator) -> Operator:
    if op.name in OPERATORS:
        raise ValueError(f"operator {op.name!r} already registered")
    OPERATORS[op.name] = op
    return op


def lookup(kind: str, name: str):
    table = OPERATORS if kind == "operator" else COMMUNICATIONS
    try:
        return table[name]
    except KeyError:
        raise ConfigError(f"unknown {kind} {name!r}") from None


for _op in (LocalReduce(), Arithmetic(), Slice(), Coarsen()):
    register_operator(_op)

__all__ = [
    "IoContext", "Operator", "exec_localreduce", "eval_arithmetic", "parse_expression",
    "register_operator", "lookup", "OPERATORS", "COMMUNICATIONS", "REDUCE_OPS",
]
