"""Asynchronous in-situ analytics IO server over a simulated, seedable transport."""

from .checkpoint import capture, quiesce, read_checkpoint, restore, write_checkpoint
from .config import Config, load_config, parse_config, to_xml
from .errors import (ActiveMessagingError, CheckpointError, ConfigError, DeadlockError,
                     HandshakeError, InsituError, LayoutError, PipelineError, ProtocolError,
                     QuiesceTimeout, SdcFormatError, WriterError)
from .harness import RunResult, SimParams, World, run
from .layout import ChunkRect, merge_chunks
from .messaging import ActiveMessaging
from .rulegraph import build_rule_graph
from .sdc import SdcFile, read_sdc, write_sdc
from .sim import CostModel, TransportConfig

__version__ = "0.1.0"

__all__ = [
    "ActiveMessaging", "ActiveMessagingError", "CheckpointError", "ChunkRect", "Config",
    "ConfigError", "CostModel", "DeadlockError", "HandshakeError", "InsituError", "LayoutError",
    "PipelineError", "ProtocolError", "QuiesceTimeout", "RunResult", "SdcFile", "SdcFormatError",
    "SimParams", "TransportConfig", "World", "WriterError", "build_rule_graph", "capture",
    "load_config", "merge_chunks", "parse_config", "quiesce", "read_checkpoint", "read_sdc", "restore",
    "run", "to_xml", "write_checkpoint", "write_sdc",
]
