"""Zero-redundancy model-parallel training engine and weather mixer."""

from .comm import InProcWorld, ProcessGroup, SocketCommunicator
from .model import ModelConfig, WeatherMixerModel
from .parallel import MpContext, comm_volume, pnn, pnt, ptn
from .sharding import ShardSpec, gather, shard
from .tensor import MatmulMode

__all__ = [
    "InProcWorld",
    "MatmulMode",
    "ModelConfig",
    "MpContext",
    "ProcessGroup",
    "ShardSpec",
    "SocketCommunicator",
    "WeatherMixerModel",
    "comm_volume",
    "gather",
    "pnn",
    "pnt",
    "ptn",
    "shard",
]
