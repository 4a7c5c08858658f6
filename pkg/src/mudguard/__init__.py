"""ISP-level MUD whitelist monitoring and enforcement, with P2P owner domains."""

from .config import Config
from .mud import MudProfile, parse_mud, serialize_mud
from .net import Packet
from .pipeline import Pipeline

__all__ = ["Config", "MudProfile", "Packet", "Pipeline", "parse_mud", "serialize_mud"]
__version__ = "0.1.0"
