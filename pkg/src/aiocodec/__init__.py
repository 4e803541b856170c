"""All-in-one learned image compression and restoration at desk scale."""

from .model import AIOCodec, compress, decompress
from .network import AttentionConfig, CodecArchitecture, get_profile

__all__ = ["AIOCodec", "compress", "decompress", "AttentionConfig", "CodecArchitecture", "get_profile"]
__version__ = "0.1.0"
