"""
modroute: brain-signal captioning with modality-specific projectors and a
learned router, trained end to end on a planted synthetic corpus.
"""

from .config import Config, load_config
from .exceptions import ModrouteError
from .framework import BrainDecoder
from .synthdata import CorpusSpec, generate

__version__ = "0.1.0"

__all__ = ["BrainDecoder", "Config", "CorpusSpec", "ModrouteError", "generate", "load_config"]
