"""
offsetfed: a deterministic simulator for federated learning with per-client
input offsets and a double-input-channel model.
"""

import logging

__version__ = "0.1.0"

logger = logging.getLogger(__name__)
