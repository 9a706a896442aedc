"""Fragmented quantum-safe session keys delivered over ephemeral onion circuits.

The package splits a key into positional fragments, encrypts each one to the
recipient, and ships them in bundles over fresh circuits of a simulated
onion network.  ``adversary`` estimates how often a guard-observing attacker
links every circuit of a session.
"""

from .errors import OnionKeyError
from .keycore import Fragment, FragmentSet, SessionKey, generate_key, reassemble, shuffle_fragments, split_key

__version__ = "0.1.0"

__all__ = [
    "Fragment",
    "FragmentSet",
    "OnionKeyError",
    "SessionKey",
    "generate_key",
    "reassemble",
    "shuffle_fragments",
    "split_key",
    "__version__",
]
