"""Encrypted inference for Bayesian neural networks.

Submodules: ``ring`` (negacyclic polynomial arithmetic), ``bfv`` (the encryption
scheme), ``encoding`` (fixed point and coefficient packing), ``bnn`` (variational
networks and training), ``protocol`` (client and server sessions) and ``net``
(TCP framing, server and bench).
"""

from .bfv import Ciphertext, Plaintext, PublicKey, SecretKey, decrypt, encrypt, keygen
from .encoding import FixedPointScale, LayerPlan, optimal_plan, plan_layer
from .protocol import ClientSession, ModelManifest, ProtocolError, ServerSession, build_manifest
from .ring import PRESETS, RingElement, RingParams, get_preset

__version__ = "0.1.0"
