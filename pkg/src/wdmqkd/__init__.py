"""Wavelength-multiplexed decoy-state QKD: link simulation and key processing.

The package covers the whole chain from pulse generation to a composed
end-to-end key:

    transmitter -> channel -> receiver -> sync -> sifting
        -> reconciliation -> finite_key -> network (key store, relay)

``wdmqkd.cli`` exposes ``run`` and ``calibrate`` on the command line.
"""
from .core import (
    Basis, ConfigError, Intensity, LinkConfig, NetworkConfig, Polarization, ProtocolConfig,
    binary_entropy, load_config, save_config, validate_config,
)
from .finite_key import FiniteKeyEstimate, estimate, privacy_amplify, secret_key_length
from .network import KeyStore, relay_end_to_end_key, run_network_session
from .reconciliation import cascade_reconcile, confirm_correctness

__all__ = [
    "Basis", "ConfigError", "Intensity", "LinkConfig", "NetworkConfig", "Polarization", "ProtocolConfig",
    "binary_entropy", "load_config", "save_config", "validate_config",
    "FiniteKeyEstimate", "estimate", "privacy_amplify", "secret_key_length",
    "KeyStore", "relay_end_to_end_key", "run_network_session",
    "cascade_reconcile", "confirm_correctness",
]

__version__ = "0.1.0"
