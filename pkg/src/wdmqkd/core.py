"""Shared vocabulary, configuration schema and elementary math.

Every other module imports its types from here. Configurations are frozen
dataclasses; :func:`validate_config` either returns a normalized copy or
raises :class:`ConfigError` carrying the full list of violations.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised when a configuration violates one or more invariants."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class Basis(enum.IntEnum):
    K = 0  # circular, key basis
    C = 1  # diagonal, check basis


class Polarization(enum.IntEnum):
    """Polarization outcomes, numbered in receiver time-slot order."""

    L = 0
    R = 1
    D = 2
    A = 3

    @property
    def basis(self) -> Basis:
        return Basis.K if self.value < 2 else Basis.C

    @property
    def bit(self) -> int:
        return self.value & 1


class Intensity(enum.IntEnum):
    SIGNAL = 0  # mu
    DECOY = 1   # nu


# slot index -> (basis, bit); L->(K,0), R->(K,1), D->(C,0), A->(C,1)
SLOT_BASIS = (Basis.K, Basis.K, Basis.C, Basis.C)
SLOT_BIT = (0, 1, 0, 1)


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy in bits, with h(0) = h(1) = 0."""
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValueError(f"binary_entropy domain is [0, 1], got {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def db_to_transmittance(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class LinkConfig:
    """Physical and protocol parameters of one transmitter-to-relay link.

    Angles are in radians, times in seconds, rates in Hz. ``basis_offset_k``
    and ``basis_offset_c`` add a static per-basis misalignment on top of
    ``residual_misalignment``; they reproduce links whose key- and
    check-basis QBERs differ.
    """

    wavelength_label: str
    pulse_rate: float = 50e6
    mu: float = 0.6
    nu: float = 0.17
    p_mu: float = 0.5
    p_key_tx: float = 0.9
    p_key_rx: float = 0.9
    channel_loss_db: float = 14.0
    dwdm_loss_db: float = 1.0
    receiver_loss_db: float = 4.0
    detector_efficiency: float = 0.15
    dark_rate: float = 100.0
    dead_time: float = 80e-6
    drift_sigma: float = 0.0
    residual_misalignment: float = 0.0
    basis_offset_k: float = 0.0
    basis_offset_c: float = 0.0
    alignment_sigma: float = 0.0
    active_control: bool = False
    qber_threshold: float = 0.02
    jitter_sigma: float = 150e-12
    window_halfwidth: float = 1e-9
    clock_skew_ppm: float = 0.0
    clock_offset: float = 0.0
    seed: int = 0

    @property
    def period(self) -> float:
        return 1.0 / self.pulse_rate

    @property
    def slot_width(self) -> float:
        return self.period / 4.0

    @property
    def p_nu(self) -> float:
        return 1.0 - self.p_mu

    @property
    def total_transmittance(self) -> float:
        """Channel, dWDM and receiver-optics transmittance (no detector)."""
        return db_to_transmittance(
            self.channel_loss_db + self.dwdm_loss_db + self.receiver_loss_db
        )


@dataclass(frozen=True)
class ProtocolConfig:
    block_size_sifted: int = 5_000_000
    eps_sec: float = 1e-10
    eps_cor: float = 2.0**-64
    cascade_alpha: float = 1.6
    cascade_passes: int = 4
    qber_sample_fraction: float = 0.01
    sync_prefix_rounds: int = 2_000_000
    auth_tag_bits: int = 64
    auth_refill_bits: int = 256
    preshared_auth_bits: int = 1024

    @property
    def confirm_tag_bits(self) -> int:
        return math.ceil(math.log2(1.0 / self.eps_cor) - 1e-12)


@dataclass(frozen=True)
class NetworkConfig:
    links: tuple[LinkConfig, ...]
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    alignment_time: float = 30.0
    chunk_time: float = 60.0
    mu_nu_ratio_bounds: tuple[float, float] = (3.0, 4.0)

    def link(self, label: str) -> LinkConfig:
        for lk in self.links:
            if lk.wavelength_label == label:
                return lk
        raise KeyError(label)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(lk.wavelength_label for lk in self.links)


_PROBABILITY_FIELDS = ("p_mu", "p_key_tx", "p_key_rx", "detector_efficiency", "qber_threshold")
_NONNEGATIVE_FIELDS = (
    "channel_loss_db", "dwdm_loss_db", "receiver_loss_db", "dark_rate", "dead_time",
    "drift_sigma", "alignment_sigma", "jitter_sigma",
)


def link_diagnostics(lk: LinkConfig, ratio_bounds=(3.0, 4.0), path: str = "") -> list[str]:
    out = []
    p = path or f"links.{lk.wavelength_label}"
    for name in _PROBABILITY_FIELDS:
        v = getattr(lk, name)
        if not 0.0 <= v <= 1.0:
            out.append(f"{p}.{name}: probability {v} outside [0, 1]")
    for name in _NONNEGATIVE_FIELDS:
        v = getattr(lk, name)
        if not v >= 0.0:
            out.append(f"{p}.{name}: must be >= 0, got {v}")
    if not lk.pulse_rate > 0:
        out.append(f"{p}.pulse_rate: must be > 0, got {lk.pulse_rate}")
    if not lk.nu > 0:
        out.append(f"{p}.nu: must be > 0, got {lk.nu}")
    if not lk.mu > lk.nu:
        out.append(f"{p}.mu: must exceed nu (mu={lk.mu}, nu={lk.nu})")
    elif lk.nu > 0:
        lo, hi = ratio_bounds
        r = lk.mu / lk.nu
        if not lo <= r <= hi:
            out.append(f"{p}.mu: mu/nu ratio {r:.3f} outside [{lo}, {hi}]")
    if lk.pulse_rate > 0 and not 0 < lk.window_halfwidth <= lk.slot_width / 2:
        out.append(f"{p}.window_halfwidth: must lie in (0, slot_width/2]")
    if not lk.wavelength_label:
        out.append(f"{p}.wavelength_label: empty label")
    return out


def protocol_diagnostics(pc: ProtocolConfig) -> list[str]:
    out = []
    if not pc.block_size_sifted > 0:
        out.append(f"protocol.block_size_sifted: must be > 0, got {pc.block_size_sifted}")
    for name in ("eps_sec", "eps_cor"):
        v = getattr(pc, name)
        if not 0.0 < v < 1.0:
            out.append(f"protocol.{name}: must lie in (0, 1), got {v}")
    if not pc.cascade_passes >= 1:
        out.append("protocol.cascade_passes: must be >= 1")
    if not pc.cascade_alpha > 0:
        out.append("protocol.cascade_alpha: must be > 0")
    if not 0.0 <= pc.qber_sample_fraction < 1.0:
        out.append("protocol.qber_sample_fraction: must lie in [0, 1)")
    if pc.sync_prefix_rounds < 0:
        out.append("protocol.sync_prefix_rounds: must be >= 0")
    if pc.auth_tag_bits not in (16, 32, 64):
        out.append(f"protocol.auth_tag_bits: unsupported tag length {pc.auth_tag_bits}")
    if pc.auth_refill_bits < 2 * 2 * pc.auth_tag_bits:
        out.append("protocol.auth_refill_bits: too small for two messages per epoch")
    if pc.preshared_auth_bits < 0:
        out.append("protocol.preshared_auth_bits: must be >= 0")
    return out


def config_diagnostics(cfg: NetworkConfig) -> list[str]:
    out = []
    if not 1 <= len(cfg.links) <= 8:
        out.append(f"links: need 1 to 8 links, got {len(cfg.links)}")
    labels = [lk.wavelength_label for lk in cfg.links]
    if len(set(labels)) != len(labels):
        out.append("links: duplicate wavelength labels")
    for lk in cfg.links:
        out.extend(link_diagnostics(lk, cfg.mu_nu_ratio_bounds))
    out.extend(protocol_diagnostics(cfg.protocol))
    if cfg.alignment_time < 0:
        out.append("alignment_time: must be >= 0")
    if not cfg.chunk_time > 0:
        out.append("chunk_time: must be > 0")
    return out


def validate_config(cfg: NetworkConfig) -> NetworkConfig:
    """Return a normalized copy of ``cfg`` or raise :class:`ConfigError`.

    Normalization coerces numeric fields to their declared types and orders
    links by label, so validating an already validated configuration is the
    identity.
    """
    diags = config_diagnostics(cfg)
    if diags:
        raise ConfigError(diags)
    # canonical order: by label, matching the sorted keys of saved files
    links = tuple(sorted((_coerce(lk) for lk in cfg.links), key=lambda lk: lk.wavelength_label))
    return dataclasses.replace(
        cfg,
        links=links,
        protocol=_coerce(cfg.protocol),
        alignment_time=float(cfg.alignment_time),
        chunk_time=float(cfg.chunk_time),
        mu_nu_ratio_bounds=tuple(float(x) for x in cfg.mu_nu_ratio_bounds),
    )


def _coerce(obj):
    kwargs = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        t = f.type
        if t == "float":
            v = float(v)
        elif t == "int":
            v = int(v)
        elif t == "bool":
            v = bool(v)
        elif t == "str":
            v = str(v)
        kwargs[f.name] = v
    return type(obj)(**kwargs)


# -- configuration files ----------------------------------------------------

_NETWORK_KEYS = {"alignment_time", "chunk_time", "mu_nu_ratio_bounds"}


def _build(cls, data: Mapping[str, Any], path: str, errors: list[str], **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    for key in unknown:
        errors.append(f"{path}.{key}: unknown key")
    kwargs = {k: v for k, v in data.items() if k in names}
    kwargs.update(extra)
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> NetworkConfig:
    """Build and validate a :class:`NetworkConfig` from parsed JSON.

    Layout::

        {"network": {...}, "protocol": {...},
         "links": {"1550": {...}, "1549": {...}}}

    Unknown keys at any level are errors.
    """
    errors: list[str] = []
    for key in sorted(set(data) - {"network", "protocol", "links"}):
        errors.append(f"{key}: unknown key")
    net = dict(data.get("network", {}))
    for key in sorted(set(net) - _NETWORK_KEYS):
        errors.append(f"network.{key}: unknown key")
    net = {k: v for k, v in net.items() if k in _NETWORK_KEYS}
    if "mu_nu_ratio_bounds" in net:
        net["mu_nu_ratio_bounds"] = tuple(net["mu_nu_ratio_bounds"])
    protocol = _build(ProtocolConfig, data.get("protocol", {}), "protocol", errors)
    links_raw = data.get("links", {})
    if not isinstance(links_raw, Mapping):
        errors.append("links: must be an object keyed by wavelength label")
        links_raw = {}
    links = []
    for label, body in links_raw.items():
        if "wavelength_label" in body and body["wavelength_label"] != label:
            errors.append(f"links.{label}.wavelength_label: disagrees with its key")
        body = {k: v for k, v in body.items() if k != "wavelength_label"}
        links.append(_build(LinkConfig, body, f"links.{label}", errors, wavelength_label=str(label)))
    if errors:
        raise ConfigError(errors)
    return validate_config(NetworkConfig(links=tuple(links), protocol=protocol, **net))


def config_to_dict(cfg: NetworkConfig) -> dict[str, Any]:
    links = {}
    for lk in cfg.links:
        body = dataclasses.asdict(lk)
        del body["wavelength_label"]
        links[lk.wavelength_label] = body
    return {
        "network": {
            "alignment_time": cfg.alignment_time,
            "chunk_time": cfg.chunk_time,
            "mu_nu_ratio_bounds": list(cfg.mu_nu_ratio_bounds),
        },
        "protocol": dataclasses.asdict(cfg.protocol),
        "links": links,
    }


def load_config(path: str | Path) -> NetworkConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: NetworkConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
