import dataclasses
import json

import numpy as np
import pytest

from wdmqkd.core import (
    SLOT_BASIS, SLOT_BIT, Basis, ConfigError, LinkConfig, NetworkConfig, Polarization, ProtocolConfig,
    binary_entropy, config_from_dict, config_to_dict, load_config, save_config, validate_config,
)


def test_binary_entropy_examples():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.011) == pytest.approx(0.0874, abs=1e-4)


@pytest.mark.parametrize("x", [-0.01, 1.01, float("nan")])
def test_binary_entropy_domain(x):
    with pytest.raises(ValueError):
        binary_entropy(x)


def test_binary_entropy_symmetric_and_concave():
    rng = np.random.default_rng(0)
    for x, y in rng.random((200, 2)):
        assert binary_entropy(x) == pytest.approx(binary_entropy(1 - x), abs=1e-12)
        assert binary_entropy((x + y) / 2) >= (binary_entropy(x) + binary_entropy(y)) / 2 - 1e-12


def test_polarization_basis_and_bit():
    assert [p.basis for p in Polarization] == [Basis.K, Basis.K, Basis.C, Basis.C]
    assert [p.bit for p in Polarization] == [0, 1, 0, 1]
    assert list(SLOT_BASIS) == [p.basis for p in Polarization]
    assert list(SLOT_BIT) == [p.bit for p in Polarization]


def _net(**kw):
    return NetworkConfig(links=(LinkConfig(wavelength_label="1550", **kw),))


def test_validate_accepts_default_intensities():
    cfg = validate_config(_net(mu=0.6, nu=0.17))
    assert cfg.links[0].mu == 0.6


def test_validate_rejects_swapped_intensities():
    with pytest.raises(ConfigError) as exc:
        validate_config(_net(mu=0.17, nu=0.6))
    assert any("mu" in d for d in exc.value.diagnostics)


def test_validate_rejects_probability_out_of_range():
    with pytest.raises(ConfigError) as exc:
        validate_config(_net(p_mu=1.3))
    assert any("p_mu" in d for d in exc.value.diagnostics)


def test_validate_reports_every_violation():
    with pytest.raises(ConfigError) as exc:
        validate_config(_net(p_mu=1.3, channel_loss_db=-1.0, pulse_rate=0.0, dead_time=-1.0))
    text = " ".join(exc.value.diagnostics)
    for name in ("p_mu", "channel_loss_db", "pulse_rate", "dead_time"):
        assert name in text


def test_validate_rejects_bad_protocol():
    cfg = NetworkConfig(links=(LinkConfig("1550"),), protocol=ProtocolConfig(block_size_sifted=0, eps_sec=1.5))
    with pytest.raises(ConfigError) as exc:
        validate_config(cfg)
    text = " ".join(exc.value.diagnostics)
    assert "block_size_sifted" in text and "eps_sec" in text


def test_validate_rejects_duplicate_labels_and_too_many_links():
    with pytest.raises(ConfigError):
        validate_config(NetworkConfig(links=(LinkConfig("a"), LinkConfig("a"))))
    with pytest.raises(ConfigError):
        validate_config(NetworkConfig(links=tuple(LinkConfig(str(i)) for i in range(9))))
    with pytest.raises(ConfigError):
        validate_config(NetworkConfig(links=()))


def test_validate_is_idempotent():
    cfg = _net(mu=0.6, nu=0.17, pulse_rate=50_000_000, seed=3)
    once = validate_config(cfg)
    twice = validate_config(once)
    assert once == twice
    assert config_to_dict(once) == config_to_dict(twice)


def test_validate_coerces_numeric_types():
    cfg = validate_config(_net(pulse_rate=50_000_000, channel_loss_db=14))
    assert isinstance(cfg.links[0].pulse_rate, float)
    assert isinstance(cfg.links[0].channel_loss_db, float)


def test_config_dict_round_trip(tmp_path):
    cfg = validate_config(NetworkConfig(links=(LinkConfig("1550", seed=1), LinkConfig("1310", seed=2))))
    path = tmp_path / "net.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_unknown_keys_are_errors():
    data = config_to_dict(validate_config(_net()))
    data["links"]["1550"]["colour"] = "red"
    data["protocol"]["bogus"] = 1
    data["extra"] = {}
    with pytest.raises(ConfigError) as exc:
        config_from_dict(data)
    text = " ".join(exc.value.diagnostics)
    assert "colour" in text and "bogus" in text and "extra" in text


def test_link_label_must_match_key():
    data = config_to_dict(validate_config(_net()))
    data["links"]["1550"]["wavelength_label"] = "1310"
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_default_config_loads(tmp_path):
    cfg = load_config("configs/default_network.json")
    assert cfg.labels == ("1310", "1549", "1550")
    assert [cfg.link(l).channel_loss_db for l in ("1550", "1549", "1310")] == [14.0, 12.0, 11.0]
    json.dumps(config_to_dict(cfg))


def test_configs_are_frozen():
    lk = LinkConfig("1550")
    with pytest.raises(dataclasses.FrozenInstanceError):
        lk.mu = 0.5
