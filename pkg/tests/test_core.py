import json

import pytest

from dpswitch.core import (ALLOWED_TRANSITIONS, DP, LLAMA_70B, ConfigError, DeploymentConfig,
                           EngineState, IllegalTransition, Mode, ModelSpec, Priority, Request,
                           RequestState, config_from_dict, dump_config, get_preset,
                           kv_bytes_per_token, load_config, ms_to_us, us_to_ms,
                           validate_deployment)


def spec_with(layers=80, heads=8, head_dim=128, elem=2, weights=1):
    return ModelSpec("t", layers, heads * head_dim, heads, head_dim, elem, weights, 1024)


@pytest.mark.parametrize("layers,heads,hd,elem,expect", [
    (80, 8, 128, 2, 327_680),
    (1, 1, 1, 1, 2),
    (32, 8, 128, 2, 131_072),
])
def test_kv_bytes_per_token(layers, heads, hd, elem, expect):
    assert kv_bytes_per_token(spec_with(layers, heads, hd, elem)) == expect


def test_llama_preset_kv():
    assert kv_bytes_per_token(LLAMA_70B) == 327_680
    assert get_preset("llama-70b") is LLAMA_70B
    with pytest.raises(KeyError):
        get_preset("gpt-9")


def test_time_roundtrip():
    assert ms_to_us(1.5) == 1500
    assert us_to_ms(ms_to_us(146_540.0)) == 146_540.0


def test_valid_deployments():
    s = spec_with()
    validate_deployment(s, DeploymentConfig(num_engines=4, supported_tp_degrees=(2, 4)))
    validate_deployment(s, DeploymentConfig(num_engines=8, supported_tp_degrees=(2, 4, 8)))


def test_indivisible_degree():
    with pytest.raises(ConfigError) as ei:
        validate_deployment(spec_with(), DeploymentConfig(num_engines=4, supported_tp_degrees=(3,)))
    assert ei.value.violations == ["IndivisibleTPDegree"]


def test_all_violations_reported():
    cfg = DeploymentConfig(num_engines=4, supported_tp_degrees=(3,), gpu_mem_bytes=0,
                           mem_utilization=1.5)
    with pytest.raises(ConfigError) as ei:
        validate_deployment(spec_with(), cfg)
    assert set(ei.value.violations) == {"IndivisibleTPDegree", "ZeroMemory", "BadMemUtilization"}


def test_degree_must_divide_kv_heads():
    with pytest.raises(ConfigError):
        validate_deployment(spec_with(heads=2, head_dim=64),
                            DeploymentConfig(num_engines=8, supported_tp_degrees=(4,)))


def test_transition_table_exhaustive():
    states = list(RequestState)
    for a in states:
        for b in states:
            r = Request(0, 0, 1, 1)
            r.state = a
            if (a, b) in ALLOWED_TRANSITIONS:
                r.transition(b)
                assert r.state is b
            else:
                with pytest.raises(IllegalTransition):
                    r.transition(b)


def test_mode_parse():
    assert Mode.parse("dp") == DP
    assert Mode.parse("TP4") == Mode(4)
    assert Mode.parse("auto") is None
    assert str(Mode(8)) == "tp8"
    with pytest.raises(ValueError):
        Mode.parse("pp2")


def test_request_validation():
    with pytest.raises(ValueError):
        Request(0, 0, 0, 5)
    assert Request(1, 0, 3, 4, Priority.HIGH).total_tokens == 7


def test_config_roundtrip(tmp_path):
    cfg = DeploymentConfig(num_engines=4, supported_tp_degrees=(4, 2), B_base=4)
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg
    assert back.supported_tp_degrees == (2, 4)


def test_config_unknown_key():
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"num_engines": 4, "bogus": 1})
    assert ei.value.violations == ["UnknownConfigKey"]
    with pytest.raises(ConfigError):
        config_from_dict(json.loads("[1, 2]"))


def test_engine_state():
    e = EngineState(2)
    e.set_tp((2, 3))
    assert e.is_tp and e.rank_in_group == 0
    e.reset()
    assert not e.is_tp
    with pytest.raises(ValueError):
        e.set_tp((0, 1))
