import json

import pytest

from amcr.config import KNOBS, env_name, load_config, parse_pi, parse_steps
from amcr.errors import ValidationError


def test_defaults():
    cfg = load_config(environ={})
    assert cfg == {k: knob.default for k, knob in KNOBS.items()}


def test_precedence_flag_env_file_default(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"budget": 7, "lam": 0.3, "gamma": 0.1}))
    env = {"AMCR_BUDGET": "8", "AMCR_LAM": "0.4"}
    cfg = load_config({"budget": 9, "lam": None}, path, env)
    assert cfg["budget"] == 9  # flag
    assert cfg["lam"] == 0.4  # env beats file; None flag is unset
    assert cfg["gamma"] == 0.1  # file
    assert cfg["window_m"] == KNOBS["window_m"].default


def test_env_names_and_coercion():
    assert env_name("risk_quantile") == "AMCR_RISK_QUANTILE"
    cfg = load_config(environ={"AMCR_TAU": "0.75", "AMCR_ITERS": "12", "AMCR_RULE": "MaxOverSteps"})
    assert cfg["tau"] == 0.75 and cfg["iters"] == 12 and cfg["rule"] == "MaxOverSteps"


@pytest.mark.parametrize(
    "content, match",
    [('{"nope": 1}', "unknown"), ("[1]", "object"), ("{bad", "c.json"), ('{"budget": 2.5}', "budget")],
)
def test_bad_files(tmp_path, content, match):
    path = tmp_path / "c.json"
    path.write_text(content)
    with pytest.raises(ValidationError, match=match):
        load_config(path=path, environ={})


def test_bad_env_value():
    with pytest.raises(ValidationError, match="budget"):
        load_config(environ={"AMCR_BUDGET": "lots"})


def test_list_parsers():
    assert parse_steps("3, 5,8") == [3, 5, 8]
    assert parse_pi("3:0.25,5:0.75") == {3: 0.25, 5: 0.75}
    assert parse_pi("") is None
    for bad in ("", "a,b"):
        with pytest.raises(ValidationError):
            parse_steps(bad)
    with pytest.raises(ValidationError):
        parse_pi("3=0.5")
