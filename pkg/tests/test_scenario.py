import pytest

from fedimpress.errors import ConfigurationError, ParseError
from fedimpress.scenario import (
    Architecture,
    bundled_scenario_path,
    bundled_scenarios,
    load_bundled,
    load_scenario,
    parse_scenario,
    validate_scenario,
)


@pytest.mark.parametrize("name", ["gkws_homogeneous", "gkws_hetero", "us8k_homogeneous"])
def test_bundled_scenarios_validate_clean(name):
    path = bundled_scenario_path(name)
    assert validate_scenario(path.read_text(), str(path)) == []
    assert load_bundled(name).name


def test_bundled_listing():
    assert {"gkws_homogeneous", "gkws_hetero", "us8k_homogeneous"} <= set(bundled_scenarios())
    with pytest.raises(ConfigurationError, match="available"):
        bundled_scenario_path("nope")


def test_tiny_parses(tiny_scenario):
    sc = tiny_scenario
    assert sc.num_users == 2 and sc.num_iterations == 3
    assert sc.label_names == ("A", "B", "C", "D", "E")
    assert sc.user_labels == ((0, 1, 2), (1, 2, 3))
    assert sc.user_architectures[0] == Architecture((8,), "relu")
    assert sc.new_labels() == [4]
    assert len(sc.injections_at(2)) == 2 and sc.injections_at(1) == []


def test_gkws_homogeneous_shape():
    sc = load_bundled("gkws_homogeneous")
    assert sc.num_users == 3 and sc.num_iterations == 10
    assert sc.master_seed == 2021


def test_latest_architecture_change_wins():
    sc = load_bundled("gkws_hetero")
    assert sc.architecture(1, 1) == sc.user_architectures[0]
    assert sc.architecture(1, 6) == Architecture((16, 16, 32), "relu")
    assert sc.architecture(1, 8) == Architecture((16,), "softmax")
    assert sc.architecture(1, 30) == Architecture((16,), "softmax")


def _findings(tiny_text, old, new):
    assert old in tiny_text
    return validate_scenario(tiny_text.replace(old, new), "t.yaml")


def test_unknown_user_finding(tiny_text):
    f = _findings(tiny_text, "{user: 1, iteration: 2", "{user: 7, iteration: 2")
    assert len(f) == 1
    assert "unknown user 7" in f[0].message
    assert f[0].line == tiny_text.splitlines().index(
        next(l for l in tiny_text.splitlines() if "user: 1, iteration: 2" in l)) + 1


def test_label_collision_finding(tiny_text):
    f = _findings(tiny_text, 'iteration: 2, label: "E", count: 60}\n  - {user: 2',
                  'iteration: 2, label: "A", count: 60}\n  - {user: 2')
    assert any("label collision" in x.message and "'A'" in x.message for x in f)


def test_unreachable_injection_finding(tiny_text):
    f = _findings(tiny_text, "{user: 2, iteration: 2", "{user: 2, iteration: 9")
    assert [x.field for x in f] == ["injections[1].iteration"]
    assert "unreachable" in f[0].message


def test_small_pool_finding(tiny_text):
    f = _findings(tiny_text, "pool_frames_per_label: 200", "pool_frames_per_label: 50")
    assert any("insufficient" in x.message for x in f)


def test_feature_dim_finding(tiny_text):
    f = _findings(tiny_text, "feature_dim: 12", "feature_dim: 3")
    assert any("feature_dim" in x.message for x in f)


def test_min_separation_finding(tiny_text):
    f = _findings(tiny_text, "min_separation: 1.1", "min_separation: 0.0")
    assert [x.field for x in f] == ["clustering.min_separation"]


def test_unknown_label_reports_line(tiny_text):
    text = tiny_text.replace('labels: ["B", "C", "D"]', 'labels: ["B", "C", "Q"]')
    with pytest.raises(ConfigurationError) as err:
        parse_scenario(text, "t.yaml")
    line = next(i for i, l in enumerate(text.splitlines(), 1) if '"Q"' in l)
    assert str(err.value).startswith(f"t.yaml:{line}:")
    assert "'Q'" in str(err.value)


def test_unquoted_yaml_boolean_gets_a_hint(tiny_text):
    text = tiny_text.replace('"E"]', 'Yes]').replace('label: "E"', "label: Yes")
    f = validate_scenario(text, "t.yaml")
    assert len(f) == 1
    assert "quote" in f[0].message


def test_wrong_type_is_reported(tiny_text):
    f = validate_scenario(tiny_text.replace("num_iterations: 3", "num_iterations: three"))
    assert len(f) == 1 and "must be int" in f[0].message


def test_missing_field(tiny_text):
    f = validate_scenario(tiny_text.replace("num_iterations: 3\n", ""))
    assert "missing field 'num_iterations'" in f[0].message


def test_malformed_yaml(tiny_text):
    with pytest.raises(ParseError):
        parse_scenario(tiny_text + "\n  : : [\n")


def test_load_scenario_raises_on_findings(tmp_path, tiny_text):
    p = tmp_path / "bad.yaml"
    p.write_text(tiny_text.replace("{user: 2, iteration: 2", "{user: 2, iteration: 9"))
    with pytest.raises(ConfigurationError, match="unreachable"):
        load_scenario(p)
    with pytest.raises(ConfigurationError):
        load_scenario(tmp_path / "missing.yaml")


def test_load_scenario_ok(tiny_path):
    assert load_scenario(tiny_path).name == "tiny"
