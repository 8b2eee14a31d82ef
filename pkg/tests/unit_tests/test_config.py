import pytest

from moving_hw.config import SCENARIOS, load_config, parse_config
from moving_hw.errors import ParseError, ValidationError


def test_minimal_config_applies_defaults() -> None:
    config = parse_config("scenario = decompose\n")
    assert config.scenario == "decompose"
    assert config.resolution == 16
    assert config["galerkin.m"] == 16
    assert config.steps == 128
    assert config.period_T == 1.0
    assert config.dt == pytest.approx(1.0 / 128)
    assert config["geometry.kind"] == "annulus"


def test_comments_and_blank_lines_are_ignored() -> None:
    config = parse_config("# run\n\nscenario = verify-geometry  # trailing\nmesh.resolution = 8\n")
    assert config.resolution == 8
    assert config.explicit == frozenset({"scenario", "mesh.resolution"})


def test_negative_radius_names_the_key() -> None:
    with pytest.raises(ValidationError) as info:
        parse_config("scenario = decompose\ngeometry.R1 = -1.0\n")
    assert any(v.startswith("geometry.R1") for v in info.value.violations)


def test_unknown_scenario_lists_valid_ones() -> None:
    with pytest.raises(ValidationError) as info:
        parse_config("scenario = dance\n")
    message = str(info.value)
    for name in SCENARIOS:
        assert name in message


def test_all_violations_are_aggregated() -> None:
    text = "scenario = decompose\nmesh.resolution = 1\ngalerkin.m = 0\nnot.a.key = 3\n"
    with pytest.raises(ValidationError) as info:
        parse_config(text)
    keys = [v.split(" ", 1)[0] for v in info.value.violations]
    assert keys == ["mesh.resolution", "galerkin.m", "not.a.key"]


def test_malformed_lines_report_line_numbers() -> None:
    with pytest.raises(ParseError) as info:
        parse_config("scenario = decompose\njust words\nmesh.resolution =\n")
    assert info.value.lines == [2, 3]


def test_duplicate_key_is_a_parse_error() -> None:
    with pytest.raises(ParseError) as info:
        parse_config("scenario = decompose\nscenario = decompose\n")
    assert info.value.lines == [2]


def test_motion_period_must_divide_T() -> None:
    text = "scenario = solve-periodic\nmotion.name = dilation\nmotion.period = 1.0\ntime.T = 1.5\n"
    with pytest.raises(ValidationError, match="must divide"):
        parse_config(text)
    config = parse_config(text.replace("1.5", "2.0"))
    assert config.period_T == 2.0


def test_cross_checks() -> None:
    with pytest.raises(ValidationError, match="exceed"):
        parse_config("scenario = decompose\ngeometry.R0 = 1.0\ngeometry.R1 = 2.0\n")
    with pytest.raises(ValidationError, match="pulsating_annulus"):
        parse_config("scenario = decompose\ngeometry.kind = ball\nmotion.name = pulsating_annulus\n")
    with pytest.raises(ValidationError, match="inner boundary"):
        parse_config("scenario = solve-periodic\ngeometry.kind = ball\nbeta.kind = radial\n")


def test_motion_params_fall_back_to_geometry_radii() -> None:
    config = parse_config("scenario = decompose\ngeometry.R0 = 3.0\nmotion.name = pulsating_annulus\nmotion.R1 = 1.5\n")
    params = config.motion_params()
    assert params["R0"] == 3.0
    assert params["R1"] == 1.5


def test_anchor_list() -> None:
    config = parse_config("scenario = differentiate\ntime.anchors = 0.0, 0.25,0.5\n")
    assert config["time.anchors"] == (0.0, 0.25, 0.5)
    assert config.summary()["time.anchors"] == [0.0, 0.25, 0.5]


def test_load_config_with_overrides(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("scenario = decompose\nmesh.resolution = 8\n", encoding="utf-8")
    config = load_config(path, overrides={"mesh.resolution": "12", "output.dir": str(tmp_path / "out")})
    assert config.resolution == 12
    assert config.output_dir == tmp_path / "out"
