import numpy as np
import pytest
from pydantic import ValidationError

from errors import DomainError
from space_generators import CHART_REGISTRY, GENERATORS, GeneratorSpec, generate, load_space, remove_mass


def test_segment_weights(segment):
    assert segment.n_points == 1024
    np.testing.assert_allclose(segment.weights, 1 / 1024)
    assert segment.total_mass == pytest.approx(1.0)
    assert segment.chart.name == "identity"


def test_generation_is_deterministic():
    spec = GeneratorSpec(kind="cloud", n=2, count=200, seed=3)
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.weights, b.weights)
    c = generate(spec.model_copy(update={"seed": 4}))
    assert not np.array_equal(a.coords, c.coords)


def test_generate_accepts_dict():
    space = generate({"kind": "segment", "spacing": 0.25})
    assert space.n_points == 4


def test_four_corner_cantor():
    space = generate(GeneratorSpec(kind="four_corner_cantor", depth=5))
    assert space.n_points == 4 ** 5
    np.testing.assert_allclose(space.weights, 4.0 ** -5)
    assert space.dim_n == 1
    assert space.chart is None


def test_grid():
    space = generate(GeneratorSpec(kind="grid", n=2, spacing=1 / 16))
    assert space.n_points == 256
    assert space.dim_n == 2
    np.testing.assert_allclose(space.weights, 1 / 256)
    assert space.chart.params.shape == (256, 2)


@pytest.mark.parametrize("kind, chart", [("lipschitz_graph", "sine_graph"), ("bilip_curve", "bilip_wave")])
def test_graph_charts_are_bilipschitz(kind, chart):
    space = generate(GeneratorSpec(kind=kind))
    assert space.chart.name == chart
    lo, hi = space.chart.verify_bilipschitz()
    L = space.chart.L
    assert lo >= 1 / L - 1e-9
    assert hi <= L + 1e-9


def test_lipschitz_constant_of_sine_graph():
    space = generate(GeneratorSpec(kind="lipschitz_graph"))
    assert space.chart.L == pytest.approx(np.sqrt(1 + (0.6 * np.pi) ** 2))


def test_graph_weights_measure_arc_length():
    space = generate(GeneratorSpec(kind="lipschitz_graph"))
    u = (np.arange(200_000) + 0.5) / 200_000
    length = np.mean(np.sqrt(1 + (0.6 * np.pi * np.cos(2 * np.pi * u)) ** 2))
    assert space.total_mass == pytest.approx(length, rel=1e-4)


def test_circle():
    space = generate(GeneratorSpec(kind="circle", radius=2.0))
    assert space.total_mass == pytest.approx(4 * np.pi)
    np.testing.assert_allclose(np.linalg.norm(space.coords, axis=1), 2.0)
    assert space.chart.name == "circle_arc"


def test_snowflake_kind():
    space = generate(GeneratorSpec(kind="snowflake", spacing=1e-3, s=0.5))
    assert space.metric_tag == "snowflake(0.5)"
    assert not space.has_coords
    assert space.min_spacing() == pytest.approx(np.sqrt(1e-3))
    assert space.chart.name == "snowflake_line"


def test_circle_union_pieces():
    space = generate(GeneratorSpec(kind="circle_union", depth=3))
    expected = sum(2 * np.pi * 2.0 ** -j for j in range(3))
    assert space.total_mass == pytest.approx(expected)


def test_unknown_kind_and_chart():
    with pytest.raises(ValidationError):
        GeneratorSpec(kind="nope")
    with pytest.raises(ValidationError):
        GeneratorSpec(kind="lipschitz_graph", chart="nope")
    with pytest.raises(DomainError):
        generate(GeneratorSpec(kind="segment", chart="sine_graph"))


@pytest.mark.parametrize("field, value", [("spacing", 0.0), ("s", 1.5), ("depth", -1)])
def test_invalid_parameters(field, value):
    with pytest.raises(ValidationError):
        GeneratorSpec(kind="segment", **{field: value})


def test_registries_are_consistent():
    assert {"segment", "snowflake", "four_corner_cantor", "lipschitz_graph", "bilip_curve"} <= set(GENERATORS)
    for entry in CHART_REGISTRY.values():
        assert {"formula", "L", "exponent"} <= set(entry)


def test_load_space_reattaches_chart(tmp_path):
    space = generate(GeneratorSpec(kind="bilip_curve", spacing=1 / 256))
    space.to_json(tmp_path / "space.json")
    back = load_space(tmp_path / "space.json")
    assert back.chart is not None
    assert back.chart.name == "bilip_wave"
    np.testing.assert_allclose(back.chart.params, space.chart.params)


@pytest.mark.parametrize("fraction", [0.05, 0.1, 0.2])
def test_remove_mass(segment, fraction):
    keep = remove_mass(segment, fraction, seed=1)
    removed = segment.weights[~keep].sum()
    assert removed <= fraction * segment.total_mass + 1e-12
    assert removed >= fraction * segment.total_mass - segment.weights.max() - 1e-12


def test_remove_mass_bounds(segment):
    assert remove_mass(segment, 0.0).all()
    with pytest.raises(DomainError):
        remove_mass(segment, 1.0)
