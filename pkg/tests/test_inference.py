"""Tests for predictive sampling and metrics."""

import csv

import numpy as np
import pytest

from vgnn.errors import ShapeError
from vgnn.graph import Simulation, assemble_features, build_graph, structured_quad_mesh
from vgnn.inference import (
    LoadLocalization,
    MetricReport,
    PredictiveField,
    coverage,
    load_localization,
    predict,
    rrmse,
    write_prediction_csv,
)
from vgnn.model import ModelConfig, init_model


def _graph(seed=0):
    mesh = structured_quad_mesh(4, 3)
    rng = np.random.default_rng(seed)
    sim = Simulation(u=rng.standard_normal((mesh.n_nodes, 2)), y=np.ones((mesh.n_nodes, 1)))
    return mesh, assemble_features(mesh, sim)


def _model(**overrides):
    overrides.setdefault("rho_init", -2.0)
    config = ModelConfig(latent_dim=6, message_passes=2, decoder_width=8, **overrides)
    return init_model(config, np.random.default_rng(0))


def _field(mean, total, z=2.0):
    mean = np.asarray(mean, dtype=float)
    total = np.asarray(total, dtype=float)
    return PredictiveField(mean=mean, aleatoric=total, epistemic=np.zeros_like(total),
                           total=total, z=z)


def test_total_variance_is_sum_of_parts():
    """Test s_t^2 = s_a^2 + s_e^2 node by node."""
    _, graph = _graph()
    pf = predict(graph, _model(), n_samples=20, rng=np.random.default_rng(1))
    assert pf.mean.shape == (12, 1)
    assert np.allclose(pf.total ** 2, pf.aleatoric ** 2 + pf.epistemic ** 2, rtol=1e-12)
    assert np.all(pf.epistemic > 0)


def test_predict_needs_two_samples():
    """Test that a single sample cannot estimate the epistemic spread."""
    _, graph = _graph()
    with pytest.raises(ValueError):
        predict(graph, _model(), n_samples=1)


def test_predict_is_reproducible():
    """Test that a seeded stream gives identical predictions."""
    _, graph = _graph()
    state = _model()
    first = predict(graph, state, n_samples=5, rng=np.random.default_rng(9))
    second = predict(graph, state, n_samples=5, rng=np.random.default_rng(9))
    assert np.array_equal(first.mean, second.mean)
    assert np.array_equal(first.total, second.total)


def test_near_deterministic_posterior_has_no_epistemic_spread():
    """Test rho = -40 gives s_e <= 1e-6."""
    _, graph = _graph()
    pf = predict(graph, _model(rho_init=-40.0), n_samples=10, rng=np.random.default_rng(0))
    assert np.all(pf.epistemic <= 1e-6)


def test_global_noise_model_aleatoric():
    """Test that the global model reports sigma_noise everywhere."""
    _, graph = _graph()
    state = _model(noise_model="global", noise_init=0.25)
    pf = predict(graph, state, n_samples=4, rng=np.random.default_rng(0))
    assert np.allclose(pf.aleatoric, 0.25)


def test_combined_noise_exceeds_heteroscedastic():
    """Test that adding the global noise raises the aleatoric estimate."""
    _, graph = _graph()
    hetero = predict(graph, _model(noise_model="heteroscedastic"), 4, np.random.default_rng(0))
    combined = predict(graph, _model(noise_model="combined"), 4, np.random.default_rng(0))
    assert np.allclose(combined.aleatoric ** 2, hetero.aleatoric ** 2 + 0.01)


def test_predict_mean_converges_with_samples():
    """Test that the sampled mean approaches a long-run reference as S grows."""
    _, graph = _graph()
    state = _model()
    reference = predict(graph, state, n_samples=4000, rng=np.random.default_rng(0)).mean
    few = predict(graph, state, n_samples=20, rng=np.random.default_rng(1)).mean
    many = predict(graph, state, n_samples=2000, rng=np.random.default_rng(2)).mean
    assert np.max(np.abs(many - reference)) < 0.5 * np.max(np.abs(few - reference))


def test_bounds_widen_with_z():
    """Test that the interval grows monotonically with z."""
    pf = _field([[1.0], [2.0]], [[0.5], [0.1]])
    previous = None
    for z in (0.5, 1.0, 2.0, 3.0):
        width = pf.with_z(z).upper - pf.with_z(z).lower
        if previous is not None:
            assert np.all(width > previous)
        previous = width
    assert pf.lower.ravel() == pytest.approx([0.0, 1.8])
    assert pf.upper.ravel() == pytest.approx([2.0, 2.2])


def test_rrmse_values():
    """Test rrmse on exact, zero and scaled predictions."""
    truth = np.array([[3.0], [4.0]])
    assert rrmse(truth, truth) == 0.0
    assert rrmse(np.zeros((2, 1)), truth) == pytest.approx(1.0)
    assert rrmse(1.1 * truth, truth) == pytest.approx(0.1)


def test_rrmse_rejects_bad_input():
    """Test shape mismatch and all-zero truth."""
    with pytest.raises(ShapeError):
        rrmse(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        rrmse(np.zeros((2, 1)), np.zeros((2, 1)))


def test_coverage_counts_values_inside_bounds():
    """Test the fraction of truths inside the band."""
    pf = _field([[0.0], [0.0], [0.0], [0.0]], [[1.0], [1.0], [1.0], [1.0]])
    truth = np.array([[0.5], [1.9], [2.0], [-2.5]])
    assert coverage([pf], [truth]) == pytest.approx(0.75)
    assert coverage([pf], [truth], z=1.0) == pytest.approx(0.25)
    assert coverage([pf, pf], [truth, np.zeros((4, 1))]) == pytest.approx(7 / 8)


def test_coverage_length_mismatch():
    """Test that fields and truths must pair up."""
    pf = _field([[0.0]], [[1.0]])
    with pytest.raises(ShapeError):
        coverage([pf], [])


def test_coverage_of_gaussian_truths_at_two_sigma():
    """Test that N(mean, total^2) truths fall inside the z = 2 band 95.44% of the time."""
    rng = np.random.default_rng(4)
    mean = rng.uniform(-3.0, 3.0, size=(20000, 1))
    total = rng.uniform(0.1, 2.0, size=(20000, 1))
    fields, truths = [], []
    for block in range(5):
        rows = slice(4000 * block, 4000 * (block + 1))
        fields.append(_field(mean[rows], total[rows]))
        truths.append(mean[rows] + total[rows] * rng.standard_normal((4000, 1)))
    assert coverage(fields, truths) == pytest.approx(0.9545, abs=0.006)


def test_load_localization_hit_and_miss():
    """Test graph-distance-one hits and magnitude ratios."""
    graph = build_graph(structured_quad_mesh(3, 3))
    truth = np.zeros((9, 2))
    truth[4] = [0.0, -10.0]

    near = np.zeros((9, 2))
    near[5] = [0.0, -9.0]
    result = load_localization(near, truth, graph)
    assert result == LoadLocalization(predicted_node=5, true_node=4, hit=True,
                                      magnitude_ratio=pytest.approx(0.9))
    assert result.magnitude_ok

    diagonal = np.zeros((9, 2))
    diagonal[0] = [0.0, -20.0]
    far = load_localization(diagonal, truth, graph)
    assert not far.hit
    assert not far.magnitude_ok


def test_metric_report_dict():
    """Test aggregate statistics in the metric document."""
    report = MetricReport(rrmse=[0.1, 0.3, 0.2], coverage=0.95, extra={"n_samples": 10})
    data = report.to_dict()
    assert data["mean_rrmse"] == pytest.approx(0.2)
    assert data["median_rrmse"] == pytest.approx(0.2)
    assert data["coverage"] == 0.95
    assert data["n_samples"] == 10
    assert np.isnan(MetricReport(rrmse=[], coverage=0.0).mean_rrmse)


def test_prediction_csv_scalar_target(tmp_path):
    """Test CSV columns and values for a single target component."""
    coords = np.array([[0.0, 0.0], [1.0, 0.5]])
    pf = _field([[2.0], [3.0]], [[0.5], [0.25]])
    path = tmp_path / "pred_0000.csv"
    write_prediction_csv(path, coords, pf, truth=np.array([[2.1], [2.9]]))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "x", "y", "truth", "mean", "s_a", "s_e", "lower", "upper"]
    assert rows[2] == ["1", "1.0", "0.5", "2.9", "3.0", "0.25", "0.0", "2.5", "3.5"]


def test_prediction_csv_vector_target(tmp_path):
    """Test component suffixes for a two-component target without truth."""
    pf = _field(np.zeros((3, 2)), np.ones((3, 2)))
    path = tmp_path / "pred.csv"
    write_prediction_csv(path, np.zeros((3, 2)), pf)
    with open(path) as f:
        header = next(csv.reader(f))
    assert header[:5] == ["id", "x", "y", "mean_0", "mean_1"]
    assert header[-1] == "upper_1"
    assert len(header) == 3 + 5 * 2
