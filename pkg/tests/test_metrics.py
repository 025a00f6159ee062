import numpy as np
import pytest

from vbkt.data import DomainDataset
from vbkt.metrics import (accuracy, export_embeddings, intra_class_discrepancy,
                          save_discrepancy)
from vbkt.model import LatentSplitModel, ModelConfig


def constant_class_model(c_total, winner):
    cfg = ModelConfig(input_dim=2, num_classes=c_total, theta_widths=(),
                      latent_dim=2)
    model = LatentSplitModel(cfg, seed=0)
    model.theta_layers[0][0].values[:] = 0.0
    model.theta_layers[0][1].values[:] = 0.0
    model.omega_layers[0][0].values[:] = 0.0
    bias = np.zeros(c_total)
    bias[winner] = 1.0
    model.omega_layers[0][1].values[:] = bias
    return model


def balanced_dataset(n_per_class, c, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(c), n_per_class)
    return DomainDataset(x=rng.normal(size=(c * n_per_class, dim)), y=y,
                         num_classes=c, domain_id="d")


def test_constant_predictor_on_balanced_data():
    model = constant_class_model(10, winner=4)
    ds = balanced_dataset(20, 10)
    assert accuracy(model, ds) == pytest.approx(0.1, abs=1e-12)


def test_accuracy_matches_recount_oracle():
    rng = np.random.default_rng(1)
    model = LatentSplitModel(ModelConfig(input_dim=3, num_classes=4,
                                         theta_widths=(6,), latent_dim=5), seed=2)
    ds = DomainDataset(x=rng.normal(size=(50, 3)),
                       y=rng.integers(0, 4, size=50), num_classes=4,
                       domain_id="d")
    logits = model.inference_logits(ds.x)
    correct = sum(int(np.argmax(logits[i]) == ds.y[i]) for i in range(50))
    assert accuracy(model, ds) == correct / 50


def test_perfect_predictions():
    model = constant_class_model(3, winner=1)
    ds = DomainDataset(x=np.zeros((5, 2)), y=np.ones(5, dtype=int),
                       num_classes=3, domain_id="d")
    assert accuracy(model, ds) == 1.0
    with pytest.raises(ValueError):
        accuracy(model, DomainDataset(x=np.zeros((0, 2)),
                                      y=np.zeros(0, dtype=int),
                                      num_classes=3, domain_id="d"))


def test_discrepancy_duplicated_sample_is_zero():
    model = LatentSplitModel(ModelConfig(input_dim=2, num_classes=3,
                                         theta_widths=(4,), latent_dim=3), seed=3)
    x = np.tile([[0.3, -0.7]], (10, 1))
    ds = DomainDataset(x=x, y=np.zeros(10, dtype=int), num_classes=3,
                       domain_id="d")
    matrix = intra_class_discrepancy(model, ds, 0, n_samples=10, seed=0)
    np.testing.assert_array_equal(matrix.d, np.zeros((10, 10)))
    assert matrix.mean_off_diagonal() == 0.0


def test_discrepancy_two_samples_hand_value():
    model = LatentSplitModel(ModelConfig(input_dim=2, num_classes=3,
                                         theta_widths=(4,), latent_dim=3), seed=4)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    ds = DomainDataset(x=x, y=np.zeros(2, dtype=int), num_classes=3,
                       domain_id="d")
    matrix = intra_class_discrepancy(model, ds, 0, n_samples=2, seed=0)
    logits = model.inference_logits(x)
    expected = float(np.linalg.norm(logits[0] - logits[1]))
    assert matrix.d[0, 1] == pytest.approx(expected, abs=1e-12)
    assert matrix.d[1, 0] == matrix.d[0, 1]
    assert np.array_equal(matrix.d, matrix.d.T)
    np.testing.assert_array_equal(np.diag(matrix.d), [0.0, 0.0])


def test_discrepancy_selection_deterministic_and_guarded():
    model = LatentSplitModel(ModelConfig(input_dim=2, num_classes=2,
                                         theta_widths=(4,), latent_dim=3), seed=5)
    ds = balanced_dataset(40, 2)
    a = intra_class_discrepancy(model, ds, 1, n_samples=12, seed=9)
    b = intra_class_discrepancy(model, ds, 1, n_samples=12, seed=9)
    assert np.array_equal(a.sample_ids, b.sample_ids)
    assert np.array_equal(a.d, b.d)
    with pytest.raises(ValueError):
        intra_class_discrepancy(model, ds, 0, n_samples=100, seed=0)


def test_discrepancy_csv(tmp_path):
    model = LatentSplitModel(ModelConfig(input_dim=2, num_classes=2,
                                         theta_widths=(4,), latent_dim=3), seed=6)
    ds = balanced_dataset(10, 2)
    matrix = intra_class_discrepancy(model, ds, 0, n_samples=5, seed=1)
    path = tmp_path / "m.csv"
    save_discrepancy(matrix, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 6
    reread = np.array([[float(v) for v in line.split(",")[1:]]
                       for line in lines[1:]])
    np.testing.assert_array_equal(reread, matrix.d)


def test_export_embeddings(tmp_path):
    model = LatentSplitModel(ModelConfig(input_dim=2, num_classes=2,
                                         theta_widths=(4,), latent_dim=3), seed=7)
    path = tmp_path / "emb.csv"
    assert export_embeddings(model, [], path) == 0
    assert path.read_text().strip() == "domain_id,label,e0,e1,e2"

    a = balanced_dataset(5, 2, seed=1)
    b = DomainDataset(x=np.random.default_rng(2).normal(size=(7, 2)),
                      y=np.zeros(7, dtype=int), num_classes=2, domain_id="other")
    n = export_embeddings(model, [a, b], path)
    assert n == len(a) + len(b)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == n + 1
    # round trip within decimal-print precision (repr is exact)
    z = model.inference_latent(a.x)
    first = lines[1].split(",")
    assert first[0] == "d"
    np.testing.assert_array_equal([float(v) for v in first[2:]], z[0])
