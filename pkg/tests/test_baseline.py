import numpy as np
import pytest
from scipy.special import expit

from terraseg.baseline import (
    CELLS,
    ExperimentGrid,
    GridCell,
    Unet,
    UnetConfig,
    focal_loss,
    focal_with_logits,
    foreground_gradient_share,
    run_grid,
    unet_forward,
)
from terraseg.metrics import read_report_csv
from terraseg.tensor import ConfigurationError, Tensor, check_gradients, precision
from terraseg.training import Dataset, TrainConfig, bce_loss


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def test_focal_direct_value():
    v = focal_loss(T([0.9]), np.array([1.0])).item()
    assert abs(v - (-0.25 * 0.01 * np.log(0.9))) < 1e-12
    assert abs(v - 2.634e-4) < 1e-7


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.uniform(0.01, 0.99, size=20)
        y = (rng.random(20) > 0.5).astype(float)
        assert abs(focal_loss(T(m), y, 0.5, 0).item() - 0.5 * bce_loss(T(m), y).item()) < 1e-9


def test_focal_confident_correct_is_near_zero():
    assert focal_loss(T([1.0, 0.0]), np.array([1.0, 0.0])).item() < 1e-12


def test_focal_logit_form_matches():
    rng = np.random.default_rng(1)
    z = rng.normal(scale=3, size=30)
    y = (rng.random(30) > 0.3).astype(float)
    assert abs(focal_with_logits(T(z), y).item() - focal_loss(T(expit(z)), y).item()) < 1e-9


@pytest.mark.parametrize("alpha,gamma", [(0.0, 2), (1.0, 2), (0.25, -1)])
def test_focal_bad_parameters(alpha, gamma):
    with pytest.raises(ConfigurationError):
        focal_loss(T([0.5]), np.array([1.0]), alpha, gamma)


@pytest.mark.parametrize("channels", [5, 15])
def test_unet_shape(channels):
    out = unet_forward(np.random.default_rng(0).random((1, channels, 64, 64)).astype(np.float32),
                       UnetConfig(in_channels=channels))
    assert out.shape == (1, 64, 64)
    assert ((out > 0) & (out < 1)).all()


def test_unet_indivisible_input():
    with pytest.raises(ConfigurationError):
        Unet(UnetConfig(in_channels=5))(Tensor(np.zeros((1, 5, 36, 36), np.float32)))


def test_unet_config_channels():
    with pytest.raises(ConfigurationError):
        UnetConfig(in_channels=3)


def test_unet_grad_check():
    with precision(np.float64):
        m = Unet(UnetConfig(widths=(4, 8), in_channels=5, head_prior=None))
        rng = np.random.default_rng(2)
        x = Tensor(rng.random((1, 5, 32, 32)))
        y = (rng.random((1, 1, 32, 32)) > 0.8).astype(float)
        names, params = zip(*m.named_parameters())
        report = check_gradients(lambda: focal_with_logits(m(x), y), params, names,
                                 tolerance=1e-3, max_entries=3, seed=1)
    assert report.passed, report


def test_focal_has_larger_foreground_share():
    rng = np.random.default_rng(3)
    x = rng.random((2, 15, 64, 64)).astype(np.float32)
    y = np.zeros((2, 64, 64))
    y[:, 20:26, 30:37] = 1  # about 1% foreground
    assert 0.009 < y.mean() < 0.011
    m = Unet(UnetConfig())
    assert foreground_gradient_share(m, x, y, "focal") > foreground_gradient_share(m, x, y, "bce")


def test_grid_must_have_four_cells():
    with pytest.raises(ConfigurationError):
        ExperimentGrid(cells=CELLS[:3])
    with pytest.raises(ConfigurationError):
        ExperimentGrid(cells=CELLS[:3] + (GridCell("x", "gray", "bce"),))


def _grid_data():
    rng = np.random.default_rng(4)
    x = rng.random((4, 15, 32, 32)).astype(np.float32)
    y = np.zeros((4, 32, 32), np.float32)
    y[:, 8:12, 8:12] = 1
    return Dataset(x, y)


def _small_grid(epochs=2):
    return ExperimentGrid(UnetConfig(widths=(4, 8)), TrainConfig(batch_size=4, epochs=epochs, checkpoint_every=1))


def test_run_grid_outputs_and_determinism(tmp_path):
    data = _grid_data()
    a = run_grid(_small_grid(), data, tmp_path / "a")
    b = run_grid(_small_grid(), data, tmp_path / "b")
    assert [r.error for r in a] == [None] * 4
    manifest = (tmp_path / "a" / "grid.csv").read_text().splitlines()
    assert manifest[0] == "cell,input_mode,loss,checkpoint_path"
    assert len(manifest) == 5
    for cell in CELLS:
        rows = read_report_csv(tmp_path / "a" / cell.name / "metrics.csv")
        assert sorted(rows) == [("train", 1), ("train", 2)]
        assert ((tmp_path / "a" / cell.name / "metrics.csv").read_bytes()
                == (tmp_path / "b" / cell.name / "metrics.csv").read_bytes())
        assert (tmp_path / "a" / cell.name / "metrics.png").exists()


def test_run_grid_isolates_failures(tmp_path):
    data = _grid_data()
    data.x[0, 0, 0, 0] = np.nan
    results = run_grid(_small_grid(1), data, tmp_path)
    assert all(r.error for r in results)
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 5


def test_run_grid_resumes(tmp_path):
    data = _grid_data()
    run_grid(_small_grid(1), data, tmp_path)
    results = run_grid(_small_grid(2), data, tmp_path)
    for r in results:
        assert r.checkpoint.name == "epoch_00002.sseg"
        assert sorted(r.metrics) == [("train", 1), ("train", 2)]
