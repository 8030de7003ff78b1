import math

import numpy as np
import pytest

from qspace.data import DwiStack, Label, LesionRoi
from qspace.dki import LesionCoefficients
from qspace.errors import ConfigError, ShapeMismatch
from qspace.nn.gradcheck import check_gradients
from qspace.pipelines import (BENIGN_SENTINEL, ModelKind, NetworkConfig, build_ddc_classifier,
                              build_e2e, build_f2e, build_network, e2e_specs, pad_batch,
                              padded_size, scalar_baseline, score_to_coefficient, slice_input)

SMALL = NetworkConfig(signal_widths=(6, 8, 8), rep_width=4, ddc_channels=8, dropout_p=0.3)

# conv weight + bias counts of the default widths (128, 256, 512) / 64
E2E_DEFAULT_PARAMS = ((5 * 128 + 128) + (128 * 256 + 256) + (256 * 512 + 512)
                      + (512 * 64 * 9 + 64) + 5 * (64 * 64 * 9 + 64) + (64 * 2 + 2))
F2E_DEFAULT_PARAMS = (2 * 64 * 9 + 64) + 5 * (64 * 64 * 9 + 64) + (64 * 2 + 2)
DDC_DEFAULT_PARAMS = (5 * 128 + 128) + (128 * 256 + 256) + (256 * 512 + 512) + (512 * 2 + 2)


def test_parameter_counts_pinned():
    cfg = NetworkConfig()
    assert build_e2e(cfg).n_parameters() == E2E_DEFAULT_PARAMS == 645122
    assert build_f2e(cfg).n_parameters() == F2E_DEFAULT_PARAMS == 185986
    assert build_ddc_classifier(cfg).n_parameters() == DDC_DEFAULT_PARAMS == 166402


def test_e2e_layout():
    kinds = [s.kind for s in e2e_specs(NetworkConfig())]
    convs = [k for k in kinds if k.startswith("conv")]
    assert convs == ["conv1x1"] * 3 + ["conv3x3"] * 6 + ["conv1x1"]
    assert kinds.count("maxpool2x2") == 1 and kinds.count("global_avg_pool") == 1
    assert kinds.count("relu") == 9 and kinds.count("dropout") == 9
    assert kinds[-1] == "softmax"


def test_network_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(signal_widths=(8, 8, 16), ddc_channels=8)
    assert NetworkConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"width": 3})


def test_model_kind_parse():
    assert ModelKind.parse("e2e") is ModelKind.E2E
    assert ModelKind.parse("adc") is ModelKind.ADC_SCALAR
    assert ModelKind.parse("AKC_SCALAR") is ModelKind.AKC_SCALAR
    with pytest.raises(ConfigError):
        ModelKind.parse("svm")
    with pytest.raises(ConfigError):
        build_network(ModelKind.ADC_SCALAR, SMALL)


@pytest.mark.parametrize("kind", [ModelKind.E2E, ModelKind.DDC, ModelKind.F2E])
def test_variable_shapes_and_normalisation(kind, rng):
    net = build_network(kind, SMALL, seed=1)
    c = 2 if kind is ModelKind.F2E else 5
    for hw in [(8, 8), (12, 20)]:
        p = net.predict_proba(rng.uniform(0, 1, (2, c) + hw).astype(np.float32))
        assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_f2e_rejects_five_channels():
    with pytest.raises(ShapeMismatch):
        build_f2e(SMALL).forward(np.zeros((1, 5, 8, 8), np.float32))


def test_zero_input_shape_independent():
    net = build_e2e(SMALL, seed=3)
    a = net.predict_proba(np.zeros((1, 5, 8, 8), np.float32))
    b = net.predict_proba(np.zeros((1, 5, 12, 20), np.float32))
    assert np.array_equal(a, b)
    ddc = build_ddc_classifier(SMALL, seed=3)
    for p in ddc.parameters():
        p.data = p.data + np.float32(0.1)
    a = ddc.predict_proba(np.zeros((1, 5, 8, 8), np.float32))
    b = ddc.predict_proba(np.zeros((1, 5, 4, 28), np.float32))
    assert np.allclose(a, b, atol=1e-6)


def test_ddc_permutation_invariance(rng):
    net = build_ddc_classifier(SMALL, seed=2)
    x = rng.uniform(0, 1, (1, 5, 8, 8)).astype(np.float32)
    perm = rng.permutation(64)
    y = x.reshape(1, 5, 64)[:, :, perm].reshape(1, 5, 8, 8)
    assert np.allclose(net.predict_proba(x), net.predict_proba(y), atol=1e-6)


def test_equal_maps_equal_logits():
    net = build_f2e(SMALL, seed=5)
    a = np.zeros((1, 2, 8, 8), np.float32)
    a[:, 0], a[:, 1] = 1.2, 0.8
    assert np.array_equal(net.forward(a).data, net.forward(a.copy()).data)


@pytest.mark.parametrize("kind", [ModelKind.E2E, ModelKind.F2E, ModelKind.DDC])
def test_assembled_gradcheck(kind, rng):
    net = build_network(kind, SMALL, seed=4).astype(np.float64)
    c = 2 if kind is ModelKind.F2E else 5
    x = rng.uniform(0.1, 1.0, (1, c, 4, 4))
    res = check_gradients(lambda: net.loss(x, [1], train=True, rng=np.random.default_rng(9)),
                          net.parameters(), n_probes=50, rng=np.random.default_rng(1))
    assert res.relative_error < 1e-4


def test_scalar_baselines():
    def c(adc, akc):
        return LesionCoefficients(adc, akc, 5, 0)
    adc, akc = ModelKind.ADC_SCALAR, ModelKind.AKC_SCALAR
    assert scalar_baseline(adc, c(1.0, 0)) > scalar_baseline(adc, c(2.0, 0))
    assert scalar_baseline(akc, c(0, 1.0)) > scalar_baseline(akc, c(0, 0.5))
    undefined = LesionCoefficients(math.nan, math.nan, 0, 5)
    assert scalar_baseline(adc, undefined) == BENIGN_SENTINEL == scalar_baseline(akc, None)
    assert scalar_baseline(adc, undefined) < scalar_baseline(adc, c(3.4, 0))
    assert score_to_coefficient(adc, -1.83) == "ADC <= 1.83"
    assert score_to_coefficient(akc, 0.845) == "AKC >= 0.845"
    assert score_to_coefficient(ModelKind.E2E, -math.inf) == "none"


def test_padding_rule():
    assert padded_size(6, 6) == (8, 8)
    assert padded_size(20, 14) == (20, 16)
    assert padded_size(9, 1) == (12, 8)
    batch = pad_batch([np.ones((5, 6, 6), np.float32)] * 49 + [np.ones((5, 20, 14), np.float32)])
    assert batch.shape == (50, 5, 20, 16)
    assert batch[0, :, 6:].sum() == 0 and batch[0, :, :6, :6].sum() == 5 * 36
    with pytest.raises(ShapeMismatch):
        pad_batch([np.ones((5, 2, 2)), np.ones((2, 2, 2))])


def test_slice_input_scaling():
    stack = DwiStack("a", "A", np.full((4, 1, 3, 3), 500.0, np.float32), 200.0)
    roi = LesionRoi(np.ones((1, 3, 3), bool), Label.BENIGN)
    s = slice_input(ModelKind.E2E, SMALL, stack, roi, 0)
    assert np.allclose(s.data[:4], 0.5) and np.allclose(s.data[4], 0.2)
    maps = np.stack([np.full((1, 3, 3), 1.3), np.full((1, 3, 3), 0.7)]).astype(np.float32)
    m = slice_input(ModelKind.F2E, SMALL, stack, roi, 0, maps)
    assert m.data.shape == (2, 3, 3) and np.allclose(m.data[0], 1.3)
    with pytest.raises(ConfigError):
        slice_input(ModelKind.F2E, SMALL, stack, roi, 0)
