import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quads.errors import ShapeError
from quads.metrics import (
    accuracy,
    conv1d_macs,
    count_macs,
    dense_macs,
    efficiency_report,
    energy_proxy,
    macro_f1,
    model_size_mb,
)
from quads.models import EncoderConfig, initialize


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 1], [0, 0]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])


def test_macro_f1_binary_confusion():
    # TP=2, FP=1, FN=1, TN=2 for class 1 (and the mirror for class 0)
    labels = [1, 1, 1, 0, 0, 0]
    preds = [1, 1, 0, 1, 0, 0]
    assert macro_f1(preds, labels, 2) == pytest.approx(2 / 3)


def test_macro_f1_absent_class_excluded():
    labels, preds = [0, 1, 1, 0], [0, 1, 0, 0]
    assert macro_f1(preds, labels, 2) == macro_f1(preds, labels, 3)


def test_macro_f1_rejects_bad_inputs():
    with pytest.raises(ValueError):
        macro_f1([0], [0], 0)
    with pytest.raises(ValueError):
        macro_f1([0, 3], [0, 1], 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.integers(0, 2**32 - 1))
def test_macro_f1_bounds(labels, seed):
    y = np.array(labels)
    p = np.random.default_rng(seed).integers(0, 5, size=y.size)
    f = macro_f1(p, y, 5)
    assert 0.0 <= f <= 1.0
    assert macro_f1(y, y, 5) == 1.0 == accuracy(y, y)


@pytest.mark.parametrize(
    "params,bits,expected",
    [(7.25e6, 32, 27.66), (7.25e6, 4, 3.46), (7.64e6, 16, 14.58)],
)
def test_model_size_reported_values(params, bits, expected):
    assert abs(model_size_mb(params, bits) - expected) <= 0.01 + 1e-9


def test_model_size_formula():
    assert model_size_mb(1024 * 1024, 8) == 1.0
    assert model_size_mb(262144, 32) == 1.0
    with pytest.raises(ValueError):
        model_size_mb(10, 0)


def test_mac_definitions():
    assert dense_macs(4, 3) == 12
    assert conv1d_macs(3, 2, 4, 10) == 240


def test_model_macs_by_hand():
    cfg = EncoderConfig(n_mels=2, conv_layers=((3, 4, 1),), ff_layers=(), latent_dim=5)
    m = initialize(cfg, n_classes=3)
    # conv 3*2*4*10 on 12 frames, latent dense 4->5 over 10 frames, head 5->3 once
    assert count_macs(m, 12) == 240 + 4 * 5 * 10 + 15
    with pytest.raises(ShapeError):
        count_macs(m, 2)


def test_energy_proxy():
    assert energy_proxy(2.0, 32, {32: 1.0}) == 2e9
    with pytest.raises(KeyError):
        energy_proxy(2.0, 4, {32: 1.0})


def test_gmacs_independent_of_bits():
    m = initialize(EncoderConfig(), seed=0)
    r4 = efficiency_report(m, 4, 98, 1000)
    r16 = efficiency_report(m, 16, 98, 1000)
    assert r4.gmacs == r16.gmacs > 0
    assert r16.size_mb_paper_convention == model_size_mb(m.param_count(), 16)
    assert r4.energy_proxy is None
    assert efficiency_report(m, 4, 98, 0, {4: 2.0}).energy_proxy == pytest.approx(r4.gmacs * 2e9)
