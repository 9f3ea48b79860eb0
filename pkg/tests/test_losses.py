import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quads import losses
from quads.autodiff import Tape, Tensor, finite_diff_check
from quads.errors import NumericalError, ShapeError
from quads.losses import LossBreakdown, combined_loss, cross_entropy, distillation_loss, l1_feature_loss
from quads.models import EncoderConfig, forward_features, head_logits, initialize

TINY = EncoderConfig(n_mels=6, conv_layers=((3, 5, 2),), ff_layers=(4,), latent_dim=3)


def test_l1_examples():
    z = Tensor(np.array([[0.5, -1.0]]))
    assert l1_feature_loss(z.data, z).item() == 0.0
    assert l1_feature_loss(np.array([[1.0, 2.0]]), Tensor(np.zeros((1, 2))), "sum").item() == 3.0
    zt = np.array([[3.0, 0.0], [0.0, -5.0]])
    assert l1_feature_loss(zt, Tensor(np.zeros((2, 2))), "mean").item() == 4.0


def test_l1_dim_mismatch():
    with pytest.raises(ShapeError):
        l1_feature_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))


def test_l1_teacher_side_gets_no_gradient():
    zt = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    zs = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    with Tape() as tape:
        loss = l1_feature_loss(zt, zs)
    tape.backward(loss)
    assert zt.grad is None
    np.testing.assert_array_equal(zs.grad, [[-1.0, -1.0]])


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros((1, 4))), [1]).item() == pytest.approx(math.log(4))
    assert cross_entropy(Tensor([20.0, -20.0]), 0).item() == pytest.approx(0.0, abs=1e-15)
    oracle = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    got = cross_entropy(Tensor([1.0, 2.0, 3.0]), 2).item()
    assert got == pytest.approx(oracle, rel=1e-14)
    assert got == pytest.approx(0.40760596444437, rel=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_cross_entropy_vector_form_is_taped():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(x, 2)
    tape.backward(loss)
    s = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    np.testing.assert_allclose(x.grad, s - [0, 0, 1], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(-64, 64), min_size=2, max_size=6),
    st.integers(-16, 16),
    st.data(),
)
def test_cross_entropy_shift_invariant(raw, shift, data):
    # dyadic values keep the shift exact in binary floating point
    logits = np.array(raw, dtype=np.float64) / 8
    label = data.draw(st.integers(0, len(raw) - 1))
    a = cross_entropy(Tensor(logits), label).item()
    b = cross_entropy(Tensor(logits + shift / 4), label).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_distillation_blend():
    assert distillation_loss(2.0, 4.0, 1.0) == 2.0
    assert distillation_loss(2.0, 4.0, 0.0) == 4.0
    assert distillation_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ValueError):
        distillation_loss(1.0, 1.0, 1.5)


def test_quantization_sum():
    assert losses.quantization_loss(0.0, 3.25) == 3.25
    assert losses.quantization_loss(3.25, 0.0) == 3.25
    assert losses.quantization_loss(1.5, 2.5) == 4.0
    with pytest.raises(NumericalError):
        losses.quantization_loss(float("nan"), 1.0)


def test_combined_gating():
    assert combined_loss(7.0, 99.0, 1) == 7.0
    assert combined_loss(99.0, 7.0, 0) == 7.0
    for bad in (0.5, True, 2):
        with pytest.raises(ValueError):
            combined_loss(1.0, 2.0, bad)


def test_unselected_branch_not_built():
    def boom():
        raise AssertionError("evaluated the unselected branch")

    assert combined_loss(lambda: 7.0, boom, 1) == 7.0
    assert combined_loss(boom, lambda: 7.0, 0) == 7.0


def test_breakdown_identities():
    LossBreakdown(l1=2.0, l_gt=4.0, l_dis=3.0, total=3.0, alpha=0.5, gamma=1).check()
    LossBreakdown(l_gt=1.5, l_centroid=1.5, l_quant=3.0, total=3.0, gamma=0).check()
    with pytest.raises(AssertionError):
        LossBreakdown(l1=2.0, l_gt=4.0, l_dis=3.5, total=3.5, alpha=0.5, gamma=1).check()


def _distill_setup(seed):
    rng = np.random.default_rng(seed)
    student = initialize(TINY, seed=seed, n_classes=3, dtype=np.float64)
    x = rng.normal(size=(4, 11, 6))
    y = rng.integers(0, 3, size=4)
    zt = rng.normal(size=(4, 3))
    return student, x, y, zt


@pytest.mark.parametrize("param", ["conv0.weight", "ff0.bias", "latent.weight", "head.weight"])
def test_distillation_graph_gradients(param):
    # l_dis = alpha * |z_t - z_s|_1 + (1 - alpha) * CE, differentiated w.r.t. one parameter tensor
    for seed in range(20):
        student, x, y, zt = _distill_setup(seed)
        base = student.parameters()[param].data.copy()

        def f(p):
            z = forward_features(student, x, {param: p})
            l1 = l1_feature_loss(zt, z)
            l_gt = cross_entropy(head_logits(student, z, {param: p}), y)
            return distillation_loss(l1, l_gt, 0.3)

        res = finite_diff_check(f, Tensor(base))
        assert res.max_rel_error <= 1e-5, (param, seed, res)
