import numpy as np
import pytest

from ccloss import Tensor, finite_diff_check, softmax_ce


def test_quadratic_is_nearly_exact():
    x = Tensor(np.array([3.0]), requires_grad=True)
    report = finite_diff_check(lambda: x.square().sum(), [x], h=1e-5)
    assert not report.skipped
    assert report.max_rel_error <= 1e-8  # central differences are exact for quadratics


def test_softmax_ce_gradient(toy_model_factory):
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 0])
    report = finite_diff_check(lambda: softmax_ce(logits, labels), [logits])
    assert not report.skipped
    assert report.max_rel_error <= 1e-6


def test_relu_kink_is_skipped_not_failed():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    report = finite_diff_check(lambda: x.relu().sum(), [x])
    assert report.skipped
    assert "kink" in report.reason


def test_point_clear_of_kink_passes():
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    report = finite_diff_check(lambda: x.relu().square().sum(), [x])
    assert not report.skipped
    assert report.max_rel_error <= 1e-7


def test_requires_grad_enforced():
    x = Tensor(np.array([1.0]))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: x.square().sum(), [x])


def test_nonpositive_step_rejected():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: x.square().sum(), [x], h=0.0)


def test_full_model_gradient(toy_model_factory):
    from ccloss import cc_loss

    model, x, labels = toy_model_factory(seed=1)
    report = finite_diff_check(
        lambda: cc_loss(*model.forward_cam(x), labels, lam=1.0, eps=1e-6).total,
        model.params(),
    )
    assert not report.skipped
    assert report.max_rel_error <= 1e-4
