import numpy as np
import pytest

from conftest import TINY, build_tiny_model
from vpl import tensor as T
from vpl.backbone import Backbone
from vpl.gradcheck import GradCheckError, grad_check
from vpl.tensor import Parameter, Tensor


class _OneParamModel:
    def __init__(self, w):
        self.w = Parameter("w", Tensor(np.array([w])))

    def parameters(self):
        return [self.w]


def test_closed_form_linear_model():
    # y = w*x, loss = y^2, w=3, x=1 -> dL/dw = 2*w = 6
    model = _OneParamModel(3.0)

    def loss_fn(m, x):
        y = T.mul_vec(Tensor(np.array(x)), m.w.value)
        return T.sum_all(T.mul(y, y))

    report = grad_check(model, loss_fn, [1.0], step=1e-5, tol=1e-6)
    assert report.passed
    check = report.checks[0]
    assert check.analytic == pytest.approx(6.0, abs=1e-12)
    assert check.numeric == pytest.approx(6.0, abs=1e-6)


def test_full_plan_tiny_vit_passes(rng):
    model = build_tiny_model("full", Backbone.init(TINY, seed=3))
    x = rng.normal(size=(2, 1, 8, 8))
    labels = rng.integers(0, 3, size=2)

    def loss_fn(m, batch):
        return T.cross_entropy(m.forward(batch), labels)

    report = grad_check(model, loss_fn, x, tol=1e-4)
    assert report.passed, report.failures


def test_frozen_parameters_excluded(rng):
    model = build_tiny_model("linear", Backbone.init(TINY, seed=3))
    x = rng.normal(size=(2, 1, 8, 8))
    labels = rng.integers(0, 3, size=2)
    report = grad_check(model, lambda m, b: T.cross_entropy(m.forward(b), labels), x)
    checked = {c.param_id for c in report.checks}
    assert checked == {"head.weight", "head.bias"}


def test_detects_injected_backward_bug(rng, monkeypatch):
    from vpl import adaptation as A

    model = build_tiny_model("adapter", Backbone.init(TINY, seed=3))
    x = rng.normal(size=(2, 1, 8, 8))
    labels = rng.integers(0, 3, size=2)
    for p in model.trainable_parameters():
        p.value.data += rng.normal(0, 0.05, size=p.value.shape)

    true_gelu = T.gelu

    def broken_gelu(t):  # sign-flipped gradient inside the adapter bottleneck
        out = true_gelu(t)
        if out._backward is not None:
            orig = out._backward
            out._backward = lambda g: orig(-g)
        return out

    monkeypatch.setattr(A.T, "gelu", broken_gelu)

    def loss_fn(m, batch):
        return T.cross_entropy(m.forward(batch), labels)

    report = grad_check(model, loss_fn, x, tol=1e-4)
    assert not report.passed
    assert any("adapter" in pid for pid in report.failures)
    with pytest.raises(GradCheckError, match="adapter"):
        grad_check(model, loss_fn, x, tol=1e-4, raise_on_failure=True)


def test_report_summary_names_parameters():
    model = _OneParamModel(2.0)

    def loss_fn(m, x):
        y = T.mul_vec(Tensor(np.array(x)), m.w.value)
        return T.sum_all(T.mul(y, y))

    report = grad_check(model, loss_fn, [1.0])
    assert "w" in report.summary()
    assert report.max_rel_err() < 1e-6
