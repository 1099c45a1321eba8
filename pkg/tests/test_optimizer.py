import numpy as np
import pytest

from fusenmt.module import parameter
from fusenmt.optim import Optimizer, ParamGroups, nmt_rate


def make_param(values, name=None, dtype=np.float32):
    p = parameter(np.asarray(values, dtype=dtype), name=name)
    return p


def test_nmt_rate_peak_at_warmup():
    w, d = 400, 128
    assert w ** -0.5 == pytest.approx(w * w ** -1.5)
    peak = nmt_rate(w, d, w)
    assert nmt_rate(w - 1, d, w) < peak
    assert nmt_rate(w + 1, d, w) < peak


def test_nmt_rate_increasing_during_warmup():
    rates = [nmt_rate(t, 128, 400) for t in range(1, 400)]
    assert all(a < b for a, b in zip(rates, rates[1:]))


def test_nmt_rate_closed_form_oracle():
    # independent closed-form evaluation
    d, w, t = 128, 400, 100
    expected = (d ** -0.5) * min(t ** -0.5, t * (w ** -1.5))
    assert nmt_rate(t, d, w) == pytest.approx(expected, abs=1e-9)


def test_nmt_rate_rejects_step_zero():
    with pytest.raises(ValueError):
        nmt_rate(0, 128, 400)


def test_sgd_update_is_exact():
    p = make_param([2.0])
    p.grad[:] = np.float32(0.25)
    opt = Optimizer(ParamGroups(nmt=[p]), mode="sgd", clip_norm=None)
    opt.step(lr_nmt=0.5, lr_lm=0.0)
    assert p.data[0] == np.float32(2.0) - np.float32(0.5) * np.float32(0.25)
    assert p.grad[0] == 0.0


def test_lm_rate_zero_leaves_lm_group_bit_unchanged():
    rng = np.random.default_rng(0)
    lm = make_param(rng.standard_normal(8))
    nmt = make_param(rng.standard_normal(8))
    before = lm.data.copy()
    opt = Optimizer(ParamGroups(lm=[lm], nmt=[nmt]), mode="adam", clip_norm=None)
    for _ in range(10):
        lm.grad[:] = rng.standard_normal(8).astype(np.float32)
        nmt.grad[:] = rng.standard_normal(8).astype(np.float32)
        opt.step(lr_nmt=0.01, lr_lm=0.0)
    assert np.array_equal(lm.data, before)
    assert not np.array_equal(nmt.data, np.zeros(8))


def test_adam_matches_hand_stepped_oracle():
    beta1, beta2, eps, lr = 0.9, 0.98, 1e-9, 0.1
    grads = [0.3, -0.2, 0.05]
    p = make_param([1.0], dtype=np.float64)
    opt = Optimizer(ParamGroups(nmt=[p]), mode="adam", beta1=beta1, beta2=beta2,
                    eps=eps, clip_norm=None)
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad[:] = g
        opt.step(lr_nmt=lr, lr_lm=0.0)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
    assert p.data[0] == pytest.approx(theta, abs=1e-7)


def test_groups_reject_overlap():
    p = make_param([1.0], name="shared")
    with pytest.raises(ValueError):
        ParamGroups(lm=[p], nmt=[p])


def test_groups_must_be_exhaustive():
    p1 = make_param([1.0], name="grouped")
    p2 = make_param([1.0], name="orphan")
    with pytest.raises(ValueError) as err:
        Optimizer(ParamGroups(nmt=[p1]), trainables=[p1, p2])
    assert "orphan" in str(err.value)


def test_missing_gradient_signals_broken_graph():
    p = make_param([1.0], name="leaf")
    p.grad = None
    opt = Optimizer(ParamGroups(nmt=[p]))
    with pytest.raises(RuntimeError):
        opt.step(lr_nmt=0.1, lr_lm=0.0)


def test_clipping_never_increases_norm():
    rng = np.random.default_rng(1)
    for trial in range(20):
        p = make_param(rng.standard_normal(16) * rng.uniform(0.01, 10))
        p.grad[:] = rng.standard_normal(16).astype(np.float32) * rng.uniform(0.01, 10)
        before = float(np.linalg.norm(p.grad))
        opt = Optimizer(ParamGroups(nmt=[p]), clip_norm=1.0)
        opt.clip_gradients()
        after = float(np.linalg.norm(p.grad))
        assert after <= before + 1e-6
        assert after <= 1.0 + 1e-5


def test_sgd_delta_scales_linearly_with_rate():
    # start at zero so the measured value IS the update delta; a power-of-two
    # rate ratio keeps the float scaling exact
    rng = np.random.default_rng(2)
    g = rng.standard_normal(8).astype(np.float32)

    def delta(rate):
        p = make_param(np.zeros(8))
        p.grad[:] = g
        Optimizer(ParamGroups(nmt=[p]), mode="sgd", clip_norm=None).step(rate, 0.0)
        return p.data

    np.testing.assert_array_equal(delta(0.5) * np.float32(2.0), delta(1.0))
