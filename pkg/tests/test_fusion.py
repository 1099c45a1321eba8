import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenmt.data import stream
from fusenmt.fusion import (
    FusionConfig, SwitchGate, TeacherProjection, asymptotic_distillation_loss,
    average_fusion, combined_loss, dynamic_switch, lm_learning_rate, rho,
)
from fusenmt.module import cast_parameters
from fusenmt.tensor import ShapeError, Tape, Tensor, backward


def t(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# distillation loss


def test_ad_loss_zero_when_student_matches_teacher():
    feats = t(np.random.default_rng(0).standard_normal((1, 4, 8)))
    assert float(asymptotic_distillation_loss(feats, feats).data) == 0.0


def test_ad_loss_single_token_value():
    teacher = t([[[1.0, 0.0]]])
    student = t([[[0.0, 0.0]]])
    assert float(asymptotic_distillation_loss(teacher, student).data) == pytest.approx(0.5)


def test_ad_loss_masked_matches_loop_oracle():
    rng = np.random.default_rng(1)
    teacher = rng.standard_normal((2, 5, 4)).astype(np.float64)
    student = rng.standard_normal((2, 5, 4)).astype(np.float64)
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 0]], dtype=np.float64)
    total, n = 0.0, 0
    for b in range(2):
        for i in range(5):
            if mask[b, i] == 0:
                continue
            for j in range(4):
                total += (student[b, i, j] - teacher[b, i, j]) ** 2
                n += 1
    got = asymptotic_distillation_loss(t(teacher, np.float64), t(student, np.float64), mask)
    assert float(got.data) == pytest.approx(total / n, rel=1e-12)


def test_ad_loss_length_mismatch_is_error():
    with pytest.raises(ShapeError):
        asymptotic_distillation_loss(t(np.zeros((1, 3, 4))), t(np.zeros((1, 5, 4))))


def test_ad_loss_never_reaches_teacher_values():
    teacher = Tensor(np.ones((1, 2, 4), dtype=np.float32))  # constant: detached
    student = Tensor(np.zeros((1, 2, 4), dtype=np.float32), requires_grad=True)
    with Tape():
        loss = asymptotic_distillation_loss(teacher, student)
    backward(loss)
    assert teacher.grad is None
    assert np.abs(student.grad).sum() > 0


# ---------------------------------------------------------------------------
# combined loss


def test_combined_loss_alpha_extremes():
    l_nmt, l_kd = t(2.0), t(1.0)
    assert float(combined_loss(l_nmt, l_kd, 1.0).data) == pytest.approx(2.0)
    assert float(combined_loss(l_nmt, l_kd, 0.0).data) == pytest.approx(1.0)


def test_combined_loss_default_alpha_arithmetic():
    assert float(combined_loss(t(2.0), t(1.0), 0.9).data) == pytest.approx(1.9, abs=1e-6)


def test_combined_loss_rejects_alpha_outside_unit_interval():
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            combined_loss(t(1.0), t(1.0), bad)


def test_combined_gradient_is_affine_in_parts():
    # d(combined)/dtheta == alpha * dL_nmt/dtheta + (1-alpha) * dL_kd/dtheta
    rng = np.random.default_rng(2)
    alpha = 0.9
    shared_data = rng.standard_normal((3, 3)).astype(np.float32)
    target = rng.standard_normal((3, 3)).astype(np.float32)

    def losses(x):
        from fusenmt.tensor import mse, sum_all, mul
        l_nmt = mse(x, Tensor(target))
        l_kd = sum_all(mul(x, x))
        return l_nmt, l_kd

    x = Tensor(shared_data.copy(), requires_grad=True)
    with Tape():
        l_nmt, l_kd = losses(x)
        loss = combined_loss(l_nmt, l_kd, alpha)
    backward(loss)
    combined_grad = x.grad.copy()

    x1 = Tensor(shared_data.copy(), requires_grad=True)
    with Tape():
        l_nmt, _ = losses(x1)
    backward(l_nmt)
    x2 = Tensor(shared_data.copy(), requires_grad=True)
    with Tape():
        _, l_kd = losses(x2)
    backward(l_kd)

    expected = alpha * x1.grad + (1 - alpha) * x2.grad
    np.testing.assert_allclose(combined_grad, expected, atol=1e-5)


# ---------------------------------------------------------------------------
# dynamic switch


def make_gate(d=8, bias=0.0):
    gate = SwitchGate(d)
    gate.b.data[:] = bias
    return gate


def test_gate_large_negative_bias_passes_nmt_through():
    rng = np.random.default_rng(3)
    h_lm = t(rng.standard_normal((1, 4, 8)))
    h_nmt = t(rng.standard_normal((1, 4, 8)))
    out = dynamic_switch(h_lm, h_nmt, make_gate(bias=-30.0))
    np.testing.assert_allclose(out.data, h_nmt.data, atol=1e-6)


def test_gate_large_positive_bias_passes_lm_through():
    rng = np.random.default_rng(4)
    h_lm = t(rng.standard_normal((1, 4, 8)))
    h_nmt = t(rng.standard_normal((1, 4, 8)))
    out = dynamic_switch(h_lm, h_nmt, make_gate(bias=30.0))
    np.testing.assert_allclose(out.data, h_lm.data, atol=1e-6)


def test_zero_init_gate_is_exact_average_pooling():
    rng = np.random.default_rng(5)
    h_lm = t(rng.standard_normal((2, 3, 8)))
    h_nmt = t(rng.standard_normal((2, 3, 8)))
    gated = dynamic_switch(h_lm, h_nmt, make_gate())
    pooled = average_fusion(h_lm, h_nmt)
    np.testing.assert_array_equal(gated.data, pooled.data)


def test_gate_shape_mismatch():
    with pytest.raises(ShapeError):
        dynamic_switch(t(np.zeros((1, 2, 8))), t(np.zeros((1, 3, 8))), make_gate())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3))
def test_switch_output_is_convex_combination(seed, bias):
    rng = np.random.default_rng(seed)
    h_lm = t(rng.standard_normal((1, 3, 8)))
    h_nmt = t(rng.standard_normal((1, 3, 8)))
    gate = make_gate(bias=bias)
    gate.w.data[:] = rng.standard_normal((8, 8)).astype(np.float32) * 0.3
    gate.u.data[:] = rng.standard_normal((8, 8)).astype(np.float32) * 0.3
    out = dynamic_switch(h_lm, h_nmt, gate).data
    lo = np.minimum(h_lm.data, h_nmt.data)
    hi = np.maximum(h_lm.data, h_nmt.data)
    assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()


# ---------------------------------------------------------------------------
# schedule


def test_rho_boundary_values():
    tp, te = 10000, 20000
    assert rho(0, tp, te) == 0.0
    assert rho(tp, tp, te) == 1.0
    assert rho(te, tp, te) == 0.0
    assert rho(te + 1, tp, te) == 0.0
    assert rho(15000, tp, te) == pytest.approx(0.5)


def test_rho_piecewise_linear_and_continuous():
    tp, te = 100, 300
    values = [rho(x, tp, te) for x in range(0, te + 50)]
    assert max(values) == 1.0
    assert values.index(1.0) == tp
    jumps = np.abs(np.diff(values))
    assert jumps.max() <= 1.0 / tp + 1e-12


def test_rho_rejects_bad_ranges():
    with pytest.raises(ValueError):
        rho(5, 10, 10)
    with pytest.raises(ValueError):
        rho(-1, 10, 20)


def test_lm_learning_rate_regimes():
    assert lm_learning_rate(30000, 0.5, "sched", 10000, 20000) == 0.0
    assert lm_learning_rate(123, 0.5, "frozen") == 0.0
    assert lm_learning_rate(10000, 0.5, "sched", 10000, 20000) == 0.5
    assert lm_learning_rate(7, 0.5, "const1") == 0.5
    assert lm_learning_rate(7, 0.5, "const0.01") == pytest.approx(0.005)
    with pytest.raises(ValueError):
        lm_learning_rate(7, 0.5, "const0.5")


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(alpha=1.2)
    with pytest.raises(ValueError):
        FusionConfig(t_prime=100, t_end=50)
    with pytest.raises(ValueError):
        FusionConfig(lm_regime="warm")
    cfg = FusionConfig()
    assert cfg.resolve_schedule(5000) == (500, 1000)
    with pytest.raises(ValueError):
        cfg.validate(num_encoder_layers=2) or FusionConfig(student_tap_layer=5).validate(2)


def test_projection_identity_when_widths_match():
    proj = TeacherProjection(8, 8, stream(0, "fusion-init"))
    np.testing.assert_array_equal(proj.w.data, np.eye(8, dtype=np.float32))


# ---------------------------------------------------------------------------
# full combined loss gradient check (2-sentence batch)


def test_combined_loss_grad_check_on_two_sentence_batch():
    from fusenmt.transformer import NmtConfig, TransformerNMT
    from fusenmt.teacher import TeacherConfig, TeacherLM, extract_features
    from fusenmt.tensor import matmul

    cfg = NmtConfig(src_vocab=9, tgt_vocab=9, num_layers=1, d_model=8,
                    num_heads=2, d_ff=16, dropout=0.0, max_len=8)
    model = TransformerNMT(cfg, np.random.default_rng(21))
    tcfg = TeacherConfig(num_layers=1, d_model=8, num_heads=2, d_ff=16,
                         dropout=0.0, max_len=8)
    teacher = TeacherLM(tcfg, 9, np.random.default_rng(22))
    proj = TeacherProjection(8, 8, np.random.default_rng(23))
    cast_parameters(model, np.float64)
    cast_parameters(teacher, np.float64)
    cast_parameters(proj, np.float64)

    src = np.array([[5, 6, 2], [7, 2, 0]])
    src_mask = (src != 0).astype(np.float64)
    tgt_in = np.array([[1, 6, 5], [1, 7, 0]])
    tgt_out = np.array([[6, 5, 2], [7, 2, 0]])
    feats = extract_features(teacher, src, pad_mask=src_mask)

    def loss_fn():
        enc = model.encode(model.embed_src(src), src_mask)
        dec = model.decode(tgt_in, enc)
        l_nmt = model.nmt_loss(dec, tgt_out, epsilon=0.1, pad_id=0)
        target = matmul(feats.vectors, proj.w)
        l_kd = asymptotic_distillation_loss(target, enc.states[-1], src_mask)
        return combined_loss(l_nmt, l_kd, 0.9)

    with Tape():
        loss = loss_fn()
    backward(loss)

    eps = 1e-4
    rng = np.random.default_rng(0)
    params = list(model.named_parameters()) + list(proj.named_parameters())
    worst = 0.0
    for name, p in params:
        for _ in range(2):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = float(loss_fn().data)
            p.data[idx] = orig - eps
            down = float(loss_fn().data)
            p.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(p.grad[idx])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    assert worst < 5e-3


def test_frozen_teacher_gets_no_gradient_from_combined_loss():
    from fusenmt.transformer import NmtConfig, TransformerNMT
    from fusenmt.teacher import TeacherConfig, TeacherLM, extract_features
    from fusenmt.tensor import matmul

    cfg = NmtConfig(src_vocab=9, tgt_vocab=9, num_layers=1, d_model=8,
                    num_heads=2, d_ff=16, dropout=0.0, max_len=8)
    model = TransformerNMT(cfg, np.random.default_rng(31))
    teacher = TeacherLM(TeacherConfig(num_layers=1, d_model=8, num_heads=2,
                                      d_ff=16, dropout=0.0, max_len=8),
                        9, np.random.default_rng(32))
    proj = TeacherProjection(8, 8, np.random.default_rng(33))
    src = np.array([[5, 6, 2]])
    mask = np.ones((1, 3), dtype=np.float32)
    before = {k: v.copy() for k, v in teacher.state_arrays().items()}

    feats = extract_features(teacher, src, pad_mask=mask)
    with Tape():
        enc = model.encode(model.embed_src(src), mask)
        dec = model.decode(np.array([[1, 6]]), enc)
        l_nmt = model.nmt_loss(dec, np.array([[6, 2]]), epsilon=0.1, pad_id=0)
        l_kd = asymptotic_distillation_loss(matmul(feats.vectors, proj.w), enc.states[-1], mask)
        loss = combined_loss(l_nmt, l_kd, 0.9)
    backward(loss)

    for name, p in teacher.named_parameters():
        assert np.abs(p.grad).sum() == 0.0, f"teacher parameter {name} received gradient"
    for k, v in teacher.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])
