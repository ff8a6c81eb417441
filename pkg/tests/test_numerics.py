import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_shield import checks
from latent_shield import numerics as nx


def t64(*xs):
    return torch.tensor(xs, dtype=torch.float64)


def test_relu_affine_basics():
    assert float(nx.relu(torch.tensor(-1.0))) == 0.0
    x = torch.randn(4, 3)
    assert torch.equal(nx.affine(x, torch.eye(3), torch.zeros(3)), x)
    with pytest.raises(ValueError):
        nx.affine(x, torch.eye(2), torch.zeros(2))


def test_gru_zero_params_halves_state():
    h = torch.randn(2, 4)
    out = nx.gru_cell(h, torch.zeros(2, 3), torch.zeros(12, 3), torch.zeros(12, 4), torch.zeros(12), torch.zeros(12))
    assert torch.allclose(out, 0.5 * h)


def test_gru_shape_errors():
    with pytest.raises(ValueError):
        nx.gru_cell(torch.zeros(1, 4), torch.zeros(1, 3), torch.zeros(12, 3), torch.zeros(12, 3),
                    torch.zeros(12), torch.zeros(12))


def test_reparam_sample():
    d = nx.DiagGaussian(torch.full((3,), 2.0), torch.full((3,), 0.1))
    g = torch.Generator().manual_seed(5)
    eps = torch.randn(3, generator=torch.Generator().manual_seed(5))
    assert torch.allclose(nx.sample_reparam(d, g), 2.0 + 0.1 * eps)
    a = nx.sample_reparam(d, torch.Generator().manual_seed(1))
    b = nx.sample_reparam(d, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


def test_reparam_mean_within_monte_carlo_bound():
    n = 100_000
    d = nx.DiagGaussian(torch.full((n,), 1.5), torch.full((n,), 2.0))
    x = nx.sample_reparam(d, torch.Generator().manual_seed(0))
    assert abs(float(x.mean()) - 1.5) < 3 * 2.0 / math.sqrt(n)


def test_from_raw_floor():
    d = nx.DiagGaussian.from_raw(torch.zeros(2), torch.full((2,), -1e3))
    assert torch.allclose(d.std, torch.full((2,), 0.1))


@pytest.mark.parametrize("m, s, expected", [
    (0.0, 1.0, 0.0),
    (1.0, 1.0, 0.5),
    (0.0, 2.0, (4 - 1 - math.log(4)) / 2),
])
def test_kl_closed_forms(m, s, expected):
    q = nx.DiagGaussian(t64(m), t64(s))
    p = nx.DiagGaussian(t64(0.0), t64(1.0))
    assert float(nx.kl_diag_gaussian(q, p)) == pytest.approx(expected, abs=1e-12)


def test_kl_std_two_reference_value():
    # (4 - 1 - ln 4) / 2, checked against torch.distributions
    ref = torch.distributions.kl_divergence(torch.distributions.Normal(0.0, 2.0), torch.distributions.Normal(0.0, 1.0))
    assert float(ref) == pytest.approx(0.8068528, abs=1e-6)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5)),
                min_size=1, max_size=6))
def test_kl_matches_torch_distributions(params):
    m1, s1, m2, s2 = (t64(*c) for c in zip(*params))
    ours = nx.kl_diag_gaussian(nx.DiagGaussian(m1, s1), nx.DiagGaussian(m2, s2))
    ref = torch.distributions.kl_divergence(torch.distributions.Normal(m1, s1),
                                            torch.distributions.Normal(m2, s2)).sum()
    assert float(ours) == pytest.approx(float(ref), rel=1e-9, abs=1e-9)
    assert float(ours) >= 0.0
    same = nx.kl_diag_gaussian(nx.DiagGaussian(m1, s1), nx.DiagGaussian(m1, s1))
    assert abs(float(same)) < 1e-9


def test_balanced_kl_value_and_gradient_split():
    mq = torch.tensor([0.5], requires_grad=True)
    mp = torch.tensor([0.0], requires_grad=True)
    q = nx.DiagGaussian(mq, torch.ones(1))
    p = nx.DiagGaussian(mp, torch.ones(1))
    kl = nx.balanced_kl(q, p, 0.8)
    assert kl.item() == pytest.approx(0.125)
    kl.backward()
    # d/dmq of 0.5 (mq - mp)^2 is 0.5; the posterior keeps one fifth of it
    assert float(mq.grad) == pytest.approx(0.2 * 0.5)
    assert float(mp.grad) == pytest.approx(-0.8 * 0.5)


def test_weighted_bce_hand_values():
    zero = torch.zeros((), dtype=torch.float64)
    assert float(nx.weighted_bce(zero, 1.0, 3.0)) == pytest.approx(3 * math.log(2), abs=1e-6)
    assert float(nx.weighted_bce(zero, 0.0, 3.0)) == pytest.approx(2.0794 / 3, abs=1e-4)
    assert float(nx.weighted_bce(zero, 0.0, 3.0)) == pytest.approx(math.log(2), abs=1e-6)
    assert float(nx.weighted_bce(torch.tensor(80.0, dtype=torch.float64), 1.0)) == pytest.approx(0.0, abs=1e-30)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_weighted_bce_monotone_finite(a, b):
    lo, hi = sorted((a, b))
    x = t64(lo, hi)
    pos = nx.weighted_bce(x, torch.ones(2, dtype=torch.float64))
    neg = nx.weighted_bce(x, torch.zeros(2, dtype=torch.float64))
    assert torch.isfinite(pos).all() and torch.isfinite(neg).all()
    assert (pos >= 0).all() and (neg >= 0).all()
    assert pos[0] >= pos[1] and neg[0] <= neg[1]


def test_stability_of_stochastic_primitives():
    x = torch.linspace(-1e3, 1e3, 101)
    d = nx.DiagGaussian.from_raw(x, x)
    assert torch.isfinite(d.std).all()
    assert torch.isfinite(nx.kl_diag_gaussian(d, nx.DiagGaussian.from_raw(-x, -x))).all()
    assert torch.isfinite(nx.elu(x)).all() and torch.isfinite(nx.tanh(x)).all()


def test_adam_examples():
    p = {"w": torch.tensor([1.0])}
    st0 = nx.AdamState(lr=0.1)
    out = nx.adam_step(p, {"w": torch.zeros(1)}, st0)
    assert torch.equal(out["w"], p["w"])
    out = nx.adam_step(p, {"w": torch.ones(1)}, nx.AdamState(lr=0.1))
    assert float(p["w"] - out["w"]) == pytest.approx(0.1, rel=1e-5)
    a = nx.adam_step(p, {"w": torch.ones(1)}, nx.AdamState(lr=0.1))
    b = nx.adam_step(p, {"w": torch.ones(1)}, nx.AdamState(lr=0.1))
    assert torch.equal(a["w"], b["w"])
    with pytest.raises(ValueError):
        nx.adam_step(p, {"w": torch.ones(2)}, nx.AdamState(lr=0.1))


def test_adam_optimizer_clips():
    lin = torch.nn.Linear(3, 1)
    opt = nx.Adam(lin, 1e-3, clip=1.0)
    (lin(torch.full((1, 3), 1e4)).sum()).backward()
    norm = opt.step()
    assert norm > 1.0


def test_grad_check_examples():
    x = torch.randn(5, dtype=torch.float64)
    assert nx.grad_check(lambda v: (v ** 2).sum(), [x]).max_rel_error < 1e-6
    rep = nx.grad_check(lambda v: v.sum() * 0 + 3.0, [x])
    assert rep.passed and rep.max_rel_error == 0.0

    g = torch.Generator().manual_seed(0)
    H, I = 3, 2

    def f(h, xx, Wx, Wh, bx, bh, W, b):
        hn = nx.gru_cell(h, xx, Wx, Wh, bx, bh)
        logit = nx.affine(hn, W, b)
        return nx.weighted_bce(logit, torch.ones_like(logit)).sum()

    params = [torch.randn(s, generator=g) for s in [(2, H), (2, I), (3 * H, I), (3 * H, H), (3 * H,), (3 * H,), (1, H), (1,)]]
    assert nx.grad_check(f, params).max_rel_error < 1e-4


def test_grad_check_catches_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    rep = nx.grad_check(lambda v: Bad.apply(v).sum(), [torch.randn(4, dtype=torch.float64)])
    assert not rep.passed


@pytest.mark.parametrize("seed", range(0, 100, 9))
def test_primitives_pass_grad_check(seed):
    for case in checks.primitive_cases(seed):
        rep = nx.grad_check(case.fn, case.inputs)
        assert rep.passed, (case.name, rep.max_rel_error)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.w": torch.randn(3, 4), "b": np.arange(5, dtype=np.float32), "scalar": torch.tensor(2.5)}
    path = tmp_path / "c.bin"
    nx.save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"LSCK"
    back = nx.load_checkpoint(path)
    assert set(back) == set(tensors)
    assert np.array_equal(back["a.w"], tensors["a.w"].numpy())
    assert back["scalar"].shape == ()


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        nx.load_checkpoint(p)


def test_load_into_shape_mismatch():
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(4, 2)
    with pytest.raises(ValueError, match="shape mismatch"):
        nx.load_into(b, "m", nx.module_tensors("m", a))
