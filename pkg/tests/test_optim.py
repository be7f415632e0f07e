import numpy as np
import pytest

from splatseg.optim import Adam, AdamW, MissingGradError, bias_corrected_first_step, warmup_lr
from splatseg.tensor import Tensor


def reference_adam(x0, grads, lr, b1, b2, eps, wd, decoupled):
    """Textbook Adam / AdamW written out scalar-by-scalar."""
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        g = np.array(g, dtype=np.float64)
        if decoupled:
            x = x - lr * wd * x
        else:
            g = g + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return x


@pytest.mark.parametrize("cls, decoupled", [(Adam, False), (AdamW, True)])
@pytest.mark.parametrize("seed", range(5))
def test_matches_reference(cls, decoupled, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(12)]
    p = Tensor(x0.copy(), requires_grad=True)
    opt = cls({"p": p}, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    ref = reference_adam(x0, grads, 0.01, 0.9, 0.999, 1e-8, 0.1, decoupled)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-13)


def test_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.37])
    opt.step()
    assert p.data[0] == pytest.approx(bias_corrected_first_step(0.1, 0.37, 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_step_clears_grads_and_requires_them():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b})
    a.grad = np.ones(2)
    with pytest.raises(MissingGradError, match="'b'"):
        opt.step()
    b.grad = np.ones(2)
    opt.step()
    assert a.grad is None and b.grad is None


def test_adamw_decay_is_decoupled_from_gradient_scale():
    # with a zero gradient Adam's update is zero and only the decay moves the weight
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_bad_betas_rejected():
    with pytest.raises(ValueError):
        Adam([Tensor(np.ones(1), requires_grad=True)], betas=(1.0, 0.999))


def test_warmup_ramp():
    assert warmup_lr(1e-4, 0, 4) == pytest.approx(2.5e-5)
    assert warmup_lr(1e-4, 3, 4) == pytest.approx(1e-4)
    assert warmup_lr(1e-4, 10, 4) == pytest.approx(1e-4)
    assert warmup_lr(1e-4, 0, 0) == 1e-4
