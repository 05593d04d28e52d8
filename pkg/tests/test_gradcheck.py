import numpy as np
import pytest

from fastflownet import flowops, gradcheck, tensor


def test_every_op_passes():
    results = gradcheck.run_gradcheck(seed=0)
    assert [r.op for r in results] == list(gradcheck.CHECKS)
    for r in results:
        assert r.passed, f"{r.op}: {r.max_rel_error:.3e}"
        assert r.n_checked > 0


def test_relative_error():
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.0])) == 0
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    # tiny values on both sides are not amplified
    assert gradcheck.relative_error(np.array([1e-12]), np.array([-1e-12])) < 1e-3


def test_unknown_op():
    with pytest.raises(KeyError):
        gradcheck.run_gradcheck(ops=["nope"])


@pytest.mark.parametrize("module,name,op", [
    (tensor, "conv2d_backward", "conv2d"),
    (flowops, "warp_backward", "warp"),
    (flowops, "correlate_backward", "correlate"),
])
def test_corrupted_backward_detected(monkeypatch, module, name, op):
    real = getattr(module, name)

    def broken(*args, **kwargs):
        out = real(*args, **kwargs)
        return tuple(g * 1.01 for g in out)

    monkeypatch.setattr(module, name, broken)
    (result,) = gradcheck.run_gradcheck(ops=[op])
    assert not result.passed
