import sys
import numpy as np
import pytest

from scar.core import CodecConfig, Rng
from scar.entropy import forward_backward


def tiny_config(**overrides):
    """Seconds-scale pipeline settings for unit tests."""
    base = dict(n_anchors=240, K_base=16, K_res=16, hidden=8, embed=4, d_model=8, head_hidden=16,
                grid_levels=2, grid_min_res=2, grid_max_res=4, grid_table_size=128, grid_features=2,
                t_start=5, t_end=20, total_steps=60, batch_size=64, codebook_epochs=5, grid_lr=1e-2)
    base.update(overrides)
    return CodecConfig.desk(**base)


@pytest.fixture
def tiny():
    return tiny_config()


def central_difference(fn, array, h=1e-4):
    """Numerical gradient of the scalar ``fn()`` with respect to ``array`` (mutated in place)."""
    num = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + h
        fp = fn()
        array[i] = old - h
        fm = fn()
        array[i] = old
        num[i] = (fp - fm) / (2 * h)
    return num


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def perturbed_model(model, rng: Rng, scale=0.3):
    for name, v in model.params.items():
        model.params[name] = v + rng.normal(0.0, scale, v.shape)
    return model


def entropy_gradient_errors(model, hs, idx):
    """Per-tensor relative error between analytic and central-difference gradients."""
    _, _, g = forward_backward(model, hs, idx)
    errors = {}
    for name in list(model.params) + ["h_spatial"]:
        target = hs if name == "h_spatial" else model.params[name]
        num = central_difference(lambda: forward_backward(model, hs, idx, grad=False)[0], target)
        errors[name] = relative_error(g[name], num)
    return errors


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
