import numpy as np
import pytest

from wrnse import autodiff as ad
from wrnse import synth, trainer
from wrnse.model import WrnConfig

TINY = dict(base_widths=(8, 8, 16, 16), widen_factor=2, blocks_per_wrb=1)


def tiny_config(in_channels=64):
    return WrnConfig(in_channels=in_channels, **TINY)


def finite_difference(f, arr, indices, h=1e-5):
    """Central differences of scalar ``f()`` with respect to ``arr.flat[i]`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[n] = (up - down) / (2 * h)
    return out


def gradient_error(analytic, numeric, small=1e-6):
    """Max relative error; entries with both magnitudes below ``small`` use absolute error."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale < small, np.abs(analytic - numeric), np.abs(analytic - numeric) / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def check_op_gradient(build, arrays, rng, k=40):
    """Compare backward() with central differences of ``sum(build(...) * probe)``."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    probe = rng.standard_normal(out.shape)
    ad.backward(ad.tensor_sum(ad.mul(out, probe)))

    def value():
        return float(np.sum(build(*[ad.Tensor(a) for a in arrays]).data * probe))

    worst = 0.0
    for a, t in zip(arrays, tensors):
        idx = np.arange(a.size) if a.size <= k else rng.choice(a.size, k, replace=False)
        num = finite_difference(value, a, idx)
        worst = max(worst, gradient_error(t.grad.reshape(-1)[idx], num))
    return worst


def sample_indices(size, k, rng):
    return np.arange(size) if size <= k else rng.choice(size, k, replace=False)


def smooth_operating_point(model, x, rng):
    """Lift the outputs off zero and return a nearby log target.

    Central differences lose accuracy next to the ReLU kink and the log floor,
    and roundoff grows with the cost, so the check runs where both are benign.
    """
    model.out.bias.data[:] = 1.0
    buffers = {k: v.copy() for k, v in model.named_buffers()}
    y = model(x, training=True).data
    for k, v in model.named_buffers():
        v[...] = buffers[k]
    return np.log(y) + 0.1 * rng.standard_normal(y.shape)


def network_gradient_error(model, x, target, rng, per_tensor=4):
    """Worst FD error of the training cost over ``per_tensor`` entries of every parameter."""
    # training-mode BN updates running stats in place; restore them between evaluations
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def restore():
        for k, v in model.named_buffers():
            v[...] = buffers[k]

    def loss_value():
        out = float(trainer.cost(model(x, training=True), target).data)
        restore()
        return out

    for p in model.parameters():
        p.zero_grad()
    ad.backward(trainer.cost(model(x, training=True), target))
    restore()
    worst = 0.0
    for _, p in model.named_parameters():
        idx = sample_indices(p.data.size, per_tensor, rng)
        num = finite_difference(loss_value, p.data, idx)
        worst = max(worst, gradient_error(p.grad.reshape(-1)[idx], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_speech():
    return synth.speech_like(1.5, np.random.default_rng(7))


# acceptance verdicts, echoed in the terminal summary so they show without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
