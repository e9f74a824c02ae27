import numpy as np
import pytest

from adalign.numerics import tensor as T
from adalign.numerics.params import ParamStore
from adalign.numerics import optim


def central_difference(loss_fn, ps: ParamStore, names, h=1e-4):
    """Numerical gradient of ``loss_fn()`` (a float) w.r.t. the named params."""
    out = {}
    for n in names:
        w = ps[n].data
        g = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = w[i]
            w[i] = old + h
            up = loss_fn()
            w[i] = old - h
            down = loss_fn()
            w[i] = old
            g[i] = (up - down) / (2 * h)
        out[n] = g
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst ``|a - n| / max(|a|, |n|)`` per tensor.

    ``floor`` keeps gradients that are exactly zero by symmetry (e.g. a key
    bias under softmax) from turning rounding noise into a large ratio.
    """
    worst = 0.0
    for n in numeric:
        a, b = analytic[n], numeric[n]
        scale = max(np.abs(a).max(), np.abs(b).max(), floor)
        worst = max(worst, float(np.abs(a - b).max() / scale))
    return worst


def check_grads(build_loss, ps: ParamStore, names=None, h=1e-4):
    """Relative error between backprop and central differences."""
    names = ps.trainable_names() if names is None else names
    analytic = optim.grad(build_loss(), ps)
    numeric = central_difference(lambda: float(build_loss().data), ps, names, h)
    return max_rel_error({n: analytic[n] for n in names}, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small enough that every CLI subcommand finishes in seconds.
TINY_INI = """\
[run]
n_train = 24
n_eval = 6
max_answer_len = 40
[mixer]
embed_dim = 16
n_bev_blocks = 1
n_instance_blocks = 1
n_heads = 2
mlp_hidden = 32
[decoder]
n_layers = 4
dim = 32
n_heads = 2
mlp_hidden = 64
n_adapter_tokens = 2
[schedule]
n_front = 1
n_end = 1
[train]
batch = 4
stage1_steps = 6
stage2_steps = 4
warmup_steps = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p
