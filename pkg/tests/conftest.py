import numpy as np
import pytest

from cclis.losses import BatchView
from cclis.model import init_model


def small_model(seed=0, input_dim=5, num_prototypes=4, hidden=(6,), embed_dim=4, tau=0.5):
    rng = np.random.default_rng(seed)
    return init_model(
        input_dim,
        rng,
        hidden=hidden,
        proj_hidden=6,
        embed_dim=embed_dim,
        num_prototypes=num_prototypes,
        tau=tau,
        proto_scale=1.0,
    )


def random_batch(rng, input_dim=5, current=(2, 3), past=(0, 1), n_cur=4, n_buf=4, g_range=(0.05, 0.5)):
    """Batch with current rows from ``current`` classes and buffered rows from ``past``."""
    cy = np.resize(np.asarray(current), n_cur)
    cx = rng.normal(size=(n_cur, input_dim))
    if not past or n_buf == 0:
        return BatchView(cx, cy, current_classes=tuple(current))
    by = np.resize(np.asarray(past), n_buf)
    bx = rng.normal(size=(n_buf, input_dim))
    bg = rng.uniform(*g_range, size=n_buf)
    return BatchView(cx, cy, bx, by, bg, current_classes=tuple(current), past_classes=tuple(past))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
