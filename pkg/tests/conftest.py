import numpy as np
import pytest

from samprec.backbone import BackboneConfig, init_srs


def tiny_srs(vocab=9, d=4, layers=2, heads=2, hidden=8, max_len=8, seed=0, scale=0.3):
    """A float64 model with weights large enough that every gradient path is exercised."""
    cfg = BackboneConfig(d=d, layers=layers, heads=heads, hidden=hidden, dropout=0.0, max_len=max_len)
    rng = np.random.default_rng(seed)
    params = init_srs(cfg, vocab, rng, dtype=np.float64)
    for name, t in params.tensors().items():
        t.data += rng.standard_normal(t.shape) * scale
        if name == "item_emb":
            t.data[0] = 0.0
    return params


@pytest.fixture
def srs():
    return tiny_srs()


def tiny_sampler(d=4, max_len=8, heads=2, hidden=8, seed=0, scale=0.3, zero_head=False):
    from samprec.sampler import SamplerConfig, init_sampler

    rng = np.random.default_rng(seed + 100)
    params = init_sampler(d, max_len, SamplerConfig(heads=heads, hidden=hidden), rng, dtype=np.float64)
    for name, t in params.tensors().items():
        if zero_head and name in ("W2", "b2"):
            continue
        t.data += rng.standard_normal(t.shape) * scale
    return params
