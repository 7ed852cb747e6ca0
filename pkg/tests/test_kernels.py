import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgan import _kernels
from msgan._kernels import _reference

needs_cython = pytest.mark.skipif("cython" not in _kernels.available(), reason="compiled core not built")


shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4).map(lambda v: 2 * v),
                   st.sampled_from([(1, 0), (3, 1), (4, 0), (3, 0)]), st.sampled_from([np.float32, np.float64]))


@needs_cython
@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2 ** 31 - 1))
def test_backends_agree(shape, seed):
    ref, cy = _reference, _kernels._BACKENDS["cython"]
    n, c, h, (k, p), dtype = shape
    if h + 2 * p < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, h)).astype(dtype)
    np.testing.assert_array_equal(ref.im2col(x, k, p), cy.im2col(x, k, p))
    cols = ref.im2col(x, k, p)
    np.testing.assert_allclose(ref.col2im(cols, x.shape, k, p), cy.col2im(cols, x.shape, k, p), rtol=1e-6)
    idx = ref.pool_argmax(x)
    np.testing.assert_array_equal(idx, cy.pool_argmax(x))
    np.testing.assert_array_equal(ref.pool_gather(x, idx), cy.pool_gather(x, idx))
    g = rng.normal(size=(n, c, h // 2, h // 2)).astype(dtype)
    np.testing.assert_array_equal(ref.pool_scatter(g, idx), cy.pool_scatter(g, idx))


@pytest.mark.parametrize("mod", ["numpy", "cython"])
def test_pool_argmax_takes_first_maximum(mod):
    if mod not in _kernels.available():
        pytest.skip("compiled core not built")
    k = _kernels._BACKENDS[mod]
    x = np.array([[[[1.0, 4.0], [4.0, 4.0]]]])
    assert k.pool_argmax(x)[0, 0, 0, 0] == 1


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    cols = rng.normal(size=_reference.im2col(x, 3, 1).shape)
    lhs = np.sum(_reference.im2col(x, 3, 1) * cols)
    rhs = np.sum(x * _reference.col2im(cols, x.shape, 3, 1))
    assert np.isclose(lhs, rhs)


def test_use_rejects_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.use("fortran")


def test_env_var_selects_fallback():
    code = "from msgan import _kernels; print(_kernels.backend())"
    env = dict(os.environ, MSGAN_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_cython
def test_training_step_identical_across_backends():
    from msgan.data import SyntheticSpec, generate_synthetic
    from msgan.models import ModelConfig
    from msgan.training import TrainConfig, Trainer
    ds = generate_synthetic(SyntheticSpec(seed=2), 8, 8)
    params = {}
    before = _kernels.backend()
    try:
        for name in ("numpy", "cython"):
            _kernels.use(name)
            t = Trainer(ModelConfig("rgb", 8, latent_dim=16, width_factor="1/64"),
                        TrainConfig(seed=4)).attach(ds)
            t.run(steps=2)
            params[name] = {k: p.data.copy() for k, p in t.g.parameters().items()}
    finally:
        _kernels.use(before)
    for k in params["numpy"]:
        np.testing.assert_allclose(params["numpy"][k], params["cython"][k], rtol=1e-4, atol=1e-6)
