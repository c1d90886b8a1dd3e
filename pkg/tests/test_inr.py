import numpy as np
import pytest

from imjense.coords import make_grid, positional_encode
from imjense.inr import (InrParameters, eval_image, init_relu_mlp, init_siren, layer_sizes, render)
from imjense.tensorgrad import ShapeError, Tape


def test_default_architecture_parameter_count():
    p = init_siren(layer_sizes(), w0=31.0, seed=0)
    assert p.sizes == [2, 256, 256, 256, 256, 256, 256, 1]
    # (2*256 + 256) + 5*(256*256 + 256) + (256 + 1)
    assert p.n_params(per_branch=True) == 329_985
    assert p.n_params() == 2 * 329_985


def test_siren_bounds_hold_for_every_weight():
    p = init_siren(layer_sizes(), w0=31.0, seed=3)
    for layers in p.branches:
        w_first = layers[0][0]
        assert np.all(np.abs(w_first) <= 31.0 / 2)
        for w, b in layers[1:]:
            assert np.all(np.abs(w) <= np.sqrt(6 / w.shape[1]))
            assert np.all(b == 0)
    hidden = p.branches[0][1][0]
    assert np.abs(hidden).max() <= 0.15309310892394862


def test_siren_bounds_survive_float32():
    p = init_siren(layer_sizes(), w0=31.0, seed=11, dtype=np.float32)
    for layers in p.branches:
        assert np.all(layers[0][0].astype(np.float64) <= 15.5)
        for w, _ in layers[1:]:
            assert np.all(np.abs(w.astype(np.float64)) <= np.sqrt(6 / w.shape[1]))


def test_siren_deterministic():
    a = init_siren(layer_sizes(hidden_layers=2, width=16), w0=20.0, seed=5)
    b = init_siren(layer_sizes(hidden_layers=2, width=16), w0=20.0, seed=5)
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()
    c = init_siren(layer_sizes(hidden_layers=2, width=16), w0=20.0, seed=6)
    assert not np.array_equal(a.arrays()[0], c.arrays()[0])


def test_branches_independent():
    p = init_siren(layer_sizes(hidden_layers=2, width=16), w0=20.0, seed=0)
    assert not np.array_equal(p.branches[0][1][0], p.branches[1][1][0])


def test_relu_init():
    p = init_relu_mlp(layer_sizes(24, 3, 32), seed=0, pe_bands=6)
    assert p.activation == "relu"
    for w, _ in p.branches[0]:
        assert np.all(np.isfinite(w))
        assert np.all(np.abs(w) <= np.sqrt(6 / w.shape[1]))


def test_relu_network_structure():
    # hidden layers clamp at zero, output layer is affine only
    p = init_relu_mlp(layer_sizes(2, 2, 8), seed=1)
    g = make_grid(5, 5)
    t = Tape()
    img, _ = eval_image(p, g, t)
    kinds = [n.kind for n in t.nodes]
    assert kinds.count("relu") == 2 * 2
    assert kinds.count("affine") == 2 * 3
    # the node right before each reshape is an affine (no output activation)
    for i, n in enumerate(t.nodes):
        if n.kind == "reshape":
            assert t.nodes[n.inputs[0]].kind == "affine"


def test_zero_network_gives_zero_image():
    p = init_siren(layer_sizes(hidden_layers=2, width=8), w0=30.0, seed=0)
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    assert np.all(render(p, make_grid(4, 4)) == 0)


def test_single_linear_layer_returns_first_coordinate():
    w = np.array([[1.0, 0.0]])
    b = np.zeros(1)
    p = InrParameters(([(w, b)], [(w * 0, b)]), activation="sine", w0=1.0)
    g = make_grid(3, 4)
    t = Tape()
    img, _ = eval_image(p, g, t)
    np.testing.assert_array_equal(t.value(img)[0], g.coords[:, 0].reshape(3, 4))
    np.testing.assert_array_equal(t.value(img)[1], 0)


def test_sine_layers():
    p = init_siren(layer_sizes(hidden_layers=2, width=6), w0=10.0, seed=2)
    g = make_grid(3, 3)
    (w0, b0), (w1, b1), (w2, b2) = p.branches[0]
    h = np.sin(g.coords @ w0.T + b0)
    h = np.sin(h @ w1.T + b1)
    out = h @ w2.T + b2
    np.testing.assert_allclose(render(p, g).real, out.reshape(3, 3), atol=1e-13)


def test_eval_matches_render_bitwise_and_is_deterministic():
    p = init_siren(layer_sizes(hidden_layers=3, width=16), w0=25.0, seed=9)
    g = make_grid(12, 10)
    t = Tape()
    img, leaves = eval_image(p, g, t)
    v = t.value(img)
    r1 = render(p, g)
    r2 = render(p, g)
    assert r1.tobytes() == r2.tobytes()
    assert (v[0] + 1j * v[1]).tobytes() == r1.tobytes()
    assert len(leaves) == len(p.arrays())


def test_input_dimension_checked():
    p = init_relu_mlp(layer_sizes(24, 2, 8), seed=0)  # expects encoded input but pe_bands=0
    with pytest.raises(ShapeError):
        eval_image(p, make_grid(4, 4), Tape())


def test_positional_encoded_input():
    p = init_relu_mlp(layer_sizes(24, 2, 8), seed=0, pe_bands=6)
    g = make_grid(4, 4)
    np.testing.assert_array_equal(p.network_input(g), positional_encode(g, 6))
    assert render(p, g).shape == (4, 4)
