"""Cell and seq2seq behavior: zero-parameter hand values, bounds, counts,
scheduled-sampling plumbing, end-to-end gradients."""
import numpy as np
import pytest

import dgcrn.model as M
from dgcrn import tensor as T
from dgcrn.errors import ConfigError, DimensionError
from dgcrn.graphs import StaticGraph


def _graph(rng, n):
    pos = rng.uniform(0, 10, (n, 2))
    d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
    np.fill_diagonal(d, 0.0)
    sigma = d[~np.eye(n, dtype=bool)].std()
    a = np.exp(-((d / sigma) ** 2))
    return StaticGraph(np.where(a >= 0.1, a, 0.0))


def _tiny_hp(**kw):
    base = dict(hidden=4, emb_dim=3, hyper_dim=2, hops=2, hyper_hops=1,
                alpha_sat=2.0, alpha_mix=0.05, beta_mix=0.95, gamma_mix=0.95,
                input_len=2, output_len=2)
    base.update(kw)
    return M.HyperParams(**base)


def _zero_all(params):
    for _, t in M.named_parameters(params):
        t.data[:] = 0.0


def test_zero_parameters_halve_hidden_state():
    rng = np.random.default_rng(0)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(), 3, seed=0, dtype=np.float64)
    _zero_all(params)
    h_prev = T.Tensor(rng.normal(size=(2, 3, 4)))
    x_t = T.Tensor(rng.normal(size=(2, 3, 2)))
    h_t, dyn = M.cell_step(x_t, h_prev, g, params.encoder)
    # z = r = sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
    assert np.allclose(h_t.data, 0.5 * h_prev.data, atol=1e-15)
    assert dyn is not None


def test_hidden_state_stays_bounded():
    rng = np.random.default_rng(1)
    g = _graph(rng, 4)
    params = M.init_model(_tiny_hp(), 4, seed=1, dtype=np.float64)
    h = T.zeros((2, 4, 4))
    for step in range(6):
        x_t = T.Tensor(rng.normal(size=(2, 4, 2)))
        h, _ = M.cell_step(x_t, h, g, params.encoder)
        assert np.all(np.abs(h.data) < 1.0)


def test_cell_input_validation():
    rng = np.random.default_rng(2)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(), 3, seed=0)
    with pytest.raises(DimensionError):
        M.cell_step(T.zeros((1, 3, 5)), T.zeros((1, 3, 4)), g, params.encoder)
    with pytest.raises(DimensionError):
        M.cell_step(T.zeros((1, 3, 2)), T.zeros((1, 2, 4)), g, params.encoder)
    with pytest.raises(DimensionError):
        M.cell_step(T.zeros((1, 4, 2)), T.zeros((1, 4, 4)), g, params.encoder)


def test_encode_base_case_and_zero_params():
    rng = np.random.default_rng(3)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(), 3, seed=2, dtype=np.float64)
    x1 = T.Tensor(rng.normal(size=(2, 1, 3, 2)))
    h_final, trace = M.encode(x1, g, params)
    assert len(trace) == 1 and trace[0] is h_final
    step, _ = M.cell_step(
        T.Tensor(x1.data[:, 0]), T.zeros((2, 3, 4), dtype=np.float64), g, params.encoder
    )
    assert np.array_equal(h_final.data, step.data)
    # shape independent of P
    x5 = T.Tensor(rng.normal(size=(2, 5, 3, 2)))
    h5, trace5 = M.encode(x5, g, params)
    assert h5.shape == (2, 3, 4) and len(trace5) == 5
    _zero_all(params)
    hz, _ = M.encode(x5, g, params)
    assert not np.any(hz.data)
    with pytest.raises(DimensionError):
        M.encode(T.zeros((2, 3, 2)), g, params)


def test_one_dynamic_graph_per_cell_step(monkeypatch):
    rng = np.random.default_rng(4)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(output_len=4), 3, seed=3, dtype=np.float64)
    calls = {"n": 0}
    real = M.generate

    def counting(*a, **kw):
        calls["n"] += 1
        return real(*a, **kw)

    monkeypatch.setattr(M, "generate", counting)
    x = T.Tensor(rng.normal(size=(1, 3, 3, 2)))
    h, _ = M.encode(x, g, params)
    assert calls["n"] == 3
    tod = T.Tensor(rng.uniform(0, 1, (1, 4, 3, 1)))
    M.decode(h, tod, g, params, horizon=2)
    assert calls["n"] == 3 + 2


def test_readout_zero_and_constant():
    rng = np.random.default_rng(5)
    params = M.init_model(_tiny_hp(), 3, seed=4, dtype=np.float64)
    h = T.Tensor(rng.normal(size=(2, 3, 4)))
    _zero_all(params)
    assert not np.any(M.readout(h, params).data)
    params.readout[1].data[:] = 2.5
    assert np.allclose(M.readout(h, params).data, 2.5)


def test_readout_two_layer_shape():
    params = M.init_model(_tiny_hp(readout_hidden=3), 3, seed=5, dtype=np.float64)
    assert len(params.readout) == 4
    h = T.Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    out = M.readout(h, params)
    assert out.shape == (2, 3)


def test_decode_teacher_forcing_modes():
    rng = np.random.default_rng(6)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(output_len=3), 3, seed=6, dtype=np.float64)
    h0 = T.Tensor(rng.normal(size=(2, 3, 4)) * 0.1)
    tod = T.Tensor(rng.uniform(0, 1, (2, 3, 3, 1)))
    teacher_a = T.Tensor(rng.normal(size=(2, 3, 3)))
    teacher_b = T.Tensor(rng.normal(size=(2, 3, 3)))

    # free-running decode ignores teacher values entirely
    free_a = M.decode(h0, tod, g, params, teacher=teacher_a, sampling_prob=0.0)
    free_b = M.decode(h0, tod, g, params, teacher=teacher_b, sampling_prob=0.0)
    assert np.array_equal(free_a.data, free_b.data)

    # pure teacher forcing: step q+1 consumes teacher step q, so the
    # prediction after the first step depends on the labels
    forced_a = M.decode(h0, tod, g, params, teacher=teacher_a, sampling_prob=1.0,
                        rng=np.random.default_rng(0))
    forced_b = M.decode(h0, tod, g, params, teacher=teacher_b, sampling_prob=1.0,
                        rng=np.random.default_rng(0))
    assert np.array_equal(forced_a.data[:, 0], forced_b.data[:, 0])
    assert not np.array_equal(forced_a.data[:, 1], forced_b.data[:, 1])


def test_decode_horizon_and_errors():
    rng = np.random.default_rng(7)
    g = _graph(rng, 3)
    params = M.init_model(_tiny_hp(output_len=3), 3, seed=7, dtype=np.float64)
    h0 = T.zeros((1, 3, 4))
    tod = T.Tensor(rng.uniform(0, 1, (1, 3, 3, 1)))
    out = M.decode(h0, tod, g, params, horizon=1)
    assert out.shape == (1, 1, 3)
    with pytest.raises(ConfigError):
        M.decode(h0, tod, g, params, horizon=4)
    with pytest.raises(ConfigError):
        M.decode(h0, tod, g, params, horizon=0)
    with pytest.raises(ConfigError):
        M.decode(h0, tod, g, params, sampling_prob=0.5)  # no teacher
    with pytest.raises(ConfigError):
        M.decode(h0, tod, g, params, teacher=T.zeros((1, 3, 3)), sampling_prob=0.5)


def test_named_parameters_unique_and_ablation_counts():
    full = M.init_model(_tiny_hp(), 3, seed=8)
    names = [n for n, _ in M.named_parameters(full)]
    assert len(names) == len(set(names))
    n_full = M.param_count(full)

    shared = M.init_model(_tiny_hp(share_embeddings=True), 3, seed=8)
    assert M.param_count(shared) == n_full - 2 * 3 * 3  # decoder emb tables gone

    no_dg = M.init_model(_tiny_hp(beta_mix=0.0), 3, seed=8)
    assert no_dg.encoder.gen is None
    assert M.param_count(no_dg) < n_full

    frozen = M.init_model(_tiny_hp(filter_mode="frozen"), 3, seed=8)
    assert frozen.encoder.gen.hyper_src is None
    assert M.param_count(frozen) < n_full

    affine = M.init_model(_tiny_hp(hypernet="affine"), 3, seed=8)
    assert affine.encoder.gen.hyper_src.conv is None
    assert M.param_count(affine) <= n_full

    no_pre = M.init_model(_tiny_hp(gamma_mix=0.0), 3, seed=8)
    assert M.param_count(no_pre) == n_full  # same shapes, static terms skipped


def test_init_deterministic_and_dtype():
    a = M.init_model(_tiny_hp(), 3, seed=11, dtype=np.float32)
    b = M.init_model(_tiny_hp(), 3, seed=11, dtype=np.float32)
    for (na, ta), (nb, tb) in zip(M.named_parameters(a), M.named_parameters(b)):
        assert na == nb
        assert ta.dtype == np.float32
        assert np.array_equal(ta.data, tb.data)
    c = M.init_model(_tiny_hp(), 3, seed=12, dtype=np.float32)
    assert not np.array_equal(a.readout[0].data, c.readout[0].data)


def test_end_to_end_gradients_spot_check():
    rng = np.random.default_rng(9)
    n = 3
    g = _graph(rng, n)
    params = M.init_model(_tiny_hp(), n, seed=10, dtype=np.float64)
    x = T.Tensor(rng.normal(size=(1, 2, n, 2)))
    tod = T.Tensor(rng.uniform(0, 1, (1, 2, n, 1)))
    y = rng.normal(size=(1, 2, n))
    mask = (rng.random((1, 2, n)) < 0.8).astype(np.float64)
    mask[0, 0, 0] = 1.0  # keep the loss non-degenerate
    y_t = T.Tensor(y)
    m_t = T.Tensor(mask)

    def build():
        h, _ = M.encode(x, g, params)
        preds = M.decode(h, tod, g, params)
        err = T.absolute(preds - y_t) * m_t
        return err.sum() * (1.0 / mask.sum())

    named = dict(M.named_parameters(params))
    leaves = [named["encoder.gen.emb_src"], named["decoder.gen.emb_tgt"],
              named["encoder.z.fwd.w0"], named["decoder.h.bwd.w2"],
              named["encoder.gen.hyper_src.proj_w"], named["readout.w0"],
              named["readout.b0"]]
    M.zero_grads(params)
    loss = build()
    loss.backward()
    for leaf in leaves:
        fd = T.finite_diff_grad(lambda _t: build(), leaf)
        assert T.max_rel_err(leaf.grad, fd.data) < 1e-4


def test_hp_validation():
    with pytest.raises(ConfigError):
        _tiny_hp(hidden=0).validate()
    with pytest.raises(ConfigError):
        _tiny_hp(beta_mix=1.5).validate()
    with pytest.raises(ConfigError):
        _tiny_hp(hypernet="mlp").validate()
    with pytest.raises(ConfigError):
        M.init_model(_tiny_hp(), 1, seed=0)
