import inspect

import numpy as np
import pytest

from conftest import assert_grad_close, central_diff
from langprior import losses
from langprior.datagen import Dataset, SyntheticConfig, generate
from langprior.net import (
    GROUPS,
    ModelParams,
    TrainConfig,
    TrainingDivergence,
    TrainingTrace,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict,
    predict_batch,
    save_checkpoint,
    train,
)
from langprior.rescale import build_weight_table


def toy_params(rng, q_dim=3, v_dim=5, na=4, mask=True, h=(4, 5, 6)):
    cfg = TrainConfig(h_q=h[0], h_v=h[1], h_f=h[2], use_mask=mask, seed=int(rng.integers(1 << 30)))
    p = init_params(q_dim, v_dim, na, cfg)
    # shift biases so few pre-activations sit near the ReLU kink
    for name in ("q_encoder", "v_encoder", "fusion"):
        p.groups[name]["b"] += 0.3
    return p


def zero_params(q_dim, v_dim, na):
    cfg = TrainConfig(h_q=2, h_v=2, h_f=2)
    p = init_params(q_dim, v_dim, na, cfg)
    for d in p.groups.values():
        for a in d.values():
            a[...] = 0.0
    return p


def tiny_data(n=64, seed=0, **kw):
    cfg = dict(num_types=2, answers_per_type=2, train_size=n, test_size=n, q_dim=2, v_dim=4,
               visual_noise=0.0, seed=seed)
    cfg.update(kw)
    return generate(SyntheticConfig(**cfg))


def test_forward_zero_weights():
    p = zero_params(3, 4, 5)
    c = forward(np.ones((2, 3)), np.ones((2, 4)), p)
    np.testing.assert_array_equal(c.logits, np.zeros((2, 5)))
    np.testing.assert_array_equal(losses.sigmoid(c.logits), np.full((2, 5), 0.5))


def test_forward_hand_computed():
    g = {
        "q_encoder": {"W": np.array([[2.0]]), "b": np.array([1.0])},
        "v_encoder": {"W": np.array([[-1.0]]), "b": np.array([0.5])},
        "fusion": {"W": np.array([[1.0, 3.0]]), "b": np.array([-0.5])},
        "classifier": {"W": np.array([[2.0], [-1.0]]), "b": np.array([0.0, 1.0])},
    }
    p = ModelParams(g)
    c = forward([[1.5]], [[0.25]], p)
    # h_q = relu(2*1.5+1) = 4; h_v = relu(-0.25+0.5) = 0.25
    # h_f = relu(4 + 0.75 - 0.5) = 4.25; logits = [8.5, -3.25]
    np.testing.assert_allclose(c.logits, [[8.5, -3.25]], atol=1e-15)
    c = forward([[1.5]], [[1.0]], p)  # h_v clipped to 0
    np.testing.assert_allclose(c.logits, [[7.0, -2.5]], atol=1e-15)


def test_forward_preserves_order(rng):
    p = toy_params(rng)
    q, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
    full = forward(q, v, p).logits
    for k in range(6):
        np.testing.assert_allclose(forward(q[k:k + 1], v[k:k + 1], p).logits[0], full[k], rtol=1e-14)


def test_forward_shape_mismatch(rng):
    p = toy_params(rng)
    with pytest.raises(ValueError):
        forward(np.ones((2, 4)), np.ones((2, 5)), p)


def test_backward_zero_upstream(rng):
    p = toy_params(rng)
    c = forward(rng.normal(size=(3, 3)), rng.normal(size=(3, 5)), p)
    grads = backward(c, p, np.zeros((3, 4)), np.zeros((3, 4)))
    for d in grads.values():
        for a in d.values():
            assert not a.any()


def _full_loss(p, q, v, a, mu, m_a):
    c = forward(q, v, p)
    cls = losses.soft_ce(c.logits, a, mu)
    from langprior.mask import mask_loss
    ml = mask_loss(c.m, m_a, p.mask_alpha)
    return c, cls, ml


def test_full_model_gradient_check():
    rng = np.random.default_rng(3)
    p = toy_params(rng)
    q, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 5))
    a = rng.dirichlet(np.ones(4), size=5)
    mu = rng.uniform(0.5, 5, size=(5, 4))
    m_a = (rng.random((5, 4)) < 0.6).astype(float)

    c, cls, ml = _full_loss(p, q, v, a, mu, m_a)
    grads = backward(c, p, cls.grad, ml.grad)

    def total(pp):
        _, cl, m = _full_loss(pp, q, v, a, mu, m_a)
        return float(np.sum(cl.loss) + np.sum(m.loss))

    for name in GROUPS:
        for key, arr in p.groups[name].items():
            def f(x, name=name, key=key):
                pp = p.copy()
                pp.groups[name][key] = x
                return total(pp)
            num = central_diff(f, arr, h=1e-5, order=4)
            assert_grad_close(grads[name][key], num, rtol=1e-5)


def test_duplicate_instance_doubles_gradient(rng):
    p = toy_params(rng, mask=False)
    q, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 5))
    a = np.array([[0.0, 1.0, 0.0, 0.0]])
    c1 = forward(q, v, p)
    g1 = backward(c1, p, losses.soft_ce(c1.logits, a).grad)
    c2 = forward(np.repeat(q, 2, 0), np.repeat(v, 2, 0), p)
    g2 = backward(c2, p, losses.soft_ce(c2.logits, np.repeat(a, 2, 0)).grad)
    for name in g1:
        for key in g1[name]:
            np.testing.assert_allclose(g2[name][key], 2 * g1[name][key], rtol=1e-14)


def test_train_lr_zero_keeps_params():
    data = tiny_data()
    cfg = TrainConfig(lr=0.0, mask_lr=0.0, epochs_finetune=2, use_mask=True, epochs_mask_pretrain=2)
    table = data.train.count_table(data.types)
    start = init_params(2, 4, 4, cfg)
    end, trace = train(data.train, cfg, None, table, params=start)
    for name in start.groups:
        for key in start.groups[name]:
            np.testing.assert_array_equal(start.groups[name][key], end.groups[name][key])
    assert len(trace) > 0


def test_train_memorizes_single_instance():
    data = tiny_data(n=1)
    cfg = TrainConfig(epochs_finetune=400, batch_size=1, lr=0.1)
    params, trace = train(data.train, cfg)
    assert trace.rows[-1]["cls"] < 1e-2
    assert predict(data.train[0], params) == data.train.majority()[0]


def test_train_deterministic():
    data = tiny_data(n=96, visual_noise=0.3)
    table = data.train.count_table(data.types)
    weights = build_weight_table(table)
    cfg = TrainConfig(use_rescale=True, use_mask=True, epochs_finetune=3, epochs_mask_pretrain=2,
                      dropout_rate=0.2, seed=5)
    a, ta = train(data.train, cfg, weights, table)
    b, tb = train(data.train, cfg, weights, table)
    assert ta.rows == tb.rows
    for name in a.groups:
        for key in a.groups[name]:
            assert a.groups[name][key].tobytes() == b.groups[name][key].tobytes()


def test_train_phases_and_trace():
    data = tiny_data(n=64)
    table = data.train.count_table(data.types)
    cfg = TrainConfig(use_mask=True, epochs_finetune=2, epochs_mask_pretrain=3, batch_size=16)
    _, trace = train(data.train, cfg, None, table)
    phases = trace.column("phase")
    assert (phases == 1).sum() == 3 * 4 and (phases == 2).sum() == 2 * 4
    assert np.all(np.diff(trace.column("iter")) == 1)
    # phase 1 only moves the mask
    for r in trace.rows:
        if r["phase"] == 1:
            assert r["norms"]["classifier"] == 0.0 and r["norms"]["mask"] > 0


def test_mask_pretrain_patience_stops():
    data = tiny_data(n=64)
    table = data.train.count_table(data.types)
    cfg = TrainConfig(use_mask=True, epochs_finetune=0, mask_patience=2, mask_min_improvement=0.5,
                      mask_max_epochs=40)
    _, trace = train(data.train, cfg, None, table)
    assert trace.rows[-1]["epoch"] + 1 < 40


def test_train_argument_checks():
    data = tiny_data()
    table = data.train.count_table(data.types)
    with pytest.raises(ValueError):
        train(data.train, TrainConfig(use_rescale=True))
    with pytest.raises(ValueError):
        train(data.train, TrainConfig(), build_weight_table(table))
    with pytest.raises(ValueError):
        train(data.train, TrainConfig(use_mask=True))
    with pytest.raises(ValueError):
        train(data.train, TrainConfig(loss_kind="hinge"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_iteration():
    data = tiny_data(n=32, visual_noise=0.5)
    with pytest.raises(TrainingDivergence) as err:
        train(data.train, TrainConfig(lr=1e200, epochs_finetune=5, batch_size=8))
    assert err.value.iteration >= 0
    assert "iteration" in str(err.value)


def test_predict_argmax_and_ties():
    p = zero_params(1, 1, 3)
    p.groups["classifier"]["b"][:] = [1.0, 3.0, 2.0]
    assert predict_batch([[0.0]], [[0.0]], p)[0] == 1
    p.groups["classifier"]["b"][:] = 0.0
    assert predict_batch([[0.0]], [[0.0]], p)[0] == 0


def test_predict_with_mask_breaks_tie():
    p = zero_params(1, 1, 2)
    p.groups["mask"] = {"W": np.array([[-40.0], [40.0]])}  # mask ~[eps, 1]
    assert predict_batch([[1.0]], [[0.0]], p)[0] == 1


def test_predict_never_takes_weight_table():
    for fn in (predict, predict_batch):
        names = set(inspect.signature(fn).parameters)
        assert not names & {"weight_table", "weights", "mu"}


def test_checkpoint_round_trip(tmp_path, rng):
    p = toy_params(rng)
    save_checkpoint(tmp_path / "m.json", p, answers=list("abcd"), types=["x"])
    q, obj = load_checkpoint(tmp_path / "m.json")
    assert obj["answers"] == list("abcd")
    for name in p.groups:
        for key in p.groups[name]:
            assert p.groups[name][key].tobytes() == q.groups[name][key].tobytes()


def test_trace_csv_round_trip(tmp_path):
    data = tiny_data(n=32)
    _, trace = train(data.train, TrainConfig(epochs_finetune=1, batch_size=8))
    trace.write_csv(tmp_path / "trace.csv")
    back = TrainingTrace.read_csv(tmp_path / "trace.csv")
    assert back.rows == trace.rows


def test_dataset_shapes_checked():
    with pytest.raises(ValueError):
        Dataset([0, 1], np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)))
