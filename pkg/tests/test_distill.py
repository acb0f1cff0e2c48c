import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relsnap.distill import (
    DistillConfig,
    DistillMlp,
    embed,
    hard_loss,
    mlp_forward_backward,
    soft_loss,
    soften,
    total_loss,
    train_distill_mlp,
)
from relsnap.features import FeatureVector, TabularDataset
from relsnap.gbdt import GbdtConfig, train_gbdt
from relsnap.metrics import agreement_rocauc, mae, rocauc
from relsnap.optim import Adam

from oracles import finite_difference_check, pairwise_auc

BIN, REG = "binary-classification", "regression"


def separable(seed, n=600, d=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] - 0.3 * X[:, 2] + 0.4 * rng.normal(size=n) > 0).astype(float)
    return X, y


# -- soften ---------------------------------------------------------------


def test_soften_half_is_uniform():
    for F in (1.0, 2.0, 7.5):
        assert soften(0.5, F) == pytest.approx([0.5, 0.5], abs=1e-15)


def test_soften_identity_at_unit_temperature():
    p = np.array([0.01, 0.3, 0.77, 0.999])
    out = soften(p, 1.0)
    np.testing.assert_allclose(out, np.stack([1 - p, p], axis=1), atol=1e-12)


def test_soften_at_temperature_two():
    a, b = math.sqrt(0.1), math.sqrt(0.9)
    assert soften(0.9, 2.0) == pytest.approx([a / (a + b), b / (a + b)], abs=1e-12)
    assert soften(0.9, 2.0) == pytest.approx([0.25, 0.75], abs=1e-12)


def test_soften_rejects_bad_input():
    with pytest.raises(ValueError):
        soften(np.nan, 2.0)
    with pytest.raises(ValueError):
        soften(0.3, 0.5)


@given(p=st.floats(0.0, 1.0), q=st.floats(0.0, 1.0), F=st.floats(1.0, 50.0))
def test_soften_sums_to_one_and_is_monotone(p, q, F):
    a, b = soften(p, F), soften(q, F)
    assert a.sum() == pytest.approx(1.0, abs=1e-9)
    assert ((0 < a) & (a < 1)).all()
    if p < q:
        assert a[1] <= b[1]


@given(p=st.floats(0.01, 0.99))
def test_soften_flattens_at_large_temperature(p):
    assert np.abs(soften(p, 1e4) - 0.5).max() < 1e-3


# -- losses ---------------------------------------------------------------


def test_hard_loss_examples():
    assert hard_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1])) == 0.0
    n = 7
    assert hard_loss(np.full((n, 2), 0.5), np.arange(n) % 2) == pytest.approx(n * math.log(2))
    assert hard_loss(np.array([[0.2, 0.8]]), np.array([1])) == pytest.approx(-math.log(0.8))
    assert hard_loss(np.array([[0.2, 0.8]]), np.array([1])) == pytest.approx(0.2231, abs=1e-4)
    assert hard_loss(np.array([1.0, 3.0]), np.array([2.0, 2.0])) == 1.0
    with pytest.raises(ValueError):
        hard_loss(np.full((3, 2), 0.5), np.array([0, 1]))


def test_soft_loss_examples():
    t = np.array([[0.25, 0.75]])
    entropy = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert soft_loss(t, t) == pytest.approx(entropy)
    assert soft_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == pytest.approx(math.log(2))
    val = soft_loss(np.array([[0.4, 0.6]]), t)
    assert val == pytest.approx(-(0.25 * math.log(0.4) + 0.75 * math.log(0.6)))
    assert val == pytest.approx(0.6122, abs=1e-4)
    with pytest.raises(ValueError):
        soft_loss(np.ones((2, 2)) / 2, np.ones((3, 2)) / 2)


@given(s=st.floats(0.001, 0.999))
def test_soft_loss_minimised_at_the_teacher(s):
    t = np.array([[0.25, 0.75]])
    assert soft_loss(np.array([[1 - s, s]]), t) >= soft_loss(t, t) - 1e-12


def test_total_loss_examples():
    assert total_loss(1.7, 9.0, 1.0, 3.0) == 1.7
    assert total_loss(1.7, 9.0, 0.0, 1.0) == 9.0
    assert total_loss(2.0, 0.5, 0.3, 2.0) == pytest.approx(2.0, abs=1e-12)


@given(h=st.floats(0, 100), s=st.floats(0, 100), k=st.floats(0, 10), a=st.floats(0, 1), F=st.floats(1, 5))
def test_total_loss_is_affine(h, s, k, a, F):
    base = total_loss(h, s, a, F)
    assert total_loss(h + k, s, a, F) == pytest.approx(base + a * k, rel=1e-12, abs=1e-9)
    assert total_loss(h, s + k, a, F) == pytest.approx(base + (1 - a) * F * F * k, rel=1e-12, abs=1e-9)


# -- model and gradients ----------------------------------------------------


def small_mlp(task=BIN, seed=0, dropout=0.0, hidden=(6, 5), n_in=4):
    cfg = DistillConfig(hidden=hidden, embedding_dim=3, dropout=dropout)
    rng = np.random.default_rng(seed)
    mlp = DistillMlp.init(n_in, cfg, task, rng, rng.normal(size=n_in), rng.uniform(0.5, 2, n_in))
    for k, v in mlp.params.items():
        if k.startswith("b"):
            v += rng.normal(scale=0.1, size=v.shape)
    return mlp


@pytest.mark.parametrize("task, dropout", [(BIN, 0.0), (BIN, 0.3), (REG, 0.0)])
def test_gradients_match_finite_differences(task, dropout):
    mlp = small_mlp(task, dropout=dropout)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(12, 4))
    if task == BIN:
        y = (rng.random(12) > 0.5).astype(float)
        target = soften(rng.uniform(0.05, 0.95, 12), 2.0)
    else:
        mlp.y_mean, mlp.y_scale = 1.5, 2.0
        y = rng.normal(size=12)
        target = rng.normal(size=12)

    def run():
        # fresh generator per call so dropout masks agree across probes
        return mlp_forward_backward(mlp, X, y, target, 0.4, 2.0, train=dropout > 0,
                                    rng=np.random.default_rng(5))

    _, grads = run()
    assert finite_difference_check(lambda: run()[0], mlp.params, grads, n_probe=100) < 1e-4


def test_zero_learning_rate_leaves_parameters():
    mlp = small_mlp()
    before = {k: v.copy() for k, v in mlp.params.items()}
    rng = np.random.default_rng(2)
    X = rng.normal(size=(8, 4))
    _, g = mlp_forward_backward(mlp, X, np.ones(8), soften(np.full(8, 0.3), 2.0), 0.5, 2.0)
    Adam(mlp.params, lr=0.0).step(g)
    assert all(np.array_equal(before[k], mlp.params[k]) for k in before)


def test_duplicated_batch_doubles_loss_and_gradients():
    mlp = small_mlp()
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 4))
    y = np.array([0, 1, 1, 0, 1, 0], float)
    t = soften(rng.uniform(0.1, 0.9, 6), 2.0)
    l1, g1 = mlp_forward_backward(mlp, X, y, t, 0.3, 2.0)
    l2, g2 = mlp_forward_backward(mlp, np.vstack([X, X]), np.concatenate([y, y]), np.vstack([t, t]), 0.3, 2.0)
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-12)


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        mlp_forward_backward(small_mlp(), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 2)), 0.5, 2.0)


def test_embedding_width_and_determinism():
    X, y = separable(0, n=200)
    teacher = train_gbdt(TabularDataset(X, y, BIN), GbdtConfig(n_rounds=10))
    mlp = train_distill_mlp(TabularDataset(X, y, BIN), teacher, DistillConfig(epochs=2))
    f = FeatureVector(X[0], (0, 1), 3)
    e = embed(mlp, f)
    assert e.shape == (10,)
    assert np.array_equal(e, embed(mlp, X[0].copy()))
    assert embed(mlp, X[:4]).shape == (4, 10)
    with pytest.raises(ValueError):
        embed(mlp, np.zeros(6))


def test_zero_trunk_embeds_to_zero():
    mlp = small_mlp()
    for k in mlp.params:
        if k[0] in "Wb" and k[1:].isdigit():
            mlp.params[k][:] = 0.0
    assert np.array_equal(embed(mlp, np.ones((3, 4))), np.zeros((3, 3)))


def test_training_is_bit_reproducible(tmp_path):
    X, y = separable(1, n=300)
    teacher = train_gbdt(TabularDataset(X, y, BIN), GbdtConfig(n_rounds=10))
    cfg = DistillConfig(epochs=3, seed=4)
    a = train_distill_mlp(TabularDataset(X, y, BIN), teacher, cfg)
    b = train_distill_mlp(TabularDataset(X, y, BIN), teacher, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    a.save(tmp_path / "m.json")
    back = DistillMlp.load(tmp_path / "m.json")
    assert np.array_equal(back.predict_soft(X), a.predict_soft(X))


def test_constant_teacher_fixed_point():
    X, y = separable(2, n=200)
    n = len(y)
    targets = soften(np.full(n, 0.5), 2.0)
    mlp = train_distill_mlp(TabularDataset(X, y, BIN), None,
                            DistillConfig(alpha=0.0, temperature=1.0, dropout=0.0, epochs=200, lr=0.1, lr_floor=0.0),
                            targets)
    _, _, soft_raw, _ = mlp.forward(X)
    z = soft_raw - soft_raw.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert soft_loss(probs, targets) == pytest.approx(n * math.log(2), abs=1e-3)


def test_agreement_on_separable_task():
    X, y = separable(3, n=1500)
    ds = TabularDataset(X, y, BIN)
    teacher = train_gbdt(ds, GbdtConfig(n_rounds=60))
    mlp = train_distill_mlp(ds, teacher)
    Xt, _ = separable(4, n=1000)
    assert agreement_rocauc(mlp.predict_soft(Xt), teacher.predict(Xt)) >= 0.95


def test_regression_soft_objective_is_teacher_mae():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 3))
    y = 40 + 10 * X[:, 0] + rng.normal(size=200)
    teacher = train_gbdt(TabularDataset(X, y, REG), GbdtConfig(n_rounds=30))
    mlp = train_distill_mlp(TabularDataset(X, y, REG), teacher, DistillConfig(alpha=0.0, temperature=1.0, epochs=30))
    t = teacher.predict(X)
    loss, _ = mlp_forward_backward(mlp, X, y, t, 0.0, 1.0)
    # the objective is measured in standardised target units
    assert loss * mlp.y_scale == pytest.approx(mae(mlp.predict_soft(X), t), rel=1e-10)
    assert mae(mlp.predict_soft(X), t) < 0.5 * mae(np.full(200, y.mean()), t)


def test_rejects_missing_teacher_and_mismatched_features():
    X, y = separable(6, n=50)
    with pytest.raises(ValueError):
        train_distill_mlp(TabularDataset(X, y, BIN), None)
    teacher = train_gbdt(TabularDataset(X[:, :3], y, BIN), GbdtConfig(n_rounds=2))
    with pytest.raises(ValueError):
        train_distill_mlp(TabularDataset(X, y, BIN), teacher)


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(temperature=0.5), dict(dropout=1.0), dict(epochs=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DistillConfig(**kw)


# -- alpha = 1 against a plain single-head network --------------------------


def single_head_mlp(X, y, hidden, lr, epochs, batch, seed):
    """Plain ReLU MLP with a sigmoid output and Adam, written from scratch."""
    rng = np.random.default_rng(seed + 1000)
    mu, sd = X.mean(0), X.std(0)
    X = (X - mu) / sd
    widths = [X.shape[1], *hidden, 1]
    W = [rng.normal(0, math.sqrt(2 / a), (a, b)) for a, b in zip(widths[:-1], widths[1:])]
    b = [np.zeros(w) for w in widths[1:]]
    params = W + b
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch):
            idx = order[s:s + batch]
            acts = [X[idx]]
            for k in range(len(W)):
                z = acts[-1] @ W[k] + b[k]
                acts.append(np.maximum(z, 0) if k < len(W) - 1 else z)
            p = 1 / (1 + np.exp(-acts[-1][:, 0]))
            d = (p - y[idx])[:, None]
            gW, gb = [None] * len(W), [None] * len(W)
            for k in reversed(range(len(W))):
                gW[k] = acts[k].T @ d
                gb[k] = d.sum(0)
                if k:
                    d = (d @ W[k].T) * (acts[k] > 0)
            step += 1
            for i, g in enumerate(gW + gb):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                params[i] -= lr * (m[i] / (1 - 0.9 ** step)) / (np.sqrt(v[i] / (1 - 0.999 ** step)) + 1e-8)

    def predict(Z):
        h = (Z - mu) / sd
        for k in range(len(W)):
            h = h @ W[k] + b[k]
            if k < len(W) - 1:
                h = np.maximum(h, 0)
        return h[:, 0]

    return predict


@pytest.mark.slow
def test_alpha_one_matches_a_plain_supervised_network():
    diffs = []
    for seed in range(5):
        X, y = separable(10 + seed, n=800)
        Xt, yt = separable(100 + seed, n=800)
        ds = TabularDataset(X, y, BIN)
        cfg = DistillConfig(alpha=1.0, dropout=0.0, epochs=20, lr=0.01, lr_floor=1.0, seed=seed)
        student = train_distill_mlp(ds, None, cfg, targets=soften(np.full(len(y), 0.5), 2.0))
        plain = single_head_mlp(X, y, (*cfg.hidden, cfg.embedding_dim), 0.01, 20, cfg.batch_size, seed)
        a, b = rocauc(student.predict_hard(Xt), yt), rocauc(plain(Xt), yt)
        assert a == pytest.approx(pairwise_auc(student.predict_hard(Xt), yt), abs=1e-12)
        diffs.append(a - b)
    assert abs(np.mean(diffs)) < 0.01
    assert max(abs(d) for d in diffs) < 0.03
