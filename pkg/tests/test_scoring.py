import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invcascade.featmap import PyramidSpec
from invcascade.geometry import iou_matrix
from invcascade.scoring import (
    LinearModel, LinearObjectness, MiningConfig, TrainConfig, hinge_objective, mine_samples,
    normalize_scores, score, score_batch, train_linear,
)
from invcascade.windowing import ShapeBank, sliding_windows

cp = pytest.importorskip("cvxpy")


def toy_problem(seed, n=50, d=5):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(1, 1, (n // 2, d)), rng.normal(-1, 1, (n - n // 2, d))])
    y = np.r_[np.ones(n // 2), -np.ones(n - n // 2)]
    return X, y


def cvx_optimum(X, y, C=1.0, regularize_bias=False):
    w = cp.Variable(X.shape[1])
    b = cp.Variable()
    reg = 0.5 * cp.sum_squares(w) + (0.5 * cp.square(b) if regularize_bias else 0)
    prob = cp.Problem(cp.Minimize(reg + C * cp.sum(cp.pos(1 - cp.multiply(y, X @ w + b)))))
    prob.solve()
    return prob.value


# -- mining -------------------------------------------------------------------

def test_mining_config_validation():
    with pytest.raises(ValueError):
        MiningConfig(pos_iou=0.3, neg_iou=0.5)
    with pytest.raises(ValueError):
        MiningConfig(pos_per_object=-1)


def test_mining_without_gt():
    cand = sliding_windows(6, 6, ShapeBank(((2, 2),)))[0]
    pos, neg = mine_samples(cand, np.zeros((0, 4)), MiningConfig(neg_per_image=1000))
    assert len(pos) == 0 and len(neg) == len(cand)


def test_mining_exact_candidate_is_positive():
    cand = np.array([[0, 0, 2, 2], [5, 5, 8, 8], [0, 5, 1, 6]], float)
    pos, _ = mine_samples(cand, np.array([[5, 5, 8, 8]], float))
    np.testing.assert_array_equal(pos, [[5, 5, 8, 8]])


def test_mining_membership_oracle(rng):
    cand = sliding_windows(20, 20, ShapeBank(((3, 3), (4, 6), (6, 4), (8, 8))))[0]
    gt = np.array([[2, 2, 6, 7], [10, 9, 17, 17]], float)
    cfg = MiningConfig(pos_per_object=5, neg_per_image=40)
    pos, neg = mine_samples(cand, gt, cfg, rng)
    assert 0 < len(pos) <= 10 and len(neg) == 40
    for p in pos:
        assert max(iou_matrix([p], gt)[0]) > 0.7
    for q in neg:
        assert max(iou_matrix([q], gt)[0]) < 0.3
    assert len({tuple(p) for p in pos}) == len(pos)
    assert len({tuple(q) for q in neg}) == len(neg)


def test_mining_seeded():
    cand = sliding_windows(15, 15, ShapeBank(((3, 3), (5, 5))))[0]
    gt = np.array([[2, 2, 7, 7]], float)
    a = mine_samples(cand, gt, MiningConfig(seed=4))
    b = mine_samples(cand, gt, MiningConfig(seed=4))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- training -------------------------------------------------------------------

def test_train_errors():
    with pytest.raises(ValueError):
        train_linear(np.zeros((0, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        train_linear(np.ones((2, 3)), np.full((2, 3), np.nan))
    with pytest.raises(ValueError):
        TrainConfig(solver="newton")


def test_separable_toy_reaches_zero_loss():
    pos = np.array([[2.0, 2.0], [3.0, 1.5], [2.5, 3.0]])
    neg = np.array([[-2.0, -1.0], [-1.5, -3.0], [-3.0, -2.0]])
    for solver in ("sgd", "dcd"):
        cfg = TrainConfig(epochs=200, solver=solver)
        m = train_linear(pos, neg, cfg)
        X = np.vstack([pos, neg])
        y = np.r_[np.ones(3), -np.ones(3)]
        margins = y * (X @ m.weights + m.bias)
        assert np.all(margins >= 0)
        assert np.clip(1 - margins, 0, None).sum() == pytest.approx(0.0, abs=1e-6)


def test_train_deterministic():
    X, y = toy_problem(3)
    a = train_linear(X[y > 0], X[y < 0], TrainConfig(seed=5))
    b = train_linear(X[y > 0], X[y < 0], TrainConfig(seed=5))
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


@pytest.mark.parametrize("seed", range(4))
def test_sgd_objective_within_one_percent(seed):
    X, y = toy_problem(seed)
    # converged schedule; the 30-epoch default trades optimality for speed
    cfg = TrainConfig(epochs=2000, rate0=0.5, decay=1e-2)
    m = train_linear(X[y > 0], X[y < 0], cfg)
    opt = cvx_optimum(X, y)
    assert hinge_objective(m.weights, m.bias, X, y, 1.0) <= 1.01 * opt


@pytest.mark.parametrize("seed", range(4))
def test_dcd_objective_matches_convex_solver(seed):
    X, y = toy_problem(seed)
    m = train_linear(X[y > 0], X[y < 0], TrainConfig(solver="dcd"))
    opt = cvx_optimum(X, y, regularize_bias=True)
    val = hinge_objective(m.weights, m.bias, X, y, 1.0) + 0.5 * m.bias ** 2
    assert val <= 1.01 * opt


def test_duplicated_data_half_c_same_model():
    X, y = toy_problem(11, n=40)
    cfg = TrainConfig(solver="dcd", C=1.0, tol=1e-12, max_iter=20000)
    a = train_linear(X[y > 0], X[y < 0], cfg)
    X2 = np.vstack([X, X])
    y2 = np.r_[y, y]
    b = train_linear(X2[y2 > 0], X2[y2 < 0],
                     TrainConfig(solver="dcd", C=0.5, tol=1e-12, max_iter=20000))
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-6)
    assert a.bias == pytest.approx(b.bias, abs=1e-6)


# -- models and scoring -----------------------------------------------------------

def test_linear_model_channels():
    m = LinearModel(np.zeros(8 * 5 + 3), 0.0, pyramid=PyramidSpec((1, 2)))
    assert m.channels == 8
    assert m.descriptor_length(8) == 43
    with pytest.raises(ValueError):
        _ = LinearModel(np.zeros(7), 0.0, pyramid=PyramidSpec((1, 2))).channels
    with pytest.raises(ValueError):
        LinearModel(np.array([np.inf]), 0.0)


def test_score_examples():
    assert score(LinearModel(np.zeros(4), 0.3), [1, 2, 3, 4]) == pytest.approx(0.3)
    w = np.zeros(4)
    w[2] = 1
    assert score(LinearModel(w, 0.5), [1, 2, 3, 4]) == pytest.approx(3.5)
    with pytest.raises(ValueError):
        score(LinearModel(np.zeros(4), 0.0), [1, 2])
    with pytest.raises(ValueError):
        score_batch(LinearModel(np.zeros(4), 0.0), np.zeros((3, 5)))


def test_batch_equals_serial(rng):
    m = LinearModel(rng.normal(size=10), 0.7)
    D = rng.normal(size=(1000, 10))
    batch = score_batch(m, D)
    np.testing.assert_allclose(batch, [score(m, d) for d in D], rtol=1e-12, atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=10, max_size=10), st.floats(0.1, 10))
@settings(max_examples=30)
def test_score_linear_without_bias(x, a):
    m = LinearModel(np.linspace(-1, 1, 10), 0.4)
    x = np.asarray(x)
    assert score(m, a * x) - m.bias == pytest.approx(a * (score(m, x) - m.bias), abs=1e-9)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_scores([-2, 0, 2]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_scores([3.0, 3.0]), [1.0, 1.0])
    with pytest.raises(ValueError):
        normalize_scores([])


def test_normalize_preserves_order(rng):
    s = rng.normal(size=1000)
    n = normalize_scores(s)
    np.testing.assert_array_equal(np.argsort(s, kind="stable"), np.argsort(n, kind="stable"))
    assert n.min() == 0.0 and n.max() == 1.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True))
def test_normalize_strict_order_property(s):
    n = normalize_scores(s)
    for i in range(len(s)):
        for j in range(len(s)):
            if s[i] < s[j]:
                assert n[i] <= n[j]
    assert np.all((0 <= n) & (n <= 1))


def test_estimator_api():
    X, y = toy_problem(2)
    labels = np.where(y > 0, "obj", "bg")
    est = LinearObjectness(epochs=50)
    assert est.get_params()["epochs"] == 50
    est.fit(X, labels)
    assert set(est.classes_) == {"bg", "obj"}
    assert (est.predict(X) == labels).mean() > 0.85
    model = est.to_model(scale_id=2, size_bias=False)
    np.testing.assert_allclose(score_batch(model, X), est.decision_function(X))
    with pytest.raises(ValueError):
        est.fit(X, np.zeros(len(X)))
