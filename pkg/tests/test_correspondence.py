import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.draw import polygon

from clothfold.correspondence import (
    Featurizer,
    ViewPair,
    batch_loss,
    contrastive_grad,
    contrastive_loss,
    descriptor_map,
    harris_corners,
    match_correspondence,
    sample_pairs,
    train_descriptor,
)
from clothfold.sim import EnvConfig, random_views


def nearest_errors(found, truth):
    found = np.asarray(found, float)
    return [np.min(np.linalg.norm(found - t, axis=1)) for t in np.asarray(truth, float)]


# corners


def test_harris_rectangle():
    img = np.zeros((80, 80))
    img[20:50, 15:60] = 1.0
    res = harris_corners(img, count=4)
    truth = [(20, 15), (20, 59), (49, 15), (49, 59)]
    assert len(res.points) == 4 and not res.flagged
    assert max(nearest_errors(res.points, truth)) <= 1.0


def test_harris_rotated_rectangle():
    img = np.zeros((100, 100))
    ang = np.deg2rad(20)
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    corners = np.array([[-18, -28], [-18, 28], [18, 28], [18, -28]]) @ R.T + 50
    rr, cc = polygon(corners[:, 0], corners[:, 1], img.shape)
    img[rr, cc] = 1.0
    res = harris_corners(img, count=4)
    assert len(res.points) == 4
    assert max(nearest_errors(res.points, corners)) <= 1.5


def test_harris_uniform_flagged():
    res = harris_corners(np.full((30, 30), 0.3), count=4)
    assert res.points == [] and res.flagged


# loss


def test_contrastive_examples():
    d = np.array([0.1, -0.3, 0.2])
    assert contrastive_loss(d, d, True) == 0.0
    assert contrastive_loss(d, d + np.array([1.0, 0, 0]), False, xi=0.5) == 0.0
    assert contrastive_loss(d, d, False, xi=0.5) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros(3), np.zeros(4), True)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.floats(0.05, 3.0))
def test_contrastive_nonnegative_and_hinge(seed, match, xi):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=8), rng.normal(size=8)
    loss = contrastive_loss(a, b, match, xi)
    assert loss >= 0
    if not match:
        assert (loss == 0.0) == (np.linalg.norm(a - b) >= xi)


def central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_contrastive_gradient_both_branches():
    rng = np.random.default_rng(0)
    for match in (True, False):
        for _ in range(20):
            a = rng.normal(size=16) * 0.1
            b = a + rng.normal(size=16) * (0.05 if not match else 0.3)
            ga, gb = contrastive_grad(a, b, match, 0.5)
            num = central_grad(lambda x: contrastive_loss(x, b, match, 0.5), a)
            assert np.linalg.norm(ga - num) <= 1e-5 * max(np.linalg.norm(num), 1e-12)
            assert np.array_equal(gb, -ga)


# matching


def test_match_self_returns_query():
    D = np.random.default_rng(1).normal(size=(12, 10, 4))
    for pt in [(0, 0), (5, 7), (11, 9)]:
        assert match_correspondence(D, pt, D).pixel == pt


def test_match_constant_map_tie_rule():
    D = np.ones((6, 6, 3))
    res = match_correspondence(D, (3, 4), D)
    assert res.pixel == (0, 0) and res.degenerate


def test_match_out_of_bounds():
    D = np.zeros((4, 4, 2))
    with pytest.raises(IndexError):
        match_correspondence(D, (4, 0), D)


def test_match_deterministic():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(9, 9, 3)), rng.normal(size=(9, 9, 3))
    assert match_correspondence(A, (2, 3), B) == match_correspondence(A, (2, 3), B)


# training


@pytest.fixture(scope="module")
def view_pairs():
    rng = np.random.default_rng(0)
    cfg = EnvConfig()
    return [random_views(cfg, rng, size=64).view_pair() for _ in range(6)]


def test_train_zero_steps_unchanged(view_pairs):
    f = Featurizer.init(2, 8, 0)
    assert train_descriptor(view_pairs, f, steps=0) is f


def test_train_no_shared_correspondence_errors():
    img = np.random.default_rng(0).random((16, 16, 3))
    nan = np.full((16, 16, 3), np.nan)
    pair = ViewPair(img, img, nan, nan, lambda X: np.asarray(X)[:, :2])
    with pytest.raises(ValueError):
        train_descriptor([pair], Featurizer.init(2, 4, 0), steps=3)


def test_train_reduces_loss_and_separates(view_pairs):
    train, held = view_pairs[:4], view_pairs[4:]
    f0 = Featurizer.init(2, 8, 0)
    rng = np.random.default_rng(9)
    batches = [sample_pairs(held, rng) for _ in range(6)]
    losses = []
    f1 = train_descriptor(train, f0, steps=120, callback=lambda it, f: losses.append(batch_loss(f, held, batches)) if it % 20 == 19 else None)
    before, after = batch_loss(f0, held, batches), batch_loss(f1, held, batches)
    assert after < before
    assert all(l <= 1.05 * before for l in losses)

    def mean_dist(f, match):
        out = []
        for b in batches:
            p = held[b.pair_index[0]]
            DA, DB = f.describe(p.image_a, b.pa), f.describe(p.image_b, b.pb)
            d = np.linalg.norm(DA - DB, axis=1)
            out.append(d[b.match == match])
        return np.concatenate(out).mean()

    assert mean_dist(f1, True) < mean_dist(f1, False)
    assert f1.trained and np.all(np.isfinite(f1.projection))


def test_descriptor_map_shape_and_determinism(view_pairs):
    f = Featurizer.init(2, 8, 3)
    img = view_pairs[0].image_a
    D = descriptor_map(img, f)
    assert D.shape == img.shape[:2] + (8,)
    assert np.array_equal(D, descriptor_map(img, f))
    assert np.array_equal(Featurizer.from_record(f.to_record()).projection, f.projection)
