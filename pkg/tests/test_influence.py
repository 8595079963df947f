import numpy as np
import pytest

from inftrace.data import UNK_ID, Example
from inftrace.ihvp import IhvpConfig, assemble_hessian
from inftrace.influence import (GradientCache, Influence, Target, influence_on_params, rank_training_examples,
                                saliency_target, top_salient_target)
from inftrace.model import Objective, train
from inftrace.saliency import saliency_score

EXACT0 = IhvpConfig(method="exact", damping=0.0)


@pytest.fixture(scope="module")
def setup(convex200):
    train_set, test, ckpt = convex200
    inf = Influence.from_checkpoint(ckpt, train_set, EXACT0)
    z = test[0]
    return train_set, test, ckpt, inf, top_salient_target(z, z.label, ckpt.theta, test_id=0)


def score(target, theta):
    return saliency_score(target.example, target.position, target.label, theta)


def test_transposition_identity(setup):
    train_set, _, _, inf, target = setup
    for z in train_set.examples[:10]:
        a = inf.on_params(z) @ target.gradient
        b = inf.value(z, target)
        assert abs(a - b) <= 1e-8 * max(1.0, abs(a))


def test_identity_hessian_gives_negative_gradient(setup):
    train_set, _, ckpt, _, _ = setup
    inf = Influence.from_checkpoint(ckpt, train_set)
    inf._solver = lambda v: v
    z = train_set[3]
    np.testing.assert_array_equal(inf.on_params(z), -inf.grad(z))


def test_zero_target_gradient_gives_zero(setup):
    train_set, _, ckpt, inf, target = setup
    zero = Target("saliency", target.example, target.position, target.label, np.zeros_like(target.gradient))
    assert not inf.scores(zero).any()


def test_duplicates_score_identically(setup):
    train_set, _, ckpt, _, target = setup
    dup = train_set.with_examples(list(train_set.examples) + [train_set[5]])
    inf = Influence.from_checkpoint(ckpt, dup, EXACT0)
    vals = inf.scores(target)
    assert vals[5] == vals[-1]


def test_rank_full_is_permutation_sorted_by_value(setup):
    train_set, _, _, inf, target = setup
    ranked = inf.rank(target, len(train_set))
    assert sorted(r.train_id for r in ranked) == list(range(len(train_set)))
    vals = [r.value for r in ranked]
    assert vals == sorted(vals, reverse=True)
    assert inf.rank(target, 0) == []
    with pytest.raises(ValueError):
        inf.rank(target, len(train_set) + 1)


def test_rank_by_magnitude(setup):
    _, _, _, inf, target = setup
    mags = [abs(r.value) for r in inf.rank(target, 20, by_magnitude=True)]
    assert mags == sorted(mags, reverse=True)


def test_functional_forms_agree(setup):
    train_set, _, ckpt, inf, target = setup
    z = train_set[0]
    np.testing.assert_array_equal(influence_on_params(z, train_set, ckpt.theta, EXACT0, ckpt.config.l2),
                                  inf.on_params(z))
    top = rank_training_examples(target, train_set, ckpt.theta, EXACT0, k=3, l2=ckpt.config.l2)
    assert [r.train_id for r in top] == [r.train_id for r in inf.rank(target, 3)]


def upweighted_optimum(ckpt, train_set, z, eps):
    """Newton minimiser of mean loss + eps * loss(z) started at the trained point."""
    theta = ckpt.theta
    full = Objective(theta, train_set.examples, ckpt.config.l2)
    one = Objective(theta, [z], 0.0)
    p = theta.trainable_vector()
    for _ in range(8):
        t = theta.with_trainable(p)
        g = full.loss_grad(p)[1] + eps * one.loss_grad(p)[1]
        H = (assemble_hessian(t, train_set.examples, ckpt.config.l2)
             + eps * assemble_hessian(t, [z], 0.0))
        p = p - np.linalg.solve(H, g)
    return theta.with_trainable(p)


def test_upweighting_oracle_top_points(setup):
    train_set, _, ckpt, inf, target = setup
    eps = 1e-3
    for r in inf.rank(target, 5, by_magnitude=True):
        z = train_set[r.train_id]
        up = score(target, upweighted_optimum(ckpt, train_set, z, eps))
        down = score(target, upweighted_optimum(ckpt, train_set, z, -eps))
        fd = (up - down) / (2 * eps)
        assert abs(fd - r.value) / abs(fd) < 0.10


def test_substitution_sign_matches_retraining(setup):
    train_set, _, ckpt, inf, target = setup
    rng = np.random.default_rng(7)
    V = ckpt.config.vocab_size
    s0 = score(target, ckpt.theta)
    agree = 0
    ids = rng.choice(len(train_set), size=50, replace=False)
    for i in ids:
        z = train_set[int(i)]
        pos = int(rng.integers(len(z.tokens)))
        new = int(rng.integers(1, V))
        while new == z.tokens[pos]:
            new = int(rng.integers(1, V))
        z_new = z.substitute(pos, new)
        pred = inf.perturbation(z, z_new, target).value
        corpus = train_set.with_examples([z_new if j == i else x for j, x in enumerate(train_set)])
        actual = score(target, train(corpus, ckpt.config, init=ckpt.theta).theta) - s0
        agree += np.sign(pred) == np.sign(actual)
    assert agree / 50 >= 0.8


def test_perturbation_validation(setup):
    train_set, _, _, inf, target = setup
    z = train_set[0]
    with pytest.raises(ValueError, match="label"):
        inf.perturbation(z, Example(z.tokens, 1 - z.label), target)
    with pytest.raises(ValueError, match="length"):
        inf.perturbation(z, Example(z.tokens + (1,), z.label), target)
    rec = inf.perturbation(z, z.substitute(0, 7 if z.tokens[0] != 7 else 8), target)
    assert rec.substitution[0] == 0


def test_token_already_unknown_is_zero(setup):
    _, _, _, inf, target = setup
    z = Example((UNK_ID, 3, 4), 0)
    assert inf.token(z, 0, target).value == 0.0
    prof = inf.token_profile(z, target)
    assert prof[0] == 0.0 and len(prof) == 3
    with pytest.raises(IndexError):
        inf.token(z, 3, target)


def test_token_influence_definition(setup):
    train_set, _, _, inf, target = setup
    z = train_set[1]
    expected = inf.value(z, target) - inf.value(z.substitute(1, UNK_ID), target)
    assert inf.token(z, 1, target).value == expected
    assert inf.token_profile(z, target)[1] == expected


def test_target_validation(setup):
    _, test, ckpt, _, _ = setup
    with pytest.raises(ValueError):
        Target("loss")
    with pytest.raises(ValueError):
        Target("saliency")
    t = saliency_target(test[1], 0, 0, ckpt.theta)
    assert t.kind == "saliency" and t.gradient.shape == (ckpt.theta.n_trainable,)


def test_target_direction_recomputed_when_gradient_replaced(setup):
    _, _, _, inf, target = setup
    t = Target("saliency", target.example, target.position, target.label, target.gradient.copy())
    u1 = inf.target_direction(t)
    t.gradient = 2 * t.gradient
    np.testing.assert_allclose(inf.target_direction(t), 2 * u1, rtol=1e-12)


def test_gradient_cache_disk_roundtrip(tmp_path, convex200):
    train_set, _, ckpt = convex200
    a = GradientCache(ckpt.theta, ckpt.config.l2, tmp_path)
    g = a(train_set[0])
    assert a.misses == 1 and a(train_set[0]) is g and a.hits == 1
    b = GradientCache(ckpt.theta, ckpt.config.l2, tmp_path)
    assert b(train_set[0]).tobytes() == g.tobytes() and b.misses == 0
    assert len(list(tmp_path.glob("*.npy"))) == 1
