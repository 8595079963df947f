import numpy as np
import pytest

from inftrace.data import Dataset, Example, Vocab
from inftrace.model import (ModelConfig, Objective, TrainingDivergedError, accuracy, config_for, init_params,
                            loss_gradient, n_params, predict, predict_probs, train)
from inftrace.verify import fd_gradient


def test_parameter_count_small_model():
    # 5*2 embedding + 2*2+2 hidden + 2*2+2 output
    assert n_params(ModelConfig(vocab_size=5, d=2, hidden=2, num_classes=2)) == 22


def test_convex_mode_trains_output_layer_only():
    cfg = ModelConfig(vocab_size=5, d=3, num_classes=2, mode="convex")
    theta = init_params(cfg)
    assert theta.trainable == ("out_w", "out_b")
    assert theta.n_trainable == 3 * 2 + 2
    assert cfg.l2 == 1e-3
    assert ModelConfig(vocab_size=5).l2 == 0.0


def test_init_ranges():
    theta = init_params(ModelConfig(vocab_size=30, seed=3))
    for name in ("embedding", "hidden_w", "out_w"):
        assert np.all(np.abs(theta[name]) <= 0.1)
    assert not theta["hidden_b"].any() and not theta["out_b"].any()


def test_probabilities_sum_to_one(toy_mlp, toy):
    for z in toy[2].examples[:10]:
        p = predict_probs(z, toy_mlp.theta)
        assert p.sum() == pytest.approx(1.0, abs=1e-14) and np.all(p >= 0)


def test_empty_example_rejected(toy_mlp):
    with pytest.raises(ValueError, match="no tokens"):
        predict_probs(Example((), 0), toy_mlp.theta)


def test_gradient_matches_finite_differences(toy_mlp, toy):
    z = toy[0][0]
    obj = Objective(toy_mlp.theta, [z], 0.0)
    x = toy_mlp.theta.trainable_vector()
    fd = fd_gradient(lambda p: obj.loss_grad(p)[0], x)
    np.testing.assert_allclose(loss_gradient(z, toy_mlp.theta), fd, rtol=1e-5, atol=1e-9)


def test_training_reaches_planted_rule(toy_mlp, toy):
    assert accuracy(toy[2], toy_mlp.theta) >= 0.95
    assert accuracy(toy[1], toy_mlp.theta) >= 0.95


def test_training_loss_is_monotone(toy_mlp):
    h = np.array(toy_mlp.loss_history)
    assert np.all(np.diff(h) <= 0)


def test_training_is_bit_deterministic(toy):
    tr = toy[0].with_examples(toy[0].examples[:80])
    a = train(tr, config_for(tr, epochs=30))
    b = train(tr, config_for(tr, epochs=30))
    assert a.theta.data.tobytes() == b.theta.data.tobytes()


def test_convex_training_converges(convex200):
    _, _, ckpt = convex200
    assert ckpt.grad_norm < 1e-8


def test_convex_keeps_embeddings_frozen(convex200):
    train_set, _, ckpt = convex200
    init = init_params(ckpt.config)
    np.testing.assert_array_equal(ckpt.theta["embedding"], init["embedding"])


def test_predict_ties_go_to_lower_class():
    cfg = ModelConfig(vocab_size=3, d=2, mode="convex")
    theta = init_params(cfg)
    theta = theta.with_trainable(np.zeros(theta.n_trainable))
    assert predict([Example((1, 2), 1)], theta)[0] == 0


def test_accuracy_of_empty_set_raises(toy_mlp):
    with pytest.raises(ValueError):
        accuracy([], toy_mlp.theta)


def test_invalid_config():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, mode="deep")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, l2=-1)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=5, unk_id=5)


def test_train_rejects_out_of_range_labels():
    ds = Dataset([Example((1,), 2)], Vocab(["a"]))
    with pytest.raises(ValueError, match="label"):
        train(ds, config_for(ds))


def test_divergence_is_reported():
    ds = Dataset([Example((1,), 0), Example((2,), 1)], Vocab(["a", "b"]))
    cfg = config_for(ds)
    theta = init_params(cfg)
    data = theta.data.copy()
    data[theta.segments["out_b"][0]] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train(ds, cfg, init=type(theta)(data, dict(theta.segments), theta.trainable))
    with pytest.raises(ValueError, match="lr"):
        config_for(ds, lr=np.inf)
