import json

import numpy as np
import pytest

from attention_geometry import training as T
from attention_geometry.errors import EmptyInputError
from attention_geometry.transformer import ModelConfig, forward, init_params


def test_tokenizer_vocab_and_round_trip():
    ids, tok = T.char_tokenizer("ab")
    assert tok.vocab_size == 3 and tok.mask_id == 2
    assert ids.tolist() == [0, 1]
    ids, tok = T.char_tokenizer("hello world")
    assert tok.decode(ids) == "hello world"
    assert tok.decode([tok.mask_id]) == "?"


def test_tokenizer_errors():
    with pytest.raises(EmptyInputError):
        T.char_tokenizer("")
    tok = T.CharTokenizer.from_text("abc")
    with pytest.raises(ValueError):
        tok.encode("abd")


def test_window_count():
    seq = np.arange(130)
    assert T.make_windows(seq, 64).shape == (2, 64)
    with pytest.raises(EmptyInputError):
        T.make_windows(np.arange(10), 64)


def test_batches_are_deterministic_per_seed():
    seq = np.arange(64 * 10)
    a = T.make_batches(seq, 64, 3, seed=1)
    b = T.make_batches(seq, 64, 3, seed=1)
    c = T.make_batches(seq, 64, 3, seed=2)
    assert len(a) == 3
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_mask_tokens_deterministic_and_forced():
    t = np.arange(20)
    m1, i1 = T.mask_tokens(t, 0.3, 99, seed=5)
    m2, i2 = T.mask_tokens(t, 0.3, 99, seed=5)
    assert np.array_equal(m1, m2) and np.array_equal(i1, i2)
    assert np.all(m1[i1] == 99)
    _, idx = T.mask_tokens(np.arange(3), 1e-9, 99, seed=0)
    assert idx.size == 1


def test_mask_frequency_matches_rate():
    rho, n = 0.15, 100_000
    _, idx = T.mask_tokens(np.zeros(n, dtype=int), rho, 1, seed=0)
    bound = 3 * np.sqrt(n * rho * (1 - rho))
    assert abs(idx.size - n * rho) < bound


def test_default_mask_rate():
    assert T.TrainingConfig().mask_prob == 0.15


def test_objective_batches():
    seqs = np.array([[1, 2, 3, 4]])
    ar = T.autoregressive_batch(seqs)
    assert ar.causal and ar.targets.tolist() == [[2, 3, 4, -1]]
    mlm = T.bidirectional_batch(seqs, 0.5, 9, np.random.default_rng(0))
    sel = mlm.targets >= 0
    assert not mlm.causal
    assert np.all(mlm.inputs[sel] == 9) and np.all(mlm.targets[sel] == seqs[sel])
    assert np.all(mlm.inputs[~sel] == seqs[~sel])
    with pytest.raises(ValueError):
        T.make_objective_batch(seqs, "mlm")
    with pytest.raises(ValueError):
        T.normalize_objective("seq2seq")


def test_uniform_logits_loss_is_log_vocab():
    V = 7
    loss, grad = T.cross_entropy(np.zeros((1, 3, V)), np.array([[0, 3, -1]]))
    assert loss == pytest.approx(np.log(V))
    assert grad[0, 2].tolist() == [0.0] * V


def test_cross_entropy_oracle(rng):
    logits = rng.standard_normal((2, 3, 5))
    targets = np.array([[1, -1, 4], [0, 2, -1]])
    loss, grad = T.cross_entropy(logits, targets)
    terms = []
    for b, i in zip(*np.nonzero(targets >= 0)):
        z = logits[b, i]
        terms.append(np.log(np.exp(z).sum()) - z[targets[b, i]])
    assert loss == pytest.approx(np.mean(terms))
    h = 1e-6
    e = np.zeros_like(logits)
    e[1, 1, 3] = h
    num = (T.cross_entropy(logits + e, targets)[0] - T.cross_entropy(logits - e, targets)[0]) / (2 * h)
    assert grad[1, 1, 3] == pytest.approx(num, rel=1e-6)


def test_cross_entropy_needs_targets():
    with pytest.raises(EmptyInputError):
        T.cross_entropy(np.zeros((1, 2, 3)), np.full((1, 2), -1))


@pytest.mark.parametrize("objective", ["autoregressive", "bidirectional"])
@pytest.mark.parametrize("use_output_proj", [False, True])
def test_gradients_match_finite_differences(objective, use_output_proj):
    cfg = ModelConfig(2, 2, 8, 12, 9, 5, use_output_proj=use_output_proj)
    params = init_params(cfg, "iid", sigma=0.4, seed=11)
    seqs = np.random.default_rng(0).integers(0, 8, size=(2, 5))
    batch = T.make_objective_batch(seqs, objective, 0.4, 8, np.random.default_rng(1))
    errors = T.gradient_check(params, batch)
    assert max(errors.values()) < 1e-6, errors


def test_embedding_rows_of_absent_tokens_get_no_gradient():
    cfg = ModelConfig(1, 1, 8, 8, 10, 6)
    p = init_params(cfg, sigma=0.3, seed=0)
    batch = T.autoregressive_batch(np.array([[1, 2, 3, 1, 2, 3]]))
    _, g = T.loss_and_grads(p, batch)
    absent = [0, 4, 5, 6, 7, 8, 9]
    assert not g.W_e[absent].any()
    assert np.abs(g.W_e[[1, 2, 3]]).sum() > 0


def test_unembedding_column_of_non_target_is_pure_softmax_term():
    # Only the normalizer touches a logit that is never a target, so its
    # column gradient is X_L^T p_v / count with no "-1" correction.
    cfg = ModelConfig(1, 1, 8, 8, 10, 6)
    p = init_params(cfg, sigma=0.3, seed=0)
    batch = T.autoregressive_batch(np.array([[1, 2, 3, 1, 2, 3]]))
    _, g, _, trace = T.loss_and_grads(p, batch, return_hooks=True)
    logits = trace.logits[0, :5]
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    X = trace.X[-1][0, :5]
    v = 7
    assert np.allclose(g.W_u[:, v], X.T @ probs[:, v] / 5, rtol=1e-12, atol=1e-15)


def test_hooks_expose_attention_gradients():
    cfg = ModelConfig(2, 2, 8, 8, 10, 6)
    p = init_params(cfg, sigma=0.3, seed=0)
    batch = T.autoregressive_batch(np.array([[1, 2, 3, 4, 5, 6]]))
    _, g, hooks, trace = T.loss_and_grads(p, batch, return_hooks=True)
    assert len(hooks) == 2
    for l, hk in enumerate(hooks):
        assert hk.dO.shape == (1, 6, 8) and hk.dS.shape == (1, 2, 6, 6)
        assert not np.triu(hk.dS[0, 0], k=1).any()
        # dL/dW_q of head h equals X^T dS_h X W_k,h / sqrt(d)
        X = trace.layers[l].X_in[0]
        lp = p.layers[l]
        got = g.layers[l].W_q
        for h in range(2):
            blk = X.T @ hk.dS[0, h] @ X @ lp.W_k[:, 4 * h:4 * h + 4] / np.sqrt(8)
            assert np.allclose(got[:, 4 * h:4 * h + 4], blk, atol=1e-14)


def test_adam_first_step_is_signed_lr():
    cfg = ModelConfig(1, 1, 4, 4, 5, 3)
    p = init_params(cfg, seed=0)
    g = T.zeros_like_params(p)
    g.W_e = np.full_like(p.W_e, 3.0)
    before = p.W_e.copy()
    T.Adam(lr=0.1, eps=1e-12).step(p, g)
    assert np.allclose(p.W_e, before - 0.1)


def test_adam_decoupled_weight_decay():
    cfg = ModelConfig(1, 1, 4, 4, 5, 3)
    p = init_params(cfg, seed=0)
    g = T.zeros_like_params(p)
    before = p.W_u.copy()
    T.Adam(lr=0.1, weight_decay=0.5).step(p, g)
    assert np.allclose(p.W_u, before * (1 - 0.05))


def test_sgd_step():
    cfg = ModelConfig(1, 1, 4, 4, 5, 3)
    p = init_params(cfg, seed=0)
    g = T.zeros_like_params(p)
    g.W_p = np.ones_like(p.W_p)
    before = p.W_p.copy()
    T.SGD(0.5).step(p, g, lr_scale=0.5)
    assert np.allclose(p.W_p, before - 0.25)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainingConfig(mask_prob=0.0)
    with pytest.raises(ValueError):
        T.TrainingConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        T.TrainingConfig(steps=-1)


def _small_run(init="iid", steps=6, seed=0, objective="mlm"):
    text = T.synthetic_corpus(4000, seed=0)
    ids, tok = T.char_tokenizer(text)
    cfg = ModelConfig(2, 2, 8, 16, tok.vocab_size, 16)
    p = init_params(cfg, init, sigma=0.2, seed=seed)
    tc = T.TrainingConfig(objective=objective, lr=1e-2, steps=steps, batch_size=4, seq_len=16,
                          seed=seed, score_every=2, mask_id=tok.mask_id)
    return T.train(p, ids, tc), p


def test_zero_steps_logs_only_init():
    log, _ = _small_run("symmetric", steps=0)
    assert len(log.checkpoints) == 1 and log.checkpoints[0].step == 0
    assert all(abs(l.s - 1.0) < 1e-12 for l in log.checkpoints[0].report.per_layer)


def test_training_is_deterministic():
    a, pa = _small_run(seed=3)
    b, pb = _small_run(seed=3)
    assert a.to_json() == b.to_json()
    assert np.array_equal(pa.layers[0].W_q, pb.layers[0].W_q)


def test_checkpoint_schedule_and_csv_rows():
    log, _ = _small_run(steps=5)
    assert [c.step for c in log.checkpoints] == [0, 2, 4, 5]
    rows = log.csv_rows()
    assert len(rows) == 4 * 2 and rows[0][:3] == (0, log.checkpoints[0].loss, 0)
    json.loads(log.to_json())


def test_callbacks_get_copies():
    seen = []
    text = T.synthetic_corpus(2000)
    ids, tok = T.char_tokenizer(text)
    p = init_params(ModelConfig(1, 1, 8, 8, tok.vocab_size, 16), sigma=0.2)
    tc = T.TrainingConfig(objective="ar", lr=1e-2, steps=2, batch_size=2, seq_len=16, score_every=1)
    T.train(p, ids, tc, callbacks=[lambda cp, params: seen.append((cp.step, params))])
    assert [s for s, _ in seen] == [0, 1, 2]
    assert not np.array_equal(seen[0][1].W_e, p.W_e)


def test_epoch_losses_recorded():
    text = T.synthetic_corpus(16 * 8)
    ids, tok = T.char_tokenizer(text)
    p = init_params(ModelConfig(1, 1, 8, 8, tok.vocab_size, 16), sigma=0.2)
    tc = T.TrainingConfig(objective="ar", lr=1e-2, steps=9, batch_size=4, seq_len=16)
    log = T.train(p, ids, tc)
    # 8 windows, 2 batches per epoch: steps 0-1, 2-3, ... four completed epochs before step 8
    assert len(log.epoch_losses) == 4


def test_empty_corpus():
    p = init_params(ModelConfig(1, 1, 4, 4, 3, 4))
    with pytest.raises(EmptyInputError):
        T.train(p, [], T.TrainingConfig(steps=1))


def test_speedup_formula():
    base = [3.0, 2.5, 2.0, 1.5]
    assert T.speedup([3.0, 1.4, 1.0, 0.9], base) == pytest.approx(0.5)
    assert T.speedup(base, base) == 0.0
    assert T.speedup([3.0, 3.0, 3.0, 3.0], base) is None
    with pytest.raises(EmptyInputError):
        T.speedup([1.0], [])


def test_synthetic_corpus():
    a = T.synthetic_corpus(1000, seed=1)
    assert len(a) == 1000 and a == T.synthetic_corpus(1000, seed=1)
    assert set(a) <= set("abcdefghijklmnopqrstuvwxyz .")
