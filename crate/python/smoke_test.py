#!/usr/bin/env python3
"""Smoke test for the langbridge_lab extension module.

Walks the whole pipeline in-process: build a vocabulary, generate a
two-model testbed, train an adapter against the first model, re-attach it
to the second, and check transfer parity, recovery, retrieval, and the
gradient battery. Run `scripts/build_python.sh` first.

Usage: python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import langbridge_lab as lb  # noqa: E402

WORDS = [
    "ant", "bee", "cat", "dog", "elk", "fox", "gnu", "hen",
    "ibis", "jay", "kiwi", "lark", "mole", "newt", "owl", "pig",
    "quail", "ram", "seal", "toad",
]


def test_vocabulary_build():
    tokens_a = {w: i for i, w in enumerate(WORDS)}
    tokens_b = {w: i + 300 for i, w in enumerate(WORDS)}
    corpus = [" ".join([w] * (len(WORDS) - i)) for i, w in enumerate(WORDS)]
    vocab = lb.build_vocabulary(tokens_a, tokens_b, corpus, top_n=16)
    assert len(vocab) == 16
    assert vocab.tokens()[0] == "ant", "most frequent token ranks first"
    assert len(vocab.fingerprint()) == 64
    # Disjoint vocabularies are a ValueError, not a crash.
    try:
        lb.build_vocabulary({"x": 1}, {"y": 2}, ["x y"], top_n=4)
    except ValueError as e:
        assert "intersection" in str(e)
    else:
        raise AssertionError("disjoint vocabularies must raise ValueError")
    return vocab


def test_world(vocab):
    world = lb.generate_testbed(
        vocab, seed=11, d_s=8, d_v=6, dim_a=8, dim_b=12, t_full_a=24, t_full_b=30
    )
    assert world.model_a.name == "alpha" and world.model_a.dim == 8
    assert world.model_b.name == "beta" and world.model_b.dim == 12
    assert world.model_a.vocab_fingerprint == vocab.fingerprint()
    embeddings = world.model_a.shared_embeddings()
    assert len(embeddings) == 16 and len(embeddings[0]) == 8
    train, heldout = world.dataset(train=64, heldout=32, patches=4, seed=21)
    assert len(train) == 64 and len(heldout) == 32
    features, planted = train[0]
    assert len(features) == 4 and len(features[0]) == 6 and len(planted) == 4
    return world, train, heldout


def test_training_and_transfer(vocab, world, train, heldout):
    adapter = lb.init_adapter(vocab, d_v=6, hidden=12, d_proj=8)
    assert adapter.stage == "init"
    untrained = lb.attach(adapter, world.model_a, vocab)
    baseline = untrained.recovery(heldout)

    result = lb.train_adapter(
        adapter, world.model_a, vocab, train,
        total_steps=150, learning_rate=1e-2, batch_size=8,
        checkpoint_steps=[50, 150],
        sft_samples=train[:32], sft_total_steps=30,
    )
    stages = [c.stage for c in result["checkpoints"]]
    assert stages == ["50", "150", "final"], stages
    assert len(result["pretrain_metrics"]) == 150
    assert len(result["sft_metrics"]) == 30
    step, lr, loss = result["pretrain_metrics"][0]
    assert step == 1 and lr > 0.0 and loss > 0.0
    trained = result["checkpoints"][-1]
    assert trained.loss is not None

    bound_a = lb.attach(trained, world.model_a, vocab)
    bound_b = lb.attach(trained, world.model_b, vocab)
    assert (bound_a.dim, bound_b.dim) == (8, 12)
    recovered = bound_a.recovery(heldout)
    assert recovered > baseline + 0.3, (baseline, recovered)

    # The probability matrix is binding-invariant; only the composition
    # changes dimension.
    features = heldout[0][0]
    pa = bound_a.probabilities(features)
    pb = bound_b.probabilities(features)
    assert pa == pb, "probabilities must be identical under both bindings"
    assert len(bound_a.forward(features)[0]) == 8
    assert len(bound_b.forward(features)[0]) == 12

    report = lb.transfer_parity(trained, world.model_a, world.model_b, vocab, heldout)
    assert report["probability_parity"] is True
    assert (report["dim_a"], report["dim_b"]) == (8, 12)
    assert report["recovery_ratio"] >= 0.9
    return trained, bound_a


def test_retrieval(vocab, world, bound_a, heldout):
    features, planted = heldout[0]
    composed = bound_a.forward(features)
    ranked = lb.topk_tokens(composed[0], world.model_a, vocab, k=5)
    assert len(ranked) == 5
    scores = [score for _, _, score in ranked]
    assert scores == sorted(scores, reverse=True)
    index, token, _ = ranked[0]
    assert token == vocab.tokens()[index]
    assert index == planted[0], "a trained adapter retrieves the planted token"


def test_checkpoint_roundtrip(vocab, trained):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "adapter.json")
        trained.save(path)
        loaded = lb.Adapter.load(path)
        assert loaded.stage == trained.stage
        assert loaded.vocab_fingerprint == vocab.fingerprint()
        assert loaded.config() == trained.config()

        vocab_path = os.path.join(tmp, "vocab.json")
        vocab.save(vocab_path)
        assert lb.Vocabulary.load(vocab_path).fingerprint() == vocab.fingerprint()
    try:
        lb.Adapter.load("/no/such/file.json")
    except OSError:
        pass
    else:
        raise AssertionError("missing files must raise OSError")


def test_vocabulary_mismatch(world, trained):
    other = lb.Vocabulary.from_tokens([f"other{i}" for i in range(16)])
    try:
        lb.attach(trained, world.model_a, other)
    except ValueError as e:
        assert "vocabulary" in str(e)
    else:
        raise AssertionError("a mismatched vocabulary must raise ValueError")


def test_gradient_check():
    report = lb.gradient_check(seed=42)
    assert report["passed"] is True
    assert report["max_rel"] < report["threshold"] == 1e-5
    assert report["configs"] == 10


def main():
    vocab = test_vocabulary_build()
    world, train, heldout = test_world(vocab)
    trained, bound_a = test_training_and_transfer(vocab, world, train, heldout)
    test_retrieval(vocab, world, bound_a, heldout)
    test_checkpoint_roundtrip(vocab, trained)
    test_vocabulary_mismatch(world, trained)
    test_gradient_check()
    print("smoke test passed: vocabulary, testbed, training, transfer parity, "
          "retrieval, round-trips, gradient check")


if __name__ == "__main__":
    main()
