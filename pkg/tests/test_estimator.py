import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from qtrain.estimator import FP8Quantizer, ToyLMTrainer
from qtrain.numerics import F8Kind, fmax
from qtrain.train import SyntheticCorpus


def test_quantizer_fit_sets_scale():
    q = FP8Quantizer().fit(np.array([[1.0, -2.0, 4.0]]))
    assert q.absmax_ == 4.0 and q.scale_ == fmax(F8Kind.E4M3) / 4.0
    assert np.array_equal(q.transform(np.array([[1.0, -2.0, 4.0]])), [[1.0, -2.0, 4.0]])


def test_quantizer_error_bound_and_saturation():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 8)).astype(np.float32)
    q = FP8Quantizer("e4m3").fit(X)
    Y = q.transform(X)
    assert np.all(np.abs(Y - X) <= np.abs(X) * 2.0 ** -4 + 2.0 ** -9 / q.scale_)
    big = q.transform(X * 10)
    assert np.max(np.abs(big)) == pytest.approx(q.absmax_, rel=1e-6)


def test_quantizer_e5m2_and_bad_kind():
    X = np.linspace(-3, 3, 12).reshape(3, 4)
    assert FP8Quantizer("e5m2").fit(X).quantize(X).kind is F8Kind.E5M2
    with pytest.raises(ValueError):
        FP8Quantizer("e3m4").fit(X).transform(X)


def test_quantizer_requires_fit_and_clones():
    with pytest.raises(NotFittedError):
        FP8Quantizer().transform(np.ones((2, 2)))
    q = FP8Quantizer("e5m2")
    assert clone(q).get_params() == {"kind": "e5m2"}


def test_quantizer_in_pipeline():
    pipe = make_pipeline(FunctionTransformer(lambda x: 2 * x), FP8Quantizer())
    X = np.array([[0.5, 1.0], [-0.25, 0.125]])
    assert np.array_equal(pipe.fit_transform(X), 2 * X)


def test_toy_trainer_memorizes_successor_map():
    corpus = SyntheticCorpus(32, 8, seed=0)
    X = corpus.batch(0, 16)
    est = ToyLMTrainer(n_layers=1, d_model=32, d_ff=64, n_heads=4, n_kv_heads=2, vocab=32, steps=120,
                       micro_batch=4, lr=1e-2, warmup=10, precision="bf16")
    est.fit(X)
    assert est.history_[-1] < 0.2 * est.history_[0]
    pred = est.predict(X[:, :-1])
    assert pred.shape == (16, 8)
    assert np.mean(pred == X[:, 1:]) > 0.9
    assert est.score(X) > -0.5


def test_toy_trainer_validation():
    est = ToyLMTrainer(vocab=10)
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 4), dtype=int))
    with pytest.raises(ValueError):
        est.fit(np.full((2, 5), 10))
    assert clone(est).get_params()["vocab"] == 10
