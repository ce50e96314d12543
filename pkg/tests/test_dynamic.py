import numpy as np
import pytest

from ttmerge.coefficient import CoefficientConfig, batch_lambda
from ttmerge.dynamic import (
    ForwardCounter,
    LambdaCache,
    ensemble_predict,
    ensemble_predict_batch,
    precompute_lambdas,
    predict_ensemble,
    predict_t3,
    predict_t3_batch,
    predict_with_cache,
    t3_batch_predict,
    t3_sample_predict,
)
from ttmerge.errors import AlignmentError, CorruptionError, FormatError, StalenessError, ValidationError
from ttmerge.models import Dataset, forward
from ttmerge.params import ParameterMap, soup
from ttmerge.probs import softmax


def linear_pair(seed, d=4, c=3):
    rng = np.random.default_rng(seed)
    mk = lambda: ParameterMap({"linear.W": rng.normal(size=(c, d)), "linear.b": rng.normal(size=c)})  # noqa: E731
    return mk(), mk()


def random_data(seed, n=100, d=4, c=3):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, d)), rng.integers(0, c, n), c)


def test_identical_models_sample():
    a, _ = linear_pair(0)
    x = np.array([0.3, -1.0, 2.0, 0.5])
    c = ForwardCounter()
    cls, rec = t3_sample_predict(a, a, x, CoefficientConfig(), c)
    assert cls == int(forward(a, x).argmax())
    assert rec.I == 0.0
    assert c.sample_forwards == 3 and c.merges == 1


def test_sample_prediction_matches_logit_blend():
    a, b = linear_pair(1)
    data = random_data(2)
    c = ForwardCounter()
    preds, records = predict_t3(a, b, data, CoefficientConfig(), c)
    for x, p, rec in zip(data.X, preds, records):
        lam = rec.lambda_prime
        blend = (1 - lam) * forward(a, x) + lam * forward(b, x)
        assert p == int(blend.argmax())
    assert c.sample_forwards == 3 * len(data) and c.merges == len(data)


def test_batch_counts_and_mean():
    a, b = linear_pair(3)
    data = random_data(4, n=70)
    c = ForwardCounter()
    preds, records, means = predict_t3_batch(a, b, data, CoefficientConfig(), 32, c)
    assert len(means) == 3 and c.batch_forwards == 9 and c.merges == 3
    assert len(preds) == 70 and [r.sample_index for r in records] == list(range(70))
    for i, m in enumerate(means):
        members = [r.lambda_prime for r in records[32 * i : 32 * (i + 1)]]
        assert m == batch_lambda(members)
        assert min(members) <= m <= max(members)


def test_batch_of_identical_samples():
    a, b = linear_pair(5)
    x = np.array([0.1, 0.2, -0.3, 0.4])
    _, rec = t3_sample_predict(a, b, x, CoefficientConfig(), ForwardCounter())
    _, lam = t3_batch_predict(a, b, np.tile(x, (8, 1)), CoefficientConfig(), ForwardCounter())
    assert abs(lam - rec.lambda_prime) < 1e-15


def test_batch_size_one_equals_sample_path():
    a, b = linear_pair(6)
    data = random_data(7, n=40)
    cfg = CoefficientConfig()
    sample, _ = predict_t3(a, b, data, cfg, ForwardCounter())
    batch, _, _ = predict_t3_batch(a, b, data, cfg, 1, ForwardCounter())
    np.testing.assert_array_equal(sample, batch)


def test_empty_batch_rejected():
    a, b = linear_pair(8)
    with pytest.raises(ValidationError):
        t3_batch_predict(a, b, np.zeros((0, 4)), CoefficientConfig(), ForwardCounter())


def test_misaligned_rejected():
    a, _ = linear_pair(9)
    b, _ = linear_pair(9, d=5)
    with pytest.raises(AlignmentError):
        t3_sample_predict(a, b, np.zeros(4), CoefficientConfig(), ForwardCounter())
    with pytest.raises(AlignmentError):
        ensemble_predict(a, b, np.zeros(4), ForwardCounter())


def test_ensemble_equals_soup_for_linear():
    a, b = linear_pair(10)
    data = random_data(11, n=1000)
    c = ForwardCounter()
    ens = ensemble_predict_batch(a, b, data.X, c)
    assert np.array_equal(ens, forward(soup(a, b), data.X).argmax(1))
    assert c.batch_forwards == 2
    c = ForwardCounter()
    assert ensemble_predict(a, a, data.X[0], c) == int(forward(a, data.X[0]).argmax())
    assert c.sample_forwards == 2


def test_ensemble_counter_over_dataset():
    a, b = linear_pair(12)
    data = random_data(13, n=100)
    c = ForwardCounter()
    predict_ensemble(a, b, data, 32, c)
    assert c.batch_forwards == 2 * 4


@pytest.mark.parametrize("policy", ["js_sigmoid", "entropy_ratio", "confidence_ratio", "fixed(0.3)"])
def test_cache_equivalence(policy):
    a, b = linear_pair(14)
    data = random_data(15, n=77)
    cfg = CoefficientConfig(policy=policy)
    cache = precompute_lambdas(a, b, data, cfg, 16)
    online_s, _ = predict_t3(a, b, data, cfg, ForwardCounter())
    online_b, _, means = predict_t3_batch(a, b, data, cfg, 16, ForwardCounter())
    cs, cb = ForwardCounter(), ForwardCounter()
    np.testing.assert_array_equal(predict_with_cache(a, b, data, cache, "sample", cs, cfg), online_s)
    np.testing.assert_array_equal(predict_with_cache(a, b, data, cache, "batch", cb, cfg), online_b)
    assert cache.per_batch_means == means
    assert cs.as_dict() == {"batch_forwards": 0, "merges": 77, "sample_forwards": 77}
    assert cb.as_dict() == {"batch_forwards": 5, "merges": 5, "sample_forwards": 0}


def test_cache_internal_consistency():
    a, b = linear_pair(16)
    data = random_data(17, n=50)
    cache = precompute_lambdas(a, b, data, CoefficientConfig(), 8)
    assert cache.n == 50 and len(cache.per_batch_means) == 7
    for i, m in enumerate(cache.per_batch_means):
        recomputed = batch_lambda([r.lambda_prime for r in cache.per_sample[8 * i : 8 * (i + 1)]])
        assert abs(recomputed - m) <= 1e-12
    p_pt, p_ft = softmax(forward(a, data.X)), softmax(forward(b, data.X))
    assert cache.per_sample[3].H_pt == pytest.approx(float(-(p_pt[3] * np.log(p_pt[3] + 1e-12)).sum()), abs=1e-12)
    assert cache.per_sample[3].H_ft >= 0 and p_ft.shape == (50, 3)


def test_cache_file_roundtrip_and_determinism(tmp_path):
    a, b = linear_pair(18)
    data = random_data(19, n=33)
    cfg = CoefficientConfig()
    precompute_lambdas(a, b, data, cfg, 10).save(tmp_path / "a.ttlc")
    precompute_lambdas(a, b, data, cfg, 10).save(tmp_path / "b.ttlc")
    blob = (tmp_path / "a.ttlc").read_bytes()
    assert blob == (tmp_path / "b.ttlc").read_bytes()
    back = LambdaCache.load(tmp_path / "a.ttlc", cfg, 33)
    assert back.to_bytes() == blob
    assert back == precompute_lambdas(a, b, data, cfg, 10)


def test_cache_staleness(tmp_path):
    a, b = linear_pair(20)
    data = random_data(21, n=20)
    path = tmp_path / "c.ttlc"
    precompute_lambdas(a, b, data, CoefficientConfig(), 8).save(path)
    with pytest.raises(StalenessError):
        LambdaCache.load(path, CoefficientConfig(delta=0.3))
    with pytest.raises(StalenessError):
        LambdaCache.load(path, CoefficientConfig(), n=21)
    cache = LambdaCache.load(path)
    with pytest.raises(StalenessError):
        predict_with_cache(a, b, data.slice(0, 10), cache, "batch", ForwardCounter())


def test_cache_corrupt_bytes():
    a, b = linear_pair(22)
    blob = precompute_lambdas(a, b, random_data(23, n=5), CoefficientConfig(), 2).to_bytes()
    with pytest.raises(CorruptionError):
        LambdaCache.from_bytes(blob[:-8])
    with pytest.raises(FormatError):
        LambdaCache.from_bytes(b"TTMC" + blob[4:])


def test_counter_addition():
    total = ForwardCounter(1, 2, 3) + ForwardCounter(4, 5, 6)
    assert (total.sample_forwards, total.batch_forwards, total.merges) == (5, 7, 9)


def test_unknown_cache_mode():
    a, b = linear_pair(24)
    data = random_data(25, n=4)
    cache = precompute_lambdas(a, b, data, CoefficientConfig(), 2)
    with pytest.raises(ValidationError):
        predict_with_cache(a, b, data, cache, "stream", ForwardCounter())
