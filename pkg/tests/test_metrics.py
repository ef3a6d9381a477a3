"""AUC rank statistic and dataset evaluation."""

import json

import numpy as np
import pytest

from xfm import data, metrics, model
from xfm.errors import MetricError
from xfm.numerics import Rng


def pairwise_auc(scores, labels):
    """O(n^2) reference: compare every positive against every negative."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        total += (p > neg).sum() + 0.5 * (p == neg).sum()
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert metrics.auc(np.array([0.1, 0.9]), np.array([0.0, 1.0])) == 1.0

    def test_reversed_ranking(self):
        assert metrics.auc(np.array([0.9, 0.1]), np.array([0.0, 1.0])) == 0.0

    def test_all_tied(self):
        scores = np.full(6, 0.3)
        labels = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        assert metrics.auc(scores, labels) == 0.5

    def test_matches_pairwise_oracle_with_ties(self):
        worst = 0.0
        for seed in range(60):
            rng = Rng(seed)
            n = int(rng.integers(1, 150)[0]) + 10
            scores = np.round(rng.normals(n), 1)  # coarse grid forces ties
            labels = (rng.uniforms(n) < 0.35).astype(np.float64)
            if labels.sum() in (0, n):
                continue
            worst = max(
                worst, abs(metrics.auc(scores, labels) - pairwise_auc(scores, labels))
            )
        assert worst < 1e-12

    def test_monotone_transform_invariance(self):
        rng = Rng(5)
        scores = rng.normals(200)
        labels = (rng.uniforms(200) < 0.5).astype(np.float64)
        base = metrics.auc(scores, labels)
        assert metrics.auc(3.0 * scores + 7.0, labels) == base
        assert metrics.auc(np.exp(scores), labels) == base

    def test_label_flip_symmetry(self):
        rng = Rng(9)
        scores = np.round(rng.normals(300), 1)
        labels = (rng.uniforms(300) < 0.4).astype(np.float64)
        total = metrics.auc(scores, labels) + metrics.auc(scores, 1.0 - labels)
        assert abs(total - 1.0) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            metrics.auc(np.array([0.1, 0.2]), np.array([1.0, 1.0]))
        with pytest.raises(MetricError):
            metrics.auc(np.array([0.1, 0.2]), np.array([0.0, 0.0]))

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            metrics.auc(np.array([0.1]), np.array([1.0, 0.0]))


class TestEvaluate:
    def _dataset(self, n=40, seed=3):
        spec = data.SyntheticSpec(
            field_count=2,
            vocab_per_field=4,
            latent_dim=2,
            interaction_terms=(((0, 1), 1.0),),
            noise_std=0.5,
            n_instances=n,
            seed=seed,
        )
        return data.synthesize(spec)

    def test_constant_predictor(self):
        ds = self._dataset(n=64, seed=8)
        params = model.ModelParams(
            model.preset("lr"), ds.schema.n_features, ds.schema.field_count
        )
        report = metrics.evaluate(params, ds)
        assert report.auc == 0.5
        assert report.logloss == pytest.approx(np.log(2.0))
        assert report.n == 64
        assert report.positives == int(ds.labels().sum())

    def test_empty_dataset(self):
        ds = self._dataset(n=0)
        params = model.ModelParams(model.preset("lr"), ds.schema.n_features, 2)
        with pytest.raises(MetricError):
            metrics.evaluate(params, ds)

    def test_report_is_json_ready(self):
        ds = self._dataset(n=32, seed=4)
        params = model.ModelParams(
            model.preset("lr"), ds.schema.n_features, ds.schema.field_count
        )
        blob = json.dumps(metrics.evaluate(params, ds).to_dict())
        parsed = json.loads(blob)
        assert set(parsed) == {"auc", "logloss", "n", "positives"}
