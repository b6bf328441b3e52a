import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from moelora.estimator import MoeLoraClassifier, check_clips, check_labels

SMALL = dict(layers=1, model_dim=8, heads=2, head_dim=6, lora_rank=2, num_experts=2, top_k=2,
             max_epochs=2, lr_min=1e-4, lr_max=1e-3)


def _data(small_dataset, split):
    frames, labels, _ = small_dataset.arrays(split)
    return frames, labels


def test_check_clips():
    assert len(check_clips(np.zeros((3, 5, 2)))) == 3
    assert check_clips([np.zeros((4, 2)), np.ones((6, 2))])[1].shape == (6, 2)
    with pytest.raises(ValueError):
        check_clips(np.zeros((5, 2)))
    with pytest.raises(ValueError):
        check_clips([np.zeros((4, 2)), np.zeros((4, 3))])
    with pytest.raises(ValueError):
        check_clips([np.full((4, 2), np.nan)])
    with pytest.raises(ValueError):
        check_clips([np.zeros((4, 2))], input_dim=3)
    with pytest.raises(ValueError):
        check_clips([])
    with pytest.raises(ValueError):
        check_labels([0, 1], 3)


def test_params_round_trip():
    est = MoeLoraClassifier(num_experts=5, top_k=2)
    params = est.get_params()
    assert params["num_experts"] == 5 and params["top_k"] == 2
    twin = clone(est).set_params(lora_rank=4)
    assert twin.lora_rank == 4 and est.lora_rank == 8


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        MoeLoraClassifier().predict([np.zeros((4, 16))])


def test_fit_predict_transform(small_dataset):
    X, y = _data(small_dataset, "train")
    labels = np.where(y == 0, "bonafide", "spoof")
    est = MoeLoraClassifier(**SMALL).fit(X, labels)
    assert est.classes_.tolist() == ["bonafide", "spoof"]
    Xe, _ = _data(small_dataset, "eval_id")
    pred = est.predict(Xe)
    assert set(pred) <= {"bonafide", "spoof"} and len(pred) == len(Xe)
    proba = est.predict_proba(Xe)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert np.allclose(est.decision_function(Xe), -est.score_samples(Xe))
    assert est.transform(Xe).shape == (len(Xe), 8)
    assert est.get_feature_names_out().shape == (8,)
    assert est.n_features_in_ == 16 and 1 <= est.best_epoch_ <= 2
    assert 0.0 <= est.score(Xe, np.where(_data(small_dataset, "eval_id")[1] == 0, "bonafide", "spoof")) <= 1.0


def test_fit_with_eval_set_and_label_checks(small_dataset):
    X, y = _data(small_dataset, "train")
    Xd, yd = _data(small_dataset, "dev")
    est = MoeLoraClassifier(**dict(SMALL, max_epochs=1)).fit(X, y, eval_set=(Xd, yd))
    assert len(est.history_) == 1
    with pytest.raises(ValueError):
        MoeLoraClassifier(**SMALL).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        MoeLoraClassifier(**SMALL).fit(X, y, eval_set=(Xd, yd + 5))
    with pytest.raises(ValueError):
        est.predict([np.zeros((4, 3))])
