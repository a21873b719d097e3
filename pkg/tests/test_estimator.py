import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from icons import icon_dataset

from labelforge.estimator import ButtonCaptioner, check_image_list, check_label_list


@pytest.fixture(scope="module")
def fitted():
    pairs = icon_dataset(6)
    X = [image for image, _ in pairs]
    y = [" ".join(words) for _, words in pairs]
    model = ButtonCaptioner(
        d_model=32, d_ff=64, heads=4, cnn_channels=8, max_steps=250,
        warmup_steps=80, eval_every=50, patience=2, seed=0,
    )
    return model.fit(X, y), X, y


class TestSklearnContract:
    def test_get_params_round_trips_through_clone(self):
        model = ButtonCaptioner(d_model=128, seed=42)
        cloned = clone(model)
        assert cloned.get_params() == model.get_params()
        assert cloned.d_model == 128 and cloned.seed == 42

    def test_set_params(self):
        model = ButtonCaptioner()
        model.set_params(max_steps=5, beam_width=2)
        assert model.max_steps == 5 and model.beam_width == 2

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            ButtonCaptioner().predict([np.zeros((8, 8, 3), dtype=np.uint8)])

    def test_fit_returns_self(self, fitted):
        model, _, _ = fitted
        assert isinstance(model, ButtonCaptioner)
        assert hasattr(model, "model_") and hasattr(model, "vocab_")


class TestFitPredict:
    def test_overfits_small_set(self, fitted):
        model, X, y = fitted
        assert model.train_score_ >= 0.95
        predictions = model.predict(X)
        hits = sum(p == label for p, label in zip(predictions, y))
        assert hits / len(y) >= 0.95

    def test_score_matches_exact_match(self, fitted):
        model, X, y = fitted
        assert model.score(X, y) >= 0.95

    def test_predict_words_shape(self, fitted):
        model, X, _ = fitted
        words = model.predict_words(X[:2])
        assert len(words) == 2
        assert all(isinstance(w, list) for w in words)

    def test_accepts_stacked_array(self, fitted):
        model, X, _ = fitted
        stacked = np.stack(X[:3])
        assert model.predict(stacked) == model.predict(X[:3])


class TestValidationHelpers:
    def test_image_list_validates_shape(self):
        with pytest.raises(ValueError, match="channels"):
            check_image_list([np.zeros((4, 4, 7), dtype=np.uint8)])

    def test_image_list_rejects_empty(self):
        with pytest.raises(ValueError, match="no images"):
            check_image_list([])
        with pytest.raises(ValueError, match="empty image"):
            check_image_list([np.zeros((0, 4, 3), dtype=np.uint8)])

    def test_image_list_converts_unit_floats(self):
        arr = check_image_list([np.full((4, 4, 3), 0.5)])[0]
        assert arr.dtype == np.uint8
        assert arr[0, 0, 0] == 128

    def test_grayscale_promoted(self):
        arr = check_image_list([np.zeros((4, 4), dtype=np.uint8)])[0]
        assert arr.shape == (4, 4, 3)

    def test_label_length_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            check_label_list(["a"], 2)

    def test_string_labels_normalized(self):
        assert check_label_list(["Add, Playlist!"], 1) == [["add", "playlist"]]

    def test_word_list_labels_pass_through(self):
        assert check_label_list([["add", "playlist"]], 1) == [["add", "playlist"]]

    def test_bad_word_list_rejected(self):
        with pytest.raises(ValueError, match="string"):
            check_label_list([[1, 2]], 1)
