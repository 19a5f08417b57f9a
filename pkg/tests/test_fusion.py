"""
Tests for modality encoders, fusion numerics and head training
"""

import json
import math

import numpy as np
import pytest
from PIL import Image

from conftest import make_post, noise_raster, png_bytes
from src.fusion import (
    DHashImageEncoder,
    FusionEncoders,
    HashedTextEncoder,
    ImageTransform,
    ScoreBatch,
    ScoreTableEncoder,
    TextTokenizer,
    argmax_codes,
    cross_entropy,
    encode_dataset,
    fuse,
    gradient_check,
    head_from_dict,
    head_loss,
    head_to_dict,
    initial_head,
    load_head,
    loss_and_gradients,
    mean_fuse,
    predict,
    predict_scores,
    read_score_csv,
    save_head,
    softmax,
    train_fusion,
    train_on_scores,
    unimodal_predictions,
)
from src.types import (
    DataError,
    Dataset,
    FusionHead,
    InsufficientDataError,
    Label,
    MissingModalityError,
    TrainConfig,
)


def accuracy(codes, truth):
    return float(np.mean(np.asarray(codes) == np.asarray(truth)))


def synthetic_batch(text_means, image_means, n_per_class, sigma, seed, text_noise_only=False):
    """Per-class mean logits plus Gaussian noise, classes interleaved"""
    rng = np.random.default_rng(seed)
    codes = np.tile(np.arange(3), n_per_class)
    text = np.array([text_means[c] for c in codes], dtype=np.float64)
    if text_noise_only:
        text = np.zeros_like(text)
    image = np.array([image_means[c] for c in codes], dtype=np.float64)
    text = text + sigma * rng.standard_normal(text.shape)
    image = image + sigma * rng.standard_normal(image.shape)
    return ScoreBatch(text=text, image=image, codes=codes)


ONE_HOT = np.eye(3)


class TestNumerics:
    def test_softmax_examples(self):
        assert softmax(np.zeros(3)) == pytest.approx([1 / 3] * 3)
        probs = softmax(np.array([10.0, 0.0, 0.0]))
        assert probs[0] == pytest.approx(1 / (1 + 2 * math.exp(-10)), abs=1e-12)
        assert probs.sum() == pytest.approx(1.0)

    def test_softmax_is_shift_invariant_and_stable(self):
        z = np.array([[1.0, 2.0, 3.0], [-1000.0, 0.0, 1000.0]])
        probs = softmax(z)
        assert probs[0] == pytest.approx(softmax(z[0] + 17.0))
        assert np.all(np.isfinite(probs))
        assert probs[1, 2] == pytest.approx(1.0)

    def test_softmax_large_logits_keep_order(self):
        z = np.array([58.0, 59.0, 10.0])
        probs = softmax(z)
        assert int(np.argmax(probs)) == 1
        assert probs == pytest.approx(softmax(z - 10.0))
        assert probs[0] == pytest.approx(1 / (1 + math.e), rel=1e-12)

    def test_cross_entropy_uniform_is_log_three(self):
        assert cross_entropy(softmax(np.zeros(3)), 1) == pytest.approx(math.log(3))

    def test_cross_entropy_floor(self):
        assert cross_entropy(np.array([1.0, 0.0, 0.0]), 2) == pytest.approx(-math.log(1e-12))

    def test_fuse_initial_head_is_mean(self):
        head = initial_head()
        text, image = np.array([2.0, 0.0, 0.0]), np.array([0.0, 0.0, 2.0])
        assert fuse(text, image, head) == pytest.approx([1.0, 0.0, 1.0])
        assert mean_fuse(text, image) == pytest.approx([1.0, 0.0, 1.0])

    def test_fuse_batched(self):
        rng = np.random.default_rng(0)
        head = FusionHead(W=rng.standard_normal((3, 6)), b=rng.standard_normal(3))
        text, image = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        rows = fuse(text, image, head)
        for i in range(4):
            assert rows[i] == pytest.approx(head.W @ np.concatenate([text[i], image[i]]) + head.b)

    def test_argmax_ties_go_to_lowest_code(self):
        assert list(argmax_codes(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))) == [0, 1]

    def test_head_shape_checked(self):
        with pytest.raises(DataError):
            FusionHead(W=np.zeros((3, 3)), b=np.zeros(3))
        with pytest.raises(DataError):
            FusionHead(W=np.full((3, 6), np.nan), b=np.zeros(3))


class TestGradients:
    """Analytic cross-entropy gradients"""

    def test_matches_central_differences(self):
        rng = np.random.default_rng(1)
        head = FusionHead(W=rng.standard_normal((3, 6)), b=rng.standard_normal(3))
        batch = ScoreBatch(
            text=rng.standard_normal((20, 3)),
            image=rng.standard_normal((20, 3)),
            codes=rng.integers(0, 3, 20),
        )
        assert gradient_check(head, batch) < 1e-5

    def test_check_at_mean_fusion_start(self):
        batch = synthetic_batch(ONE_HOT, ONE_HOT, 5, 0.5, seed=2)
        assert gradient_check(initial_head(), batch) < 1e-5

    def test_single_sample_closed_form(self):
        rng = np.random.default_rng(3)
        W, b = rng.standard_normal((3, 6)), rng.standard_normal(3)
        x = rng.standard_normal(6)
        loss, grad_W, grad_b = loss_and_gradients(W, b, x[None, :], np.array([2]))
        p = softmax(W @ x + b)
        residual = p - np.array([0.0, 0.0, 1.0])
        assert loss == pytest.approx(-math.log(p[2]))
        assert grad_b == pytest.approx(residual)
        assert grad_W == pytest.approx(np.outer(residual, x))

    def test_bias_gradient_sums_to_zero(self):
        rng = np.random.default_rng(4)
        _, _, grad_b = loss_and_gradients(np.zeros((3, 6)), np.zeros(3), rng.standard_normal((9, 6)), rng.integers(0, 3, 9))
        assert grad_b.sum() == pytest.approx(0.0, abs=1e-12)

    def test_clipped_logits_have_no_slope(self):
        W = np.zeros((3, 6))
        W[0, 0] = 1.0
        features = np.array([[100.0, 0, 0, 0, 0, 0]])
        _, grad_W, grad_b = loss_and_gradients(W, np.zeros(3), features, np.array([1]))
        assert grad_b[0] == 0.0
        assert np.all(grad_W[0] == 0.0)

    def test_gradient_unchanged_by_logit_shift(self):
        rng = np.random.default_rng(5)
        W = 0.1 * rng.standard_normal((3, 6))
        features, codes = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
        base = loss_and_gradients(W, np.array([1.0, 2.0, 0.0]), features, codes)
        shifted = loss_and_gradients(W, np.array([81.0, 82.0, 80.0]), features, codes)
        assert shifted[0] == pytest.approx(base[0])
        assert shifted[1] == pytest.approx(base[1])
        assert shifted[2] == pytest.approx(base[2])

    def test_empty_batch_rejected(self):
        with pytest.raises(InsufficientDataError):
            gradient_check(initial_head(), ScoreBatch(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int)))


class TestTraining:
    """Gradient descent from mean fusion with early stopping"""

    def test_separable_fixture(self):
        train = synthetic_batch(3 * ONE_HOT, 3 * ONE_HOT, 100, 0.5, seed=10)
        val = synthetic_batch(3 * ONE_HOT, 3 * ONE_HOT, 40, 0.5, seed=11)
        test = synthetic_batch(3 * ONE_HOT, 3 * ONE_HOT, 40, 0.5, seed=12)
        head = train_on_scores(train, val, TrainConfig(seed=0))
        assert accuracy(predict_scores(test, head)[0], test.codes) >= 0.95
        assert head.best_val_loss <= head_loss(initial_head(), val)

    def test_noise_text_fixture_learns_to_trust_image(self):
        """Test pure-noise text logits do not drag fused accuracy below image-only"""
        image_means = 2.5 * ONE_HOT
        train = synthetic_batch(ONE_HOT, image_means, 500, 1.0, seed=20, text_noise_only=True)
        val = synthetic_batch(ONE_HOT, image_means, 500, 1.0, seed=21, text_noise_only=True)
        test = synthetic_batch(ONE_HOT, image_means, 500, 1.0, seed=22, text_noise_only=True)
        head = train_on_scores(train, val, TrainConfig(seed=1))
        predictions = unimodal_predictions(test, head)
        image_acc = accuracy(predictions["image"], test.codes)
        assert accuracy(predictions["fusion"], test.codes) >= image_acc - 0.02
        assert accuracy(predictions["fusion"], test.codes) > accuracy(predictions["mean_fusion"], test.codes)
        assert np.abs(head.W[:, :3]).max() < np.abs(head.W[:, 3:]).max()

    def test_complementary_fixture(self):
        """Test fusion beats both modalities when each one separates a different class"""
        text_means = np.array([[2.0, 0, 0], [0, 1.0, 1.0], [0, 1.0, 1.0]])
        image_means = np.array([[1.0, 1.0, 0], [1.0, 1.0, 0], [0, 0, 2.0]])
        train = synthetic_batch(text_means, image_means, 300, 0.5, seed=30)
        val = synthetic_batch(text_means, image_means, 100, 0.5, seed=31)
        test = synthetic_batch(text_means, image_means, 200, 0.5, seed=32)
        head = train_on_scores(train, val, TrainConfig(seed=2))
        predictions = unimodal_predictions(test, head)
        fused = accuracy(predictions["fusion"], test.codes)
        assert fused >= 0.85
        assert fused > accuracy(predictions["text"], test.codes) + 0.15
        assert fused > accuracy(predictions["image"], test.codes) + 0.15

    def test_deterministic_for_seed(self):
        train = synthetic_batch(ONE_HOT, ONE_HOT, 30, 1.0, seed=40)
        val = synthetic_batch(ONE_HOT, ONE_HOT, 10, 1.0, seed=41)
        a = train_on_scores(train, val, TrainConfig(seed=5, max_epochs=20))
        b = train_on_scores(train, val, TrainConfig(seed=5, max_epochs=20))
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)

    def test_early_stopping_bookkeeping(self):
        train = synthetic_batch(ONE_HOT, ONE_HOT, 30, 1.5, seed=50)
        val = synthetic_batch(ONE_HOT, ONE_HOT, 10, 1.5, seed=51)
        cfg = TrainConfig(seed=0, max_epochs=50, patience=3)
        head = train_on_scores(train, val, cfg)
        assert head.best_epoch <= head.epochs_run <= cfg.max_epochs
        assert head.epochs_run == cfg.max_epochs or head.epochs_run - head.best_epoch == cfg.patience
        assert head.best_val_loss == pytest.approx(head_loss(head, val))

    def test_empty_inputs(self):
        empty = ScoreBatch(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int))
        full = synthetic_batch(ONE_HOT, ONE_HOT, 2, 1.0, seed=0)
        with pytest.raises(InsufficientDataError):
            train_on_scores(empty, full)
        encoders = FusionEncoders(HashedTextEncoder(), DHashImageEncoder())
        with pytest.raises(InsufficientDataError):
            train_fusion(Dataset([]), Dataset([make_post("a", label=Label.NEUTRAL)]), encoders)

    def test_unlabeled_rejected(self):
        batch = synthetic_batch(ONE_HOT, ONE_HOT, 2, 1.0, seed=0)
        unlabeled = ScoreBatch(batch.text, batch.image)
        with pytest.raises(DataError):
            train_on_scores(unlabeled, batch)

    def test_train_fusion_on_score_tables(self):
        batch = synthetic_batch(3 * ONE_HOT, 3 * ONE_HOT, 20, 0.3, seed=60)
        posts, text_table, image_table = [], {}, {}
        for i, code in enumerate(batch.codes):
            post_id = f"s{i:03d}"
            posts.append(make_post(post_id, label=Label.from_code(int(code))))
            text_table[post_id] = batch.text[i]
            image_table[post_id] = batch.image[i]
        encoders = FusionEncoders(ScoreTableEncoder("text", text_table), ScoreTableEncoder("image", image_table))
        d = Dataset(posts)
        head = train_fusion(d, d, encoders, TrainConfig(max_epochs=10), workers=2)
        assert accuracy(predict_scores(encode_dataset(d, encoders), head)[0], batch.codes) >= 0.95


class TestPredict:
    def table_encoders(self, text, image):
        return FusionEncoders(
            ScoreTableEncoder("text", {"p": np.array(text)}),
            ScoreTableEncoder("image", {"p": np.array(image)}),
        )

    def test_confident_post(self):
        label, probs = predict(make_post("p"), self.table_encoders([5.0, 0, 0], [5.0, 0, 0]), initial_head())
        assert label == Label.PRO_ED
        assert probs[0] >= 0.98

    def test_tie_resolves_to_lowest_code(self):
        label, _ = predict(make_post("p"), self.table_encoders([1.0, 1.0, 0], [1.0, 1.0, 0]), initial_head())
        assert label == Label.PRO_ED

    def test_missing_image(self):
        encoders = FusionEncoders(HashedTextEncoder(), DHashImageEncoder())
        with pytest.raises(MissingModalityError) as excinfo:
            predict(make_post("p", text="words here"), encoders, initial_head())
        assert excinfo.value.modality == "image"

    def test_missing_text(self):
        encoders = FusionEncoders(HashedTextEncoder(), DHashImageEncoder())
        post = make_post("p", text="   ", image=png_bytes(noise_raster(1)))
        with pytest.raises(MissingModalityError) as excinfo:
            predict(post, encoders, initial_head())
        assert excinfo.value.modality == "text"

    def test_missing_score_row(self):
        encoders = self.table_encoders([1.0, 0, 0], [1.0, 0, 0])
        with pytest.raises(MissingModalityError):
            predict(make_post("other"), encoders, initial_head())

    def test_constant_added_to_all_logits_keeps_prediction(self):
        encoders = self.table_encoders([0.0, 0, 0], [0.0, 0, 0])
        W = initial_head().W
        for shift in (0.0, 10.0, 1000.0, -1000.0):
            head = FusionHead(W=W, b=np.array([48.0, 49.0, 0.0]) + shift)
            label, probs = predict(make_post("p"), encoders, head)
            assert label == Label.NEUTRAL
            assert probs == pytest.approx(softmax(np.array([48.0, 49.0, 0.0])), abs=1e-15)

    def test_unimodal_prediction_keys(self):
        batch = synthetic_batch(ONE_HOT, ONE_HOT, 3, 0.1, seed=7)
        assert set(unimodal_predictions(batch)) == {"text", "image", "mean_fusion"}
        assert set(unimodal_predictions(batch, initial_head())) == {"text", "image", "mean_fusion", "fusion"}


class TestEncoders:
    def test_tokenizer_case_folds(self):
        tokenizer = TextTokenizer(vocab_size=64)
        assert tokenizer.encode("Hello WORLD") == tokenizer.encode("hello world")
        assert all(0 <= i < 64 for i in tokenizer.encode("a b c d e"))

    def test_text_encoder_deterministic(self):
        post = make_post("a", text="recovery is possible")
        assert np.array_equal(HashedTextEncoder(seed=1).encode(post), HashedTextEncoder(seed=1).encode(post))
        assert HashedTextEncoder().encode(post).shape == (3,)

    def test_image_transform_crop(self):
        image = Image.fromarray(noise_raster(1, size=50)).resize((100, 50))
        transform = ImageTransform(size=32)
        assert transform.crop(image).size == (32, 32)
        assert transform.apply(image).shape == (3, 32, 32)

    def test_image_encoder_output(self):
        post = make_post("a", image=png_bytes(noise_raster(2, size=40)))
        encoder = DHashImageEncoder(seed=3, transform=ImageTransform(size=64))
        logits = encoder.encode(post)
        assert logits.shape == (3,)
        assert np.array_equal(logits, encoder.encode(post))
        assert encoder.describe()["crop"] == 64

    def test_encode_dataset(self):
        posts = [
            make_post(f"p{i}", text=f"text {i}", image=png_bytes(noise_raster(i)), label=Label.from_code(i % 3))
            for i in range(6)
        ]
        encoders = FusionEncoders(HashedTextEncoder(), DHashImageEncoder(transform=ImageTransform(size=32)))
        batch = encode_dataset(Dataset(posts), encoders, workers=3)
        assert batch.text.shape == batch.image.shape == (6, 3)
        assert list(batch.codes) == [0, 1, 2, 0, 1, 2]
        assert batch.ids == [f"p{i}" for i in range(6)]
        assert batch.subset(np.array([4, 1])).ids == ["p4", "p1"]


class TestScoreFiles:
    def test_read_scores(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("id,s0,s1,s2\n001,1.5,0,-2\nb,0,0,0\n")
        table = read_score_csv(str(path))
        assert table["001"] == pytest.approx([1.5, 0.0, -2.0])
        assert ScoreTableEncoder("text", str(path)).describe()["source"] == str(path)

    @pytest.mark.parametrize(
        "content",
        [
            "post,a,b,c\nx,1,2,3\n",
            "id,s0,s1,s2\nx,1,inf,3\n",
            "id,s0,s1,s2\nx,1,2,3\nx,4,5,6\n",
        ],
    )
    def test_invalid_tables(self, tmp_path, content):
        path = tmp_path / "scores.csv"
        path.write_text(content)
        with pytest.raises(DataError):
            read_score_csv(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_score_csv(str(tmp_path / "none.csv"))


class TestHeadPersistence:
    def test_dict_round_trip_through_json(self):
        rng = np.random.default_rng(8)
        head = FusionHead(W=rng.standard_normal((3, 6)), b=rng.standard_normal(3), epochs_run=12, best_epoch=7, best_val_loss=0.4)
        data = json.loads(json.dumps(head_to_dict(head, FusionEncoders(HashedTextEncoder(), DHashImageEncoder()))))
        again = head_from_dict(data)
        assert np.array_equal(again.W, head.W)
        assert np.array_equal(again.b, head.b)
        assert (again.epochs_run, again.best_epoch, again.best_val_loss) == (12, 7, 0.4)
        assert data["meta"]["encoders"]["text"]["name"] == "HashedTextEncoder"

    def test_invalid_head_data(self):
        with pytest.raises(DataError):
            head_from_dict({"W": [[1, 2]], "b": [0, 0, 0]})
        with pytest.raises(DataError):
            head_from_dict({"b": [0, 0, 0]})

    def test_save_and_load_file(self, tmp_path):
        head = FusionHead(W=np.arange(18, dtype=np.float64).reshape(3, 6) / 7, b=np.array([0.1, -0.2, 0.3]))
        path = save_head(head, str(tmp_path / "heads" / "fusion_head.json"))
        again = load_head(path)
        assert np.array_equal(again.W, head.W)
        assert np.array_equal(again.b, head.b)
        assert json.loads(open(path).read())["W"][1] == [float(v) for v in head.W[1]]

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_head(str(tmp_path / "absent.json"))
