import numpy as np
import pytest

from vlwb import diffcore as dc
from vlwb.datagen import SyntheticSpec, build_vocabulary, in_memory_dataset
from vlwb.vlmodel import (
    ModelConfig,
    TrainingDiverged,
    contrastive_train,
    embed_texts,
    encode_image,
    encode_text,
    init_params,
    load_params,
    save_params,
    similarity_logits,
)

SMALL = ModelConfig(height=32, width=32, patch=8, patch_dim=8, hidden=16, token_dim=8, text_hidden=16, embed_dim=8)


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="module")
def params(vocab):
    return init_params(ModelConfig(), len(vocab), seed=0)


@pytest.fixture(scope="module")
def tiny_ds():
    return in_memory_dataset(SyntheticSpec(classes=("circle", "square"), per_class=5))


def test_zero_image_has_unit_embedding(params):
    e = encode_image(params, np.zeros((32, 32, 3))).data
    assert abs(np.linalg.norm(e) - 1.0) <= 1e-9


def test_identical_images_identical_embeddings(params):
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert encode_image(params, img).data.tobytes() == encode_image(params, img.copy()).data.tobytes()


def test_batch_matches_single(params):
    imgs = np.random.default_rng(1).uniform(size=(3, 32, 32, 3))
    batch = encode_image(params, imgs).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_image(params, imgs[i]).data, atol=1e-14)


@pytest.mark.parametrize("bad", [np.zeros((16, 16, 3)), np.full((32, 32, 3), 1.5), np.full((32, 32, 3), -0.1)])
def test_image_validation(params, bad):
    with pytest.raises(ValueError):
        encode_image(params, bad)


def test_text_determinism_and_bag_of_tokens(params, vocab):
    a = embed_texts(params, vocab, ["a photo of circle", "a photo of circle", "circle of photo a"])
    assert a[0].tobytes() == a[1].tobytes()
    np.testing.assert_allclose(a[0], a[2], atol=1e-15)


def test_empty_text_rejected(params):
    with pytest.raises(ValueError):
        encode_text(params, [])


def test_similarity_logits_examples():
    e = dc.Tensor(np.array([1.0, 0.0]))
    assert similarity_logits(e, np.array([[1.0, 0.0]]), 1.0).data[0] == pytest.approx(1.0)
    assert similarity_logits(e, np.array([[0.0, 1.0]]), 1.0).data[0] == 0.0
    assert similarity_logits(e, np.array([[0.6, 0.8]]), 100.0).data[0] == pytest.approx(60.0, abs=1e-12)


def test_similarity_logits_rejects_empty_bank():
    with pytest.raises(ValueError):
        similarity_logits(dc.Tensor(np.ones(2)), [], 1.0)


def test_image_gradient_matches_finite_differences(vocab):
    p = init_params(SMALL, len(vocab), seed=3).frozen()
    bank = embed_texts(p, vocab, ["a photo of circle", "a photo of square", "a photo of ring"])
    x = np.random.default_rng(2).uniform(0.1, 0.9, size=(32, 32, 3))

    def build(t):
        return dc.softmax_cross_entropy(similarity_logits(encode_image(p, t), bank, 10.0), 1)

    res = dc.grad_check(build, x, coords=np.arange(0, x.size, 97))
    assert res.max_error < 1e-4


def test_zero_lr_leaves_params_unchanged(vocab, tiny_ds):
    p = init_params(SMALL, len(vocab), seed=1)
    out, curve = contrastive_train(p, tiny_ds, epochs=1, batch=4, lr=0.0, schedule="constant")
    assert out.equals(p) and len(curve) == 1


def test_training_is_deterministic(vocab, tiny_ds):
    p = init_params(SMALL, len(vocab), seed=1)
    a, ca = contrastive_train(p, tiny_ds, epochs=2, batch=4, lr=0.1, seed=7)
    b, cb = contrastive_train(p, tiny_ds, epochs=2, batch=4, lr=0.1, seed=7)
    assert a.equals(b) and ca == cb
    assert not a.equals(p)


def test_training_reduces_loss(vocab):
    ds = in_memory_dataset(SyntheticSpec(classes=("circle", "square", "bar"), per_class=20))
    p = init_params(SMALL, len(vocab), seed=0)
    _, curve = contrastive_train(p, ds, epochs=8, batch=8, lr=0.1, adv_epsilon=0.0)
    assert curve[-1]["loss"] < curve[0]["loss"]


def test_temperature_stays_clamped(vocab, tiny_ds):
    p = init_params(SMALL, len(vocab), seed=1)
    out, _ = contrastive_train(p, tiny_ds, epochs=2, batch=4, lr=50.0, schedule="constant", adv_epsilon=0.0)
    assert 1.0 <= out.temperature <= 100.0


def test_divergence_raises(vocab, tiny_ds):
    p = init_params(SMALL, len(vocab), seed=1)
    p.tensors["txt_h_b"] = dc.Tensor(np.full(SMALL.text_hidden, np.nan))
    with pytest.raises(TrainingDiverged):
        contrastive_train(p, tiny_ds, epochs=1, batch=4)


@pytest.mark.parametrize("kwargs", [dict(batch=1), dict(schedule="step")])
def test_training_argument_validation(vocab, tiny_ds, kwargs):
    with pytest.raises(ValueError):
        contrastive_train(init_params(SMALL, len(vocab)), tiny_ds, epochs=1, **kwargs)


def test_checkpoint_round_trip(tmp_path, vocab):
    p = init_params(SMALL, len(vocab), seed=9)
    save_params(tmp_path / "m.vlwb", p)
    back = load_params(tmp_path / "m.vlwb")
    assert back.config == SMALL and back.vocab_size == len(vocab) and back.equals(p)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "m.vlwb").write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(ValueError, match="magic"):
        load_params(tmp_path / "m.vlwb")
