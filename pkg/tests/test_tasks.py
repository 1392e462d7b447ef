import numpy as np
import pytest

from vlwb import tasks
from vlwb.datagen import SyntheticSpec, build_class_contexts, build_vocabulary, in_memory_dataset
from vlwb.tasks import (
    MISS,
    ClassBank,
    answer_to_class,
    build_caption_target,
    build_classification_logits,
    build_retrieval_scorer,
    candidate_set,
    check_template,
    query_decomposition_classify,
    reference_answerer,
    synth_caption_for_attack,
)
from vlwb.vlmodel import ModelConfig, embed_texts, init_params, similarity_logits


@pytest.fixture(scope="module")
def env():
    vocab = build_vocabulary()
    cv = build_class_contexts()
    params = init_params(ModelConfig(), len(vocab), seed=5)
    ds = in_memory_dataset(SyntheticSpec(per_class=5))
    return vocab, cv, params, ds


class FixedEmbedding(tasks.ReferenceAnswerer):
    """Answerer whose image embedding is supplied directly as the 'image'."""

    def embed(self, image):
        return np.asarray(image)


def test_template_placeholders():
    assert check_template("a photo of {}") == "a photo of {}"
    for bad in ("a photo", "{} and {}", "a {name}"):
        with pytest.raises(ValueError):
            check_template(bad)


def test_classification_logits_length_and_argmax(env):
    vocab, cv, params, ds = env
    target = build_classification_logits(params, cv, vocab)
    assert target.bank.shape == (8, params.config.embed_dim)
    logits = target.scorer(ds.val[0]).logits(ds.val[0].image)
    assert logits.shape == (8,)
    from vlwb import diffcore as dc

    z = similarity_logits(dc.Tensor(target.bank[3]), target.bank, params.temperature).data
    assert int(np.argmax(z)) == 3


def test_classification_rejects_unk_template(env):
    vocab, cv, params, _ = env
    with pytest.raises(ValueError, match="out-of-vocabulary"):
        build_classification_logits(params, cv, vocab, template="a zebra {}")


def test_caption_target(env):
    vocab, _, params, ds = env
    cap = ds.val[0].captions[0]
    t = build_caption_target(params, vocab, [cap] * 5)
    np.testing.assert_allclose(t, embed_texts(params, vocab, [cap])[0], atol=1e-12)
    t = build_caption_target(params, vocab, ds.val[0].captions)
    assert abs(np.linalg.norm(t) - 1.0) <= 1e-9


def test_caption_target_rejects_all_unk(env):
    vocab, _, params, _ = env
    with pytest.raises(ValueError):
        build_caption_target(params, vocab, ["zebra quokka"] * 5)


def test_retrieval_scorer(env):
    vocab, _, params, ds = env
    gallery = ds.val[:6]
    target = build_retrieval_scorer(params, vocab, gallery)
    for j, s in enumerate(gallery):
        sc = target.scorer(s)
        assert sc.label == j and sc.logits(s.image).shape == (6,)
    with pytest.raises(ValueError):
        build_retrieval_scorer(params, vocab, gallery[:1])
    with pytest.raises(ValueError, match="duplicate"):
        build_retrieval_scorer(params, vocab, [gallery[0], gallery[0]])


def test_retrieval_orthogonal_targets_retrieve_self(env):
    _, _, params, ds = env
    from vlwb import diffcore as dc

    bank = np.eye(2, params.config.embed_dim)
    for j in range(2):
        assert int(np.argmax(similarity_logits(dc.Tensor(bank[j]), bank, 10.0).data)) == j


def test_synthetic_caption(env):
    *_, ds = env
    s = ds.samples[0]
    s2 = type(s)(s.id, s.image, s.class_index, "circle", s.captions,
                 {"color": "red", "position": "upper left", "background": "dark"})
    assert synth_caption_for_attack(s2) == "a red circle in the upper left"
    assert synth_caption_for_attack(s2) == synth_caption_for_attack(s2)


def test_synthetic_retrieval_target(env):
    vocab, _, params, ds = env
    target = build_retrieval_scorer(params, vocab, ds.val[:4], caption_fn=synth_caption_for_attack)
    assert target.bank.shape == (4, params.config.embed_dim)


def test_answerer_on_class_embedding(env):
    vocab, cv, params, _ = env
    ans = FixedEmbedding(params, cv, vocab)
    q = cv.templates["question"]
    for i, c in enumerate(cv.classes):
        text, conf = ans.answer(ans.class_bank[i], q)
        assert text == c and 1 / 8 < conf <= 1.0
    assert ans.answer(ans.class_bank[2], q) == ans.answer(ans.class_bank[2], q)


def test_context_bias_only_for_mentioned_classes(env):
    vocab, cv, params, _ = env
    ans = FixedEmbedding(params, cv, vocab, context_weight=1.0)
    emb = ans.context_bank[4]
    plain = ans.class_logits(emb, cv.templates["question"])
    prompt = tasks.context_prompt(cv.templates["question"], cv, classes=["ring"])
    ctx = ans.class_logits(emb, prompt)
    diff = ctx - plain
    assert diff[4] == pytest.approx(1.0) and np.all(np.delete(diff, 4) == 0)


def test_existence_answers(env):
    vocab, cv, params, _ = env
    ans = FixedEmbedding(params, cv, vocab, colors=["red", "blue"])
    emb = ans.class_bank[0]
    yes = ans.answer(emb, tasks.existence_prompt("circle"))
    no = ans.answer(emb, tasks.existence_prompt("square"))
    assert yes[0] == "yes" and no[0] == "no"
    assert 0 <= yes[1] <= 1 and 0 <= no[1] <= 1
    assert tasks.yes_confidence(yes) > tasks.yes_confidence(no)
    assert ans.answer(emb, tasks.existence_prompt("zebra"))[0] == "no"
    color = ans.answer(ans.color_bank[1], tasks.existence_prompt("blue object"))
    assert color[0] == "yes"


def test_captioning_mode(env):
    vocab, cv, params, ds = env
    caps = [c for s in ds.val[:3] for c in s.captions]
    ans = FixedEmbedding(params, cv, vocab, mode="captioning", captions=caps)
    text, conf = ans.answer(ans.caption_bank[7], cv.templates["caption"])
    assert text == caps[7] and 0 < conf <= 1
    with pytest.raises(ValueError):
        reference_answerer(params, cv, vocab, mode="captioning")
    with pytest.raises(ValueError):
        reference_answerer(params, cv, vocab, mode="poetry")


def test_answer_to_class(env):
    vocab, cv, params, _ = env
    bank = ClassBank.build(params, cv, vocab)
    assert answer_to_class("circle", bank) == cv.index("circle")
    assert answer_to_class("ring", bank) == cv.index("ring")
    assert answer_to_class("zebra", bank) == MISS
    assert answer_to_class("", bank) == MISS


def test_misses_count_as_errors(env):
    vocab, cv, params, ds = env
    from vlwb.evalharness import answerer_hits

    class Mute(tasks.ReferenceAnswerer):
        def answer(self, image, prompt):
            return "zebra", 1.0

    hits = answerer_hits(Mute(params, cv, vocab), ds.val[:5], class_bank=ClassBank.build(params, cv, vocab))
    assert hits == [False] * 5


def test_candidate_set_rules():
    with pytest.raises(ValueError):
        candidate_set(8, 0, 1, 0, "a")
    with pytest.raises(ValueError):
        candidate_set(8, 0, 9, 0, "a")
    assert candidate_set(8, 5, 8, 0, "a") == list(range(8))
    for gold in range(8):
        c = candidate_set(8, gold, 4, 3, f"id{gold}")
        assert gold in c and len(set(c)) == 4 and c == sorted(c)
        assert c == candidate_set(8, gold, 4, 3, f"id{gold}")
    sets = {tuple(candidate_set(20, 0, 5, 3, f"id{i}")) for i in range(30)}
    assert len(sets) > 1


class ScriptedAnswerer:
    def __init__(self, class_vocab, confidences, transform=lambda c: c):
        self.class_vocab = class_vocab
        self.conf = confidences
        self.transform = transform

    def answer(self, image, prompt):
        for c in self.class_vocab.classes:
            if f"a {c} in" in prompt:
                return "yes", self.transform(self.conf[c])
        raise AssertionError(prompt)


def test_qd_argmax_and_monotone_invariance():
    cv = build_class_contexts()
    rng = np.random.default_rng(0)
    for trial in range(20):
        conf = dict(zip(cv.classes, rng.uniform(0.01, 0.99, size=8)))
        base = query_decomposition_classify(ScriptedAnswerer(cv, conf), None, cv, 8, 0, 0, "x")
        assert base == cv.index(max(conf, key=conf.get))
        warped = ScriptedAnswerer(cv, conf, transform=lambda c: c**3 / 10)
        assert query_decomposition_classify(warped, None, cv, 8, 0, 0, "x") == base


def test_qd_ties_break_low():
    cv = build_class_contexts()
    conf = {c: 0.5 for c in cv.classes}
    assert query_decomposition_classify(ScriptedAnswerer(cv, conf), None, cv, 8, 0, 6, "x") == 0


def test_qd_prompt_carries_context():
    cv = build_class_contexts()
    seen = []

    class Spy:
        class_vocab = cv

        def answer(self, image, prompt):
            seen.append(prompt)
            return "no", 1.0

    query_decomposition_classify(Spy(), None, cv, 8, 0, 0, "x")
    assert seen[0] == f"is there a circle in this image? {cv.context('circle')}."
    seen.clear()
    query_decomposition_classify(Spy(), None, cv, 8, 0, 0, "x", with_context=False)
    assert seen[0] == "is there a circle in this image?"
