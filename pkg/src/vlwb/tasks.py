"""Attack targets, the reference answerer, context augmentation and query decomposition.

Every scorer built here maps an image to similarity logits computed by the
frozen image encoder against a fixed bank of text embeddings, so attacks only
ever differentiate through the image side.
"""

import logging
import re
import string
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attacks import Scorer
from .datagen import PROMPT_TEMPLATES
from .seeding import rng_for
from .vlmodel import embed_texts, encode_image, similarity_logits

log = logging.getLogger(__name__)

MISS = -1
SYNTH_TEMPLATE = "a {color} {shape} in the {position}"
COLOR_PROBE = "a {} object"
_EXISTENCE = re.compile(r"is there an? (?P<what>[a-z ]+?) in this image\?")


def check_template(template):
    fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    if fields != [""]:
        raise ValueError(f"template {template!r} must have exactly one '{{}}' placeholder")
    return template


def _reject_unk(vocabulary, texts, what):
    for t in texts:
        if vocabulary.unk_count(t):
            raise ValueError(f"{what} {t!r} contains out-of-vocabulary words")


@dataclass
class ClassificationTarget:
    """Class-prompt text bank plus a scorer factory for classification attacks."""

    params: object
    classes: list
    prompts: list
    bank: np.ndarray

    def logits_fn(self):
        frozen = self.params.frozen()
        bank, temp = self.bank, self.params.temperature
        return lambda img: similarity_logits(encode_image(frozen, img), bank, temp)

    def scorer(self, sample):
        return Scorer(self.logits_fn(), sample.class_index)

    def predict(self, images):
        emb = encode_image(self.params.frozen(), np.asarray(images)).data
        return np.argmax(emb @ self.bank.T, axis=-1)


def build_classification_logits(params, class_vocab, vocabulary, template=None):
    """One text embedding per class from ``template`` (default "a photo of {}")."""
    template = check_template(template or class_vocab.templates["classification"])
    if not class_vocab.classes:
        raise ValueError("class vocabulary is empty")
    prompts = [template.format(c) for c in class_vocab.classes]
    _reject_unk(vocabulary, prompts, "prompt")
    bank = embed_texts(params, vocabulary, prompts)
    return ClassificationTarget(params, list(class_vocab.classes), prompts, bank)


def build_caption_target(params, vocabulary, captions):
    """Unit-norm mean of the caption embeddings."""
    for c in captions:
        ids = vocabulary.encode(c)
        if not ids or all(i == 0 for i in ids):
            raise ValueError(f"caption {c!r} has no in-vocabulary words")
    emb = embed_texts(params, vocabulary, list(captions))
    mean = emb.mean(axis=0)
    return mean / np.linalg.norm(mean)


def synth_caption_for_attack(sample):
    """Templated stand-in for a model-generated description of ``sample``."""
    a = sample.attributes
    return SYNTH_TEMPLATE.format(color=a["color"], shape=sample.class_name, position=a["position"])


@dataclass
class RetrievalTarget:
    """Per-image text anchors; the scorer for gallery image j has gold index j."""

    params: object
    ids: list
    bank: np.ndarray

    def scorer(self, sample):
        frozen = self.params.frozen()
        bank, temp = self.bank, self.params.temperature
        return Scorer(lambda img: similarity_logits(encode_image(frozen, img), bank, temp), self.ids.index(sample.id))


def build_retrieval_scorer(params, vocabulary, gallery, caption_fn=None):
    """Retrieval targets from each sample's five captions, or from ``caption_fn(sample)``.

    ``caption_fn`` returning a single string gives the synthetic-caption
    (VQA-style) target as a one-caption mean.
    """
    if len(gallery) < 2:
        raise ValueError("retrieval gallery needs at least 2 images")
    ids = [s.id for s in gallery]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in gallery")
    rows = []
    for s in gallery:
        caps = s.captions if caption_fn is None else caption_fn(s)
        caps = [caps] if isinstance(caps, str) else list(caps)
        rows.append(build_caption_target(params, vocabulary, caps))
    return RetrievalTarget(params, ids, np.stack(rows))


# -- answerer -----------------------------------------------------------------

def context_prompt(question, class_vocab, classes=None):
    """``question`` followed by the context sentence of each class in ``classes``."""
    names = class_vocab.classes if classes is None else classes
    return " ".join([question] + [class_vocab.context(c) + "." for c in names])


def existence_prompt(what, class_vocab=None, with_context=False):
    prompt = PROMPT_TEMPLATES["existence"].format(what)
    if with_context and class_vocab is not None and what in class_vocab.classes:
        prompt = f"{prompt} {class_vocab.context(what)}."
    return prompt


class ReferenceAnswerer:
    """Deterministic similarity-based stand-in for a multimodal answerer.

    Classification mode scores the image against the class prompts; any class
    whose context sentence appears in the prompt gets ``context_weight *
    cos(image, context)`` added to its logit.  Existence questions ("is
    there a X in this image?") answer yes when X wins within its family
    (classes, or colors), and the confidence is the probability of the answer
    given.  Captioning mode returns the nearest caption string of the bank.
    """

    def __init__(self, params, class_vocab, vocabulary, mode="classification", context_weight=1.0,
                 captions=None, colors=()):
        if mode not in ("classification", "captioning"):
            raise ValueError(f"unknown answerer mode {mode!r}")
        self.params = params.frozen()
        self.class_vocab = class_vocab
        self.vocabulary = vocabulary
        self.mode = mode
        self.context_weight = float(context_weight)
        self.temperature = params.temperature
        classes = class_vocab.classes
        tpl = class_vocab.templates["classification"]
        self.class_bank = embed_texts(params, vocabulary, [tpl.format(c) for c in classes])
        self.context_bank = embed_texts(params, vocabulary, [class_vocab.context(c) for c in classes])
        self.colors = list(colors)
        self.color_bank = (
            embed_texts(params, vocabulary, [COLOR_PROBE.format(c) for c in self.colors]) if self.colors else None
        )
        self.captions = list(captions or [])
        if mode == "captioning":
            if not self.captions:
                raise ValueError("captioning mode needs a caption bank")
            self.caption_bank = embed_texts(params, vocabulary, self.captions)

    def embed(self, image):
        return encode_image(self.params, np.asarray(image)).data

    def class_logits(self, emb, prompt):
        logits = self.temperature * (emb @ self.class_bank.T)
        text = prompt.lower()
        for i, c in enumerate(self.class_vocab.classes):
            if self.class_vocab.context(c) in text:
                logits[i] += self.context_weight * float(emb @ self.context_bank[i])
        return logits

    def answer(self, image, prompt):
        emb = self.embed(image)
        if self.mode == "captioning":
            sims = emb @ self.caption_bank.T
            j = int(np.argmax(sims))
            return self.captions[j], float(dc.softmax(self.temperature * sims)[j])
        m = _EXISTENCE.search(prompt.lower())
        if m:
            return self._existence(emb, prompt, m.group("what").strip())
        logits = self.class_logits(emb, prompt)
        i = int(np.argmax(logits))
        return self.class_vocab.classes[i], float(dc.softmax(logits)[i])

    def _existence(self, emb, prompt, what):
        color = what[:-len(" object")] if what.endswith(" object") else what
        if what in self.class_vocab.classes:
            logits, idx = self.class_logits(emb, prompt), self.class_vocab.index(what)
        elif color in self.colors:
            logits, idx = self.temperature * (emb @ self.color_bank.T), self.colors.index(color)
        else:
            return "no", 1.0
        p_yes = float(dc.softmax(logits)[idx])
        yes = int(np.argmax(logits)) == idx
        return ("yes", p_yes) if yes else ("no", 1.0 - p_yes)


def reference_answerer(params, class_vocab, vocabulary, mode="classification", **kwargs):
    return ReferenceAnswerer(params, class_vocab, vocabulary, mode=mode, **kwargs)


def yes_confidence(answer):
    text, conf = answer
    return conf if text == "yes" else 1.0 - conf


@dataclass
class ClassBank:
    """Class-prompt embeddings used to map free-text answers back to classes."""

    params: object
    vocabulary: object
    classes: list
    template: str
    bank: np.ndarray

    @classmethod
    def build(cls, params, class_vocab, vocabulary):
        tpl = class_vocab.templates["classification"]
        bank = embed_texts(params, vocabulary, [tpl.format(c) for c in class_vocab.classes])
        return cls(params, vocabulary, list(class_vocab.classes), tpl, bank)


def answer_to_class(answer, class_bank):
    """Nearest class to ``"a photo of <answer>"``; ``MISS`` if the answer has no known word."""
    ids = class_bank.vocabulary.encode(answer)
    if not ids or all(i == 0 for i in ids):
        return MISS
    emb = embed_texts(class_bank.params, class_bank.vocabulary, [class_bank.template.format(answer)])[0]
    return int(np.argmax(class_bank.bank @ emb))


# -- query decomposition ------------------------------------------------------

def candidate_set(n_classes, gold, k, seed, sample_id):
    """Sorted ``k`` distinct class indices that always include ``gold``."""
    if k < 2:
        raise ValueError("query decomposition needs k >= 2")
    if k > n_classes:
        raise ValueError(f"k={k} exceeds the {n_classes} available classes")
    if not 0 <= gold < n_classes:
        raise ValueError("gold index out of range")
    if k == n_classes:
        return list(range(n_classes))
    rng = rng_for(seed, "qd", sample_id)
    others = [i for i in range(n_classes) if i != gold]
    picked = rng.choice(others, size=k - 1, replace=False)
    return sorted([gold] + [int(i) for i in picked])


def query_decomposition_classify(answerer, image, class_vocab, k, seed, gold, sample_id, with_context=True):
    """Ask one existence question per candidate and return the most confident class.

    ``gold`` only shapes the candidate set; the answerer never sees it.
    """
    cands = candidate_set(len(class_vocab.classes), gold, k, seed, sample_id)
    best, best_conf = None, -np.inf
    for i in cands:
        prompt = existence_prompt(class_vocab.classes[i], class_vocab, with_context)
        conf = yes_confidence(answerer.answer(image, prompt))
        if conf > best_conf:
            best, best_conf = i, conf
    return best
