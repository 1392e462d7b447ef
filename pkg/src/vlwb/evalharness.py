"""Pre/post-attack metrics, percent-change annotations, group breakdowns and report files."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tasks import MISS, answer_to_class, context_prompt
from .vlmodel import embed_texts, encode_image


def _require(samples):
    if len(samples) == 0:
        raise ValueError("evaluation needs at least one sample")


def _images(samples, images):
    if images is None:
        return [s.image for s in samples]
    if len(images) != len(samples):
        raise ValueError(f"{len(images)} images for {len(samples)} samples")
    return list(images)


def classification_hits(scorer_factory, samples, images=None):
    _require(samples)
    hits = []
    for s, img in zip(samples, _images(samples, images)):
        scorer = scorer_factory(s)
        hits.append(scorer.predict(img) == scorer.label)
    return hits


def eval_classification(scorer_factory, samples, images=None):
    """Top-1 accuracy in percent; ``images`` replaces the clean images (e.g. adversarial ones)."""
    return 100.0 * float(np.mean(classification_hits(scorer_factory, samples, images)))


def retrieval_hits(params, vocabulary, gallery, query_images=None):
    if len(gallery) < 2:
        raise ValueError("retrieval gallery needs at least 2 images")
    captions = [c for s in gallery for c in s.captions]
    bank = embed_texts(params, vocabulary, captions)
    emb = encode_image(params.frozen(), np.stack(_images(gallery, query_images))).data
    top = np.argmax(emb @ bank.T, axis=1)
    # identical attribute tuples give identical caption strings, so ownership is by string
    return [captions[t] in s.captions for s, t in zip(gallery, top)]


def eval_retrieval_recall1(params, vocabulary, gallery, query_images=None):
    """Image-to-text recall@1 in percent against every caption of the gallery."""
    return 100.0 * float(np.mean(retrieval_hits(params, vocabulary, gallery, query_images)))


def answerer_hits(answerer, samples, mode="classification", with_context=False, images=None, class_bank=None):
    _require(samples)
    imgs = _images(samples, images)
    cv = answerer.class_vocab
    if mode == "classification":
        if class_bank is None:
            raise ValueError("classification mode needs a class bank")
        question = cv.templates["question"]
        out = []
        for s, img in zip(samples, imgs):
            # the context sentence is that of the correct object
            prompt = context_prompt(question, cv, [s.class_name]) if with_context else question
            idx = answer_to_class(answerer.answer(img, prompt)[0], class_bank)
            out.append(idx != MISS and idx == s.class_index)
        return out
    if mode == "retrieval":
        captions = [c for s in samples for c in s.captions]
        bank = embed_texts(answerer.params, answerer.vocabulary, captions)
        prompt = cv.templates["caption"]
        out = []
        for s, img in zip(samples, imgs):
            text = answerer.answer(img, prompt)[0]
            emb = embed_texts(answerer.params, answerer.vocabulary, [text])[0]
            out.append(captions[int(np.argmax(bank @ emb))] in s.captions)
        return out
    raise ValueError(f"unknown evaluation mode {mode!r}")


def eval_answerer(answerer, samples, mode="classification", with_context=False, images=None, class_bank=None):
    """Answerer accuracy in percent; misses (unmappable answers) count as errors.

    With ``with_context`` each classification query carries the context
    sentence of the sample's own class.
    """
    return 100.0 * float(np.mean(answerer_hits(answerer, samples, mode, with_context, images, class_bank)))


# -- percent change -----------------------------------------------------------

def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class PercentChange:
    raw: float | None

    @property
    def defined(self):
        return self.raw is not None

    @property
    def display(self):
        if self.raw is None:
            return "n/a"
        v = round_half_away(self.raw)
        return f"+{v}" if v > 0 else str(v)

    def __str__(self):
        return self.display


def percent_change(pre, post):
    """``(post - pre) / pre * 100``; undefined (``raw=None``) when ``pre`` is 0."""
    if pre == 0:
        return PercentChange(None)
    return PercentChange((post - pre) / pre * 100.0)


# -- report rows --------------------------------------------------------------

@dataclass
class MetricRow:
    model: str
    task: str
    attack: str
    pre: float
    post_normal: float
    post_strong: float
    pct_change_normal: float | None = None
    pct_change_strong: float | None = None

    def __post_init__(self):
        self.pct_change_normal = percent_change(self.pre, self.post_normal).raw
        self.pct_change_strong = percent_change(self.pre, self.post_strong).raw

    def cells(self):
        def fmt(post, pct):
            return f"{post:.2f} ({PercentChange(pct).display})"

        return [
            self.model, self.task, self.attack, f"{self.pre:.2f}",
            fmt(self.post_normal, self.pct_change_normal), fmt(self.post_strong, self.pct_change_strong),
        ]


@dataclass
class BreakdownRow:
    key: str
    n: int
    pre: float
    post: float
    drop: float


@dataclass
class Breakdown:
    title: str
    rows: list
    notes: list = field(default_factory=list)


def breakdown_by(items, key_fn, pre_results, post_results, title="breakdown", expected_keys=()):
    """Per-group pre/post accuracy (percent) and drop, sorted by drop, largest first.

    ``pre_results`` and ``post_results`` are per-item correctness flags aligned
    with ``items``.  Keys listed in ``expected_keys`` that have no items are
    omitted and noted.
    """
    if not (len(items) == len(pre_results) == len(post_results)):
        raise ValueError("items and results must align")
    groups = {}
    for item, a, b in zip(items, pre_results, post_results):
        groups.setdefault(key_fn(item), []).append((bool(a), bool(b)))
    rows = []
    for key, vals in groups.items():
        pre = 100.0 * float(np.mean([a for a, _ in vals]))
        post = 100.0 * float(np.mean([b for _, b in vals]))
        rows.append(BreakdownRow(key, len(vals), pre, post, pre - post))
    rows.sort(key=lambda r: (-r.drop, str(r.key)))
    notes = [f"group {k!r} has no samples; omitted" for k in expected_keys if k not in groups]
    return Breakdown(title, rows, notes)


@dataclass
class EvalReport:
    rows: list
    breakdowns: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    header: str = ""

    def to_dict(self):
        return {
            "seed": self.seed,
            "header": self.header,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "breakdowns": [asdict(b) for b in self.breakdowns],
        }

    @classmethod
    def from_dict(cls, d):
        rows = [MetricRow(**{k: r[k] for k in ("model", "task", "attack", "pre", "post_normal", "post_strong")})
                for r in d["rows"]]
        bds = [Breakdown(b["title"], [BreakdownRow(**r) for r in b["rows"]], b.get("notes", []))
               for b in d.get("breakdowns", [])]
        return cls(rows, bds, d.get("config", {}), d.get("seed", 0), d.get("header", ""))

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "task", "attack", "pre", "post_normal", "post_strong",
                    "pct_change_normal", "pct_change_strong"])
        for r in self.rows:
            w.writerow([r.model, r.task, r.attack, repr(r.pre), repr(r.post_normal), repr(r.post_strong),
                        "" if r.pct_change_normal is None else repr(r.pct_change_normal),
                        "" if r.pct_change_strong is None else repr(r.pct_change_strong)])
        return buf.getvalue()

    def to_markdown(self):
        out = []
        if self.header:
            out += [self.header, ""]
        tasks = list(dict.fromkeys(r.task for r in self.rows))
        for task in tasks:
            out += [f"### {task}", "", "| Model | Task | Attack | Pre | Post_N | Post_S |",
                    "|---|---|---|---|---|---|"]
            out += ["| " + " | ".join(r.cells()) + " |" for r in self.rows if r.task == task]
            out.append("")
        for b in self.breakdowns:
            out += [f"### {b.title}", "", "| Group | n | Pre | Post | Drop |", "|---|---|---|---|---|"]
            out += [f"| {r.key} | {r.n} | {r.pre:.2f} | {r.post:.2f} | {r.drop:.2f} |" for r in b.rows]
            out += [f"- {n}" for n in b.notes]
            out.append("")
        return "\n".join(out)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.md").write_text(self.to_markdown())
        if self.breakdowns:
            write_breakdown_svg(out / "breakdown.svg", self.breakdowns[0])
        return out


def write_breakdown_svg(path, breakdown):
    """Horizontal bar chart of per-group accuracy drops (byte-stable output)."""
    import matplotlib

    from matplotlib.figure import Figure

    rows = breakdown.rows
    fig = Figure(figsize=(6, 0.5 + 0.45 * max(1, len(rows))))
    ax = fig.add_subplot()
    keys = [str(r.key) for r in rows][::-1]
    drops = [r.drop for r in rows][::-1]
    ax.barh(keys, drops, color="#4c72b0")
    ax.set_xlabel("accuracy drop (points)")
    ax.set_title(breakdown.title)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "vlwb", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path
