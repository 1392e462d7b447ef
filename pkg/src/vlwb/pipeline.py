"""Run configuration and the on-disk pipeline stages behind the CLI.

A run directory holds one subdirectory per stage::

    data/                       manifest.json, images/*.imgf32
    model/                      params.vlwb, curve.json
    attacks/<task>/<m>-<s>/     results.json, adv/*.imgf32
    eval/                       eval.json
    qd/                         qd.json
    report/                     report.csv, report.md, breakdown.svg

Each stage writes ``config.toml``, the fully resolved configuration it ran with.
"""

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import attacks, datagen, tasks, vlmodel
from .evalharness import (
    EvalReport,
    MetricRow,
    answerer_hits,
    breakdown_by,
    classification_hits,
    retrieval_hits,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

TASKS = ("classification", "retrieval", "vqa-synthetic")
METHODS = ("pgd", "apgd", "cw")
SETTINGS = ("normal", "strong")

DEFAULTS = {
    "seed": 42,
    "out_dir": "run",
    "parallelism": 1,
    "data": {
        "classes": list(datagen.DEFAULT_CLASSES),
        "colors": list(datagen.DEFAULT_COLORS),
        "per_class": 100,
        "height": 32,
        "width": 32,
        "channels": 3,
        "noise_std": 0.03,
    },
    "model": {
        "patch": 8,
        "patch_dim": 32,
        "hidden": 64,
        "token_dim": 32,
        "text_hidden": 64,
        "embed_dim": 32,
        "init_temperature": 10.0,
    },
    "train": {"epochs": 100, "batch": 16, "lr": 0.1, "schedule": "cosine", "adv_epsilon": 4 / 255},
    "attack": {
        "method": "pgd",
        "setting": "normal",
        "task": "classification",
        "random_start": False,
        "cw_optimizer": "gd",
    },
    "eval": {
        "model_tag": "toy-clip",
        "tasks": list(TASKS),
        "methods": list(METHODS),
        "settings": list(SETTINGS),
        "with_context": True,
        "context_weight": 1.0,
        "qd": True,
        "k": 4,
        "breakdown_task": "vqa-synthetic",
        "breakdown_method": "apgd",
    },
}

# keys that may be set but have no default (explicit AttackConfig fields)
OPTIONAL = {"attack": {"steps": int, "step_size": float, "epsilon": float, "c": float, "kappa": float}}

_CHOICES = {
    ("attack", "method"): METHODS,
    ("attack", "setting"): SETTINGS,
    ("attack", "task"): TASKS,
    ("attack", "cw_optimizer"): ("gd", "adam"),
    ("train", "schedule"): ("constant", "cosine"),
    ("eval", "breakdown_task"): TASKS,
    ("eval", "breakdown_method"): METHODS,
}


class ConfigError(ValueError):
    pass


def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(base, update, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            section = prefix.rstrip(".")
            kind = OPTIONAL.get(section, {}).get(key)
            if kind is None:
                raise ConfigError(f"unknown config key {path!r}")
            base[key] = _check_type(path, value, kind(0))
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            _merge(base[key], value, f"{path}.")
        else:
            base[key] = _check_type(path, value, base[key])


def _validate(cfg):
    for (section, key), choices in _CHOICES.items():
        if cfg[section][key] not in choices:
            raise ConfigError(f"{section}.{key}: {cfg[section][key]!r} not in {list(choices)}")
    for key, allowed in (("tasks", TASKS), ("methods", METHODS), ("settings", SETTINGS)):
        bad = [v for v in cfg["eval"][key] if v not in allowed]
        if bad:
            raise ConfigError(f"eval.{key}: unknown values {bad}")
    if cfg["parallelism"] < 1:
        raise ConfigError("parallelism must be >= 1")
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    if cfg["eval"]["k"] < 2:
        raise ConfigError("eval.k must be at least 2")
    try:
        data_spec(cfg)
        model_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve_config(file_values=None, overrides=None):
    """Defaults, then the config file, then flag overrides (later wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    for layer in (file_values or {}, overrides or {}):
        _merge(cfg, layer)
    _validate(cfg)
    return cfg


def load_config_file(path):
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_config(out_dir, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_bytes(tomli_w.dumps(cfg).encode())


def stage_seed(cfg, label):
    return derive_seed(cfg["seed"], label)


def qd_k(cfg):
    """Query-decomposition candidate count, capped at the number of classes."""
    return min(cfg["eval"]["k"], len(cfg["data"]["classes"]))


def data_spec(cfg):
    d = cfg["data"]
    return datagen.SyntheticSpec(
        classes=tuple(d["classes"]), colors=tuple(d["colors"]), per_class=d["per_class"], height=d["height"],
        width=d["width"], channels=d["channels"], noise_std=d["noise_std"], seed=stage_seed(cfg, "data"),
    )


def model_config(cfg):
    d = cfg["data"]
    return vlmodel.ModelConfig(height=d["height"], width=d["width"], channels=d["channels"], **cfg["model"])


def attack_config(cfg, method=None, setting=None):
    a = cfg["attack"]
    method = (method or a["method"]).upper()
    setting = (setting or a["setting"]).capitalize()
    explicit = {k: a[k] for k in OPTIONAL["attack"] if k in a}
    kw = dict(seed=stage_seed(cfg, "attack"), random_start=a["random_start"])
    if method == "CW":
        kw["optimizer"] = a["cw_optimizer"]
    try:
        return attacks.preset(method, setting, **kw, **explicit)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- paths --------------------------------------------------------------------

def run_dir(cfg):
    return Path(cfg["out_dir"])


def data_dir(cfg):
    return run_dir(cfg) / "data"


def model_path(cfg):
    return run_dir(cfg) / "model" / "params.vlwb"


def attack_dir(cfg, task, method, setting):
    return run_dir(cfg) / "attacks" / task / f"{method.lower()}-{setting.lower()}"


def _need(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


# -- stages -------------------------------------------------------------------

def gen_data(cfg, overwrite=False, ppm=False):
    spec = data_spec(cfg)
    out = data_dir(cfg)
    manifest = out / "manifest.json"
    if manifest.exists() and not overwrite:
        # rerunning with an identical spec rewrites identical bytes
        old = json.loads(manifest.read_text()).get("spec")
        overwrite = old == datagen._spec_dict(spec)
    ds = datagen.generate_dataset(spec, out, overwrite=overwrite, ppm=ppm)
    write_config(out, cfg)
    return ds


def load_data(cfg):
    return datagen.load_dataset(_need(data_dir(cfg), "dataset (run gen-data first)"))


def train(cfg, dataset=None):
    ds = dataset or load_data(cfg)
    t = cfg["train"]
    seed = stage_seed(cfg, "train")
    p0 = vlmodel.init_params(model_config(cfg), len(ds.vocabulary), seed=seed)
    params, curve = vlmodel.contrastive_train(
        p0, ds, epochs=t["epochs"], batch=t["batch"], lr=t["lr"], seed=seed, schedule=t["schedule"],
        adv_epsilon=t["adv_epsilon"],
    )
    out = model_path(cfg).parent
    out.mkdir(parents=True, exist_ok=True)
    vlmodel.save_params(model_path(cfg), params)
    (out / "curve.json").write_text(json.dumps(curve, indent=2))
    write_config(out, cfg)
    return params, curve


def load_model(cfg):
    return vlmodel.load_params(_need(model_path(cfg), "model checkpoint (run train first)"))


def attack_target(params, dataset, task):
    val = dataset.val
    if task == "classification":
        return tasks.build_classification_logits(params, dataset.class_vocab, dataset.vocabulary)
    if task == "retrieval":
        return tasks.build_retrieval_scorer(params, dataset.vocabulary, val)
    return tasks.build_retrieval_scorer(params, dataset.vocabulary, val, caption_fn=tasks.synth_caption_for_attack)


def attack(cfg, task=None, method=None, setting=None, dataset=None, params=None):
    """Attack every val image; writes results.json and adversarial images."""
    task = task or cfg["attack"]["task"]
    method = method or cfg["attack"]["method"]
    setting = setting or cfg["attack"]["setting"]
    ds = dataset or load_data(cfg)
    params = params or load_model(cfg)
    acfg = attack_config(cfg, method, setting)
    target = attack_target(params, ds, task)
    results, summary = attacks.run_attack_batch(target.scorer, ds.val, acfg, parallelism=cfg["parallelism"])
    out = attack_dir(cfg, task, method, setting)
    attacks.write_attack_outputs(out, ds.val, results, acfg, summary)
    write_config(out, cfg)
    return results, summary


def load_attack_images(cfg, task, method, setting, dataset):
    out = _need(attack_dir(cfg, task, method, setting), f"{task} {method}-{setting} attack outputs")
    doc = json.loads((out / "results.json").read_text())
    by_id = {r["id"]: r for r in doc["results"]}
    images = []
    for s in dataset.val:
        rec = by_id.get(s.id)
        if rec is None:
            raise FileNotFoundError(f"{out}: no result for sample {s.id}")
        images.append(s.image if "file" not in rec else datagen.read_imgf32(out / rec["file"]))
    return images


# -- evaluation ---------------------------------------------------------------

@dataclass
class Question:
    sample_index: int
    group: str
    prompt: str
    expected: str


def existence_questions(dataset):
    """One yes and one no existence question per val image about its shape, and about its color."""
    cv = dataset.class_vocab
    classes, colors = cv.classes, list(dataset.spec.colors)
    out = []
    for i, s in enumerate(dataset.val):
        other = classes[(s.class_index + 1) % len(classes)]
        color = s.attributes["color"]
        other_color = colors[(colors.index(color) + 1) % len(colors)]
        out += [
            Question(i, "class", tasks.existence_prompt(s.class_name), "yes"),
            Question(i, "class", tasks.existence_prompt(other), "no"),
            Question(i, "color", tasks.existence_prompt(f"{color} object"), "yes"),
            Question(i, "color", tasks.existence_prompt(f"{other_color} object"), "no"),
        ]
    return out


def question_hits(answerer, questions, images):
    return [answerer.answer(images[q.sample_index], q.prompt)[0] == q.expected for q in questions]


def qd_hits(answerer, dataset, images, k, seed, with_context=True):
    cv = dataset.class_vocab
    return [
        tasks.query_decomposition_classify(answerer, img, cv, k, seed, s.class_index, s.id, with_context)
        == s.class_index
        for s, img in zip(dataset.val, images)
    ]


def _pct(hits):
    return 100.0 * float(np.mean(hits))


class Evaluator:
    """All per-condition metrics for one model and dataset."""

    def __init__(self, cfg, dataset, params):
        self.cfg = cfg
        self.ds = dataset
        self.params = params
        e = cfg["eval"]
        cv, vocab = dataset.class_vocab, dataset.vocabulary
        self.cls_target = tasks.build_classification_logits(params, cv, vocab)
        self.class_bank = tasks.ClassBank.build(params, cv, vocab)
        colors = list(dataset.spec.colors)
        self.answerer = tasks.reference_answerer(params, cv, vocab, context_weight=e["context_weight"], colors=colors)
        captions = [c for s in dataset.val for c in s.captions]
        self.captioner = tasks.reference_answerer(params, cv, vocab, mode="captioning", captions=captions)
        self.qd_seed = stage_seed(cfg, "qd")

    def metrics(self, task, images):
        """Metric name -> accuracy (percent) on ``images`` for an attack built for ``task``."""
        ds, e = self.ds, self.cfg["eval"]
        val = ds.val
        out = {}
        if task in ("classification", "vqa-synthetic"):
            out["visual encoder acc@1"] = _pct(classification_hits(self.cls_target.scorer, val, images))
        if task == "classification":
            out["answerer acc"] = _pct(answerer_hits(self.answerer, val, "classification", False, images,
                                                     self.class_bank))
            if e["with_context"]:
                out["answerer acc (context)"] = _pct(
                    answerer_hits(self.answerer, val, "classification", True, images, self.class_bank))
            if e["qd"]:
                out["qd acc"] = _pct(qd_hits(self.answerer, ds, images, qd_k(self.cfg), self.qd_seed))
        if task == "retrieval":
            out["image-to-text recall@1"] = _pct(retrieval_hits(self.params, ds.vocabulary, val, images))
            out["answer-to-text recall@1"] = _pct(answerer_hits(self.captioner, val, "retrieval", False, images))
        if task == "vqa-synthetic":
            out["existence qa acc"] = _pct(question_hits(self.answerer, existence_questions(ds), images))
        return out


def evaluate(cfg, dataset=None, params=None):
    ds = dataset or load_data(cfg)
    params = params or load_model(cfg)
    e = cfg["eval"]
    ev = Evaluator(cfg, ds, params)
    clean = [s.image for s in ds.val]
    rows = []
    for task in e["tasks"]:
        pre = ev.metrics(task, clean)
        for method in e["methods"]:
            post = {st: ev.metrics(task, load_attack_images(cfg, task, method, st, ds)) for st in SETTINGS
                    if st in e["settings"]}
            for metric, value in pre.items():
                rows.append(MetricRow(
                    model=e["model_tag"], task=f"{task}: {metric}", attack=method.upper(), pre=value,
                    post_normal=post["normal"][metric] if "normal" in post else float("nan"),
                    post_strong=post["strong"][metric] if "strong" in post else float("nan"),
                ))
    breakdowns = []
    bt, bm = e["breakdown_task"], e["breakdown_method"]
    if bt in e["tasks"] and bm in e["methods"] and "normal" in e["settings"]:
        qs = existence_questions(ds)
        adv = load_attack_images(cfg, bt, bm, "normal", ds)
        breakdowns.append(breakdown_by(
            qs, lambda q: q.group, question_hits(ev.answerer, qs, clean), question_hits(ev.answerer, qs, adv),
            title=f"existence-question accuracy drop after {bm.upper()}-Normal ({bt} target)",
            expected_keys=("class", "color"),
        ))
    n = len(ds.val)
    header = (f"Toy-scale evaluation: {n} val images, retrieval gallery of {n} images / {5 * n} captions, "
              f"master seed {cfg['seed']}. Accuracies in percent; parentheses give % change from Pre.")
    report = EvalReport(rows, breakdowns, cfg, cfg["seed"], header)
    out = run_dir(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "eval.json")
    write_config(out, cfg)
    return report


def qd_classify(cfg, dataset=None, params=None):
    """QD vs plain answerer accuracy on clean and classification-attacked val images."""
    ds = dataset or load_data(cfg)
    params = params or load_model(cfg)
    e = cfg["eval"]
    ev = Evaluator(cfg, ds, params)
    conditions = {"clean": [s.image for s in ds.val]}
    for m in e["methods"]:
        for st in e["settings"]:
            conditions[f"{m}-{st}"] = load_attack_images(cfg, "classification", m, st, ds)
    k = qd_k(cfg)
    out = {"k": k, "seed": ev.qd_seed, "conditions": {}}
    for name, images in conditions.items():
        out["conditions"][name] = {
            "qd_acc": _pct(qd_hits(ev.answerer, ds, images, k, ev.qd_seed)),
            "plain_acc": _pct(answerer_hits(ev.answerer, ds.val, "classification", False, images, ev.class_bank)),
        }
    d = run_dir(cfg) / "qd"
    d.mkdir(parents=True, exist_ok=True)
    (d / "qd.json").write_text(json.dumps(out, indent=2))
    write_config(d, cfg)
    return out


def report(cfg):
    rep = EvalReport.load_json(_need(run_dir(cfg) / "eval" / "eval.json", "evaluation (run eval first)"))
    out = rep.write(run_dir(cfg) / "report")
    write_config(out, cfg)
    return rep


def run_all(cfg):
    """gen-data, train, every configured attack, eval and report."""
    ds = gen_data(cfg, overwrite=True)
    params, _ = train(cfg, ds)
    e = cfg["eval"]
    for task in e["tasks"]:
        for m in e["methods"]:
            for st in e["settings"]:
                attack(cfg, task, m, st, ds, params)
    rep = evaluate(cfg, ds, params)
    report(cfg)
    return rep
