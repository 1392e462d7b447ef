"""Properties of the seed-42 default run: the trained encoder, its attacks and its reports."""

import json

import numpy as np
import pytest

from vlwb import pipeline, tasks, verify
from vlwb.evalharness import EvalReport, answerer_hits, classification_hits
from vlwb.vlmodel import embed_texts, encode_image


@pytest.fixture(scope="module")
def trained(default_run):
    ds = pipeline.load_data(default_run)
    return default_run, ds, pipeline.load_model(default_run)


def results(cfg, task, method, setting):
    return json.loads((pipeline.attack_dir(cfg, task, method, setting) / "results.json").read_text())


def rows(cfg):
    return {(r.task, r.attack): r for r in EvalReport.load_json(pipeline.run_dir(cfg) / "eval" / "eval.json").rows}


def test_same_class_images_are_closer(trained):
    _, ds, params = trained
    emb = encode_image(params, np.stack([s.image for s in ds.val])).data
    labels = np.array([s.class_index for s in ds.val])
    sims = emb @ emb.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    assert sims[same & off].mean() > sims[~same].mean()


def test_class_prompts_are_separated(trained):
    _, ds, params = trained
    a, b = embed_texts(params, ds.vocabulary, ["a photo of circle", "a photo of square"])
    assert float(a @ b) < 0.99


def test_caption_targets_prefer_own_captions(trained):
    _, ds, params = trained
    rng = np.random.default_rng(0)
    val = ds.val
    wins = 0
    for i, s in enumerate(val):
        target = tasks.build_caption_target(params, ds.vocabulary, s.captions)
        own = embed_texts(params, ds.vocabulary, s.captions) @ target
        j = (i + 1 + int(rng.integers(len(val) - 1))) % len(val)
        other = embed_texts(params, ds.vocabulary, [val[j].captions[int(rng.integers(5))]])[0] @ target
        wins += bool(np.all(own > other))
    assert wins >= 0.95 * len(val)


def test_pgd_normal_post_at_most_fifth_of_pre(trained):
    cfg, *_ = trained
    s = results(cfg, "classification", "pgd", "normal")["summary"]
    assert s["post_accuracy"] <= 0.2 * s["pre_accuracy"]


def test_apgd_beats_pgd_on_most_images(trained):
    cfg, *_ = trained
    pgd = {r["id"]: r["loss_last"] for r in results(cfg, "classification", "pgd", "normal")["results"]}
    apgd = {r["id"]: r["loss_best"] for r in results(cfg, "classification", "apgd", "normal")["results"]}
    share = np.mean([apgd[k] >= pgd[k] for k in pgd])
    assert share >= 0.7


def test_batch_pre_accuracy_matches_harness(trained):
    cfg, ds, params = trained
    target = tasks.build_classification_logits(params, ds.class_vocab, ds.vocabulary)
    harness = np.mean(classification_hits(target.scorer, ds.val))
    assert results(cfg, "classification", "pgd", "normal")["summary"]["pre_accuracy"] == harness


def test_apgd_strong_retrieval_collapses(trained):
    cfg, *_ = trained
    r = rows(cfg)[("retrieval: image-to-text recall@1", "APGD")]
    assert r.post_strong <= 0.25 * r.pre


def test_context_answerer_directions(trained):
    cfg, *_ = trained
    table = rows(cfg)
    plain, ctx = table[("classification: answerer acc", "PGD")], table[("classification: answerer acc (context)", "PGD")]
    assert ctx.pre >= plain.pre
    assert ctx.post_normal >= plain.post_normal


def test_qd_with_all_classes_matches_plain_on_clean(trained):
    cfg, ds, params = trained
    ev = pipeline.Evaluator(cfg, ds, params)
    clean = [s.image for s in ds.val]
    qd = np.mean(pipeline.qd_hits(ev.answerer, ds, clean, 8, ev.qd_seed))
    plain = np.mean(answerer_hits(ev.answerer, ds.val, "classification", False, clean, ev.class_bank))
    assert qd >= plain


def test_report_has_pre_and_post_columns(trained):
    cfg, *_ = trained
    md = (pipeline.run_dir(cfg) / "report" / "report.md").read_text()
    assert "| Model | Task | Attack | Pre | Post_N | Post_S |" in md
    assert md.count("| toy-clip |") == len(rows(cfg))


def test_verify_clean_on_default_run(trained):
    cfg, *_ = trained
    assert verify.run_checks(cfg, graphs=2) == []


def test_stored_adversarial_images_reload(trained):
    cfg, ds, _ = trained
    imgs = pipeline.load_attack_images(cfg, "classification", "pgd", "normal", ds)
    assert len(imgs) == len(ds.val)
    assert all(np.max(np.abs(a - s.image)) <= 8 / 255 + 1e-6 for a, s in zip(imgs, ds.val))
