"""Invariant checks behind ``vlwb verify``; each returns failure messages."""

import json
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import pipeline
from .datagen import read_imgf32
from .evalharness import EvalReport, percent_change
from .seeding import rng_for
from .vlmodel import ModelConfig, encode_image, init_params, similarity_logits

GRAD_TOL = 1e-4
FILE_TOL = 1e-6  # adversarial images are stored as float32


def check_gradients(graphs=10, seed=0, coords=24):
    """Finite-difference checks of d CE(similarity logits) / d pixels on random small encoders."""
    failures = []
    for g in range(graphs):
        rng = rng_for(seed, "verify-grad", g)
        cfg = ModelConfig(height=8, width=8, patch=4, patch_dim=6, hidden=10, embed_dim=5)
        params = init_params(cfg, vocab_size=4, seed=int(rng.integers(1 << 31))).frozen()
        bank = rng.normal(size=(4, cfg.embed_dim))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        x = rng.uniform(0.05, 0.95, size=cfg.image_shape)
        y = int(rng.integers(4))

        def build(t):
            return dc.softmax_cross_entropy(similarity_logits(encode_image(params, t), bank, 10.0), y)

        idx = rng.choice(x.size, size=min(coords, x.size), replace=False)
        res = dc.grad_check(build, x, coords=idx)
        if not res.max_error < GRAD_TOL:
            failures.append(f"gradient check {g}: relative error {res.max_error:.3g}")
    return failures


def check_percent_change():
    failures = []
    for pre, post, want in ((63.32, 11.78, "-81"), (36.58, 32.96, "-10"), (50.0, 50.0, "0")):
        got = percent_change(pre, post).display
        if got != want:
            failures.append(f"percent_change({pre}, {post}) displays {got}, expected {want}")
    if percent_change(0.0, 1.0).defined:
        failures.append("percent_change with pre = 0 must be undefined")
    return failures


def check_attack_dir(path, dataset):
    failures = []
    doc = json.loads((Path(path) / "results.json").read_text())
    c = doc["config"]
    clean = {s.id: s.image for s in dataset.val} if dataset is not None else {}
    for r in doc["results"]:
        if "file" not in r:
            continue
        adv = read_imgf32(Path(path) / r["file"])
        if adv.min() < 0.0 or adv.max() > 1.0:
            failures.append(f"{path}: {r['id']} has pixels outside [0, 1]")
        if c["method"] in ("PGD", "APGD"):
            eps = c["epsilon"]
            if r["linf"] > eps + 1e-9:
                failures.append(f"{path}: {r['id']} linf {r['linf']} exceeds epsilon {eps}")
            if r["id"] in clean and np.max(np.abs(adv - clean[r["id"]])) > eps + FILE_TOL:
                failures.append(f"{path}: stored image {r['id']} leaves the epsilon ball")
    return failures


def check_report(path):
    failures = []
    rep = EvalReport.load_json(path)
    stored = json.loads(Path(path).read_text())["rows"]
    for row, raw in zip(rep.rows, stored):
        for key in ("pct_change_normal", "pct_change_strong"):
            if getattr(row, key) != raw[key] and not (raw[key] is None and getattr(row, key) is None):
                failures.append(f"{path}: {row.task}/{row.attack} {key} does not recompute")
    return failures


def run_checks(cfg, graphs=10):
    failures = check_gradients(graphs) + check_percent_change()
    root = pipeline.run_dir(cfg)
    dataset = None
    if (pipeline.data_dir(cfg) / "manifest.json").exists():
        dataset = pipeline.load_data(cfg)
        vocab = dataset.vocabulary
        for s in dataset.samples:
            if s.image.min() < 0.0 or s.image.max() > 1.0:
                failures.append(f"sample {s.id} has pixels outside [0, 1]")
            if any(vocab.unk_count(c) for c in s.captions):
                failures.append(f"sample {s.id} has out-of-vocabulary caption words")
    if pipeline.model_path(cfg).exists() and dataset is not None:
        params = pipeline.load_model(cfg)
        emb = encode_image(params.frozen(), np.stack([s.image for s in dataset.val])).data
        if np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0)) > 1e-9:
            failures.append("image embeddings are not unit norm")
    for res in sorted(root.glob("attacks/*/*/results.json")):
        failures += check_attack_dir(res.parent, dataset)
    if (root / "eval" / "eval.json").exists():
        failures += check_report(root / "eval" / "eval.json")
    return failures
