"""Compare the plain answerer, the context-aware answerer and query decomposition.

    vlwb pipeline --out run          # once, about three minutes
    python demos/context_and_qd.py run

Prints accuracy on clean and attacked val images, then walks through one
query-decomposition decision.
"""

import sys

import numpy as np

from vlwb import pipeline, tasks
from vlwb.evalharness import answerer_hits, percent_change

cfg = pipeline.resolve_config(overrides={"out_dir": sys.argv[1] if len(sys.argv) > 1 else "run"})
ds = pipeline.load_data(cfg)
params = pipeline.load_model(cfg)
ev = pipeline.Evaluator(cfg, ds, params)
k = pipeline.qd_k(cfg)

conditions = {"clean": [s.image for s in ds.val]}
for m in ("pgd", "apgd", "cw"):
    conditions[f"{m}-normal"] = pipeline.load_attack_images(cfg, "classification", m, "normal", ds)

table = {}
for name, images in conditions.items():
    plain = 100 * np.mean(answerer_hits(ev.answerer, ds.val, "classification", False, images, ev.class_bank))
    ctx = 100 * np.mean(answerer_hits(ev.answerer, ds.val, "classification", True, images, ev.class_bank))
    qd = 100 * np.mean(pipeline.qd_hits(ev.answerer, ds, images, k, ev.qd_seed))
    table[name] = (plain, ctx, qd)

print(f"{'condition':<14}{'plain':>16}{'context':>16}{'QD (k=' + str(k) + ')':>16}")
for name, vals in table.items():
    cells = [f"{v:6.2f}" + ("" if name == "clean" else f" ({percent_change(table['clean'][i], v)})")
             for i, v in enumerate(vals)]
    print(f"{name:<14}" + "".join(f"{c:>16}" for c in cells))

s = ds.val[0]
adv = conditions["pgd-normal"][0]
cands = tasks.candidate_set(len(ds.class_vocab.classes), s.class_index, k, ev.qd_seed, s.id)
print(f"\nQD on {s.id} (gold: {s.class_name}) after PGD-Normal, candidates {[ds.class_vocab.classes[i] for i in cands]}")
for i in cands:
    c = ds.class_vocab.classes[i]
    prompt = tasks.existence_prompt(c, ds.class_vocab, with_context=True)
    print(f"  {prompt[:40]:<42} yes-confidence {tasks.yes_confidence(ev.answerer.answer(adv, prompt)):.3f}")
