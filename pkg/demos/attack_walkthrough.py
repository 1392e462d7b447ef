"""Train a small encoder and watch PGD, APGD and CW take one image apart.

    python demos/attack_walkthrough.py

Runs in about ten seconds: 4 classes, 60 images each, 100 epochs.
"""

import numpy as np

from vlwb import attacks, tasks
from vlwb.datagen import SyntheticSpec, in_memory_dataset
from vlwb.vlmodel import ModelConfig, contrastive_train, init_params

ds = in_memory_dataset(SyntheticSpec(classes=("circle", "square", "triangle", "ring"), per_class=60))
vocab, cv = ds.vocabulary, ds.class_vocab
params = init_params(ModelConfig(), len(vocab), seed=0)
params, curve = contrastive_train(params, ds, epochs=100, batch=16, seed=1)
print(f"zero-shot val accuracy after training: {curve[-1]['val_accuracy']:.3f}")

target = tasks.build_classification_logits(params, cv, vocab)
sample = next(s for s in ds.val if target.scorer(s).predict(s.image) == s.class_index)
scorer = target.scorer(sample)
probs = np.exp(scorer.logits(sample.image) - scorer.logits(sample.image).max())
print(f"\nimage {sample.id}: a {sample.attributes['color']} {sample.class_name}, "
      f"p(gold) = {probs[sample.class_index] / probs.sum():.3f}")

for method in ("pgd", "apgd", "cw"):
    for setting in ("normal", "strong"):
        cfg = attacks.preset(method, setting)
        res = attacks.attack(scorer, sample.image, cfg)
        pred = cv.classes[scorer.predict(res.adv_image)]
        traj = res.loss_trajectory
        print(f"{method.upper():>4}-{setting:<6}  -> {pred:<8}  linf {res.linf_norm:.4f}  l2 {res.l2_norm:.3f}  "
              f"objective {traj[0]:.3f} -> {traj[-1]:.3f}")

# APGD halves its step when progress stalls; the schedule is kept for inspection
res = attacks.apgd_attack(scorer, sample.image, attacks.preset("apgd", "normal"))
print("\nAPGD step sizes (x255):", sorted({round(s * 255, 3) for s in res.diagnostics["step_sizes"]}, reverse=True))
