"""
Phantom slices and a short segmentation run
===========================================

Build the desk phantom (64 px, 20 patients), hold out a few patients, train
a small segnet for a few hundred steps and score per-label Dice.
"""

import numpy as np

from segxfer.metrics import dice_per_label
from segxfer.nets import predict_labels
from segxfer.phantom import LABELS, Corpus, CorpusConfig, build_corpus
from segxfer.training import TrainConfig, train_segnet

corpus = build_corpus(CorpusConfig.desk(seed=0))
print(len(corpus.normals), "normal slices from", len(corpus.patients), "patients")
print({k: len(v) for k, v in corpus.positives.items()}, "positives")

held_out = corpus.patients[:4]
X, Y = Corpus.stack(corpus.normals_of(corpus.patients[4:]))
Xt, Yt = Corpus.stack(corpus.normals_of(held_out))

# the acceptance run uses 20 epochs of 100 batches; this is a quarter of that
config = TrainConfig(batch_size=10, batches_per_epoch=100, epochs=5, seed=0)
ckpt, history = train_segnet(config, X, Y, n=8, levels=4)
print("loss per epoch", np.round(history, 1))

pred = predict_labels(ckpt, Xt)
scores = np.mean([dice_per_label(p, t, len(LABELS)) for p, t in zip(pred, Yt)], axis=0)
for name, s in zip(LABELS, scores):
    print(f"{name:>4} {s:.3f}")
print("mean foreground Dice", scores[1:].mean().round(3))
