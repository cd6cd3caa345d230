"""
A miniature few-positive sweep
==============================

Trains a quick segnet on a small phantom, then one classifier per
(disease, mode, n_pos, repetition) and ranks the feature modes by kappa.
Charts land in ./demo_sweep.
"""

from pathlib import Path

from segxfer.experiments import ExperimentConfig, compare_modes, format_comparison, make_split_plan, run_sweep
from segxfer.phantom import Corpus, CorpusConfig, build_corpus
from segxfer.plotting import sweep_charts, write_charts
from segxfer.training import TrainConfig, train_segnet

corpus = build_corpus(CorpusConfig.desk(seed=0, patients=8, slices=(4, 5), positives=12))
config = ExperimentConfig.desk(
    modes=("IMG", "SEG", "CONCAT"),
    n_pos=(1, 3),
    repetitions=2,
    folds=4,
    pos_pool=3,
    pos_test=8,
    cls_train=TrainConfig.for_clsnet(epochs=5),
)

# the segnet only sees patients outside the classification fold
plan = make_split_plan(config, corpus, "effusion", 0)
X, Y = Corpus.stack(corpus.normals_of(plan.seg_train_patients))
segnet, _ = train_segnet(TrainConfig(batch_size=8, batches_per_epoch=50, epochs=2), X, Y, n=4, levels=3)

out = Path("demo_sweep")
records = run_sweep(config, segnet, corpus, out_dir=out)
print(format_comparison(compare_modes(records, config.modes)))
for path in write_charts(sweep_charts(records, config.modes), out):
    print("wrote", path)
