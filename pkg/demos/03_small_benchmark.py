"""
A leave-one-subject-out run in under a minute
=============================================

The full comparison trains on six simulated drivers for thirty epochs.  This
version shrinks every knob (two drivers, one epoch, a random 8-dimensional
encoder) so that the whole loop of splitting, training, few-shot adaptation
and scoring can be read and run quickly.  The accuracies are meaningless.
"""

from uwbdar.bench import ExperimentConfig, default_factory, format_table, run_ablation, synthetic_corpus
from uwbdar.model import EncoderConfig, random_bundle

corpus = synthetic_corpus(n_subjects=2, per_class=2, shot_pool=4, window_s=1.0)
print(len(corpus), "windows,", len(corpus.reserved), "reserved for few-shot adaptation")

bundle = random_bundle(EncoderConfig(d=8, layers=1, heads=2), seed=0)
factory = default_factory(bundle)

base = ExperimentConfig(window=1, epochs=1, batch=7, adapt_epochs=2, seeds=(0,), folds_per_seed=None)

# %%
# Input strategies on the range map.
reports = run_ablation({"adapt": ["isa", "simple", "pevmanip"]}, corpus, factory, base.replace(domain="range"))
print(format_table(reports))

# %%
# Few-shot adaptation: shots come from the held-out driver's reserved pool.
reports = run_ablation({"shots": [0, 2, 4]}, corpus, factory, base.replace(domain="fusion"))
print(format_table(reports))
print("trend:", reports[0].extras["trend"])

# %%
# Each report carries a confusion matrix and the Drive-vs-rest accuracy.
print(reports[-1].confusion_text())
