"""Train the hybrid model on a toy corpus where one keyword decides the label."""

# %%
import numpy as np

from pif.embed import build_vocab
from pif.interaction import HirModel, hir_forward
from pif.pipeline import model_config
from pif.synthetic import keyword_sentences
from pif.train import TrainConfig, evaluate, fit, length_buckets
from pif.treeio import Example, fallback_tree

rng = np.random.default_rng(0)
train = [Example(s, fallback_tree(s.tokens)) for s in keyword_sentences(80, rng)]
test = [Example(s, fallback_tree(s.tokens)) for s in keyword_sentences(40, rng)]

config = TrainConfig(d_e=32, d_h=16, hidden=16, batch_size=16, epochs=12, gradual_unfreeze=False)
model = HirModel(model_config(config, 2), build_vocab(ex.sentence for ex in train), np.random.default_rng(config.seed))

# %%
result = fit(model, train, config, log=print)
print(f"test error {evaluate(model, test):.1f}%")

# %%
# Per-token states and the pooled sentence vector of one example.
words, s, probs = hir_forward(test[0], model)
print(test[0].sentence.tokens, "label", test[0].sentence.label)
print("word states", words.shape, "class probabilities", probs.data.round(3))

# %%
for b in length_buckets(model, test, width=10):
    print(f"[{b.lo}, {b.hi if b.hi is not None else 'inf'})  n={b.count}  error={b.error_rate:.1f}%")
