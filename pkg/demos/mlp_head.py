"""Train the small MLP head on last-token embeddings.

The oracle mock embeds documents so that the two classes sit on either
side of the origin; the head has to find that direction.  The default
recipe is lr 1e-4 with linear decay, 100 epochs, weight decay 1e-3 and a
hidden layer of 10 units.  Batch size 16 replaces the default 256,
which gives too few updates on a thousand rows.
"""

import numpy as np

from relforge.docforge import DocParams, DocumentBuilder
from relforge.evalharness import oracle_scorer, shared_in_context
from relforge.metrics import auroc
from relforge.mlphead import HeadDataset, TrainConfig, init_head, predict, train
from relforge.synthetic import make_dataset

store, spec, split = make_dataset(seed=0).load()
scorer = oracle_scorer(spec, split)
builder = DocumentBuilder(spec, split, store)
params = DocParams(n_nest=4, d=1)
pool = shared_in_context(spec, split, 0, seed=0)


def embed(rows):
    X = np.stack([scorer.embed_last_token(builder.build(r, params, pool).text).values for r in rows])
    return HeadDataset(X, [r.target for r in rows])


train_set, val_set, test_set = embed(split.train[:1000]), embed(split.validation), embed(split.test)
cfg = TrainConfig(batch_size=16, seed=0)
head, hist = train(init_head(train_set.inputs.shape[1], 10, "logit", seed=0), train_set, cfg, val_set)
for epoch in (0, 9, 49, 99):
    print(f"epoch {epoch:3d}  lr {hist.lr[epoch]:.2e}  train loss {hist.train_loss[epoch]:.4f}  "
          f"validation AUROC {hist.val_metric[epoch]:.4f}")
print(f"best epoch {hist.best_epoch}; test AUROC {auroc(predict(head, test_set.inputs), test_set.targets):.4f}")
