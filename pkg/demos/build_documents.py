"""Turn a synthetic shop database into documents and watch them grow.

A task row (user, seed time) becomes one line of JSON: the user's own
fields, joined parent rows and, for d >= 1, the user's most recent orders
nested underneath.  In-context and related examples carry their target as
the last key; the row to predict does not.
"""

import json

from relforge.docforge import DocParams, DocumentBuilder
from relforge.evalharness import GridSpec, format_stats, shared_in_context, token_stats
from relforge.synthetic import make_dataset

store, spec, split = make_dataset(seed=0).load()
print({name: len(t.rows) for name, t in store.tables.items()})
print(f"{spec.name}: {len(split.train)} train / {len(split.validation)} validation / {len(split.test)} test rows")

builder = DocumentBuilder(spec, split, store)
pool = shared_in_context(spec, split, 16, seed=0)
row = split.test[0]

# zero-shot: just the descriptions and the entity to predict
print("\n" + builder.build(row, DocParams(), pool).text)

# one nesting level with two orders per user, each order with its items one level further down
doc = builder.build(row, DocParams(n_inc=2, n_rel=1, n_nest=2, d=2), pool)
print(f"\n{doc.n_inc_used} in-context, {doc.n_rel_used} related, ~{doc.token_estimate} tokens")
print(json.dumps(json.loads(doc.blocks[-1]), indent=2)[:1200])

# the token budget for every point of the default grid
rows = split.test[:60]
for p in GridSpec((0, 16), (0, 16), (0, 8), (0, 1)).points():
    mean, std = token_stats([builder.build(r, p, pool) for r in rows])
    print(f"{p.label():<32} {format_stats(mean, std)}")
