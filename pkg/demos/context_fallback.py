"""What happens when a document is too long for the model.

The scorer raises ContextLengthExceeded (an HTTP 413 from a real server).
The harness halves the number of in-context and related examples and
rebuilds, until the document fits or nothing is left to remove.
"""

from relforge.docforge import DocParams, DocumentBuilder
from relforge.evalharness import build_with_fallback, shared_in_context
from relforge.scorer import MockScorer, ScorerConfig
from relforge.synthetic import make_dataset

store, spec, split = make_dataset(seed=0).load()
builder = DocumentBuilder(spec, split, store)
pool = shared_in_context(spec, split, 16, seed=0)
row = split.test[3]

for n in (16, 8, 4, 2):
    print(f"n_inc=n_rel={n:<2} -> {builder.build(row, DocParams(n, n), pool).token_estimate} tokens")

scorer = MockScorer(ScorerConfig(context_limit=700))
doc, dist, shrinks = build_with_fallback(builder, row, DocParams(16, 16), pool,
                                         lambda d: scorer.next_token_distribution(d.text))
for row_id, before, after in shrinks:
    print(f"row {row_id}: {before} -> {after}")
print(f"scored at {doc.params.label()} with {doc.token_estimate} tokens; p('1') = {dist.get('1')}")
