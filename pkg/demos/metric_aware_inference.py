"""Metric-aware decisions with scripted stand-ins for a language model.

For AUROC the score is p("1") after the document.  For MAE the prediction
is the median of the model's distribution over a grid of candidate values.
Here the "models" are mocks, so the numbers show the plumbing rather than
model quality: a reader that looks only at nested orders is useless
without nesting (d=0) and perfect with it.
"""

import json

from relforge.docforge import DocParams
from relforge.evalharness import GridSpec, oracle_scorer, run_grid
from relforge.inference import build_grid, median_predict
from relforge.relstore import parse_timestamp
from relforge.scorer import MockScorer, ScorerConfig
from relforge.synthetic import DAY, make_dataset

store, spec, split = make_dataset(seed=2, target="recent").load()
print(spec.task_description)


def recent_orders(text: str) -> dict[str, float]:
    entity = json.loads(text.rsplit("\n", 1)[-1])
    t = parse_timestamp(entity["timestamp"])
    n = sum(1 for o in entity.get("orders", []) if t - 30 * DAY <= parse_timestamp(o["ordered_at"]) < t)
    return {"1": 0.9, "0": 0.1} if n >= 2 else {"1": 0.1, "0": 0.9}


reader = MockScorer(ScorerConfig(max_in_flight=1), next_token_fn=recent_orders)
report = run_grid(spec, split, store, GridSpec((0,), (0,), (8,), (0, 1)), reader)
for params, res in report.configs.items():
    print(f"{params.label():<32} validation AUROC {res.validation_metric:.3f}  test AUROC {res.test_metric:.3f}")
print("selected:", report.selected.label())

# regression: the median over candidate values, here with a mock peaked on the truth
store, spec, split = make_dataset(seed=1, target="count").load()
grid = build_grid([r.target for r in split.train])
print(f"\n{spec.task_description}\ncandidates: {grid.values[0]:g} .. {grid.values[-1]:g} ({len(grid.values)} values)")
report = run_grid(spec, split, store, GridSpec((0, 8), (0,), (0,), (0,)), oracle_scorer(spec, split), test_cap=50, val_cap=50)
print("test MAE of the selected configuration:", report.selected_test_metric)

# a mock that spreads mass evenly over the first character gives the middle of the grid
flat = MockScorer(step_tables=[0.1])
print("median under a flat distribution:", median_predict("doc", build_grid([0, 10]), flat))
print(DocParams.parse("n_inc=8,d=1"))
