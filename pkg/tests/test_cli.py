import json
import shutil
import subprocess

import pytest

from relforge.cli import main
from relforge.synthetic import make_dataset

from .stub_server import serve


@pytest.fixture(scope="module")
def shop_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("shop")
    schema, task = make_dataset(seed=0).write(d)
    return d, schema, task


def _jsonl(path):
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_ingest_writes_summary(shop_dir, tmp_path, capsys):
    _, schema, _ = shop_dir
    assert main(["ingest", "--schema", str(schema), "--out", str(tmp_path / "store")]) == 0
    summary = json.loads((tmp_path / "store" / "store.json").read_text())
    assert set(summary["tables"]) == {"regions", "users", "products", "orders", "order_items"}
    assert sum(t["rows"] for t in summary["tables"].values()) > 10_000
    assert len(summary["links"]) == 4


def test_pipeline_oracle_and_inverted(shop_dir, tmp_path, capsys):
    _, _, task = shop_dir
    docs = tmp_path / "docs.jsonl"
    assert main(["build-docs", "--task", str(task), "--params", "n_inc=4,n_rel=4,n_nest=2,d=1", "--out", str(docs)]) == 0
    recs = _jsonl(docs)
    assert len(recs) == 240 and all("target" not in r for r in recs)
    for kind, expected in (("mock:oracle", 1.0), ("mock:inverted", 0.0)):
        preds = tmp_path / f"{kind}.jsonl"
        assert main(["infer", "--task", str(task), "--docs", str(docs), "--scorer", kind, "--out", str(preds)]) == 0
        capsys.readouterr()
        assert main(["evaluate", "--task", str(task), "--preds", str(preds)]) == 0
        out = _last_json(capsys)
        assert out["metric"] == "auroc" and out["value"] == expected and out["n"] == 240


def test_store_directory_is_accepted(shop_dir, tmp_path, capsys):
    _, schema, task = shop_dir
    main(["ingest", "--schema", str(schema), "--out", str(tmp_path / "s")])
    docs = tmp_path / "d.jsonl"
    assert main(["build-docs", "--task", str(task), "--store", str(tmp_path / "s"), "--cap", "5", "--out", str(docs)]) == 0
    assert len(_jsonl(docs)) == 5


def test_train_split_docs_carry_targets(shop_dir, tmp_path):
    _, _, task = shop_dir
    docs = tmp_path / "train.jsonl"
    main(["build-docs", "--task", str(task), "--split", "train", "--out", str(docs)])
    recs = _jsonl(docs)
    assert len(recs) == 2100 and all(r["target"] in (0, 1) for r in recs)


def test_evaluate_without_task(tmp_path, capsys):
    preds = tmp_path / "p.jsonl"
    preds.write_text('{"row_id": 0, "pred": 1, "target": 2}\n{"row_id": 1, "pred": 3, "target": 2}\n')
    assert main(["evaluate", "--preds", str(preds), "--metric", "mae"]) == 0
    assert _last_json(capsys)["value"] == 1.0


def test_grid_command(shop_dir, tmp_path, capsys):
    _, _, task = shop_dir
    report = tmp_path / "r.json"
    assert main(["grid", "--task", str(task), "--scorer", "mock:oracle", "--grid", "n_inc=0|8,n_rel=0,n_nest=0|4,d=1",
                 "--cap", "100", "--report", str(report)]) == 0
    out = _last_json(capsys)
    assert out["selected_test_metric"] == 1.0
    assert len(json.loads(report.read_text())["configs"]) == 4


def test_train_head_command(shop_dir, tmp_path, capsys):
    _, _, task = shop_dir
    head, preds = tmp_path / "head.json", tmp_path / "hp.jsonl"
    assert main(["train-head", "--task", str(task), "--scorer", "mock:oracle", "--n-train", "400", "--epochs", "30",
                 "--batch-size", "16", "--lr", "1e-3", "--cap", "100", "--out", str(head), "--preds", str(preds)]) == 0
    assert json.loads(head.read_text())["hidden"] == 10
    capsys.readouterr()
    main(["evaluate", "--task", str(task), "--preds", str(preds)])
    assert _last_json(capsys)["value"] >= 0.99


def test_infer_over_http_with_context_fallback(shop_dir, tmp_path, capsys, monkeypatch):
    from relforge.evalharness import oracle_scorer
    from relforge.relstore import load_store
    from relforge.taskdef import load_task_file

    d, schema, task = shop_dir
    monkeypatch.delenv("RELFORGE_SCORER_URL", raising=False)
    spec, split = load_task_file(task, load_store(schema))
    docs = tmp_path / "docs.jsonl"
    main(["build-docs", "--task", str(task), "--params", "n_inc=16,n_rel=16", "--cap", "30", "--out", str(docs)])
    recs = _jsonl(docs)
    victim = recs[3]["text"]
    rejected = []

    def reject(path, req):
        if req["text"] == victim:
            rejected.append(req["text"])
            return True
        return False

    with serve(oracle_scorer(spec, split), reject=reject) as srv:
        preds = tmp_path / "p.jsonl"
        assert main(["infer", "--task", str(task), "--docs", str(docs), "--scorer", srv.url, "--out", str(preds)]) == 0
    out = _jsonl(preds)
    assert len(rejected) == 1 and len(out) == 30
    assert [r.get("shrinks") for r in out if "shrinks" in r] == [[{"from": [16, 16], "to": [8, 8]}]]
    assert "shrinks" in out[3]


def test_bad_inputs_fail_cleanly(tmp_path, capsys):
    bad = tmp_path / "schema.json"
    bad.write_text('{"tables": [{"name": "a", "columns": [{"name": "x", "dtype": "blob"}]}]}')
    assert main(["ingest", "--schema", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "blob" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


@pytest.mark.skipif(shutil.which("relforge") is None, reason="console script not installed")
def test_console_script(shop_dir, tmp_path):
    _, schema, _ = shop_dir
    res = subprocess.run(["relforge", "ingest", "--schema", str(schema), "--out", str(tmp_path / "x")],
                         capture_output=True, text=True, check=True)
    assert "order_items" in res.stdout
