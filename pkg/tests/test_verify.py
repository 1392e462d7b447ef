import json

from vlwb import verify
from vlwb.evalharness import EvalReport, MetricRow


def test_gradient_checks_pass():
    assert verify.check_gradients(graphs=3) == []


def test_percent_change_checks_pass():
    assert verify.check_percent_change() == []


def test_report_check_detects_edited_annotation(tmp_path):
    rep = EvalReport([MetricRow("m", "t", "PGD", 80.0, 20.0, 0.0)])
    rep.save_json(tmp_path / "e.json")
    assert verify.check_report(tmp_path / "e.json") == []
    doc = json.loads((tmp_path / "e.json").read_text())
    doc["rows"][0]["pct_change_normal"] = -70.0
    (tmp_path / "e.json").write_text(json.dumps(doc))
    assert len(verify.check_report(tmp_path / "e.json")) == 1


def test_run_checks_on_empty_run(small_cfg):
    assert verify.run_checks(small_cfg, graphs=1) == []
