"""Command-line wiring: the full workflow, output shapes, exit codes."""

import contextlib
import io
import json

import pytest

from evidgen.cli import main
from evidgen.corpus import load_examples_jsonl
from evidgen.synthetic import rule_based_reader

TRAIN_CFG = (
    "total_steps = 8\n"
    "eval_interval = 4\n"
    "warmup_steps = 2\n"
    "batch_size = 8\n"
    "top_n = 10\n"
)


def _run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One chained CLI run: synthesize, train, mine, label, score."""
    root = tmp_path_factory.mktemp("cli")
    data, gen, mined, labeler, silver = (root / name for name in
                                         ("data", "gen", "mined", "labeler", "silver"))
    cfg = root / "train.cfg"
    cfg.write_text(TRAIN_CFG, encoding="utf-8")
    outputs = {}

    def step(name, argv):
        code, out = _run(argv)
        assert code == 0, f"{name} failed: {out}"
        outputs[name] = out

    step("gen", ["gen-synthetic", "--n-examples", "30", "--seed", "3",
                 "--out", str(data)])
    step("train", ["train-generator", "--config", str(cfg),
                   "--train", str(data / "examples.jsonl"),
                   "--dev", str(data / "examples.jsonl"),
                   "--labels", str(data / "labels.jsonl"),
                   "--lambda", "0.5", "--seed", "0", "--out", str(gen)])
    checkpoint = json.loads(outputs["train"])["checkpoint"]
    step("mine", ["mine-loo", "--examples", str(data / "examples.jsonl"),
                  "--checkpoint", checkpoint, "--limit", "4",
                  "--chunk-size", "5", "--out", str(mined)])
    step("labeler", ["train-labeler", "--records", str(data / "records.json"),
                     "--mined", str(mined / "mined_pairs.jsonl"),
                     "--examples", str(data / "examples.jsonl"),
                     "--seed", "0", "--out", str(labeler)])
    step("silver", ["label-silver", "--labeler", str(labeler / "labeler.npz"),
                    "--examples", str(data / "examples.jsonl"),
                    "--threshold", "0.5", "--out", str(silver)])
    return {"root": root, "data": data, "gen": gen, "mined": mined,
            "labeler": labeler, "silver": silver, "checkpoint": checkpoint,
            "outputs": outputs}


def test_gen_synthetic_writes_dataset(workspace):
    data = workspace["data"]
    assert (data / "examples.jsonl").exists()
    assert (data / "labels.jsonl").exists()
    records = json.loads((data / "records.json").read_text())
    assert len(records) == 30
    assert "wrote 30 examples" in workspace["outputs"]["gen"]


def test_train_generator_reports_checkpoint(workspace):
    summary = json.loads(workspace["outputs"]["train"])
    assert set(summary) == {"best_score", "best_step", "checkpoint", "lambda"}
    assert summary["lambda"] == 0.5
    assert summary["checkpoint"].endswith("best.npz")


def test_mine_loo_writes_artifacts(workspace):
    mined = workspace["mined"]
    assert (mined / "mined_pairs.jsonl").exists()
    assert (mined / "loo_verdicts.jsonl").exists()
    summary = json.loads(workspace["outputs"]["mine"])
    assert summary["verdicts"] == 8  # 4 examples, 10 passages, chunks of 5


def test_train_labeler_reports_accuracy(workspace):
    summary = json.loads(workspace["outputs"]["labeler"])
    assert 0.0 <= summary["best_dev_accuracy"] <= 1.0
    assert summary["train_instances"] > summary["dev_instances"] > 0
    assert (workspace["labeler"] / "labeler.npz").exists()


def test_label_silver_covers_every_passage(workspace):
    summary = json.loads(workspace["outputs"]["silver"])
    assert summary["labels"] == 300
    rows = [json.loads(line) for line in
            (workspace["silver"] / "silver_labels.jsonl").read_text().splitlines()]
    assert all(row["provenance"] == "silver" for row in rows)


def test_evaluate_prediction_file(workspace, tmp_path):
    examples = load_examples_jsonl(workspace["data"] / "examples.jsonl")
    predictions = {ex.id: rule_based_reader(ex) for ex in examples}
    path = tmp_path / "predictions.json"
    path.write_text(json.dumps(predictions), encoding="utf-8")
    code, out = _run(["evaluate", "--examples",
                      str(workspace["data"] / "examples.jsonl"),
                      "--predictions", str(path), "--out", str(tmp_path)])
    assert code == 0
    report = json.loads(out)
    assert report == {"metric": "exact_match", "value": 1.0, "count": 30}
    assert json.loads((tmp_path / "metric.json").read_text()) == report


def test_evaluate_from_checkpoint(workspace):
    code, out = _run(["evaluate", "--examples",
                      str(workspace["data"] / "examples.jsonl"),
                      "--checkpoint", workspace["checkpoint"],
                      "--top-n", "7"])
    assert code == 0
    report = json.loads(out)
    assert report["metric"] == "exact_match"
    assert report["count"] == 30
    assert 0.0 <= report["value"] <= 1.0


def test_evaluate_needs_a_prediction_source(workspace, capsys):
    code = main(["evaluate", "--examples",
                 str(workspace["data"] / "examples.jsonl")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValueError"
    assert "--predictions or --checkpoint" in err["message"]


def test_split_easy_hard_command(workspace, tmp_path):
    examples = load_examples_jsonl(workspace["data"] / "examples.jsonl")
    perfect = {ex.id: rule_based_reader(ex) for ex in examples}
    broken = dict(perfect)
    broken[examples[0].id] = "nonsense"
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(perfect), encoding="utf-8")
    b.write_text(json.dumps(broken), encoding="utf-8")
    code, out = _run(["split-easy-hard",
                      "--examples", str(workspace["data"] / "examples.jsonl"),
                      "--predictions-a", str(a), "--predictions-b", str(b),
                      "--out", str(tmp_path)])
    assert code == 0
    assert json.loads(out) == {"n_easy": 29, "n_hard": 1}
    saved = json.loads((tmp_path / "easy_hard.json").read_text())
    assert saved["hard"] == [examples[0].id]


def test_attention_report_command(workspace, tmp_path):
    code, out = _run(["attention-report", "--checkpoint", workspace["checkpoint"],
                      "--examples", str(workspace["data"] / "examples.jsonl"),
                      "--limit", "3", "--out", str(tmp_path)])
    assert code == 0
    report = json.loads(out)
    assert report["n_examples"] == 3
    assert (tmp_path / "attention_report.json").exists()


def test_mine_loo_replays_prediction_logs(workspace, tmp_path):
    # build a log from the live run's verdicts, then replay it offline
    rows = []
    verdict_lines = (workspace["mined"] / "loo_verdicts.jsonl").read_text().splitlines()
    examples = load_examples_jsonl(workspace["data"] / "examples.jsonl")[:4]
    ranks = {ex.id: [p.rank for p in ex.passages] for ex in examples}
    for line in verdict_lines[1:]:
        row = json.loads(line)
        non_chunk = [r for r in ranks[row["example_id"]] if r not in row["chunk"]]
        for outcome in row["outcomes"]:
            rows.append({
                "example_id": row["example_id"],
                "mask": sorted(non_chunk + [outcome["masked_rank"]]),
                "prediction": outcome["prediction"],
            })
    log = tmp_path / "log.jsonl"
    log.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    code, out = _run(["mine-loo", "--examples",
                      str(workspace["data"] / "examples.jsonl"),
                      "--prediction-log", str(log), "--limit", "4",
                      "--chunk-size", "5", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "mined_pairs.jsonl").read_text() == \
        (workspace["mined"] / "mined_pairs.jsonl").read_text()


def test_mine_loo_requires_a_predictor(workspace, capsys):
    code = main(["mine-loo", "--examples",
                 str(workspace["data"] / "examples.jsonl")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert "--checkpoint or --prediction-log" in err["message"]


def test_pipeline_command(tmp_path):
    cfg = tmp_path / "pipeline.cfg"
    cfg.write_text(
        "n_train = 24\nn_dev = 6\ntotal_steps = 10\neval_interval = 5\n"
        "warmup_steps = 2\nbatch_size = 8\ngold_records = 12\n"
        "mine_examples = 3\nlabeler_epochs = 2\n",
        encoding="utf-8",
    )
    code, out = _run(["pipeline", "--config", str(cfg), "--seed", "0",
                      "--out", str(tmp_path / "run")])
    assert code == 0
    summary = json.loads(out)
    assert set(summary) == {"task", "metric", "dev_base", "dev_full",
                            "improvement", "evidentiality_f1"}
    assert (tmp_path / "run" / "pipeline" / "summary.json").exists()


def test_missing_file_exits_one_with_json_error(capsys):
    code = main(["evaluate", "--examples", "no/such/file.jsonl",
                 "--predictions", "also/missing.json"])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exit_info:
        main(["no-such-command"])
    assert exit_info.value.code == 2
    with pytest.raises(SystemExit) as exit_info:
        main([])
    assert exit_info.value.code == 2
