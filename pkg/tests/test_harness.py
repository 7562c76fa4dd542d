import csv

import numpy as np
import pytest

from crossdd import harness
from crossdd.harness import (
    EvaluationError,
    ProtocolError,
    ProtocolKind,
    ProtocolSpec,
    RunResult,
    accuracy_from_predictions,
    emit_report,
    evaluate_accuracy,
    load_results,
    read_loss_log,
    report_table,
    run_protocol,
    spec_hash,
)
from crossdd.models import ModelBundle, ModelConfig
from crossdd.synthetic import BenchmarkConfig, DomainSpec, generate_domain, make_benchmark, parse_kv
from crossdd.trainers import TrainerConfig

DIMS = {"face": 5, "behavior": 3, "audio": 4}
TINY = dict(n_layers=1, attn_dim=8, n_heads=2, token_hidden=5, channel_hidden=4, readout_dim=6)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(BenchmarkConfig(dims=DIMS, n_tokens=6, sizes=(12, 12, 10), latent_dim=3, seed=1))


def tcfg(**kw):
    return TrainerConfig(**{**dict(epochs=1, batch_size=4, alpha=0.05), **kw})


def multi(**kw):
    base = dict(kind="multi", train_domains=("S2", "S3"), test_domain="S1")
    base.update(kw)
    return ProtocolSpec(**base)


def test_overlapping_domains_rejected():
    with pytest.raises(ProtocolError, match="unseen"):
        multi(train_domains=("S1", "S2")).validate()


@pytest.mark.parametrize("kw", [
    dict(kind="single", train_domains=("S2", "S3")),
    dict(kind="multi", train_domains=("S2",)),
    dict(kind="intra", train_domains=("S2",)),
    dict(trainer="idgm", kind="single", train_domains=("S2",)),
    dict(grl=-0.1),
    dict(seeds=()),
])
def test_invalid_protocols(kw):
    with pytest.raises(ProtocolError):
        multi(**kw).validate()


def test_unknown_domain(bench):
    with pytest.raises(ProtocolError, match="unknown domain"):
        run_protocol(multi(test_domain="S9"), bench, tcfg(), TINY)


def test_task_label():
    assert multi().task == "S2&S3 to S1"


def test_three_seeds_share_hash(bench, tmp_path):
    res = run_protocol(multi(seeds=(0, 1, 2)), bench, tcfg(), TINY, out_dir=tmp_path)
    assert [r.seed for r in res] == [0, 1, 2]
    assert len({r.spec_hash for r in res}) == 1
    dirs = sorted(p.name for p in (tmp_path / res[0].spec_hash[:16]).iterdir())
    assert dirs == ["seed0", "seed1", "seed2"]
    for r in res:
        run = tmp_path / r.spec_hash[:16] / f"seed{r.seed}"
        for name in ("manifest.txt", "loss.log", "predictions.csv", "model.xdgw", "result.txt"):
            assert (run / name).exists()
        assert parse_kv((run / "manifest.txt").read_text())["status"] == "completed"
        assert len(read_loss_log(run / "loss.log")) == len(r.loss_trace)


def test_hash_changes_with_configuration(bench):
    a = spec_hash(multi(), "m", tcfg(), TINY)
    assert a == spec_hash(multi(seeds=(4, 5)), "m", tcfg(), TINY)
    assert a != spec_hash(multi(strategy="alternating"), "m", tcfg(), TINY)
    assert a != spec_hash(multi(), "m2", tcfg(), TINY)
    assert a != spec_hash(multi(), "m", tcfg(epochs=2), TINY)
    assert a != spec_hash(multi(), "m", tcfg(), {**TINY, "n_layers": 2})


@pytest.mark.parametrize("trainer", ["adam", "idgm", "mm-idgm"])
def test_rerun_is_bit_identical(bench, trainer):
    spec = multi(trainer=trainer, strategy="alternating")
    a = run_protocol(spec, bench, tcfg(), TINY)[0]
    b = run_protocol(spec, bench, tcfg(), TINY)[0]
    assert a.accuracy == b.accuracy
    assert [x.as_row() for x in a.loss_trace] == [x.as_row() for x in b.loss_trace]
    assert np.array_equal(a.predictions, b.predictions)


def test_accuracy_examples():
    assert round(accuracy_from_predictions([1, 0, 1], [1, 1, 1]), 2) == 66.67
    assert accuracy_from_predictions([0, 1], [0, 1]) == 100.0
    labels = np.array([0, 1] * 5)
    assert accuracy_from_predictions(np.zeros(10, dtype=int), labels) == 50.0
    with pytest.raises(EvaluationError):
        accuracy_from_predictions([], [])


def test_empty_domain_evaluation(bench):
    model = ModelBundle(ModelConfig(input_dims=DIMS, n_tokens=6, **TINY))
    with pytest.raises(EvaluationError, match="no samples"):
        evaluate_accuracy(model, bench[0], indices=[])


def test_accuracy_recount_from_predictions(bench, tmp_path):
    r = run_protocol(multi(), bench, tcfg(), TINY, out_dir=tmp_path)[0]
    with open(tmp_path / r.spec_hash[:16] / "seed0" / "predictions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(bench[0])
    correct = sum(int(row["prediction"]) == int(row["label"]) for row in rows)
    assert abs(100.0 * correct / len(rows) - r.accuracy) <= 1e-9


def test_intra_domain_uses_held_out_split(bench):
    spec = ProtocolSpec(kind="intra", train_domains=("S1",), test_domain="S1")
    r = run_protocol(spec, bench, tcfg(), TINY)[0]
    assert len(r.labels) == len(bench[0].test_idx)


def test_manifest_written_before_training(bench, tmp_path, monkeypatch):
    seen = {}

    def boom(model, datasets, cfg, **kw):
        (m,) = list(tmp_path.rglob("manifest.txt"))
        seen.update(parse_kv(m.read_text()))
        raise RuntimeError("interrupted")

    monkeypatch.setattr(harness, "train_erm", boom)
    with pytest.raises(RuntimeError):
        run_protocol(multi(), bench, tcfg(), TINY, out_dir=tmp_path)
    assert seen["status"] == "started"
    assert seen["protocol.test"] == "S1"
    assert load_results(tmp_path) == []


def test_load_results_round_trip(bench, tmp_path):
    res = run_protocol(multi(seeds=(0, 1), fusion="average"), bench, tcfg(), TINY, out_dir=tmp_path)
    back = load_results(tmp_path)
    assert [(r.seed, r.accuracy, r.spec_hash) for r in back] == [(r.seed, r.accuracy, r.spec_hash) for r in res]
    assert back[0].spec.fusion.value == "average"
    assert back[0].spec.train_domains == ("S2", "S3")


def fake(acc, seed=0, test="S1", trainer="adam", strategy="simultaneous", fusion="atten-mixer"):
    train = tuple(d for d in ("S1", "S2", "S3") if d != test)
    spec = multi(train_domains=train, test_domain=test, trainer=trainer, strategy=strategy,
                 fusion=fusion, seeds=(seed,))
    return RunResult("h", seed, acc, [], 0.0, None, spec)


def test_report_empty_is_header_only():
    rows = report_table([])
    assert rows == [["Strategy", "Trainer", "Modalities", "Fusion", "Average", "Seeds"]]
    assert emit_report([], "csv").strip() == "Strategy,Trainer,Modalities,Fusion,Average,Seeds"


def test_report_means_and_average_column():
    rows = report_table([fake(80.0, 0), fake(90.0, 1), fake(70.0, 0, test="S2")])
    header, row = rows[0], rows[1]
    assert header[4:] == ["S2&S3 to S1", "S1&S3 to S2", "Average", "Seeds"]
    assert row[4] == "85.00" and row[5] == "70.00"
    assert row[6] == "77.50" and row[7] == "2"


def test_report_strategy_average_row():
    rows = report_table([fake(80.0), fake(60.0, trainer="idgm"), fake(50.0, strategy="bydomain")])
    avg = [r for r in rows if r[1] == "Average"]
    assert avg == [["simultaneous", "Average", "", "", "70.00", "70.00", ""]]


def test_report_layouts(tmp_path):
    res = [fake(80.0), fake(60.0, trainer="mm-idgm")]
    csv_text = emit_report(res, "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == csv_text
    parsed = list(csv.reader(csv_text.splitlines()))
    assert parsed[2][1] == "mm-idgm" and parsed[2][2] == "face+behavior+audio"
    md = emit_report(res, "md")
    lines = md.splitlines()
    assert lines[0].startswith("| Strategy |") and set(lines[1]) <= set("|- ")
    assert len(lines) == 2 + len(parsed) - 1
