import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffnet.harness import (ABLATIONS, EvalReport, InstanceResult, MultiSeedSummary, ablation_config, evaluate,
                             format_table, majority_vote, rows_to_json, run_ablation, run_quantitative, summarize)
from diffnet.model import ModelConfig, init_params
from diffnet.text import StoryInstance, Vocabulary, generate_synthetic, transform_dataset
from diffnet.train import TrainConfig, prepare

TINY = ModelConfig(embed_dim=6, hidden=4, dropout=0.0)


def _report(preds, probs=None, ids=None):
    ids = ids or [f"i{k}" for k in range(len(preds))]
    probs = probs or [0.7 if p == 1 else 0.3 for p in preds]
    rows = [InstanceResult(i, p1, 1 - p1, pred, 1) for i, p1, pred in zip(ids, probs, preds)]
    return EvalReport(accuracy=sum(p == 1 for p in preds) / len(preds), n=len(preds), per_instance=rows)


# ---------------------------------------------------------------- summarize


def test_summarize_constant():
    s = summarize([0.776] * 10)
    assert s.mean == pytest.approx(0.776, abs=1e-15) and s.stdev == pytest.approx(0.0, abs=1e-15)
    assert s.best == 0.776 and s.k == 10


def test_summarize_two():
    s = summarize([0.7, 0.8])
    assert s.mean == pytest.approx(0.75)
    assert s.stdev == pytest.approx(math.sqrt(0.005), abs=1e-12)
    assert s.stdev == pytest.approx(0.0707, abs=1e-4)


def test_summarize_single_run_flagged():
    s = summarize([0.5])
    assert s.stdev == 0.0 and s.single_run
    assert s.bracket() == "50.0 (50.00 ± 0.00) [k=1]"


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_summarize_invariants(accs):
    s = summarize(accs)
    assert min(accs) - 1e-12 <= s.mean <= s.best + 1e-12
    assert s.stdev >= 0


def test_bracket_style():
    s = MultiSeedSummary(best=0.778, mean=0.776, stdev=0.0012, k=10)
    assert s.bracket() == "77.8 (77.60 ± 0.12)"


# ---------------------------------------------------------------- voting


def test_vote_single_member_identity():
    rep = _report([1, 2, 1], [0.6, 0.4, 0.55])
    out = majority_vote([rep])
    assert [r.predicted for r in out.per_instance] == [1, 2, 1]
    assert [r.p1 for r in out.per_instance] == [0.6, 0.4, 0.55]


def test_vote_majority():
    reps = [_report([1]), _report([1]), _report([2])]
    assert majority_vote(reps).per_instance[0].predicted == 1


def test_vote_split_uses_mass():
    a = _report([1], [0.9])
    b = _report([2], [0.4])
    out = majority_vote([a, b]).per_instance[0]
    assert (out.predicted, out.p1) == (1, pytest.approx(0.65))
    a = _report([1], [0.55])
    b = _report([2], [0.1])
    assert majority_vote([a, b]).per_instance[0].predicted == 2


def test_vote_copies_unchanged():
    rep = _report([1, 2, 2, 1])
    out = majority_vote([rep] * 4)
    assert [r.predicted for r in out.per_instance] == [1, 2, 2, 1]


def test_vote_id_mismatch():
    with pytest.raises(ValueError, match="different instance ids"):
        majority_vote([_report([1], ids=["a"]), _report([1], ids=["b"])])


# -------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def setup():
    data = generate_synthetic(30, seed=2)
    vocab = Vocabulary.build(data)
    params = init_params(TINY, len(vocab), np.random.default_rng(0))
    return data, vocab, params


def test_evaluate_report_invariants(setup, tmp_path):
    data, vocab, params = setup
    rep = evaluate(params, TINY, prepare(data, vocab, TINY), seed=3)
    assert rep.n == 30 and rep.accuracy * rep.n == rep.correct
    assert all(abs(r.p1 + r.p2 - 1) <= 1e-9 for r in rep.per_instance)
    assert rep.fingerprint == TINY.fingerprint() and rep.seed == 3
    again = evaluate(params, TINY, prepare(data, vocab, TINY), seed=3)
    assert again.to_dict() == rep.to_dict()
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json").to_dict() == rep.to_dict()
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,p1,p2,predicted,gold,tie" and len(lines) == 31


def test_evaluate_identical_endings_flags_ties(setup):
    data, vocab, params = setup
    same = [StoryInstance(d.id, d.sentences, d.ending1, list(d.ending1), 2) for d in data[:5]]
    rep = evaluate(params, TINY, prepare(same, vocab, TINY))
    assert all(r.tie and r.predicted == 1 for r in rep.per_instance)
    assert rep.accuracy == 0.0


def test_evaluate_rejects_empty(setup):
    _, _, params = setup
    with pytest.raises(ValueError, match="empty"):
        evaluate(params, TINY, [])


# ----------------------------------------------------------------- grids


def test_ablation_ids_and_configs():
    assert set(ABLATIONS) == {"full"} | {f"L{i}" for i in range(1, 8)} | {"F1", "F2", "F3"}
    base = ModelConfig(embed_dim=5)
    assert ablation_config(base, "L7").ending_input_dim == 5
    assert ablation_config(base, "F2").enabled_features == ("ee", "es-fuzzy")
    assert ablation_config(base, "L6").aoa_mode == "dot"
    with pytest.raises(ValueError, match="unknown ablation"):
        ablation_config(base, "L9")


@pytest.fixture(scope="module")
def grid():
    data = generate_synthetic(24, seed=4)
    tcfg = TrainConfig(epochs=1, batch_size=8)
    return run_ablation(TINY, data[:16], data[16:], [7], tcfg)


def test_ablation_grid_shape(grid):
    assert len(grid) == 11
    assert {r.key for r in grid} == set(ABLATIONS)
    means = [r.summary.mean for r in grid]
    assert means == sorted(means, reverse=True)
    assert all(r.summary.k == 1 and r.summary.stdev == 0 for r in grid)
    rows = json.loads(rows_to_json(grid))
    assert all({"key", "label", "best", "mean", "stdev"} <= set(r) for r in rows)


def test_ablation_grid_reproducible(grid):
    data = generate_synthetic(24, seed=4)
    again = run_ablation(TINY, data[:16], data[16:], [7], TrainConfig(epochs=1, batch_size=8))
    assert rows_to_json(again) == rows_to_json(grid)


def test_format_table(grid):
    table = format_table(grid)
    lines = table.splitlines()
    assert lines[0].startswith("System") and "Accuracy" in lines[0]
    assert len(lines) == 2 + 11
    assert all("±" in line for line in lines[2:])


def test_quantitative_rejects_unknown_mode():
    with pytest.raises(ValueError, match="unknown analysis mode"):
        run_quantitative(TINY, [], [], ["shuffle"], [0], TrainConfig())


def test_quantitative_small():
    data = generate_synthetic(24, seed=5)
    rows = run_quantitative(TINY, data[:16], data[16:], ["entire", "ending-only"], [0],
                            TrainConfig(epochs=1, batch_size=8))
    assert [r.key for r in rows] == ["entire", "ending-only"]
    assert rows[0].delta == 0.0
    assert "[+0.0]" in format_table(rows)


def test_reverse_involution_through_harness():
    data = generate_synthetic(10, seed=6)
    assert transform_dataset(transform_dataset(data, "reverse", 0), "reverse", 0) == data
    assert all(not d.story_tokens for d in transform_dataset(data, "ending-only", 0))
