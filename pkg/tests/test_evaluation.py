import json
import math

import numpy as np
import pytest

from cbdbid.errors import ValidationError
from cbdbid.evaluation import (AblationTable, ablation_run, evaluate_policy, make_episodes, mean_se, resolve_modes,
                               summarize)


def test_mean_se():
    assert mean_se([1.0, 3.0]) == (2.0, 1.0)
    assert mean_se([5.0, float("nan")]) == (5.0, 0.0)
    m, s = mean_se([])
    assert math.isnan(m) and math.isnan(s)


def test_episodes_differ_from_each_other_but_not_between_calls(tiny_sim):
    a, b = make_episodes(tiny_sim, 3, 0), make_episodes(tiny_sim, 3, 0)
    assert [e.advertiser for e in a] == [e.advertiser for e in b]
    assert a[0].advertiser != a[1].advertiser
    scaled = make_episodes(tiny_sim, 3, 0, budget_scale=0.5)
    assert scaled[0].advertiser.budget == pytest.approx(0.5 * a[0].advertiser.budget)
    with pytest.raises(ValidationError):
        make_episodes(tiny_sim, 0)


def test_identical_policies_give_identical_rows(tiny_policy, tiny_sim):
    table = ablation_run({"a": tiny_policy, "b": tiny_policy}, tiny_sim, episodes=2, budgets=(0.75, 1.0))
    for b in (0.75, 1.0):
        ra, rb = dict(table.row("a", b)), dict(table.row("b", b))
        ra.pop("mode"), rb.pop("mode")
        assert json.dumps(ra) == json.dumps(rb)


def test_evaluation_seed_determinism(tiny_policy, tiny_sim):
    a = evaluate_policy(tiny_policy, tiny_sim, 2, seed=5)
    b = evaluate_policy(tiny_policy, tiny_sim, 2, seed=5)
    assert json.dumps(a) == json.dumps(b)
    assert all(0.0 <= r["validity"] <= 1.0 for r in a)
    fixed = evaluate_policy(None, tiny_sim, 2, seed=5)
    assert all(math.isnan(r["validity"]) for r in fixed)
    s = summarize(a)
    assert s["n"] == 2 and set(s) >= {"value_mean", "er_se", "score_mean", "validity_mean"}


def test_resolve_modes(tiny_policy):
    modes = resolve_modes({"cbd": tiny_policy}, ["cbd", "cbd_completer", "gs_align"], candidates=4)
    assert modes["cbd"].config.align_mode == "gradient"
    assert modes["cbd_completer"].config.align_mode == "none"
    assert modes["gs_align"].config.candidates == 4
    with pytest.raises(ValidationError):
        resolve_modes({"cbd": tiny_policy}, ["vanilla"])
    with pytest.raises(ValidationError):
        resolve_modes({"cbd": tiny_policy}, ["other"])


def test_table_output(tmp_path):
    t = AblationTable([{"mode": "cbd", "budget": 1.0, "value_mean": 0.1}])
    assert json.loads(t.write(tmp_path / "t.json").read_text()) == t.rows
    assert t.write(tmp_path / "t.tsv").read_text().splitlines() == ["mode\tbudget\tvalue_mean", "cbd\t1.0\t0.1"]
    with pytest.raises(KeyError):
        t.row("cbd", 0.5)
    with pytest.raises(ValidationError):
        ablation_run({}, None)
