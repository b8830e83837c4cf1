import json

import numpy as np
import pytest

from mmcd import observations
from mmcd.config import DistillConfig, RunConfig, SimConfig
from mmcd.eval_harness import (CaseSpec, Harness, NotApplicable, adr, build_report, canonical_json, ir,
                               package_size, run_case, run_matrix)
from mmcd.observations import ObservationStore
from mmcd.sim import generate_dataset, split_dataset

# 20 hand-marked frames: B = brake, D = drive
FIXTURE_PRED = "BBDDB DBBDD BDDDB BDDBD".replace(" ", "")
FIXTURE_TRUE = "BDDDB BBDDD BDBDB DDDBB".replace(" ", "")
# brake frames in FIXTURE_TRUE: 0, 4, 5, 6, 10, 12, 14, 18, 19 (9 in all);
# predicted brake at 0, 4, 6, 10, 14, 18 -> recall 6/9.
# disagreements at 1, 5, 7, 12, 15, 19 -> accuracy 14/20.
HAND_ADR, HAND_IR = 6 / 9, 14 / 20


def actions(s):
    return ["brake" if c == "B" else "drive" for c in s]


def brute_force(pred, true):
    hits = positives = agree = 0
    for p, t in zip(pred, true):
        positives += t == "brake"
        hits += t == "brake" and p == "brake"
        agree += p == t
    return hits / positives, agree / len(true)


def test_fixture_matches_hand_counts():
    p, y = actions(FIXTURE_PRED), actions(FIXTURE_TRUE)
    assert len(p) == len(y) == 20
    assert adr(p, y) == HAND_ADR and ir(p, y) == HAND_IR
    assert (adr(p, y), ir(p, y)) == brute_force(p, y)


def test_three_of_four_and_full_recall():
    y = actions("BBBBD")
    assert adr(actions("BBBDD"), y) == 0.75
    assert adr(actions("BBBBB"), y) == 1.0


def test_ir_simple_ratios():
    y = actions("BDBDBDBDBD")
    assert ir(y, y) == 1.0
    assert ir(actions("DDBDBDBDBB"), y) == 0.8


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_brute_force_on_random_fixtures(seed):
    rng = np.random.default_rng(seed)
    y = actions("".join(rng.choice(["B", "D"], size=20)))
    p = actions("".join(rng.choice(["B", "D"], size=20)))
    if "brake" not in y:
        y[0] = "brake"
    assert (adr(p, y), ir(p, y)) == brute_force(p, y)


def test_adr_without_positives_is_not_applicable():
    with pytest.raises(NotApplicable):
        adr(actions("BDBD"), actions("DDDD"))


def test_metric_input_errors():
    with pytest.raises(ValueError):
        ir([], [])
    with pytest.raises(ValueError):
        adr(actions("BD"), actions("B"))
    with pytest.raises(ValueError):
        ir(["stop"], ["brake"])


@pytest.mark.parametrize("case,want", [("A", 1024), ("D", 1024), ("B", 67072), ("C", 68096), ("C-nc", 0)])
def test_full_scale_package_sizes(case, want):
    assert package_size(case, "full") == want


def test_desk_scale_package_sizes():
    assert package_size("A", "desk") == 1024
    assert package_size("B", "desk") == 4 * 16 * 19


def test_case_modalities_and_parsing():
    assert CaseSpec("D").train_modalities == ("rgb", "lidar") and CaseSpec("D").test_modalities == ("rgb",)
    assert CaseSpec("B").test_modalities == ("lidar",)
    spec = CaseSpec.parse("A-nc")
    assert spec == CaseSpec("A", collaborative=False) and spec.key == "A-nc"
    with pytest.raises(ValueError):
        CaseSpec("E")


def test_non_collaborative_store_never_resolves_neighbors(monkeypatch, small_episodes):
    def boom(*a, **k):
        raise AssertionError("comm_neighbors consulted")
    monkeypatch.setattr(observations, "comm_neighbors", boom)
    store = ObservationStore(small_episodes["overtake"], collaborative=False)
    assert all(c == [] for c in store.collabs)


def test_canonical_json_format():
    text = canonical_json({"b": 1.0, "a": [0.5, None, 3], "c": {"z": True, "y": 1 / 3}})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert "0.333333" in text and "1.000000" in text and "null" in text
    assert json.loads(text)["c"]["y"] == 0.333333


# --- small end-to-end runs --------------------------------------------------------

@pytest.fixture(scope="module")
def tiny(tiny_encoder, tiny_fusion):
    cfg = RunConfig(sim=SimConfig(n_frames=30), encoder=tiny_encoder, fusion=tiny_fusion,
                    train=DistillConfig(epochs=2, batch_size=16), episodes=4, train_count=2,
                    seeds=(1, 2), frame_stride=3)
    data = {sc: split_dataset(generate_dataset(sc, 4, 11, cfg.sim, cfg.comm), 2) for sc in cfg.scenarios}
    return cfg, data


def test_case_d_never_reads_lidar_and_case_b_never_reads_grids(tiny):
    cfg, data = tiny
    h = Harness(data, cfg)
    d = h.run_case(CaseSpec("D"), [1])
    b = h.run_case(CaseSpec("B"), [1])
    assert d.test_reads().get("lidar", 0) == 0 and d.test_reads()["rgb"] > 0
    assert b.test_reads().get("rgb", 0) == 0 and b.test_reads()["lidar"] > 0


def test_modality_mismatch_rejected(tiny):
    cfg, data = tiny
    h = Harness(data, cfg)
    teacher = h.train(CaseSpec("C"), "*", 1)
    with pytest.raises(ValueError, match="tests on"):
        h.evaluate(teacher, CaseSpec("D"), "overtake", 1)


def test_report_is_byte_identical_and_ps_matches(tiny):
    cfg, data = tiny
    a = run_case(CaseSpec("A"), data, cfg).to_json()
    b = run_case(CaseSpec("A"), data, cfg).to_json()
    assert a == b
    rep = json.loads(a)
    for sc, entry in rep["results"].items():
        assert entry["A"]["ps_bytes"] == package_size("A", encoder=cfg.encoder)
        assert entry["A"]["seeds"] == [1, 2]
        assert 0.0 <= entry["A"]["ir"] <= 1.0


def test_matrix_report_contains_every_case(tiny):
    cfg, data = tiny
    report, results = run_matrix([CaseSpec("D"), CaseSpec("C"), CaseSpec("A", False)], data, cfg, seeds=[1])
    assert [r.case.key for r in results] == ["A-nc", "C", "D"]
    for entry in report.entries.values():
        assert set(entry) == {"A-nc", "C", "D"} and entry["A-nc"]["ps_bytes"] == 0
    assert "scenario,case" in report.to_csv()
    assert "A-nc" in report.table()


def test_per_scenario_scope_runs(tiny):
    cfg, data = tiny
    from dataclasses import replace
    rep = run_case(CaseSpec("A"), data, replace(cfg, train_scope="per_scenario"), seeds=[1])
    assert set(rep.entries) == set(cfg.scenarios)
