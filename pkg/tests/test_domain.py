import math

import numpy as np
import pytest

from conftest import SCENARIO_DIR, raw_scenario
from geotrain.domain import (
    DEVICE_TABLE,
    Architecture,
    LinkModel,
    ModelState,
    SyncStrategyConfig,
    TrainConfig,
    dump_scenario,
    load_scenario,
    make_balance_scenario,
    reference_devices,
    scenario_to_dict,
    validate_scenario,
)
from geotrain.errors import ScenarioError


def test_ring_scenario_is_valid():
    raw = raw_scenario([("A", 100, [("Cascade", 2)]), ("B", 100, [("Sky", 2)])])
    raw["strategy"]["topology"] = {"A": "B", "B": "A"}
    sc = validate_scenario(raw)
    assert dict(sc.strategy.topology) == {"A": "B", "B": "A"}
    assert sc.cloud_ids == ["A", "B"]


def test_self_loop_rejected():
    raw = raw_scenario([("A", 100, [("Cascade", 2)]), ("B", 100, [("Sky", 2)])])
    raw["strategy"]["topology"] = {"A": "A"}
    with pytest.raises(ScenarioError) as exc:
        validate_scenario(raw)
    assert any("self-loop sender" in e for e in exc.value.errors)


def test_case1_populates_load_power():
    sc = make_balance_scenario(1, total=2)
    # one sample per cloud: full LP is the summed IN power
    assert sc.full_load_power["SH"] == pytest.approx(12 * 0.666)
    assert sc.full_load_power["CQ"] == pytest.approx(12 * 0.973)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda r: r["clouds"][0]["devices"].append({"device": "M1", "max_units": 1}), "unknown device id"),
        (lambda r: r["strategy"]["topology"].update({"A": "Z"}), "references missing cloud"),
        (lambda r: [c.update(dataset_size=0) for c in r["clouds"]], "zero total dataset"),
        (lambda r: r["wan"].update(bandwidth_bps=0), "bandwidth"),
        (lambda r: r.update(power_column="flops"), "power_column"),
        (lambda r: r["devices"][1].update(in_norm=0.7), "in_norm"),
        (lambda r: r["clouds"].append(dict(r["clouds"][0])), "duplicate cloud id"),
    ],
)
def test_validation_errors(mutate, message):
    raw = raw_scenario([("A", 100, [("Cascade", 2)]), ("B", 100, [("Sky", 2)])])
    raw["strategy"]["topology"] = {}
    mutate(raw)
    with pytest.raises(ScenarioError) as exc:
        validate_scenario(raw)
    assert any(message in e for e in exc.value.errors), exc.value.errors


def test_validation_collects_every_error():
    raw = raw_scenario([("A", 100, [("Nope", 2)])])
    raw["wan"]["bandwidth_bps"] = -1
    raw["strategy"]["topology"] = {"A": "A"}
    with pytest.raises(ScenarioError) as exc:
        validate_scenario(raw)
    assert len(exc.value.errors) >= 3


def test_reference_normalizations_match_stored_values():
    base = DEVICE_TABLE[0]
    for _, _, _, tflops, tn, it, in_norm in DEVICE_TABLE:
        assert math.isclose(tflops / base[3], tn, rel_tol=1e-3)
        assert math.isclose(base[5] / it, in_norm, rel_tol=1e-3)


def test_default_prices_proportional_to_tn():
    rows = reference_devices(0.1)
    for r in rows:
        assert r["price_per_unit_hour"] == pytest.approx(0.1 * r["tn"])


@pytest.mark.parametrize("name", ["symmetric", "balance_case1", "balance_case2", "balance_case3", "sync_sweep"])
def test_round_trip(tmp_path, name):
    sc = load_scenario(SCENARIO_DIR / f"{name}.yaml")
    path = tmp_path / "again.yaml"
    path.write_text(dump_scenario(sc))
    again = load_scenario(path)
    assert again == sc
    assert scenario_to_dict(again) == scenario_to_dict(sc)


@pytest.mark.parametrize("name", ["symmetric", "balance_case1", "balance_case2", "balance_case3", "sync_sweep"])
def test_shipped_scenarios_embed_reference_devices(name):
    sc = load_scenario(SCENARIO_DIR / f"{name}.yaml")
    rows = {d.device_id: d for d in sc.devices}
    for did, kind, _, tflops, tn, it, in_norm in DEVICE_TABLE:
        d = rows[did]
        assert (d.kind, d.tflops, d.tn, d.iter_time_s, d.in_norm) == (kind, tflops, tn, it, in_norm)


def test_yaml_error_has_line_context(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nclouds: [\n  - id: A\n")
    with pytest.raises(ScenarioError) as exc:
        load_scenario(bad)
    assert f"{bad}:" in exc.value.errors[0]


def test_link_model_rejects_bad_values():
    with pytest.raises(ValueError):
        LinkModel(0.0)
    with pytest.raises(ValueError):
        LinkModel(1e6, latency_s=-1)


def test_strategy_config_checks():
    with pytest.raises(ValueError):
        SyncStrategyConfig(kind="baseline_asgd", sync_frequency=4)
    with pytest.raises(ValueError):
        SyncStrategyConfig(kind="asgd_ga", sync_frequency=0)
    with pytest.raises(ValueError):
        SyncStrategyConfig(kind="gossip")
    assert SyncStrategyConfig.baseline().sync_frequency == 1


def test_model_state_invariants():
    arch = Architecture(3)
    assert arch.n_params == 4
    with pytest.raises(ValueError):
        ModelState(arch, np.zeros(5))
    with pytest.raises(ValueError):
        ModelState(arch, np.array([0.0, np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        ModelState(arch, np.zeros(4), accum_grad=np.ones(4), accum_count=0)
    # a zero accumulator with a positive count is allowed (zero-valued gradients)
    ModelState(arch, np.zeros(4), accum_grad=np.zeros(4), accum_count=2)


def test_mlp_architecture_sizes():
    arch = TrainConfig(model_kind="mlp", hidden_sizes=(4, 3)).architecture(5)
    assert arch.layer_sizes == [(5, 4), (4, 3), (3, 1)]
    assert arch.n_params == 5 * 4 + 4 + 4 * 3 + 3 + 3 + 1
    with pytest.raises(ValueError):
        TrainConfig(model_kind="mlp", hidden_sizes=(1, 2, 3))
