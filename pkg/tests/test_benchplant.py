import numpy as np
import pytest

from greyfdi.benchplant import (
    FaultScenario, PlantError, PlantSpec, input_profile, reference_model_text, reference_structural_model,
    simulate_plant, steady_state,
)
from greyfdi.dmdecomp import isolability_matrix
from greyfdi.msoenum import find_msos
from greyfdi.structmodel import parse_model, serialize_model

SPEC = PlantSpec()


def test_converges_to_fixed_point():
    u = np.tile([0.6, 0.4], (4000, 1))
    ds = simulate_plant(SPEC, u, x0=np.full(4, 0.2), noise=False)
    np.testing.assert_allclose(ds.states[-1], steady_state(SPEC, [0.6, 0.4]), rtol=1e-6)


def test_fixed_point_is_stationary():
    x = steady_state(SPEC, [0.9, 0.35])
    ds = simulate_plant(SPEC, np.tile([0.9, 0.35], (50, 1)), noise=False)
    np.testing.assert_allclose(ds.states, np.tile(x, (50, 1)), rtol=1e-12)
    assert ds["y1"][0] == pytest.approx(x[1]) and ds["y2"][0] == pytest.approx(x[3])
    assert ds["y3"][0] == pytest.approx(SPEC.k1 * np.sqrt(x[0]))


def test_sensor_fault_scales_after_onset_and_keeps_states():
    u = input_profile(SPEC, 600, seed=4)
    nominal = simulate_plant(SPEC, u, seed=9)
    faulty = simulate_plant(SPEC, u, FaultScenario("fy1", -0.2, onset=10.0), seed=9)
    assert np.array_equal(faulty.states, nominal.states)
    after = nominal.time >= 10.0
    np.testing.assert_allclose(faulty["y1"][after], 0.8 * nominal["y1"][after], rtol=1e-15)
    assert np.array_equal(faulty["y1"][~after], nominal["y1"][~after])
    for name in ("y2", "y3", "u1", "u2"):
        assert np.array_equal(faulty[name], nominal[name])
    assert faulty.fault_mask().sum() == after.sum()


def test_leak_changes_upstream_tanks_only():
    u = input_profile(SPEC, 600, seed=4)
    nominal = simulate_plant(SPEC, u, noise=False)
    leak = simulate_plant(SPEC, u, FaultScenario("fleak", 0.2, onset=5.0), noise=False)
    assert not np.allclose(leak.states[:, 0], nominal.states[:, 0])
    assert np.array_equal(leak.states[:, 2], nominal.states[:, 2])


def test_determinism_and_noise_seed():
    u = input_profile(SPEC, 300, seed=1)
    assert np.array_equal(u, input_profile(SPEC, 300, seed=1))
    a = simulate_plant(SPEC, u, seed=5)
    b = simulate_plant(SPEC, u, seed=5)
    c = simulate_plant(SPEC, u, seed=6)
    for k in a.signals:
        assert np.array_equal(a[k], b[k])
    assert np.array_equal(a.states, c.states)
    assert not np.array_equal(a["y1"], c["y1"])
    clean = simulate_plant(SPEC, u, noise=False)
    assert np.std(a["y1"] - clean["y1"]) == pytest.approx(SPEC.noise_std[0], rel=0.2)


def test_input_profile_range():
    u = input_profile(SPEC, 5000, seed=2)
    assert u.shape == (5000, 2)
    assert u.min() >= SPEC.u_range[0] and u.max() <= SPEC.u_range[1]


def test_input_change_respects_model_incidence():
    # u2 enters only the equations of tanks 3 and 4: changing it leaves tanks 1 and 2 untouched
    m = reference_structural_model()
    touched = {e for e in m.equations if "u2" in m.equation_vars[e]}
    assert touched == {"e5"}
    u = input_profile(SPEC, 400, seed=3)
    x0 = steady_state(SPEC, u[0])
    base = simulate_plant(SPEC, u, x0=x0, noise=False)
    zeroed = u.copy()
    zeroed[:, 1] = SPEC.u_range[0]
    other = simulate_plant(SPEC, zeroed, x0=x0, noise=False)
    assert np.array_equal(other.states[:, :2], base.states[:, :2])
    assert np.array_equal(other["y1"], base["y1"]) and np.array_equal(other["y3"], base["y3"])
    assert not np.array_equal(other["y2"], base["y2"])


def test_reference_model():
    m = reference_structural_model()
    assert parse_model(serialize_model(m)) == m
    assert parse_model(reference_model_text()) == m
    assert len(find_msos(m)) >= 2
    faults, mat = isolability_matrix(m)
    i = {f: k for k, f in enumerate(faults)}
    assert mat[i["fy1"], i["fy2"]] and mat[i["fy2"], i["fy1"]]


def test_bad_inputs_rejected():
    with pytest.raises(PlantError):
        simulate_plant(SPEC, np.zeros((10, 3)))
    with pytest.raises(PlantError):
        simulate_plant(SPEC, np.full((10, 2), 0.5), FaultScenario("fy1", 0.1, onset=100.0))
    with pytest.raises(PlantError):
        FaultScenario("fzz", 0.1, 1.0)
    with pytest.raises(PlantError):
        FaultScenario("fleak", -0.1, 1.0)


def test_csv_export(tmp_path):
    ds = simulate_plant(SPEC, input_profile(SPEC, 20, seed=0), seed=0)
    ds.to_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "time,u1,u2,y1,y2,y3"
