import numpy as np
import pytest

from ropedyn import DimensionMismatch, Diverged
from ropedyn.harness import displaced_state, generate_reference_rope, make_excitation, perturb_params
from ropedyn.rope import RopeParams, RopeState, hanging_rest_positions
from ropedyn.sysid import (
    SysIdConfig,
    SysIdDataset,
    check_program,
    identify,
    identify_run,
    identify_two_stage,
    position_loss,
    predict_positions,
    rmse_tip,
    simulate_dataset,
    stage1_seed,
    tie_parameters,
    untie_parameters,
)


def test_position_loss_cases():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(5, 2, 3))
    assert position_loss(P, P, 5) == 0.0
    d = 0.01
    assert position_loss(P + d, P, 5) == pytest.approx(6 * d * d)
    Q = P.copy()
    Q[0] += 0.5
    assert position_loss(Q, P, 1) == pytest.approx(np.sum((Q[0] - P[0]) ** 2))
    with pytest.raises(DimensionMismatch):
        position_loss(P[:2], P, 3)


def test_rmse_tip_cases():
    P = np.random.default_rng(1).normal(size=(7, 4, 3))
    assert rmse_tip(P, P) == 0.0
    Q = P.copy()
    Q[:, -1] += np.array([0.0, 0.6, 0.8]) * 0.1
    assert rmse_tip(Q, P) == pytest.approx(0.1)
    with pytest.raises(DimensionMismatch):
        rmse_tip(P[:3], P)


def two_link(ks):
    return RopeParams(
        masses=np.full(3, 0.01), rest_lengths=np.full(2, 0.2), gravity=np.array([0, 0, -9.81]),
        air_drag=0.01, linear_stiffness=np.asarray(ks, float), linear_damping=np.full(2, 0.1),
        bending_stiffness=np.full(1, 1e-3), bending_damping=np.full(1, 1e-4), torsion_stiffness=np.zeros(0))


def test_tie_and_untie():
    tied = tie_parameters(two_link([1.0, 3.0]))
    np.testing.assert_array_equal(tied.params.linear_stiffness, [2.0, 2.0])
    assert tied.tied
    uni = RopeParams.uniform(4)
    same = tie_parameters(uni).params
    for name in RopeParams.ARRAY_FIELDS:
        np.testing.assert_array_equal(np.asarray(getattr(same, name)), np.asarray(getattr(uni, name)))
    back = untie_parameters(tie_parameters(uni))
    assert not back.tied
    for name in RopeParams.ARRAY_FIELDS:
        assert np.shape(getattr(back.params, name)) == np.shape(getattr(uni, name))


@pytest.fixture(scope="module")
def small_problem():
    truth, _ = generate_reference_rope(2, 3, 0.3, length=0.4, rope_mass=0.02)
    s0 = RopeState.at_rest(hanging_rest_positions(truth))
    ds = simulate_dataset(truth, s0, make_excitation(3, 1.0, 0.5))
    return truth, ds


def test_dataset_shapes(small_problem):
    _, ds = small_problem
    assert ds.positions.shape == (101, 4, 3) and ds.controls.shape == (100, 3)
    with pytest.raises(DimensionMismatch):
        SysIdDataset(ds.positions, ds.controls[:-1])


def test_identify_is_fixed_point_on_own_data(small_problem):
    truth, ds = small_problem
    res = identify_run(ds, truth, SysIdConfig(max_iterations=40, patience=5))
    assert res.log[0][2] < 1e-12
    assert res.horizon_reached == ds.T
    hs = [h for _, h, _ in res.log]
    assert hs == sorted(hs)
    for name in ("linear_stiffness", "bending_damping", "air_drag"):
        np.testing.assert_allclose(np.asarray(getattr(res.params, name)),
                                   np.asarray(getattr(truth, name)), rtol=1e-6)


def test_identify_recovers_and_never_loses_ground(small_problem):
    truth, ds = small_problem
    init = perturb_params(truth, 0.3, 5)
    cfg = SysIdConfig(max_iterations=150, horizon=20, horizon_step=20)
    res = identify_run(ds, init, cfg)
    hs = [h for _, h, _ in res.log]
    assert hs == sorted(hs)
    P0 = predict_positions(init, ds.initial_state, ds.controls)
    P1 = predict_positions(res.params, ds.initial_state, ds.controls)
    for H in sorted(set(hs)):
        assert position_loss(P1, ds.positions[1:], H) <= position_loss(P0, ds.positions[1:], H)
    held = displaced_state(truth, 0.4, 1.0)
    zero = np.zeros((200, 3))
    ref = predict_positions(truth, held, zero)
    assert rmse_tip(predict_positions(res.params, held, zero), ref) < \
        0.5 * rmse_tip(predict_positions(init, held, zero), ref)


def test_positivity_in_log_space(small_problem):
    truth, ds = small_problem
    p = identify(ds, perturb_params(truth, 0.3, 8), SysIdConfig(max_iterations=30, lr=0.2))
    for name in ("air_drag", "linear_stiffness", "bending_damping", "torsion_stiffness"):
        assert np.all(np.asarray(getattr(p, name)) > 0)


def test_nan_data_diverges(small_problem):
    truth, ds = small_problem
    bad = SysIdDataset(ds.positions.copy(), ds.controls)
    bad.positions[3, 2, 0] = np.nan
    with pytest.raises(Diverged, match="iteration 0 with H=10"):
        identify(bad, truth, SysIdConfig(max_iterations=5))


def test_stage1_seed_and_program_check(small_problem):
    truth, ds = small_problem
    seed = stage1_seed(truth)
    assert np.all(np.asarray(seed.linear_stiffness) == 10.0)
    assert np.all(np.asarray(seed.bending_damping) == 0.1)
    assert float(seed.air_drag) == 0.01
    check_program(ds, truth)


@pytest.mark.slow
def test_two_stage_improves_on_heterogeneous_truth():
    truth, _ = generate_reference_rope(6, 4, 0.4, length=0.5, rope_mass=0.02)
    s0 = RopeState.at_rest(hanging_rest_positions(truth))
    ds = simulate_dataset(truth, s0, make_excitation(4, 2.0, 0.6))
    cfg = SysIdConfig(max_iterations=200, horizon=20, horizon_step=20)
    r1, r2 = identify_two_stage(ds, perturb_params(truth, 0.3, 2), cfg)
    held = displaced_state(truth, 0.5, 2.0)
    zero = np.zeros((300, 3))
    ref = predict_positions(truth, held, zero)
    e1 = rmse_tip(predict_positions(r1.params, held, zero), ref)
    e2 = rmse_tip(predict_positions(r2.params, held, zero), ref)
    assert e2 < e1
