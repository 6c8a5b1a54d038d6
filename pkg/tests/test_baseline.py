import numpy as np
import pytest

from rmioc.baseline import KktIocProblem, kkt_ioc, kkt_report, kkt_system, solve_kkt_ls
from rmioc.dynamics import LQR_WEIGHTS, quadratic_feature_library
from rmioc.recovery import build_recovery_matrix, normalize, recover_weights, recovery_error, window_jacobians

# direction the window-truncated estimator settles on for less informative windows
WRONG_DIRECTION = np.array([0.018, -0.382, 0.924])


def _first_below(traj, sysd, F, t, tol=0.01):
    for l in range(2, traj.horizon - t + 2):
        if recovery_error(kkt_ioc(KktIocProblem(traj, t, l, sysd, F)).omega, LQR_WEIGHTS) < tol:
            return l
    return None


def test_full_horizon_window_is_exact(lqr):
    _, traj, sysd, F = lqr
    est = kkt_ioc(KktIocProblem(traj, 1, traj.horizon, sysd, F))
    assert recovery_error(est.omega, LQR_WEIGHTS) < 1e-6
    assert abs(est.omega.sum() - 1.0) < 1e-12
    assert est.lam.shape == (traj.horizon, 2)
    np.testing.assert_allclose(est.omega, LQR_WEIGHTS / LQR_WEIGHTS.sum(), atol=1e-6)


def test_agrees_with_recovery_matrix_on_complete_observations(lqr):
    _, traj, sysd, F = lqr
    T = traj.horizon
    w_kkt = kkt_ioc(KktIocProblem(traj, 1, T, sysd, F)).omega
    w_rm, _ = recover_weights(normalize(build_recovery_matrix(traj, 1, T, sysd, F)), 3, 2)
    assert recovery_error(w_kkt, w_rm) < 1e-6


def test_convergence_lengths_depend_on_start(lqr):
    _, traj, sysd, F = lqr
    l1 = _first_below(traj, sysd, F, 1)
    l3 = _first_below(traj, sysd, F, 3)
    assert 0.7 * 25 <= l1 <= 1.3 * 25
    assert 0.7 * 60 <= l3 <= 1.3 * 60


@pytest.mark.parametrize("t,lengths", [(6, (20, 40, 60)), (54, (20, 40)), (84, (10,))])
def test_wrong_convergence_point(lqr, t, lengths):
    _, traj, sysd, F = lqr
    for l in lengths:
        w = kkt_ioc(KktIocProblem(traj, t, l, sysd, F)).omega
        cos = w @ WRONG_DIRECTION / (np.linalg.norm(w) * np.linalg.norm(WRONG_DIRECTION))
        assert cos > 0.9995
        assert recovery_error(w, LQR_WEIGHTS) > 0.1


def test_feature_scaling_leaves_weights_unchanged(lqr):
    _, traj, sysd, F = lqr
    jac = window_jacobians(traj, 10, 30, sysd, F)
    base = solve_kkt_ls(*kkt_system(jac))
    c = 3.7
    scaled = solve_kkt_ls(*kkt_system(jac._replace(phix=c * jac.phix, phiu=c * jac.phiu)))
    np.testing.assert_allclose(scaled.omega, base.omega, atol=1e-10)


def test_short_window_is_rejected(lqr):
    _, traj, sysd, F = lqr
    with pytest.raises(ValueError):
        KktIocProblem(traj, 1, 1, sysd, F)
    with pytest.raises(ValueError):
        KktIocProblem(traj, 99, 5, sysd, F)


def test_rank_deficiency_flagged(lqr):
    _, traj, sysd, _ = lqr
    # a duplicated feature makes the weights non-identifiable
    F = quadratic_feature_library(["x1^2", "x1^2", "u1^2"], 2, 1)
    est = kkt_ioc(KktIocProblem(traj, 1, 20, sysd, F))
    assert est.degenerate
    assert abs(est.omega.sum() - 1.0) < 1e-12
    # minimum-norm solution splits the duplicated weight evenly
    assert est.omega[0] == pytest.approx(est.omega[1], rel=1e-8)


def test_report_method_tag(lqr):
    _, traj, sysd, F = lqr
    rep = kkt_report(traj, 1, 30, sysd, F, LQR_WEIGHTS)
    d = rep.to_dict()
    assert d["method"] == "kkt-baseline"
    assert d["degenerate"] is False
    assert d["e_omega"] < 0.01
