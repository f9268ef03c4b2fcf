import numpy as np
import pytest
from scipy.linalg import expm

from skap import (IntegrationError, UsageError, coarsen_path,
                  exact_constant_solution, generate_path, integrate,
                  make_model, reference_solution)
from skap.models import InitialCondition, ModelSpec
from skap.noise import IncrementPair, NoisePath
from skap.schemes import (PhaseState, QPState, SimConfig, step_euler_maruyama,
                          step_exponential, step_exponential_qp,
                          step_semi_implicit, step_semi_implicit_qp)

LINEAR = make_model("linear")
TANH = make_model("tanh-diffusion")
ZERO = make_model("constant", const=0.0, scale=0.0)
IC1 = InitialCondition(np.array([1.0]), np.array([1.0]))


def pair(db, ii):
    return IncrementPair(np.atleast_1d(float(db)), np.atleast_1d(float(ii)))


def test_semi_implicit_equilibrium():
    st = step_semi_implicit(PhaseState(np.array([3.0]), np.array([0.0])),
                            ZERO, 0.5, 0.1, np.zeros(1))
    assert st.q == pytest.approx([3.0]) and st.p == pytest.approx([0.0])


def test_semi_implicit_hand_step():
    # eps = dt = 1, q = p = 0, f = -q, sigma = 1, dbeta = 1:
    # p' = (0 + 0 + 1) / 2 = 1/2, q' = 0 + 1/2
    st = step_semi_implicit(PhaseState(np.zeros(1), np.zeros(1)),
                            LINEAR, 1.0, 1.0, np.ones(1))
    assert st.p == pytest.approx([0.5], abs=0)
    assert st.q == pytest.approx([0.5], abs=0)


def test_semi_implicit_small_eps_is_euler_maruyama():
    eps, dt = 1e-8, 0.01
    rng = np.random.default_rng(0)
    q = rng.normal(size=5).reshape(5, 1)
    p = rng.normal(size=5).reshape(5, 1)
    db = rng.normal(scale=np.sqrt(dt), size=(5, 1))
    st = step_semi_implicit(PhaseState(q, p), TANH, eps, dt, db)
    em = step_euler_maruyama(q, TANH, dt, db)
    assert np.abs(st.q - em).max() <= 1e-6


def test_exponential_pure_relaxation():
    eps, dt = 0.5, 0.2
    decay = np.exp(-dt / eps**2)
    st = step_exponential(PhaseState(np.array([1.0]), np.array([2.0])),
                          ZERO, eps, dt, pair(0.0, 0.0))
    assert st.p == pytest.approx([2.0 * decay], rel=1e-15)
    assert st.q == pytest.approx([1.0 + eps * (1 - decay) * 2.0], rel=1e-15)


def test_exponential_small_eps_is_euler_maruyama():
    eps, dt = 1e-8, 0.01
    rng = np.random.default_rng(1)
    q = rng.normal(size=(5, 1))
    p = rng.normal(size=(5, 1))
    db = rng.normal(scale=np.sqrt(dt), size=(5, 1))
    # integral increments have std eps/sqrt(2) ~ 1e-8
    ii = rng.normal(scale=eps / np.sqrt(2), size=(5, 1))
    st = step_exponential(PhaseState(q, p), TANH, eps, dt,
                          IncrementPair(db, ii))
    em = step_euler_maruyama(q, TANH, dt, db)
    assert np.abs(st.q - em).max() <= 1e-6


def test_euler_maruyama_hand_steps():
    idmodel = make_model("constant", const=0.0, scale=1.0)
    q = np.array([0.7])
    db = np.array([0.3])
    assert step_euler_maruyama(q, idmodel, 0.1, db) == pytest.approx([1.0])
    noiseless = make_model("linear", scale=0.0)
    assert step_euler_maruyama(np.array([2.0]), noiseless, 0.5, np.zeros(1)) == pytest.approx([1.0])
    # d=1, f = sin (via constant offset of sin-drift is not sin; build directly)
    sin_model = ModelSpec(name="sin", dimension=1, drift=np.sin,
                          diffusion=lambda q: np.ones(q.shape + (1,)),
                          diffusion_diag=lambda q: np.ones_like(q))
    out = step_euler_maruyama(np.array([np.pi / 2]), sin_model, 0.1, np.array([0.2]))
    assert out == pytest.approx([np.pi / 2 + 0.1 + 0.2], abs=1e-15)


def test_qp_hand_steps_and_consistency():
    # matched with the semi-implicit hand step: Q' = 1, P' = 1/2, Q'-P' = q' = 1/2
    st = step_semi_implicit_qp(QPState(np.zeros(1), np.zeros(1)),
                               LINEAR, 1.0, 1.0, np.ones(1))
    assert st.Q == pytest.approx([1.0], abs=0)
    assert st.P == pytest.approx([0.5], abs=0)
    # exponential variant, same increments plus integral = 1 - e^{-1}:
    # P' = sigma * I, Q' - P' = e^{-1} = q' of step_exponential
    ii = 1.0 - np.exp(-1.0)
    stq = step_exponential_qp(QPState(np.zeros(1), np.zeros(1)),
                              LINEAR, 1.0, 1.0, pair(1.0, ii))
    assert stq.Q == pytest.approx([1.0], abs=0)
    assert stq.P == pytest.approx([ii], abs=0)
    ste = step_exponential(PhaseState(np.zeros(1), np.zeros(1)),
                           LINEAR, 1.0, 1.0, pair(1.0, ii))
    assert stq.Q - stq.P == pytest.approx(ste.q, abs=1e-15)
    assert ste.q == pytest.approx([np.exp(-1.0)], abs=1e-15)


def test_qp_small_eps_reduces_to_euler_maruyama():
    eps, dt = 1e-8, 0.01
    db = np.array([0.05])
    st = step_semi_implicit_qp(QPState(np.array([1.0]), np.array([0.0])),
                               TANH, eps, dt, db)
    em = step_euler_maruyama(np.array([1.0]), TANH, dt, db)
    assert st.P == pytest.approx([0.0], abs=1e-12)
    assert st.Q == pytest.approx(em, abs=1e-15)


@pytest.mark.parametrize("scheme,qp", [("semi-implicit", "semi-implicit-qp"),
                                       ("exponential", "exponential-qp")])
@pytest.mark.parametrize("eps", [1.0, 1e-2, 1e-4])
def test_qp_identity_along_trajectories(scheme, qp, eps):
    model = TANH
    for sid in range(3):
        path = generate_path(31, sid, eps, 0.01, 100, 1)
        cfg = SimConfig(eps=eps, t_end=1.0, n_steps=100, init=IC1)
        direct = integrate(scheme, model, cfg, path)
        transformed = integrate(qp, model, cfg, path)
        gap = np.abs(direct.qs - transformed.positions())
        assert np.all(gap <= 1e-12 * (1.0 + np.abs(direct.qs)))


def test_integrate_zero_steps():
    cfg = SimConfig(eps=0.5, t_end=1.0, n_steps=0, init=IC1)
    empty = NoisePath(eps=0.5, dt=1.0, dbeta=np.zeros((0, 1)), integral=np.zeros((0, 1)))
    traj = integrate("semi-implicit", TANH, cfg, empty)
    assert traj.qs.shape == (1, 1)
    np.testing.assert_array_equal(traj.qs[0], IC1.q0)


def test_integrate_validates_scheme_and_noise():
    path = generate_path(1, 0, 0.5, 0.01, 100, 1)
    cfg = SimConfig(eps=0.5, t_end=1.0, n_steps=100, init=IC1)
    with pytest.raises(UsageError):
        integrate("milstein", TANH, cfg, path)
    wrong_eps = generate_path(1, 0, 0.25, 0.01, 100, 1)
    with pytest.raises(UsageError):
        integrate("exponential", TANH, cfg, wrong_eps)
    # dbeta-only schemes do not care about the path's eps
    integrate("semi-implicit", TANH, cfg, wrong_eps)
    short = generate_path(1, 0, 0.5, 0.01, 50, 1)
    with pytest.raises(UsageError):
        integrate("semi-implicit", TANH, cfg, short)


def test_integrate_blowup_raises_with_step():
    # Euler-Maruyama on f = -q with dt >> 2 amplifies 99x per step and
    # overflows float64 within ~160 steps
    cfg = SimConfig(eps=1.0, t_end=20_000.0, n_steps=200,
                    init=InitialCondition(np.array([1.0]), np.array([0.0])))
    path = generate_path(5, 0, 1.0, 100.0, 200, 1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(IntegrationError) as err:
            integrate("euler-maruyama", make_model("linear"), cfg, path)
    assert err.value.step is not None


@pytest.mark.parametrize("eps", [1.0, 1e-3])
def test_exponential_scheme_exact_for_constant_model(eps):
    model = make_model("constant", dimension=2, const=[0.25, -0.5], scale=0.8)
    ic = InitialCondition(np.array([1.0, -1.0]), np.array([0.5, 2.0]))
    path = generate_path(7, 0, eps, 0.01, 100, 2)
    cfg = SimConfig(eps=eps, t_end=1.0, n_steps=100, init=ic)
    traj = integrate("exponential", model, cfg, path)
    exact = exact_constant_solution(model, ic, eps, path)
    scale = 1.0 + np.abs(exact.qs)
    assert np.all(np.abs(traj.qs - exact.qs) <= 1e-12 * scale)
    assert np.all(np.abs(traj.ps - exact.ps) <= 1e-12 * (1.0 + np.abs(exact.ps)))


def test_exact_constant_solution_requires_constant_model():
    path = generate_path(7, 0, 0.5, 0.01, 10, 1)
    with pytest.raises(UsageError):
        exact_constant_solution(TANH, IC1, 0.5, path)


def test_exact_constant_solution_hand_value():
    # f0 = 1, sigma0 = 0, eps = dt = 1, (q0, p0) = 0: q1 = 1 - (1 - e^{-1})
    model = make_model("constant", const=1.0, scale=0.0)
    ic = InitialCondition(np.zeros(1), np.zeros(1))
    path = NoisePath(eps=1.0, dt=1.0, dbeta=np.zeros((1, 1)), integral=np.zeros((1, 1)))
    traj = exact_constant_solution(model, ic, 1.0, path)
    assert traj.qs[1, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert traj.ps[1, 0] == pytest.approx(1.0 - np.exp(-1.0), abs=1e-15)


def test_exact_constant_noise_free_decay():
    model = make_model("constant", const=0.0, scale=0.0)
    ic = InitialCondition(np.array([0.0]), np.array([1.0]))
    n, dt, eps = 5, 0.1, 0.4
    path = NoisePath(eps=eps, dt=dt, dbeta=np.zeros((n, 1)), integral=np.zeros((n, 1)))
    traj = exact_constant_solution(model, ic, eps, path)
    decay = np.exp(-dt / eps**2)
    np.testing.assert_allclose(traj.ps[:, 0], decay ** np.arange(n + 1), rtol=1e-14)
    # q accumulates eps*(1-decay)-weighted momentum
    expected_q = np.concatenate([[0.0], np.cumsum(eps * (1 - decay) * decay ** np.arange(n))])
    np.testing.assert_allclose(traj.qs[:, 0], expected_q, rtol=1e-13, atol=1e-16)


def test_reference_solution_constant_model_independent_of_ratio():
    model = make_model("constant", dimension=1, const=0.3, scale=1.0)
    ic = InitialCondition(np.array([0.5]), np.array([1.5]))
    eps, n = 0.7, 20
    results = []
    for ratio in (1, 4, 16):
        fine = generate_path(13, 0, eps, 1.0 / (n * ratio), n * ratio, 1)
        results.append(reference_solution(model, ic, eps, 1.0, n, ratio, fine))
    # exactness: every refinement reproduces the same law-exact recursion,
    # but on different draws; instead compare each against the closed form
    for ratio, ref in zip((1, 4, 16), results):
        fine = generate_path(13, 0, eps, 1.0 / (n * ratio), n * ratio, 1)
        exact = exact_constant_solution(model, ic, eps, fine)
        np.testing.assert_allclose(ref.qs, exact.qs[::ratio], rtol=0, atol=1e-13)


def test_reference_solution_validates_shapes():
    fine = generate_path(13, 0, 0.7, 0.01, 100, 1)
    with pytest.raises(UsageError):
        reference_solution(TANH, IC1, 0.7, 1.0, 30, 4, fine)


def test_reference_self_convergence_cauchy():
    # doubling the refinement ratio shrinks the reference increment; the
    # gap between successive refinements decays like the scheme error
    model, eps, n = TANH, 0.05, 16
    gaps = []
    for ratio in (4, 8, 16):
        tot, m = 0.0, 150
        for s in range(m):
            fine = generate_path(17, s, eps, 1.0 / (n * 2 * ratio), n * 2 * ratio, 1)
            half = coarsen_path(fine, 2)
            ref_fine = reference_solution(model, IC1, eps, 1.0, n, 2 * ratio, fine)
            ref_half = reference_solution(model, IC1, eps, 1.0, n, ratio, half)
            tot += float(((ref_fine.qs[-1] - ref_half.qs[-1]) ** 2).sum())
        gaps.append(np.sqrt(tot / m))
    assert gaps[0] > gaps[1] > gaps[2]
    # order ~1/2 in dt_fine means successive gaps shrink by about sqrt(2)
    for a, b in zip(gaps, gaps[1:]):
        assert 1.05 <= a / b <= 2.9


def test_reference_matches_linear_model_closed_form_moments():
    # 'linear' model at eps = 1 is a 2d Gaussian system with exactly
    # computable mean and covariance (matrix exponential + Lyapunov integral)
    eps, t_end, n, ratio, m_samples = 1.0, 1.0, 16, 64, 500
    model = make_model("linear")
    a_mat = np.array([[0.0, 1.0 / eps], [-1.0 / eps, -1.0 / eps**2]])
    b_mat = np.array([[0.0], [1.0 / eps]])
    x0 = np.array([1.0, 1.0])
    mean = expm(a_mat * t_end) @ x0
    blk = np.zeros((4, 4))
    blk[:2, :2] = a_mat
    blk[:2, 2:] = b_mat @ b_mat.T
    blk[2:, 2:] = -a_mat.T
    cov = expm(blk * t_end)[:2, 2:] @ expm(a_mat * t_end).T
    qs = np.empty(m_samples)
    for s in range(m_samples):
        fine = generate_path(19, s, eps, t_end / (n * ratio), n * ratio, 1)
        qs[s] = reference_solution(model, IC1, eps, t_end, n, ratio, fine).qs[-1, 0]
    se_mean = np.sqrt(cov[0, 0] / m_samples)
    assert abs(qs.mean() - mean[0]) <= 4 * se_mean
    se_var = cov[0, 0] * np.sqrt(2.0 / (m_samples - 1))
    assert abs(qs.var(ddof=1) - cov[0, 0]) <= 4 * se_var


def test_trajectory_positions_qp():
    path = generate_path(23, 0, 0.5, 0.01, 10, 1)
    cfg = SimConfig(eps=0.5, t_end=0.1, n_steps=10, init=IC1)
    traj = integrate("semi-implicit-qp", TANH, cfg, path)
    assert traj.representation == "qp"
    np.testing.assert_allclose(traj.positions(), traj.qs - traj.ps)
    np.testing.assert_allclose(traj.positions()[0], IC1.q0)
