import numpy as np
import pytest

from famr import nn, theory
from famr.data import ForgetSpec, draw_like, gen_blobs, split_forget
from famr.losses import LossWeights, NetworkForgetLoss
from famr.metrics import certificate_l1
from famr.optim import FamrConfig, famr_run, stationarity_residual
from famr.theory import HessianMatrix

from oracles import central_difference

L2 = 0.01


@pytest.fixture(scope="module")
def logistic():
    """Softmax regression, C=3, d=2, n=300, forgetting every tenth sample."""
    data = gen_blobs(3, 100, 2, 0.3, 0)
    forget, retain = split_forget(data, ForgetSpec("samples", sample_indices=tuple(range(0, 300, 10))))
    spec = nn.ModelSpec((2, 3))
    cfg = nn.TrainConfig(epochs=50, lr=0.1, seed=0, batch_size=32, l2=L2)
    theta0 = nn.train_baseline(data, spec, cfg)
    w_star = theory.retrain_oracle(retain, spec, cfg)
    H, g = theory.removal_system(theta0, spec, retain, L2, "analytic_logistic")
    return dict(data=data, forget=forget, retain=retain, spec=spec, cfg=cfg,
                theta0=theta0, w_star=w_star, H=H, g=g)


class TestJacobi:
    def test_diagonal(self):
        assert theory.min_eigenvalue(np.diag([1.0, 3.0])) == 1.0

    @pytest.mark.parametrize("n", [1, 4, 9])
    def test_identity(self, n):
        assert theory.min_eigenvalue(np.eye(n)) == 1.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((20, 20))
        A = (B + B.T) / 2
        w, V = theory.jacobi_eigh(A)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(A), atol=1e-8)
        np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-8)
        np.testing.assert_allclose(V.T @ V, np.eye(20), atol=1e-10)

    def test_sweep_cap(self):
        with pytest.raises(theory.NonConvergence):
            theory.jacobi_eigh(np.array([[1.0, 2.0], [2.0, 1.0]]), max_sweeps=0)

    def test_not_square(self):
        with pytest.raises(ValueError):
            theory.jacobi_eigh(np.zeros((2, 3)))


class TestHessian:
    def test_scalar_quadratic(self):
        H = theory.fd_hessian(lambda t: t.copy(), np.array([0.7]))
        np.testing.assert_allclose(H, [[1.0]], atol=1e-12)

    def test_sources_agree(self, logistic):
        s = logistic
        X, y = s["data"].inputs, s["data"].labels
        fd = theory.hessian(s["theta0"], s["spec"], X, y, "finite_difference", L2)
        an = theory.hessian(s["theta0"], s["spec"], X, y, "analytic_logistic", L2)
        assert np.max(np.abs(fd.entries - an.entries)) < 1e-4
        assert np.array_equal(fd.entries, fd.entries.T)

    def test_lambda_min_consistent(self, logistic):
        H = logistic["H"]
        assert abs(H.lambda_min - np.linalg.eigvalsh(H.entries)[0]) < 1e-6

    def test_guard(self):
        spec = nn.ModelSpec((40, 50, 3))
        assert spec.n_params > theory.MAX_DENSE_PARAMS
        with pytest.raises(theory.HessianTooLarge, match="2000"):
            theory.hessian(np.zeros(spec.n_params), spec, np.zeros((1, 40)), [0])

    def test_analytic_only_for_linear(self):
        spec = nn.ModelSpec((2, 3, 2))
        with pytest.raises(ValueError):
            theory.hessian(np.zeros(spec.n_params), spec, np.zeros((1, 2)), [0], "analytic_logistic")


class TestInfluenceAndNewton:
    def test_no_gradient_returns_theta0(self):
        H = HessianMatrix(np.eye(3), "finite_difference")
        theta0 = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(theory.influence_update(theta0, H, [np.zeros(3)]), theta0)

    def test_diagonal_solve(self):
        H = HessianMatrix(2 * np.eye(2), "finite_difference")
        g = np.array([1.0, -4.0])
        np.testing.assert_allclose(theory.influence_update(np.zeros(2), H, [g]), -g / 2, rtol=1e-15)
        # gradients given as a list are summed
        np.testing.assert_allclose(theory.influence_update(np.zeros(2), H, [g / 2, g / 2]), -g / 2)

    def test_singular_needs_damping(self):
        H = HessianMatrix(np.diag([1.0, 0.0]), "finite_difference")
        with pytest.raises(np.linalg.LinAlgError, match="lambda_min"):
            theory.influence_update(np.zeros(2), H, [np.ones(2)])
        out = theory.influence_update(np.zeros(2), H, [np.ones(2)], damping=1.0)
        np.testing.assert_allclose(out, [-0.5, -1.0])

    def test_newton_identity(self):
        H = HessianMatrix(np.eye(3), "finite_difference")
        g = np.array([2.0, 0.0, -2.0])
        np.testing.assert_allclose(theory.damped_newton_solution(np.zeros(3), H, 1.0, g), -g / 2)

    def test_newton_huge_lambda(self, logistic):
        s = logistic
        th = theory.damped_newton_solution(s["theta0"], s["H"], 1e9, s["g"])
        assert np.linalg.norm(th - s["theta0"].values) < 1e-6

    def test_newton_indefinite(self):
        H = HessianMatrix(np.diag([-1.0, 1.0]), "finite_difference")
        with pytest.raises(np.linalg.LinAlgError):
            theory.damped_newton_solution(np.zeros(2), H, 1.0, np.ones(2))

    def test_newton_approaches_influence_monotonically(self, logistic):
        s = logistic
        infl = theory.influence_update(s["theta0"], s["H"], s["g"])
        gaps = [np.linalg.norm(theory.damped_newton_solution(s["theta0"], s["H"], lam, s["g"]) - infl)
                for lam in (1, 1e-1, 1e-2, 1e-3, 1e-8)]
        assert np.all(np.diff(gaps) < 0)
        assert gaps[-1] < 1e-6

    def test_least_squares_removal_is_exact(self):
        rng = np.random.default_rng(0)
        X = np.hstack([rng.standard_normal((60, 3)), np.ones((60, 1))])
        y = X @ np.array([1.0, -2.0, 0.5, 0.3]) + 0.1 * rng.standard_normal(60)
        keep = np.arange(60) >= 7
        theta0 = np.linalg.lstsq(X, y, rcond=None)[0]
        XR, yR = X[keep], y[keep]
        w = np.linalg.solve(XR.T @ XR, XR.T @ yR)
        H = HessianMatrix(XR.T @ XR / keep.sum(), "analytic_logistic")
        g = XR.T @ (XR @ theta0 - yR) / keep.sum()
        np.testing.assert_allclose(theory.influence_update(theta0, H, g), w, atol=1e-12)


class TestGapBound:
    def test_examples(self):
        assert theory.parameter_gap_bound(0.0, 1.0, 5.0) == 0.0
        assert theory.parameter_gap_bound(0.1, 1.0, 2.0) == pytest.approx(0.2)

    def test_requires_positive_curvature(self):
        with pytest.raises(ValueError):
            theory.parameter_gap_bound(0.1, 0.0, 1.0)

    def test_quadratic_sweep(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((40, 5))
        y = rng.standard_normal(40)
        keep = np.arange(40) >= 5
        XR, yR = X[keep], y[keep]
        theta0 = np.linalg.lstsq(X, y, rcond=None)[0]
        H = HessianMatrix(XR.T @ XR / keep.sum(), "analytic_logistic")
        g = XR.T @ (XR @ theta0 - yR) / keep.sum()
        w = np.linalg.solve(H.entries, H.entries @ theta0 - g)
        for lam in (1, 1e-1, 1e-2, 1e-3):
            gap = np.linalg.norm(theory.damped_newton_solution(theta0, H, lam, g) - w)
            assert gap <= theory.parameter_gap_bound(lam, H.lambda_min, np.linalg.norm(g)) * (1 + 1e-6)


class TestLipschitz:
    def test_linear_closed_form(self):
        spec = nn.ModelSpec((2, 3), bias=False)
        theta = np.random.default_rng(0).standard_normal(spec.n_params)
        assert theory.estimate_lipschitz(theta, spec, [[3.0, 4.0]]) == pytest.approx(7.5, rel=1e-12)

    def test_zero_probes(self):
        spec = nn.ModelSpec((2, 3), bias=False)
        assert theory.estimate_lipschitz(np.ones(spec.n_params), spec, np.zeros((4, 2))) == 0.0

    def test_empty_probes(self):
        spec = nn.ModelSpec((2, 3))
        with pytest.raises(ValueError):
            theory.estimate_lipschitz(np.zeros(spec.n_params), spec, np.zeros((0, 2)))

    @pytest.mark.parametrize("output", ["logits", "probs"])
    def test_directional_probe(self, output):
        rng = np.random.default_rng(2)
        spec = nn.ModelSpec((3, 5, 4), "tanh")
        theta = nn.init_params(spec, 2).values
        X = rng.standard_normal((10, 3))
        L = theory.estimate_lipschitz(theta, spec, X, output)
        f = (lambda t: nn.forward_batch(t, spec, X)[0]) if output == "logits" else \
            (lambda t: nn.predict_proba(t, spec, X))
        eps = 1e-4
        for _ in range(100):
            d = rng.standard_normal(spec.n_params)
            d /= np.linalg.norm(d)
            change = np.linalg.norm(f(theta + eps * d) - f(theta), axis=1).max() / eps
            assert change <= L

    def test_jacobian_rows_match_differences(self):
        spec = nn.ModelSpec((2, 3, 2), "relu")
        theta = nn.init_params(spec, 4).values + 0.05
        x = np.array([0.4, -0.9])
        J = nn.logit_jacobian(theta, spec, x)
        fd = central_difference(lambda t: nn.forward(t, spec, x)[0][1], theta)
        np.testing.assert_allclose(J[1], fd, atol=1e-8)


class TestVerifyBounds:
    def test_identical_models(self, logistic):
        s = logistic
        rep = theory.verify_bounds(s["w_star"], s["w_star"], s["spec"], s["H"], 0.1, s["g"],
                                   s["forget"].inputs, s["forget"].inputs)
        assert rep.param_gap == 0 and rep.max_output_gap == 0
        assert rep.holds_param and rep.holds_output

    def test_certificate_examples(self):
        spec = nn.ModelSpec((2, 2))
        assert certificate_l1(np.zeros(spec.n_params), spec, np.ones((3, 2))) == 0.0
        theta = np.array([0.0, 0.0, 0.0, 0.0, 1000.0, 0.0])
        assert certificate_l1(theta, spec, np.ones((1, 2))) == pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch(self, logistic):
        s = logistic
        with pytest.raises(ValueError):
            theory.verify_bounds(s["w_star"].values[:-1], s["w_star"], s["spec"], s["H"], 0.1, s["g"],
                                 s["forget"].inputs, s["forget"].inputs)

    def test_output_bound_over_grid(self, logistic):
        s = logistic
        probes = np.vstack([s["forget"].inputs, draw_like(s["data"], 100, 0)])
        for lam in (1, 1e-1, 1e-2, 1e-3):
            th = theory.damped_newton_solution(s["theta0"], s["H"], lam, s["g"])
            rep = theory.verify_bounds(th, s["w_star"], s["spec"], s["H"], lam, s["g"], probes,
                                       s["forget"].inputs)
            assert rep.holds_output
            assert rep.max_output_gap <= rep.output_bound
            assert all(v >= 0 for k, v in rep.to_dict().items() if not k.startswith("holds"))


class TestRetrainOracle:
    def test_cross_seed_agreement(self, logistic):
        s = logistic
        other = theory.retrain_oracle(s["retain"], s["spec"], nn.TrainConfig(epochs=50, lr=0.1, seed=9, l2=L2))
        assert np.linalg.norm(other.values - s["w_star"].values) < 1e-5

    def test_converged_on_full_data(self, logistic):
        s = logistic
        w = theory.retrain_oracle(s["data"], s["spec"], s["cfg"])
        _, g = nn.training_objective(w, s["spec"], s["data"].inputs, s["data"].labels, L2)
        assert np.linalg.norm(g) < 1e-7

    def test_removing_a_class_lowers_its_probability(self, logistic):
        s = logistic
        full = theory.retrain_oracle(s["data"], s["spec"], s["cfg"])
        _, retain = split_forget(s["data"], ForgetSpec("class", class_id=1))
        removed = theory.retrain_oracle(retain, s["spec"], s["cfg"])
        held = gen_blobs(3, 20, 2, 0.3, 0, noise_seed=11)
        X1 = held.inputs[held.labels == 1]
        before = nn.predict_proba(full, s["spec"], X1)[:, 1]
        after = nn.predict_proba(removed, s["spec"], X1)[:, 1]
        assert np.all(after < before)

    def test_empty(self, logistic):
        with pytest.raises(ValueError):
            theory.retrain_oracle(logistic["data"].subset([]), logistic["spec"], logistic["cfg"])


class TestFamrAgreement:
    """On a softmax-linear model the uniform-KL forget loss is convex in theta."""

    def test_matches_newton_on_forget_objective(self, logistic):
        s = logistic
        loss = NetworkForgetLoss(s["spec"], s["forget"].inputs, LossWeights())
        lam = 0.1
        theta, _ = famr_run(s["theta0"], loss, FamrConfig(lam=lam, eta=0.5, iters=4000, record_every=4000))
        newton = theory.anchored_newton_solution(s["theta0"], loss, lam)
        assert stationarity_residual(theta, s["theta0"], loss, lam) < 1e-6
        X = s["forget"].inputs
        l1 = np.abs(nn.predict_proba(theta, s["spec"], X) - nn.predict_proba(newton, s["spec"], X)).sum(1)
        assert l1.max() < 1e-3

    def test_certificate_and_tradeoff_over_grid(self, logistic):
        s = logistic
        loss = NetworkForgetLoss(s["spec"], s["forget"].inputs, LossWeights())
        base = loss.value(s["theta0"].values)
        certs, dists = [], []
        for lam in (1, 1e-1, 1e-2, 1e-3):
            th = theory.anchored_newton_solution(s["theta0"], loss, lam)
            certs.append(certificate_l1(th, s["spec"], s["forget"].inputs))
            dists.append(np.linalg.norm(th - s["theta0"].values))
            assert loss.value(th) <= base + 1e-9
        assert np.all(np.diff(certs) <= 1e-12)
        assert np.all(np.diff(dists) >= -1e-12)
