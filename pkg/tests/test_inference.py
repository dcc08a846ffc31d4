import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from jax.flatten_util import ravel_pytree
from scipy.linalg import solve_discrete_lyapunov
from scipy.stats import norm

from cskgp.errors import EmptyWindow, UntrainedModel, ValidationError
from cskgp.inference import dsvi, mapfit, predictive, sghmc
from cskgp.inference import model as mdl
from cskgp.numerics import finite_diff_grad

FAMILIES = ["SE", "SM", "NSQ", "GSM", "CSK"]


def toy(family="CSK", n=5, m=4, seed=0, beta=10.0, whiten_f=True):
    r = np.random.default_rng(seed)
    X = np.sort(r.uniform(-1, 1, n))[:, None]
    y = np.sin(3 * X[:, 0]) + 0.1 * r.normal(size=n)
    P = 1
    lay = mdl.ModelLayout.default(family, P, 1, medians={"mu": 1.0}, whiten_f=whiten_f)
    kw = {"kernel_mu": 1.0} if family == "SM" else {}
    h = mdl.init_hypers(lay, np.linspace(-1, 1, m)[:, None], np.linspace(-1, 1, m - 1)[:, None],
                        beta=beta, **kw)
    st = {k: jnp.asarray(0.5 * r.normal(size=v.shape)) for k, v in mdl.init_state(lay, h).items()}
    return X, y, lay, h, st


# --- energy ------------------------------------------------------------------------


def test_full_batch_energy_matches_direct_evaluation():
    X, y, lay, h, st = toy()
    noise = mdl.draw_noise(lay, h, len(y), jax.random.PRNGKey(1))
    U = float(mdl.energy(lay, h, st, X, y, len(y), noise))
    fw = mdl.forward(lay, h, st, X, noise["theta"])
    f_hat = np.asarray(fw.mean) + np.sqrt(np.asarray(fw.var)) * np.asarray(noise["f"])
    beta = float(np.exp(h["log_beta"]))
    direct = (np.sum(norm.logpdf(y, f_hat, 1 / math.sqrt(beta)))
              + np.sum(norm.logpdf(np.asarray(st["u_f"]))) + np.sum(norm.logpdf(np.asarray(st["v_theta"]))))
    assert U == pytest.approx(-direct, rel=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_energy_gradient_matches_finite_differences(family):
    X, y, lay, h, st = toy(family)
    noise = mdl.draw_noise(lay, h, len(y), jax.random.PRNGKey(2))
    flat, unravel = ravel_pytree(st)
    fn = lambda x: mdl.energy(lay, h, unravel(jnp.asarray(x)), X, y, 10, noise)
    g = np.asarray(jax.grad(fn)(flat))
    gf = finite_diff_grad(lambda x: float(fn(x)), np.asarray(flat))
    assert np.max(np.abs(g - gf)) / np.max(np.abs(gf)) <= 1e-4


def test_unwhitened_energy_gradient():
    X, y, lay, h, st = toy("CSK", whiten_f=False)
    noise = mdl.draw_noise(lay, h, len(y), jax.random.PRNGKey(3))
    flat, unravel = ravel_pytree(st)
    fn = lambda x: mdl.energy(lay, h, unravel(jnp.asarray(x)), X, y, 5, noise)
    g = np.asarray(jax.grad(fn)(flat))
    gf = finite_diff_grad(lambda x: float(fn(x)), np.asarray(flat))
    assert np.max(np.abs(g - gf)) / np.max(np.abs(gf)) <= 1e-4


def test_doubling_beta_at_exact_fit():
    y = jnp.linspace(-1, 1, 7)
    a = jnp.sum(mdl.gaussian_loglik(y, y, jnp.log(3.0)))
    b = jnp.sum(mdl.gaussian_loglik(y, y, jnp.log(6.0)))
    assert float(b - a) == pytest.approx(7 / 2 * math.log(2), rel=1e-14)


def test_minibatch_likelihood_is_unbiased():
    X, y, lay, h, st = toy("CSK", n=12, m=4)
    n, B = 12, 4
    f_eps = jax.random.normal(jax.random.PRNGKey(4), (n,))

    def lik(idx):
        noise = {"theta": jnp.zeros((lay.n_functions, len(idx) + 4)), "f": f_eps[idx]}
        return float(mdl.energy_terms(lay, h, st, X[idx], y[idx], n, noise)["lik"])

    perm = np.random.default_rng(0).permutation(n)
    batches = [perm[i:i + B] for i in range(0, n, B)]
    avg = np.mean([lik(b) for b in batches])
    assert abs(avg - lik(np.arange(n))) <= 1e-10 * max(1.0, abs(avg))


# --- sampler -------------------------------------------------------------------------


def test_step_with_zero_gradient_and_noise_is_identity():
    cfg = sghmc.SamplerConfig()
    x0 = jnp.array([1.0, -2.0])
    x, v = sghmc.sghmc_step(x0, jnp.zeros(2), lambda x, k: jnp.zeros_like(x), cfg,
                            noise=jnp.zeros((cfg.n_leapfrog, 2)))
    np.testing.assert_array_equal(np.asarray(x), np.asarray(x0))
    np.testing.assert_array_equal(np.asarray(v), 0.0)


def test_step_reproducible():
    cfg = sghmc.SamplerConfig(step_size=0.01)
    g = lambda x, k: x
    a = sghmc.sample_chain(g, jnp.ones(3), cfg, 50, jax.random.PRNGKey(8))
    b = sghmc.sample_chain(g, jnp.ones(3), cfg, 50, jax.random.PRNGKey(8))
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_quadratic_stationary_variance():
    eta, a = 0.05, 0.1
    cfg = sghmc.SamplerConfig(step_size=eta, friction=a, n_leapfrog=1)
    xs = np.asarray(sghmc.sample_chain(lambda x, k: x, jnp.zeros(1), cfg, 100_000,
                                       jax.random.PRNGKey(0), eta=eta))[:, 0]
    # linear recursion z' = M z + b xi with z = (x, v)
    M = np.array([[1 - eta, 1 - a], [-eta, 1 - a]])
    b = math.sqrt(2 * a * eta) * np.ones((2, 1))
    target = solve_discrete_lyapunov(M, b @ b.T)[0, 0]
    burn = 1000
    assert abs(np.var(xs[burn:]) - target) <= 0.10 * target


def test_config_validation():
    with pytest.raises(ValidationError):
        sghmc.SamplerConfig(step_size=0.0)
    with pytest.raises(ValidationError):
        sghmc.SamplerConfig(window_len=0)
    assert sghmc.SamplerConfig().to_dict()["burn_in"] == 2000


def test_window_ring_semantics():
    w = sghmc.SampleWindow(10)
    for i in range(50):
        w.push(i)
    assert list(w) == list(range(40, 50)) and len(w) == 10 and w[0] == 40
    assert w.draw(np.random.default_rng(0)) in range(40, 50)
    w.clear()
    with pytest.raises(EmptyWindow):
        w.draw(np.random.default_rng(0))


def test_run_keeps_last_window_of_snapshots():
    X, y, lay, h, _ = toy("SE", n=6, m=3)
    cfg = sghmc.SamplerConfig(burn_in=0, n_samples=500, thin=10, window_len=10, em_every=50, seed=1)
    res = sghmc.run_sghmc(X, y, lay, h, cfg)
    assert len(res.window) == 10 and res.n_steps == 500
    assert len(res.energy_trace) == 500


def test_degenerate_two_point_dataset():
    X = np.array([[0.0], [1e-9]])
    y = np.array([1.0, 1.0])
    lay = mdl.ModelLayout.default("CSK", 1, 1)
    h = mdl.init_hypers(lay, X, X)
    cfg = sghmc.SamplerConfig(burn_in=50, n_samples=50, em_every=25)
    res = sghmc.run_sghmc(X, y, lay, h, cfg)
    assert len(res.window) > 0 and np.all(np.isfinite(res.energy_trace))


def conjugate_problem(n=8, beta=25.0):
    X = np.linspace(-2, 2, n)[:, None]
    y = np.sin(1.5 * X[:, 0]) + np.random.default_rng(3).normal(0, 0.2, n)
    lay = mdl.ModelLayout.default("SE", 1, 1)
    h = mdl.init_hypers(lay, X, beta=beta, kernel_ell=0.7)
    fw = mdl.forward(lay, h, mdl.init_state(lay, h), X)
    A = np.asarray(fw.A)  # f = A^T v at the inducing inputs
    prec = np.eye(n) + beta * A @ A.T
    mean = np.linalg.solve(prec, beta * A @ y)
    return X, y, lay, h, mean, prec


def batch_means_se(x, n_batches=20):
    b = np.array_split(x, n_batches)
    return np.std([c.mean(axis=0) for c in b], axis=0, ddof=1) / math.sqrt(n_batches)


def test_conjugate_posterior_mean_recovered():
    X, y, lay, h, mean, _ = conjugate_problem()
    cfg = sghmc.SamplerConfig(step_size=0.02, friction=0.05, burn_in=2000, n_samples=20_000, thin=10,
                              window_len=2000, learn_hypers=False, minibatch=8, seed=5)
    res = sghmc.run_sghmc(X, y, lay, h, cfg)
    U = np.stack([np.asarray(s["state"]["u_f"]) for s in res.window])
    se = batch_means_se(U)
    assert np.all(np.abs(U.mean(axis=0) - mean) <= 3 * se)


# --- MCEM -----------------------------------------------------------------------------


def beta_problem(beta_true=4.0, n=200, seed=0):
    r = np.random.default_rng(seed)
    X = np.sort(r.uniform(-2, 2, n))[:, None]
    y = np.sin(2 * X[:, 0]) + r.normal(0, 1 / math.sqrt(beta_true), n)
    lay = mdl.ModelLayout.default("SE", 1, 1)
    z = np.linspace(-2, 2, 15)[:, None]
    h = mdl.init_hypers(lay, z, beta=beta_true, kernel_ell=0.6)
    st = mapfit.map_fit(X, y, lay, h, iters=300, lr=0.1).state
    return X, y, lay, h, st


def run_mcem(X, y, lay, h, st, beta0, steps=200, lr=1e-2):
    cfg = sghmc.SamplerConfig()
    keys = ("log_beta",)
    grad = sghmc._make_mcem_grad(lay, X, y, cfg, keys)
    idx = jnp.arange(len(y))
    hypers = dict(h, log_beta=jnp.log(beta0))
    window = sghmc.SampleWindow(5, [st] * 5)
    sub, opt_state = {"log_beta": hypers["log_beta"]}, None
    trace = []
    rng = np.random.default_rng(0)
    for _ in range(steps):
        sub, opt_state = sghmc.mcem_update(window, sub, lr, lambda s, sb: grad(s, dict(hypers, **sb), idx, 1e-6),
                                           rng, opt_state)
        trace.append(float(jnp.exp(sub["log_beta"])))
    return trace


@pytest.mark.parametrize("beta0", [100.0, 0.5])
def test_mcem_moves_beta_toward_truth(beta0):
    X, y, lay, h, st = beta_problem()
    trace = run_mcem(X, y, lay, h, st, beta0)
    assert abs(math.log(trace[-1] / 4.0)) < abs(math.log(beta0 / 4.0))
    assert (trace[-1] - trace[0]) * (4.0 - beta0) > 0


def test_mcem_zero_rate_leaves_hypers():
    X, y, lay, h, st = toy("SE")
    window = sghmc.SampleWindow(3, [{"state": st}] * 3)
    grad = lambda s, hh: jax.tree_util.tree_map(jnp.ones_like, hh)
    sub = {"log_beta": h["log_beta"]}
    out, _ = sghmc.mcem_update(window, sub, 0.0, grad, np.random.default_rng(0))
    assert float(out["log_beta"]) == float(h["log_beta"])


def test_mcem_identical_snapshots_deterministic():
    X, y, lay, h, st = toy("SE")
    grad = sghmc._make_mcem_grad(lay, X, y, sghmc.SamplerConfig(), ("log_beta", "log_ell"))
    window = sghmc.SampleWindow(4, [{"state": st}] * 4)
    sub = {"log_beta": h["log_beta"], "log_ell": h["log_ell"]}
    fn = lambda s, sb: grad(s, dict(h, **sb), jnp.arange(5), 1e-6)
    a, _ = sghmc.mcem_update(window, sub, 1e-2, fn, np.random.default_rng(1))
    b, _ = sghmc.mcem_update(window, sub, 1e-2, fn, np.random.default_rng(99))
    for k in sub:
        np.testing.assert_array_equal(np.asarray(a[k]), np.asarray(b[k]))


def test_mcem_empty_window():
    with pytest.raises(EmptyWindow):
        sghmc.mcem_update(sghmc.SampleWindow(2), {}, 1e-3, lambda s, h: {}, np.random.default_rng(0))


# --- variational ------------------------------------------------------------------------


@pytest.mark.parametrize("estimator", ["marginal", "sample"])
def test_elbo_at_prior_is_expected_loglik(estimator):
    X, y, lay, h, st = toy("CSK")
    vs = dsvi.init_vstate(lay, h, f_scale=1.0, theta_scale=1.0)
    noise = dsvi.draw_vnoise(lay, h, vs, len(y), jax.random.PRNGKey(0))
    kl = float(dsvi.kl_whitened(vs["m_f"], vs["S_f"]) + jnp.sum(dsvi.kl_whitened(vs["m_theta"], vs["S_theta"])))
    assert kl == 0.0
    e = float(dsvi.dsvi_elbo(lay, h, vs, X, y, len(y), noise, estimator=estimator))
    v_theta = jnp.einsum("hij,hj->hi", vs["S_theta"], noise["v_theta"])
    fw = mdl.forward(lay, h, {"v_theta": v_theta, "u_f": vs["m_f"]}, X, noise["theta"])
    if estimator == "marginal":
        ref = jnp.sum(mdl.expected_loglik(y, fw.mean, fw.var + jnp.sum(fw.A**2, axis=0), h["log_beta"]))
    else:
        fw = mdl.forward(lay, h, {"v_theta": v_theta, "u_f": noise["v_f"]}, X, noise["theta"])
        ref = jnp.sum(mdl.gaussian_loglik(y, fw.mean + jnp.sqrt(fw.var) * noise["f"], h["log_beta"]))
    assert e == pytest.approx(float(ref), rel=1e-12)


def test_kl_closed_form_and_growth():
    r = np.random.default_rng(0)
    m = r.normal(size=3)
    L = np.tril(r.normal(size=(3, 3))) + 2 * np.eye(3)
    S = L @ L.T
    ref = 0.5 * (np.trace(S) + m @ m - 3 - np.log(np.linalg.det(S)))
    assert float(dsvi.kl_whitened(jnp.asarray(m), jnp.asarray(L))) == pytest.approx(ref, rel=1e-12)
    kls = [float(dsvi.kl_whitened(jnp.zeros(3), s * jnp.eye(3))) for s in (1.0, 1e-2, 1e-4, 1e-8)]
    assert kls[0] == 0.0 and all(b > a for a, b in zip(kls, kls[1:])) and kls[-1] > 50


@pytest.mark.parametrize("estimator", ["marginal", "sample"])
@pytest.mark.parametrize("family", ["SE", "CSK", "GSM"])
def test_elbo_gradient_matches_finite_differences(family, estimator):
    X, y, lay, h, st = toy(family, n=4, m=4)
    vs = dsvi.init_vstate(lay, h, state=st, theta_scale=0.3, f_scale=0.5)
    noise = dsvi.draw_vnoise(lay, h, vs, 4, jax.random.PRNGKey(1))
    flat, unravel = ravel_pytree(vs)
    fn = lambda x: dsvi.dsvi_elbo(lay, h, unravel(jnp.asarray(x)), X, y, 8, noise, estimator=estimator)
    g = np.asarray(jax.grad(fn)(flat))
    gf = finite_diff_grad(lambda x: float(fn(x)), np.asarray(flat))
    assert np.max(np.abs(g - gf)) / np.max(np.abs(gf)) <= 1e-3


def test_fit_dsvi_improves_elbo_and_keeps_positive_diagonal():
    X, y, lay, h, _ = toy("CSK", n=30, m=6)
    res = dsvi.fit_dsvi(X, y, lay, h, 400, lr=1e-2, minibatch=30, seed=0)
    tr = np.asarray(res.elbo_trace)
    assert tr[-50:].mean() > tr[:50].mean()
    for k in ("S_f", "S_theta"):
        assert np.all(np.diagonal(np.asarray(res.vstate[k]), axis1=-2, axis2=-1) > 0)
    draws = dsvi.sample_states(res.vstate, 3, jax.random.PRNGKey(0))
    assert len(draws) == 3 and draws[0]["u_f"].shape == (6,)


def test_unknown_estimator():
    X, y, lay, h, _ = toy("SE")
    with pytest.raises(ValidationError):
        dsvi.fit_dsvi(X, y, lay, h, 1, estimator="median")


# --- MAP --------------------------------------------------------------------------------------


def test_map_zero_iterations_returns_start():
    X, y, lay, h, st = toy("CSK")
    res = mapfit.map_fit(X, y, lay, h, state0=st, iters=0)
    for k in st:
        np.testing.assert_array_equal(np.asarray(res.state[k]), np.asarray(st[k]))


@pytest.mark.parametrize("family", ["SE", "CSK"])
def test_map_objective_non_decreasing(family):
    X, y, lay, h, _ = toy(family, n=20, m=6)
    res = mapfit.map_fit(X, y, lay, h, iters=150, lr=0.1)
    d = np.diff(res.objective_trace)
    assert np.all(d >= -1e-10)
    assert res.objective_trace[-1] > res.objective_trace[0]


# --- prediction --------------------------------------------------------------------------------


def test_mixture_examples():
    assert float(predictive.mixture_logpdf(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)))[0]) == pytest.approx(
        -0.9189385, abs=1e-7)
    v = predictive.mixture_logpdf(np.zeros(1), np.array([[1.0], [-1.0]]), np.ones((2, 1)))
    assert float(v[0]) == pytest.approx(-1.4189385, abs=1e-7)


def test_perfect_prediction_scores():
    r = predictive.PredictiveResult(np.array([[0.5, -1.0]]), np.ones((1, 2))).score([0.5, -1.0])
    assert r.mse == 0.0 and r.mean_loglik == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_prediction_interpolates_at_inducing_input():
    X, y, lay, h, _ = toy("SE", whiten_f=False, beta=1e4)
    u = jnp.array([0.3, -0.7, 1.1, 0.2])
    st = {"v_theta": jnp.zeros((0, 0)), "u_f": u}
    res = predictive.predict(lay, [{"state": st, "hypers": h}], np.asarray(h["z_f"]), jitter=1e-12)
    np.testing.assert_allclose(res.mean, np.asarray(u), atol=1e-8)


def test_predictive_variance_floor():
    X, y, lay, h, st = toy("CSK", beta=30.0)
    samples = [{"state": st, "hypers": h}] * 3
    res = predictive.predict(lay, samples, np.linspace(-3, 3, 40)[:, None], seed=2)
    assert np.all(res.variances >= 1 / 30.0) and np.all(res.variance >= 1 / 30.0 - 1e-15)


def test_chunked_prediction_matches_unchunked_in_mean_mode():
    X, y, lay, h, st = toy("CSK")
    Xt = np.linspace(-2, 2, 25)[:, None]
    a = predictive.predict(lay, [{"state": st, "hypers": h}], Xt, theta_mode="mean", chunk=7)
    b = predictive.predict(lay, [{"state": st, "hypers": h}], Xt, theta_mode="mean")
    np.testing.assert_allclose(a.means, b.means, atol=1e-12)
    np.testing.assert_allclose(a.variances, b.variances, atol=1e-12)


def test_predict_without_samples():
    X, y, lay, h, _ = toy("SE")
    with pytest.raises(UntrainedModel):
        predictive.predict(lay, [], X)
