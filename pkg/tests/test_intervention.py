import numpy as np
import pytest
from scipy import stats
from scipy.linalg import block_diag

from mlits.basis import basis_for_panel
from mlits.intervention import InterventionParams, InterventionPrior, g_effect, g_matrix, intervention_logprior

UF = np.array([0, 1, 1, 2, 2, 2])  # overall, two levels of factor 1, three of factor 2


def setup(alpha0_scale="covariance", c=1.0, T=30, T_int=18):
    basis = basis_for_panel(T, T_int)
    return basis, InterventionPrior(basis, UF, c=c, alpha0_scale=alpha0_scale)


def random_params(rng, basis, prior, c=1.0):
    U, H1 = UF.size, basis.H + 1
    return InterventionParams(
        alpha=rng.normal(scale=0.5, size=(U, H1)), psi0=float(rng.uniform(0.05, 3)),
        xi=np.concatenate([[1.0], rng.uniform(0.2, 3, 2)]), lam=rng.uniform(0.2, 10, (3, prior.n_blocks)), c=c,
    )


def dense_oracle(p: InterventionParams, basis, prior, literal=False):
    """Explicit covariance, inverse and determinant; no shared code."""
    c = p.c
    v = stats.halfcauchy.logpdf(p.psi0)
    v += sum(stats.gamma.logpdf(x, 1.0, scale=1.0) for x in p.xi[1:])
    a, b = (0 - 5.0) / 30.0, np.inf
    v += stats.truncnorm.logpdf(p.lam, a, b, loc=5.0, scale=30.0).sum()
    s = p.psi0 + c
    for u, j in enumerate(UF):
        if literal:
            sd0 = np.sqrt(s**-2) / p.xi[j]
        else:
            sd0 = np.sqrt(1.0 / (p.xi[j] * s**2))
        v += stats.norm.logpdf(p.alpha[u, 0], 0, sd0)
        blocks = []
        for b_i, (m, sl, P) in enumerate(basis.penalty_blocks):
            blocks.append(np.linalg.inv(P) / p.lam[j, b_i])
        from scipy.linalg import block_diag

        cov = block_diag(*blocks) / (s**2 * p.xi[j])
        v += stats.multivariate_normal.logpdf(p.alpha[u, 1:], np.zeros(basis.H), cov)
    return v


@pytest.mark.parametrize("literal", [False, True])
def test_dense_oracle(rng, literal):
    basis, prior = setup("literal" if literal else "covariance", c=0.7)
    for _ in range(50):
        p = random_params(rng, basis, prior, c=0.7)
        assert abs(intervention_logprior(p, prior) - dense_oracle(p, basis, prior, literal)) < 1e-8


def test_scalar_examples():
    # half-Cauchy(0, 1) at 1 is log(2/pi) - log(2)
    assert stats.halfcauchy.logpdf(1.0) == pytest.approx(np.log(2 / np.pi) - np.log(2), abs=1e-12)
    basis, prior = setup()
    lam = np.full((3, prior.n_blocks), 5.0)
    ones = prior.hyper_logprior(1.0, np.ones(3), lam)
    tiny = prior.hyper_logprior(1.0, np.array([1.0, 1e-300, 1e-300]), lam)
    assert ones - tiny == pytest.approx(-2.0, abs=1e-12)  # Gamma(1, 1) at 1 is -1 per free xi
    psi = prior.hyper_logprior(1.0, np.ones(3), lam) - prior.hyper_logprior(1e-300, np.ones(3), lam)
    assert psi == pytest.approx(-np.log(2), abs=1e-12)


def test_g_effect_examples(rng):
    basis = basis_for_panel(20, 12)
    alpha = np.zeros((3, basis.H + 1))
    assert all(g_effect(alpha, basis, [0, 1], t) == 0 for t in range(20))
    alpha = rng.normal(size=(3, basis.H + 1))
    assert all(g_effect(alpha, basis, [0, 2], t) == 0 for t in range(12))
    shift = np.zeros((1, basis.H + 1))
    shift[0, 0] = 0.3
    assert all(g_effect(shift, basis, [0], t) == pytest.approx(0.3, abs=1e-15) for t in range(12, 20))


def test_g_linear_and_mean_shift(rng):
    basis = basis_for_panel(25, 13)
    a1, a2 = rng.normal(size=(2, 4, basis.H + 1))
    for t in range(25):
        assert abs(g_effect(a1 + a2, basis, [0, 3], t) - g_effect(a1, basis, [0, 3], t) - g_effect(a2, basis, [0, 3], t)) < 1e-12
    post = [g_effect(a1, basis, [0, 1, 3], t) for t in range(13, 25)]
    assert abs(np.mean(post) - (a1[0, 0] + a1[1, 0] + a1[3, 0])) < 1e-12
    G = g_matrix(a1, basis)
    assert G.shape == (25, 4)
    assert G[13:, [0, 1, 3]].sum(axis=1) == pytest.approx(post, abs=1e-12)


def test_shrinkage_monotone_in_lambda(rng):
    basis, prior = setup()
    p = random_params(rng, basis, prior)
    values = []
    for lam1 in np.linspace(0.5, 50, 30):
        lam = p.lam.copy()
        lam[:, 0] = lam1
        q = InterventionParams(p.alpha, p.psi0, p.xi, lam, p.c)
        # alpha-only part: subtract hyperprior, drop normaliser by fixing lambda's own prior
        values.append(prior.logprior(q) - prior.hyper_logprior(q.psi0, q.xi, q.lam)
                      - 0.5 * prior.blocks[0].dim * np.log(lam1) * UF.size)
    assert np.all(np.diff(values) < 0)


def test_xi_scaling_quadratic_term(rng):
    basis, prior = setup()
    p = random_params(rng, basis, prior)
    alpha = np.zeros_like(p.alpha)
    alpha[1] = p.alpha[1]
    def quad(xi1):
        xi = p.xi.copy()
        xi[1] = xi1
        q = InterventionParams(alpha, p.psi0, xi, p.lam, p.c)
        zero = InterventionParams(np.zeros_like(alpha), p.psi0, xi, p.lam, p.c)
        return prior.logprior(q) - prior.logprior(zero)
    assert quad(4.0 * p.xi[1]) == pytest.approx(4.0 * quad(p.xi[1]), rel=1e-12)
    sd0, _ = prior.scales(p.psi0, p.xi * np.array([1, 4, 1]), p.lam)
    sd0_ref, _ = prior.scales(p.psi0, p.xi, p.lam)
    assert sd0[1] == pytest.approx(sd0_ref[1] / 2)


def test_noncentered_round_trip_and_jacobian(rng):
    basis, prior = setup()
    p = random_params(rng, basis, prior)
    raw = prior.raw_from_alpha(p.alpha, p.psi0, p.xi, p.lam)
    np.testing.assert_allclose(prior.alpha_from_raw(raw, p.psi0, p.xi, p.lam), p.alpha, atol=1e-12)
    # centred density = N(raw) - log|d alpha/d raw|
    v_raw = -0.5 * np.sum(raw**2) - 0.5 * np.log(2 * np.pi) * raw.size
    lj = prior.noncentered_log_jacobian(p.psi0, p.xi, p.lam)
    centred = prior.logprior(p) - prior.hyper_logprior(p.psi0, p.xi, p.lam)
    assert centred == pytest.approx(v_raw - lj, abs=1e-9)


def test_params_invariants():
    with pytest.raises(ValueError, match="xi\\[0\\]"):
        InterventionParams(np.zeros((1, 1)), 1.0, np.array([2.0]), np.zeros((1, 0)))
    with pytest.raises(ValueError, match="positive"):
        InterventionParams(np.zeros((1, 1)), 0.0, np.array([1.0]), np.zeros((1, 0)))


def test_centred_gradient(rng):
    basis, prior = setup()
    p = random_params(rng, basis, prior)
    _, g = prior.logprior(p, with_grad=True)
    h = 1e-6
    def at(**kw):
        q = InterventionParams(kw.get("alpha", p.alpha), kw.get("psi0", p.psi0), kw.get("xi", p.xi), kw.get("lam", p.lam), p.c)
        return prior.logprior(q)
    assert (at(psi0=p.psi0 + h) - at(psi0=p.psi0 - h)) / (2 * h) == pytest.approx(g["psi0"], rel=1e-6)
    for j in (1, 2):
        e = np.zeros(3)
        e[j] = h
        assert (at(xi=p.xi + e) - at(xi=p.xi - e)) / (2 * h) == pytest.approx(g["xi"][j], rel=1e-6, abs=1e-8)
    e = np.zeros_like(p.alpha)
    e[4, 2] = h
    assert (at(alpha=p.alpha + e) - at(alpha=p.alpha - e)) / (2 * h) == pytest.approx(g["alpha"][4, 2], rel=1e-6)
