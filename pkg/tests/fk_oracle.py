"""Straight-line reference evaluation of the finite-key formulas.

Written independently of ``wdmqkd.finite_key`` in 50-digit decimal
arithmetic; tests compare the two.
"""
from decimal import Decimal, getcontext

getcontext().prec = 50
D = Decimal
ZERO, ONE, TWO = D(0), D(1), D(2)
LN2 = TWO.ln()


def h2(x):
    x = D(x)
    if x <= 0 or x >= 1:
        return ZERO
    return -(x * x.ln() + (ONE - x) * (ONE - x).ln()) / LN2


def clamp(x, hi):
    return min(max(x, ZERO), D(hi))


def reference_estimate(n, m, lam_ec, lam_c, mu=0.6, nu=0.17, p_mu=0.5, eps_sec=1e-10, eps1=None):
    mu, nu, pm = D(mu), D(nu), D(p_mu)
    pn = ONE - pm
    eps_sec = D(eps_sec)
    e1 = eps_sec if eps1 is None else D(eps1)
    t0 = pm * (-mu).exp() + pn * (-nu).exp()
    t1 = pm * (-mu).exp() * mu + pn * (-nu).exp() * nu
    log_inv = (ONE / e1).ln()

    def adj(counts):
        a, b = D(int(counts[0])), D(int(counts[1]))
        delta = ((a + b) / TWO * log_inv).sqrt()
        f_mu, f_nu = mu.exp() / pm, nu.exp() / pn
        return (max(ZERO, f_mu * (a - delta)), max(ZERO, f_nu * (b - delta)),
                f_mu * (a + delta), f_nu * (b + delta))

    def vac(nb, mb):
        total = int(nb[0]) + int(nb[1])
        if total == 0:
            return ZERO, ZERO
        _, n_nu_lo, n_mu_hi, _ = adj(nb)
        _, _, _, m_nu_hi = adj(mb)
        lo = t0 * (mu * n_nu_lo - nu * n_mu_hi) / (mu - nu)
        return clamp(lo, total), clamp(TWO * t0 * m_nu_hi, total)

    def single(nb, s0_up):
        total = int(nb[0]) + int(nb[1])
        if total == 0:
            return ZERO
        _, n_nu_lo, n_mu_hi, _ = adj(nb)
        val = t1 * mu / (nu * (mu - nu)) * (
            n_nu_lo - nu * nu / (mu * mu) * n_mu_hi - (mu * mu - nu * nu) / (mu * mu) * s0_up / t0)
        return clamp(val, total)

    sK0, sK0u = vac(n[0], m[0])
    sK1 = single(n[0], sK0u)
    _, sC0u = vac(n[1], m[1])
    sC1 = single(n[1], sC0u)
    _, m_nu_lo, m_mu_hi, _ = adj(m[1])
    vC1 = clamp(t1 * (m_mu_hi - m_nu_lo) / (mu - nu), int(n[1][0]) + int(n[1][1]))
    lam_sec = 6 * (D(19) / eps_sec).ln() / LN2
    if sC1 <= 0 or sK1 <= 0:
        return dict(s_K0=sK0, s_K1=sK1, phi=D("0.5"), v_C1=vC1, s_C1=sC1, lambda_sec=lam_sec, skl=0)
    b = vC1 / sC1
    c, d = sC1, sK1
    fl = min(D("0.5"), (ONE / eps_sec).ln() / c)
    bb = min(max(b, fl), ONE - fl)
    v = bb * (ONE - bb)
    arg = (c + d) / (c * d * v) * (D(21) ** 2 / eps_sec ** 2)
    g = ZERO if arg <= 1 else ((c + d) * v / (c * d * LN2) * (arg.ln() / LN2)).sqrt()
    phi = min(max(b + g, ZERO), D("0.5"))
    raw = sK0 + sK1 * (ONE - h2(phi)) - D(lam_ec) - D(lam_c) - lam_sec
    skl = max(0, int(raw.to_integral_value(rounding="ROUND_FLOOR")))
    skl = min(skl, int(n[0][0]) + int(n[0][1]))
    return dict(s_K0=sK0, s_K1=sK1, phi=phi, v_C1=vC1, s_C1=sC1, lambda_sec=lam_sec, skl=skl)
