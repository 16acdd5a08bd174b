"""Direct high-precision evaluation of the GEAT bound, independent of the library."""

import mpmath as mp

mp.mp.dps = 50


def geat_oracle(max_f, min_sigma, var, h, n, beta, d_z, eps_s, eps_ea):
    max_f, min_sigma, var, h, n, beta = map(mp.mpf, (max_f, min_sigma, var, h, n, beta))
    eps_s, eps_ea = mp.mpf(eps_s), mp.mpf(eps_ea)
    ln2 = mp.log(2)
    v = mp.log(2 * d_z**2 + 1, 2) + mp.sqrt(2 + var)
    spread = 2 * mp.log(d_z, 2) + max_f - min_sigma
    r = beta / (1 - beta)
    k_beta = (1 - beta) ** 3 / (6 * (1 - 2 * beta) ** 3 * ln2) * mp.power(2, r * spread) * mp.log(mp.power(2, spread) + mp.e**2) ** 3
    smoothing = -mp.log(1 - mp.sqrt(1 - eps_s**2), 2)
    eps_term = (smoothing - (1 + beta) * mp.log(eps_ea, 2)) / beta
    total = n * h - r * ln2 / 2 * v**2 - n * r**2 * k_beta - eps_term
    return {"V": v, "K_beta": k_beta, "epsilon_term": eps_term, "total": total}


def key_length_oracle(hmin, leak, l_ev, eps_s, eps_sec):
    """Largest integer l with 2^{-(hmin - leak - l_ev - l + 2)/2} + 2 eps_s <= eps_sec."""
    room = mp.mpf(eps_sec) - 2 * mp.mpf(eps_s)
    if room <= 0:
        return 0
    return max(int(mp.floor(mp.mpf(hmin) - leak - l_ev + 2 + 2 * mp.log(room, 2))), 0)
