"""Independent high-precision evaluation of the electrode/electrolyte formulas.

Run manually to regenerate the frozen constants asserted in the test suite:

    python3 tests/oracles/golden_chemistry.py

Everything below is written directly from the model equations with mpmath at
50 digits; it deliberately shares no code with the package.
"""

import mpmath as mp

mp.mp.dps = 50

F = mp.mpf("96487")
RG = mp.mpf("8.314")
TREF = mp.mpf("298.15")
CE0 = mp.mpf("1000")
AREA = mp.mpf("0.0598")

POS = dict(rp=mp.mpf("2e-6"), ds=mp.mpf("1e-14"), a_s=mp.mpf("8.85e6"),
           L=mp.mpf("80e-6"), eps=mp.mpf("0.59"), cmax=mp.mpf("51554"),
           k=mp.mpf("2.33e-11"))
NEG = dict(rp=mp.mpf("2e-6"), ds=mp.mpf("3.9e-14"), a_s=mp.mpf("7.236e6"),
           L=mp.mpf("88e-6"), eps=mp.mpf("0.4824"), cmax=mp.mpf("30555"),
           k=mp.mpf("5.03e-11"))
LSEP = mp.mpf("25e-6")


def ocp_pos(t):
    num = (mp.mpf("-4.656") + mp.mpf("88.669") * t**2 - mp.mpf("401.119") * t**4
           + mp.mpf("342.909") * t**6 - mp.mpf("462.471") * t**8
           + mp.mpf("433.434") * t**10)
    den = (mp.mpf("-1") + mp.mpf("18.933") * t**2 - mp.mpf("79.532") * t**4
           + mp.mpf("37.311") * t**6 - mp.mpf("73.083") * t**8
           + mp.mpf("95.96") * t**10)
    return num / den


def ocp_neg(t):
    return (mp.mpf("0.7222") + mp.mpf("0.1387") * t + mp.mpf("0.029") * mp.sqrt(t)
            - mp.mpf("0.0172") / t + mp.mpf("0.0019") / t**mp.mpf("1.5")
            + mp.mpf("0.2808") * mp.exp(mp.mpf("0.9") - 15 * t)
            - mp.mpf("0.7984") * mp.exp(mp.mpf("0.4465") * t - mp.mpf("0.4108")))


def entropy_pos(t):
    num = (mp.mpf("0.199521039") - mp.mpf("0.928373822") * t
           + mp.mpf("1.364550689000003") * t**2
           - mp.mpf("0.6115448939999998") * t**3)
    den = (1 - mp.mpf("5.661479886999997") * t + mp.mpf("11.47636191") * t**2
           - mp.mpf("9.82431213599998") * t**3 + mp.mpf("3.048755063") * t**4)
    return mp.mpf("-0.001") * num / den


def entropy_neg(t):
    num = (mp.mpf("0.005269056") + mp.mpf("3.299265709") * t
           - mp.mpf("91.79325798") * t**2 + mp.mpf("1004.911008") * t**3
           - mp.mpf("5812.278127") * t**4 + mp.mpf("19329.7549") * t**5
           - mp.mpf("37147.8947") * t**6 + mp.mpf("38379.18127") * t**7
           - mp.mpf("16515.05308") * t**8)
    den = (1 - mp.mpf("48.09287227") * t + mp.mpf("1017.234804") * t**2
           - mp.mpf("10481.80419") * t**3 + mp.mpf("59431.3") * t**4
           - mp.mpf("195881.6488") * t**5 + mp.mpf("374577.3152") * t**6
           - mp.mpf("385821.1607") * t**7 + mp.mpf("165705.8597") * t**8)
    return mp.mpf("0.001") * num / den


def kappa_bulk(ce, T):
    poly = ((mp.mpf("-10.5") + mp.mpf("0.668e-3") * ce + mp.mpf("0.494e-6") * ce**2)
            + (mp.mpf("0.074") - mp.mpf("1.78e-5") * ce - mp.mpf("8.86e-10") * ce**2) * T
            + (mp.mpf("-6.96e-5") + mp.mpf("2.8e-8") * ce) * T**2)
    return mp.mpf("1e-4") * ce * poly**2


def kappa_eff(T):
    layers = [(mp.mpf("0.385"), POS["L"]), (mp.mpf("0.724"), 2 * LSEP),
              (mp.mpf("0.485"), NEG["L"])]
    w = sum(L for _, L in layers)
    eps = sum(e * L for e, L in layers) / w
    return kappa_bulk(CE0, T) * eps**4


def sigma_resistance(el, ocp, entropy, theta, T):
    i0 = F * el["k"] * el["cmax"] * mp.sqrt(CE0 * theta * (1 - theta))
    r_ct = (RG * T / F) / (AREA * el["L"] * el["a_s"] * i0)
    h = mp.mpf("1e-4")
    v = lambda th: ocp(th) + entropy(th) * (T - TREF)
    dv = (v(theta + h) - v(theta - h)) / (2 * h)
    r_diff = (-dv) / (AREA * el["L"] * F * el["eps"] * el["cmax"]) \
        * el["rp"]**2 / (15 * el["ds"])
    return r_ct + r_diff


def main():
    print("ocp_pos(0.5)      =", mp.nstr(ocp_pos(mp.mpf("0.5")), 17))
    print("ocp_neg(0.5)      =", mp.nstr(ocp_neg(mp.mpf("0.5")), 17))
    print("entropy_pos(0.5)  =", mp.nstr(entropy_pos(mp.mpf("0.5")), 17))
    print("entropy_neg(0.5)  =", mp.nstr(entropy_neg(mp.mpf("0.5")), 17))
    print("kappa_eff(298.15) =", mp.nstr(kappa_eff(TREF), 17))
    r_e = (POS["L"] + 2 * LSEP + NEG["L"]) / (2 * AREA * kappa_eff(TREF))
    print("R_e(298.15)       =", mp.nstr(r_e, 17))
    print("Rsig_pos(0.5,Tref)=",
          mp.nstr(sigma_resistance(POS, ocp_pos, entropy_pos, mp.mpf("0.5"), TREF), 17))
    print("Rsig_neg(0.5,Tref)=",
          mp.nstr(sigma_resistance(NEG, ocp_neg, entropy_neg, mp.mpf("0.5"), TREF), 17))
    i0p = F * POS["k"] * POS["cmax"] * mp.sqrt(CE0 * mp.mpf("0.25"))
    print("i0_pos(0.5,Tref)  =", mp.nstr(i0p, 17))
    rf0 = mp.mpf("0.01") / (NEG["a_s"] * AREA * NEG["L"])
    kf = (mp.mpf("0.162") / (mp.mpf("1690") * mp.mpf("5e-6"))) * 3600 / (
        F * (AREA * NEG["L"] * NEG["a_s"])**2)
    print("R_f0              =", mp.nstr(rf0, 17))
    print("K_f               =", mp.nstr(kf, 17))


if __name__ == "__main__":
    main()
