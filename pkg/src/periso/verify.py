"""Independent verification gates: freeness, isometry, injectivity,
equivariance.  All checks are read-only and deterministic given seeds."""

import numpy as np

from .lattice import neighbor_shell
from .maps import freeness_certificate, relative_min_singular_values
from .metric import induced_metric


def check_freeness(u, threshold=1e-8):
    """Grid SVD certificate over the stacked derivative rows."""
    return freeness_certificate(u, threshold=threshold)


def check_isometry(u, g, tol=1e-6):
    """Sup-norm isometry residual ||du.du - g|| with the worst entry located."""
    ind = induced_metric(u)
    diff = np.abs(ind.field.flat - g.field.flat)
    worst_flat = int(np.argmax(diff.max(axis=1)))
    residual = float(diff.max())
    return {
        "residual": residual,
        "worst_point": worst_flat,
        "worst_entry": int(np.argmax(diff[worst_flat])),
        "tol": tol,
        "passed": bool(residual <= tol),
    }


def check_injectivity(u, samples=10000, rng_seed=0, c_inj=1e-3, retries=1):
    """Sampled bi-Lipschitz lower bound |u(x)-u(y)| >= c_inj d(x, y).

    Pairs are drawn in the fundamental domain and compared against every
    translate in the affine-growth shell (beyond it, the affine part alone
    separates images).  Pairs closer than a grid spacing are skipped; local
    injectivity there is certified by the first-derivative block instead.
    """
    grid = u.grid
    lattice = u.lattice
    spacing = float(np.max(grid.spacing()))

    jac_block = np.swapaxes(u.jacobian(), 1, 2)
    local_sigma = float(relative_min_singular_values(jac_block).min())

    sigma_A = float(np.linalg.svd(u.affine, compute_uv=False)[-1])
    phi_sup = float(np.linalg.norm(u.periodic.flat, axis=1).max())
    domain_diam = float(np.linalg.norm(lattice.basis.sum(axis=1)))
    # |u(x) - u(y + tau)| >= sigma_A |tau| - sigma_max(A) diam - 2 sup|phi| > 0
    # once |tau| is large enough; enumerate only the shell below that.
    sigma_top = float(np.linalg.svd(u.affine, compute_uv=False)[0])
    shell_radius = (sigma_top * domain_diam + 2.0 * phi_sup) / max(sigma_A, 1e-300)
    shell = neighbor_shell(lattice, shell_radius * 1.05)
    shifts = [np.zeros(u.q)] + [
        u.affine @ tau.translation(lattice) for tau in shell
    ]
    translations = [np.zeros(u.n)] + [tau.translation(lattice) for tau in shell]

    attempt = 0
    report = None
    count = samples
    while attempt <= retries:
        rng = np.random.default_rng(rng_seed + attempt)
        t = rng.uniform(0.0, 1.0, size=(count, 2, u.n))
        x = t[:, 0, :] @ lattice.basis.T
        y = t[:, 1, :] @ lattice.basis.T
        ux = u.evaluate(x)
        uy = u.evaluate(y)
        worst_ratio = np.inf
        worst_pair = None
        for shift_img, shift_dom in zip(shifts, translations):
            d_dom = np.linalg.norm(x - (y + shift_dom[None, :]), axis=1)
            d_img = np.linalg.norm(ux - (uy + shift_img[None, :]), axis=1)
            ok = d_dom >= spacing
            if not np.any(ok):
                continue
            ratios = d_img[ok] / d_dom[ok]
            k = int(np.argmin(ratios))
            if ratios[k] < worst_ratio:
                worst_ratio = float(ratios[k])
                idx = np.nonzero(ok)[0][k]
                worst_pair = (x[idx].tolist(), (y[idx] + shift_dom).tolist())
        passed = worst_ratio >= c_inj and local_sigma > 0
        report = {
            "worst_ratio": worst_ratio,
            "worst_pair": worst_pair,
            "c_inj": c_inj,
            "pairs": count,
            "local_sigma": local_sigma,
            "passed": bool(passed),
            "attempts": attempt + 1,
        }
        if passed:
            break
        # densify once to rule out interpolation artifacts before failing
        attempt += 1
        count *= 2
    return report


def check_equivariance(u, trials=1000, rng_seed=0):
    """Max |u(x + tau) - u(x) - A tau| over random points and translations."""
    return {
        "max_residual": u.equivariance_residual(trials=trials, rng_seed=rng_seed),
        "trials": trials,
    }


def run_all_gates(
    u,
    g,
    isometry_tol=1e-4,
    freeness_threshold=1e-8,
    injectivity_samples=10000,
    c_inj=None,
    rng_seed=0,
    equivariance_tol=1e-12,
):
    """All verification gates; returns a summary dict with an all_passed flag."""
    if c_inj is None:
        c_inj = 1e-3 * np.sqrt(g.mean_eigenvalue_scale())
    cert = check_freeness(u, threshold=freeness_threshold)
    iso = check_isometry(u, g, tol=isometry_tol)
    inj = check_injectivity(
        u, samples=injectivity_samples, rng_seed=rng_seed, c_inj=c_inj
    )
    eqv = check_equivariance(u, rng_seed=rng_seed)
    eqv_passed = eqv["max_residual"] <= equivariance_tol
    summary = {
        "freeness": {
            "sigma_min": cert.sigma_min,
            "threshold": cert.threshold,
            "passed": cert.valid,
        },
        "isometry": iso,
        "injectivity": inj,
        "equivariance": {**eqv, "tol": equivariance_tol, "passed": bool(eqv_passed)},
    }
    summary["all_passed"] = bool(
        cert.valid and iso["passed"] and inj["passed"] and eqv_passed
    )
    summary["first_failure"] = next(
        (
            name
            for name, ok in [
                ("freeness", cert.valid),
                ("isometry", iso["passed"]),
                ("injectivity", inj["passed"]),
                ("equivariance", eqv_passed),
            ]
            if not ok
        ),
        None,
    )
    return summary
