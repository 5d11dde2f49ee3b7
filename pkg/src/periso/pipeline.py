"""End-to-end pipeline: initial embedding, defect decomposition, staged
chart-by-chart perturbation with injectivity-preserving displacement budgets,
and verification gates."""

import time
from dataclasses import dataclass, field

import numpy as np

from .decompose import decompose_defect
from .errors import DimensionError
from .fields import GridSpec
from .freemap import (
    ambient_dimension,
    initial_embedding,
    min_perturbation_dimension,
)
from .lattice import Lattice, neighbor_shell
from .metric import induced_metric, metric_from_preset, shortness_defect
from .perturb import staged_perturb


@dataclass
class PerturbationBudget:
    """Per-stage displacement allowances and the separations behind them."""

    eps: list = field(default_factory=list)
    separations: list = field(default_factory=list)
    shell_sizes: list = field(default_factory=list)
    global_cap: float = np.inf

    def record(self, eps_values, separations):
        for e, s in zip(eps_values, separations):
            if e is not None:
                self.eps.append(float(e))
            if s is not None:
                self.separations.append(float(s))

    @property
    def total(self):
        return float(sum(self.eps))


@dataclass
class PipelineReport:
    """Final map, stage diagnostics, and the verification summary."""

    embedding: object
    initial: object
    metric: object
    stages: list
    budget: PerturbationBudget
    verification: dict
    diagnostics: dict
    passed: bool


def pad_to_q(u, q):
    """Append zero coordinates; freeness, shortness, equivariance unchanged.

    Raises DimensionError below the minimum the perturbation stage accepts,
    q >= s_n + n + 5.
    """
    minimum = min_perturbation_dimension(u.n)
    if q < minimum:
        raise DimensionError(
            f"ambient dimension q={q} too small: the normal perturbation "
            f"system needs q >= s_n + n + 5 = {minimum}"
        )
    if q < u.q:
        raise DimensionError(f"cannot pad from q={u.q} down to q={q}")
    return u.padded(q)


def separation_radius(u, chart, shell_cap=4096):
    """Min distance between the chart's image and its deck-translate images.

    Enumerates translates in growing shells; stops when the affine growth
    bound certifies everything farther cannot beat the current minimum.
    Returns (radius, shell) with the deck transforms actually inspected.
    """
    from scipy.spatial import cKDTree

    grid = u.grid
    lattice = u.lattice
    mask = chart.support_mask(grid).reshape(-1)
    # Lift wrapped grid positions to the contiguous ball around the chart
    # center: the ball crosses the cell boundary, and the affine part must
    # act on the lifted representative.
    pts = grid.flat_points()[mask]
    frac = lattice.to_fractional(pts - chart.center[None, :])
    frac -= np.round(frac)
    lifted = chart.center[None, :] + lattice.to_cartesian(frac)
    img = lifted @ u.affine.T + u.periodic.flat[mask]
    tree = cKDTree(img)
    # upper bound of the chart image diameter (bounding box diagonal)
    diam = float(np.linalg.norm(img.max(axis=0) - img.min(axis=0)))
    # affine contraction: |A t| >= sigma_A |t|
    sigma_A = float(np.linalg.svd(u.affine, compute_uv=False)[-1])
    if sigma_A <= 0:
        raise DimensionError("affine part is rank-deficient; no growth bound")

    best = np.inf
    shell = []
    radius = 1.5 * lattice.shortest_vector_norm()
    seen = set()
    while True:
        candidates = [
            tau
            for tau in neighbor_shell(lattice, radius)
            if tau.coefficients not in seen
        ]
        for tau in candidates:
            seen.add(tau.coefficients)
            shift = u.affine @ tau.translation(lattice)
            d, _ = tree.query(img + shift[None, :], k=1)
            best = min(best, float(d.min()))
            shell.append(tau)
        if len(seen) > shell_cap:
            raise DimensionError(
                f"separation shell exceeded {shell_cap} translates before the "
                "growth bound closed"
            )
        # every excluded tau has |A tau| >= sigma_A * radius
        if sigma_A * radius - diam > best:
            break
        radius *= 1.6
    return best, shell


class _SeparationTracker:
    """Cheap running lower bound on the separation radius of one chart.

    Each accepted displacement of size d can shrink the chart separation by
    at most 2d, so exact KD-tree recomputation is only needed when the bound
    erodes.
    """

    def __init__(self, chart, slack=0.7):
        self.chart = chart
        self.slack = slack
        self.bound = None
        self.anchor = None

    def query(self, u):
        if self.bound is None or self.bound < self.slack * self.anchor:
            radius, _ = separation_radius(u, self.chart)
            self.bound = radius
            self.anchor = radius
        return self.bound

    def after_move(self, sup_v):
        if self.bound is not None:
            self.bound -= 2.0 * sup_v


def run(config):
    """Execute the whole embedding pipeline for a validated RunConfig.

    Stages: initial short free embedding, padding to the target dimension,
    defect decomposition over a finite chart cover, staged perturbation of
    every term with per-increment displacement budgets from the current
    separation radii, compensation sweeps that feed each chart the
    chart-weighted part of the measured leftover defect, and the full
    verification gate set.
    """
    from .verify import run_all_gates

    t_start = time.perf_counter()
    lattice = Lattice.from_flat(config.n, config.lattice)
    grid = GridSpec(lattice, tuple(config.resolution))
    g = metric_from_preset(grid, config.metric)

    q = config.q if config.q is not None else ambient_dimension(config.n)

    u_init, cert, init_diag = initial_embedding(
        g, lattice, grid, rng_seed=config.seeds["projection"],
        retries=config.caps["projection_retries"],
    )
    u0 = pad_to_q(u_init, q)

    defect, defect_min = shortness_defect(g, u0, delta_short=config.tolerances["delta_short"])
    dec = decompose_defect(
        defect,
        lattice,
        grid,
        per_axis=config.charts_per_axis,
        delta_pos=config.tolerances["delta_pos"],
    )

    budget = PerturbationBudget(global_cap=config.caps["global_displacement"])
    trackers = {c.index: _SeparationTracker(c) for c in dec.charts}
    stages = []
    w = u0
    tol_residual = config.tolerances["tol_residual"]
    term_tol = config.tolerances["term_residual"]

    def eps_provider_for(chart):
        tracker = trackers[chart.index]

        def provider(current):
            sep = tracker.query(current)
            share = budget.global_cap - budget.total
            return min(0.5 * sep, max(share, 0.0)), sep

        return provider

    n_sweeps = config.caps["sweeps"]
    chart_terms = {}
    for term in dec.terms:
        chart_terms.setdefault(term.chart.index, []).append(term)

    for sweep in range(n_sweeps):
        if sweep == 0:
            work = [(term.chart, term, None) for term in dec.terms]
        else:
            # compensation sweep: feed each chart its partition-weighted share
            # of the measured leftover defect
            rem = g.field.flat - induced_metric(w).field.flat
            sup = float(np.abs(rem).max())
            if sup <= config.tolerances["sweep_exit"]:
                break
            work = []
            for chart, chi in zip(dec.charts, dec.partition):
                weight = (chi.samples[..., 0].reshape(-1) ** 4)[:, None]
                work.append(
                    (chart, chart_terms[chart.index][0], weight * rem)
                )
        sweep_increments = 0
        k_carry = 1
        for chart, term, target in work:
            provider = eps_provider_for(chart)
            tracker = trackers[chart.index]
            w, diag = staged_perturb(
                w,
                term,
                eps_provider=provider,
                tol_residual=tol_residual,
                term_tol=term_tol,
                k_cap=config.caps["k_max"],
                rho_cut=config.rho_cut,
                sigma_threshold=config.tolerances["freeness_threshold"],
                increment_cap=config.caps["staging_cap"],
                target_override=target,
                k_init=k_carry,
            )
            k_carry = max(1, diag["K_final"] // 2)
            for inc in diag["increments"]:
                tracker.after_move(inc["sup_v"])
            for tr in trackers.values():
                if tr is not tracker:
                    tr.after_move(
                        max((i["sup_v"] for i in diag["increments"]), default=0.0)
                    )
            budget.record(diag["eps"], diag["separations"])
            sweep_increments += diag["num_increments"]
            stages.append(
                {
                    "sweep": sweep,
                    "chart": chart.index,
                    "increments": diag["num_increments"],
                    "K": diag["K_final"],
                    "residual": diag["final_residual"],
                    "floor_accepted": diag.get("floor_accepted", False),
                }
            )
        if sweep > 0 and sweep_increments == 0:
            break

    verification = run_all_gates(
        w,
        g,
        isometry_tol=config.tolerances["isometry_gate"],
        freeness_threshold=config.tolerances["freeness_threshold"],
        injectivity_samples=config.injectivity_samples,
        c_inj=config.tolerances["c_inj"],
        rng_seed=config.seeds["verify"],
    )
    passed = bool(verification["all_passed"])
    elapsed = time.perf_counter() - t_start

    diagnostics = {
        "config": config.as_dict(),
        "q": q,
        "initial": init_diag,
        "initial_freeness": cert.sigma_min,
        "defect_min_eigenvalue": defect_min,
        "decomposition": dec.diagnostics,
        "stages": stages,
        "budget": {
            "eps": budget.eps,
            "separations": budget.separations,
            "total": budget.total,
            "global_cap": budget.global_cap,
        },
        "verification": verification,
        "passed": passed,
    }
    report = PipelineReport(
        embedding=w,
        initial=u0,
        metric=g,
        stages=stages,
        budget=budget,
        verification=verification,
        diagnostics=diagnostics,
        passed=passed,
    )
    report.elapsed_seconds = elapsed
    return report
