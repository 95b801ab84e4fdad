"""
Check registry: for every scenario kind, the named checks it can run.

A check takes the scenario's context and its tolerance and returns a
CheckOutcome. Raising CheckSkipped turns into a skip record; any other
exception becomes a fail record in the pipeline.
"""
import itertools
import logging
from functools import cached_property
from typing import Callable, Dict, Tuple, Union

import numpy as np

from common.errors import CheckSkipped, HypothesisError
from common.models import CheckOutcome, DriftEstimator, GaussianSpace, PolarBackend, Scenario, ScenarioKind, TimeGrid
from common.utils import make_rng
from config import MC_SAMPLES, QUADRATURE_ORDER
from transport import ito_transport as ito
from transport import monge_ampere as ma
from transport.gauss_core import (
    DensitySpec,
    check_one_convex,
    gaussian_ratio_density,
    indicator_density,
    probe_grid,
    quadratic_field,
    quartic_density,
    quartic_field,
    relative_entropy,
    sample_target,
    uniform_density,
)
from transport.hs_operators import (
    det2,
    det2_lu,
    lambda_K,
    linear_map,
    polar_decompose,
    polar_parts_from_svd,
    pushforward_density,
    random_operator,
)
from transport.mk_transport import (
    approximation_ladder,
    brute_force_assignment,
    brute_force_min_rotation,
    check_cyclic_monotonicity,
    cost_lower_bound,
    coupling_map,
    duality_gap,
    inverse_consistency,
    polar_factorize,
    pushforward_ks,
    random_cycles,
    right_inverse_check,
    solve_1d,
    solve_discrete,
    solve_gaussian,
    solve_grid_entropic,
)

logger = logging.getLogger(__name__)

CheckFn = Callable[["ScenarioContext", float], CheckOutcome]
ToleranceSpec = Union[float, Dict[ScenarioKind, float]]

CHECKS: Dict[str, Dict[str, Tuple[CheckFn, float]]] = {kind.value: {} for kind in ScenarioKind}

TRANSPORT_KINDS = (ScenarioKind.TRANSPORT_1D, ScenarioKind.TRANSPORT_GAUSSIAN, ScenarioKind.TRANSPORT_GRID)


def register(check_id: str, kinds, tolerance: ToleranceSpec):
    """Register a check under each kind with its default tolerance."""
    kinds = (kinds,) if isinstance(kinds, ScenarioKind) else tuple(kinds)

    def decorator(fn: CheckFn) -> CheckFn:
        for kind in kinds:
            tol = tolerance[kind] if isinstance(tolerance, dict) else tolerance
            CHECKS[kind.value][check_id] = (fn, float(tol))
        return fn

    return decorator


def _within(observed: float, expected: float, tol: float, stderr: float = 0.0, sigmas: float = 2.0,
            detail: str = "") -> CheckOutcome:
    passed = abs(observed - expected) <= tol + sigmas * stderr
    return CheckOutcome(passed=bool(passed), observed=float(observed), expected=float(expected),
                        tolerance=tol, stderr=float(stderr), detail=detail)


def _at_most(observed: float, bound: float, tol: float, stderr: float = 0.0, sigmas: float = 2.0,
             detail: str = "") -> CheckOutcome:
    passed = observed <= bound + tol + sigmas * stderr
    return CheckOutcome(passed=bool(passed), observed=float(observed), expected=float(bound),
                        tolerance=tol, stderr=float(stderr), detail=detail)


class ScenarioContext:
    """Objects shared by the checks of one scenario, built on first use."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.seed = scenario.seed

    def param(self, key, default=None):
        return self.scenario.param(key, default)

    def rng(self, label: str) -> np.random.Generator:
        return make_rng(self.seed, f"{self.scenario.name}:{label}")

    def space(self, dim: int) -> GaussianSpace:
        return GaussianSpace(dim=dim, seed=self.seed, mc_samples=self.param("mc_samples", MC_SAMPLES),
                             quadrature_order=self.param("quadrature_order", QUADRATURE_ORDER))


class TransportContext(ScenarioContext):
    """Target density, solution and closed-form reference for the transport kinds."""

    @cached_property
    def kind(self) -> ScenarioKind:
        return ScenarioKind(self.scenario.kind)

    @cached_property
    def target(self) -> DensitySpec:
        kind = self.kind
        if kind == ScenarioKind.TRANSPORT_GAUSSIAN:
            return gaussian_ratio_density(self.param("mean"), self.param("cov"))
        target = self.param("target")
        if target == "indicator":
            return indicator_density(self.param("lower"), self.param("upper"))
        dim = 1 if kind == ScenarioKind.TRANSPORT_1D else self.param("dim")
        if target == "uniform":
            return uniform_density(dim)
        if target == "quartic":
            return quartic_density(self.param("a"), dim, self.space(dim))
        if kind == ScenarioKind.TRANSPORT_1D:
            s = float(self.param("s", 1.0))
            return gaussian_ratio_density([float(self.param("mean", 0.0))], [[s * s]])
        return gaussian_ratio_density(self.param("mean"), self.param("cov"))

    @property
    def dim(self) -> int:
        return self.target.dim

    @cached_property
    def solution(self):
        L = self.target
        if self.kind == ScenarioKind.TRANSPORT_1D:
            return solve_1d(L, space=self.space(1))
        if self.kind == ScenarioKind.TRANSPORT_GAUSSIAN:
            mean, cov = L.gaussian
            return solve_gaussian(cov, mean)
        return solve_grid_entropic(L, bound=float(self.param("bound", 6.0)),
                                   resolution=self.param("resolution", 61 if L.dim == 1 else 41))

    @cached_property
    def reference(self):
        """Closed-form solution when L·μ is Gaussian."""
        if self.target.gaussian is None:
            return None
        mean, cov = self.target.gaussian
        return solve_gaussian(cov, mean)

    @cached_property
    def points(self) -> np.ndarray:
        radius = self.param("probe_radius", 2.0 if self.kind == ScenarioKind.TRANSPORT_GRID else 3.0)
        return probe_grid(self.dim, radius=float(radius))

    @cached_property
    def sample(self) -> np.ndarray:
        return self.rng("sample").standard_normal((self.param("sample_size", 1000), self.dim))

    @property
    def gaussian_space(self) -> GaussianSpace:
        return self.space(self.dim)

    def require_log_concave(self):
        if not self.target.is_h_convex:
            raise CheckSkipped(f"{self.target.name} is not H-log-concave")


class OperatorContext(ScenarioContext):
    """The operator K, or a seeded battery of random operators."""

    @cached_property
    def operators(self):
        if self.param("K") is not None:
            return [np.atleast_2d(np.asarray(self.param("K"), dtype=float))]
        rng = self.rng("operators")
        dim, count = self.param("dim"), self.param("random_count")
        scale = float(self.param("scale", 0.3))
        min_singular = float(self.param("min_singular", 0.8))
        return [random_operator(dim, rng, scale, min_singular) for _ in range(count)]


class DiscreteContext(ScenarioContext):
    """Seeded equal-weight atom clouds."""

    @cached_property
    def instances(self):
        rng = self.rng("atoms")
        m, dim = self.param("atoms"), self.param("dim")
        return [(rng.standard_normal((m, dim)), rng.standard_normal((m, dim)) + 0.5)
                for _ in range(self.param("instances"))]


class ItoContext(ScenarioContext):
    """Paths, functional, drift and transport process of a Wiener-space scenario."""

    @cached_property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.param("steps"))

    @cached_property
    def functional(self) -> ito.CylindricalFunctional:
        kind = self.param("functional")
        if kind == "endpoint":
            return ito.CylindricalFunctional.squared_endpoint(float(self.param("lambda")), self.grid)
        if kind == "increments":
            return ito.CylindricalFunctional.squared_increments(float(self.param("lambda")), self.grid,
                                                                split=float(self.param("split", 0.5)))
        a = float(self.param("a"))
        return ito.CylindricalFunctional([1.0], quartic_field(a), self.grid, is_convex=True, lower_bound=0.0,
                                         name=f"quartic(a={a:g})")

    @cached_property
    def ensemble(self) -> ito.BrownianEnsemble:
        return ito.simulate_paths(self.param("paths"), self.grid, self.seed)

    @cached_property
    def estimator(self) -> DriftEstimator:
        default = DriftEstimator.CLOSED_FORM_GAUSSIAN if self.functional.quadratic_form is not None \
            else DriftEstimator.GAUSS_HERMITE
        return DriftEstimator(self.param("estimator", default))

    @cached_property
    def drift(self) -> ito.DriftField:
        return ito.clark_ocone_drift(self.functional, self.ensemble, self.estimator,
                                     bandwidth=self.param("bandwidth"))

    @cached_property
    def process(self) -> ito.TransportProcess:
        return ito.transport_process(self.functional, self.ensemble, self.space(self.functional.k))

    @cached_property
    def c(self) -> float:
        return self.functional.normalization_constant(self.space(self.functional.k))


CONTEXTS = {
    ScenarioKind.TRANSPORT_1D.value: TransportContext,
    ScenarioKind.TRANSPORT_GAUSSIAN.value: TransportContext,
    ScenarioKind.TRANSPORT_GRID.value: TransportContext,
    ScenarioKind.LINEAR_OPERATOR.value: OperatorContext,
    ScenarioKind.POLAR_DISCRETE.value: DiscreteContext,
    ScenarioKind.ITO.value: ItoContext,
}


def build_context(scenario: Scenario) -> ScenarioContext:
    context_cls = CONTEXTS[ScenarioKind(scenario.kind).value]
    logger.debug(f"Building {context_cls.__name__} for {scenario.name}")
    return context_cls(scenario)


# Transport kinds

_1D, _GAUSS, _GRID = TRANSPORT_KINDS


@register("cost", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-10, _GRID: 5e-2})
def check_cost(ctx: TransportContext, tol: float) -> CheckOutcome:
    expected = ctx.param("expected_cost")
    if expected is None:
        if ctx.reference is None:
            raise CheckSkipped("no closed-form cost for this target")
        expected = ctx.reference.cost
    return _within(ctx.solution.cost, float(expected), tol, detail=f"solver {ctx.solution.solver.value}")


@register("map_error", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-12, _GRID: 0.4})
def check_map_error(ctx: TransportContext, tol: float) -> CheckOutcome:
    if ctx.reference is None:
        raise CheckSkipped("no closed-form map for this target")
    pts = ctx.points
    error = float(np.abs(ctx.solution.forward_map(pts) - ctx.reference.forward_map(pts)).max())
    cell = ctx.solution.diagnostics.get("cell_width")
    detail = f"grid cell {cell:.4g}" if cell else ""
    return _at_most(error, 0.0, tol, detail=detail)


@register("gradient_consistency", TRANSPORT_KINDS, 1e-9)
def check_gradient_consistency(ctx: TransportContext, tol: float) -> CheckOutcome:
    return _at_most(ctx.solution.gradient_residual(ctx.points), 0.0, tol)


@register("one_convex", TRANSPORT_KINDS, 1e-8)
def check_one_convex_potential(ctx: TransportContext, tol: float) -> CheckOutcome:
    report = check_one_convex(ctx.solution.phi, ctx.points)
    return CheckOutcome(passed=report.worst_eigenvalue >= -1.0 - tol, observed=report.worst_eigenvalue,
                        expected=-1.0, tolerance=tol, detail=f"worst point {report.worst_point}")


@register("ma_residual", TRANSPORT_KINDS, {_1D: 1e-8, _GAUSS: 1e-10, _GRID: 5e-2})
def check_ma_residual(ctx: TransportContext, tol: float) -> CheckOutcome:
    ctx.require_log_concave()
    try:
        residual = ma.ma_residual(ctx.solution, ctx.target, ctx.points)
    except HypothesisError as e:
        raise CheckSkipped(str(e))
    return _at_most(residual, 0.0, tol)


@register("subsolution", TRANSPORT_KINDS, {_1D: 1e-8, _GAUSS: 1e-10, _GRID: 5e-2})
def check_subsolution(ctx: TransportContext, tol: float) -> CheckOutcome:
    holds, worst = ma.subsolution_check(ctx.solution, ctx.target, ctx.points, tol)
    return CheckOutcome(passed=holds, observed=worst, expected=1.0, tolerance=tol)


@register("distance_identity", TRANSPORT_KINDS, {_1D: 1e-3, _GAUSS: 1e-8, _GRID: 5e-2})
def check_distance_identity(ctx: TransportContext, tol: float) -> CheckOutcome:
    ctx.require_log_concave()
    half, rhs = ma.distance_identity(ctx.solution, ctx.target, ctx.gaussian_space)
    stderr = float(np.hypot(float(half.stderr), float(rhs.stderr)))
    return _within(float(half.value), float(rhs.value), tol, stderr,
                   detail="half squared distance vs entropy plus log det2")


@register("regularity_bound", TRANSPORT_KINDS, {_1D: 1e-9, _GAUSS: 1e-9, _GRID: 5e-2})
def check_regularity_bound(ctx: TransportContext, tol: float) -> CheckOutcome:
    ctx.require_log_concave()
    lhs, rhs = ma.regularity_bound(ctx.solution, ctx.target, ctx.gaussian_space)
    stderr = float(np.hypot(float(lhs.stderr), float(rhs.stderr)))
    return _at_most(float(lhs.value), float(rhs.value), tol, stderr)


@register("talagrand", TRANSPORT_KINDS, {_1D: 1e-10, _GAUSS: 1e-10, _GRID: 5e-2})
def check_talagrand(ctx: TransportContext, tol: float) -> CheckOutcome:
    ctx.require_log_concave()
    report = ma.talagrand_check(ctx.solution, ctx.target, ctx.gaussian_space, tol)
    return CheckOutcome(passed=report.holds, observed=report.distance_sq, expected=report.entropy_bound,
                        tolerance=tol, stderr=report.stderr,
                        detail=f"E[log det2] = {report.log_det_mean:.6g}")


@register("caffarelli", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-8, _GRID: 5e-2})
def check_caffarelli(ctx: TransportContext, tol: float) -> CheckOutcome:
    holds, (lo, hi) = ma.caffarelli_check(ctx.solution, ctx.points, tol)
    return CheckOutcome(passed=holds, observed=hi, expected=0.0, tolerance=tol,
                        detail=f"Hessian eigenvalues in [{lo:.6g}, {hi:.6g}]")


@register("convex_set_mass", (_1D, _GRID), 1e-3)
def check_convex_set_mass(ctx: TransportContext, tol: float) -> CheckOutcome:
    if ctx.param("target") != "indicator":
        raise CheckSkipped("target is not the indicator of a convex set")
    grid_options = {}
    if ctx.kind == ScenarioKind.TRANSPORT_GRID:
        grid_options = {"bound": float(ctx.param("bound", 6.0)), "resolution": ctx.param("resolution", 41)}
    lower, upper = ctx.target.support
    inside = ctx.points[np.all((ctx.points > lower) & (ctx.points < upper), axis=1)]
    mass, lam, formula, spread = ma.convex_set_mass(lower, upper, inside, ctx.gaussian_space, **grid_options)
    worst = max(abs(lam - mass), abs(formula - mass), spread)
    return CheckOutcome(passed=worst <= tol, observed=lam, expected=mass, tolerance=tol,
                        detail=f"formula {formula:.6f}, spread of Λ {spread:.2e}")


@register("interpolation_bound", TRANSPORT_KINDS, 1e-6)
def check_interpolation_bound(ctx: TransportContext, tol: float) -> CheckOutcome:
    t_grid = ctx.param("t_grid", [0.0, 0.25, 0.5, 0.75, 1.0])
    try:
        rows = ma.interpolation_bound(ctx.solution, ctx.target, t_grid, ctx.points, rtol=tol)
    except HypothesisError as e:
        raise CheckSkipped(str(e))
    worst = max(rows, key=lambda r: r.max_density / r.bound)
    passed = all(r.holds and r.entropy_inequality_holds for r in rows)
    return CheckOutcome(passed=passed, observed=worst.max_density, expected=worst.bound, tolerance=tol,
                        detail=f"tightest at t={worst.t:g}")


@register("free_energy", TRANSPORT_KINDS, {_1D: 1e-3, _GAUSS: 1e-8, _GRID: 5e-2})
def check_free_energy(ctx: TransportContext, tol: float) -> CheckOutcome:
    ctx.require_log_concave()
    lhs, rhs = ma.free_energy_via_det2(ctx.solution, ctx.target, ctx.gaussian_space)
    return _within(float(rhs.value), lhs, tol, float(rhs.stderr), detail="-log c vs transport form")


@register("pushforward_ks", TRANSPORT_KINDS, 0.01)
def check_pushforward_ks(ctx: TransportContext, tol: float) -> CheckOutcome:
    report = pushforward_ks(ctx.solution, ctx.target, m=ctx.param("ks_samples", 10000), seed=ctx.seed, alpha=tol)
    return CheckOutcome(passed=report.passed, observed=report.pvalue, expected=tol, tolerance=tol,
                        detail=f"KS statistic {report.statistic:.4f} on {report.samples} samples")


@register("duality", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-10, _GRID: 5e-2})
def check_duality(ctx: TransportContext, tol: float) -> CheckOutcome:
    scale = 1.0 if ctx.kind == ScenarioKind.TRANSPORT_GRID else 2.0
    probe_y = scale * ctx.rng("duality_probe").standard_normal(ctx.sample.shape)
    report = duality_gap(ctx.solution, ctx.sample, (ctx.sample, probe_y))
    passed = report.on_graph_max <= tol and report.off_graph_min >= -tol
    return CheckOutcome(passed=passed, observed=report.on_graph_max, expected=0.0, tolerance=tol,
                        detail=f"min off-graph value {report.off_graph_min:.3e}")


@register("inverse", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-10, _GRID: 0.6})
def check_inverse(ctx: TransportContext, tol: float) -> CheckOutcome:
    target_sample = sample_target(ctx.target, ctx.sample.shape[0], ctx.seed, label="inverse_target")
    if ctx.kind == ScenarioKind.TRANSPORT_GRID:
        bound = float(ctx.param("probe_radius", 2.0))
        keep = lambda z: z[np.all(np.abs(z) <= bound, axis=1)]  # noqa: E731
        report = inverse_consistency(ctx.solution, keep(ctx.sample), keep(target_sample))
    else:
        report = inverse_consistency(ctx.solution, ctx.sample, target_sample)
    worst = max(report.forward_error, report.backward_error)
    return _at_most(worst, 0.0, tol, detail=f"S∘T {report.forward_error:.3e}, T∘S {report.backward_error:.3e}")


@register("cyclic_monotonicity", TRANSPORT_KINDS, {_1D: 1e-9, _GAUSS: 1e-9, _GRID: 1e-2})
def check_cyclic_monotonicity_of_map(ctx: TransportContext, tol: float) -> CheckOutcome:
    scale = 1.0 if ctx.kind == ScenarioKind.TRANSPORT_GRID else 2.0
    cycles = random_cycles(ctx.dim, ctx.param("cycles", 1000), 3, ctx.seed, scale=scale)
    report = check_cyclic_monotonicity(ctx.solution, cycles, tol)
    return CheckOutcome(passed=report.holds, observed=report.worst_slack, expected=0.0, tolerance=tol,
                        detail=f"{report.cycles} cycles")


@register("cost_lower_bound", TRANSPORT_KINDS, {_1D: 1e-6, _GAUSS: 1e-10, _GRID: 5e-2})
def check_cost_lower_bound(ctx: TransportContext, tol: float) -> CheckOutcome:
    forward = ctx.solution.forward_map
    # x ↦ T(−x) also pushes μ onto the target
    cost, competitor = cost_lower_bound(ctx.solution, lambda x: forward(-x), ctx.gaussian_space)
    return _at_most(cost, competitor, tol, detail="optimal cost vs reflected competitor")


@register("jacobian_value", TRANSPORT_KINDS, 1e-5)
def check_jacobian_value(ctx: TransportContext, tol: float) -> CheckOutcome:
    at, expected = ctx.param("jacobian_at"), ctx.param("jacobian_expected")
    if at is None or expected is None:
        raise CheckSkipped("no jacobian_at / jacobian_expected pairs given")
    pts = np.asarray(at, dtype=float).reshape(-1, ctx.dim)
    expected = np.atleast_1d(np.asarray(expected, dtype=float))
    if expected.size != pts.shape[0]:
        raise ValueError(f"{pts.shape[0]} Jacobian points but {expected.size} expected values")
    values = np.atleast_1d(ma.jacobian(ctx.solution.phi, pts))
    errors = np.abs(values - expected)
    worst = int(np.argmax(errors))
    return CheckOutcome(passed=bool(errors[worst] <= tol), observed=float(values[worst]),
                        expected=float(expected[worst]), tolerance=tol,
                        detail=f"at x={pts[worst].tolist()}")


@register("scalar_expansion", _1D, 1e-6)
def check_scalar_expansion(ctx: TransportContext, tol: float) -> CheckOutcome:
    rng = ctx.rng("expansion")
    margins = []
    for _ in range(ctx.param("expansion_count", 20)):
        a, b, x = rng.uniform(-0.95, 0.0), rng.normal(), rng.normal()
        phi = quadratic_field([[a]], linear=[b], name="random_quadratic")
        margins.append(ma.log_jacobian_expansion(phi, [x])["margin"])
    worst = float(min(margins))
    return CheckOutcome(passed=worst >= -tol, observed=worst, expected=0.0, tolerance=tol,
                        detail=f"{len(margins)} random quadratic potentials")


@register("approximation_ladder", _GAUSS, 1e-9)
def check_approximation_ladder(ctx: TransportContext, tol: float) -> CheckOutcome:
    n = ctx.dim
    if n < 2:
        raise CheckSkipped("ladder needs dimension at least 2")
    _, rungs = approximation_ladder(ctx.target, list(range(1, n + 1)), ctx.gaussian_space, reference=ctx.solution)
    full_entropy = float(relative_entropy(ctx.target, ctx.gaussian_space).value)
    decreasing = all(
        b.gradient_error <= a.gradient_error + 2.0 * np.hypot(a.gradient_error_stderr, b.gradient_error_stderr) + tol
        for a, b in zip(rungs, rungs[1:])
    )
    entropy_ok = all(r.entropy <= full_entropy + tol for r in rungs)
    errors = ", ".join(f"k={r.dim}: {r.gradient_error:.4g}" for r in rungs)
    return CheckOutcome(passed=decreasing and entropy_ok, observed=rungs[-1].gradient_error,
                        expected=rungs[0].gradient_error, tolerance=tol, detail=errors)


# Linear operators

_LINEAR = ScenarioKind.LINEAR_OPERATOR


@register("polar", _LINEAR, 1e-10)
def check_polar(ctx: OperatorContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for k in ctx.operators:
        residuals = polar_decompose(k).residuals(k)
        worst = max(worst, residuals["recomposition"], residuals["isometry"], residuals["symmetry"])
    return _at_most(worst, 0.0, tol, detail=f"{len(ctx.operators)} operators")


@register("polar_svd_agreement", _LINEAR, 1e-10)
def check_polar_svd_agreement(ctx: OperatorContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for k in ctx.operators:
        parts = polar_decompose(k)
        positive, isometry = polar_parts_from_svd(k)
        eye = np.eye(k.shape[0])
        worst = max(worst, float(np.abs(eye + parts.kbar - positive).max()),
                    float(np.abs(eye + parts.a - isometry).max()))
    return _at_most(worst, 0.0, tol)


@register("det2", _LINEAR, 1e-10)
def check_det2(ctx: OperatorContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for k in ctx.operators:
        a, b = det2(k), det2_lu(k)
        worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    return _at_most(worst, 0.0, tol, detail="eigenvalue product vs LU factorization")


@register("change_of_variables", _LINEAR, 1e-9)
def check_change_of_variables(ctx: OperatorContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for k in ctx.operators:
        x = probe_grid(k.shape[0], radius=2.0)
        y = x @ (np.eye(k.shape[0]) + k).T
        product = np.abs(lambda_K(k, x)) * pushforward_density(k, y)
        worst = max(worst, float(np.abs(product - 1.0).max()))
    return _at_most(worst, 0.0, tol, detail="|Λ_K(x)|·d(Uμ)/dμ(Ux) = 1")


def _test_functions(n: int):
    return {
        "cos_first": (lambda y: np.cos(y[:, 0]), np.exp(-0.5)),
        "cos_sum": (lambda y: np.cos(y.sum(axis=1)), np.exp(-0.5 * n)),
        "gaussian_bump": (lambda y: np.exp(-0.5 * np.sum(y ** 2, axis=1)), 2.0 ** (-0.5 * n)),
    }


@register("lambda_identity", _LINEAR, 4.0)
def check_lambda_identity(ctx: OperatorContext, tol: float) -> CheckOutcome:
    """tol is the number of standard errors allowed across every (operator, test function) pair."""
    m = ctx.param("mc_samples", MC_SAMPLES)
    worst_z, worst_name = 0.0, ""
    for i, k in enumerate(ctx.operators):
        n = k.shape[0]
        x = ctx.rng(f"lambda_identity:{i}").standard_normal((m, n))
        weights = np.abs(lambda_K(k, x))
        y = x @ (np.eye(n) + k).T
        for name, (g, expected) in _test_functions(n).items():
            values = g(y) * weights
            se = values.std(ddof=1) / np.sqrt(m)
            z = abs(values.mean() - expected) / se if se > 0 else 0.0
            if z > worst_z:
                worst_z, worst_name = float(z), f"operator {i}, {name}"
    return CheckOutcome(passed=worst_z <= tol, observed=worst_z, expected=0.0, tolerance=tol,
                        detail=f"largest deviation in standard errors at {worst_name or 'none'}")


@register("right_inverse", _LINEAR, 1e-8)
def check_right_inverse(ctx: OperatorContext, tol: float) -> CheckOutcome:
    ok, worst = True, 0.0
    for i, k in enumerate(ctx.operators):
        positive = np.eye(k.shape[0]) + polar_decompose(k).kbar
        transport, theta = linear_map(positive), linear_map(np.linalg.inv(positive))
        sample = ctx.rng(f"right_inverse:{i}").standard_normal((1000, k.shape[0]))
        ok = right_inverse_check(transport, theta, sample, tol) and ok
        worst = max(worst, float(np.abs(transport(theta(sample)) - sample).max()))
    return CheckOutcome(passed=ok, observed=worst, expected=0.0, tolerance=tol)


@register("polar_cost", _LINEAR, 1e-10)
def check_polar_cost(ctx: OperatorContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for k in ctx.operators:
        factorization = polar_factorize(k, PolarBackend.LINEAR)
        worst = max(worst, factorization.cost_gap / max(1.0, factorization.transport_cost))
    return _at_most(worst, 0.0, tol, detail="∫|T − x|² vs ∫|U − R|²")


@register("log_det2_convexity", _LINEAR, 1e-12)
def check_log_det2_convexity(ctx: OperatorContext, tol: float) -> CheckOutcome:
    rng = ctx.rng("convexity")
    dim = ctx.operators[0].shape[0]
    mats = ma.random_symmetric_above(dim, ctx.param("convexity_count", 100), rng)
    gaps = [ma.log_det2_convexity_gap(a, *rng.uniform(0.0, 1.0, size=2)) for a in mats]
    worst = float(min(gaps))
    return CheckOutcome(passed=worst >= -tol, observed=worst, expected=0.0, tolerance=tol,
                        detail=f"{len(gaps)} random symmetric matrices above -I")


# Discrete couplings

_DISCRETE = ScenarioKind.POLAR_DISCRETE


@register("assignment_optimal", _DISCRETE, 1e-12)
def check_assignment_optimal(ctx: DiscreteContext, tol: float) -> CheckOutcome:
    worst = 0.0
    for source, target in ctx.instances:
        coupling = solve_discrete(source, target)
        _, brute = brute_force_assignment(source, target)
        worst = max(worst, coupling.cost - brute)
    return _at_most(worst, 0.0, tol, detail=f"{len(ctx.instances)} instances against exhaustive search")


@register("rotation_minimal", _DISCRETE, 1e-12)
def check_rotation_minimal(ctx: DiscreteContext, tol: float) -> CheckOutcome:
    worst, gap = 0.0, 0.0
    for source, image in ctx.instances:
        factorization = polar_factorize(image, PolarBackend.DISCRETE, source=source)
        _, brute = brute_force_min_rotation(source, image)
        worst = max(worst, factorization.rotation_cost - brute)
        gap = max(gap, factorization.cost_gap)
    passed = worst <= tol and gap <= tol
    return CheckOutcome(passed=passed, observed=worst, expected=0.0, tolerance=tol,
                        detail=f"largest transport/rotation cost gap {gap:.3e}")


@register("cyclic_monotonicity", _DISCRETE, 1e-9)
def check_discrete_cyclic_monotonicity(ctx: DiscreteContext, tol: float) -> CheckOutcome:
    worst, count = -np.inf, 0
    for source, target in ctx.instances:
        apply = coupling_map(solve_discrete(source, target))
        m = len(source)
        cycles = [source[list(c)] for length in (2, 3) for c in itertools.permutations(range(m), length)]
        report = check_cyclic_monotonicity(apply, cycles, tol)
        worst, count = max(worst, report.worst_slack), count + report.cycles
    return CheckOutcome(passed=worst <= tol, observed=float(worst), expected=0.0, tolerance=tol,
                        detail=f"{count} atom cycles")


# Wiener space

_ITO = ScenarioKind.ITO


@register("increment_variance", _ITO, 0.01)
def check_increment_variance(ctx: ItoContext, tol: float) -> CheckOutcome:
    result = ito.increment_variance_test(ctx.ensemble, alpha=tol)
    return CheckOutcome(passed=result["passed"], observed=result["failure_rate"], expected=tol,
                        tolerance=result["band"] - tol, detail="per-path chi-square failure rate")


@register("regeneration", _ITO, 0.0)
def check_regeneration(ctx: ItoContext, tol: float) -> CheckOutcome:
    count = min(ctx.ensemble.m, 16)
    mismatches = sum(not np.array_equal(ito.regenerate_path(ctx.ensemble, i), ctx.ensemble.increments[i])
                     for i in range(count))
    return CheckOutcome(passed=mismatches == 0, observed=float(mismatches), expected=0.0, tolerance=tol,
                        detail=f"{count} paths regenerated from their seeds")


@register("drift_value", _ITO, 1e-10)
def check_drift_value(ctx: ItoContext, tol: float) -> CheckOutcome:
    if ctx.param("functional") != "endpoint":
        raise CheckSkipped("closed-form drift value is known for the endpoint functional only")
    if ctx.estimator != DriftEstimator.CLOSED_FORM_GAUSSIAN:
        raise CheckSkipped(f"drift is estimated by {ctx.estimator.value}")
    lam = float(ctx.param("lambda"))
    t = float(ctx.param("drift_time", 0.5))
    state = float(ctx.param("drift_state", 1.0))
    i = ctx.grid.index_of(t)
    path = state * ctx.grid.times[None, :] / t
    observed = float(ctx.drift(path)[0, i])
    return _within(observed, lam * state / (1.0 + lam * (1.0 - t)), tol, detail=f"u at t={t:g}, W_t={state:g}")


@register("ito_density", _ITO, 0.02)
def check_ito_density(ctx: ItoContext, tol: float) -> CheckOutcome:
    comparison = ito.ito_density_check(ctx.functional, ctx.ensemble, ctx.drift, ctx.c)
    mean_ok = abs(comparison.mean_reconstructed - 1.0) <= 3.0 * comparison.mean_stderr
    return CheckOutcome(passed=comparison.median_relative_error <= tol and mean_ok,
                        observed=comparison.median_relative_error, expected=0.0, tolerance=tol,
                        stderr=comparison.mean_stderr,
                        detail=f"E[L] = {comparison.mean_reconstructed:.4f}")


@register("transport_marginal", _ITO, 0.01)
def check_transport_marginal(ctx: ItoContext, tol: float) -> CheckOutcome:
    report = ito.anchor_marginal_ks(ctx.process, ctx.seed, alpha=tol)
    last = ctx.functional.anchor_index[-1]
    variance = float(ctx.process.paths[:, last].var())
    return CheckOutcome(passed=report.passed, observed=report.pvalue, expected=tol, tolerance=tol,
                        detail=f"KS statistic {report.statistic:.4f}; variance at last anchor {variance:.4f}")


@register("decomposition", _ITO, 3.5)
def check_decomposition(ctx: ItoContext, tol: float) -> CheckOutcome:
    report = ito.semimartingale_decomposition_check(ctx.process, ctx.drift, z_tol=tol)
    return CheckOutcome(passed=report.passed, observed=report.max_abs_z, expected=0.0, tolerance=tol,
                        detail=f"QV {report.quadratic_variation:.4f} ± {report.qv_band:.4f}; "
                               f"adaptedness residual {report.adaptedness_residual:.2e}")


@register("ito_jacobian", _ITO, 0.03)
def check_ito_jacobian(ctx: ItoContext, tol: float) -> CheckOutcome:
    comparison, rows = ito.ito_jacobian(ctx.functional, ctx.process, ctx.drift, ctx.c)
    rows_ok = all(abs(r["estimate"] - r["expected"]) <= 3.0 * r["stderr"] for r in rows)
    lam_ok = abs(comparison.mean_reconstructed - 1.0) <= 3.0 * comparison.mean_stderr
    detail = "; ".join(f"{r['name']}: {r['estimate']:.4f} vs {r['expected']:.4f}" for r in rows)
    return CheckOutcome(passed=comparison.median_relative_error <= tol and rows_ok and lam_ok,
                        observed=comparison.median_relative_error, expected=0.0, tolerance=tol,
                        stderr=comparison.mean_stderr, detail=detail)


@register("rotation", _ITO, 0.01)
def check_rotation(ctx: ItoContext, tol: float) -> CheckOutcome:
    report = ito.rotation_check(ctx.functional, ctx.process, ctx.drift, ctx.seed, alpha=tol, c=ctx.c)
    return CheckOutcome(passed=report.passed, observed=report.min_margin, expected=0.0, tolerance=tol,
                        detail=f"KS p={report.ks.pvalue:.3g}; rotated anchor variance "
                               f"{report.rotated_anchor_variance:.4f}; B^T chi-square failure rate "
                               f"{report.residual_failure_rate:.4f} (band {report.residual_band:.4f}); "
                               f"lag z {report.residual_lag_z:.2f}")


@register("free_energy", _ITO, 0.01)
def check_ito_free_energy(ctx: ItoContext, tol: float) -> CheckOutcome:
    lhs, rhs = ito.free_energy_identity(ctx.functional, ctx.process, ctx.drift, ctx.c)
    return _within(float(rhs.value), lhs, tol, float(rhs.stderr), detail="-log E[e^-f] vs E[f∘T + ½∫u²∘T]")


@register("distance_identity", _ITO, 0.01)
def check_ito_distance_identity(ctx: ItoContext, tol: float) -> CheckOutcome:
    half, ito_form, entropy_form = ito.ito_distance_identity(ctx.functional, ctx.process, ctx.drift,
                                                             ctx.space(ctx.functional.k))
    static_ok = abs(float(half.value) - float(entropy_form.value)) <= 1e-3 + 2.0 * float(entropy_form.stderr)
    outcome = _within(float(ito_form.value), float(half.value), tol, float(ito_form.stderr),
                      detail=f"entropy form {float(entropy_form.value):.6g}")
    return outcome.model_copy(update={"passed": outcome.passed and static_ok})


@register("refinement", _ITO, 0.85)
def check_refinement(ctx: ItoContext, tol: float) -> CheckOutcome:
    steps = ctx.param("steps")
    report = ito.refinement_study(ctx.functional, ctx.param("paths"), [steps, 2 * steps], ctx.seed, ctx.estimator)
    worst = max(report.density_ratio, report.jacobian_ratio)
    return CheckOutcome(passed=worst <= tol, observed=worst, expected=tol, tolerance=tol,
                        detail=f"density ratio {report.density_ratio:.3f}; jacobian ratio {report.jacobian_ratio:.3f}; "
                               f"slope {report.slope:.3f}")


@register("future_information_control", _ITO, 1e-6)
def check_future_information_control(ctx: ItoContext, tol: float) -> CheckOutcome:
    """The non-adapted drift must be rejected by the decomposition check."""
    report = ito.semimartingale_decomposition_check(ctx.process, ito.future_information_drift(ctx.functional),
                                                    adapted_tol=tol)
    return CheckOutcome(passed=not report.passed, observed=report.adaptedness_residual, expected=tol, tolerance=tol,
                        detail=f"max |z| {report.max_abs_z:.2f}")
