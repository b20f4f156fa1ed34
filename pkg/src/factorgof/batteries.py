"""Concrete residual batteries and latent evaluation grids.

Three assessments are bundled, all conditioned on a grid of latent values:

* ``lv_density_problem`` compares the average posterior density against the
  model's latent density (identity transformation),
* ``mv_linearity_problem`` compares a posterior-weighted conditional-mean
  estimate of one variable against the fitted line (ratio transformation),
* ``mv_homoscedasticity_problem`` does the same for the conditional variance
  against the constant fitted error variance.

``mv_linearity_direct_problem`` is a non-ratio variant of the linearity
check kept for comparison; it is deliberately not part of the default CLI
report because its residuals also react to latent-density misfit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import conditional_mean_grid, lv_logpdf, posterior_log_weights
from .residuals import (
    ResidualProblem,
    SummaryBattery,
    TestReport,
    identity_transformation,
    ratio_transformation,
)


@dataclass(eq=False)
class LvGrid:
    """Outer-product grid of latent evaluation points.

    ``points`` is (Q, d) in row-major dimension order (first dimension
    slowest).  ``summary_subset`` holds indices of the points entering the
    summary statistic, or None when no summary is requested.
    """

    axes: tuple
    points: np.ndarray
    summary_subset: np.ndarray
    label: str
    summary_label: str

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def Q(self) -> int:
        return self.points.shape[0]


def _axis_values(lo: float, hi: float, count: int) -> np.ndarray:
    if count < 1:
        raise ConfigurationError(f"grid count must be >= 1, got {count}")
    if lo >= hi:
        raise ConfigurationError(f"grid bounds must satisfy lo < hi, got {lo}:{hi}")
    return np.linspace(lo, hi, count)


def _axis_label(axes) -> str:
    return ",".join(f"{lo:g}:{hi:g}:{count}" for lo, hi, count in axes)


def make_grid(axes, summary_axes=None) -> LvGrid:
    """Build a grid from per-dimension (lo, hi, count) triples.

    ``summary_axes`` must describe points that all lie on the main grid;
    they are matched by value and stored as indices.
    """
    axes = tuple((float(lo), float(hi), int(count)) for lo, hi, count in axes)
    values = [_axis_values(*ax) for ax in axes]
    mesh = np.meshgrid(*values, indexing="ij")
    points = np.stack([g.ravel(order="C") for g in mesh], axis=1)

    subset = None
    summary_label = ""
    if summary_axes is not None:
        summary_axes = tuple((float(lo), float(hi), int(count)) for lo, hi, count in summary_axes)
        if len(summary_axes) != len(axes):
            raise ConfigurationError("summary grid dimensionality differs from the main grid")
        sub_values = [_axis_values(*ax) for ax in summary_axes]
        sub_mesh = np.meshgrid(*sub_values, indexing="ij")
        sub_points = np.stack([g.ravel(order="C") for g in sub_mesh], axis=1)
        subset = np.empty(sub_points.shape[0], dtype=np.intp)
        for i, pt in enumerate(sub_points):
            hits = np.nonzero(np.all(np.abs(points - pt) < 1e-9, axis=1))[0]
            if hits.size != 1:
                raise ConfigurationError(
                    f"summary point {pt.tolist()} is not on the main grid"
                )
            subset[i] = hits[0]
        summary_label = _axis_label(summary_axes)

    return LvGrid(
        axes=axes,
        points=points,
        summary_subset=subset,
        label=_axis_label(axes),
        summary_label=summary_label,
    )


def default_grid(d: int) -> LvGrid:
    """Default grid: 31 points on [-3, 3] with an 11-point summary subgrid on
    [-2, 2] for one latent variable; 19 x 19 with a 7 x 7 subgrid for two."""
    if d == 1:
        return make_grid([(-3, 3, 31)], [(-2, 2, 11)])
    if d == 2:
        return make_grid([(-3, 3, 19)] * 2, [(-2, 2, 7)] * 2)
    raise ConfigurationError(f"no default grid for d={d}; supply one explicitly")


def _check_item_index(item: int) -> int:
    item = int(item)
    if item < 0:
        raise IndexError(f"item index must be non-negative, got {item}")
    return item


def _posterior_weights(Y, grid, params):
    return np.exp(posterior_log_weights(Y, grid.points, params))


def lv_density_problem(grid: LvGrid) -> ResidualProblem:
    """Latent-density check: posterior densities vs. the model density."""
    Q = grid.Q

    def ev(Y, params):
        return _posterior_weights(Y, grid, params)

    def eta_fn(params):
        return np.exp(lv_logpdf(grid.points, params))

    battery = SummaryBattery(k=Q, name="lv-density", _evaluate=ev, _eta=eta_fn)
    return ResidualProblem(battery, identity_transformation(Q), grid)


def mv_linearity_problem(grid: LvGrid, item: int) -> ResidualProblem:
    """Conditional-mean check for one variable via posterior-weight ratios."""
    item = _check_item_index(item)
    Q = grid.Q

    def ev(Y, params):
        W = _posterior_weights(Y, grid, params)
        return np.hstack([Y[:, item : item + 1] * W, W])

    def eta_fn(params):
        dens = np.exp(lv_logpdf(grid.points, params))
        mu = conditional_mean_grid(grid.points, params)[:, item]
        return np.concatenate([dens * mu, dens])

    battery = SummaryBattery(
        k=2 * Q, name=f"linearity[{item}]", _evaluate=ev, _eta=eta_fn
    )
    return ResidualProblem(battery, ratio_transformation(Q), grid)


def mv_homoscedasticity_problem(grid: LvGrid, item: int) -> ResidualProblem:
    """Conditional-variance check for one variable via posterior-weight ratios."""
    item = _check_item_index(item)
    Q = grid.Q

    def ev(Y, params):
        W = _posterior_weights(Y, grid, params)
        mu = conditional_mean_grid(grid.points, params)[:, item]
        dev = (Y[:, item : item + 1] - mu[None, :]) ** 2
        return np.hstack([dev * W, W])

    def eta_fn(params):
        dens = np.exp(lv_logpdf(grid.points, params))
        return np.concatenate([dens * params.theta[item], dens])

    battery = SummaryBattery(
        k=2 * Q, name=f"variance[{item}]", _evaluate=ev, _eta=eta_fn
    )
    return ResidualProblem(battery, ratio_transformation(Q), grid)


def mv_linearity_direct_problem(grid: LvGrid, item: int) -> ResidualProblem:
    """Non-ratio conditional-mean check; comparison variant only.

    The summary component is the response times the conditional-to-marginal
    density ratio, so its expectation is the conditional mean itself and no
    transformation is needed.  Misfit in the latent density leaks into these
    residuals, which is why the ratio form is the default.
    """
    item = _check_item_index(item)
    Q = grid.Q

    def ev(Y, params):
        W = _posterior_weights(Y, grid, params)
        dens = np.exp(lv_logpdf(grid.points, params))
        return Y[:, item : item + 1] * W / dens[None, :]

    def eta_fn(params):
        return conditional_mean_grid(grid.points, params)[:, item].copy()

    battery = SummaryBattery(
        k=Q, name=f"linearity-direct[{item}]", _evaluate=ev, _eta=eta_fn
    )
    return ResidualProblem(battery, identity_transformation(Q), grid)


def slice_report(report: TestReport, axis: int = 0, tol: float = 1e-9) -> list:
    """Profile of report points along one latent axis, others fixed at 0.

    For a one-dimensional report this is the full point list.  Points are
    returned sorted by the target coordinate; an empty selection is returned
    as an empty list.
    """
    points = report.points
    if not points:
        return []
    d = len(points[0].coords)
    if axis < 0 or axis >= d:
        raise ConfigurationError(f"axis {axis} out of range for d={d}")
    if d == 1:
        return list(points)
    others = [k for k in range(d) if k != axis]
    chosen = [
        pt for pt in points
        if all(abs(pt.coords[k]) < tol for k in others)
    ]
    return sorted(chosen, key=lambda pt: pt.coords[axis])
