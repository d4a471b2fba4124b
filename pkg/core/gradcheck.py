"""
Central finite-difference checks for the explicit backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping

import numpy as np

from .utils import format_record

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_index: tuple[int, ...] | None = None


@dataclass
class GradcheckReport:
    label: str
    tolerance: float
    groups: List[GroupResult] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and all(g.max_rel_error < self.tolerance for g in self.groups)

    def records(self) -> List[str]:
        lines = [
            format_record(
                op=self.label,
                group=g.name,
                max_rel_err=g.max_rel_error,
                checked=g.checked,
                skipped=g.skipped_kinks,
                passed=g.max_rel_error < self.tolerance,
            )
            for g in self.groups
        ]
        lines.extend(format_record(op=self.label, failure=msg) for msg in self.failures)
        return lines


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    label: str,
    forward: Callable[[], np.ndarray],
    backward: Callable[[np.ndarray], Mapping[str, np.ndarray]],
    tensors: Mapping[str, np.ndarray],
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    max_entries: int = 24,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradcheckReport:
    """
    Compare ``backward`` against central differences of ``forward``.

    ``forward`` reads the arrays in ``tensors``, which are perturbed in place
    and restored. The scalar under test is ``sum(forward() * R)`` for a fixed
    random projection ``R``; ``backward(R)`` must return the gradient of each
    named array. Entries whose one-sided slopes disagree by more than the
    tolerance sit on a kink and are skipped.
    """
    report = GradcheckReport(label=label, tolerance=tolerance)
    rng = np.random.default_rng(seed)

    base = forward()
    if not np.all(np.isfinite(base)):
        report.failures.append(f"non-finite forward output at {_first_bad(base)}")
        return report
    projection = rng.standard_normal(base.shape)
    analytic = backward(projection)

    def objective() -> float:
        return float(np.sum(forward() * projection))

    f0 = objective()
    for name, array in tensors.items():
        grad = analytic.get(name)
        if grad is None:
            report.failures.append(f"{name}: backward returned no gradient")
            continue
        if grad.shape != array.shape:
            report.failures.append(f"{name}: gradient shape {grad.shape} != {array.shape}")
            continue
        if not np.all(np.isfinite(grad)):
            report.failures.append(f"{name}: non-finite analytic gradient at {_first_bad(grad)}")
            continue

        flat_count = array.size
        picks = rng.choice(flat_count, size=min(max_entries, flat_count), replace=False)
        group = GroupResult(name=name, max_rel_error=0.0, checked=0, skipped_kinks=0)
        for flat in picks:
            index = np.unravel_index(int(flat), array.shape)
            original = array[index]
            array[index] = original + step
            f_plus = objective()
            array[index] = original - step
            f_minus = objective()
            array[index] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failures.append(f"{name}{tuple(int(i) for i in index)}: non-finite perturbed objective")
                continue
            slope_plus = (f_plus - f0) / step
            slope_minus = (f0 - f_minus) / step
            if relative_error(slope_plus, slope_minus, floor) > tolerance and abs(slope_plus - slope_minus) > 1e2 * step:
                group.skipped_kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(float(grad[index]), numeric, floor)
            group.checked += 1
            if err > group.max_rel_error:
                group.max_rel_error = err
                group.worst_index = tuple(int(i) for i in index)
        report.groups.append(group)
    return report


def _first_bad(array: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(~np.isfinite(array))[0])


def tensors_of(parameters: Mapping[str, "object"]) -> Dict[str, np.ndarray]:
    """Map ``name -> Tensor`` to ``name -> Tensor.data`` for :func:`gradcheck`."""
    return {name: tensor.data for name, tensor in parameters.items()}
