"""Central finite-difference verification of analytic gradients."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import ContractError
from .tensor import ComputationTape, Parameter, Tensor, backward

logger = logging.getLogger(__name__)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    total: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4
    h: float = 1e-5
    abs_floor: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def format_table(self) -> str:
        width = max([len("parameter")] + [len(e.name) for e in self.entries])
        lines = [f"{'parameter':<{width}}  {'checked':>9}  {'max_rel_err':>12}  {'max_abs_err':>12}  status"]
        for e in self.entries:
            lines.append(
                f"{e.name:<{width}}  {f'{e.checked}/{e.total}':>9}  {e.max_rel_error:>12.3e}  "
                f"{e.max_abs_error:>12.3e}  {'ok' if e.passed else 'FAIL'}"
            )
        return "\n".join(lines)

    def to_tsv(self) -> str:
        rows = ["name\tchecked\ttotal\tmax_rel_error\tmax_abs_error\tpassed"]
        for e in self.entries:
            rows.append(
                f"{e.name}\t{e.checked}\t{e.total}\t{e.max_rel_error:.6e}\t"
                f"{e.max_abs_error:.6e}\t{int(e.passed)}"
            )
        return "\n".join(rows) + "\n"


def analytic_gradients(f: Callable[[], Tensor], params: Sequence[Parameter]) -> List[np.ndarray]:
    for param in params:
        param.grad = None
    with ComputationTape() as tape:
        loss = f()
    backward(loss, tape)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with ``(f(p+h) - f(p-h)) / 2h``.

    Frozen parameters are skipped and do not appear in the report. Each
    checked entry gets its own relative error
    ``|a_i - n_i| / max(|a_i|, |n_i|, abs_floor)`` and a parameter reports the
    largest one, so a small entry is never judged against a large neighbour.

    Args:
        f: Deterministic scalar function of the current parameter values
        params: Candidate parameters
        h: Central-difference step
        tol: Relative error bound
        max_entries: Sample at most this many entries per parameter
        rng: Sampling stream (defaults to seed 0)
        abs_floor: Lower bound of each entry's error denominator

    Returns:
        Report with one entry per trainable parameter
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    rng = rng or np.random.default_rng(0)
    trainable = [p for p in params if p.trainable]
    analytic = analytic_gradients(f, trainable)

    report = GradCheckReport(tol=tol, h=h, abs_floor=abs_floor)
    for index, (param, grad) in enumerate(zip(trainable, analytic)):
        flat = param.data.reshape(-1)
        if max_entries is not None and max_entries < flat.size:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)

        numeric = np.empty(len(entries))
        for k, entry in enumerate(entries):
            original = flat[entry]
            flat[entry] = original + h
            plus = f().item()
            flat[entry] = original - h
            minus = f().item()
            flat[entry] = original
            numeric[k] = (plus - minus) / (2.0 * h)

        picked = grad.reshape(-1)[entries]
        errors = np.abs(picked - numeric)
        scales = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), abs_floor)
        abs_err = float(np.max(errors, initial=0.0))
        rel_err = float(np.max(errors / scales, initial=0.0))
        name = param.name or f"param{index}"
        report.entries.append(
            GradCheckEntry(name, rel_err, abs_err, len(entries), flat.size, rel_err < tol)
        )
        logger.debug("gradcheck %s: rel %.3e over %d entries", name, rel_err, len(entries))

    if report.failures():
        logger.warning(
            "Gradient check failed for %d of %d parameters",
            len(report.failures()),
            len(report.entries),
        )
    return report


def perturb_parameters(params: Sequence[Parameter], rng: np.random.Generator, std: float = 0.02) -> int:
    """Add Gaussian noise to every trainable parameter in place.

    Zero-initialised up-projections otherwise block the gradient of
    everything upstream of them.
    """
    touched = 0
    for param in params:
        if param.trainable:
            param.data = param.data + rng.normal(0.0, std, size=param.shape)
            touched += 1
    return touched
