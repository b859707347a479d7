"""Tab-separated metric reports and aligned plain-text tables."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from m2clip.exceptions import ContractError

logger = logging.getLogger(__name__)

MISSING = "-"

METRICS_FIELDS = (
    "epoch",
    "step",
    "loss_total",
    "loss_contrastive",
    "loss_cmc",
    "loss_cmlm",
    "loss_vc",
    "vc_top1",
    "cmc_top1",
    "zeroshot_top1",
    "trainable_params",
    "total_params",
)


def format_cell(value) -> str:
    if value is None:
        return MISSING
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


@dataclass
class MetricsRecord:
    """One evaluation point; absent heads or paths are ``None``"""

    epoch: int
    step: int
    loss_total: float
    loss_contrastive: Optional[float] = None
    loss_cmc: Optional[float] = None
    loss_cmlm: Optional[float] = None
    loss_vc: Optional[float] = None
    vc_top1: Optional[float] = None
    cmc_top1: Optional[float] = None
    zeroshot_top1: Optional[float] = None
    trainable_params: int = 0
    total_params: int = 0

    def __post_init__(self):
        for name in ("vc_top1", "cmc_top1", "zeroshot_top1"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {value}")

    def cells(self) -> List[str]:
        values = asdict(self)
        return [format_cell(values[name]) for name in METRICS_FIELDS]


@dataclass
class MetricsReport:
    records: List[MetricsRecord] = field(default_factory=list)
    # Epoch whose trainable values the model kept; None means the last
    selected_epoch: Optional[int] = None

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None

    @property
    def selected(self) -> Optional[MetricsRecord]:
        for record in self.records:
            if record.epoch == self.selected_epoch:
                return record
        return self.last

    def to_tsv(self) -> str:
        lines = ["\t".join(METRICS_FIELDS)]
        lines += ["\t".join(record.cells()) for record in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_tsv(), encoding="utf-8")
        logger.debug("Wrote %d metric records to %s", len(self.records), path)
        return path


def write_tsv(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    lines = ["\t".join(header)]
    lines += ["\t".join(format_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def aligned_table(header: Sequence[str], rows: Sequence[Sequence], title: str = "") -> str:
    """Plain-text table; numbers right-aligned, text left-aligned"""
    cells = [[format_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in header]
    for row in cells:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]

    numeric = [
        all(isinstance(row[i], (int, float)) or row[i] is None for row in rows) for i in range(len(header))
    ]

    def render(row: Sequence[str]) -> str:
        parts = [c.rjust(w) if num else c.ljust(w) for c, w, num in zip(row, widths, numeric)]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    lines = [title] if title else []
    lines += [render(header), rule] + [render(row) for row in cells]
    return "\n".join(lines) + "\n"


def summary_lines(values: Dict[str, object]) -> str:
    width = max(len(k) for k in values)
    return "\n".join(f"{key:<{width}}  {format_cell(value)}" for key, value in values.items())
