"""Missing-label statistics over captured apps.

An image-based button is "missing" when its content description is absent
or empty: screen readers have nothing to announce for it. A screen counts
as missing when it contains at least one such element, and an app when it
contains at least one such screen. Statistics are reported separately for
ImageButton elements and clickable ImageView elements, plus a combined
row, alongside a per-category histogram of app missing rates and a
rank correlation between install counts and missing rates.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import (
    IMAGE_BUTTON_CLASS,
    IMAGE_VIEW_CLASS,
    ScreenCapture,
    UIElement,
    dedup_screens,
    is_image_based_button,
)
from .jsonl import FORMAT_VERSION

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def label_missing(element: UIElement) -> bool:
    """True when an image-based button has no usable content description."""
    if not is_image_based_button(element):
        return False
    return element.content_description is None or not element.content_description.strip()


def _element_kind(element: UIElement) -> str | None:
    cls = element.simple_class
    if cls == IMAGE_BUTTON_CLASS:
        return "image_button"
    if cls == IMAGE_VIEW_CLASS and element.clickable:
        return "clickable_image"
    return None


@dataclass
class LabelCounts:
    total: int = 0
    missing: int = 0

    def add(self, missing: bool) -> None:
        self.total += 1
        self.missing += int(missing)

    @property
    def rate(self) -> float:
        return self.missing / self.total if self.total else 0.0

    def percent(self, digits: int = 2) -> float:
        return round(100.0 * self.rate, digits)

    def to_dict(self) -> dict:
        return {"total": self.total, "missing": self.missing, "rate": self.rate}


@dataclass
class AuditRow:
    """Missing counts at element, screen and app granularity."""

    elements: LabelCounts = field(default_factory=LabelCounts)
    screens: LabelCounts = field(default_factory=LabelCounts)
    apps: LabelCounts = field(default_factory=LabelCounts)

    def to_dict(self) -> dict:
        return {
            "elements": self.elements.to_dict(),
            "screens": self.screens.to_dict(),
            "apps": self.apps.to_dict(),
        }


@dataclass
class AppAudit:
    app_id: str
    category: str
    install_bucket: str
    image_button: LabelCounts = field(default_factory=LabelCounts)
    clickable_image: LabelCounts = field(default_factory=LabelCounts)
    screens_total: int = 0
    screens_with_missing: int = 0

    @property
    def elements(self) -> LabelCounts:
        return LabelCounts(
            total=self.image_button.total + self.clickable_image.total,
            missing=self.image_button.missing + self.clickable_image.missing,
        )

    @property
    def missing_rate(self) -> float:
        return self.elements.rate

    def to_dict(self) -> dict:
        return {
            "app_id": self.app_id,
            "category": self.category,
            "install_bucket": self.install_bucket,
            "image_button": self.image_button.to_dict(),
            "clickable_image": self.clickable_image.to_dict(),
            "screens_total": self.screens_total,
            "screens_with_missing": self.screens_with_missing,
            "missing_rate": self.missing_rate,
        }


@dataclass
class AuditReport:
    rows: dict[str, AuditRow]
    per_app: list[AppAudit]
    category_histogram: dict[str, list[float]]
    bucket_edges: tuple[float, ...]
    spearman_rho: float | None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "audit-report",
            "rows": {k: v.to_dict() for k, v in self.rows.items()},
            "per_app": [a.to_dict() for a in self.per_app],
            "category_histogram": self.category_histogram,
            "bucket_edges": list(self.bucket_edges),
            "spearman_rho": self.spearman_rho,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_per_app_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["app_id", "category", "install_bucket", "buttons_total", "buttons_missing", "missing_rate"]
            )
            for app in self.per_app:
                writer.writerow(
                    [app.app_id, app.category, app.install_bucket,
                     app.elements.total, app.elements.missing, f"{app.missing_rate:.6f}"]
                )
        return path


def missing_stats(captures: Iterable[ScreenCapture]) -> AuditReport:
    """Aggregate missing-label statistics per app, screen and element.

    Screens are deduplicated per app (by hierarchy digest) before counting.
    """
    by_app: dict[str, list[ScreenCapture]] = defaultdict(list)
    meta: dict[str, tuple[str, str]] = {}
    for capture in dedup_screens(captures):
        by_app[capture.app_id].append(capture)
        meta.setdefault(capture.app_id, (capture.category, capture.install_bucket))

    rows = {k: AuditRow() for k in ("image_button", "clickable_image", "total")}
    per_app: list[AppAudit] = []
    for app_id in sorted(by_app):
        category, bucket = meta[app_id]
        app = AppAudit(app_id=app_id, category=category, install_bucket=bucket)
        app_kind_present = {"image_button": False, "clickable_image": False}
        app_kind_missing = {"image_button": False, "clickable_image": False}
        for capture in by_app[app_id]:
            screen_kind_present = {"image_button": False, "clickable_image": False}
            screen_kind_missing = {"image_button": False, "clickable_image": False}
            for element in capture.elements:
                kind = _element_kind(element)
                if kind is None:
                    continue
                missing = label_missing(element)
                getattr(app, kind).add(missing)
                rows[kind].elements.add(missing)
                rows["total"].elements.add(missing)
                screen_kind_present[kind] = True
                screen_kind_missing[kind] = screen_kind_missing[kind] or missing
            any_present = any(screen_kind_present.values())
            any_missing = any(screen_kind_missing.values())
            for kind in ("image_button", "clickable_image"):
                if screen_kind_present[kind]:
                    rows[kind].screens.add(screen_kind_missing[kind])
                    app_kind_present[kind] = True
                    app_kind_missing[kind] = app_kind_missing[kind] or screen_kind_missing[kind]
            if any_present:
                rows["total"].screens.add(any_missing)
                app.screens_total += 1
                app.screens_with_missing += int(any_missing)
        for kind in ("image_button", "clickable_image"):
            if app_kind_present[kind]:
                rows[kind].apps.add(app_kind_missing[kind])
        if any(app_kind_present.values()):
            rows["total"].apps.add(any(app_kind_missing.values()))
            per_app.append(app)

    histogram = category_histogram(((a.category, a.missing_rate) for a in per_app))
    rho = None
    installs = [parse_install_bucket(a.install_bucket) for a in per_app]
    rates = [a.missing_rate for a in per_app]
    usable = [(x, y) for x, y in zip(installs, rates) if x is not None]
    if len(usable) >= 2:
        try:
            rho = spearman([x for x, _ in usable], [y for _, y in usable])
        except ValueError as exc:
            logger.warning("spearman undefined: %s", exc)
    return AuditReport(
        rows=rows,
        per_app=per_app,
        category_histogram=histogram,
        bucket_edges=DEFAULT_BUCKET_EDGES,
        spearman_rho=rho,
    )


def category_histogram(
    rates: Iterable[tuple[str | None, float]],
    bucket_edges: Sequence[float] = DEFAULT_BUCKET_EDGES,
) -> dict[str, list[float]]:
    """Per-category fraction of apps per missing-rate bucket.

    Buckets are right-closed: with the default edges a rate of exactly 0.8
    lands in (0.6, 0.8]; only 0 itself lands in the first bucket's closed
    left edge. Apps without a category are grouped under "other".
    """
    edges = list(bucket_edges)
    if sorted(edges) != edges or len(edges) < 2:
        raise ValueError("bucket edges must be ascending with at least two values")
    n_buckets = len(edges) - 1
    counts: dict[str, list[int]] = defaultdict(lambda: [0] * n_buckets)
    for category, rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"rate {rate} outside [0, 1]")
        category = category or "other"
        index = 0
        for i in range(n_buckets):
            if rate > edges[i]:
                index = i
        counts[category][index] += 1
    return {
        category: [c / sum(bucket_counts) for c in bucket_counts]
        for category, bucket_counts in counts.items()
    }


_INSTALL_RE = re.compile(r"^\s*([\d,.]+)\s*([kKmMbB]?)")

_SCALE = {"": 1.0, "k": 1e3, "m": 1e6, "b": 1e9}


def parse_install_bucket(bucket: str) -> float | None:
    """Lower bound of an install-count bucket like ``"1M - 5M"`` or ``"500K+"``."""
    if not bucket:
        return None
    match = _INSTALL_RE.match(bucket)
    if not match:
        return None
    number = float(match.group(1).replace(",", ""))
    return number * _SCALE[match.group(2).lower()]


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j) / 2 + 1  # ranks are 1-based
        for k in range(i, j + 1):
            ranks[order[k]] = average
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(x) != len(y):
        raise ValueError("inputs must have equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 observations")
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise ValueError("correlation undefined for a constant input")
    rx, ry = _average_ranks(x), _average_ranks(y)
    mean_x = sum(rx) / len(rx)
    mean_y = sum(ry) / len(ry)
    cov = sum((a - mean_x) * (b - mean_y) for a, b in zip(rx, ry))
    var_x = sum((a - mean_x) ** 2 for a in rx)
    var_y = sum((b - mean_y) ** 2 for b in ry)
    return cov / math.sqrt(var_x * var_y)
