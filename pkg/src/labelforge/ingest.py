"""Mine image-based buttons from screenshot + UI-hierarchy captures.

A capture is one screenshot plus the runtime view-hierarchy dump of the
screen it shows. Hierarchy dumps use the common accessibility-dump layout:
an XML document of nested ``<node>`` elements carrying ``class``,
``bounds="[l,t][r,b]"``, ``clickable`` and ``content-desc`` attributes.

Image-based buttons are elements of class ``ImageButton``, or ``ImageView``
elements whose clickable flag is set. Three dedup rules apply within one
app: identical hierarchy documents collapse to one screen, crops with
identical pixels collapse to one, and crops sharing both bounds and label
collapse to one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .jsonl import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

IMAGE_BUTTON_CLASS = "ImageButton"
IMAGE_VIEW_CLASS = "ImageView"


class CaptureParseError(ValueError):
    """Raised when a hierarchy document cannot be parsed."""


@dataclass(frozen=True)
class Bounds:
    """Integer pixel rectangle, half-open on the right/bottom edge."""

    left: int
    top: int
    right: int
    bottom: int

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    def clamped_to(self, width: int, height: int) -> "Bounds":
        return Bounds(
            left=min(max(self.left, 0), width),
            top=min(max(self.top, 0), height),
            right=min(max(self.right, 0), width),
            bottom=min(max(self.bottom, 0), height),
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.left, self.top, self.right, self.bottom)


@dataclass(frozen=True)
class UIElement:
    element_class: str
    bounds: Bounds
    clickable: bool
    content_description: str | None = None
    text: str | None = None
    clamped: bool = False

    @property
    def simple_class(self) -> str:
        """Class name without its package prefix."""
        return self.element_class.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class AppMeta:
    app_id: str
    category: str = "other"
    install_bucket: str = ""
    app_name: str = ""  # display name; falls back to app_id when empty


@dataclass
class ScreenCapture:
    app_id: str
    screen_id: str
    screenshot: np.ndarray
    elements: list[UIElement]
    hierarchy_digest: str
    category: str = "other"
    install_bucket: str = ""
    app_name: str = ""


@dataclass
class ElementCrop:
    crop_id: str
    app_id: str
    screen_id: str
    app_category: str
    install_bucket: str
    image: np.ndarray
    bounds: Bounds
    raw_label: str | None
    pixel_digest: str
    image_path: str | None = None
    app_name: str = ""

    def to_record(self) -> dict:
        return {
            "crop_id": self.crop_id,
            "app_id": self.app_id,
            "app_name": self.app_name,
            "screen_id": self.screen_id,
            "app_category": self.app_category,
            "install_bucket": self.install_bucket,
            "bounds": list(self.bounds.as_tuple()),
            "raw_label": self.raw_label,
            "pixel_digest": self.pixel_digest,
            "image_path": self.image_path,
        }

    @classmethod
    def from_record(cls, record: dict, image: np.ndarray | None = None) -> "ElementCrop":
        return cls(
            crop_id=record["crop_id"],
            app_id=record["app_id"],
            screen_id=record["screen_id"],
            app_category=record.get("app_category", "other"),
            install_bucket=record.get("install_bucket", ""),
            image=image if image is not None else np.zeros((0, 0, 3), dtype=np.uint8),
            bounds=Bounds(*record["bounds"]),
            raw_label=record.get("raw_label"),
            pixel_digest=record["pixel_digest"],
            image_path=record.get("image_path"),
            app_name=record.get("app_name", ""),
        )


def hierarchy_digest(hierarchy_doc: str) -> str:
    """Content hash of the canonicalized hierarchy document.

    The document is parsed and re-serialized with sorted attributes and no
    insignificant whitespace, so byte-identical documents always agree and
    whitespace noise from capture tooling does not split screens.
    """
    try:
        root = ET.fromstring(hierarchy_doc)
    except ET.ParseError as exc:
        raise CaptureParseError(f"malformed hierarchy document: {exc}") from exc
    parts: list[str] = []

    def serialize(node: ET.Element) -> None:
        attrs = ",".join(f"{k}={v}" for k, v in sorted(node.attrib.items()))
        parts.append(f"<{node.tag} {attrs}>")
        for child in node:
            serialize(child)
        parts.append(f"</{node.tag}>")

    serialize(root)
    return hashlib.sha256("".join(parts).encode("utf-8")).hexdigest()


def pixel_digest(image: np.ndarray) -> str:
    """Content hash of raw pixel bytes (shape-prefixed)."""
    data = np.ascontiguousarray(image)
    header = f"{data.shape}:{data.dtype}:".encode("ascii")
    return hashlib.sha256(header + data.tobytes()).hexdigest()


def _parse_bounds(text: str) -> Bounds:
    # Accepts the standard "[l,t][r,b]" accessibility-dump form.
    try:
        l, t = text.split("][")[0].lstrip("[").split(",")
        r, b = text.split("][")[1].rstrip("]").split(",")
        return Bounds(int(l), int(t), int(r), int(b))
    except (IndexError, ValueError) as exc:
        raise CaptureParseError(f"unparseable bounds {text!r}") from exc


def parse_capture(
    hierarchy_doc: str,
    screenshot: np.ndarray,
    meta: AppMeta,
    screen_id: str = "screen",
) -> ScreenCapture:
    """Parse one hierarchy dump against its screenshot.

    Elements are returned in document order. Bounds partially outside the
    screenshot are clamped and flagged; elements entirely outside (or with
    zero area after clamping) are skipped with a warning. A malformed node
    raises :class:`CaptureParseError` naming the offending node.
    """
    if screenshot.ndim != 3 or screenshot.size == 0:
        raise ValueError("screenshot must be a non-empty HxWxC array")
    height, width = screenshot.shape[:2]
    digest = hierarchy_digest(hierarchy_doc)
    root = ET.fromstring(hierarchy_doc)

    elements: list[UIElement] = []
    for index, node in enumerate(root.iter("node")):
        cls = node.get("class", "")
        try:
            bounds = _parse_bounds(node.get("bounds", ""))
        except CaptureParseError as exc:
            raise CaptureParseError(f"node {index} ({cls or 'no class'}): {exc}") from exc
        if bounds.left >= bounds.right or bounds.top >= bounds.bottom:
            raise CaptureParseError(
                f"node {index} ({cls or 'no class'}): inverted or empty bounds {bounds.as_tuple()}"
            )
        clamped_bounds = bounds.clamped_to(width, height)
        if clamped_bounds.area == 0:
            logger.warning(
                "%s/%s: skipping element %d (%s), bounds %s outside %dx%d screenshot",
                meta.app_id, screen_id, index, cls, bounds.as_tuple(), width, height,
            )
            continue
        was_clamped = clamped_bounds != bounds
        if was_clamped:
            logger.warning(
                "%s/%s: clamped element %d (%s) bounds %s to %s",
                meta.app_id, screen_id, index, cls,
                bounds.as_tuple(), clamped_bounds.as_tuple(),
            )
        desc = node.get("content-desc")
        elements.append(
            UIElement(
                element_class=cls,
                bounds=clamped_bounds,
                clickable=node.get("clickable", "false").strip().lower() == "true",
                content_description=desc,
                text=node.get("text") or None,
                clamped=was_clamped,
            )
        )
    return ScreenCapture(
        app_id=meta.app_id,
        screen_id=screen_id,
        screenshot=screenshot,
        elements=elements,
        hierarchy_digest=digest,
        category=meta.category,
        install_bucket=meta.install_bucket,
        app_name=meta.app_name,
    )


def is_image_based_button(element: UIElement) -> bool:
    """True for ImageButton elements and clickable ImageView elements."""
    cls = element.simple_class
    if cls == IMAGE_BUTTON_CLASS:
        return True
    return cls == IMAGE_VIEW_CLASS and element.clickable


def extract_buttons(capture: ScreenCapture) -> list[ElementCrop]:
    """Crop every image-based button out of the capture's screenshot.

    Each crop is the exact screenshot sub-rectangle at the element's bounds.
    Zero-area elements are skipped with a warning.
    """
    crops: list[ElementCrop] = []
    for index, element in enumerate(capture.elements):
        if not is_image_based_button(element):
            continue
        b = element.bounds
        if b.area == 0:
            logger.warning(
                "%s/%s: skipping zero-area button at %s",
                capture.app_id, capture.screen_id, b.as_tuple(),
            )
            continue
        image = np.ascontiguousarray(capture.screenshot[b.top : b.bottom, b.left : b.right])
        digest = pixel_digest(image)
        crops.append(
            ElementCrop(
                crop_id=f"{capture.screen_id}-{index:03d}-{digest[:8]}",
                app_id=capture.app_id,
                screen_id=capture.screen_id,
                app_category=capture.category,
                install_bucket=capture.install_bucket,
                image=image,
                bounds=b,
                raw_label=element.content_description,
                pixel_digest=digest,
                app_name=capture.app_name,
            )
        )
    return crops


def dedup_screens(captures: Iterable[ScreenCapture]) -> list[ScreenCapture]:
    """Keep the first capture per (app, hierarchy digest); order preserved.

    Dedup is per app: identical screens shipped by different apps survive.
    """
    seen: set[tuple[str, str]] = set()
    kept: list[ScreenCapture] = []
    for capture in captures:
        key = (capture.app_id, capture.hierarchy_digest)
        if key in seen:
            continue
        seen.add(key)
        kept.append(capture)
    return kept


def dedup_elements(crops: Iterable[ElementCrop]) -> list[ElementCrop]:
    """Drop duplicate crops within each app; first occurrence wins.

    Two crops are duplicates when their pixels are byte-identical, or when
    they share both coordinate bounds and a (present) label. The second rule
    catches fixed-position buttons whose background changed between screens.
    """
    seen_pixels: set[tuple[str, str]] = set()
    seen_placed: set[tuple[str, tuple[int, int, int, int], str]] = set()
    kept: list[ElementCrop] = []
    for crop in crops:
        pixel_key = (crop.app_id, crop.pixel_digest)
        if pixel_key in seen_pixels:
            continue
        placed_key = None
        if crop.raw_label is not None:
            placed_key = (crop.app_id, crop.bounds.as_tuple(), crop.raw_label)
            if placed_key in seen_placed:
                continue
        seen_pixels.add(pixel_key)
        if placed_key is not None:
            seen_placed.add(placed_key)
        kept.append(crop)
    return kept


# --- capture directory layout -------------------------------------------
#
#   <root>/<app_id>/meta.json                {"app_id", "category", "install_bucket"}
#   <root>/<app_id>/<screen_id>.png
#   <root>/<app_id>/<screen_id>.hierarchy    XML dump as described above


def load_capture_dir(root: str | Path) -> list[ScreenCapture]:
    """Load every screenshot + hierarchy pair under a capture directory."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"capture directory not found: {root}")
    captures: list[ScreenCapture] = []
    for app_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta = _load_meta(app_dir)
        for hierarchy_path in sorted(app_dir.glob("*.hierarchy")):
            screen_id = hierarchy_path.stem
            png_path = app_dir / f"{screen_id}.png"
            if not png_path.exists():
                logger.warning("no screenshot for %s, skipping", hierarchy_path)
                continue
            screenshot = np.asarray(Image.open(png_path).convert("RGB"))
            captures.append(
                parse_capture(
                    hierarchy_path.read_text(encoding="utf-8"),
                    screenshot,
                    meta,
                    screen_id=screen_id,
                )
            )
    return captures


def _load_meta(app_dir: Path) -> AppMeta:
    meta_path = app_dir / "meta.json"
    if not meta_path.exists():
        return AppMeta(app_id=app_dir.name)
    raw = json.loads(meta_path.read_text(encoding="utf-8"))
    return AppMeta(
        app_id=raw.get("app_id", app_dir.name),
        category=raw.get("category", "other"),
        install_bucket=raw.get("install_bucket", ""),
        app_name=raw.get("app_name", ""),
    )


def mine_crops(captures: Iterable[ScreenCapture]) -> list[ElementCrop]:
    """Full mining pass: dedup screens, crop buttons, dedup crops."""
    crops: list[ElementCrop] = []
    for capture in dedup_screens(captures):
        crops.extend(extract_buttons(capture))
    return dedup_elements(crops)


def write_crop_store(crops: Iterable[ElementCrop], out_dir: str | Path) -> Path:
    """Write crop PNGs plus a JSON-lines index; returns the index path."""
    out_dir = Path(out_dir)
    records = []
    for crop in crops:
        crop_dir = out_dir / "crops" / crop.app_id
        crop_dir.mkdir(parents=True, exist_ok=True)
        png_path = crop_dir / f"{crop.crop_id}.png"
        Image.fromarray(crop.image).save(png_path)
        crop.image_path = str(png_path.relative_to(out_dir))
        records.append(crop.to_record())
    return write_jsonl(out_dir / "crops_index.jsonl", records, kind="crop-index")


def read_crop_store(index_path: str | Path, load_images: bool = True) -> list[ElementCrop]:
    """Load crops back from a crop-store index."""
    index_path = Path(index_path)
    base = index_path.parent
    crops = []
    for record in read_jsonl(index_path, kind="crop-index"):
        image = None
        if load_images and record.get("image_path"):
            image = np.asarray(Image.open(base / record["image_path"]).convert("RGB"))
        crops.append(ElementCrop.from_record(record, image=image))
    return crops
