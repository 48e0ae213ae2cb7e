"""Deterministic synthetic two-domain segmentation benchmark.

Scenes are layered geometric primitives rendered twice per id: once with the
source palette and once more pushed through a photometric style shift, so the
two domains share pixel-identical label maps and differ only in appearance.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

log = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
SPLITS = ("source-train", "target-train", "target-eval")

# Scene roles for the first five classes; classes beyond these become extra
# rectangle layers so any C >= 2 stays renderable.
_PALETTE = np.array(
    [
        (0.55, 0.70, 0.85),  # background / sky
        (0.33, 0.33, 0.36),  # road band
        (0.62, 0.45, 0.33),  # buildings
        (0.75, 0.18, 0.18),  # vehicles
        (0.90, 0.88, 0.70),  # lane markings
        (0.25, 0.60, 0.30),
        (0.70, 0.55, 0.80),
        (0.85, 0.60, 0.20),
    ],
    dtype=np.float64,
)


@dataclass
class StyleShift:
    hue_shift: float = 0.20
    noise_sigma: float = 0.03
    blur_sigma: float = 0.35
    contrast_scale: float = 1.08

    def validate(self) -> None:
        if not -0.5 <= self.hue_shift <= 0.5:
            raise ValueError(f"hue_shift must be in [-0.5, 0.5], got {self.hue_shift}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.contrast_scale <= 0:
            raise ValueError(f"contrast_scale must be > 0, got {self.contrast_scale}")


@dataclass
class DatasetSpec:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    num_images_per_domain: int = 200
    style_shift: StyleShift = field(default_factory=StyleShift)
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"resolution must be positive, got {self.height}x{self.width}")
        if self.num_images_per_domain <= 0:
            raise ValueError(f"num_images_per_domain must be > 0, got {self.num_images_per_domain}")
        self.style_shift.validate()

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "num_images_per_domain": self.num_images_per_domain,
            "style_shift": vars(self.style_shift).copy(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        style = d.pop("style_shift", {})
        spec = cls(style_shift=StyleShift(**style), **d)
        spec.validate()
        return spec

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DomainSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: np.ndarray | None  # (H, W) int64 in [0, C)
    domain: str
    id: str


@dataclass
class SplitInfo:
    name: str
    ids: list[str]
    files: list[dict]  # per id: {"image": relpath, "label": relpath | None}
    sha256: list[dict]  # per id: {"image": hex, "label": hex | None}


@dataclass
class DatasetManifest:
    spec: DatasetSpec
    spec_hash: str
    root: Path
    splits: dict[str, SplitInfo]

    def split(self, name: str) -> SplitInfo:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}, have {sorted(self.splits)}")
        return self.splits[name]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec_hash,
            "splits": [
                {"name": s.name, "ids": s.ids, "files": s.files, "sha256": s.sha256}
                for s in self.splits.values()
            ],
        }

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        spec = DatasetSpec.from_dict(d["spec"])
        splits = {
            s["name"]: SplitInfo(s["name"], s["ids"], s["files"], s["sha256"])
            for s in d["splits"]
        }
        return cls(spec=spec, spec_hash=d["spec_hash"], root=path.parent, splits=splits)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _render_labels(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Layered scene: background, buildings, road band, markings, vehicles."""
    h, w, c = spec.height, spec.width, spec.num_classes
    lab = np.zeros((h, w), dtype=np.int64)

    road_top = int(h * rng.uniform(0.42, 0.58))
    road_h = max(3, int(h * rng.uniform(0.22, 0.34)))
    road_bot = min(h, road_top + road_h)

    # buildings: rectangles in the region above the road
    if c > 2:
        for _ in range(rng.integers(2, 5)):
            bw = int(w * rng.uniform(0.12, 0.30))
            bh = int(road_top * rng.uniform(0.3, 0.9))
            x0 = rng.integers(0, max(1, w - bw))
            y0 = max(0, road_top - bh)
            lab[y0:road_top, x0 : x0 + bw] = 2

    lab[road_top:road_bot] = 1

    # lane markings: thin stripes inside the road band
    if c > 4:
        for _ in range(rng.integers(1, 4)):
            y = rng.integers(road_top + 1, max(road_top + 2, road_bot - 1))
            t = int(rng.integers(1, 3))
            lab[y : y + t] = 4

    # vehicles: discs sitting on the road, drawn last
    if c > 3:
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(rng.integers(1, 4)):
            r = int(rng.integers(3, max(4, min(8, road_h))))
            cx = rng.integers(r, w - r)
            cy = rng.integers(road_top + 1, max(road_top + 2, road_bot - 1))
            lab[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 3

    # extra classes beyond the five scene roles: one small patch each
    for k in range(5, c):
        pw = max(2, w // 10)
        x0 = rng.integers(0, w - pw)
        y0 = rng.integers(0, h - pw)
        lab[y0 : y0 + pw, x0 : x0 + pw] = k

    return lab


def _render_image(lab: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Paint the label map with jittered class colors plus shading/texture.

    The per-image illumination ramp and brightness offset are deliberately
    strong: they spread the global color statistics within each domain so a
    domain probe has to rely on the style shift, not on render quirks.
    """
    h, w = lab.shape
    palette = _PALETTE[np.arange(num_classes) % len(_PALETTE)].copy()
    palette += rng.uniform(-0.08, 0.08, palette.shape)
    img = palette[lab]

    ramp = np.linspace(-1.0, 1.0, w)[None, :, None] * rng.uniform(-0.16, 0.16)
    img = img + ramp + rng.uniform(-0.16, 0.16) + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _apply_style(img: np.ndarray, style: StyleShift, rng: np.random.Generator) -> np.ndarray:
    out = img
    if style.hue_shift != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + style.hue_shift) % 1.0
        out = hsv_to_rgb(hsv)
    if style.contrast_scale != 1.0:
        out = (out - 0.5) * style.contrast_scale + 0.5
    if style.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(style.blur_sigma, style.blur_sigma, 0.0))
    if style.noise_sigma > 0:
        out = out + rng.normal(0.0, style.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def _save_image(img: np.ndarray, path: Path) -> None:
    arr = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _save_label(lab: np.ndarray, num_classes: int, path: Path) -> None:
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ValueError(f"label values out of range [0, {num_classes})")
    im = Image.fromarray(lab.astype(np.uint8), mode="P")
    pal = np.round(_PALETTE[np.arange(256) % len(_PALETTE)] * 255).astype(np.uint8)
    im.putpalette(pal.flatten().tolist())
    im.save(path, format="PNG")


def _load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _load_label(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> DatasetManifest:
    """Render both domains under `out_dir` and return the manifest.

    A pure function of (spec, seed): rerunning yields byte-identical files.
    """
    spec.validate()
    root = Path(out_dir)
    try:
        for domain in (SOURCE, TARGET):
            (root / domain / "images").mkdir(parents=True, exist_ok=True)
            (root / domain / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directories under {root}: {e}") from e

    n = spec.num_images_per_domain
    ids = [f"{i:04d}" for i in range(n)]
    children = np.random.SeedSequence(spec.seed).spawn(n)

    rel = {}
    for i, sid in enumerate(ids):
        rng = np.random.default_rng(children[i])
        lab = _render_labels(spec, rng)
        base = _render_image(lab, spec.num_classes, rng)
        tgt = _apply_style(base, spec.style_shift, rng)

        paths = {
            (SOURCE, "image"): root / SOURCE / "images" / f"{sid}.png",
            (SOURCE, "label"): root / SOURCE / "labels" / f"{sid}.png",
            (TARGET, "image"): root / TARGET / "images" / f"{sid}.png",
            (TARGET, "label"): root / TARGET / "labels" / f"{sid}.png",
        }
        _save_image(base, paths[(SOURCE, "image")])
        _save_label(lab, spec.num_classes, paths[(SOURCE, "label")])
        _save_image(tgt, paths[(TARGET, "image")])
        _save_label(lab, spec.num_classes, paths[(TARGET, "label")])
        rel[sid] = {k: str(p.relative_to(root)) for k, p in paths.items()}

    def split(name, domain, with_labels):
        files, hashes = [], []
        for sid in ids:
            f = {"image": rel[sid][(domain, "image")]}
            f["label"] = rel[sid][(domain, "label")] if with_labels else None
            files.append(f)
            hashes.append(
                {
                    "image": _sha256(root / f["image"]),
                    "label": _sha256(root / f["label"]) if with_labels else None,
                }
            )
        return SplitInfo(name=name, ids=list(ids), files=files, sha256=hashes)

    manifest = DatasetManifest(
        spec=spec,
        spec_hash=spec.hash(),
        root=root,
        splits={
            "source-train": split("source-train", SOURCE, True),
            "target-train": split("target-train", TARGET, False),
            "target-eval": split("target-eval", TARGET, True),
        },
    )
    manifest.save()
    log.info("generated %d images per domain under %s", n, root)
    return manifest


def load_batch(manifest: DatasetManifest, split: str, ids: list[str]) -> list[DomainSample]:
    """Decode the requested samples, verifying checksums and label ranges."""
    info = manifest.split(split)
    index = {sid: k for k, sid in enumerate(info.ids)}
    domain = SOURCE if split.startswith(SOURCE) else TARGET
    out = []
    for sid in ids:
        if sid not in index:
            raise KeyError(f"id {sid!r} not in split {split!r}")
        k = index[sid]
        files, hashes = info.files[k], info.sha256[k]

        img_path = manifest.root / files["image"]
        if not img_path.exists():
            raise FileNotFoundError(f"missing file {img_path}")
        if _sha256(img_path) != hashes["image"]:
            raise ValueError(f"checksum mismatch for {img_path}")
        image = _load_image(img_path)

        label = None
        if files["label"] is not None:
            lab_path = manifest.root / files["label"]
            if not lab_path.exists():
                raise FileNotFoundError(f"missing file {lab_path}")
            if _sha256(lab_path) != hashes["label"]:
                raise ValueError(f"checksum mismatch for {lab_path}")
            label = _load_label(lab_path)
            if label.max() >= manifest.spec.num_classes:
                raise ValueError(
                    f"label value {label.max()} >= num_classes {manifest.spec.num_classes} in {lab_path}"
                )
        out.append(DomainSample(image=image, label=label, domain=domain, id=sid))
    return out


def labels_to_boundary(label: np.ndarray, thickness: int = 1) -> np.ndarray:
    """Mark pixels having a differently-labeled pixel within Chebyshev distance `thickness`."""
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    size = 2 * thickness + 1
    hi = maximum_filter(label, size=size, mode="nearest")
    lo = minimum_filter(label, size=size, mode="nearest")
    return (hi != lo).astype(np.float32)
