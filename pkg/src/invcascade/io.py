"""On-disk formats: binary feature tensors, JSON banks/models/annotations/tubes,
proposal CSVs and run configuration. Every write is atomic."""

from __future__ import annotations

import base64
import contextlib
import csv
import dataclasses
import io
import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .cascade import CascadeConfig, ImageMaps, Proposal
from .featmap import FeatureMap, PyramidSpec
from .geometry import Box, as_boxes
from .refine import EdgeMap, RefineConfig
from .scoring import LinearModel, MiningConfig, TrainConfig
from .tubes import FrameProposals, GroundTruthTube, Tube
from .windowing import ShapeBank, WindowShape

MAGIC = b"FMAP"
TENSOR_VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHHIIId")
MODEL_FORMAT = "invcascade-linear-model"


class FormatError(ValueError):
    """Malformed input file. ``code`` names the failure for callers and exit codes."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class TruncatedError(FormatError):
    code = "truncated"


class NonFiniteError(FormatError):
    code = "non-finite"


class SchemaError(FormatError):
    code = "schema"


@contextlib.contextmanager
def atomic_open(path, mode="w", **kwargs):
    """Write to a temporary sibling file and rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(obj, path) -> None:
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


# -- tensors -----------------------------------------------------------------

def encode_tensor(fm: FeatureMap, dtype_code: int = DTYPE_F32) -> bytes:
    if fm.channels < 1:
        raise FormatError("cannot write a zero-channel tensor")
    tag = fm.layer_tag.encode("utf-8")
    header = _HEADER.pack(MAGIC, TENSOR_VERSION, dtype_code, fm.channels, fm.height,
                          fm.width, float(fm.scale_factor))
    payload = np.ascontiguousarray(fm.data, dtype=_DTYPES[dtype_code]).tobytes()
    return header + struct.pack("<H", len(tag)) + tag + payload


def decode_tensor(buf: bytes, name: str = "<bytes>") -> FeatureMap:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{name}: not a feature tensor (bad magic)")
    if len(buf) < _HEADER.size + 2:
        raise TruncatedError(f"{name}: truncated header")
    _, version, dtype_code, c, h, w, scale = _HEADER.unpack_from(buf)
    if version != TENSOR_VERSION:
        raise FormatError(f"{name}: unsupported tensor version {version}")
    if dtype_code not in _DTYPES:
        raise FormatError(f"{name}: unsupported dtype code {dtype_code}")
    if c == 0 or h == 0 or w == 0:
        raise FormatError(f"{name}: empty tensor dimensions {c}x{h}x{w}")
    if not (np.isfinite(scale) and scale > 0):
        raise FormatError(f"{name}: invalid scale factor {scale}")
    pos = _HEADER.size
    (tag_len,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if len(buf) < pos + tag_len:
        raise TruncatedError(f"{name}: truncated layer tag")
    tag = buf[pos:pos + tag_len].decode("utf-8")
    pos += tag_len
    dtype = _DTYPES[dtype_code]
    expected = c * h * w * dtype.itemsize
    if len(buf) - pos < expected:
        raise TruncatedError(f"{name}: payload holds {len(buf) - pos} bytes, expected {expected}")
    if len(buf) - pos > expected:
        raise FormatError(f"{name}: {len(buf) - pos - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=c * h * w, offset=pos).reshape(c, h, w)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name}: payload contains NaN or Inf")
    return FeatureMap(data.astype(dtype.newbyteorder("=")), scale, tag)


def write_tensor(fm: FeatureMap, path, dtype_code: int = DTYPE_F32) -> None:
    blob = encode_tensor(fm, dtype_code)
    with atomic_open(path, "wb") as fh:
        fh.write(blob)


def read_tensor(path) -> FeatureMap:
    return decode_tensor(Path(path).read_bytes(), str(path))


_TENSOR_NAME = re.compile(r"^(?P<tag>.+)_s(?P<scale>\d+)\.fmap$")
EDGE_TAG = "EDGE"


def tensor_name(tag: str, scale_id: int) -> str:
    return f"{tag}_s{scale_id}.fmap"


def write_image_maps(image: ImageMaps, root) -> None:
    """Store every layer as ``root/<image_id>/<tag>_s<k>.fmap``."""
    base = Path(root) / image.image_id
    for tag, maps in image.layers.items():
        for k, fm in enumerate(maps):
            write_tensor(fm, base / tensor_name(tag, k))
    for k, em in enumerate(image.edges or []):
        fm = FeatureMap(em.values[None].astype(np.float32), em.scale_factor, EDGE_TAG)
        write_tensor(fm, base / tensor_name(EDGE_TAG, k))


def read_image_maps(root, image_id: str, width: int, height: int) -> ImageMaps:
    base = Path(root) / image_id
    if not base.is_dir():
        raise FileNotFoundError(f"no tensors for image {image_id!r} under {root}")
    found: dict[str, dict[int, FeatureMap]] = {}
    for f in sorted(base.iterdir()):
        m = _TENSOR_NAME.match(f.name)
        if m:
            found.setdefault(m["tag"], {})[int(m["scale"])] = read_tensor(f)
    layers = {}
    for tag, by_scale in found.items():
        if sorted(by_scale) != list(range(len(by_scale))):
            raise FormatError(f"{base}: layer {tag} has gaps in its scale indices")
        layers[tag] = [by_scale[k] for k in range(len(by_scale))]
    edges = None
    if EDGE_TAG in layers:
        edges = [EdgeMap.from_feature_map(fm) for fm in layers.pop(EDGE_TAG)]
    if not layers:
        raise FormatError(f"{base}: no feature tensors")
    return ImageMaps(image_id, width, height, layers, edges)


# -- annotations ---------------------------------------------------------------

def _check_box(box, w, h, where) -> list[float]:
    try:
        b = [float(v) for v in box]
        Box(*b)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: bad box {box!r} ({exc})") from None
    if b[0] < 0 or b[1] < 0 or b[2] > w or b[3] > h:
        raise SchemaError(f"{where}: box {b} outside the {w}x{h} image")
    return b


def read_annotations(path) -> dict:
    """Validated annotation file: ``{"images": [...], "videos": [...]}``."""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    images = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            iid, w, h = str(rec["id"]), int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{path}: image #{i} needs id, width and height") from None
        boxes = [_check_box(b, w, h, f"{path}: image {iid}") for b in rec.get("boxes", [])]
        images.append({"id": iid, "width": w, "height": h, "boxes": boxes})
    videos = []
    for i, rec in enumerate(doc.get("videos", [])):
        try:
            vid, w, h = str(rec["id"]), int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{path}: video #{i} needs id, width and height") from None
        raw = rec.get("tubes")
        if raw is None and "tube" in rec:
            raw = [rec["tube"]]
        tubes = []
        for tube in raw or []:
            tubes.append([None if b is None else _check_box(b, w, h, f"{path}: video {vid}")
                          for b in tube])
        frames = [str(f) for f in rec.get("frames", [])]
        videos.append({"id": vid, "width": w, "height": h, "frames": frames, "tubes": tubes})
    return {"images": images, "videos": videos}


def write_annotations(images: list[dict], videos: list[dict], path) -> None:
    write_json({"images": images, "videos": videos}, path)


def gt_tubes_of(video: dict) -> list[GroundTruthTube]:
    return [GroundTruthTube(t) for t in video["tubes"]]


# -- shape bank and models -------------------------------------------------------

def bank_to_json(bank: ShapeBank) -> dict:
    return {"pool_bound": bank.pool_bound, "count": bank.count,
            "shapes": [[s.w, s.h] for s in bank.shapes]}


def bank_from_json(doc) -> ShapeBank:
    try:
        shapes = tuple(WindowShape(int(w), int(h)) for w, h in doc["shapes"])
        return ShapeBank(shapes, int(doc.get("pool_bound", 20)), int(doc.get("count", len(shapes))))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid shape bank: {exc}") from None


def write_bank(bank: ShapeBank, path) -> None:
    write_json(bank_to_json(bank), path)


def read_bank(path) -> ShapeBank:
    return bank_from_json(read_json(path))


def model_to_json(model: LinearModel) -> dict:
    raw = np.asarray(model.weights, dtype="<f8").tobytes()
    return {
        "format": MODEL_FORMAT,
        "version": 1,
        "scale_id": model.scale_id,
        "stage": model.stage,
        "descriptor": {"pyramid": list(model.pyramid.levels), "size_bias": model.size_bias},
        "bias": model.bias,
        "dim": len(model.weights),
        "weights": base64.b64encode(raw).decode("ascii"),
    }


def model_from_json(doc, channels: int | None = None) -> LinearModel:
    try:
        if doc.get("format") != MODEL_FORMAT:
            raise SchemaError("not a linear model file")
        raw = base64.b64decode(doc["weights"], validate=True)
        if len(raw) % 8:
            raise SchemaError("weight payload is not a whole number of 8-byte reals")
        w = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if len(w) != int(doc["dim"]):
            raise SchemaError(f"weight count {len(w)} differs from dim {doc['dim']}")
        desc = doc["descriptor"]
        model = LinearModel(w, float(doc["bias"]), int(doc["scale_id"]),
                            PyramidSpec(tuple(desc["pyramid"])), bool(desc["size_bias"]),
                            int(doc.get("stage", 1)))
        c = model.channels
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid model file: {exc}") from None
    if channels is not None and c != channels:
        raise SchemaError(f"model expects {c} channels, feature map has {channels}")
    return model


def write_model(model: LinearModel, path) -> None:
    write_json(model_to_json(model), path)


def read_model(path) -> LinearModel:
    return model_from_json(read_json(path))


def model_name(stage: int, scale_id: int) -> str:
    return f"stage{stage}_scale{scale_id}.json"


def read_models(root) -> dict[int, list[LinearModel]]:
    """Load ``stage<S>_scale<K>.json`` files into ``{stage: [model per scale]}``."""
    out: dict[int, dict[int, LinearModel]] = {}
    for f in sorted(Path(root).glob("stage*_scale*.json")):
        m = re.match(r"stage(\d+)_scale(\d+)\.json$", f.name)
        if m:
            out.setdefault(int(m[1]), {})[int(m[2])] = read_model(f)
    models = {}
    for stage, by_scale in out.items():
        if sorted(by_scale) != list(range(len(by_scale))):
            raise SchemaError(f"{root}: stage {stage} models have gaps in scale indices")
        models[stage] = [by_scale[k] for k in range(len(by_scale))]
    return models


# -- configuration -------------------------------------------------------------

_SECTIONS = {"cascade": CascadeConfig, "refine": RefineConfig,
             "mining": MiningConfig, "train": TrainConfig}


def read_config(path=None) -> dict:
    """Run configuration; section keys mirror the config dataclass field names."""
    doc = {} if path is None else read_json(path)
    if not isinstance(doc, dict):
        raise SchemaError("configuration must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise SchemaError(f"unknown configuration sections: {sorted(unknown)}")
    out = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - fields
        if bad:
            raise SchemaError(f"unknown keys in [{name}]: {sorted(bad)}")
        if name == "cascade" and "layers" in section:
            section = dict(section, layers=tuple(section["layers"]))
        try:
            out[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"[{name}]: {exc}") from None
    return out


# -- proposals and tubes -------------------------------------------------------

CSV_HEADER = ["image_id", "rank", "x0", "y0", "x1", "y1", "score"]


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def write_proposals_csv(results: dict[str, list[Proposal]], path) -> None:
    """Rows ordered by image id, then rank (1-based)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for image_id in sorted(results):
        for rank, p in enumerate(results[image_id], start=1):
            b = p.box
            writer.writerow([image_id, rank, _fmt(b.x0), _fmt(b.y0), _fmt(b.x1), _fmt(b.y1),
                             _fmt(p.score)])
    with atomic_open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_proposals_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``{image_id: (boxes ranked, scores)}``."""
    rows: dict[str, list[tuple[int, list[float], float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise SchemaError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for n, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise SchemaError(f"{path}:{n}: expected {len(CSV_HEADER)} fields")
            try:
                rank = int(row[1])
                box = [float(v) for v in row[2:6]]
                s = float(row[6])
            except ValueError:
                raise SchemaError(f"{path}:{n}: non-numeric field") from None
            rows.setdefault(row[0], []).append((rank, box, s))
    out = {}
    for image_id, items in rows.items():
        items.sort(key=lambda r: r[0])
        out[image_id] = (as_boxes([r[1] for r in items]), np.array([r[2] for r in items]))
    return out


def frames_from_csv(path) -> list[FrameProposals]:
    """A per-video proposal CSV whose image_id column holds the frame index."""
    data = read_proposals_csv(path)
    try:
        keys = sorted(data, key=int)
    except ValueError:
        raise SchemaError(f"{path}: image_id must be an integer frame index") from None
    return [FrameProposals(int(k), *data[k]) for k in keys]


def tubes_to_json(videos: dict[str, list[Tube]]) -> dict:
    out = []
    for vid in sorted(videos):
        out.append({
            "video_id": vid,
            "tubes": [
                {"path_score": float(t.path_score),
                 "boxes": [[int(f)] + [float(v) for v in b] for f, b in zip(t.frames, t.boxes)]}
                for t in videos[vid]
            ],
        })
    return {"videos": out}


def tubes_from_json(doc) -> dict[str, list[Tube]]:
    try:
        out = {}
        for v in doc["videos"]:
            tubes = []
            for t in v["tubes"]:
                rows = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 5)
                tubes.append(Tube(rows[:, 1:], float(t["path_score"]),
                                  [int(f) for f in rows[:, 0]]))
            out[str(v["video_id"])] = tubes
        return out
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"invalid tube file: {exc}") from None


def write_tubes(videos: dict[str, list[Tube]], path) -> None:
    write_json(tubes_to_json(videos), path)


def read_tubes(path) -> dict[str, list[Tube]]:
    return tubes_from_json(read_json(path))


def write_curve_csv(rows, path, header=("axis", "value")) -> None:
    """Rows of ``(axis, value)`` pairs (or longer tuples) after a header line."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    with atomic_open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
