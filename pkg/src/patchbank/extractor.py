"""Feature extraction: preprocessing, backbone inference, and feature packs.

Backbones are consumed as exported ONNX files whose graph outputs are the
tapped layers.  Inference prefers the onnxruntime package when it is
installed and otherwise falls back to the built-in executor, which covers the
operator subset of the supported backbone exports.  A `pixels[:stride]`
pseudo-model turns the preprocessed image itself into a single feature map,
which keeps the whole pipeline runnable without any model file.

Extracted maps can be cached on disk in FPAK containers for staged runs.
"""

from __future__ import annotations

import hashlib
import importlib.util
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError
from .features import FeatureMap
from .onnxlite import read_model, run_graph

_PACK_MAGIC = b"FPAK"
_PACK_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExtractorSpec:
    """How to turn an RGB image into feature maps."""

    model: str  # path to an .onnx file, or "pixels[:stride]"
    taps: tuple[str, ...] = ()
    native_input_size: int = 224
    scale: float = 1.0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(self.taps))
        size = self.effective_input_size
        if size < 64 or size % 2:
            raise ConfigError(
                f"effective input size round({self.native_input_size} x {self.scale}) = {size} "
                "must be even and >= 64"
            )
        if self.is_pixels:
            stride = self.pixel_stride
            if stride < 1 or size % stride:
                raise ConfigError(f"pixel stride {stride} must divide input size {size}")
        elif not self.taps:
            raise ConfigError("model extractors need at least one tap name")

    @property
    def effective_input_size(self) -> int:
        return int(round(self.native_input_size * self.scale))

    @property
    def is_pixels(self) -> bool:
        return self.model == "pixels" or self.model.startswith("pixels:")

    @property
    def pixel_stride(self) -> int:
        return int(self.model.split(":", 1)[1]) if ":" in self.model else 1


def preprocess(image: np.ndarray, spec: ExtractorSpec) -> np.ndarray:
    """Resize, scale to [0,1], normalize per channel; returns (3, s, s) float32."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"expected a non-empty RGB image, got shape {image.shape}")
    size = spec.effective_input_size
    if image.shape[:2] != (size, size):
        image = cv2.resize(image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    x = image.astype(np.float32) / 255.0
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def extractor_fingerprint(spec: ExtractorSpec) -> str:
    """Identity of (model bytes, taps, input size); stable across runs."""
    h = hashlib.sha256()
    if spec.is_pixels:
        h.update(spec.model.encode())
    else:
        h.update(Path(spec.model).read_bytes())
    h.update(json.dumps([list(spec.taps), spec.effective_input_size], sort_keys=True).encode())
    return h.hexdigest()[:32]


class _OnnxBackend:
    """One loaded model; session reuse across images, not across processes."""

    def __init__(self, spec: ExtractorSpec):
        self.spec = spec
        path = Path(spec.model)
        if not path.is_file():
            raise ConfigError(f"model file {path} does not exist")
        if importlib.util.find_spec("onnxruntime") is not None:
            import onnxruntime as ort

            opts = ort.SessionOptions()
            opts.intra_op_num_threads = 1
            opts.inter_op_num_threads = 1
            self._session = ort.InferenceSession(
                str(path), sess_options=opts, providers=["CPUExecutionProvider"]
            )
            available = [o.name for o in self._session.get_outputs()]
            self._input_name = self._session.get_inputs()[0].name
            self._graph = None
        else:
            model = read_model(path)
            self._graph = model.graph
            available = [name for name, _ in model.graph.outputs]
            feeds = [name for name, _ in model.graph.inputs if name not in model.graph.initializers]
            self._input_name = feeds[0] if feeds else "input"
            self._session = None
        missing = [t for t in spec.taps if t not in available]
        if missing:
            raise ConfigError(
                f"taps {missing} not found among model outputs {available} in {path}"
            )

    def run(self, tensor: np.ndarray) -> list[np.ndarray]:
        batch = tensor[None].astype(np.float32)
        if self._session is not None:
            outs = self._session.run(list(self.spec.taps), {self._input_name: batch})
        else:
            produced = run_graph(self._graph, {self._input_name: batch}, list(self.spec.taps))
            outs = [produced[t] for t in self.spec.taps]
        return [np.asarray(o)[0] for o in outs]


_BACKEND_CACHE: dict[tuple, _OnnxBackend] = {}


def _pixels_maps(spec: ExtractorSpec, tensor: np.ndarray) -> list[FeatureMap]:
    stride = spec.pixel_stride
    c, h, w = tensor.shape
    if stride > 1:
        tensor = tensor.reshape(c, h // stride, stride, w // stride, stride).mean(
            axis=(2, 4), dtype=np.float32
        )
    return [FeatureMap(layer_name="pixels", data=tensor)]


def run_extractor(spec: ExtractorSpec, tensor: np.ndarray) -> list[FeatureMap]:
    """Run one preprocessed (3, s, s) tensor; one FeatureMap per tap, in order."""
    tensor = np.ascontiguousarray(tensor, dtype=np.float32)
    if tensor.ndim != 3:
        raise ValueError(f"expected a (c, h, w) tensor, got shape {tensor.shape}")
    if spec.is_pixels:
        return _pixels_maps(spec, tensor)
    key = (spec.model, spec.taps)
    backend = _BACKEND_CACHE.get(key)
    if backend is None:
        backend = _OnnxBackend(spec)
        _BACKEND_CACHE[key] = backend
    try:
        outputs = backend.run(tensor)
    except (FormatError, ConfigError):
        raise
    except Exception as exc:
        raise RuntimeError(f"inference failed for {spec.model}: {exc}") from exc
    return [
        FeatureMap(layer_name=tap, data=out) for tap, out in zip(spec.taps, outputs)
    ]


def extract_image(image: np.ndarray, spec: ExtractorSpec) -> list[FeatureMap]:
    return run_extractor(spec, preprocess(image, spec))


@dataclass(frozen=True)
class FeaturePack:
    image_id: str
    fingerprint: str
    maps: tuple[FeatureMap, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))


def write_pack(pack: FeaturePack, path) -> None:
    """FPAK container: JSON header + concatenated float32 LE channel-major tensors."""
    header = {
        "image_id": pack.image_id,
        "fingerprint": pack.fingerprint,
        "layers": [
            {"name": m.layer_name, "c": m.channels, "h": m.height, "w": m.width}
            for m in pack.maps
        ],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PACK_MAGIC)
        fh.write(struct.pack("<II", _PACK_VERSION, len(payload)))
        fh.write(payload)
        for m in pack.maps:
            fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())


def read_pack(path) -> FeaturePack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _PACK_MAGIC:
        raise FormatError(f"{path}: not an FPAK feature pack")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != _PACK_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported pack version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    offset = 12 + header_len
    maps = []
    for layer in header["layers"]:
        count = layer["c"] * layer["h"] * layer["w"]
        raw = blob[offset : offset + count * 4]
        if len(raw) != count * 4:
            raise FormatError(f"{path}: truncated tensor for layer {layer['name']!r}")
        data = np.frombuffer(raw, dtype="<f4").reshape(layer["c"], layer["h"], layer["w"])
        maps.append(FeatureMap(layer_name=layer["name"], data=data.copy()))
        offset += count * 4
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return FeaturePack(
        image_id=header["image_id"], fingerprint=header["fingerprint"], maps=tuple(maps)
    )


def read_packs(paths) -> list[FeaturePack]:
    """Load a batch of packs, insisting on one shared extractor fingerprint."""
    packs = [read_pack(p) for p in paths]
    if packs:
        reference = packs[0].fingerprint
        for path, pack in zip(paths, packs):
            if pack.fingerprint != reference:
                raise FormatError(
                    f"{path}: fingerprint {pack.fingerprint} does not match the "
                    f"batch fingerprint {reference}"
                )
    return packs
