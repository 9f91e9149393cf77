"""Binary model files.

Layout (all little-endian)::

    magic        6 bytes  b"SSDBN\\x01"
    n_layers     u32
    per layer:   u8 type tag, u32 n_fields, n_fields x i64 geometry fields
    mean, std    2 x f64   normalization of the training texture
    n_arrays     u32
    per array:   u32 name length, utf-8 name, u32 rank, rank x u64 dims,
                 prod(dims) x f64 values (C order)

Array names are ``"<layer>/<param>"`` with layers numbered from 1.
"""

from __future__ import annotations

import struct

import numpy as np

from .dbn import DbnModel
from .errors import FormatError, IoError, VersionError
from .ssrbm import SsRbmParams
from .tiling import ConvGeometry, TiledGeometry
from .upper import BinaryRbmParams, SsVisRbmParams

MAGIC = b"SSDBN\x01"
TAG_SSRBM, TAG_SSVIS, TAG_BRBM = 1, 2, 3


def _geometry_fields(layer) -> tuple[int, list[int]]:
    if isinstance(layer, SsRbmParams):
        g = layer.geom
        return TAG_SSRBM, [g.image_height, g.image_width, g.kernel, g.num_tilings,
                           g.filters_per_tiling]
    g = layer.geom
    fields = [g.input_maps, g.map_size, g.kernel, g.output_filters]
    if isinstance(layer, SsVisRbmParams):
        return TAG_SSVIS, fields + [int(layer.bias_shift)]
    return TAG_BRBM, fields


def model_bytes(model: DbnModel) -> bytes:
    layers = model.layers()
    out = [MAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        tag, fields = _geometry_fields(layer)
        out.append(struct.pack("<BI", tag, len(fields)))
        out.append(struct.pack(f"<{len(fields)}q", *fields))
    out.append(struct.pack("<dd", model.mean, model.std))
    arrays = [(f"{i}/{name}", np.asarray(arr, dtype=np.float64))
              for i, layer in enumerate(layers, start=1) for name, arr in layer.arrays().items()]
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated model file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(data: bytes) -> DbnModel:
    if data[:len(MAGIC)] != MAGIC:
        raise VersionError(f"bad magic {data[:len(MAGIC)]!r}; expected {MAGIC!r}")
    rd = _Reader(data)
    rd.take(len(MAGIC))
    (n_layers,) = rd.unpack("<I")
    if not 1 <= n_layers <= 3:
        raise FormatError(f"unsupported layer count {n_layers}")
    headers = []
    for _ in range(n_layers):
        tag, n_fields = rd.unpack("<BI")
        headers.append((tag, list(rd.unpack(f"<{n_fields}q"))))
    mean, std = rd.unpack("<dd")
    (n_arrays,) = rd.unpack("<I")
    arrays: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(n_arrays):
        (n_name,) = rd.unpack("<I")
        name = rd.take(n_name).decode("utf-8")
        (rank,) = rd.unpack("<I")
        dims = rd.unpack(f"<{rank}Q")
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(rd.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        layer_no, _, pname = name.partition("/")
        arrays.setdefault(int(layer_no), {})[pname] = arr
    if rd.pos != len(data):
        raise FormatError("trailing bytes after model payload")

    layers = []
    for i, (tag, f) in enumerate(headers, start=1):
        a = arrays.get(i, {})
        try:
            if tag == TAG_SSRBM:
                geom = TiledGeometry(*f)
                layers.append(SsRbmParams(geom, a["W"], a["b"], a["mu"], a["alpha"],
                                          float(a["lam"]), a["phi"]))
            elif tag == TAG_SSVIS:
                geom = ConvGeometry(*f[:4])
                layers.append(SsVisRbmParams(geom, a["U"], a["rho"], a["alpha"], a["mu"], a["b"],
                                             bias_shift=bool(f[4])))
            elif tag == TAG_BRBM:
                geom = ConvGeometry(*f[:4])
                layers.append(BinaryRbmParams(geom, a["W"], a["vbias"], a["hbias"]))
            else:
                raise FormatError(f"unknown layer tag {tag}")
        except KeyError as exc:
            raise FormatError(f"layer {i} is missing array {exc}") from None
    model = DbnModel(*layers, mean=mean, std=std)
    model.check_chain()
    return model


def save_model(model: DbnModel, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(model_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> DbnModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return model_from_bytes(data)
