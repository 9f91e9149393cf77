import struct

import numpy as np
import pytest

from test_dbn import make_model
from tssrbm import modelio
from tssrbm.errors import FormatError, IoError, VersionError


def _expected_size(model):
    """Byte count of the file format, computed from the layer shapes alone."""
    size = 6 + 4 + 16 + 4
    for layer in model.layers():
        _, fields = modelio._geometry_fields(layer)
        size += 1 + 4 + 8 * len(fields)
    for i, layer in enumerate(model.layers(), start=1):
        for name, arr in layer.arrays().items():
            arr = np.asarray(arr)
            size += 4 + len(f"{i}/{name}") + 4 + 8 * arr.ndim + 8 * arr.size
    return size


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_round_trip_bit_exact(depth, tmp_path):
    model = make_model(np.random.default_rng(depth), depth=depth)
    path = tmp_path / "m.bin"
    modelio.save_model(model, path)
    back = modelio.load_model(path)
    assert back.depth == depth and (back.mean, back.std) == (model.mean, model.std)
    for a, b in zip(model.layers(), back.layers()):
        assert a.geom == b.geom
        for k in a.arrays():
            assert np.asarray(a.arrays()[k]).tobytes() == np.asarray(b.arrays()[k]).tobytes()
    modelio.save_model(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_size_and_array_count_manifest(depth):
    model = make_model(np.random.default_rng(0), depth=depth)
    raw = modelio.model_bytes(model)
    assert len(raw) == _expected_size(model)
    n_layers = struct.unpack_from("<I", raw, 6)[0]
    assert n_layers == depth
    expected_arrays = {1: 6, 2: 11, 3: 14}[depth]
    assert sum(len(l.arrays()) for l in model.layers()) == expected_arrays


def test_bias_shift_flag_survives(tmp_path):
    model = make_model(np.random.default_rng(0), depth=2)
    model.layer2.bias_shift = False
    back = modelio.model_from_bytes(modelio.model_bytes(model))
    assert back.layer2.bias_shift is False


def test_header_errors():
    raw = modelio.model_bytes(make_model(np.random.default_rng(0), depth=2))
    with pytest.raises(VersionError):
        modelio.model_from_bytes(b"SSDBN\x02" + raw[6:])
    with pytest.raises(FormatError):
        modelio.model_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        modelio.model_from_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        modelio.model_from_bytes(raw[:6] + struct.pack("<I", 7) + raw[10:])


def test_io_errors(tmp_path):
    with pytest.raises(IoError):
        modelio.load_model(tmp_path / "missing.bin")
    with pytest.raises(IoError):
        modelio.save_model(make_model(np.random.default_rng(0), depth=1), tmp_path / "no" / "dir.bin")
