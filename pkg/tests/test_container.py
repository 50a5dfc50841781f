import json
import struct
import zlib

import numpy as np
import pytest

from supr.errors import ContainerError, InvalidModelError, SuprError
from supr.io.container import (
    container_records,
    decode_container,
    encode_container,
    load_container,
    read_records,
    save_container,
)
from supr.kinematics import PoseState
from supr.model import forward
from supr.parts import separate
from supr.synth import synth_model

from container_cases import corruption_cases


def assert_bitwise_equal(a, b):
    meta_a, arrays_a = container_records(a)
    meta_b, arrays_b = container_records(b)
    assert meta_a == meta_b
    assert arrays_a.keys() == arrays_b.keys()
    for name in arrays_a:
        assert arrays_a[name].dtype == arrays_b[name].dtype, name
        assert arrays_a[name].tobytes() == arrays_b[name].tobytes(), name


def test_round_trip_toy_is_bitwise(tmp_path, toy):
    path = tmp_path / "toy.supr"
    save_container(toy, path)
    loaded = load_container(path)
    assert_bitwise_equal(toy, loaded)
    assert np.array_equal(loaded.template, toy.template)
    assert (loaded.skinning_weights != toy.skinning_weights).nnz == 0
    assert path.read_bytes() == encode_container(loaded)


def test_round_trip_full_size(full):
    loaded = decode_container(encode_container(full))
    assert_bitwise_equal(full, loaded)
    rng = np.random.default_rng(0)
    pose = PoseState(0.3 * rng.normal(size=(75, 3)))
    assert np.array_equal(forward(full, None, pose).vertices, forward(loaded, None, pose).vertices)


def test_round_trip_part_model_with_double_precision_regressor(full):
    part = separate(full, full.part_specs["head"]).model
    meta, arrays = container_records(part)
    assert arrays["regressor/data"].dtype.str == "<f8"
    assert arrays["template"].dtype.str == "<f4"
    assert_bitwise_equal(part, decode_container(encode_container(part)))


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_random_containers(seed):
    rng = np.random.default_rng(seed)
    m = synth_model(seed, int(rng.integers(10, 150)), int(rng.integers(2, 10)), foot_net=bool(seed % 2) and None)
    assert_bitwise_equal(m, decode_container(encode_container(m)))


def test_tensors_are_64_byte_aligned(toy):
    data = encode_container(toy)
    header_len = struct.unpack_from("<Q", data, 8)[0]
    manifest = json.loads(data[24 : 24 + header_len])
    base = -(-(24 + header_len) // 64) * 64
    assert base % 64 == 0
    for entry in manifest["tensors"].values():
        assert entry["offset"] % 64 == 0
    assert manifest["format_version"] == 1
    assert manifest["metadata"]["n_vertices"] == toy.n_vertices


def test_manifest_is_canonical_json(toy):
    data = encode_container(toy)
    header_len = struct.unpack_from("<Q", data, 8)[0]
    header = data[24 : 24 + header_len]
    assert header == json.dumps(json.loads(header), sort_keys=True, separators=(",", ":")).encode()


@pytest.mark.parametrize("case", range(20))
def test_corruption_rejected_with_category(toy, case):
    name, data, category = corruption_cases(toy)[case]
    with pytest.raises(SuprError) as info:
        decode_container(data)
    assert info.value.category == category, name


def test_truncated_file_leaves_no_container(tmp_path, toy):
    path = tmp_path / "cut.supr"
    path.write_bytes(encode_container(toy)[:-1])
    with pytest.raises(ContainerError):
        load_container(path)


def _f32(*values):
    return b"".join(struct.pack("<f", v) for v in values)


def _i32(*values):
    return b"".join(struct.pack("<i", v) for v in values)


def minimal_fixture() -> bytes:
    """Two joints, four vertices, written out field by field.

    Vertices sit at the origin and on the three unit axes. Joint 0 is regressed
    from vertex 0 and joint 1 from vertex 1; each vertex is skinned to a single
    joint. Shape component 0 moves vertex 3 by +0.5 along z. Joint 1's corrective
    moves vertex 1 along x by 0.5 per unit of its quaternion x feature.
    """
    tensors = {
        "expression/basis": ("<f4", [4, 3, 1], _f32(*[0.0] * 12)),
        "expression/mean": ("<f4", [4, 3], _f32(*[0.0] * 12)),
        "faces": ("<i4", [2, 3], _i32(0, 1, 2, 0, 1, 3)),
        "part_labels": ("<i4", [4], _i32(0, 0, 0, 0)),
        "pose/1/coeffs": ("<f4", [1, 3, 4], _f32(0.0, 0.5, 0.0, 0.0, *[0.0] * 8)),
        "pose/1/vertices": ("<i4", [1], _i32(1)),
        "pose/1/weights": ("<f4", [1], _f32(1.0)),
        "regressor/data": ("<f4", [2], _f32(1.0, 1.0)),
        "regressor/indices": ("<i4", [2], _i32(0, 1)),
        "regressor/indptr": ("<i4", [3], _i32(0, 1, 2)),
        "shape/basis": ("<f4", [4, 3, 1], _f32(*[0.0] * 11, 0.5)),
        "shape/mean": ("<f4", [4, 3], _f32(*[0.0] * 12)),
        "skinning/data": ("<f4", [4], _f32(1.0, 1.0, 1.0, 1.0)),
        "skinning/indices": ("<i4", [4], _i32(0, 1, 1, 1)),
        "skinning/indptr": ("<i4", [5], _i32(0, 1, 2, 3, 4)),
        "template": ("<f4", [4, 3], _f32(0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1)),
    }
    directory, body = {}, b""
    for i, name in enumerate(sorted(tensors)):
        dtype, shape, raw = tensors[name]
        assert len(raw) <= 64
        directory[name] = {"crc32": zlib.crc32(raw), "dtype": dtype, "length": len(raw), "offset": 64 * i, "shape": shape}
        body += raw + b"\0" * (64 - len(raw))
    metadata = {
        "foot_nets": {}, "joint_names": ["root", "tip"], "kind": "full",
        "label_names": ["body", "head", "hand-L", "hand-R", "foot-L", "foot-R"],
        "n_expression": 1, "n_joints": 2, "n_shape": 1, "n_vertices": 4,
        "neighbor_sets": [[], [1]], "parents": [-1, 0], "parts": {}, "pose_blocks": [1],
    }  # fmt: skip
    header = json.dumps(
        {"format_version": 1, "metadata": metadata, "tensors": directory}, sort_keys=True, separators=(",", ":")
    ).encode()
    head = b"SUPRCTNR" + struct.pack("<QII", len(header), zlib.crc32(header), 0) + header
    return head + b"\0" * (-len(head) % 64) + body


def test_hand_built_fixture_loads_to_known_values():
    data = minimal_fixture()
    assert data[:8].hex() == "5355505243544e52"
    m = decode_container(data)
    np.testing.assert_array_equal(m.template, [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(m.rest_joints, [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 1, 3]])
    assert m.tree.parents == (-1, 0) and m.tree.neighbor_sets == ((), (1,))
    np.testing.assert_array_equal(m.shape_space.offsets([1.0])[3], [0.0, 0.0, 0.5])
    # half turn about x at joint 1: feature (-1, 1, 0, 0) moves vertex 1 by +0.5 x before skinning
    out = forward(m, None, PoseState([[0, 0, 0], [np.pi, 0, 0]])).vertices
    np.testing.assert_allclose(out[1], [1.5, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out[2], [0.0, -1.0, 0.0], atol=1e-15)
    # the writer produces exactly the documented bytes
    assert encode_container(m) == data


def test_reader_returns_arrays_without_validation(toy):
    meta, arrays = read_records(encode_container(toy))
    assert meta["n_joints"] == toy.n_joints
    assert arrays["template"].shape == (toy.n_vertices, 3)
